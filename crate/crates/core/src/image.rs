//! Image buffers for renders, templates and image-space scores.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageKind {
    /// Rendered colors; nominally in [0, 1], clamped only when encoded.
    Radiance,
    /// Image-space vectors (scores, adjoints); unconstrained.
    Gradient,
}

/// `H x W x 3` buffer, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    kind: ImageKind,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn zeros(height: usize, width: usize, kind: ImageKind) -> Self {
        Self::filled(height, width, kind, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, kind: ImageKind, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        ImageBuffer {
            height,
            width,
            kind,
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, kind: ImageKind, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(height * width * 3, data.len()));
        }
        Ok(ImageBuffer {
            height,
            width,
            kind,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn kind(&self) -> ImageKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: ImageKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ImageBuffer) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, s: f64) -> ImageBuffer {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Elementwise `f(self, other)`; shapes must match.
    pub fn zip_map(&self, other: &ImageBuffer, f: impl Fn(f64, f64) -> f64) -> Result<ImageBuffer> {
        self.same_shape(other)?;
        Ok(ImageBuffer {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> Result<f64> {
        self.same_shape(other)?;
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copy of the rectangle `rows x cols` starting at (`row0`, `col0`).
    pub fn crop(&self, rect: Rect) -> Result<ImageBuffer> {
        if rect.row0 + rect.rows > self.height || rect.col0 + rect.cols > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {rect:?} outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(rect.rows * rect.cols * 3);
        for r in rect.row0..rect.row0 + rect.rows {
            let start = 3 * (r * self.width + rect.col0);
            data.extend_from_slice(&self.data[start..start + 3 * rect.cols]);
        }
        Ok(ImageBuffer {
            height: rect.rows,
            width: rect.cols,
            kind: self.kind,
            data,
        })
    }

    /// Binary PPM (P6), 8-bit; values are clamped to [0, 1] and rounded.
    pub fn encode_ppm(&self) -> Result<Vec<u8>> {
        if self.kind != ImageKind::Radiance {
            return Err(Error::InvalidArgument(
                "gradient buffers are not written as images".into(),
            ));
        }
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        Ok(out)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_ppm()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
        // Header: magic, width, height, maxval separated by whitespace.
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(Error::Format(format!(
                "unsupported PPM magic {}",
                fields[0]
            )));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
        }
        let n = width * height * 3;
        let payload = bytes.get(pos..).unwrap_or(&[]);
        if payload.len() < n {
            return Err(Error::Truncated {
                expected: n,
                found: payload.len(),
            });
        }
        let data = payload[..n].iter().map(|&b| b as f64 / 255.0).collect();
        ImageBuffer::from_vec(height, width, ImageKind::Radiance, data)
    }

    /// Concatenates same-height images left to right.
    pub fn hstack(images: &[ImageBuffer]) -> Result<ImageBuffer> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("no images to stack".into()))?;
        let h = first.height;
        if images.iter().any(|im| im.height != h) {
            return Err(Error::InvalidArgument("images differ in height".into()));
        }
        let w: usize = images.iter().map(|im| im.width).sum();
        let mut out = ImageBuffer::zeros(h, w, first.kind);
        let mut col0 = 0;
        for im in images {
            for r in 0..h {
                for c in 0..im.width {
                    out.set_pixel(r, col0 + c, im.pixel(r, c));
                }
            }
            col0 += im.width;
        }
        Ok(out)
    }
}

/// Pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}
