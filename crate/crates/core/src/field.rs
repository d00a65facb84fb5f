//! Voxel radiance field: the optimized 3D parameters.
//!
//! Raw parameters are unconstrained `f32` values on an `N x N x N` grid of
//! cell centers (x fastest). Density is `softplus(raw)` and color is
//! `sigmoid(raw)`; both activations are applied at the nodes, and sampling
//! interpolates the activated values trilinearly.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::rng::{stream, stream_rng};
use crate::{Error, Result};

pub const FIELD_MAGIC: &[u8; 4] = b"JLAB";
pub const FIELD_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 6 * 8;

/// Density produced by [`InitMode::Constant`].
pub const INIT_DENSITY: f64 = 0.01;

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Inverse of [`sigmoid`] for `y` in `(0, 1)`.
pub fn logit(y: f64) -> f64 {
    (y / (1.0 - y)).ln()
}

/// Axis-aligned bounding box in world units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Aabb {
    fn default() -> Self {
        Aabb {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }
}

impl Aabb {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Radius of the smallest origin-centred sphere enclosing the box.
    pub fn circumradius(&self) -> f64 {
        (0..3)
            .map(|a| {
                let m = self.min[a].abs().max(self.max[a].abs());
                m * m
            })
            .sum::<f64>()
            .sqrt()
    }

    fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.min[a].is_finite() && self.max[a].is_finite() && self.min[a] < self.max[a]) {
                return Err(Error::InvalidArgument(format!("degenerate bbox {self:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    Constant,
    SeededNoise,
}

/// The 3D scene parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    resolution: usize,
    bbox: Aabb,
    raw_density: Vec<f32>,
    /// Cell-major, channel innermost: `raw_color[3 * cell + c]`.
    raw_color: Vec<f32>,
}

impl VoxelField {
    pub fn new(resolution: usize, init: InitMode, seed: u64) -> Result<Self> {
        Self::with_bbox(resolution, Aabb::default(), init, seed)
    }

    pub fn with_bbox(resolution: usize, bbox: Aabb, init: InitMode, seed: u64) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidArgument(format!(
                "field resolution must be >= 2, got {resolution}"
            )));
        }
        bbox.validate()?;
        let cells = resolution.pow(3);
        let d0 = softplus_inv(INIT_DENSITY) as f32;
        let mut raw_density = vec![d0; cells];
        let mut raw_color = vec![0.0f32; cells * 3];
        if init == InitMode::SeededNoise {
            let mut rng = stream_rng(seed, stream::FIELD_INIT, 0);
            for v in raw_density.iter_mut().chain(raw_color.iter_mut()) {
                *v += rng.random_range(-0.1f32..=0.1f32);
            }
        }
        Ok(VoxelField {
            resolution,
            bbox,
            raw_density,
            raw_color,
        })
    }

    /// Builds a field from explicit raw arrays.
    pub fn from_raw(
        resolution: usize,
        bbox: Aabb,
        raw_density: Vec<f32>,
        raw_color: Vec<f32>,
    ) -> Result<Self> {
        if resolution < 2 {
            return Err(Error::InvalidArgument(format!(
                "field resolution must be >= 2, got {resolution}"
            )));
        }
        bbox.validate()?;
        let cells = resolution.pow(3);
        if raw_density.len() != cells {
            return Err(Error::shape(cells, raw_density.len()));
        }
        if raw_color.len() != 3 * cells {
            return Err(Error::shape(3 * cells, raw_color.len()));
        }
        if raw_density.iter().chain(&raw_color).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw field parameters".into()));
        }
        Ok(VoxelField {
            resolution,
            bbox,
            raw_density,
            raw_color,
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn cells(&self) -> usize {
        self.raw_density.len()
    }

    pub fn raw_density(&self) -> &[f32] {
        &self.raw_density
    }

    pub fn raw_color(&self) -> &[f32] {
        &self.raw_color
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.resolution * (y + self.resolution * z)
    }

    /// World position of a cell center.
    pub fn cell_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let ijk = [x, y, z];
        std::array::from_fn(|a| {
            let h = (self.bbox.max[a] - self.bbox.min[a]) / self.resolution as f64;
            self.bbox.min[a] + (ijk[a] as f64 + 0.5) * h
        })
    }

    pub fn set_raw(&mut self, cell: usize, density: f32, color: [f32; 3]) {
        self.raw_density[cell] = density;
        self.raw_color[3 * cell..3 * cell + 3].copy_from_slice(&color);
    }

    /// Activated density and color at a point.
    ///
    /// Points outside the bbox are empty space with black color.
    pub fn sample(&self, point: [f64; 3]) -> Result<(f64, [f64; 3])> {
        if point.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite point {point:?}"
            )));
        }
        let Some(stencil) = Stencil::locate(self.resolution, &self.bbox, point) else {
            return Ok((0.0, [0.0; 3]));
        };
        let mut density = 0.0;
        let mut color = [0.0; 3];
        for (&cell, &w) in stencil.cells.iter().zip(&stencil.weights) {
            density += w * softplus(self.raw_density[cell] as f64);
            for c in 0..3 {
                color[c] += w * sigmoid(self.raw_color[3 * cell + c] as f64);
            }
        }
        Ok((density, color))
    }

    pub fn zero_gradient(&self) -> FieldGradient {
        FieldGradient {
            d_raw_density: vec![0.0; self.cells()],
            d_raw_color: vec![0.0; 3 * self.cells()],
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(HEADER_LEN + 16 * self.cells());
        buf.extend_from_slice(FIELD_MAGIC);
        buf.extend_from_slice(&FIELD_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        for v in self.bbox.min.iter().chain(&self.bbox.max) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.raw_density.iter().chain(&self.raw_color) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != FIELD_MAGIC {
            return Err(Error::Format(format!(
                "bad magic bytes {:?}, expected {:?}",
                &bytes[..4],
                FIELD_MAGIC
            )));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FIELD_VERSION {
            return Err(Error::Format(format!(
                "unsupported field version {version}"
            )));
        }
        let resolution = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let f64_at =
            |i: usize| f64::from_le_bytes(bytes[10 + 8 * i..18 + 8 * i].try_into().unwrap());
        let bbox = Aabb {
            min: [f64_at(0), f64_at(1), f64_at(2)],
            max: [f64_at(3), f64_at(4), f64_at(5)],
        };
        if resolution < 2 {
            return Err(Error::Format(format!("resolution {resolution} in header")));
        }
        let cells = resolution
            .checked_pow(3)
            .ok_or_else(|| Error::Format(format!("resolution {resolution} overflows")))?;
        let expected = HEADER_LEN + 16 * cells;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        let mut floats = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let raw_density: Vec<f32> = floats.by_ref().take(cells).collect();
        let raw_color: Vec<f32> = floats.collect();
        VoxelField::from_raw(resolution, bbox, raw_density, raw_color)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

/// Trilinear stencil: eight cells and their weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub cells: [usize; 8],
    pub weights: [f64; 8],
}

impl Stencil {
    /// Returns `None` outside the bbox. Between the bbox face and the outer
    /// cell centers the value is held constant.
    #[inline]
    pub fn locate(n: usize, bbox: &Aabb, p: [f64; 3]) -> Option<Stencil> {
        if !bbox.contains(p) {
            return None;
        }
        let mut i0 = [0usize; 3];
        let mut f = [0.0f64; 3];
        let nf = n as f64;
        for a in 0..3 {
            let extent = bbox.max[a] - bbox.min[a];
            let u = ((p[a] - bbox.min[a]) / extent * nf - 0.5).clamp(0.0, nf - 1.0);
            let i = (u.floor() as usize).min(n - 2);
            i0[a] = i;
            f[a] = u - i as f64;
        }
        let mut cells = [0usize; 8];
        let mut weights = [0.0f64; 8];
        for k in 0..8 {
            let (dx, dy, dz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            cells[k] = (i0[0] + dx) + n * ((i0[1] + dy) + n * (i0[2] + dz));
            let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
            let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
            let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
            weights[k] = wx * wy * wz;
        }
        Some(Stencil { cells, weights })
    }
}

/// Gradient of a scalar objective with respect to the raw field parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradient {
    pub d_raw_density: Vec<f64>,
    pub d_raw_color: Vec<f64>,
}

impl FieldGradient {
    pub fn is_finite(&self) -> bool {
        self.d_raw_density
            .iter()
            .chain(&self.d_raw_color)
            .all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &FieldGradient) -> f64 {
        self.d_raw_density
            .iter()
            .zip(&other.d_raw_density)
            .chain(self.d_raw_color.iter().zip(&other.d_raw_color))
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for v in self
            .d_raw_density
            .iter_mut()
            .chain(self.d_raw_color.iter_mut())
        {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &FieldGradient) {
        for (a, b) in self.d_raw_density.iter_mut().zip(&other.d_raw_density) {
            *a += b;
        }
        for (a, b) in self.d_raw_color.iter_mut().zip(&other.d_raw_color) {
            *a += b;
        }
    }
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for [`apply_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    m: FieldGradient,
    v: FieldGradient,
}

impl OptimizerState {
    pub fn new(field: &VoxelField, config: AdamConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: field.zero_gradient(),
            v: field.zero_gradient(),
        }
    }
}

/// One Adam step of gradient *ascent* (the gradient is of a log-density).
///
/// Returns the L2 norm of the applied parameter change. On error, neither the
/// field nor the optimizer state is modified.
pub fn apply_update(
    field: &mut VoxelField,
    grad: &FieldGradient,
    opt: &mut OptimizerState,
) -> Result<f64> {
    let cells = field.cells();
    if grad.d_raw_density.len() != cells || grad.d_raw_color.len() != 3 * cells {
        return Err(Error::shape(
            format!("gradient for {cells} cells"),
            format!(
                "{} density / {} color entries",
                grad.d_raw_density.len(),
                grad.d_raw_color.len()
            ),
        ));
    }
    if opt.m.d_raw_density.len() != cells {
        return Err(Error::shape(
            format!("optimizer state for {cells} cells"),
            opt.m.d_raw_density.len(),
        ));
    }
    if !grad.is_finite() {
        return Err(Error::NonFinite("field gradient".into()));
    }

    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = opt.config;
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let mut sq = 0.0;

    let mut update = |params: &mut [f32], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..params.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let delta = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            if delta != 0.0 {
                let old = params[i];
                params[i] = (old as f64 + delta) as f32;
                let d = params[i] as f64 - old as f64;
                sq += d * d;
            }
        }
    };
    update(
        &mut field.raw_density,
        &grad.d_raw_density,
        &mut opt.m.d_raw_density,
        &mut opt.v.d_raw_density,
    );
    update(
        &mut field.raw_color,
        &grad.d_raw_color,
        &mut opt.m.d_raw_color,
        &mut opt.v.d_raw_color,
    );
    Ok(sq.sqrt())
}
