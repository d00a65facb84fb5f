//! Emission-absorption volume rendering of a [`VoxelField`] and its adjoint.
//!
//! Each pixel marches `samples_per_ray` evenly spaced points between `near`
//! and `far`:
//!
//! ```text
//! alpha_i = 1 - exp(-density_i * delta)
//! T_i     = prod_{j<i} (1 - alpha_j)
//! pixel   = sum_i T_i alpha_i color_i + T_final * background
//! ```
//!
//! [`render_vjp`] is the hand-written adjoint of that map with respect to the
//! raw field parameters, including activation derivatives and trilinear
//! weights.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::field::{sigmoid, Aabb, FieldGradient, Stencil, VoxelField};
use crate::image::{ImageBuffer, ImageKind};
use crate::{Error, Result};

/// Camera on a sphere around the origin, looking at the origin with +y up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    azimuth: f64,
    elevation: f64,
    pub radius: f64,
    pub fov_y: f64,
    pub height: usize,
    pub width: usize,
}

impl Camera {
    /// `azimuth` is wrapped into `[0, 2pi)`.
    pub fn new(
        azimuth: f64,
        elevation: f64,
        radius: f64,
        fov_y: f64,
        height: usize,
        width: usize,
    ) -> Result<Camera> {
        if !azimuth.is_finite() || !elevation.is_finite() {
            return Err(Error::InvalidArgument("non-finite camera angle".into()));
        }
        if !(-PI / 2.0..=PI / 2.0).contains(&elevation) {
            return Err(Error::InvalidArgument(format!(
                "elevation {elevation} outside [-pi/2, pi/2]"
            )));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidArgument(format!("camera radius {radius}")));
        }
        if !(fov_y > 0.0 && fov_y < PI) {
            return Err(Error::InvalidArgument(format!(
                "fov_y {fov_y} outside (0, pi)"
            )));
        }
        if height < 4 || width < 4 {
            return Err(Error::InvalidArgument(format!(
                "image size {height}x{width} below 4x4"
            )));
        }
        let mut azimuth = azimuth.rem_euclid(2.0 * PI);
        if azimuth >= 2.0 * PI {
            azimuth = 0.0;
        }
        Ok(Camera {
            azimuth,
            elevation,
            radius,
            fov_y,
            height,
            width,
        })
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    /// Azimuth 0 sits on +z (the object's front), increasing towards +x.
    pub fn position(&self) -> [f64; 3] {
        let (se, ce) = self.elevation.sin_cos();
        let (sa, ca) = self.azimuth.sin_cos();
        [
            self.radius * ce * sa,
            self.radius * se,
            self.radius * ce * ca,
        ]
    }

    /// Orthonormal (right, up, forward) frame.
    fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let p = self.position();
        let forward = normalize([-p[0], -p[1], -p[2]]);
        let mut world_up = [0.0, 1.0, 0.0];
        if self.elevation.cos() < 1e-9 {
            // Looking straight down/up: use the azimuth direction as up.
            let (sa, ca) = self.azimuth.sin_cos();
            world_up = [-sa, 0.0, -ca];
        }
        let right = normalize(cross(forward, world_up));
        let up = cross(right, forward);
        (right, up, forward)
    }

    /// Unit direction through the center of pixel (`row`, `col`).
    pub fn ray_dir(&self, row: usize, col: usize) -> [f64; 3] {
        let (right, up, forward) = self.basis();
        self.ray_dir_in(right, up, forward, row, col)
    }

    #[inline]
    fn ray_dir_in(
        &self,
        right: [f64; 3],
        up: [f64; 3],
        fwd: [f64; 3],
        row: usize,
        col: usize,
    ) -> [f64; 3] {
        let tan = (self.fov_y / 2.0).tan();
        let aspect = self.width as f64 / self.height as f64;
        let x = ((col as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * tan * aspect;
        let y = (1.0 - (row as f64 + 0.5) / self.height as f64 * 2.0) * tan;
        normalize(std::array::from_fn(|a| fwd[a] + x * right[a] + y * up[a]))
    }
}

/// Fixed camera intrinsics shared by a set of views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraRig {
    pub radius: f64,
    pub fov_y: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for CameraRig {
    fn default() -> Self {
        CameraRig {
            radius: 3.0,
            fov_y: 0.8,
            height: 32,
            width: 32,
        }
    }
}

impl CameraRig {
    pub fn camera(&self, azimuth: f64, elevation: f64) -> Result<Camera> {
        Camera::new(
            azimuth,
            elevation,
            self.radius,
            self.fov_y,
            self.height,
            self.width,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub background: [f64; 3],
    pub near: f64,
    pub far: f64,
    /// Marching stops once transmittance falls below this; 0 marches every
    /// sample.
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 64,
            background: [1.0; 3],
            near: 1.0,
            far: 5.0,
            min_transmittance: 1e-4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self, camera: &Camera, bbox: &Aabb) -> Result<()> {
        if self.samples_per_ray < 8 {
            return Err(Error::InvalidArgument(format!(
                "samples_per_ray {} below 8",
                self.samples_per_ray
            )));
        }
        if !(self.near < self.far) || !self.near.is_finite() || !self.far.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "near {} must be below far {}",
                self.near, self.far
            )));
        }
        if !(0.0..1.0).contains(&self.min_transmittance) {
            return Err(Error::InvalidArgument(format!(
                "min_transmittance {} outside [0, 1)",
                self.min_transmittance
            )));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument("background outside [0, 1]".into()));
        }
        let rc = bbox.circumradius();
        if self.near > camera.radius - rc || self.far < camera.radius + rc {
            return Err(Error::InvalidArgument(format!(
                "ray segment [{}, {}] does not cover the bbox from radius {}",
                self.near, self.far, camera.radius
            )));
        }
        Ok(())
    }

    fn delta(&self) -> f64 {
        (self.far - self.near) / self.samples_per_ray as f64
    }
}

/// Field with its activations evaluated once, for several renders or
/// adjoint passes at the same parameters.
pub struct PreparedField<'a> {
    n: usize,
    bbox: Aabb,
    field: &'a VoxelField,
    /// Activated (density, r, g, b) per cell.
    nodes: Vec<[f64; 4]>,
}

impl<'a> PreparedField<'a> {
    pub fn new(field: &'a VoxelField) -> Self {
        PreparedField {
            n: field.resolution(),
            bbox: *field.bbox(),
            field,
            nodes: field
                .raw_density()
                .iter()
                .zip(field.raw_color().chunks_exact(3))
                .map(|(&d, c)| {
                    [
                        crate::field::softplus(d as f64),
                        sigmoid(c[0] as f64),
                        sigmoid(c[1] as f64),
                        sigmoid(c[2] as f64),
                    ]
                })
                .collect(),
        }
    }

    #[inline]
    fn sample(&self, st: &Stencil) -> (f64, [f64; 3]) {
        let mut d = 0.0;
        let mut c = [0.0; 3];
        for k in 0..8 {
            let (cell, w) = (st.cells[k], st.weights[k]);
            let v = &self.nodes[cell];
            d += w * v[0];
            c[0] += w * v[1];
            c[1] += w * v[2];
            c[2] += w * v[3];
        }
        (d, c)
    }
}

struct SampleRecord {
    stencil: Stencil,
    color: [f64; 3],
    alpha: f64,
    trans: f64,
}

#[inline]
fn march(
    grid: &PreparedField,
    origin: [f64; 3],
    dir: [f64; 3],
    cfg: &RenderConfig,
    mut records: Option<&mut Vec<SampleRecord>>,
) -> ([f64; 3], f64) {
    let delta = cfg.delta();
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    for i in sample_range(&grid.bbox, origin, dir, cfg) {
        if trans < cfg.min_transmittance {
            break;
        }
        let t = cfg.near + (i as f64 + 0.5) * delta;
        let p = [
            origin[0] + t * dir[0],
            origin[1] + t * dir[1],
            origin[2] + t * dir[2],
        ];
        let Some(stencil) = Stencil::locate(grid.n, &grid.bbox, p) else {
            continue;
        };
        let (density, color) = grid.sample(&stencil);
        let alpha = 1.0 - (-density * delta).exp();
        let w = trans * alpha;
        for c in 0..3 {
            rgb[c] += w * color[c];
        }
        if let Some(rec) = records.as_deref_mut() {
            rec.push(SampleRecord {
                stencil,
                color,
                alpha,
                trans,
            });
        }
        trans *= 1.0 - alpha;
    }
    for c in 0..3 {
        rgb[c] += trans * cfg.background[c];
    }
    (rgb, trans)
}

/// Indices of the samples that can fall inside the box, padded by one on
/// each side; membership is still checked per sample.
fn sample_range(
    bbox: &Aabb,
    origin: [f64; 3],
    dir: [f64; 3],
    cfg: &RenderConfig,
) -> std::ops::Range<usize> {
    let (mut t_in, mut t_out) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a] < bbox.min[a] || origin[a] > bbox.max[a] {
                return 0..0;
            }
            continue;
        }
        let t0 = (bbox.min[a] - origin[a]) / dir[a];
        let t1 = (bbox.max[a] - origin[a]) / dir[a];
        t_in = t_in.max(t0.min(t1));
        t_out = t_out.min(t0.max(t1));
    }
    if !(t_in <= t_out) {
        return 0..0;
    }
    let delta = cfg.delta();
    let s = cfg.samples_per_ray as f64;
    let lo = ((t_in - cfg.near) / delta - 0.5).floor() - 1.0;
    let hi = ((t_out - cfg.near) / delta - 0.5).ceil() + 2.0;
    lo.clamp(0.0, s) as usize..hi.clamp(0.0, s) as usize
}

/// Renders the field; the result is a radiance buffer.
pub fn render(field: &VoxelField, camera: &Camera, cfg: &RenderConfig) -> Result<ImageBuffer> {
    Ok(render_with_transmittance(field, camera, cfg)?.0)
}

/// Renders the field and also returns the per-pixel final transmittance
/// (the weight given to the background).
pub fn render_with_transmittance(
    field: &VoxelField,
    camera: &Camera,
    cfg: &RenderConfig,
) -> Result<(ImageBuffer, Vec<f64>)> {
    PreparedField::new(field).render_with_transmittance(camera, cfg)
}

/// Row blocks used for private adjoint accumulation; fixed so the merge order
/// (and therefore the floating-point result) never depends on thread count.
const VJP_BLOCKS: usize = 4;

/// Pulls an image-space vector `image_grad` back to the raw field parameters:
/// returns `image_grad^T * d render / d theta`.
pub fn render_vjp(
    field: &VoxelField,
    camera: &Camera,
    cfg: &RenderConfig,
    image_grad: &ImageBuffer,
) -> Result<FieldGradient> {
    PreparedField::new(field).vjp(camera, cfg, image_grad)
}

/// Adjoint contribution of one sample to one stencil cell: density, then color.
type Contribution = (u32, [f64; 4]);

impl PreparedField<'_> {
    pub fn render(&self, camera: &Camera, cfg: &RenderConfig) -> Result<ImageBuffer> {
        Ok(self.render_with_transmittance(camera, cfg)?.0)
    }

    pub fn render_with_transmittance(
        &self,
        camera: &Camera,
        cfg: &RenderConfig,
    ) -> Result<(ImageBuffer, Vec<f64>)> {
        cfg.validate(camera, &self.bbox)?;
        let (right, up, fwd) = camera.basis();
        let origin = camera.position();
        let (h, w) = (camera.height, camera.width);
        let mut image = ImageBuffer::zeros(h, w, ImageKind::Radiance);
        let mut trans = vec![0.0; h * w];
        image
            .data_mut()
            .par_chunks_mut(3 * w)
            .zip(trans.par_chunks_mut(w))
            .enumerate()
            .for_each(|(row, (pixels, tr))| {
                for col in 0..w {
                    let dir = camera.ray_dir_in(right, up, fwd, row, col);
                    let (rgb, t) = march(self, origin, dir, cfg, None);
                    pixels[3 * col..3 * col + 3].copy_from_slice(&rgb);
                    tr[col] = t;
                }
            });
        Ok((image, trans))
    }

    /// Adjoint of [`PreparedField::render`]; see [`render_vjp`].
    pub fn vjp(
        &self,
        camera: &Camera,
        cfg: &RenderConfig,
        image_grad: &ImageBuffer,
    ) -> Result<FieldGradient> {
        cfg.validate(camera, &self.bbox)?;
        if image_grad.dims() != (camera.height, camera.width) {
            return Err(Error::shape(
                format!("{}x{}", camera.height, camera.width),
                format!("{}x{}", image_grad.height(), image_grad.width()),
            ));
        }
        let h = camera.height;
        let mut grad = self.field.zero_gradient();
        let add = |grad: &mut FieldGradient, (cell, [d, r, g, b]): Contribution| {
            let cell = cell as usize;
            grad.d_raw_density[cell] += d;
            grad.d_raw_color[3 * cell] += r;
            grad.d_raw_color[3 * cell + 1] += g;
            grad.d_raw_color[3 * cell + 2] += b;
        };
        if rayon::current_num_threads() == 1 {
            self.vjp_rows(camera, cfg, image_grad, 0..h, &mut |c| add(&mut grad, c));
        } else {
            // Contributions are buffered per row block and replayed in row
            // order, so the sums match the sequential path bit for bit.
            let rows_per_block = h.div_ceil(VJP_BLOCKS);
            let blocks: Vec<Vec<Contribution>> = (0..VJP_BLOCKS)
                .into_par_iter()
                .map(|b| {
                    let mut out = Vec::new();
                    let rows = (b * rows_per_block).min(h)..((b + 1) * rows_per_block).min(h);
                    self.vjp_rows(camera, cfg, image_grad, rows, &mut |c| out.push(c));
                    out
                })
                .collect();
            for c in blocks.into_iter().flatten() {
                add(&mut grad, c);
            }
        }
        // Chain through the activations: softplus' = sigmoid, sigmoid' = s(1-s).
        for (g, &raw) in grad.d_raw_density.iter_mut().zip(self.field.raw_density()) {
            if *g != 0.0 {
                *g *= sigmoid(raw as f64);
            }
        }
        for (i, g) in grad.d_raw_color.iter_mut().enumerate() {
            if *g != 0.0 {
                let s = self.nodes[i / 3][1 + i % 3];
                *g *= s * (1.0 - s);
            }
        }
        Ok(grad)
    }

    fn vjp_rows(
        &self,
        camera: &Camera,
        cfg: &RenderConfig,
        image_grad: &ImageBuffer,
        rows: std::ops::Range<usize>,
        sink: &mut impl FnMut(Contribution),
    ) {
        let (right, up, fwd) = camera.basis();
        let origin = camera.position();
        let delta = cfg.delta();
        let mut records = Vec::with_capacity(cfg.samples_per_ray);
        for row in rows {
            for col in 0..camera.width {
                let g = image_grad.pixel(row, col);
                if g == [0.0; 3] {
                    continue;
                }
                records.clear();
                let dir = camera.ray_dir_in(right, up, fwd, row, col);
                let (_, t_final) = march(self, origin, dir, cfg, Some(&mut records));
                // Suffix radiance: everything composited behind sample i.
                let mut suffix = [
                    t_final * cfg.background[0],
                    t_final * cfg.background[1],
                    t_final * cfg.background[2],
                ];
                for rec in records.iter().rev() {
                    let t_next = rec.trans * (1.0 - rec.alpha);
                    let weight = rec.trans * rec.alpha;
                    let mut g_density = 0.0;
                    for c in 0..3 {
                        g_density += g[c] * (t_next * rec.color[c] - suffix[c]);
                    }
                    g_density *= delta;
                    let gc = [g[0] * weight, g[1] * weight, g[2] * weight];
                    for k in 0..8 {
                        let wk = rec.stencil.weights[k];
                        sink((
                            rec.stencil.cells[k] as u32,
                            [wk * g_density, wk * gc[0], wk * gc[1], wk * gc[2]],
                        ));
                    }
                    for c in 0..3 {
                        suffix[c] += weight * rec.color[c];
                    }
                }
            }
        }
    }
}

/// Renders `n_views` cameras at azimuths `2 pi k / n_views`, in order.
pub fn turntable(
    field: &VoxelField,
    n_views: usize,
    elevation: f64,
    rig: &CameraRig,
    cfg: &RenderConfig,
) -> Result<Vec<ImageBuffer>> {
    turntable_cameras(n_views, elevation, rig)?
        .iter()
        .map(|cam| render(field, cam, cfg))
        .collect()
}

pub fn turntable_cameras(n_views: usize, elevation: f64, rig: &CameraRig) -> Result<Vec<Camera>> {
    if n_views < 2 {
        return Err(Error::InvalidArgument(format!(
            "turntable needs at least 2 views, got {n_views}"
        )));
    }
    (0..n_views)
        .map(|k| rig.camera(2.0 * PI * k as f64 / n_views as f64, elevation))
        .collect()
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}
