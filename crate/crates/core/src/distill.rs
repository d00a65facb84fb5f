//! Score-distillation loop with elementwise score clipping.
//!
//! One step: sample a camera, pick its view prompt, optionally drop prompt
//! words that contradict that view, render, estimate the guided score by
//! perturb-and-average, clip it, pull it back through the renderer adjoint
//! and take an ascent step on the field.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;

use crate::field::{apply_update, AdamConfig, InitMode, OptimizerState, VoxelField};
use crate::image::{ImageBuffer, ImageKind};
use crate::prompt::{debias_prompt, CondProbTable, PmiConfig, Prompt, ViewBinConfig};
use crate::renderer::{Camera, CameraRig, PreparedField, RenderConfig};
use crate::rng::{mix, stream, stream_rng};
use crate::scoremodel::{Condition, GuidanceConfig, NoiseLevel, ToyScoreModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipMode {
    None,
    Static,
    Dynamic,
}

/// Where clipping acts relative to classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipStage {
    /// Clip the final guided score.
    PostGuidance,
    /// Clip the conditional and unconditional parts, then combine.
    PreGuidance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSchedule {
    pub mode: ClipMode,
    pub psi_static: f64,
    pub psi_start: f64,
    pub psi_end: f64,
    pub max_step: usize,
}

impl Default for ClipSchedule {
    fn default() -> Self {
        ClipSchedule {
            mode: ClipMode::Dynamic,
            psi_static: 8.0,
            psi_start: 2.0,
            psi_end: 8.0,
            max_step: 2000,
        }
    }
}

impl ClipSchedule {
    pub fn none() -> Self {
        ClipSchedule {
            mode: ClipMode::None,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        match self.mode {
            ClipMode::None => Ok(()),
            ClipMode::Static if !ok(self.psi_static) => Err(Error::InvalidArgument(format!(
                "static threshold {} must be positive",
                self.psi_static
            ))),
            ClipMode::Dynamic if !(ok(self.psi_start) && ok(self.psi_end)) => {
                Err(Error::InvalidArgument(format!(
                    "dynamic thresholds {} -> {} must be positive",
                    self.psi_start, self.psi_end
                )))
            }
            ClipMode::Dynamic if self.psi_start > self.psi_end => {
                Err(Error::InvalidArgument(format!(
                    "dynamic threshold must not decrease ({} -> {})",
                    self.psi_start, self.psi_end
                )))
            }
            ClipMode::Dynamic if self.max_step == 0 => Err(Error::InvalidArgument(
                "dynamic schedule needs max_step >= 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Threshold in effect at `step`; `+inf` when clipping is off.
    pub fn threshold(&self, step: usize) -> Result<f64> {
        match self.mode {
            ClipMode::None => Ok(f64::INFINITY),
            ClipMode::Static => Ok(self.psi_static),
            ClipMode::Dynamic => dynamic_threshold(step, self),
        }
    }
}

/// `(1 - tau) psi_start + tau psi_end` with `tau = step / max_step`.
pub fn dynamic_threshold(step: usize, sched: &ClipSchedule) -> Result<f64> {
    if sched.max_step == 0 || step > sched.max_step {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside [0, {}]",
            sched.max_step
        )));
    }
    let tau = step as f64 / sched.max_step as f64;
    Ok((1.0 - tau) * sched.psi_start + tau * sched.psi_end)
}

/// Elementwise `max(min(x, psi), -psi)`. Returns the clipped buffer and the
/// fraction of elements that were changed.
pub fn clip_score(g: &ImageBuffer, psi: f64) -> Result<(ImageBuffer, f64)> {
    if !(psi > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clip threshold {psi} must be positive"
        )));
    }
    let mut clipped = 0usize;
    let out = g.map(|v| v.clamp(-psi, psi));
    for (a, b) in g.data().iter().zip(out.data()) {
        if a != b {
            clipped += 1;
        }
    }
    Ok((
        out.with_kind(ImageKind::Gradient),
        clipped as f64 / g.len().max(1) as f64,
    ))
}

/// Uniform random cameras, reproducible per (seed, step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSampler {
    pub rig: CameraRig,
    /// Elevation range in radians.
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub seed: u64,
}

impl CameraSampler {
    pub fn validate(&self) -> Result<()> {
        let half = PI / 2.0;
        if !(-half <= self.elevation_min
            && self.elevation_min <= self.elevation_max
            && self.elevation_max <= half)
        {
            return Err(Error::InvalidArgument(format!(
                "elevation range [{}, {}] invalid",
                self.elevation_min, self.elevation_max
            )));
        }
        Ok(())
    }
}

pub fn sample_camera(sampler: &CameraSampler, step: usize) -> Result<Camera> {
    let mut rng = stream_rng(sampler.seed, stream::CAMERA, step as u64);
    let az = rng.random_range(0.0..2.0 * PI);
    let el = if sampler.elevation_max > sampler.elevation_min {
        rng.random_range(sampler.elevation_min..sampler.elevation_max)
    } else {
        sampler.elevation_min
    };
    sampler.rig.camera(az, el)
}

/// Per-step noise level, log-uniform in `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaSchedule {
    pub min: f64,
    pub max: f64,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        SigmaSchedule {
            min: 0.05,
            max: 0.8,
        }
    }
}

impl SigmaSchedule {
    pub fn sample(&self, seed: u64, step: usize) -> f64 {
        if self.max <= self.min {
            return self.min;
        }
        let mut rng = stream_rng(seed, stream::SIGMA, step as u64);
        let u: f64 = rng.random_range(0.0..1.0);
        (self.min.ln() + u * (self.max.ln() - self.min.ln())).exp()
    }
}

/// Contradiction filter settings for the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptDebias {
    pub table: CondProbTable,
    pub pmi: PmiConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub steps: usize,
    pub seed: u64,
    pub resolution: usize,
    pub init: InitMode,
    pub adam: AdamConfig,
    pub sigma: SigmaSchedule,
    pub guidance: GuidanceConfig,
    pub paas_samples: usize,
    pub clip: ClipSchedule,
    pub clip_stage: ClipStage,
    pub prompt: Prompt,
    /// `None` disables prompt debiasing.
    pub debias: Option<PromptDebias>,
    pub bins: ViewBinConfig,
    pub camera: CameraSampler,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: 2000,
            seed: 0,
            resolution: 32,
            init: InitMode::Constant,
            adam: AdamConfig::default(),
            sigma: SigmaSchedule::default(),
            guidance: GuidanceConfig::default(),
            paas_samples: 1,
            clip: ClipSchedule {
                max_step: 2000,
                ..Default::default()
            },
            clip_stage: ClipStage::PostGuidance,
            prompt: Prompt::parse("a smiling dog").protect(["dog"]),
            debias: None,
            bins: ViewBinConfig::default(),
            camera: CameraSampler {
                rig: CameraRig::default(),
                elevation_min: 5f64.to_radians(),
                elevation_max: 25f64.to_radians(),
                seed: 0,
            },
            render: RenderConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.min > 0.0 && self.sigma.min <= self.sigma.max && self.sigma.max.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "sigma range [{}, {}] invalid",
                self.sigma.min, self.sigma.max
            )));
        }
        if self.paas_samples < 1 {
            return Err(Error::InvalidArgument("paas_samples must be >= 1".into()));
        }
        if !(self.guidance.scale >= 0.0 && self.guidance.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance scale {}",
                self.guidance.scale
            )));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {}",
                self.adam.lr
            )));
        }
        self.clip.validate()?;
        if self.clip.mode == ClipMode::Dynamic
            && self.steps > 0
            && self.steps - 1 > self.clip.max_step
        {
            return Err(Error::InvalidArgument(format!(
                "clip schedule max_step {} shorter than the run ({} steps)",
                self.clip.max_step, self.steps
            )));
        }
        self.camera.validate()?;
        self.bins.validate()?;
        Ok(())
    }

    /// Sets the step budget and stretches the dynamic schedule over it.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self.clip.max_step = steps.saturating_sub(1).max(1);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.camera.seed = seed;
        self
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub sigma: f64,
    pub psi: f64,
    pub preclip_maxabs: f64,
    pub clipped_fraction: f64,
    pub update_norm: f64,
    pub view: String,
    pub view_prompt: String,
}

pub const LOG_COLUMNS: [&str; 8] = [
    "step",
    "azimuth_deg",
    "elevation_deg",
    "sigma",
    "psi",
    "preclip_maxabs",
    "clipped_fraction",
    "update_norm",
];

pub fn write_log_csv(logs: &[StepLog], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", LOG_COLUMNS.join(","))?;
    for l in logs {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            l.step,
            l.azimuth_deg,
            l.elevation_deg,
            l.sigma,
            l.psi,
            l.preclip_maxabs,
            l.clipped_fraction,
            l.update_norm
        )?;
    }
    Ok(())
}

/// Image-space score for one step, before the adjoint.
#[derive(Debug, Clone)]
pub struct StepScore {
    pub camera: Camera,
    pub view: String,
    pub prompt: Prompt,
    pub sigma: f64,
    pub psi: f64,
    pub preclip: ImageBuffer,
    pub clipped: ImageBuffer,
    pub clipped_fraction: f64,
}

/// Everything up to (and including) clipping for `step`, without touching
/// the field.
pub fn step_score(
    field: &PreparedField,
    model: &ToyScoreModel,
    cfg: &RunConfig,
    step: usize,
) -> Result<StepScore> {
    let camera = sample_camera(&cfg.camera, step)?;
    let view = cfg
        .bins
        .assign(
            camera.azimuth().to_degrees(),
            camera.elevation().to_degrees(),
        )
        .to_string();
    let prompt = match &cfg.debias {
        Some(d) => debias_prompt(&cfg.prompt, &view, &d.table, &d.pmi)?,
        None => cfg.prompt.clone(),
    };
    let z = field.render(&camera, &cfg.render)?;
    let sigma = cfg.sigma.sample(cfg.seed, step);
    let cond = Condition::new(view.clone(), prompt.clone());
    let parts = model.paas_guided(
        &z,
        NoiseLevel::new(sigma)?,
        &cond,
        cfg.guidance,
        cfg.paas_samples,
        mix(cfg.seed, step as u64),
    )?;
    let psi = cfg.clip.threshold(step)?;
    let preclip = parts.guided(None);
    let (clipped, clipped_fraction) = match (cfg.clip.mode, cfg.clip_stage) {
        (ClipMode::None, _) => (preclip.clone(), 0.0),
        (_, ClipStage::PostGuidance) => clip_score(&preclip, psi)?,
        (_, ClipStage::PreGuidance) => {
            let g = parts.guided(Some(psi));
            let frac = clip_score(&parts.conditional.mean, psi)?.1;
            (g, frac)
        }
    };
    Ok(StepScore {
        camera,
        view,
        prompt,
        sigma,
        psi,
        preclip,
        clipped,
        clipped_fraction,
    })
}

/// One full distillation step; updates `field` and `opt` in place.
pub fn distill_step(
    field: &mut VoxelField,
    opt: &mut OptimizerState,
    model: &ToyScoreModel,
    cfg: &RunConfig,
    step: usize,
) -> Result<StepLog> {
    if step >= cfg.steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond run length {}",
            cfg.steps
        )));
    }
    let prepared = PreparedField::new(field);
    let s = step_score(&prepared, model, cfg, step)?;
    let grad = prepared.vjp(&s.camera, &cfg.render, &s.clipped)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite(format!(
            "field gradient at step {step} (sigma {}, view {:?})",
            s.sigma, s.view
        )));
    }
    let update_norm = apply_update(field, &grad, opt)?;
    Ok(StepLog {
        step,
        azimuth_deg: s.camera.azimuth().to_degrees(),
        elevation_deg: s.camera.elevation().to_degrees(),
        sigma: s.sigma,
        psi: s.psi,
        preclip_maxabs: s.preclip.max_abs(),
        clipped_fraction: s.clipped_fraction,
        update_norm,
        view: s.view.clone(),
        view_prompt: crate::prompt::render_view_prompt(&s.view, &s.prompt),
    })
}

/// Initial field for a run.
pub fn initial_field(cfg: &RunConfig) -> Result<VoxelField> {
    VoxelField::new(cfg.resolution, cfg.init, cfg.seed)
}

/// Runs `cfg.steps` distillation steps from the initial field.
pub fn optimize(cfg: &RunConfig, model: &ToyScoreModel) -> Result<(VoxelField, Vec<StepLog>)> {
    optimize_with(cfg, model, |_, _| {})
}

/// Like [`optimize`], calling `observe` after every step.
pub fn optimize_with(
    cfg: &RunConfig,
    model: &ToyScoreModel,
    mut observe: impl FnMut(&VoxelField, &StepLog),
) -> Result<(VoxelField, Vec<StepLog>)> {
    cfg.validate()?;
    let mut field = initial_field(cfg)?;
    let mut opt = OptimizerState::new(&field, cfg.adam);
    let mut logs = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let log = distill_step(&mut field, &mut opt, model, cfg, step)?;
        observe(&field, &log);
        logs.push(log);
    }
    Ok((field, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_values() {
        let mut g = ImageBuffer::zeros(4, 4, ImageKind::Gradient);
        g.data_mut()[0] = 10.0;
        g.data_mut()[1] = -12.5;
        g.data_mut()[2] = 3.0;
        let (c, frac) = clip_score(&g, 8.0).unwrap();
        assert_eq!(&c.data()[..3], &[8.0, -8.0, 3.0]);
        assert!((frac - 2.0 / 48.0).abs() < 1e-15);
        assert_eq!(clip_score(&g, f64::INFINITY).unwrap().0, g);
        assert!(clip_score(&g, 0.0).is_err());
        assert!(clip_score(&g, -1.0).is_err());
    }

    #[test]
    fn dynamic_schedule_endpoints() {
        let s = ClipSchedule {
            max_step: 1000,
            ..Default::default()
        };
        assert_eq!(dynamic_threshold(0, &s).unwrap(), 2.0);
        assert_eq!(dynamic_threshold(1000, &s).unwrap(), 8.0);
        assert_eq!(dynamic_threshold(500, &s).unwrap(), 5.0);
        assert!(dynamic_threshold(1001, &s).is_err());
        assert_eq!(ClipSchedule::none().threshold(5).unwrap(), f64::INFINITY);
    }

    #[test]
    fn schedule_validation() {
        let bad = ClipSchedule {
            psi_start: 9.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ClipSchedule {
            mode: ClipMode::Static,
            psi_static: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn camera_sampling_is_reproducible_and_in_range() {
        let s = RunConfig::default().with_seed(11).camera;
        for step in 0..200 {
            let a = sample_camera(&s, step).unwrap();
            let b = sample_camera(&s, step).unwrap();
            assert_eq!(a, b);
            assert!(a.elevation() >= s.elevation_min && a.elevation() <= s.elevation_max);
            assert!((0.0..2.0 * PI).contains(&a.azimuth()));
        }
    }

    #[test]
    fn sigma_stays_in_range() {
        let s = SigmaSchedule::default();
        for step in 0..500 {
            let v = s.sample(3, step);
            assert!((0.05..=0.8).contains(&v));
        }
    }
}
