//! Distillation-loop properties and the unbiased smoke test.

use std::time::Instant;

use jlab::distill::{
    distill_step, initial_field, optimize, optimize_with, sample_camera, step_score, write_log_csv,
    ClipMode, ClipSchedule, RunConfig, SigmaSchedule, LOG_COLUMNS,
};
use jlab::field::{AdamConfig, OptimizerState, VoxelField};
use jlab::metrics::{evaluate, MetricConfig};
use jlab::prompt::{ViewBinConfig, FRONT_VIEW};
use jlab::renderer::{CameraRig, PreparedField};
use jlab::scoremodel::{build_reference, BiasConfig, ReferenceConfig, TemplateSet, ToyScoreModel};
use proptest::prelude::*;

fn rig(side: usize) -> CameraRig {
    CameraRig {
        height: side,
        width: side,
        ..CameraRig::default()
    }
}

/// Unbiased model and run config at `res`^3 / `side`x`side`.
fn setup(res: usize, side: usize, steps: usize) -> (ToyScoreModel, TemplateSet, RunConfig) {
    let bias = BiasConfig::default();
    let rcfg = ReferenceConfig {
        rig: rig(side),
        ..ReferenceConfig::default()
    };
    let (_, templates) = build_reference(&rcfg, &ViewBinConfig::default(), &bias).unwrap();
    let model = ToyScoreModel::new(templates.clone(), bias).unwrap();
    let mut cfg = RunConfig::default().with_steps(steps).with_seed(3);
    cfg.resolution = res;
    cfg.camera.rig = rig(side);
    (model, templates, cfg)
}

fn step_once(
    field: &VoxelField,
    model: &ToyScoreModel,
    cfg: &RunConfig,
    step: usize,
) -> VoxelField {
    let mut f = field.clone();
    let mut opt = OptimizerState::new(&f, cfg.adam);
    distill_step(&mut f, &mut opt, model, cfg, step).unwrap();
    f
}

#[test]
fn zero_learning_rate_leaves_the_field() {
    let (model, _, mut cfg) = setup(8, 12, 5);
    cfg.adam = AdamConfig {
        lr: 0.0,
        ..cfg.adam
    };
    let (field, logs) = optimize(&cfg, &model).unwrap();
    assert_eq!(field, initial_field(&cfg).unwrap());
    assert_eq!(logs.len(), 5);
    assert!(logs
        .iter()
        .all(|l| l.update_norm == 0.0 && l.preclip_maxabs > 0.0));
}

#[test]
fn inactive_clip_matches_no_clip() {
    let (model, _, mut cfg) = setup(8, 12, 10);
    let field = initial_field(&cfg).unwrap();
    cfg.clip = ClipSchedule::none();
    for step in 0..10 {
        let s = step_score(&PreparedField::new(&field), &model, &cfg, step).unwrap();
        let mut loose = cfg.clone();
        loose.clip = ClipSchedule {
            mode: ClipMode::Static,
            psi_static: s.preclip.max_abs() * 1.01,
            ..ClipSchedule::default()
        };
        assert_eq!(
            step_once(&field, &model, &cfg, step),
            step_once(&field, &model, &loose, step)
        );
    }
}

#[test]
fn unclipped_dynamic_steps_match_no_clip() {
    let (model, _, cfg) = setup(8, 12, 40);
    let field = initial_field(&cfg).unwrap();
    let mut none = cfg.clone();
    none.clip = ClipSchedule::none();
    let mut checked = 0;
    for step in 0..40 {
        let s = step_score(&PreparedField::new(&field), &model, &cfg, step).unwrap();
        if s.clipped_fraction == 0.0 {
            assert_eq!(
                step_once(&field, &model, &cfg, step),
                step_once(&field, &model, &none, step)
            );
            checked += 1;
        }
    }
    assert!(checked > 0, "every step clipped something");
}

#[test]
fn clipped_fraction_falls_as_threshold_rises() {
    let (model, _, mut cfg) = setup(8, 12, 10);
    let init = initial_field(&cfg).unwrap();
    let field = PreparedField::new(&init);
    for step in 0..10 {
        let mut last = f64::INFINITY;
        for psi in [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0] {
            cfg.clip = ClipSchedule {
                mode: ClipMode::Static,
                psi_static: psi,
                ..ClipSchedule::default()
            };
            let s = step_score(&field, &model, &cfg, step).unwrap();
            assert!(s.clipped.max_abs() <= psi);
            assert!(s.clipped_fraction <= last);
            last = s.clipped_fraction;
        }
    }
}

#[test]
fn zero_steps_return_the_initial_field() {
    let (model, _, cfg) = setup(8, 12, 0);
    let (field, logs) = optimize(&cfg, &model).unwrap();
    assert_eq!(field, initial_field(&cfg).unwrap());
    assert!(logs.is_empty());
}

#[test]
fn runs_are_bitwise_reproducible() {
    let (model, _, cfg) = setup(10, 12, 30);
    let (a, la) = optimize(&cfg, &model).unwrap();
    let (b, lb) = optimize(&cfg, &model).unwrap();
    assert_eq!(a, b);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    write_log_csv(&la, &mut ca).unwrap();
    write_log_csv(&lb, &mut cb).unwrap();
    assert_eq!(ca, cb);
    let text = String::from_utf8(ca).unwrap();
    assert_eq!(text.lines().next().unwrap(), LOG_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 31);
    let (c, _) = optimize(&cfg.clone().with_seed(4), &model).unwrap();
    assert_ne!(a, c);
}

#[test]
fn step_past_the_run_is_rejected() {
    let (model, _, cfg) = setup(8, 12, 2);
    let mut f = initial_field(&cfg).unwrap();
    let mut opt = OptimizerState::new(&f, cfg.adam);
    assert!(distill_step(&mut f, &mut opt, &model, &cfg, 2).is_err());
}

#[test]
fn unbiased_run_fits_the_templates() {
    let start = Instant::now();
    let (model, templates, cfg) = setup(16, 24, 500);
    let mcfg = MetricConfig {
        n_views: 36,
        rig: rig(24),
        ..MetricConfig::default()
    };
    let bins = ViewBinConfig::default();
    let distance = |f: &VoxelField| {
        evaluate("smoke", f, &templates, &bins, FRONT_VIEW, &mcfg)
            .unwrap()
            .0
            .template_distance
    };
    let before = distance(&initial_field(&cfg).unwrap());
    let mut halfway = None;
    let (field, _) = optimize_with(&cfg, &model, |f, log| {
        if log.step == 249 {
            halfway = Some(distance(f));
        }
    })
    .unwrap();
    let after = distance(&field);
    println!(
        "smoke test: template distance {before:.4} -> {:.4} -> {after:.4} in {:.1}s",
        halfway.unwrap(),
        start.elapsed().as_secs_f64()
    );
    assert!(after <= 0.5 * before);
}

#[test]
fn camera_azimuths_pass_chi_square() {
    let sampler = RunConfig::default().with_seed(21).camera;
    let mut counts = [0usize; 16];
    let draws = 10_000;
    for step in 0..draws {
        let az = sample_camera(&sampler, step).unwrap().azimuth();
        counts[((az / std::f64::consts::TAU) * 16.0) as usize % 16] += 1;
    }
    let expected = draws as f64 / 16.0;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 15 degrees of freedom, significance 0.01.
    println!("camera azimuth chi-square: {chi2:.2}");
    assert!(chi2 < 30.58, "{counts:?}");
}

proptest! {
    #[test]
    fn sigma_draws_stay_in_range(seed: u64, step in 0usize..100_000, lo in 0.01f64..1.0, span in 1.0f64..20.0) {
        let s = SigmaSchedule { min: lo, max: lo * span };
        let v = s.sample(seed, step);
        prop_assert!(v >= s.min * (1.0 - 1e-12) && v <= s.max * (1.0 + 1e-12));
        prop_assert_eq!(v, s.sample(seed, step));
    }

    #[test]
    fn elevations_stay_in_range(seed: u64, step in 0usize..100_000, lo in -1.5f64..1.5, width in 0.0f64..1.0) {
        let mut sampler = RunConfig::default().with_seed(seed).camera;
        sampler.elevation_min = lo;
        sampler.elevation_max = (lo + width).min(1.5);
        let cam = sample_camera(&sampler, step).unwrap();
        prop_assert!(cam.elevation() >= sampler.elevation_min - 1e-12 && cam.elevation() <= sampler.elevation_max + 1e-12);
    }
}
