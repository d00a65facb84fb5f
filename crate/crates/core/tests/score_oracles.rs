//! Score-model checks against independently coded log-density oracles.

mod common;

use common::*;
use jlab::image::ImageBuffer;
use jlab::prompt::{Prompt, BACK_VIEW, FRONT_VIEW, SIDE_VIEW};
use jlab::scoremodel::{
    BiasConfig, Condition, GuidanceConfig, NoiseLevel, TemplateSet, ToyScoreModel, CLEAN_KEY,
};
use proptest::prelude::*;

fn sigma(s: f64) -> NoiseLevel {
    NoiseLevel::new(s).unwrap()
}

fn key_of(prompt: &Prompt) -> &'static str {
    if prompt.contains("smiling") {
        "smiling"
    } else {
        CLEAN_KEY
    }
}

/// Hand-written mixture bookkeeping for the uniform universe of
/// [`ToyScoreModel::new`]: every (view, key) pair is equally likely.
struct Oracle<'a> {
    t: &'a TemplateSet,
    beta: f64,
}

impl Oracle<'_> {
    fn keys(&self) -> [&'static str; 2] {
        [CLEAN_KEY, "smiling"]
    }

    fn log_p_given(&self, view: &str, key: &str, z: &ImageBuffer, s: f64) -> f64 {
        let own = self.t.get(view, key).unwrap();
        if view == FRONT_VIEW {
            return mixture_log_density(&[own], &[1.0], z, s);
        }
        let canon = self.t.get(FRONT_VIEW, key).unwrap();
        mixture_log_density(&[canon, own], &[self.beta, 1.0 - self.beta], z, s)
    }

    /// `log sum_c p(c) p(z | c)` over the conditions passing `keep`,
    /// with `p(c)` renormalized over them.
    fn log_marginal(&self, keep: impl Fn(&str, &str) -> bool, z: &ImageBuffer, s: f64) -> f64 {
        let mut terms = Vec::new();
        for v in VIEWS {
            for k in self.keys() {
                if keep(v, k) {
                    terms.push(self.log_p_given(v, k, z, s));
                }
            }
        }
        log_sum_exp(&terms) - (terms.len() as f64).ln()
    }
}

#[test]
fn denoise_identity_on_random_inputs() {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let bias = smiling_bias(r.random_range(0.0..1.0), r.random_range(0.0..1.0));
        let model = ToyScoreModel::new(synthetic_templates(i, &bias), bias).unwrap();
        let z = random_image(&mut r, 4, 4, -0.5, 1.5);
        let s = sigma(10f64.powf(r.random_range(-1.5..0.5)));
        let view = VIEWS[i as usize % 4];
        let prompt = if i % 2 == 0 { "a smiling dog" } else { "a dog" };
        let cond = Condition::new(view, Prompt::parse(prompt));
        let d = model.denoise(&z, s, &cond).unwrap();
        let lhs = d.zip_map(&z, |a, b| (a - b) / (s.get() * s.get())).unwrap();
        let score = model.conditional_score(&z, s, &cond).unwrap();
        worst = worst.max(rel_err(&lhs, &score));
    }
    println!("denoise identity: worst relative error {worst:.2e}");
    assert!(worst < 1e-12);
}

use rand::Rng;

#[test]
fn scores_match_log_density_finite_differences() {
    let mut r = rng(11);
    for i in 0..10u64 {
        let bias = smiling_bias(0.6, 0.8);
        let t = synthetic_templates(100 + i, &bias);
        let model = ToyScoreModel::new(t.clone(), bias).unwrap();
        let oracle = Oracle { t: &t, beta: 0.6 };
        let s = 0.4;
        let z = random_image(&mut r, 4, 4, 0.0, 1.0);
        for (view, text) in [
            (BACK_VIEW, "a smiling dog"),
            (SIDE_VIEW, "a dog"),
            (FRONT_VIEW, "a smiling dog"),
        ] {
            let prompt = Prompt::parse(text);
            let key = key_of(&prompt);
            let cond = Condition::new(view, prompt);
            let fd = fd_gradient(|x| oracle.log_p_given(view, key, x, s), &z, 1e-5);
            let score = model.conditional_score(&z, sigma(s), &cond).unwrap();
            let e = rel_err(&score, &fd);
            assert!(e < 1e-5, "conditional {view}: {e:e}");
            let logp = model.conditional_log_density(&z, sigma(s), &cond).unwrap();
            assert!((logp - oracle.log_p_given(view, key, &z, s)).abs() < 1e-9);
        }
        let fd = fd_gradient(|x| oracle.log_marginal(|_, _| true, x, s), &z, 1e-5);
        let e = rel_err(&model.unconditional_score(&z, sigma(s)).unwrap(), &fd);
        assert!(e < 1e-5, "unconditional: {e:e}");
    }
}

#[test]
fn decomposition_components_match_posterior_oracles() {
    let mut r = rng(23);
    for i in 0..8u64 {
        let bias = smiling_bias(0.6, 0.8);
        let t = synthetic_templates(200 + i, &bias);
        let model = ToyScoreModel::new(t.clone(), bias).unwrap();
        let o = Oracle { t: &t, beta: 0.6 };
        let s = 0.5;
        let z = random_image(&mut r, 4, 4, 0.0, 1.0);
        let view = [BACK_VIEW, SIDE_VIEW][i as usize % 2];
        let prompt = Prompt::parse(if i % 4 < 2 { "a smiling dog" } else { "a dog" });
        let key = key_of(&prompt);
        let cond = Condition::new(view, prompt);
        let dec = model.decompose_gradient(&z, sigma(s), &cond).unwrap();

        // log p(v | z), log p(k | z) and log p(v, k | z), up to constants.
        let log_pz = |x: &ImageBuffer| o.log_marginal(|_, _| true, x, s);
        let log_pv = |x: &ImageBuffer| o.log_marginal(|v, _| v == view, x, s) - log_pz(x);
        let log_pk = |x: &ImageBuffer| o.log_marginal(|_, k| k == key, x, s) - log_pz(x);
        let log_pvk = |x: &ImageBuffer| o.log_p_given(view, key, x, s) - log_pz(x);
        let log_c = |x: &ImageBuffer| log_pvk(x) - log_pv(x) - log_pk(x);

        let h = 1e-5;
        let checks: [(&str, &ImageBuffer, ImageBuffer); 5] = [
            ("uncond", &dec.uncond, fd_gradient(log_pz, &z, h)),
            ("pose", &dec.pose_grad, fd_gradient(log_pv, &z, h)),
            ("prompt", &dec.prompt_grad, fd_gradient(log_pk, &z, h)),
            (
                "pose-prompt",
                &dec.pose_prompt_grad,
                fd_gradient(log_pvk, &z, h),
            ),
            ("pcmi", &dec.pcmi_grad, fd_gradient(log_c, &z, h)),
        ];
        for (name, got, fd) in &checks {
            let scale = fd.max_abs().max(1e-3);
            let e = got.zip_map(fd, |a, b| a - b).unwrap().max_abs() / scale;
            assert!(e < 1e-4, "{name} (case {i}): relative error {e:e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_is_additive(seed in 0u64..10_000, beta in 0.0f64..1.0, gamma in 0.0f64..1.0,
                                 log_sigma in -1.5f64..0.5, view_ix in 0usize..4, smiling: bool) {
        let bias = smiling_bias(beta, gamma);
        let model = ToyScoreModel::new(synthetic_templates(seed, &bias), bias).unwrap();
        let mut r = rng(seed ^ 0xabc);
        let z = random_image(&mut r, 4, 4, -0.2, 1.2);
        let s = sigma(10f64.powf(log_sigma));
        let cond = Condition::new(VIEWS[view_ix], Prompt::parse(if smiling { "a smiling dog" } else { "a dog" }));
        let dec = model.decompose_gradient(&z, s, &cond).unwrap();
        let score = model.conditional_score(&z, s, &cond).unwrap();
        let sum = dec.uncond.zip_map(&dec.pose_prompt_grad, |a, b| a + b).unwrap();
        prop_assert!(rel_err(&sum, &score) < 1e-10);
        let parts = dec.pose_grad.zip_map(&dec.prompt_grad, |a, b| a + b).unwrap()
            .zip_map(&dec.pcmi_grad, |a, b| a + b).unwrap();
        let scale = dec.pose_prompt_grad.max_abs().max(score.max_abs() * 1e-6);
        let e = parts.zip_map(&dec.pose_prompt_grad, |a, b| a - b).unwrap().max_abs() / scale;
        prop_assert!(e < 1e-10, "pcmi additivity {e:e}");
    }

    #[test]
    fn denoise_stays_in_template_hull(seed in 0u64..10_000, beta in 0.0f64..1.0, log_sigma in -1.5f64..0.5) {
        let bias = smiling_bias(beta, 0.8);
        let t = synthetic_templates(seed, &bias);
        let model = ToyScoreModel::new(t.clone(), bias).unwrap();
        let mut r = rng(seed + 1);
        let z = random_image(&mut r, 4, 4, -1.0, 2.0);
        let cond = Condition::new(BACK_VIEW, Prompt::parse("a smiling dog"));
        let d = model.denoise(&z, sigma(10f64.powf(log_sigma)), &cond).unwrap();
        let a = t.get(FRONT_VIEW, "smiling").unwrap();
        let b = t.get(BACK_VIEW, "smiling").unwrap();
        for i in 0..d.len() {
            let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
            prop_assert!(d.data()[i] >= lo - 1e-12 && d.data()[i] <= hi + 1e-12);
        }
    }
}

#[test]
fn guidance_is_linear_in_the_parts() {
    let bias = smiling_bias(0.6, 0.8);
    let model = ToyScoreModel::new(synthetic_templates(3, &bias), bias).unwrap();
    let z = random_image(&mut rng(4), 4, 4, 0.0, 1.0);
    let s = sigma(0.3);
    let cond = Condition::new(BACK_VIEW, Prompt::parse("a smiling dog"));
    let c = model.conditional_score(&z, s, &cond).unwrap();
    let u = model.unconditional_score(&z, s).unwrap();
    assert_eq!(
        model
            .cfg_score(&z, s, &cond, GuidanceConfig { scale: 0.0 })
            .unwrap(),
        c
    );
    let g = model
        .cfg_score(&z, s, &cond, GuidanceConfig { scale: 2.5 })
        .unwrap();
    let expected = c.zip_map(&u, |a, b| a + 2.5 * (a - b)).unwrap();
    assert!(rel_err(&g, &expected) < 1e-14);
}

fn flat(v: f64) -> ImageBuffer {
    ImageBuffer::filled(4, 4, jlab::image::ImageKind::Radiance, [v; 3])
}

#[test]
fn paas_single_template_closed_form() {
    let bias = BiasConfig::default();
    let mut clean = std::collections::BTreeMap::new();
    for v in VIEWS {
        clean.insert(v.to_string(), flat(0.5));
    }
    let patch = jlab::image::Rect {
        row0: 0,
        col0: 0,
        rows: 1,
        cols: 1,
    };
    let t = TemplateSet::from_clean(clean, patch, &bias).unwrap();
    let model = ToyScoreModel::new(t, bias).unwrap();
    let cond = Condition::new(FRONT_VIEW, Prompt::parse("a dog"));
    let est = model
        .paas_estimate(&flat(0.3), sigma(0.1), &cond, 10_000, 9)
        .unwrap();
    let se = est.standard_error();
    for (m, e) in est.mean.data().iter().zip(se.data()) {
        assert!((m - 20.0).abs() <= 3.0 * e + 1e-9, "{m} vs 20 (se {e})");
    }
    let a = model
        .paas_estimate(&flat(0.3), sigma(0.1), &cond, 1, 4)
        .unwrap();
    let b = model
        .paas_estimate(&flat(0.3), sigma(0.1), &cond, 1, 4)
        .unwrap();
    assert_eq!(a, b);
}

/// Mean over pixels of the across-seed standard deviation of the estimate.
fn spread(model: &ToyScoreModel, z: &ImageBuffer, cond: &Condition, n: usize, seeds: u64) -> f64 {
    let ests: Vec<ImageBuffer> = (0..seeds)
        .map(|s| {
            model
                .paas_estimate(z, sigma(1.0), cond, n, 7_000 + s)
                .unwrap()
                .mean
        })
        .collect();
    let len = z.len();
    let mut total = 0.0;
    for i in 0..len {
        let m = ests.iter().map(|e| e.data()[i]).sum::<f64>() / seeds as f64;
        let v = ests.iter().map(|e| (e.data()[i] - m).powi(2)).sum::<f64>() / (seeds - 1) as f64;
        total += v.sqrt();
    }
    total / len as f64
}

#[test]
fn paas_spread_shrinks_with_sample_count() {
    // Two modes so the denoiser output actually varies with the noise draw.
    let bias = smiling_bias(0.5, 0.0);
    let t = synthetic_templates(42, &bias);
    let model = ToyScoreModel::new(t.clone(), bias).unwrap();
    let z = t
        .clean(FRONT_VIEW)
        .unwrap()
        .zip_map(t.clean(BACK_VIEW).unwrap(), |a, b| 0.5 * (a + b))
        .unwrap();
    let cond = Condition::new(BACK_VIEW, Prompt::parse("a dog"));
    let ratio = spread(&model, &z, &cond, 100, 50) / spread(&model, &z, &cond, 10_000, 50);
    println!("paas std ratio n=100 vs n=10000: {ratio:.3}");
    assert!((7.0..=13.0).contains(&ratio), "ratio {ratio}");
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn beta_pulls_denoiser_towards_canonical(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let base = synthetic_templates(seed, &BiasConfig::default());
        let noise = random_image(&mut r, 4, 4, -0.1, 0.1);
        let z = base.clean(BACK_VIEW).unwrap().zip_map(&noise, |a, b| a + b).unwrap();
        let canon = base.clean(FRONT_VIEW).unwrap();
        let mut last = f64::NEG_INFINITY;
        for beta in [0.0, 0.3, 0.6, 0.9] {
            let bias = BiasConfig { beta, ..Default::default() };
            let model = ToyScoreModel::new(synthetic_templates(seed, &bias), bias).unwrap();
            let d = model.denoise(&z, sigma(1.5), &Condition::new(BACK_VIEW, Prompt::parse("a dog"))).unwrap();
            let c = pearson(d.data(), canon.data());
            prop_assert!(c > last, "beta {beta}: {c} after {last}");
            last = c;
        }
    }
}

#[test]
fn unconditional_score_is_small_at_the_canonical_mode() {
    let bias = smiling_bias(0.95, 0.0);
    let t = synthetic_templates(8, &bias);
    let model = ToyScoreModel::new(t.clone(), bias).unwrap();
    let s = sigma(0.2);
    let at_mode = model
        .unconditional_score(t.clean(FRONT_VIEW).unwrap(), s)
        .unwrap();
    let off = t
        .clean(FRONT_VIEW)
        .unwrap()
        .zip_map(t.clean(SIDE_VIEW).unwrap(), |a, b| 0.5 * (a + b))
        .unwrap();
    let away = model.unconditional_score(&off, s).unwrap();
    println!(
        "unconditional |score|: {:.3e} at mode, {:.3e} off mode",
        at_mode.max_abs(),
        away.max_abs()
    );
    assert!(at_mode.max_abs() < away.max_abs());
}

#[test]
fn single_mode_denoiser_returns_the_template() {
    let bias = BiasConfig {
        beta: 0.0,
        ..Default::default()
    };
    let t = synthetic_templates(12, &bias);
    let model = ToyScoreModel::new(t.clone(), bias).unwrap();
    let z = random_image(&mut rng(3), 4, 4, -1.0, 2.0);
    for v in [FRONT_VIEW, BACK_VIEW] {
        let d = model
            .denoise(&z, sigma(0.7), &Condition::new(v, Prompt::parse("a dog")))
            .unwrap();
        assert!(rel_err(&d, t.clean(v).unwrap()) < 1e-12);
    }
}
