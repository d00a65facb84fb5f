#![allow(dead_code)]

use std::collections::BTreeMap;

use jlab::image::{ImageBuffer, ImageKind, Rect};
use jlab::prompt::{BACK_VIEW, FRONT_VIEW, SIDE_VIEW, TOP_VIEW};
use jlab::scoremodel::{BiasConfig, TemplateSet, WordBias};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VIEWS: [&str; 4] = [FRONT_VIEW, SIDE_VIEW, BACK_VIEW, TOP_VIEW];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> ImageBuffer {
    let data = (0..h * w * 3).map(|_| rng.random_range(lo..hi)).collect();
    ImageBuffer::from_vec(h, w, ImageKind::Radiance, data).unwrap()
}

pub fn smiling_bias(beta: f64, gamma: f64) -> BiasConfig {
    BiasConfig {
        beta,
        canonical_bin: FRONT_VIEW.into(),
        word_bias: vec![WordBias {
            word: "smiling".into(),
            gamma,
        }],
    }
}

/// Random 4x4 templates for the four default views.
pub fn synthetic_templates(seed: u64, bias: &BiasConfig) -> TemplateSet {
    let mut r = rng(seed);
    let clean: BTreeMap<String, ImageBuffer> = VIEWS
        .iter()
        .map(|v| (v.to_string(), random_image(&mut r, 4, 4, 0.0, 1.0)))
        .collect();
    let patch = Rect {
        row0: 1,
        col0: 1,
        rows: 2,
        cols: 2,
    };
    TemplateSet::from_clean(clean, patch, bias).unwrap()
}

/// Relative error in the max norm.
pub fn rel_err(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).unwrap().max_abs();
    diff / b.max_abs().max(1e-300)
}

/// `log sum exp` of the inputs.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log density (without the shared normalizer) of an isotropic Gaussian
/// mixture with the given means and weights.
pub fn mixture_log_density(
    means: &[&ImageBuffer],
    weights: &[f64],
    z: &ImageBuffer,
    sigma: f64,
) -> f64 {
    let terms: Vec<f64> = means
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(m, &w)| {
            let d2: f64 = m
                .data()
                .iter()
                .zip(z.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            w.ln() - d2 / (2.0 * sigma * sigma)
        })
        .collect();
    log_sum_exp(&terms)
}

/// Central differences of `f` at `z` over every element.
pub fn fd_gradient(f: impl Fn(&ImageBuffer) -> f64, z: &ImageBuffer, h: f64) -> ImageBuffer {
    let mut out = ImageBuffer::zeros(z.height(), z.width(), ImageKind::Gradient);
    for i in 0..z.len() {
        let mut zp = z.clone();
        zp.data_mut()[i] += h;
        let mut zm = z.clone();
        zm.data_mut()[i] -= h;
        out.data_mut()[i] = (f(&zp) - f(&zm)) / (2.0 * h);
    }
    out
}
