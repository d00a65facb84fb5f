//! Analytic stand-in for a text-conditioned 2D diffusion model.
//!
//! The data distribution for a condition (view bin, prompt) is a weighted set
//! of point masses at template images; at noise level `sigma` it becomes a
//! Gaussian mixture, so the optimal denoiser (posterior mean) and every score
//! are available in closed form:
//!
//! ```text
//! p(z | view, prompt) = (1 - beta) N(z; M(view, key), sigma^2 I)
//!                     +      beta  N(z; M(canonical, key), sigma^2 I)
//! score(z)            = (D(z) - z) / sigma^2,   D(z) = sum_i w_i(z) mu_i
//! ```
//!
//! `beta` injects a preference for the canonical (front) view into every
//! condition and therefore into the unconditional marginal. Prompt words
//! listed in [`BiasConfig::word_bias`] additionally paste the canonical face
//! patch into the templates of the other bins.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use crate::field::VoxelField;
use crate::image::{ImageBuffer, ImageKind, Rect};
use crate::prompt::{Prompt, ViewBinConfig, FRONT_VIEW};
use crate::renderer::{render, CameraRig, RenderConfig};
use crate::rng::{stream, stream_rng};
use crate::scene::SceneSpec;
use crate::{Error, Result};

/// Template key for prompts without any biasing word.
pub const CLEAN_KEY: &str = "clean";

/// A word that drags the canonical face into other views when present.
#[derive(Debug, Clone, PartialEq)]
pub struct WordBias {
    pub word: String,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasConfig {
    pub beta: f64,
    pub canonical_bin: String,
    pub word_bias: Vec<WordBias>,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig {
            beta: 0.0,
            canonical_bin: FRONT_VIEW.into(),
            word_bias: Vec::new(),
        }
    }
}

impl BiasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "beta {} outside [0, 1]",
                self.beta
            )));
        }
        for wb in &self.word_bias {
            if !(0.0..=1.0).contains(&wb.gamma) {
                return Err(Error::InvalidArgument(format!(
                    "gamma {} for {:?} outside [0, 1]",
                    wb.gamma, wb.word
                )));
            }
        }
        Ok(())
    }

    /// Template key of a prompt: its biasing words, sorted, joined by `+`.
    pub fn word_key(&self, prompt: &Prompt) -> String {
        let mut present: Vec<&str> = self
            .word_bias
            .iter()
            .filter(|wb| prompt.contains(&wb.word))
            .map(|wb| wb.word.as_str())
            .collect();
        present.sort_unstable();
        present.dedup();
        if present.is_empty() {
            CLEAN_KEY.to_string()
        } else {
            present.join("+")
        }
    }

    /// Every key reachable from some prompt.
    pub fn all_keys(&self) -> Vec<String> {
        let mut words: Vec<&str> = self.word_bias.iter().map(|w| w.word.as_str()).collect();
        words.sort_unstable();
        words.dedup();
        let mut keys = vec![CLEAN_KEY.to_string()];
        for mask in 1u32..(1 << words.len()) {
            let key: Vec<&str> = (0..words.len())
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| words[i])
                .collect();
            keys.push(key.join("+"));
        }
        keys
    }
}

/// Noise level of the smoothed data distribution.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(sigma: f64) -> Result<NoiseLevel> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma {sigma} must be positive"
            )));
        }
        Ok(NoiseLevel(sigma))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Pose and prompt a score is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub view: String,
    pub prompt: Prompt,
}

impl Condition {
    pub fn new(view: impl Into<String>, prompt: Prompt) -> Condition {
        Condition {
            view: view.into(),
            prompt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { scale: 1.0 }
    }
}

/// Mean images per (view bin, word key).
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    height: usize,
    width: usize,
    templates: BTreeMap<(String, String), ImageBuffer>,
    /// Pixel region holding the canonical face in the canonical template.
    pub face_patch: Rect,
    /// Azimuth (degrees) each bin's template was rendered from.
    pub bin_azimuths: BTreeMap<String, f64>,
}

impl TemplateSet {
    /// Builds a set from clean templates keyed by view, adding one blended
    /// variant per word key.
    pub fn from_clean(
        clean: BTreeMap<String, ImageBuffer>,
        face_patch: Rect,
        bias: &BiasConfig,
    ) -> Result<TemplateSet> {
        bias.validate()?;
        let first = clean
            .values()
            .next()
            .ok_or_else(|| Error::InvalidArgument("no templates".into()))?;
        let (height, width) = first.dims();
        for t in clean.values() {
            first.same_shape(t)?;
        }
        let canonical = clean.get(&bias.canonical_bin).ok_or_else(|| {
            Error::Lookup(format!(
                "no template for canonical bin {:?}",
                bias.canonical_bin
            ))
        })?;
        if face_patch.row0 + face_patch.rows > height || face_patch.col0 + face_patch.cols > width {
            return Err(Error::InvalidArgument(format!(
                "face patch {face_patch:?} outside template"
            )));
        }
        let mut templates = BTreeMap::new();
        for key in bias.all_keys() {
            for (view, base) in &clean {
                let mut t = base.clone().with_kind(ImageKind::Radiance);
                if *view != bias.canonical_bin {
                    for wb in bias
                        .word_bias
                        .iter()
                        .filter(|wb| key.split('+').any(|k| k == wb.word))
                    {
                        blend_patch(&mut t, canonical, face_patch, wb.gamma);
                    }
                }
                templates.insert((view.clone(), key.clone()), t);
            }
        }
        Ok(TemplateSet {
            height,
            width,
            templates,
            face_patch,
            bin_azimuths: BTreeMap::new(),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, view: &str, key: &str) -> Result<&ImageBuffer> {
        self.templates
            .get(&(view.to_string(), key.to_string()))
            .ok_or_else(|| Error::Lookup(format!("no template for view {view:?}, key {key:?}")))
    }

    pub fn clean(&self, view: &str) -> Result<&ImageBuffer> {
        self.get(view, CLEAN_KEY)
    }

    pub fn views(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.templates.keys().map(|(v, _)| v.as_str()).collect();
        v.dedup();
        v
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &ImageBuffer)> {
        self.templates
            .iter()
            .map(|((v, k), t)| (v.as_str(), k.as_str(), t))
    }

    /// Writes `<bin>_<wordkey>.ppm` files (spaces in names become `_`).
    pub fn export(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for ((view, key), t) in &self.templates {
            let name = format!("{}_{}.ppm", view.replace(' ', "_"), key.replace(' ', "_"));
            t.write_ppm(dir.join(name))?;
        }
        Ok(())
    }
}

fn blend_patch(target: &mut ImageBuffer, source: &ImageBuffer, patch: Rect, gamma: f64) {
    for r in patch.row0..patch.row0 + patch.rows {
        for c in patch.col0..patch.col0 + patch.cols {
            let a = target.pixel(r, c);
            let b = source.pixel(r, c);
            target.set_pixel(
                r,
                c,
                std::array::from_fn(|k| (1.0 - gamma) * a[k] + gamma * b[k]),
            );
        }
    }
}

/// Settings for rendering the reference templates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub scene: SceneSpec,
    pub rig: CameraRig,
    pub render: RenderConfig,
    /// Elevation (degrees) of the azimuth-bin templates.
    pub elevation_deg: f64,
    /// Elevation (degrees) of the top-view template.
    pub top_elevation_deg: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            scene: SceneSpec::default(),
            rig: CameraRig::default(),
            render: RenderConfig::default(),
            elevation_deg: 15.0,
            top_elevation_deg: 75.0,
        }
    }
}

/// Renders the hidden reference object at every bin center and assembles the
/// template set. The face patch is the bounding box (padded by one pixel) of
/// the pixels that change when the face is removed from the front view.
pub fn build_reference(
    cfg: &ReferenceConfig,
    bins: &ViewBinConfig,
    bias: &BiasConfig,
) -> Result<(VoxelField, TemplateSet)> {
    if bins.bins.is_empty() {
        return Err(Error::InvalidArgument("no view bins".into()));
    }
    let field = cfg.scene.build_field()?;
    let mut clean = BTreeMap::new();
    let mut azimuths = BTreeMap::new();
    for bin in &bins.bins {
        let az = bin.center_azimuth();
        let cam = cfg
            .rig
            .camera(az.to_radians(), cfg.elevation_deg.to_radians())?;
        clean.insert(bin.name.clone(), render(&field, &cam, &cfg.render)?);
        azimuths.insert(bin.name.clone(), az);
    }
    let top_cam = cfg.rig.camera(0.0, cfg.top_elevation_deg.to_radians())?;
    clean.insert(
        bins.top_name.clone(),
        render(&field, &top_cam, &cfg.render)?,
    );
    azimuths.insert(bins.top_name.clone(), 0.0);

    let canon_az = bins
        .bin(&bias.canonical_bin)
        .map(|b| b.center_azimuth())
        .ok_or_else(|| {
            Error::Lookup(format!(
                "canonical bin {:?} not configured",
                bias.canonical_bin
            ))
        })?;
    let cam = cfg
        .rig
        .camera(canon_az.to_radians(), cfg.elevation_deg.to_radians())?;
    let with_face = render(&field, &cam, &cfg.render)?;
    let without = render(&cfg.scene.faceless().build_field()?, &cam, &cfg.render)?;
    let face_patch = changed_region(&with_face, &without, 0.05, 1)
        .ok_or_else(|| Error::InvalidArgument("scene has no visible face".into()))?;

    let mut set = TemplateSet::from_clean(clean, face_patch, bias)?;
    set.bin_azimuths = azimuths;
    Ok((field, set))
}

fn changed_region(a: &ImageBuffer, b: &ImageBuffer, tol: f64, pad: usize) -> Option<Rect> {
    let (h, w) = a.dims();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            let (pa, pb) = (a.pixel(r, c), b.pixel(r, c));
            if (0..3).any(|k| (pa[k] - pb[k]).abs() > tol) {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return None;
    }
    let (r0, c0) = (r0.saturating_sub(pad), c0.saturating_sub(pad));
    let (r1, c1) = ((r1 + pad).min(h - 1), (c1 + pad).min(w - 1));
    Some(Rect {
        row0: r0,
        col0: c0,
        rows: r1 - r0 + 1,
        cols: c1 - c0 + 1,
    })
}

/// Result of evaluating a Gaussian mixture at a point.
struct MixtureEval {
    /// Posterior mean `sum_i w_i mu_i`.
    mean: ImageBuffer,
    /// Log density up to the shared `-(d/2) log(2 pi sigma^2)` term.
    log_density: f64,
}

/// Component: template reference and log prior weight.
type Component<'a> = (&'a ImageBuffer, f64);

fn eval_mixture(components: &[Component], z: &ImageBuffer, sigma: f64) -> MixtureEval {
    let inv2s2 = 0.5 / (sigma * sigma);
    let logits: Vec<f64> = components
        .iter()
        .map(|(mu, logw)| {
            let d2: f64 = mu
                .data()
                .iter()
                .zip(z.data())
                .map(|(m, x)| (m - x) * (m - x))
                .sum();
            logw - d2 * inv2s2
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut mean = ImageBuffer::zeros(z.height(), z.width(), ImageKind::Radiance);
    for ((mu, _), w) in components.iter().zip(&weights) {
        let w = w / total;
        if w == 0.0 {
            continue;
        }
        for (m, v) in mean.data_mut().iter_mut().zip(mu.data()) {
            *m += w * v;
        }
    }
    MixtureEval {
        mean,
        log_density: max + total.ln(),
    }
}

/// The five score terms of the Bayes split of a conditional score.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDecomposition {
    /// Score of the marginal over all conditions.
    pub uncond: ImageBuffer,
    /// Gradient of `log p(view | z)`.
    pub pose_grad: ImageBuffer,
    /// Gradient of `log p(prompt | z)`.
    pub prompt_grad: ImageBuffer,
    /// Gradient of the log pointwise conditional mutual information.
    pub pcmi_grad: ImageBuffer,
    /// Gradient of `log p(view, prompt | z)`.
    pub pose_prompt_grad: ImageBuffer,
}

/// Gaussian-mixture image model with a canonical-view bias.
#[derive(Debug, Clone)]
pub struct ToyScoreModel {
    templates: TemplateSet,
    bias: BiasConfig,
    /// `p(view, key)` over the condition universe.
    universe: Vec<(String, String, f64)>,
}

impl ToyScoreModel {
    /// Uniform condition universe over every (view, key) template pair.
    pub fn new(templates: TemplateSet, bias: BiasConfig) -> Result<ToyScoreModel> {
        bias.validate()?;
        let pairs: Vec<(String, String)> = templates
            .templates
            .keys()
            .filter(|(_, k)| bias.all_keys().contains(k))
            .cloned()
            .collect();
        let p = 1.0 / pairs.len() as f64;
        let universe = pairs.into_iter().map(|(v, k)| (v, k, p)).collect();
        Self::with_universe(templates, bias, universe)
    }

    /// Explicit condition universe; weights are normalized.
    pub fn with_universe(
        templates: TemplateSet,
        bias: BiasConfig,
        universe: Vec<(String, String, f64)>,
    ) -> Result<ToyScoreModel> {
        bias.validate()?;
        let total: f64 = universe.iter().map(|u| u.2).sum();
        if universe.is_empty() || !(total > 0.0) || universe.iter().any(|u| u.2 < 0.0) {
            return Err(Error::InvalidArgument(
                "condition universe needs positive weight".into(),
            ));
        }
        for (v, k, _) in &universe {
            templates.get(v, k)?;
            templates.get(&bias.canonical_bin, k)?;
        }
        let universe = universe
            .into_iter()
            .map(|(v, k, w)| (v, k, w / total))
            .collect();
        Ok(ToyScoreModel {
            templates,
            bias,
            universe,
        })
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn bias(&self) -> &BiasConfig {
        &self.bias
    }

    fn check(&self, z: &ImageBuffer) -> Result<()> {
        if z.dims() != self.templates.dims() {
            return Err(Error::shape(
                format!("{}x{}", self.templates.height, self.templates.width),
                format!("{}x{}", z.height(), z.width()),
            ));
        }
        if !z.is_finite() {
            return Err(Error::NonFinite("image".into()));
        }
        Ok(())
    }

    /// Components of `p(z | view, key)` with log weights offset by `log_scale`.
    fn condition_components(
        &self,
        view: &str,
        key: &str,
        log_scale: f64,
    ) -> Result<Vec<Component<'_>>> {
        let own = self.templates.get(view, key)?;
        let beta = self.bias.beta;
        if view == self.bias.canonical_bin || beta == 0.0 {
            return Ok(vec![(own, log_scale)]);
        }
        let canon = self.templates.get(&self.bias.canonical_bin, key)?;
        let mut out = vec![(canon, log_scale + beta.ln())];
        if beta < 1.0 {
            out.push((own, log_scale + (1.0 - beta).ln()));
        }
        Ok(out)
    }

    /// Components of the universe entries passing `keep`, weights renormalized.
    fn marginal_components(&self, keep: impl Fn(&str, &str) -> bool) -> Result<Vec<Component<'_>>> {
        let chosen: Vec<&(String, String, f64)> = self
            .universe
            .iter()
            .filter(|(v, k, _)| keep(v, k))
            .collect();
        let total: f64 = chosen.iter().map(|u| u.2).sum();
        if chosen.is_empty() || total <= 0.0 {
            return Err(Error::Lookup("condition outside the model universe".into()));
        }
        let mut out = Vec::new();
        for (v, k, w) in chosen {
            if *w > 0.0 {
                out.extend(self.condition_components(v, k, (w / total).ln())?);
            }
        }
        Ok(out)
    }

    fn key(&self, cond: &Condition) -> String {
        self.bias.word_key(&cond.prompt)
    }

    fn score_of(components: &[Component], z: &ImageBuffer, sigma: f64) -> ImageBuffer {
        let eval = eval_mixture(components, z, sigma);
        score_from_mean(&eval.mean, z, sigma)
    }

    /// Exact score of `p(z | view, prompt)` at noise level `sigma`.
    pub fn conditional_score(
        &self,
        z: &ImageBuffer,
        sigma: NoiseLevel,
        cond: &Condition,
    ) -> Result<ImageBuffer> {
        self.check(z)?;
        let comps = self.condition_components(&cond.view, &self.key(cond), 0.0)?;
        Ok(Self::score_of(&comps, z, sigma.get()))
    }

    /// Exact score of the marginal `p(z) = sum p(z | c) p(c)` over the universe.
    pub fn unconditional_score(&self, z: &ImageBuffer, sigma: NoiseLevel) -> Result<ImageBuffer> {
        self.check(z)?;
        let comps = self.marginal_components(|_, _| true)?;
        Ok(Self::score_of(&comps, z, sigma.get()))
    }

    /// `cond + s (cond - uncond)`.
    pub fn cfg_score(
        &self,
        z: &ImageBuffer,
        sigma: NoiseLevel,
        cond: &Condition,
        guidance: GuidanceConfig,
    ) -> Result<ImageBuffer> {
        let c = self.conditional_score(z, sigma, cond)?;
        if guidance.scale == 0.0 {
            return Ok(c);
        }
        let u = self.unconditional_score(z, sigma)?;
        Ok(combine_guidance(&c, &u, guidance.scale))
    }

    /// Posterior mean of the clean image given `z`.
    pub fn denoise(
        &self,
        z: &ImageBuffer,
        sigma: NoiseLevel,
        cond: &Condition,
    ) -> Result<ImageBuffer> {
        self.check(z)?;
        let comps = self.condition_components(&cond.view, &self.key(cond), 0.0)?;
        Ok(eval_mixture(&comps, z, sigma.get()).mean)
    }

    /// Conditional log density up to the constant `-(d/2) log(2 pi sigma^2)`.
    pub fn conditional_log_density(
        &self,
        z: &ImageBuffer,
        sigma: NoiseLevel,
        cond: &Condition,
    ) -> Result<f64> {
        self.check(z)?;
        let comps = self.condition_components(&cond.view, &self.key(cond), 0.0)?;
        Ok(eval_mixture(&comps, z, sigma.get()).log_density)
    }

    /// Splits the conditional score into the unconditional score and the
    /// pose/prompt posterior gradients.
    pub fn decompose_gradient(
        &self,
        z: &ImageBuffer,
        sigma: NoiseLevel,
        cond: &Condition,
    ) -> Result<GradientDecomposition> {
        self.check(z)?;
        let s = sigma.get();
        let key = self.key(cond);
        if !self
            .universe
            .iter()
            .any(|(v, k, _)| *v == cond.view && *k == key)
        {
            return Err(Error::Lookup(format!(
                "condition ({:?}, {key:?}) outside the model universe",
                cond.view
            )));
        }
        let uncond = Self::score_of(&self.marginal_components(|_, _| true)?, z, s);
        let joint = Self::score_of(&self.condition_components(&cond.view, &key, 0.0)?, z, s);
        let given_view = Self::score_of(&self.marginal_components(|v, _| v == cond.view)?, z, s);
        let given_key = Self::score_of(&self.marginal_components(|_, k| k == key)?, z, s);

        let sub =
            |a: &ImageBuffer, b: &ImageBuffer| a.zip_map(b, |x, y| x - y).expect("same shape");
        let pose_prompt_grad = sub(&joint, &uncond);
        let pose_grad = sub(&given_view, &uncond);
        let prompt_grad = sub(&given_key, &uncond);
        let pcmi_grad = sub(&sub(&pose_prompt_grad, &pose_grad), &prompt_grad);
        Ok(GradientDecomposition {
            uncond,
            pose_grad,
            prompt_grad,
            pcmi_grad,
            pose_prompt_grad,
        })
    }

    /// Monte-Carlo perturb-and-average estimate of
    /// `E_n[(D(z + sigma n) - z) / sigma^2]` with the conditional denoiser.
    pub fn paas_estimate(
        &self,
        z: &ImageBuffer,
        sigma: NoiseLevel,
        cond: &Condition,
        n_samples: usize,
        seed: u64,
    ) -> Result<PaasEstimate> {
        let guided = self.paas_guided(
            z,
            sigma,
            cond,
            GuidanceConfig { scale: 0.0 },
            n_samples,
            seed,
        )?;
        Ok(guided.conditional)
    }

    /// Perturb-and-average estimates of the conditional and unconditional
    /// parts on shared noise draws; combine with [`PaasParts::guided`].
    pub fn paas_guided(
        &self,
        z: &ImageBuffer,
        sigma: NoiseLevel,
        cond: &Condition,
        guidance: GuidanceConfig,
        n_samples: usize,
        seed: u64,
    ) -> Result<PaasParts> {
        self.check(z)?;
        if n_samples < 1 {
            return Err(Error::InvalidArgument(
                "paas needs at least one sample".into(),
            ));
        }
        let s = sigma.get();
        let cond_comps = self.condition_components(&cond.view, &self.key(cond), 0.0)?;
        let uncond_comps = if guidance.scale != 0.0 {
            Some(self.marginal_components(|_, _| true)?)
        } else {
            None
        };
        let mut acc_c = Welford::new(z.len());
        let mut acc_u = Welford::new(z.len());
        let mut x = z.clone();
        let mut sample = vec![0.0; z.len()];
        for k in 0..n_samples {
            let mut rng = stream_rng(seed, stream::PAAS, k as u64);
            for (xi, zi) in x.data_mut().iter_mut().zip(z.data()) {
                let n: f64 = StandardNormal.sample(&mut rng);
                *xi = zi + s * n;
            }
            let d = eval_mixture(&cond_comps, &x, s).mean;
            for ((o, di), zi) in sample.iter_mut().zip(d.data()).zip(z.data()) {
                *o = (di - zi) / (s * s);
            }
            acc_c.push(&sample);
            if let Some(uc) = &uncond_comps {
                let d = eval_mixture(uc, &x, s).mean;
                for ((o, di), zi) in sample.iter_mut().zip(d.data()).zip(z.data()) {
                    *o = (di - zi) / (s * s);
                }
                acc_u.push(&sample);
            }
        }
        let (h, w) = z.dims();
        let conditional = acc_c.finish(h, w);
        let unconditional = uncond_comps.map(|_| acc_u.finish(h, w));
        Ok(PaasParts {
            conditional,
            unconditional,
            scale: guidance.scale,
        })
    }
}

/// Mean and per-element sample variance of a perturb-and-average estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct PaasEstimate {
    pub mean: ImageBuffer,
    pub variance: ImageBuffer,
    pub n_samples: usize,
}

impl PaasEstimate {
    /// Per-element standard error of the mean.
    pub fn standard_error(&self) -> ImageBuffer {
        let n = self.n_samples as f64;
        self.variance.map(|v| (v / n).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PaasParts {
    pub conditional: PaasEstimate,
    pub unconditional: Option<PaasEstimate>,
    pub scale: f64,
}

impl PaasParts {
    /// Guided estimate; the optional clip is applied to each part first.
    pub fn guided(&self, pre_clip: Option<f64>) -> ImageBuffer {
        let clip = |im: &ImageBuffer| match pre_clip {
            Some(psi) => im.map(|v| v.clamp(-psi, psi)),
            None => im.clone(),
        };
        let c = clip(&self.conditional.mean);
        match &self.unconditional {
            Some(u) => combine_guidance(&c, &clip(&u.mean), self.scale),
            None => c,
        }
    }
}

/// Running mean/variance that is exact for constant sequences.
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(len: usize) -> Welford {
        Welford {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d * inv;
            *s += d * (v - *m);
        }
    }

    fn finish(self, h: usize, w: usize) -> PaasEstimate {
        let denom = (self.n.max(2) - 1) as f64;
        let variance = if self.n > 1 {
            self.m2.iter().map(|s| s / denom).collect()
        } else {
            vec![0.0; self.m2.len()]
        };
        PaasEstimate {
            mean: ImageBuffer::from_vec(h, w, ImageKind::Gradient, self.mean).expect("shape"),
            variance: ImageBuffer::from_vec(h, w, ImageKind::Gradient, variance).expect("shape"),
            n_samples: self.n,
        }
    }
}

fn score_from_mean(mean: &ImageBuffer, z: &ImageBuffer, sigma: f64) -> ImageBuffer {
    let inv = 1.0 / (sigma * sigma);
    mean.zip_map(z, |d, x| (d - x) * inv)
        .expect("same shape")
        .with_kind(ImageKind::Gradient)
}

/// Classifier-free guidance on scores: `cond + s (cond - uncond)`.
pub fn combine_guidance(cond: &ImageBuffer, uncond: &ImageBuffer, scale: f64) -> ImageBuffer {
    cond.zip_map(uncond, |c, u| c + scale * (c - u))
        .expect("same shape")
        .with_kind(ImageKind::Gradient)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(v: f64) -> ImageBuffer {
        ImageBuffer::filled(4, 4, ImageKind::Radiance, [v; 3])
    }

    fn two_bin_set(front: f64, back: f64, bias: &BiasConfig) -> TemplateSet {
        let mut clean = BTreeMap::new();
        clean.insert(FRONT_VIEW.to_string(), flat(front));
        clean.insert("back view".to_string(), flat(back));
        let patch = Rect {
            row0: 1,
            col0: 1,
            rows: 2,
            cols: 2,
        };
        TemplateSet::from_clean(clean, patch, bias).unwrap()
    }

    #[test]
    fn score_at_mean_is_zero() {
        let bias = BiasConfig::default();
        let m = ToyScoreModel::new(two_bin_set(0.5, 0.2, &bias), bias).unwrap();
        let cond = Condition::new("back view", Prompt::parse("a dog"));
        let s = m
            .conditional_score(&flat(0.2), NoiseLevel::new(0.1).unwrap(), &cond)
            .unwrap();
        assert_eq!(s.max_abs(), 0.0);
    }

    #[test]
    fn single_gaussian_score_value() {
        let bias = BiasConfig::default();
        let m = ToyScoreModel::new(two_bin_set(0.5, 0.2, &bias), bias).unwrap();
        let cond = Condition::new(FRONT_VIEW, Prompt::parse("a dog"));
        let s = m
            .conditional_score(&flat(0.7), NoiseLevel::new(0.1).unwrap(), &cond)
            .unwrap();
        for v in s.data() {
            assert!((v + 20.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn equidistant_half_beta_averages_components() {
        let bias = BiasConfig {
            beta: 0.5,
            ..Default::default()
        };
        let m = ToyScoreModel::new(two_bin_set(0.6, 0.2, &bias), bias).unwrap();
        let cond = Condition::new("back view", Prompt::parse("x"));
        let z = flat(0.4);
        let sigma = 0.3;
        let s = m
            .conditional_score(&z, NoiseLevel::new(sigma).unwrap(), &cond)
            .unwrap();
        let expected = 0.5 * ((0.6 - 0.4) + (0.2 - 0.4)) / (sigma * sigma);
        for v in s.data() {
            assert!((v - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn guidance_arithmetic() {
        let c = ImageBuffer::filled(4, 4, ImageKind::Gradient, [1.0; 3]);
        let u = ImageBuffer::zeros(4, 4, ImageKind::Gradient);
        assert!(combine_guidance(&c, &u, 2.0)
            .data()
            .iter()
            .all(|&v| v == 3.0));
        assert_eq!(combine_guidance(&c, &c, 7.5), c);
    }

    #[test]
    fn word_bias_blends_patch() {
        let bias = BiasConfig {
            beta: 0.0,
            canonical_bin: FRONT_VIEW.into(),
            word_bias: vec![WordBias {
                word: "smiling".into(),
                gamma: 1.0,
            }],
        };
        let set = two_bin_set(0.9, 0.1, &bias);
        let t = set.get("back view", "smiling").unwrap();
        assert_eq!(t.pixel(1, 1), [0.9; 3]);
        assert_eq!(t.pixel(0, 0), [0.1; 3]);
        assert_eq!(
            set.get(FRONT_VIEW, "smiling").unwrap(),
            set.clean(FRONT_VIEW).unwrap()
        );
        assert_eq!(bias.word_key(&Prompt::parse("a smiling dog")), "smiling");
        assert_eq!(bias.word_key(&Prompt::parse("a dog")), CLEAN_KEY);

        let none = BiasConfig {
            word_bias: vec![WordBias {
                word: "smiling".into(),
                gamma: 0.0,
            }],
            ..bias
        };
        let set = two_bin_set(0.9, 0.1, &none);
        assert_eq!(
            set.get("back view", "smiling").unwrap(),
            set.clean("back view").unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let bias = BiasConfig::default();
        let m = ToyScoreModel::new(two_bin_set(0.5, 0.2, &bias), bias).unwrap();
        let cond = Condition::new(FRONT_VIEW, Prompt::parse("a"));
        let z = ImageBuffer::zeros(5, 4, ImageKind::Radiance);
        let s = NoiseLevel::new(0.1).unwrap();
        assert!(matches!(
            m.conditional_score(&z, s, &cond),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(NoiseLevel::new(0.0).is_err());
        assert!(m.paas_estimate(&flat(0.1), s, &cond, 0, 1).is_err());
        assert!(BiasConfig {
            beta: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
