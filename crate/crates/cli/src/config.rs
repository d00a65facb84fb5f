//! Flat `key = value` scenario configuration.
//!
//! One setting per line, dotted keys, `#` starts a comment. Every key has a
//! default, so an empty file is the standard biased scenario. Lists are
//! comma separated; seed lists also accept ranges such as `0-9`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use jlab::distill::{ClipMode, ClipSchedule, ClipStage, RunConfig};
use jlab::field::InitMode;
use jlab::metrics::{Distance, MetricConfig};
use jlab::prompt::{PmiConfig, PmiNormalizer, Prompt, ViewBinConfig, FRONT_VIEW};
use jlab::renderer::CameraRig;
use jlab::scoremodel::{BiasConfig, ReferenceConfig, WordBias};

use crate::error::{invalid, CliError, CliResult};

/// Everything a command needs: the run itself plus the scene, bias, metric
/// and ablation settings around it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub run: RunConfig,
    pub image_size: usize,
    /// Training camera elevation range in degrees.
    pub elevation_deg: (f64, f64),
    pub prompt_text: String,
    pub protect: Vec<String>,
    pub debias: bool,
    /// `None` uses the bundled example table.
    pub table_path: Option<PathBuf>,
    pub pmi: PmiConfig,
    pub bias: BiasConfig,
    pub front_half_width_deg: f64,
    pub top_elevation_deg: f64,
    pub reference: ReferenceConfig,
    pub metrics: MetricConfig,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Threshold of the static arm of the clipping trio.
    pub trio_psi_static: f64,
    pub trio_debias: bool,
    pub threads: Option<usize>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            run: RunConfig::default(),
            image_size: 32,
            elevation_deg: (5.0, 25.0),
            prompt_text: "a smiling dog".into(),
            protect: vec!["dog".into()],
            debias: false,
            table_path: None,
            pmi: PmiConfig::default(),
            bias: BiasConfig {
                beta: 0.6,
                canonical_bin: FRONT_VIEW.into(),
                word_bias: vec![WordBias {
                    word: "smiling".into(),
                    gamma: 0.8,
                }],
            },
            front_half_width_deg: 22.5,
            top_elevation_deg: 60.0,
            reference: ReferenceConfig::default(),
            metrics: MetricConfig::default(),
            out_dir: PathBuf::from("out"),
            seeds: (0..10).collect(),
            trio_psi_static: 2.0,
            trio_debias: true,
            threads: None,
        }
    }
}

/// `(key, description)` for every accepted key, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("run.steps", "optimization steps"),
    ("run.seed", "seed of single-run commands"),
    ("run.resolution", "voxel grid side"),
    ("run.init", "constant | seeded_noise"),
    (
        "run.image_size",
        "square render size for training, templates and metrics",
    ),
    ("run.lr", "Adam learning rate"),
    ("run.beta1", "Adam first-moment decay"),
    ("run.beta2", "Adam second-moment decay"),
    ("run.eps", "Adam epsilon"),
    (
        "run.sigma_min",
        "smallest noise level (log-uniform per step)",
    ),
    ("run.sigma_max", "largest noise level"),
    ("run.guidance_scale", "classifier-free guidance scale"),
    ("run.paas_samples", "noise draws per score estimate"),
    ("run.elevation_min_deg", "lowest training camera elevation"),
    ("run.elevation_max_deg", "highest training camera elevation"),
    ("render.samples_per_ray", "uniform samples per ray"),
    ("render.background", "background color r,g,b"),
    (
        "render.min_transmittance",
        "early ray termination threshold (0 disables)",
    ),
    ("clip.mode", "none | static | dynamic"),
    ("clip.psi_static", "static threshold"),
    ("clip.psi_start", "dynamic threshold at the first step"),
    ("clip.psi_end", "dynamic threshold at the last step"),
    ("clip.stage", "post_guidance | pre_guidance"),
    ("prompt.text", "user prompt"),
    ("prompt.protect", "words never removed"),
    (
        "prompt.debias",
        "drop words that contradict the view prompt",
    ),
    (
        "prompt.table",
        "conditional-probability table CSV (empty: bundled example)",
    ),
    ("pmi.threshold", "normalized score cutoff"),
    (
        "pmi.default_prior",
        "P(word present) for rows without a prior",
    ),
    ("pmi.normalizer", "max | mean"),
    (
        "bias.beta",
        "weight of the canonical view in every other view",
    ),
    ("bias.canonical_bin", "canonical view bin"),
    (
        "bias.word_bias",
        "word:gamma pairs blending the face into other views",
    ),
    (
        "bins.front_half_width_deg",
        "half width of the front and back bins",
    ),
    (
        "bins.top_elevation_deg",
        "elevation above which the top bin applies",
    ),
    (
        "reference.elevation_deg",
        "elevation of the azimuth-bin templates",
    ),
    (
        "reference.top_elevation_deg",
        "elevation of the top template",
    ),
    ("metrics.n_views", "turntable frames"),
    ("metrics.elevation_deg", "turntable elevation"),
    ("metrics.distance", "pyramid_mad | mean_abs"),
    (
        "metrics.match_threshold",
        "face detector correlation threshold",
    ),
    (
        "metrics.min_contrast",
        "face detector minimum relative contrast",
    ),
    ("output.dir", "output directory"),
    ("ablate.seeds", "seeds of the ablation grid"),
    (
        "ablate.trio_psi_static",
        "threshold of the static clipping arm",
    ),
    (
        "ablate.trio_debias",
        "prompt debiasing in the clipping trio",
    ),
    ("threads", "worker threads (0: all cores)"),
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse()
        .map_err(|_| CliError::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(CliError::config(format!(
            "{key}: expected true or false, got {v:?}"
        ))),
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

/// `0,3,5-7` style seed list.
pub fn parse_seeds(key: &str, v: &str) -> CliResult<Vec<u64>> {
    let mut out = Vec::new();
    for item in parse_list(v) {
        match item.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (parse_num(key, a.trim())?, parse_num(key, b.trim())?);
                if a > b {
                    return Err(CliError::config(format!("{key}: empty range {item}")));
                }
                out.extend(a..=b);
            }
            None => out.push(parse_num(key, &item)?),
        }
    }
    if out.is_empty() {
        return Err(CliError::config(format!("{key}: no seeds")));
    }
    Ok(out)
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl ScenarioConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> CliResult<ScenarioConfig> {
        let mut cfg = ScenarioConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| CliError::config(format!("line {}: {}", i + 1, e.message())))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<ScenarioConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, v: &str) -> CliResult<()> {
        let r = &mut self.run;
        match key {
            "run.steps" => r.steps = parse_num(key, v)?,
            "run.seed" => r.seed = parse_num(key, v)?,
            "run.resolution" => r.resolution = parse_num(key, v)?,
            "run.init" => {
                r.init = match v {
                    "constant" => InitMode::Constant,
                    "seeded_noise" => InitMode::SeededNoise,
                    _ => return Err(CliError::config(format!("{key}: unknown init {v:?}"))),
                }
            }
            "run.image_size" => self.image_size = parse_num(key, v)?,
            "run.lr" => r.adam.lr = parse_num(key, v)?,
            "run.beta1" => r.adam.beta1 = parse_num(key, v)?,
            "run.beta2" => r.adam.beta2 = parse_num(key, v)?,
            "run.eps" => r.adam.eps = parse_num(key, v)?,
            "run.sigma_min" => r.sigma.min = parse_num(key, v)?,
            "run.sigma_max" => r.sigma.max = parse_num(key, v)?,
            "run.guidance_scale" => r.guidance.scale = parse_num(key, v)?,
            "run.paas_samples" => r.paas_samples = parse_num(key, v)?,
            "run.elevation_min_deg" => self.elevation_deg.0 = parse_num(key, v)?,
            "run.elevation_max_deg" => self.elevation_deg.1 = parse_num(key, v)?,
            "render.samples_per_ray" => r.render.samples_per_ray = parse_num(key, v)?,
            "render.background" => {
                let parts = parse_list(v);
                if parts.len() != 3 {
                    return Err(CliError::config(format!("{key}: expected r,g,b")));
                }
                for (k, p) in parts.iter().enumerate() {
                    r.render.background[k] = parse_num(key, p)?;
                }
            }
            "render.min_transmittance" => r.render.min_transmittance = parse_num(key, v)?,
            "clip.mode" => {
                r.clip.mode = match v {
                    "none" => ClipMode::None,
                    "static" => ClipMode::Static,
                    "dynamic" => ClipMode::Dynamic,
                    _ => return Err(CliError::config(format!("{key}: unknown mode {v:?}"))),
                }
            }
            "clip.psi_static" => r.clip.psi_static = parse_num(key, v)?,
            "clip.psi_start" => r.clip.psi_start = parse_num(key, v)?,
            "clip.psi_end" => r.clip.psi_end = parse_num(key, v)?,
            "clip.stage" => {
                r.clip_stage = match v {
                    "post_guidance" => ClipStage::PostGuidance,
                    "pre_guidance" => ClipStage::PreGuidance,
                    _ => return Err(CliError::config(format!("{key}: unknown stage {v:?}"))),
                }
            }
            "prompt.text" => self.prompt_text = v.to_string(),
            "prompt.protect" => self.protect = parse_list(v),
            "prompt.debias" => self.debias = parse_bool(key, v)?,
            "prompt.table" => self.table_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "pmi.threshold" => self.pmi.threshold = parse_num(key, v)?,
            "pmi.default_prior" => self.pmi.default_prior = parse_num(key, v)?,
            "pmi.normalizer" => {
                self.pmi.normalizer = match v {
                    "max" => PmiNormalizer::Max,
                    "mean" => PmiNormalizer::Mean,
                    _ => return Err(CliError::config(format!("{key}: unknown normalizer {v:?}"))),
                }
            }
            "bias.beta" => self.bias.beta = parse_num(key, v)?,
            "bias.canonical_bin" => self.bias.canonical_bin = v.to_string(),
            "bias.word_bias" => {
                self.bias.word_bias = parse_list(v)
                    .iter()
                    .map(|item| {
                        let (word, gamma) = item.split_once(':').ok_or_else(|| {
                            CliError::config(format!("{key}: expected word:gamma, got {item:?}"))
                        })?;
                        Ok(WordBias {
                            word: word.trim().to_lowercase(),
                            gamma: parse_num(key, gamma.trim())?,
                        })
                    })
                    .collect::<CliResult<_>>()?
            }
            "bins.front_half_width_deg" => self.front_half_width_deg = parse_num(key, v)?,
            "bins.top_elevation_deg" => self.top_elevation_deg = parse_num(key, v)?,
            "reference.elevation_deg" => self.reference.elevation_deg = parse_num(key, v)?,
            "reference.top_elevation_deg" => self.reference.top_elevation_deg = parse_num(key, v)?,
            "metrics.n_views" => self.metrics.n_views = parse_num(key, v)?,
            "metrics.elevation_deg" => self.metrics.elevation_deg = parse_num(key, v)?,
            "metrics.distance" => {
                self.metrics.distance = Distance::by_name(v, &[]).map_err(invalid)?
            }
            "metrics.match_threshold" => self.metrics.detector.match_threshold = parse_num(key, v)?,
            "metrics.min_contrast" => self.metrics.detector.min_contrast = parse_num(key, v)?,
            "output.dir" => self.out_dir = PathBuf::from(v),
            "ablate.seeds" => self.seeds = parse_seeds(key, v)?,
            "ablate.trio_psi_static" => self.trio_psi_static = parse_num(key, v)?,
            "ablate.trio_debias" => self.trio_debias = parse_bool(key, v)?,
            "threads" => {
                let n: usize = parse_num(key, v)?;
                self.threads = (n > 0).then_some(n);
            }
            _ => return Err(CliError::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// The effective configuration in the file format, every key listed.
    pub fn to_text(&self) -> String {
        let r = &self.run;
        let value = |key: &str| -> String {
            match key {
                "run.steps" => r.steps.to_string(),
                "run.seed" => r.seed.to_string(),
                "run.resolution" => r.resolution.to_string(),
                "run.init" => match r.init {
                    InitMode::Constant => "constant".into(),
                    InitMode::SeededNoise => "seeded_noise".into(),
                },
                "run.image_size" => self.image_size.to_string(),
                "run.lr" => r.adam.lr.to_string(),
                "run.beta1" => r.adam.beta1.to_string(),
                "run.beta2" => r.adam.beta2.to_string(),
                "run.eps" => r.adam.eps.to_string(),
                "run.sigma_min" => r.sigma.min.to_string(),
                "run.sigma_max" => r.sigma.max.to_string(),
                "run.guidance_scale" => r.guidance.scale.to_string(),
                "run.paas_samples" => r.paas_samples.to_string(),
                "run.elevation_min_deg" => self.elevation_deg.0.to_string(),
                "run.elevation_max_deg" => self.elevation_deg.1.to_string(),
                "render.samples_per_ray" => r.render.samples_per_ray.to_string(),
                "render.background" => join(&r.render.background),
                "render.min_transmittance" => r.render.min_transmittance.to_string(),
                "clip.mode" => match r.clip.mode {
                    ClipMode::None => "none".into(),
                    ClipMode::Static => "static".into(),
                    ClipMode::Dynamic => "dynamic".into(),
                },
                "clip.psi_static" => r.clip.psi_static.to_string(),
                "clip.psi_start" => r.clip.psi_start.to_string(),
                "clip.psi_end" => r.clip.psi_end.to_string(),
                "clip.stage" => match r.clip_stage {
                    ClipStage::PostGuidance => "post_guidance".into(),
                    ClipStage::PreGuidance => "pre_guidance".into(),
                },
                "prompt.text" => self.prompt_text.clone(),
                "prompt.protect" => self.protect.join(","),
                "prompt.debias" => self.debias.to_string(),
                "prompt.table" => self
                    .table_path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                "pmi.threshold" => self.pmi.threshold.to_string(),
                "pmi.default_prior" => self.pmi.default_prior.to_string(),
                "pmi.normalizer" => match self.pmi.normalizer {
                    PmiNormalizer::Max => "max".into(),
                    PmiNormalizer::Mean => "mean".into(),
                },
                "bias.beta" => self.bias.beta.to_string(),
                "bias.canonical_bin" => self.bias.canonical_bin.clone(),
                "bias.word_bias" => self
                    .bias
                    .word_bias
                    .iter()
                    .map(|w| format!("{}:{}", w.word, w.gamma))
                    .collect::<Vec<_>>()
                    .join(","),
                "bins.front_half_width_deg" => self.front_half_width_deg.to_string(),
                "bins.top_elevation_deg" => self.top_elevation_deg.to_string(),
                "reference.elevation_deg" => self.reference.elevation_deg.to_string(),
                "reference.top_elevation_deg" => self.reference.top_elevation_deg.to_string(),
                "metrics.n_views" => self.metrics.n_views.to_string(),
                "metrics.elevation_deg" => self.metrics.elevation_deg.to_string(),
                "metrics.distance" => self.metrics.distance.name().to_string(),
                "metrics.match_threshold" => self.metrics.detector.match_threshold.to_string(),
                "metrics.min_contrast" => self.metrics.detector.min_contrast.to_string(),
                "output.dir" => self.out_dir.display().to_string(),
                "ablate.seeds" => join(&self.seeds),
                "ablate.trio_psi_static" => self.trio_psi_static.to_string(),
                "ablate.trio_debias" => self.trio_debias.to_string(),
                "threads" => self.threads.unwrap_or(0).to_string(),
                _ => unreachable!("key {key} missing from to_text"),
            }
        };
        let mut out = String::new();
        for (key, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{key} = {}", value(key));
        }
        out
    }

    pub fn bins(&self) -> ViewBinConfig {
        let mut b = ViewBinConfig::with_front_half_width(self.front_half_width_deg);
        b.top_elevation_deg = self.top_elevation_deg;
        b
    }

    pub fn prompt(&self) -> Prompt {
        Prompt::parse(&self.prompt_text).protect(self.protect.iter().map(String::as_str))
    }

    pub fn rig(&self) -> CameraRig {
        CameraRig {
            height: self.image_size,
            width: self.image_size,
            ..self.run.camera.rig
        }
    }

    /// The core run config with the derived pieces (prompt, bins, rig,
    /// schedule length) filled in. Debiasing is attached by the caller.
    pub fn run_config(&self, seed: u64) -> RunConfig {
        let mut run = self.run.clone().with_steps(self.run.steps).with_seed(seed);
        run.prompt = self.prompt();
        run.bins = self.bins();
        run.camera.rig = self.rig();
        run.camera.elevation_min = self.elevation_deg.0.to_radians();
        run.camera.elevation_max = self.elevation_deg.1.to_radians();
        run.debias = None;
        run
    }

    pub fn reference_config(&self) -> ReferenceConfig {
        ReferenceConfig {
            rig: self.rig(),
            render: self.run.render,
            ..self.reference.clone()
        }
    }

    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            rig: self.rig(),
            render: self.run.render,
            ..self.metrics.clone()
        }
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> CliResult<()> {
        if self.image_size < 4 {
            return Err(CliError::config(format!(
                "run.image_size {} below 4",
                self.image_size
            )));
        }
        if self.run.resolution < 2 {
            return Err(CliError::config(format!(
                "run.resolution {} below 2",
                self.run.resolution
            )));
        }
        if !(self.pmi.threshold > 0.0) {
            return Err(CliError::config("pmi.threshold must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pmi.default_prior) {
            return Err(CliError::config("pmi.default_prior outside [0, 1]"));
        }
        if self.metrics.n_views < 2 {
            return Err(CliError::config("metrics.n_views below 2"));
        }
        if !(self.trio_psi_static > 0.0) {
            return Err(CliError::config("ablate.trio_psi_static must be positive"));
        }
        if let Some(p) = &self.table_path {
            if !p.is_file() {
                return Err(CliError::config(format!(
                    "prompt.table {} does not exist",
                    p.display()
                )));
            }
        }
        self.bias.validate().map_err(invalid)?;
        let bins = self.bins();
        if bins.bin(&self.bias.canonical_bin).is_none() {
            return Err(CliError::config(format!(
                "bias.canonical_bin {:?} is not a view bin",
                self.bias.canonical_bin
            )));
        }
        self.run_config(self.run.seed).validate().map_err(invalid)?;
        self.clip_for(ClipMode::Static, self.trio_psi_static)
            .validate()
            .map_err(invalid)
    }

    /// The configured schedule with a different mode (and static threshold).
    pub fn clip_for(&self, mode: ClipMode, psi_static: f64) -> ClipSchedule {
        ClipSchedule {
            mode,
            psi_static,
            ..self.run_config(self.run.seed).clip
        }
    }
}
