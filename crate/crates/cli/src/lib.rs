//! Command-line experiment runner for the score-distillation simulator.
//!
//! Subcommands train fields, evaluate them, run the debiasing ablation grid,
//! filter prompts and render images. Every file a command writes lands under
//! the output directory. Exit codes: 0 success, 2 configuration or input
//! error, 3 runtime failure.

pub mod config;
pub mod error;
pub mod scenario;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use jlab::distill::write_log_csv;
use jlab::field::VoxelField;
use jlab::image::ImageBuffer;
use jlab::prompt::{debias_prompt, score_words, CondProbTable, Prompt};
use jlab::renderer::render;

use config::ScenarioConfig;
use error::{invalid, runtime, CliError, CliResult};
use scenario::{contact_sheet, Arm, RunOutcome, Scenario};

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "JLAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "jlab", version, about = "Toy score-distillation experiments")]
pub struct Cli {
    /// Scenario config file (flat key = value)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides output.dir)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed (overrides run.seed; restricts ablate to this seed)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to JLAB_THREADS, then the config)
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one field; writes field.jlab, log.csv and contact_sheet.ppm
    Optimize,
    /// Evaluate a field file; writes metrics.csv, curve.csv and curve.svg
    Metrics {
        /// Field file written by `optimize`
        field: PathBuf,
    },
    /// Print per-word PMI scores of a prompt for one view as CSV
    DebiasPrompt {
        /// User prompt, e.g. "a smiling dog"
        prompt: String,
        /// View prompt, e.g. "back view"
        #[arg(long)]
        view: String,
        /// Conditional-probability table (default: config, then bundled example)
        #[arg(long)]
        table: Option<PathBuf>,
        /// Word that must survive (repeatable)
        #[arg(long)]
        protect: Vec<String>,
        /// Normalized-score cutoff (default: pmi.threshold)
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the debiasing grid and the clipping trio over the seed list
    Ablate,
    /// Render a field (default: the hidden reference object)
    Render {
        /// Field file; omit to render the reference object
        field: Option<PathBuf>,
        /// Single view azimuth in degrees instead of a contact sheet
        #[arg(long)]
        azimuth: Option<f64>,
        /// Elevation in degrees (default: metrics.elevation_deg)
        #[arg(long)]
        elevation: Option<f64>,
        /// Also export the template set as PPM files
        #[arg(long)]
        templates: bool,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Normal output goes to `stdout`, diagnostics to standard
/// error.
pub fn run(
    args: impl IntoIterator<Item = impl Into<OsString> + Clone>,
    stdout: &mut (dyn Write + Send),
) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("jlab: {e}");
            e.exit_code()
        }
    }
}

fn threads(cli: &Cli, cfg: &ScenarioConfig) -> CliResult<Option<usize>> {
    if let Some(n) = cli.threads {
        return Ok((n > 0).then_some(n));
    }
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| CliError::config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        return Ok((n > 0).then_some(n));
    }
    Ok(cfg.threads)
}

/// Loads the config and applies the global flags.
pub fn load_config(cli: &Cli) -> CliResult<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn execute(cli: &Cli, stdout: &mut (dyn Write + Send)) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads(cli, &cfg)? {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Optimize => cmd_optimize(cfg),
        Command::Metrics { field } => cmd_metrics(cfg, field),
        Command::DebiasPrompt {
            prompt,
            view,
            table,
            protect,
            threshold,
        } => cmd_debias_prompt(
            &cfg,
            prompt,
            view,
            table.as_deref(),
            protect,
            *threshold,
            stdout,
        ),
        Command::Ablate => cmd_ablate(cfg),
        Command::Render {
            field,
            azimuth,
            elevation,
            templates,
        } => cmd_render(cfg, field.as_deref(), *azimuth, *elevation, *templates),
    })
}

fn out_dir(cfg: &ScenarioConfig) -> CliResult<PathBuf> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| {
        CliError::config(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_ppm(path: &Path, im: &ImageBuffer) -> CliResult<()> {
    im.write_ppm(path).map_err(runtime)
}

fn load_field(path: &Path) -> CliResult<VoxelField> {
    if !path.is_file() {
        return Err(CliError::config(format!(
            "field file {} not found",
            path.display()
        )));
    }
    VoxelField::load(path).map_err(invalid)
}

/// Writes the effective configuration next to the outputs.
fn record_config(dir: &Path, cfg: &ScenarioConfig) -> CliResult<()> {
    write_file(&dir.join("config.txt"), cfg.to_text())
}

fn cmd_optimize(cfg: ScenarioConfig) -> CliResult<()> {
    let scenario = Scenario::build(cfg)?;
    let dir = out_dir(&scenario.cfg)?;
    record_config(&dir, &scenario.cfg)?;
    let run = scenario.single_config(scenario.cfg.run.seed);
    let outcome = scenario.train(&run, None)?;
    outcome
        .field
        .save(dir.join("field.jlab"))
        .map_err(runtime)?;
    let mut log = Vec::new();
    write_log_csv(&outcome.logs, &mut log).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&dir.join("log.csv"), log)?;
    write_ppm(&dir.join("contact_sheet.ppm"), &outcome.contact_sheet()?)?;
    eprintln!(
        "optimize: seed {} a_dist {:.5} janus bins {} success {}",
        outcome.seed,
        outcome.report.a_dist,
        outcome.report.janus_bin_count,
        outcome.report.janus_success
    );
    Ok(())
}

fn cmd_metrics(cfg: ScenarioConfig, field: &Path) -> CliResult<()> {
    let field = load_field(field)?;
    let scenario = Scenario::build(cfg)?;
    let dir = out_dir(&scenario.cfg)?;
    let (report, _) = scenario.evaluate("field", &field)?;
    write_file(&dir.join("metrics.csv"), report.to_csv())?;
    write_file(&dir.join("curve.csv"), report.curve_csv())?;
    write_file(&dir.join("curve.svg"), report.curve_svg())?;
    Ok(())
}

fn cmd_debias_prompt(
    cfg: &ScenarioConfig,
    prompt: &str,
    view: &str,
    table: Option<&Path>,
    protect: &[String],
    threshold: Option<f64>,
    stdout: &mut (dyn Write + Send),
) -> CliResult<()> {
    let table = match table.or(cfg.table_path.as_deref()) {
        Some(p) => CondProbTable::load(p).map_err(invalid)?,
        None => CondProbTable::example(),
    };
    if !cfg.bins().names().contains(&view) {
        return Err(CliError::config(format!("unknown view {view:?}")));
    }
    let mut pmi = cfg.pmi;
    if let Some(t) = threshold {
        if !(t > 0.0) {
            return Err(CliError::config("threshold must be positive"));
        }
        pmi.threshold = t;
    }
    let prompt = Prompt::parse(prompt).protect(protect.iter().map(String::as_str));
    let scores = score_words(&prompt, view, &table, &pmi).map_err(invalid)?;
    let kept = debias_prompt(&prompt, view, &table, &pmi).map_err(invalid)?;
    let mut out = String::from("word,pmi,normalized,protected,kept\n");
    for s in &scores {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.word,
            s.pmi,
            s.normalized,
            s.protected,
            kept.contains(&s.word)
        ));
    }
    out.push_str(&format!("# debiased prompt: {}\n", kept.text()));
    stdout
        .write_all(out.as_bytes())
        .map_err(|e| CliError::Runtime(e.to_string()))
}

/// Header of the ablation summary.
pub const SUMMARY_COLUMNS: [&str; 10] = [
    "arm",
    "seed",
    "a_dist",
    "janus_success",
    "janus_bin_count",
    "template_distance",
    "front_peak_in_bin",
    "back_peak_in_bin",
    "clipped_first_tenth",
    "clipped_last_tenth",
];

pub fn summary_row(s: &Scenario, o: &RunOutcome) -> String {
    let (first, last) = o.clipped_fraction_ends();
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        o.arm.map_or("single", Arm::name),
        o.seed,
        o.report.a_dist,
        o.report.janus_success,
        o.report.janus_bin_count,
        o.report.template_distance,
        o.front_peak_in_bin(s),
        o.back_peak_in_bin(s),
        first,
        last
    )
}

fn cmd_ablate(cfg: ScenarioConfig) -> CliResult<()> {
    let scenario = Scenario::build(cfg)?;
    let dir = out_dir(&scenario.cfg)?;
    record_config(&dir, &scenario.cfg)?;
    for sub in ["sheets", "fields"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| CliError::io(&dir.join(sub), e))?;
    }
    let jobs: Vec<(Arm, u64)> = Arm::GRID
        .into_iter()
        .chain(Arm::TRIO)
        .flat_map(|a| scenario.cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(arm, seed)| {
            let o = scenario.run_arm(arm, seed)?;
            let stem = format!("{arm}_seed{seed}");
            write_ppm(
                &dir.join("sheets").join(format!("{stem}.ppm")),
                &o.contact_sheet()?,
            )?;
            o.field
                .save(dir.join("fields").join(format!("{stem}.jlab")))
                .map_err(runtime)?;
            eprintln!(
                "ablate: {stem} a_dist {:.5} janus bins {} success {}",
                o.report.a_dist, o.report.janus_bin_count, o.report.janus_success
            );
            Ok(summary_row(&scenario, &o))
        })
        .collect::<CliResult<Vec<String>>>()?;
    let mut csv = SUMMARY_COLUMNS.join(",");
    csv.push('\n');
    for r in rows {
        csv.push_str(&r);
        csv.push('\n');
    }
    write_file(&dir.join("summary.csv"), csv)
}

fn cmd_render(
    cfg: ScenarioConfig,
    field: Option<&Path>,
    azimuth: Option<f64>,
    elevation: Option<f64>,
    export_templates: bool,
) -> CliResult<()> {
    let loaded = field.map(load_field).transpose()?;
    let scenario = Scenario::build(cfg)?;
    let dir = out_dir(&scenario.cfg)?;
    let field = loaded.as_ref().unwrap_or(&scenario.reference);
    let elevation = elevation.unwrap_or(scenario.cfg.metrics.elevation_deg);
    let rig = scenario.cfg.rig();
    let render_cfg = scenario.cfg.run.render;
    match azimuth {
        Some(az) => {
            let cam = rig
                .camera(az.to_radians(), elevation.to_radians())
                .map_err(invalid)?;
            write_ppm(
                &dir.join("render.ppm"),
                &render(field, &cam, &render_cfg).map_err(runtime)?,
            )?;
        }
        None => {
            let tt = jlab::metrics::Turntable::render(
                field,
                scenario::SHEET_VIEWS,
                elevation,
                &rig,
                &render_cfg,
            )
            .map_err(runtime)?;
            write_ppm(&dir.join("render.ppm"), &contact_sheet(&tt)?)?;
        }
    }
    if export_templates {
        scenario
            .templates
            .export(dir.join("templates"))
            .map_err(runtime)?;
    }
    Ok(())
}
