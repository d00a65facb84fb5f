//! The experiment arms and a runner that builds the reference once and
//! trains/evaluates any (arm, seed) pair.

use std::fmt;

use jlab::distill::{optimize, ClipMode, PromptDebias, RunConfig, StepLog};
use jlab::field::VoxelField;
use jlab::image::ImageBuffer;
use jlab::metrics::{evaluate, MetricReport, Turntable};
use jlab::prompt::{CondProbTable, BACK_VIEW, FRONT_VIEW};
use jlab::scoremodel::{build_reference, TemplateSet, ToyScoreModel};

use crate::config::ScenarioConfig;
use crate::error::{invalid, runtime, CliResult};

/// Frames in a contact sheet.
pub const SHEET_VIEWS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Baseline,
    PromptDebias,
    DynamicClip,
    Full,
    TrioNone,
    TrioStatic,
    TrioDynamic,
}

impl Arm {
    /// The debiasing grid: neither cure, each alone, both.
    pub const GRID: [Arm; 4] = [
        Arm::Baseline,
        Arm::PromptDebias,
        Arm::DynamicClip,
        Arm::Full,
    ];
    /// No clipping, static clipping, dynamic clipping.
    pub const TRIO: [Arm; 3] = [Arm::TrioNone, Arm::TrioStatic, Arm::TrioDynamic];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::PromptDebias => "prompt_debias",
            Arm::DynamicClip => "dynamic_clip",
            Arm::Full => "full",
            Arm::TrioNone => "trio_none",
            Arm::TrioStatic => "trio_static",
            Arm::TrioDynamic => "trio_dynamic",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One trained and evaluated run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub arm: Option<Arm>,
    pub seed: u64,
    pub field: VoxelField,
    pub logs: Vec<StepLog>,
    pub report: MetricReport,
    pub turntable: Turntable,
}

impl RunOutcome {
    pub fn front_peak_in_bin(&self, s: &Scenario) -> bool {
        self.report
            .curves
            .peaks_in_bin(&s.bins(), FRONT_VIEW)
            .unwrap_or(false)
    }

    pub fn back_peak_in_bin(&self, s: &Scenario) -> bool {
        self.report
            .curves
            .peaks_in_bin(&s.bins(), BACK_VIEW)
            .unwrap_or(false)
    }

    /// Mean clipped fraction over the first and the last tenth of the run.
    pub fn clipped_fraction_ends(&self) -> (f64, f64) {
        let n = self.logs.len();
        let tenth = (n / 10).max(1).min(n);
        let mean = |logs: &[StepLog]| {
            logs.iter().map(|l| l.clipped_fraction).sum::<f64>() / logs.len().max(1) as f64
        };
        (mean(&self.logs[..tenth]), mean(&self.logs[n - tenth..]))
    }

    pub fn contact_sheet(&self) -> CliResult<ImageBuffer> {
        contact_sheet(&self.turntable)
    }
}

/// Horizontal strip of evenly spaced turntable frames.
pub fn contact_sheet(tt: &Turntable) -> CliResult<ImageBuffer> {
    let n = tt.len();
    let frames: Vec<ImageBuffer> = (0..SHEET_VIEWS.min(n))
        .map(|k| tt.images[k * n / SHEET_VIEWS.min(n)].clone())
        .collect();
    ImageBuffer::hstack(&frames).map_err(runtime)
}

/// Reference object, templates and score model for one configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: ScenarioConfig,
    pub table: CondProbTable,
    pub reference: VoxelField,
    pub templates: TemplateSet,
    pub model: ToyScoreModel,
}

impl Scenario {
    pub fn build(cfg: ScenarioConfig) -> CliResult<Scenario> {
        cfg.validate()?;
        let table = match &cfg.table_path {
            Some(p) => CondProbTable::load(p).map_err(invalid)?,
            None => CondProbTable::example(),
        };
        if let Err(v) = table.validate() {
            let lines: Vec<String> = v.iter().map(ToString::to_string).collect();
            return Err(crate::error::CliError::config(format!(
                "table: {}",
                lines.join("; ")
            )));
        }
        let (reference, templates) =
            build_reference(&cfg.reference_config(), &cfg.bins(), &cfg.bias).map_err(invalid)?;
        let model = ToyScoreModel::new(templates.clone(), cfg.bias.clone()).map_err(invalid)?;
        Ok(Scenario {
            cfg,
            table,
            reference,
            templates,
            model,
        })
    }

    pub fn bins(&self) -> jlab::prompt::ViewBinConfig {
        self.cfg.bins()
    }

    fn debias(&self, on: bool) -> Option<PromptDebias> {
        on.then(|| PromptDebias {
            table: self.table.clone(),
            pmi: self.cfg.pmi,
        })
    }

    /// Run config of the configured single run (`optimize`).
    pub fn single_config(&self, seed: u64) -> RunConfig {
        let mut run = self.cfg.run_config(seed);
        run.debias = self.debias(self.cfg.debias);
        run
    }

    /// Run config of an ablation arm.
    pub fn arm_config(&self, arm: Arm, seed: u64) -> RunConfig {
        let c = &self.cfg;
        let mut run = c.run_config(seed);
        let dynamic = c.clip_for(ClipMode::Dynamic, c.run.clip.psi_static);
        let (clip, debias) = match arm {
            Arm::Baseline => (c.clip_for(ClipMode::None, c.run.clip.psi_static), false),
            Arm::PromptDebias => (c.clip_for(ClipMode::None, c.run.clip.psi_static), true),
            Arm::DynamicClip => (dynamic, false),
            Arm::Full => (dynamic, true),
            Arm::TrioNone => (c.clip_for(ClipMode::None, c.trio_psi_static), c.trio_debias),
            Arm::TrioStatic => (
                c.clip_for(ClipMode::Static, c.trio_psi_static),
                c.trio_debias,
            ),
            Arm::TrioDynamic => (dynamic, c.trio_debias),
        };
        run.clip = clip;
        run.debias = self.debias(debias);
        run
    }

    /// Turntable metrics of any field against this scenario's templates.
    pub fn evaluate(
        &self,
        run_id: &str,
        field: &VoxelField,
    ) -> CliResult<(MetricReport, Turntable)> {
        evaluate(
            run_id,
            field,
            &self.templates,
            &self.bins(),
            &self.cfg.bias.canonical_bin,
            &self.cfg.metric_config(),
        )
        .map_err(runtime)
    }

    pub fn train(&self, run: &RunConfig, arm: Option<Arm>) -> CliResult<RunOutcome> {
        run.validate().map_err(invalid)?;
        let (field, logs) = optimize(run, &self.model).map_err(runtime)?;
        let id = match arm {
            Some(a) => format!("{a}_seed{}", run.seed),
            None => format!("seed{}", run.seed),
        };
        let (report, turntable) = self.evaluate(&id, &field)?;
        Ok(RunOutcome {
            arm,
            seed: run.seed,
            field,
            logs,
            report,
            turntable,
        })
    }

    pub fn run_arm(&self, arm: Arm, seed: u64) -> CliResult<RunOutcome> {
        self.train(&self.arm_config(arm, seed), Some(arm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_differ_only_in_their_cures() {
        let s = Scenario::build(ScenarioConfig::default()).unwrap();
        let base = s.arm_config(Arm::Baseline, 1);
        let full = s.arm_config(Arm::Full, 1);
        assert_eq!(base.clip.mode, ClipMode::None);
        assert!(base.debias.is_none());
        assert_eq!(full.clip.mode, ClipMode::Dynamic);
        assert!(full.debias.is_some());
        assert_eq!((full.clip.psi_start, full.clip.psi_end), (2.0, 8.0));
        let stat = s.arm_config(Arm::TrioStatic, 1);
        assert_eq!(
            (stat.clip.mode, stat.clip.psi_static),
            (ClipMode::Static, 2.0)
        );
        for arm in Arm::GRID.into_iter().chain(Arm::TRIO) {
            let c = s.arm_config(arm, 1);
            assert_eq!(
                (c.seed, c.steps, c.adam, c.prompt.clone()),
                (1, 2000, base.adam, base.prompt.clone())
            );
            c.validate().unwrap();
        }
    }
}
