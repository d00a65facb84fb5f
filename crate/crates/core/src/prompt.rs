//! View prompts and contradiction filtering of user prompts.
//!
//! A camera pose is mapped to a view prompt ("front view", "side view", ...).
//! A user-prompt word `u` is scored against a view `v` with
//!
//! ```text
//! pmi(v, u) = P(v | u) / sum_{u' in {present, absent}} P(v | u') P(u')
//! ```
//!
//! and dropped when it is both negatively associated with the view
//! (`pmi < 1`) and far from its best view (`pmi / max_v' pmi < threshold`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use crate::{Error, Result};

pub const FRONT_VIEW: &str = "front view";
pub const SIDE_VIEW: &str = "side view";
pub const BACK_VIEW: &str = "back view";
pub const TOP_VIEW: &str = "top view";

/// Probability rows must sum to one within this tolerance.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Azimuth interval in degrees; `lo` may be negative to wrap through 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AzimuthInterval {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl AzimuthInterval {
    pub fn closed(lo: f64, hi: f64) -> Self {
        AzimuthInterval {
            lo,
            hi,
            lo_closed: true,
            hi_closed: true,
        }
    }

    pub fn open(lo: f64, hi: f64) -> Self {
        AzimuthInterval {
            lo,
            hi,
            lo_closed: false,
            hi_closed: false,
        }
    }

    pub fn contains(&self, azimuth_deg: f64) -> bool {
        let a = self.lo + (azimuth_deg - self.lo).rem_euclid(360.0);
        let above = a > self.lo || (self.lo_closed && a == self.lo);
        let below = a < self.hi || (self.hi_closed && a == self.hi);
        above && below
    }

    pub fn center(&self) -> f64 {
        (0.5 * (self.lo + self.hi)).rem_euclid(360.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewBin {
    pub name: String,
    pub intervals: Vec<AzimuthInterval>,
}

impl ViewBin {
    /// Center of the first interval, in degrees.
    pub fn center_azimuth(&self) -> f64 {
        self.intervals.first().map_or(0.0, |i| i.center())
    }

    pub fn contains(&self, azimuth_deg: f64) -> bool {
        self.intervals.iter().any(|i| i.contains(azimuth_deg))
    }
}

/// Camera-space partition into view prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBinConfig {
    pub bins: Vec<ViewBin>,
    /// Bin name used above `top_elevation_deg`.
    pub top_name: String,
    pub top_elevation_deg: f64,
}

impl Default for ViewBinConfig {
    fn default() -> Self {
        ViewBinConfig::with_front_half_width(22.5)
    }
}

impl ViewBinConfig {
    /// Front `[-w, w]`, back `[180-w, 180+w]`, side everything in between,
    /// top above 60 degrees of elevation.
    pub fn with_front_half_width(w: f64) -> Self {
        ViewBinConfig {
            bins: vec![
                ViewBin {
                    name: FRONT_VIEW.into(),
                    intervals: vec![AzimuthInterval::closed(-w, w)],
                },
                ViewBin {
                    name: SIDE_VIEW.into(),
                    intervals: vec![
                        AzimuthInterval::open(w, 180.0 - w),
                        AzimuthInterval::open(180.0 + w, 360.0 - w),
                    ],
                },
                ViewBin {
                    name: BACK_VIEW.into(),
                    intervals: vec![AzimuthInterval::closed(180.0 - w, 180.0 + w)],
                },
            ],
            top_name: TOP_VIEW.into(),
            top_elevation_deg: 60.0,
        }
    }

    /// Names of every bin including the top bin.
    pub fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.bins.iter().map(|b| b.name.as_str()).collect();
        v.push(&self.top_name);
        v
    }

    pub fn bin(&self, name: &str) -> Option<&ViewBin> {
        self.bins.iter().find(|b| b.name == name)
    }

    /// Azimuth bin ignoring the elevation override.
    pub fn azimuth_bin(&self, azimuth_deg: f64) -> &str {
        self.bins
            .iter()
            .find(|b| b.contains(azimuth_deg))
            .map_or(self.top_name.as_str(), |b| b.name.as_str())
    }

    /// View prompt for a pose, angles in degrees.
    pub fn assign(&self, azimuth_deg: f64, elevation_deg: f64) -> &str {
        if elevation_deg > self.top_elevation_deg {
            return &self.top_name;
        }
        self.azimuth_bin(azimuth_deg)
    }

    /// Checks that the azimuth intervals tile `[0, 360)` exactly once,
    /// probing every interval endpoint and a fine grid.
    pub fn validate(&self) -> Result<()> {
        let mut probes: Vec<f64> = (0..3600).map(|i| i as f64 * 0.1).collect();
        for b in &self.bins {
            for iv in &b.intervals {
                for e in [iv.lo, iv.hi] {
                    probes.push(e.rem_euclid(360.0));
                }
            }
        }
        for a in probes {
            let hits = self
                .bins
                .iter()
                .flat_map(|b| &b.intervals)
                .filter(|iv| iv.contains(a))
                .count();
            if hits != 1 {
                return Err(Error::InvalidArgument(format!(
                    "azimuth {a} covered by {hits} view intervals"
                )));
            }
        }
        Ok(())
    }
}

/// Assigns the view prompt for a pose (degrees).
pub fn assign_view_prompt(azimuth_deg: f64, elevation_deg: f64, cfg: &ViewBinConfig) -> String {
    cfg.assign(azimuth_deg, elevation_deg).to_string()
}

/// A user prompt: ordered lowercase words plus the words that must never be
/// dropped.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Prompt {
    words: Vec<String>,
    protected: BTreeSet<String>,
}

impl Prompt {
    pub fn parse(text: &str) -> Prompt {
        Prompt {
            words: text.split_whitespace().map(str::to_lowercase).collect(),
            protected: BTreeSet::new(),
        }
    }

    /// Marks words as protected; words absent from the prompt are ignored.
    pub fn protect<'a>(mut self, words: impl IntoIterator<Item = &'a str>) -> Prompt {
        for w in words {
            let w = w.to_lowercase();
            if self.words.contains(&w) {
                self.protected.insert(w);
            }
        }
        self
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_protected(&self, word: &str) -> bool {
        self.protected.contains(word)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.iter().any(|w| w == word)
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// `"<view>, <words>"`, the string fed to the score model for a pose.
pub fn render_view_prompt(view: &str, prompt: &Prompt) -> String {
    if prompt.is_empty() {
        format!("{view},")
    } else {
        format!("{view}, {}", prompt.text())
    }
}

/// One table row as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub word: String,
    pub view: String,
    pub p_given_present: f64,
    pub p_given_absent: f64,
    pub prior: Option<f64>,
    /// 1-based line in the source file (header is line 1).
    pub line: usize,
}

/// A failed table invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub line: usize,
    pub word: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {} ({}): {}", self.line, self.word, self.message)
    }
}

/// Conditional view probabilities per word: `P(v | u present)`,
/// `P(v | u absent)` and the prior `P(u present)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CondProbTable {
    rows: Vec<TableRow>,
    index: BTreeMap<(String, String), usize>,
}

/// Small documented table: "smiling" concentrates on front views, "a" and
/// "dog" are uniform over the four views.
pub const EXAMPLE_TABLE_CSV: &str = include_str!("../data/example_table.csv");

pub const TABLE_COLUMNS: [&str; 5] = ["word", "view", "p_given_present", "p_given_absent", "prior"];

impl CondProbTable {
    pub fn from_rows(rows: Vec<TableRow>) -> CondProbTable {
        let index = rows
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.word.clone(), r.view.clone()), i))
            .collect();
        CondProbTable { rows, index }
    }

    /// Table where every word has the given view distributions.
    pub fn from_distributions(entries: &[(&str, f64, &[(&str, f64, f64)])]) -> CondProbTable {
        let mut rows = Vec::new();
        for (word, prior, views) in entries {
            for (view, present, absent) in views.iter() {
                rows.push(TableRow {
                    word: word.to_string(),
                    view: view.to_string(),
                    p_given_present: *present,
                    p_given_absent: *absent,
                    prior: Some(*prior),
                    line: rows.len() + 2,
                });
            }
        }
        CondProbTable::from_rows(rows)
    }

    pub fn rows(&self) -> &[TableRow] {
        &self.rows
    }

    pub fn has_word(&self, word: &str) -> bool {
        self.rows.iter().any(|r| r.word == word)
    }

    pub fn row(&self, word: &str, view: &str) -> Result<&TableRow> {
        self.index
            .get(&(word.to_string(), view.to_string()))
            .map(|&i| &self.rows[i])
            .ok_or_else(|| {
                Error::Lookup(format!("no table row for word {word:?} and view {view:?}"))
            })
    }

    /// Views listed for a word, in file order.
    pub fn views_for(&self, word: &str) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| r.word == word)
            .map(|r| r.view.as_str())
            .collect()
    }

    /// Stored prior for a word, if any row carries one.
    pub fn prior(&self, word: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.word == word)
            .and_then(|r| r.prior)
    }

    /// The parsed and validated [`EXAMPLE_TABLE_CSV`].
    pub fn example() -> CondProbTable {
        let table = Self::parse(EXAMPLE_TABLE_CSV).expect("bundled table parses");
        debug_assert!(table.validate().is_ok());
        table
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CondProbTable> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table = Self::parse(&text)?;
        table.validate().map_err(Error::Violations)?;
        Ok(table)
    }

    /// Parses CSV text without validating probabilities.
    pub fn parse(text: &str) -> Result<CondProbTable> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let mut col = [0usize; 5];
        for (k, name) in TABLE_COLUMNS.iter().enumerate() {
            col[k] = header
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::Parse {
                    line: 1,
                    message: format!("missing column {name:?}"),
                })?;
        }
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            let field = |k: usize| record.get(col[k]).unwrap_or("");
            let prob = |k: usize| -> Result<f64> {
                field(k).parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!(
                        "column {:?}: not a number: {:?}",
                        TABLE_COLUMNS[k],
                        field(k)
                    ),
                })
            };
            let word = field(0).to_lowercase();
            if word.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "empty word".into(),
                });
            }
            let prior = if field(4).is_empty() {
                None
            } else {
                Some(prob(4)?)
            };
            rows.push(TableRow {
                word,
                view: field(1).to_string(),
                p_given_present: prob(2)?,
                p_given_absent: prob(3)?,
                prior,
                line,
            });
        }
        Ok(CondProbTable::from_rows(rows))
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TABLE_COLUMNS).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.word.clone(),
                r.view.clone(),
                format!("{:?}", r.p_given_present),
                format!("{:?}", r.p_given_absent),
                r.prior.map_or(String::new(), |p| format!("{p:?}")),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8 csv")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Lists every broken invariant: probability ranges, duplicate rows,
    /// inconsistent priors, and per-word row sums away from one.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        let mut words: BTreeMap<&str, Vec<&TableRow>> = BTreeMap::new();
        for r in &self.rows {
            let v = |message: String| Violation {
                line: r.line,
                word: r.word.clone(),
                message,
            };
            for (name, p) in [
                ("p_given_present", r.p_given_present),
                ("p_given_absent", r.p_given_absent),
            ] {
                if !(0.0..=1.0).contains(&p) {
                    out.push(v(format!("{name} = {p} outside [0, 1]")));
                }
            }
            if let Some(p) = r.prior {
                if !(0.0..=1.0).contains(&p) {
                    out.push(v(format!("prior = {p} outside [0, 1]")));
                }
            }
            if !seen.insert((&r.word, &r.view)) {
                out.push(v(format!("duplicate row for view {:?}", r.view)));
            }
            words.entry(&r.word).or_default().push(r);
        }
        for (word, rows) in words {
            let first = rows[0];
            for r in &rows[1..] {
                if r.prior != first.prior {
                    out.push(Violation {
                        line: r.line,
                        word: word.to_string(),
                        message: format!(
                            "prior {:?} differs from {:?} on line {}",
                            r.prior, first.prior, first.line
                        ),
                    });
                }
            }
            for (label, sum) in [
                (
                    "p_given_present",
                    rows.iter().map(|r| r.p_given_present).sum::<f64>(),
                ),
                (
                    "p_given_absent",
                    rows.iter().map(|r| r.p_given_absent).sum::<f64>(),
                ),
            ] {
                if (sum - 1.0).abs() > NORMALIZATION_TOL {
                    out.push(Violation {
                        line: first.line,
                        word: word.to_string(),
                        message: format!("{label} sums to {sum} over views, expected 1"),
                    });
                }
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmiNormalizer {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmiConfig {
    /// Normalized-score cutoff below which a word is dropped.
    pub threshold: f64,
    /// `P(u present)` for words whose table rows carry no prior.
    pub default_prior: f64,
    pub normalizer: PmiNormalizer,
}

impl Default for PmiConfig {
    fn default() -> Self {
        PmiConfig {
            threshold: 0.95,
            default_prior: 0.5,
            normalizer: PmiNormalizer::Max,
        }
    }
}

/// `P(v | u) / P(v)` with `P(v)` marginalized over presence and absence of `u`.
///
/// `prior` overrides the table's `P(u present)`.
pub fn pmi(view: &str, word: &str, table: &CondProbTable, prior: Option<f64>) -> Result<f64> {
    let row = table.row(word, view)?;
    let p_u = prior
        .or(row.prior)
        .unwrap_or(PmiConfig::default().default_prior);
    pmi_from(row.p_given_present, row.p_given_absent, p_u)
}

fn pmi_from(present: f64, absent: f64, p_u: f64) -> Result<f64> {
    // Exact when the word is uniform over views or certainly present.
    let marginal = if present == absent {
        present
    } else {
        p_u * present + (1.0 - p_u) * absent
    };
    if !(marginal > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "view has zero marginal probability (P(v|u)={present}, P(v|~u)={absent}, P(u)={p_u})"
        )));
    }
    Ok(present / marginal)
}

/// Per-word scores against one view.
#[derive(Debug, Clone, PartialEq)]
pub struct WordScore {
    pub word: String,
    pub protected: bool,
    pub pmi: f64,
    pub normalized: f64,
    pub removed: bool,
}

/// Scores every word of `prompt` against `view`.
pub fn score_words(
    prompt: &Prompt,
    view: &str,
    table: &CondProbTable,
    cfg: &PmiConfig,
) -> Result<Vec<WordScore>> {
    prompt
        .words()
        .iter()
        .map(|word| {
            let protected = prompt.is_protected(word);
            if protected {
                // P(u) = 1 makes the ratio exactly one for every view.
                return Ok(WordScore {
                    word: word.clone(),
                    protected,
                    pmi: 1.0,
                    normalized: 1.0,
                    removed: false,
                });
            }
            if !table.has_word(word) {
                return Err(Error::Lookup(format!(
                    "word {word:?} is not covered by the table"
                )));
            }
            let p_u = table.prior(word).unwrap_or(cfg.default_prior);
            let at = |v: &str| -> Result<f64> {
                let r = table.row(word, v)?;
                pmi_from(r.p_given_present, r.p_given_absent, p_u)
            };
            let raw = at(view)?;
            let all = table
                .views_for(word)
                .into_iter()
                .map(at)
                .collect::<Result<Vec<f64>>>()?;
            let norm = match cfg.normalizer {
                PmiNormalizer::Max => all.iter().cloned().fold(f64::MIN, f64::max),
                PmiNormalizer::Mean => all.iter().sum::<f64>() / all.len() as f64,
            };
            let normalized = raw / norm;
            Ok(WordScore {
                word: word.clone(),
                protected,
                pmi: raw,
                normalized,
                removed: raw < 1.0 && normalized < cfg.threshold,
            })
        })
        .collect()
}

/// Drops the words of `prompt` that contradict `view`.
///
/// Survivors keep their order. If every word would be dropped the prompt is
/// returned unchanged, so a non-empty prompt never becomes empty.
pub fn debias_prompt(
    prompt: &Prompt,
    view: &str,
    table: &CondProbTable,
    cfg: &PmiConfig,
) -> Result<Prompt> {
    let scores = score_words(prompt, view, table, cfg)?;
    if scores.iter().all(|s| s.removed) {
        return Ok(prompt.clone());
    }
    let words: Vec<String> = scores
        .into_iter()
        .filter(|s| !s.removed)
        .map(|s| s.word)
        .collect();
    let protected = prompt
        .protected
        .iter()
        .filter(|w| words.contains(w))
        .cloned()
        .collect();
    Ok(Prompt { words, protected })
}
