//! Speaker-level fairness evaluation of classifier predictions.
//!
//! Chunk-level UAR treats every utterance as an independent trial. Each
//! speaker's own UAR is that speaker's utility; the utility vector is then
//! summarised by descriptive statistics, the Gini coefficient and the
//! isoelastic (Atkinson) welfare family.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numerics::log_sum_exp;

pub const PREDICTIONS_HEADER: &str = "id,speaker,true_label,pred_label";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRecord {
    pub id: String,
    pub speaker: String,
    pub true_label: usize,
    pub pred_label: usize,
}

pub fn predictions_to_csv(records: &[PredictionRecord]) -> String {
    let mut out = format!("{PREDICTIONS_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.id, r.speaker, r.true_label, r.pred_label
        ));
    }
    out
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<PredictionRecord>> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == PREDICTIONS_HEADER => {}
        _ => return Err(perr(1, format!("expected header `{PREDICTIONS_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(perr(lineno, "expected 4 fields".into()));
        }
        let label = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| perr(lineno, format!("bad label `{s}`")))
        };
        out.push(PredictionRecord {
            id: parts[0].to_string(),
            speaker: parts[1].to_string(),
            true_label: label(parts[2])?,
            pred_label: label(parts[3])?,
        });
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_predictions(&text, path)
}

fn check_labels(records: &[PredictionRecord], classes: usize) -> Result<()> {
    for r in records {
        if r.true_label >= classes || r.pred_label >= classes {
            return Err(Error::invalid(format!(
                "record `{}` has a label outside 0..{classes}",
                r.id
            )));
        }
    }
    Ok(())
}

/// Per-class (hits, totals) accumulated from (true, correct) pairs.
fn recall_mean<I>(pairs: I, classes: usize) -> f64
where
    I: IntoIterator<Item = (usize, bool)>,
{
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (t, ok) in pairs {
        totals[t] += 1;
        if ok {
            hits[t] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for (h, n) in hits.iter().zip(&totals) {
        if *n > 0 {
            sum += *h as f64 / *n as f64;
            present += 1;
        }
    }
    sum / present as f64
}

/// Unweighted average recall over the classes present in the ground truth.
pub fn uar(records: &[PredictionRecord], classes: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("uar of no records".into()));
    }
    check_labels(records, classes)?;
    Ok(recall_mean(
        records
            .iter()
            .map(|r| (r.true_label, r.true_label == r.pred_label)),
        classes,
    ))
}

/// Per-speaker utilities, sorted by speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityVector {
    pub entries: Vec<SpeakerUtility>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerUtility {
    pub speaker: String,
    pub uar: f64,
}

impl UtilityVector {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.uar).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn uar_per_speaker(records: &[PredictionRecord], classes: usize) -> Result<UtilityVector> {
    if records.is_empty() {
        return Err(Error::Empty("per-speaker uar of no records".into()));
    }
    check_labels(records, classes)?;
    let mut by_speaker: BTreeMap<&str, Vec<(usize, bool)>> = BTreeMap::new();
    for r in records {
        by_speaker
            .entry(&r.speaker)
            .or_default()
            .push((r.true_label, r.true_label == r.pred_label));
    }
    Ok(UtilityVector {
        entries: by_speaker
            .into_iter()
            .map(|(s, pairs)| SpeakerUtility {
                speaker: s.to_string(),
                uar: recall_mean(pairs, classes),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityStats {
    pub mean: f64,
    /// Sample standard deviation (divisor N-1), 0 for a single value.
    pub std: f64,
    pub median: f64,
    pub max: f64,
    pub min: f64,
}

pub fn utility_stats(u: &[f64]) -> Result<UtilityStats> {
    if u.is_empty() {
        return Err(Error::Empty("statistics of no utilities".into()));
    }
    let n = u.len();
    let mean = u.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (u.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let mut sorted = u.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    Ok(UtilityStats {
        mean,
        std,
        median,
        max: sorted[n - 1],
        min: sorted[0],
    })
}

fn check_utilities(u: &[f64]) -> Result<()> {
    if u.is_empty() {
        return Err(Error::Empty("no utilities".into()));
    }
    for &x in u {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::invalid(format!(
                "utility {x} is not a finite non-negative value"
            )));
        }
    }
    Ok(())
}

/// Half the relative mean absolute difference, `Σ_i Σ_j |u_i - u_j| / (2 N² μ)`.
///
/// Evaluated in O(N log N) through the sorted form
/// `Σ_i (2i - N - 1) u_(i) / (N Σ u)`. All-zero utilities give 0.
pub fn gini(u: &[f64]) -> Result<f64> {
    check_utilities(u)?;
    let total: f64 = u.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let n = u.len();
    let mut sorted = u.to_vec();
    sorted.sort_by(f64::total_cmp);
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i + 1) as f64 - n as f64 - 1.0) * x)
        .sum();
    Ok((weighted / (n as f64 * total)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IswfMode {
    /// Power mean `M_{1-α}`: `((1/N) Σ u^{1-α})^{1/(1-α)}`.
    #[default]
    Atkinson,
    /// `(1/N) (Σ u^{1-α})^{1/(1-α)}`, with the 1/N outside the power.
    PaperVerbatim,
}

impl IswfMode {
    pub fn as_str(self) -> &'static str {
        match self {
            IswfMode::Atkinson => "atkinson",
            IswfMode::PaperVerbatim => "paper_verbatim",
        }
    }
}

impl fmt::Display for IswfMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IswfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "atkinson" => Ok(IswfMode::Atkinson),
            "paper" | "paper_verbatim" | "paper-verbatim" => Ok(IswfMode::PaperVerbatim),
            _ => Err(Error::invalid(format!("unknown ISWF mode `{s}`"))),
        }
    }
}

/// Isoelastic social welfare of a utility vector at inequality aversion `alpha`.
///
/// Any zero utility with `alpha >= 1` gives 0. For `alpha != 1` the sum of
/// powers is evaluated with log-sum-exp so large `alpha` does not overflow.
pub fn iswf(u: &[f64], alpha: f64, mode: IswfMode) -> Result<f64> {
    check_utilities(u)?;
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::invalid(format!(
            "alpha {alpha} must be finite and >= 0"
        )));
    }
    let n = u.len() as f64;
    if alpha == 0.0 {
        return Ok(u.iter().sum::<f64>() / n);
    }
    if alpha >= 1.0 && u.contains(&0.0) {
        return Ok(0.0);
    }
    let top = u.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(0.0);
    }
    // Utilities are scaled by their maximum so a constant vector is exact.
    if alpha == 1.0 {
        let mean_log = u.iter().map(|x| (x / top).ln()).sum::<f64>() / n;
        return Ok(top * mean_log.exp());
    }
    let r = 1.0 - alpha;
    let terms: Vec<f64> = u
        .iter()
        .map(|&x| {
            if x == 0.0 {
                f64::NEG_INFINITY
            } else {
                r * (x / top).ln()
            }
        })
        .collect();
    let lse = log_sum_exp(&terms);
    let log_w = match mode {
        IswfMode::Atkinson => (lse - n.ln()) / r,
        IswfMode::PaperVerbatim => lse / r - n.ln(),
    };
    let w = top * log_w.exp();
    if !w.is_finite() {
        return Err(Error::Numerical(format!(
            "ISWF overflows at alpha {alpha} in {mode} mode"
        )));
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IswfPoint {
    pub alpha: f64,
    pub w: f64,
}

/// 0 to 1 in steps of 0.05, then 40 geometric steps from 1 to 100.
pub fn default_alpha_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    grid[20] = 1.0;
    let steps = 40;
    for i in 1..=steps {
        grid.push(if i == steps {
            100.0
        } else {
            100f64.powf(i as f64 / steps as f64)
        });
    }
    grid
}

pub fn iswf_sweep(u: &[f64], grid: &[f64], mode: IswfMode) -> Result<Vec<IswfPoint>> {
    if grid.is_empty() {
        return Err(Error::Empty("alpha grid".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("alpha grid must be sorted ascending"));
    }
    grid.iter()
        .map(|&alpha| {
            Ok(IswfPoint {
                alpha,
                w: iswf(u, alpha, mode)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the `index`-th resample.
pub fn resample_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// UAR of every bootstrap resample, in resample order.
pub fn bootstrap_uars(
    records: &[PredictionRecord],
    classes: usize,
    cfg: &BootstrapConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::Empty("bootstrap of no records".into()));
    }
    check_labels(records, classes)?;
    let pairs: Vec<(usize, bool)> = records
        .iter()
        .map(|r| (r.true_label, r.true_label == r.pred_label))
        .collect();
    let n = pairs.len();
    Ok(exec.map_indexed(cfg.resamples, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(resample_seed(cfg.seed, b as u64));
        recall_mean((0..n).map(|_| pairs[rng.random_range(0..n)]), classes)
    }))
}

/// Percentile bootstrap interval of chunk-level UAR.
pub fn bootstrap_ci(
    records: &[PredictionRecord],
    classes: usize,
    cfg: &BootstrapConfig,
    exec: Exec,
) -> Result<Interval> {
    if cfg.resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level {} outside (0, 1)",
            cfg.level
        )));
    }
    let mut stats = bootstrap_uars(records, classes, cfg, exec)?;
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - cfg.level) / 2.0;
    Ok(Interval {
        lo: percentile_sorted(&stats, tail),
        hi: percentile_sorted(&stats, 1.0 - tail),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub classes: usize,
    /// `None` skips the interval.
    pub bootstrap: Option<BootstrapConfig>,
    pub mode: IswfMode,
    pub alpha_grid: Vec<f64>,
    pub seed: u64,
}

impl ReportOptions {
    pub fn new(classes: usize) -> Self {
        ReportOptions {
            classes,
            bootstrap: Some(BootstrapConfig::default()),
            mode: IswfMode::Atkinson,
            alpha_grid: default_alpha_grid(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub uar_c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<f64>,
    pub resamples: usize,
    pub seed: u64,
    pub classes: usize,
    pub records: usize,
    pub gini: f64,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub max: f64,
    pub min: f64,
    pub utilities: Vec<SpeakerUtility>,
    pub mode: IswfMode,
    pub iswf: Vec<IswfPoint>,
}

pub fn report(
    records: &[PredictionRecord],
    opts: &ReportOptions,
    exec: Exec,
) -> Result<FairnessReport> {
    let uar_c = uar(records, opts.classes)?;
    let utilities = uar_per_speaker(records, opts.classes)?;
    let values = utilities.values();
    let stats = utility_stats(&values)?;
    let ci = match &opts.bootstrap {
        Some(cfg) => Some((bootstrap_ci(records, opts.classes, cfg, exec)?, cfg)),
        None => None,
    };
    Ok(FairnessReport {
        uar_c,
        ci_lo: ci.map(|(i, _)| i.lo),
        ci_hi: ci.map(|(i, _)| i.hi),
        level: ci.map(|(_, c)| c.level),
        resamples: ci.map_or(0, |(_, c)| c.resamples),
        seed: ci.map_or(opts.seed, |(_, c)| c.seed),
        classes: opts.classes,
        records: records.len(),
        gini: gini(&values)?,
        mean: stats.mean,
        std: stats.std,
        median: stats.median,
        max: stats.max,
        min: stats.min,
        utilities: utilities.entries,
        mode: opts.mode,
        iswf: iswf_sweep(&values, &opts.alpha_grid, opts.mode)?,
    })
}

impl FairnessReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("bad report: {e}")))
    }

    /// Recomputes the summary fields from the embedded utilities and checks
    /// the ordering invariants. Returns the list of violations.
    pub fn consistency_violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let values: Vec<f64> = self.utilities.iter().map(|e| e.uar).collect();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
        match utility_stats(&values) {
            Ok(s) => {
                for (name, got, want) in [
                    ("mean", self.mean, s.mean),
                    ("std", self.std, s.std),
                    ("median", self.median, s.median),
                    ("max", self.max, s.max),
                    ("min", self.min, s.min),
                ] {
                    if !close(got, want) {
                        bad.push(format!("{name}: stored {got}, recomputed {want}"));
                    }
                }
            }
            Err(e) => bad.push(e.to_string()),
        }
        match gini(&values) {
            Ok(g) if !close(g, self.gini) => {
                bad.push(format!("gini: stored {}, recomputed {g}", self.gini))
            }
            Err(e) => bad.push(e.to_string()),
            _ => {}
        }
        if !(self.min <= self.median && self.median <= self.max) {
            bad.push("median outside [min, max]".into());
        }
        if !(0.0..=1.0).contains(&self.gini) {
            bad.push("gini outside [0, 1]".into());
        }
        if let (Some(lo), Some(hi)) = (self.ci_lo, self.ci_hi) {
            if lo > hi {
                bad.push("ci_lo > ci_hi".into());
            }
        }
        for p in &self.iswf {
            match iswf(&values, p.alpha, self.mode) {
                Ok(w) if !close(w, p.w) => bad.push(format!(
                    "iswf at alpha {}: stored {}, recomputed {w}",
                    p.alpha, p.w
                )),
                Err(e) => bad.push(e.to_string()),
                _ => {}
            }
        }
        bad
    }
}

/// CSV with one `w_<name>` column per model: `alpha,w_a,w_b,...`.
pub fn sweep_csv(names: &[String], curves: &[Vec<IswfPoint>]) -> Result<String> {
    if names.len() != curves.len() {
        return Err(Error::dim(curves.len(), names.len(), "sweep column names"));
    }
    let Some(first) = curves.first() else {
        return Err(Error::Empty("no curves to export".into()));
    };
    if curves.iter().any(|c| c.len() != first.len()) {
        return Err(Error::invalid("curves evaluated on different grids"));
    }
    let mut out = String::from("alpha");
    for n in names {
        out.push_str(&format!(",w_{n}"));
    }
    out.push('\n');
    for (i, p) in first.iter().enumerate() {
        out.push_str(&p.alpha.to_string());
        for c in curves {
            out.push(',');
            out.push_str(&c[i].w.to_string());
        }
        out.push('\n');
    }
    Ok(out)
}
