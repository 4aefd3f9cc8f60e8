//! Evaluation metrics over episode logs and banks, plus report writers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MemrlError, Result};
use crate::simulation::EpisodeLog;
use crate::store::{MemoryBank, OutcomeLabel};

/// Default minimum number of top selections for a memory to enter the
/// Q-success correlation.
pub const MIN_SELECTIONS: usize = 5;

fn epoch_outcomes(logs: &[EpisodeLog], epoch: u32) -> BTreeMap<u64, bool> {
    // last visit wins if a task appears twice in one epoch
    logs.iter()
        .filter(|l| l.epoch == epoch)
        .map(|l| (l.task_id, l.success))
        .collect()
}

/// Successes in `epoch` divided by episodes in `epoch`.
pub fn epoch_accuracy(logs: &[EpisodeLog], epoch: u32) -> Result<f64> {
    let (n, wins) = logs
        .iter()
        .filter(|l| l.epoch == epoch)
        .fold((0usize, 0usize), |(n, w), l| (n + 1, w + usize::from(l.success)));
    if n == 0 {
        return Err(MemrlError::invalid(format!("no episodes in epoch {epoch}")));
    }
    Ok(wins as f64 / n as f64)
}

/// Fraction of tasks seen up to `through_epoch` that succeeded at least once.
pub fn cumulative_success_rate(logs: &[EpisodeLog], through_epoch: u32) -> Result<f64> {
    let mut seen = BTreeSet::new();
    let mut solved = BTreeSet::new();
    for l in logs.iter().filter(|l| l.epoch <= through_epoch) {
        seen.insert(l.task_id);
        if l.success {
            solved.insert(l.task_id);
        }
    }
    if seen.is_empty() {
        return Err(MemrlError::invalid(format!("no episodes up to epoch {through_epoch}")));
    }
    Ok(solved.len() as f64 / seen.len() as f64)
}

/// Among tasks that succeeded in `epoch - 1`, the fraction that fail in
/// `epoch`. Zero when nothing succeeded in the previous epoch.
pub fn forgetting_rate(logs: &[EpisodeLog], epoch: u32) -> Result<f64> {
    if epoch < 2 {
        return Err(MemrlError::invalid("forgetting rate needs a previous epoch"));
    }
    let prev = epoch_outcomes(logs, epoch - 1);
    let cur = epoch_outcomes(logs, epoch);
    if cur.is_empty() {
        return Err(MemrlError::invalid(format!("no episodes in epoch {epoch}")));
    }
    let mut denom = 0usize;
    let mut regressed = 0usize;
    for (task, ok) in prev {
        if !ok {
            continue;
        }
        if let Some(&now) = cur.get(&task) {
            denom += 1;
            if !now {
                regressed += 1;
            }
        }
    }
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(regressed as f64 / denom as f64)
}

/// Mean of [`forgetting_rate`] over epochs `2..=last_epoch`.
pub fn mean_forgetting_rate(logs: &[EpisodeLog], last_epoch: u32) -> Result<f64> {
    if last_epoch < 2 {
        return Err(MemrlError::invalid("mean forgetting rate needs at least two epochs"));
    }
    let mut total = 0.0;
    for e in 2..=last_epoch {
        total += forgetting_rate(logs, e)?;
    }
    Ok(total / f64::from(last_epoch - 1))
}

/// Pearson correlation; `None` when either side has zero variance or fewer
/// than two points.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx < 1e-24 || syy < 1e-24 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub id: u64,
    pub q: f64,
    pub success_rate: f64,
    pub selections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSuccessCorrelation {
    /// NaN when undefined (serialized as null).
    pub r: f64,
    pub points: Vec<CorrelationPoint>,
    /// Memories that were top-selected at least once but fewer than
    /// `min_selections` times.
    pub excluded: usize,
}

/// Pearson r between each memory's current utility and its empirical success
/// rate over the episodes where it was the top-selected memory.
pub fn q_success_correlation(
    bank: &MemoryBank,
    logs: &[EpisodeLog],
    min_selections: usize,
) -> QSuccessCorrelation {
    let mut tally: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for l in logs {
        if let Some(id) = l.top_id {
            let e = tally.entry(id).or_default();
            e.0 += 1;
            e.1 += usize::from(l.success);
        }
    }
    let mut points = Vec::new();
    let mut excluded = 0;
    for (id, (n, wins)) in tally {
        let Some(t) = bank.get(id) else { continue };
        if n < min_selections.max(1) {
            excluded += 1;
            continue;
        }
        points.push(CorrelationPoint {
            id,
            q: t.utility,
            success_rate: wins as f64 / n as f64,
            selections: n,
        });
    }
    let qs: Vec<f64> = points.iter().map(|p| p.q).collect();
    let rates: Vec<f64> = points.iter().map(|p| p.success_rate).collect();
    QSuccessCorrelation {
        r: pearson(&qs, &rates).unwrap_or(f64::NAN),
        points,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub success_fraction: f64,
    pub failure_fraction: f64,
    pub unlabeled_fraction: f64,
}

/// Bins utilities into `[lo, lo + width)` intervals aligned to multiples of
/// `width`; the last bin is closed on the right. Reports the outcome-label
/// composition of each bin. An empty bank gives no bins.
pub fn q_bin_composition(bank: &MemoryBank, bin_width: f64) -> Result<Vec<QBin>> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(MemrlError::invalid("bin width must be positive"));
    }
    let qs: Vec<(f64, OutcomeLabel)> = bank
        .triplets()
        .iter()
        .map(|t| (t.utility, t.outcome_label))
        .collect();
    if qs.is_empty() {
        return Ok(Vec::new());
    }
    let min = qs.iter().map(|q| q.0).fold(f64::INFINITY, f64::min);
    let max = qs.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max);
    let start = (min / bin_width).floor() as i64;
    let mut end = (max / bin_width).ceil() as i64;
    if end <= start {
        end = start + 1;
    }
    let n = (end - start) as usize;
    let edge = |i: usize| (start + i as i64) as f64 * bin_width;
    let mut counts = vec![[0usize; 3]; n];
    for (q, label) in qs {
        let mut i = (((q / bin_width).floor() as i64 - start).max(0) as usize).min(n - 1);
        while i + 1 < n && q >= edge(i + 1) {
            i += 1;
        }
        while i > 0 && q < edge(i) {
            i -= 1;
        }
        let slot = match label {
            OutcomeLabel::Success => 0,
            OutcomeLabel::Failure => 1,
            OutcomeLabel::Unlabeled => 2,
        };
        counts[i][slot] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let count = c.iter().sum::<usize>();
            let frac = |k: usize| if count == 0 { 0.0 } else { c[k] as f64 / count as f64 };
            QBin {
                lo: edge(i),
                hi: edge(i + 1),
                count,
                success_fraction: frac(0),
                failure_fraction: frac(1),
                unlabeled_fraction: frac(2),
            }
        })
        .collect())
}

/// Number of top selections per memory id.
pub fn selection_counts(logs: &[EpisodeLog]) -> HashMap<u64, usize> {
    let mut counts = HashMap::new();
    for id in logs.iter().filter_map(|l| l.top_id) {
        *counts.entry(id).or_insert(0) += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    /// `values[i]` belongs to epoch `i + 1`.
    pub values: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricSeries {
    pub fn new(name: impl Into<String>, values: Vec<f64>, config_hash: &str, seed: u64) -> Self {
        Self {
            name: name.into(),
            values,
            config_hash: config_hash.to_string(),
            seed,
        }
    }
}

/// A named pass/fail check attached to a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub config_hash: String,
    pub series: Vec<MetricSeries>,
    pub summary: serde_json::Value,
    pub bins: Vec<QBin>,
    pub checks: Vec<Check>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One row per (metric, epoch): `metric,epoch,value,seed,config_hash`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,epoch,value,seed,config_hash\n");
        for s in &self.series {
            for (i, v) in s.values.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{},{}", s.name, i + 1, v, s.seed, s.config_hash);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| MemrlError::invalid(e.to_string()))
    }

    /// Writes `<experiment>.csv` and `<experiment>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let csv = dir.join(format!("{}.csv", self.experiment));
        let json = dir.join(format!("{}.json", self.experiment));
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(&json, self.to_json()? + "\n")?;
        Ok((csv, json))
    }
}
