//! Consistency-based confidence targets and fine-tuning datasets.
//!
//! The training signal for a question is the empirical accuracy of all
//! training questions with the same consistency level, `a(s)`, plus a small
//! uniform jitter. Before targets are built the level distribution is
//! flattened so one level (typically `s = 1`) cannot dominate.

mod sft;

pub use sft::{
    build_pair_sft, build_single_sft, comparison_sft, comparison_target_text, export_finetune_file, merge_multitask,
    parse_comparison_target, parse_single_target, read_finetune_file, single_target_text, AdvisoryHyperparameters,
    ComparisonInstance, ExportContext, FinetuneManifest, SftInstance, TaskTag,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::ConsistencyRecord;
use crate::rng::{stream, StreamRng};

/// Half-width of the uniform jitter added to `a(s)`.
pub const EPSILON_HALF_WIDTH: f64 = 0.05;
pub const DEFAULT_MAX_GAP: f64 = 0.20;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("{0}: no records")]
    Empty(&'static str),
    #[error("record {id} has N = {found}, curve was built with N = {expected}")]
    SampleCountMismatch { id: String, expected: usize, found: usize },
    #[error("record {id}: consistency {s} is not a multiple of 1/{n}")]
    OffGrid { id: String, s: f64, n: usize },
    #[error("question {0} not found in the question set")]
    UnknownQuestion(String),
    #[error("no permissible pairs: every record has the same consistency")]
    NoPermissiblePairs,
    #[error("requested {requested} pairs but only {available} distinct unequal-consistency pairs exist")]
    TooManyPairs { requested: usize, available: usize },
    #[error("max gap {0} outside [0, 1)")]
    InvalidGap(f64),
    #[error("malformed fine-tune line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Prompt(#[from] crate::gateway::GatewayError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Integer consistency level `k = s * N` of a record.
pub fn level_of(record: &ConsistencyRecord) -> Result<usize, TargetError> {
    let n = record.n_samples;
    let k = (record.score * n as f64).round();
    if n == 0 || (record.score * n as f64 - k).abs() > 1e-6 || k < 1.0 || k > n as f64 {
        return Err(TargetError::OffGrid {
            id: record.question_id.clone(),
            s: record.score,
            n,
        });
    }
    Ok(k as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveLevel {
    pub s: f64,
    pub count: usize,
    pub correct: usize,
    /// `None` when no record sits at this level.
    pub accuracy: Option<f64>,
}

/// Empirical accuracy per consistency level `s = k/N`, `k = 1..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub n: usize,
    pub source: String,
    pub levels: Vec<CurveLevel>,
}

impl AccuracyCurve {
    pub fn from_records(records: &[ConsistencyRecord], source: &str) -> Result<Self, TargetError> {
        let first = records.first().ok_or(TargetError::Empty("accuracy curve"))?;
        let n = first.n_samples;
        let mut counts = vec![(0usize, 0usize); n];
        for r in records {
            if r.n_samples != n {
                return Err(TargetError::SampleCountMismatch {
                    id: r.question_id.clone(),
                    expected: n,
                    found: r.n_samples,
                });
            }
            let slot = &mut counts[level_of(r)? - 1];
            slot.0 += 1;
            slot.1 += r.correct as usize;
        }
        let levels = counts
            .iter()
            .enumerate()
            .map(|(i, &(count, correct))| CurveLevel {
                s: (i + 1) as f64 / n as f64,
                count,
                correct,
                accuracy: (count > 0).then(|| correct as f64 / count as f64),
            })
            .collect();
        Ok(AccuracyCurve {
            n,
            source: source.to_string(),
            levels,
        })
    }

    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.count).sum()
    }

    /// Accuracy at level `k`; empty levels take the nearest populated level,
    /// preferring the lower one on ties.
    pub fn accuracy_at_level(&self, k: usize) -> f64 {
        assert!(k >= 1 && k <= self.n, "level {k} outside 1..={}", self.n);
        let at = |j: usize| self.levels[j - 1].accuracy;
        for d in 0..self.n {
            if let Some(a) = k.checked_sub(d).filter(|&j| j >= 1).and_then(at) {
                return a;
            }
            if let Some(a) = Some(k + d).filter(|&j| j <= self.n).and_then(at) {
                return a;
            }
        }
        unreachable!("curves are built from at least one record")
    }

    pub fn accuracy_for(&self, record: &ConsistencyRecord) -> Result<f64, TargetError> {
        if record.n_samples != self.n {
            return Err(TargetError::SampleCountMismatch {
                id: record.question_id.clone(),
                expected: self.n,
                found: record.n_samples,
            });
        }
        Ok(self.accuracy_at_level(level_of(record)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceTarget {
    pub question_id: String,
    pub s: f64,
    pub a_of_s: f64,
    pub epsilon: f64,
    /// `clamp(a_of_s + epsilon, 0, 1)` at full precision.
    pub target: f64,
}

impl ConfidenceTarget {
    pub fn with_epsilon(record: &ConsistencyRecord, a_of_s: f64, epsilon: f64) -> Self {
        ConfidenceTarget {
            question_id: record.question_id.clone(),
            s: record.score,
            a_of_s,
            epsilon,
            target: (a_of_s + epsilon).clamp(0.0, 1.0),
        }
    }
}

/// Draw `ε ~ U[-0.05, 0.05]` from `rng` and build the target.
pub fn target_confidence(
    record: &ConsistencyRecord,
    curve: &AccuracyCurve,
    rng: &mut StreamRng,
) -> Result<ConfidenceTarget, TargetError> {
    let a = curve.accuracy_for(record)?;
    let eps = rng.random_range(-EPSILON_HALF_WIDTH..=EPSILON_HALF_WIDTH);
    Ok(ConfidenceTarget::with_epsilon(record, a, eps))
}

/// Targets for a list of records. Each question's jitter comes from its own
/// stream, so a target does not depend on which other records are present.
pub fn targets_for(
    records: &[ConsistencyRecord],
    curve: &AccuracyCurve,
    seed: u64,
) -> Result<Vec<ConfidenceTarget>, TargetError> {
    records
        .iter()
        .map(|r| target_confidence(r, curve, &mut stream(seed, "epsilon", &[r.question_id.as_bytes()])))
        .collect()
}

/// How the gap between the two most frequent consistency levels is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMode {
    /// `(top - second) / top`.
    #[default]
    Relative,
    /// `(top - second) / total`.
    Absolute,
}

impl GapMode {
    pub fn gap(&self, top: usize, second: usize, total: usize) -> f64 {
        let denom = match self {
            GapMode::Relative => top,
            GapMode::Absolute => total,
        };
        (top - second) as f64 / denom as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceOutcome {
    pub records: Vec<ConsistencyRecord>,
    /// Only one level is populated, so there is no second level to compare against.
    pub gap_undefined: bool,
    /// Level counts before and after, keyed by `k`.
    pub counts_before: BTreeMap<usize, usize>,
    pub counts_after: BTreeMap<usize, usize>,
    pub removed: Vec<String>,
}

fn level_counts(records: &[ConsistencyRecord]) -> Result<BTreeMap<usize, usize>, TargetError> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(level_of(r)?).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Downsample the most frequent consistency level until its lead over the
/// second most frequent level is at most `max_gap`. Other levels are untouched
/// and record order is preserved.
pub fn balance_by_consistency(
    records: &[ConsistencyRecord],
    max_gap: f64,
    mode: GapMode,
    rng: &mut StreamRng,
) -> Result<BalanceOutcome, TargetError> {
    if records.is_empty() {
        return Err(TargetError::Empty("balance"));
    }
    if !(0.0..1.0).contains(&max_gap) {
        return Err(TargetError::InvalidGap(max_gap));
    }
    let counts = level_counts(records)?;
    let unchanged = |gap_undefined| BalanceOutcome {
        records: records.to_vec(),
        gap_undefined,
        counts_before: counts.clone(),
        counts_after: counts.clone(),
        removed: Vec::new(),
    };
    if counts.len() < 2 {
        log::warn!("balance: a single consistency level is populated, gap undefined");
        return Ok(unchanged(true));
    }
    let mut by_count: Vec<(usize, usize)> = counts.iter().map(|(&k, &c)| (c, k)).collect();
    by_count.sort_by(|a, b| b.cmp(a));
    let (top, top_level) = by_count[0];
    let second = by_count[1].0;
    let total = records.len();
    if mode.gap(top, second, total) <= max_gap {
        return Ok(unchanged(false));
    }

    let rest = total - top;
    let bound = match mode {
        GapMode::Relative => second as f64 / (1.0 - max_gap),
        GapMode::Absolute => (second as f64 + max_gap * rest as f64) / (1.0 - max_gap),
    };
    let mut keep = ((bound + 1e-9).floor() as usize).clamp(second, top);
    while keep > second && mode.gap(keep, second, rest + keep) > max_gap {
        keep -= 1;
    }

    let mut top_idx: Vec<usize> = (0..total).filter(|&i| level_of(&records[i]).ok() == Some(top_level)).collect();
    top_idx.shuffle(rng);
    let mut drop = vec![false; total];
    for &i in &top_idx[keep..] {
        drop[i] = true;
    }
    let mut kept = Vec::with_capacity(total - (top - keep));
    let mut removed = Vec::new();
    for (r, d) in records.iter().zip(&drop) {
        if *d {
            removed.push(r.question_id.clone());
        } else {
            kept.push(r.clone());
        }
    }
    let counts_after = level_counts(&kept)?;
    Ok(BalanceOutcome {
        records: kept,
        gap_undefined: false,
        counts_before: counts,
        counts_after,
        removed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(layout: &[(usize, usize, usize)], n: usize) -> Vec<ConsistencyRecord> {
        // (level k, count, correct)
        let mut out = Vec::new();
        for &(k, count, correct) in layout {
            for i in 0..count {
                out.push(ConsistencyRecord::synthetic(&format!("k{k}-{i}"), k, n, i < correct));
            }
        }
        out
    }

    #[test]
    fn curve_accuracy_per_level() {
        let curve = AccuracyCurve::from_records(&recs(&[(8, 20, 7), (10, 5, 5)], 10), "train").unwrap();
        assert_eq!(curve.accuracy_at_level(8), 0.35);
        assert_eq!(curve.levels[7].count, 20);
        assert_eq!(curve.total(), 25);
        assert_eq!(curve.levels[0].accuracy, None);
    }

    #[test]
    fn curve_fallback_prefers_lower_level_on_ties() {
        let curve = AccuracyCurve::from_records(&recs(&[(5, 4, 1), (7, 4, 3)], 10), "train").unwrap();
        assert_eq!(curve.accuracy_at_level(6), 0.25);
        assert_eq!(curve.accuracy_at_level(1), 0.25);
        assert_eq!(curve.accuracy_at_level(10), 0.75);
        assert_eq!(curve.accuracy_at_level(8), 0.75);
    }

    #[test]
    fn all_correct_curve_is_flat() {
        let curve = AccuracyCurve::from_records(&recs(&[(3, 2, 2), (9, 6, 6)], 10), "train").unwrap();
        assert!((1..=10).all(|k| curve.accuracy_at_level(k) == 1.0));
    }

    #[test]
    fn curve_rejects_mixed_n_and_empty_input() {
        let mut r = recs(&[(3, 1, 1)], 10);
        r.push(ConsistencyRecord::synthetic("x", 3, 5, true));
        assert!(matches!(AccuracyCurve::from_records(&r, "t"), Err(TargetError::SampleCountMismatch { .. })));
        assert!(matches!(AccuracyCurve::from_records(&[], "t"), Err(TargetError::Empty(_))));
    }

    #[test]
    fn target_clamps_and_keeps_epsilon() {
        let r = ConsistencyRecord::synthetic("q", 8, 10, true);
        let t = ConfidenceTarget::with_epsilon(&r, 0.35, 0.0);
        assert_eq!(t.target, 0.35);
        let t = ConfidenceTarget::with_epsilon(&r, 0.98, 0.05);
        assert_eq!(t.target, 1.0);
        assert_eq!(format!("{:.2}", t.target), "1.00");
    }

    #[test]
    fn jitter_statistics() {
        let records = recs(&[(8, 10_000, 3_500)], 10);
        let curve = AccuracyCurve::from_records(&records, "train").unwrap();
        let targets = targets_for(&records, &curve, 11).unwrap();
        let max_dev = targets.iter().map(|t| (t.target - t.a_of_s).abs()).fold(0.0, f64::max);
        let mean_eps = targets.iter().map(|t| t.epsilon).sum::<f64>() / targets.len() as f64;
        assert!(max_dev <= EPSILON_HALF_WIDTH);
        assert!(mean_eps.abs() <= 0.002, "{mean_eps}");
        // per-question streams: a subset gets the same jitter
        let again = targets_for(&records[5..10], &curve, 11).unwrap();
        assert_eq!(again[0], targets[5]);
    }

    #[test]
    fn balance_downsamples_top_level_to_fifty() {
        let records = recs(&[(10, 100, 90), (5, 40, 20)], 10);
        let out = balance_by_consistency(&records, 0.2, GapMode::Relative, &mut stream(1, "b", &[])).unwrap();
        assert_eq!(out.counts_after[&10], 50);
        assert_eq!(out.counts_after[&5], 40);
        assert_eq!(out.removed.len(), 50);
        assert!(!out.gap_undefined);
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let records = recs(&[(5, 41, 0), (6, 40, 0), (10, 39, 0)], 10);
        let out = balance_by_consistency(&records, 0.2, GapMode::Relative, &mut stream(1, "b", &[])).unwrap();
        assert_eq!(out.records, records);
    }

    #[test]
    fn single_level_flags_undefined_gap() {
        let records = recs(&[(10, 12, 12)], 10);
        let out = balance_by_consistency(&records, 0.2, GapMode::Relative, &mut stream(1, "b", &[])).unwrap();
        assert!(out.gap_undefined);
        assert_eq!(out.records.len(), 12);
    }

    #[test]
    fn absolute_mode_bounds_gap_by_total() {
        let records = recs(&[(10, 100, 0), (5, 40, 0), (3, 20, 0)], 10);
        let out = balance_by_consistency(&records, 0.2, GapMode::Absolute, &mut stream(1, "b", &[])).unwrap();
        // t <= (40 + 0.2 * 60) / 0.8 = 65
        assert_eq!(out.counts_after[&10], 65);
        let total: usize = out.counts_after.values().sum();
        assert!((65.0 - 40.0) / total as f64 <= 0.2);
    }

    proptest::proptest! {
        #[test]
        fn balance_meets_gap_and_only_shrinks_top(
            counts in proptest::collection::vec(0usize..60, 10),
            gap in 0.0f64..0.9,
            seed in 0u64..50,
        ) {
            let layout: Vec<(usize, usize, usize)> = counts.iter().enumerate().map(|(i, &c)| (i + 1, c, c / 2)).collect();
            let records = recs(&layout, 10);
            proptest::prop_assume!(!records.is_empty());
            for mode in [GapMode::Relative, GapMode::Absolute] {
                let out = balance_by_consistency(&records, gap, mode, &mut stream(seed, "b", &[])).unwrap();
                let mut after: Vec<usize> = out.counts_after.values().copied().collect();
                after.sort_unstable_by(|a, b| b.cmp(a));
                if after.len() >= 2 {
                    let total: usize = after.iter().sum();
                    proptest::prop_assert!(mode.gap(after[0], after[1], total) <= gap + 1e-12);
                }
                let changed: Vec<usize> = out
                    .counts_before
                    .iter()
                    .filter(|(k, c)| out.counts_after.get(k) != Some(c))
                    .map(|(k, _)| *k)
                    .collect();
                proptest::prop_assert!(changed.len() <= 1);
                for k in changed {
                    proptest::prop_assert!(out.counts_after[&k] < out.counts_before[&k]);
                }
            }
        }

        #[test]
        fn curve_resolves_every_level(counts in proptest::collection::vec(0usize..5, 10)) {
            let layout: Vec<(usize, usize, usize)> = counts.iter().enumerate().map(|(i, &c)| (i + 1, c, c / 2)).collect();
            let records = recs(&layout, 10);
            proptest::prop_assume!(!records.is_empty());
            let curve = AccuracyCurve::from_records(&records, "t").unwrap();
            for k in 1..=10 {
                let a = curve.accuracy_at_level(k);
                proptest::prop_assert!((0.0..=1.0).contains(&a));
            }
        }
    }
}
