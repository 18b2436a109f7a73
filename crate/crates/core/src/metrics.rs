//! Calibration and discrimination metrics for verbalized confidence.
//!
//! - ECE over fixed-width bins (default: ten `[k/10, (k+1)/10)` bins plus a singleton bin `{1.0}`).
//! - AUC as the c-statistic over correct × incorrect pairs, ties counted as one half.
//! - AUCc / AUCa for the pairwise comparison task: agreement of the model's pick
//!   with the higher reference consistency, or with the question it actually got right.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Choice;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("{0}: no reports")]
    Empty(&'static str),
    #[error("{metric} is undefined: {reason}")]
    Undefined { metric: &'static str, reason: String },
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("consistency {0} outside [0, 1]")]
    InvalidConsistency(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawReport")]
pub struct ConfidenceReport {
    pub question_id: String,
    pub confidence: f64,
    pub correct: bool,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

#[derive(Deserialize)]
struct RawReport {
    question_id: String,
    confidence: f64,
    correct: bool,
    #[serde(default)]
    answer: String,
    #[serde(default)]
    domain: Option<String>,
}

impl TryFrom<RawReport> for ConfidenceReport {
    type Error = MetricError;
    fn try_from(r: RawReport) -> Result<Self, Self::Error> {
        let mut report = ConfidenceReport::new(&r.question_id, r.confidence, r.correct, &r.answer)?;
        report.domain = r.domain;
        Ok(report)
    }
}

impl ConfidenceReport {
    pub fn new(question_id: &str, confidence: f64, correct: bool, answer: &str) -> Result<Self, MetricError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(MetricError::InvalidConfidence(confidence));
        }
        Ok(ConfidenceReport {
            question_id: question_id.to_string(),
            confidence,
            correct,
            answer: answer.to_string(),
            domain: None,
        })
    }

    pub fn with_domain(mut self, domain: &str) -> Self {
        self.domain = Some(domain.to_string());
        self
    }

    pub fn scored(&self) -> (f64, bool) {
        (self.confidence, self.correct)
    }
}

/// Bin geometry for ECE and reliability diagrams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinLayout {
    /// `M - 1` half-open bins of width `1/(M-1)` plus a singleton bin `{1.0}`.
    TopSingleton,
    /// `M` bins centred on `k/(M-1)`, each `1/(M-1)` wide, clipped to `[0, 1]`.
    Centered,
}

/// Default number of bins.
pub const DEFAULT_BINS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binning {
    pub layout: BinLayout,
    pub bins: usize,
}

impl Default for Binning {
    fn default() -> Self {
        Binning {
            layout: BinLayout::TopSingleton,
            bins: DEFAULT_BINS,
        }
    }
}

impl Binning {
    pub fn new(layout: BinLayout, bins: usize) -> Self {
        assert!(bins >= 1, "at least one bin");
        Binning { layout, bins }
    }

    /// Lower edge of every bin; bin `i` holds `lowers[i] <= c < lowers[i + 1]`,
    /// and the last bin extends to 1.0 inclusive.
    pub fn lowers(&self) -> Vec<f64> {
        let m = self.bins;
        if m == 1 {
            return vec![0.0];
        }
        let d = (m - 1) as f64;
        match self.layout {
            BinLayout::TopSingleton => (0..m).map(|i| i as f64 / d).collect(),
            BinLayout::Centered => (0..m)
                .map(|i| if i == 0 { 0.0 } else { (2 * i - 1) as f64 / (2.0 * d) })
                .collect(),
        }
    }

    /// Upper edge of bin `i` (exclusive, except the last bin which is closed at 1.0).
    fn uppers(&self, lowers: &[f64]) -> Vec<f64> {
        (0..lowers.len())
            .map(|i| lowers.get(i + 1).copied().unwrap_or(1.0))
            .collect()
    }

    pub fn index(lowers: &[f64], c: f64) -> usize {
        lowers.partition_point(|&lo| lo <= c).saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    /// Whether `upper` itself belongs to the bin (only for the last bin).
    pub upper_inclusive: bool,
    pub count: usize,
    pub correct: usize,
    pub confidence_sum: f64,
}

impl CalibrationBin {
    pub fn accuracy(&self) -> Option<f64> {
        (self.count > 0).then(|| self.correct as f64 / self.count as f64)
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        (self.count > 0).then(|| self.confidence_sum / self.count as f64)
    }

    pub fn label(&self) -> String {
        let close = if self.upper_inclusive { ']' } else { ')' };
        format!("[{:.2},{:.2}{close}", self.lower, self.upper)
    }
}

/// Assign scored items to bins.
pub fn bin_scored(items: &[(f64, bool)], binning: Binning) -> Vec<CalibrationBin> {
    let lowers = binning.lowers();
    let uppers = binning.uppers(&lowers);
    let mut bins: Vec<CalibrationBin> = lowers
        .iter()
        .zip(&uppers)
        .enumerate()
        .map(|(index, (&lower, &upper))| CalibrationBin {
            index,
            lower,
            upper,
            upper_inclusive: index + 1 == lowers.len(),
            count: 0,
            correct: 0,
            confidence_sum: 0.0,
        })
        .collect();
    for &(c, ok) in items {
        let b = &mut bins[Binning::index(&lowers, c)];
        b.count += 1;
        b.correct += ok as usize;
        b.confidence_sum += c;
    }
    bins
}

/// Bin reports with `m` bins of the default layout.
pub fn bin_reports(reports: &[ConfidenceReport], m: usize) -> Vec<CalibrationBin> {
    let items: Vec<(f64, bool)> = reports.iter().map(ConfidenceReport::scored).collect();
    bin_scored(&items, Binning::new(BinLayout::TopSingleton, m))
}

pub fn ece_scored(items: &[(f64, bool)], binning: Binning) -> Result<f64, MetricError> {
    if items.is_empty() {
        return Err(MetricError::Empty("ece"));
    }
    let n = items.len() as f64;
    Ok(bin_scored(items, binning)
        .iter()
        .filter_map(|b| {
            let (acc, conf) = (b.accuracy()?, b.mean_confidence()?);
            Some(b.count as f64 / n * (acc - conf).abs())
        })
        .sum())
}

/// Expected calibration error with the default binning.
pub fn ece(reports: &[ConfidenceReport]) -> Result<f64, MetricError> {
    ece_with(reports, Binning::default())
}

pub fn ece_with(reports: &[ConfidenceReport], binning: Binning) -> Result<f64, MetricError> {
    let items: Vec<(f64, bool)> = reports.iter().map(ConfidenceReport::scored).collect();
    ece_scored(&items, binning)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCounts {
    /// Permissible pairs.
    pub permissible: usize,
    /// Concordant pairs; ties contribute one half.
    pub concordant: f64,
}

impl PairCounts {
    pub fn ratio(&self, metric: &'static str) -> Result<f64, MetricError> {
        if self.permissible == 0 {
            return Err(MetricError::Undefined {
                metric,
                reason: "no permissible pairs".into(),
            });
        }
        Ok(self.concordant / self.permissible as f64)
    }
}

/// Concordance counts over correct × incorrect pairs, in O(n log n).
pub fn auc_counts_scored(items: &[(f64, bool)]) -> PairCounts {
    let mut wrong: Vec<f64> = items.iter().filter(|(_, ok)| !ok).map(|(c, _)| *c).collect();
    wrong.sort_by(f64::total_cmp);
    let mut concordant = 0.0;
    let mut n_right = 0usize;
    for &(c, ok) in items {
        if !ok {
            continue;
        }
        n_right += 1;
        let below = wrong.partition_point(|&w| w < c);
        let tied = wrong.partition_point(|&w| w <= c) - below;
        concordant += below as f64 + 0.5 * tied as f64;
    }
    PairCounts {
        permissible: n_right * wrong.len(),
        concordant,
    }
}

pub fn auc_scored(items: &[(f64, bool)]) -> Result<f64, MetricError> {
    let n_right = items.iter().filter(|(_, ok)| *ok).count();
    if n_right == 0 || n_right == items.len() {
        return Err(MetricError::Undefined {
            metric: "auc",
            reason: if n_right == 0 {
                "no correct answers".into()
            } else {
                "no incorrect answers".into()
            },
        });
    }
    auc_counts_scored(items).ratio("auc")
}

/// Probability that a random correct answer carries higher confidence than a
/// random incorrect one.
pub fn auc(reports: &[ConfidenceReport]) -> Result<f64, MetricError> {
    let items: Vec<(f64, bool)> = reports.iter().map(ConfidenceReport::scored).collect();
    auc_scored(&items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonOutcome {
    pub q1_id: String,
    pub q2_id: String,
    pub choice: Choice,
    pub s1: f64,
    pub s2: f64,
    pub correct_q1: bool,
    pub correct_q2: bool,
}

impl ComparisonOutcome {
    pub fn pair_id(&self) -> String {
        format!("{}|{}", self.q1_id, self.q2_id)
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        for s in [self.s1, self.s2] {
            if !(0.0..=1.0).contains(&s) {
                return Err(MetricError::InvalidConsistency(s));
            }
        }
        Ok(())
    }
}

pub fn auc_c_counts(outcomes: &[ComparisonOutcome]) -> PairCounts {
    let mut counts = PairCounts {
        permissible: 0,
        concordant: 0.0,
    };
    for o in outcomes.iter().filter(|o| o.s1 != o.s2) {
        counts.permissible += 1;
        let higher = if o.s1 > o.s2 { Choice::Q1 } else { Choice::Q2 };
        if o.choice == higher {
            counts.concordant += 1.0;
        }
    }
    counts
}

pub fn auc_a_counts(outcomes: &[ComparisonOutcome]) -> PairCounts {
    let mut counts = PairCounts {
        permissible: 0,
        concordant: 0.0,
    };
    for o in outcomes.iter().filter(|o| o.correct_q1 != o.correct_q2) {
        counts.permissible += 1;
        let right = if o.correct_q1 { Choice::Q1 } else { Choice::Q2 };
        if o.choice == right {
            counts.concordant += 1.0;
        }
    }
    counts
}

/// Fraction of unequal-consistency pairs where the pick is the higher-consistency question.
pub fn auc_c(outcomes: &[ComparisonOutcome]) -> Result<f64, MetricError> {
    auc_c_counts(outcomes).ratio("auc_c")
}

/// Fraction of exactly-one-correct pairs where the pick is the question answered correctly.
pub fn auc_a(outcomes: &[ComparisonOutcome]) -> Result<f64, MetricError> {
    auc_a_counts(outcomes).ratio("auc_a")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagramRow {
    pub range: String,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub proportion: f64,
    pub accuracy: Option<f64>,
    pub mean_confidence: Option<f64>,
}

pub fn diagram_rows(items: &[(f64, bool)], binning: Binning) -> Vec<DiagramRow> {
    let n = items.len();
    bin_scored(items, binning)
        .iter()
        .map(|b| DiagramRow {
            range: b.label(),
            lower: b.lower,
            upper: b.upper,
            count: b.count,
            proportion: if n == 0 { 0.0 } else { b.count as f64 / n as f64 },
            accuracy: b.accuracy(),
            mean_confidence: b.mean_confidence(),
        })
        .collect()
}

/// Per-bin occupancy, accuracy and mean confidence.
pub fn reliability_diagram(reports: &[ConfidenceReport]) -> Vec<DiagramRow> {
    let items: Vec<(f64, bool)> = reports.iter().map(ConfidenceReport::scored).collect();
    diagram_rows(&items, Binning::default())
}

/// CSV with header `range,count,proportion,accuracy,mean_confidence`; empty bins
/// leave the last two columns blank.
pub fn write_diagram_csv(rows: &[DiagramRow], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["range", "count", "proportion", "accuracy", "mean_confidence"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.range.clone(),
            r.count.to_string(),
            r.proportion.to_string(),
            opt(r.accuracy),
            opt(r.mean_confidence),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Metrics summary for one condition. Metrics that are undefined on the data
/// are `null` with the reason listed under `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: Option<f64>,
    pub ece: Option<f64>,
    pub auc: Option<f64>,
    pub auc_c: Option<f64>,
    pub auc_a: Option<f64>,
    #[serde(default)]
    pub n_pairs: usize,
    pub bins: Vec<DiagramRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bootstrap: Vec<crate::stats::BootstrapResult>,
}

impl MetricsReport {
    pub fn evaluate(reports: &[ConfidenceReport], outcomes: &[ComparisonOutcome]) -> Self {
        Self::evaluate_with(reports, outcomes, Binning::default())
    }

    pub fn evaluate_with(reports: &[ConfidenceReport], outcomes: &[ComparisonOutcome], binning: Binning) -> Self {
        let mut undefined = Vec::new();
        let mut keep = |r: Result<f64, MetricError>| match r {
            Ok(v) => Some(v),
            Err(e) => {
                undefined.push(e.to_string());
                None
            }
        };
        let (ece, auc) = if reports.is_empty() {
            (None, None)
        } else {
            (keep(ece_with(reports, binning)), keep(auc(reports)))
        };
        let (auc_c, auc_a) = if outcomes.is_empty() {
            (None, None)
        } else {
            (keep(auc_c(outcomes)), keep(auc_a(outcomes)))
        };
        let accuracy = (!reports.is_empty())
            .then(|| reports.iter().filter(|r| r.correct).count() as f64 / reports.len() as f64);
        MetricsReport {
            n: reports.len(),
            accuracy,
            ece,
            auc,
            auc_c,
            auc_a,
            n_pairs: outcomes.len(),
            bins: diagram_rows(&reports.iter().map(ConfidenceReport::scored).collect::<Vec<_>>(), binning),
            undefined,
            bootstrap: Vec::new(),
        }
    }
}
