//! Paired bootstrap for before/after metric differences, a coverage self-test
//! for it, and rank correlation.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::gateway::Choice;
use crate::metrics::{self, Binning, ComparisonOutcome, ConfidenceReport, MetricError};
use crate::rng::{stream, StreamRng};

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_ALPHA: f64 = 0.05;
/// Highest tolerated fraction of redrawn replicates.
pub const MAX_REDRAW_RATE: f64 = 0.5;
/// Attempts allowed for a single replicate before giving up.
const MAX_ATTEMPTS_PER_REPLICATE: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("no paired samples")]
    Empty,
    #[error("{condition} condition: {source}")]
    Metric {
        condition: &'static str,
        #[source]
        source: MetricError,
    },
    #[error("{metric} undefined on {redraws} of {draws} resamples; too unstable at this n")]
    Unstable {
        metric: &'static str,
        redraws: usize,
        draws: usize,
    },
    #[error("before and after do not cover the same units: {0}")]
    Misaligned(String),
    #[error("invalid bootstrap setting: {0}")]
    Config(String),
}

/// One unit observed under both conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample<T> {
    pub unit_id: String,
    pub before: T,
    pub after: T,
}

/// Scored confidence: `(confidence, correct)`.
pub type Scored = (f64, bool);

/// Comparison outcome without the identifiers, cheap to copy into replicates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompactOutcome {
    pub choice: Choice,
    pub s1: f64,
    pub s2: f64,
    pub correct_q1: bool,
    pub correct_q2: bool,
}

impl From<&ComparisonOutcome> for CompactOutcome {
    fn from(o: &ComparisonOutcome) -> Self {
        CompactOutcome {
            choice: o.choice,
            s1: o.s1,
            s2: o.s2,
            correct_q1: o.correct_q1,
            correct_q2: o.correct_q2,
        }
    }
}

/// A scalar metric over a set of items.
pub trait PairedMetric: Sync {
    type Item: Copy + Send + Sync;
    fn name(&self) -> &'static str;
    fn compute(&self, items: &[Self::Item]) -> Result<f64, MetricError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Ece(pub Binning);

impl PairedMetric for Ece {
    type Item = Scored;
    fn name(&self) -> &'static str {
        "ece"
    }
    fn compute(&self, items: &[Scored]) -> Result<f64, MetricError> {
        metrics::ece_scored(items, self.0)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Auc;

impl PairedMetric for Auc {
    type Item = Scored;
    fn name(&self) -> &'static str {
        "auc"
    }
    fn compute(&self, items: &[Scored]) -> Result<f64, MetricError> {
        metrics::auc_scored(items)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AucC;

impl PairedMetric for AucC {
    type Item = CompactOutcome;
    fn name(&self) -> &'static str {
        "auc_c"
    }
    fn compute(&self, items: &[CompactOutcome]) -> Result<f64, MetricError> {
        let mut permissible = 0usize;
        let mut hits = 0usize;
        for o in items.iter().filter(|o| o.s1 != o.s2) {
            permissible += 1;
            hits += (o.choice == if o.s1 > o.s2 { Choice::Q1 } else { Choice::Q2 }) as usize;
        }
        ratio("auc_c", hits, permissible)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AucA;

impl PairedMetric for AucA {
    type Item = CompactOutcome;
    fn name(&self) -> &'static str {
        "auc_a"
    }
    fn compute(&self, items: &[CompactOutcome]) -> Result<f64, MetricError> {
        let mut permissible = 0usize;
        let mut hits = 0usize;
        for o in items.iter().filter(|o| o.correct_q1 != o.correct_q2) {
            permissible += 1;
            hits += (o.choice == if o.correct_q1 { Choice::Q1 } else { Choice::Q2 }) as usize;
        }
        ratio("auc_a", hits, permissible)
    }
}

fn ratio(metric: &'static str, hits: usize, permissible: usize) -> Result<f64, MetricError> {
    metrics::PairCounts {
        permissible,
        concordant: hits as f64,
    }
    .ratio(metric)
}

/// How reports from several domains are combined into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Compute the metric once over all reports.
    #[default]
    Concatenate,
    /// Compute per domain and average.
    MeanOfDomains,
}

/// Per-domain mean of an inner metric; items carry a domain index.
#[derive(Debug, Clone, Copy)]
pub struct DomainMean<M> {
    pub inner: M,
    pub domains: usize,
}

impl<M: PairedMetric> PairedMetric for DomainMean<M> {
    type Item = (usize, M::Item);
    fn name(&self) -> &'static str {
        self.inner.name()
    }
    fn compute(&self, items: &[Self::Item]) -> Result<f64, MetricError> {
        let mut groups: Vec<Vec<M::Item>> = vec![Vec::new(); self.domains];
        for &(d, item) in items {
            groups[d].push(item);
        }
        let mut total = 0.0;
        for g in &groups {
            if g.is_empty() {
                return Err(MetricError::Undefined {
                    metric: self.inner.name(),
                    reason: "a domain has no reports".into(),
                });
            }
            total += self.inner.compute(g)?;
        }
        Ok(total / self.domains as f64)
    }
}

/// Tag each domain's samples with its index in `by_domain` and concatenate.
pub fn tag_domains<T: Clone>(by_domain: &[Vec<PairedSample<T>>]) -> Vec<PairedSample<(usize, T)>> {
    by_domain
        .iter()
        .enumerate()
        .flat_map(|(d, v)| {
            v.iter().map(move |s| PairedSample {
                unit_id: s.unit_id.clone(),
                before: (d, s.before.clone()),
                after: (d, s.after.clone()),
            })
        })
        .collect()
}

/// Paired bootstrap over several domains combined according to `pooling`.
/// Resampling is over the union of units in both modes.
pub fn pooled_bootstrap<M: PairedMetric + Copy>(
    by_domain: &[Vec<PairedSample<M::Item>>],
    metric: M,
    pooling: Pooling,
    config: BootstrapConfig,
    exec: Execution,
) -> Result<BootstrapResult, StatsError> {
    match pooling {
        Pooling::Concatenate => {
            let flat: Vec<PairedSample<M::Item>> = by_domain.iter().flatten().cloned().collect();
            paired_bootstrap(&flat, &metric, config, exec)
        }
        Pooling::MeanOfDomains => {
            let tagged = tag_domains(by_domain);
            let mean = DomainMean {
                inner: metric,
                domains: by_domain.len(),
            };
            paired_bootstrap(&tagged, &mean, config, exec)
        }
    }
}

/// Align two report lists on question id.
pub fn pair_reports(before: &[ConfidenceReport], after: &[ConfidenceReport]) -> Result<Vec<PairedSample<Scored>>, StatsError> {
    align(before, after, |r| r.question_id.clone(), ConfidenceReport::scored)
}

/// Align two comparison runs on pair id.
pub fn pair_outcomes(
    before: &[ComparisonOutcome],
    after: &[ComparisonOutcome],
) -> Result<Vec<PairedSample<CompactOutcome>>, StatsError> {
    align(before, after, ComparisonOutcome::pair_id, |o| CompactOutcome::from(o))
}

fn align<R, T>(
    before: &[R],
    after: &[R],
    key: impl Fn(&R) -> String,
    compact: impl Fn(&R) -> T,
) -> Result<Vec<PairedSample<T>>, StatsError> {
    let mut index: HashMap<String, &R> = HashMap::with_capacity(after.len());
    for r in after {
        if index.insert(key(r), r).is_some() {
            return Err(StatsError::Misaligned(format!("duplicate unit {} after", key(r))));
        }
    }
    if before.len() != after.len() {
        return Err(StatsError::Misaligned(format!("{} units before, {} after", before.len(), after.len())));
    }
    before
        .iter()
        .map(|b| {
            let id = key(b);
            let a = index
                .remove(&id)
                .ok_or_else(|| StatsError::Misaligned(format!("unit {id} missing after")))?;
            Ok(PairedSample {
                before: compact(b),
                after: compact(a),
                unit_id: id,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn new(seed: u64) -> Self {
        BootstrapConfig {
            resamples: DEFAULT_RESAMPLES,
            alpha: DEFAULT_ALPHA,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub metric: String,
    pub before: f64,
    pub after: f64,
    /// `after - before` on the full sample.
    pub delta: f64,
    pub ci: [f64; 2],
    pub significant: bool,
    pub resamples: usize,
    pub redraws: usize,
    pub seed: u64,
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resample units with replacement; each replicate evaluates the metric on the
/// same resample under both conditions. Replicates where either side is
/// undefined are redrawn.
pub fn paired_bootstrap<M: PairedMetric>(
    samples: &[PairedSample<M::Item>],
    metric: &M,
    config: BootstrapConfig,
    exec: Execution,
) -> Result<BootstrapResult, StatsError> {
    if samples.is_empty() {
        return Err(StatsError::Empty);
    }
    if config.resamples == 0 || !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(StatsError::Config(format!(
            "resamples={} alpha={}",
            config.resamples, config.alpha
        )));
    }
    let before: Vec<M::Item> = samples.iter().map(|s| s.before).collect();
    let after: Vec<M::Item> = samples.iter().map(|s| s.after).collect();
    let point = |items: &[M::Item], condition| {
        metric
            .compute(items)
            .map_err(|source| StatsError::Metric { condition, source })
    };
    let (b0, a0) = (point(&before, "before")?, point(&after, "after")?);

    let n = samples.len();
    let replicates = exec.map_range(config.resamples, |r| {
        let mut rng = stream(config.seed, "bootstrap", &[&(r as u64).to_le_bytes()]);
        let mut rb = Vec::with_capacity(n);
        let mut ra = Vec::with_capacity(n);
        for redraws in 0..MAX_ATTEMPTS_PER_REPLICATE {
            rb.clear();
            ra.clear();
            for _ in 0..n {
                let i = rng.random_range(0..n);
                rb.push(before[i]);
                ra.push(after[i]);
            }
            if let (Ok(b), Ok(a)) = (metric.compute(&rb), metric.compute(&ra)) {
                return Some((a - b, redraws));
            }
        }
        None
    });

    let mut diffs = Vec::with_capacity(config.resamples);
    let mut redraws = 0;
    for rep in &replicates {
        match rep {
            Some((d, extra)) => {
                diffs.push(*d);
                redraws += extra;
            }
            None => redraws += MAX_ATTEMPTS_PER_REPLICATE,
        }
    }
    let draws = redraws + diffs.len();
    if diffs.len() < config.resamples || redraws as f64 / draws as f64 > MAX_REDRAW_RATE {
        return Err(StatsError::Unstable {
            metric: metric.name(),
            redraws,
            draws,
        });
    }
    diffs.sort_by(f64::total_cmp);
    let lo = percentile(&diffs, config.alpha / 2.0);
    let hi = percentile(&diffs, 1.0 - config.alpha / 2.0);
    Ok(BootstrapResult {
        metric: metric.name().to_string(),
        before: b0,
        after: a0,
        delta: a0 - b0,
        ci: [lo, hi],
        significant: !(lo <= 0.0 && 0.0 <= hi),
        resamples: config.resamples,
        redraws,
        seed: config.seed,
    })
}

/// Synthetic paired data with a known population difference.
pub trait PairedGenerator: Sync {
    type Metric: PairedMetric;
    fn metric(&self) -> &Self::Metric;
    fn true_delta(&self) -> f64;
    fn generate(&self, rng: &mut StreamRng) -> Vec<PairedSample<<Self::Metric as PairedMetric>::Item>>;
}

fn correctness(rng: &mut StreamRng, accuracy: f64) -> bool {
    rng.random_bool(accuracy)
}

/// Both conditions draw confidence from the same law given correctness, so the
/// population AUC difference is exactly zero.
#[derive(Debug, Clone, Copy)]
pub struct ZeroEffectAuc {
    pub n: usize,
    pub accuracy: f64,
}

impl PairedGenerator for ZeroEffectAuc {
    type Metric = Auc;
    fn metric(&self) -> &Auc {
        &Auc
    }
    fn true_delta(&self) -> f64 {
        0.0
    }
    fn generate(&self, rng: &mut StreamRng) -> Vec<PairedSample<Scored>> {
        let noise = Normal::<f64>::new(0.0, 0.15).expect("valid sigma");
        let draw = |ok: bool, rng: &mut StreamRng| -> f64 {
            let shift: f64 = if ok { 0.1 } else { -0.1 };
            (0.5 + shift + noise.sample(rng)).clamp(0.0, 1.0)
        };
        (0..self.n)
            .map(|i| {
                let ok = correctness(rng, self.accuracy);
                PairedSample {
                    unit_id: i.to_string(),
                    before: (draw(ok, rng), ok),
                    after: (draw(ok, rng), ok),
                }
            })
            .collect()
    }
}

/// Uninformative confidence before, perfectly separating confidence after:
/// population AUC goes from 0.5 to 1.0.
#[derive(Debug, Clone, Copy)]
pub struct LargeEffectAuc {
    pub n: usize,
    pub accuracy: f64,
}

impl PairedGenerator for LargeEffectAuc {
    type Metric = Auc;
    fn metric(&self) -> &Auc {
        &Auc
    }
    fn true_delta(&self) -> f64 {
        0.5
    }
    fn generate(&self, rng: &mut StreamRng) -> Vec<PairedSample<Scored>> {
        (0..self.n)
            .map(|i| {
                let ok = correctness(rng, self.accuracy);
                let before = rng.random::<f64>();
                let after = if ok { rng.random_range(0.5..=1.0) } else { rng.random_range(0.0..0.5) };
                PairedSample {
                    unit_id: i.to_string(),
                    before: (before, ok),
                    after: (after, ok),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub trials: usize,
    /// Trials whose interval was computed.
    pub completed: usize,
    pub covered: usize,
    pub significant: usize,
    pub coverage: f64,
    pub significance_rate: f64,
}

/// Fraction of simulated trials whose bootstrap interval contains the true
/// difference. Trials run in parallel; each trial's bootstrap is sequential.
/// Trials where the bootstrap itself fails count as not covered.
pub fn coverage_check<G: PairedGenerator>(
    generator: &G,
    trials: usize,
    resamples: usize,
    seed: u64,
    exec: Execution,
) -> CoverageReport {
    let truth = generator.true_delta();
    let outcomes = exec.map_range(trials, |t| {
        let mut rng = stream(seed, "coverage-data", &[&(t as u64).to_le_bytes()]);
        let samples = generator.generate(&mut rng);
        let config = BootstrapConfig {
            resamples,
            alpha: DEFAULT_ALPHA,
            seed: crate::rng::derive_seed(seed ^ t as u64, "coverage-bootstrap"),
        };
        paired_bootstrap(&samples, generator.metric(), config, Execution::Sequential)
            .ok()
            .map(|r| (r.ci[0] <= truth && truth <= r.ci[1], r.significant))
    });
    let completed = outcomes.iter().flatten().count();
    let covered = outcomes.iter().flatten().filter(|(c, _)| *c).count();
    let significant = outcomes.iter().flatten().filter(|(_, s)| *s).count();
    let frac = |k: usize| if trials == 0 { 0.0 } else { k as f64 / trials as f64 };
    CoverageReport {
        trials,
        completed,
        covered,
        significant,
        coverage: frac(covered),
        significance_rate: frac(significant),
    }
}

/// Ranks starting at 1, ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant or lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: usize) -> Vec<PairedSample<Scored>> {
        (0..n)
            .map(|i| {
                let s = ((i % 7) as f64 / 7.0, i % 3 == 0);
                PairedSample {
                    unit_id: i.to_string(),
                    before: s,
                    after: s,
                }
            })
            .collect()
    }

    #[test]
    fn identical_conditions_give_zero_interval() {
        let r = paired_bootstrap(&identity(60), &Auc, BootstrapConfig::new(1), Execution::default()).unwrap();
        assert_eq!(r.ci, [0.0, 0.0]);
        assert!(!r.significant);
        assert_eq!(r.delta, 0.0);
        assert_eq!(r.resamples, 1000);
    }

    #[test]
    fn separable_after_is_significant() {
        let mut rng = stream(3, "fixture", &[]);
        let samples: Vec<PairedSample<Scored>> = (0..500)
            .map(|i| {
                let ok = rng.random_bool(0.6);
                let after = (if ok { 1.0f64 } else { 0.0 } + rng.random_range(-0.01..0.01)).clamp(0.0, 1.0);
                PairedSample {
                    unit_id: i.to_string(),
                    before: (0.9, ok),
                    after: (after, ok),
                }
            })
            .collect();
        let r = paired_bootstrap(&samples, &Auc, BootstrapConfig::new(5), Execution::default()).unwrap();
        assert_eq!(r.after, 1.0);
        assert_eq!(r.before, 0.5);
        assert!(r.significant && r.ci[0] > 0.0);
    }

    #[test]
    fn result_is_independent_of_execution() {
        let mut rng = stream(9, "fixture", &[]);
        let samples = ZeroEffectAuc { n: 80, accuracy: 0.5 }.generate(&mut rng);
        let cfg = BootstrapConfig::new(77);
        let a = paired_bootstrap(&samples, &Auc, cfg, Execution::Sequential).unwrap();
        let b = paired_bootstrap(&samples, &Auc, cfg, Execution::Parallel).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = paired_bootstrap(&samples, &Auc, BootstrapConfig::new(78), Execution::Sequential).unwrap();
        assert_ne!(a.ci, c.ci);
    }

    #[test]
    fn undefined_full_sample_is_an_error() {
        let samples: Vec<PairedSample<Scored>> = (0..5)
            .map(|i| PairedSample {
                unit_id: i.to_string(),
                before: (0.5, true),
                after: (0.5, true),
            })
            .collect();
        assert!(matches!(
            paired_bootstrap(&samples, &Auc, BootstrapConfig::new(1), Execution::Sequential),
            Err(StatsError::Metric { .. })
        ));
        assert!(matches!(
            paired_bootstrap::<Auc>(&[], &Auc, BootstrapConfig::new(1), Execution::Sequential),
            Err(StatsError::Empty)
        ));
    }

    fn one_incorrect(n: usize, before_wrong: usize, after_wrong: usize) -> Vec<PairedSample<Scored>> {
        (0..n)
            .map(|i| PairedSample {
                unit_id: i.to_string(),
                before: (0.5, i != before_wrong),
                after: (0.6, i != after_wrong),
            })
            .collect()
    }

    #[test]
    fn redraw_rate_tracks_undefined_resamples() {
        // AUC needs the single incorrect unit in the resample: P(miss) = (39/40)^40
        let r = paired_bootstrap(&one_incorrect(40, 0, 0), &Auc, BootstrapConfig::new(2), Execution::Sequential).unwrap();
        let rate = r.redraws as f64 / (r.redraws + r.resamples) as f64;
        assert!((rate - (39f64 / 40.0).powi(40)).abs() < 0.03, "{rate}");
    }

    #[test]
    fn redraw_cap_is_enforced() {
        // both distinct incorrect units must appear: P(defined) = 1 - 2(39/40)^40 + (38/40)^40 ~ 0.40
        let r = paired_bootstrap(&one_incorrect(40, 0, 1), &Auc, BootstrapConfig::new(2), Execution::Sequential);
        assert!(matches!(r, Err(StatsError::Unstable { .. })), "{r:?}");
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.0);
        assert_eq!(percentile(&v, 0.125), 0.5);
        assert_eq!(percentile(&v, 1.0), 4.0);
        assert_eq!(percentile(&[7.0], 0.3), 7.0);
    }

    #[test]
    fn alignment_by_unit_id() {
        let r = |id: &str, c| ConfidenceReport::new(id, c, true, "").unwrap();
        let before = [r("a", 0.1), r("b", 0.2)];
        let after = [r("b", 0.9), r("a", 0.8)];
        let paired = pair_reports(&before, &after).unwrap();
        assert_eq!(paired[0].unit_id, "a");
        assert_eq!((paired[0].before.0, paired[0].after.0), (0.1, 0.8));
        assert!(pair_reports(&before, &after[..1]).is_err());
        assert!(pair_reports(&before, &[r("a", 0.8), r("c", 0.9)]).is_err());
    }

    #[test]
    fn domain_mean_averages_per_domain_values() {
        let samples = vec![
            vec![
                PairedSample { unit_id: "a".into(), before: (0.9, true), after: (0.9, true) },
                PairedSample { unit_id: "b".into(), before: (0.1, false), after: (0.1, false) },
            ],
            vec![
                PairedSample { unit_id: "c".into(), before: (0.1, true), after: (0.1, true) },
                PairedSample { unit_id: "d".into(), before: (0.9, false), after: (0.9, false) },
                PairedSample { unit_id: "e".into(), before: (0.95, false), after: (0.95, false) },
            ],
        ];
        let pooled = tag_domains(&samples);
        let items: Vec<(usize, Scored)> = pooled.iter().map(|s| s.before).collect();
        let mean = DomainMean { inner: Auc, domains: 2 }.compute(&items).unwrap();
        assert_eq!(mean, 0.5);
        let flat: Vec<Scored> = items.iter().map(|x| x.1).collect();
        let pairs = [(0.9, 0.1), (0.9, 0.9), (0.9, 0.95), (0.1, 0.1), (0.1, 0.9), (0.1, 0.95)];
        let expected: f64 = pairs
            .iter()
            .map(|(c, w)| if c > w { 1.0 } else if c == w { 0.5 } else { 0.0 })
            .sum::<f64>()
            / 6.0;
        assert_eq!(Auc.compute(&flat).unwrap(), expected);
        let cfg = BootstrapConfig { resamples: 50, ..BootstrapConfig::new(1) };
        let concat = pooled_bootstrap(&samples, Auc, Pooling::Concatenate, cfg, Execution::Sequential).unwrap();
        assert_eq!(concat.before, expected);
        let mean = pooled_bootstrap(&samples, Auc, Pooling::MeanOfDomains, cfg, Execution::Sequential);
        // five units over two domains: most resamples lose a class in some domain
        assert!(matches!(mean, Ok(ref r) if r.before == 0.5) || matches!(mean, Err(StatsError::Unstable { .. })));
    }

    #[test]
    fn single_trial_coverage_is_binary() {
        let rep = coverage_check(&ZeroEffectAuc { n: 100, accuracy: 0.5 }, 1, 200, 1, Execution::default());
        assert!(rep.coverage == 0.0 || rep.coverage == 1.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[3.0, 2.0]), None);
    }
}
