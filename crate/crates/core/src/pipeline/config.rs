use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::gateway::{ComparisonPolicy, API_KEY_ENV};
use crate::metrics::{BinLayout, Binning, DEFAULT_BINS};
use crate::rng::derive_seed;
use crate::stats::{Pooling, DEFAULT_ALPHA, DEFAULT_RESAMPLES};
use crate::targets::{GapMode, DEFAULT_MAX_GAP};

/// One seed per random stage. All are required.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub split: u64,
    pub simulation: u64,
    pub balance: u64,
    pub epsilon: u64,
    pub pairs: u64,
    pub merge: u64,
    pub eval_pairs: u64,
    pub bootstrap: u64,
}

impl Seeds {
    /// Every stage seed derived from one base seed.
    pub fn from_base(base: u64) -> Self {
        Seeds {
            split: derive_seed(base, "split"),
            simulation: derive_seed(base, "simulation"),
            balance: derive_seed(base, "balance"),
            epsilon: derive_seed(base, "epsilon"),
            pairs: derive_seed(base, "pairs"),
            merge: derive_seed(base, "merge"),
            eval_pairs: derive_seed(base, "eval_pairs"),
            bootstrap: derive_seed(base, "bootstrap"),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("split", self.split),
            ("simulation", self.simulation),
            ("balance", self.balance),
            ("epsilon", self.epsilon),
            ("pairs", self.pairs),
            ("merge", self.merge),
            ("eval_pairs", self.eval_pairs),
            ("bootstrap", self.bootstrap),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpus {
    pub size: usize,
    #[serde(default = "default_domain")]
    pub domain: String,
}

fn default_domain() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// JSONL corpus files, concatenated in order.
    #[serde(default)]
    pub paths: Vec<PathBuf>,
    /// Generated bank for the simulated backend, used when `paths` is empty.
    #[serde(default)]
    pub synthetic: Option<SyntheticCorpus>,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    NormalizedExact,
    /// LLM judge through the remote backend's endpoint.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub n: usize,
    pub temperature: f64,
    pub max_unparseable_fraction: f64,
    pub judge: JudgeKind,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            n: 10,
            temperature: 1.0,
            max_unparseable_fraction: 0.5,
            judge: JudgeKind::NormalizedExact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetsSection {
    pub max_gap: f64,
    pub gap_mode: GapMode,
    /// Comparison training pairs.
    pub pairs: usize,
}

impl Default for TargetsSection {
    fn default() -> Self {
        TargetsSection {
            max_gap: DEFAULT_MAX_GAP,
            gap_mode: GapMode::Relative,
            pairs: 2000,
        }
    }
}

/// Distribution of per-question correctness probabilities in the simulated world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatentDistribution {
    Beta { alpha: f64, beta: f64 },
    Uniform { low: f64, high: f64 },
    Fixed { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedSection {
    #[serde(default = "default_distractors")]
    pub distractors: usize,
    pub latent: LatentDistribution,
    /// Stated confidence of the untuned model.
    #[serde(default = "default_baseline_confidence")]
    pub baseline_confidence: f64,
    #[serde(default = "default_baseline_comparison")]
    pub baseline_comparison: ComparisonPolicy,
    #[serde(default = "default_tuned_comparison")]
    pub tuned_comparison: ComparisonPolicy,
}

fn default_distractors() -> usize {
    9
}
fn default_baseline_confidence() -> f64 {
    0.9
}
fn default_baseline_comparison() -> ComparisonPolicy {
    ComparisonPolicy::PickRandom
}
fn default_tuned_comparison() -> ComparisonPolicy {
    ComparisonPolicy::PickHigherLatent
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteSection {
    pub base_url: String,
    pub model: String,
    /// Model evaluated as the "after" condition.
    #[serde(default)]
    pub tuned_model: Option<String>,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_key_env() -> String {
    API_KEY_ENV.into()
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Simulated(SimulatedSection),
    Remote(RemoteSection),
}

impl BackendConfig {
    pub fn name(&self) -> &'static str {
        match self {
            BackendConfig::Simulated(_) => "simulated",
            BackendConfig::Remote(_) => "remote",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Label of the training condition in the report table.
    pub condition: String,
    /// Comparison pairs drawn from the test split.
    pub pairs: usize,
    pub resamples: usize,
    pub alpha: f64,
    pub pooling: Pooling,
    pub binning: BinLayout,
    pub bins: usize,
    /// Pre-computed reports; when both are set `eval` reads them instead of querying a backend.
    pub before_reports: Option<PathBuf>,
    pub after_reports: Option<PathBuf>,
    pub before_outcomes: Option<PathBuf>,
    pub after_outcomes: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            condition: "S".into(),
            pairs: 2000,
            resamples: DEFAULT_RESAMPLES,
            alpha: DEFAULT_ALPHA,
            pooling: Pooling::Concatenate,
            binning: BinLayout::TopSingleton,
            bins: DEFAULT_BINS,
            before_reports: None,
            after_reports: None,
            before_outcomes: None,
            after_outcomes: None,
        }
    }
}

impl EvalSection {
    pub fn binning(&self) -> Binning {
        Binning::new(self.binning, self.bins)
    }

    pub fn external(&self) -> bool {
        self.before_reports.is_some() && self.after_reports.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub seeds: Seeds,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub targets: TargetsSection,
    pub backend: BackendConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parse TOML; relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        cfg.corpus.paths.iter_mut().for_each(resolve);
        for p in [
            &mut cfg.out_dir,
            &mut cfg.eval.before_reports,
            &mut cfg.eval.after_reports,
            &mut cfg.eval.before_outcomes,
            &mut cfg.eval.after_outcomes,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// Check everything that can be checked without touching a backend.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let c = &self.corpus;
        match (c.paths.is_empty(), &c.synthetic) {
            (true, None) => return bad("corpus: give `paths` or a `synthetic` bank".into()),
            (false, Some(_)) => return bad("corpus: `paths` and `synthetic` are mutually exclusive".into()),
            _ => {}
        }
        if let Some(p) = c.paths.iter().find(|p| !p.is_file()) {
            return bad(format!("corpus file {} not found", p.display()));
        }
        if let Some(s) = &c.synthetic {
            if c.train + c.test > s.size {
                return bad(format!("corpus: train {} + test {} exceeds synthetic size {}", c.train, c.test, s.size));
            }
        }
        if c.train == 0 || c.test == 0 {
            return bad("corpus: train and test sizes must be positive".into());
        }
        let s = &self.sampling;
        if s.n == 0 {
            return bad("sampling.n must be at least 1".into());
        }
        if !(s.temperature >= 0.0 && s.temperature.is_finite()) {
            return bad(format!("sampling.temperature {} must be >= 0", s.temperature));
        }
        if !(0.0..=1.0).contains(&s.max_unparseable_fraction) {
            return bad("sampling.max_unparseable_fraction must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.targets.max_gap) {
            return bad(format!("targets.max_gap {} outside [0, 1)", self.targets.max_gap));
        }
        let e = &self.eval;
        if e.resamples == 0 || !(e.alpha > 0.0 && e.alpha < 1.0) || e.bins == 0 {
            return bad("eval: resamples and bins must be positive and alpha in (0, 1)".into());
        }
        if e.before_reports.is_some() != e.after_reports.is_some() {
            return bad("eval: before_reports and after_reports go together".into());
        }
        if let Some(p) = [&e.before_reports, &e.after_reports, &e.before_outcomes, &e.after_outcomes]
            .into_iter()
            .flatten()
            .find(|p| !p.is_file())
        {
            return bad(format!("eval input {} not found", p.display()));
        }
        match &self.backend {
            BackendConfig::Simulated(sim) => {
                if sim.distractors == 0 {
                    return bad("backend.distractors must be at least 1".into());
                }
                if !(0.0..=1.0).contains(&sim.baseline_confidence) {
                    return bad("backend.baseline_confidence outside [0, 1]".into());
                }
                let ok = match sim.latent {
                    LatentDistribution::Beta { alpha, beta } => alpha > 0.0 && beta > 0.0,
                    LatentDistribution::Uniform { low, high } => 0.0 <= low && low < high && high <= 1.0,
                    LatentDistribution::Fixed { p } => (0.0..=1.0).contains(&p),
                };
                if !ok {
                    return bad(format!("backend.latent {:?} is not a distribution on [0, 1]", sim.latent));
                }
                if s.judge == JudgeKind::Remote {
                    return bad("sampling.judge = \"remote\" needs the remote backend".into());
                }
            }
            BackendConfig::Remote(r) => {
                if r.base_url.trim().is_empty() || r.model.trim().is_empty() {
                    return bad("backend: base_url and model are required".into());
                }
                if std::env::var(&r.api_key_env).map(|k| k.is_empty()).unwrap_or(true) {
                    return bad(format!("backend: environment variable {} is not set", r.api_key_env));
                }
            }
        }
        Ok(())
    }

    /// Digest of everything that influences stage outputs. The output
    /// directory is excluded so identical runs in different places compare equal.
    pub fn digest(&self) -> String {
        let mut snapshot = self.clone();
        snapshot.out_dir = None;
        let json = serde_json::to_string(&snapshot).expect("config serializes");
        crate::io::sha256_hex(json.as_bytes())
    }
}
