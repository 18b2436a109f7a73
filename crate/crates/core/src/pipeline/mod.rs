//! Stage-by-stage orchestration with a content-addressed run manifest.
//!
//! ```text
//! sample -> targets -> build-sft -> build-pairs
//!                  \-> eval -> bootstrap -> report
//! ```
//!
//! Every stage reads its inputs from the run directory, verifies them against
//! the digests recorded when they were produced, and records the digests of
//! what it writes.

mod config;
mod manifest;

pub use config::{
    BackendConfig, CorpusConfig, EvalSection, JudgeKind, LatentDistribution, RemoteSection, RunConfig, SamplingSection,
    Seeds, SimulatedSection, SyntheticCorpus, TargetsSection,
};
pub use manifest::{RunManifest, StageRecord, MANIFEST_FILE};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consistency::{
    build_consistency_records, grade_answer, AnswerSample, ConsistencyRecord, EquivalenceOracle, Exclusion,
    JudgeTemplates, NormalizedExact, RemoteJudge, SamplingConfig,
};
use crate::corpus::{load_corpus, split_corpus, synthetic_bank, CorpusFormat, Question, QuestionSet, SplitManifest};
use crate::exec::Execution;
use crate::gateway::{
    render_comparison, render_single, Gateway, GatewayError, RemoteBackend, RemoteConfig,
    ResponseCache, SimulatedBackend, SimulatedModelProfile, VerbalizationPolicy,
};
use crate::io::{file_digest, read_json, read_jsonl, write_json, write_jsonl};
use crate::metrics::{ComparisonOutcome, ConfidenceReport, MetricsReport};
use crate::rng::{derive_seed, stream};
use crate::stats::{
    pair_outcomes, pair_reports, paired_bootstrap, pooled_bootstrap, Auc, AucA, AucC, BootstrapConfig,
    BootstrapResult, Ece, StatsError,
};
use crate::targets::{
    balance_by_consistency, build_pair_sft, build_single_sft, comparison_sft, export_finetune_file, merge_multitask,
    read_finetune_file, targets_for, AccuracyCurve, ConfidenceTarget, ExportContext, TargetError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Sample,
    Targets,
    BuildSft,
    BuildPairs,
    Eval,
    Bootstrap,
    Report,
    /// Every stage in order.
    All,
}

impl Stage {
    pub const ORDER: [Stage; 7] = [
        Stage::Sample,
        Stage::Targets,
        Stage::BuildSft,
        Stage::BuildPairs,
        Stage::Eval,
        Stage::Bootstrap,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::Targets => "targets",
            Stage::BuildSft => "build-sft",
            Stage::BuildPairs => "build-pairs",
            Stage::Eval => "eval",
            Stage::Bootstrap => "bootstrap",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }

    /// Stages whose artifacts this stage reads.
    pub fn upstream(&self, external_eval: bool) -> &'static [Stage] {
        match self {
            Stage::Sample | Stage::All => &[],
            Stage::Targets => &[Stage::Sample],
            Stage::BuildSft => &[Stage::Sample, Stage::Targets],
            Stage::BuildPairs => &[Stage::Sample, Stage::Targets, Stage::BuildSft],
            Stage::Eval if external_eval => &[],
            Stage::Eval => &[Stage::Sample, Stage::Targets],
            Stage::Bootstrap => &[Stage::Eval],
            Stage::Report => &[Stage::Eval, Stage::Bootstrap],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ORDER
            .iter()
            .chain([Stage::All].iter())
            .find(|st| st.name() == s)
            .copied()
            .ok_or_else(|| PipelineError::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("dependency: {0}")]
    Dependency(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Dependency(_) => 3,
            PipelineError::Backend(_) => 4,
            PipelineError::MetricUndefined(_) => 5,
            PipelineError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Dependency(_) => "dependency",
            PipelineError::Backend(_) => "backend",
            PipelineError::MetricUndefined(_) => "metric_undefined",
            PipelineError::Other(_) => "other",
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        PipelineError::Other(format!("{}: {e}", path.display()))
    }
}

impl From<TargetError> for PipelineError {
    fn from(e: TargetError) -> Self {
        match e {
            TargetError::Io { .. } => PipelineError::Other(e.to_string()),
            other => PipelineError::Other(other.to_string()),
        }
    }
}

impl From<StatsError> for PipelineError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::Metric { .. } | StatsError::Unstable { .. } | StatsError::Empty => {
                PipelineError::MetricUndefined(e.to_string())
            }
            StatsError::Misaligned(_) => PipelineError::Dependency(e.to_string()),
            StatsError::Config(_) => PipelineError::Config(e.to_string()),
        }
    }
}

fn backend_err(e: GatewayError) -> PipelineError {
    match e {
        GatewayError::MissingCredential(_) | GatewayError::Profile(_) => PipelineError::Config(e.to_string()),
        other => PipelineError::Backend(other.to_string()),
    }
}

/// Machine-readable failure report written as `error.json` in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub kind: String,
    pub message: String,
    pub stage: Option<String>,
    pub exit_code: i32,
}

pub const ERROR_FILE: &str = "error.json";

pub fn write_error_report(run_dir: &Path, stage: Option<Stage>, err: &PipelineError) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(run_dir)?;
    let path = run_dir.join(ERROR_FILE);
    let report = ErrorReport {
        kind: err.kind().to_string(),
        message: err.to_string(),
        stage: stage.map(|s| s.name().to_string()),
        exit_code: err.exit_code(),
    };
    write_json(&path, &report)?;
    Ok(path)
}

/// One row of the results table: a test domain (or the pooled set) under one
/// training condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub domain: String,
    pub condition: String,
    pub results: Vec<BootstrapResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub domain: String,
    pub condition: String,
    pub before: MetricsReport,
    /// Carries the bootstrap results for this row.
    pub after: MetricsReport,
}

pub const POOLED_DOMAIN: &str = "all";

#[derive(Default)]
struct StageOutput {
    artifacts: Vec<String>,
    counts: BTreeMap<String, usize>,
    external: BTreeMap<String, String>,
}

pub struct Pipeline {
    config: RunConfig,
    run_dir: PathBuf,
    exec: Execution,
    digest: String,
}

impl Pipeline {
    pub fn new(config: RunConfig, run_dir: PathBuf, exec: Execution) -> Result<Self, PipelineError> {
        config.validate()?;
        let digest = config.digest();
        Ok(Pipeline {
            config,
            run_dir,
            exec,
            digest,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn run(&self, stage: Stage) -> Result<(), PipelineError> {
        match stage {
            Stage::All => Stage::ORDER.iter().try_for_each(|&s| self.run_one(s)),
            s => self.run_one(s),
        }
    }

    fn external_eval(&self) -> bool {
        self.config.eval.external()
    }

    fn run_one(&self, stage: Stage) -> Result<(), PipelineError> {
        log::info!("stage {stage}");
        std::fs::create_dir_all(&self.run_dir).map_err(|e| PipelineError::io(&self.run_dir, e))?;
        let upstream = stage.upstream(self.external_eval());
        let mut manifest = match RunManifest::load(&self.run_dir)? {
            Some(m) if m.config_digest == self.digest => m,
            Some(_) if !upstream.is_empty() => {
                return Err(PipelineError::Dependency(format!(
                    "{} was produced with a different config; start from an earlier stage or use a fresh --out",
                    self.run_dir.display()
                )))
            }
            _ => RunManifest::new(
                &self.digest,
                serde_json::to_value(&self.config).expect("config serializes"),
            ),
        };
        let mut inputs = BTreeMap::new();
        for &up in upstream {
            inputs.extend(manifest.verified_artifacts(&self.run_dir, up)?);
        }
        if stage == Stage::Eval && !self.external_eval() {
            if let BackendConfig::Remote(r) = &self.config.backend {
                if r.tuned_model.is_none() {
                    return Err(PipelineError::Config(
                        "eval with the remote backend needs backend.tuned_model, or eval.before_reports/after_reports"
                            .into(),
                    ));
                }
            }
        }

        let out = match stage {
            Stage::Sample => self.stage_sample()?,
            Stage::Targets => self.stage_targets()?,
            Stage::BuildSft => self.stage_build_sft()?,
            Stage::BuildPairs => self.stage_build_pairs()?,
            Stage::Eval => self.stage_eval()?,
            Stage::Bootstrap => self.stage_bootstrap()?,
            Stage::Report => self.stage_report()?,
            Stage::All => unreachable!("expanded by run"),
        };

        let mut artifacts = BTreeMap::new();
        for rel in out.artifacts {
            let path = self.run_dir.join(&rel);
            artifacts.insert(rel, file_digest(&path).map_err(|e| PipelineError::io(&path, e))?);
        }
        let completed_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        manifest.record(
            stage,
            StageRecord {
                artifacts,
                inputs,
                counts: out.counts,
                external: out.external,
                completed_at,
            },
        );
        manifest.save(&self.run_dir)?;
        let _ = std::fs::remove_file(self.run_dir.join(ERROR_FILE));
        Ok(())
    }

    fn path(&self, rel: &str) -> Result<PathBuf, PipelineError> {
        let p = self.run_dir.join(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        }
        Ok(p)
    }

    fn put_jsonl<T: Serialize>(&self, out: &mut StageOutput, rel: &str, items: &[T]) -> Result<(), PipelineError> {
        let p = self.path(rel)?;
        write_jsonl(&p, items).map_err(|e| PipelineError::io(&p, e))?;
        out.artifacts.push(rel.to_string());
        Ok(())
    }

    fn put_json<T: Serialize>(&self, out: &mut StageOutput, rel: &str, value: &T) -> Result<(), PipelineError> {
        let p = self.path(rel)?;
        write_json(&p, value).map_err(|e| PipelineError::io(&p, e))?;
        out.artifacts.push(rel.to_string());
        Ok(())
    }

    fn get_jsonl<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<Vec<T>, PipelineError> {
        read_jsonl(&self.run_dir.join(rel)).map_err(|e| PipelineError::Dependency(format!("{rel}: {e}")))
    }

    fn get_json<T: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<T, PipelineError> {
        read_json(&self.run_dir.join(rel)).map_err(|e| PipelineError::Dependency(format!("{rel}: {e}")))
    }

    fn questions(&self) -> Result<QuestionSet, PipelineError> {
        let c = &self.config.corpus;
        if let Some(s) = &c.synthetic {
            return Ok(synthetic_bank(s.size, &s.domain));
        }
        let mut all = Vec::new();
        let mut sources = Vec::new();
        for p in &c.paths {
            let set = load_corpus(p, CorpusFormat::Auto).map_err(|e| PipelineError::Config(e.to_string()))?;
            sources.push(p.display().to_string());
            all.extend(set.questions().iter().cloned());
        }
        QuestionSet::from_questions(all, &sources.join("+")).map_err(|e| PipelineError::Config(e.to_string()))
    }

    fn split(&self) -> Result<(QuestionSet, QuestionSet), PipelineError> {
        let questions = self.questions()?;
        let split: SplitManifest = self.get_json("sample/split.json")?;
        let pick = |ids: &[String], name: &str| {
            let ids: HashSet<&str> = ids.iter().map(String::as_str).collect();
            let set = questions.subset(&ids, name);
            if set.len() != ids.len() {
                return Err(PipelineError::Dependency(format!(
                    "corpus no longer contains every {name} question recorded in sample/split.json"
                )));
            }
            Ok(set)
        };
        Ok((pick(&split.train_ids, "train")?, pick(&split.test_ids, "test")?))
    }

    /// Correctness probability of every question in the simulated world.
    fn latent(&self, sim: &SimulatedSection, questions: &QuestionSet) -> HashMap<String, f64> {
        let seed = self.config.seeds.simulation;
        questions
            .iter()
            .map(|q| {
                let mut rng = stream(seed, "latent", &[q.id.as_bytes()]);
                let p = match sim.latent {
                    LatentDistribution::Beta { alpha, beta } => {
                        Beta::new(alpha, beta).expect("validated").sample(&mut rng)
                    }
                    LatentDistribution::Uniform { low, high } => {
                        use rand::Rng;
                        rng.random_range(low..=high)
                    }
                    LatentDistribution::Fixed { p } => p,
                };
                (q.id.clone(), p.clamp(0.0, 1.0))
            })
            .collect()
    }

    fn remote_backend(&self, r: &RemoteSection, model: &str) -> Result<Arc<RemoteBackend>, PipelineError> {
        let mut cfg = RemoteConfig::new(&r.base_url, model);
        cfg.api_key_env = r.api_key_env.clone();
        cfg.timeout_secs = r.timeout_secs;
        cfg.max_retries = r.max_retries;
        cfg.log_path = Some(self.path("logs/requests.jsonl")?);
        Ok(Arc::new(RemoteBackend::new(cfg).map_err(backend_err)?))
    }

    fn response_cache(&self) -> Result<Arc<ResponseCache>, PipelineError> {
        Ok(Arc::new(
            ResponseCache::open(&self.path("cache/responses.jsonl")?).map_err(backend_err)?,
        ))
    }

    /// Gateway for the untuned model, plus the oracle used for clustering and grading.
    fn base_gateway(&self, questions: &QuestionSet) -> Result<(Gateway, Box<dyn EquivalenceOracle>), PipelineError> {
        match &self.config.backend {
            BackendConfig::Simulated(sim) => {
                let profile = SimulatedModelProfile::new(self.latent(sim, questions), sim.distractors)
                    .with_verbalization(VerbalizationPolicy::FixedOverconfident {
                        confidence: sim.baseline_confidence,
                    })
                    .with_comparison(sim.baseline_comparison);
                let backend = SimulatedBackend::new("simulated-base", questions, profile, self.config.seeds.simulation)
                    .map_err(backend_err)?;
                Ok((Gateway::new(Arc::new(backend)), Box::new(NormalizedExact)))
            }
            BackendConfig::Remote(r) => {
                let backend = self.remote_backend(r, &r.model)?;
                let oracle: Box<dyn EquivalenceOracle> = match self.config.sampling.judge {
                    JudgeKind::NormalizedExact => Box::new(NormalizedExact),
                    JudgeKind::Remote => Box::new(RemoteJudge::new(backend.clone(), JudgeTemplates::default())),
                };
                Ok((Gateway::new(backend).with_cache(self.response_cache()?), oracle))
            }
        }
    }

    /// Gateway standing in for the fine-tuned model.
    fn tuned_gateway(
        &self,
        questions: &QuestionSet,
        targets: &[ConfidenceTarget],
        test_records: &[ConsistencyRecord],
    ) -> Result<Gateway, PipelineError> {
        match &self.config.backend {
            BackendConfig::Simulated(sim) => {
                let mut profile = SimulatedModelProfile::new(self.latent(sim, questions), sim.distractors)
                    .with_verbalization(VerbalizationPolicy::OracleReadout)
                    .with_comparison(sim.tuned_comparison);
                // a model trained on two-decimal targets states two-decimal confidences
                profile.readout = targets
                    .iter()
                    .map(|t| (t.question_id.clone(), (t.target * 100.0).round() / 100.0))
                    .collect();
                profile.comparison_latent = test_records.iter().map(|r| (r.question_id.clone(), r.score)).collect();
                let backend =
                    SimulatedBackend::new("simulated-tuned", questions, profile, self.config.seeds.simulation)
                        .map_err(backend_err)?;
                Ok(Gateway::new(Arc::new(backend)))
            }
            BackendConfig::Remote(r) => {
                let model = r.tuned_model.as_deref().expect("checked before the stage runs");
                Ok(Gateway::new(self.remote_backend(r, model)?).with_cache(self.response_cache()?))
            }
        }
    }

    fn stage_sample(&self) -> Result<StageOutput, PipelineError> {
        let c = &self.config.corpus;
        let questions = self.questions()?;
        let split = split_corpus(&questions, c.train, c.test, self.config.seeds.split)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let (gateway, oracle) = self.base_gateway(&questions)?;
        let s = &self.config.sampling;
        let sampling = SamplingConfig {
            n_samples: s.n,
            temperature: s.temperature,
            max_unparseable_fraction: s.max_unparseable_fraction,
        };
        let mut out = StageOutput::default();
        let mut exclusions: BTreeMap<&str, Vec<Exclusion>> = BTreeMap::new();
        for (name, set) in [("train", &split.train), ("test", &split.test)] {
            let run = build_consistency_records(set, &gateway, sampling, oracle.as_ref(), self.exec)
                .map_err(|e| PipelineError::Other(e.to_string()))?;
            if run.records.is_empty() {
                let first = run.exclusions.first().map(|e| e.reason.as_str()).unwrap_or("no questions");
                return Err(PipelineError::Backend(format!(
                    "every {name} question was excluded; first reason: {first}"
                )));
            }
            out.counts.insert(format!("{name}_records"), run.records.len());
            out.counts.insert(format!("{name}_excluded"), run.exclusions.len());
            self.put_jsonl(&mut out, &format!("sample/{name}_records.jsonl"), &run.records)?;
            exclusions.insert(name, run.exclusions);
        }
        self.put_json(&mut out, "sample/split.json", &split.manifest())?;
        self.put_json(&mut out, "sample/exclusions.json", &exclusions)?;
        Ok(out)
    }

    fn records(&self, rel: &str) -> Result<Vec<ConsistencyRecord>, PipelineError> {
        let mut records: Vec<ConsistencyRecord> = self.get_jsonl(rel)?;
        records.iter_mut().for_each(ConsistencyRecord::relink_samples);
        Ok(records)
    }

    fn stage_targets(&self) -> Result<StageOutput, PipelineError> {
        let train = self.records("sample/train_records.jsonl")?;
        let curve = AccuracyCurve::from_records(&train, "train")?;
        let t = &self.config.targets;
        let balanced = balance_by_consistency(
            &train,
            t.max_gap,
            t.gap_mode,
            &mut stream(self.config.seeds.balance, "balance", &[]),
        )?;
        let targets = targets_for(&balanced.records, &curve, self.config.seeds.epsilon)?;
        let mut out = StageOutput::default();
        out.counts.insert("balanced".into(), balanced.records.len());
        out.counts.insert("removed".into(), balanced.removed.len());
        self.put_json(&mut out, "targets/curve.json", &curve)?;
        self.put_jsonl(&mut out, "targets/balanced_train.jsonl", &balanced.records)?;
        self.put_jsonl(&mut out, "targets/targets.jsonl", &targets)?;
        let summary = serde_json::json!({
            "max_gap": t.max_gap,
            "gap_mode": t.gap_mode,
            "gap_undefined": balanced.gap_undefined,
            "counts_before": balanced.counts_before,
            "counts_after": balanced.counts_after,
            "removed": balanced.removed,
        });
        self.put_json(&mut out, "targets/balance.json", &summary)?;
        Ok(out)
    }

    fn seed_map(&self) -> BTreeMap<String, u64> {
        self.config.seeds.named().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn stage_build_sft(&self) -> Result<StageOutput, PipelineError> {
        let (train_qs, _) = self.split()?;
        let balanced = self.records("targets/balanced_train.jsonl")?;
        let curve: AccuracyCurve = self.get_json("targets/curve.json")?;
        let (instances, targets) = build_single_sft(&balanced, &train_qs, &curve, self.config.seeds.epsilon)?;
        let mut out = StageOutput::default();
        let path = self.path("sft/s.jsonl")?;
        let manifest = export_finetune_file(
            &instances,
            &path,
            ExportContext {
                seeds: self.seed_map(),
                source_splits: vec!["train".into()],
                curve: Some(curve),
                targets,
            },
        )?;
        out.artifacts.push("sft/s.jsonl".into());
        out.counts.insert("s".into(), manifest.count);
        self.put_json(&mut out, "sft/s.manifest.json", &manifest)?;
        Ok(out)
    }

    fn stage_build_pairs(&self) -> Result<StageOutput, PipelineError> {
        let (train_qs, _) = self.split()?;
        let balanced = self.records("targets/balanced_train.jsonl")?;
        let pairs = build_pair_sft(
            &balanced,
            self.config.targets.pairs,
            &mut stream(self.config.seeds.pairs, "pairs", &[]),
        )?;
        let c_set = comparison_sft(&pairs, &train_qs)?;
        let s_set = read_finetune_file(&self.run_dir.join("sft/s.jsonl"))?;
        let merged = merge_multitask(&s_set, &c_set, &mut stream(self.config.seeds.merge, "merge", &[]));
        let mut out = StageOutput::default();
        self.put_jsonl(&mut out, "pairs/pairs.jsonl", &pairs)?;
        for (name, set) in [("c", &c_set), ("cs", &merged)] {
            let rel = format!("pairs/{name}.jsonl");
            let manifest = export_finetune_file(
                set,
                &self.path(&rel)?,
                ExportContext {
                    seeds: self.seed_map(),
                    source_splits: vec!["train".into()],
                    ..Default::default()
                },
            )?;
            out.artifacts.push(rel);
            out.counts.insert(name.into(), manifest.count);
            self.put_json(&mut out, &format!("pairs/{name}.manifest.json"), &manifest)?;
        }
        Ok(out)
    }

    fn stage_eval(&self) -> Result<StageOutput, PipelineError> {
        let (before, after, ob, oa, mut out) = if self.external_eval() {
            self.eval_external()?
        } else {
            self.eval_generated()?
        };
        let binning = self.config.eval.binning();
        out.counts.insert("reports".into(), before.len());
        out.counts.insert("outcomes".into(), ob.len());
        self.put_jsonl(&mut out, "eval/reports_before.jsonl", &before)?;
        self.put_jsonl(&mut out, "eval/reports_after.jsonl", &after)?;
        self.put_jsonl(&mut out, "eval/outcomes_before.jsonl", &ob)?;
        self.put_jsonl(&mut out, "eval/outcomes_after.jsonl", &oa)?;
        self.put_json(&mut out, "eval/metrics_before.json", &MetricsReport::evaluate_with(&before, &ob, binning))?;
        self.put_json(&mut out, "eval/metrics_after.json", &MetricsReport::evaluate_with(&after, &oa, binning))?;
        Ok(out)
    }

    #[allow(clippy::type_complexity)]
    fn eval_external(
        &self,
    ) -> Result<
        (Vec<ConfidenceReport>, Vec<ConfidenceReport>, Vec<ComparisonOutcome>, Vec<ComparisonOutcome>, StageOutput),
        PipelineError,
    > {
        let e = &self.config.eval;
        let mut out = StageOutput::default();
        let mut read_reports = |p: &Option<PathBuf>| -> Result<Vec<ConfidenceReport>, PipelineError> {
            let Some(p) = p else { return Ok(Vec::new()) };
            out.external.insert(p.display().to_string(), file_digest(p).map_err(|err| PipelineError::io(p, err))?);
            read_jsonl(p).map_err(|err| PipelineError::Config(format!("{}: {err}", p.display())))
        };
        let before = read_reports(&e.before_reports)?;
        let after = read_reports(&e.after_reports)?;
        let mut read_outcomes = |p: &Option<PathBuf>| -> Result<Vec<ComparisonOutcome>, PipelineError> {
            let Some(p) = p else { return Ok(Vec::new()) };
            out.external.insert(p.display().to_string(), file_digest(p).map_err(|err| PipelineError::io(p, err))?);
            let v: Vec<ComparisonOutcome> =
                read_jsonl(p).map_err(|err| PipelineError::Config(format!("{}: {err}", p.display())))?;
            v.iter()
                .try_for_each(|o| o.validate())
                .map_err(|err| PipelineError::Config(format!("{}: {err}", p.display())))?;
            Ok(v)
        };
        let ob = read_outcomes(&e.before_outcomes)?;
        let oa = read_outcomes(&e.after_outcomes)?;
        Ok((before, after, ob, oa, out))
    }

    #[allow(clippy::type_complexity)]
    fn eval_generated(
        &self,
    ) -> Result<
        (Vec<ConfidenceReport>, Vec<ConfidenceReport>, Vec<ComparisonOutcome>, Vec<ComparisonOutcome>, StageOutput),
        PipelineError,
    > {
        let questions = self.questions()?;
        let (_, test_qs) = self.split()?;
        let test_records = self.records("sample/test_records.jsonl")?;
        let curve: AccuracyCurve = self.get_json("targets/curve.json")?;
        let targets = targets_for(&test_records, &curve, self.config.seeds.epsilon)?;
        let (base, oracle) = self.base_gateway(&questions)?;
        let tuned = self.tuned_gateway(&questions, &targets, &test_records)?;
        let lookup = |id: &str| {
            test_qs
                .get(id)
                .ok_or_else(|| PipelineError::Dependency(format!("test question {id} missing from the corpus")))
        };

        let answer_once = |gw: &Gateway, q: &Question| -> Result<Option<ConfidenceReport>, PipelineError> {
            let req = gw.request(render_single(q), 0.0, 0);
            let resp = match gw.complete(&req) {
                Ok(r) => r,
                Err(e) if e.is_parse() => return Ok(None),
                Err(e) => return Err(backend_err(e)),
            };
            let Some(conf) = resp.confidence else { return Ok(None) };
            let sample = AnswerSample::from_raw(q, 0, &resp.answers[0]);
            let correct = !sample.unparseable
                && grade_answer(&sample.canonical, q, oracle.as_ref())
                    .map_err(|e| PipelineError::Backend(e.to_string()))?;
            Ok(Some(
                ConfidenceReport::new(&q.id, conf, correct, &sample.canonical)
                    .map_err(|e| PipelineError::Backend(e.to_string()))?
                    .with_domain(&q.domain),
            ))
        };
        let report_pairs = self.exec.map(&test_records, |r| -> Result<_, PipelineError> {
            let q = lookup(&r.question_id)?;
            Ok((answer_once(&base, q)?, answer_once(&tuned, q)?))
        });
        let mut before = Vec::new();
        let mut after = Vec::new();
        let mut excluded = Vec::new();
        for (r, pair) in test_records.iter().zip(report_pairs) {
            match pair? {
                (Some(b), Some(a)) => {
                    before.push(b);
                    after.push(a);
                }
                _ => excluded.push(r.question_id.clone()),
            }
        }

        let mut ob = Vec::new();
        let mut oa = Vec::new();
        let wanted = self.config.eval.pairs;
        if wanted > 0 {
            let kept: HashSet<&str> = before.iter().map(|r| r.question_id.as_str()).collect();
            let eligible: Vec<ConsistencyRecord> =
                test_records.iter().filter(|r| kept.contains(r.question_id.as_str())).cloned().collect();
            let mut rng = stream(self.config.seeds.eval_pairs, "eval-pairs", &[]);
            let pairs = match build_pair_sft(&eligible, wanted, &mut rng) {
                Ok(p) => p,
                Err(TargetError::TooManyPairs { available, .. }) => {
                    log::warn!("only {available} comparison pairs available in the test split");
                    build_pair_sft(&eligible, available, &mut stream(self.config.seeds.eval_pairs, "eval-pairs", &[]))?
                }
                Err(TargetError::NoPermissiblePairs) => {
                    log::warn!("test split has a single consistency level; skipping comparison metrics");
                    Vec::new()
                }
                Err(e) => return Err(e.into()),
            };
            let compare = |gw: &Gateway, q1: &Question, q2: &Question, s1: f64, s2: f64| {
                let prompt = render_comparison(q1, q2).map_err(backend_err)?;
                let resp = match gw.complete(&gw.request(prompt, 0.0, 0)) {
                    Ok(r) => r,
                    Err(e) if e.is_parse() => return Ok(None),
                    Err(e) => return Err(backend_err(e)),
                };
                let Some(choice) = resp.choice else { return Ok(None) };
                let grade = |q: &Question, raw: Option<&String>| -> Result<bool, PipelineError> {
                    let Some(raw) = raw else { return Ok(false) };
                    let s = AnswerSample::from_raw(q, 0, raw);
                    Ok(!s.unparseable
                        && grade_answer(&s.canonical, q, oracle.as_ref())
                            .map_err(|e| PipelineError::Backend(e.to_string()))?)
                };
                Ok(Some(ComparisonOutcome {
                    q1_id: q1.id.clone(),
                    q2_id: q2.id.clone(),
                    choice,
                    s1,
                    s2,
                    correct_q1: grade(q1, resp.answers.first())?,
                    correct_q2: grade(q2, resp.answers.get(1))?,
                }))
            };
            let results = self.exec.map(&pairs, |p| -> Result<_, PipelineError> {
                let (q1, q2) = (lookup(&p.q1_id)?, lookup(&p.q2_id)?);
                Ok((compare(&base, q1, q2, p.s1, p.s2)?, compare(&tuned, q1, q2, p.s1, p.s2)?))
            });
            for (p, res) in pairs.iter().zip(results) {
                match res? {
                    (Some(b), Some(a)) => {
                        ob.push(b);
                        oa.push(a);
                    }
                    _ => excluded.push(format!("{}|{}", p.q1_id, p.q2_id)),
                }
            }
        }

        let mut out = StageOutput::default();
        out.counts.insert("excluded".into(), excluded.len());
        self.put_json(&mut out, "eval/exclusions.json", &excluded)?;
        Ok((before, after, ob, oa, out))
    }

    fn stage_bootstrap(&self) -> Result<StageOutput, PipelineError> {
        let before: Vec<ConfidenceReport> = self.get_jsonl("eval/reports_before.jsonl")?;
        let after: Vec<ConfidenceReport> = self.get_jsonl("eval/reports_after.jsonl")?;
        let ob: Vec<ComparisonOutcome> = self.get_jsonl("eval/outcomes_before.jsonl")?;
        let oa: Vec<ComparisonOutcome> = self.get_jsonl("eval/outcomes_after.jsonl")?;
        let e = &self.config.eval;
        let base_seed = self.config.seeds.bootstrap;
        let cfg = |domain: &str, metric: &str| BootstrapConfig {
            resamples: e.resamples,
            alpha: e.alpha,
            seed: derive_seed(base_seed, &format!("{domain}/{metric}")),
        };

        let domains = group_by_domain(&before);
        let mut per_domain = Vec::new();
        let mut rows = Vec::new();
        for (domain, ids) in &domains {
            let b: Vec<ConfidenceReport> = before.iter().filter(|r| ids.contains(&r.question_id)).cloned().collect();
            let a: Vec<ConfidenceReport> = after.iter().filter(|r| ids.contains(&r.question_id)).cloned().collect();
            let paired = pair_reports(&b, &a)?;
            let results = vec![
                paired_bootstrap(&paired, &Auc, cfg(domain, "auc"), self.exec)?,
                paired_bootstrap(&paired, &Ece(e.binning()), cfg(domain, "ece"), self.exec)?,
            ];
            per_domain.push(paired);
            rows.push(BootstrapRow {
                domain: domain.clone(),
                condition: e.condition.clone(),
                results,
            });
        }
        let pooled_index = if domains.len() > 1 {
            let results = vec![
                pooled_bootstrap(&per_domain, Auc, e.pooling, cfg(POOLED_DOMAIN, "auc"), self.exec)?,
                pooled_bootstrap(&per_domain, Ece(e.binning()), e.pooling, cfg(POOLED_DOMAIN, "ece"), self.exec)?,
            ];
            rows.push(BootstrapRow {
                domain: POOLED_DOMAIN.into(),
                condition: e.condition.clone(),
                results,
            });
            rows.len() - 1
        } else {
            0
        };
        if !ob.is_empty() {
            let paired = pair_outcomes(&ob, &oa)?;
            let domain = rows[pooled_index].domain.clone();
            rows[pooled_index].results.push(paired_bootstrap(&paired, &AucC, cfg(&domain, "auc_c"), self.exec)?);
            rows[pooled_index].results.push(paired_bootstrap(&paired, &AucA, cfg(&domain, "auc_a"), self.exec)?);
        }
        let mut out = StageOutput::default();
        out.counts.insert("rows".into(), rows.len());
        self.put_json(&mut out, "bootstrap/bootstrap.json", &rows)?;
        Ok(out)
    }

    fn stage_report(&self) -> Result<StageOutput, PipelineError> {
        let before: Vec<ConfidenceReport> = self.get_jsonl("eval/reports_before.jsonl")?;
        let after: Vec<ConfidenceReport> = self.get_jsonl("eval/reports_after.jsonl")?;
        let ob: Vec<ComparisonOutcome> = self.get_jsonl("eval/outcomes_before.jsonl")?;
        let oa: Vec<ComparisonOutcome> = self.get_jsonl("eval/outcomes_after.jsonl")?;
        let rows: Vec<BootstrapRow> = self.get_json("bootstrap/bootstrap.json")?;
        let binning = self.config.eval.binning();
        let domains = group_by_domain(&before);
        let mut out = StageOutput::default();
        let mut report_rows = Vec::new();
        for row in &rows {
            let subset = |reports: &[ConfidenceReport]| -> Vec<ConfidenceReport> {
                match domains.get(&row.domain) {
                    Some(ids) if row.domain != POOLED_DOMAIN || domains.len() == 1 => {
                        reports.iter().filter(|r| ids.contains(&r.question_id)).cloned().collect()
                    }
                    _ => reports.to_vec(),
                }
            };
            let with_outcomes = row.results.iter().any(|r| r.metric == "auc_c");
            let (rb, ra) = (subset(&before), subset(&after));
            let (cb, ca) = if with_outcomes { (&ob[..], &oa[..]) } else { (&[][..], &[][..]) };
            let mb = MetricsReport::evaluate_with(&rb, cb, binning);
            let mut ma = MetricsReport::evaluate_with(&ra, ca, binning);
            ma.bootstrap = row.results.clone();
            let slug = slug(&row.domain);
            for (cond, m) in [("before", &mb), ("after", &ma)] {
                let rel = format!("report/diagram_{slug}_{cond}.csv");
                crate::metrics::write_diagram_csv(&m.bins, &self.path(&rel)?)
                    .map_err(|e| PipelineError::Other(format!("{rel}: {e}")))?;
                out.artifacts.push(rel);
            }
            report_rows.push(ReportRow {
                domain: row.domain.clone(),
                condition: row.condition.clone(),
                before: mb,
                after: ma,
            });
        }
        let table = render_table(&rows);
        let table_path = self.path("report/table.md")?;
        std::fs::write(&table_path, &table).map_err(|e| PipelineError::io(&table_path, e))?;
        out.artifacts.push("report/table.md".into());
        self.put_json(&mut out, "report/report.json", &report_rows)?;
        out.counts.insert("rows".into(), report_rows.len());
        Ok(out)
    }
}

fn group_by_domain(reports: &[ConfidenceReport]) -> BTreeMap<String, HashSet<String>> {
    let mut groups: BTreeMap<String, HashSet<String>> = BTreeMap::new();
    for r in reports {
        let d = r.domain.clone().unwrap_or_else(|| POOLED_DOMAIN.to_string());
        groups.entry(d).or_default().insert(r.question_id.clone());
    }
    groups
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

const TABLE_METRICS: [(&str, &str); 4] = [("auc", "AUC"), ("ece", "ECE"), ("auc_c", "AUCc"), ("auc_a", "AUCa")];

/// Markdown before/after table; an after value is starred when the bootstrap
/// interval for the difference excludes zero.
pub fn render_table(rows: &[BootstrapRow]) -> String {
    let used: Vec<(&str, &str)> = TABLE_METRICS
        .iter()
        .copied()
        .filter(|(m, _)| rows.iter().any(|r| r.results.iter().any(|x| x.metric == *m)))
        .collect();
    let mut header = vec!["Domain".to_string(), "Condition".to_string()];
    for (_, label) in &used {
        header.push(format!("{label} before"));
        header.push(format!("{label} after"));
    }
    let mut lines = vec![
        format!("| {} |", header.join(" | ")),
        format!("|{}", "---|".repeat(header.len())),
    ];
    for row in rows {
        let mut cells = vec![row.domain.clone(), row.condition.clone()];
        for (metric, _) in &used {
            match row.results.iter().find(|r| r.metric == *metric) {
                Some(r) => {
                    cells.push(format!("{:.2}", r.before));
                    cells.push(format!("{:.2}{}", r.after, if r.significant { "*" } else { "" }));
                }
                None => cells.extend(["n/a".to_string(), "n/a".to_string()]),
            }
        }
        lines.push(format!("| {} |", cells.join(" | ")));
    }
    lines.push(String::new());
    lines.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(metric: &str, before: f64, after: f64, significant: bool) -> BootstrapResult {
        BootstrapResult {
            metric: metric.into(),
            before,
            after,
            delta: after - before,
            ci: if significant { [0.1, 0.3] } else { [-0.1, 0.2] },
            significant,
            resamples: 1000,
            redraws: 0,
            seed: 1,
        }
    }

    #[test]
    fn table_stars_significant_cells() {
        let rows = vec![BootstrapRow {
            domain: "gsm8k".into(),
            condition: "S".into(),
            results: vec![result("auc", 0.53, 0.76, true), result("ece", 0.75, 0.70, false)],
        }];
        let t = render_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "| Domain | Condition | AUC before | AUC after | ECE before | ECE after |");
        assert_eq!(lines[2], "| gsm8k | S | 0.53 | 0.76* | 0.75 | 0.70 |");
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ORDER {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert_eq!("all".parse::<Stage>().unwrap(), Stage::All);
        assert_eq!("nope".parse::<Stage>().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Config(String::new()).exit_code(), 2);
        assert_eq!(PipelineError::Dependency(String::new()).exit_code(), 3);
        assert_eq!(PipelineError::Backend(String::new()).exit_code(), 4);
        assert_eq!(PipelineError::MetricUndefined(String::new()).exit_code(), 5);
        assert_eq!(PipelineError::Other(String::new()).exit_code(), 1);
    }
}
