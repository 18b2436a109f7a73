use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use metacal::pipeline::{write_error_report, BackendConfig, Pipeline, PipelineError, RunConfig, Seeds, Stage};
use metacal::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Sample,
    Targets,
    BuildSft,
    BuildPairs,
    Eval,
    Bootstrap,
    Report,
    All,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Sample => Stage::Sample,
            StageArg::Targets => Stage::Targets,
            StageArg::BuildSft => Stage::BuildSft,
            StageArg::BuildPairs => Stage::BuildPairs,
            StageArg::Eval => Stage::Eval,
            StageArg::Bootstrap => Stage::Bootstrap,
            StageArg::Report => Stage::Report,
            StageArg::All => Stage::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Simulated,
    Remote,
}

/// Build consistency-based confidence targets and fine-tuning sets, and
/// evaluate verbalized confidence before and after.
#[derive(Debug, Parser)]
#[command(name = "metacal", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Stage to run.
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
    /// Require this backend; fails if the config selects another.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Replace every stage seed with one derived from this base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores, 1 runs sequentially.
    #[arg(long, default_value_t = 0)]
    parallelism: usize,
    /// Run directory. Defaults to `out_dir` from the config, then `runs/<config name>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_out(config: &Path) -> PathBuf {
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    PathBuf::from("runs").join(stem)
}

fn prepare(cli: &Cli) -> Result<(RunConfig, PathBuf), PipelineError> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seeds = Seeds::from_base(seed);
    }
    if let Some(want) = cli.backend {
        let have = match (&config.backend, want) {
            (BackendConfig::Simulated(_), BackendArg::Simulated) | (BackendConfig::Remote(_), BackendArg::Remote) => None,
            (b, _) => Some(b.name()),
        };
        if let Some(have) = have {
            return Err(PipelineError::Config(format!(
                "--backend {} requested but the config selects `{have}`",
                format!("{want:?}").to_lowercase()
            )));
        }
    }
    let out = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| default_out(&cli.config));
    Ok((config, out))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stage = Stage::from(cli.stage);
    let mut out = cli.out.clone();
    let result = prepare(&cli).and_then(|(config, dir)| {
        out = Some(dir.clone());
        let pipeline = Pipeline::new(config, dir, Execution::with_parallelism(cli.parallelism))?;
        pipeline.run(stage)?;
        Ok(pipeline)
    });
    match result {
        Ok(p) => {
            log::info!("{stage} finished in {}", p.run_dir().display());
            if matches!(stage, Stage::Report | Stage::All) {
                if let Ok(table) = std::fs::read_to_string(p.run_dir().join("report/table.md")) {
                    print!("{table}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            let report = serde_json::json!({
                "kind": err.kind(),
                "message": err.to_string(),
                "stage": stage.name(),
                "exit_code": err.exit_code(),
            });
            eprintln!("{report}");
            if let Some(dir) = &out {
                if let Err(e) = write_error_report(dir, Some(stage), &err) {
                    log::warn!("could not write error report: {e}");
                }
            }
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
