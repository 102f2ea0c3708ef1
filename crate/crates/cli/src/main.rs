//! `dvc` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dvc_core::config::RunConfig;
use dvc_core::pipeline::{self, SyntheticSpec, CONFIG_FILE};
use dvc_core::pyramid::FusionMode;
use dvc_core::DvcError;

#[derive(Parser)]
#[command(name = "dvc", version, about = "Dense video captioning with a semantic concept stream")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a POS lexicon and a desk-scale config.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        videos: usize,
        #[arg(long, default_value_t = 5)]
        max_events: usize,
        #[arg(long, default_value_t = 32)]
        feature_dim: usize,
        #[arg(long, default_value_t = 2)]
        modalities: usize,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the frame-level concept detector.
    TrainConcepts {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the captioning model with the concept detector frozen.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Concept detector checkpoint from `train-concepts`.
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write submission-shaped predictions for a manifest.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the evaluation manifest of the checkpoint's config, then its training manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions; writes a JSON report and a text table.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List every configuration key with its default.
    Keys,
}

#[derive(Args)]
struct RunArgs {
    /// Flat JSON config; relative data paths resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed and DVC_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["3", "5", "7", "10"]))]
    max_events: Option<String>,
    #[arg(long)]
    no_concepts: bool,
    #[arg(long)]
    no_classification: bool,
    /// `key=value` config override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    s.parse()
}

impl RunArgs {
    fn resolve(&self) -> dvc_core::Result<RunConfig> {
        let base = self.config.parent().unwrap_or(Path::new("."));
        let mut config = pipeline::resolve_paths(&RunConfig::load(&self.config)?, base);
        let mut sets = self.overrides.clone();
        if let Ok(seed) = std::env::var("DVC_SEED") {
            sets.insert(0, format!("seed={seed}"));
        }
        if let Some(seed) = self.seed {
            sets.push(format!("seed={seed}"));
        }
        if let Some(f) = self.fusion {
            sets.push(format!("fusion.mode={}", if f == FusionMode::Early { "early" } else { "late" }));
        }
        if let Some(k) = &self.max_events {
            sets.push(format!("counter.maxEvents={k}"));
        }
        if self.no_concepts {
            sets.push("concepts.enabled=false".into());
        }
        if self.no_classification {
            sets.push("classification.enabled=false".into());
        }
        if !sets.is_empty() {
            config = config.with_overrides(&sets)?;
        }
        Ok(config)
    }
}

fn run(cli: Cli) -> dvc_core::Result<()> {
    match cli.command {
        Command::MakeSynthetic { out, seed, videos, max_events, feature_dim, modalities, force } => {
            let spec = SyntheticSpec { seed, videos, max_events, feature_dim, modalities };
            pipeline::make_synthetic(&out, &spec, force)?;
            println!("wrote {}", out.display());
        }
        Command::TrainConcepts { run, out } => {
            let config = run.resolve()?;
            let result = pipeline::run_train_concepts(&config, &out)?;
            println!(
                "concept detector: {} concepts, final loss {:.6}, training micro-F1 {:.4}",
                result.vocab.len(),
                result.curve.last().copied().unwrap_or(f64::NAN),
                result.f1
            );
        }
        Command::Train { run, concepts, out } => {
            let config = run.resolve()?;
            let result = pipeline::run_train(&config, concepts.as_deref(), &out, |_, _| {})?;
            if let Some(last) = result.curve.last() {
                println!(
                    "final loss {:.6} (caption {:.6}, loc {:.6}, cls {:.6}, counter {:.6})",
                    last.total, last.caption, last.loc, last.cls, last.counter
                );
            }
            println!("checkpoint {}", out.display());
        }
        Command::Predict { checkpoint, manifest, out } => {
            let manifest = match manifest {
                Some(m) => m,
                None => {
                    let c = RunConfig::load(&checkpoint.join(CONFIG_FILE))?;
                    c.eval_manifest.unwrap_or(c.train_manifest)
                }
            };
            let preds = pipeline::run_predict(&checkpoint, &manifest, &out)?;
            println!("{} videos -> {}", preds.len(), out.display());
        }
        Command::Evaluate { predictions, manifest, out } => {
            let report = pipeline::run_evaluate(&predictions, &manifest, &out)?;
            let snapshot = serde_json::json!({
                "predictions": predictions,
                "manifest": manifest,
                "thresholds": dvc_core::eval::DEFAULT_THRESHOLDS,
            });
            std::fs::write(pipeline::snapshot_path(&out), serde_json::to_string_pretty(&snapshot)?)?;
            print!("{}", report.table());
        }
        Command::Keys => {
            for (k, v) in RunConfig::documented_keys() {
                println!("{k} = {v}");
            }
        }
    }
    Ok(())
}

/// Exit code and short category for an error.
fn classify(e: &DvcError) -> (u8, &'static str) {
    match e {
        DvcError::Config(_) => (1, "config"),
        DvcError::Io(_) => (1, "io"),
        DvcError::Json(_) => (1, "json"),
        DvcError::TensorFormat { .. } => (1, "tensor-format"),
        DvcError::MissingFeature { .. } => (1, "missing-feature"),
        DvcError::Validation(_) => (1, "validation"),
        DvcError::Vocabulary(_) => (1, "vocabulary"),
        DvcError::NotEnoughConcepts { .. } => (1, "concepts"),
        DvcError::InvalidArgument(_) => (1, "argument"),
        DvcError::Checkpoint(_) => (1, "checkpoint"),
        DvcError::Shape(_) => (2, "shape"),
        DvcError::Matching(_) => (2, "matching"),
        DvcError::NonFiniteLoss { .. } => (2, "non-finite-loss"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({"error": "usage", "message": first}));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("{}", serde_json::json!({"error": kind, "message": e.to_string()}));
            ExitCode::from(code)
        }
    }
}
