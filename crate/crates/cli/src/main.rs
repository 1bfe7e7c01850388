//! `iml`: forge corpora, train, evaluate and analyze from one config.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iml_core::config::{ExperimentConfig, PRESETS};
use iml_core::pipeline;
use iml_core::CoreError;

#[derive(Parser)]
#[command(name = "iml", version, about = "Implicit meta-learning experiments on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Source {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Shipped preset name.
    #[arg(long)]
    preset: Option<String>,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct WithCheckpoint {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate bundles and vocabularies.
    Forge(Source),
    /// Train every seed and write per-seed artifacts and reports.
    Train {
        #[command(flatten)]
        source: Source,
        /// Use this bundle file instead of forging one.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Exact match of every evaluation family under a checkpoint.
    Eval(WithCheckpoint),
    /// Gradient alignment under a checkpoint.
    Align(WithCheckpoint),
    /// Linear probes under a checkpoint.
    Probe(WithCheckpoint),
    /// Rebuild summaries and charts of an existing output directory.
    Report {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run a shipped experiment end to end.
    Repro {
        /// One of the shipped presets.
        name: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn load(source: &Source) -> Result<ExperimentConfig, CoreError> {
    match (&source.config, &source.preset) {
        (Some(path), _) => ExperimentConfig::load(path),
        (None, Some(name)) => ExperimentConfig::preset(name),
        (None, None) => Err(CoreError::Config { field: "config".into(), message: "pass --config PATH or --preset NAME".into() }),
    }
}

fn seeds(cfg: &ExperimentConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn single_point(cfg: &ExperimentConfig) -> Result<ExperimentConfig, CoreError> {
    let mut points = cfg.points();
    if points.len() != 1 {
        return Err(CoreError::Config {
            field: "sweep".into(),
            message: "checkpoint commands need a config without a sweep".into(),
        });
    }
    Ok(points.remove(0).1)
}

fn checkpoint_target(w: &WithCheckpoint, sub: &str) -> Result<(ExperimentConfig, u64, PathBuf), CoreError> {
    let cfg = single_point(&load(&w.source)?)?;
    let seed = w.source.seed.unwrap_or(cfg.seeds[0]);
    let stem = w.checkpoint.file_stem().map_or_else(|| "checkpoint".into(), |s| s.to_string_lossy().to_string());
    Ok((cfg, seed, w.source.out.join(format!("{sub}-{stem}-seed-{seed}"))))
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), CoreError> {
    match cli.command {
        Command::Forge(source) => {
            let cfg = load(&source)?;
            print_paths(&pipeline::forge_experiment(&cfg, &source.out, &seeds(&cfg, source.seed))?);
        }
        Command::Train { source, bundle } => {
            let cfg = load(&source)?;
            let outcomes = pipeline::run_experiment(&cfg, &source.out, &seeds(&cfg, source.seed), bundle.as_deref(), &mut log)?;
            for o in outcomes {
                print_paths(&o.report);
            }
        }
        Command::Repro { name, seed, out } => {
            let cfg = ExperimentConfig::preset(&name)?;
            let outcomes = pipeline::run_experiment(&cfg, &out, &seeds(&cfg, seed), None, &mut log)?;
            for o in outcomes {
                print_paths(&o.report);
            }
        }
        Command::Eval(w) => {
            let (cfg, seed, dir) = checkpoint_target(&w, "eval")?;
            for r in pipeline::eval_checkpoint(&cfg, seed, &w.checkpoint, &dir)? {
                println!("{}\t{}\t{}", r.subset, r.question_family, r.value);
            }
        }
        Command::Align(w) => {
            let (cfg, seed, dir) = checkpoint_target(&w, "align")?;
            for r in pipeline::align_checkpoint(&cfg, seed, &w.checkpoint, &dir)? {
                println!("{}\t{}\t{}", r.subset, r.metric, r.value);
            }
        }
        Command::Probe(w) => {
            let (cfg, seed, dir) = checkpoint_target(&w, "probe")?;
            for r in pipeline::probe_checkpoint(&cfg, seed, &w.checkpoint, &dir)? {
                println!("{}\t{}\t{}", r.task, r.layer, r.test_acc);
            }
        }
        Command::Report { out } => print_paths(&pipeline::report_experiment(&out)?),
    }
    Ok(())
}

/// One-line JSON description of an error.
fn error_line(e: &CoreError) -> String {
    let kind = match e {
        CoreError::Generation(_) | CoreError::InvalidVariant(_) | CoreError::Domain(_) => "generation",
        CoreError::Parse(_) | CoreError::ParseAt { .. } => "parse",
        CoreError::Config { .. } => "config",
        CoreError::Tokenizer(_) => "tokenizer",
        CoreError::Model(_) | CoreError::Numerics(_) => "model",
        CoreError::Optimizer(_) | CoreError::Training(_) => "training",
        CoreError::Analysis(_) => "analysis",
        CoreError::Io { .. } => "io",
    };
    let mut obj = serde_json::json!({ "error": kind, "message": e.to_string() });
    match e {
        CoreError::Config { field, .. } => obj["field"] = field.clone().into(),
        CoreError::Io { path, .. } => obj["path"] = path.display().to_string().into(),
        CoreError::ParseAt { path, line, .. } => {
            obj["path"] = path.clone().into();
            obj["line"] = (*line).into();
        }
        _ => {}
    }
    obj.to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    if let Command::Repro { name, .. } = &cli.command {
        if !PRESETS.contains(&name.as_str()) {
            let e = CoreError::Config { field: "preset".into(), message: format!("unknown preset `{name}` (known: {})", PRESETS.join(", ")) };
            eprintln!("{}", error_line(&e));
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

