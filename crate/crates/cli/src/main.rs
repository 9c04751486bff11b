//! `octscreen`: synthetic data, two-phase training, evaluation, heatmaps,
//! feature export and gradient checks from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! data error, 3 gradient-check failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use octscreen::train::Phase;

use config::{parse_override, read_file, RunConfig, Setting, UsageError};

#[derive(Parser)]
#[command(name = "octscreen", version, about = "Retinal OCT screening engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// `[section]` / `key = value` config file (see CONFIG.md).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed; overrides `run.seed` and $OCT_ENGINE_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (`run.workers`).
    #[arg(long)]
    workers: Option<usize>,
    /// Dataset manifest (`data.manifest`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Override any key, e.g. `--set train.base_lr=0.005`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Validation manifest (`data.val_manifest`).
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    /// Training steps (`train.max_steps`).
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic four-class image set with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n_per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the two-head (reconstruction + classification) model.
    PretrainVae(TrainArgs),
    /// Train the classifier.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        /// Copy matching encoder parameters from this checkpoint first.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Write a metrics report; several checkpoints are averaged.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Occlusion heatmaps for listed images (or the whole manifest).
    Heatmap {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        /// Class to explain; defaults to the predicted class.
        #[arg(long)]
        class: Option<String>,
    },
    /// Export pooled features as CSV.
    Features {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of every differentiable op and block.
    GradCheck {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Check a single case.
        #[arg(long)]
        case: Option<String>,
    },
}

fn flag(key: &str, value: impl ToString) -> Setting {
    Setting {
        key: key.to_string(),
        value: value.to_string(),
        origin: "command line".to_string(),
    }
}

impl RunArgs {
    fn settings(&self) -> Result<Vec<Setting>, UsageError> {
        let mut s = match &self.config {
            Some(p) => read_file(p)?,
            None => Vec::new(),
        };
        for o in &self.overrides {
            s.push(parse_override(o)?);
        }
        if let Some(w) = self.workers {
            s.push(flag("run.workers", w));
        }
        if let Some(m) = &self.manifest {
            s.push(flag("data.manifest", m.display()));
        }
        Ok(s)
    }

    fn build(&self, phase: Phase, extra: Vec<Setting>) -> Result<RunConfig, UsageError> {
        let mut s = self.settings()?;
        s.extend(extra);
        let cfg = RunConfig::build(phase, &s, self.seed)?;
        octscreen::par::set_workers(cfg.workers);
        Ok(cfg)
    }
}

impl TrainArgs {
    fn build(&self, phase: Phase) -> Result<RunConfig, UsageError> {
        let mut extra = Vec::new();
        if let Some(v) = &self.val_manifest {
            extra.push(flag("data.val_manifest", v.display()));
        }
        if let Some(n) = self.steps {
            extra.push(flag("train.max_steps", n));
        }
        self.run.build(phase, extra)
    }
}

enum Outcome {
    Done,
    GradCheckFailed,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    match cli.command {
        Command::Synth {
            out,
            n_per_class,
            size,
            seed,
        } => {
            let cfg = RunConfig::build(Phase::Classifier, &[], seed)?;
            commands::synth(&out, n_per_class, size, cfg.seed)?;
        }
        Command::PretrainVae(args) => {
            let cfg = args.build(Phase::Vae)?;
            commands::run_training(&cfg, &args.run.out, None)?;
        }
        Command::Train { args, init_from } => {
            let cfg = args.build(Phase::Classifier)?;
            commands::run_training(&cfg, &args.run.out, init_from.as_deref())?;
        }
        Command::Eval { run, checkpoints } => {
            let cfg = run.build(Phase::Classifier, Vec::new())?;
            commands::eval(&cfg, &checkpoints, &run.out)?;
        }
        Command::Heatmap {
            run,
            checkpoint,
            images,
            class,
        } => {
            let cfg = run.build(Phase::Classifier, Vec::new())?;
            commands::heatmap(&cfg, &checkpoint, &images, class.as_deref(), &run.out)?;
        }
        Command::Features { run, checkpoint } => {
            let cfg = run.build(Phase::Classifier, Vec::new())?;
            commands::features(&cfg, &checkpoint, &run.out)?;
        }
        Command::GradCheck {
            instances,
            seed,
            tolerance,
            case,
        } => {
            if !commands::grad_check(instances, seed, tolerance, case.as_deref())? {
                return Ok(Outcome::GradCheckFailed);
            }
        }
    }
    Ok(Outcome::Done)
}

/// Usage problems anywhere in the chain, including invalid core configs,
/// exit 1; everything else is a runtime failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some()
            || matches!(c.downcast_ref::<octscreen::Error>(), Some(octscreen::Error::Config(_)))
    });
    if usage {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::GradCheckFailed) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
