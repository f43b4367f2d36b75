use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lsnpc::config::ExperimentConfig;
use lsnpc::pipeline::{self, stages};
use lsnpc::registry::Registry;
use lsnpc::{Error, Result};

/// Noisy-label correction experiments: data generation, corruption, base
/// training, post-processor training, correction, evaluation and checks.
#[derive(Parser, Debug)]
#[command(name = "lsnpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run this seed only, overriding `[run] seeds`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory, overriding `[run] out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate or import the dataset of every seed.
    GenData,
    /// Split and corrupt every dataset under each noise setting.
    Corrupt,
    /// Train the base classifier on the noisy training rows.
    TrainBase,
    /// Train the correction models.
    TrainLsnpc,
    /// Correct the test rows with every configured method.
    Correct,
    /// Score the corrections and write the report.
    Eval,
    /// Sensitivity grid over ν0 and ν.
    Sweep,
    /// Student against Normal proposals.
    Ablate,
    /// Numerical checks of the bounds.
    VerifyTheory,
    /// The whole pipeline followed by the checks.
    RunAll,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    let registry = Registry::default();
    let say = |text: String| {
        if !cli.quiet {
            print!("{text}");
        }
    };
    let out = || {
        cfg.out
            .clone()
            .ok_or_else(|| Error::Config(format!("{:?} needs --out or `[run] out`", cli.command)))
    };
    match cli.command {
        Command::GenData => each_seed(&cfg, |s| stages::gen_data(&cfg, &out()?, s)),
        Command::Corrupt => each_seed(&cfg, |s| stages::corrupt(&cfg, &out()?, s)),
        Command::TrainBase => each_seed(&cfg, |s| stages::train_base(&cfg, &out()?, s)),
        Command::TrainLsnpc => each_seed(&cfg, |s| stages::train_lsnpc(&cfg, &out()?, s, &registry)),
        Command::Correct => each_seed(&cfg, |s| stages::correct(&cfg, &out()?, s, &registry)),
        Command::Eval => {
            let dir = out()?;
            let mut runs = Vec::new();
            for &s in &cfg.seeds {
                runs.extend(stages::eval(&cfg, &dir, s, &registry)?);
            }
            let art = pipeline::finish(&cfg, runs)?;
            say(art.report.to_text());
            Ok(())
        }
        Command::Sweep => {
            say(pipeline::sweep_sensitivity(&cfg, &registry)?.to_text());
            Ok(())
        }
        Command::Ablate => {
            say(pipeline::run_ablation(&cfg, &registry)?.to_text());
            Ok(())
        }
        Command::VerifyTheory => {
            say(pipeline::verify_all(&cfg, cfg.seeds[0])?.to_text());
            Ok(())
        }
        Command::RunAll => {
            let art = pipeline::run_experiment(&cfg, &registry)?;
            say(art.report.to_text());
            let mut theory_cfg = cfg.clone();
            // The checks write next to the report but stay out of its manifest.
            theory_cfg.out = cfg.out.as_ref().map(|o| o.join("checks"));
            say(pipeline::verify_all(&theory_cfg, cfg.seeds[0])?.to_text());
            Ok(())
        }
    }
}

fn each_seed(cfg: &ExperimentConfig, mut f: impl FnMut(u64) -> Result<()>) -> Result<()> {
    for &seed in &cfg.seeds {
        log::info!("seed {seed}");
        f(seed)?;
    }
    Ok(())
}
