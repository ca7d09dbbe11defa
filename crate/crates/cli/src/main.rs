mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dsdp::baselines::BaselineKind;
use dsdp::eval::Metric;

use commands::{Run, DSDP};
use config::RunConfig;

/// Reproducible pipeline for driving-style diffusion policies.
#[derive(Parser)]
#[command(name = "dsdp", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set policy.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for every artifact.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(short = 'j', long, global = true)]
    workers: Option<usize>,
    /// Use inputs whose config fingerprint differs from the current one.
    #[arg(long, global = true)]
    allow_fingerprint_mismatch: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the styled synthetic dataset.
    Synth,
    /// Import a trajectory CSV.
    Ingest {
        /// Overrides the config's CSV path.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Smooth, split and normalize the raw records.
    Preprocess,
    /// Contrastive style representation.
    TrainStyle,
    /// Style-index prior over warm-up windows.
    TrainPrior,
    /// Style-conditioned diffusion policy.
    TrainPolicy,
    /// Baseline policies (all configured kinds unless `--kind` is given).
    TrainBaseline {
        #[arg(long = "kind")]
        kinds: Vec<BaselineKind>,
    },
    /// Collision rate in closed loop.
    EvalCrash(EvalArgs),
    /// Density, coverage and F1 of closed-loop observations.
    EvalF1(EvalArgs),
    /// Aggregate every report into mean and two standard errors.
    Report,
}

#[derive(Args)]
struct EvalArgs {
    /// `dsdp` or a baseline name. Repeatable.
    #[arg(long = "policy", default_value = DSDP)]
    policies: Vec<String>,
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let run = Run::new(cfg, cli.common.allow_fingerprint_mismatch)?;
    run.prepare()?;
    log::info!(
        "run {} fingerprint {}",
        run.cfg.out_dir.display(),
        run.fingerprint
    );
    match cli.command {
        Command::Synth => {
            let m = run.synth()?;
            log::info!("synthesized {:?}", m.counts);
        }
        Command::Ingest { input } => {
            let m = run.ingest(input.as_deref())?;
            log::info!("ingested {:?}", m.counts);
        }
        Command::Preprocess => {
            let m = run.preprocess()?;
            log::info!("split {:?}", m.counts);
        }
        Command::TrainStyle => run.train_style()?,
        Command::TrainPrior => run.train_prior()?,
        Command::TrainPolicy => run.train_policy()?,
        Command::TrainBaseline { kinds } => run.train_baselines(&kinds)?,
        Command::EvalCrash(a) => report_lines(&run.eval(Metric::Crash, &a.policies)?),
        Command::EvalF1(a) => report_lines(&run.eval(Metric::F1, &a.policies)?),
        Command::Report => print!("{}", run.report()?),
    }
    Ok(())
}

fn report_lines(reports: &[dsdp::eval::EvalReport]) {
    for r in reports {
        match r.f1 {
            Some(f1) => println!(
                "{} seed {}: f1 {f1:.4} crash {:.1}%",
                r.policy, r.seed, r.crash_pct
            ),
            None => println!("{} seed {}: crash {:.1}%", r.policy, r.seed, r.crash_pct),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
