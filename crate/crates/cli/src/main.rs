mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use measched::{Error, ExperimentConfig, Result};

#[derive(Parser, Debug)]
#[command(name = "measched", version, about = "Measurement-scheduling experiments: simulate, train, evaluate")]
struct Cli {
    /// Experiment config (JSON). Defaults apply to every missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads for parallel stages. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// Dotted config overrides, e.g. `reward.lambda=0.01`.
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a simulated cohort.
    Simulate(Overrides),
    /// Convert external measurement and outcome CSVs into a dataset.
    Ingest(Overrides),
    /// Build or train the configured forecaster.
    TrainForecaster(Overrides),
    /// AUC and AUPR of the forecaster on the validation and test splits.
    EvalForecaster(Overrides),
    /// Generate training experiences from the training split.
    GenExperience(Overrides),
    /// Train the sequential DQN.
    TrainDqn(Overrides),
    /// Random hyperparameter search over DQN policies.
    Search(Overrides),
    /// Fit the off-policy value estimator.
    FitOppe(Overrides),
    /// Off-policy evaluation of every available policy on the test split.
    EvalOppe(Overrides),
    /// Monte Carlo evaluation of every available policy on the simulator.
    EvalOnline(Overrides),
    /// Cost/gain Pareto frontier over the off-policy results.
    Frontier(Overrides),
    /// Summarize every artifact in the output directory.
    Report(Overrides),
}

impl Command {
    fn overrides(&self) -> &[String] {
        match self {
            Command::Simulate(o)
            | Command::Ingest(o)
            | Command::TrainForecaster(o)
            | Command::EvalForecaster(o)
            | Command::GenExperience(o)
            | Command::TrainDqn(o)
            | Command::Search(o)
            | Command::FitOppe(o)
            | Command::EvalOppe(o)
            | Command::EvalOnline(o)
            | Command::Frontier(o)
            | Command::Report(o) => &o.overrides,
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(cli.command.overrides())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = resolve_config(cli)?;
    let mut ctx = stages::Ctx::new(cfg, cli.out_dir.clone())?;
    match &cli.command {
        Command::Simulate(_) => stages::simulate(&mut ctx),
        Command::Ingest(_) => stages::ingest(&mut ctx),
        Command::TrainForecaster(_) => stages::train_forecaster(&mut ctx),
        Command::EvalForecaster(_) => stages::eval_forecaster(&mut ctx),
        Command::GenExperience(_) => stages::gen_experience(&mut ctx),
        Command::TrainDqn(_) => stages::train_dqn(&mut ctx),
        Command::Search(_) => stages::search(&mut ctx),
        Command::FitOppe(_) => stages::fit_oppe(&mut ctx),
        Command::EvalOppe(_) => stages::eval_oppe(&mut ctx),
        Command::EvalOnline(_) => stages::eval_online(&mut ctx),
        Command::Frontier(_) => stages::frontier(&mut ctx),
        Command::Report(_) => stages::report(&mut ctx),
    }?;
    ctx.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                }
            });
            eprintln!("{report}");
            ExitCode::from(2)
        }
    }
}
