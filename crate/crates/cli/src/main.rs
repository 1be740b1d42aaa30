use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mimodab::channel::ChannelModel;
use mimodab::harness::{run_experiment, ExperimentConfig, ExperimentKind};

const GRADCHECK_LIMIT: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "mimodab", version, about = "Distortion-aware massive MIMO precoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Antennas.
    #[arg(long, default_value_t = 8)]
    b: usize,
    /// Users.
    #[arg(long, default_value_t = 2)]
    u: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances to check.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Optional configuration; B, U and the seed flags still apply.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Radiation patterns of linear and distortion power.
    Pattern(RunArgs),
    /// Sum-rate CDFs over channel realizations.
    RateCdf(RunArgs),
    /// Average sum rate against SNR.
    SnrSweep(RunArgs),
    /// Sum rate against total transmit power, with and without power control.
    PowerControl(RunArgs),
    /// Consumed power needed to reach a target rate.
    EeCdf(RunArgs),
    /// Objective against iteration for both optimizers.
    Convergence(RunArgs),
    /// Out-of-band emission of the worst antenna.
    OobPsd(RunArgs),
    /// Compares the closed-form gradient with finite differences.
    Gradcheck(GradcheckArgs),
}

fn load(path: &PathBuf) -> Result<ExperimentConfig> {
    ExperimentConfig::from_json_file(path).with_context(|| format!("reading {}", path.display()))
}

fn run(kind: ExperimentKind, args: RunArgs) -> Result<ExitCode> {
    let mut cfg = load(&args.config)?;
    if cfg.experiment != kind {
        bail!(
            "configuration describes a {} experiment, not {}",
            cfg.experiment.as_str(),
            kind.as_str()
        );
    }
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = args.out {
        cfg.output = Some(out);
    }
    let dir = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("results").join(kind.as_str()));
    let output = run_experiment(&cfg, args.threads)?;
    for path in output.write_to(&dir)? {
        println!("{}", path.display());
    }
    let infeasible = output
        .table
        .aggregates()
        .iter()
        .filter(|a| a.n_infeasible > 0)
        .count();
    if infeasible > 0 {
        log::warn!("{infeasible} result groups contain infeasible rows");
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(path) => load(path)?,
        None => {
            let mut cfg = ExperimentConfig::new(ExperimentKind::Gradcheck, args.b, args.u);
            cfg.channel.model = ChannelModel::Geometric;
            cfg
        }
    };
    cfg.experiment = ExperimentKind::Gradcheck;
    cfg.antennas = args.b;
    cfg.users = args.u;
    cfg.master_seed = args.seed;
    cfg.n_realizations = args.instances;
    let output = run_experiment(&cfg, args.threads)?;
    let worst = output
        .table
        .values("dab", "grad_rel_error", None)
        .into_iter()
        .fold(0.0, f64::max);
    println!("max relative gradient error: {worst:e}");
    if worst > GRADCHECK_LIMIT || worst.is_nan() {
        eprintln!("gradient check failed: {worst:e} > {GRADCHECK_LIMIT:e}");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pattern(a) => run(ExperimentKind::Pattern, a),
        Command::RateCdf(a) => run(ExperimentKind::RateCdf, a),
        Command::SnrSweep(a) => run(ExperimentKind::SnrSweep, a),
        Command::PowerControl(a) => run(ExperimentKind::PowerControl, a),
        Command::EeCdf(a) => run(ExperimentKind::EeCdf, a),
        Command::Convergence(a) => run(ExperimentKind::Convergence, a),
        Command::OobPsd(a) => run(ExperimentKind::OobPsd, a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
