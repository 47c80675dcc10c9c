use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use safempc::env::{closed_loop_radius, EnvSpec};
use safempc::experiments::{
    emit_results, run_experiment, ExperimentConfig, ExperimentKind, ASSUMPTION_CHECK_SAMPLES,
    ASSUMPTION_CHECK_SECONDS,
};
use safempc::{Error, Result};

/// Exit status when a certified controller violated a constraint.
const EXIT_VIOLATION: u8 = 2;

#[derive(Parser)]
#[command(name = "safempc", version, about = "Safe learning-based MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Static exploration of the pendulum dynamics.
    ExploreStatic(RunArgs),
    /// Closed-loop exploration of the pendulum dynamics.
    ExploreDynamic(RunArgs),
    /// Episodic safe reinforcement learning on the cart-pole.
    Rl(RunArgs),
    /// Chance-constrained MPC baseline on the cart-pole.
    Baseline(RunArgs),
    /// Builds the environment and checks its safety controller and safe set.
    CertifyEnv(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML file whose keys override the preset of the command.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the CSV, JSON and TOML artifacts.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Long-run iteration counts and restarts.
    #[arg(long)]
    full: bool,
}

fn load_config(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::preset(kind);
    if args.full {
        cfg.apply_full_scale();
    }
    if let Some(path) = &args.config {
        cfg = cfg.overlay_toml(&std::fs::read_to_string(path)?)?;
    }
    if cfg.kind != kind {
        return Err(Error::Config(format!(
            "config file sets kind {} but the command runs {}",
            cfg.kind.name(),
            kind.name()
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<ExitCode> {
    let cfg = load_config(kind, args)?;
    info!("running {} with config hash {}", kind.name(), cfg.hash()?);
    let record = run_experiment(&cfg)?;
    let files = emit_results(&record, &args.out)?;
    let summary = record.summary();
    println!("{}", serde_json::to_string_pretty(&summary)?);
    info!("results written to {}", files.summary.display());
    if kind.is_safe_mpc() && summary.safety_violations > 0 {
        eprintln!("error: {} constraint violations under SafeMPC", summary.safety_violations);
        return Ok(ExitCode::from(EXIT_VIOLATION));
    }
    Ok(ExitCode::SUCCESS)
}

fn certify(args: &RunArgs) -> Result<ExitCode> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        cfg = cfg.overlay_toml(&std::fs::read_to_string(path)?)?;
    }
    let seed = args.seed.unwrap_or(cfg.seed);
    let spec = EnvSpec::from_config(&cfg.env)?;
    let report = spec.check_assumption2(ASSUMPTION_CHECK_SAMPLES, ASSUMPTION_CHECK_SECONDS, seed)?;
    let radius = closed_loop_radius(&spec.true_a, &spec.true_b, &spec.lqr.gain);
    let out = serde_json::json!({
        "system": format!("{:?}", cfg.env.system),
        "riccati_residual": spec.lqr.residual,
        "closed_loop_spectral_radius": radius,
        "safe_level": spec.safe_set.level,
        "safe_set_rows": spec.constraints.safe().num_rows(),
        "lipschitz": {
            "g": spec.lipschitz.g,
            "grad_mu": spec.lipschitz.grad_mu,
            "sigma": spec.lipschitz.sigma,
        },
        "assumption2": report,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    if report.passed() && radius < 1.0 {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: safety controller certification failed");
        Ok(ExitCode::FAILURE)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::ExploreStatic(a) => run(ExperimentKind::StaticExploration, a),
        Command::ExploreDynamic(a) => run(ExperimentKind::DynamicExploration, a),
        Command::Rl(a) => run(ExperimentKind::EpisodicRl, a),
        Command::Baseline(a) => run(ExperimentKind::CautiousBaseline, a),
        Command::CertifyEnv(a) => certify(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
