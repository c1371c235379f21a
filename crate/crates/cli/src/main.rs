use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use qap_cli::{run_config, CliError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "qap", version, about = "Quantum action principle laboratory")]
struct Cli {
    #[command(subcommand)]
    scenario: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Coefficient flow, λ and the optional grid cross-check.
    Evolve(Args),
    /// Residual of the discrete action operator against N.
    Correspondence(Args),
    /// Broken-line and endpoint probabilities.
    Probability(Args),
    /// Stationary λ₀ for fixed endpoints.
    Stationary(Args),
    /// λ₀ against the classical action for decreasing ħ.
    ClassicalLimit(Args),
    /// Endpoint prediction from (x₀, p₀).
    Trajectory(Args),
    /// Sensitivity of λ to a probe field.
    Probe(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

impl Command {
    fn split(self) -> (&'static str, Args) {
        match self {
            Command::Evolve(a) => ("evolve", a),
            Command::Correspondence(a) => ("correspondence", a),
            Command::Probability(a) => ("probability", a),
            Command::Stationary(a) => ("stationary", a),
            Command::ClassicalLimit(a) => ("classical-limit", a),
            Command::Trajectory(a) => ("trajectory", a),
            Command::Probe(a) => ("probe", a),
        }
    }
}

fn load(name: &str, args: &Args) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let mut config = RunConfig::from_json(&text)?;
    if config.scenario.name() != name {
        return Err(CliError::ScenarioMismatch {
            expected: name.to_string(),
            found: config.scenario.name().to_string(),
        });
    }
    if let Some(out) = &args.out {
        config.output_dir = Some(out.clone());
    }
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let (name, args) = Cli::parse().scenario.split();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("qap: cannot configure {n} threads: {e}");
            return ExitCode::from(qap_cli::run::EXIT_INVALID as u8);
        }
    }
    let started = Instant::now();
    let outcome = load(name, &args).and_then(|c| run_config(&c));
    match outcome {
        Ok(out) => {
            for w in &out.summary.warnings {
                eprintln!("qap: warning: {w}");
            }
            eprintln!(
                "qap: {name} finished in {:.2?}, summary at {}",
                started.elapsed(),
                out.summary_path.display()
            );
            ExitCode::from(out.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("qap: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
