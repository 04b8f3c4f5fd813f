use std::path::PathBuf;
use std::process::ExitCode;

use bellman_lab::experiments::{run_study, run_verify, write_report, ExperimentConfig, ExperimentError, Study};
use clap::{Args, Parser, Subcommand};

/// Policy-evaluation experiments on small MDPs with exact values.
#[derive(Parser)]
#[command(name = "bellman-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on on-policy data and record error curves.
    Onpolicy(RunArgs),
    /// Train on one complete trajectory and report per-transition errors.
    SingleTraj(RunArgs),
    /// Sweep behaviour-policy noise levels.
    Sweep(RunArgs),
    /// Correlate Bellman and value errors across seeds.
    Correlate(RunArgs),
    /// Build every construction and export its certificate.
    Construct(RunArgs),
    /// Run the invariant suite; exits with 2 if any check fails.
    Verify(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed: the config's seed list becomes `seed, seed+1, ...` of the same length.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    quiet: bool,
}

fn load(args: &RunArgs, study: Study) -> Result<ExperimentConfig, ExperimentError> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    config.study = study;
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.seeds = (0..config.seeds.len().max(1) as u64).map(|i| seed + i).collect();
    }
    config.validate()?;
    Ok(config)
}

fn run(command: Command) -> Result<bool, ExperimentError> {
    let (args, study) = match &command {
        Command::Onpolicy(a) => (a, Study::Onpolicy),
        Command::SingleTraj(a) => (a, Study::SingleTrajectory),
        Command::Sweep(a) => (a, Study::OffpolicySweep),
        Command::Correlate(a) => (a, Study::Correlation),
        Command::Construct(a) | Command::Verify(a) => (a, Study::Constructions),
    };
    let config = load(args, study)?;
    let report = match command {
        Command::Verify(_) => run_verify(config.seeds[0])?,
        _ => run_study(&config)?,
    };
    let files = write_report(&report, &config, &config.output_dir)?;
    let failed: Vec<&str> = report
        .certificates
        .iter()
        .filter(|c| c.hard && !c.certificate.passed)
        .map(|c| c.name.as_str())
        .collect();
    if !args.quiet {
        println!(
            "{} rows, {} certificates ({} failed)",
            report.rows.len(),
            report.certificates.len(),
            failed.len()
        );
        for name in &failed {
            println!("FAILED {name}");
        }
        for f in files {
            println!("wrote {}", f.display());
        }
    }
    Ok(failed.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let is_verify = matches!(cli.command, Command::Verify(_));
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) if is_verify => ExitCode::from(2),
        Ok(false) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
