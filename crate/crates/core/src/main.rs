use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use cv_feedback_lab::config::ConfigMap;
use cv_feedback_lab::scenarios::{resolve, run_named};
use cv_feedback_lab::Error;

/// Measurement-feedback experiments on a damped harmonic oscillator.
#[derive(Debug, Parser)]
#[command(name = "cvfl", version)]
struct Cli {
    /// fig2, fig3, cov-expansion, scheme2-ensemble, classical-equivalence,
    /// stability-chart, grid-vs-closure or custom
    scenario: String,
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for trajectory and grid-cell fan-out
    #[arg(long)]
    parallel: Option<usize>,
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::Parameter(_)
            | Error::Invalid(_)
            | Error::DivergentFeedback { .. }
            | Error::NoMeasurement
            | Error::DelayAlignment { .. }
            | Error::StepSize { .. }
    )
}

fn run(cli: &Cli) -> Result<bool, Error> {
    let file = match &cli.config {
        Some(path) => ConfigMap::load(path)?,
        None => ConfigMap::default(),
    };
    let mut flags = ConfigMap::default();
    if let Some(seed) = cli.seed {
        flags.insert("seed", seed)?;
    }
    let cfg = resolve(&cli.scenario, &file, &flags)?;
    let summary = run_named(&cli.scenario, &cfg, &cli.out)?;
    for c in &summary.checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    println!(
        "{} in {:.2} s, artifacts in {}",
        summary.scenario,
        summary.wall_time_s,
        cli.out.display()
    );
    Ok(summary.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.parallel {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("error: cannot build thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
