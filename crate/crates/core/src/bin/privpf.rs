use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use privpf::pipeline::{Pipeline, RunConfig, Stage};

/// Privacy-preserving model-free power flow: staged simulation runs.
#[derive(Debug, Parser)]
#[command(name = "privpf", version)]
struct Cli {
    /// TOML run configuration; keys left out take preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario used when no config file is given.
    #[arg(long, default_value = "desk-15min")]
    preset: String,
    /// gen-network, gen-profiles, solve-pf, collect, train, estimate,
    /// drift-check, update, report or all.
    #[arg(long, default_value = "all")]
    stage: String,
    /// Derive every stage seed from this value.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run meter sessions concurrently.
    #[arg(long)]
    parallel: bool,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

fn run(cli: Cli) -> Result<(), privpf::pipeline::PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&cli.preset)?,
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    if cli.parallel {
        cfg.collect.parallel = true;
    }
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let stage: Stage = cli.stage.parse()?;
    let pipeline = Pipeline::new(cfg)?;
    pipeline.run(stage)?;
    println!("{stage} done, artifacts in {}", pipeline.dir().display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
