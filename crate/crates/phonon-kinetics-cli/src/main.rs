//! `phonon-kinetics <scenario> --config path [--out dir] [--threads n] [--seed s]`
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 numerical
//! abort, 4 ergodicity refusal. Nothing is written unless the run succeeds.
//! `PHONON_KINETICS_OUT` and `PHONON_KINETICS_THREADS` override the config
//! (the flags override both).

mod config;
mod output;
mod scenarios;

use anyhow::{Context, Result};
use clap::Parser;
use config::Scenario;
use output::{sha256_hex, Outputs};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "phonon-kinetics", version, about = "Phonon Boltzmann kinetics scenarios")]
struct Args {
    scenario: Scenario,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(e) => match e.chain().find_map(|c| c.downcast_ref::<phonon_kinetics::Error>()) {
                Some(phonon_kinetics::Error::Ergodicity(_)) => 4,
                Some(k) if k.is_numerical_abort() => 3,
                Some(phonon_kinetics::Error::Io(_)) | None => 1,
                Some(_) => 2,
            },
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Run(e) => e,
        }
    }
}

fn env_override<T: std::str::FromStr>(name: &str) -> Result<Option<T>> {
    match std::env::var(name) {
        Ok(v) => v.parse().map(Some).map_err(|_| anyhow::anyhow!("cannot parse {name}={v}")),
        Err(_) => Ok(None),
    }
}

fn execute(args: Args) -> Result<PathBuf, Failure> {
    let text = std::fs::read(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))
        .map_err(Failure::Config)?;
    let cfg = config::parse(std::str::from_utf8(&text).context("config is not UTF-8").map_err(Failure::Config)?)
        .map_err(Failure::Config)?;
    cfg.validate(args.scenario).map_err(Failure::Config)?;
    let out_dir = match args.out {
        Some(d) => Some(d),
        None => env_override::<PathBuf>("PHONON_KINETICS_OUT").map_err(Failure::Config)?.or(cfg.output_dir.clone()),
    }
    .context("no output directory: pass --out or set output_dir")
    .map_err(Failure::Config)?;
    let threads = match args.threads {
        Some(t) => t,
        None => env_override::<usize>("PHONON_KINETICS_THREADS").map_err(Failure::Config)?.or(cfg.threads).unwrap_or(1),
    };
    if threads == 0 {
        return Err(Failure::Config(anyhow::anyhow!("thread count must be at least 1")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("starting the thread pool")
        .map_err(Failure::Run)?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);

    let mut out = Outputs::default();
    let summary = scenarios::run(args.scenario, &cfg, seed, &mut out).map_err(Failure::Run)?;
    out.json("summary.json", &summary).map_err(Failure::Run)?;
    let manifest = serde_json::json!({
        "tool": "phonon-kinetics",
        "version": env!("CARGO_PKG_VERSION"),
        "library_version": phonon_kinetics::VERSION,
        "scenario": args.scenario.name(),
        "config_sha256": sha256_hex(&text),
        "seed": seed,
        "threads": threads,
    });
    out.commit(&out_dir, manifest).map_err(Failure::Run)?;
    Ok(out_dir)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(args) {
        Ok(dir) => {
            eprintln!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
