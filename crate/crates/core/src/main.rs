use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shapecomp::cli::{exit_code, prepare_output, run, Command};
use shapecomp::config::RunConfig;
use shapecomp::{Error, Result};

#[derive(Parser)]
#[command(name = "shapecomp", version, about = "Shape completion from partial voxel observations")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// Key = value config file; relative paths inside resolve against it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Override a config key, e.g. --set prior_epochs=10. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate shapes, depth views and observations.
    Synth {
        #[arg(long)]
        fuse_k: Option<usize>,
    },
    /// Train the shape prior on complete shapes.
    TrainPrior,
    /// Train the inference encoder on observations against the frozen prior.
    TrainAml,
    /// Train the fully supervised baseline.
    TrainSup,
    /// Complete a split with a trained encoder.
    Complete,
    /// Run a baseline: ml, icp, mean, naive or dvae.
    Baseline {
        #[arg(long)]
        method: Option<Method>,
    },
    /// Score prediction directories against ground truth.
    Eval,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum Method {
    Ml,
    Icp,
    Mean,
    Naive,
    Dvae,
}

fn configure(args: &Args) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &args.sets {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    match args.command {
        Cmd::Synth { fuse_k: Some(k) } => cfg.fuse_k = k,
        Cmd::Baseline { method: Some(m) } => {
            let name = clap::ValueEnum::to_possible_value(&m).expect("no skipped variants");
            cfg.set("method", name.get_name())?;
        }
        _ => {}
    }
    Ok(cfg)
}

fn main_inner(args: Args) -> Result<()> {
    let cfg = configure(&args)?;
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cmd = match args.command {
        Cmd::Synth { .. } => Command::Synth,
        Cmd::TrainPrior => Command::TrainPrior,
        Cmd::TrainAml => Command::TrainAml,
        Cmd::TrainSup => Command::TrainSup,
        Cmd::Complete => Command::Complete,
        Cmd::Baseline { .. } => Command::Baseline,
        Cmd::Eval => Command::Eval,
    };
    prepare_output(&args.out, args.force)?;
    run(cmd, &cfg, &args.out)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match main_inner(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
