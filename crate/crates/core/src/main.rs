use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use svlab::harness::{self, Command, Config};

#[derive(Parser)]
#[command(name = "svlab", about = "State-vector experiments on a toy in-context learner")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from scratch.
    Train(Common),
    /// Evaluate methods on the test split.
    Eval(Common),
    /// Accuracy against the number of patched layers.
    SweepLayers(Common),
    /// Momentum against Adagrad, RMSprop and Adam.
    Ablate(Common),
    /// Average against divide-and-conquer aggregation.
    Aggregate(Common),
    /// Accuracy spread under resampled demonstrations and dummy queries.
    Robustness(Common),
    /// Certify the dual-form attention identity on random instances.
    Dualform(Common),
    /// Two-component PCA of state vectors.
    Pca(Common),
}

#[derive(clap::Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn resolve(common: &Common) -> svlab::Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = &common.config {
        cfg.load_file(path)?;
    }
    cfg.apply_flags(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        cfg.set("out", &out.to_string_lossy())?;
    }
    Ok(cfg)
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SVLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| format!("SVLAB_THREADS must be a positive integer, got {v:?}"))?;
    if n == 0 {
        return Err("SVLAB_THREADS must be at least 1".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    let (command, common) = match &cli.command {
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::SweepLayers(c) => (Command::SweepLayers, c),
        Cmd::Ablate(c) => (Command::Ablate, c),
        Cmd::Aggregate(c) => (Command::Aggregate, c),
        Cmd::Robustness(c) => (Command::Robustness, c),
        Cmd::Dualform(c) => (Command::Dualform, c),
        Cmd::Pca(c) => (Command::Pca, c),
    };
    let result = resolve(common).and_then(|cfg| harness::run(command, &cfg));
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
