use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use mrec::config::{DatasetSource, RunConfig};
use mrec::run::{self, RunOptions};
use mrec::{Error, InteractionDataset};

#[derive(Parser)]
#[command(
    name = "mrec",
    version,
    about = "Contrastive-loss recommender training and evaluation"
)]
struct Cli {
    /// Force single-threaded execution and omit wall-clock times from trace.csv.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Override `train.seed` from the config.
    #[arg(long, global = true, value_name = "S")]
    seed: Option<u64>,
    /// Suppress per-epoch progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write manifest, trace, checkpoint and report.
    Train(ConfigArg),
    /// Evaluate a checkpoint on the config's dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Train every cell of the config's sweep grid and rank the results.
    Sweep(ConfigArg),
    /// Print dataset statistics.
    Stats {
        #[arg(long, value_name = "PATH", conflicts_with_all = ["train", "test"])]
        config: Option<PathBuf>,
        #[arg(long, value_name = "PATH", requires = "test")]
        train: Option<PathBuf>,
        #[arg(long, value_name = "PATH", requires = "train")]
        test: Option<PathBuf>,
    },
    /// Generate the clustered synthetic dataset as adjacency text (`--seed`
    /// selects the data seed, default 7).
    Synth {
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 2)]
        clusters: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Directory receiving train.txt and test.txt.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn load_config(path: &Path, cli: &Cli) -> mrec::Result<RunConfig> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let opts = RunOptions {
        deterministic: cli.deterministic,
        verbose: !cli.quiet,
    };
    match &cli.command {
        Command::Train(ConfigArg { config }) => {
            let cfg = load_config(config, cli)?;
            let ds = cfg.dataset.load()?;
            let report = run::execute_train(&cfg, &ds, opts)?;
            println!(
                "{} {} {}: {report}",
                cfg.dataset.name(),
                cfg.loss.kind_name(),
                cfg.output_dir.display()
            );
        }
        Command::Eval { config, checkpoint } => {
            let cfg = load_config(&config.config, cli)?;
            let ds = cfg.dataset.load()?;
            let report = run::execute_eval(&cfg, &ds, checkpoint)?;
            println!("{} {}: {report}", cfg.dataset.name(), checkpoint.display());
        }
        Command::Sweep(ConfigArg { config }) => {
            let cfg = load_config(config, cli)?;
            let ds = cfg.dataset.load()?;
            let (path, report) = run::execute_sweep(&cfg, &ds, opts)?;
            for row in &report.rows {
                match (row.recall, row.ndcg) {
                    (Some(r), Some(n)) => println!(
                        "cell {:>3}  Recall@{k} {r:.4}  NDCG@{k} {n:.4}  {}",
                        row.cell,
                        row.label,
                        k = report.k
                    ),
                    _ => println!(
                        "cell {:>3}  failed: {}  {}",
                        row.cell,
                        row.error.as_deref().unwrap_or("?"),
                        row.label
                    ),
                }
            }
            println!("report written to {}", path.display());
        }
        Command::Stats { config, train, test } => {
            let ds = match (config, train, test) {
                (Some(path), _, _) => load_config(path, cli)?.dataset.load()?,
                (None, Some(train), Some(test)) => DatasetSource::Files {
                    train: train.clone(),
                    test: test.clone(),
                    name: None,
                }
                .load()?,
                _ => {
                    return Err(Error::Config {
                        path: String::new(),
                        msg: "stats needs --config or --train/--test".into(),
                    }
                    .into())
                }
            };
            println!("{}", ds.stats());
        }
        Command::Synth {
            users,
            items,
            clusters,
            noise,
            out,
        } => {
            let ds =
                InteractionDataset::make_synthetic(*users, *items, *clusters, *noise, cli.seed.unwrap_or(7))?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            ds.write_adjacency_text(&out.join("train.txt"), &out.join("test.txt"))?;
            println!("{}", ds.stats());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: configuring thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<Error>().is_some_and(Error::is_usage_error);
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
