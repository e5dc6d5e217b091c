use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use composer_cli::commands::{self, Run};
use composer_cli::{exit_code, ExperimentConfig};
use composer_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "composer",
    version,
    about = "Train and analyse Composer models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset splits as IDX files with provenance.
    GenData(Common),
    /// Train a model and write its checkpoint and step log.
    Train(Common),
    /// Sweep preference values on one checkpoint, plus the mixing baseline.
    Sweep(Common),
    /// Per-class module probabilities for every sweep point.
    Heatmap(Common),
    /// Batch versus per-example entropy cost, mutual information per seed.
    AblateEntropy(Common),
    /// Accuracy, parameter use and mutual information on the test split.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Checkpoint to read (train: initial weights).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run seed, overriding `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for training and evaluation.
    #[arg(long)]
    workers: Option<usize>,
}

fn setup(c: &Common) -> Result<Run> {
    if let Some(n) = c.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Internal(format!("starting worker pool: {e}")))?;
    }
    let mut config = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        config.set_seed(seed);
        config.validate()?;
    }
    Run::new(config, c.out.clone())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let out = commands::cmd_gen_data(&setup(&c)?)?;
            for f in &out.provenance.outputs {
                println!("{}  {}", f.sha256, out.dir.join(&f.file).display());
            }
        }
        Command::Train(c) => {
            let run = setup(&c)?;
            let out = commands::cmd_train(&run, c.checkpoint.as_deref())?;
            println!("trained {} steps", out.reports.len());
            println!("{}  {}", out.checkpoint_sha256, out.checkpoint.display());
        }
        Command::Sweep(c) => {
            let run = setup(&c)?;
            let out = commands::cmd_sweep(&run, &run.checkpoint(c.checkpoint.as_deref()))?;
            println!("{} rows  {}", out.rows_written, out.csv.display());
        }
        Command::Heatmap(c) => {
            let run = setup(&c)?;
            let out = commands::cmd_heatmap(&run, &run.checkpoint(c.checkpoint.as_deref()))?;
            println!("{} heatmaps  {}", out.files.len(), out.dir.display());
        }
        Command::AblateEntropy(c) => {
            let run = setup(&c)?;
            let report = commands::cmd_ablate_entropy(&run)?;
            for r in &report.runs {
                println!(
                    "seed {} {:?}: MI {:.4} nats",
                    r.seed, r.kind, r.mutual_information
                );
            }
            println!("median difference {:.4} nats", report.median_difference);
        }
        Command::Eval(c) => {
            let run = setup(&c)?;
            let entries = commands::cmd_eval(&run, &run.checkpoint(c.checkpoint.as_deref()))?;
            for e in &entries {
                println!(
                    "gamma_g {:?} gamma_e {:?} {}: accuracy {:.4}, mean parameter use {:.1}, MI {:.4}",
                    e.gamma_g,
                    e.gamma_e,
                    e.point.mode.as_str(),
                    e.point.accuracy,
                    e.point.mean_param_use,
                    e.mutual_information
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("composer: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
