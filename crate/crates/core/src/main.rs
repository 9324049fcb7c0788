use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use relu_sparsity::harness::report::report;
use relu_sparsity::harness::sweep::{sweep, SweepAxis};
use relu_sparsity::harness::{run, synthetic_text, ExperimentConfig, HarnessError, RunOptions};
use relu_sparsity::interventions::{capacity_rerun, load_round1, run_mask_experiment};

#[derive(Parser)]
#[command(name = "relu-sparsity", version, about = "Train small ReLU transformers and measure MLP activation sparsity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its artifacts.
    Train {
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed steps (a checkpoint is written).
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Run the config once per value of one axis.
    Sweep {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Paired unmasked / activity-masked / random-masked runs.
    MaskExperiment {
        config: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Retrain with per-layer widths taken from a finished run's usage.
    CapacityRerun {
        config: PathBuf,
        round1: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Tables and figures for an artifact directory.
    Report { artifacts: PathBuf },
    /// Print the default config as TOML.
    DefaultConfig,
    /// Write the built-in synthetic text corpus.
    SynthCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4_000_000)]
        bytes: usize,
        out: PathBuf,
    },
}

fn load(config: &Path, output: Option<PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    let mut c = ExperimentConfig::load(config)?;
    if let Some(o) = output {
        c.output_dir = o;
    }
    Ok(c)
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train {
            config,
            output,
            resume,
            stop_after,
        } => {
            let c = load(&config, output)?;
            let out = run(&c, &RunOptions { resume, stop_after })?;
            match &out.eval {
                Some(e) => info!("finished: validation loss {:.4}, accuracy {:.4}", e.loss, e.accuracy),
                None => info!("stopped at step {}", out.step),
            }
            if out.complete() {
                report(&c.output_dir)?;
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            output,
        } => {
            let c = load(&config, None)?;
            let root = output.unwrap_or_else(|| c.output_dir.clone());
            let result = sweep(&c, axis, &values, &root)?;
            for arm in &result.arms {
                info!("{}={}: total batch use {:?}", axis.name(), arm.value, arm.total_batch_use);
            }
        }
        Command::MaskExperiment { config, output } => {
            let c = load(&config, None)?;
            let root = output.unwrap_or_else(|| c.output_dir.clone());
            let r = run_mask_experiment(&c, Some(&root))?;
            info!(
                "mask at step {}: activity {:?}, random {:?} relative validation loss",
                r.mask_step, r.activity_relative, r.random_relative
            );
        }
        Command::CapacityRerun { config, round1, output } => {
            let c = load(&config, None)?;
            let (_, fractions, eval) = load_round1(&round1)?;
            let root = output.unwrap_or_else(|| c.output_dir.join("round2"));
            let r = capacity_rerun(&c, &fractions, eval, Some(&root))?;
            info!("round-2 widths {:?}, round-2 worse: {:?}", r.plan.d_hidden, r.round2_worse);
        }
        Command::Report { artifacts } => {
            let out = report(&artifacts)?;
            println!("{}", out.display());
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
        Command::SynthCorpus { seed, bytes, out } => std::fs::write(out, synthetic_text(seed, bytes))?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
