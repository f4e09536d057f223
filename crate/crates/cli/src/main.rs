//! `geoshift`: run the synthetic geometric-shift pipeline stage by stage.

mod config;
mod error;
mod plot;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geoshift::synthbench::Split;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::stages::{StartFrom, SweepParam};

#[derive(Debug, Parser)]
#[command(name = "geoshift", version, about = "Learnable homography sets for detectors under geometric shift")]
struct Cli {
    /// TOML config, or a stage `manifest.json` to reproduce that run.
    #[arg(long, global = true, env = "GEOSHIFT_CONFIG")]
    config: Option<PathBuf>,

    /// Output root holding every stage directory. Overrides `output_dir` in the config.
    #[arg(long, global = true, env = "GEOSHIFT_OUT")]
    out: Option<PathBuf>,

    /// Override one config value, e.g. `--set training.adapt.lambda=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the source/target benchmark into `<out>/data`.
    SynthGen,
    /// Train the plain detector on labeled source images.
    TrainBase,
    /// Train the multi-homography aggregator on top of the base detector.
    TrainAggregator,
    /// Mean-teacher adaptation to the unlabeled target domain.
    Adapt {
        /// Starting checkpoint; `base` gives the plain mean-teacher baseline.
        #[arg(long, value_enum, default_value = "aggregator")]
        from: StartFrom,
        /// Write into `<out>/adapt-<tag>` instead of `<out>/adapt`.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Fit nested homography sets to the configured shift and save remap images.
    FitApprox,
    /// Score a stage's inference model on a labeled split.
    Eval {
        /// Stage directory: base, aggregator, adapt or adapt-<tag>.
        #[arg(long, default_value = "adapt")]
        stage: String,
        /// source_val, target_val or source_train.
        #[arg(long, default_value = "target_val")]
        split: String,
    },
    /// Run the pipeline for several values of one parameter and tabulate target AP.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Seeds to repeat each value with; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Write SVG charts for an adaptation trace and, optionally, a sweep.
    Plot {
        /// Adaptation directory whose trace to chart.
        #[arg(long, default_value = "adapt")]
        stage: String,
        /// Also chart the summary of this sweep.
        #[arg(long, value_enum)]
        sweep: Option<SweepParam>,
    },
}

fn output_root(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs/default"))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
    let out = output_root(&cli, &cfg);
    match &cli.command {
        Command::SynthGen => {
            stages::synth_gen(&cfg, &out)?;
        }
        Command::TrainBase => {
            let data = stages::load_data(&cfg, &out)?;
            stages::train_base(&cfg, &out, &data)?;
        }
        Command::TrainAggregator => {
            let data = stages::load_data(&cfg, &out)?;
            let base = stages::load_base(&out)?;
            stages::train_aggregator(&cfg, &out, &data, &base, stages::AGGREGATOR_DIR)?;
        }
        Command::Adapt { from, tag } => {
            let data = stages::load_data(&cfg, &out)?;
            let start = match from {
                StartFrom::Base => stages::load_base(&out)?,
                StartFrom::Aggregator => stages::load_aggregator(&out, stages::AGGREGATOR_DIR)?,
            };
            let ap = stages::adapt(&cfg, &out, &data, &start, from.dir(), &stages::adapt_dir(tag.as_deref()))?;
            println!("{ap:.4}");
        }
        Command::FitApprox => stages::fit_approx(&cfg, &out)?,
        Command::Eval { stage, split } => {
            let split: Split = split.parse().map_err(|e: geoshift::Error| CliError::Config {
                path: "--split".into(),
                message: e.to_string(),
            })?;
            let report = stages::eval(&cfg, &out, stage, split)?;
            println!("{:.4}", report.ap50);
        }
        Command::Sweep { param, values, seeds } => {
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.clone() };
            stages::sweep(&cfg, &out, *param, values, &seeds)?;
        }
        Command::Plot { stage, sweep } => plot_cmd(&out, stage, *sweep)?,
    }
    Ok(())
}

fn plot_cmd(out: &Path, stage: &str, sweep: Option<SweepParam>) -> Result<()> {
    let dir = out.join("plots");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let trace = stages::read_adapt_trace(&out.join(stage).join(stages::TRACE_FILE))?;
    let stage_dir = dir.join(stage);
    std::fs::create_dir_all(&stage_dir).map_err(|e| CliError::io(&stage_dir, e))?;
    for f in plot::plot_trace(&trace, &stage_dir)? {
        eprintln!("[geoshift] plot: {}", stage_dir.join(f).display());
    }
    if let Some(p) = sweep {
        let summary = stages::read_summary(&out.join(stages::sweep_dir(p)).join(stages::SUMMARY_FILE))?;
        let path = dir.join(format!("ap_vs_{}.svg", p.name()));
        plot::plot_sweep(&summary, &path)?;
        eprintln!("[geoshift] plot: {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
