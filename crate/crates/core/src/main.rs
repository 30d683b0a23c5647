use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use taco_core::analysis::{specialization_report, ReportThresholds};
use taco_core::experiment::{
    evaluate, run_on_dataset, run_sweep, single_task, Checkpoint, ExperimentConfig,
};
use taco_core::task_suite::MultitaskDataset;
use taco_core::{Error, Result};

/// Multitask dual-encoder training with task-sensitivity-guided gradient
/// mixing.
#[derive(Parser)]
#[command(name = "taco", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set method=naive`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        for a in &self.set {
            cfg.set_assignment(a)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multitask suite and write it as CSV.
    GenerateData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the dataset bundle.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run warmup plus hard-negative episodes and write the run report.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset bundle from `generate-data`; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset's validation queries.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate only this task (for single-task checkpoints).
        #[arg(long)]
        task: Option<usize>,
        /// Recall cutoff.
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Per-task metrics CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Task-entropy histogram and sensitivity samples from a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        entropy_threshold: f64,
        #[arg(long, default_value_t = 1e-8)]
        activation_threshold: f64,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// One run per value of a single parameter, with a collated summary CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of tau, beta, c, n_neg, lr.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config, out } => {
            let cfg = config.resolve()?;
            let dataset = taco_core::experiment::runner::generate_for(&cfg)?;
            dataset.save(&out)?;
            fs::write(out.join("config.resolved.txt"), cfg.to_text())?;
            print_json(&serde_json::json!({
                "output": out.display().to_string(),
                "num_tasks": dataset.num_tasks(),
                "train_sizes": dataset.train_sizes(),
            }))
        }
        Command::Train { config, data, out } => {
            let mut cfg = config.resolve()?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let started = Instant::now();
            let dataset = match &data {
                Some(dir) => MultitaskDataset::load(dir)?,
                None => taco_core::experiment::runner::generate_for(&cfg)?,
            };
            let artifacts = run_on_dataset(&cfg, &dataset, started)?;
            print_json(&artifacts.report.summary_json())
        }
        Command::Evaluate {
            checkpoint,
            data,
            task,
            k,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut dataset = MultitaskDataset::load(&data)?;
            if let Some(t) = task {
                if t >= dataset.num_tasks() {
                    return Err(Error::TaskOutOfRange {
                        task: t,
                        num_tasks: dataset.num_tasks(),
                    });
                }
                dataset = single_task(&dataset, t);
            }
            if dataset.num_tasks() != ckpt.encoder.num_tasks {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint expects {} tasks, dataset has {}",
                    ckpt.encoder.num_tasks,
                    dataset.num_tasks()
                )));
            }
            let metrics = evaluate(&ckpt.params, &dataset, &ckpt.encoder, k)?;
            if let Some(path) = &out {
                write_eval_csv(path, &metrics, task, k)?;
            }
            let n = metrics.len() as f64;
            print_json(&serde_json::json!({
                "episode": ckpt.episode,
                "avg_r_precision": metrics.iter().map(|m| m.r_precision).sum::<f64>() / n,
                "avg_recall_at_k": metrics.iter().map(|m| m.recall_at_k).sum::<f64>() / n,
                "k": k,
            }))
        }
        Command::Analyze {
            checkpoint,
            out,
            entropy_threshold,
            activation_threshold,
            bins,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let state = ckpt.sensitivity.ok_or_else(|| {
                Error::InvalidArgument("checkpoint carries no sensitivity state".into())
            })?;
            let report = specialization_report(
                &state,
                ReportThresholds {
                    entropy: entropy_threshold,
                    activation: activation_threshold,
                    histogram_bins: bins,
                    ..Default::default()
                },
            );
            fs::create_dir_all(&out)?;
            report.write_histogram_csv(&out.join("entropy_histogram.csv"))?;
            report.write_density_csv(&out.join("sensitivity_density.csv"))?;
            let summary = serde_json::to_value(report.summary())?;
            fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            print_json(&summary)
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let mut cfg = config.resolve()?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            let reports = run_sweep(&cfg, &param, &values)?;
            let rows: Vec<_> = values
                .iter()
                .zip(&reports)
                .map(|(v, r)| {
                    let mut s = r.summary_json();
                    s["parameter"] = param.clone().into();
                    s["value"] = v.clone().into();
                    s
                })
                .collect();
            print_json(&serde_json::Value::Array(rows))
        }
    }
}

fn write_eval_csv(
    path: &Path,
    metrics: &[taco_core::experiment::TaskMetrics],
    task: Option<usize>,
    k: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["task", "r_precision", &format!("recall_at_{k}")])?;
    for m in metrics {
        w.write_record([
            task.unwrap_or(m.task).to_string(),
            m.r_precision.to_string(),
            m.recall_at_k.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
