use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::SpecializationSummary;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: usize,
    pub r_precision: f64,
    pub recall_at_k: f64,
}

/// Validation metrics at the end of one phase (`episode` 0 is the warmup).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub tasks: Vec<TaskMetrics>,
    pub avg_r_precision: f64,
    pub avg_recall_at_k: f64,
    /// Mean of the per-task training losses over the phase.
    pub mean_train_loss: f64,
}

impl EpisodeMetrics {
    pub fn new(episode: usize, tasks: Vec<TaskMetrics>, mean_train_loss: f64) -> Self {
        let n = tasks.len().max(1) as f64;
        let avg_r_precision = tasks.iter().map(|t| t.r_precision).sum::<f64>() / n;
        let avg_recall_at_k = tasks.iter().map(|t| t.recall_at_k).sum::<f64>() / n;
        Self {
            episode,
            tasks,
            avg_r_precision,
            avg_recall_at_k,
            mean_train_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub eval_k: usize,
    pub episodes: Vec<EpisodeMetrics>,
    pub warmup_avg_r_precision: f64,
    pub final_avg_r_precision: f64,
    pub final_avg_recall_at_k: f64,
    pub specialization: Option<SpecializationSummary>,
    pub total_steps: u64,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Everything except wall-clock time.
    pub fn same_metrics(&self, other: &RunReport) -> bool {
        self.method == other.method
            && self.seed == other.seed
            && self.config == other.config
            && self.episodes == other.episodes
            && self.warmup_avg_r_precision.to_bits() == other.warmup_avg_r_precision.to_bits()
            && self.final_avg_r_precision.to_bits() == other.final_avg_r_precision.to_bits()
            && self.final_avg_recall_at_k.to_bits() == other.final_avg_recall_at_k.to_bits()
            && self.specialization == other.specialization
            && self.total_steps == other.total_steps
    }

    /// `episode, task, metric, value` rows.
    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["episode", "task", "metric", "value"])?;
        let recall = format!("recall_at_{}", self.eval_k);
        for ep in &self.episodes {
            for t in &ep.tasks {
                w.write_record([ep.episode.to_string(), t.task.to_string(), "r_precision".into(), t.r_precision.to_string()])?;
                w.write_record([ep.episode.to_string(), t.task.to_string(), recall.clone(), t.recall_at_k.to_string()])?;
            }
            w.write_record([ep.episode.to_string(), "avg".into(), "r_precision".into(), ep.avg_r_precision.to_string()])?;
            w.write_record([ep.episode.to_string(), "avg".into(), recall.clone(), ep.avg_recall_at_k.to_string()])?;
            w.write_record([ep.episode.to_string(), "avg".into(), "train_loss".into(), ep.mean_train_loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.method,
            "seed": self.seed,
            "warmup_avg_r_precision": self.warmup_avg_r_precision,
            "final_avg_r_precision": self.final_avg_r_precision,
            "final_avg_recall_at_k": self.final_avg_recall_at_k,
            "eval_k": self.eval_k,
            "fraction_task_specific": self.specialization.as_ref().map(|s| s.fraction_task_specific),
            "fraction_not_activated": self.specialization.as_ref().map(|s| s.fraction_not_activated),
            "total_steps": self.total_steps,
            "wall_clock_secs": self.wall_clock_secs,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&self.summary_json())?)?;
        self.write_metrics_csv(&dir.join("metrics.csv"))
    }
}
