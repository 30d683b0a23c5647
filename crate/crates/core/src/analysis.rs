//! Retrieval metrics and per-parameter task-specialization diagnostics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taco::{lower_median, task_distribution, SensitivityState};

/// Fraction of the `R = |gold|` gold ids found in the top `R` of `ranked`.
pub fn r_precision(ranked: &[usize], gold: &[usize]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Empty("gold set"));
    }
    let r = gold.len();
    if ranked.len() < r {
        return Err(Error::InvalidArgument(format!(
            "ranked list of {} is shorter than R = {r}",
            ranked.len()
        )));
    }
    let hits = ranked[..r].iter().filter(|id| gold.contains(id)).count();
    Ok(hits as f64 / r as f64)
}

/// Fraction of gold ids found in the top `k` of `ranked`.
pub fn recall_at_k(ranked: &[usize], gold: &[usize], k: usize) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::Empty("gold set"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let top = &ranked[..k.min(ranked.len())];
    let hits = gold.iter().filter(|g| top.contains(g)).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn task_entropy(q: &[f64]) -> Result<f64> {
    if q.is_empty() || q.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::InvalidArgument("not a probability vector".into()));
    }
    let total: f64 = q.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    Ok(-q
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportThresholds {
    pub entropy: f64,
    pub activation: f64,
    pub histogram_bins: usize,
    /// Density samples above this multiple of the task median are dropped.
    pub outlier_factor: f64,
}

impl Default for ReportThresholds {
    fn default() -> Self {
        Self {
            entropy: 0.3,
            activation: 1e-8,
            histogram_bins: 20,
            outlier_factor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecializationReport {
    pub num_params: usize,
    pub num_tasks: usize,
    pub tau: f64,
    pub thresholds: ReportThresholds,
    /// Task entropy of every parameter, `NaN` for not-activated parameters.
    pub entropies: Vec<f64>,
    pub task_specific: usize,
    pub not_activated: usize,
    pub fraction_task_specific: f64,
    pub fraction_not_activated: f64,
    /// Entropy histogram over the parameters in neither special bin.
    pub histogram: Vec<HistogramBin>,
    /// Per task, the amortized sensitivities kept for density plots.
    pub sensitivity_samples: Vec<Vec<f64>>,
}

/// Bins every parameter as Not Activated (all sensitivities below
/// `activation`), Task Specific (entropy below `entropy`), or into the
/// entropy histogram spanning `[entropy, ln K]`.
pub fn specialization_report(
    state: &SensitivityState,
    thresholds: ReportThresholds,
) -> SpecializationReport {
    let sigma = &state.sigma_bar;
    let (d, k) = (sigma.dim(), sigma.num_tasks());
    let tau = state.tau();
    let bins = thresholds.histogram_bins.max(1);
    let low = thresholds.entropy;
    let high = (k as f64).ln().max(low);
    let width = (high - low) / bins as f64;
    let mut histogram: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            bin_low: low + b as f64 * width,
            bin_high: if b + 1 == bins { high } else { low + (b + 1) as f64 * width },
            count: 0,
        })
        .collect();

    let mut entropies = Vec::with_capacity(d);
    let (mut task_specific, mut not_activated) = (0, 0);
    for i in 0..d {
        let row = sigma.row(i);
        if row.iter().all(|&s| s < thresholds.activation) {
            not_activated += 1;
            entropies.push(f64::NAN);
            continue;
        }
        let q = task_distribution(row, tau);
        let h = task_entropy(&q).unwrap_or(f64::NAN);
        entropies.push(h);
        if h < thresholds.entropy {
            task_specific += 1;
        } else {
            let b = if width > 0.0 {
                (((h - low) / width) as usize).min(bins - 1)
            } else {
                0
            };
            histogram[b].count += 1;
        }
    }

    let sensitivity_samples = (0..k)
        .map(|c| {
            let col = sigma.column(c);
            let cutoff = thresholds.outlier_factor * lower_median(&col);
            col.into_iter().filter(|&v| v <= cutoff).collect()
        })
        .collect();

    SpecializationReport {
        num_params: d,
        num_tasks: k,
        tau,
        thresholds,
        entropies,
        task_specific,
        not_activated,
        fraction_task_specific: task_specific as f64 / d as f64,
        fraction_not_activated: not_activated as f64 / d as f64,
        histogram,
        sensitivity_samples,
    }
}

impl SpecializationReport {
    pub fn histogram_total(&self) -> usize {
        self.histogram.iter().map(|b| b.count).sum()
    }

    /// `bin_low, bin_high, count`, with the two special bins first.
    pub fn write_histogram_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin", "bin_low", "bin_high", "count"])?;
        w.write_record([
            "not_activated".to_string(),
            String::new(),
            String::new(),
            self.not_activated.to_string(),
        ])?;
        w.write_record([
            "task_specific".to_string(),
            "0".to_string(),
            self.thresholds.entropy.to_string(),
            self.task_specific.to_string(),
        ])?;
        for b in &self.histogram {
            w.write_record([
                "entropy".to_string(),
                b.bin_low.to_string(),
                b.bin_high.to_string(),
                b.count.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One `task, sensitivity` row per retained sample.
    pub fn write_density_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["task", "sensitivity"])?;
        for (k, samples) in self.sensitivity_samples.iter().enumerate() {
            for v in samples {
                w.write_record([k.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> SpecializationSummary {
        SpecializationSummary {
            fraction_task_specific: self.fraction_task_specific,
            fraction_not_activated: self.fraction_not_activated,
            num_params: self.num_params,
            tau: self.tau,
            entropy_threshold: self.thresholds.entropy,
            activation_threshold: self.thresholds.activation,
            density_outlier_rule: format!(
                "dropped samples above {} x task median",
                self.thresholds.outlier_factor
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecializationSummary {
    pub fraction_task_specific: f64,
    pub fraction_not_activated: f64,
    pub num_params: usize,
    pub tau: f64,
    pub entropy_threshold: f64,
    pub activation_threshold: f64,
    pub density_outlier_rule: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taco::{SensitivitySettings, TaskMatrix, TemperatureSchedule};

    #[test]
    fn r_precision_examples() {
        assert_eq!(r_precision(&[1, 9, 2], &[1, 2]).unwrap(), 0.5);
        assert_eq!(r_precision(&[2, 1, 5], &[1, 2]).unwrap(), 1.0);
        assert_eq!(r_precision(&[7, 8, 1], &[1, 2]).unwrap(), 0.0);
        assert!(r_precision(&[1], &[]).is_err());
        assert!(r_precision(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[4, 5, 6], &[6, 7], 3).unwrap(), 0.5);
        assert_eq!(recall_at_k(&[4, 5, 6], &[5, 6, 4], 10).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[4, 5, 6], &[5], 1).unwrap(), 0.0);
        assert!(recall_at_k(&[1], &[], 1).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((task_entropy(&[0.125; 8]).unwrap() - 8f64.ln()).abs() < 1e-12);
        assert_eq!(task_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let mut q = vec![0.05 / 7.0; 8];
        q[0] = 0.95;
        let h = task_entropy(&q).unwrap();
        assert!((h - 0.296).abs() < 1e-3 && h < 0.3, "{h}");
        assert!(task_entropy(&[0.5, 0.6]).is_err());
        assert!(task_entropy(&[-0.1, 1.1]).is_err());
    }

    fn state_with(columns: &[Vec<f64>], tau: f64) -> SensitivityState {
        let sigma = TaskMatrix::from_columns(columns).unwrap();
        let mut s = SensitivityState::new(
            sigma.dim(),
            sigma.num_tasks(),
            SensitivitySettings {
                schedule: TemperatureSchedule::Fixed { tau },
                ..Default::default()
            },
            10,
        )
        .unwrap();
        s.sigma_bar = sigma;
        s
    }

    #[test]
    fn all_zero_sensitivity_is_not_activated() {
        let s = state_with(&[vec![0.0; 5], vec![0.0; 5]], 2.0);
        let r = specialization_report(&s, ReportThresholds::default());
        assert_eq!(r.fraction_not_activated, 1.0);
        assert_eq!(r.fraction_task_specific, 0.0);
    }

    #[test]
    fn dominant_rows_are_task_specific() {
        let s = state_with(&[vec![5.0, 0.0, 0.0], vec![0.0, 5.0, 0.0], vec![0.0, 0.0, 5.0]], 0.1);
        let r = specialization_report(&s, ReportThresholds::default());
        assert_eq!(r.fraction_task_specific, 1.0);
    }

    #[test]
    fn bins_partition_parameters() {
        let s = state_with(
            &[vec![0.0, 1.0, 2.0, 12.0, 0.3], vec![0.0, 1.0, 0.1, 0.0, 0.2]],
            1.0,
        );
        let r = specialization_report(&s, ReportThresholds::default());
        assert_eq!(r.task_specific + r.not_activated + r.histogram_total(), 5);
        assert_eq!(r.not_activated, 1);
        // Column 0 median is 1.0, so 12.0 is dropped from the density export.
        assert_eq!(r.sensitivity_samples[0], vec![0.0, 1.0, 2.0, 0.3]);
    }
}
