//! One-parameter sweeps with a shared seed.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::report::RunReport;
use crate::experiment::runner::run_experiment;

pub const SWEEP_PARAMETERS: &[&str] = &["tau", "beta", "c", "n_neg", "lr"];

/// Config key behind a sweep parameter name.
fn config_key(parameter: &str) -> Result<&'static str> {
    Ok(match parameter {
        "tau" => "tau",
        "beta" => "beta",
        "c" => "mixing_temperature",
        "n_neg" => "n_neg",
        "lr" => "lr",
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown sweep parameter `{other}` (expected one of {})",
                SWEEP_PARAMETERS.join(", ")
            )))
        }
    })
}

/// The per-value configs, each writing under `<output_dir>/<parameter>_<value>`.
pub fn sweep_configs(
    base: &ExperimentConfig,
    parameter: &str,
    values: &[String],
) -> Result<Vec<ExperimentConfig>> {
    let key = config_key(parameter)?;
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(key, v)?;
            cfg.output_dir = base
                .output_dir
                .as_ref()
                .map(|d| d.join(format!("{parameter}_{v}")));
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

/// Runs every value, in parallel, returning reports in input order.
pub fn run_sweep(
    base: &ExperimentConfig,
    parameter: &str,
    values: &[String],
) -> Result<Vec<RunReport>> {
    let configs = sweep_configs(base, parameter, values)?;
    let reports: Vec<RunReport> = configs.par_iter().map(run_experiment).collect::<Result<_>>()?;
    if let Some(dir) = &base.output_dir {
        write_sweep_csv(&dir.join("sweep_summary.csv"), parameter, values, &reports)?;
    }
    Ok(reports)
}

pub fn write_sweep_csv(
    path: &Path,
    parameter: &str,
    values: &[String],
    reports: &[RunReport],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "parameter",
        "value",
        "method",
        "seed",
        "warmup_avg_r_precision",
        "final_avg_r_precision",
        "final_avg_recall_at_k",
        "fraction_task_specific",
        "fraction_not_activated",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (v, r) in values.iter().zip(reports) {
        let spec = r.specialization.as_ref();
        w.write_record([
            parameter.to_string(),
            v.clone(),
            r.method.clone(),
            r.seed.to_string(),
            r.warmup_avg_r_precision.to_string(),
            r.final_avg_r_precision.to_string(),
            r.final_avg_recall_at_k.to_string(),
            opt(spec.map(|s| s.fraction_task_specific)),
            opt(spec.map(|s| s.fraction_not_activated)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn paper_grids_expand() {
        let base = ExperimentConfig::default();
        let taus = sweep_configs(&base, "tau", &strings(&["0.1", "1", "2", "5", "10", "100"])).unwrap();
        assert_eq!(taus.len(), 6);
        assert_eq!(taus[0].tau, 0.1);
        let betas = sweep_configs(&base, "beta", &strings(&["0", "0.6", "0.7", "0.8", "0.9", "0.999"])).unwrap();
        assert_eq!(betas.len(), 6);
        assert_eq!(betas[5].beta, 0.999);
        let cs = sweep_configs(&base, "c", &strings(&["1", "8"])).unwrap();
        assert_eq!(cs[1].mixing_temperature, 8.0);
    }

    #[test]
    fn rejects_bad_sweeps() {
        let base = ExperimentConfig::default();
        assert!(sweep_configs(&base, "tau", &[]).is_err());
        assert!(sweep_configs(&base, "gamma", &strings(&["1"])).is_err());
        assert!(sweep_configs(&base, "n_neg", &strings(&["0"])).is_err());
    }
}
