//! Task-sensitivity-guided adaptive gradient mixing.
//!
//! Every step, each parameter `i` gets a first-order estimate of how much
//! task `k`'s loss would change if the parameter were zeroed,
//! `|dJ_k/dθ_i · θ_i|`. The estimates are divided by their per-task median,
//! smoothed with an exponential moving average, and turned into a per
//! parameter distribution over tasks by a temperature softmax. The update for
//! parameter `i` is the task gradients mixed with that distribution, so each
//! parameter is pushed hardest by the tasks it already matters most to.

use serde::{Deserialize, Serialize};

use crate::dual_encoder::{nce_loss_and_gradient, EncoderConfig, ParamVector, TrainBatch};
use crate::error::{check_len, Error, Result};
use crate::optim::BaseOptimizer;

/// Column `k` holds the gradient of task `k`'s loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix {
    columns: Vec<Vec<f64>>,
}

impl GradientMatrix {
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let d = columns.first().map(Vec::len).ok_or(Error::Empty("gradient matrix"))?;
        for c in &columns {
            check_len(d, c.len(), "gradient column")?;
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("gradient matrix"));
            }
        }
        Ok(Self { columns })
    }

    pub fn num_tasks(&self) -> usize {
        self.columns.len()
    }

    pub fn dim(&self) -> usize {
        self.columns[0].len()
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.columns[k]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }
}

/// Row-major `d x K` matrix of non-negative per-parameter, per-task scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMatrix {
    dim: usize,
    num_tasks: usize,
    data: Vec<f64>,
}

impl TaskMatrix {
    pub fn zeros(dim: usize, num_tasks: usize) -> Self {
        Self {
            dim,
            num_tasks,
            data: vec![0.0; dim * num_tasks],
        }
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let dim = columns.first().map(Vec::len).ok_or(Error::Empty("task matrix"))?;
        let num_tasks = columns.len();
        let mut m = Self::zeros(dim, num_tasks);
        for (k, c) in columns.iter().enumerate() {
            check_len(dim, c.len(), "task matrix column")?;
            for (i, v) in c.iter().enumerate() {
                m.data[i * num_tasks + k] = *v;
            }
        }
        Ok(m)
    }

    pub fn from_row_major(dim: usize, num_tasks: usize, data: Vec<f64>) -> Result<Self> {
        check_len(dim * num_tasks, data.len(), "task matrix data")?;
        Ok(Self {
            dim,
            num_tasks,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.num_tasks + k]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.num_tasks..(i + 1) * self.num_tasks]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, k)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Elementwise `|g_i · θ_i|`.
pub fn raw_sensitivity(grad_col: &[f64], params: &[f64]) -> Result<Vec<f64>> {
    check_len(params.len(), grad_col.len(), "sensitivity inputs")?;
    Ok(grad_col
        .iter()
        .zip(params)
        .map(|(g, t)| (g * t).abs())
        .collect())
}

/// Lower median (element `(n-1)/2` of the sorted values).
pub fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    let mid = (v.len() - 1) / 2;
    *v.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Divides each column by `max(median, median_epsilon)`.
pub fn normalize_by_median(raw: &TaskMatrix, median_epsilon: f64) -> TaskMatrix {
    let k = raw.num_tasks;
    let scales: Vec<f64> = (0..k)
        .map(|c| lower_median(&raw.column(c)).max(median_epsilon))
        .collect();
    let data = raw
        .data
        .iter()
        .enumerate()
        .map(|(idx, v)| v / scales[idx % k])
        .collect();
    TaskMatrix {
        dim: raw.dim,
        num_tasks: k,
        data,
    }
}

/// Softmax temperature over the adaptive phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemperatureSchedule {
    Fixed { tau: f64 },
    /// `tau_t = start · (end / start)^(t / total_steps)`.
    ExponentialDecay { start: f64, end: f64 },
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TemperatureSchedule::Fixed { tau } if tau != 0.0 && tau.is_finite() => Ok(()),
            TemperatureSchedule::ExponentialDecay { start, end }
                if start.is_finite()
                    && end.is_finite()
                    && start != 0.0
                    && end != 0.0
                    && start.signum() == end.signum() =>
            {
                Ok(())
            }
            other => Err(Error::InvalidConfig(format!("invalid temperature schedule {other:?}"))),
        }
    }

    pub fn at(&self, step: u64, total_steps: u64) -> f64 {
        match *self {
            TemperatureSchedule::Fixed { tau } => tau,
            TemperatureSchedule::ExponentialDecay { start, end } => {
                let frac = if total_steps == 0 {
                    1.0
                } else {
                    (step as f64 / total_steps as f64).min(1.0)
                };
                start * (end / start).powf(frac)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySettings {
    pub beta: f64,
    pub schedule: TemperatureSchedule,
    pub burn_in_fraction: f64,
    pub median_epsilon: f64,
}

impl Default for SensitivitySettings {
    fn default() -> Self {
        Self {
            beta: 0.999,
            schedule: TemperatureSchedule::Fixed { tau: 2.0 },
            burn_in_fraction: 0.1,
            median_epsilon: 1e-12,
        }
    }
}

impl SensitivitySettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig("beta must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::InvalidConfig("burn_in_fraction must lie in [0, 1)".into()));
        }
        if !(self.median_epsilon > 0.0) {
            return Err(Error::InvalidConfig("median_epsilon must be > 0".into()));
        }
        self.schedule.validate()
    }
}

/// Amortized normalized sensitivities plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityState {
    pub sigma_bar: TaskMatrix,
    pub settings: SensitivitySettings,
    pub step: u64,
    pub total_steps: u64,
}

impl SensitivityState {
    pub fn new(
        dim: usize,
        num_tasks: usize,
        settings: SensitivitySettings,
        total_steps: u64,
    ) -> Result<Self> {
        settings.validate()?;
        if dim == 0 || num_tasks == 0 {
            return Err(Error::InvalidConfig("sensitivity state needs d, K >= 1".into()));
        }
        Ok(Self {
            sigma_bar: TaskMatrix::zeros(dim, num_tasks),
            settings,
            step: 0,
            total_steps,
        })
    }

    pub fn tau(&self) -> f64 {
        self.settings.schedule.at(self.step, self.total_steps)
    }

    pub fn in_burn_in(&self) -> bool {
        (self.step as f64) < self.settings.burn_in_fraction * self.total_steps as f64
    }

    pub fn num_tasks(&self) -> usize {
        self.sigma_bar.num_tasks
    }

    pub fn dim(&self) -> usize {
        self.sigma_bar.dim
    }
}

/// `σ̄ ← β·σ̄ + (1 − β)·σ̃`.
pub fn update_momentum(state: &mut SensitivityState, normalized: &TaskMatrix) -> Result<()> {
    check_len(state.sigma_bar.dim, normalized.dim, "momentum rows")?;
    check_len(state.sigma_bar.num_tasks, normalized.num_tasks, "momentum columns")?;
    let beta = state.settings.beta;
    for (s, n) in state.sigma_bar.data.iter_mut().zip(&normalized.data) {
        *s = beta * *s + (1.0 - beta) * n;
    }
    Ok(())
}

/// Temperature softmax of one parameter's sensitivities across tasks.
pub fn task_distribution(sigma_bar_row: &[f64], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; sigma_bar_row.len()];
    softmax_into(sigma_bar_row, tau, &mut out);
    out
}

fn softmax_into(row: &[f64], tau: f64, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (o, s) in out.iter_mut().zip(row) {
        *o = s / tau;
        max = max.max(*o);
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Per-parameter task weights `U` in row-major `d x K` layout: uniform during
/// burn-in, otherwise the row-wise softmax of `σ̄ / τ`.
pub fn mixing_weights(state: &SensitivityState) -> TaskMatrix {
    let (d, k) = (state.dim(), state.num_tasks());
    if state.in_burn_in() {
        return TaskMatrix {
            dim: d,
            num_tasks: k,
            data: vec![1.0 / k as f64; d * k],
        };
    }
    let tau = state.tau();
    let mut data = vec![0.0; d * k];
    for (i, out) in data.chunks_exact_mut(k).enumerate() {
        softmax_into(state.sigma_bar.row(i), tau, out);
    }
    TaskMatrix {
        dim: d,
        num_tasks: k,
        data,
    }
}

/// `(G ⊙ U) 1_K`: parameter `i` receives `Σ_k U[i,k] · G[i,k]`.
pub fn adaptive_combine(grads: &GradientMatrix, state: &SensitivityState) -> Result<Vec<f64>> {
    check_len(state.num_tasks(), grads.num_tasks(), "gradient columns")?;
    check_len(state.dim(), grads.dim(), "gradient rows")?;
    let u = mixing_weights(state);
    let k = grads.num_tasks();
    Ok((0..grads.dim())
        .map(|i| {
            let w = u.row(i);
            let mut acc = 0.0;
            for c in 0..k {
                acc += w[c] * grads.columns[c][i];
            }
            acc
        })
        .collect())
}

/// Folds one step's gradients into `σ̄`: raw sensitivity, median
/// normalization, then momentum.
pub fn accumulate_sensitivity(
    state: &mut SensitivityState,
    grads: &GradientMatrix,
    params: &ParamVector,
) -> Result<()> {
    let raw: Vec<Vec<f64>> = grads
        .columns
        .iter()
        .map(|g| raw_sensitivity(g, params.as_slice()))
        .collect::<Result<_>>()?;
    let normalized = normalize_by_median(&TaskMatrix::from_columns(&raw)?, state.settings.median_epsilon);
    update_momentum(state, &normalized)
}

/// Computes the per-task losses and gradients of one step, one task at a
/// time, each on its own batch.
pub fn task_gradients(
    params: &ParamVector,
    batches: &[TrainBatch<'_>],
    config: &EncoderConfig,
) -> Result<(Vec<f64>, GradientMatrix)> {
    use rayon::prelude::*;
    check_len(config.num_tasks, batches.len(), "task batches")?;
    for (k, b) in batches.iter().enumerate() {
        if b.task_id != k {
            return Err(Error::InvalidArgument(format!(
                "batch {k} belongs to task {}",
                b.task_id
            )));
        }
    }
    let results: Vec<(f64, ParamVector)> = batches
        .par_iter()
        .map(|b| nce_loss_and_gradient(params, b, config))
        .collect::<Result<_>>()?;
    let (losses, cols): (Vec<f64>, Vec<Vec<f64>>) =
        results.into_iter().map(|(l, g)| (l, g.0)).unzip();
    Ok((losses, GradientMatrix::from_columns(cols)?))
}

/// One full adaptive step. Returns the per-task losses at the pre-update
/// parameters.
pub fn taco_step(
    params: &mut ParamVector,
    batches: &[TrainBatch<'_>],
    state: &mut SensitivityState,
    optimizer: &mut dyn BaseOptimizer,
    config: &EncoderConfig,
) -> Result<Vec<f64>> {
    let (losses, grads) = task_gradients(params, batches, config)?;
    accumulate_sensitivity(state, &grads, params)?;
    let combined = adaptive_combine(&grads, state)?;
    optimizer.step(params, &combined)?;
    state.step += 1;
    Ok(losses)
}
