//! Weight-shared feed-forward dual encoder.
//!
//! Queries and targets pass through the same MLP. Queries carry a task
//! indicator block in front of their features; targets carry a zero block
//! in the same position, so target embeddings never depend on the task and
//! can be encoded once and reused by every task.
//!
//! Hidden layers use `tanh`; the output layer is linear. All parameters live
//! in one flat [`ParamVector`] with, for every layer, the weight matrix
//! (row-major, `out x in`) followed by the bias vector.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::matrix::{dot, Matrix};

/// Granularity of the task indicator appended to query inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixMode {
    /// One-hot over the `num_tasks` tasks.
    TaskId,
    /// One-hot over coarser task types, see [`EncoderConfig::task_types`].
    TaskTypeId,
    /// No indicator block at all.
    None,
}

impl std::str::FromStr for PrefixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task_id" => Ok(PrefixMode::TaskId),
            "task_type_id" => Ok(PrefixMode::TaskTypeId),
            "none" => Ok(PrefixMode::None),
            other => Err(Error::InvalidConfig(format!("unknown prefix mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PrefixMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PrefixMode::TaskId => "task_id",
            PrefixMode::TaskTypeId => "task_type_id",
            PrefixMode::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_tasks: usize,
    pub prefix_mode: PrefixMode,
    /// Task to task-type mapping, only read when `prefix_mode` is
    /// [`PrefixMode::TaskTypeId`]. Empty means every task is its own type.
    #[serde(default)]
    pub task_types: Vec<usize>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.num_tasks == 0 {
            return Err(Error::InvalidConfig(
                "input_dim, embed_dim and num_tasks must be >= 1".into(),
            ));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden dims must be >= 1".into()));
        }
        if self.prefix_mode == PrefixMode::TaskTypeId && !self.task_types.is_empty() {
            check_len(self.num_tasks, self.task_types.len(), "task_types")?;
        }
        Ok(())
    }

    /// Width of the task indicator block.
    pub fn prefix_dim(&self) -> usize {
        match self.prefix_mode {
            PrefixMode::TaskId => self.num_tasks,
            PrefixMode::TaskTypeId if self.task_types.is_empty() => self.num_tasks,
            PrefixMode::TaskTypeId => self.task_types.iter().max().map_or(0, |m| m + 1),
            PrefixMode::None => 0,
        }
    }

    /// Index of the active prefix coordinate for `task`, if any.
    fn prefix_slot(&self, task: usize) -> Option<usize> {
        match self.prefix_mode {
            PrefixMode::TaskId => Some(task),
            PrefixMode::TaskTypeId => Some(self.task_types.get(task).copied().unwrap_or(task)),
            PrefixMode::None => None,
        }
    }

    fn layer_widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.prefix_dim() + self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.embed_dim);
        widths
    }

    /// Number of scalar parameters `d`.
    pub fn num_params(&self) -> usize {
        self.layer_widths()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Flattened encoder parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// One task's share of an optimization step.
#[derive(Debug, Clone)]
pub struct TrainBatch<'a> {
    pub task_id: usize,
    pub query_features: Matrix,
    pub gold_ids: Vec<usize>,
    pub hard_negative_ids: Vec<Vec<usize>>,
    /// Feature table of the knowledge base the ids index into.
    pub target_features: &'a Matrix,
}

impl TrainBatch<'_> {
    pub fn len(&self) -> usize {
        self.gold_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold_ids.is_empty()
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        if self.gold_ids.is_empty() {
            return Err(Error::Empty("train batch"));
        }
        if self.task_id >= config.num_tasks {
            return Err(Error::TaskOutOfRange {
                task: self.task_id,
                num_tasks: config.num_tasks,
            });
        }
        check_len(self.gold_ids.len(), self.query_features.rows(), "batch queries")?;
        check_len(self.gold_ids.len(), self.hard_negative_ids.len(), "batch negatives")?;
        check_len(config.input_dim, self.query_features.cols(), "query features")?;
        check_len(config.input_dim, self.target_features.cols(), "target features")?;
        let kb = self.target_features.rows();
        for (gold, negs) in self.gold_ids.iter().zip(&self.hard_negative_ids) {
            if *gold >= kb || negs.iter().any(|&n| n >= kb) {
                return Err(Error::InvalidArgument(format!(
                    "target id out of range for knowledge base of {kb}"
                )));
            }
            if negs.contains(gold) {
                return Err(Error::InvalidArgument(format!(
                    "gold id {gold} listed among its own hard negatives"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weight_offset: usize,
    bias_offset: usize,
}

/// Per-layer offsets into a [`ParamVector`].
#[derive(Debug, Clone)]
struct Layout {
    layers: Vec<Layer>,
    prefix_dim: usize,
}

impl Layout {
    fn new(config: &EncoderConfig) -> Self {
        let widths = config.layer_widths();
        let mut offset = 0;
        let layers = widths
            .windows(2)
            .map(|w| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect();
        Self {
            layers,
            prefix_dim: config.prefix_dim(),
        }
    }

    fn input(&self, features: &[f64], prefix_slot: Option<usize>) -> Vec<f64> {
        let mut x = vec![0.0; self.prefix_dim + features.len()];
        if let Some(slot) = prefix_slot {
            x[slot] = 1.0;
        }
        x[self.prefix_dim..].copy_from_slice(features);
        x
    }

    /// Returns the activations of every layer, input first.
    fn forward(&self, params: &[f64], input: Vec<f64>) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let x = &acts[l];
            let w = &params[layer.weight_offset..layer.bias_offset];
            let b = &params[layer.bias_offset..layer.bias_offset + layer.fan_out];
            let mut z: Vec<f64> = (0..layer.fan_out)
                .map(|o| b[o] + dot(&w[o * layer.fan_in..(o + 1) * layer.fan_in], x))
                .collect();
            if l != last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    /// Accumulates d(out)/d(params) contracted with `grad_out` into `grad`.
    fn backward(&self, params: &[f64], acts: &[Vec<f64>], grad_out: &[f64], grad: &mut [f64]) {
        let last = self.layers.len() - 1;
        let mut delta = grad_out.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if l != last {
                for (d, a) in delta.iter_mut().zip(&acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let x = &acts[l];
            for o in 0..layer.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[layer.bias_offset + o] += d;
                let row = layer.weight_offset + o * layer.fan_in;
                for (g, xi) in grad[row..row + layer.fan_in].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
            if l > 0 {
                let w = &params[layer.weight_offset..layer.bias_offset];
                let mut prev = vec![0.0; layer.fan_in];
                for o in 0..layer.fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wv) in prev.iter_mut().zip(&w[o * layer.fan_in..(o + 1) * layer.fan_in]) {
                        *p += d * wv;
                    }
                }
                delta = prev;
            }
        }
    }
}

/// Draws initial parameters, `N(0, 1/fan_in)` for weights and biases alike.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ParamVector> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; config.num_params()];
    for layer in &layout.layers {
        let normal = Normal::new(0.0, 1.0 / (layer.fan_in as f64).sqrt())
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let end = layer.bias_offset + layer.fan_out;
        for v in &mut values[layer.weight_offset..end] {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(ParamVector(values))
}

fn check_params(params: &ParamVector, config: &EncoderConfig) -> Result<()> {
    check_len(config.num_params(), params.len(), "parameter vector")
}

fn prefix_slot(task: Option<usize>, config: &EncoderConfig) -> Result<Option<usize>> {
    match task {
        Some(t) if t >= config.num_tasks => Err(Error::TaskOutOfRange {
            task: t,
            num_tasks: config.num_tasks,
        }),
        Some(t) => Ok(config.prefix_slot(t)),
        None => Ok(None),
    }
}

/// Encodes a query (`task = Some(k)`) or a target (`task = None`).
///
/// With [`PrefixMode::None`] the task id is validated and otherwise ignored.
pub fn encode(
    params: &ParamVector,
    features: &[f64],
    task: Option<usize>,
    config: &EncoderConfig,
) -> Result<Vec<f64>> {
    check_params(params, config)?;
    check_len(config.input_dim, features.len(), "features")?;
    let slot = prefix_slot(task, config)?;
    let layout = Layout::new(config);
    let mut acts = layout.forward(params.as_slice(), layout.input(features, slot));
    Ok(acts.pop().unwrap_or_default())
}

/// Encodes every row of `features` with the same task indicator.
pub fn encode_rows(
    params: &ParamVector,
    features: &Matrix,
    task: Option<usize>,
    config: &EncoderConfig,
) -> Result<Matrix> {
    check_params(params, config)?;
    check_len(config.input_dim, features.cols(), "features")?;
    let slot = prefix_slot(task, config)?;
    let layout = Layout::new(config);
    let mut out = Vec::with_capacity(features.rows() * config.embed_dim);
    for row in features.iter_rows() {
        let mut acts = layout.forward(params.as_slice(), layout.input(row, slot));
        out.extend(acts.pop().unwrap_or_default());
    }
    Matrix::from_vec(features.rows(), config.embed_dim, out)
}

/// Relevance score: the inner product of two embeddings.
pub fn score(q_emb: &[f64], t_emb: &[f64]) -> Result<f64> {
    check_len(q_emb.len(), t_emb.len(), "embedding")?;
    Ok(dot(q_emb, t_emb))
}

/// Softmax cross-entropy of `logits` against index `gold`, and its gradient
/// with respect to the logits (`softmax(logits) - onehot(gold)`).
pub fn softmax_xent(logits: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[gold];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[gold] -= 1.0;
    (loss.max(0.0), grad)
}

/// Candidate target ids of query `i`: every in-batch gold plus the query's
/// own hard negatives, each id at most once. Returns the ids and the
/// position of the query's gold.
fn candidates(batch: &TrainBatch<'_>, i: usize) -> (Vec<usize>, usize) {
    let mut ids: Vec<usize> = Vec::with_capacity(batch.len() + batch.hard_negative_ids[i].len());
    for &id in batch.gold_ids.iter().chain(&batch.hard_negative_ids[i]) {
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let gold_pos = ids
        .iter()
        .position(|&id| id == batch.gold_ids[i])
        .expect("gold is always a candidate");
    (ids, gold_pos)
}

fn loss_and_grad(
    params: &ParamVector,
    batch: &TrainBatch<'_>,
    config: &EncoderConfig,
    want_grad: bool,
) -> Result<(f64, Option<ParamVector>)> {
    check_params(params, config)?;
    batch.validate(config)?;
    let layout = Layout::new(config);
    let p = params.as_slice();
    let slot = config.prefix_slot(batch.task_id);

    let query_acts: Vec<Vec<Vec<f64>>> = batch
        .query_features
        .iter_rows()
        .map(|row| layout.forward(p, layout.input(row, slot)))
        .collect();

    // Encode each distinct target once.
    let mut target_slot: HashMap<usize, usize> = HashMap::new();
    let mut target_acts: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut target_ids: Vec<usize> = Vec::new();
    for &id in batch.gold_ids.iter().chain(batch.hard_negative_ids.iter().flatten()) {
        target_slot.entry(id).or_insert_with(|| {
            target_acts.push(layout.forward(p, layout.input(batch.target_features.row(id), None)));
            target_ids.push(id);
            target_acts.len() - 1
        });
    }

    let n = batch.len() as f64;
    let embed = config.embed_dim;
    let mut total = 0.0;
    let mut q_grads: Vec<Vec<f64>> = vec![vec![0.0; embed]; batch.len()];
    let mut t_grads: Vec<Vec<f64>> = vec![vec![0.0; embed]; target_acts.len()];
    for (i, q_acts) in query_acts.iter().enumerate() {
        let q = q_acts.last().expect("output layer");
        let (ids, gold_pos) = candidates(batch, i);
        let slots: Vec<usize> = ids.iter().map(|id| target_slot[id]).collect();
        let logits: Vec<f64> = slots
            .iter()
            .map(|&s| dot(q, target_acts[s].last().expect("output layer")))
            .collect();
        if logits.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("relevance scores"));
        }
        let (loss, dlogits) = softmax_xent(&logits, gold_pos);
        total += loss;
        if want_grad {
            for (&s, &dl) in slots.iter().zip(&dlogits) {
                let t = target_acts[s].last().expect("output layer");
                let w = dl / n;
                for e in 0..embed {
                    q_grads[i][e] += w * t[e];
                    t_grads[s][e] += w * q[e];
                }
            }
        }
    }
    let loss = total / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("nce loss"));
    }
    if !want_grad {
        return Ok((loss, None));
    }

    let mut grad = vec![0.0; params.len()];
    for (acts, g) in query_acts.iter().zip(&q_grads) {
        layout.backward(p, acts, g, &mut grad);
    }
    for (acts, g) in target_acts.iter().zip(&t_grads) {
        layout.backward(p, acts, g, &mut grad);
    }
    Ok((loss, Some(ParamVector(grad))))
}

/// Mean NCE loss of a task batch.
pub fn nce_loss(params: &ParamVector, batch: &TrainBatch<'_>, config: &EncoderConfig) -> Result<f64> {
    loss_and_grad(params, batch, config, false).map(|(l, _)| l)
}

/// Analytic gradient of [`nce_loss`] with respect to the parameters.
pub fn nce_gradient(
    params: &ParamVector,
    batch: &TrainBatch<'_>,
    config: &EncoderConfig,
) -> Result<ParamVector> {
    nce_loss_and_gradient(params, batch, config).map(|(_, g)| g)
}

pub fn nce_loss_and_gradient(
    params: &ParamVector,
    batch: &TrainBatch<'_>,
    config: &EncoderConfig,
) -> Result<(f64, ParamVector)> {
    let (loss, grad) = loss_and_grad(params, batch, config, true)?;
    Ok((loss, grad.expect("gradient requested")))
}
