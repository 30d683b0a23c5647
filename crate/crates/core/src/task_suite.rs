//! Synthetic multitask retrieval benchmarks and per-task batch scheduling.
//!
//! Every task owns a set of queries whose gold targets live in a knowledge
//! base (one per task, or one shared by all tasks). Targets are drawn around
//! cluster prototypes; a query is its gold target's feature vector plus
//! task-specific anisotropic Gaussian noise. Each task corrupts its own
//! subset of feature coordinates more heavily, so the best query encoder
//! differs from task to task.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ann_index::NegativeTable;
use crate::dual_encoder::TrainBatch;
use crate::error::{check_len, Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_tasks: usize,
    pub train_sizes: Vec<usize>,
    pub val_sizes: Vec<usize>,
    /// Targets per knowledge base.
    pub kb_size: usize,
    /// Pool all tasks into one knowledge base of `kb_size` targets.
    pub shared_kb: bool,
    pub input_dim: usize,
    pub cluster_count: usize,
    /// Standard deviation of targets around their prototype.
    pub cluster_spread: f64,
    /// Base query noise level.
    pub noise_scale: f64,
    /// Per-task multiplier on `noise_scale`.
    pub difficulty: Vec<f64>,
    /// Number of feature coordinates each task corrupts with amplified noise.
    pub task_noise_dims: usize,
    /// Noise amplification on those coordinates.
    pub task_noise_gain: f64,
    /// Coordinates along which each task's knowledge base varies at full
    /// scale; 0 means all of them. Ignored for a shared knowledge base.
    pub subspace_dims: usize,
    /// Scale of the remaining coordinates.
    pub off_subspace_scale: f64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_tasks;
        if k == 0 {
            return Err(Error::InvalidConfig("num_tasks must be >= 1".into()));
        }
        check_len(k, self.train_sizes.len(), "train_sizes")?;
        check_len(k, self.val_sizes.len(), "val_sizes")?;
        check_len(k, self.difficulty.len(), "difficulty")?;
        if self.train_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidConfig("every task needs >= 1 training query".into()));
        }
        if self.input_dim == 0 || self.cluster_count == 0 {
            return Err(Error::InvalidConfig("input_dim and cluster_count must be >= 1".into()));
        }
        if self.kb_size < self.cluster_count {
            return Err(Error::InvalidConfig(format!(
                "kb_size {} is smaller than cluster_count {}",
                self.kb_size, self.cluster_count
            )));
        }
        if !(self.noise_scale >= 0.0) || !(self.cluster_spread >= 0.0) {
            return Err(Error::InvalidConfig("noise scales must be >= 0".into()));
        }
        if self.difficulty.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("difficulty multipliers must be > 0".into()));
        }
        if !(self.task_noise_gain >= 0.0) || self.task_noise_dims > self.input_dim {
            return Err(Error::InvalidConfig(
                "task_noise_dims must be <= input_dim and task_noise_gain >= 0".into(),
            ));
        }
        if self.subspace_dims > self.input_dim || !(0.0..=1.0).contains(&self.off_subspace_scale) {
            return Err(Error::InvalidConfig(
                "subspace_dims must be <= input_dim and off_subspace_scale in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    /// Index into [`MultitaskDataset::kbs`].
    pub kb: usize,
    pub train_queries: Matrix,
    pub train_gold: Vec<usize>,
    pub val_queries: Matrix,
    pub val_gold: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultitaskDataset {
    pub tasks: Vec<TaskData>,
    pub kbs: Vec<Matrix>,
}

impl MultitaskDataset {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.train_gold.len()).collect()
    }

    pub fn kb_of(&self, task: usize) -> &Matrix {
        &self.kbs[self.tasks[task].kb]
    }

    pub fn validate(&self) -> Result<()> {
        for task in &self.tasks {
            let kb = self.kbs.get(task.kb).ok_or_else(|| {
                Error::InvalidArgument(format!("task refers to missing knowledge base {}", task.kb))
            })?;
            check_len(task.train_gold.len(), task.train_queries.rows(), "train queries")?;
            check_len(task.val_gold.len(), task.val_queries.rows(), "validation queries")?;
            if task.train_gold.iter().chain(&task.val_gold).any(|&g| g >= kb.rows()) {
                return Err(Error::InvalidArgument("gold id outside its knowledge base".into()));
            }
        }
        Ok(())
    }
}

fn gaussian_row(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn generate_kb(spec: &TaskSpec, scale: &[f64], rng: &mut ChaCha8Rng) -> Matrix {
    let prototypes: Vec<Vec<f64>> = (0..spec.cluster_count)
        .map(|_| gaussian_row(rng, spec.input_dim))
        .collect();
    let mut kb = Matrix::zeros(0, 0);
    for id in 0..spec.kb_size {
        // Every prototype gets at least one target.
        let c = if id < spec.cluster_count {
            id
        } else {
            rng.random_range(0..spec.cluster_count)
        };
        let row: Vec<f64> = prototypes[c]
            .iter()
            .zip(scale)
            .map(|(p, s)| {
                let z: f64 = StandardNormal.sample(rng);
                s * (p + spec.cluster_spread * z)
            })
            .collect();
        kb.push_row(&row).expect("consistent width");
    }
    kb
}

fn noisy_views(
    kb: &Matrix,
    golds: &[usize],
    noise_std: &[f64],
    rng: &mut ChaCha8Rng,
) -> Matrix {
    let mut out = Matrix::zeros(0, 0);
    for &g in golds {
        let row: Vec<f64> = kb
            .row(g)
            .iter()
            .zip(noise_std)
            .map(|(t, s)| {
                let z: f64 = StandardNormal.sample(rng);
                t + s * z
            })
            .collect();
        out.push_row(&row).expect("consistent width");
    }
    if golds.is_empty() {
        out = Matrix::zeros(0, kb.cols());
    }
    out
}

fn subspace_scale(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if spec.subspace_dims == 0 {
        return vec![1.0; spec.input_dim];
    }
    let mut dims: Vec<usize> = (0..spec.input_dim).collect();
    dims.shuffle(rng);
    let mut scale = vec![spec.off_subspace_scale; spec.input_dim];
    for &j in &dims[..spec.subspace_dims] {
        scale[j] = 1.0;
    }
    scale
}

/// Generates a deterministic synthetic benchmark for `spec`.
pub fn generate_tasks(spec: &TaskSpec, seed: u64) -> Result<MultitaskDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kbs: Vec<Matrix> = if spec.shared_kb {
        vec![generate_kb(spec, &vec![1.0; spec.input_dim], &mut rng)]
    } else {
        (0..spec.num_tasks)
            .map(|_| {
                let scale = subspace_scale(spec, &mut rng);
                generate_kb(spec, &scale, &mut rng)
            })
            .collect()
    };

    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for k in 0..spec.num_tasks {
        let kb_index = if spec.shared_kb { 0 } else { k };
        let kb = &kbs[kb_index];

        let base = spec.noise_scale * spec.difficulty[k];
        let mut dims: Vec<usize> = (0..spec.input_dim).collect();
        dims.shuffle(&mut rng);
        let mut noise_std = vec![base; spec.input_dim];
        for &j in &dims[..spec.task_noise_dims] {
            noise_std[j] = base * spec.task_noise_gain;
        }

        // Walk a permutation of the KB so train and validation golds stay
        // distinct whenever the KB is large enough.
        let mut order: Vec<usize> = (0..kb.rows()).collect();
        order.shuffle(&mut rng);
        let (n, v) = (spec.train_sizes[k], spec.val_sizes[k]);
        let golds: Vec<usize> = (0..n + v).map(|j| order[j % order.len()]).collect();
        let (train_gold, val_gold) = golds.split_at(n);

        tasks.push(TaskData {
            kb: kb_index,
            train_queries: noisy_views(kb, train_gold, &noise_std, &mut rng),
            train_gold: train_gold.to_vec(),
            val_queries: noisy_views(kb, val_gold, &noise_std, &mut rng),
            val_gold: val_gold.to_vec(),
        });
    }
    Ok(MultitaskDataset { tasks, kbs })
}

/// Temperature-scaled mixing: `B_k = round(total * w_k / sum(w))` with
/// `w_k = N_k^(1/c)`, rounded half-to-even and clamped to at least 1.
///
/// No redistribution pass is applied, so the sizes may not sum to `total`
/// exactly.
pub fn mixing_batch_sizes(sizes: &[usize], temperature: f64, total: usize) -> Result<Vec<usize>> {
    if sizes.is_empty() {
        return Err(Error::Empty("task size list"));
    }
    if total < sizes.len() {
        return Err(Error::InvalidArgument(format!(
            "total batch size {total} is smaller than the task count {}",
            sizes.len()
        )));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument("mixing temperature must be > 0".into()));
    }
    if sizes.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument("task sizes must be >= 1".into()));
    }
    // Normalizing by the largest size first keeps the powers well scaled.
    let largest = *sizes.iter().max().expect("non-empty") as f64;
    let weights: Vec<f64> = sizes
        .iter()
        .map(|&n| (n as f64 / largest).powf(1.0 / temperature))
        .collect();
    let sum: f64 = weights.iter().sum();
    Ok(weights
        .iter()
        .map(|w| ((total as f64 * w / sum).round_ties_even() as usize).max(1))
        .collect())
}

#[derive(Debug, Clone)]
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

/// Per-task batch sizes plus shuffled index cursors that cycle independently.
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    batch_sizes: Vec<usize>,
    steps_per_epoch: usize,
    cursors: Vec<Cursor>,
}

impl BatchSchedule {
    pub fn new<R: Rng + ?Sized>(
        train_sizes: &[usize],
        batch_sizes: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        check_len(train_sizes.len(), batch_sizes.len(), "batch sizes")?;
        if train_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Empty("task"));
        }
        if batch_sizes.iter().any(|&b| b == 0) {
            return Err(Error::InvalidArgument("batch sizes must be >= 1".into()));
        }
        let steps_per_epoch = train_sizes
            .iter()
            .zip(&batch_sizes)
            .map(|(n, b)| n.div_ceil(*b))
            .max()
            .unwrap_or(0);
        let cursors = train_sizes
            .iter()
            .map(|&n| {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(rng);
                Cursor { order, pos: 0 }
            })
            .collect();
        Ok(Self {
            batch_sizes,
            steps_per_epoch,
            cursors,
        })
    }

    pub fn batch_sizes(&self) -> &[usize] {
        &self.batch_sizes
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    /// Indices of the next batch of `task`. A task whose pass is exhausted
    /// reshuffles and starts a new pass; a batch never straddles two passes,
    /// so the final batch of a pass may be short.
    pub fn next_indices<R: Rng + ?Sized>(&mut self, task: usize, rng: &mut R) -> Vec<usize> {
        let b = self.batch_sizes[task];
        let cursor = &mut self.cursors[task];
        if cursor.pos >= cursor.order.len() {
            cursor.order.shuffle(rng);
            cursor.pos = 0;
        }
        let end = (cursor.pos + b).min(cursor.order.len());
        let idx = cursor.order[cursor.pos..end].to_vec();
        cursor.pos = end;
        idx
    }

    /// One batch per task for the next optimization step.
    pub fn next_step_batches<'a, R: Rng + ?Sized>(
        &mut self,
        dataset: &'a MultitaskDataset,
        negatives: &NegativeTable,
        rng: &mut R,
    ) -> Result<Vec<TrainBatch<'a>>> {
        check_len(dataset.num_tasks(), self.cursors.len(), "schedule tasks")?;
        check_len(dataset.num_tasks(), negatives.num_tasks(), "negative table tasks")?;
        let mut batches = Vec::with_capacity(dataset.num_tasks());
        for (k, task) in dataset.tasks.iter().enumerate() {
            if task.train_gold.is_empty() {
                return Err(Error::Empty("task"));
            }
            let idx = self.next_indices(k, rng);
            let mut query_features = Matrix::zeros(0, task.train_queries.cols());
            let mut gold_ids = Vec::with_capacity(idx.len());
            let mut hard_negative_ids = Vec::with_capacity(idx.len());
            for &i in &idx {
                query_features.push_row(task.train_queries.row(i))?;
                let gold = task.train_gold[i];
                let negs = negatives.get(k, i).ok_or_else(|| {
                    Error::InvalidArgument(format!("no negatives for task {k} query {i}"))
                })?;
                if negs.contains(&gold) {
                    return Err(Error::InvalidArgument(format!(
                        "negative table lists gold {gold} for task {k} query {i}"
                    )));
                }
                gold_ids.push(gold);
                hard_negative_ids.push(negs.to_vec());
            }
            batches.push(TrainBatch {
                task_id: k,
                query_features,
                gold_ids,
                hard_negative_ids,
                target_features: dataset.kb_of(k),
            });
        }
        Ok(batches)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    format: String,
    version: u32,
    num_kbs: usize,
    task_kb: Vec<usize>,
}

const BUNDLE_FORMAT: &str = "taco-dataset";

fn write_rows(path: &Path, id_column: &str, ids: &[usize], rows: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![id_column.to_string()];
    header.extend((0..rows.cols()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(rows.iter_rows()) {
        let mut rec = vec![id.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `id, f0, f1, ...` CSV table.
pub fn read_rows(path: &Path) -> Result<(Vec<usize>, Matrix)> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len().saturating_sub(1);
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut fields = rec.iter();
        let id = fields
            .next()
            .ok_or_else(|| bad("empty record".into()))?
            .parse::<usize>()
            .map_err(|e| bad(e.to_string()))?;
        ids.push(id);
        for f in fields {
            data.push(f.parse::<f64>().map_err(|e| bad(e.to_string()))?);
        }
    }
    let rows = ids.len();
    let m = Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((ids, m))
}

/// Writes an `id, f0, ...` table; used for index dumps as well.
pub fn write_table(path: &Path, id_column: &str, ids: &[usize], rows: &Matrix) -> Result<()> {
    write_rows(path, id_column, ids, rows)
}

impl MultitaskDataset {
    /// Writes the dataset as a directory of CSV tables plus `manifest.json`:
    ///
    /// * `kb_<j>.csv`: `id, f0, ..., f{n-1}`, one row per target
    /// * `task_<k>_train.csv`, `task_<k>_val.csv`: `gold_id, f0, ...`
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = BundleManifest {
            format: BUNDLE_FORMAT.into(),
            version: 1,
            num_kbs: self.kbs.len(),
            task_kb: self.tasks.iter().map(|t| t.kb).collect(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        for (j, kb) in self.kbs.iter().enumerate() {
            let ids: Vec<usize> = (0..kb.rows()).collect();
            write_rows(&dir.join(format!("kb_{j}.csv")), "id", &ids, kb)?;
        }
        for (k, t) in self.tasks.iter().enumerate() {
            write_rows(&dir.join(format!("task_{k}_train.csv")), "gold_id", &t.train_gold, &t.train_queries)?;
            write_rows(&dir.join(format!("task_{k}_val.csv")), "gold_id", &t.val_gold, &t.val_queries)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: BundleManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        if manifest.format != BUNDLE_FORMAT || manifest.version != 1 {
            return Err(Error::Format {
                path: manifest_path,
                reason: format!("unsupported bundle {} v{}", manifest.format, manifest.version),
            });
        }
        let mut kbs = Vec::with_capacity(manifest.num_kbs);
        for j in 0..manifest.num_kbs {
            let path = dir.join(format!("kb_{j}.csv"));
            let (ids, m) = read_rows(&path)?;
            if ids.iter().enumerate().any(|(i, &id)| i != id) {
                return Err(Error::Format {
                    path,
                    reason: "knowledge base ids must be 0..n in order".into(),
                });
            }
            kbs.push(m);
        }
        let mut tasks = Vec::with_capacity(manifest.task_kb.len());
        for (k, &kb) in manifest.task_kb.iter().enumerate() {
            let (train_gold, train_queries) = read_rows(&dir.join(format!("task_{k}_train.csv")))?;
            let (val_gold, val_queries) = read_rows(&dir.join(format!("task_{k}_val.csv")))?;
            tasks.push(TaskData {
                kb,
                train_queries,
                train_gold,
                val_queries,
                val_gold,
            });
        }
        let ds = Self { tasks, kbs };
        ds.validate()?;
        Ok(ds)
    }
}
