//! Exact maximum-inner-product search over pre-encoded targets, hard-negative
//! mining, and the episodic negative refresh.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual_encoder::{encode_rows, EncoderConfig, ParamVector};
use crate::error::{check_len, Error, Result};
use crate::matrix::{dot, Matrix};
use crate::task_suite::{read_rows, write_table, MultitaskDataset};

/// Target embeddings frozen at one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    embeddings: Matrix,
    ids: Vec<usize>,
    snapshot_step: u64,
}

impl EmbeddingIndex {
    pub fn new(embeddings: Matrix, ids: Vec<usize>, snapshot_step: u64) -> Result<Self> {
        check_len(embeddings.rows(), ids.len(), "index ids")?;
        if ids.is_empty() {
            return Err(Error::Empty("index"));
        }
        if !embeddings.is_finite() {
            return Err(Error::NonFinite("index embeddings"));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("index ids must be unique".into()));
        }
        Ok(Self {
            embeddings,
            ids,
            snapshot_step,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn snapshot_step(&self) -> u64 {
        self.snapshot_step
    }

    /// The `k` ids with the largest inner product with `q_emb`, best first.
    /// Equal scores are ordered by ascending id.
    pub fn search(&self, q_emb: &[f64], k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.len() {
            return Err(Error::InvalidArgument(format!(
                "k = {k} outside 1..={}",
                self.len()
            )));
        }
        check_len(self.embeddings.cols(), q_emb.len(), "query embedding")?;
        if q_emb.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query embedding"));
        }
        let mut scored: Vec<(f64, usize)> = self
            .embeddings
            .iter_rows()
            .zip(&self.ids)
            .map(|(row, &id)| (dot(q_emb, row), id))
            .collect();
        let rank = |a: &(f64, usize), b: &(f64, usize)| -> Ordering {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank);
        Ok(scored.into_iter().map(|(_, id)| id).collect())
    }

    /// Writes `index.csv` (`id, e0, ...`) and `index.json` metadata into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_table(&dir.join("index.csv"), "id", &self.ids, &self.embeddings)?;
        let meta = IndexMeta {
            snapshot_step: self.snapshot_step,
            num_targets: self.len(),
            embed_dim: self.embeddings.cols(),
        };
        fs::write(dir.join("index.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: IndexMeta = serde_json::from_str(&fs::read_to_string(dir.join("index.json"))?)?;
        let (ids, embeddings) = read_rows(&dir.join("index.csv"))?;
        Self::new(embeddings, ids, meta.snapshot_step)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexMeta {
    snapshot_step: u64,
    num_targets: usize,
    embed_dim: usize,
}

/// Encodes every row of `kb` without a task block; row `i` gets id `i`.
pub fn build_index(
    params: &ParamVector,
    kb: &Matrix,
    config: &EncoderConfig,
    snapshot_step: u64,
) -> Result<EmbeddingIndex> {
    if kb.rows() == 0 {
        return Err(Error::Empty("knowledge base"));
    }
    const CHUNK: usize = 256;
    let chunks: Vec<Matrix> = (0..kb.rows())
        .step_by(CHUNK)
        .map(|start| {
            let end = (start + CHUNK).min(kb.rows());
            Matrix::from_vec(
                end - start,
                kb.cols(),
                kb.as_slice()[start * kb.cols()..end * kb.cols()].to_vec(),
            )
        })
        .collect::<Result<_>>()?;
    let encoded: Vec<Matrix> = chunks
        .par_iter()
        .map(|c| encode_rows(params, c, None, config))
        .collect::<Result<_>>()?;
    let mut embeddings = Matrix::zeros(0, config.embed_dim);
    for m in &encoded {
        for row in m.iter_rows() {
            embeddings.push_row(row)?;
        }
    }
    EmbeddingIndex::new(embeddings, (0..kb.rows()).collect(), snapshot_step)
}

/// For each query, the `n_neg` best-scoring ids other than its gold.
pub fn mine_hard_negatives(
    index: &EmbeddingIndex,
    params: &ParamVector,
    queries: &Matrix,
    golds: &[usize],
    task: usize,
    n_neg: usize,
    config: &EncoderConfig,
) -> Result<Vec<Vec<usize>>> {
    if n_neg == 0 {
        return Err(Error::InvalidArgument("n_neg must be >= 1".into()));
    }
    if index.len() < n_neg + 1 {
        return Err(Error::InvalidArgument(format!(
            "knowledge base of {} targets cannot supply {n_neg} negatives",
            index.len()
        )));
    }
    check_len(queries.rows(), golds.len(), "mining golds")?;
    let q_emb = encode_rows(params, queries, Some(task), config)?;
    (0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let ranked = index.search(q_emb.row(i), n_neg + 1)?;
            Ok(ranked
                .into_iter()
                .filter(|&id| id != golds[i])
                .take(n_neg)
                .collect())
        })
        .collect()
}

/// Uniformly random distinct non-gold ids from `0..kb_size`.
pub fn random_negatives<R: Rng + ?Sized>(
    golds: &[usize],
    kb_size: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if n_neg == 0 {
        return Err(Error::InvalidArgument("n_neg must be >= 1".into()));
    }
    if kb_size < n_neg + 1 {
        return Err(Error::InvalidArgument(format!(
            "knowledge base of {kb_size} targets cannot supply {n_neg} negatives"
        )));
    }
    Ok(golds
        .iter()
        .map(|&gold| {
            let mut negs = Vec::with_capacity(n_neg);
            while negs.len() < n_neg {
                let id = rng.random_range(0..kb_size);
                if id != gold && !negs.contains(&id) {
                    negs.push(id);
                }
            }
            negs
        })
        .collect())
}

/// Per-task, per-training-query negative ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeTable {
    tasks: Vec<Vec<Vec<usize>>>,
}

impl NegativeTable {
    pub fn new(tasks: Vec<Vec<Vec<usize>>>) -> Self {
        Self { tasks }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn get(&self, task: usize, query: usize) -> Option<&[usize]> {
        self.tasks.get(task)?.get(query).map(Vec::as_slice)
    }

    pub fn task(&self, task: usize) -> &[Vec<usize>] {
        &self.tasks[task]
    }
}

/// Where an episode's negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeSource {
    /// Uniform over non-gold targets; used for warmup.
    Random,
    /// Top-scoring non-gold targets under the latest checkpoint.
    Mined,
}

/// Episode 0 is the warmup; every later episode mines from the model.
pub fn refresh_schedule(episode: usize) -> NegativeSource {
    if episode == 0 {
        NegativeSource::Random
    } else {
        NegativeSource::Mined
    }
}

/// Builds the negative table for `episode`, replacing any previous table.
/// Mined episodes rebuild each knowledge base's index from `params` first.
pub fn refresh_negatives(
    episode: usize,
    params: &ParamVector,
    dataset: &MultitaskDataset,
    config: &EncoderConfig,
    n_neg: usize,
    seed: u64,
    snapshot_step: u64,
) -> Result<NegativeTable> {
    let tasks = match refresh_schedule(episode) {
        NegativeSource::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            dataset
                .tasks
                .iter()
                .map(|t| random_negatives(&t.train_gold, dataset.kbs[t.kb].rows(), n_neg, &mut rng))
                .collect::<Result<_>>()?
        }
        NegativeSource::Mined => {
            let indexes: Vec<EmbeddingIndex> = dataset
                .kbs
                .iter()
                .map(|kb| build_index(params, kb, config, snapshot_step))
                .collect::<Result<_>>()?;
            dataset
                .tasks
                .iter()
                .enumerate()
                .map(|(k, t)| {
                    mine_hard_negatives(
                        &indexes[t.kb],
                        params,
                        &t.train_queries,
                        &t.train_gold,
                        k,
                        n_neg,
                        config,
                    )
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(NegativeTable::new(tasks))
}
