#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use taco_core::dual_encoder::{EncoderConfig, PrefixMode, TrainBatch};
use taco_core::experiment::ExperimentConfig;
use taco_core::matrix::Matrix;

/// A seconds-scale experiment: 3 tasks, 6-d features, one 8-unit layer.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for a in [
        "num_tasks=3",
        "train_sizes=60,40,20",
        "val_sizes=15,15,15",
        "difficulty=0.6,1,1.4",
        "kb_size=80",
        "cluster_count=8",
        "input_dim=6",
        "task_noise_dims=1",
        "subspace_dims=0",
        "off_subspace_scale=1",
        "hidden_dims=8",
        "embed_dim=4",
        "batch_total=18",
        "warmup_epochs=1",
        "episodes=2",
        "epochs_per_episode=2",
        "eval_k=5",
        "lr=0.01",
    ] {
        cfg.set_assignment(a).unwrap();
    }
    cfg
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn small_encoder(input_dim: usize, num_tasks: usize, hidden: Vec<usize>) -> EncoderConfig {
    EncoderConfig {
        input_dim,
        embed_dim: 3,
        hidden_dims: hidden,
        num_tasks,
        prefix_mode: PrefixMode::TaskId,
        task_types: vec![],
    }
}

/// A random batch for `task` against `targets`, with distinct golds and
/// hard negatives that exclude each query's gold.
pub fn random_batch<'a>(
    rng: &mut ChaCha8Rng,
    targets: &'a Matrix,
    task: usize,
    size: usize,
    n_neg: usize,
) -> TrainBatch<'a> {
    let input_dim = targets.cols();
    let n = targets.rows();
    let gold_ids: Vec<usize> = (0..size).map(|_| rng.random_range(0..n)).collect();
    let hard_negative_ids = gold_ids
        .iter()
        .map(|&g| {
            let mut negs = Vec::new();
            while negs.len() < n_neg {
                let c = rng.random_range(0..n);
                if c != g && !negs.contains(&c) {
                    negs.push(c);
                }
            }
            negs
        })
        .collect();
    TrainBatch {
        task_id: task,
        query_features: gaussian_matrix(rng, size, input_dim),
        gold_ids,
        hard_negative_ids,
        target_features: targets,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
