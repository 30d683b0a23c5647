//! Warmup plus episodic hard-negative training for every method.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::analysis::{r_precision, recall_at_k, specialization_report, ReportThresholds};
use crate::ann_index::{build_index, refresh_negatives, NegativeTable};
use crate::baselines::{
    cgd_combine, gradnorm_update, naive_combine, pcgrad_combine, uniform_weights, GradNormState,
};
use crate::dual_encoder::{encode_rows, init_params, EncoderConfig, ParamVector, PrefixMode};
use crate::error::{Error, Result};
use crate::experiment::checkpoint::Checkpoint;
use crate::experiment::config::{BaseOptimizerKind, ExperimentConfig, Method};
use crate::experiment::report::{EpisodeMetrics, RunReport, TaskMetrics};
use crate::matrix::dot;
use crate::optim::{AdamState, BaseOptimizer, LrSchedule, Sgd};
use crate::taco::{accumulate_sensitivity, task_gradients, taco_step, SensitivityState};
use crate::task_suite::{generate_tasks, mixing_batch_sizes, BatchSchedule, MultitaskDataset};

/// SplitMix64 of `seed ^ tag`, for independent per-purpose streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_DATA: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_SCHEDULE: u64 = 3;
const TAG_NEGATIVES: u64 = 4;
const TAG_PCGRAD: u64 = 5;
const TAG_TASK_MODEL: u64 = 100;

/// Per-task validation R-precision and recall@k under `params`.
pub fn evaluate(
    params: &ParamVector,
    dataset: &MultitaskDataset,
    encoder: &EncoderConfig,
    k: usize,
) -> Result<Vec<TaskMetrics>> {
    let indexes = dataset
        .kbs
        .iter()
        .map(|kb| build_index(params, kb, encoder, 0))
        .collect::<Result<Vec<_>>>()?;
    dataset
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            if task.val_gold.is_empty() {
                return Err(Error::Empty("validation split"));
            }
            let index = &indexes[task.kb];
            let depth = k.clamp(1, index.len());
            let q = encode_rows(params, &task.val_queries, Some(t), encoder)?;
            let scores = (0..q.rows())
                .into_par_iter()
                .map(|i| {
                    let ranked = index.search(q.row(i), depth)?;
                    let gold = [task.val_gold[i]];
                    Ok((r_precision(&ranked, &gold)?, recall_at_k(&ranked, &gold, k)?))
                })
                .collect::<Result<Vec<(f64, f64)>>>()?;
            let n = scores.len() as f64;
            Ok(TaskMetrics {
                task: t,
                r_precision: scores.iter().map(|s| s.0).sum::<f64>() / n,
                recall_at_k: scores.iter().map(|s| s.1).sum::<f64>() / n,
            })
        })
        .collect()
}

/// How one step's task gradients become the update direction.
enum Combiner {
    Naive,
    Taco,
    Pcgrad(ChaCha8Rng),
    Cgd(f64),
    Gradnorm(GradNormState),
}

impl Combiner {
    fn for_method(method: Method, cfg: &ExperimentConfig, num_tasks: usize) -> Self {
        match method {
            Method::Taco => Combiner::Taco,
            Method::Naive | Method::TaskSpecific => Combiner::Naive,
            Method::Pcgrad => {
                Combiner::Pcgrad(ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_PCGRAD)))
            }
            Method::Cgd => Combiner::Cgd(cfg.cgd_rho),
            Method::Gradnorm => Combiner::Gradnorm(GradNormState::new(
                num_tasks,
                cfg.gradnorm_alpha,
                cfg.gradnorm_lr,
            )),
        }
    }
}

struct ModelRun {
    params: ParamVector,
    /// One entry per phase, warmup first.
    episodes: Vec<(Vec<TaskMetrics>, f64)>,
    tracker: Option<SensitivityState>,
    total_steps: u64,
}

struct TrainContext<'a> {
    cfg: &'a ExperimentConfig,
    dataset: &'a MultitaskDataset,
    encoder: &'a EncoderConfig,
    batch_sizes: Vec<usize>,
    init_seed: u64,
    /// Distinguishes independent models trained under one master seed.
    stream: u64,
    checkpoint_dir: Option<&'a Path>,
}

enum Optimizer {
    Adam(AdamState),
    Sgd(Sgd),
}

impl Optimizer {
    fn new(cfg: &ExperimentConfig, dim: usize, total_steps: u64) -> Self {
        let schedule = LrSchedule {
            peak_lr: cfg.lr,
            warmup_fraction: cfg.warmup_fraction,
            total_steps,
        };
        match cfg.base_optimizer {
            BaseOptimizerKind::Adam => Optimizer::Adam(AdamState::new(dim, schedule)),
            BaseOptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(schedule)),
        }
    }

    fn as_dyn(&mut self) -> &mut dyn BaseOptimizer {
        match self {
            Optimizer::Adam(a) => a,
            Optimizer::Sgd(s) => s,
        }
    }

    fn adam(&self) -> Option<AdamState> {
        match self {
            Optimizer::Adam(a) => Some(a.clone()),
            Optimizer::Sgd(_) => None,
        }
    }
}

fn diverged(episode: usize, step: u64, err: Error) -> Error {
    match err {
        Error::NonFinite(what) => Error::Diverged(format!(
            "non-finite {what} in episode {episode} at step {step}"
        )),
        other => other,
    }
}

fn train_model(ctx: &TrainContext<'_>) -> Result<ModelRun> {
    let cfg = ctx.cfg;
    let enc = ctx.encoder;
    let k = ctx.dataset.num_tasks();
    let mut params = init_params(enc, ctx.init_seed)?;
    let d = params.len();
    let train_sizes = ctx.dataset.train_sizes();
    let steps_per_epoch = BatchSchedule::new(
        &train_sizes,
        ctx.batch_sizes.clone(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?
    .steps_per_epoch() as u64;

    let first_method_episode = cfg.episodes + 1 - cfg.adaptive_episodes;
    let method_steps =
        steps_per_epoch * cfg.epochs_per_episode as u64 * cfg.adaptive_episodes as u64;
    let mut tracker: Option<SensitivityState> = None;
    let mut episodes = Vec::with_capacity(cfg.episodes + 1);
    let mut negatives: NegativeTable;
    let mut total_steps = 0u64;

    for episode in 0..=cfg.episodes {
        let phase_seed = derive_seed(ctx.stream, episode as u64);
        negatives = refresh_negatives(
            episode,
            &params,
            ctx.dataset,
            enc,
            cfg.n_neg,
            derive_seed(phase_seed, TAG_NEGATIVES),
            total_steps,
        )?;
        let epochs = if episode == 0 { cfg.warmup_epochs } else { cfg.epochs_per_episode };
        let phase_steps = steps_per_epoch * epochs as u64;
        let method_phase = episode >= first_method_episode && cfg.adaptive_episodes > 0;
        if method_phase && tracker.is_none() {
            tracker = Some(SensitivityState::new(d, k, cfg.sensitivity_settings(), method_steps)?);
        }
        let mut combiner = if method_phase {
            Combiner::for_method(cfg.method, cfg, k)
        } else {
            Combiner::Naive
        };
        let mut optimizer = Optimizer::new(cfg, d, phase_steps.max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(phase_seed, TAG_SCHEDULE));
        let mut schedule = BatchSchedule::new(&train_sizes, ctx.batch_sizes.clone(), &mut rng)?;
        let uniform = uniform_weights(k);
        let mut loss_sum = 0.0;

        for step in 0..phase_steps {
            let batches = schedule.next_step_batches(ctx.dataset, &negatives, &mut rng)?;
            let losses = match (&mut combiner, tracker.as_mut().filter(|_| method_phase)) {
                (Combiner::Taco, Some(state)) => {
                    taco_step(&mut params, &batches, state, optimizer.as_dyn(), enc)
                        .map_err(|e| diverged(episode, step, e))?
                }
                (combiner, mut state) => {
                    let (losses, grads) = task_gradients(&params, &batches, enc)
                        .map_err(|e| diverged(episode, step, e))?;
                    if let Some(state) = state.as_deref_mut() {
                        accumulate_sensitivity(state, &grads, &params)?;
                    }
                    let combined = match combiner {
                        Combiner::Naive | Combiner::Taco => naive_combine(&grads, &uniform)?,
                        Combiner::Pcgrad(r) => pcgrad_combine(&grads, r),
                        Combiner::Cgd(rho) => cgd_combine(&grads, *rho),
                        Combiner::Gradnorm(gn) => {
                            let combined = naive_combine(&grads, &gn.combine_weights())?;
                            let norms: Vec<f64> =
                                grads.columns().iter().map(|g| dot(g, g).sqrt()).collect();
                            gradnorm_update(gn, &losses, &norms)?;
                            combined
                        }
                    };
                    optimizer
                        .as_dyn()
                        .step(&mut params, &combined)
                        .map_err(|e| diverged(episode, step, e))?;
                    if let Some(state) = state {
                        state.step += 1;
                    }
                    losses
                }
            };
            loss_sum += losses.iter().sum::<f64>() / k as f64;
        }
        total_steps += phase_steps;
        if !params.is_finite() {
            return Err(Error::Diverged(format!("non-finite parameters after episode {episode}")));
        }

        let metrics = evaluate(&params, ctx.dataset, enc, cfg.eval_k)?;
        episodes.push((metrics, loss_sum / phase_steps.max(1) as f64));

        if let Some(dir) = ctx.checkpoint_dir {
            Checkpoint {
                episode: episode as u64,
                encoder: enc.clone(),
                params: params.clone(),
                sensitivity: tracker.clone(),
                adam: optimizer.adam(),
            }
            .save(&dir.join(format!("episode_{episode}.bin")))?;
        }
    }

    Ok(ModelRun {
        params,
        episodes,
        tracker,
        total_steps,
    })
}

/// The subset of `dataset` belonging to `task`, as a one-task dataset.
pub fn single_task(dataset: &MultitaskDataset, task: usize) -> MultitaskDataset {
    let mut t = dataset.tasks[task].clone();
    let kb = dataset.kbs[t.kb].clone();
    t.kb = 0;
    MultitaskDataset {
        tasks: vec![t],
        kbs: vec![kb],
    }
}

/// Everything a run produces besides the report.
pub struct RunArtifacts {
    pub report: RunReport,
    pub params: Vec<ParamVector>,
    pub sensitivity: Option<SensitivityState>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    run_experiment_with_artifacts(cfg).map(|a| a.report)
}

pub fn run_experiment_with_artifacts(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let started = Instant::now();
    run_on_dataset(cfg, &generate_for(cfg)?, started)
}

/// The dataset `run_experiment` trains on for `cfg`.
pub fn generate_for(cfg: &ExperimentConfig) -> Result<MultitaskDataset> {
    generate_tasks(&cfg.tasks, derive_seed(cfg.seed, TAG_DATA))
}

/// Runs `cfg` against an already materialized dataset.
pub fn run_on_dataset(
    cfg: &ExperimentConfig,
    dataset: &MultitaskDataset,
    started: Instant,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    if dataset.num_tasks() != cfg.encoder.num_tasks {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} tasks, encoder expects {}",
            dataset.num_tasks(),
            cfg.encoder.num_tasks
        )));
    }
    let batch_sizes = mixing_batch_sizes(&dataset.train_sizes(), cfg.mixing_temperature, cfg.batch_total)?;
    let out = cfg.output_dir.as_deref();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.resolved.txt"), cfg.to_text())?;
    }

    let (runs, task_of_run): (Vec<ModelRun>, Vec<Vec<usize>>) = if cfg.method == Method::TaskSpecific {
        let encoder = EncoderConfig {
            num_tasks: 1,
            prefix_mode: PrefixMode::None,
            task_types: vec![],
            ..cfg.encoder.clone()
        };
        let mut runs = Vec::with_capacity(dataset.num_tasks());
        for task in 0..dataset.num_tasks() {
            let sub = single_task(dataset, task);
            let ckpt = out.map(|d| d.join("checkpoints").join(format!("task_{task}")));
            let stream = derive_seed(cfg.seed, TAG_TASK_MODEL + task as u64);
            runs.push(train_model(&TrainContext {
                cfg,
                dataset: &sub,
                encoder: &encoder,
                batch_sizes: vec![batch_sizes[task]],
                init_seed: derive_seed(stream, TAG_INIT),
                stream,
                checkpoint_dir: ckpt.as_deref(),
            })?);
        }
        (runs, (0..dataset.num_tasks()).map(|t| vec![t]).collect())
    } else {
        let ckpt = out.map(|d| d.join("checkpoints"));
        let run = train_model(&TrainContext {
            cfg,
            dataset,
            encoder: &cfg.encoder,
            batch_sizes,
            init_seed: derive_seed(cfg.seed, TAG_INIT),
            stream: cfg.seed,
            checkpoint_dir: ckpt.as_deref(),
        })?;
        (vec![run], vec![(0..dataset.num_tasks()).collect()])
    };

    let mut episodes = Vec::with_capacity(cfg.episodes + 1);
    for e in 0..=cfg.episodes {
        let mut tasks = Vec::with_capacity(dataset.num_tasks());
        let mut loss = 0.0;
        for (run, ids) in runs.iter().zip(&task_of_run) {
            let (metrics, l) = &run.episodes[e];
            loss += l;
            for (m, &t) in metrics.iter().zip(ids) {
                tasks.push(TaskMetrics { task: t, ..m.clone() });
            }
        }
        tasks.sort_by_key(|t| t.task);
        episodes.push(EpisodeMetrics::new(e, tasks, loss / runs.len() as f64));
    }

    let thresholds = ReportThresholds {
        entropy: cfg.entropy_threshold,
        activation: cfg.activation_threshold,
        ..Default::default()
    };
    let sensitivity = if cfg.method == Method::TaskSpecific {
        None
    } else {
        runs[0].tracker.clone()
    };
    let specialization = sensitivity.as_ref().map(|s| specialization_report(s, thresholds));

    let report = RunReport {
        method: cfg.method.to_string(),
        seed: cfg.seed,
        config: cfg
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        eval_k: cfg.eval_k,
        warmup_avg_r_precision: episodes[0].avg_r_precision,
        final_avg_r_precision: episodes[cfg.episodes].avg_r_precision,
        final_avg_recall_at_k: episodes[cfg.episodes].avg_recall_at_k,
        episodes,
        specialization: specialization.as_ref().map(|s| s.summary()),
        total_steps: runs.iter().map(|r| r.total_steps).sum(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out {
        report.save(dir)?;
        if let Some(spec) = &specialization {
            spec.write_histogram_csv(&dir.join("entropy_histogram.csv"))?;
            spec.write_density_csv(&dir.join("sensitivity_density.csv"))?;
        }
    }

    Ok(RunArtifacts {
        report,
        params: runs.into_iter().map(|r| r.params).collect(),
        sensitivity,
    })
}
