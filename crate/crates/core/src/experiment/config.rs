//! Flat `key = value` experiment configuration.
//!
//! Files hold one assignment per line; `#` starts a comment. Lists are
//! comma-separated. Every key can also be overridden on the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dual_encoder::{EncoderConfig, PrefixMode};
use crate::error::{Error, Result};
use crate::task_suite::TaskSpec;
use crate::taco::{SensitivitySettings, TemperatureSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Taco,
    Naive,
    Pcgrad,
    Cgd,
    Gradnorm,
    TaskSpecific,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "taco" => Method::Taco,
            "naive" => Method::Naive,
            "pcgrad" => Method::Pcgrad,
            "cgd" => Method::Cgd,
            "gradnorm" => Method::Gradnorm,
            "task_specific" => Method::TaskSpecific,
            other => return Err(Error::InvalidConfig(format!("unknown method `{other}`"))),
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Taco => "taco",
            Method::Naive => "naive",
            Method::Pcgrad => "pcgrad",
            Method::Cgd => "cgd",
            Method::Gradnorm => "gradnorm",
            Method::TaskSpecific => "task_specific",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseOptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for BaseOptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(BaseOptimizerKind::Adam),
            "sgd" => Ok(BaseOptimizerKind::Sgd),
            other => Err(Error::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauScheduleKind {
    Fixed,
    ExpDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub tasks: TaskSpec,
    pub encoder: EncoderConfig,
    pub method: Method,

    pub lr: f64,
    pub warmup_fraction: f64,
    pub warmup_epochs: usize,
    pub episodes: usize,
    pub epochs_per_episode: usize,
    pub base_optimizer: BaseOptimizerKind,

    pub tau: f64,
    pub tau_end: f64,
    pub tau_schedule: TauScheduleKind,
    pub beta: f64,
    pub burn_in: f64,
    pub median_epsilon: f64,
    /// How many trailing episodes use the configured method; earlier
    /// episodes and the warmup combine task gradients uniformly.
    pub adaptive_episodes: usize,

    pub mixing_temperature: f64,
    pub batch_total: usize,
    pub n_neg: usize,

    pub cgd_rho: f64,
    pub gradnorm_alpha: f64,
    pub gradnorm_lr: f64,

    pub eval_k: usize,
    pub entropy_threshold: f64,
    pub activation_threshold: f64,

    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    /// The bundled desk-scale suite.
    fn default() -> Self {
        let tasks = TaskSpec {
            num_tasks: 4,
            train_sizes: vec![2000, 2000, 1000, 500],
            val_sizes: vec![500; 4],
            kb_size: 5000,
            shared_kb: false,
            input_dim: 32,
            cluster_count: 50,
            cluster_spread: 0.5,
            noise_scale: 0.2,
            difficulty: vec![0.6, 1.0, 1.4, 1.8],
            task_noise_dims: 0,
            task_noise_gain: 3.0,
            subspace_dims: 8,
            off_subspace_scale: 0.1,
        };
        let encoder = EncoderConfig {
            input_dim: 32,
            embed_dim: 16,
            hidden_dims: vec![64],
            num_tasks: 4,
            prefix_mode: PrefixMode::TaskId,
            task_types: vec![],
        };
        Self {
            tasks,
            encoder,
            method: Method::Taco,
            lr: 3e-3,
            warmup_fraction: 0.1,
            warmup_epochs: 10,
            episodes: 3,
            epochs_per_episode: 10,
            base_optimizer: BaseOptimizerKind::Adam,
            tau: 2.0,
            tau_end: 0.5,
            tau_schedule: TauScheduleKind::Fixed,
            beta: 0.99,
            burn_in: 0.1,
            median_epsilon: 1e-12,
            adaptive_episodes: 1,
            mixing_temperature: 4.0,
            batch_total: 120,
            n_neg: 2,
            cgd_rho: 2.0,
            gradnorm_alpha: 1.5,
            gradnorm_lr: 0.025,
            eval_k: 10,
            entropy_threshold: 0.3,
            activation_threshold: 1e-8,
            seed: 0,
            output_dir: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("{key} = {value}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Every recognized key, in the order [`ExperimentConfig::to_pairs`] emits them.
    pub const KEYS: &'static [&'static str] = &[
        "method", "seed", "output_dir",
        "num_tasks", "train_sizes", "val_sizes", "kb_size", "shared_kb", "input_dim",
        "cluster_count", "cluster_spread", "noise_scale", "difficulty", "task_noise_dims",
        "task_noise_gain", "subspace_dims", "off_subspace_scale",
        "embed_dim", "hidden_dims", "prefix_mode", "task_types",
        "lr", "warmup_fraction", "warmup_epochs", "episodes", "epochs_per_episode",
        "base_optimizer",
        "tau", "tau_end", "tau_schedule", "beta", "burn_in", "median_epsilon",
        "adaptive_episodes",
        "mixing_temperature", "batch_total", "n_neg",
        "cgd_rho", "gradnorm_alpha", "gradnorm_lr",
        "eval_k", "entropy_threshold", "activation_threshold",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "method" => self.method = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "num_tasks" => {
                let k: usize = parse(key, v)?;
                self.tasks.num_tasks = k;
                self.encoder.num_tasks = k;
            }
            "train_sizes" => self.tasks.train_sizes = parse_list(key, v)?,
            "val_sizes" => self.tasks.val_sizes = parse_list(key, v)?,
            "kb_size" => self.tasks.kb_size = parse(key, v)?,
            "shared_kb" => self.tasks.shared_kb = parse(key, v)?,
            "input_dim" => {
                let n: usize = parse(key, v)?;
                self.tasks.input_dim = n;
                self.encoder.input_dim = n;
            }
            "cluster_count" => self.tasks.cluster_count = parse(key, v)?,
            "cluster_spread" => self.tasks.cluster_spread = parse(key, v)?,
            "noise_scale" => self.tasks.noise_scale = parse(key, v)?,
            "difficulty" => self.tasks.difficulty = parse_list(key, v)?,
            "task_noise_dims" => self.tasks.task_noise_dims = parse(key, v)?,
            "task_noise_gain" => self.tasks.task_noise_gain = parse(key, v)?,
            "subspace_dims" => self.tasks.subspace_dims = parse(key, v)?,
            "off_subspace_scale" => self.tasks.off_subspace_scale = parse(key, v)?,
            "embed_dim" => self.encoder.embed_dim = parse(key, v)?,
            "hidden_dims" => self.encoder.hidden_dims = parse_list(key, v)?,
            "prefix_mode" => self.encoder.prefix_mode = v.parse()?,
            "task_types" => self.encoder.task_types = parse_list(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "warmup_fraction" => self.warmup_fraction = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "episodes" => self.episodes = parse(key, v)?,
            "epochs_per_episode" => self.epochs_per_episode = parse(key, v)?,
            "base_optimizer" => self.base_optimizer = v.parse()?,
            "tau" => self.tau = parse(key, v)?,
            "tau_end" => self.tau_end = parse(key, v)?,
            "tau_schedule" => {
                self.tau_schedule = match v {
                    "fixed" => TauScheduleKind::Fixed,
                    "exp_decay" => TauScheduleKind::ExpDecay,
                    other => {
                        return Err(Error::InvalidConfig(format!("unknown tau schedule `{other}`")))
                    }
                }
            }
            "beta" => self.beta = parse(key, v)?,
            "burn_in" => self.burn_in = parse(key, v)?,
            "median_epsilon" => self.median_epsilon = parse(key, v)?,
            "adaptive_episodes" => self.adaptive_episodes = parse(key, v)?,
            "mixing_temperature" => self.mixing_temperature = parse(key, v)?,
            "batch_total" => self.batch_total = parse(key, v)?,
            "n_neg" => self.n_neg = parse(key, v)?,
            "cgd_rho" => self.cgd_rho = parse(key, v)?,
            "gradnorm_alpha" => self.gradnorm_alpha = parse(key, v)?,
            "gradnorm_lr" => self.gradnorm_lr = parse(key, v)?,
            "eval_k" => self.eval_k = parse(key, v)?,
            "entropy_threshold" => self.entropy_threshold = parse(key, v)?,
            "activation_threshold" => self.activation_threshold = parse(key, v)?,
            other => return Err(Error::InvalidConfig(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got `{assignment}`")))?;
        self.set(k, v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                self.set_assignment(line)?;
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let t = &self.tasks;
        let e = &self.encoder;
        let pairs: Vec<(&'static str, String)> = vec![
            ("method", self.method.to_string()),
            ("seed", self.seed.to_string()),
            (
                "output_dir",
                self.output_dir
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("num_tasks", t.num_tasks.to_string()),
            ("train_sizes", join(&t.train_sizes)),
            ("val_sizes", join(&t.val_sizes)),
            ("kb_size", t.kb_size.to_string()),
            ("shared_kb", t.shared_kb.to_string()),
            ("input_dim", t.input_dim.to_string()),
            ("cluster_count", t.cluster_count.to_string()),
            ("cluster_spread", t.cluster_spread.to_string()),
            ("noise_scale", t.noise_scale.to_string()),
            ("difficulty", join(&t.difficulty)),
            ("task_noise_dims", t.task_noise_dims.to_string()),
            ("task_noise_gain", t.task_noise_gain.to_string()),
            ("subspace_dims", t.subspace_dims.to_string()),
            ("off_subspace_scale", t.off_subspace_scale.to_string()),
            ("embed_dim", e.embed_dim.to_string()),
            ("hidden_dims", join(&e.hidden_dims)),
            ("prefix_mode", e.prefix_mode.to_string()),
            ("task_types", join(&e.task_types)),
            ("lr", self.lr.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("episodes", self.episodes.to_string()),
            ("epochs_per_episode", self.epochs_per_episode.to_string()),
            (
                "base_optimizer",
                match self.base_optimizer {
                    BaseOptimizerKind::Adam => "adam",
                    BaseOptimizerKind::Sgd => "sgd",
                }
                .to_string(),
            ),
            ("tau", self.tau.to_string()),
            ("tau_end", self.tau_end.to_string()),
            (
                "tau_schedule",
                match self.tau_schedule {
                    TauScheduleKind::Fixed => "fixed",
                    TauScheduleKind::ExpDecay => "exp_decay",
                }
                .to_string(),
            ),
            ("beta", self.beta.to_string()),
            ("burn_in", self.burn_in.to_string()),
            ("median_epsilon", self.median_epsilon.to_string()),
            ("adaptive_episodes", self.adaptive_episodes.to_string()),
            ("mixing_temperature", self.mixing_temperature.to_string()),
            ("batch_total", self.batch_total.to_string()),
            ("n_neg", self.n_neg.to_string()),
            ("cgd_rho", self.cgd_rho.to_string()),
            ("gradnorm_alpha", self.gradnorm_alpha.to_string()),
            ("gradnorm_lr", self.gradnorm_lr.to_string()),
            ("eval_k", self.eval_k.to_string()),
            ("entropy_threshold", self.entropy_threshold.to_string()),
            ("activation_threshold", self.activation_threshold.to_string()),
        ];
        debug_assert_eq!(pairs.len(), Self::KEYS.len());
        pairs
    }

    /// The fully resolved configuration in the same format `from_file` reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn sensitivity_settings(&self) -> SensitivitySettings {
        SensitivitySettings {
            beta: self.beta,
            schedule: match self.tau_schedule {
                TauScheduleKind::Fixed => TemperatureSchedule::Fixed { tau: self.tau },
                TauScheduleKind::ExpDecay => TemperatureSchedule::ExponentialDecay {
                    start: self.tau,
                    end: self.tau_end,
                },
            },
            burn_in_fraction: self.burn_in,
            median_epsilon: self.median_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tasks.validate()?;
        self.encoder.validate()?;
        if self.tasks.num_tasks != self.encoder.num_tasks
            || self.tasks.input_dim != self.encoder.input_dim
        {
            return Err(Error::InvalidConfig(
                "task suite and encoder disagree on num_tasks or input_dim".into(),
            ));
        }
        if self.episodes == 0 || self.epochs_per_episode == 0 {
            return Err(Error::InvalidConfig(
                "episodes and epochs_per_episode must be >= 1".into(),
            ));
        }
        if self.adaptive_episodes > self.episodes {
            return Err(Error::InvalidConfig(
                "adaptive_episodes cannot exceed episodes".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig(
                "lr must be > 0 and warmup_fraction in [0, 1)".into(),
            ));
        }
        if self.n_neg == 0 || self.eval_k == 0 {
            return Err(Error::InvalidConfig("n_neg and eval_k must be >= 1".into()));
        }
        if self.batch_total < self.tasks.num_tasks {
            return Err(Error::InvalidConfig("batch_total must be >= num_tasks".into()));
        }
        self.sensitivity_settings().validate()
    }
}
