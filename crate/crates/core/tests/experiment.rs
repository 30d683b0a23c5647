//! Training-loop invariants on seconds-scale configurations.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taco_core::ann_index::refresh_negatives;
use taco_core::baselines::{naive_combine, uniform_weights};
use taco_core::dual_encoder::init_params;
use taco_core::experiment::runner::generate_for;
use taco_core::experiment::{
    evaluate, run_experiment, run_experiment_with_artifacts, Checkpoint, Method,
};
use taco_core::optim::{BaseOptimizer, LrSchedule, Sgd};
use taco_core::taco::{
    taco_step, task_gradients, SensitivitySettings, SensitivityState, TemperatureSchedule,
};
use taco_core::task_suite::{mixing_batch_sizes, BatchSchedule};
use taco_core::Error;

#[test]
fn identical_config_and_seed_give_identical_reports() {
    for method in ["taco", "pcgrad", "gradnorm", "task_specific"] {
        let mut cfg = common::tiny_config();
        cfg.set("method", method).unwrap();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert!(a.same_metrics(&b), "{method}");
        cfg.seed = 1;
        let c = run_experiment(&cfg).unwrap();
        assert!(!a.same_metrics(&c), "{method}: seed had no effect");
    }
}

#[test]
fn methods_share_the_pre_adaptive_trajectory() {
    let mut cfg = common::tiny_config();
    let mut reports = Vec::new();
    for method in ["naive", "taco", "pcgrad", "cgd", "gradnorm"] {
        cfg.set("method", method).unwrap();
        reports.push(run_experiment(&cfg).unwrap());
    }
    // Only the last episode differs between methods.
    let last = cfg.episodes;
    for r in &reports[1..] {
        assert_eq!(r.episodes[..last], reports[0].episodes[..last], "{}", r.method);
    }
}

#[test]
fn huge_temperature_tracks_the_naive_run() {
    let mut cfg = common::tiny_config();
    cfg.set("method", "naive").unwrap();
    let naive = run_experiment_with_artifacts(&cfg).unwrap();
    cfg.set("method", "taco").unwrap();
    cfg.set("tau", "1e9").unwrap();
    let taco = run_experiment_with_artifacts(&cfg).unwrap();
    let (a, b) = (&naive.params[0].0, &taco.params[0].0);
    let max_diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(max_diff < 1e-6, "max parameter difference {max_diff}");
}

/// During burn-in the adaptive step is the naive step, bit for bit, for a
/// plain SGD base.
#[test]
fn burn_in_steps_equal_naive_steps_exactly() {
    let cfg = common::tiny_config();
    let dataset = generate_for(&cfg).unwrap();
    let enc = &cfg.encoder;
    let negatives = refresh_negatives(0, &init_params(enc, 3).unwrap(), &dataset, enc, 2, 5, 0).unwrap();
    let sizes = mixing_batch_sizes(&dataset.train_sizes(), 4.0, cfg.batch_total).unwrap();
    let schedule = LrSchedule {
        peak_lr: 0.05,
        warmup_fraction: 0.0,
        total_steps: 100,
    };
    let settings = SensitivitySettings {
        beta: 0.9,
        schedule: TemperatureSchedule::Fixed { tau: 2.0 },
        burn_in_fraction: 0.5,
        median_epsilon: 1e-12,
    };
    let mut state = SensitivityState::new(enc.num_params(), 3, settings, 20).unwrap();
    let mut p_taco = init_params(enc, 3).unwrap();
    let mut p_naive = p_taco.clone();
    let (mut opt_taco, mut opt_naive) = (Sgd::new(schedule), Sgd::new(schedule));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut sched = BatchSchedule::new(&dataset.train_sizes(), sizes, &mut rng).unwrap();
    for step in 0..20 {
        let batches = sched.next_step_batches(&dataset, &negatives, &mut rng).unwrap();
        let (_, g) = task_gradients(&p_naive, &batches, enc).unwrap();
        opt_naive
            .step(&mut p_naive, &naive_combine(&g, &uniform_weights(3)).unwrap())
            .unwrap();
        taco_step(&mut p_taco, &batches, &mut state, &mut opt_taco, enc).unwrap();
        if step < 10 {
            assert_eq!(p_taco, p_naive, "burn-in step {step}");
        }
    }
    assert_ne!(p_taco, p_naive, "adaptive steps never kicked in");
}

#[test]
fn task_specific_models_are_independent() {
    let mut cfg = common::tiny_config();
    cfg.set("method", "task_specific").unwrap();
    let base = run_experiment_with_artifacts(&cfg).unwrap();
    assert_eq!(base.params.len(), 3);
    assert!(base.report.specialization.is_none());

    // Perturbing task 1's data must leave tasks 0 and 2 untouched.
    cfg.set("difficulty", "0.6,3,1.4").unwrap();
    let perturbed = run_experiment_with_artifacts(&cfg).unwrap();
    assert_eq!(base.params[0], perturbed.params[0]);
    assert_eq!(base.params[2], perturbed.params[2]);
    assert_ne!(base.params[1], perturbed.params[1]);
    for (a, b) in base.report.episodes.iter().zip(&perturbed.report.episodes) {
        assert_eq!(a.tasks[0], b.tasks[0]);
        assert_eq!(a.tasks[2], b.tasks[2]);
    }
}

#[test]
fn checkpoints_reproduce_reported_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config();
    cfg.output_dir = Some(dir.path().to_path_buf());
    let report = run_experiment(&cfg).unwrap();
    let dataset = generate_for(&cfg).unwrap();
    for e in 0..=cfg.episodes {
        let ckpt = Checkpoint::load(&dir.path().join(format!("checkpoints/episode_{e}.bin"))).unwrap();
        assert_eq!(ckpt.episode, e as u64);
        assert!(ckpt.adam.is_some());
        let metrics = evaluate(&ckpt.params, &dataset, &ckpt.encoder, cfg.eval_k).unwrap();
        assert_eq!(metrics, report.episodes[e].tasks);
    }
    let last = Checkpoint::load(&dir.path().join(format!("checkpoints/episode_{}.bin", cfg.episodes))).unwrap();
    let state = last.sensitivity.expect("adaptive episode tracks sensitivity");
    assert_eq!(state.step, state.total_steps);
}

#[test]
fn every_method_runs_and_reports_each_task() {
    for method in [
        Method::Taco,
        Method::Naive,
        Method::Pcgrad,
        Method::Cgd,
        Method::Gradnorm,
        Method::TaskSpecific,
    ] {
        let mut cfg = common::tiny_config();
        cfg.method = method;
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.episodes.len(), cfg.episodes + 1);
        for ep in &r.episodes {
            assert_eq!(ep.tasks.iter().map(|t| t.task).collect::<Vec<_>>(), vec![0, 1, 2]);
            for t in &ep.tasks {
                assert!((0.0..=1.0).contains(&t.r_precision));
                assert!(t.recall_at_k >= t.r_precision);
            }
        }
    }
}

#[test]
fn exponential_tau_decay_over_last_episodes() {
    let mut cfg = common::tiny_config();
    cfg.set("adaptive_episodes", "2").unwrap();
    cfg.set("tau_schedule", "exp_decay").unwrap();
    cfg.set("tau", "4").unwrap();
    cfg.set("tau_end", "0.5").unwrap();
    let r = run_experiment_with_artifacts(&cfg).unwrap();
    let s = r.sensitivity.unwrap();
    assert_eq!(s.step, s.total_steps);
    assert!((s.tau() - 0.5).abs() < 1e-12);
    assert!(r.report.episodes[1] != run_experiment(&common::tiny_config()).unwrap().episodes[1]);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = common::tiny_config();
    cfg.episodes = 0;
    assert!(matches!(run_experiment(&cfg), Err(Error::InvalidConfig(_))));
    let mut cfg = common::tiny_config();
    cfg.adaptive_episodes = cfg.episodes + 1;
    assert!(matches!(run_experiment(&cfg), Err(Error::InvalidConfig(_))));
    let mut cfg = common::tiny_config();
    cfg.tau = 0.0;
    assert!(run_experiment(&cfg).is_err());
}
