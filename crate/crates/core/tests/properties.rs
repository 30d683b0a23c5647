//! Invariants checked over randomized inputs.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taco_core::ann_index::EmbeddingIndex;
use taco_core::baselines::{cgd_combine, naive_combine, pcgrad_combine, uniform_weights};
use taco_core::dual_encoder::{init_params, nce_loss, nce_loss_and_gradient, ParamVector};
use taco_core::matrix::{dot, Matrix};
use taco_core::taco::{
    adaptive_combine, mixing_weights, normalize_by_median, GradientMatrix, SensitivitySettings,
    SensitivityState, TaskMatrix, TemperatureSchedule,
};
use taco_core::task_suite::mixing_batch_sizes;

fn state_with(sigma: TaskMatrix, tau: f64) -> SensitivityState {
    let mut s = SensitivityState::new(
        sigma.dim(),
        sigma.num_tasks(),
        SensitivitySettings {
            schedule: TemperatureSchedule::Fixed { tau },
            burn_in_fraction: 0.0,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    s.sigma_bar = sigma;
    s
}

fn grads_strategy(max_k: usize, max_d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_k, 1..=max_d).prop_flat_map(|(k, d)| {
        prop::collection::vec(prop::collection::vec(-10.0..10.0f64, d), k)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nce_gradient_matches_central_differences(seed in any::<u64>(), k in 1usize..4, hidden in 2usize..6) {
        let mut rng = common::rng(seed);
        let cfg = common::small_encoder(3, k, vec![hidden]);
        let targets = common::gaussian_matrix(&mut rng, 12, 3);
        let batch = common::random_batch(&mut rng, &targets, k - 1, 4, 2);
        let params = init_params(&cfg, seed).unwrap();
        let (_, grad) = nce_loss_and_gradient(&params, &batch, &cfg).unwrap();
        let h = 1e-5;
        for i in 0..params.len() {
            let mut p = params.clone();
            p.0[i] += h;
            let up = nce_loss(&p, &batch, &cfg).unwrap();
            p.0[i] -= 2.0 * h;
            let down = nce_loss(&p, &batch, &cfg).unwrap();
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad.0[i]).abs() / fd.abs().max(grad.0[i].abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "coord {i}: fd {fd} analytic {}", grad.0[i]);
        }
    }

    #[test]
    fn batch_sizes_are_scale_invariant(
        sizes in prop::collection::vec(1usize..5000, 1..9),
        factor in 1usize..50,
        c in 0.5f64..8.0,
        extra in 0usize..200,
    ) {
        let total = sizes.len() + extra;
        let scaled: Vec<usize> = sizes.iter().map(|n| n * factor).collect();
        let a = mixing_batch_sizes(&sizes, c, total).unwrap();
        let b = mixing_batch_sizes(&scaled, c, total).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|&x| x >= 1));
        // Round-half-to-even leaves at most half a unit of residual per task.
        let sum: usize = a.iter().sum();
        prop_assert!((sum as f64 - total as f64).abs() <= sizes.len() as f64 * 0.5 + 1.0);
    }

    #[test]
    fn uniform_sensitivity_reduces_to_the_mean(cols in grads_strategy(6, 20), level in 0.0f64..50.0, tau in 0.1f64..10.0) {
        let g = GradientMatrix::from_columns(cols.clone()).unwrap();
        let sigma = TaskMatrix::from_columns(&vec![vec![level; g.dim()]; g.num_tasks()]).unwrap();
        let combined = adaptive_combine(&g, &state_with(sigma, tau)).unwrap();
        let naive = naive_combine(&g, &uniform_weights(g.num_tasks())).unwrap();
        for (a, b) in combined.iter().zip(&naive) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn mixing_rows_are_stochastic(cols in grads_strategy(6, 20), tau in prop_oneof![0.05f64..20.0, -20.0f64..-0.05]) {
        let sigma = TaskMatrix::from_columns(
            &cols.iter().map(|c| c.iter().map(|v| v.abs() * 3.0).collect()).collect::<Vec<Vec<f64>>>(),
        ).unwrap();
        let u = mixing_weights(&state_with(sigma, tau));
        for i in 0..u.dim() {
            let row = u.row(i);
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_combine_is_homogeneous(cols in grads_strategy(5, 16), scale in -4.0f64..4.0) {
        let g = GradientMatrix::from_columns(cols.clone()).unwrap();
        let sigma = TaskMatrix::from_columns(
            &cols.iter().map(|c| c.iter().map(|v| v.abs()).collect()).collect::<Vec<Vec<f64>>>(),
        ).unwrap();
        let state = state_with(sigma, 2.0);
        let scaled = GradientMatrix::from_columns(
            cols.iter().map(|c| c.iter().map(|v| v * scale).collect()).collect(),
        ).unwrap();
        let a = adaptive_combine(&g, &state).unwrap();
        let b = adaptive_combine(&scaled, &state).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x * scale - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn median_normalization_gives_unit_median(cols in grads_strategy(4, 25)) {
        let raw = TaskMatrix::from_columns(
            &cols.iter().map(|c| c.iter().map(|v| v.abs() + 1e-3).collect()).collect::<Vec<Vec<f64>>>(),
        ).unwrap();
        let n = normalize_by_median(&raw, 1e-12);
        for k in 0..n.num_tasks() {
            let mut col = n.column(k);
            col.sort_by(f64::total_cmp);
            prop_assert!((col[(col.len() - 1) / 2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pcgrad_removes_pairwise_conflict(cols in grads_strategy(2, 12).prop_filter("two tasks", |c| c.len() == 2), seed in any::<u64>()) {
        let g = GradientMatrix::from_columns(cols.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = pcgrad_combine(&g, &mut rng);
        let (a, b) = (&cols[0], &cols[1]);
        let ab = dot(a, b);
        if ab >= 0.0 {
            let mean: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
            for (x, y) in out.iter().zip(&mean) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        } else {
            // Each projected gradient is orthogonal to the other task's, so the
            // combination never opposes either task.
            let scale = 1e-9 * (1.0 + dot(a, a) + dot(b, b));
            prop_assert!(dot(&out, a) >= -scale);
            prop_assert!(dot(&out, b) >= -scale);
        }
    }

    #[test]
    fn cgd_is_convex(cols in grads_strategy(5, 10), rho in 0.5f64..4.0) {
        let g = GradientMatrix::from_columns(cols.clone()).unwrap();
        let out = cgd_combine(&g, rho);
        for i in 0..g.dim() {
            let lo = cols.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
            let hi = cols.iter().map(|c| c[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[i] >= lo - 1e-9 && out[i] <= hi + 1e-9);
        }
    }

    #[test]
    fn search_matches_full_sort(seed in any::<u64>(), n in 1usize..60, dim in 1usize..6, k in 1usize..60, quantize in any::<bool>()) {
        let mut rng = common::rng(seed);
        let mut emb = common::gaussian_matrix(&mut rng, n, dim);
        let mut q = common::gaussian_matrix(&mut rng, 1, dim).row(0).to_vec();
        if quantize {
            // Coarse values force exact score ties.
            let round = |v: &mut f64| *v = (*v * 2.0).round() / 2.0;
            emb = Matrix::from_vec(n, dim, emb.as_slice().iter().map(|v| { let mut v = *v; round(&mut v); v }).collect()).unwrap();
            q.iter_mut().for_each(round);
        }
        let ids: Vec<usize> = (0..n).map(|i| i * 7 + 3).collect();
        let index = EmbeddingIndex::new(emb.clone(), ids.clone(), 0).unwrap();
        let k = k.min(n);
        let got = index.search(&q, k).unwrap();
        let mut all: Vec<(f64, usize)> = (0..n).map(|i| (dot(&q, emb.row(i)), ids[i])).collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let want: Vec<usize> = all.into_iter().take(k).map(|(_, id)| id).collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn zero_parameters_give_zero_raw_sensitivity() {
    let p = ParamVector::zeros(5);
    let s = taco_core::taco::raw_sensitivity(&[1.0, -2.0, 3.0, 0.5, 9.0], p.as_slice()).unwrap();
    assert!(s.iter().all(|&v| v == 0.0));
}
