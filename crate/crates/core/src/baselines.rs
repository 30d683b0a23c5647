//! Reference multitask gradient combiners.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::matrix::dot;
use crate::taco::GradientMatrix;

/// `Σ_k weights_k · G_k`.
pub fn naive_combine(grads: &GradientMatrix, weights: &[f64]) -> Result<Vec<f64>> {
    check_len(grads.num_tasks(), weights.len(), "combine weights")?;
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("combine weights must be >= 0".into()));
    }
    let mut out = vec![0.0; grads.dim()];
    for i in 0..grads.dim() {
        let mut acc = 0.0;
        for (k, w) in weights.iter().enumerate() {
            acc += w * grads.column(k)[i];
        }
        out[i] = acc;
    }
    Ok(out)
}

/// Uniform `1/K` weights, the balanced-sampling multitask objective.
pub fn uniform_weights(num_tasks: usize) -> Vec<f64> {
    vec![1.0 / num_tasks as f64; num_tasks]
}

/// Gradient surgery: each task gradient is projected off every other task's
/// gradient it conflicts with (negative inner product), visiting the other
/// tasks in random order. Returns the mean of the projected gradients.
pub fn pcgrad_combine<R: Rng + ?Sized>(grads: &GradientMatrix, rng: &mut R) -> Vec<f64> {
    let k = grads.num_tasks();
    let d = grads.dim();
    let sq_norms: Vec<f64> = grads.columns().iter().map(|g| dot(g, g)).collect();
    let mut out = vec![0.0; d];
    for i in 0..k {
        let mut g = grads.column(i).to_vec();
        let mut others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        others.shuffle(rng);
        for j in others {
            let gj = grads.column(j);
            let overlap = dot(&g, gj);
            if overlap < 0.0 && sq_norms[j] > 0.0 {
                let c = overlap / sq_norms[j];
                for (a, b) in g.iter_mut().zip(gj) {
                    *a -= c * b;
                }
            }
        }
        for (o, a) in out.iter_mut().zip(&g) {
            *o += a;
        }
    }
    out.iter_mut().for_each(|o| *o /= k as f64);
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = dot(a, a).sqrt() * dot(b, b).sqrt();
    if denom > 0.0 {
        dot(a, b) / denom
    } else {
        0.0
    }
}

/// Common-direction combination: a convex combination of task gradients
/// with weights `∝ max(0, cos(G_k, mean))^rho`, falling back to uniform when
/// no task agrees with the mean direction.
pub fn cgd_combine(grads: &GradientMatrix, rho: f64) -> Vec<f64> {
    let k = grads.num_tasks();
    let uniform = uniform_weights(k);
    let mean = naive_combine(grads, &uniform).expect("shape checked by construction");
    let raw: Vec<f64> = grads
        .columns()
        .iter()
        .map(|g| cosine(g, &mean).max(0.0).powf(rho))
        .collect();
    let sum: f64 = raw.iter().sum();
    let alpha = if sum > 0.0 {
        raw.iter().map(|a| a / sum).collect()
    } else {
        uniform
    };
    naive_combine(grads, &alpha).expect("shape checked by construction")
}

/// Loss weights learned by gradient-norm balancing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradNormState {
    pub weights: Vec<f64>,
    pub initial_losses: Option<Vec<f64>>,
    pub alpha: f64,
    pub lr: f64,
}

impl GradNormState {
    pub fn new(num_tasks: usize, alpha: f64, lr: f64) -> Self {
        Self {
            weights: vec![1.0; num_tasks],
            initial_losses: None,
            alpha,
            lr,
        }
    }

    /// Current weights scaled to sum to one, for use with [`naive_combine`].
    pub fn combine_weights(&self) -> Vec<f64> {
        let k = self.weights.len() as f64;
        self.weights.iter().map(|w| w / k).collect()
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One gradient step on `Σ_k |w_k n_k − n̄ r_k^α|` with respect to the weights,
/// treating the target `n̄ r_k^α` as a constant, then renormalizing the
/// weights to sum to `K`. The first call records the initial losses.
pub fn gradnorm_update(
    state: &mut GradNormState,
    losses: &[f64],
    shared_grad_norms: &[f64],
) -> Result<()> {
    let k = state.weights.len();
    check_len(k, losses.len(), "gradnorm losses")?;
    check_len(k, shared_grad_norms.len(), "gradnorm norms")?;
    if losses.iter().chain(shared_grad_norms).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradnorm inputs"));
    }
    let initial = state.initial_losses.get_or_insert_with(|| losses.to_vec());
    if initial.iter().any(|&l| l == 0.0) {
        return Err(Error::InvalidArgument("initial task loss is zero".into()));
    }
    let ratios: Vec<f64> = losses.iter().zip(initial.iter()).map(|(l, l0)| l / l0).collect();
    let mean_ratio = ratios.iter().sum::<f64>() / k as f64;
    let weighted: Vec<f64> = state
        .weights
        .iter()
        .zip(shared_grad_norms)
        .map(|(w, n)| w * n)
        .collect();
    let mean_norm = weighted.iter().sum::<f64>() / k as f64;
    for j in 0..k {
        let rate = if mean_ratio > 0.0 { ratios[j] / mean_ratio } else { 1.0 };
        let target = mean_norm * rate.powf(state.alpha);
        let grad = sign(weighted[j] - target) * shared_grad_norms[j];
        state.weights[j] = (state.weights[j] - state.lr * grad).max(1e-6);
    }
    let total: f64 = state.weights.iter().sum();
    state.weights.iter_mut().for_each(|w| *w *= k as f64 / total);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(cols: &[&[f64]]) -> GradientMatrix {
        GradientMatrix::from_columns(cols.iter().map(|c| c.to_vec()).collect()).unwrap()
    }

    #[test]
    fn naive_examples() {
        let m = g(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(naive_combine(&m, &[0.0, 1.0, 0.0]).unwrap(), vec![3.0, 4.0]);
        let mean = naive_combine(&m, &uniform_weights(3)).unwrap();
        assert!((mean[0] - 3.0).abs() < 1e-15 && (mean[1] - 4.0).abs() < 1e-15);
        let zero = g(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(naive_combine(&zero, &[0.5, 0.5]).unwrap(), vec![0.0, 0.0]);
        assert!(naive_combine(&m, &[1.0, -1.0, 0.0]).is_err());
        assert!(naive_combine(&m, &[1.0]).is_err());
    }

    #[test]
    fn pcgrad_projects_conflicts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = g(&[&[1.0, 0.0], &[-1.0, 1.0]]);
        // g1 -> [0.5, 0.5]; g2 against g1: [-1,1]·[1,0] = -1 -> [0, 1].
        assert_eq!(pcgrad_combine(&m, &mut rng), vec![0.25, 0.75]);

        let ortho = g(&[&[1.0, 0.0], &[0.0, 2.0]]);
        assert_eq!(pcgrad_combine(&ortho, &mut rng), vec![0.5, 1.0]);

        let single = g(&[&[0.3, -0.7]]);
        assert_eq!(pcgrad_combine(&single, &mut rng), vec![0.3, -0.7]);

        let with_zero = g(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(pcgrad_combine(&with_zero, &mut rng), vec![0.5, 0.0]);
    }

    #[test]
    fn cgd_examples() {
        let same = g(&[&[1.0, -2.0], &[1.0, -2.0]]);
        assert_eq!(cgd_combine(&same, 2.0), vec![1.0, -2.0]);
        let single = g(&[&[0.4, 0.1]]);
        assert_eq!(cgd_combine(&single, 2.0), vec![0.4, 0.1]);
        let ortho = g(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = cgd_combine(&ortho, 2.0);
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.5).abs() < 1e-15);
        // A task opposed to the mean gets no weight.
        let opposed = g(&[&[2.0, 0.0], &[2.0, 0.0], &[-1.0, 0.0]]);
        assert_eq!(cgd_combine(&opposed, 2.0), vec![2.0, 0.0]);
    }

    #[test]
    fn gradnorm_fixed_point_and_renormalization() {
        let mut s = GradNormState::new(3, 1.5, 0.025);
        assert_eq!(s.weights, vec![1.0; 3]);
        gradnorm_update(&mut s, &[2.0, 2.0, 2.0], &[0.5, 0.5, 0.5]).unwrap();
        gradnorm_update(&mut s, &[1.0, 1.0, 1.0], &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(s.weights, vec![1.0; 3]);

        gradnorm_update(&mut s, &[1.5, 0.5, 1.0], &[3.0, 0.1, 1.0]).unwrap();
        assert!((s.weights.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        // Largest norm is pulled down.
        assert!(s.weights[0] < 1.0);
    }

    #[test]
    fn gradnorm_rejects_zero_initial_loss() {
        let mut s = GradNormState::new(2, 1.5, 0.025);
        assert!(gradnorm_update(&mut s, &[0.0, 1.0], &[1.0, 1.0]).is_err());
    }
}
