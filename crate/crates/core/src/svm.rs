//! Linear SVMs used as node-local experts.
//!
//! Training minimizes `0.5 |w|^2 + C * sum hinge(y (w.x + b))` with
//! `y in {-1, +1}` and the bias unregularized. The dual is solved by
//! two-variable sequential minimal optimization with second-order working
//! set selection; the bias is then refit exactly for the final weights.

use rand::seq::index;

use crate::error::{Error, Result};
use crate::seed;

/// Floor for the curvature of a working-set pair.
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearExpert {
    weights: Vec<f32>,
    bias: f32,
}

impl LinearExpert {
    pub fn new(weights: Vec<f32>, bias: f32) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("expert needs at least one weight".into()));
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(LinearExpert { weights, bias })
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> f32 {
        self.bias
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `b + w.x`.
    pub fn score(&self, x: &[f32]) -> Result<f32> {
        if x.len() != self.weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "expert has {} weights, input has {} features",
                self.weights.len(),
                x.len()
            )));
        }
        Ok(self.score_unchecked(x))
    }

    /// Score with the dot product accumulated in `f64` in index order, so
    /// training and prediction agree bit for bit.
    #[inline]
    pub(crate) fn score_unchecked(&self, x: &[f32]) -> f32 {
        debug_assert_eq!(x.len(), self.weights.len());
        let mut acc = f64::from(self.bias);
        for (w, v) in self.weights.iter().zip(x) {
            acc += f64::from(*w) * f64::from(*v);
        }
        acc as f32
    }

    /// Score of a descriptor restricted to the given coordinates.
    #[inline]
    pub(crate) fn score_gathered(&self, descriptor: &[f32], indices: &[usize]) -> f32 {
        debug_assert_eq!(indices.len(), self.weights.len());
        let mut acc = f64::from(self.bias);
        for (w, &i) in self.weights.iter().zip(indices) {
            acc += f64::from(*w) * f64::from(descriptor[i]);
        }
        acc as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    pub max_epochs: usize,
    /// Stop once the projected-gradient spread drops below this.
    pub tolerance: f64,
    pub seed: u64,
    /// Larger sample sets are uniformly subsampled to this size.
    pub max_node_samples: usize,
    /// Scale C per class inversely to class frequency.
    pub balance_classes: bool,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 0.5,
            max_epochs: 1000,
            tolerance: 1e-4,
            seed: 0,
            max_node_samples: 2000,
            balance_classes: false,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "SVM C must be positive, got {}",
                self.c
            )));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::InvalidArgument("SVM tolerance must be positive".into()));
        }
        if self.max_epochs == 0 || self.max_node_samples < 2 {
            return Err(Error::InvalidArgument(
                "SVM needs at least one epoch and two samples".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Default)]
pub struct TrainingTrace {
    /// Primal objective of the best iterate seen after each epoch.
    pub objective: Vec<f64>,
    pub converged: bool,
    /// Samples actually used (after subsampling).
    pub samples_used: usize,
}

/// Primal objective `0.5 |w|^2 + C * sum hinge` with the bias unregularized.
pub fn objective(expert: &LinearExpert, samples: &[f32], labels: &[u8], c: f64) -> f64 {
    let dim = expert.dim();
    let reg: f64 = expert.weights.iter().map(|&w| f64::from(w).powi(2)).sum::<f64>() * 0.5;
    let loss: f64 = samples
        .chunks_exact(dim)
        .zip(labels)
        .map(|(x, &l)| {
            let y = if l == 1 { 1.0 } else { -1.0 };
            (1.0 - y * f64::from(expert.score_unchecked(x))).max(0.0)
        })
        .sum();
    reg + c * loss
}

pub fn train_svm(samples: &[f32], dim: usize, labels: &[u8], config: &SvmConfig) -> Result<LinearExpert> {
    train_svm_traced(samples, dim, labels, config).map(|(e, _)| e)
}

pub fn train_svm_traced(
    samples: &[f32],
    dim: usize,
    labels: &[u8],
    config: &SvmConfig,
) -> Result<(LinearExpert, TrainingTrace)> {
    config.validate()?;
    if dim == 0 || samples.len() != dim * labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} values for {} samples of dimension {dim}",
            samples.len(),
            labels.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut rng = seed::rng(config.seed);

    let n_all = labels.len();
    let chosen: Vec<usize> = if n_all > config.max_node_samples {
        let mut idx = index::sample(&mut rng, n_all, config.max_node_samples).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n_all).collect()
    };
    let n = chosen.len();
    let positives = chosen.iter().filter(|&&i| labels[i] == 1).count();
    if n < 2 || positives == 0 || positives == n {
        return Err(Error::SingleClass);
    }

    let d = dim;
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for &i in &chosen {
        x.extend(samples[i * dim..(i + 1) * dim].iter().map(|&v| f64::from(v)));
        y.push(if labels[i] == 1 { 1.0f64 } else { -1.0 });
    }
    let (c_pos, c_neg) = if config.balance_classes {
        (
            config.c * n as f64 / (2.0 * positives as f64),
            config.c * n as f64 / (2.0 * (n - positives) as f64),
        )
    } else {
        (config.c, config.c)
    };
    let upper: Vec<f64> = y.iter().map(|&yi| if yi > 0.0 { c_pos } else { c_neg }).collect();
    let row = |i: usize| &x[i * d..(i + 1) * d];
    let sq: Vec<f64> = (0..n).map(|i| dot(row(i), row(i))).collect();

    let primal = |w: &[f64], b: f64| -> f64 {
        let loss: f64 = (0..n)
            .map(|i| upper[i] * (1.0 - y[i] * (dot(row(i), w) + b)).max(0.0))
            .sum();
        0.5 * dot(w, w) + loss
    };

    // Dual gradient G = Q alpha - 1, with w = sum alpha_i y_i x_i kept in
    // step. Only the active (unshrunk) variables' gradients are maintained;
    // the rest are rebuilt from w when they are needed again.
    let mut gram = KernelRows::new(n);
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let mut w = vec![0.0f64; d];
    let mut active: Vec<usize> = (0..n).collect();
    let shrink_every = n.min(1000);
    let mut next_i: Option<(usize, f64)> = None;
    // up: alpha_t y_t may increase; low: it may decrease
    let status = |t: usize, a: f64| {
        let (below, above) = (a < upper[t], a > 0.0);
        if y[t] > 0.0 {
            (below, above)
        } else {
            (above, below)
        }
    };
    let (mut up, mut low): (Vec<bool>, Vec<bool>) = (0..n).map(|t| status(t, 0.0)).unzip();

    let mut best_w = w.clone();
    let mut best_b = refit_bias(&x, &y, &upper, &w, 0.0);
    let mut best_obj = primal(&w, best_b);
    let mut trace = TrainingTrace {
        samples_used: n,
        ..Default::default()
    };
    let max_iters = config.max_epochs.saturating_mul(n);
    let mut iter = 0usize;
    loop {
        // i maximizes -y G over the up set
        let (i, g_max) = next_i.take().unwrap_or_else(|| {
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for &t in &active {
                let v = -y[t] * grad[t];
                if up[t] && v > best.1 {
                    best = (t, v);
                }
            }
            best
        });
        // j gives the largest second-order decrease among violating partners
        let mut j = usize::MAX;
        let mut g_min = f64::INFINITY;
        let mut best_decrease = f64::INFINITY;
        let mut ki = Vec::new();
        if i != usize::MAX {
            ki = gram.take(i, &x, d);
            for &t in &active {
                if !low[t] {
                    continue;
                }
                let v = -y[t] * grad[t];
                g_min = g_min.min(v);
                let diff = g_max - v;
                if diff > 0.0 {
                    let quad = (sq[i] + sq[t] - 2.0 * ki[t]).max(TAU);
                    let decrease = -diff * diff / quad;
                    if decrease < best_decrease {
                        best_decrease = decrease;
                        j = t;
                    }
                }
            }
        }
        let mut done = i == usize::MAX || j == usize::MAX || g_max - g_min <= config.tolerance;
        if done && active.len() < n {
            // Optimal on the active set: restore everything and re-check.
            for t in 0..n {
                grad[t] = y[t] * dot(row(t), &w) - 1.0;
            }
            active = (0..n).collect();
            done = false;
            if iter < max_iters {
                continue;
            }
        }
        if done || iter % n == n - 1 || iter >= max_iters {
            let rho = bias_estimate(&active, &y, &grad, &alpha, &upper);
            let b = refit_bias(&x, &y, &upper, &w, -rho);
            let obj = primal(&w, b);
            if obj < best_obj {
                best_obj = obj;
                best_w.copy_from_slice(&w);
                best_b = b;
            }
            trace.objective.push(best_obj);
        }
        if done {
            trace.converged = true;
            break;
        }
        if iter >= max_iters || i == usize::MAX || j == usize::MAX {
            break;
        }
        iter += 1;
        let kj = gram.take(j, &x, d);

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (ci, cj) = (upper[i], upper[j]);
        let quad = (sq[i] + sq[j] - 2.0 * ki[j]).max(TAU);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        (up[i], low[i]) = status(i, alpha[i]);
        (up[j], low[j]) = status(j, alpha[j]);
        let di = (alpha[i] - old_i) * y[i];
        let dj = (alpha[j] - old_j) * y[j];
        w.iter_mut()
            .zip(row(i).iter().zip(row(j)))
            .for_each(|(wk, (a, b))| *wk += di * a + dj * b);
        // the next step's i is selected in the same pass
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for &t in &active {
            grad[t] += y[t] * (di * ki[t] + dj * kj[t]);
            let v = -y[t] * grad[t];
            if up[t] && v > best.1 {
                best = (t, v);
            }
        }
        next_i = Some(best);
        gram.put(i, ki);
        gram.put(j, kj);

        if iter.is_multiple_of(shrink_every) {
            // Drop bounded variables that cannot enter a violating pair.
            let (mut up_max, mut low_max) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &t in &active {
                if up[t] {
                    up_max = up_max.max(-y[t] * grad[t]);
                }
                if low[t] {
                    low_max = low_max.max(y[t] * grad[t]);
                }
            }
            next_i = None;
            active.retain(|&t| {
                let g = grad[t];
                let shrink = if alpha[t] >= upper[t] {
                    if y[t] > 0.0 {
                        -g > up_max
                    } else {
                        -g > low_max
                    }
                } else if alpha[t] <= 0.0 {
                    if y[t] > 0.0 {
                        g > low_max
                    } else {
                        g > up_max
                    }
                } else {
                    false
                };
                !shrink
            });
        }
    }

    let weights: Vec<f32> = best_w.iter().map(|&v| v as f32).collect();
    Ok((LinearExpert::new(weights, best_b as f32)?, trace))
}

/// Rows of the linear Gram matrix, computed on demand and kept up to a
/// memory budget.
struct KernelRows {
    rows: Vec<Vec<f64>>,
    cached: usize,
    capacity: usize,
}

impl KernelRows {
    const BUDGET_BYTES: usize = 64 << 20;

    fn new(n: usize) -> Self {
        KernelRows {
            rows: vec![Vec::new(); n],
            cached: 0,
            capacity: (Self::BUDGET_BYTES / (8 * n.max(1))).max(2),
        }
    }

    fn take(&mut self, i: usize, x: &[f64], d: usize) -> Vec<f64> {
        let row = std::mem::take(&mut self.rows[i]);
        if !row.is_empty() {
            self.cached -= 1;
            return row;
        }
        let xi = &x[i * d..(i + 1) * d];
        x.chunks_exact(d).map(|xt| dot(xi, xt)).collect()
    }

    fn put(&mut self, i: usize, row: Vec<f64>) {
        if self.rows[i].is_empty() && self.cached < self.capacity {
            self.rows[i] = row;
            self.cached += 1;
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(p, q)| p * q)
        .sum();
    for (p, q) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += p[k] * q[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Offset `rho` (bias `-rho`) implied by the dual over the given variables:
/// the mean of `y G` over free ones, or the midpoint of its feasible range
/// when none are free.
fn bias_estimate(vars: &[usize], y: &[f64], grad: &[f64], alpha: &[f64], upper: &[f64]) -> f64 {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut sum, mut free) = (0.0, 0usize);
    for &t in vars {
        let yg = y[t] * grad[t];
        if alpha[t] >= upper[t] {
            if y[t] < 0.0 {
                hi = hi.min(yg);
            } else {
                lo = lo.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                hi = hi.min(yg);
            } else {
                lo = lo.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    if free > 0 {
        sum / free as f64
    } else if lo.is_finite() && hi.is_finite() {
        (lo + hi) / 2.0
    } else if lo.is_finite() {
        lo
    } else if hi.is_finite() {
        hi
    } else {
        0.0
    }
}

/// Bias minimizing the weighted hinge loss for fixed weights, chosen as the
/// point of the optimal interval nearest to `hint`.
fn refit_bias(x: &[f64], y: &[f64], c: &[f64], w: &[f64], hint: f64) -> f64 {
    let d = w.len();
    // Sample t's loss has a kink at b = y_t - w.x_t; passing it (left to
    // right) raises the slope by c_t. Far left the slope is -sum_{y=+1} c.
    let mut kinks: Vec<(f64, f64)> = (0..y.len())
        .map(|t| {
            let s: f64 = x[t * d..(t + 1) * d].iter().zip(w).map(|(a, b)| a * b).sum();
            (y[t] - s, c[t])
        })
        .collect();
    kinks.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut slope: f64 = -(0..y.len()).filter(|&t| y[t] > 0.0).map(|t| c[t]).sum::<f64>();
    let (mut lo, mut hi) = (f64::NAN, f64::NAN);
    for &(k, ck) in &kinks {
        let next = slope + ck;
        if slope <= 0.0 && next >= 0.0 {
            if lo.is_nan() {
                lo = k;
            }
            hi = k;
        }
        slope = next;
    }
    if lo.is_nan() {
        return hint;
    }
    hint.clamp(lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense grid search over (w, b) on [-3, 3]^2 with step 1e-3.
    fn grid_optimum(xs: &[f32], labels: &[u8], c: f64) -> f64 {
        let mut best = f64::INFINITY;
        for iw in -3000..=3000 {
            let w = iw as f64 * 1e-3;
            for ib in -3000..=3000 {
                let b = ib as f64 * 1e-3;
                let loss: f64 = xs
                    .iter()
                    .zip(labels)
                    .map(|(&x, &l)| {
                        let y = if l == 1 { 1.0 } else { -1.0 };
                        (1.0 - y * (w * f64::from(x) + b)).max(0.0)
                    })
                    .sum();
                best = best.min(0.5 * w * w + c * loss);
            }
        }
        best
    }

    #[test]
    fn separable_signs() {
        let e = train_svm(&[-1.0, 1.0], 1, &[0, 1], &SvmConfig::default()).unwrap();
        assert!(e.score(&[-1.0]).unwrap() < 0.0);
        assert!(e.score(&[1.0]).unwrap() > 0.0);
    }

    #[test]
    fn four_point_objective_near_grid_optimum() {
        let xs = [-2.0, -1.0, 1.0, 2.0];
        let labels = [0, 0, 1, 1];
        let e = train_svm(&xs, 1, &labels, &SvmConfig::default()).unwrap();
        let got = objective(&e, &xs, &labels, 0.5);
        let want = grid_optimum(&xs, &labels, 0.5);
        assert!((got - want).abs() <= 0.01 * want, "{got} vs grid {want}");
    }

    #[test]
    fn duplicated_data_keeps_sign_pattern() {
        let xs = [-2.0, 0.5, -1.0, 3.0, 1.0, -0.3, 2.0, 0.7];
        let labels = [0, 1, 1, 0];
        let cfg = SvmConfig::default();
        let e1 = train_svm(&xs, 2, &labels, &cfg).unwrap();
        let xs2 = [xs, xs].concat();
        let l2 = [labels, labels].concat();
        let e2 = train_svm(&xs2, 2, &l2, &cfg).unwrap();
        for x in xs.chunks(2) {
            let s1 = e1.score(x).unwrap();
            let s2 = e2.score(x).unwrap();
            assert_eq!(s1 > 0.0, s2 > 0.0, "{s1} vs {s2}");
        }
    }

    #[test]
    fn score_cases() {
        let e = LinearExpert::new(vec![0.0, 0.0], 0.7).unwrap();
        assert_eq!(e.score(&[5.0, -3.0]).unwrap(), 0.7);
        let e = LinearExpert::new(vec![1.0, 0.0], 0.0).unwrap();
        assert_eq!(e.score(&[3.0, 9.0]).unwrap(), 3.0);
        assert!(matches!(e.score(&[1.0]), Err(Error::DimensionMismatch(_))));

        let e = LinearExpert::new(vec![0.5, -2.0], 0.25).unwrap();
        let (a, b) = ([1.0, 2.0], [3.0, -1.0]);
        let sum = [a[0] + b[0], a[1] + b[1]];
        let lhs = e.score(&sum).unwrap();
        let rhs = e.score(&a).unwrap() + e.score(&b).unwrap() - e.bias();
        assert!((lhs - rhs).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = SvmConfig::default();
        assert!(matches!(
            train_svm(&[1.0, 2.0], 1, &[1, 1], &cfg),
            Err(Error::SingleClass)
        ));
        assert!(matches!(
            train_svm(&[1.0, f32::NAN], 1, &[0, 1], &cfg),
            Err(Error::NonFinite)
        ));
        let bad = SvmConfig { c: 0.0, ..cfg };
        assert!(train_svm(&[1.0, 2.0], 1, &[0, 1], &bad).is_err());
    }

    #[test]
    fn deterministic_and_subsampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 500;
        let xs: Vec<f32> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<u8> = xs.chunks(3).map(|r| u8::from(r[0] + 0.5 * r[1] > 0.1)).collect();
        let cfg = SvmConfig {
            max_node_samples: 100,
            seed: 5,
            ..Default::default()
        };
        let (a, ta) = train_svm_traced(&xs, 3, &labels, &cfg).unwrap();
        let (b, _) = train_svm_traced(&xs, 3, &labels, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta.samples_used, 100);
        let other = train_svm(&xs, 3, &labels, &SvmConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn objective_history_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f32> = (0..300 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Noisy labels keep the problem non-separable.
        let labels: Vec<u8> = xs
            .chunks(4)
            .map(|r| u8::from(r[0] - r[2] + rng.gen_range(-0.5..0.5) > 0.0))
            .collect();
        let (_, trace) = train_svm_traced(&xs, 4, &labels, &SvmConfig::default()).unwrap();
        assert!(!trace.objective.is_empty());
        for pair in trace.objective.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn class_balancing_shifts_boundary_toward_majority() {
        let xs = [-3.0, -2.5, -2.0, -1.5, -1.0, -0.5, 0.2, 2.0];
        let labels = [0, 0, 0, 0, 0, 0, 1, 1];
        let plain = train_svm(
            &xs,
            1,
            &labels,
            &SvmConfig {
                c: 0.05,
                ..Default::default()
            },
        )
        .unwrap();
        let balanced = train_svm(
            &xs,
            1,
            &labels,
            &SvmConfig {
                c: 0.05,
                balance_classes: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(balanced.score(&[0.2]).unwrap() > plain.score(&[0.2]).unwrap());
    }
}
