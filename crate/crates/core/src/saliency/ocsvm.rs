//! Kernel one-class SVM (minimum enclosing hypersphere) trained by SMO on
//! the dual:
//!
//! ```text
//! min_a  a'Ka - sum_i a_i K_ii   s.t.  sum_i a_i = 1,  0 <= a_i <= 1 / (nu * n)
//! ```
//!
//! The decision value `f(x) = R^2 - ||phi(x) - c||^2` is positive inside the
//! sphere.

use crate::correspondence::squared_distance;
use crate::error::{Error, Result};

pub const KKT_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 10_000;
const BOUND_SNAP: f64 = 1e-14;

/// Gaussian RBF kernel `exp(-||x - y||^2 / (2 sigma^2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbfKernel {
    pub sigma: f64,
}

impl RbfKernel {
    #[inline]
    pub fn eval(&self, x: &[f32], y: &[f32]) -> f64 {
        (-(squared_distance(x, y) as f64) / (2.0 * self.sigma * self.sigma)).exp()
    }

    pub fn gram(&self, points: &[&[f32]]) -> Vec<Vec<f64>> {
        let n = points.len();
        let mut k = vec![vec![0.0; n]; n];
        for i in 0..n {
            k[i][i] = self.eval(points[i], points[i]);
            for j in 0..i {
                let v = self.eval(points[i], points[j]);
                k[i][j] = v;
                k[j][i] = v;
            }
        }
        k
    }
}

#[derive(Clone, Debug)]
pub struct OcsvmModel {
    pub support: Vec<Vec<f32>>,
    pub alpha: Vec<f64>,
    pub radius_sq: f64,
    pub kernel: RbfKernel,
    /// Box bound `1 / (nu * n)`.
    pub upper: f64,
    /// `sum_ij a_i a_j K(x_i, x_j)`
    pub center_norm_sq: f64,
    pub iterations: usize,
}

impl OcsvmModel {
    /// `R^2 - ||phi(x) - c||^2`
    pub fn decision(&self, x: &[f32]) -> f64 {
        let cross: f64 = self
            .support
            .iter()
            .zip(&self.alpha)
            .filter(|(_, &a)| a > 0.0)
            .map(|(s, &a)| a * self.kernel.eval(s, x))
            .sum();
        self.radius_sq - (self.kernel.eval(x, x) - 2.0 * cross + self.center_norm_sq)
    }

    /// Dual objective `a'Ka - sum_i a_i K_ii` (minimised).
    pub fn dual_objective(&self) -> f64 {
        let pts: Vec<&[f32]> = self.support.iter().map(Vec::as_slice).collect();
        dual_objective(&self.kernel.gram(&pts), &self.alpha)
    }
}

pub fn dual_objective(gram: &[Vec<f64>], alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    let mut lin = 0.0;
    for i in 0..n {
        lin += alpha[i] * gram[i][i];
        for j in 0..n {
            quad += alpha[i] * alpha[j] * gram[i][j];
        }
    }
    quad - lin
}

/// Trains on `points` with trade-off `nu` in (0, 1] and RBF bandwidth
/// `sigma`.
pub fn ocsvm_train(points: &[&[f32]], nu: f64, sigma: f64) -> Result<OcsvmModel> {
    if points.is_empty() {
        return Err(Error::TooFew { needed: 1, got: 0 });
    }
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::InvalidConfig(format!("nu must lie in (0, 1], got {nu}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!("rbf sigma must be positive, got {sigma}")));
    }
    let n = points.len();
    let kernel = RbfKernel { sigma };
    let gram = kernel.gram(points);
    let upper = 1.0 / (nu * n as f64);
    let (alpha, iterations) = solve_dual(&gram, upper)?;

    // squared distance of every training point to the centre
    let center_norm_sq = (0..n)
        .map(|i| (0..n).map(|j| alpha[i] * alpha[j] * gram[i][j]).sum::<f64>())
        .sum::<f64>();
    let dist: Vec<f64> = (0..n)
        .map(|i| {
            let ka: f64 = (0..n).map(|j| alpha[j] * gram[i][j]).sum();
            gram[i][i] - 2.0 * ka + center_norm_sq
        })
        .collect();
    let radius_sq = radius_from_kkt(&alpha, &dist, upper).max(0.0);

    Ok(OcsvmModel {
        support: points.iter().map(|p| p.to_vec()).collect(),
        alpha,
        radius_sq,
        kernel,
        upper,
        center_norm_sq,
        iterations,
    })
}

/// Free support vectors sit on the sphere. Without any, `R^2` is bracketed
/// by points strictly inside (`a = 0`) and points at the bound (`a = C`).
fn radius_from_kkt(alpha: &[f64], dist: &[f64], upper: f64) -> f64 {
    let eps = 1e-12;
    let free: Vec<f64> = alpha
        .iter()
        .zip(dist)
        .filter(|(&a, _)| a > eps && a < upper - eps)
        .map(|(_, &d)| d)
        .collect();
    if !free.is_empty() {
        return free.iter().sum::<f64>() / free.len() as f64;
    }
    let inside = alpha
        .iter()
        .zip(dist)
        .filter(|(&a, _)| a <= eps)
        .map(|(_, &d)| d)
        .fold(f64::NEG_INFINITY, f64::max);
    let at_bound = alpha
        .iter()
        .zip(dist)
        .filter(|(&a, _)| a >= upper - eps)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    match (inside.is_finite(), at_bound.is_finite()) {
        (true, true) => 0.5 * (inside + at_bound),
        (true, false) => inside,
        (false, true) => at_bound,
        (false, false) => 0.0,
    }
}

/// Maximal-violating-pair SMO for `min 1/2 a'Qa + p'a` with `Q = 2K`,
/// `p = -diag(K)`, `sum a = 1`, `0 <= a <= upper`.
fn solve_dual(gram: &[Vec<f64>], upper: f64) -> Result<(Vec<f64>, usize)> {
    let n = gram.len();
    // Feasible start: fill the box from the front until the mass is spent.
    let mut alpha = vec![0.0; n];
    let mut remaining = 1.0f64;
    for a in alpha.iter_mut() {
        let take = remaining.min(upper);
        *a = take;
        remaining -= take;
        if remaining <= 0.0 {
            break;
        }
    }
    let q = |i: usize, j: usize| 2.0 * gram[i][j];
    let mut grad: Vec<f64> = (0..n)
        .map(|i| (0..n).map(|j| q(i, j) * alpha[j]).sum::<f64>() - gram[i][i])
        .collect();

    for iter in 0..MAX_ITERATIONS {
        // i: can grow and most wants to; j: can shrink and least wants to keep.
        let mut i_best = None;
        let mut g_max = f64::NEG_INFINITY;
        let mut j_best = None;
        let mut g_min = f64::INFINITY;
        for k in 0..n {
            if alpha[k] < upper && -grad[k] > g_max {
                g_max = -grad[k];
                i_best = Some(k);
            }
            if alpha[k] > 0.0 && -grad[k] < g_min {
                g_min = -grad[k];
                j_best = Some(k);
            }
        }
        let (Some(i), Some(j)) = (i_best, j_best) else {
            return Ok((alpha, iter));
        };
        if g_max - g_min < KKT_TOLERANCE {
            return Ok((alpha, iter));
        }
        // move t from j to i
        let curvature = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(1e-12);
        let mut t = (grad[j] - grad[i]) / curvature;
        t = t.min(upper - alpha[i]).min(alpha[j]);
        if t <= 0.0 {
            return Err(Error::SolverNotConverged {
                iterations: iter,
                gap: g_max - g_min,
            });
        }
        alpha[i] += t;
        alpha[j] -= t;
        // snap rounding residue onto the box so the bound sets stay exact
        if upper - alpha[i] < BOUND_SNAP {
            alpha[i] = upper;
        }
        if alpha[j] < BOUND_SNAP {
            alpha[j] = 0.0;
        }
        for (k, g) in grad.iter_mut().enumerate() {
            *g += t * (q(k, i) - q(k, j));
        }
    }
    let gap = kkt_gap(&alpha, &grad, upper);
    if gap < KKT_TOLERANCE {
        Ok((alpha, MAX_ITERATIONS))
    } else {
        Err(Error::SolverNotConverged {
            iterations: MAX_ITERATIONS,
            gap,
        })
    }
}

fn kkt_gap(alpha: &[f64], grad: &[f64], upper: f64) -> f64 {
    let up = (0..alpha.len())
        .filter(|&k| alpha[k] < upper)
        .map(|k| -grad[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let low = (0..alpha.len())
        .filter(|&k| alpha[k] > 0.0)
        .map(|k| -grad[k])
        .fold(f64::INFINITY, f64::min);
    (up - low).max(0.0)
}
