//! Unsupervised patch saliency.
//!
//! For every patch, one constrained nearest neighbour is collected from each
//! reference image. A patch whose neighbours are mostly far away is
//! distinctive; the distance is turned into a saliency score either as the
//! k-th order statistic of the neighbour distances or via a one-class SVM
//! fitted to the neighbour set. Scores map to probabilities with
//! `1 - exp(-score^2 / sigma0^2)`.

pub mod ocsvm;

use std::borrow::Borrow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::{dense_correspondence, distance, Correspondence, Neighbor, SimilarityKernelConfig};
use crate::error::{Error, Result};
use crate::imaging::PatchGrid;

pub use ocsvm::{ocsvm_train, OcsvmModel, RbfKernel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencyMethod {
    #[default]
    Knn,
    Ocsvm,
}

impl std::str::FromStr for SaliencyMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(Self::Knn),
            "ocsvm" => Ok(Self::Ocsvm),
            other => Err(Error::InvalidConfig(format!("unknown saliency method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaliencyConfig {
    /// Fraction of the reference set used to pick k.
    pub alpha_k: f64,
    /// Bandwidth of the score-to-probability map.
    pub sigma0: f64,
    pub nu: f64,
    /// RBF bandwidth for the one-class SVM. `None` uses the median pairwise
    /// distance of each neighbour set.
    pub rbf_sigma: Option<f64>,
    pub method: SaliencyMethod,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            alpha_k: 0.5,
            sigma0: 1.0,
            nu: 0.1,
            rbf_sigma: None,
            method: SaliencyMethod::Knn,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_k > 0.0 && self.alpha_k < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha_k must lie in (0, 1), got {}",
                self.alpha_k
            )));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma0 must be positive, got {}",
                self.sigma0
            )));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::InvalidConfig(format!("nu must lie in (0, 1], got {}", self.nu)));
        }
        if let Some(s) = self.rbf_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("rbf_sigma must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Per-patch saliency scores and probabilities for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub rows: usize,
    pub cols: usize,
    pub score: Vec<f64>,
    pub prob: Vec<f64>,
}

impl SaliencyMap {
    pub fn from_scores(rows: usize, cols: usize, score: Vec<f64>, sigma0: f64) -> Result<Self> {
        if score.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                actual: score.len(),
            });
        }
        let prob = score.iter().map(|&s| salient_probability(s, sigma0)).collect();
        Ok(Self {
            rows,
            cols,
            score,
            prob,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.score.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score.is_empty()
    }

    /// Recomputes probabilities for a new `sigma0`, keeping scores.
    pub fn with_sigma0(mut self, sigma0: f64) -> Self {
        self.prob = self.score.iter().map(|&s| salient_probability(s, sigma0)).collect();
        self
    }

    pub fn argmax_prob(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.prob.iter().enumerate() {
            if p > self.prob[best] {
                best = i;
            }
        }
        best
    }
}

/// `k = max(1, round(alpha_k * n_r))`, capped at `n_r`.
pub fn knn_k(n_r: usize, alpha_k: f64) -> usize {
    ((alpha_k * n_r as f64).round() as usize).clamp(1, n_r.max(1))
}

/// Distance to the k-th nearest neighbour in the set.
pub fn knn_score(nns: &[Neighbor], alpha_k: f64) -> Result<f64> {
    if nns.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let k = knn_k(nns.len(), alpha_k);
    let mut d: Vec<f64> = nns.iter().map(|n| n.distance).collect();
    let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// `1 - exp(-score^2 / sigma0^2)`
pub fn salient_probability(score: f64, sigma0: f64) -> f64 {
    -(-(score * score) / (sigma0 * sigma0)).exp_m1()
}

/// Median of the values (mean of the two middle values for even counts).
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Median pairwise distance between the points. Falls back to the median of
/// the non-zero distances, and then to 1, when duplicates dominate.
pub fn median_pairwise_distance(points: &[&[f32]]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in 0..i {
            d.push(distance(points[i], points[j]));
        }
    }
    match median(&mut d) {
        Some(m) if m > 0.0 => m,
        _ => {
            let mut nonzero: Vec<f64> = d.into_iter().filter(|&v| v > 0.0).collect();
            median(&mut nonzero).unwrap_or(1.0)
        }
    }
}

/// One-class SVM saliency: fit the SVM to the neighbour set, take the member
/// with the largest decision value (earliest reference on ties) and return
/// its distance to the query patch.
pub fn ocsvm_score<G: Borrow<PatchGrid>>(x: &[f32], nns: &[Neighbor], refs: &[G], cfg: &SaliencyConfig) -> Result<f64> {
    if nns.is_empty() {
        return Err(Error::EmptyReferences);
    }
    let points: Vec<&[f32]> = nns
        .iter()
        .map(|n| refs[n.reference].borrow().descriptor(n.index))
        .collect();
    let sigma = cfg.rbf_sigma.unwrap_or_else(|| median_pairwise_distance(&points));
    let model = ocsvm_train(&points, cfg.nu, sigma)?;
    let mut best = 0;
    let mut best_f = f64::NEG_INFINITY;
    for (i, p) in points.iter().enumerate() {
        let f = model.decision(p);
        if f > best_f {
            best_f = f;
            best = i;
        }
    }
    Ok(distance(x, points[best]))
}

/// Saliency for every patch of `grid` against the reference grids, searching
/// `l` rows up and down.
pub fn saliency_map<G: Borrow<PatchGrid> + Sync>(
    grid: &PatchGrid,
    refs: &[G],
    l: usize,
    cfg: &SaliencyConfig,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    if refs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    // the neighbour of a patch in reference r is its match in grid -> r
    let kernel = SimilarityKernelConfig::default();
    let corrs = refs
        .par_iter()
        .map(|r| dense_correspondence(grid, r.borrow(), l, &kernel))
        .collect::<Result<Vec<_>>>()?;
    let corrs: Vec<&Correspondence> = corrs.iter().collect();
    saliency_from_correspondences(grid, refs, &corrs, cfg)
}

/// Saliency from precomputed correspondences, `corrs[r]` matching `grid`
/// into `refs[r]`. Gives the same map as [`saliency_map`].
pub fn saliency_from_correspondences<G: Borrow<PatchGrid> + Sync>(
    grid: &PatchGrid,
    refs: &[G],
    corrs: &[&Correspondence],
    cfg: &SaliencyConfig,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    if refs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    if corrs.len() != refs.len() {
        return Err(Error::LengthMismatch {
            expected: refs.len(),
            actual: corrs.len(),
        });
    }
    for (c, r) in corrs.iter().zip(refs) {
        if c.a_shape != grid.shape() || c.b_shape != r.borrow().shape() || c.pairs.len() != grid.len() {
            return Err(Error::ShapeMismatch {
                left: grid.shape(),
                right: c.a_shape,
            });
        }
    }
    let scores = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let nns: Vec<Neighbor> = corrs
                .iter()
                .enumerate()
                .map(|(reference, c)| Neighbor {
                    reference,
                    index: c.pairs[i].target,
                    distance: c.pairs[i].distance,
                })
                .collect();
            match cfg.method {
                SaliencyMethod::Knn => knn_score(&nns, cfg.alpha_k),
                SaliencyMethod::Ocsvm => ocsvm_score(grid.descriptor(i), &nns, refs, cfg),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    SaliencyMap::from_scores(grid.rows(), grid.cols(), scores, cfg.sigma0)
}

/// Median saliency score over a set of maps, used to set `sigma0`.
pub fn calibrate_sigma0<'a>(maps: impl IntoIterator<Item = &'a SaliencyMap>) -> Option<f64> {
    let mut s: Vec<f64> = maps.into_iter().flat_map(|m| m.score.iter().copied()).collect();
    median(&mut s).filter(|&m| m > 0.0)
}
