//! Adjacency-constrained dense correspondence and the saliency-free scorers.
//!
//! A patch in row `m` of image A is matched against every patch of image B
//! whose row lies in `[m - l, m + l]`. Matching is directional (A to B).

use std::borrow::Borrow;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::PatchGrid;

/// Bandwidth of the Gaussian patch similarity kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityKernelConfig {
    pub sigma: f64,
}

impl Default for SimilarityKernelConfig {
    fn default() -> Self {
        Self { sigma: 0.28 }
    }
}

impl SimilarityKernelConfig {
    pub fn new(sigma: f64) -> Result<Self> {
        let cfg = Self { sigma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "kernel sigma must be positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// `exp(-d^2 / (2 sigma^2))`
    #[inline]
    pub fn similarity(&self, distance: f64) -> f64 {
        (-(distance * distance) / (2.0 * self.sigma * self.sigma)).exp()
    }
}

/// Squared Euclidean distance, accumulated in f32.
#[inline]
pub fn squared_distance(x: &[f32], y: &[f32]) -> f32 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Same accumulation as [`squared_distance`] but gives up as soon as the
/// partial sum exceeds `bound`. Returns `None` in that case.
#[inline]
fn squared_distance_bounded(x: &[f32], y: &[f32], bound: f32) -> Option<f32> {
    let mut acc = 0f32;
    for (xs, ys) in x.chunks(16).zip(y.chunks(16)) {
        for (a, b) in xs.iter().zip(ys) {
            acc += (a - b) * (a - b);
        }
        if acc > bound {
            return None;
        }
    }
    Some(acc)
}

pub fn distance(x: &[f32], y: &[f32]) -> f64 {
    (squared_distance(x, y) as f64).sqrt()
}

/// Gaussian similarity of two descriptors.
pub fn patch_similarity(x: &[f32], y: &[f32], cfg: &SimilarityKernelConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    Ok(cfg.similarity(distance(x, y)))
}

/// Inclusive row range searched in B for a patch in row `m` of A.
pub fn search_rows(m: usize, b_rows: usize, l: usize) -> Option<(usize, usize)> {
    if b_rows == 0 {
        return None;
    }
    let lo = m.saturating_sub(l);
    let hi = (m + l).min(b_rows - 1);
    (lo <= hi).then_some((lo, hi))
}

/// Row-major indices of B searched for a patch in row `m`.
pub fn search_set(m: usize, grid_b: &PatchGrid, l: usize) -> Vec<usize> {
    match search_rows(m, grid_b.rows(), l) {
        Some((lo, hi)) => (lo * grid_b.cols()..(hi + 1) * grid_b.cols()).collect(),
        None => Vec::new(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub index: usize,
    pub distance: f64,
}

/// Nearest neighbour of `x` (a patch in row `m`) within its search set in B.
/// Ties go to the smallest row-major index.
pub fn best_match(x: &[f32], m: usize, grid_b: &PatchGrid, l: usize) -> Result<Match> {
    if x.len() != grid_b.dim() {
        return Err(Error::LengthMismatch {
            expected: grid_b.dim(),
            actual: x.len(),
        });
    }
    let (lo, hi) = search_rows(m, grid_b.rows(), l).ok_or(Error::EmptySearchSet { row: m })?;
    let mut best_index = lo * grid_b.cols();
    let mut best = f32::INFINITY;
    for index in lo * grid_b.cols()..(hi + 1) * grid_b.cols() {
        if let Some(d2) = squared_distance_bounded(x, grid_b.descriptor(index), best) {
            // strict: equal distances keep the earlier index
            if d2 < best {
                best = d2;
                best_index = index;
            }
        }
    }
    Ok(Match {
        index: best_index,
        distance: (best as f64).sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchPair {
    /// Patch index in A.
    pub source: usize,
    /// Matched patch index in B.
    pub target: usize,
    pub distance: f64,
    pub similarity: f64,
}

/// One matched pair per patch of A, in A's row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    pub a_shape: (usize, usize),
    pub b_shape: (usize, usize),
    pub pairs: Vec<MatchPair>,
}

impl Correspondence {
    /// Writes the debug CSV dump.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["p_i_row", "p_i_col", "p'_i_row", "p'_i_col", "distance", "similarity"])?;
        for p in &self.pairs {
            let (ar, ac) = (p.source / self.a_shape.1, p.source % self.a_shape.1);
            let (br, bc) = (p.target / self.b_shape.1, p.target % self.b_shape.1);
            w.write_record([
                ar.to_string(),
                ac.to_string(),
                br.to_string(),
                bc.to_string(),
                p.distance.to_string(),
                p.similarity.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn dense_correspondence(
    grid_a: &PatchGrid,
    grid_b: &PatchGrid,
    l: usize,
    kernel: &SimilarityKernelConfig,
) -> Result<Correspondence> {
    let pairs = (0..grid_a.len())
        .map(|i| {
            let (m, _) = grid_a.position(i);
            let hit = best_match(grid_a.descriptor(i), m, grid_b, l)?;
            Ok(MatchPair {
                source: i,
                target: hit.index,
                distance: hit.distance,
                similarity: kernel.similarity(hit.distance),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Correspondence {
        a_shape: grid_a.shape(),
        b_shape: grid_b.shape(),
        pairs,
    })
}

/// Sum of similarities of spatially aligned patches (no search).
pub fn sim_densefeats(grid_a: &PatchGrid, grid_b: &PatchGrid, kernel: &SimilarityKernelConfig) -> Result<f64> {
    if grid_a.shape() != grid_b.shape() {
        return Err(Error::ShapeMismatch {
            left: grid_a.shape(),
            right: grid_b.shape(),
        });
    }
    if grid_a.dim() != grid_b.dim() {
        return Err(Error::LengthMismatch {
            expected: grid_a.dim(),
            actual: grid_b.dim(),
        });
    }
    Ok((0..grid_a.len())
        .map(|i| kernel.similarity(distance(grid_a.descriptor(i), grid_b.descriptor(i))))
        .sum())
}

/// Sum of matched-pair similarities.
pub fn sim_patmatch(corr: &Correspondence) -> f64 {
    corr.pairs.iter().map(|p| p.similarity).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    /// Position of the reference image in the reference list.
    pub reference: usize,
    pub index: usize,
    pub distance: f64,
}

/// One constrained nearest neighbour per reference image, in reference order.
pub fn nn_set<G: Borrow<PatchGrid>>(x: &[f32], m: usize, refs: &[G], l: usize) -> Result<Vec<Neighbor>> {
    if refs.is_empty() {
        return Err(Error::EmptyReferences);
    }
    refs.iter()
        .enumerate()
        .map(|(reference, grid)| {
            let hit = best_match(x, m, grid.borrow(), l)?;
            Ok(Neighbor {
                reference,
                index: hit.index,
                distance: hit.distance,
            })
        })
        .collect()
}

/// Median matched-patch distance over a set of correspondences; a data-driven
/// choice of the kernel bandwidth.
pub fn median_matched_distance<'a>(corrs: impl IntoIterator<Item = &'a Correspondence>) -> Option<f64> {
    let mut d: Vec<f64> = corrs
        .into_iter()
        .flat_map(|c| c.pairs.iter().map(|p| p.distance))
        .collect();
    crate::saliency::median(&mut d)
}
