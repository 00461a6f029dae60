//! Saliency-aware image similarity.
//!
//! - [`sim_sdc`]: matched-pair similarities weighted by both patches' raw
//!   saliency scores and penalised by their difference.
//! - [`pair_feature_map`] / [`sim_salmatch`]: the expected saliency matching
//!   score as a linear function `w . Phi` of an 8-value-per-patch feature map.
//! - [`sim_esalmatch`]: weighted fusion with externally computed similarity
//!   measures.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correspondence::{dense_correspondence, Correspondence, SimilarityKernelConfig};
use crate::error::{Error, Result};
use crate::imaging::PatchGrid;
use crate::saliency::SaliencyMap;

/// Feature values per patch.
pub const PHI_PER_PATCH: usize = 8;

fn check_maps(corr: &Correspondence, sal_a: &SaliencyMap, sal_b: &SaliencyMap) -> Result<()> {
    if sal_a.shape() != corr.a_shape {
        return Err(Error::ShapeMismatch {
            left: corr.a_shape,
            right: sal_a.shape(),
        });
    }
    if sal_b.shape() != corr.b_shape {
        return Err(Error::ShapeMismatch {
            left: corr.b_shape,
            right: sal_b.shape(),
        });
    }
    Ok(())
}

/// Saliency guided dense correspondence score:
/// `sum score_a * s * score_b / (alpha_sdc + |score_a - score_b|)`.
pub fn sim_sdc(corr: &Correspondence, sal_a: &SaliencyMap, sal_b: &SaliencyMap, alpha_sdc: f64) -> Result<f64> {
    check_maps(corr, sal_a, sal_b)?;
    if !(alpha_sdc > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha_sdc must be positive, got {alpha_sdc}"
        )));
    }
    Ok(corr
        .pairs
        .iter()
        .map(|p| {
            let a = sal_a.score[p.source];
            let b = sal_b.score[p.target];
            a * p.similarity * b / (alpha_sdc + (a - b).abs())
        })
        .sum())
}

/// Joint probabilities of the four (salient A, salient B) label outcomes:
/// `[pa pb, pa (1-pb), (1-pa) pb, (1-pa)(1-pb)]`.
#[inline]
pub fn match_costs(prob_a: f64, prob_b: f64) -> [f64; 4] {
    [
        prob_a * prob_b,
        prob_a * (1.0 - prob_b),
        (1.0 - prob_a) * prob_b,
        (1.0 - prob_a) * (1.0 - prob_b),
    ]
}

/// `[s c1, s c2, s c3, s c4, c1, c2, c3, c4]`
#[inline]
pub fn patch_phi(similarity: f64, prob_a: f64, prob_b: f64) -> [f64; PHI_PER_PATCH] {
    let c = match_costs(prob_a, prob_b);
    [
        similarity * c[0],
        similarity * c[1],
        similarity * c[2],
        similarity * c[3],
        c[0],
        c[1],
        c[2],
        c[3],
    ]
}

/// Concatenated per-patch features, in A's row-major patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl PairFeatureMap {
    pub fn patch(&self, index: usize) -> &[f64] {
        &self.values[index * PHI_PER_PATCH..(index + 1) * PHI_PER_PATCH]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn pair_feature_map(corr: &Correspondence, sal_a: &SaliencyMap, sal_b: &SaliencyMap) -> Result<PairFeatureMap> {
    check_maps(corr, sal_a, sal_b)?;
    let mut values = Vec::with_capacity(corr.pairs.len() * PHI_PER_PATCH);
    for p in &corr.pairs {
        values.extend(patch_phi(p.similarity, sal_a.prob[p.source], sal_b.prob[p.target]));
    }
    Ok(PairFeatureMap {
        rows: corr.a_shape.0,
        cols: corr.a_shape.1,
        values,
    })
}

/// Ranking weights, 8 per patch position: `alpha_1..4` then `beta_1..4`.
#[derive(Clone, Debug, PartialEq)]
pub struct RankModel {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
}

impl RankModel {
    pub fn new(rows: usize, cols: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != rows * cols * PHI_PER_PATCH {
            return Err(Error::LengthMismatch {
                expected: rows * cols * PHI_PER_PATCH,
                actual: w.len(),
            });
        }
        Ok(Self { rows, cols, w })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            w: vec![0.0; rows * cols * PHI_PER_PATCH],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Weight lattice for one slot (0..4 = alpha_k, 4..8 = beta_k), row-major.
    pub fn slot_map(&self, slot: usize) -> Vec<f64> {
        self.w.iter().skip(slot).step_by(PHI_PER_PATCH).copied().collect()
    }
}

/// `w . Phi`
pub fn sim_salmatch(model: &RankModel, fm: &PairFeatureMap) -> Result<f64> {
    if (model.rows, model.cols) != (fm.rows, fm.cols) {
        return Err(Error::ShapeMismatch {
            left: model.shape(),
            right: (fm.rows, fm.cols),
        });
    }
    if model.w.len() != fm.values.len() {
        return Err(Error::LengthMismatch {
            expected: model.w.len(),
            actual: fm.values.len(),
        });
    }
    Ok(model.w.iter().zip(&fm.values).map(|(w, x)| w * x).sum())
}

/// Orders gallery positions by descending score, ties by ascending position.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// A patch grid with its saliency map.
#[derive(Clone, Copy, Debug)]
pub struct Annotated<'a> {
    pub grid: &'a PatchGrid,
    pub saliency: &'a SaliencyMap,
}

/// Ranks gallery images for one probe by `w . Phi(probe, gallery)`.
pub fn rank_gallery(
    model: &RankModel,
    probe: Annotated<'_>,
    gallery: &[Annotated<'_>],
    l: usize,
    kernel: &SimilarityKernelConfig,
) -> Result<Vec<usize>> {
    if probe.grid.shape() != model.shape() {
        return Err(Error::ShapeMismatch {
            left: model.shape(),
            right: probe.grid.shape(),
        });
    }
    let scores = gallery
        .iter()
        .map(|g| {
            let corr = dense_correspondence(probe.grid, g.grid, l, kernel)?;
            let fm = pair_feature_map(&corr, probe.saliency, g.saliency)?;
            sim_salmatch(model, &fm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_by_score(&scores))
}

/// Weights for score fusion with external similarity measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub mu_sal: f64,
    /// Subtract the saliency matching term instead of adding it.
    pub subtract_salmatch: bool,
    pub alpha_sdc: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mu_sal: 1.0,
            subtract_salmatch: false,
            alpha_sdc: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_sal > 0.0) || !(self.alpha_sdc > 0.0) {
            return Err(Error::InvalidConfig("fusion weights must be positive".into()));
        }
        Ok(())
    }
}

/// `sum mu_i sim_i +/- mu_sal sim_salmatch`.
pub fn sim_esalmatch(external: &[(f64, f64)], cfg: &FusionConfig, salmatch: f64) -> Result<f64> {
    if let Some((mu, _)) = external.iter().find(|(mu, _)| !(*mu > 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "fusion weight must be positive, got {mu}"
        )));
    }
    cfg.validate()?;
    let ext: f64 = external.iter().map(|(mu, s)| mu * s).sum();
    let sign = if cfg.subtract_salmatch { -1.0 } else { 1.0 };
    Ok(ext + sign * cfg.mu_sal * salmatch)
}

/// External probe x gallery similarity values, min-max normalised to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalScores {
    values: HashMap<(String, String), f64>,
}

impl ExternalScores {
    /// Builds from raw `(probe, gallery, value)` triples and normalises.
    pub fn from_triples(triples: impl IntoIterator<Item = (String, String, f64)>) -> Self {
        let mut values: HashMap<(String, String), f64> = triples.into_iter().map(|(p, g, v)| ((p, g), v)).collect();
        let (lo, hi) = values
            .values()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        for v in values.values_mut() {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
        Self { values }
    }

    /// Reads a `probe,gallery,value` CSV (header optional).
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut triples = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Format(format!("line {}: expected 3 fields", line + 1)));
            }
            match rec[2].parse::<f64>() {
                Ok(v) => triples.push((rec[0].to_string(), rec[1].to_string(), v)),
                Err(_) if line == 0 => continue,
                Err(e) => return Err(Error::Format(format!("line {}: {e}", line + 1))),
            }
        }
        Ok(Self::from_triples(triples))
    }

    pub fn get(&self, probe: &str, gallery: &str) -> Result<f64> {
        self.values
            .get(&(probe.to_string(), gallery.to_string()))
            .copied()
            .ok_or_else(|| Error::MissingScore {
                probe: probe.to_string(),
                gallery: gallery.to_string(),
            })
    }
}
