//! Dataset-level glue: batch extraction and saliency, probe x gallery score
//! matrices for every matching method, and training-set assembly.

use std::borrow::Cow;
use std::collections::HashMap;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::correspondence::{
    dense_correspondence, sim_densefeats, sim_patmatch, Correspondence, SimilarityKernelConfig,
};
use crate::error::{Error, Result};
use crate::evaluate::{Camera, Dataset, Scorer, TrialContext};
use crate::imaging::{extract_grid, GridConfig, Image, PatchGrid};
use crate::ranklearn::{train, ProbeSample, TrainError, TrainSet, Trained};
use crate::saliency::{saliency_from_correspondences, saliency_map, SaliencyConfig, SaliencyMap};
use crate::salmatch::{
    pair_feature_map, sim_esalmatch, sim_salmatch, sim_sdc, ExternalScores, FusionConfig, RankModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMethod {
    DenseFeats,
    PatMatch,
    Sdc,
    SalMatch,
    ESalMatch,
}

impl MatchMethod {
    pub const ALL: [MatchMethod; 5] = [
        MatchMethod::DenseFeats,
        MatchMethod::PatMatch,
        MatchMethod::Sdc,
        MatchMethod::SalMatch,
        MatchMethod::ESalMatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatchMethod::DenseFeats => "densefeats",
            MatchMethod::PatMatch => "patmatch",
            MatchMethod::Sdc => "sdc",
            MatchMethod::SalMatch => "salmatch",
            MatchMethod::ESalMatch => "esalmatch",
        }
    }

    pub fn needs_saliency(self) -> bool {
        !matches!(self, MatchMethod::DenseFeats | MatchMethod::PatMatch)
    }

    pub fn needs_model(self) -> bool {
        matches!(self, MatchMethod::SalMatch | MatchMethod::ESalMatch)
    }
}

impl FromStr for MatchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MatchMethod::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown matching method {s:?}")))
    }
}

impl std::fmt::Display for MatchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Extracts every image's grid in parallel, keeping per-image failures.
pub fn extract_all(images: &[Image], cfg: &GridConfig) -> Vec<Result<PatchGrid>> {
    images.par_iter().map(|img| extract_grid(img, cfg)).collect()
}

/// Saliency map for each target grid, with its references chosen by
/// `refs_for(target index)`.
pub fn saliency_all<'a, F>(
    targets: &[&PatchGrid],
    refs_for: F,
    l: usize,
    cfg: &SaliencyConfig,
) -> Result<Vec<SaliencyMap>>
where
    F: Fn(usize) -> Vec<&'a PatchGrid> + Sync,
{
    targets
        .par_iter()
        .enumerate()
        .map(|(i, g)| saliency_map(g, &refs_for(i), l, cfg))
        .collect()
}

/// External similarity measure fused into `esalmatch`.
#[derive(Clone, Debug)]
pub struct External {
    pub weight: f64,
    pub scores: ExternalScores,
}

/// Everything a pairwise scorer may need.
#[derive(Clone, Copy, Debug)]
pub struct Scoring<'a> {
    pub method: MatchMethod,
    pub kernel: &'a SimilarityKernelConfig,
    pub l: usize,
    pub fusion: &'a FusionConfig,
    pub model: Option<&'a RankModel>,
    pub externals: &'a [External],
}

/// One side of a comparison: a grid and, for saliency-aware methods, its map.
#[derive(Clone, Copy, Debug)]
pub struct Side<'a> {
    pub grid: &'a PatchGrid,
    pub saliency: Option<&'a SaliencyMap>,
}

fn need_map<'a>(side: &Side<'a>) -> Result<&'a SaliencyMap> {
    side.saliency
        .ok_or_else(|| Error::InvalidConfig(format!("no saliency map for image {:?}", side.grid.image_id)))
}

fn need_model<'a>(s: &Scoring<'a>) -> Result<&'a RankModel> {
    s.model
        .ok_or_else(|| Error::InvalidConfig(format!("{} needs a trained model", s.method)))
}

/// Similarity of one probe to one gallery image.
pub fn pair_score(probe: Side<'_>, gallery: Side<'_>, s: &Scoring<'_>) -> Result<f64> {
    if s.method == MatchMethod::DenseFeats {
        return sim_densefeats(probe.grid, gallery.grid, s.kernel);
    }
    check_model(probe, s)?;
    let corr = dense_correspondence(probe.grid, gallery.grid, s.l, s.kernel)?;
    score_with_correspondence(probe, gallery, &corr, s)
}

fn check_model(probe: Side<'_>, s: &Scoring<'_>) -> Result<()> {
    if s.method.needs_model() {
        let model = need_model(s)?;
        if model.shape() != probe.grid.shape() {
            return Err(Error::ShapeMismatch {
                left: model.shape(),
                right: probe.grid.shape(),
            });
        }
    }
    Ok(())
}

/// Like [`pair_score`] but reuses an existing probe -> gallery
/// correspondence, which must have been built with the same kernel and `l`.
pub fn score_with_correspondence(
    probe: Side<'_>,
    gallery: Side<'_>,
    corr: &Correspondence,
    s: &Scoring<'_>,
) -> Result<f64> {
    check_model(probe, s)?;
    match s.method {
        MatchMethod::DenseFeats => sim_densefeats(probe.grid, gallery.grid, s.kernel),
        MatchMethod::PatMatch => Ok(sim_patmatch(corr)),
        MatchMethod::Sdc => sim_sdc(corr, need_map(&probe)?, need_map(&gallery)?, s.fusion.alpha_sdc),
        MatchMethod::SalMatch | MatchMethod::ESalMatch => {
            let fm = pair_feature_map(corr, need_map(&probe)?, need_map(&gallery)?)?;
            let sal = sim_salmatch(need_model(s)?, &fm)?;
            if s.method == MatchMethod::SalMatch {
                return Ok(sal);
            }
            let ext = s
                .externals
                .iter()
                .map(|e| Ok((e.weight, e.scores.get(&probe.grid.image_id, &gallery.grid.image_id)?)))
                .collect::<Result<Vec<_>>>()?;
            sim_esalmatch(&ext, s.fusion, sal)
        }
    }
}

/// All correspondences from `a[i]` into `b[j]`, indexed `[i][j]`.
pub fn cross_correspondences(
    a: &[&PatchGrid],
    b: &[&PatchGrid],
    l: usize,
    kernel: &SimilarityKernelConfig,
) -> Result<Vec<Vec<Correspondence>>> {
    a.par_iter()
        .map(|ga| b.iter().map(|gb| dense_correspondence(ga, gb, l, kernel)).collect())
        .collect()
}

/// Probe x gallery similarity matrix, parallel over probes.
pub fn score_matrix(probes: &[Side<'_>], gallery: &[Side<'_>], s: &Scoring<'_>) -> Result<Vec<Vec<f64>>> {
    probes
        .par_iter()
        .map(|&p| gallery.iter().map(|&g| pair_score(p, g, s)).collect())
        .collect()
}

/// Builds the ranking training set: for each probe, gallery images with the
/// same identity are relevant and the rest irrelevant. Probes without a
/// relevant gallery image are skipped.
pub fn build_train_set(
    probes: &[Side<'_>],
    gallery: &[Side<'_>],
    kernel: &SimilarityKernelConfig,
    l: usize,
) -> Result<TrainSet> {
    train_set_with(probes, gallery, |p, g| {
        dense_correspondence(probes[p].grid, gallery[g].grid, l, kernel).map(Cow::Owned)
    })
}

fn train_set_with<'c, F>(probes: &[Side<'_>], gallery: &[Side<'_>], corr: F) -> Result<TrainSet>
where
    F: Fn(usize, usize) -> Result<Cow<'c, Correspondence>> + Sync,
{
    let first = probes.first().ok_or(Error::InvalidTrainSet("no probes".into()))?;
    let (rows, cols) = first.grid.shape();
    let samples = probes
        .par_iter()
        .enumerate()
        .map(|(pi, p)| {
            let id = p
                .grid
                .identity
                .as_ref()
                .ok_or_else(|| Error::InvalidTrainSet(format!("probe {:?} has no identity", p.grid.image_id)))?;
            let mut sample = ProbeSample {
                relevant: Vec::new(),
                irrelevant: Vec::new(),
            };
            for (gi, g) in gallery.iter().enumerate() {
                let fm = pair_feature_map(corr(pi, gi)?.as_ref(), need_map(p)?, need_map(g)?)?;
                if g.grid.identity.as_ref() == Some(id) {
                    sample.relevant.push(fm.values);
                } else {
                    sample.irrelevant.push(fm.values);
                }
            }
            Ok(sample)
        })
        .collect::<Result<Vec<_>>>()?;
    let samples = samples
        .into_iter()
        .filter(|s| !s.relevant.is_empty() && !s.irrelevant.is_empty())
        .collect();
    TrainSet::new(rows, cols, samples)
}

/// Per-trial state shared by every method: saliency maps of the test
/// images and, once requested, the trained ranking model.
#[derive(Debug)]
pub struct Prepared {
    pub probe_maps: Vec<SaliencyMap>,
    pub gallery_maps: Vec<SaliencyMap>,
    trained: OnceLock<Trained>,
}

impl Prepared {
    pub fn trained(&self) -> Option<&Trained> {
        self.trained.get()
    }
}

/// Runs every matching method over a dataset whose grids are already
/// extracted (`grids[i]` belongs to `dataset.entries[i]`).
///
/// For each trial, saliency references of an image are the training
/// images from the other camera, excluding its own identity. The ranking
/// model is trained on the training identities, camera A against camera B.
pub struct Engine<'a> {
    dataset: &'a Dataset,
    grids: &'a [PatchGrid],
    cfg: &'a PipelineConfig,
    externals: Vec<External>,
    cache: HashMap<(usize, usize), Correspondence>,
    prepared: Mutex<HashMap<usize, Arc<Prepared>>>,
}

impl<'a> Engine<'a> {
    pub fn new(dataset: &'a Dataset, grids: &'a [PatchGrid], cfg: &'a PipelineConfig) -> Result<Self> {
        if dataset.entries.len() != grids.len() {
            return Err(Error::LengthMismatch {
                expected: dataset.entries.len(),
                actual: grids.len(),
            });
        }
        cfg.validate()?;
        Ok(Self {
            dataset,
            grids,
            cfg,
            externals: Vec::new(),
            cache: HashMap::new(),
            prepared: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_externals(mut self, externals: Vec<External>) -> Self {
        self.externals = externals;
        self
    }

    /// Precomputes every cross-camera correspondence. Memory grows with the
    /// square of the dataset size, so this suits small datasets.
    pub fn with_cache(mut self) -> Result<Self> {
        let pairs: Vec<(usize, usize)> = (0..self.grids.len())
            .flat_map(|i| (0..self.grids.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| self.dataset.entries[i].camera != self.dataset.entries[j].camera)
            .collect();
        let corrs = pairs
            .par_iter()
            .map(|&(i, j)| self.compute(i, j))
            .collect::<Result<Vec<_>>>()?;
        self.cache = pairs.into_iter().zip(corrs).collect();
        Ok(self)
    }

    fn l(&self) -> usize {
        self.cfg.grid.adjacency_relax
    }

    fn compute(&self, i: usize, j: usize) -> Result<Correspondence> {
        dense_correspondence(&self.grids[i], &self.grids[j], self.l(), &self.cfg.kernel)
    }

    /// Correspondence from entry `i` into entry `j`.
    pub fn correspondence(&self, i: usize, j: usize) -> Result<Cow<'_, Correspondence>> {
        match self.cache.get(&(i, j)) {
            Some(c) => Ok(Cow::Borrowed(c)),
            None => self.compute(i, j).map(Cow::Owned),
        }
    }

    fn maps(&self, targets: &[usize], refs: &[usize]) -> Result<Vec<SaliencyMap>> {
        targets
            .par_iter()
            .map(|&t| {
                let id = &self.dataset.entries[t].identity;
                let chosen: Vec<usize> = refs
                    .iter()
                    .copied()
                    .filter(|&r| self.dataset.entries[r].identity != *id)
                    .collect();
                let corrs = chosen
                    .iter()
                    .map(|&r| self.correspondence(t, r))
                    .collect::<Result<Vec<_>>>()?;
                let corr_refs: Vec<&Correspondence> = corrs.iter().map(|c| c.as_ref()).collect();
                let grids: Vec<&PatchGrid> = chosen.iter().map(|&r| &self.grids[r]).collect();
                saliency_from_correspondences(&self.grids[t], &grids, &corr_refs, &self.cfg.saliency)
            })
            .collect()
    }

    fn train_entries(&self, ctx: &TrialContext<'_>) -> (Vec<usize>, Vec<usize>) {
        let single = self.cfg.trial.single_shot;
        (
            self.dataset.select(Camera::A, ctx.train_ids, single),
            self.dataset.select(Camera::B, ctx.train_ids, single),
        )
    }

    /// Saliency maps for the trial's probes and gallery (cached per trial).
    pub fn prepare(&self, ctx: &TrialContext<'_>) -> Result<Arc<Prepared>> {
        if let Some(p) = self.prepared.lock().expect("cache lock").get(&ctx.trial) {
            return Ok(Arc::clone(p));
        }
        let (train_a, train_b) = self.train_entries(ctx);
        let prepared = Arc::new(Prepared {
            probe_maps: self.maps(ctx.probes, &train_b)?,
            gallery_maps: self.maps(ctx.gallery, &train_a)?,
            trained: OnceLock::new(),
        });
        let mut cache = self.prepared.lock().expect("cache lock");
        Ok(Arc::clone(cache.entry(ctx.trial).or_insert(prepared)))
    }

    /// Trains (once per trial) the ranking model on the training identities.
    /// A model that ran out of cutting-plane iterations is still used.
    pub fn trained<'p>(&self, ctx: &TrialContext<'_>, prepared: &'p Prepared) -> Result<&'p Trained> {
        if let Some(t) = prepared.trained.get() {
            return Ok(t);
        }
        let (train_a, train_b) = self.train_entries(ctx);
        let maps_a = self.maps(&train_a, &train_b)?;
        let maps_b = self.maps(&train_b, &train_a)?;
        let probes = self.sides(&train_a, &maps_a);
        let gallery = self.sides(&train_b, &maps_b);
        let ts = train_set_with(&probes, &gallery, |p, g| self.correspondence(train_a[p], train_b[g]))?;
        let trained = match train(&ts, &self.cfg.train) {
            Ok(t) => t,
            Err(TrainError::NotConverged { trained, .. }) => *trained,
            Err(TrainError::Invalid(e)) => return Err(e),
        };
        Ok(prepared.trained.get_or_init(|| trained))
    }

    fn sides<'s>(&'s self, idx: &[usize], maps: &'s [SaliencyMap]) -> Vec<Side<'s>> {
        idx.iter()
            .zip(maps)
            .map(|(&i, m)| Side {
                grid: &self.grids[i],
                saliency: Some(m),
            })
            .collect()
    }

    /// Probe x gallery scores for one method.
    pub fn score_method(&self, ctx: &TrialContext<'_>, method: MatchMethod) -> Result<Vec<Vec<f64>>> {
        let prepared = if method.needs_saliency() {
            Some(self.prepare(ctx)?)
        } else {
            None
        };
        let model = match &prepared {
            Some(p) if method.needs_model() => Some(&self.trained(ctx, p)?.model),
            _ => None,
        };
        let scoring = Scoring {
            method,
            kernel: &self.cfg.kernel,
            l: self.l(),
            fusion: &self.cfg.fusion,
            model,
            externals: &self.externals,
        };
        ctx.probes
            .par_iter()
            .enumerate()
            .map(|(pi, &p)| {
                let probe = Side {
                    grid: &self.grids[p],
                    saliency: prepared.as_ref().map(|x| &x.probe_maps[pi]),
                };
                ctx.gallery
                    .iter()
                    .enumerate()
                    .map(|(gi, &g)| {
                        let gallery = Side {
                            grid: &self.grids[g],
                            saliency: prepared.as_ref().map(|x| &x.gallery_maps[gi]),
                        };
                        if method == MatchMethod::DenseFeats {
                            return pair_score(probe, gallery, &scoring);
                        }
                        score_with_correspondence(probe, gallery, self.correspondence(p, g)?.as_ref(), &scoring)
                    })
                    .collect()
            })
            .collect()
    }

    /// A [`Scorer`] for one method, sharing this engine's per-trial state.
    pub fn scorer(&self, method: MatchMethod) -> MethodScorer<'_, 'a> {
        MethodScorer { engine: self, method }
    }
}

pub struct MethodScorer<'e, 'a> {
    engine: &'e Engine<'a>,
    method: MatchMethod,
}

impl Scorer for MethodScorer<'_, '_> {
    fn score(&self, ctx: &TrialContext<'_>) -> Result<Vec<Vec<f64>>> {
        self.engine.score_method(ctx, self.method)
    }
}
