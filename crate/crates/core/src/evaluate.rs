//! Evaluation protocol: random identity splits, CMC curves and saliency
//! correlation.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::PartMask;
use crate::error::{Error, Result};
use crate::imaging::{patch_center, GridConfig};
use crate::saliency::SaliencyMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub trials: usize,
    /// Fraction of identities used for training.
    pub train_fraction: f64,
    pub seed: u64,
    /// Use only the first image per identity and camera.
    pub single_shot: bool,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            trials: 10,
            train_fraction: 0.5,
            seed: 0,
            single_shot: false,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Splits identities into (train, test). Both halves keep the input order.
pub fn split_trial<T: Clone>(identities: &[T], cfg: &TrialConfig, trial: usize) -> Result<(Vec<T>, Vec<T>)> {
    cfg.validate()?;
    let n = identities.len();
    if n < 2 {
        return Err(Error::TooFew { needed: 2, got: n });
    }
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(trial as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = identities.iter().zip(&is_train).partition(|(_, &t)| t);
    Ok((
        train.into_iter().map(|(x, _)| x.clone()).collect(),
        test.into_iter().map(|(x, _)| x.clone()).collect(),
    ))
}

/// Cumulative matching rate at ranks `1..=G`.
#[derive(Clone, Debug, PartialEq)]
pub struct CmcCurve {
    rates: Vec<f64>,
}

impl CmcCurve {
    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Matching rate at rank `k` (1-based).
    pub fn at(&self, k: usize) -> f64 {
        self.rates[k - 1]
    }

    pub fn rank1(&self) -> f64 {
        self.rates[0]
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    /// Pointwise mean. All curves must have the same length.
    pub fn mean(curves: &[CmcCurve]) -> Result<CmcCurve> {
        let first = curves.first().ok_or(Error::TooFew { needed: 1, got: 0 })?;
        let g = first.len();
        let mut rates = vec![0.0; g];
        for c in curves {
            if c.len() != g {
                return Err(Error::LengthMismatch {
                    expected: g,
                    actual: c.len(),
                });
            }
            rates.iter_mut().zip(&c.rates).for_each(|(r, x)| *r += x);
        }
        rates.iter_mut().for_each(|r| *r /= curves.len() as f64);
        Ok(CmcCurve { rates })
    }
}

pub fn cmc(ranks: &[usize], gallery: usize) -> Result<CmcCurve> {
    if ranks.is_empty() {
        return Err(Error::TooFew { needed: 1, got: 0 });
    }
    let mut hist = vec![0usize; gallery];
    for &r in ranks {
        if r == 0 || r > gallery {
            return Err(Error::RankOutOfRange { rank: r, gallery });
        }
        hist[r - 1] += 1;
    }
    let total = ranks.len() as f64;
    let mut acc = 0;
    let rates = hist
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / total
        })
        .collect();
    Ok(CmcCurve { rates })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Camera {
    A,
    B,
}

impl FromStr for Camera {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Camera::A),
            "B" | "b" => Ok(Camera::B),
            other => Err(Error::Format(format!("camera must be A or B, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Camera {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Camera::A => "A",
            Camera::B => "B",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub camera: Camera,
    pub identity: String,
}

impl DatasetEntry {
    /// The file stem of the image path. Stores, score files and annotation
    /// data refer to images by this id.
    pub fn image_id(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// A set of images from two cameras. Camera A images are probes, camera B
/// images the gallery.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn new(entries: Vec<DatasetEntry>) -> Self {
        Self { entries }
    }

    /// Reads a manifest file; relative image paths are taken relative to
    /// the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut ds = Self::read_manifest(std::fs::File::open(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut ds.entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Ok(ds)
    }

    /// Image ids in entry order; fails when two entries share an id.
    pub fn image_ids(&self) -> Result<Vec<String>> {
        let ids: Vec<String> = self.entries.iter().map(DatasetEntry::image_id).collect();
        let mut seen = std::collections::HashSet::new();
        for (id, e) in ids.iter().zip(&self.entries) {
            if id.is_empty() || !seen.insert(id.as_str()) {
                return Err(Error::Format(format!(
                    "image id {id:?} of {} is empty or not unique",
                    e.path.display()
                )));
            }
        }
        Ok(ids)
    }

    /// Reads a `path,camera,identity` manifest. A leading header row is
    /// skipped when its camera column is not A or B.
    pub fn read_manifest<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .flexible(false)
            .from_reader(reader);
        let mut entries = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 3 fields, got {}",
                    line + 1,
                    rec.len()
                )));
            }
            let camera = match rec[1].parse::<Camera>() {
                Ok(c) => c,
                Err(_) if line == 0 => continue,
                Err(e) => return Err(e),
            };
            entries.push(DatasetEntry {
                path: PathBuf::from(&rec[0]),
                camera,
                identity: rec[2].to_string(),
            });
        }
        Ok(Self { entries })
    }

    pub fn write_manifest<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["path", "camera", "identity"])?;
        for e in &self.entries {
            w.write_record([e.path.to_string_lossy().as_ref(), &e.camera.to_string(), &e.identity])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Identities seen in both cameras, in order of first appearance.
    pub fn paired_identities(&self) -> Vec<String> {
        let mut seen: HashMap<&str, (bool, bool)> = HashMap::new();
        let mut order = Vec::new();
        for e in &self.entries {
            let slot = seen.entry(&e.identity).or_insert_with(|| {
                order.push(e.identity.as_str());
                (false, false)
            });
            match e.camera {
                Camera::A => slot.0 = true,
                Camera::B => slot.1 = true,
            }
        }
        order
            .into_iter()
            .filter(|id| seen[id] == (true, true))
            .map(str::to_string)
            .collect()
    }

    /// Entry indices for a camera restricted to `identities`, in dataset
    /// order. With `single_shot` only the first image per identity is kept.
    pub fn select(&self, camera: Camera, identities: &[String], single_shot: bool) -> Vec<usize> {
        let wanted: std::collections::HashSet<&str> = identities.iter().map(String::as_str).collect();
        let mut taken = std::collections::HashSet::new();
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.camera == camera && wanted.contains(e.identity.as_str()))
            .filter(|(_, e)| !single_shot || taken.insert(e.identity.as_str()))
            .map(|(i, _)| i)
            .collect()
    }
}

/// What a scorer sees for one trial.
#[derive(Clone, Debug)]
pub struct TrialContext<'a> {
    pub trial: usize,
    pub dataset: &'a Dataset,
    pub train_ids: &'a [String],
    pub test_ids: &'a [String],
    /// Probe entry indices (camera A, test identities).
    pub probes: &'a [usize],
    /// Gallery entry indices (camera B, test identities).
    pub gallery: &'a [usize],
}

/// Produces a probe x gallery similarity matrix for one trial. Higher is
/// more similar.
pub trait Scorer: Sync {
    fn score(&self, ctx: &TrialContext<'_>) -> Result<Vec<Vec<f64>>>;
}

impl<F> Scorer for F
where
    F: Fn(&TrialContext<'_>) -> Result<Vec<Vec<f64>>> + Sync,
{
    fn score(&self, ctx: &TrialContext<'_>) -> Result<Vec<Vec<f64>>> {
        self(ctx)
    }
}

/// Gallery positions sorted by descending score, ties by ascending
/// position.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// 1-based rank of the best-ranked gallery position accepted by `is_match`.
pub fn correct_rank(scores: &[f64], is_match: impl Fn(usize) -> bool) -> Option<usize> {
    ranking(scores).iter().position(|&g| is_match(g)).map(|p| p + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub ranks: Vec<usize>,
    pub curve: CmcCurve,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolResult {
    pub mean: CmcCurve,
    pub trials: Vec<TrialResult>,
    pub seed: u64,
}

impl ProtocolResult {
    /// `rank,mean,trial_0,...`
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["rank".to_string(), "mean".to_string()];
        header.extend((0..self.trials.len()).map(|t| format!("trial_{t}")));
        w.write_record(&header)?;
        for k in 1..=self.mean.len() {
            let mut row = vec![k.to_string(), self.mean.at(k).to_string()];
            row.extend(self.trials.iter().map(|t| t.curve.at(k).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs one trial: scores test probes against the test gallery and
/// returns their correct-match ranks.
pub fn run_trial(dataset: &Dataset, scorer: &dyn Scorer, cfg: &TrialConfig, trial: usize) -> Result<TrialResult> {
    let identities = dataset.paired_identities();
    let (train_ids, test_ids) = split_trial(&identities, cfg, trial)?;
    let probes = dataset.select(Camera::A, &test_ids, cfg.single_shot);
    let gallery = dataset.select(Camera::B, &test_ids, cfg.single_shot);
    let ctx = TrialContext {
        trial,
        dataset,
        train_ids: &train_ids,
        test_ids: &test_ids,
        probes: &probes,
        gallery: &gallery,
    };
    let matrix = scorer.score(&ctx)?;
    if matrix.len() != probes.len() {
        return Err(Error::LengthMismatch {
            expected: probes.len(),
            actual: matrix.len(),
        });
    }
    let mut ranks = Vec::with_capacity(probes.len());
    for (row, &p) in matrix.iter().zip(&probes) {
        if row.len() != gallery.len() {
            return Err(Error::LengthMismatch {
                expected: gallery.len(),
                actual: row.len(),
            });
        }
        let identity = &dataset.entries[p].identity;
        let rank = correct_rank(row, |g| dataset.entries[gallery[g]].identity == *identity)
            .ok_or_else(|| Error::Format(format!("probe identity {identity} has no gallery image")))?;
        ranks.push(rank);
    }
    let curve = cmc(&ranks, gallery.len())?;
    Ok(TrialResult {
        train_ids,
        test_ids,
        ranks,
        curve,
    })
}

/// Runs every trial (in parallel) and averages the curves.
pub fn run_protocol(dataset: &Dataset, scorer: &dyn Scorer, cfg: &TrialConfig) -> Result<ProtocolResult> {
    cfg.validate()?;
    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(dataset, scorer, cfg, t))
        .collect::<Result<Vec<_>>>()?;
    let curves: Vec<CmcCurve> = trials.iter().map(|t| t.curve.clone()).collect();
    Ok(ProtocolResult {
        mean: CmcCurve::mean(&curves)?,
        trials,
        seed: cfg.seed,
    })
}

pub fn pearson_corr(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::TooFew {
            needed: 2,
            got: a.len(),
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean salient probability over the patches whose centre pixel lies
/// inside the part mask. `None` when no patch centre falls in the mask.
pub fn part_mean_saliency(map: &SaliencyMap, mask: &PartMask, grid: &GridConfig) -> Option<f64> {
    let (rows, cols) = map.shape();
    let mut sum = 0.0;
    let mut count = 0usize;
    for m in 0..rows {
        for n in 0..cols {
            let (y, x) = patch_center(m, n, grid);
            if mask.contains(y as usize, x as usize) {
                sum += map.prob[m * cols + n];
                count += 1;
            }
        }
    }
    (count > 0).then(|| sum / count as f64)
}

/// Per-part mean saliency keyed by `(image id, part id)`.
pub fn part_means<'a>(
    parts: impl IntoIterator<Item = (&'a PartMask, &'a SaliencyMap)>,
    grid: &GridConfig,
) -> BTreeMap<(String, String), f64> {
    parts
        .into_iter()
        .filter_map(|(mask, map)| {
            part_mean_saliency(map, mask, grid).map(|v| ((mask.image_id.clone(), mask.part_id.clone()), v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_and_partition() {
        let ids: Vec<usize> = (0..632).collect();
        let cfg = TrialConfig::default();
        let (train, test) = split_trial(&ids, &cfg, 0).unwrap();
        assert_eq!((train.len(), test.len()), (316, 316));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort();
        assert_eq!(all, ids);
        assert_eq!(split_trial(&ids, &cfg, 0).unwrap(), (train.clone(), test));
        assert_ne!(split_trial(&ids, &cfg, 1).unwrap().0, train);
    }

    #[test]
    fn split_needs_two() {
        let cfg = TrialConfig::default();
        assert!(split_trial(&[1], &cfg, 0).is_err());
        let (train, test) = split_trial(&[1, 2], &cfg, 0).unwrap();
        assert_eq!((train.len(), test.len()), (1, 1));
        let skewed = TrialConfig {
            train_fraction: 0.99,
            ..cfg
        };
        assert_eq!(split_trial(&[1, 2, 3], &skewed, 0).unwrap().1.len(), 1);
    }

    #[test]
    fn cmc_examples() {
        let c = cmc(&[1, 1, 2], 3).unwrap();
        assert_eq!(c.rates(), &[2.0 / 3.0, 1.0, 1.0]);
        assert_eq!(cmc(&[1; 4], 3).unwrap().rates(), &[1.0; 3]);
        assert_eq!(cmc(&[4], 4).unwrap().rates(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(cmc(&[0], 3), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(cmc(&[4], 3), Err(Error::RankOutOfRange { .. })));
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0];
        let r = pearson_corr(&a, &[2.0, 4.0, 5.0]).unwrap();
        // cov 1.5, var 1 and 7/3
        assert!((r - 1.5 / (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r - 0.981_980_506).abs() < 1e-8);
        assert!((pearson_corr(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_corr(&a, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pearson_corr(&a, &[1.0; 3]), Err(Error::ZeroVariance)));
        assert!(pearson_corr(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ranking_ties_by_position() {
        assert_eq!(ranking(&[0.5, 0.9, 0.5, 0.1]), vec![1, 0, 2, 3]);
        assert_eq!(correct_rank(&[0.5, 0.9, 0.5], |g| g == 2), Some(3));
    }

    #[test]
    fn manifest_round_trip() {
        let csv = "path,camera,identity\na.png,A,1\nb.png,B,1\nc.png,A,2\n";
        let ds = Dataset::read_manifest(csv.as_bytes()).unwrap();
        assert_eq!(ds.entries.len(), 3);
        assert_eq!(ds.paired_identities(), vec!["1".to_string()]);
        let mut out = Vec::new();
        ds.write_manifest(&mut out).unwrap();
        assert_eq!(Dataset::read_manifest(out.as_slice()).unwrap(), ds);
        assert!(Dataset::read_manifest("a.png,C,1\nb,A,2\n".as_bytes()).is_ok());
        assert!(Dataset::read_manifest("a.png,A,1\nb,C,2\n".as_bytes()).is_err());
    }

    #[test]
    fn image_ids_are_unique_stems() {
        let ds = Dataset::read_manifest("x/a.png,A,1\ny/b.jpg,B,1\n".as_bytes()).unwrap();
        assert_eq!(ds.image_ids().unwrap(), vec!["a", "b"]);
        let dup = Dataset::read_manifest("x/a.png,A,1\ny/a.jpg,B,1\n".as_bytes()).unwrap();
        assert!(dup.image_ids().is_err());
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        std::fs::write(&path, "path,camera,identity\na.png,A,1\n/abs/b.png,B,1\n").unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.entries[0].path, dir.path().join("a.png"));
        assert_eq!(ds.entries[1].path, PathBuf::from("/abs/b.png"));
    }

    #[test]
    fn multi_shot_uses_best_gallery_image() {
        let e = |p: &str, c, id: &str| DatasetEntry {
            path: p.into(),
            camera: c,
            identity: id.into(),
        };
        let ds = Dataset::new(vec![
            e("p1", Camera::A, "x"),
            e("g1", Camera::B, "x"),
            e("g2", Camera::B, "x"),
            e("p2", Camera::A, "y"),
            e("g3", Camera::B, "y"),
        ]);
        assert_eq!(ds.select(Camera::B, &["x".into()], false), vec![1, 2]);
        assert_eq!(ds.select(Camera::B, &["x".into()], true), vec![1]);
        // score favours entry "g2" for every probe
        let scorer = |ctx: &TrialContext<'_>| -> Result<Vec<Vec<f64>>> {
            Ok(ctx
                .probes
                .iter()
                .map(|_| ctx.gallery.iter().map(|&g| if g == 2 { 1.0 } else { 0.0 }).collect())
                .collect())
        };
        let cfg = TrialConfig {
            trials: 1,
            train_fraction: 0.5,
            ..Default::default()
        };
        let res = run_trial(&ds, &scorer, &cfg, 0).unwrap();
        if res.test_ids == ["x"] {
            assert_eq!(res.ranks, vec![1]);
            let single = TrialConfig {
                single_shot: true,
                ..cfg
            };
            assert_eq!(run_trial(&ds, &scorer, &single, 0).unwrap().ranks, vec![1]);
        } else {
            assert_eq!(res.ranks, vec![2]);
        }
    }
}
