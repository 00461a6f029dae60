//! Human saliency annotation: a labeler sees one body part of a probe image
//! and picks from a shuffled sample of 32 gallery images until they find
//! the same person. Parts that are found quickly and consistently are
//! salient.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of gallery images shown per session, target included.
pub const SAMPLE_SIZE: usize = 32;

/// A body part of one image, as a binary pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PartMask {
    pub image_id: String,
    pub part_id: String,
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl PartMask {
    pub fn new(
        image_id: impl Into<String>,
        part_id: impl Into<String>,
        width: usize,
        height: usize,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if mask.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                actual: mask.len(),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Annotation("part mask is empty".into()));
        }
        Ok(Self {
            image_id: image_id.into(),
            part_id: part_id.into(),
            width,
            height,
            mask,
        })
    }

    /// Loads a mask image; any non-zero pixel belongs to the part.
    pub fn load(path: &Path, image_id: impl Into<String>, part_id: impl Into<String>) -> Result<Self> {
        let img = image::ImageReader::open(path)?
            .with_guessed_format()?
            .decode()
            .map_err(|source| Error::ImageDecode {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let mask = img.pixels().map(|p| p.0[0] > 0).collect();
        Self::new(image_id, part_id, w as usize, h as usize, mask)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// False outside the mask bounds.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row < self.height && col < self.width && self.mask[row * self.width + col]
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationConfig {
    pub sigma_avg: f64,
    pub sigma_std: f64,
    /// Closed sessions needed before a part is scored.
    pub min_labelers: usize,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            sigma_avg: 4.0,
            sigma_std: 2.0,
            min_labelers: 1,
        }
    }
}

impl AnnotationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_avg > 0.0) || !(self.sigma_std > 0.0) {
            return Err(Error::InvalidConfig("annotation bandwidths must be positive".into()));
        }
        if self.min_labelers == 0 {
            return Err(Error::InvalidConfig("min_labelers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Open,
    Closed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSession {
    pub id: String,
    pub labeler: String,
    pub part_id: String,
    target: String,
    sample: Vec<String>,
    trials: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrialOutcome {
    pub correct: bool,
    pub trials: usize,
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Generator for a session, fixed by the global seed and the session id.
pub fn session_rng(seed: u64, session_id: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(session_id.as_bytes()));
    rng
}

impl AnnotationSession {
    /// Samples 31 distractors from `pool` (which must contain `target`),
    /// adds the target and shuffles.
    pub fn create(
        id: impl Into<String>,
        labeler: impl Into<String>,
        part_id: impl Into<String>,
        target: impl Into<String>,
        pool: &[String],
        seed: u64,
    ) -> Result<Self> {
        let id = id.into();
        let target = target.into();
        if !pool.contains(&target) {
            return Err(Error::Annotation(format!("target {target} is not in the gallery pool")));
        }
        let mut distractors: Vec<&String> = pool.iter().filter(|g| **g != target).collect();
        distractors.sort();
        distractors.dedup();
        if distractors.len() < SAMPLE_SIZE - 1 {
            return Err(Error::TooFew {
                needed: SAMPLE_SIZE,
                got: distractors.len() + 1,
            });
        }
        let mut rng = session_rng(seed, &id);
        let mut sample: Vec<String> = distractors
            .choose_multiple(&mut rng, SAMPLE_SIZE - 1)
            .map(|g| (*g).clone())
            .collect();
        sample.push(target.clone());
        sample.shuffle(&mut rng);
        Ok(Self {
            id,
            labeler: labeler.into(),
            part_id: part_id.into(),
            target,
            sample,
            trials: Vec::new(),
        })
    }

    /// Rebuilds a session from persisted parts. The trial list is replayed
    /// through [`record_trial`](Self::record_trial).
    pub fn restore(id: String, labeler: String, part_id: String, target: String, sample: Vec<String>) -> Result<Self> {
        if sample.len() != SAMPLE_SIZE || !sample.contains(&target) {
            return Err(Error::Annotation(format!(
                "session {id}: sample must hold {SAMPLE_SIZE} ids including the target"
            )));
        }
        Ok(Self {
            id,
            labeler,
            part_id,
            target,
            sample,
            trials: Vec::new(),
        })
    }

    pub fn sample(&self) -> &[String] {
        &self.sample
    }

    pub fn trials(&self) -> &[String] {
        &self.trials
    }

    /// The correct gallery id. Callers serving labelers should only reveal
    /// it once the session is closed.
    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn state(&self) -> SessionState {
        if self.trials.last() == Some(&self.target) {
            SessionState::Closed
        } else {
            SessionState::Open
        }
    }

    pub fn is_closed(&self) -> bool {
        self.state() == SessionState::Closed
    }

    /// Number of picks it took, once closed.
    pub fn trial_count(&self) -> Option<usize> {
        self.is_closed().then_some(self.trials.len())
    }

    pub fn record_trial(&mut self, chosen: &str) -> Result<TrialOutcome> {
        if self.is_closed() {
            return Err(Error::Annotation(format!("session {} is closed", self.id)));
        }
        if !self.sample.iter().any(|g| g == chosen) {
            return Err(Error::Annotation(format!(
                "{chosen} is not in the sample of session {}",
                self.id
            )));
        }
        self.trials.push(chosen.to_string());
        Ok(TrialOutcome {
            correct: chosen == self.target,
            trials: self.trials.len(),
        })
    }
}

/// `exp(-m^2 / sigma_avg^2) * exp(-s^2 / sigma_std^2)` with `m`, `s` the
/// mean and population standard deviation of the trial counts.
pub fn part_saliency_score(counts: &[usize], cfg: &AnnotationConfig) -> Result<f64> {
    cfg.validate()?;
    if counts.is_empty() {
        return Err(Error::Annotation("no closed sessions for this part".into()));
    }
    let n = counts.len() as f64;
    let m = counts.iter().sum::<usize>() as f64 / n;
    let var = counts.iter().map(|&c| (c as f64 - m).powi(2)).sum::<f64>() / n;
    Ok(score_from_moments(m, var.sqrt(), cfg))
}

pub fn score_from_moments(mean: f64, std: f64, cfg: &AnnotationConfig) -> f64 {
    (-(mean * mean) / (cfg.sigma_avg * cfg.sigma_avg)).exp() * (-(std * std) / (cfg.sigma_std * cfg.sigma_std)).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartScore {
    pub image_id: String,
    pub part_id: String,
    pub score: f64,
    pub labeler_count: usize,
}

/// Scores a part from all its sessions; open sessions are ignored.
pub fn score_part<'a>(
    image_id: &str,
    part_id: &str,
    sessions: impl IntoIterator<Item = &'a AnnotationSession>,
    cfg: &AnnotationConfig,
) -> Result<PartScore> {
    let counts: Vec<usize> = sessions
        .into_iter()
        .filter(|s| s.part_id == part_id)
        .filter_map(AnnotationSession::trial_count)
        .collect();
    if counts.len() < cfg.min_labelers {
        return Err(Error::Annotation(format!(
            "part {part_id} has {} closed sessions, need {}",
            counts.len(),
            cfg.min_labelers
        )));
    }
    Ok(PartScore {
        image_id: image_id.to_string(),
        part_id: part_id.to_string(),
        score: part_saliency_score(&counts, cfg)?,
        labeler_count: counts.len(),
    })
}

pub fn write_scores_csv<W: Write>(scores: &[PartScore], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(["image_id", "part_id", "score", "labeler_count"])?;
    for s in scores {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(reader: R) -> Result<Vec<PartScore>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("g{i}")).collect()
    }

    #[test]
    fn exact_pool_is_whole_sample() {
        let p = pool(32);
        let s = AnnotationSession::create("s1", "alice", "p1", "g7", &p, 1).unwrap();
        let mut sample = s.sample().to_vec();
        sample.sort();
        let mut expect = p.clone();
        expect.sort();
        assert_eq!(sample, expect);
    }

    #[test]
    fn sampling_is_deterministic_and_contains_target() {
        let p = pool(100);
        let a = AnnotationSession::create("s1", "l", "p", "g3", &p, 9).unwrap();
        let b = AnnotationSession::create("s1", "l", "p", "g3", &p, 9).unwrap();
        assert_eq!(a.sample(), b.sample());
        let c = AnnotationSession::create("s2", "l", "p", "g3", &p, 9).unwrap();
        assert_ne!(a.sample(), c.sample());
        for i in 0..200 {
            let s = AnnotationSession::create(format!("x{i}"), "l", "p", "g3", &p, i).unwrap();
            assert_eq!(s.sample().len(), SAMPLE_SIZE);
            assert!(s.sample().iter().any(|g| g == "g3"));
        }
    }

    #[test]
    fn too_small_pool_or_missing_target() {
        assert!(AnnotationSession::create("s", "l", "p", "g0", &pool(31), 0).is_err());
        assert!(AnnotationSession::create("s", "l", "p", "zz", &pool(40), 0).is_err());
    }

    #[test]
    fn trial_counting() {
        let p = pool(32);
        let mut s = AnnotationSession::create("s", "l", "p", "g0", &p, 0).unwrap();
        let wrong: Vec<String> = s.sample().iter().filter(|g| *g != "g0").take(2).cloned().collect();
        assert_eq!(
            s.record_trial(&wrong[0]).unwrap(),
            TrialOutcome {
                correct: false,
                trials: 1
            }
        );
        assert_eq!(s.record_trial(&wrong[1]).unwrap().trials, 2);
        assert_eq!(s.trial_count(), None);
        assert!(s.record_trial("nope").is_err());
        assert_eq!(
            s.record_trial("g0").unwrap(),
            TrialOutcome {
                correct: true,
                trials: 3
            }
        );
        assert_eq!(s.trial_count(), Some(3));
        assert!(s.record_trial(&wrong[0]).is_err());
        assert_eq!(s.trials().len(), 3);
    }

    #[test]
    fn score_examples() {
        let cfg = AnnotationConfig::default();
        let s = part_saliency_score(&[1, 1, 1], &cfg).unwrap();
        assert!((s - (-1.0f64 / 16.0).exp()).abs() < 1e-12);
        assert!((s - 0.9394).abs() < 1e-4);
        let s = part_saliency_score(&[2], &cfg).unwrap();
        assert!((s - 0.7788).abs() < 1e-4);
        // m = 2, s = 1
        let s = part_saliency_score(&[1, 3], &cfg).unwrap();
        assert!((s - (-0.25f64).exp() * (-0.25f64).exp()).abs() < 1e-12);
        assert!(part_saliency_score(&[1, 60], &cfg).unwrap() < 1e-10);
        assert!(part_saliency_score(&[], &cfg).is_err());
    }

    #[test]
    fn scores_csv_round_trip() {
        let mut out = Vec::new();
        write_scores_csv(&[], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out.clone()).unwrap(),
            "image_id,part_id,score,labeler_count\n"
        );
        assert!(read_scores_csv(out.as_slice()).unwrap().is_empty());
        let scores: Vec<PartScore> = (0..3)
            .map(|i| PartScore {
                image_id: format!("img{i}"),
                part_id: format!("part{i}"),
                score: 0.1 + i as f64 / 7.0,
                labeler_count: i + 1,
            })
            .collect();
        let mut out = Vec::new();
        write_scores_csv(&scores, &mut out).unwrap();
        assert_eq!(read_scores_csv(out.as_slice()).unwrap(), scores);
    }

    #[test]
    fn open_sessions_are_not_scored() {
        let p = pool(40);
        let mut a = AnnotationSession::create("a", "l1", "p1", "g1", &p, 0).unwrap();
        let b = AnnotationSession::create("b", "l2", "p1", "g1", &p, 0).unwrap();
        a.record_trial("g1").unwrap();
        let cfg = AnnotationConfig::default();
        let score = score_part("img", "p1", [&a, &b], &cfg).unwrap();
        assert_eq!(score.labeler_count, 1);
        assert!(score_part("img", "p2", [&a, &b], &cfg).is_err());
    }

    #[test]
    fn mask_bounds() {
        assert!(PartMask::new("i", "p", 2, 2, vec![false; 4]).is_err());
        assert!(PartMask::new("i", "p", 2, 2, vec![true; 3]).is_err());
        let m = PartMask::new("i", "p", 2, 2, vec![false, true, false, false]).unwrap();
        assert!(m.contains(0, 1));
        assert!(!m.contains(1, 1));
        assert!(!m.contains(5, 0));
        assert_eq!(m.area(), 1);
    }
}
