//! Synthetic two-camera pedestrian images.
//!
//! Every identity wears a shirt and trousers drawn from a small palette of
//! muted colours, so clothing alone is ambiguous, plus one small badge whose
//! colour and position are unique to the identity. The two views of an
//! identity differ by a vertical shift, the background, a global brightness
//! change and pixel noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::evaluate::{Camera, Dataset, DatasetEntry};
use crate::imaging::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub identities: usize,
    pub height: usize,
    pub width: usize,
    /// Largest vertical shift between views, in pixels.
    pub max_shift: usize,
    /// Standard deviation of per-pixel noise, in 8-bit levels.
    pub noise: f64,
    /// Largest relative brightness change between views.
    pub brightness: f64,
    /// Side of the square identity badge, in pixels.
    pub badge: usize,
    /// Largest per-identity offset added to the shared clothing colours.
    pub clothing_jitter: i16,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 60,
            height: 96,
            width: 40,
            max_shift: 8,
            noise: 3.0,
            brightness: 0.03,
            badge: 16,
            clothing_jitter: 8,
            seed: 0,
        }
    }
}

const SHIRTS: [[u8; 3]; 3] = [[60, 65, 90], [90, 90, 95], [50, 50, 55]];
const TROUSERS: [[u8; 3]; 2] = [[35, 35, 40], [60, 70, 100]];
const SKIN: [u8; 3] = [200, 160, 130];

/// Appearance of one identity, shared by both views.
#[derive(Clone, Debug, PartialEq)]
pub struct Person {
    pub shirt: [u8; 3],
    pub trousers: [u8; 3],
    pub badge_color: [u8; 3],
    /// Top-left corner of the badge relative to the figure, `(row, col)`.
    pub badge_at: (usize, usize),
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

pub fn people(cfg: &SynthConfig) -> Vec<Person> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let torso = (cfg.height * 2 / 10, cfg.height * 55 / 100);
    (0..cfg.identities)
        .map(|i| {
            // evenly spread hues, alternating value so neighbours differ
            let hue = 360.0 * i as f64 / cfg.identities as f64;
            let value = if i % 2 == 0 { 0.95 } else { 0.6 };
            let badge_row = rng.random_range(torso.0..torso.1.saturating_sub(cfg.badge).max(torso.0 + 1));
            let margin = cfg.width / 8;
            let badge_col = rng.random_range(margin..cfg.width.saturating_sub(cfg.badge + margin).max(margin + 1));
            let shirt = SHIRTS[rng.random_range(0..SHIRTS.len())];
            let trousers = TROUSERS[rng.random_range(0..TROUSERS.len())];
            let j = cfg.clothing_jitter;
            let (ds, dt): (i16, i16) = (rng.random_range(-j..=j), rng.random_range(-j..=j));
            let tint = |c: [u8; 3], d: i16| c.map(|v| (v as i16 + d).clamp(0, 255) as u8);
            let (shirt, trousers) = (tint(shirt, ds), tint(trousers, dt));
            Person {
                shirt,
                trousers,
                badge_color: hsv_to_rgb(hue, 1.0, value),
                badge_at: (badge_row, badge_col),
            }
        })
        .collect()
}

/// Renders one view of a person in front of a plain `background`, with the
/// figure shifted down by `shift` pixels (negative shifts move it up).
pub fn render(
    person: &Person,
    cfg: &SynthConfig,
    background: [u8; 3],
    shift: i64,
    gain: f64,
    rng: &mut impl Rng,
) -> Image {
    let (h, w) = (cfg.height as i64, cfg.width as i64);
    let head = (h * 2 / 10, w * 3 / 10);
    let waist = h * 55 / 100;
    let noise = Normal::new(0.0, cfg.noise.max(1e-9)).expect("finite noise");
    Image::from_fn(cfg.width, cfg.height, |row, col| {
        let (y, x) = (row as i64 - shift, col as i64);
        let margin = w / 8;
        let base = if y < 0 || y >= h {
            background
        } else if y < head.0 {
            if (x - w / 2).abs() <= head.1 / 2 {
                SKIN
            } else {
                background
            }
        } else if x < margin || x >= w - margin {
            background
        } else {
            let (br, bc) = person.badge_at;
            let (br, bc) = (br as i64, bc as i64);
            let b = cfg.badge as i64;
            if y >= br && y < br + b && x >= bc && x < bc + b {
                person.badge_color
            } else if y < waist {
                person.shirt
            } else {
                person.trousers
            }
        };
        base.map(|c| (c as f64 * gain + noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
    })
}

/// One image of a generated dataset.
#[derive(Clone, Debug)]
pub struct SynthImage {
    pub image: Image,
    pub camera: Camera,
    pub identity: String,
}

/// Two views per identity, camera A first, identities in order.
pub fn generate(cfg: &SynthConfig) -> Vec<SynthImage> {
    let persons = people(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let max = cfg.max_shift as i64;
    let mut out = Vec::with_capacity(2 * persons.len());
    for (i, p) in persons.iter().enumerate() {
        for camera in [Camera::A, Camera::B] {
            let shift = rng.random_range(-max / 2..=max / 2);
            let gain = 1.0 + rng.random_range(-cfg.brightness..=cfg.brightness);
            let grey: u8 = rng.random_range(110..200);
            let background = [grey, grey, grey.saturating_add(8)];
            out.push(SynthImage {
                image: render(p, cfg, background, shift, gain, &mut rng),
                camera,
                identity: format!("{i:03}"),
            });
        }
    }
    out
}

/// Writes the images as PNG files into `dir` and returns the manifest.
pub fn write_dataset(images: &[SynthImage], dir: &Path) -> Result<Dataset> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(images.len());
    for img in images {
        let path = dir.join(format!("{}_{}.png", img.identity, img.camera));
        img.image
            .to_rgb_image()
            .save(&path)
            .map_err(|source| crate::Error::ImageDecode {
                path: path.clone(),
                source,
            })?;
        entries.push(DatasetEntry {
            path,
            camera: img.camera,
            identity: img.identity.clone(),
        });
    }
    Ok(Dataset::new(entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let cfg = SynthConfig {
            identities: 4,
            ..Default::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.len(), 8);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!((x.image.width(), x.image.height()), (40, 96));
        }
        assert_eq!(a[0].camera, Camera::A);
        assert_eq!(a[1].camera, Camera::B);
        assert_eq!(a[0].identity, a[1].identity);
    }

    #[test]
    fn badges_are_distinct() {
        let ps = people(&SynthConfig::default());
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                assert!(ps[i].badge_color != ps[j].badge_color || ps[i].badge_at != ps[j].badge_at);
            }
        }
    }

    #[test]
    fn shift_moves_figure() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..Default::default()
        };
        let p = &people(&cfg)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = render(p, &cfg, [128; 3], 0, 1.0, &mut rng);
        let b = render(p, &cfg, [128; 3], 4, 1.0, &mut rng);
        for row in 0..cfg.height - 4 {
            for col in 0..cfg.width {
                assert_eq!(a.pixel(row, col), b.pixel(row + 4, col));
            }
        }
    }
}
