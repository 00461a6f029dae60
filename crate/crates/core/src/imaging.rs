//! Image loading and dense patch descriptors.
//!
//! Every patch on the dense grid is described by LAB colour histograms taken
//! at several downsampled scales plus a SIFT-like orientation histogram per
//! LAB channel. With the default [`GridConfig`] this yields
//! `32 * 3 * 3 + 128 * 3 = 672` values per patch.

use std::path::Path;

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::LengthMismatch {
                expected: width * height * 3,
                actual: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    /// Builds an image by evaluating `f(row, col)` for every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for r in 0..height {
            for c in 0..width {
                pixels.extend_from_slice(&f(r, c));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear resize to `width` x `height`.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let resized = image::imageops::resize(&self.to_rgb_image(), width as u32, height as u32, FilterType::Triangle);
        Image {
            width,
            height,
            pixels: resized.into_raw(),
        }
    }

    pub fn to_rgb_image(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("pixel buffer length is checked on construction")
    }

    pub fn from_rgb_image(img: image::RgbImage) -> Image {
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            pixels: img.into_raw(),
        }
    }
}

/// Loads a PNG/JPEG/BMP file as RGB. Grayscale input is promoted to R=G=B.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let decoded = image::ImageReader::open(path)
        .map_err(Error::Io)?
        .with_guessed_format()
        .map_err(Error::Io)?
        .decode()
        .map_err(|source| Error::ImageDecode {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(Image::from_rgb_image(decoded.to_rgb8()))
}

/// Loads an image and rescales it to `(height, width)` when a size is given.
pub fn load_image_resized(path: impl AsRef<Path>, size: Option<(usize, usize)>) -> Result<Image> {
    let img = load_image(path)?;
    Ok(match size {
        Some((h, w)) => img.resize(w, h),
        None => img,
    })
}

/// Dense grid sampling and descriptor layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub patch_size: usize,
    pub stride: usize,
    /// Downsampling factors for the colour histograms.
    pub scales: Vec<f64>,
    pub color_bins: usize,
    /// SIFT cells per axis.
    pub sift_cells: usize,
    pub sift_orient_bins: usize,
    /// Rows of vertical slack `l` allowed in the adjacency-constrained search.
    pub adjacency_relax: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            patch_size: 10,
            stride: 4,
            scales: vec![0.5, 0.75, 1.0],
            color_bins: 32,
            sift_cells: 4,
            sift_orient_bins: 8,
            adjacency_relax: 2,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::InvalidConfig("patch_size must be positive".into()));
        }
        if self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::InvalidConfig(format!(
                "stride must be in 1..={}, got {}",
                self.patch_size, self.stride
            )));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::InvalidConfig(format!(
                "scale factors must lie in (0, 1], got {:?}",
                self.scales
            )));
        }
        if self.color_bins == 0 || self.sift_cells == 0 || self.sift_orient_bins == 0 {
            return Err(Error::InvalidConfig("bin counts must be positive".into()));
        }
        if self.sift_cells > self.patch_size {
            return Err(Error::InvalidConfig("more SIFT cells than patch pixels".into()));
        }
        Ok(())
    }

    pub fn color_dim(&self) -> usize {
        self.color_bins * 3 * self.scales.len()
    }

    pub fn sift_channel_dim(&self) -> usize {
        self.sift_cells * self.sift_cells * self.sift_orient_bins
    }

    pub fn sift_dim(&self) -> usize {
        self.sift_channel_dim() * 3
    }

    pub fn descriptor_dim(&self) -> usize {
        self.color_dim() + self.sift_dim()
    }

    fn sorted_scales(&self) -> Vec<f64> {
        let mut s = self.scales.clone();
        s.sort_by(f64::total_cmp);
        s
    }
}

/// Number of patch rows and columns for an image of the given size.
pub fn grid_dims(width: usize, height: usize, cfg: &GridConfig) -> Result<(usize, usize)> {
    if width < cfg.patch_size || height < cfg.patch_size {
        return Err(Error::ImageTooSmall {
            width,
            height,
            patch: cfg.patch_size,
        });
    }
    let rows = (height - cfg.patch_size) / cfg.stride + 1;
    let cols = (width - cfg.patch_size) / cfg.stride + 1;
    Ok((rows, cols))
}

/// Lattice of patch descriptors for one image, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f32>,
    pub camera: String,
    pub identity: Option<String>,
    pub image_id: String,
}

impl PatchGrid {
    pub fn from_descriptors(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(Error::LengthMismatch {
                expected: rows * cols * dim,
                actual: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            dim,
            data,
            camera: String::new(),
            identity: None,
            image_id: String::new(),
        })
    }

    pub fn with_meta(
        mut self,
        image_id: impl Into<String>,
        camera: impl Into<String>,
        identity: Option<String>,
    ) -> Self {
        self.image_id = image_id.into();
        self.camera = camera.into();
        self.identity = identity;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of patches `M * N`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn descriptor(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    #[inline]
    pub fn descriptor_at(&self, row: usize, col: usize) -> &[f32] {
        self.descriptor(row * self.cols + col)
    }

    pub fn descriptor_mut(&mut self, index: usize) -> &mut [f32] {
        &mut self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    #[inline]
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }
}

/// sRGB (D65) to CIE LAB, each channel rescaled linearly to [0, 1]:
/// `L / 100`, `(a + 128) / 256`, `(b + 128) / 256`.
pub fn rgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    fn linearize(c: u8) -> f64 {
        let c = c as f64 / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    fn f(t: f64) -> f64 {
        const DELTA: f64 = 6.0 / 29.0;
        if t > DELTA * DELTA * DELTA {
            t.cbrt()
        } else {
            t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
        }
    }
    let (r, g, b) = (linearize(rgb[0]), linearize(rgb[1]), linearize(rgb[2]));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let (fx, fy, fz) = (f(x / 0.95047), f(y), f(z / 1.08883));
    let l = 116.0 * fy - 16.0;
    let a = 500.0 * (fx - fy);
    let bb = 200.0 * (fy - fz);
    [
        (l / 100.0).clamp(0.0, 1.0),
        ((a + 128.0) / 256.0).clamp(0.0, 1.0),
        ((bb + 128.0) / 256.0).clamp(0.0, 1.0),
    ]
}

#[inline]
fn hard_bin(value: f64, bins: usize) -> usize {
    ((value * bins as f64) as usize).min(bins - 1)
}

/// Blocks with less energy than this are treated as empty (rounding noise
/// from the colour transform on achromatic input).
const MIN_BLOCK_NORM: f64 = 1e-9;

fn l2_normalize(block: &mut [f64]) {
    let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > MIN_BLOCK_NORM {
        block.iter_mut().for_each(|v| *v /= norm);
    } else {
        block.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Per-scale LAB bin indices.
struct BinnedScale {
    width: usize,
    height: usize,
    /// `[channel][row * width + col]`
    bins: [Vec<u16>; 3],
}

/// Per-channel gradient magnitude and orientation at full resolution.
struct GradientPlane {
    magnitude: Vec<f64>,
    angle: Vec<f64>,
}

/// Precomputed per-image planes; descriptors for any centre are read off
/// these without touching the pixels again.
pub struct FeatureExtractor<'a> {
    cfg: &'a GridConfig,
    width: usize,
    height: usize,
    scales: Vec<(f64, BinnedScale)>,
    gradients: [GradientPlane; 3],
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(image: &Image, cfg: &'a GridConfig) -> Result<Self> {
        cfg.validate()?;
        if image.width < cfg.patch_size || image.height < cfg.patch_size {
            return Err(Error::ImageTooSmall {
                width: image.width,
                height: image.height,
                patch: cfg.patch_size,
            });
        }
        let scales = cfg
            .sorted_scales()
            .into_iter()
            .map(|f| (f, bin_scale(image, f, cfg.color_bins)))
            .collect();
        let lab: Vec<[f64; 3]> = (0..image.height)
            .flat_map(|r| (0..image.width).map(move |c| (r, c)))
            .map(|(r, c)| rgb_to_lab(image.pixel(r, c)))
            .collect();
        let gradients = [0, 1, 2].map(|ch| gradient_plane(&lab, ch, image.width, image.height));
        Ok(Self {
            cfg,
            width: image.width,
            height: image.height,
            scales,
            gradients,
        })
    }

    /// Colour histograms around `center` (pixel coordinates at scale 1):
    /// channel-major, then scale ascending, each block L2-normalised.
    pub fn color_histograms(&self, center: (f64, f64)) -> Vec<f32> {
        let bins = self.cfg.color_bins;
        let half = self.cfg.patch_size as f64 / 2.0;
        let mut out = vec![0f64; self.cfg.color_dim()];
        let n_scales = self.scales.len();
        for (si, (factor, scale)) in self.scales.iter().enumerate() {
            let (top, h) = window_start(center.0 * factor - half, self.cfg.patch_size, scale.height);
            let (left, w) = window_start(center.1 * factor - half, self.cfg.patch_size, scale.width);
            for ch in 0..3 {
                let offset = (ch * n_scales + si) * bins;
                let plane = &scale.bins[ch];
                for r in top..top + h {
                    for c in left..left + w {
                        out[offset + plane[r * scale.width + c] as usize] += 1.0;
                    }
                }
            }
        }
        out.chunks_mut(bins).for_each(l2_normalize);
        out.into_iter().map(|v| v as f32).collect()
    }

    /// Orientation histograms over a `cells x cells` layout, per LAB channel,
    /// each channel block L2-normalised.
    pub fn dense_sift(&self, center: (f64, f64)) -> Vec<f32> {
        let cfg = self.cfg;
        let p = cfg.patch_size;
        let half = p as f64 / 2.0;
        let (top, h) = window_start(center.0 - half, p, self.height);
        let (left, w) = window_start(center.1 - half, p, self.width);
        let orient = cfg.sift_orient_bins;
        let cells = cfg.sift_cells;
        let bin_width = std::f64::consts::TAU / orient as f64;
        let mut out = vec![0f64; cfg.sift_dim()];
        for (ch, grad) in self.gradients.iter().enumerate() {
            let block = &mut out[ch * cfg.sift_channel_dim()..(ch + 1) * cfg.sift_channel_dim()];
            for dr in 0..h {
                let cell_r = dr * cells / h;
                for dc in 0..w {
                    let cell_c = dc * cells / w;
                    let idx = (top + dr) * self.width + left + dc;
                    let mag = grad.magnitude[idx];
                    if mag == 0.0 {
                        continue;
                    }
                    let pos = grad.angle[idx] / bin_width;
                    let lower = pos.floor();
                    let frac = pos - lower;
                    let b0 = (lower as usize) % orient;
                    let b1 = (b0 + 1) % orient;
                    let base = (cell_r * cells + cell_c) * orient;
                    block[base + b0] += mag * (1.0 - frac);
                    block[base + b1] += mag * frac;
                }
            }
            l2_normalize(block);
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    pub fn descriptor(&self, center: (f64, f64)) -> Vec<f32> {
        let mut d = self.color_histograms(center);
        d.extend(self.dense_sift(center));
        d
    }
}

/// Top-left and extent of a `patch`-wide window starting near `start`,
/// clamped to `[0, limit)`.
fn window_start(start: f64, patch: usize, limit: usize) -> (usize, usize) {
    if limit <= patch {
        return (0, limit);
    }
    let s = start.round().max(0.0) as usize;
    (s.min(limit - patch), patch)
}

fn bin_scale(image: &Image, factor: f64, bins: usize) -> BinnedScale {
    let scaled = if factor == 1.0 {
        image.clone()
    } else {
        let w = ((image.width as f64 * factor).round() as usize).max(1);
        let h = ((image.height as f64 * factor).round() as usize).max(1);
        image.resize(w, h)
    };
    let n = scaled.width * scaled.height;
    let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for px in scaled.pixels.chunks_exact(3) {
        let lab = rgb_to_lab([px[0], px[1], px[2]]);
        for ch in 0..3 {
            planes[ch].push(hard_bin(lab[ch], bins) as u16);
        }
    }
    BinnedScale {
        width: scaled.width,
        height: scaled.height,
        bins: planes,
    }
}

fn gradient_plane(lab: &[[f64; 3]], ch: usize, width: usize, height: usize) -> GradientPlane {
    let at = |r: usize, c: usize| lab[r * width + c][ch];
    let mut magnitude = Vec::with_capacity(width * height);
    let mut angle = Vec::with_capacity(width * height);
    for r in 0..height {
        let (up, down) = (r.saturating_sub(1), (r + 1).min(height - 1));
        for c in 0..width {
            let (l, rr) = (c.saturating_sub(1), (c + 1).min(width - 1));
            let gx = (at(r, rr) - at(r, l)) / 2.0;
            let gy = (at(down, c) - at(up, c)) / 2.0;
            magnitude.push((gx * gx + gy * gy).sqrt());
            angle.push(gy.atan2(gx).rem_euclid(std::f64::consts::TAU));
        }
    }
    GradientPlane { magnitude, angle }
}

/// Colour histogram part of the descriptor for a single centre.
pub fn color_histograms(image: &Image, center: (f64, f64), cfg: &GridConfig) -> Result<Vec<f32>> {
    Ok(FeatureExtractor::new(image, cfg)?.color_histograms(center))
}

/// SIFT part of the descriptor for a single centre.
pub fn dense_sift(image: &Image, center: (f64, f64), cfg: &GridConfig) -> Result<Vec<f32>> {
    Ok(FeatureExtractor::new(image, cfg)?.dense_sift(center))
}

/// Centre (row, col) of grid patch `(m, n)` at scale 1.
pub fn patch_center(m: usize, n: usize, cfg: &GridConfig) -> (f64, f64) {
    let half = cfg.patch_size as f64 / 2.0;
    ((m * cfg.stride) as f64 + half, (n * cfg.stride) as f64 + half)
}

/// Descriptors for every patch on the dense grid.
pub fn extract_grid(image: &Image, cfg: &GridConfig) -> Result<PatchGrid> {
    let (rows, cols) = grid_dims(image.width, image.height, cfg)?;
    let fx = FeatureExtractor::new(image, cfg)?;
    let dim = cfg.descriptor_dim();
    let mut data = Vec::with_capacity(rows * cols * dim);
    for m in 0..rows {
        for n in 0..cols {
            data.extend(fx.descriptor(patch_center(m, n, cfg)));
        }
    }
    PatchGrid::from_descriptors(rows, cols, dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }

    #[test]
    fn grid_dims_for_dataset_sizes() {
        let cfg = GridConfig::default();
        assert_eq!(grid_dims(48, 128, &cfg).unwrap(), (30, 10));
        assert_eq!(grid_dims(60, 160, &cfg).unwrap(), (38, 13));
        assert_eq!(grid_dims(10, 10, &cfg).unwrap(), (1, 1));
        assert!(matches!(grid_dims(9, 128, &cfg), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn default_descriptor_is_672() {
        assert_eq!(GridConfig::default().descriptor_dim(), 672);
    }

    #[test]
    fn config_validation() {
        let mut cfg = GridConfig {
            stride: 11,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg = GridConfig::default();
        cfg.scales = vec![0.5, 1.5];
        assert!(cfg.validate().is_err());
        cfg.scales = vec![0.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn constant_patch_histograms_are_one_hot() {
        let cfg = GridConfig::default();
        let img = Image::from_fn(48, 128, |_, _| [200, 40, 90]);
        let h = color_histograms(&img, (64.0, 24.0), &cfg).unwrap();
        assert_eq!(h.len(), 288);
        for block in h.chunks(32) {
            assert_eq!(block.iter().filter(|&&v| v != 0.0).count(), 1);
            assert!((norm(block) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identical_patches_give_identical_histograms() {
        let cfg = GridConfig::default();
        let tile = random_image(12, 12, 3);
        // Two copies of the same tile on a flat background, well apart.
        let img = Image::from_fn(48, 128, |r, c| {
            if (20..32).contains(&r) && (10..22).contains(&c) {
                tile.pixel(r - 20, c - 10)
            } else if (80..92).contains(&r) && (10..22).contains(&c) {
                tile.pixel(r - 80, c - 10)
            } else {
                [30, 30, 30]
            }
        });
        let fx = FeatureExtractor::new(&img, &cfg).unwrap();
        // scale 1 only, so the surrounding background cannot differ
        let cfg1 = GridConfig {
            scales: vec![1.0],
            ..cfg.clone()
        };
        let fx1 = FeatureExtractor::new(&img, &cfg1).unwrap();
        assert_eq!(fx1.color_histograms((26.0, 16.0)), fx1.color_histograms((86.0, 16.0)));
        assert_eq!(fx.dense_sift((26.0, 16.0)), fx.dense_sift((86.0, 16.0)));
    }

    #[test]
    fn scale_one_histogram_matches_per_pixel_binning() {
        let cfg = GridConfig {
            scales: vec![1.0],
            ..GridConfig::default()
        };
        let img = random_image(30, 30, 11);
        let h = color_histograms(&img, (12.0, 17.0), &cfg).unwrap();
        // window top-left = centre - 5
        let mut counts = vec![[0f64; 32]; 3];
        for r in 7..17 {
            for c in 12..22 {
                let lab = rgb_to_lab(img.pixel(r, c));
                for ch in 0..3 {
                    let b = ((lab[ch] * 32.0).floor() as usize).min(31);
                    counts[ch][b] += 1.0;
                }
            }
        }
        for ch in 0..3 {
            assert_eq!(counts[ch].iter().sum::<f64>(), 100.0);
            let n = counts[ch].iter().map(|v| v * v).sum::<f64>().sqrt();
            for b in 0..32 {
                assert!((h[ch * 32 + b] as f64 - counts[ch][b] / n).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_patch_has_no_sift_energy() {
        let cfg = GridConfig::default();
        let img = Image::from_fn(20, 20, |_, _| [10, 120, 250]);
        let s = dense_sift(&img, (10.0, 10.0), &cfg).unwrap();
        assert_eq!(s.len(), 384);
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn horizontal_edge_votes_vertical_orientations() {
        let cfg = GridConfig::default();
        let img = Image::from_fn(20, 20, |r, _| if r < 10 { [255, 255, 255] } else { [0, 0, 0] });
        let s = dense_sift(&img, (10.0, 10.0), &cfg).unwrap();
        let l = &s[..128];
        // Oracle: brightness drops going down, so the gradient points up:
        // atan2(gy < 0, 0) = 3pi/2 which lands exactly on bin 6.
        let mut per_bin = [0f64; 8];
        for (i, v) in l.iter().enumerate() {
            per_bin[i % 8] += *v as f64;
        }
        let total: f64 = per_bin.iter().sum();
        assert!(total > 0.0);
        assert!(per_bin[6] / total > 0.999, "{per_bin:?}");
    }

    #[test]
    fn rotated_ramp_shifts_orientation_by_two_bins() {
        let cfg = GridConfig::default();
        let rows = Image::from_fn(30, 30, |r, _| [(r * 8) as u8, (r * 8) as u8, (r * 8) as u8]);
        let cols = Image::from_fn(30, 30, |_, c| [(c * 8) as u8, (c * 8) as u8, (c * 8) as u8]);
        let a = dense_sift(&rows, (15.0, 15.0), &cfg).unwrap();
        let b = dense_sift(&cols, (15.0, 15.0), &cfg).unwrap();
        // The cell layout is symmetric under transposition, so cell (i, j) of
        // one ramp pairs with cell (j, i) of the other.
        for i in 0..4 {
            for j in 0..4 {
                for o in 0..8 {
                    let va = a[(i * 4 + j) * 8 + (o + 2) % 8];
                    let vb = b[(j * 4 + i) * 8 + o];
                    assert!((va - vb).abs() < 1e-6, "cell ({i},{j}) bin {o}: {va} vs {vb}");
                }
            }
        }
    }

    #[test]
    fn extract_grid_sizes() {
        let cfg = GridConfig::default();
        let g = extract_grid(&random_image(48, 128, 1), &cfg).unwrap();
        assert_eq!(g.len(), 300);
        assert_eq!(g.dim(), 672);
        let g = extract_grid(&random_image(60, 160, 2), &cfg).unwrap();
        assert_eq!(g.shape(), (38, 13));
        assert_eq!(g.len(), 494);
    }

    #[test]
    fn extraction_is_deterministic_and_blocks_normalised() {
        let cfg = GridConfig::default();
        let img = random_image(48, 64, 5);
        let a = extract_grid(&img, &cfg).unwrap();
        let b = extract_grid(&img.clone(), &cfg).unwrap();
        assert_eq!(a.data(), b.data());
        for i in 0..a.len() {
            let d = a.descriptor(i);
            for block in d[..288].chunks(32).chain(d[288..].chunks(128)) {
                let n = norm(block);
                assert!(n == 0.0 || (n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn grid_descriptor_uses_top_left_at_stride() {
        let cfg = GridConfig::default();
        let img = random_image(30, 30, 9);
        let g = extract_grid(&img, &cfg).unwrap();
        let fx = FeatureExtractor::new(&img, &cfg).unwrap();
        // patch (2, 3) starts at pixel (8, 12)
        assert_eq!(g.descriptor_at(2, 3), fx.descriptor((13.0, 17.0)).as_slice());
    }

    #[test]
    fn load_png_and_promote_gray() {
        let dir = tempfile::tempdir().unwrap();
        let rgb_path = dir.path().join("a.png");
        let img = random_image(48, 128, 7);
        img.to_rgb_image().save(&rgb_path).unwrap();
        let loaded = load_image(&rgb_path).unwrap();
        assert_eq!((loaded.width(), loaded.height()), (48, 128));
        assert_eq!(loaded, img);

        let gray_path = dir.path().join("g.png");
        let gray = image::GrayImage::from_fn(60, 160, |x, y| image::Luma([((x + y) % 256) as u8]));
        gray.save(&gray_path).unwrap();
        let loaded = load_image(&gray_path).unwrap();
        assert_eq!((loaded.width(), loaded.height()), (60, 160));
        for px in loaded.pixels().chunks(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }

        let resized = load_image_resized(&gray_path, Some((128, 48))).unwrap();
        assert_eq!((resized.width(), resized.height()), (48, 128));
    }

    #[test]
    fn truncated_file_fails_to_decode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let mut bytes = Vec::new();
        random_image(48, 128, 8)
            .to_rgb_image()
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_image(&path).is_err());
    }
}
