//! Grayscale images: denoising, skew correction, contrast stretching,
//! augmentation, the procedural word renderer, and PGM/manifest I/O.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::shaping::{shape_word, GlyphForm, Position, ShapingError};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("{}: file not found", .0.display())]
    FileNotFound(PathBuf),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: malformed manifest line: {reason}", path.display())]
    MalformedManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{}: unsupported image format: {reason}", path.display())]
    UnsupportedImageFormat { path: PathBuf, reason: String },
    #[error(transparent)]
    Shaping(#[from] ShapingError),
}

impl ImagingError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            ImagingError::FileNotFound(path.to_path_buf())
        } else {
            ImagingError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Option<Self> {
        (pixels.len() == width * height).then_some(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
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

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    fn get_clamped(&self, x: isize, y: isize) -> u8 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear sample at a continuous pixel coordinate; `fill` outside.
    fn sample(&self, x: f64, y: f64, fill: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let at = |xi: f64, yi: f64| {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                fill
            } else {
                self.get(xi as usize, yi as usize) as f64
            }
        };
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx;
        let bottom = at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len().max(1) as f64
    }

    /// Intensity at quantile `q` in `[0, 1]`.
    pub fn percentile(&self, q: f64) -> u8 {
        let mut hist = [0usize; 256];
        for &v in &self.pixels {
            hist[v as usize] += 1;
        }
        let n = self.pixels.len();
        if n == 0 {
            return 0;
        }
        let rank = (q.clamp(0.0, 1.0) * (n - 1) as f64).round() as usize;
        let mut seen = 0;
        for (v, &c) in hist.iter().enumerate() {
            seen += c;
            if seen > rank {
                return v as u8;
            }
        }
        255
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Median over a `(2r+1)^2` window, clamping at the border.
pub fn median_filter(img: &GrayImage, radius: usize) -> Result<GrayImage, ImagingError> {
    if radius == 0 {
        return Err(ImagingError::InvalidParameter("median radius must be >= 1".into()));
    }
    let r = radius as isize;
    let mut window = Vec::with_capacity((2 * radius + 1).pow(2));
    Ok(GrayImage::from_fn(img.width, img.height, |x, y| {
        window.clear();
        for dy in -r..=r {
            for dx in -r..=r {
                window.push(img.get_clamped(x as isize + dx, y as isize + dy));
            }
        }
        let mid = window.len() / 2;
        *window.select_nth_unstable(mid).1
    }))
}

/// Separable Gaussian blur, kernel truncated at 3 sigma and normalized.
pub fn gaussian_filter(img: &GrayImage, sigma: f64) -> Result<GrayImage, ImagingError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ImagingError::InvalidParameter(format!("sigma {sigma} must be > 0")));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .zip(&kernel)
                .map(|(d, k)| k * img.get_clamped(x as isize + d, y as isize) as f64)
                .sum();
        }
    }
    Ok(GrayImage::from_fn(w, h, |x, y| {
        let v: f64 = (-r..=r)
            .zip(&kernel)
            .map(|(d, k)| {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                k * tmp[yy * w + x]
            })
            .sum();
        to_u8(v)
    }))
}

/// Linear stretch sending the 2nd/98th percentiles to 0/255.
pub fn contrast_stretch(img: &GrayImage) -> GrayImage {
    let lo = img.percentile(0.02) as f64;
    let hi = img.percentile(0.98) as f64;
    if hi <= lo {
        return img.clone();
    }
    let scale = 255.0 / (hi - lo);
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&v| to_u8((v as f64 - lo) * scale)).collect(),
    }
}

/// Rotate counter-clockwise (as displayed) by `degrees` about the centre.
pub fn rotate(img: &GrayImage, degrees: f64, fill: u8) -> GrayImage {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    GrayImage::from_fn(img.width, img.height, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = cx + dx * c - dy * s;
        let sy = cy + dx * s + dy * c;
        to_u8(img.sample(sx, sy, fill as f64))
    })
}

/// Bilinear resize with pixel-centre alignment.
pub fn resize(img: &GrayImage, width: usize, height: usize, fill: u8) -> GrayImage {
    if width == img.width && height == img.height {
        return img.clone();
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    GrayImage::from_fn(width, height, |x, y| {
        let u = (x as f64 + 0.5) * sx - 0.5;
        let v = (y as f64 + 0.5) * sy - 0.5;
        let u = u.clamp(0.0, img.width as f64 - 1.0);
        let v = v.clamp(0.0, img.height as f64 - 1.0);
        to_u8(img.sample(u, v, fill as f64))
    })
}

/// Otsu threshold; `None` for a single-valued image.
fn otsu_threshold(img: &GrayImage) -> Option<u8> {
    let mut hist = [0f64; 256];
    for &v in &img.pixels {
        hist[v as usize] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * c).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = None;
    let mut best_var = 0.0;
    for (t, &h) in hist.iter().enumerate().take(255) {
        w0 += h;
        sum0 += t as f64 * h;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best_var {
            best_var = between;
            best = Some(t as u8);
        }
    }
    best
}

pub const DESKEW_RANGE_DEG: f64 = 15.0;
pub const DESKEW_STEP_DEG: f64 = 0.5;

/// Estimate text skew by maximizing the variance of the horizontal
/// projection profile of dark pixels, sweeping +-15 degrees in 0.5 degree
/// steps. Positive angles mean the text rises to the right.
pub fn detect_skew(img: &GrayImage) -> f64 {
    let Some(threshold) = otsu_threshold(img) else {
        return 0.0;
    };
    let cx = (img.width / 2) as f64;
    let cy = (img.height / 2) as f64;
    let ink: Vec<(f64, f64)> = (0..img.height)
        .flat_map(|y| (0..img.width).map(move |x| (x, y)))
        .filter(|&(x, y)| img.get(x, y) <= threshold)
        .map(|(x, y)| (x as f64 - cx, y as f64 - cy))
        .collect();
    if ink.is_empty() {
        return 0.0;
    }
    let half = (img.width.max(img.height) as f64) * 0.75 + 2.0;
    let bins = (2.0 * half) as usize + 1;
    let steps = (DESKEW_RANGE_DEG / DESKEW_STEP_DEG).round() as i32;
    let mut candidates: Vec<f64> = (-steps..=steps).map(|i| i as f64 * DESKEW_STEP_DEG).collect();
    candidates.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));

    let mut profile = vec![0.0; bins];
    let mut best = (0.0, f64::NEG_INFINITY);
    for angle in candidates {
        let (s, c) = angle.to_radians().sin_cos();
        profile.fill(0.0);
        for &(dx, dy) in &ink {
            // row of this pixel once the text is rotated back by `angle`
            profile[(dx * s + dy * c + half).round() as usize] += 1.0;
        }
        let mean = profile.iter().sum::<f64>() / bins as f64;
        let score: f64 = profile.iter().map(|p| (p - mean) * (p - mean)).sum();
        if score > best.1 * (1.0 + 1e-12) {
            best = (angle, score);
        }
    }
    best.0
}

/// Detect skew and rotate it away. The background is filled with the
/// image's bright level.
pub fn deskew(img: &GrayImage) -> (GrayImage, f64) {
    let angle = detect_skew(img);
    if angle == 0.0 {
        return (img.clone(), 0.0);
    }
    (rotate(img, -angle, background_level(img)), angle)
}

/// Bright background estimate used to fill uncovered pixels.
pub fn background_level(img: &GrayImage) -> u8 {
    img.percentile(0.9)
}

/// Ranges for random augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub rotation_deg: f64,
    pub translate_frac: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub blur_prob: f64,
    pub blur_sigma_max: f64,
    pub crop_frac: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotation_deg: 5.0,
            translate_frac: 0.10,
            scale_min: 0.9,
            scale_max: 1.1,
            blur_prob: 0.2,
            blur_sigma_max: 1.0,
            crop_frac: 0.05,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translate_frac: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            blur_prob: 0.0,
            blur_sigma_max: 0.0,
            crop_frac: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half: f64) -> f64 {
    let u: f64 = rng.random();
    (2.0 * u - 1.0) * half
}

/// Random crop, rotation, scale, translation and blur, resampled to
/// `width x height`. Draws the same number of random values for any policy.
pub fn augment<R: Rng + ?Sized>(
    img: &GrayImage,
    rng: &mut R,
    policy: &AugmentPolicy,
    width: usize,
    height: usize,
) -> GrayImage {
    let (w, h) = (img.width as f64, img.height as f64);
    let crop = [
        symmetric(rng, policy.crop_frac) * w,
        symmetric(rng, policy.crop_frac) * h,
        symmetric(rng, policy.crop_frac) * w,
        symmetric(rng, policy.crop_frac) * h,
    ];
    let angle = symmetric(rng, policy.rotation_deg);
    let u: f64 = rng.random();
    let scale = policy.scale_min + u * (policy.scale_max - policy.scale_min);
    let tx = symmetric(rng, policy.translate_frac) * w;
    let ty = symmetric(rng, policy.translate_frac) * h;
    let blur_roll: f64 = rng.random();
    let sigma_u: f64 = rng.random();

    if policy.is_identity() && width == img.width && height == img.height {
        return img.clone();
    }

    let fill = background_level(img) as f64;
    let (x0, y0) = (crop[0], crop[1]);
    let (cw, ch) = (w - crop[0] - crop[2], h - crop[1] - crop[3]);
    let (sx, sy) = (cw / width as f64, ch / height as f64);
    let (s, c) = angle.to_radians().sin_cos();
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let scale = scale.max(1e-6);
    let mut out = GrayImage::from_fn(width, height, |x, y| {
        // output pixel -> crop frame -> undo rotation/scale/translation
        let px = x0 + (x as f64 + 0.5) * sx - 0.5;
        let py = y0 + (y as f64 + 0.5) * sy - 0.5;
        let (dx, dy) = (px - cx - tx, py - cy - ty);
        let rx = (dx * c - dy * s) / scale;
        let ry = (dx * s + dy * c) / scale;
        to_u8(img.sample(cx + rx, cy + ry, fill))
    });
    if blur_roll < policy.blur_prob && policy.blur_sigma_max > 0.0 {
        let sigma = 0.3 + sigma_u * (policy.blur_sigma_max - 0.3).max(0.0);
        out = gaussian_filter(&out, sigma).expect("sigma is positive");
    }
    out
}

/// Preprocessing applied before the recognizer sees an image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Preprocess {
    pub median_radius: Option<usize>,
    pub gaussian_sigma: Option<f64>,
    pub deskew: bool,
    pub contrast: bool,
}

impl Preprocess {
    pub fn apply(&self, img: &GrayImage) -> Result<GrayImage, ImagingError> {
        let mut out = img.clone();
        if let Some(r) = self.median_radius {
            out = median_filter(&out, r)?;
        }
        if let Some(s) = self.gaussian_sigma {
            out = gaussian_filter(&out, s)?;
        }
        if self.deskew {
            out = deskew(&out).0;
        }
        if self.contrast {
            out = contrast_stretch(&out);
        }
        Ok(out)
    }
}

pub const GLYPH_HEIGHT: usize = 16;
pub const GLYPH_WIDTH: usize = 12;
/// Horizontal advance between glyphs; neighbours overlap by one column.
pub const GLYPH_ADVANCE: usize = GLYPH_WIDTH - 1;
const BASELINE_ROW: usize = 11;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a per-item stream derived from a global seed and a key.
pub fn derive_seed(seed: u64, key: u64) -> u64 {
    mix(mix(seed) ^ key.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Stable seed for a string key.
pub fn seed_for_str(seed: u64, key: &str) -> u64 {
    key.bytes()
        .fold(derive_seed(seed, key.len() as u64), |acc, b| derive_seed(acc, b as u64))
}

/// Procedural stand-in for a font: each glyph form gets a fixed random
/// 16x12 bitmap (1 = ink), with baseline connectors on its joining sides.
pub fn glyph_bitmap(form: GlyphForm, glyph_seed: u64) -> [[u8; GLYPH_WIDTH]; GLYPH_HEIGHT] {
    let key = ((form.base as u64) << 3) | form.position as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(glyph_seed, key));
    let mut bm = [[0u8; GLYPH_WIDTH]; GLYPH_HEIGHT];
    let ink = |x: i32, y: i32, bm: &mut [[u8; GLYPH_WIDTH]; GLYPH_HEIGHT]| {
        if (0..GLYPH_WIDTH as i32).contains(&x) && (0..GLYPH_HEIGHT as i32).contains(&y) {
            bm[y as usize][x as usize] = 1;
        }
    };

    // body strokes, horizontal or vertical
    let strokes = rng.random_range(3..=5);
    for _ in 0..strokes {
        let (x, y): (i32, i32) = (rng.random_range(1..10), rng.random_range(2..12));
        let len: i32 = rng.random_range(3..=8);
        if rng.random_bool(0.5) {
            for t in 0..len {
                ink(x + t, y, &mut bm);
            }
        } else {
            for t in 0..len {
                ink(x, y + t, &mut bm);
                ink(x + 1, y + t, &mut bm);
            }
        }
    }
    // dots above or below, as in many Arabic letters
    let dots = rng.random_range(0..=3);
    let above = rng.random_bool(0.5);
    for d in 0..dots {
        let x = 2 + 3 * d + rng.random_range(0..2);
        let y = if above { 0 } else { 14 };
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            ink(x + dx, y + dy, &mut bm);
        }
    }
    // baseline connectors: the next letter sits to the left
    let row = BASELINE_ROW;
    let (from, to) = match form.position {
        Position::Isolated => (2, 10),
        Position::Initial => (0, 10),
        Position::Medial => (0, GLYPH_WIDTH),
        Position::Final => (2, GLYPH_WIDTH),
    };
    bm[row][from..to].fill(1);
    bm[row + 1][from..to].fill(1);
    bm
}

/// One labelled word image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub label: String,
}

/// Deterministic word-image generator.
#[derive(Debug, Clone)]
pub struct SyntheticRenderer {
    pub glyph_seed: u64,
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f64,
}

impl SyntheticRenderer {
    pub fn new(glyph_seed: u64, width: usize, height: usize) -> Self {
        Self {
            glyph_seed,
            width,
            height,
            noise_sigma: 6.0,
        }
    }

    /// Ink coverage of the word at native glyph scale, laid out right to left.
    pub fn word_strip(&self, word: &str) -> Result<(usize, Vec<f64>), ImagingError> {
        let forms = shape_word(word)?;
        let strip_w = forms.len() * GLYPH_ADVANCE + 1;
        let mut ink = vec![0.0; strip_w * GLYPH_HEIGHT];
        for (i, form) in forms.iter().enumerate() {
            let bm = glyph_bitmap(*form, self.glyph_seed);
            let left = strip_w - GLYPH_WIDTH - i * GLYPH_ADVANCE;
            for (y, row) in bm.iter().enumerate() {
                for (x, &v) in row.iter().enumerate() {
                    if v == 1 {
                        ink[y * strip_w + left + x] = 1.0;
                    }
                }
            }
        }
        Ok((strip_w, ink))
    }

    /// Render `word` using `rng` for colours and noise.
    pub fn render<R: Rng + ?Sized>(&self, word: &str, id: &str, rng: &mut R) -> Result<Sample, ImagingError> {
        let (strip_w, ink) = self.word_strip(word)?;
        let bg = rng.random_range(200.0..250.0);
        let fg = rng.random_range(0.0..60.0);

        // fit the strip inside the frame, shrinking if needed
        let fit = ((self.width.saturating_sub(2)) as f64 / strip_w as f64)
            .min(self.height.saturating_sub(2) as f64 / GLYPH_HEIGHT as f64)
            .min(1.0);
        let (tw, th) = (strip_w as f64 * fit, GLYPH_HEIGHT as f64 * fit);
        let (ox, oy) = ((self.width as f64 - tw) / 2.0, (self.height as f64 - th) / 2.0);
        let sample_ink = |u: f64, v: f64| -> f64 {
            // area-free bilinear lookup in strip coordinates
            let x = (u - ox) / fit - 0.5;
            let y = (v - oy) / fit - 0.5;
            let (x0, y0) = (x.floor(), y.floor());
            let (fx, fy) = (x - x0, y - y0);
            let at = |xi: f64, yi: f64| {
                if xi < 0.0 || yi < 0.0 || xi >= strip_w as f64 || yi >= GLYPH_HEIGHT as f64 {
                    0.0
                } else {
                    ink[yi as usize * strip_w + xi as usize]
                }
            };
            (at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx) * (1.0 - fy)
                + (at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx) * fy
        };
        let noise = Normal::new(0.0, self.noise_sigma.max(1e-9)).expect("finite sigma");
        let image = GrayImage::from_fn(self.width, self.height, |x, y| {
            let a = sample_ink(x as f64 + 0.5, y as f64 + 0.5);
            let v = bg + a * (fg - bg) + noise.sample(rng);
            to_u8(v)
        });
        Ok(Sample {
            id: id.to_string(),
            image,
            label: word.to_string(),
        })
    }

    /// Render with the stream derived from `(seed, id)`.
    pub fn render_seeded(&self, word: &str, id: &str, seed: u64) -> Result<Sample, ImagingError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for_str(seed, id));
        self.render(word, id, &mut rng)
    }
}

/// Glyph bitmap seed shared by every synthetic dataset, so that sets drawn
/// with different seeds use the same "font".
pub const GLYPH_SEED: u64 = 0x5552_4455;

/// `n` samples with words drawn uniformly from `lexicon`, ids `000000..`.
pub fn synthesize(
    lexicon: &[&str],
    n: usize,
    seed: u64,
    width: usize,
    height: usize,
) -> Result<Vec<Sample>, ImagingError> {
    if n > 0 && lexicon.is_empty() {
        return Err(ImagingError::InvalidParameter("empty lexicon".into()));
    }
    let renderer = SyntheticRenderer::new(GLYPH_SEED, width, height);
    let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x574F_5244));
    (0..n)
        .map(|i| {
            let word = lexicon[pick.random_range(0..lexicon.len())];
            renderer.render_seeded(word, &format!("{i:06}"), seed)
        })
        .collect()
}

/// Encode as binary PGM (P5, maxval 255).
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage, ImagingError> {
    let bad = |reason: &str| ImagingError::UnsupportedImageFormat {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("expected binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != w * h {
        return Err(bad("raster size does not match header"));
    }
    Ok(GrayImage::from_raw(w, h, raster.to_vec()).expect("length checked"))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, ImagingError> {
    let bytes = fs::read(path).map_err(|e| ImagingError::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<(), ImagingError> {
    fs::write(path, encode_pgm(img)).map_err(|e| ImagingError::io(path, e))
}

/// Read `<relative image path>\t<label>` lines. Blank lines are skipped.
/// Sample ids are the image paths as written in the manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>, ImagingError> {
    let text = fs::read_to_string(path).map_err(|e| ImagingError::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (n, line) in text.split('\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: &str| ImagingError::MalformedManifest {
            path: path.to_path_buf(),
            line: n + 1,
            reason: reason.to_string(),
        };
        let (rel, label) = line
            .split_once('\t')
            .ok_or_else(|| malformed("missing tab separator"))?;
        if rel.is_empty() || label.is_empty() || label.contains('\t') {
            return Err(malformed("expected non-empty path and label"));
        }
        entries.push((rel, label));
    }
    let mut samples = Vec::with_capacity(entries.len());
    for (rel, label) in entries {
        samples.push(Sample {
            id: rel.to_string(),
            image: read_pgm(&dir.join(rel))?,
            label: label.to_string(),
        });
    }
    Ok(samples)
}

/// Write images under `dir/images/` and a `manifest.tsv` listing them.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf, ImagingError> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| ImagingError::io(&img_dir, e))?;
    let manifest = dir.join("manifest.tsv");
    let mut out = Vec::new();
    for s in samples {
        let rel = format!("images/{}.pgm", s.id);
        write_pgm(&dir.join(&rel), &s.image)?;
        writeln!(out, "{rel}\t{}", s.label).expect("writing to a Vec cannot fail");
    }
    fs::write(&manifest, out).map_err(|e| ImagingError::io(&manifest, e))?;
    Ok(manifest)
}
