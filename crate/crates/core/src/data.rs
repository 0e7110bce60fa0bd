//! Dataset loading, train/eval preprocessing, evaluation-time perturbations
//! and the synthetic toy corpus.
//!
//! Pixels are `3 × h × w` tensors in `[0, 1]`. Nothing here ever resamples an
//! image: the only geometric operations are crops and flips, because
//! resampling erases exactly the low-level traces a detector relies on. Every
//! random choice is first drawn into an explicit plan ([`AugmentPlan`],
//! [`PerturbPlan`]) and then applied, so tests can pin the plan directly.

use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat, RgbImage};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const REAL_DIR: &str = "0_real";
pub const FAKE_DIR: &str = "1_fake";
pub const TOY_MANIFEST: &str = "toy.json";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// `3 × h × w`, values in `[0, 1]`.
    pub pixels: Tensor,
    /// 0 real, 1 fake.
    pub label: u8,
    /// Stable identifier: the path relative to the dataset root.
    pub id: String,
}

impl ImageSample {
    pub fn new(pixels: Tensor, label: u8, id: impl Into<String>) -> Result<Self> {
        if pixels.rank() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::Shape(format!("image must be 3×h×w, got {:?}", pixels.shape())));
        }
        if label > 1 {
            return Err(Error::Param(format!("label {label} is not binary")));
        }
        Ok(Self {
            pixels,
            label,
            id: id.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    fn with_pixels(&self, pixels: Tensor) -> Self {
        Self {
            pixels,
            label: self.label,
            id: self.id.clone(),
        }
    }
}

/// Stacks equally sized samples into `b × 3 × h × w`.
pub fn stack(samples: &[ImageSample]) -> Result<Tensor> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Param("cannot stack an empty batch".into()))?;
    let shape = first.pixels.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.pixels.len());
    for s in samples {
        if s.pixels.shape() != shape.as_slice() {
            return Err(Error::Shape(format!(
                "sample `{}` is {:?}, batch is {shape:?}",
                s.id,
                s.pixels.shape()
            )));
        }
        data.extend_from_slice(s.pixels.data());
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Tensor::new(full, data)
}

fn from_rgb8(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f32::from(raw[p * 3 + c]) / 255.0
    })
}

fn to_rgb8(pixels: &Tensor) -> Result<RgbImage> {
    let [3, h, w] = pixels.shape() else {
        return Err(Error::Shape(format!("image must be 3×h×w, got {:?}", pixels.shape())));
    };
    let (h, w) = (*h, *w);
    let d = pixels.data();
    let raw = (0..h * w * 3)
        .map(|i| {
            let (p, c) = (i / 3, i % 3);
            (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image"))
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    Ok(from_rgb8(&image::load_from_memory(bytes)?.to_rgb8()))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_image(&fs::read(path)?)
}

/// Writes pixels as 8-bit PNG.
pub fn write_png(pixels: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    to_rgb8(pixels)?.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)?;
    fs::write(path, buf)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub label: u8,
    pub id: String,
}

/// File listing of a `root/{0_real,1_fake}/*` dataset. Images are decoded
/// lazily by [`stream`](Self::stream) or [`batches`](Self::batches).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Lists a dataset directory in deterministic path order (all real images,
/// then all fake images).
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref().to_path_buf();
    let mut entries = Vec::new();
    for (label, dir) in [(0u8, REAL_DIR), (1u8, FAKE_DIR)] {
        let class_dir = root.join(dir);
        if !class_dir.is_dir() {
            return Err(Error::dataset(&class_dir, "missing class directory"));
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&class_dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        if files.is_empty() {
            return Err(Error::dataset(&class_dir, "class directory holds no images"));
        }
        files.sort();
        for path in files {
            let name = path.file_name().expect("listed file").to_string_lossy();
            entries.push(DatasetEntry {
                id: format!("{dir}/{name}"),
                path,
                label,
            });
        }
    }
    Ok(Dataset { root, entries })
}

fn decode_entry(entry: &DatasetEntry) -> Option<ImageSample> {
    match read_image(&entry.path) {
        Ok(pixels) => Some(ImageSample {
            pixels,
            label: entry.label,
            id: entry.id.clone(),
        }),
        Err(e) => {
            log::warn!("skipping undecodable image {}: {e}", entry.path.display());
            None
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Decodes one image at a time.
    pub fn stream(&self) -> SampleStream<'_> {
        SampleStream {
            entries: self.entries.iter(),
            skipped: 0,
        }
    }

    /// Decodes `batch_size` images at a time in parallel, preserving order.
    pub fn batches(&self, batch_size: usize) -> BatchStream<'_> {
        BatchStream {
            chunks: self.entries.chunks(batch_size.max(1)),
            skipped: 0,
        }
    }
}

/// Iterator over decoded samples; undecodable files are skipped and counted.
pub struct SampleStream<'a> {
    entries: std::slice::Iter<'a, DatasetEntry>,
    skipped: usize,
}

impl SampleStream<'_> {
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl Iterator for SampleStream<'_> {
    type Item = ImageSample;

    fn next(&mut self) -> Option<ImageSample> {
        for entry in self.entries.by_ref() {
            match decode_entry(entry) {
                Some(s) => return Some(s),
                None => self.skipped += 1,
            }
        }
        None
    }
}

pub struct BatchStream<'a> {
    chunks: std::slice::Chunks<'a, DatasetEntry>,
    skipped: usize,
}

impl BatchStream<'_> {
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Vec<ImageSample>;

    fn next(&mut self) -> Option<Vec<ImageSample>> {
        loop {
            let chunk = self.chunks.next()?;
            let decoded: Vec<Option<ImageSample>> = chunk.par_iter().map(decode_entry).collect();
            let before = decoded.len();
            let batch: Vec<ImageSample> = decoded.into_iter().flatten().collect();
            self.skipped += before - batch.len();
            if !batch.is_empty() {
                return Some(batch);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pixel operations

/// Crops `size_h × size_w` starting at `(top, left)`.
pub fn crop(pixels: &Tensor, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<Tensor> {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    if top + size_h > h || left + size_w > w {
        return Err(Error::Shape(format!(
            "crop {size_h}×{size_w} at ({top},{left}) exceeds image {h}×{w}"
        )));
    }
    let d = pixels.data();
    Ok(Tensor::from_fn(&[3, size_h, size_w], |i| {
        let (c, r, col) = (i / (size_h * size_w), (i / size_w) % size_h, i % size_w);
        d[(c * h + top + r) * w + left + col]
    }))
}

fn check_side(pixels: &Tensor, side: usize) -> Result<(usize, usize)> {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    if h < side || w < side {
        return Err(Error::Shape(format!(
            "image {h}×{w} is smaller than the {side}×{side} encoder input; resizing is not offered"
        )));
    }
    Ok((h, w))
}

/// Deterministic `side × side` center crop; offset `((h−side)/2, (w−side)/2)`.
pub fn center_crop(pixels: &Tensor, side: usize) -> Result<Tensor> {
    let (h, w) = check_side(pixels, side)?;
    crop(pixels, (h - side) / 2, (w - side) / 2, side, side)
}

pub fn hflip(pixels: &Tensor) -> Tensor {
    let w = pixels.shape()[2];
    let d = pixels.data();
    Tensor::from_fn(pixels.shape(), |i| {
        let (row, col) = (i / w, i % w);
        d[row * w + (w - 1 - col)]
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter().map(|v| (v / total) as f32).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with mirrored borders; `σ = 0` is the identity.
pub fn gaussian_blur(pixels: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return pixels.clone();
    }
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = pixels.data();
    let mut tmp = vec![0.0f32; src.len()];
    for c in 0..3 {
        for y in 0..h {
            let row = &src[(c * h + y) * w..(c * h + y + 1) * w];
            for x in 0..w {
                tmp[(c * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * row[reflect(x as isize + j as isize - r, w)])
                    .sum();
            }
        }
    }
    Tensor::from_fn(pixels.shape(), |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        k.iter()
            .enumerate()
            .map(|(j, kv)| kv * tmp[(c * h + reflect(y as isize + j as isize - r, h)) * w + x])
            .sum()
    })
}

/// Baseline JPEG encode at `quality` (1–100) and decode.
pub fn jpeg_roundtrip(pixels: &Tensor, quality: u8) -> Result<Tensor> {
    let img = to_rgb8(pixels)?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality.clamp(1, 100)).encode(
        img.as_raw(),
        img.width(),
        img.height(),
        ExtendedColorType::Rgb8,
    )?;
    Ok(from_rgb8(
        &image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)?.to_rgb8(),
    ))
}

/// Adds `N(0, σ²)` per pixel from a stream seeded by `seed`, clamped to `[0, 1]`.
pub fn add_noise(pixels: &Tensor, sigma: f64, seed: u64) -> Tensor {
    if sigma <= 0.0 {
        return pixels.clone();
    }
    let mut rng = Rng::new(seed);
    let sigma = sigma as f32;
    Tensor::from_fn(pixels.shape(), |i| {
        let n: f32 = StandardNormal.sample(&mut rng);
        (pixels.data()[i] + sigma * n).clamp(0.0, 1.0)
    })
}

// ---------------------------------------------------------------------------
// Training augmentation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub jpeg_prob: f64,
    pub jpeg_quality: (u8, u8),
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            blur_prob: 0.5,
            blur_sigma: (0.0, 3.0),
            jpeg_prob: 0.5,
            jpeg_quality: (30, 100),
            flip_prob: 0.5,
        }
    }
}

/// Every random choice of one training augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPlan {
    pub blur_sigma: Option<f64>,
    pub jpeg_quality: Option<u8>,
    pub crop_offset: (usize, usize),
    pub flip: bool,
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn uniform_quality(rng: &mut Rng, (lo, hi): (u8, u8)) -> u8 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl AugmentPlan {
    /// Draws a plan for an `h × w` image cropped to `side`.
    pub fn sample(config: &AugmentConfig, h: usize, w: usize, side: usize, rng: &mut Rng) -> Self {
        let blur_sigma = (rng.random::<f64>() < config.blur_prob).then(|| uniform(rng, config.blur_sigma));
        let jpeg_quality =
            (rng.random::<f64>() < config.jpeg_prob).then(|| uniform_quality(rng, config.jpeg_quality));
        let top = rng.random_range(0..=h.saturating_sub(side));
        let left = rng.random_range(0..=w.saturating_sub(side));
        let flip = rng.random::<f64>() < config.flip_prob;
        Self {
            blur_sigma,
            jpeg_quality,
            crop_offset: (top, left),
            flip,
        }
    }

    /// Blur, JPEG, crop, flip — in that order.
    pub fn apply(&self, sample: &ImageSample, side: usize) -> Result<ImageSample> {
        check_side(&sample.pixels, side)?;
        let mut px = match self.blur_sigma {
            Some(s) => gaussian_blur(&sample.pixels, s),
            None => sample.pixels.clone(),
        };
        if let Some(q) = self.jpeg_quality {
            px = jpeg_roundtrip(&px, q)?;
        }
        px = crop(&px, self.crop_offset.0, self.crop_offset.1, side, side)?;
        if self.flip {
            px = hflip(&px);
        }
        Ok(sample.with_pixels(px))
    }
}

/// Random training augmentation to a `side × side` crop.
pub fn augment_train(sample: &ImageSample, config: &AugmentConfig, side: usize, rng: &mut Rng) -> Result<ImageSample> {
    check_side(&sample.pixels, side)?;
    AugmentPlan::sample(config, sample.height(), sample.width(), side, rng).apply(sample, side)
}

/// Evaluation preprocessing: center crop to `side × side`, nothing else.
pub fn preprocess_eval(sample: &ImageSample, side: usize) -> Result<ImageSample> {
    Ok(sample.with_pixels(center_crop(&sample.pixels, side)?))
}

// ---------------------------------------------------------------------------
// Robustness perturbations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    Blur,
    Crop,
    Compress,
    Noise,
    Combined,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 5] = [
        PerturbKind::Blur,
        PerturbKind::Crop,
        PerturbKind::Compress,
        PerturbKind::Noise,
        PerturbKind::Combined,
    ];
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbKind::Blur => "blur",
            PerturbKind::Crop => "crop",
            PerturbKind::Compress => "compress",
            PerturbKind::Noise => "noise",
            PerturbKind::Combined => "combined",
        })
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Param(format!("unknown perturbation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    /// Probability of perturbing a sample (per operation for `combined`).
    pub prob: f64,
    pub blur_sigma: (f64, f64),
    /// Crop window as a fraction of the shorter side.
    pub crop_fraction: f64,
    pub jpeg_quality: (u8, u8),
    pub noise_sigma: (f64, f64),
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            prob: 0.5,
            blur_sigma: (0.0, 3.0),
            crop_fraction: 0.875,
            jpeg_quality: (30, 100),
            noise_sigma: (0.0, 0.05),
        }
    }
}

/// Concrete perturbation steps, applied blur → crop → compress → noise.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PerturbPlan {
    pub blur_sigma: Option<f64>,
    /// `(top, left, window)`.
    pub crop: Option<(usize, usize, usize)>,
    pub jpeg_quality: Option<u8>,
    /// `(σ, noise seed)`.
    pub noise: Option<(f64, u64)>,
}

impl PerturbPlan {
    /// Draws a plan for an `h × w` image fed to an encoder of input `side`.
    ///
    /// The crop window is `round(crop_fraction · min(h, w))` but never below
    /// `side`, since the result must still be center-cropped to the encoder
    /// input without resizing.
    pub fn sample(kind: PerturbKind, config: &PerturbConfig, h: usize, w: usize, side: usize, rng: &mut Rng) -> Self {
        let mut plan = PerturbPlan::default();
        let pick = |k: PerturbKind, rng: &mut Rng, plan: &mut PerturbPlan| match k {
            PerturbKind::Blur => plan.blur_sigma = Some(uniform(rng, config.blur_sigma)),
            PerturbKind::Crop => {
                let short = h.min(w);
                let window = ((config.crop_fraction * short as f64).round() as usize).clamp(side.min(short), short);
                let top = rng.random_range(0..=h - window);
                let left = rng.random_range(0..=w - window);
                plan.crop = Some((top, left, window));
            }
            PerturbKind::Compress => plan.jpeg_quality = Some(uniform_quality(rng, config.jpeg_quality)),
            PerturbKind::Noise => plan.noise = Some((uniform(rng, config.noise_sigma), rng.random())),
            PerturbKind::Combined => unreachable!("combined is expanded by the caller"),
        };
        match kind {
            PerturbKind::Combined => {
                for k in [PerturbKind::Blur, PerturbKind::Crop, PerturbKind::Compress, PerturbKind::Noise] {
                    if rng.random::<f64>() < config.prob {
                        pick(k, rng, &mut plan);
                    }
                }
            }
            single => {
                if rng.random::<f64>() < config.prob {
                    pick(single, rng, &mut plan);
                }
            }
        }
        plan
    }

    pub fn is_identity(&self) -> bool {
        *self == PerturbPlan::default()
    }

    pub fn apply(&self, sample: &ImageSample) -> Result<ImageSample> {
        let mut px = match self.blur_sigma {
            Some(s) => gaussian_blur(&sample.pixels, s),
            None => sample.pixels.clone(),
        };
        if let Some((top, left, window)) = self.crop {
            px = crop(&px, top, left, window, window)?;
        }
        if let Some(q) = self.jpeg_quality {
            px = jpeg_roundtrip(&px, q)?;
        }
        if let Some((sigma, seed)) = self.noise {
            px = add_noise(&px, sigma, seed);
        }
        Ok(sample.with_pixels(px))
    }
}

/// Evaluation-time perturbation. The result still needs
/// [`preprocess_eval`] before encoding.
pub fn perturb(
    sample: &ImageSample,
    kind: PerturbKind,
    config: &PerturbConfig,
    side: usize,
    rng: &mut Rng,
) -> Result<ImageSample> {
    check_side(&sample.pixels, side)?;
    PerturbPlan::sample(kind, config, sample.height(), sample.width(), side, rng).apply(sample)
}

// ---------------------------------------------------------------------------
// Synthetic toy corpus

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyManifest {
    pub seed: u64,
    pub amplitude: f64,
    pub n_per_class: usize,
    pub side: usize,
    /// Spatial correlation of the color fields, in pixels.
    pub smoothing_sigma: f64,
}

const TOY_SMOOTHING: f64 = 2.0;
const TOY_FIELD_STD: f64 = 0.08;

/// A smooth random color field: blurred white noise rescaled to a per-channel
/// mean in `[0.35, 0.65]` and standard deviation ≈ 0.08.
fn toy_field(side: usize, rng: &mut Rng) -> Tensor {
    let noise = Tensor::from_fn(&[3, side, side], |_| StandardNormal.sample(&mut *rng));
    let smooth = gaussian_blur(&noise, TOY_SMOOTHING);
    let plane = side * side;
    let mut out = smooth.clone();
    for c in 0..3 {
        let mean_target = rng.random_range(0.35..0.65) as f32;
        let ch = &smooth.data()[c * plane..(c + 1) * plane];
        let mean = ch.iter().sum::<f32>() / plane as f32;
        let std = (ch.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / plane as f32).sqrt();
        for (o, &v) in out.data_mut()[c * plane..(c + 1) * plane].iter_mut().zip(ch) {
            *o = (mean_target + (v - mean) / std * TOY_FIELD_STD as f32).clamp(0.0, 1.0);
        }
    }
    out
}

/// One toy image. Fake images carry an additive `±amplitude/2` checkerboard,
/// a periodic high-frequency residual standing in for generator traces.
pub fn toy_image(side: usize, fake: bool, amplitude: f64, rng: &mut Rng) -> Tensor {
    let field = toy_field(side, rng);
    if !fake || amplitude == 0.0 {
        return field;
    }
    let half = (amplitude / 2.0) as f32;
    let mut out = field;
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let (y, x) = ((i / side) % side, i % side);
        let sign = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
        *v = (*v + sign * half).clamp(0.0, 1.0);
    }
    out
}

/// Writes `n_per_class` real and fake PNGs under `root/{0_real,1_fake}` plus a
/// `toy.json` manifest. The same seed yields a byte-identical corpus.
pub fn synth_toy_dataset(
    root: impl AsRef<Path>,
    n_per_class: usize,
    side: usize,
    amplitude: f64,
    seed: u64,
) -> Result<ToyManifest> {
    if n_per_class == 0 || side == 0 {
        return Err(Error::Param("toy dataset needs n_per_class ≥ 1 and side ≥ 1".into()));
    }
    let root = root.as_ref();
    let parent = Rng::new(seed);
    for (label, dir) in [(0u8, REAL_DIR), (1u8, FAKE_DIR)] {
        let class_dir = root.join(dir);
        fs::create_dir_all(&class_dir)?;
        (0..n_per_class).into_par_iter().try_for_each(|i| {
            let mut rng = parent.derive(&format!("toy/{dir}/{i}"));
            let px = toy_image(side, label == 1, amplitude, &mut rng);
            write_png(&px, class_dir.join(format!("{i:06}.png")))
        })?;
    }
    let manifest = ToyManifest {
        seed,
        amplitude,
        n_per_class,
        side,
        smoothing_sigma: TOY_SMOOTHING,
    };
    fs::write(root.join(TOY_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::from_fn(&[3, h, w], |_| r.random::<f32>())
    }

    fn sample(h: usize, w: usize, seed: u64) -> ImageSample {
        ImageSample::new(random_image(h, w, seed), 1, "x").unwrap()
    }

    fn write_dataset(root: &Path, real: usize, fake: usize) {
        for (dir, count) in [(REAL_DIR, real), (FAKE_DIR, fake)] {
            fs::create_dir_all(root.join(dir)).unwrap();
            for i in 0..count {
                write_png(&random_image(8, 8, i as u64), root.join(dir).join(format!("{i}.png"))).unwrap();
            }
        }
    }

    #[test]
    fn dataset_order_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 3, 2);
        let ds = load_dataset(dir.path()).unwrap();
        let samples: Vec<_> = ds.stream().collect();
        assert_eq!(samples.iter().map(|s| s.label).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1]);
        assert_eq!(samples[0].id, "0_real/0.png");
        let again: Vec<String> = load_dataset(dir.path()).unwrap().stream().map(|s| s.id).collect();
        assert_eq!(samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>(), again);
    }

    #[test]
    fn corrupt_file_is_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 5, 5);
        fs::write(dir.path().join(FAKE_DIR).join("2.png"), b"not a png").unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        let mut stream = ds.stream();
        let n = stream.by_ref().count();
        assert_eq!((n, stream.skipped()), (9, 1));
        let mut batches = ds.batches(4);
        let total: usize = batches.by_ref().map(|b| b.len()).sum();
        assert_eq!((total, batches.skipped()), (9, 1));
    }

    #[test]
    fn empty_or_missing_class_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), 2, 0);
        assert!(load_dataset(dir.path()).unwrap_err().to_string().contains("1_fake"));
        let other = tempfile::tempdir().unwrap();
        assert!(load_dataset(other.path()).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let px = random_image(5, 7, 1).map(|v| (v * 255.0).round() / 255.0);
        let path = dir.path().join("a.png");
        write_png(&px, &path).unwrap();
        assert_eq!(read_image(&path).unwrap(), px);
    }

    #[test]
    fn center_crop_offsets() {
        let s = sample(34, 34, 2);
        assert_eq!(preprocess_eval(&s, 34).unwrap(), s);
        let s = sample(36, 36, 3);
        let out = preprocess_eval(&s, 34).unwrap();
        assert_eq!(out.pixels, crop(&s.pixels, 1, 1, 34, 34).unwrap());
        assert_eq!(preprocess_eval(&out, 34).unwrap(), out);
        assert!(preprocess_eval(&sample(20, 40, 4), 32).is_err());
    }

    #[test]
    fn skipped_augmentations_equal_center_crop() {
        let s = sample(40, 40, 5);
        let plan = AugmentPlan {
            blur_sigma: None,
            jpeg_quality: None,
            crop_offset: (4, 4),
            flip: false,
        };
        assert_eq!(plan.apply(&s, 32).unwrap(), preprocess_eval(&s, 32).unwrap());
    }

    #[test]
    fn flip_is_an_involution() {
        let s = sample(12, 9, 6);
        assert_eq!(hflip(&hflip(&s.pixels)), s.pixels);
        assert_ne!(hflip(&s.pixels), s.pixels);
        let plan = AugmentPlan {
            blur_sigma: None,
            jpeg_quality: None,
            crop_offset: (1, 0),
            flip: true,
        };
        let once = plan.apply(&s, 8).unwrap();
        assert_eq!(hflip(&once.pixels), crop(&s.pixels, 1, 0, 8, 8).unwrap());
    }

    #[test]
    fn blur_properties() {
        let px = random_image(16, 16, 7);
        assert_eq!(gaussian_blur(&px, 0.0), px);
        let flat = Tensor::full(&[3, 10, 10], 0.3f32);
        assert!(gaussian_blur(&flat, 2.0).max_abs_diff(&flat).unwrap() < 1e-6);
        let blurred = gaussian_blur(&px, 1.5);
        let var = |t: &Tensor| {
            let m = t.data().iter().sum::<f32>() / t.len() as f32;
            t.data().iter().map(|v| (v - m).powi(2)).sum::<f32>() / t.len() as f32
        };
        assert!(var(&blurred) < var(&px) * 0.5);
    }

    #[test]
    fn jpeg_at_quality_100_is_close() {
        let px = toy_image(32, false, 0.0, &mut Rng::new(8));
        let out = jpeg_roundtrip(&px, 100).unwrap();
        let mad = px.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / px.len() as f32;
        assert!(mad < 0.02, "{mad}");
        let low = jpeg_roundtrip(&px, 30).unwrap();
        assert_eq!(low.shape(), px.shape());
    }

    #[test]
    fn noise_with_zero_sigma_is_identity() {
        let px = random_image(6, 6, 9);
        assert_eq!(add_noise(&px, 0.0, 1), px);
        let noisy = add_noise(&px, 0.05, 1);
        assert_eq!(noisy, add_noise(&px, 0.05, 1));
        assert!(noisy.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn perturb_passthrough_when_not_triggered() {
        let cfg = PerturbConfig {
            prob: 0.0,
            ..PerturbConfig::default()
        };
        let s = sample(32, 32, 10);
        for kind in PerturbKind::ALL {
            assert_eq!(perturb(&s, kind, &cfg, 32, &mut Rng::new(1)).unwrap(), s);
        }
    }

    #[test]
    fn combined_equals_manual_composition() {
        let cfg = PerturbConfig {
            prob: 1.0,
            ..PerturbConfig::default()
        };
        let s = sample(40, 40, 11);
        let plan = PerturbPlan::sample(PerturbKind::Combined, &cfg, 40, 40, 32, &mut Rng::new(3));
        let (sigma, (top, left, window), q, (ns, seed)) = (
            plan.blur_sigma.unwrap(),
            plan.crop.unwrap(),
            plan.jpeg_quality.unwrap(),
            plan.noise.unwrap(),
        );
        assert_eq!(window, 35);
        let mut px = gaussian_blur(&s.pixels, sigma);
        px = crop(&px, top, left, window, window).unwrap();
        px = jpeg_roundtrip(&px, q).unwrap();
        px = add_noise(&px, ns, seed);
        assert_eq!(plan.apply(&s).unwrap().pixels, px);
    }

    #[test]
    fn crop_window_never_drops_below_encoder_side() {
        let cfg = PerturbConfig {
            prob: 1.0,
            ..PerturbConfig::default()
        };
        let plan = PerturbPlan::sample(PerturbKind::Crop, &cfg, 32, 32, 32, &mut Rng::new(4));
        assert_eq!(plan.crop, Some((0, 0, 32)));
        let plan = PerturbPlan::sample(PerturbKind::Crop, &cfg, 256, 300, 224, &mut Rng::new(4));
        assert_eq!(plan.crop.unwrap().2, 224);
    }

    #[test]
    fn perturb_kind_parses() {
        for k in PerturbKind::ALL {
            assert_eq!(k.to_string().parse::<PerturbKind>().unwrap(), k);
        }
        assert!("rotate".parse::<PerturbKind>().is_err());
    }

    #[test]
    fn toy_corpus_is_byte_identical_for_a_seed() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synth_toy_dataset(a.path(), 3, 16, 0.5, 7).unwrap();
        synth_toy_dataset(b.path(), 3, 16, 0.5, 7).unwrap();
        for dir in [REAL_DIR, FAKE_DIR] {
            for i in 0..3 {
                let name = format!("{i:06}.png");
                assert_eq!(
                    fs::read(a.path().join(dir).join(&name)).unwrap(),
                    fs::read(b.path().join(dir).join(&name)).unwrap()
                );
            }
        }
        let m: ToyManifest = serde_json::from_slice(&fs::read(a.path().join(TOY_MANIFEST)).unwrap()).unwrap();
        assert_eq!((m.seed, m.n_per_class, m.side), (7, 3, 16));
    }

    /// Energy at the Nyquist frequency, the band the fake residual lives in.
    fn nyquist_energy(px: &Tensor) -> f64 {
        let side = px.shape()[1];
        let plane = side * side;
        (0..3)
            .map(|c| {
                let s: f64 = (0..plane)
                    .map(|p| {
                        let sign = if (p / side + p % side) % 2 == 0 { 1.0 } else { -1.0 };
                        sign * f64::from(px.data()[c * plane + p])
                    })
                    .sum::<f64>()
                    / plane as f64;
                s * s
            })
            .sum()
    }

    fn oracle_ap(amplitude: f64, n: usize) -> f64 {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let parent = Rng::new(12);
        for i in 0..n {
            for fake in [false, true] {
                let mut r = parent.derive(&format!("{fake}/{i}"));
                scores.push(nyquist_energy(&toy_image(32, fake, amplitude, &mut r)));
                labels.push(u8::from(fake));
            }
        }
        crate::metrics::average_precision(&scores, &labels).unwrap()
    }

    #[test]
    fn frequency_oracle_separates_toy_classes() {
        assert!(oracle_ap(0.5, 100) > 0.99);
        let chance = oracle_ap(0.0, 500);
        assert!((chance - 0.5).abs() <= 0.05, "{chance}");
    }
}
