//! Dataset discovery, splitting, mask binarization, and train/eval preprocessing.
//!
//! Layout on disk: `root/images/<id>.{png,jpg,jpeg}` paired with
//! `root/masks/<id>.png` by file stem.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use ndarray::{Array3, Array4, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SegError};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const MASK_THRESHOLD: u8 = 127;
pub const DEFAULT_SIDE: usize = 256;

pub const FLIP_PROB: f64 = 0.5;
pub const COLOR_JITTER_PROB: f64 = 0.3;
pub const BLUR_PROB: f64 = 0.2;
const CONTRAST_RANGE: (f32, f32) = (0.8, 1.2);
const BRIGHTNESS_RANGE: (f32, f32) = (-0.2, 0.2);
const BLUR_KERNELS: [usize; 3] = [3, 5, 7];
const BLUR_SIGMA_RANGE: (f32, f32) = (0.1, 2.0);

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// `(1, H, W)` mask with values in {0, 1}.
pub type BinaryMask = Array3<u8>;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SamplePair {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Result of scanning a dataset root: matched pairs plus files with no partner.
#[derive(Clone, Debug, Default)]
pub struct DatasetScan {
    pub pairs: Vec<SamplePair>,
    pub unmatched: Vec<PathBuf>,
}

fn stems_in(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.as_deref().is_some_and(|e| extensions.contains(&e)) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Pairs `images/` with `masks/` by stem and reports unmatched files.
pub fn scan_dataset(root: &Path) -> Result<DatasetScan> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    for dir in [&images_dir, &masks_dir] {
        if !dir.is_dir() {
            return Err(SegError::Dataset(format!("missing directory {}", dir.display())));
        }
    }
    let images = stems_in(&images_dir, &IMAGE_EXTENSIONS)?;
    let mut masks = stems_in(&masks_dir, &["png"])?;
    let mut scan = DatasetScan::default();
    for (id, image_path) in images {
        match masks.remove(&id) {
            Some(mask_path) => scan.pairs.push(SamplePair { id, image_path, mask_path }),
            None => scan.unmatched.push(image_path),
        }
    }
    scan.unmatched.extend(masks.into_values());
    scan.unmatched.sort();
    Ok(scan)
}

/// Matched pairs sorted by id; unmatched files are logged and skipped.
pub fn discover_dataset(root: &Path) -> Result<Vec<SamplePair>> {
    let scan = scan_dataset(root)?;
    for path in &scan.unmatched {
        log::warn!("no partner for {}, skipping", path.display());
    }
    Ok(scan.pairs)
}

/// Fractions of the data assigned to train / validation / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.70, val: 0.15, test: 0.15 }
    }
}

impl SplitRatios {
    /// `(train, val, test)` sizes: floor for train, the remainder divided in
    /// proportion with the rounding going to validation.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let total = self.train + self.val + self.test;
        if (total - 1.0).abs() > 1e-9 || self.train <= 0.0 || self.val <= 0.0 || self.test <= 0.0 {
            return Err(SegError::Config(format!("split ratios must be positive and sum to 1, got {self:?}")));
        }
        if n < 3 {
            return Err(SegError::Dataset(format!("need at least 3 samples to populate all splits, got {n}")));
        }
        let mut train = ((self.train * n as f64) + 1e-9).floor() as usize;
        let rest = n - train;
        let mut val = ((rest as f64 * self.val / (self.val + self.test)) - 1e-9).ceil() as usize;
        let mut test = rest - val;
        // keep every split populated for tiny datasets
        if test == 0 {
            if val > 1 {
                val -= 1;
            } else {
                train -= 1;
            }
            test += 1;
        }
        if val == 0 {
            train -= 1;
            val += 1;
        }
        Ok((train, val, test))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
    pub seed: u64,
}

impl DatasetSplit {
    /// SHA-256 over the ordered ids of each subset.
    pub fn membership_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            h.update(name.as_bytes());
            h.update(b":");
            for p in part.iter() {
                h.update(p.id.as_bytes());
                h.update(b",");
            }
            h.update(b";");
        }
        hex::encode(h.finalize())
    }
}

/// Seeded shuffle, then slice by [`SplitRatios::sizes`].
pub fn split_dataset(pairs: &[SamplePair], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    let (n_train, n_val, _) = ratios.sizes(pairs.len())?;
    let mut shuffled = pairs.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(DatasetSplit { train: shuffled, val, test, seed })
}

/// 1 where `raw > threshold`, else 0, as a `(1, H, W)` mask.
pub fn binarize_mask(raw: ArrayView2<'_, u8>, threshold: u8) -> BinaryMask {
    raw.mapv(|v| u8::from(v > threshold)).insert_axis(ndarray::Axis(0))
}

pub fn gray_to_array(img: &GrayImage) -> ndarray::Array2<u8> {
    let (w, h) = img.dimensions();
    ndarray::Array2::from_shape_vec((h as usize, w as usize), img.as_raw().clone()).expect("buffer matches dimensions")
}

/// Encodes a binary mask as a {0,255} grayscale image.
pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    let (_, h, w) = mask.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([mask[[0, y as usize, x as usize]] * 255]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrepMode {
    Train,
    Eval,
}

/// A decoded image/mask pair kept in memory across epochs.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub image: RgbImage,
    pub mask: GrayImage,
}

impl LoadedSample {
    pub fn load(pair: &SamplePair) -> Result<Self> {
        let decode = |path: &Path| {
            image::open(path).map_err(|source| SegError::Decode { path: path.to_path_buf(), source })
        };
        let image = decode(&pair.image_path)?.to_rgb8();
        let mask = decode(&pair.mask_path)?.to_luma8();
        if image.dimensions() != mask.dimensions() {
            return Err(SegError::Dataset(format!(
                "{}: image is {:?} but mask is {:?}",
                pair.id,
                image.dimensions(),
                mask.dimensions()
            )));
        }
        Ok(Self { id: pair.id.clone(), image, mask })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedExample {
    pub id: String,
    /// `(3, S, S)`, ImageNet-normalized.
    pub image: Array3<f32>,
    pub mask: BinaryMask,
    pub side: usize,
}

/// Per-example generator derived from `(seed, epoch, id)` so results do not
/// depend on iteration order or worker count.
pub fn example_rng(seed: u64, epoch: u64, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(epoch.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Unit-scaled `(3, H, W)` copy of an RGB image.
pub fn rgb_to_unit(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut out = Array3::<f32>::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = f32::from(px[c]) / 255.0;
        }
    }
    out
}

pub fn normalize_in_place(img: &mut Array3<f32>) {
    for (c, mut plane) in img.outer_iter_mut().enumerate() {
        plane.mapv_inplace(|v| (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]);
    }
}

/// Inverse of [`normalize_in_place`], back to 8-bit RGB.
pub fn denormalize_to_rgb(img: &Array3<f32>) -> RgbImage {
    let (_, h, w) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u8; 3];
        for (c, v) in px.iter_mut().enumerate() {
            let unit = img[[c, y as usize, x as usize]] * IMAGENET_STD[c] + IMAGENET_MEAN[c];
            *v = (unit * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        image::Rgb(px)
    })
}

pub fn flip_horizontal<T: Clone>(a: &Array3<T>) -> Array3<T> {
    a.slice(ndarray::s![.., .., ..;-1]).to_owned()
}

fn color_jitter(img: &mut Array3<f32>, contrast: f32, brightness: f32) {
    img.mapv_inplace(|v| (contrast * v + brightness).clamp(0.0, 1.0));
}

fn gaussian_kernel(size: usize, sigma: f32) -> Vec<f32> {
    let half = (size / 2) as f32;
    let k: Vec<f32> = (0..size).map(|i| (-((i as f32 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f32 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &Array3<f32>, size: usize, sigma: f32) -> Array3<f32> {
    let kernel = gaussian_kernel(size, sigma);
    let r = (size / 2) as isize;
    let (c, h, w) = img.dim();
    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += k * img[[ch, y, xx]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, k) in kernel.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp[[ch, yy, x]];
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    out
}

/// Resize, (train only) augment, normalize.
///
/// Train-mode augmentation: horizontal flip (p = 0.5, image and mask
/// together), brightness/contrast jitter (p = 0.3) and Gaussian blur
/// (p = 0.2), the last two on the image only. Masks are resized with
/// nearest-neighbour sampling so they stay binary.
pub fn preprocess_loaded(sample: &LoadedSample, mode: PrepMode, rng: &mut impl Rng, side: usize) -> Result<PreprocessedExample> {
    if side == 0 {
        return Err(SegError::Config("side must be positive".into()));
    }
    let s = side as u32;
    let resized = if sample.image.dimensions() == (s, s) {
        sample.image.clone()
    } else {
        imageops::resize(&sample.image, s, s, FilterType::Triangle)
    };
    let mask_img = if sample.mask.dimensions() == (s, s) {
        sample.mask.clone()
    } else {
        imageops::resize(&sample.mask, s, s, FilterType::Nearest)
    };
    let mut image = rgb_to_unit(&resized);
    let mut mask = binarize_mask(gray_to_array(&mask_img).view(), MASK_THRESHOLD);

    if mode == PrepMode::Train {
        if rng.gen_bool(FLIP_PROB) {
            image = flip_horizontal(&image);
            mask = flip_horizontal(&mask);
        }
        if rng.gen_bool(COLOR_JITTER_PROB) {
            let contrast = rng.gen_range(CONTRAST_RANGE.0..=CONTRAST_RANGE.1);
            let brightness = rng.gen_range(BRIGHTNESS_RANGE.0..=BRIGHTNESS_RANGE.1);
            color_jitter(&mut image, contrast, brightness);
        }
        if rng.gen_bool(BLUR_PROB) {
            let size = *BLUR_KERNELS.choose(rng).expect("non-empty");
            let sigma = rng.gen_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1);
            image = gaussian_blur(&image, size, sigma);
        }
    }
    normalize_in_place(&mut image);
    Ok(PreprocessedExample { id: sample.id.clone(), image, mask, side })
}

/// Decodes a pair from disk and preprocesses it.
pub fn preprocess(pair: &SamplePair, mode: PrepMode, rng: &mut impl Rng, side: usize) -> Result<PreprocessedExample> {
    preprocess_loaded(&LoadedSample::load(pair)?, mode, rng, side)
}

/// Stacks examples into `(N,3,S,S)` images and `(N,1,S,S)` float masks.
pub fn stack_batch(examples: &[&PreprocessedExample]) -> Result<(Array4<f32>, Array4<f32>)> {
    let first = examples.first().ok_or_else(|| SegError::Dataset("empty batch".into()))?;
    let side = first.side;
    let n = examples.len();
    let mut images = Array4::<f32>::zeros((n, 3, side, side));
    let mut masks = Array4::<f32>::zeros((n, 1, side, side));
    for (i, ex) in examples.iter().enumerate() {
        if ex.side != side {
            return Err(SegError::Shape(format!("batch mixes sides {side} and {}", ex.side)));
        }
        images.index_axis_mut(ndarray::Axis(0), i).assign(&ex.image);
        masks.index_axis_mut(ndarray::Axis(0), i).assign(&ex.mask.mapv(f32::from));
    }
    Ok((images, masks))
}
