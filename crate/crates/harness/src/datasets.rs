//! Synthetic datasets, IDX ingestion and deterministic train/test splits.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use ticketlab_core::Dataset;

use crate::error::{HarnessError, Result};

const IDX_UBYTE_IMAGES: u32 = 0x0000_0803;
const IDX_UBYTE_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Two isotropic Gaussian clusters in the plane, centered at
    /// `(±separation·noise, 0)`.
    Blobs {
        n: usize,
        #[serde(default = "one")]
        noise: f64,
        #[serde(default = "four")]
        separation: f64,
    },
    /// Two interleaved spirals with Gaussian jitter.
    Spirals {
        n: usize,
        #[serde(default = "spiral_noise")]
        noise: f64,
    },
    /// IDX (MNIST-style) image and label files.
    IdxFiles { images: PathBuf, labels: PathBuf },
}

fn one() -> f64 {
    1.0
}

fn four() -> f64 {
    4.0
}

fn spiral_noise() -> f64 {
    0.05
}

impl DataSource {
    pub fn validate(&self) -> Result<()> {
        let (n, noise) = match self {
            DataSource::Blobs { n, noise, separation } => {
                if !separation.is_finite() {
                    return Err(HarnessError::Config("data.separation must be finite".into()));
                }
                (*n, *noise)
            }
            DataSource::Spirals { n, noise } => (*n, *noise),
            DataSource::IdxFiles { .. } => return Ok(()),
        };
        if n < 4 {
            return Err(HarnessError::Config(format!("data.n must be at least 4, got {n}")));
        }
        if !(noise.is_finite() && noise >= 0.0) {
            return Err(HarnessError::Config(format!("data.noise must be non-negative, got {noise}")));
        }
        Ok(())
    }
}

/// Builds the full dataset; synthetic sources draw from `seed`.
pub fn make_dataset(source: &DataSource, seed: u64) -> Result<Dataset> {
    source.validate()?;
    match source {
        DataSource::Blobs { n, noise, separation } => Ok(blobs(*n, *noise, *separation, seed)),
        DataSource::Spirals { n, noise } => Ok(spirals(*n, *noise, seed)),
        DataSource::IdxFiles { images, labels } => read_idx(images, labels),
    }
}

pub fn blobs(n: usize, noise: f64, separation: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let cx = if class == 0 { -separation * noise } else { separation * noise };
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        inputs.push(cx + noise * dx);
        inputs.push(noise * dy);
        labels.push(class);
    }
    Dataset::new(2, 2, inputs, labels).expect("blobs are well formed")
}

/// Class 0 gets `ceil(n / 2)` points, class 1 the rest. Radii grow
/// linearly to 1 over 1.5 turns; the second arm is rotated by pi.
pub fn spirals(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    let per_class = [n.div_ceil(2), n / 2];
    for (class, &count) in per_class.iter().enumerate() {
        for i in 0..count {
            let r = 0.05 + 0.95 * i as f64 / count as f64;
            let angle = 3.0 * PI * r + class as f64 * PI;
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            inputs.push(r * angle.cos() + noise * dx);
            inputs.push(r * angle.sin() + noise * dy);
            labels.push(class);
        }
    }
    Dataset::new(2, 2, inputs, labels).expect("spirals are well formed")
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| HarnessError::format(path, "truncated IDX header"))
}

/// Parses an IDX unsigned-byte file, returning its dimensions and payload.
pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != expected_magic {
        return Err(HarnessError::format(
            path,
            format!("bad IDX magic number 0x{magic:08x}, expected 0x{expected_magic:08x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for k in 0..ndim {
        dims.push(read_u32(bytes, 4 + 4 * k, path)? as usize);
    }
    let start = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    let payload = bytes
        .get(start..start + count)
        .ok_or_else(|| HarnessError::format(path, format!("IDX payload shorter than the declared {count} bytes")))?;
    Ok((dims, payload.to_vec()))
}

/// Reads an IDX image/label pair; pixels are scaled to [0, 1] and flattened.
pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images).map_err(|e| HarnessError::io(images, e))?;
    let lab_bytes = std::fs::read(labels).map_err(|e| HarnessError::io(labels, e))?;
    let (img_dims, pixels) = parse_idx(&img_bytes, IDX_UBYTE_IMAGES, images)?;
    let (lab_dims, raw_labels) = parse_idx(&lab_bytes, IDX_UBYTE_LABELS, labels)?;
    if img_dims[0] != lab_dims[0] {
        return Err(HarnessError::format(
            labels,
            format!("{} labels for {} images", lab_dims[0], img_dims[0]),
        ));
    }
    let dim = img_dims[1] * img_dims[2];
    let labels_vec: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels_vec.iter().max().map_or(1, |m| m + 1);
    let inputs = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    Dataset::new(dim, classes, inputs, labels_vec).map_err(HarnessError::from)
}

/// Deterministic shuffle-and-split; the first `round(n * test_fraction)`
/// shuffled rows become the test set.
pub fn split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(HarnessError::Config(format!(
            "data.test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (data.len() as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == data.len() {
        return Err(HarnessError::Config("split leaves an empty train or test set".into()));
    }
    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((data.subset(&train_idx), data.subset(&test_idx)))
}
