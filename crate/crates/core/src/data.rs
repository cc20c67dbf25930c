//! Datasets: synthetic generators, file loaders, augmentation, batching.
//!
//! Labels are 0-based class indices in memory and 1-based (`1..=T`) in
//! files. Generated features are rounded to `f32` so a dataset survives a
//! round trip through the raw format unchanged.
//!
//! # Raw format
//!
//! Little-endian throughout:
//!
//! | field | type |
//! |---|---|
//! | magic | 4 bytes, `TSAD` |
//! | N | u32 |
//! | T | u32 |
//! | rank | u32 |
//! | dims | rank x u32 |
//! | features | N x prod(dims) x f32, row-major |
//! | labels | N x u32, each in `1..=T` |

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"TSAD";

/// Angle swept by each spiral arm from centre to rim, in turns.
pub const SPIRAL_TURNS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    /// `features` has shape `(N, ...)`; `labels` are 0-based.
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().len() < 2 {
            return Err(Error::InvalidTensor(format!(
                "features need a sample axis and a feature shape, got {:?}",
                features.shape()
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::InvalidTensor(format!(
                "{} samples but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(row) = labels.iter().position(|&y| y >= classes) {
            return Err(Error::LabelOutOfRange {
                row,
                label: labels[row] + 1,
                classes,
            });
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample feature shape.
    pub fn feature_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            indices: indices.to_vec(),
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Dataset rows, in batch order.
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

/// Interleaved 2-D spirals. Class `c` lies on the arm
/// `angle = 2*pi*c/classes + 2*pi*SPIRAL_TURNS*r` at radius `r ~ U(0,1)`,
/// with isotropic Gaussian noise of standard deviation `noise_std` added to
/// each coordinate.
pub fn gen_spirals(n_per_class: usize, classes: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    gen_spirals_with_turns(n_per_class, classes, noise_std, SPIRAL_TURNS, seed)
}

/// [`gen_spirals`] with an explicit number of turns per arm.
pub fn gen_spirals_with_turns(
    n_per_class: usize,
    classes: usize,
    noise_std: f64,
    turns: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(turns > 0.0 && turns.is_finite()) {
        return Err(Error::InvalidConfig(format!("turns must be positive, got {turns}")));
    }
    if n_per_class == 0 || classes == 0 {
        return Err(Error::InvalidConfig("spirals need n_per_class >= 1 and classes >= 1".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise_std must be finite and >= 0, got {noise_std}")));
    }
    let noise = Normal::new(0.0, noise_std)
        .map_err(|e| Error::InvalidConfig(format!("noise_std {noise_std}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n_per_class * classes * 2);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for c in 0..classes {
        for _ in 0..n_per_class {
            let r: f64 = rng.random_range(0.0..1.0);
            let angle = 2.0 * PI * c as f64 / classes as f64 + 2.0 * PI * turns * r;
            let (dx, dy) = (noise.sample(&mut rng), noise.sample(&mut rng));
            data.push(quantize(r * angle.cos() + dx));
            data.push(quantize(r * angle.sin() + dy));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![labels.len(), 2], data)?, labels, classes)
}

/// Centre of class `c` for [`gen_blobs`]: `separation / sqrt(2)` along axis
/// `c`, so any two centres are exactly `separation` apart.
pub fn blob_center(c: usize, dim: usize, separation: f64) -> Vec<f64> {
    let mut center = vec![0.0; dim];
    center[c] = separation / 2f64.sqrt();
    center
}

/// Gaussian blobs with unit variance around [`blob_center`]s. Requires
/// `classes <= dim`.
pub fn gen_blobs(n_per_class: usize, classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || classes == 0 || classes > dim {
        return Err(Error::InvalidConfig(format!(
            "blobs need n_per_class >= 1 and 1 <= classes <= dim, got n={n_per_class} classes={classes} dim={dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(n_per_class * classes * dim);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for c in 0..classes {
        let center = blob_center(c, dim, separation);
        for _ in 0..n_per_class {
            data.extend(center.iter().map(|m| quantize(m + unit.sample(&mut rng))));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![labels.len(), dim], data)?, labels, classes)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads `label,f1,...,fD` CSV with 1-based labels. `classes` bounds the
/// labels; when `None` it is the largest label present.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::MalformedHeader {
        path: path.into(),
        reason: "not UTF-8 text".into(),
    })?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let header: Vec<&str> = match lines.next() {
        Some((_, h)) => h.split(',').map(str::trim).collect(),
        None => {
            return Err(Error::MalformedHeader {
                path: path.into(),
                reason: "empty file".into(),
            })
        }
    };
    if header.len() < 2 || header[0] != "label" {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: "expected `label,f1,...,fD`".into(),
        });
    }
    let dim = header.len() - 1;
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.into(),
        line: line + 1,
        reason,
    };
    let mut data = Vec::new();
    let mut raw_labels = Vec::new();
    for (line, row) in lines {
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(parse_err(line, format!("expected {} fields, got {}", dim + 1, fields.len())));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(line, format!("bad label `{}`", fields[0])))?;
        raw_labels.push(label);
        for f in &fields[1..] {
            data.push(f.parse::<f64>().map_err(|_| parse_err(line, format!("bad value `{f}`")))?);
        }
    }
    if raw_labels.is_empty() {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: "no data rows".into(),
        });
    }
    let classes = classes.unwrap_or_else(|| raw_labels.iter().copied().max().unwrap_or(1));
    let labels = one_based_to_index(&raw_labels, classes)?;
    Dataset::new(Tensor::new(vec![labels.len(), dim], data)?, labels, classes)
}

fn one_based_to_index(raw: &[usize], classes: usize) -> Result<Vec<usize>> {
    raw.iter()
        .enumerate()
        .map(|(row, &y)| {
            if (1..=classes).contains(&y) {
                Ok(y - 1)
            } else {
                Err(Error::LabelOutOfRange {
                    row,
                    label: y,
                    classes,
                })
            }
        })
        .collect()
}

/// Writes a flat-feature dataset as CSV with 1-based labels.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let dim: usize = dataset.feature_shape().iter().product();
    let mut out = String::from("label");
    for i in 1..=dim {
        write!(out, ",f{i}").unwrap();
    }
    out.push('\n');
    for (i, &y) in dataset.labels.iter().enumerate() {
        write!(out, "{}", y + 1).unwrap();
        for v in dataset.features.row(i) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Serializes to the raw format. Features are stored as `f32`.
pub fn encode_raw(dataset: &Dataset) -> Vec<u8> {
    let shape = dataset.feature_shape();
    let mut out = Vec::with_capacity(16 + 4 * shape.len() + 4 * dataset.features.len() + 4 * dataset.len());
    out.extend_from_slice(RAW_MAGIC);
    for v in [dataset.len(), dataset.classes, shape.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in dataset.features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &y in &dataset.labels {
        out.extend_from_slice(&(y as u32 + 1).to_le_bytes());
    }
    out
}

pub fn save_raw(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_raw(dataset)).map_err(|e| Error::io(path, e))
}

pub fn load_raw(path: &Path) -> Result<Dataset> {
    decode_raw(&read(path)?, path)
}

/// Parses raw-format bytes; `path` is only used in diagnostics.
pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.into(),
        reason: reason.into(),
    };
    let truncated = |expected: usize| Error::TruncatedPayload {
        path: path.into(),
        expected,
        found: bytes.len(),
    };
    let u32_at = |off: usize| -> Option<usize> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
    };
    if bytes.len() < 16 {
        return Err(malformed("shorter than the fixed header"));
    }
    if &bytes[..4] != RAW_MAGIC {
        return Err(malformed("bad magic, expected `TSAD`"));
    }
    let (n, classes, rank) = (u32_at(4).unwrap(), u32_at(8).unwrap(), u32_at(12).unwrap());
    if n == 0 || classes == 0 || rank == 0 {
        return Err(malformed("N, T and rank must be positive"));
    }
    let header_len = 16 + 4 * rank;
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32_at(16 + 4 * i))
        .collect::<Option<_>>()
        .ok_or_else(|| malformed("dimension list cut short"))?;
    if dims.contains(&0) {
        return Err(malformed("zero dimension"));
    }
    let per_sample: usize = dims.iter().product();
    let expected = header_len + 4 * n * per_sample + 4 * n;
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(malformed(&format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let features: Vec<f64> = bytes[header_len..header_len + 4 * n * per_sample]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let raw_labels: Vec<usize> = bytes[header_len + 4 * n * per_sample..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let labels = one_based_to_index(&raw_labels, classes)?;
    let mut shape = vec![n];
    shape.extend(dims);
    Dataset::new(Tensor::new(shape, features)?, labels, classes)
}

/// Loads by extension: `.csv` as CSV, anything else as raw.
pub fn load_path(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    if path.extension().is_some_and(|e| e == "csv") {
        load_csv(path, classes)
    } else {
        load_raw(path)
    }
}

/// Per-sample image augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentPolicy {
    /// Mirror horizontally with probability 1/2.
    pub hflip: bool,
    /// Translate by up to this many pixels in each direction, filling with
    /// zeros.
    pub shift: usize,
}

impl AugmentPolicy {
    pub fn is_identity(&self) -> bool {
        !self.hflip && self.shift == 0
    }
}

/// One sample's random augmentation decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub dy: isize,
    pub dx: isize,
}

/// Applies `draw` to one `(C,H,W)` image: flip first, then move every pixel
/// by `(dy, dx)`.
pub fn apply_draw(image: &[f64], c: usize, h: usize, w: usize, draw: AugmentDraw) -> Vec<f64> {
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sx = if draw.flip { w - 1 - x } else { x };
                let (ty, tx) = (y as isize + draw.dy, x as isize + draw.dx);
                if ty < 0 || tx < 0 || ty >= h as isize || tx >= w as isize {
                    continue;
                }
                out[(ch * h + ty as usize) * w + tx as usize] = image[(ch * h + y) * w + sx];
            }
        }
    }
    out
}

/// Draws one [`AugmentDraw`] per sample from a generator seeded by `seed`.
pub fn augment_draws(policy: AugmentPolicy, samples: usize, seed: u64) -> Vec<AugmentDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = policy.shift as i64;
    let offset = |rng: &mut ChaCha8Rng| if k > 0 { rng.random_range(-k..=k) as isize } else { 0 };
    (0..samples)
        .map(|_| {
            let flip = policy.hflip && rng.random_bool(0.5);
            let dy = offset(&mut rng);
            let dx = offset(&mut rng);
            AugmentDraw { flip, dy, dx }
        })
        .collect()
}

/// Augments a `(B,C,H,W)` batch. Labels are untouched by construction.
pub fn augment(features: &Tensor, policy: AugmentPolicy, seed: u64) -> Result<Tensor> {
    if policy.is_identity() {
        return Ok(features.clone());
    }
    let &[b, c, h, w] = features.shape() else {
        return Err(Error::shape(
            "augment",
            format!("needs (B,C,H,W) images, got {:?}", features.shape()),
        ));
    };
    let mut out = Vec::with_capacity(features.len());
    for (i, draw) in augment_draws(policy, b, seed).into_iter().enumerate() {
        out.extend(apply_draw(features.row(i), c, h, w, draw));
    }
    Tensor::new(features.shape().to_vec(), out)
}

/// Seeded permutation of the dataset cut into contiguous chunks of
/// `batch_size`; the last chunk may be short.
pub fn batches(dataset: &Dataset, batch_size: usize, epoch_seed: u64) -> Vec<Batch> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.chunks(batch_size).map(|idx| dataset.select(idx)).collect()
}
