//! Dataset ingestion, deterministic sharding and micro-batch iteration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DataError;
use crate::tensor::Tensor;

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Cifar10 => "cifar10",
            Source::Cifar100 => "cifar100",
            Source::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    /// Label bytes + pixel bytes.
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

impl FromStr for CifarVariant {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "cifar100" => Ok(Self::Cifar100),
            other => Err(DataError::Config(format!(
                "unknown CIFAR variant {other:?}"
            ))),
        }
    }
}

/// Images `[N, C, H, W]` in `[0, 1]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    class_count: usize,
    source: Source,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        class_count: usize,
        source: Source,
    ) -> Result<Self, DataError> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(DataError::Format(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::Format(format!(
                "label {l} ≥ class count {class_count}"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Format("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn source(&self) -> Source {
        self.source
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        let [c, h, w] = self.image_shape();
        c * h * w
    }

    /// Copies the listed samples, in the given order. Panics on out-of-range indices.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            images,
            labels,
            class_count: self.class_count,
            source: self.source,
        }
    }

    /// Images and labels for the listed samples, in order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered shape");
        (images, labels)
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// Reads one or more CIFAR binary files and concatenates them.
pub fn load_cifar_binary<P: AsRef<Path>>(
    paths: &[P],
    variant: CifarVariant,
) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = std::fs::read(p.as_ref())?;
        if chunk.len() % variant.record_len() != 0 || chunk.is_empty() {
            return Err(DataError::Format(format!(
                "{}: {} bytes is not a whole number of {}-byte records",
                p.as_ref().display(),
                chunk.len(),
                variant.record_len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    if paths.is_empty() {
        return Err(DataError::Config("no CIFAR files given".into()));
    }
    parse_cifar(&bytes, variant)
}

/// Parses concatenated CIFAR records. CIFAR-100 records carry a coarse and
/// a fine label; the fine label is used.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset, DataError> {
    let rl = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rl) {
        return Err(DataError::Format(format!(
            "{} bytes is not a whole number of {rl}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rl;
    let label_bytes = rl - CIFAR_PIXELS;
    let classes = variant.class_count();
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, rec) in bytes.chunks_exact(rl).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= classes {
            return Err(DataError::Format(format!(
                "record {i}: label {label} ≥ {classes} classes"
            )));
        }
        labels.push(label);
        pixels.extend(rec[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels).expect("record shape");
    let source = match variant {
        CifarVariant::Cifar10 => Source::Cifar10,
        CifarVariant::Cifar100 => Source::Cifar100,
    };
    Dataset::new(images, labels, classes, source)
}

/// Blob width relative to the image side.
const BLOB_SIGMA: f64 = 0.12;
/// Random displacement of a blob centre relative to the image side.
const BLOB_JITTER: f64 = 0.03;
const BLOB_AMPLITUDE: f64 = 0.8;
const BACKGROUND: f64 = 0.15;
const PIXEL_NOISE: f64 = 0.05;

/// Class-conditional Gaussian-blob images. Class `c` places a bright blob at
/// a class-specific position on a ring around the centre, tinted towards a
/// class-specific channel; each sample jitters the centre and adds pixel
/// noise. Labels are `i mod class_count`, so classes are balanced.
pub fn make_synthetic(
    n: usize,
    class_count: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if class_count < 2 || n < class_count || image_size == 0 {
        return Err(DataError::Config(format!(
            "synthetic set needs n ≥ class_count ≥ 2 (n {n}, classes {class_count}, size {image_size})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = image_size as f64;
    let sigma = BLOB_SIGMA * s;
    let mut data = Vec::with_capacity(n * 3 * image_size * image_size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % class_count;
        let angle = std::f64::consts::TAU * c as f64 / class_count as f64;
        let radius = 0.3 * s;
        let cx = 0.5 * s + radius * angle.cos() + rng.gen_range(-1.0..1.0) * BLOB_JITTER * s;
        let cy = 0.5 * s + radius * angle.sin() + rng.gen_range(-1.0..1.0) * BLOB_JITTER * s;
        let tint = c % 3;
        for ch in 0..3 {
            let amp = if ch == tint {
                BLOB_AMPLITUDE
            } else {
                0.4 * BLOB_AMPLITUDE
            };
            for y in 0..image_size {
                for x in 0..image_size {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let blob = amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    let noise = rng.gen_range(-1.0..1.0) * PIXEL_NOISE;
                    data.push((BACKGROUND + blob + noise).clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(c);
    }
    let images = Tensor::new(vec![n, 3, image_size, image_size], data).expect("synthetic shape");
    Dataset::new(images, labels, class_count, Source::Synthetic)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalingMode {
    /// Fixed total workload split across ranks.
    Strong,
    /// Fixed per-rank workload.
    Weak,
}

impl fmt::Display for ScalingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScalingMode::Strong => "strong",
            ScalingMode::Weak => "weak",
        })
    }
}

impl FromStr for ScalingMode {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strong" => Ok(Self::Strong),
            "weak" => Ok(Self::Weak),
            other => Err(DataError::Config(format!("unknown scaling mode {other:?}"))),
        }
    }
}

pub const DEFAULT_WEAK_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShardSpec {
    pub mode: ScalingMode,
    pub rank: usize,
    pub world_size: usize,
    pub weak_fraction: f64,
    pub seed: u64,
}

impl ShardSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.world_size == 0 || self.rank >= self.world_size {
            return Err(DataError::Config(format!(
                "rank {} outside world of {}",
                self.rank, self.world_size
            )));
        }
        if self.mode == ScalingMode::Weak {
            if !(self.weak_fraction > 0.0 && self.weak_fraction <= 1.0) {
                return Err(DataError::Config(format!(
                    "weak fraction {} must lie in (0, 1]",
                    self.weak_fraction
                )));
            }
            if self.world_size as f64 * self.weak_fraction > 1.0 + 1e-9 {
                return Err(DataError::Config(format!(
                    "weak scaling overflow: {} ranks × fraction {} exceeds the dataset",
                    self.world_size, self.weak_fraction
                )));
            }
        }
        Ok(())
    }

    /// Samples this rank receives from a dataset of `n`.
    pub fn shard_len(&self, n: usize) -> usize {
        match self.mode {
            ScalingMode::Strong => n / self.world_size,
            // the epsilon keeps e.g. 60_000 × 0.1 from flooring to 5_999
            ScalingMode::Weak => (n as f64 * self.weak_fraction + 1e-9).floor() as usize,
        }
    }

    /// Dataset indices for this rank: one seeded global shuffle, then a
    /// contiguous slice.
    pub fn indices(&self, n: usize) -> Result<Vec<usize>, DataError> {
        self.validate()?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let per = self.shard_len(n);
        Ok(order[self.rank * per..(self.rank + 1) * per].to_vec())
    }
}

pub fn shard(ds: &Dataset, spec: &ShardSpec) -> Result<Dataset, DataError> {
    let idx = spec.indices(ds.len())?;
    Ok(ds.select(&idx))
}

/// One micro-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Per-epoch shuffled, drop-last micro-batches over a shard.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    micro: usize,
    next: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let start = self.next * self.micro;
        if start + self.micro > self.order.len() {
            return None;
        }
        self.next += 1;
        let (images, labels) = self.data.gather(&self.order[start..start + self.micro]);
        Some(Batch { images, labels })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.order.len() / self.micro - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Permutation of `0..n` used for one epoch, seeded with `seed ^ epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    order
}

/// The order is reseeded with `seed ^ epoch` every epoch.
pub fn batches(
    shard: &Dataset,
    micro_batch: usize,
    seed: u64,
    epoch: u64,
) -> Result<Batches<'_>, DataError> {
    if micro_batch == 0 || micro_batch > shard.len() {
        return Err(DataError::Config(format!(
            "micro batch {micro_batch} does not fit a shard of {}",
            shard.len()
        )));
    }
    Ok(Batches {
        order: epoch_order(shard.len(), seed, epoch),
        data: shard,
        micro: micro_batch,
        next: 0,
    })
}
