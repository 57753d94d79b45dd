//! Datasets: CIFAR binary ingestion, synthetic Gaussian blobs,
//! per-channel standardization, horizontal-flip augmentation and batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, stream_rng, Stream};
use crate::tensor::Tensor;

pub const CIFAR_IMAGE_BYTES: usize = 3 * 32 * 32;
pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CifarVariant {
    #[serde(rename = "cifar10")]
    Cifar10,
    #[serde(rename = "cifar100")]
    Cifar100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    /// Label bytes preceding each image: one for CIFAR-10, coarse + fine for CIFAR-100.
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_IMAGE_BYTES
    }

    pub fn train_files(self) -> &'static [&'static str] {
        match self {
            CifarVariant::Cifar10 => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            CifarVariant::Cifar100 => &["train.bin"],
        }
    }

    pub fn test_files(self) -> &'static [&'static str] {
        match self {
            CifarVariant::Cifar10 => &["test_batch.bin"],
            CifarVariant::Cifar100 => &["test.bin"],
        }
    }
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Images `[count, ...sample_shape]` with integer labels. A sample shape is
/// either `[c, h, w]` or `[features]`; for the latter every feature is its
/// own normalization channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    stats: ChannelStats,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 2 && images.rank() != 4 {
            return Err(Error::dim(
                "Dataset",
                format!("images must be [count, features] or [count, c, h, w], got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(
                "Dataset",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let channels = images.shape()[1];
        Ok(Dataset {
            images,
            labels,
            classes,
            stats: ChannelStats::identity(channels),
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

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    fn channel_layout(&self) -> (usize, usize) {
        let s = self.sample_shape();
        (s[0], s[1..].iter().product())
    }

    /// Per-channel mean and population standard deviation of the current values.
    pub fn compute_stats(&self) -> ChannelStats {
        let (channels, inner) = self.channel_layout();
        let per = self.sample_len();
        let count = (self.len() * inner) as f64;
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        for sample in self.images.data().chunks(per) {
            for c in 0..channels {
                for v in &sample[c * inner..(c + 1) * inner] {
                    mean[c] += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for sample in self.images.data().chunks(per) {
            for c in 0..channels {
                for v in &sample[c * inner..(c + 1) * inner] {
                    sq[c] += (v - mean[c]).powi(2);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        ChannelStats { mean, std }
    }

    /// Standardizes raw values with `stats` (or this dataset's own statistics)
    /// and remembers them for [`Dataset::denormalize`].
    pub fn standardize(&mut self, stats: Option<&ChannelStats>) -> Result<()> {
        let (channels, inner) = self.channel_layout();
        let stats = match stats {
            Some(s) => s.clone(),
            None => self.compute_stats(),
        };
        if stats.mean.len() != channels || stats.std.len() != channels {
            return Err(Error::dim("standardize", "channel count mismatch"));
        }
        let per = self.sample_len();
        for sample in self.images.data_mut().chunks_mut(per) {
            for c in 0..channels {
                let (m, s) = (stats.mean[c], stats.std[c]);
                sample[c * inner..(c + 1) * inner]
                    .iter_mut()
                    .for_each(|v| *v = (*v - m) / s);
            }
        }
        self.stats = stats;
        Ok(())
    }

    /// Values before standardization.
    pub fn denormalize(&self) -> Tensor {
        let (channels, inner) = self.channel_layout();
        let mut out = self.images.clone();
        let per = self.sample_len();
        for sample in out.data_mut().chunks_mut(per) {
            for c in 0..channels {
                let (m, s) = (self.stats.mean[c], self.stats.std[c]);
                sample[c * inner..(c + 1) * inner]
                    .iter_mut()
                    .for_each(|v| *v = *v * s + m);
            }
        }
        out
    }

    /// Keeps the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        if n >= self.len() {
            return;
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        let data = self.images.data()[..n * self.sample_len()].to_vec();
        self.images = Tensor::from_parts(shape, data);
        self.labels.truncate(n);
    }

    /// Batch tensor in network layout (`[n, c, h, w]` or `[features, n]`) plus labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        self.gather_with(indices, |_| false)
    }

    fn gather_with(
        &self,
        indices: &[usize],
        mut flip: impl FnMut(usize) -> bool,
    ) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let per = self.sample_len();
        let n = indices.len();
        let src = self.images.data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("sample index {bad} out of range")));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        match *self.sample_shape() {
            [features] => {
                let mut out = vec![0.0; features * n];
                for (col, &i) in indices.iter().enumerate() {
                    for f in 0..features {
                        out[f * n + col] = src[i * per + f];
                    }
                }
                Ok((Tensor::from_parts(vec![features, n], out), labels))
            }
            [c, h, w] => {
                let mut out = Vec::with_capacity(per * n);
                for &i in indices {
                    let sample = &src[i * per..(i + 1) * per];
                    if flip(i) {
                        out.extend(flipped(sample, c, h, w));
                    } else {
                        out.extend_from_slice(sample);
                    }
                }
                Ok((Tensor::from_parts(vec![n, c, h, w], out), labels))
            }
            _ => unreachable!("validated in Dataset::new"),
        }
    }

    /// Little-endian serialization of labels and values, for hashing and determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.labels.len() * 8 + self.images.len() * 8);
        for &y in &self.labels {
            out.extend_from_slice(&(y as u64).to_le_bytes());
        }
        for v in self.images.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

/// Mirror an image `[c, h, w]` left to right.
pub fn flip_horizontal(image: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    flipped(image, c, h, w).collect()
}

fn flipped(image: &[f64], c: usize, h: usize, w: usize) -> impl Iterator<Item = f64> + '_ {
    (0..c * h).flat_map(move |row| (0..w).rev().map(move |x| image[row * w + x]))
}

// ---------------------------------------------------------------------------

/// Decodes CIFAR binary records. Pixels are returned scaled to `[0, 1]`.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<(Vec<f64>, Vec<usize>)> {
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Format(format!(
            "truncated CIFAR file: {} bytes is not a positive multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    let count = bytes.len() / rec;
    let classes = variant.classes();
    let mut pixels = Vec::with_capacity(count * CIFAR_IMAGE_BYTES);
    let mut labels = Vec::with_capacity(count);
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        // CIFAR-100 stores coarse then fine; the fine label is used
        let label = record[variant.label_bytes() - 1] as usize;
        if label >= classes {
            return Err(Error::Format(format!(
                "record {i}: label {label} out of range for {classes} classes"
            )));
        }
        labels.push(label);
        pixels.extend(record[variant.label_bytes()..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

/// Encodes `[0, 1]` pixels (rounded to bytes) into CIFAR binary records.
pub fn encode_cifar(pixels: &[f64], labels: &[usize], variant: CifarVariant) -> Result<Vec<u8>> {
    if pixels.len() != labels.len() * CIFAR_IMAGE_BYTES {
        return Err(Error::dim("encode_cifar", "pixel count does not match labels"));
    }
    let mut out = Vec::with_capacity(labels.len() * variant.record_len());
    for (img, &y) in pixels.chunks(CIFAR_IMAGE_BYTES).zip(labels) {
        if y >= variant.classes() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: variant.classes(),
            });
        }
        if variant == CifarVariant::Cifar100 {
            // coarse label is not tracked; 20 superclasses of 5 fine classes each
            out.push((y / 5) as u8);
        }
        out.push(y as u8);
        out.extend(img.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

/// Loads one CIFAR binary file without standardization (pixels in `[0, 1]`).
pub fn load_cifar_file(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let (pixels, labels) = parse_cifar(&bytes, variant)?;
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    Dataset::new(images, labels, variant.classes())
}

fn load_split(dir: &Path, files: &[&str], variant: CifarVariant) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = fs::read(&path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let (p, l) = parse_cifar(&bytes, variant)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, variant.classes())
}

/// Train and test splits from a directory in the standard CIFAR binary
/// layout, both standardized with the training split's channel statistics.
#[derive(Debug, Clone)]
pub struct CifarSplits {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<CifarSplits> {
    let mut train = load_split(dir, variant.train_files(), variant)?;
    let mut test = load_split(dir, variant.test_files(), variant)?;
    let stats = train.compute_stats();
    train.standardize(Some(&stats))?;
    test.standardize(Some(&stats))?;
    Ok(CifarSplits { train, test })
}

// ---------------------------------------------------------------------------

/// Distance between class means, in units of the per-coordinate noise.
pub const SYNTHETIC_SEPARATION: f64 = 10.0;

/// Gaussian blobs with unit noise whose class means are pairwise
/// `SYNTHETIC_SEPARATION` apart (orthogonal directions when the dimension
/// allows, otherwise spaced along one axis). Deterministic per seed;
/// returned standardized.
pub fn synthetic_classification(
    classes: usize,
    count: usize,
    sample_shape: &[usize],
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let dim: usize = sample_shape.iter().product();
    let mut rng = stream_rng(seed, Stream::Data);
    let means = class_means(classes, dim, &mut rng);
    let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(count * dim);
    for &y in &labels {
        for d in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(means[y * dim + d] + noise);
        }
    }
    let mut shape = vec![count];
    shape.extend_from_slice(sample_shape);
    let mut ds = Dataset::new(Tensor::new(shape, data)?, labels, classes)?;
    ds.standardize(None)?;
    Ok(ds)
}

fn class_means(classes: usize, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut means = vec![0.0; classes * dim];
    if dim >= classes {
        // Gram-Schmidt on Gaussian vectors gives orthonormal directions
        let radius = SYNTHETIC_SEPARATION / 2f64.sqrt();
        for c in 0..classes {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            for p in 0..c {
                let prev = &means[p * dim..(p + 1) * dim];
                let proj: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>()
                    / (radius * radius);
                v.iter_mut().zip(prev).for_each(|(a, b)| *a -= proj * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            for d in 0..dim {
                means[c * dim + d] = v[d] / norm * radius;
            }
        }
    } else {
        for c in 0..classes {
            means[c * dim] = SYNTHETIC_SEPARATION * c as f64;
        }
    }
    means
}

// ---------------------------------------------------------------------------

/// How an epoch is cut into mini-batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub shuffle: bool,
    /// Probability of mirroring each image left-right, drawn per image per epoch.
    pub flip_prob: f64,
}

impl BatchPlan {
    pub fn new(seed: u64, batch_size: usize) -> Self {
        BatchPlan {
            seed,
            batch_size,
            shuffle: true,
            flip_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Iterator over the mini-batches of one epoch.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    plan: BatchPlan,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

/// Deterministic batches for `epoch`: the shuffle is keyed by `(seed, epoch)`,
/// each flip decision by `(seed, epoch, sample index)`. The last short batch
/// is included.
pub fn batches<'a>(dataset: &'a Dataset, plan: &BatchPlan, epoch: usize) -> Result<Batches<'a>> {
    if plan.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&plan.flip_prob) {
        return Err(Error::InvalidArgument("flip probability must be in [0, 1]".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if plan.shuffle {
        order.shuffle(&mut keyed_rng(plan.seed, Stream::Shuffle, &[epoch as u64]));
    }
    Ok(Batches {
        dataset,
        plan: plan.clone(),
        epoch: epoch as u64,
        order,
        pos: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.plan.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (seed, epoch, p) = (self.plan.seed, self.epoch, self.plan.flip_prob);
        let (images, labels) = self
            .dataset
            .gather_with(&indices, |i| {
                p > 0.0 && keyed_rng(seed, Stream::Augment, &[epoch, i as u64]).random_bool(p)
            })
            .expect("indices come from the dataset");
        Some(Batch {
            images,
            labels,
            indices,
        })
    }
}
