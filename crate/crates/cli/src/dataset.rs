//! Loading the configured dataset, and writing synthetic data in CIFAR format.

use std::fs;
use std::path::{Path, PathBuf};

use bmnn_core::data::{encode_cifar, load_cifar, synthetic_classification, CifarVariant, CIFAR_SHAPE};
use bmnn_core::trainer::TrainData;
use bmnn_core::{Dataset, Tensor};
use serde::Serialize;

use crate::config::{DatasetKind, Settings, DATA_DIR_ENV};
use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub source: &'static str,
    pub directory: Option<PathBuf>,
    pub train: usize,
    pub test: usize,
    pub classes: usize,
}

fn subdir(variant: CifarVariant) -> &'static str {
    match variant {
        CifarVariant::Cifar10 => "cifar-10-batches-bin",
        CifarVariant::Cifar100 => "cifar-100-binary",
    }
}

/// `dir/<standard subdirectory>` when present, otherwise `dir` itself.
fn cifar_root(dir: &Path, variant: CifarVariant) -> PathBuf {
    let nested = dir.join(subdir(variant));
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Splits a dataset after its first `n` samples.
fn split(ds: &Dataset, n: usize) -> Result<(Dataset, Dataset), CliError> {
    let per: usize = ds.sample_shape().iter().product();
    let part = |range: std::ops::Range<usize>| -> Result<Dataset, CliError> {
        let mut shape = vec![range.len()];
        shape.extend_from_slice(ds.sample_shape());
        let data = ds.images().data()[range.start * per..range.end * per].to_vec();
        Ok(Dataset::new(Tensor::new(shape, data)?, ds.labels()[range].to_vec(), ds.classes())?)
    };
    Ok((part(0..n)?, part(n..ds.len())?))
}

pub fn load(settings: &Settings) -> Result<(TrainData, DataSummary), CliError> {
    match settings.dataset.variant() {
        None => {
            let total = settings.synthetic_count + settings.synthetic_test_count;
            let all = synthetic_classification(settings.classes, total, &settings.synthetic_shape, settings.seed)?;
            let (train, test) = split(&all, settings.synthetic_count)?;
            let summary = DataSummary {
                source: DatasetKind::Synthetic.name(),
                directory: None,
                train: train.len(),
                test: test.len(),
                classes: settings.classes,
            };
            let test = (!test.is_empty()).then_some(test);
            Ok((TrainData { train, test }, summary))
        }
        Some(variant) => {
            let dir = settings.data_dir.as_ref().ok_or_else(|| {
                CliError::Config(format!(
                    "dataset '{}' needs a data directory: pass --data-dir, set data_dir in the config, or set {DATA_DIR_ENV}",
                    settings.dataset.name()
                ))
            })?;
            let root = cifar_root(dir, variant);
            let mut splits = load_cifar(&root, variant)?;
            splits.train.truncate(settings.train_limit);
            splits.test.truncate(settings.test_limit);
            let summary = DataSummary {
                source: settings.dataset.name(),
                directory: Some(root),
                train: splits.train.len(),
                test: splits.test.len(),
                classes: variant.classes(),
            };
            let test = (settings.test_limit > 0).then_some(splits.test);
            Ok((TrainData { train: splits.train, test }, summary))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WrittenFile {
    pub path: PathBuf,
    pub records: usize,
}

/// Writes synthetic 3x32x32 blobs as a CIFAR binary directory under `out`.
/// Values are mapped affinely onto `[0, 1]` before byte quantization.
pub fn write_synthetic_cifar(
    out: &Path,
    variant: CifarVariant,
    classes: usize,
    train: usize,
    test: usize,
    seed: u64,
) -> Result<Vec<WrittenFile>, CliError> {
    if classes > variant.classes() {
        return Err(CliError::Config(format!(
            "classes: {classes} does not fit the {} label space",
            variant.classes()
        )));
    }
    let files = variant.train_files();
    if train < files.len() {
        return Err(CliError::Config(format!("count: need at least {} training images", files.len())));
    }
    if test == 0 {
        return Err(CliError::Config("test_count: must be at least 1".into()));
    }
    let all = synthetic_classification(classes, train + test, &CIFAR_SHAPE, seed)?;
    let (lo, hi) = all
        .images()
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let pixels: Vec<f64> = all.images().data().iter().map(|v| (v - lo) / span).collect();
    let labels = all.labels();

    let root = out.join(subdir(variant));
    fs::create_dir_all(&root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
    let per = CIFAR_SHAPE.iter().product::<usize>();
    let mut written = Vec::new();
    let mut write = |name: &str, range: std::ops::Range<usize>| -> Result<(), CliError> {
        let bytes = encode_cifar(&pixels[range.start * per..range.end * per], &labels[range.clone()], variant)?;
        let path = root.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        written.push(WrittenFile { path, records: range.len() });
        Ok(())
    };
    // spread the training images over the standard file names
    let chunk = train.div_ceil(files.len());
    for (i, name) in files.iter().enumerate() {
        let start = (i * chunk).min(train);
        write(name, start..((i + 1) * chunk).min(train))?;
    }
    write(variant.test_files()[0], train..train + test)?;
    Ok(written)
}
