//! Dataset selection from the command line.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use vitdp_core::data::{load_cifar_binary, make_synthetic, CifarVariant};
use vitdp_core::Dataset;

use crate::error::TrainError;

pub const DEFAULT_SYNTHETIC_SAMPLES: usize = 2000;
pub const SYNTHETIC_CLASSES: usize = 10;
pub const SYNTHETIC_IMAGE_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetArg {
    Synthetic,
    /// A CIFAR binary file, or a directory holding `data_batch_*.bin`
    /// (CIFAR-10) or `train.bin` (CIFAR-100).
    Cifar(PathBuf),
}

impl FromStr for DatasetArg {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err(TrainError::Usage("empty dataset argument".into()));
        }
        Ok(if s == "synthetic" {
            Self::Synthetic
        } else {
            Self::Cifar(s.into())
        })
    }
}

impl std::fmt::Display for DatasetArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetArg::Synthetic => f.write_str("synthetic"),
            DatasetArg::Cifar(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Synthetic sets have `samples` images (default 2,000); CIFAR sets are
/// truncated to their first `samples` images when given.
pub fn load_dataset(
    arg: &DatasetArg,
    samples: Option<usize>,
    seed: u64,
) -> Result<Dataset, TrainError> {
    match arg {
        DatasetArg::Synthetic => Ok(make_synthetic(
            samples.unwrap_or(DEFAULT_SYNTHETIC_SAMPLES),
            SYNTHETIC_CLASSES,
            SYNTHETIC_IMAGE_SIZE,
            seed,
        )?),
        DatasetArg::Cifar(path) => {
            let (files, variant) = cifar_files(path)?;
            let ds = load_cifar_binary(&files, variant)?;
            Ok(match samples {
                Some(n) => ds.take(n),
                None => ds,
            })
        }
    }
}

fn cifar_files(path: &Path) -> Result<(Vec<PathBuf>, CifarVariant), TrainError> {
    if path.is_file() {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let variant = if name == "train.bin" || name == "test.bin" {
            CifarVariant::Cifar100
        } else {
            CifarVariant::Cifar10
        };
        return Ok((vec![path.to_path_buf()], variant));
    }
    if !path.is_dir() {
        return Err(TrainError::Usage(format!(
            "dataset {} does not exist",
            path.display()
        )));
    }
    let batches: Vec<PathBuf> = (1..=5)
        .map(|i| path.join(format!("data_batch_{i}.bin")))
        .filter(|p| p.is_file())
        .collect();
    if !batches.is_empty() {
        return Ok((batches, CifarVariant::Cifar10));
    }
    let train = path.join("train.bin");
    if train.is_file() {
        return Ok((vec![train], CifarVariant::Cifar100));
    }
    Err(TrainError::Usage(format!(
        "{} holds neither data_batch_*.bin nor train.bin",
        path.display()
    )))
}
