//! Datasets, the transformation protocol and test-suite generation.

mod formats;
mod transform;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Real};

pub use formats::{
    load_cifar_binary, load_idx, parse_cifar, parse_idx_images, parse_idx_labels,
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use transform::{apply, augment, random_transform, stream_rng, Transform, TransformSpec};

/// One labelled `[C, H, W]` image with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Array<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    FashionMnist,
    Cifar10,
    Cifar100,
}

impl DatasetName {
    pub fn classes(self) -> usize {
        match self {
            Self::FashionMnist | Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Self::FashionMnist => 1,
            Self::Cifar10 | Self::Cifar100 => 3,
        }
    }
}

/// Train and test splits of one dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn first_existing(root: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::io(
                root.join(names[0]),
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
            )
        })
}

/// Loads the standard file layout of `name` from the directory `root`: the
/// four IDX files (raw or `.gz`) for FashionMNIST, `data_batch_{1..5}.bin`
/// and `test_batch.bin` for CIFAR-10, `train.bin` and `test.bin` for
/// CIFAR-100.
pub fn load_splits(name: DatasetName, root: &Path) -> Result<Splits> {
    match name {
        DatasetName::FashionMnist => {
            let file = |stem: &str| {
                first_existing(root, &[&format!("{stem}.gz"), stem])
            };
            Ok(Splits {
                train: load_idx(
                    &file("train-images-idx3-ubyte")?,
                    &file("train-labels-idx1-ubyte")?,
                )?,
                test: load_idx(
                    &file("t10k-images-idx3-ubyte")?,
                    &file("t10k-labels-idx1-ubyte")?,
                )?,
            })
        }
        DatasetName::Cifar10 => {
            let train: Vec<PathBuf> = (1..=5)
                .map(|i| first_existing(root, &[&format!("data_batch_{i}.bin")]))
                .collect::<Result<_>>()?;
            Ok(Splits {
                train: load_cifar_binary(&train, 10)?,
                test: load_cifar_binary(&[first_existing(root, &["test_batch.bin"])?], 10)?,
            })
        }
        DatasetName::Cifar100 => Ok(Splits {
            train: load_cifar_binary(&[first_existing(root, &["train.bin"])?], 100)?,
            test: load_cifar_binary(&[first_existing(root, &["test.bin"])?], 100)?,
        }),
    }
}

/// The first `per_class` samples of every class, in their original order.
pub fn subset_per_class(samples: &[Sample], per_class: usize, classes: usize) -> Vec<Sample> {
    let mut taken = vec![0usize; classes];
    samples
        .iter()
        .filter(|s| {
            let keep = s.label < classes && taken[s.label] < per_class;
            if keep {
                taken[s.label] += 1;
            }
            keep
        })
        .cloned()
        .collect()
}

/// The transformation regimes of the five test suites, in reporting order.
pub fn suite_specs() -> [TransformSpec; 5] {
    [(0, 0.0), (2, 30.0), (2, 60.0), (2, 90.0), (2, 180.0)].map(|(tr, rot)| TransformSpec { tr, rot })
}

/// The regime used to transform training images.
pub const TRAIN_SPEC: TransformSpec = TransformSpec { tr: 2, rot: 180.0 };

/// One transformed copy of a test set.
#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub spec: TransformSpec,
    pub samples: Vec<Sample>,
}

impl Suite {
    pub fn label(&self) -> String {
        self.spec.label()
    }
}

/// Random stream family reserved for test suites; training draws use
/// epoch-indexed families below this value.
const SUITE_STREAM: u64 = 1 << 63;

/// The untransformed test set plus one transformed copy per remaining regime,
/// each sample drawing from its own stream so that suites are reproducible.
pub fn build_test_suites(test: &[Sample], seed: u64) -> Vec<Suite> {
    suite_specs()
        .into_iter()
        .enumerate()
        .map(|(k, spec)| {
            let samples = if k == 0 {
                test.to_vec()
            } else {
                test.iter()
                    .enumerate()
                    .map(|(n, s)| {
                        let mut rng = stream_rng(seed, SUITE_STREAM + k as u64, n as u64);
                        Sample {
                            image: random_transform(&s.image, &spec, &mut rng),
                            label: s.label,
                        }
                    })
                    .collect()
            };
            Suite { spec, samples }
        })
        .collect()
}

/// Stacks `[C, H, W]` images into a `[B, C, H, W]` batch.
pub fn stack<T: Real>(images: &[&Array<f32>]) -> Result<Array<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                lhs: shape,
                rhs: img.shape().to_vec(),
            });
        }
        data.extend(img.data().iter().map(|&v| T::lit(f64::from(v))));
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Array::from_vec(full, data)
}
