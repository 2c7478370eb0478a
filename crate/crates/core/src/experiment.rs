//! Run configuration and the train/evaluate pipeline shared by the command
//! line and the acceptance suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    build_test_suites, load_splits, subset_per_class, DatasetName, Sample, Suite, TransformSpec,
    TRAIN_SPEC,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Real;
use crate::train::{evaluate, train, EpochMetrics, TrainConfig, TrainData, TrainRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    /// Directory holding the dataset files; unset means `<data root>/<name>`.
    pub path: Option<PathBuf>,
    /// Training samples kept per class; unset keeps all of them.
    pub train_per_class: Option<usize>,
    /// Test samples per class used to build the suites; unset keeps all.
    pub test_per_class: Option<usize>,
    /// Seed of the test-suite transforms.
    pub suite_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: DatasetName::FashionMnist,
            path: None,
            train_per_class: None,
            test_per_class: None,
            suite_seed: 0,
        }
    }
}

impl DatasetConfig {
    /// Conventional directory name below the data root.
    pub fn directory_name(&self) -> &'static str {
        match self.name {
            DatasetName::FashionMnist => "fashion-mnist",
            DatasetName::Cifar10 => "cifar-10",
            DatasetName::Cifar100 => "cifar-100",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformsConfig {
    pub train: TransformSpec,
    /// Random crop and horizontal flip before the transform.
    pub augment: bool,
}

impl Default for TransformsConfig {
    fn default() -> Self {
        Self {
            train: TRAIN_SPEC,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl TryFrom<u32> for Precision {
    type Error = String;

    fn try_from(bits: u32) -> std::result::Result<Self, String> {
        match bits {
            32 => Ok(Self::Single),
            64 => Ok(Self::Double),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::Single => 32,
            Precision::Double => 64,
        }
    }
}

/// Everything a run depends on. Defaults describe the full-size network on
/// FashionMNIST.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub transforms: TransformsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
    pub precision: Precision,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.transforms.train.validate()
    }

    /// Dataset directory: the configured path, else `<data_root>/<name>`.
    pub fn dataset_dir(&self, data_root: &Path) -> PathBuf {
        self.dataset
            .path
            .clone()
            .unwrap_or_else(|| data_root.join(self.dataset.directory_name()))
    }

    pub fn digest(&self) -> [u8; 32] {
        self.model
            .digest(self.dataset.name.channels(), self.dataset.name.classes())
    }
}

/// Training samples and test suites of a run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Vec<Sample>,
    pub suites: Vec<Suite>,
}

/// Loads the splits from `dir`, takes the configured per-class subsets and
/// builds the test suites.
pub fn load_data(config: &RunConfig, dir: &Path) -> Result<RunData> {
    let name = config.dataset.name;
    let splits = load_splits(name, dir)?;
    let subset = |s: Vec<Sample>, n: Option<usize>| match n {
        Some(n) => subset_per_class(&s, n, name.classes()),
        None => s,
    };
    let train = subset(splits.train, config.dataset.train_per_class);
    let test = subset(splits.test, config.dataset.test_per_class);
    if let Some(s) = train.iter().chain(&test).find(|s| s.image.shape()[0] != name.channels()) {
        return Err(Error::invalid(format!(
            "{dir:?}: image shape {:?} does not fit {name:?}",
            s.image.shape()
        )));
    }
    Ok(RunData {
        suites: build_test_suites(&test, config.dataset.suite_seed),
        train,
    })
}

/// A trained (or freshly initialised) model with its history.
pub struct Outcome<T> {
    pub model: Model,
    pub params: ParamStore<T>,
    pub run: TrainRun<T>,
    /// Per-suite accuracy after the last epoch, in suite order.
    pub accuracies: Vec<f64>,
}

/// Builds the model from `config`, trains it and evaluates the suites. With
/// zero epochs the accuracies are those of the initialisation.
pub fn run<T: Real>(config: &RunConfig, data: &RunData) -> Result<Outcome<T>> {
    config.validate()?;
    let name = config.dataset.name;
    let (model, mut params) =
        Model::new::<T>(&config.model, name.channels(), name.classes(), config.train.seed)?;
    log::info!(
        "model: {} parameters, {} in the stem",
        params.count(),
        model.stem_parameters(&params)
    );
    let inputs = TrainData {
        train: &data.train,
        transform: config.transforms.train,
        augment: config.transforms.augment,
        suites: &data.suites,
    };
    let run = train(&model, &mut params, &inputs, &config.train)?;
    let accuracies = match run.history.last().and_then(|m| m.suites.clone()) {
        Some(a) => a,
        None => evaluate(&model, &params, &data.suites, config.train.eval_batch_size)?,
    };
    Ok(Outcome {
        model,
        params,
        run,
        accuracies,
    })
}

/// Suite accuracies keyed by suite label, e.g. `"(2,180)"`.
pub fn keyed(suites: &[Suite], accuracies: &[f64]) -> BTreeMap<String, f64> {
    suites.iter().map(Suite::label).zip(accuracies.iter().copied()).collect()
}

/// Machine-readable result of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: RunConfig,
    pub digest: String,
    pub parameters: usize,
    pub stem_parameters: usize,
    pub accuracies: BTreeMap<String, f64>,
    pub history: Vec<EpochMetrics>,
}

impl<T: Real> Outcome<T> {
    pub fn summary(&self, config: &RunConfig, suites: &[Suite]) -> Summary {
        Summary {
            config: config.clone(),
            digest: crate::train::checkpoint::hex(&config.digest()),
            parameters: self.params.count(),
            stem_parameters: self.model.stem_parameters(&self.params),
            accuracies: keyed(suites, &self.accuracies),
            history: self.run.history.clone(),
        }
    }
}
