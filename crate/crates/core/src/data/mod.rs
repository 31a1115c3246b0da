//! Datasets: MNIST (IDX), CIFAR-10 (binary), synthetic stand-ins and
//! regression task sequences, plus standardization.

mod cifar;
mod idx;
mod regression;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mainnet::Targets;
use crate::tensor::Tensor;

pub use cifar::{load_cifar10_binary, load_cifar10_dir, synthetic_cifar, CIFAR_RECORD};
pub use idx::{load_idx, load_mnist_dir, read_idx, IdxArray, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use regression::{make_regression_tasks, make_regression_tasks_with, RegressionFunction, RegressionTask, RegressionTaskSeq, TaskConfig};

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "HYPERINIT_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StandardizeMode {
    #[default]
    Global,
    PerFeature,
}

/// Statistics fitted on a training split and reused on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mode: StandardizeMode,
    /// One entry in global mode, one per feature otherwise.
    pub mean: Vec<f64>,
    /// Population standard deviation; zero entries leave data centered only.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset, mode: StandardizeMode) -> Result<Self> {
        let n = ds.len();
        if n == 0 {
            return Err(Error::invalid("cannot standardize an empty dataset"));
        }
        let f = ds.feature_len();
        let x = ds.inputs.data();
        let (mean, std) = match mode {
            StandardizeMode::Global => {
                let m = x.iter().sum::<f64>() / x.len() as f64;
                let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
                (vec![m], vec![v.sqrt()])
            }
            StandardizeMode::PerFeature => {
                let mut mean = vec![0.0; f];
                for row in x.chunks_exact(f) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; f];
                for row in x.chunks_exact(f) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                (mean, var.into_iter().map(|s| (s / n as f64).sqrt()).collect())
            }
        };
        Ok(Standardizer { mode, mean, std })
    }

    /// Applies the fitted statistics to `ds`, which may be a different split.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let f = ds.feature_len();
        if self.mode == StandardizeMode::PerFeature && self.mean.len() != f {
            return Err(Error::shape(format!("standardizer has {} features, dataset {f}", self.mean.len())));
        }
        let scale = |s: f64| if s > 0.0 { 1.0 / s } else { 1.0 };
        let mut out = ds.clone();
        let x = out.inputs.data_mut();
        match self.mode {
            StandardizeMode::Global => {
                let (m, k) = (self.mean[0], scale(self.std[0]));
                x.iter_mut().for_each(|v| *v = (*v - m) * k);
            }
            StandardizeMode::PerFeature => {
                let k: Vec<f64> = self.std.iter().map(|&s| scale(s)).collect();
                for row in x.chunks_exact_mut(f) {
                    for ((v, m), k) in row.iter_mut().zip(&self.mean).zip(&k) {
                        *v = (*v - m) * k;
                    }
                }
            }
        }
        out.standardizer = Some(self.clone());
        Ok(out)
    }
}

/// Fits on `ds` and applies. Use [`Standardizer::apply`] for test splits.
pub fn standardize(ds: &Dataset, mode: StandardizeMode) -> Result<Dataset> {
    Standardizer::fit(ds, mode)?.apply(ds)
}

/// Inputs with a leading sample axis and matching labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Targets,
    pub split: Split,
    pub standardizer: Option<Standardizer>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Targets, split: Split) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(Error::shape("dataset inputs need a sample axis and at least one feature axis"));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::shape(format!(
                "{} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Targets::Values(t) = &labels {
            if t.rank() != 2 {
                return Err(Error::shape("regression targets must be (N, d)"));
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            split,
            standardizer: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn feature_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Number of classes (largest label + 1), or `None` for regression.
    pub fn num_classes(&self) -> Option<usize> {
        match &self.labels {
            Targets::Classes(c) => Some(c.iter().max().map_or(0, |m| m + 1)),
            Targets::Values(_) => None,
        }
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn subset(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (inputs, labels) = self.batch(&idx).expect("indices in range");
        Dataset {
            inputs,
            labels,
            split: self.split,
            standardizer: self.standardizer.clone(),
        }
    }

    /// Gathers the samples at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Targets)> {
        let f = self.feature_len();
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(&self.inputs.data()[i * f..(i + 1) * f]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let labels = match &self.labels {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Values(t) => {
                let d = t.shape()[1];
                let mut v = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    v.extend_from_slice(t.row(i));
                }
                Targets::Values(Tensor::new(vec![indices.len(), d], v)?)
            }
        };
        Ok((Tensor::new(shape, data)?, labels))
    }
}

/// Train and test splits of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSplits {
    /// Standardizes both splits with statistics from the training split.
    pub fn standardized(&self, mode: StandardizeMode) -> Result<DataSplits> {
        let s = Standardizer::fit(&self.train, mode)?;
        Ok(DataSplits {
            train: s.apply(&self.train)?,
            test: s.apply(&self.test)?,
        })
    }
}

/// The dataset root: `explicit` if given, else `$HYPERINIT_DATA_DIR`, else `./data`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("data"),
    }
}

/// The MNIST sample shipped with the repository.
pub fn bundled_mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k")
}
