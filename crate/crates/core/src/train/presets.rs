//! Named experiment setups. Desk-scale and full-scale variants are separate
//! presets so acceptance runs can pin the small ones.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{train, train_sequence, EvalCadence, LrSchedule, Model, SequenceOutcome, TrainConfig, TrainOutcome};
use crate::data::{
    load_cifar10_dir, load_mnist_dir, make_regression_tasks, resolve_data_dir, synthetic_cifar, DataSplits,
    RegressionTaskSeq, StandardizeMode,
};
use crate::error::{Error, Result};
use crate::hypergen::{ChunkPlan, HeadTopology, HypernetSpec};
use crate::init::{init_hypernet, InitScheme};
use crate::mainnet::{Activation, ConvGeometry, InputShape, LayerSpec, Loss, MainnetSpec, Pool};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 784-500×5-10 tanh MLP; hidden layers share one generator head.
    MnistMlp,
    /// As `MnistMlp`, with the hypernet also generating biases.
    MnistMlpBias,
    /// The same MLP trained directly, without a hypernet.
    MnistClassical,
    /// Three 1-D regression tasks; ReLU 1-10-10-1 mainnet, trainable embeddings.
    RegressionSeq,
    /// Four-layer all-convolutional net with chunked generation, sized for a laptop.
    CifarAllconv,
    /// Seven 3×3 convolutions (96/192 channels) with chunked generation.
    CifarAllconvFull,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::MnistMlp,
        Preset::MnistMlpBias,
        Preset::MnistClassical,
        Preset::RegressionSeq,
        Preset::CifarAllconv,
        Preset::CifarAllconvFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::MnistMlp => "mnist-mlp",
            Preset::MnistMlpBias => "mnist-mlp-bias",
            Preset::MnistClassical => "mnist-classical",
            Preset::RegressionSeq => "regression-seq",
            Preset::CifarAllconv => "cifar-allconv",
            Preset::CifarAllconvFull => "cifar-allconv-full",
        }
    }

    pub fn is_cifar(self) -> bool {
        matches!(self, Preset::CifarAllconv | Preset::CifarAllconvFull)
    }

    pub fn mainnet(self) -> MainnetSpec {
        match self {
            Preset::MnistMlp | Preset::MnistClassical => mnist_mlp(),
            Preset::MnistMlpBias => mnist_mlp().with_generated_biases(),
            Preset::RegressionSeq => {
                MainnetSpec::mlp(1, &[10, 10], 1, Activation::Relu, Loss::MeanSquaredError).with_generated_biases()
            }
            Preset::CifarAllconv => allconv(32, &[(3, 32, 1), (32, 32, 2), (32, 64, 1), (64, 64, 2)]),
            Preset::CifarAllconvFull => allconv(
                32,
                &[
                    (3, 96, 1),
                    (96, 96, 1),
                    (96, 96, 2),
                    (96, 192, 1),
                    (192, 192, 1),
                    (192, 192, 2),
                    (192, 192, 1),
                ],
            ),
        }
    }

    pub fn hypernet(self) -> Option<HypernetSpec> {
        match self {
            Preset::MnistMlp => Some(HypernetSpec::linear(50).with_topology(HeadTopology::SharedSameSize)),
            Preset::MnistMlpBias => Some(
                HypernetSpec::linear(50)
                    .with_topology(HeadTopology::SharedSameSize)
                    .with_bias(true),
            ),
            Preset::MnistClassical => None,
            Preset::RegressionSeq => Some(
                HypernetSpec::linear(2)
                    .with_hidden(&[10, 10], Activation::Relu)
                    .with_bias(true)
                    .with_shared_trunk(true)
                    .with_trainable_embeddings(true),
            ),
            Preset::CifarAllconv => Some(chunked(32)),
            Preset::CifarAllconvFull => Some(chunked(96)),
        }
    }

    /// Rate, batch, epochs and cadences for this preset.
    pub fn config(self, scheme: InitScheme, seed: u64) -> TrainConfig {
        let mut c = match self {
            Preset::MnistMlp | Preset::MnistMlpBias => TrainConfig::new(scheme, 5e-4, 10, 3, seed),
            Preset::MnistClassical => TrainConfig::new(scheme, 1e-2, 10, 3, seed),
            Preset::RegressionSeq => TrainConfig::new(scheme, 1e-3, 32, 1, seed),
            Preset::CifarAllconv => {
                let mut c = TrainConfig::new(scheme, 5e-4, 50, 2, seed);
                c.max_steps = Some(200);
                c.eval = EvalCadence::Iterations(200);
                c.probe_every = Some(100);
                c
            }
            Preset::CifarAllconvFull => {
                let mut c = TrainConfig::new(scheme, 5e-4, 100, 500, seed);
                c.schedule = Some(LrSchedule {
                    milestones: vec![350, 450],
                    gamma: 0.1,
                });
                c
            }
        };
        if self == Preset::RegressionSeq {
            c.probe_every = None;
            c.eval = EvalCadence::Iterations(100);
        }
        c
    }

    /// Training iterations per task for the sequence preset.
    pub fn iterations_per_task(self) -> Option<usize> {
        (self == Preset::RegressionSeq).then_some(2000)
    }

    /// Default number of training examples (`None`: everything available).
    pub fn default_subset(self) -> Option<usize> {
        match self {
            Preset::CifarAllconv => Some(5000),
            _ => None,
        }
    }

    /// The initialized model.
    pub fn model(self, scheme: &InitScheme, seed: u64) -> Result<Model> {
        let mspec = self.mainnet();
        let mut rng = Rng::new(seed);
        match self.hypernet() {
            Some(hspec) => Ok(Model::Hyper(init_hypernet(&hspec, &mspec, scheme, &mut rng)?)),
            None => Model::classical(&mspec, scheme, &mut rng),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown preset {s:?}")))
    }
}

fn mnist_mlp() -> MainnetSpec {
    MainnetSpec::mlp(784, &[500; 5], 10, Activation::Tanh, Loss::SoftmaxCrossEntropy)
}

/// 3×3 ReLU convolutions `(c_in, c_out, stride)`, global pooling and a dense classifier.
fn allconv(size: usize, convs: &[(usize, usize, usize)]) -> MainnetSpec {
    let mut layers: Vec<LayerSpec> = convs
        .iter()
        .map(|&(ci, co, s)| LayerSpec::conv(ci, co, ConvGeometry::square(3, s, 1), Activation::Relu))
        .collect();
    let last = layers.last_mut().expect("at least one convolution");
    *last = last.clone().with_pool(Pool::GlobalAverage);
    let c = convs.last().expect("at least one convolution").1;
    layers.push(LayerSpec::dense(c, 10, Activation::Identity));
    MainnetSpec {
        input: InputShape::Image {
            channels: 3,
            height: size,
            width: size,
        },
        layers,
        loss: Loss::SoftmaxCrossEntropy,
    }
}

fn chunked(k: usize) -> HypernetSpec {
    HypernetSpec::linear(50)
        .with_hidden(&[50], Activation::Identity)
        .with_topology(HeadTopology::Chunked(ChunkPlan { k, n: 3 }))
}

/// Where CIFAR-shaped data comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CifarSource {
    /// The CIFAR-10 binary batches under the data directory.
    #[default]
    Files,
    /// The procedural stand-in from [`synthetic_cifar`].
    Synthetic,
}

#[derive(Clone, Debug)]
pub enum PresetData {
    Splits(DataSplits),
    Tasks(RegressionTaskSeq),
}

fn first_dir(root: &Path, names: &[&str]) -> PathBuf {
    names
        .iter()
        .map(|n| root.join(n))
        .find(|p| p.is_dir())
        .unwrap_or_else(|| root.to_path_buf())
}

/// Loads and standardizes the data for `preset`. `subset` keeps the first
/// N training examples; the test split is kept whole.
pub fn load_data(preset: Preset, data_dir: Option<&Path>, subset: Option<usize>, source: CifarSource, seed: u64) -> Result<PresetData> {
    let root = resolve_data_dir(data_dir);
    let subset = subset.or(preset.default_subset());
    let (splits, mode) = match preset {
        Preset::RegressionSeq => return Ok(PresetData::Tasks(make_regression_tasks(seed))),
        Preset::MnistMlp | Preset::MnistMlpBias | Preset::MnistClassical => (
            load_mnist_dir(&first_dir(&root, &["mnist", "mnist-10k"]))?,
            StandardizeMode::Global,
        ),
        Preset::CifarAllconv | Preset::CifarAllconvFull => {
            let s = match source {
                CifarSource::Files => load_cifar10_dir(&first_dir(&root, &["cifar-10-batches-bin", "cifar10", "cifar-10"]))?,
                CifarSource::Synthetic => synthetic_cifar(subset.unwrap_or(50_000), 1000, 32, seed)?,
            };
            (s, StandardizeMode::PerFeature)
        }
    };
    let splits = match subset {
        Some(n) => DataSplits {
            train: splits.train.subset(n),
            test: splits.test,
        },
        None => splits,
    };
    Ok(PresetData::Splits(splits.standardized(mode)?))
}

#[derive(Clone, Debug)]
pub enum RunOutcome {
    Single(TrainOutcome),
    Sequence(SequenceOutcome),
}

impl RunOutcome {
    pub fn diverged(&self) -> bool {
        match self {
            RunOutcome::Single(o) => o.diverged(),
            RunOutcome::Sequence(s) => s.diverged(),
        }
    }
}

/// Builds the model for `preset` and trains it on `data`.
pub fn run(preset: Preset, cfg: &TrainConfig, data: &PresetData) -> Result<RunOutcome> {
    let model = preset.model(&cfg.scheme, cfg.seed)?;
    match (data, preset.iterations_per_task()) {
        (PresetData::Splits(s), None) => Ok(RunOutcome::Single(train(model, s, cfg)?)),
        (PresetData::Tasks(t), Some(iters)) => Ok(RunOutcome::Sequence(train_sequence(model, t, cfg, cfg.max_steps.unwrap_or(iters))?)),
        _ => Err(Error::spec(format!("data does not fit preset {preset}"))),
    }
}
