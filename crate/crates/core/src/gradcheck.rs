//! Central finite-difference checks of the hand-written gradients.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hypergen::{ChunkPlan, HeadTopology, Hypernet, HypernetSpec};
use crate::init::{init_hypernet, InitScheme, SchemeKind};
use crate::mainnet::{
    self, Activation, ConvGeometry, InputShape, LayerSpec, Loss, MainnetParams, MainnetSpec, Pool, Targets,
};
use crate::rng::{sample, Distribution, Rng};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Coordinates to probe in a tensor of `len` entries: all of them when
/// `limit` allows, otherwise an evenly spread subset.
fn coords(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        (0..limit).map(|i| i * len / limit).collect()
    }
}

fn slot(q: &mut MainnetParams, t: usize, which: usize, i: usize) -> &mut f64 {
    if which == 0 {
        &mut q.layers[t].weight.data_mut()[i]
    } else {
        &mut q.layers[t].bias.data_mut()[i]
    }
}

/// Checks mainnet weight and bias gradients for `spec` at `params`.
pub fn check_mainnet(
    name: &str,
    spec: &MainnetSpec,
    params: &MainnetParams,
    batch: &Tensor,
    targets: &Targets,
    limit: usize,
) -> Result<GradCheckReport> {
    let out = mainnet::forward(spec, params, batch, targets)?;
    let grads = mainnet::backward(spec, params, &out.trace, targets)?;
    let mut p = params.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for t in 0..spec.layers.len() {
        for which in 0..2 {
            let len = if which == 0 { p.layers[t].weight.len() } else { p.layers[t].bias.len() };
            for i in coords(len, limit) {
                let analytic = if which == 0 { grads.weights[t].data()[i] } else { grads.biases[t].data()[i] };
                let mut eval = |delta: f64| -> Result<f64> {
                    let orig = *slot(&mut p, t, which, i);
                    *slot(&mut p, t, which, i) = orig + delta;
                    let l = mainnet::forward(spec, &p, batch, targets)?.loss;
                    *slot(&mut p, t, which, i) = orig;
                    Ok(l)
                };
                let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
                worst = worst.max(relative_error(analytic, numeric));
                checked += 1;
            }
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked,
        max_relative_error: worst,
    })
}

fn pipeline_loss(hn: &Hypernet, batch: &Tensor, targets: &Targets) -> Result<f64> {
    let (params, _) = hn.generate()?;
    Ok(mainnet::forward(&hn.mainnet, &params, batch, targets)?.loss)
}

/// Checks every hypernet parameter and embedding gradient through the
/// full hypernet, mainnet and loss pipeline.
pub fn check_pipeline(name: &str, hn: &Hypernet, batch: &Tensor, targets: &Targets, limit: usize) -> Result<GradCheckReport> {
    let (params, gtrace) = hn.generate()?;
    let out = mainnet::forward(&hn.mainnet, &params, batch, targets)?;
    let mg = mainnet::backward(&hn.mainnet, &params, &out.trace, targets)?;
    let hg = hn.backward_generate(&gtrace, &mg.weights, &mg.biases)?;
    let analytic: Vec<Tensor> = hg.tensors(true).into_iter().cloned().collect();
    let mut h = hn.clone();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (ti, grad) in analytic.iter().enumerate() {
        for i in coords(grad.len(), limit) {
            let mut eval = |delta: f64| -> Result<f64> {
                let orig = h.params_mut_with(true)[ti].data()[i];
                h.params_mut_with(true)[ti].data_mut()[i] = orig + delta;
                let l = pipeline_loss(&h, batch, targets);
                h.params_mut_with(true)[ti].data_mut()[i] = orig;
                l
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked,
        max_relative_error: worst,
    })
}

fn normal(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    sample(&Distribution::normal(1.0)?, shape, rng)
}

fn class_targets(n: usize, classes: usize, rng: &mut Rng) -> Targets {
    Targets::Classes((0..n).map(|_| rng.below(classes)).collect())
}

/// Reduced versions of every architecture the experiments use.
pub fn standard_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::new(seed);
    let limit = 40;
    let mut reports = Vec::new();
    let batch = 4;

    // Plain tanh MLP.
    let mlp = MainnetSpec::mlp(6, &[8, 8], 3, Activation::Tanh, Loss::SoftmaxCrossEntropy);
    let mut params = MainnetParams::zeros(&mlp)?;
    for p in &mut params.layers {
        let fan_in = p.weight.shape()[1] as f64;
        p.weight = sample(&Distribution::uniform(1.0 / fan_in)?, p.weight.shape(), &mut rng)?;
        p.bias = sample(&Distribution::uniform(0.1)?, p.bias.shape(), &mut rng)?;
    }
    let x = normal(&[batch, 6], &mut rng)?;
    let y = class_targets(batch, 3, &mut rng);
    reports.push(check_mainnet("mainnet tanh mlp", &mlp, &params, &x, &y, limit)?);

    // Plain conv net with global pooling.
    let conv = small_convnet();
    let mut cparams = MainnetParams::zeros(&conv)?;
    for (p, l) in cparams.layers.iter_mut().zip(&conv.layers) {
        p.weight = sample(&Distribution::uniform(2.0 / l.fan_in() as f64)?, p.weight.shape(), &mut rng)?;
        p.bias = sample(&Distribution::uniform(0.05)?, p.bias.shape(), &mut rng)?;
    }
    let xc = normal(&[batch, 2, 6, 6], &mut rng)?;
    let yc = class_targets(batch, 3, &mut rng);
    reports.push(check_mainnet("mainnet conv", &conv, &cparams, &xc, &yc, limit)?);

    // Per-layer heads with a ReLU trunk and generated biases.
    let mspec = MainnetSpec::mlp(6, &[8, 8], 3, Activation::Tanh, Loss::SoftmaxCrossEntropy).with_generated_biases();
    let hspec = HypernetSpec::linear(4).with_hidden(&[5], Activation::Relu).with_bias(true);
    let hn = init_hypernet(&hspec, &mspec, &InitScheme::new(SchemeKind::HyperfanIn), &mut rng)?;
    reports.push(check_pipeline("hypernet per-layer heads", &hn, &x, &y, limit)?);

    // Shared same-size heads, linear hypernet, trainable embeddings.
    let mspec = MainnetSpec::mlp(6, &[8, 8, 8], 3, Activation::Tanh, Loss::SoftmaxCrossEntropy);
    let hspec = HypernetSpec::linear(5)
        .with_topology(HeadTopology::SharedSameSize)
        .with_trainable_embeddings(true);
    let hn = init_hypernet(&hspec, &mspec, &InitScheme::new(SchemeKind::HyperfanOut), &mut rng)?;
    reports.push(check_pipeline("hypernet shared heads", &hn, &x, &y, limit)?);

    // Regression-style: ReLU mainnet, shared trunk, MSE.
    let mspec = MainnetSpec::mlp(1, &[10, 10], 1, Activation::Relu, Loss::MeanSquaredError).with_generated_biases();
    let hspec = HypernetSpec::linear(2)
        .with_hidden(&[10, 10], Activation::Relu)
        .with_bias(true)
        .with_shared_trunk(true)
        .with_trainable_embeddings(true);
    let scheme = InitScheme::new(SchemeKind::HyperfanIn).with_relu(true);
    let hn = init_hypernet(&hspec, &mspec, &scheme, &mut rng)?;
    let xr = normal(&[batch, 1], &mut rng)?;
    let yr = Targets::Values(normal(&[batch, 1], &mut rng)?);
    reports.push(check_pipeline("hypernet regression", &hn, &xr, &yr, limit)?);

    // Chunked conv generation.
    let hspec = HypernetSpec::linear(4)
        .with_hidden(&[5], Activation::Identity)
        .with_topology(HeadTopology::Chunked(ChunkPlan { k: 2, n: 3 }));
    let scheme = InitScheme::new(SchemeKind::HyperfanIn).with_relu(true);
    let hn = init_hypernet(&hspec, &conv, &scheme, &mut rng)?;
    reports.push(check_pipeline("hypernet chunked conv", &hn, &xc, &yc, limit)?);

    Ok(reports)
}

/// Two ReLU convolutions, global average pooling and a dense classifier.
pub fn small_convnet() -> MainnetSpec {
    MainnetSpec {
        input: InputShape::Image {
            channels: 2,
            height: 6,
            width: 6,
        },
        layers: vec![
            LayerSpec::conv(2, 4, ConvGeometry::square(3, 1, 1), Activation::Relu),
            LayerSpec::conv(4, 4, ConvGeometry::square(3, 2, 1), Activation::Relu).with_pool(Pool::GlobalAverage),
            LayerSpec::dense(4, 3, Activation::Identity),
        ],
        loss: Loss::SoftmaxCrossEntropy,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-7) - 1e-2).abs() < 1e-12);
    }

    #[test]
    fn coords_spread() {
        assert_eq!(coords(3, 10), vec![0, 1, 2]);
        assert_eq!(coords(100, 4), vec![0, 25, 50, 75]);
    }
}
