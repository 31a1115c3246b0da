//! Init-time measurements shared by the command line and the test suites.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergen::{HeadTopology, Hypernet, HypernetSpec, Slot};
use crate::init::{gradient_shrink_factor, init_hypernet_with, EmbeddingVariance, InitScheme};
use crate::mainnet::{self, Activation, InputShape, LayerSpec, Loss, MainnetSpec};
use crate::probe::{self, Comparison, Prediction, SnapshotInput, VarianceReport, DEFAULT_BAND};
use crate::rng::{sample, Distribution, Rng};
use crate::stats::mean_square;
use crate::tensor::Tensor;

/// A deep square network generated by a linear hypernet with one head per
/// layer, probed at initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceCheck {
    pub scheme: InitScheme,
    pub depth: usize,
    pub width: usize,
    pub hyper_width: usize,
    pub batch: usize,
    pub seed: u64,
    pub activation: Activation,
    pub generate_bias: bool,
    pub band: (f64, f64),
    /// Single-example backward passes used to measure gradient shrinkage
    /// into the hypernet; 0 skips the measurement.
    pub shrink_samples: usize,
}

impl VarianceCheck {
    pub fn new(scheme: InitScheme) -> Self {
        VarianceCheck {
            scheme,
            depth: 5,
            width: 500,
            hyper_width: 50,
            batch: 300,
            seed: 42,
            activation: Activation::Identity,
            generate_bias: false,
            band: DEFAULT_BAND,
            shrink_samples: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.hyper_width == 0 || self.batch < 2 {
            return Err(Error::invalid("depth, widths must be positive and batch at least 2"));
        }
        if !(self.band.0 > 0.0 && self.band.0 <= self.band.1) {
            return Err(Error::invalid(format!("bad tolerance band {:?}", self.band)));
        }
        Ok(())
    }

    /// Every layer `width → width` with the same activation.
    pub fn mainnet(&self) -> MainnetSpec {
        let mut layers = vec![LayerSpec::dense(self.width, self.width, self.activation); self.depth];
        if self.generate_bias {
            for l in &mut layers {
                *l = l.clone().with_bias(mainnet::BiasSource::Generated);
            }
        }
        MainnetSpec {
            input: InputShape::Flat(self.width),
            layers,
            loss: Loss::MeanSquaredError,
        }
    }

    pub fn hypernet(&self) -> HypernetSpec {
        HypernetSpec::linear(self.hyper_width)
            .with_topology(HeadTopology::PerLayerHeads)
            .with_bias(self.generate_bias)
    }

    /// Initializes with head variances computed from the measured embedding
    /// second moments, runs a standard-normal batch forward and a
    /// standard-normal output gradient backward.
    pub fn run(&self) -> Result<VarianceCheckResult> {
        self.validate()?;
        let mspec = self.mainnet();
        let hspec = self.hypernet();
        let mut rng = Rng::new(self.seed);
        let hn = init_hypernet_with(&hspec, &mspec, &self.scheme, EmbeddingVariance::Empirical, &mut rng)?;
        let mut data_rng = Rng::with_stream(self.seed, 2);
        let unit = Distribution::normal(1.0)?;
        let x = sample(&unit, &[self.batch, self.width], &mut data_rng)?;
        let dy = sample(&unit, &[self.batch, self.width], &mut data_rng)?;

        let (params, gen) = hn.generate()?;
        let trace = mainnet::propagate(&mspec, &params, &x)?;
        let grads = mainnet::backward_from(&mspec, &params, &trace, &dy)?;
        let hg = hn.backward_generate(&gen, &grads.weights, &grads.biases)?;
        let mut report = probe::snapshot(
            &SnapshotInput {
                trace: &trace,
                params: Some(&params),
                grads: Some(&grads),
                hypernet: Some(&hn),
                generation: Some(&gen),
                hyper_grads: Some(&hg),
            },
            0,
        )?;
        let prediction = probe::predict(&self.scheme, &mspec, &hspec, mean_square(x.data()))?;
        probe::attach(&mut report, &prediction, &mspec)?;

        let forward_gains = probe::forward_gains(&report)?;
        let backward_gains = probe::backward_gains(&report)?;
        let pre_ratios = probe::pre_activation_ratios(&report)?;
        let forward = probe::compare(&forward_gains, &vec![1.0; forward_gains.len()], self.band)?;
        let backward = probe::compare(&backward_gains, &vec![1.0; backward_gains.len()], self.band)?;
        let shrink = if self.shrink_samples > 0 {
            gradient_shrink(&hn, &x, self.shrink_samples, self.seed)?
        } else {
            Vec::new()
        };
        let backward_scheme = self.scheme.kind.is_backward();
        let passed = if backward_scheme { backward.all_pass() } else { forward.all_pass() };
        Ok(VarianceCheckResult {
            config: self.clone(),
            report,
            prediction,
            forward_gains,
            backward_gains,
            pre_ratios,
            forward,
            backward,
            shrink,
            gated_on: if backward_scheme { "backward" } else { "forward" }.to_string(),
            passed,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarianceCheckResult {
    pub config: VarianceCheck,
    pub report: VarianceReport,
    pub prediction: Prediction,
    /// `E[out²] / E[in²]` per layer.
    pub forward_gains: Vec<f64>,
    /// `Var(∂L/∂x[t]) / Var(∂L/∂x[t+1])`.
    pub backward_gains: Vec<f64>,
    /// `Var(y[t]) / Var(y[t-1])` of pre-activations.
    pub pre_ratios: Vec<f64>,
    /// Forward gains against the unit gain the hyperfan-in target gives.
    pub forward: Comparison,
    /// Backward gains against the unit gain the hyperfan-out target gives.
    pub backward: Comparison,
    pub shrink: Vec<ShrinkPoint>,
    /// Which comparison decides `passed`: backward-oriented schemes are
    /// judged on gradients.
    pub gated_on: String,
    pub passed: bool,
}

impl VarianceCheckResult {
    /// Product of the pre-activation ratios: `Var(y[T]) / Var(x)`.
    pub fn cumulative_blowup(&self) -> f64 {
        self.pre_ratios.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkPoint {
    pub layer: usize,
    /// Mean over samples of `E[(∂L/∂h)²] / E[(∂L/∂W)²]`.
    pub measured: f64,
    /// `P · Var(H)` for the head as drawn.
    pub predicted: f64,
    /// Second moment of the features the head reads for this layer.
    pub var_e: f64,
    /// `d_j / (d_k · var_e)`, the hyperfan-out value for a linear layer.
    pub closed_form: f64,
}

/// Measures how much gradients shrink or grow between a layer's generated
/// weights and its embedding's features, one example at a time so that
/// each ratio is averaged over `samples` independent backward passes.
pub fn gradient_shrink(hn: &Hypernet, x: &Tensor, samples: usize, seed: u64) -> Result<Vec<ShrinkPoint>> {
    let mspec = &hn.mainnet;
    let n = x.shape()[0];
    if samples == 0 || samples > n {
        return Err(Error::invalid(format!("need between 1 and {n} samples, got {samples}")));
    }
    let (params, gen) = hn.generate()?;
    let mut rng = Rng::with_stream(seed, 3);
    let unit = Distribution::normal(1.0)?;
    let layers = mspec.layers.len();
    let mut sums = vec![0.0; layers];
    for s in 0..samples {
        let xi = Tensor::new(vec![1, x.shape()[1]], x.row(s).to_vec())?;
        let trace = mainnet::propagate(mspec, &params, &xi)?;
        let dy = sample(&unit, trace.output.shape(), &mut rng)?;
        let g = mainnet::backward_from(mspec, &params, &trace, &dy)?;
        let hg = hn.backward_generate(&gen, &g.weights, &g.biases)?;
        for (i, em) in hn.emissions.iter().enumerate() {
            if let Slot::Weight { layer } = em.slot {
                let row = hn
                    .head_emissions(em.head)
                    .iter()
                    .position(|&j| j == i)
                    .expect("emission is served by its head");
                let dh = hg.head_inputs[em.head].row(row);
                sums[layer] += mean_square(dh) / mean_square(g.weights[layer].data());
            }
        }
    }
    Ok((0..layers)
        .filter_map(|t| {
            let h = hn.weight_head(t)?;
            let p = hn.heads[h].outputs() as f64;
            let var_h = mean_square(hn.heads[h].weight.data());
            let i = hn.emissions.iter().position(|e| e.slot == Slot::Weight { layer: t })?;
            let row = hn.head_emissions(h).iter().position(|&j| j == i)?;
            let var_e = mean_square(gen.head_inputs[h].row(row));
            let d_k = hn.heads[h].features();
            Some(ShrinkPoint {
                layer: t,
                measured: sums[t] / samples as f64,
                predicted: p * var_h,
                var_e,
                closed_form: gradient_shrink_factor(&mspec.layers[t].fan_geometry(d_k, d_k, var_e, var_e)),
            })
        })
        .collect())
}
