//! Mainnet forward and backward passes: MLPs and all-convolutional nets.
//!
//! Dense weights are stored `(d_out, d_in)` and applied as `y = x Wᵀ + b`;
//! convolution weights are `(c_out, c_in, kh, kw)` over NCHW batches.
//! Losses are averaged over the batch.

mod conv;

use serde::{Deserialize, Serialize};

pub use conv::ConvGeometry;
use conv::ConvShape;

use crate::error::{Error, Result};
use crate::init::FanGeometry;
use crate::tensor::{gemm, MatRef, Tensor};

/// Magnitude above which an activation counts as overflowed.
pub const OVERFLOW_THRESHOLD: f64 = 1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => y.tanh(),
            Activation::Relu => y.max(0.0),
            Activation::Identity => y,
        }
    }

    /// Derivative expressed through the pre-activation `y` and output `x`.
    pub(crate) fn derivative(self, y: f64, x: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - x * x,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasSource {
    /// The bias is held at zero.
    Zero,
    /// The bias is produced by the hypernet.
    Generated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    Conv2d(ConvGeometry),
}

/// Pooling applied after the activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pool {
    None,
    GlobalAverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Input width, or input channels for a convolution.
    pub d_in: usize,
    /// Output width, or output channels.
    pub d_out: usize,
    pub activation: Activation,
    pub bias_source: BiasSource,
    pub pool: Pool,
}

impl LayerSpec {
    pub fn dense(d_in: usize, d_out: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            d_in,
            d_out,
            activation,
            bias_source: BiasSource::Zero,
            pool: Pool::None,
        }
    }

    pub fn conv(c_in: usize, c_out: usize, geometry: ConvGeometry, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d(geometry),
            d_in: c_in,
            d_out: c_out,
            activation,
            bias_source: BiasSource::Zero,
            pool: Pool::None,
        }
    }

    pub fn with_bias(mut self, source: BiasSource) -> Self {
        self.bias_source = source;
        self
    }

    pub fn with_pool(mut self, pool: Pool) -> Self {
        self.pool = pool;
        self
    }

    pub fn receptive_field(&self) -> usize {
        match self.kind {
            LayerKind::Dense => 1,
            LayerKind::Conv2d(g) => g.receptive_field(),
        }
    }

    /// Inputs feeding one output unit: `d_in · r`.
    pub fn fan_in(&self) -> usize {
        self.d_in * self.receptive_field()
    }

    pub fn fan_out(&self) -> usize {
        self.d_out * self.receptive_field()
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Dense => vec![self.d_out, self.d_in],
            LayerKind::Conv2d(g) => vec![self.d_out, self.d_in, g.kernel_h, g.kernel_w],
        }
    }

    pub fn weight_len(&self) -> usize {
        self.d_out * self.fan_in()
    }

    /// The head geometry for this layer, given the hypernet widths and
    /// embedding variances feeding its weight and bias heads.
    pub fn fan_geometry(&self, d_k: usize, d_l: usize, var_e1: f64, var_e2: f64) -> FanGeometry {
        FanGeometry {
            d_i: self.d_out,
            d_j: self.d_in,
            d_k,
            d_l,
            var_e1,
            var_e2,
            receptive_field: self.receptive_field(),
        }
    }
}

/// Shape of one example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputShape {
    Flat(usize),
    Image { channels: usize, height: usize, width: usize },
}

impl InputShape {
    pub fn len(&self) -> usize {
        match *self {
            InputShape::Flat(d) => d,
            InputShape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dims(&self) -> Vec<usize> {
        match *self {
            InputShape::Flat(d) => vec![d],
            InputShape::Image { channels, height, width } => vec![channels, height, width],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MainnetSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub loss: Loss,
}

/// Layer-by-layer shapes resolved from a [`MainnetSpec`].
#[derive(Clone, Debug)]
struct Plan {
    inputs: Vec<InputShape>,
    outputs: Vec<InputShape>,
    convs: Vec<Option<ConvShape>>,
}

impl MainnetSpec {
    /// A multilayer perceptron with `hidden` widths and a linear
    /// `d_out`-wide output layer.
    pub fn mlp(d_in: usize, hidden: &[usize], d_out: usize, activation: Activation, loss: Loss) -> Self {
        let mut widths = vec![d_in];
        widths.extend_from_slice(hidden);
        widths.push(d_out);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(t, w)| {
                let act = if t == last { Activation::Identity } else { activation };
                LayerSpec::dense(w[0], w[1], act)
            })
            .collect();
        MainnetSpec {
            input: InputShape::Flat(d_in),
            layers,
            loss,
        }
    }

    /// Same spec with every layer's bias generated.
    pub fn with_generated_biases(mut self) -> Self {
        for l in &mut self.layers {
            l.bias_source = BiasSource::Generated;
        }
        self
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    fn plan(&self) -> Result<Plan> {
        if self.layers.is_empty() {
            return Err(Error::spec("mainnet has no layers"));
        }
        if self.input.is_empty() {
            return Err(Error::spec("input shape must be nonempty"));
        }
        let mut cur = self.input;
        let mut plan = Plan {
            inputs: Vec::new(),
            outputs: Vec::new(),
            convs: Vec::new(),
        };
        for (t, l) in self.layers.iter().enumerate() {
            if l.d_in == 0 || l.d_out == 0 {
                return Err(Error::spec(format!("layer {t}: widths must be positive")));
            }
            plan.inputs.push(cur);
            let (out, conv) = match l.kind {
                LayerKind::Dense => {
                    if cur.len() != l.d_in {
                        return Err(Error::spec(format!(
                            "layer {t}: dense input width {} does not match incoming {}",
                            l.d_in,
                            cur.len()
                        )));
                    }
                    if l.pool != Pool::None {
                        return Err(Error::spec(format!("layer {t}: pooling needs a convolution")));
                    }
                    (InputShape::Flat(l.d_out), None)
                }
                LayerKind::Conv2d(g) => {
                    let InputShape::Image { channels, height, width } = cur else {
                        return Err(Error::spec(format!("layer {t}: convolution needs image input")));
                    };
                    if channels != l.d_in {
                        return Err(Error::spec(format!(
                            "layer {t}: expects {} channels, incoming {channels}",
                            l.d_in
                        )));
                    }
                    let (oh, ow) = g.output_size(height, width).ok_or_else(|| {
                        Error::spec(format!(
                            "layer {t}: kernel {}x{} stride {} larger than padded input {height}x{width}",
                            g.kernel_h, g.kernel_w, g.stride
                        ))
                    })?;
                    let shape = ConvShape {
                        c_in: channels,
                        c_out: l.d_out,
                        h: height,
                        w: width,
                        oh,
                        ow,
                        geo: g,
                    };
                    let out = InputShape::Image {
                        channels: l.d_out,
                        height: oh,
                        width: ow,
                    };
                    (out, Some(shape))
                }
            };
            plan.outputs.push(out);
            plan.convs.push(conv);
            cur = match l.pool {
                Pool::None => out,
                Pool::GlobalAverage => InputShape::Flat(l.d_out),
            };
        }
        if let InputShape::Image { .. } = cur {
            return Err(Error::spec("network output must be flat; add a global pool"));
        }
        Ok(plan)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MainnetParams {
    pub layers: Vec<LayerParams>,
}

impl MainnetParams {
    pub fn zeros(spec: &MainnetSpec) -> Result<Self> {
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                Ok(LayerParams {
                    weight: Tensor::zeros(&l.weight_shape())?,
                    bias: Tensor::zeros(&[l.d_out])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MainnetParams { layers })
    }

    fn check(&self, spec: &MainnetSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::spec(format!(
                "{} parameter sets for {} layers",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (t, (p, l)) in self.layers.iter().zip(&spec.layers).enumerate() {
            if p.weight.shape() != l.weight_shape().as_slice() || p.bias.shape() != [l.d_out] {
                return Err(Error::spec(format!(
                    "layer {t}: parameter shapes {:?}/{:?} do not match spec {:?}/[{}]",
                    p.weight.shape(),
                    p.bias.shape(),
                    l.weight_shape(),
                    l.d_out
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.all_finite() && l.bias.all_finite())
    }
}

/// Supervision for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// `N × d_out` regression targets.
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything the backward pass and the probes need from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `inputs[t]` feeds layer `t`.
    pub inputs: Vec<Tensor>,
    /// Pre-activations `y`.
    pub pre: Vec<Tensor>,
    /// Post-activations, before any pooling.
    pub post: Vec<Tensor>,
    /// Network output (the last layer's post-activation).
    pub output: Tensor,
    /// First layer whose pre-activation overflowed.
    pub overflow: Option<usize>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.output.shape()[0]
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub trace: ForwardTrace,
    /// Mean loss over the batch.
    pub loss: f64,
}

impl ForwardOutput {
    /// True when an activation or the loss overflowed.
    pub fn overflowed(&self) -> bool {
        self.trace.overflow.is_some() || !self.loss.is_finite() || self.loss.abs() > OVERFLOW_THRESHOLD
    }
}

#[derive(Clone, Debug)]
pub struct MainnetGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    /// `∂L/∂inputs[t]`.
    pub inputs: Vec<Tensor>,
    /// `∂L/∂pre[t]`.
    pub pre: Vec<Tensor>,
}

fn batch_len(batch: &Tensor, spec: &MainnetSpec) -> Result<usize> {
    let n = batch.shape()[0];
    let per: usize = batch.shape()[1..].iter().product();
    if batch.rank() < 2 || per != spec.input.len() {
        return Err(Error::shape(format!(
            "batch shape {:?} does not match input {:?}",
            batch.shape(),
            spec.input
        )));
    }
    Ok(n)
}

fn with_batch(n: usize, shape: &InputShape) -> Vec<usize> {
    let mut s = vec![n];
    s.extend(shape.dims());
    s
}

/// Propagates a batch through the network without evaluating a loss.
pub fn propagate(spec: &MainnetSpec, params: &MainnetParams, batch: &Tensor) -> Result<ForwardTrace> {
    let plan = spec.plan()?;
    params.check(spec)?;
    let n = batch_len(batch, spec)?;
    let mut x = batch.clone().reshape(&with_batch(n, &spec.input))?;
    let mut inputs = Vec::with_capacity(spec.layers.len());
    let mut pre = Vec::with_capacity(spec.layers.len());
    let mut post = Vec::with_capacity(spec.layers.len());
    let mut overflow = None;
    for (t, l) in spec.layers.iter().enumerate() {
        let p = &params.layers[t];
        let mut y = Tensor::zeros(&with_batch(n, &plan.outputs[t]))?;
        match plan.convs[t] {
            None => {
                let out = y.data_mut();
                for row in out.chunks_exact_mut(l.d_out) {
                    row.copy_from_slice(p.bias.data());
                }
                let xm = MatRef::new(x.data(), n, l.d_in, false);
                let wt = MatRef::new(p.weight.data(), l.d_out, l.d_in, true);
                gemm(1.0, xm, wt, 1.0, out, n, l.d_out);
            }
            Some(cs) => cs.forward(n, x.data(), p.weight.data(), p.bias.data(), y.data_mut()),
        }
        let peak = y.max_abs();
        if overflow.is_none() && (!peak.is_finite() || peak > OVERFLOW_THRESHOLD || !y.all_finite()) {
            overflow = Some(t);
        }
        let a = y.map(|v| l.activation.apply(v));
        let next = match l.pool {
            Pool::None => a.clone(),
            Pool::GlobalAverage => global_average(&a, n, l.d_out)?,
        };
        inputs.push(std::mem::replace(&mut x, next));
        pre.push(y);
        post.push(a);
    }
    Ok(ForwardTrace {
        inputs,
        pre,
        post,
        output: x,
        overflow,
    })
}

fn global_average(a: &Tensor, n: usize, channels: usize) -> Result<Tensor> {
    let spatial = a.len() / (n * channels);
    let data = a
        .data()
        .chunks_exact(spatial)
        .map(|c| c.iter().sum::<f64>() / spatial as f64)
        .collect();
    Tensor::new(vec![n, channels], data)
}

/// Forward pass with the batch-mean loss.
pub fn forward(spec: &MainnetSpec, params: &MainnetParams, batch: &Tensor, targets: &Targets) -> Result<ForwardOutput> {
    let trace = propagate(spec, params, batch)?;
    let (loss, _) = loss_and_grad(spec.loss, &trace.output, targets)?;
    Ok(ForwardOutput { trace, loss })
}

/// Batch-mean loss and its gradient with respect to the network output.
///
/// Mean squared error is `(1/N) Σ_n Σ_i (y - t)²` (no factor ½).
pub fn loss_and_grad(loss: Loss, output: &Tensor, targets: &Targets) -> Result<(f64, Tensor)> {
    let (n, d) = output.dims2()?;
    if targets.len() != n {
        return Err(Error::shape(format!("{} targets for batch of {n}", targets.len())));
    }
    let mut grad = Tensor::zeros(&[n, d])?;
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    match (loss, targets) {
        (Loss::SoftmaxCrossEntropy, Targets::Classes(classes)) => {
            for (i, &c) in classes.iter().enumerate() {
                if c >= d {
                    return Err(Error::shape(format!("class {c} out of range for {d} outputs")));
                }
                let z = output.row(i);
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let lse = m + s.ln();
                total += lse - z[c];
                let g = &mut grad.data_mut()[i * d..(i + 1) * d];
                for (gv, zv) in g.iter_mut().zip(z) {
                    *gv = (zv - lse).exp() * inv;
                }
                g[c] -= inv;
            }
        }
        (Loss::MeanSquaredError, Targets::Values(t)) => {
            if t.shape() != [n, d] {
                return Err(Error::shape(format!("targets {:?} for outputs [{n}, {d}]", t.shape())));
            }
            for ((g, y), tv) in grad.data_mut().iter_mut().zip(output.data()).zip(t.data()) {
                let r = y - tv;
                total += r * r;
                *g = 2.0 * r * inv;
            }
        }
        _ => return Err(Error::spec(format!("targets do not suit loss {loss:?}"))),
    }
    Ok((total * inv, grad))
}

/// Summed (not averaged) loss, used for test reporting.
pub fn summed_loss(loss: Loss, output: &Tensor, targets: &Targets) -> Result<f64> {
    let (mean, _) = loss_and_grad(loss, output, targets)?;
    Ok(mean * targets.len() as f64)
}

/// Fraction of rows whose arg-max matches the class.
pub fn accuracy(output: &Tensor, classes: &[usize]) -> Result<f64> {
    let (n, _) = output.dims2()?;
    if classes.len() != n {
        return Err(Error::shape(format!("{} labels for {n} outputs", classes.len())));
    }
    let hits = classes
        .iter()
        .enumerate()
        .filter(|&(i, &c)| {
            let row = output.row(i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            best == c
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Backward pass from the loss.
pub fn backward(spec: &MainnetSpec, params: &MainnetParams, trace: &ForwardTrace, targets: &Targets) -> Result<MainnetGrads> {
    let (_, g) = loss_and_grad(spec.loss, &trace.output, targets)?;
    backward_from(spec, params, trace, &g)
}

/// Backward pass from an arbitrary gradient of the network output.
pub fn backward_from(
    spec: &MainnetSpec,
    params: &MainnetParams,
    trace: &ForwardTrace,
    output_grad: &Tensor,
) -> Result<MainnetGrads> {
    let plan = spec.plan()?;
    params.check(spec)?;
    let layers = spec.layers.len();
    if trace.pre.len() != layers || trace.post.len() != layers || trace.inputs.len() != layers {
        return Err(Error::spec("trace does not match the network depth"));
    }
    if output_grad.shape() != trace.output.shape() {
        return Err(Error::spec(format!(
            "output gradient {:?} for output {:?}",
            output_grad.shape(),
            trace.output.shape()
        )));
    }
    let n = trace.batch_size();
    let mut weights = vec![None; layers];
    let mut biases = vec![None; layers];
    let mut inputs = vec![None; layers];
    let mut pres = vec![None; layers];
    let mut upstream = output_grad.clone();
    for t in (0..layers).rev() {
        let l = &spec.layers[t];
        let p = &params.layers[t];
        let (y, a) = (&trace.pre[t], &trace.post[t]);
        // Undo pooling: spread each channel gradient evenly.
        let dpost = match l.pool {
            Pool::None => upstream,
            Pool::GlobalAverage => {
                let spatial = a.len() / (n * l.d_out);
                let mut d = Tensor::zeros(a.shape())?;
                for (chunk, g) in d.data_mut().chunks_exact_mut(spatial).zip(upstream.data()) {
                    chunk.fill(g / spatial as f64);
                }
                d
            }
        };
        if dpost.len() != y.len() {
            return Err(Error::spec(format!("layer {t}: gradient/trace size mismatch")));
        }
        let mut dy = dpost;
        for ((g, yv), xv) in dy.data_mut().iter_mut().zip(y.data()).zip(a.data()) {
            *g *= l.activation.derivative(*yv, *xv);
        }
        let x = &trace.inputs[t];
        let mut dw = Tensor::zeros(&l.weight_shape())?;
        let mut db = Tensor::zeros(&[l.d_out])?;
        let mut dx = Tensor::zeros(x.shape())?;
        match plan.convs[t] {
            None => {
                for row in dy.data().chunks_exact(l.d_out) {
                    for (b, g) in db.data_mut().iter_mut().zip(row) {
                        *b += g;
                    }
                }
                let dym = MatRef::new(dy.data(), n, l.d_out, false);
                gemm(1.0, MatRef::new(dy.data(), n, l.d_out, true), MatRef::new(x.data(), n, l.d_in, false), 0.0, dw.data_mut(), l.d_out, l.d_in);
                gemm(1.0, dym, MatRef::new(p.weight.data(), l.d_out, l.d_in, false), 0.0, dx.data_mut(), n, l.d_in);
            }
            Some(cs) => cs.backward(n, x.data(), p.weight.data(), dy.data(), dw.data_mut(), db.data_mut(), dx.data_mut()),
        }
        weights[t] = Some(dw);
        biases[t] = Some(db);
        upstream = dx.clone();
        inputs[t] = Some(dx);
        pres[t] = Some(dy);
    }
    let unwrap = |v: Vec<Option<Tensor>>| v.into_iter().map(Option::unwrap).collect();
    Ok(MainnetGrads {
        weights: unwrap(weights),
        biases: unwrap(biases),
        inputs: unwrap(inputs),
        pre: unwrap(pres),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample, Distribution, Rng};

    fn single() -> (MainnetSpec, MainnetParams) {
        let spec = MainnetSpec::mlp(2, &[], 1, Activation::Identity, Loss::MeanSquaredError);
        let mut params = MainnetParams::zeros(&spec).unwrap();
        params.layers[0].weight = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        (spec, params)
    }

    #[test]
    fn zero_net_zero_loss() {
        let spec = MainnetSpec::mlp(3, &[4], 2, Activation::Identity, Loss::MeanSquaredError);
        let params = MainnetParams::zeros(&spec).unwrap();
        let x = Tensor::full(&[5, 3], 1.5).unwrap();
        let t = Targets::Values(Tensor::zeros(&[5, 2]).unwrap());
        assert_eq!(forward(&spec, &params, &x, &t).unwrap().loss, 0.0);
    }

    #[test]
    fn two_to_one_by_hand() {
        let (spec, params) = single();
        let x = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let t = Targets::Values(Tensor::zeros(&[1, 1]).unwrap());
        let out = forward(&spec, &params, &x, &t).unwrap();
        assert_eq!(out.trace.output.data(), &[7.0]);
        let g = backward(&spec, &params, &out.trace, &t).unwrap();
        assert_eq!(g.weights[0].data(), &[42.0, 56.0]);
        assert_eq!(g.biases[0].data(), &[14.0]);
    }

    #[test]
    fn identity_net_at_its_minimum() {
        let spec = MainnetSpec::mlp(3, &[3], 3, Activation::Identity, Loss::MeanSquaredError);
        let mut params = MainnetParams::zeros(&spec).unwrap();
        for p in &mut params.layers {
            p.weight = Tensor::eye(3).unwrap();
        }
        let x = sample(&Distribution::normal(1.0).unwrap(), &[4, 3], &mut Rng::new(1)).unwrap();
        let t = Targets::Values(x.clone());
        let out = forward(&spec, &params, &x, &t).unwrap();
        let g = backward(&spec, &params, &out.trace, &t).unwrap();
        assert!(g.weights.iter().chain(&g.biases).all(|w| w.max_abs() == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let z = Tensor::zeros(&[2, 4]).unwrap();
        let (l, g) = loss_and_grad(Loss::SoftmaxCrossEntropy, &z, &Targets::Classes(vec![0, 3])).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((g.data()[0] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((g.data()[1] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let z = Tensor::from_rows(&[vec![1e300, 0.0]]).unwrap();
        let (l, _) = loss_and_grad(Loss::SoftmaxCrossEntropy, &z, &Targets::Classes(vec![0])).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn overflow_reports_first_layer() {
        let spec = MainnetSpec::mlp(1, &[1, 1], 1, Activation::Identity, Loss::MeanSquaredError);
        let mut params = MainnetParams::zeros(&spec).unwrap();
        for p in &mut params.layers {
            p.weight = Tensor::full(&[1, 1], 1e20).unwrap();
        }
        let x = Tensor::full(&[1, 1], 1.0).unwrap();
        let t = Targets::Values(Tensor::zeros(&[1, 1]).unwrap());
        let out = forward(&spec, &params, &x, &t).unwrap();
        assert_eq!(out.trace.overflow, Some(1));
        assert!(out.overflowed());
    }

    #[test]
    fn mismatched_params_rejected() {
        let (spec, _) = single();
        let other = MainnetParams::zeros(&MainnetSpec::mlp(3, &[], 1, Activation::Identity, Loss::MeanSquaredError)).unwrap();
        let x = Tensor::zeros(&[1, 2]).unwrap();
        assert!(matches!(propagate(&spec, &other, &x), Err(Error::Spec(_))));
    }

    #[test]
    fn oversized_kernel_rejected() {
        let spec = MainnetSpec {
            input: InputShape::Image { channels: 1, height: 2, width: 2 },
            layers: vec![LayerSpec::conv(1, 1, ConvGeometry::square(5, 1, 1), Activation::Relu).with_pool(Pool::GlobalAverage)],
            loss: Loss::MeanSquaredError,
        };
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn accuracy_counts_argmax() {
        let z = Tensor::from_rows(&[vec![0.1, 0.9], vec![2.0, 1.0]]).unwrap();
        assert_eq!(accuracy(&z, &[1, 1]).unwrap(), 0.5);
    }

    fn linear_ratio(activation: Activation) -> f64 {
        let width = 500;
        let v = 1.0 / width as f64;
        let spec = MainnetSpec::mlp(width, &[width], width, activation, Loss::MeanSquaredError);
        let mut rng = Rng::new(11);
        let mut params = MainnetParams::zeros(&spec).unwrap();
        for p in &mut params.layers {
            p.weight = sample(&Distribution::uniform(v).unwrap(), &[width, width], &mut rng).unwrap();
        }
        let x = sample(&Distribution::normal(1.0).unwrap(), &[300, width], &mut rng).unwrap();
        let trace = propagate(&spec, &params, &x).unwrap();
        // Second moment of the second layer's input relative to the first's.
        crate::stats::mean_square(trace.pre[1].data()) / crate::stats::mean_square(trace.pre[0].data())
    }

    #[test]
    fn linear_variance_recursion() {
        let r = linear_ratio(Activation::Identity);
        assert!((r - 1.0).abs() < 0.1, "{r}");
    }

    #[test]
    fn relu_halves_variance() {
        let r = linear_ratio(Activation::Relu);
        assert!((r - 0.5).abs() < 0.05, "{r}");
    }
}
