//! Variance probes: per-layer statistics, closed-form predictions and
//! tolerance checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::hypergen::{GenerationTrace, HeadTopology, HyperGrads, Hypernet, HypernetSpec, Slot};
use crate::init::{classical_head_variance, layer_relu, target_weight_variance, trunk_variance, InitScheme, SchemeKind};
use crate::mainnet::{Activation, BiasSource, ForwardTrace, LayerKind, LayerSpec, MainnetGrads, MainnetParams, MainnetSpec};
use crate::stats::mean;

/// Default acceptance band for init-time variance ratios.
pub const DEFAULT_BAND: (f64, f64) = (0.8, 1.25);

pub mod kind {
    pub const INPUT: &str = "input";
    pub const PRE: &str = "pre";
    pub const POST: &str = "post";
    pub const WEIGHT: &str = "weight";
    pub const BIAS: &str = "bias";
    pub const WEIGHT_GRAD: &str = "weight_grad";
    pub const BIAS_GRAD: &str = "bias_grad";
    pub const INPUT_GRAD: &str = "input_grad";
    pub const PRE_GRAD: &str = "pre_grad";
    pub const HEAD_INPUT: &str = "head_input";
    pub const HEAD_INPUT_GRAD: &str = "head_input_grad";
    pub const HEAD_OUTPUT: &str = "head_output";
    pub const HEAD_OUTPUT_GRAD: &str = "head_output_grad";
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub var: f64,
    pub std: f64,
    pub count: usize,
    pub theory: Option<f64>,
    /// `var / theory`.
    pub ratio: Option<f64>,
    /// `std / sqrt(theory)`.
    pub std_ratio: Option<f64>,
}

impl Stat {
    fn of(xs: &[f64]) -> Option<Stat> {
        if xs.len() < 2 {
            return None;
        }
        let m = mean(xs);
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        Some(Stat {
            mean: m,
            var,
            std: var.sqrt(),
            count: xs.len(),
            theory: None,
            ratio: None,
            std_ratio: None,
        })
    }

    pub fn second_moment(&self) -> f64 {
        self.var + self.mean * self.mean
    }

    fn with_theory(mut self, theory: f64) -> Stat {
        self.theory = Some(theory);
        let ratio = self.var / theory;
        self.ratio = Some(ratio);
        self.std_ratio = Some(ratio.sqrt());
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub stats: BTreeMap<String, Stat>,
}

impl LayerReport {
    pub fn get(&self, kind: &str) -> Option<&Stat> {
        self.stats.get(kind)
    }

    fn put(&mut self, kind: &str, xs: &[f64]) {
        if let Some(s) = Stat::of(xs) {
            self.stats.insert(kind.to_string(), s);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub step: usize,
    pub layers: Vec<LayerReport>,
}

/// Everything a snapshot can read. Only the trace is required.
#[derive(Clone, Copy)]
pub struct SnapshotInput<'a> {
    pub trace: &'a ForwardTrace,
    pub params: Option<&'a MainnetParams>,
    pub grads: Option<&'a MainnetGrads>,
    pub hypernet: Option<&'a Hypernet>,
    pub generation: Option<&'a GenerationTrace>,
    pub hyper_grads: Option<&'a HyperGrads>,
}

impl<'a> SnapshotInput<'a> {
    pub fn new(trace: &'a ForwardTrace) -> Self {
        SnapshotInput {
            trace,
            params: None,
            grads: None,
            hypernet: None,
            generation: None,
            hyper_grads: None,
        }
    }
}

/// Rows of a per-head tensor that belong to weight emissions of `layer`.
fn head_rows(hn: &Hypernet, layer: usize, per_head: &[crate::tensor::Tensor]) -> Vec<f64> {
    let mut out = Vec::new();
    for (h, t) in per_head.iter().enumerate() {
        for (r, &i) in hn.head_emissions(h).iter().enumerate() {
            let slot = hn.emissions[i].slot;
            if slot.layer() == layer && !slot.is_bias() {
                out.extend_from_slice(t.row(r));
            }
        }
    }
    out
}

/// Collects per-layer statistics. Deterministic: no sampling is involved.
pub fn snapshot(input: &SnapshotInput<'_>, step: usize) -> Result<VarianceReport> {
    let tr = input.trace;
    if tr.pre.is_empty() {
        return Err(Error::invalid("empty trace"));
    }
    let mut layers = Vec::with_capacity(tr.pre.len());
    for t in 0..tr.pre.len() {
        let mut lr = LayerReport {
            layer: t,
            ..Default::default()
        };
        lr.put(kind::INPUT, tr.inputs[t].data());
        lr.put(kind::PRE, tr.pre[t].data());
        lr.put(kind::POST, tr.post[t].data());
        if let Some(p) = input.params {
            lr.put(kind::WEIGHT, p.layers[t].weight.data());
            lr.put(kind::BIAS, p.layers[t].bias.data());
        }
        if let Some(g) = input.grads {
            lr.put(kind::WEIGHT_GRAD, g.weights[t].data());
            lr.put(kind::BIAS_GRAD, g.biases[t].data());
            lr.put(kind::INPUT_GRAD, g.inputs[t].data());
            lr.put(kind::PRE_GRAD, g.pre[t].data());
        }
        if let Some(hn) = input.hypernet {
            if let Some(gen) = input.generation {
                lr.put(kind::HEAD_INPUT, &head_rows(hn, t, &gen.head_inputs));
                lr.put(kind::HEAD_OUTPUT, &head_rows(hn, t, &gen.head_outputs));
            }
            if let Some(hg) = input.hyper_grads {
                lr.put(kind::HEAD_INPUT_GRAD, &head_rows(hn, t, &hg.head_inputs));
                lr.put(kind::HEAD_OUTPUT_GRAD, &head_rows(hn, t, &hg.head_outputs));
            }
        }
        layers.push(lr);
    }
    Ok(VarianceReport { step, layers })
}

/// Closed-form expectations for one layer at initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPrediction {
    pub weight_var: f64,
    pub bias_var: f64,
    /// Second moment of the layer input.
    pub input_var: f64,
    pub pre_var: f64,
    /// Second moment of the layer output (after the activation).
    pub output_moment: f64,
    /// `Var(∂L/∂x[t])` for a unit-variance gradient at the network output.
    pub input_grad_var: f64,
    /// `Var(∂L/∂h(e)) / Var(∂L/∂W)` for the layer's weight head.
    pub shrink: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub layers: Vec<LayerPrediction>,
}

impl Prediction {
    /// Per layer, `E[out²] / E[in²]`: the second-moment gain from a layer's
    /// input to its activated output.
    pub fn forward_gains(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.output_moment / l.input_var).collect()
    }

    /// `Var(∂L/∂x[t]) / Var(∂L/∂x[t+1])` for every layer but the last.
    pub fn backward_gains(&self) -> Vec<f64> {
        self.layers
            .windows(2)
            .map(|w| w[0].input_grad_var / w[1].input_grad_var)
            .collect()
    }
}

/// Second moment after `activation` for a zero-mean input of variance `v`,
/// in the linear regime (tanh is treated as the identity).
fn after_activation(activation: Activation, v: f64) -> f64 {
    match activation {
        Activation::Relu => 0.5 * v,
        Activation::Tanh | Activation::Identity => v,
    }
}

fn gradient_through(activation: Activation) -> f64 {
    match activation {
        Activation::Relu => 0.5,
        Activation::Tanh | Activation::Identity => 1.0,
    }
}

/// Second moment of the trunk output, starting from `var_e`.
fn trunk_output(scheme: &InitScheme, hspec: &HypernetSpec, var_e: f64, hyperfan_last: Option<f64>) -> (usize, f64) {
    let mut d = hspec.embedding_dim;
    let mut m = var_e;
    let n = hspec.hidden_layers.len();
    for (i, &w) in hspec.hidden_layers.iter().enumerate() {
        let v = match hyperfan_last {
            Some(target) if i + 1 == n => {
                // The chunk trunk's last layer is set so the head output hits `target`.
                let relu = if hspec.hidden_activation == Activation::Relu { 2.0 } else { 1.0 };
                relu * target / (d as f64 * var_e)
            }
            _ => trunk_variance(scheme, d, w, hspec.hidden_activation),
        };
        m = after_activation(hspec.hidden_activation, d as f64 * v * m);
        d = w;
    }
    (d, m)
}

fn embedding_second_moment(scheme: &InitScheme, hspec: &HypernetSpec, layer: &LayerSpec) -> f64 {
    if scheme.kind == SchemeKind::ConstantEmbeddingKaiming {
        1.0 / layer.fan_in() as f64
    } else {
        hspec.embedding_distribution.variance
    }
}

/// `Var` of the values written by a head with `p` outputs serving `layer`.
fn generated_variance(scheme: &InitScheme, hspec: &HypernetSpec, layer: &LayerSpec, p: usize, bias: bool, chunked: bool) -> Result<(f64, f64)> {
    let var_e = embedding_second_moment(scheme, hspec, layer);
    let s = scheme.with_hypernet_bias(layer.bias_source == BiasSource::Generated);
    if scheme.kind.is_hyperfan() {
        if chunked {
            let target = target_weight_variance(scheme, layer)?;
            let (_, m) = trunk_output(scheme, hspec, var_e, Some(target));
            // Head variance 1/d_k: the generated variance is the feature second moment.
            return Ok((m, m));
        }
        let (d, m) = trunk_output(scheme, hspec, var_e, None);
        // Heads are set from the declared embedding variance.
        let declared = hspec.embedding_distribution.variance;
        let geom = layer.fan_geometry(d, d, declared, declared);
        let relu = layer_relu(&s, layer);
        let v_head = if bias {
            s.hyperfan_bias_variance(&geom, relu)
        } else {
            s.hyperfan_weight_variance(&geom, relu)
        }
        .expect("hyperfan scheme");
        return Ok((d as f64 * v_head * m, m));
    }
    let (d, m) = trunk_output(scheme, hspec, var_e, None);
    let mut v_head = classical_head_variance(scheme, d, p);
    if scheme.kind == SchemeKind::ScaledOutputKaiming {
        v_head *= scheme.scale() * scheme.scale();
    }
    Ok((d as f64 * v_head * m, m))
}

/// Predicted per-layer variances at initialization for standardized inputs
/// of variance `input_var`. Global pooling is treated as preserving the
/// second moment.
pub fn predict(scheme: &InitScheme, mspec: &MainnetSpec, hspec: &HypernetSpec, input_var: f64) -> Result<Prediction> {
    mspec.validate()?;
    let chunk = match hspec.head_topology {
        HeadTopology::Chunked(plan) => Some(plan),
        _ => None,
    };
    let mut out = Vec::with_capacity(mspec.layers.len());
    let mut m_x = input_var;
    for l in &mspec.layers {
        let chunked = chunk.is_some() && matches!(l.kind, LayerKind::Conv2d(_));
        let p = match (chunked, chunk) {
            (true, Some(plan)) => plan.k * plan.n * plan.n,
            _ => l.weight_len(),
        };
        let (weight_var, m_feat) = generated_variance(scheme, hspec, l, p, false, chunked)?;
        let head_in = hspec.feature_dim();
        // Var(∂L/∂h) = Σ_p H² Var(∂L/∂W): head outputs times Var(H).
        let v_head = weight_var / (head_in as f64 * m_feat);
        let shrink = p as f64 * v_head;
        let bias_var = if l.bias_source == BiasSource::Generated {
            generated_variance(scheme, hspec, l, l.d_out, true, false)?.0
        } else {
            0.0
        };
        let pre_var = l.fan_in() as f64 * weight_var * m_x + bias_var;
        out.push(LayerPrediction {
            weight_var,
            bias_var,
            input_var: m_x,
            pre_var,
            output_moment: after_activation(l.activation, pre_var),
            input_grad_var: 0.0,
            shrink,
        });
        m_x = after_activation(l.activation, pre_var);
    }
    // Backward from a unit-variance output gradient.
    let mut g = 1.0;
    for (t, l) in mspec.layers.iter().enumerate().rev() {
        let g_pre = g * gradient_through(l.activation);
        g = l.fan_out() as f64 * out[t].weight_var * g_pre;
        out[t].input_grad_var = g;
    }
    Ok(Prediction { layers: out })
}

/// Attaches theoretical values from `prediction` to the report.
///
/// Gradient predictions are scaled by the measured variance of the gradient
/// at the network output.
pub fn attach(report: &mut VarianceReport, prediction: &Prediction, mspec: &MainnetSpec) -> Result<()> {
    if report.layers.len() != prediction.layers.len() {
        return Err(Error::spec(format!(
            "report has {} layers, prediction {}",
            report.layers.len(),
            prediction.layers.len()
        )));
    }
    let last = report.layers.len() - 1;
    let out_grad = report.layers[last].get(kind::PRE_GRAD).map(|s| s.var);
    let last_act = mspec.layers[last].activation;
    for (lr, p) in report.layers.iter_mut().zip(&prediction.layers) {
        let mut set = |k: &str, v: f64| {
            if let Some(s) = lr.stats.get_mut(k) {
                if v > 0.0 {
                    *s = s.with_theory(v);
                }
            }
        };
        set(kind::PRE, p.pre_var);
        set(kind::WEIGHT, p.weight_var);
        set(kind::BIAS, p.bias_var);
        set(kind::HEAD_OUTPUT, p.weight_var);
        if let Some(gv) = out_grad {
            set(kind::INPUT_GRAD, p.input_grad_var * gv / gradient_through(last_act));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub layer: usize,
    pub empirical: f64,
    pub theory: f64,
    pub ratio: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub verdicts: Vec<Verdict>,
    pub band: (f64, f64),
}

impl Comparison {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }
}

/// Ratio of empirical to theoretical values per layer; a layer passes when
/// the ratio lies in `band`.
pub fn compare(empirical: &[f64], theory: &[f64], band: (f64, f64)) -> Result<Comparison> {
    if empirical.len() != theory.len() {
        return Err(Error::spec(format!(
            "{} empirical layers against {} predicted",
            empirical.len(),
            theory.len()
        )));
    }
    let verdicts = empirical
        .iter()
        .zip(theory)
        .enumerate()
        .map(|(layer, (&e, &t))| {
            let ratio = e / t;
            Verdict {
                layer,
                empirical: e,
                theory: t,
                ratio,
                pass: ratio >= band.0 && ratio <= band.1,
            }
        })
        .collect();
    Ok(Comparison { verdicts, band })
}

/// Measured `E[out²] / E[in²]` per layer.
pub fn forward_gains(report: &VarianceReport) -> Result<Vec<f64>> {
    report
        .layers
        .iter()
        .map(|l| {
            let m = |k: &str| {
                l.get(k)
                    .map(Stat::second_moment)
                    .ok_or_else(|| Error::invalid(format!("report lacks {k} statistics")))
            };
            Ok(m(kind::POST)? / m(kind::INPUT)?)
        })
        .collect()
}

/// Measured `Var(y[t]) / Var(y[t-1])` of pre-activations, with `y[-1]` the
/// network input.
pub fn pre_activation_ratios(report: &VarianceReport) -> Result<Vec<f64>> {
    let missing = || Error::invalid("report lacks pre-activation statistics");
    let mut prev = report.layers[0].get(kind::INPUT).ok_or_else(missing)?.var;
    report
        .layers
        .iter()
        .map(|l| {
            let v = l.get(kind::PRE).ok_or_else(missing)?.var;
            let g = v / prev;
            prev = v;
            Ok(g)
        })
        .collect()
}

/// Measured `Var(∂L/∂x[t]) / Var(∂L/∂x[t+1])`.
pub fn backward_gains(report: &VarianceReport) -> Result<Vec<f64>> {
    let vars: Vec<f64> = report
        .layers
        .iter()
        .map(|l| {
            l.get(kind::INPUT_GRAD)
                .map(|s| s.var)
                .ok_or_else(|| Error::invalid("report lacks input gradients"))
        })
        .collect::<Result<_>>()?;
    Ok(vars.windows(2).map(|w| w[0] / w[1]).collect())
}

fn opt(v: Option<f64>) -> Value {
    v.map_or(Value::Null, |x| json!(x))
}

/// `{step: {layer: {kind: {mean, var, std, count, theory, ratio, std_ratio}}}}`.
pub fn reports_to_json(reports: &[VarianceReport]) -> Value {
    let mut root = Map::new();
    for r in reports {
        let mut layers = Map::new();
        for l in &r.layers {
            let mut kinds = Map::new();
            for (k, s) in &l.stats {
                kinds.insert(
                    k.clone(),
                    json!({
                        "mean": s.mean,
                        "var": s.var,
                        "std": s.std,
                        "count": s.count,
                        "theory": opt(s.theory),
                        "ratio": opt(s.ratio),
                        "std_ratio": opt(s.std_ratio),
                    }),
                );
            }
            layers.insert(l.layer.to_string(), Value::Object(kinds));
        }
        root.insert(r.step.to_string(), Value::Object(layers));
    }
    Value::Object(root)
}

/// Flat CSV with columns `step,layer,kind,mean,var,theory,ratio`.
pub fn reports_to_csv(reports: &[VarianceReport]) -> String {
    let mut s = String::from("step,layer,kind,mean,var,theory,ratio\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in reports {
        for l in &r.layers {
            for (k, st) in &l.stats {
                let _ = writeln!(
                    s,
                    "{},{},{},{:e},{:e},{},{}",
                    r.step,
                    l.layer,
                    k,
                    st.mean,
                    st.var,
                    cell(st.theory),
                    cell(st.ratio)
                );
            }
        }
    }
    s
}

/// Per-layer weight-head slots of `hn`, for callers that need them.
pub fn weight_slots(hn: &Hypernet, layer: usize) -> Vec<Slot> {
    hn.emissions
        .iter()
        .filter(|e| e.slot.layer() == layer && !e.slot.is_bias())
        .map(|e| e.slot)
        .collect()
}
