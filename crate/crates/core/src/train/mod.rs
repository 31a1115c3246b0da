//! Vanilla SGD over hypernet → mainnet → loss, with probes, evaluation and
//! checkpoints.

mod checkpoint;
mod fast;
pub mod presets;
mod sequence;

use std::borrow::Cow;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{DataSplits, Dataset};
use crate::error::{Error, Result};
use crate::hypergen::Hypernet;
use crate::init::{InitScheme, SchemeKind};
use crate::mainnet::{self, Activation, Loss, MainnetParams, MainnetSpec, Targets};
use crate::probe::{self, SnapshotInput, VarianceReport};
use crate::rng::{Distribution, Rng};
use crate::stats::mean_square;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use sequence::{train_sequence, SequenceOutcome};

/// Step-wise decay: the rate is multiplied by `gamma` at each milestone epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        base * self.gamma.powi(passed as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalCadence {
    Epoch,
    Iterations(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub scheme: InitScheme,
    /// Snapshot every this many steps (and at step 0); `None` disables probes.
    pub probe_every: Option<usize>,
    pub probe_batch: usize,
    pub eval: EvalCadence,
    pub schedule: Option<LrSchedule>,
    /// Stop after this many steps regardless of epochs.
    pub max_steps: Option<usize>,
    /// Use the fixed-feature update when the hypernet allows it.
    pub fast_path: bool,
}

impl TrainConfig {
    pub fn new(scheme: InitScheme, learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate,
            batch_size,
            epochs,
            seed,
            scheme,
            probe_every: Some(1000),
            probe_batch: 300,
            eval: EvalCadence::Epoch,
            schedule: None,
            max_steps: None,
            fast_path: true,
        }
    }

    /// A zero rate is accepted so that a run can be replayed without moving.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.probe_batch == 0 {
            return Err(Error::invalid("batch size, epochs and probe batch must be positive"));
        }
        if self.probe_every == Some(0) || self.max_steps == Some(0) || self.eval == EvalCadence::Iterations(0) {
            return Err(Error::invalid("cadences and step limits must be positive"));
        }
        if let Some(s) = &self.schedule {
            if !(s.gamma > 0.0 && s.gamma.is_finite()) {
                return Err(Error::invalid("schedule gamma must be positive"));
            }
            if s.milestones.windows(2).any(|w| w[0] >= w[1]) || s.milestones.first() == Some(&0) {
                return Err(Error::invalid("milestones must be positive and strictly increasing"));
            }
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> f64 {
        match &self.schedule {
            Some(s) => s.rate(self.learning_rate, epoch),
            None => self.learning_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepStatus {
    Applied,
    /// A gradient was not finite; nothing was changed.
    Rejected,
}

/// `p -= lr·g` for every pair. Any non-finite gradient rejects the whole step.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<StepStatus> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Ok(StepStatus::Rejected);
    }
    for (p, g) in params.iter_mut().zip(grads) {
        p.axpy(-lr, g)?;
    }
    Ok(StepStatus::Applied)
}

/// The trainable object: a directly parameterized network, or a hypernet
/// that generates one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Classical { spec: MainnetSpec, params: MainnetParams },
    Hyper(Hypernet),
}

impl Model {
    pub fn mainnet(&self) -> &MainnetSpec {
        match self {
            Model::Classical { spec, .. } => spec,
            Model::Hyper(hn) => &hn.mainnet,
        }
    }

    pub fn params(&self) -> Result<Cow<'_, MainnetParams>> {
        match self {
            Model::Classical { params, .. } => Ok(Cow::Borrowed(params)),
            Model::Hyper(hn) => Ok(Cow::Owned(hn.generate()?.0)),
        }
    }

    /// A plain network with every layer drawn from a classical scheme.
    pub fn classical(spec: &MainnetSpec, scheme: &InitScheme, rng: &mut Rng) -> Result<Model> {
        spec.validate()?;
        if !matches!(scheme.kind, SchemeKind::FanIn | SchemeKind::FanOut | SchemeKind::Harmonic) {
            return Err(Error::spec(format!("{} does not apply to a network without a hypernet", scheme.kind)));
        }
        let mut params = MainnetParams::zeros(spec)?;
        for (p, l) in params.layers.iter_mut().zip(&spec.layers) {
            let relu = scheme.relu_gain && l.activation == Activation::Relu;
            let v = scheme.plain_layer_variance(l.fan_in(), l.fan_out(), relu);
            Distribution::new(scheme.family, v)?.fill(p.weight.data_mut(), rng);
        }
        Ok(Model::Classical { spec: spec.clone(), params })
    }
}

/// Why training stopped early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_metric: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    /// Number of updates applied before the evaluation.
    pub step: usize,
    pub epoch: usize,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    /// Mean training loss of every epoch that ran (the last may be partial).
    pub epoch_losses: Vec<f64>,
    /// Test accuracy for classification, test mean squared error for regression.
    pub test_metrics: Vec<MetricPoint>,
    pub reports: Vec<VarianceReport>,
    pub divergence: Option<Divergence>,
    /// Loss on the probe batch before the first and after the last update.
    pub start_loss: f64,
    pub end_loss: f64,
    pub steps: usize,
    pub model: Model,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn final_metric(&self) -> Option<f64> {
        self.test_metrics.last().map(|m| m.value)
    }

    /// `step,epoch,train_loss,test_metric`; the metric is empty between evaluations.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,epoch,train_loss,test_metric\n");
        for p in &self.curve {
            let m = p.test_metric.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", p.step, p.epoch, p.train_loss, m);
        }
        s
    }
}

enum Engine {
    Plain(Model),
    Fast { base: Hypernet, state: fast::FixedFeatures },
}

enum StepResult {
    Loss(f64),
    Diverged(String),
}

fn too_big(loss: f64) -> bool {
    !loss.is_finite() || loss.abs() > mainnet::OVERFLOW_THRESHOLD
}

impl Engine {
    fn new(model: Model, allow_fast: bool) -> Result<Engine> {
        match model {
            Model::Hyper(hn) if allow_fast && fast::eligible(&hn) => {
                let state = fast::FixedFeatures::new(&hn)?;
                Ok(Engine::Fast { base: hn, state })
            }
            m => Ok(Engine::Plain(m)),
        }
    }

    fn spec(&self) -> &MainnetSpec {
        match self {
            Engine::Plain(m) => m.mainnet(),
            Engine::Fast { base, .. } => &base.mainnet,
        }
    }

    fn params(&self) -> Result<Cow<'_, MainnetParams>> {
        match self {
            Engine::Plain(m) => m.params(),
            Engine::Fast { state, .. } => Ok(Cow::Borrowed(&state.params)),
        }
    }

    fn into_model(self) -> Result<Model> {
        match self {
            Engine::Plain(m) => Ok(m),
            Engine::Fast { base, state } => Ok(Model::Hyper(state.materialize(&base)?)),
        }
    }

    fn step(&mut self, x: &Tensor, y: &Targets, lr: f64) -> Result<StepResult> {
        match self {
            Engine::Plain(Model::Classical { spec, params }) => {
                let out = mainnet::forward(spec, params, x, y)?;
                if out.overflowed() {
                    return Ok(StepResult::Diverged(overflow_reason(&out)));
                }
                let g = mainnet::backward(spec, params, &out.trace, y)?;
                let grads: Vec<&Tensor> = g.weights.iter().zip(&g.biases).flat_map(|(w, b)| [w, b]).collect();
                let mut ps: Vec<&mut Tensor> = params.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect();
                Ok(match sgd_step(&mut ps, &grads, lr)? {
                    StepStatus::Applied => StepResult::Loss(out.loss),
                    StepStatus::Rejected => StepResult::Diverged("non-finite gradient".into()),
                })
            }
            Engine::Plain(Model::Hyper(hn)) => {
                let (params, gt) = hn.generate()?;
                if !params.all_finite() {
                    return Ok(StepResult::Diverged("non-finite generated parameters".into()));
                }
                let out = mainnet::forward(&hn.mainnet, &params, x, y)?;
                if out.overflowed() {
                    return Ok(StepResult::Diverged(overflow_reason(&out)));
                }
                let g = mainnet::backward(&hn.mainnet, &params, &out.trace, y)?;
                let hg = hn.backward_generate(&gt, &g.weights, &g.biases)?;
                let trainable = hn.spec.embeddings_trainable;
                let grads = hg.tensors(trainable);
                let mut ps = hn.params_mut_with(trainable);
                Ok(match sgd_step(&mut ps, &grads, lr)? {
                    StepStatus::Applied => StepResult::Loss(out.loss),
                    StepStatus::Rejected => StepResult::Diverged("non-finite gradient".into()),
                })
            }
            Engine::Fast { base, state } => {
                let out = mainnet::forward(&base.mainnet, &state.params, x, y)?;
                if out.overflowed() {
                    return Ok(StepResult::Diverged(overflow_reason(&out)));
                }
                let g = mainnet::backward(&base.mainnet, &state.params, &out.trace, y)?;
                if g.weights.iter().chain(&g.biases).any(|t| !t.all_finite()) {
                    return Ok(StepResult::Diverged("non-finite gradient".into()));
                }
                state.step(&g, lr);
                if !state.params.all_finite() {
                    return Ok(StepResult::Diverged("non-finite generated parameters".into()));
                }
                Ok(StepResult::Loss(out.loss))
            }
        }
    }
}

fn overflow_reason(out: &mainnet::ForwardOutput) -> String {
    match out.trace.overflow {
        Some(t) => format!("activation overflow at layer {t}"),
        None => format!("loss overflow ({})", out.loss),
    }
}

/// Loss of `model` on one batch, without updating anything.
pub fn evaluate_loss(model: &Model, x: &Tensor, y: &Targets) -> Result<f64> {
    let p = model.params()?;
    Ok(mainnet::forward(model.mainnet(), &p, x, y)?.loss)
}

/// Accuracy (classification) or mean squared error (regression) over `ds`,
/// in chunks of `chunk` samples.
pub fn evaluate_metric(spec: &MainnetSpec, params: &MainnetParams, ds: &Dataset, chunk: usize) -> Result<f64> {
    let n = ds.len();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = ds.batch(&idx)?;
        let tr = mainnet::propagate(spec, params, &x)?;
        total += match (&y, spec.loss) {
            (Targets::Classes(c), _) => mainnet::accuracy(&tr.output, c)? * c.len() as f64,
            (Targets::Values(_), Loss::MeanSquaredError) => mainnet::summed_loss(spec.loss, &tr.output, &y)?,
            (Targets::Values(_), _) => return Err(Error::spec("regression targets need a squared-error loss")),
        };
        start = end;
    }
    Ok(total / n as f64)
}

fn probe_snapshot(engine: &Engine, cfg: &TrainConfig, x: &Tensor, y: &Targets, step: usize) -> Result<VarianceReport> {
    let spec = engine.spec();
    let (params, hyper) = match engine {
        Engine::Plain(Model::Classical { params, .. }) => (params.clone(), None),
        Engine::Plain(Model::Hyper(hn)) => {
            let (p, gt) = hn.generate()?;
            (p, Some((hn.clone(), gt)))
        }
        Engine::Fast { base, state } => {
            let hn = state.materialize(base)?;
            let (p, gt) = hn.generate()?;
            (p, Some((hn, gt)))
        }
    };
    let out = mainnet::forward(spec, &params, x, y)?;
    let grads = mainnet::backward(spec, &params, &out.trace, y)?;
    let hg = match &hyper {
        Some((hn, gt)) => Some(hn.backward_generate(gt, &grads.weights, &grads.biases)?),
        None => None,
    };
    let input = SnapshotInput {
        trace: &out.trace,
        params: Some(&params),
        grads: Some(&grads),
        hypernet: hyper.as_ref().map(|h| &h.0),
        generation: hyper.as_ref().map(|h| &h.1),
        hyper_grads: hg.as_ref(),
    };
    let mut report = probe::snapshot(&input, step)?;
    if step == 0 {
        if let Some((hn, _)) = &hyper {
            let prediction = probe::predict(&cfg.scheme, spec, &hn.spec, mean_square(x.data()))?;
            probe::attach(&mut report, &prediction, spec)?;
        }
    }
    Ok(report)
}

/// Trains `model` on `data.train`, evaluating on `data.test`.
///
/// Deterministic given the config: batches are drawn from a dedicated RNG
/// stream of `cfg.seed`. The probe batch is the first `cfg.probe_batch`
/// test samples. On divergence the partial results are returned.
pub fn train(model: Model, data: &DataSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = data.train.len();
    if n == 0 || data.test.is_empty() {
        return Err(Error::invalid("training and test splits must be non-empty"));
    }
    let mut engine = Engine::new(model, cfg.fast_path)?;
    let probe = data.test.subset(cfg.probe_batch);
    let probe_idx: Vec<usize> = (0..probe.len()).collect();
    let (px, py) = probe.batch(&probe_idx)?;
    let eval_chunk = 250;

    let mut rng = Rng::with_stream(cfg.seed, 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut test_metrics = Vec::new();
    let mut reports = Vec::new();
    let mut divergence = None;

    let start_loss = {
        let p = engine.params()?;
        mainnet::forward(engine.spec(), &p, &px, &py)?.loss
    };
    let metric = |engine: &Engine| -> Result<f64> {
        let p = engine.params()?;
        evaluate_metric(engine.spec(), &p, &data.test, eval_chunk)
    };
    test_metrics.push(MetricPoint {
        step: 0,
        epoch: 0,
        value: metric(&engine)?,
    });

    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let lr = cfg.rate_at(epoch);
        let mut sum = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            if cfg.probe_every.is_some_and(|k| step % k == 0) {
                reports.push(probe_snapshot(&engine, cfg, &px, &py, step)?);
            }
            let (x, y) = data.train.batch(chunk)?;
            let loss = match engine.step(&x, &y, lr)? {
                StepResult::Loss(l) => l,
                StepResult::Diverged(reason) => {
                    divergence = Some(Divergence { step, reason });
                    break;
                }
            };
            step += 1;
            sum += loss;
            count += 1;
            let mut point = CurvePoint {
                step,
                epoch,
                train_loss: loss,
                test_metric: None,
            };
            if let EvalCadence::Iterations(k) = cfg.eval {
                if step % k == 0 {
                    let v = metric(&engine)?;
                    point.test_metric = Some(v);
                    test_metrics.push(MetricPoint { step, epoch, value: v });
                }
            }
            curve.push(point);
        }
        if count > 0 {
            epoch_losses.push(sum / count as f64);
        }
        let stop = divergence.is_some() || cfg.max_steps.is_some_and(|m| step >= m);
        let due = cfg.eval == EvalCadence::Epoch || stop || epoch + 1 == cfg.epochs;
        if due && divergence.is_none() && test_metrics.last().map(|m| m.step) != Some(step) {
            let v = metric(&engine)?;
            if let Some(last) = curve.last_mut() {
                last.test_metric = Some(v);
            }
            test_metrics.push(MetricPoint { step, epoch, value: v });
        }
        if stop {
            break 'epochs;
        }
    }

    let end_loss = if divergence.is_some() {
        f64::INFINITY
    } else {
        let p = engine.params()?;
        let l = mainnet::forward(engine.spec(), &p, &px, &py)?.loss;
        if too_big(l) {
            f64::INFINITY
        } else {
            l
        }
    };
    Ok(TrainOutcome {
        curve,
        epoch_losses,
        test_metrics,
        reports,
        divergence,
        start_loss,
        end_loss,
        steps: step,
        model: engine.into_model()?,
    })
}

#[cfg(test)]
mod tests;
