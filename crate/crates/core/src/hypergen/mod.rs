//! Hypernetworks that generate mainnet parameters from embeddings.
//!
//! A hypernet is a set of *emissions*. Each emission takes one embedding
//! through a trunk (a stack of dense layers, possibly empty) and then through a
//! linear generator head, and writes the head output into one slot of the
//! mainnet parameters: a whole weight tensor, a bias vector, or one
//! `(K, n, n)` chunk of a convolution kernel.
//!
//! Heads and trunks may serve many emissions. Gradients of shared
//! parameters are the sums over the emissions that use them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mainnet::{Activation, BiasSource, LayerKind, MainnetParams, MainnetSpec};
use crate::rng::Distribution;
use crate::tensor::{gemm, MatRef, Tensor};

/// Chunk grid for generating convolution kernels in `(K, n, n)` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    /// Output channels per chunk.
    pub k: usize,
    /// Kernel side.
    pub n: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadTopology {
    /// One head per mainnet layer.
    PerLayerHeads,
    /// Layers with identical weight shapes share one head.
    SharedSameSize,
    /// Convolution kernels are assembled from chunks emitted by one shared
    /// head; each chunk has its own embedding and its own trunk.
    Chunked(ChunkPlan),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypernetSpec {
    pub embedding_dim: usize,
    /// Trunk widths. Empty means the head reads the embedding directly.
    pub hidden_layers: Vec<usize>,
    pub hidden_activation: Activation,
    pub embedding_distribution: Distribution,
    pub embeddings_trainable: bool,
    pub head_topology: HeadTopology,
    pub generates_bias: bool,
    /// Weight and bias heads read the same embedding through the same trunk.
    pub shared_trunk: bool,
}

impl HypernetSpec {
    /// A one-layer (linear) hypernet with fixed `U(-√3, √3)` embeddings.
    pub fn linear(embedding_dim: usize) -> Self {
        HypernetSpec {
            embedding_dim,
            hidden_layers: Vec::new(),
            hidden_activation: Activation::Identity,
            embedding_distribution: Distribution::uniform(1.0).expect("unit variance"),
            embeddings_trainable: false,
            head_topology: HeadTopology::PerLayerHeads,
            generates_bias: false,
            shared_trunk: false,
        }
    }

    pub fn with_hidden(mut self, widths: &[usize], activation: Activation) -> Self {
        self.hidden_layers = widths.to_vec();
        self.hidden_activation = activation;
        self
    }

    pub fn with_topology(mut self, topology: HeadTopology) -> Self {
        self.head_topology = topology;
        self
    }

    pub fn with_bias(mut self, generates_bias: bool) -> Self {
        self.generates_bias = generates_bias;
        self
    }

    pub fn with_trainable_embeddings(mut self, trainable: bool) -> Self {
        self.embeddings_trainable = trainable;
        self
    }

    pub fn with_shared_trunk(mut self, shared: bool) -> Self {
        self.shared_trunk = shared;
        self
    }

    /// Width of the features a head reads.
    pub fn feature_dim(&self) -> usize {
        self.hidden_layers.last().copied().unwrap_or(self.embedding_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `(out, in)`.
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(d_in: usize, d_out: usize, activation: Activation) -> Result<Self> {
        Ok(DenseLayer {
            weight: Tensor::zeros(&[d_out, d_in])?,
            bias: Tensor::zeros(&[d_out])?,
            activation,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// The hidden layers between an embedding and a head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trunk {
    pub layers: Vec<DenseLayer>,
}

impl Trunk {
    fn new(d_in: usize, widths: &[usize], activation: Activation) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = d_in;
        for &w in widths {
            layers.push(DenseLayer::zeros(prev, w, activation)?);
            prev = w;
        }
        Ok(Trunk { layers })
    }
}

/// Which part of the mainnet a head output fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Weight { layer: usize },
    Bias { layer: usize },
    /// Output channels `block·K .. (block+1)·K` of input channel `in_channel`.
    Chunk { layer: usize, block: usize, in_channel: usize },
}

impl Slot {
    pub fn layer(&self) -> usize {
        match *self {
            Slot::Weight { layer } | Slot::Bias { layer } | Slot::Chunk { layer, .. } => layer,
        }
    }

    pub fn is_bias(&self) -> bool {
        matches!(self, Slot::Bias { .. })
    }
}

/// A linear output layer `out = H f + β`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorHead {
    /// `(outputs, features)`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl GeneratorHead {
    fn zeros(d_in: usize, d_out: usize) -> Result<Self> {
        Ok(GeneratorHead {
            weight: Tensor::zeros(&[d_out, d_in])?,
            bias: Tensor::zeros(&[d_out])?,
        })
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    pub embedding: usize,
    pub trunk: usize,
    pub head: usize,
    pub slot: Slot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypernet {
    pub spec: HypernetSpec,
    pub mainnet: MainnetSpec,
    pub embeddings: Vec<Tensor>,
    pub trunks: Vec<Trunk>,
    pub heads: Vec<GeneratorHead>,
    pub emissions: Vec<Emission>,
    /// Embeddings read by each trunk, in feature-row order.
    trunk_rows: Vec<Vec<usize>>,
    /// Feature row of each emission within its trunk.
    emission_row: Vec<usize>,
    /// Emissions served by each head, in head-row order.
    head_emissions: Vec<Vec<usize>>,
}

/// Forward quantities retained for backpropagation and probing.
#[derive(Clone, Debug)]
pub struct GenerationTrace {
    /// Per trunk, the input of every trunk layer (the first is the stacked embeddings).
    pub trunk_inputs: Vec<Vec<Tensor>>,
    pub trunk_pre: Vec<Vec<Tensor>>,
    /// Per trunk, the output features, one row per embedding.
    pub features: Vec<Tensor>,
    /// Per head, the features it read, one row per emission.
    pub head_inputs: Vec<Tensor>,
    /// Per head, its outputs, one row per emission.
    pub head_outputs: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct HyperGrads {
    /// Per trunk, per layer `(∂W, ∂b)`.
    pub trunks: Vec<Vec<(Tensor, Tensor)>>,
    /// Per head `(∂H, ∂β)`.
    pub heads: Vec<(Tensor, Tensor)>,
    pub embeddings: Vec<Tensor>,
    /// Per head, the gradient of its input features.
    pub head_inputs: Vec<Tensor>,
    /// Per head, the gradient of its outputs.
    pub head_outputs: Vec<Tensor>,
}

impl HyperGrads {
    /// All gradients in [`Hypernet::params_mut`] order.
    pub fn tensors(&self, include_embeddings: bool) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for t in &self.trunks {
            for (w, b) in t {
                out.push(w);
                out.push(b);
            }
        }
        for (w, b) in &self.heads {
            out.push(w);
            out.push(b);
        }
        if include_embeddings {
            out.extend(self.embeddings.iter());
        }
        out
    }
}

struct Builder {
    spec: HypernetSpec,
    embeddings: usize,
    trunks: Vec<Trunk>,
    heads: Vec<GeneratorHead>,
    emissions: Vec<Emission>,
}

impl Builder {
    fn embedding(&mut self) -> usize {
        self.embeddings += 1;
        self.embeddings - 1
    }

    fn trunk(&mut self) -> Result<usize> {
        let s = &self.spec;
        self.trunks
            .push(Trunk::new(s.embedding_dim, &s.hidden_layers, s.hidden_activation)?);
        Ok(self.trunks.len() - 1)
    }

    fn head(&mut self, outputs: usize) -> Result<usize> {
        self.heads.push(GeneratorHead::zeros(self.spec.feature_dim(), outputs)?);
        Ok(self.heads.len() - 1)
    }

    fn emit(&mut self, embedding: usize, trunk: usize, head: usize, slot: Slot) {
        self.emissions.push(Emission {
            embedding,
            trunk,
            head,
            slot,
        });
    }
}

impl Hypernet {
    /// Lays out embeddings, trunks, heads and emissions with zero parameters.
    pub fn build(spec: &HypernetSpec, mainnet: &MainnetSpec) -> Result<Self> {
        mainnet.validate()?;
        if spec.embedding_dim == 0 || spec.hidden_layers.contains(&0) {
            return Err(Error::spec("hypernet widths must be positive"));
        }
        let generated: Vec<bool> = mainnet
            .layers
            .iter()
            .map(|l| l.bias_source == BiasSource::Generated)
            .collect();
        if spec.generates_bias != generated.iter().any(|&g| g) {
            return Err(Error::spec(
                "generates_bias must agree with the mainnet layers' bias sources",
            ));
        }
        let mut b = Builder {
            spec: spec.clone(),
            embeddings: 0,
            trunks: Vec::new(),
            heads: Vec::new(),
            emissions: Vec::new(),
        };
        match spec.head_topology {
            HeadTopology::PerLayerHeads | HeadTopology::SharedSameSize => {
                let shared = spec.head_topology == HeadTopology::SharedSameSize;
                let wt = b.trunk()?;
                let bt = if spec.generates_bias && !spec.shared_trunk { b.trunk()? } else { wt };
                let mut groups: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
                let mut bias_groups: BTreeMap<usize, usize> = BTreeMap::new();
                for (t, l) in mainnet.layers.iter().enumerate() {
                    let e1 = b.embedding();
                    let key = l.weight_shape();
                    let head = match (shared, groups.get(&key)) {
                        (true, Some(&h)) => h,
                        _ => {
                            let h = b.head(l.weight_len())?;
                            groups.insert(key, h);
                            h
                        }
                    };
                    b.emit(e1, wt, head, Slot::Weight { layer: t });
                    if generated[t] {
                        let e2 = if spec.shared_trunk { e1 } else { b.embedding() };
                        let head = match (shared, bias_groups.get(&l.d_out)) {
                            (true, Some(&h)) => h,
                            _ => {
                                let h = b.head(l.d_out)?;
                                bias_groups.insert(l.d_out, h);
                                h
                            }
                        };
                        b.emit(e2, bt, head, Slot::Bias { layer: t });
                    }
                }
            }
            HeadTopology::Chunked(plan) => {
                if plan.k == 0 || plan.n == 0 {
                    return Err(Error::spec("chunk sizes must be positive"));
                }
                if spec.hidden_layers.is_empty() {
                    return Err(Error::spec("chunked generation needs at least one per-chunk trunk layer"));
                }
                let mut chunk_head = None;
                for (t, l) in mainnet.layers.iter().enumerate() {
                    match l.kind {
                        LayerKind::Conv2d(g) => {
                            if g.kernel_h != plan.n || g.kernel_w != plan.n {
                                return Err(Error::spec(format!(
                                    "layer {t}: kernel {}x{} does not match chunk side {}",
                                    g.kernel_h, g.kernel_w, plan.n
                                )));
                            }
                            if l.d_out % plan.k != 0 {
                                return Err(Error::spec(format!(
                                    "layer {t}: {} output channels not divisible by K = {}",
                                    l.d_out, plan.k
                                )));
                            }
                            let head = match chunk_head {
                                Some(h) => h,
                                None => {
                                    let h = b.head(plan.k * plan.n * plan.n)?;
                                    chunk_head = Some(h);
                                    h
                                }
                            };
                            for block in 0..l.d_out / plan.k {
                                for in_channel in 0..l.d_in {
                                    let e = b.embedding();
                                    let tr = b.trunk()?;
                                    b.emit(e, tr, head, Slot::Chunk { layer: t, block, in_channel });
                                }
                            }
                        }
                        LayerKind::Dense => {
                            let e = b.embedding();
                            let tr = b.trunk()?;
                            let h = b.head(l.weight_len())?;
                            b.emit(e, tr, h, Slot::Weight { layer: t });
                        }
                    }
                    if generated[t] {
                        let e = b.embedding();
                        let tr = b.trunk()?;
                        let h = b.head(l.d_out)?;
                        b.emit(e, tr, h, Slot::Bias { layer: t });
                    }
                }
            }
        }

        let mut trunk_rows = vec![Vec::new(); b.trunks.len()];
        let mut emission_row = Vec::with_capacity(b.emissions.len());
        let mut head_emissions = vec![Vec::new(); b.heads.len()];
        for (i, em) in b.emissions.iter().enumerate() {
            let rows: &mut Vec<usize> = &mut trunk_rows[em.trunk];
            let row = match rows.iter().position(|&e| e == em.embedding) {
                Some(r) => r,
                None => {
                    rows.push(em.embedding);
                    rows.len() - 1
                }
            };
            emission_row.push(row);
            head_emissions[em.head].push(i);
        }
        let embeddings = (0..b.embeddings)
            .map(|_| Tensor::zeros(&[spec.embedding_dim]))
            .collect::<Result<_>>()?;
        Ok(Hypernet {
            spec: spec.clone(),
            mainnet: mainnet.clone(),
            embeddings,
            trunks: b.trunks,
            heads: b.heads,
            emissions: b.emissions,
            trunk_rows,
            emission_row,
            head_emissions,
        })
    }

    /// Emissions served by `head`, in head-row order.
    pub fn head_emissions(&self, head: usize) -> &[usize] {
        &self.head_emissions[head]
    }

    /// Embeddings read by `trunk`, in feature-row order.
    pub fn trunk_rows(&self, trunk: usize) -> &[usize] {
        &self.trunk_rows[trunk]
    }

    /// Feature row of emission `i` within its trunk's output.
    pub fn emission_row(&self, i: usize) -> usize {
        self.emission_row[i]
    }

    /// Chunk index `m = block · c_in + in_channel` of a chunk slot.
    pub fn chunk_index(&self, slot: &Slot) -> Option<usize> {
        match *slot {
            Slot::Chunk { layer, block, in_channel } => Some(block * self.mainnet.layers[layer].d_in + in_channel),
            _ => None,
        }
    }

    /// Head serving the weight of `layer` (for chunked layers, the chunk head).
    pub fn weight_head(&self, layer: usize) -> Option<usize> {
        self.emissions
            .iter()
            .find(|e| e.slot.layer() == layer && !e.slot.is_bias())
            .map(|e| e.head)
    }

    pub fn bias_head(&self, layer: usize) -> Option<usize> {
        self.emissions
            .iter()
            .find(|e| e.slot == Slot::Bias { layer })
            .map(|e| e.head)
    }

    /// Trainable tensors in a fixed order: trunk layers, heads, then
    /// embeddings when they are trainable.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let trainable = self.spec.embeddings_trainable;
        self.params_mut_with(trainable)
    }

    /// Like [`params_mut`](Self::params_mut) with explicit control over the embeddings.
    pub fn params_mut_with(&mut self, include_embeddings: bool) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for t in &mut self.trunks {
            for l in &mut t.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        for h in &mut self.heads {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        if include_embeddings {
            out.extend(self.embeddings.iter_mut());
        }
        out
    }

    /// Read-only view in [`params_mut_with`](Self::params_mut_with) order.
    pub fn params_with(&self, include_embeddings: bool) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.trunks.iter().flat_map(|t| &t.layers) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        for h in &self.heads {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        if include_embeddings {
            out.extend(self.embeddings.iter());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let trunks: usize = self.trunks.iter().flat_map(|t| &t.layers).map(|l| l.weight.len() + l.bias.len()).sum();
        let heads: usize = self.heads.iter().map(|h| h.weight.len() + h.bias.len()).sum();
        let emb = if self.spec.embeddings_trainable {
            self.embeddings.iter().map(Tensor::len).sum()
        } else {
            0
        };
        trunks + heads + emb
    }

    /// Runs every trunk and head and assembles the mainnet parameters.
    pub fn generate(&self) -> Result<(MainnetParams, GenerationTrace)> {
        let d_e = self.spec.embedding_dim;
        let mut trunk_inputs = Vec::with_capacity(self.trunks.len());
        let mut trunk_pre = Vec::with_capacity(self.trunks.len());
        let mut features = Vec::with_capacity(self.trunks.len());
        for (ti, trunk) in self.trunks.iter().enumerate() {
            let rows = &self.trunk_rows[ti];
            let mut x = Tensor::zeros(&[rows.len().max(1), d_e])?;
            for (r, &e) in rows.iter().enumerate() {
                let emb = &self.embeddings[e];
                if emb.len() != d_e {
                    return Err(Error::shape(format!("embedding {e} has {} entries, expected {d_e}", emb.len())));
                }
                x.data_mut()[r * d_e..(r + 1) * d_e].copy_from_slice(emb.data());
            }
            let m = x.shape()[0];
            let mut ins = Vec::with_capacity(trunk.layers.len());
            let mut pres = Vec::with_capacity(trunk.layers.len());
            for l in &trunk.layers {
                let y = dense_forward(&x, &l.weight, &l.bias, m)?;
                let a = y.map(|v| l.activation.apply(v));
                ins.push(std::mem::replace(&mut x, a));
                pres.push(y);
            }
            trunk_inputs.push(ins);
            trunk_pre.push(pres);
            features.push(x);
        }

        let mut params = MainnetParams::zeros(&self.mainnet)?;
        let mut head_inputs = Vec::with_capacity(self.heads.len());
        let mut head_outputs = Vec::with_capacity(self.heads.len());
        for (hi, head) in self.heads.iter().enumerate() {
            let ems = &self.head_emissions[hi];
            let d = head.features();
            let mut f = Tensor::zeros(&[ems.len().max(1), d])?;
            for (r, &i) in ems.iter().enumerate() {
                let em = &self.emissions[i];
                let src = features[em.trunk].row(self.emission_row[i]);
                if src.len() != d {
                    return Err(Error::shape(format!("head {hi} reads {d} features, trunk gives {}", src.len())));
                }
                f.data_mut()[r * d..(r + 1) * d].copy_from_slice(src);
            }
            let out = dense_forward(&f, &head.weight, &head.bias, f.shape()[0])?;
            for (r, &i) in ems.iter().enumerate() {
                self.write_slot(&mut params, &self.emissions[i].slot, out.row(r))?;
            }
            head_inputs.push(f);
            head_outputs.push(out);
        }
        Ok((
            params,
            GenerationTrace {
                trunk_inputs,
                trunk_pre,
                features,
                head_inputs,
                head_outputs,
            },
        ))
    }

    fn chunk_plan(&self) -> Option<ChunkPlan> {
        match self.spec.head_topology {
            HeadTopology::Chunked(p) => Some(p),
            _ => None,
        }
    }

    fn write_slot(&self, params: &mut MainnetParams, slot: &Slot, values: &[f64]) -> Result<()> {
        let layer = &mut params.layers[slot.layer()];
        let dst = match *slot {
            Slot::Weight { .. } => layer.weight.data_mut(),
            Slot::Bias { .. } => layer.bias.data_mut(),
            Slot::Chunk { layer: t, block, in_channel } => {
                let plan = self.chunk_plan().expect("chunk slot without plan");
                let c_in = self.mainnet.layers[t].d_in;
                let nn = plan.n * plan.n;
                let w = layer.weight.data_mut();
                for kk in 0..plan.k {
                    let o = ((block * plan.k + kk) * c_in + in_channel) * nn;
                    w[o..o + nn].copy_from_slice(&values[kk * nn..(kk + 1) * nn]);
                }
                return Ok(());
            }
        };
        if dst.len() != values.len() {
            return Err(Error::spec(format!("slot {slot:?} holds {} values, head emits {}", dst.len(), values.len())));
        }
        dst.copy_from_slice(values);
        Ok(())
    }

    fn read_slot(&self, weights: &[Tensor], biases: &[Tensor], slot: &Slot, out: &mut [f64]) -> Result<()> {
        let t = slot.layer();
        let src = match *slot {
            Slot::Weight { .. } => weights[t].data(),
            Slot::Bias { .. } => biases[t].data(),
            Slot::Chunk { block, in_channel, .. } => {
                let plan = self.chunk_plan().expect("chunk slot without plan");
                let c_in = self.mainnet.layers[t].d_in;
                let nn = plan.n * plan.n;
                let w = weights[t].data();
                for kk in 0..plan.k {
                    let o = ((block * plan.k + kk) * c_in + in_channel) * nn;
                    out[kk * nn..(kk + 1) * nn].copy_from_slice(&w[o..o + nn]);
                }
                return Ok(());
            }
        };
        if src.len() != out.len() {
            return Err(Error::spec(format!("gradient for {slot:?} has {} values, expected {}", src.len(), out.len())));
        }
        out.copy_from_slice(src);
        Ok(())
    }

    /// Backpropagates mainnet parameter gradients into the hypernet.
    ///
    /// Bias gradients of layers whose bias is not generated are ignored.
    pub fn backward_generate(
        &self,
        trace: &GenerationTrace,
        weight_grads: &[Tensor],
        bias_grads: &[Tensor],
    ) -> Result<HyperGrads> {
        let layers = &self.mainnet.layers;
        if weight_grads.len() != layers.len() || bias_grads.len() != layers.len() {
            return Err(Error::spec("gradient list does not match the mainnet depth"));
        }
        for (t, l) in layers.iter().enumerate() {
            if weight_grads[t].shape() != l.weight_shape().as_slice() || bias_grads[t].shape() != [l.d_out] {
                return Err(Error::spec(format!("layer {t}: gradient shapes do not match the mainnet")));
            }
        }
        if trace.head_inputs.len() != self.heads.len() || trace.features.len() != self.trunks.len() {
            return Err(Error::spec("trace does not match this hypernet"));
        }
        let mut dfeatures: Vec<Tensor> = trace
            .features
            .iter()
            .map(|f| Tensor::zeros(f.shape()))
            .collect::<Result<_>>()?;
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut head_inputs = Vec::with_capacity(self.heads.len());
        let mut head_outputs = Vec::with_capacity(self.heads.len());
        for (hi, head) in self.heads.iter().enumerate() {
            let ems = &self.head_emissions[hi];
            let (p, d) = (head.outputs(), head.features());
            let s = trace.head_inputs[hi].shape()[0];
            let mut dout = Tensor::zeros(&[s, p])?;
            for (r, &i) in ems.iter().enumerate() {
                self.read_slot(weight_grads, bias_grads, &self.emissions[i].slot, &mut dout.data_mut()[r * p..(r + 1) * p])?;
            }
            let (dw, db, df) = dense_backward(&trace.head_inputs[hi], &head.weight, &dout, s)?;
            for (r, &i) in ems.iter().enumerate() {
                let em = &self.emissions[i];
                let row = self.emission_row[i];
                let dst = &mut dfeatures[em.trunk].data_mut()[row * d..(row + 1) * d];
                for (a, g) in dst.iter_mut().zip(df.row(r)) {
                    *a += g;
                }
            }
            heads.push((dw, db));
            head_inputs.push(df);
            head_outputs.push(dout);
        }

        let d_e = self.spec.embedding_dim;
        let mut embeddings: Vec<Tensor> = self
            .embeddings
            .iter()
            .map(|e| Tensor::zeros(e.shape()))
            .collect::<Result<_>>()?;
        let mut trunks = Vec::with_capacity(self.trunks.len());
        for (ti, trunk) in self.trunks.iter().enumerate() {
            let mut up = std::mem::replace(&mut dfeatures[ti], Tensor::vector(vec![0.0]));
            let m = up.shape()[0];
            let mut grads = vec![None; trunk.layers.len()];
            for (li, l) in trunk.layers.iter().enumerate().rev() {
                let y = &trace.trunk_pre[ti][li];
                let x_out = if li + 1 < trunk.layers.len() {
                    &trace.trunk_inputs[ti][li + 1]
                } else {
                    &trace.features[ti]
                };
                for ((g, yv), xv) in up.data_mut().iter_mut().zip(y.data()).zip(x_out.data()) {
                    *g *= l.activation.derivative(*yv, *xv);
                }
                let (dw, db, dx) = dense_backward(&trace.trunk_inputs[ti][li], &l.weight, &up, m)?;
                grads[li] = Some((dw, db));
                up = dx;
            }
            for (r, &e) in self.trunk_rows[ti].iter().enumerate() {
                for (a, g) in embeddings[e].data_mut().iter_mut().zip(&up.data()[r * d_e..(r + 1) * d_e]) {
                    *a += g;
                }
            }
            trunks.push(grads.into_iter().map(Option::unwrap).collect());
        }
        Ok(HyperGrads {
            trunks,
            heads,
            embeddings,
            head_inputs,
            head_outputs,
        })
    }
}

/// `x Wᵀ + b` for `m` rows.
fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor, m: usize) -> Result<Tensor> {
    let (d_out, d_in) = w.dims2()?;
    if x.len() != m * d_in {
        return Err(Error::shape(format!("input {:?} does not fit weight {:?}", x.shape(), w.shape())));
    }
    let mut y = Tensor::zeros(&[m, d_out])?;
    for row in y.data_mut().chunks_exact_mut(d_out) {
        row.copy_from_slice(b.data());
    }
    gemm(
        1.0,
        MatRef::new(x.data(), m, d_in, false),
        MatRef::new(w.data(), d_out, d_in, true),
        1.0,
        y.data_mut(),
        m,
        d_out,
    );
    Ok(y)
}

/// Gradients of `x Wᵀ + b` given `dy`: `(∂W, ∂b, ∂x)`.
fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor, m: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let (d_out, d_in) = w.dims2()?;
    let mut dw = Tensor::zeros(&[d_out, d_in])?;
    let mut db = Tensor::zeros(&[d_out])?;
    let mut dx = Tensor::zeros(&[m, d_in])?;
    for row in dy.data().chunks_exact(d_out) {
        for (a, g) in db.data_mut().iter_mut().zip(row) {
            *a += g;
        }
    }
    gemm(
        1.0,
        MatRef::new(dy.data(), m, d_out, true),
        MatRef::new(x.data(), m, d_in, false),
        0.0,
        dw.data_mut(),
        d_out,
        d_in,
    );
    gemm(
        1.0,
        MatRef::new(dy.data(), m, d_out, false),
        MatRef::new(w.data(), d_out, d_in, false),
        0.0,
        dx.data_mut(),
        m,
        d_in,
    );
    Ok((dw, db, dx))
}
