//! SGD on a linear hypernet with fixed embeddings, carried out directly on
//! the generated weights.
//!
//! With no trunk and fixed features, emission `m` of head `(H, β)` is
//! `W_m = H f_m + β`. One SGD step on `H` and `β` changes it by
//! `-lr Σ_s (f_s·f_m + 1) ∂W_s` over the emissions `s` sharing the head, so
//! the head itself never needs to be touched. The per-emission sums
//! `U_s = -lr Σ_steps ∂W_s` are kept so the head can be rebuilt exactly as
//! `H = H0 + Σ_s U_s f_sᵀ`, `β = β0 + Σ_s U_s`.

use crate::error::{Error, Result};
use crate::hypergen::{Hypernet, Slot};
use crate::mainnet::{MainnetGrads, MainnetParams};

#[derive(Clone, Debug)]
pub(crate) struct FixedFeatures {
    /// Current generated parameters.
    pub params: MainnetParams,
    /// Per emission, the feature row its head reads.
    features: Vec<Vec<f64>>,
    /// Per emission, `(s, f_s·f_m + 1)` for every emission `s` on its head.
    coupling: Vec<Vec<(usize, f64)>>,
    /// Per emission, the accumulated update `U_s`.
    accum: Vec<Vec<f64>>,
    slots: Vec<Slot>,
}

pub(crate) fn eligible(hn: &Hypernet) -> bool {
    !hn.spec.embeddings_trainable && hn.spec.hidden_layers.is_empty()
}

fn slot_data<'a>(p: &'a MainnetParams, slot: Slot) -> &'a [f64] {
    match slot {
        Slot::Weight { layer } => p.layers[layer].weight.data(),
        Slot::Bias { layer } => p.layers[layer].bias.data(),
        Slot::Chunk { .. } => unreachable!("chunked generation always has a trunk"),
    }
}

fn grad_data(g: &MainnetGrads, slot: Slot) -> &[f64] {
    match slot {
        Slot::Weight { layer } => g.weights[layer].data(),
        Slot::Bias { layer } => g.biases[layer].data(),
        Slot::Chunk { .. } => unreachable!("chunked generation always has a trunk"),
    }
}

impl FixedFeatures {
    pub fn new(hn: &Hypernet) -> Result<Self> {
        if !eligible(hn) {
            return Err(Error::spec("fixed-feature updates need a linear hypernet with fixed embeddings"));
        }
        let (params, trace) = hn.generate()?;
        let n = hn.emissions.len();
        let mut features = vec![Vec::new(); n];
        for h in 0..hn.heads.len() {
            for (r, &i) in hn.head_emissions(h).iter().enumerate() {
                features[i] = trace.head_inputs[h].row(r).to_vec();
            }
        }
        let coupling = (0..n)
            .map(|m| {
                hn.head_emissions(hn.emissions[m].head)
                    .iter()
                    .map(|&s| {
                        let dot: f64 = features[s].iter().zip(&features[m]).map(|(a, b)| a * b).sum();
                        (s, dot + 1.0)
                    })
                    .collect()
            })
            .collect();
        let slots: Vec<Slot> = hn.emissions.iter().map(|e| e.slot).collect();
        let accum = slots.iter().map(|&s| vec![0.0; slot_data(&params, s).len()]).collect();
        Ok(FixedFeatures {
            params,
            features,
            coupling,
            accum,
            slots,
        })
    }

    /// Applies one SGD step given the mainnet gradients at `self.params`.
    pub fn step(&mut self, grads: &MainnetGrads, lr: f64) {
        for (m, &slot) in self.slots.iter().enumerate() {
            let out: &mut [f64] = match slot {
                Slot::Weight { layer } => self.params.layers[layer].weight.data_mut(),
                Slot::Bias { layer } => self.params.layers[layer].bias.data_mut(),
                Slot::Chunk { .. } => unreachable!(),
            };
            for &(s, c) in &self.coupling[m] {
                let g = grad_data(grads, self.slots[s]);
                let k = -lr * c;
                out.iter_mut().zip(g).for_each(|(o, g)| *o += k * g);
            }
        }
        for (s, u) in self.accum.iter_mut().enumerate() {
            let g = grad_data(grads, self.slots[s]);
            u.iter_mut().zip(g).for_each(|(u, g)| *u -= lr * g);
        }
    }

    /// The hypernet whose generated parameters are `self.params`, given the
    /// hypernet the updates started from.
    pub fn materialize(&self, base: &Hypernet) -> Result<Hypernet> {
        let mut hn = base.clone();
        for (s, u) in self.accum.iter().enumerate() {
            let head = &mut hn.heads[base.emissions[s].head];
            let f = &self.features[s];
            let d = f.len();
            let w = head.weight.data_mut();
            for (p, &up) in u.iter().enumerate() {
                if up != 0.0 {
                    w[p * d..(p + 1) * d].iter_mut().zip(f).for_each(|(w, f)| *w += up * f);
                }
            }
            head.bias.data_mut().iter_mut().zip(u).for_each(|(b, u)| *b += u);
        }
        Ok(hn)
    }
}
