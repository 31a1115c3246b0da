//! Initialization of a whole hypernet under one scheme.

use serde::{Deserialize, Serialize};

use super::{Classical, FanGeometry, InitScheme, SchemeKind};
use crate::error::{Error, Result};
use crate::hypergen::{Hypernet, HypernetSpec, Slot};
use crate::mainnet::{Activation, BiasSource, MainnetSpec};
use crate::rng::{Distribution, Rng};
use crate::stats::mean_square;
use crate::tensor::Tensor;

/// Which `Var(e)` the hyperfan formulas are evaluated with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingVariance {
    /// The variance of the embedding distribution. Layers between the
    /// embedding and the head are assumed to preserve it.
    #[default]
    Declared,
    /// The mean square of the features actually feeding each head, measured
    /// on the fixed embeddings after the trunks are initialized.
    Empirical,
}

/// Initializes `hspec` for `mspec` with declared embedding variances.
pub fn init_hypernet(hspec: &HypernetSpec, mspec: &MainnetSpec, scheme: &InitScheme, rng: &mut Rng) -> Result<Hypernet> {
    init_hypernet_with(hspec, mspec, scheme, EmbeddingVariance::Declared, rng)
}

pub fn init_hypernet_with(
    hspec: &HypernetSpec,
    mspec: &MainnetSpec,
    scheme: &InitScheme,
    var_mode: EmbeddingVariance,
    rng: &mut Rng,
) -> Result<Hypernet> {
    let mut hn = Hypernet::build(hspec, mspec)?;
    let fam = scheme.family;
    let draw = |v: f64, shape: &[usize], rng: &mut Rng| -> Result<Tensor> {
        crate::rng::sample(&Distribution::new(fam, v)?, shape, rng)
    };

    for e in &mut hn.embeddings {
        hspec.embedding_distribution.fill(e.data_mut(), rng);
    }
    if scheme.kind == SchemeKind::ConstantEmbeddingKaiming {
        for em in hn.emissions.clone() {
            let c = (mspec.layers[em.slot.layer()].fan_in() as f64).powf(-0.5);
            hn.embeddings[em.embedding].fill(c);
        }
    }

    let chunk_heads: Vec<bool> = (0..hn.heads.len())
        .map(|h| {
            hn.head_emissions(h)
                .iter()
                .any(|&i| matches!(hn.emissions[i].slot, Slot::Chunk { .. }))
        })
        .collect();
    let chunk_trunk_head: Vec<Option<usize>> = (0..hn.trunks.len())
        .map(|t| {
            hn.emissions
                .iter()
                .find(|e| e.trunk == t && chunk_heads[e.head])
                .map(|e| e.head)
        })
        .collect();

    // Trunks: fan-in (Kaiming gain for ReLU layers) under the hyperfan
    // schemes, the classical formula otherwise.
    for trunk in &mut hn.trunks {
        for l in &mut trunk.layers {
            let (d_in, d_out) = (l.d_in(), l.d_out());
            let v = trunk_variance(scheme, d_in, d_out, l.activation);
            l.weight = draw(v, &[d_out, d_in], rng)?;
            l.bias.fill(0.0);
        }
    }

    let hyperfan = scheme.kind.is_hyperfan();
    if hyperfan {
        // The last layer of every chunk trunk is the effective output layer.
        let feats = if var_mode == EmbeddingVariance::Empirical {
            Some(hn.generate()?.1)
        } else {
            None
        };
        for t in 0..hn.trunks.len() {
            if chunk_trunk_head[t].is_none() {
                continue;
            }
            let em = *hn.emissions.iter().find(|e| e.trunk == t).expect("trunk has an emission");
            let layer = &mspec.layers[em.slot.layer()];
            let last = hn.trunks[t].layers.len() - 1;
            let l = &hn.trunks[t].layers[last];
            let var_in = match &feats {
                Some(tr) => mean_square(tr.trunk_inputs[t][last].data()),
                None => hspec.embedding_distribution.variance,
            };
            check_input_variance(var_in)?;
            let target = target_weight_variance(scheme, layer)?;
            let relu_out = if l.activation == Activation::Relu { 2.0 } else { 1.0 };
            let v = relu_out * target / (l.d_in() as f64 * var_in);
            let shape = [l.d_out(), l.d_in()];
            hn.trunks[t].layers[last].weight = draw(v, &shape, rng)?;
        }
    }

    let head_inputs = match (hyperfan, var_mode) {
        (true, EmbeddingVariance::Empirical) => Some(hn.generate()?.1.head_inputs),
        _ => None,
    };
    for h in 0..hn.heads.len() {
        let (p, d) = (hn.heads[h].outputs(), hn.heads[h].features());
        let v = if !hyperfan {
            classical_head_variance(scheme, d, p)
        } else if chunk_heads[h] {
            1.0 / d as f64
        } else {
            let var_in = match &head_inputs {
                Some(hi) => mean_square(hi[h].data()),
                None => hspec.embedding_distribution.variance,
            };
            check_input_variance(var_in)?;
            head_variance(&hn, h, scheme, mspec, d, var_in)?
        };
        let mut w = draw(v, &[p, d], rng)?;
        if scheme.kind == SchemeKind::ScaledOutputKaiming {
            w.scale(scheme.scale());
        }
        hn.heads[h].weight = w;
        hn.heads[h].bias.fill(0.0);
    }
    Ok(hn)
}

fn check_input_variance(v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::spec(format!("head input variance must be positive, measured {v}")))
    }
}

pub(crate) fn trunk_variance(scheme: &InitScheme, d_in: usize, d_out: usize, activation: Activation) -> f64 {
    if scheme.kind.is_hyperfan() {
        let geom = FanGeometry::dense(d_out, d_in, 1);
        super::classical_variance(Classical::FanIn, &geom, activation == Activation::Relu)
    } else {
        scheme.plain_layer_variance(d_in, d_out, scheme.relu_gain)
    }
}

/// Head variance for the non-hyperfan schemes, before any output scaling.
/// The head is an ordinary layer with `d` inputs and `p` outputs.
pub fn classical_head_variance(scheme: &InitScheme, d: usize, p: usize) -> f64 {
    match scheme.kind {
        SchemeKind::SmallRandom => scheme.scale() * scheme.scale(),
        SchemeKind::ScaledOutputKaiming | SchemeKind::ConstantEmbeddingKaiming => {
            super::classical_variance(Classical::FanIn, &FanGeometry::dense(p, d, 1), scheme.relu_gain)
        }
        _ => scheme.plain_layer_variance(d, p, scheme.relu_gain),
    }
}

/// The ReLU indicator for a mainnet layer: only layers followed by a ReLU.
pub(crate) fn layer_relu(scheme: &InitScheme, layer: &crate::mainnet::LayerSpec) -> bool {
    scheme.relu_gain && layer.activation == Activation::Relu
}

/// The mainnet weight variance a hyperfan scheme aims for.
pub(crate) fn target_weight_variance(scheme: &InitScheme, layer: &crate::mainnet::LayerSpec) -> Result<f64> {
    let scheme = scheme.with_hypernet_bias(layer.bias_source == BiasSource::Generated);
    let unit = layer.fan_geometry(1, 1, 1.0, 1.0);
    scheme
        .hyperfan_weight_variance(&unit, layer_relu(&scheme, layer))
        .ok_or_else(|| Error::spec("not a hyperfan scheme"))
}

/// Hyperfan variance for a head that serves whole weights or biases. Every
/// layer it serves must agree on the value.
pub(crate) fn head_variance(hn: &Hypernet, h: usize, scheme: &InitScheme, mspec: &MainnetSpec, d: usize, var_in: f64) -> Result<f64> {
    let mut value: Option<f64> = None;
    for &i in hn.head_emissions(h) {
        let em = hn.emissions[i];
        let layer = &mspec.layers[em.slot.layer()];
        let s = scheme.with_hypernet_bias(layer.bias_source == BiasSource::Generated);
        let relu = layer_relu(&s, layer);
        let geom = layer.fan_geometry(d, d, var_in, var_in);
        geom.validate()?;
        let v = match em.slot {
            Slot::Weight { .. } => s.hyperfan_weight_variance(&geom, relu),
            Slot::Bias { .. } => s.hyperfan_bias_variance(&geom, relu),
            Slot::Chunk { .. } => unreachable!("chunk heads are handled separately"),
        }
        .expect("hyperfan scheme");
        match value {
            None => value = Some(v),
            Some(prev) if (prev - v).abs() <= 1e-12 * prev.abs().max(v.abs()) => {}
            Some(prev) => {
                return Err(Error::spec(format!(
                    "head {h} is shared by layers needing different variances ({prev} vs {v}); \
                     use per-layer heads or chunked generation"
                )))
            }
        }
    }
    value.ok_or_else(|| Error::spec(format!("head {h} serves nothing")))
}
