//! Closed-form initialization variances.
//!
//! Notation follows the generated layer `y^i = W^i_j x^j + b^i` with
//! `W^i_j = H^i_jk h(e[1])^k + β^i_j` and `b^i = G^i_l g(e[2])^l + γ^i`:
//! `d_i` is the layer's output width, `d_j` its input width (channels for a
//! convolution), `d_k`/`d_l` the widths feeding the weight and bias heads, and
//! `r` the receptive field (`kh · kw`, 1 for dense layers).
//!
//! The ReLU indicator contributes a factor `2`; the hypernet-bias indicator
//! halves the hyperfan-in weight variance so the other half of the output
//! variance can come from the generated bias.

mod hypernet;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use hypernet::{init_hypernet, init_hypernet_with, EmbeddingVariance};
pub use hypernet::classical_head_variance;
pub(crate) use hypernet::{layer_relu, target_weight_variance, trunk_variance};

use crate::error::{Error, Result};
use crate::rng::Family;

/// The geometry a head's variance formula is evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FanGeometry {
    /// Mainnet layer fan-out (output width / channels).
    pub d_i: usize,
    /// Mainnet layer fan-in (input width / channels).
    pub d_j: usize,
    /// Width of `h(e[1])`, the weight head's input.
    pub d_k: usize,
    /// Width of `g(e[2])`, the bias head's input.
    pub d_l: usize,
    pub var_e1: f64,
    pub var_e2: f64,
    pub receptive_field: usize,
}

impl FanGeometry {
    /// A dense-layer geometry with unit embedding variances and `d_l = d_k`.
    pub fn dense(d_i: usize, d_j: usize, d_k: usize) -> Self {
        FanGeometry {
            d_i,
            d_j,
            d_k,
            d_l: d_k,
            var_e1: 1.0,
            var_e2: 1.0,
            receptive_field: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_i == 0 || self.d_j == 0 || self.d_k == 0 || self.d_l == 0 || self.receptive_field == 0 {
            return Err(Error::invalid(format!("geometry dimensions must be positive: {self:?}")));
        }
        if !(self.var_e1 > 0.0 && self.var_e1.is_finite() && self.var_e2 > 0.0 && self.var_e2.is_finite()) {
            return Err(Error::invalid(format!("embedding variances must be positive: {self:?}")));
        }
        Ok(())
    }

    fn fan_in(&self) -> f64 {
        (self.d_j * self.receptive_field) as f64
    }

    fn fan_out(&self) -> f64 {
        (self.d_i * self.receptive_field) as f64
    }
}

fn gain(relu: bool) -> f64 {
    if relu {
        2.0
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Classical {
    FanIn,
    FanOut,
    Harmonic,
}

/// Fan-in, fan-out or harmonic (Glorot) variance for an ordinary layer.
pub fn classical_variance(kind: Classical, geom: &FanGeometry, relu_gain: bool) -> f64 {
    let g = gain(relu_gain);
    match kind {
        Classical::FanIn => g / geom.fan_in(),
        Classical::FanOut => g / geom.fan_out(),
        Classical::Harmonic => 2.0 * g / (geom.fan_in() + geom.fan_out()),
    }
}

/// `Var(H) = 2^relu / (2^hbias · d_j · d_k · Var(e[1]) · r)`.
pub fn hyperfan_in_weight_variance(geom: &FanGeometry, relu_gain: bool, hypernet_bias: bool) -> f64 {
    let split = if hypernet_bias { 2.0 } else { 1.0 };
    gain(relu_gain) / (split * geom.d_j as f64 * geom.d_k as f64 * geom.var_e1 * geom.receptive_field as f64)
}

/// `Var(H) = 2^relu / (d_i · d_k · Var(e[1]) · r)`.
pub fn hyperfan_out_weight_variance(geom: &FanGeometry, relu_gain: bool) -> f64 {
    gain(relu_gain) / (geom.d_i as f64 * geom.d_k as f64 * geom.var_e1 * geom.receptive_field as f64)
}

/// `Var(G) = 2^relu / (2 · d_l · Var(e[2]))`. Biases are per output channel,
/// so there is no receptive-field divisor.
pub fn hyperfan_in_bias_variance(geom: &FanGeometry, relu_gain: bool) -> f64 {
    gain(relu_gain) / (2.0 * geom.d_l as f64 * geom.var_e2)
}

/// `Var(G) = max(2^relu (1 - d_j/d_i) / (d_l · Var(e[2])), 0)`.
///
/// This is the bias share left over once the hyperfan-out weights have
/// contributed `d_j / d_i` of the forward variance.
pub fn hyperfan_out_bias_variance(geom: &FanGeometry, relu_gain: bool) -> f64 {
    let share = 1.0 - geom.d_j as f64 / geom.d_i as f64;
    (gain(relu_gain) * share / (geom.d_l as f64 * geom.var_e2)).max(0.0)
}

/// Predicted `Var(∂L/∂h(e)) / Var(∂L/∂W)` under hyperfan-out init of a
/// linear layer: `d_j / (d_k · Var(e[1]))`.
pub fn gradient_shrink_factor(geom: &FanGeometry) -> f64 {
    geom.d_j as f64 / (geom.d_k as f64 * geom.var_e1)
}

/// How two variance formulas are combined in [`SchemeKind::HyperfanMean`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeanKind {
    Harmonic,
    Geometric,
    Arithmetic,
}

impl MeanKind {
    pub fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            MeanKind::Arithmetic => 0.5 * (a + b),
            MeanKind::Geometric => (a * b).sqrt(),
            MeanKind::Harmonic => {
                if a + b == 0.0 {
                    0.0
                } else {
                    2.0 * a * b / (a + b)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    /// Classical fan-in applied to every hypernet layer (Xavier/Kaiming).
    FanIn,
    FanOut,
    Harmonic,
    HyperfanIn,
    HyperfanOut,
    /// Every hypernet weight drawn with standard deviation `scale_param`.
    SmallRandom,
    /// Kaiming fan-in with output-layer samples multiplied by `scale_param`.
    ScaledOutputKaiming,
    /// Kaiming fan-in with embeddings overwritten by `fan_in^{-1/2}`.
    ConstantEmbeddingKaiming,
    /// A mean of the hyperfan-in and hyperfan-out formulas.
    HyperfanMean(MeanKind),
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 11] = [
        SchemeKind::FanIn,
        SchemeKind::FanOut,
        SchemeKind::Harmonic,
        SchemeKind::HyperfanIn,
        SchemeKind::HyperfanOut,
        SchemeKind::SmallRandom,
        SchemeKind::ScaledOutputKaiming,
        SchemeKind::ConstantEmbeddingKaiming,
        SchemeKind::HyperfanMean(MeanKind::Harmonic),
        SchemeKind::HyperfanMean(MeanKind::Geometric),
        SchemeKind::HyperfanMean(MeanKind::Arithmetic),
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::FanIn => "fan-in",
            SchemeKind::FanOut => "fan-out",
            SchemeKind::Harmonic => "harmonic",
            SchemeKind::HyperfanIn => "hyperfan-in",
            SchemeKind::HyperfanOut => "hyperfan-out",
            SchemeKind::SmallRandom => "small-random",
            SchemeKind::ScaledOutputKaiming => "scaled-output",
            SchemeKind::ConstantEmbeddingKaiming => "const-embedding",
            SchemeKind::HyperfanMean(MeanKind::Harmonic) => "hyperfan-harmonic",
            SchemeKind::HyperfanMean(MeanKind::Geometric) => "hyperfan-geometric",
            SchemeKind::HyperfanMean(MeanKind::Arithmetic) => "hyperfan-arithmetic",
        }
    }

    /// The hyperfan family derives the head variance from the mainnet layer.
    pub fn is_hyperfan(self) -> bool {
        matches!(
            self,
            SchemeKind::HyperfanIn | SchemeKind::HyperfanOut | SchemeKind::HyperfanMean(_)
        )
    }

    /// Schemes aimed at preserving backward (gradient) variance.
    pub fn is_backward(self) -> bool {
        matches!(self, SchemeKind::FanOut | SchemeKind::HyperfanOut)
    }

    fn default_scale(self) -> Option<f64> {
        match self {
            SchemeKind::SmallRandom => Some(0.01),
            SchemeKind::ScaledOutputKaiming => Some(0.1),
            _ => None,
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = SchemeKind::ALL.iter().map(|k| k.name()).collect();
                Error::invalid(format!("unknown scheme {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// An initialization strategy with its indicator flags.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub kind: SchemeKind,
    /// Apply the ReLU gain of 2 (to ReLU layers for hyperfan schemes, to every
    /// hypernet layer for the classical baselines).
    pub relu_gain: bool,
    /// The hypernet also generates the mainnet biases.
    pub hypernet_bias: bool,
    pub family: Family,
    pub scale_param: Option<f64>,
}

impl InitScheme {
    pub fn new(kind: SchemeKind) -> Self {
        InitScheme {
            kind,
            relu_gain: false,
            hypernet_bias: false,
            family: Family::Uniform,
            scale_param: kind.default_scale(),
        }
    }

    pub fn with_relu(mut self, relu_gain: bool) -> Self {
        self.relu_gain = relu_gain;
        self
    }

    pub fn with_hypernet_bias(mut self, hypernet_bias: bool) -> Self {
        self.hypernet_bias = hypernet_bias;
        self
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale_param = Some(scale);
        self
    }

    pub fn scale(&self) -> f64 {
        self.scale_param.or(self.kind.default_scale()).unwrap_or(1.0)
    }

    /// Weight-head variance for a hyperfan scheme, `None` for the others
    /// (whose head variance does not depend on the mainnet layer).
    pub fn hyperfan_weight_variance(&self, geom: &FanGeometry, relu: bool) -> Option<f64> {
        let hin = || hyperfan_in_weight_variance(geom, relu, self.hypernet_bias);
        let hout = || hyperfan_out_weight_variance(geom, relu);
        match self.kind {
            SchemeKind::HyperfanIn => Some(hin()),
            SchemeKind::HyperfanOut => Some(hout()),
            SchemeKind::HyperfanMean(m) => Some(m.combine(hin(), hout())),
            _ => None,
        }
    }

    pub fn hyperfan_bias_variance(&self, geom: &FanGeometry, relu: bool) -> Option<f64> {
        let hin = || hyperfan_in_bias_variance(geom, relu);
        let hout = || hyperfan_out_bias_variance(geom, relu);
        match self.kind {
            SchemeKind::HyperfanIn => Some(hin()),
            SchemeKind::HyperfanOut => Some(hout()),
            SchemeKind::HyperfanMean(m) => Some(m.combine(hin(), hout())),
            _ => None,
        }
    }

    /// Variance for an ordinary hypernet layer with `fan_in` inputs and
    /// `fan_out` outputs. Hyperfan schemes use fan-in there.
    pub fn plain_layer_variance(&self, fan_in: usize, fan_out: usize, relu: bool) -> f64 {
        let geom = FanGeometry::dense(fan_out, fan_in, 1);
        match self.kind {
            SchemeKind::FanOut => classical_variance(Classical::FanOut, &geom, relu),
            SchemeKind::Harmonic => classical_variance(Classical::Harmonic, &geom, relu),
            SchemeKind::SmallRandom => self.scale() * self.scale(),
            _ => classical_variance(Classical::FanIn, &geom, relu),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(d_i: usize, d_j: usize, d_k: usize, d_l: usize, v1: f64, v2: f64, r: usize) -> FanGeometry {
        FanGeometry {
            d_i,
            d_j,
            d_k,
            d_l,
            var_e1: v1,
            var_e2: v2,
            receptive_field: r,
        }
    }

    fn close(a: f64, b: f64) {
        assert!(((a - b) / b).abs() < 1e-15 || a == b, "{a} vs {b}");
    }

    #[test]
    fn classical_examples() {
        close(classical_variance(Classical::FanIn, &FanGeometry::dense(10, 500, 1), false), 0.002);
        close(classical_variance(Classical::FanIn, &FanGeometry::dense(96, 864, 1), true), 2.0 / 864.0);
        // Conv geometry: channels × receptive field gives the same fan-in.
        close(classical_variance(Classical::FanIn, &geom(96, 96, 1, 1, 1.0, 1.0, 9), true), 2.0 / 864.0);
        let sym = FanGeometry::dense(64, 64, 1);
        close(
            classical_variance(Classical::Harmonic, &sym, false),
            classical_variance(Classical::FanIn, &sym, false),
        );
    }

    #[test]
    fn hyperfan_examples() {
        close(hyperfan_in_weight_variance(&geom(10, 500, 50, 50, 1.0, 1.0, 1), false, false), 4.0e-5);
        close(
            hyperfan_in_weight_variance(&geom(500, 784, 50, 50, 1.0, 1.0, 1), true, true),
            2.0 / (2.0 * 784.0 * 50.0),
        );
        close(hyperfan_in_weight_variance(&geom(1, 1, 1, 1, 1.0, 1.0, 1), false, false), 1.0);
        close(hyperfan_out_weight_variance(&geom(10, 500, 50, 50, 1.0, 1.0, 1), false), 2.0e-3);
        close(
            hyperfan_out_weight_variance(&geom(500, 96, 50, 50, 2.0, 1.0, 9), true),
            2.0 / (500.0 * 50.0 * 2.0 * 9.0),
        );
        let g = geom(300, 300, 20, 7, 1.5, 1.0, 3);
        close(hyperfan_out_weight_variance(&g, true), hyperfan_in_weight_variance(&g, true, false));
    }

    #[test]
    fn bias_examples() {
        close(hyperfan_in_bias_variance(&geom(1, 1, 1, 50, 1.0, 1.0, 1), false), 0.01);
        close(hyperfan_in_bias_variance(&geom(1, 1, 1, 50, 1.0, 1.0, 1), true), 0.02);
        close(hyperfan_in_bias_variance(&geom(1, 1, 1, 1, 1.0, 0.5, 1), false), 1.0);
        close(hyperfan_out_bias_variance(&geom(500, 10, 1, 50, 1.0, 1.0, 1), false), 0.0196);
        assert_eq!(hyperfan_out_bias_variance(&geom(40, 40, 1, 5, 1.0, 1.0, 1), false), 0.0);
        assert_eq!(hyperfan_out_bias_variance(&geom(500, 784, 1, 5, 1.0, 1.0, 1), true), 0.0);
    }

    #[test]
    fn shrink_factor() {
        close(gradient_shrink_factor(&FanGeometry::dense(500, 500, 50)), 10.0);
        close(gradient_shrink_factor(&FanGeometry::dense(7, 50, 50)), 1.0);
    }

    #[test]
    fn scheme_names_round_trip() {
        for k in SchemeKind::ALL {
            assert_eq!(k.name().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("xavier".parse::<SchemeKind>().is_err());
    }

    #[test]
    fn scheme_defaults() {
        let s = InitScheme::new(SchemeKind::HyperfanIn);
        assert_eq!(s.family, Family::Uniform);
        assert_eq!(InitScheme::new(SchemeKind::SmallRandom).scale(), 0.01);
        assert_eq!(InitScheme::new(SchemeKind::ScaledOutputKaiming).scale(), 0.1);
    }

    #[test]
    fn invalid_geometry() {
        assert!(geom(0, 1, 1, 1, 1.0, 1.0, 1).validate().is_err());
        assert!(geom(1, 1, 1, 1, 0.0, 1.0, 1).validate().is_err());
        assert!(geom(1, 1, 1, 1, 1.0, 1.0, 1).validate().is_ok());
    }
}
