//! Fixtures shared by the benchmarks.

use hyperinit::train::presets::Preset;
use hyperinit::{sample, Distribution, Hypernet, InitScheme, MainnetParams, MainnetSpec, Model, Rng, SchemeKind, Tensor};

/// A standard-normal tensor of `shape`.
pub fn normal(shape: &[usize], seed: u64) -> Tensor {
    let unit = Distribution::normal(1.0).expect("unit variance is valid");
    sample(&unit, shape, &mut Rng::new(seed)).expect("non-empty shape")
}

/// The hypernet of `preset` under hyperfan-in.
pub fn hypernet(preset: Preset) -> Hypernet {
    let relu = preset == Preset::CifarAllconv;
    match preset.model(&InitScheme::new(SchemeKind::HyperfanIn).with_relu(relu), 1) {
        Ok(Model::Hyper(hn)) => hn,
        _ => panic!("{preset} has no hypernet"),
    }
}

/// The desk-scale all-convolutional mainnet with generated parameters and
/// an input batch of `n` images.
pub fn allconv(n: usize) -> (MainnetSpec, MainnetParams, Tensor) {
    let hn = hypernet(Preset::CifarAllconv);
    let (params, _) = hn.generate().expect("preset generates");
    (hn.mainnet.clone(), params, normal(&[n, 3, 32, 32], 2))
}
