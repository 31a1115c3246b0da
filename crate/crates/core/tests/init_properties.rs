//! Algebraic properties of the variance formulas over random geometries.

use hyperinit::init::{
    hyperfan_in_bias_variance, hyperfan_in_weight_variance, hyperfan_out_bias_variance, hyperfan_out_weight_variance,
    MeanKind,
};
use hyperinit::{FanGeometry, InitScheme, SchemeKind};
use proptest::prelude::*;

fn geometry() -> impl Strategy<Value = FanGeometry> {
    (1usize..1024, 1usize..1024, 1usize..256, 1usize..256, 0.01f64..10.0, 0.01f64..10.0, 1usize..50).prop_map(
        |(d_i, d_j, d_k, d_l, var_e1, var_e2, receptive_field)| FanGeometry {
            d_i,
            d_j,
            d_k,
            d_l,
            var_e1,
            var_e2,
            receptive_field,
        },
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-13 * a.abs().max(b.abs())
}

/// Forward variance of `y = W x + b` per unit of input variance, given the
/// head variances.
fn forward_share(g: &FanGeometry, var_h: f64, var_g: f64) -> (f64, f64) {
    let w = (g.d_j * g.receptive_field * g.d_k) as f64 * g.var_e1 * var_h;
    let b = g.d_l as f64 * g.var_e2 * var_g;
    (w, b)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn hyperfan_in_splits_the_variance_evenly(g in geometry(), relu in any::<bool>()) {
        let gain = if relu { 2.0 } else { 1.0 };
        let (w, b) = forward_share(&g, hyperfan_in_weight_variance(&g, relu, true), hyperfan_in_bias_variance(&g, relu));
        prop_assert!(close(w, gain / 2.0) && close(b, gain / 2.0), "{w} {b}");
        let (w_only, _) = forward_share(&g, hyperfan_in_weight_variance(&g, relu, false), 0.0);
        prop_assert!(close(w_only, gain));
    }

    #[test]
    fn hyperfan_out_bias_fills_the_gap(g in geometry(), relu in any::<bool>()) {
        let gain = if relu { 2.0 } else { 1.0 };
        let (w, b) = forward_share(&g, hyperfan_out_weight_variance(&g, relu), hyperfan_out_bias_variance(&g, relu));
        let ratio = g.d_j as f64 / g.d_i as f64;
        prop_assert!(close(w, gain * ratio));
        prop_assert!(b >= 0.0);
        prop_assert!(close(w + b, gain * ratio.max(1.0)), "{w} + {b}");
    }

    #[test]
    fn means_lie_between_the_two(g in geometry()) {
        let a = hyperfan_in_weight_variance(&g, false, false);
        let b = hyperfan_out_weight_variance(&g, false);
        let (lo, hi) = (a.min(b), a.max(b));
        for m in [MeanKind::Harmonic, MeanKind::Geometric, MeanKind::Arithmetic] {
            let v = InitScheme::new(SchemeKind::HyperfanMean(m)).hyperfan_weight_variance(&g, false).unwrap();
            prop_assert!(v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12), "{m:?}: {v} not in [{lo}, {hi}]");
        }
    }

    #[test]
    fn embedding_variance_scales_inversely(g in geometry(), k in 0.1f64..10.0) {
        let scaled = FanGeometry { var_e1: g.var_e1 * k, var_e2: g.var_e2 * k, ..g };
        prop_assert!(close(hyperfan_in_weight_variance(&scaled, false, false) * k, hyperfan_in_weight_variance(&g, false, false)));
        prop_assert!(close(hyperfan_out_weight_variance(&scaled, true) * k, hyperfan_out_weight_variance(&g, true)));
        prop_assert!(close(hyperfan_in_bias_variance(&scaled, true) * k, hyperfan_in_bias_variance(&g, true)));
    }

    #[test]
    fn square_layers_need_no_hyperfan_out_bias(n in 1usize..2048, d_k in 1usize..256) {
        let g = FanGeometry::dense(n, n, d_k);
        prop_assert_eq!(hyperfan_out_bias_variance(&g, true), 0.0);
        prop_assert!(close(hyperfan_in_weight_variance(&g, false, false), hyperfan_out_weight_variance(&g, false)));
    }
}
