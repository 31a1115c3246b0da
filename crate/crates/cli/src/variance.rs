use std::path::PathBuf;

use clap::Args;
use hyperinit::probe::{self, kind};
use hyperinit::{Activation, Family, InitScheme, SchemeKind, VarianceCheck};
use serde::Serialize;
use serde_json::json;

use crate::util::{manifest, parse_band, parse_family, parse_scheme, write_json, CmdResult, Status};

#[derive(Args, Debug, Serialize)]
pub struct VarianceArgs {
    #[arg(long, value_parser = parse_scheme)]
    pub scheme: SchemeKind,
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    #[arg(long, default_value_t = 500)]
    pub width: usize,
    #[arg(long, default_value_t = 50)]
    pub hyper_width: usize,
    #[arg(long, default_value_t = 300)]
    pub batch: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// ReLU mainnet layers, with the ReLU gain applied by the scheme.
    #[arg(long, conflicts_with = "tanh")]
    pub relu: bool,
    #[arg(long)]
    pub tanh: bool,
    /// Generate the mainnet biases as well.
    #[arg(long)]
    pub gen_bias: bool,
    #[arg(long, value_parser = parse_family, default_value = "uniform")]
    pub family: Family,
    /// Scale parameter of the small-random and scaled-output baselines.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Acceptance band for gain ratios.
    #[arg(long, value_parser = parse_band, default_value = "0.8,1.25")]
    pub band: (f64, f64),
    /// Single-example backward passes for the gradient-shrink measurement.
    #[arg(long, default_value_t = 0)]
    pub shrink_samples: usize,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(a: &VarianceArgs) -> CmdResult {
    let mut scheme = InitScheme::new(a.scheme).with_relu(a.relu).with_family(a.family);
    if let Some(s) = a.scale {
        scheme = scheme.with_scale(s);
    }
    let activation = match (a.relu, a.tanh) {
        (true, _) => Activation::Relu,
        (_, true) => Activation::Tanh,
        _ => Activation::Identity,
    };
    let check = VarianceCheck {
        scheme,
        depth: a.depth,
        width: a.width,
        hyper_width: a.hyper_width,
        batch: a.batch,
        seed: a.seed,
        activation,
        generate_bias: a.gen_bias,
        band: a.band,
        shrink_samples: a.shrink_samples,
    };
    let r = check.run()?;

    println!(
        "{} on {} layers of width {} ({:?}), hypernet width {}, batch {}, seed {}",
        a.scheme, a.depth, a.width, activation, a.hyper_width, a.batch, a.seed
    );
    println!("{:>5} {:>12} {:>12} {:>12} {:>12} {:>12}", "layer", "fwd-gain", "bwd-gain", "pre-var", "theory", "Var(W)");
    for (t, l) in r.report.layers.iter().enumerate() {
        let pre = l.get(kind::PRE);
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
        println!(
            "{:>5} {:>12} {:>12} {:>12} {:>12} {:>12}",
            t,
            cell(r.forward_gains.get(t).copied()),
            cell(r.backward_gains.get(t).copied()),
            cell(pre.map(|s| s.var)),
            cell(pre.and_then(|s| s.theory)),
            cell(l.get(kind::WEIGHT).map(|s| s.var)),
        );
    }
    for s in &r.shrink {
        println!(
            "shrink layer {}: measured {:.4}, predicted {:.4}",
            s.layer, s.measured, s.closed_form
        );
    }
    let verdict = |ok: bool| if ok { "pass" } else { "fail" };
    println!(
        "forward {}, backward {}, cumulative blow-up {:.3e}; gated on {}: {}",
        verdict(r.forward.all_pass()),
        verdict(r.backward.all_pass()),
        r.cumulative_blowup(),
        r.gated_on,
        verdict(r.passed).to_uppercase()
    );

    if let Some(path) = &a.out {
        let doc = json!({
            "manifest": manifest("variance-check", a, serde_json::to_value(&check)?),
            "result": serde_json::to_value(&r)?,
            "probe": probe::reports_to_json(std::slice::from_ref(&r.report)),
        });
        write_json(path, &doc)?;
    }
    Ok(Status::from_pass(r.passed))
}
