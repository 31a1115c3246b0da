use clap::Args;
use hyperinit::init::classical_head_variance;
use hyperinit::{FanGeometry, Family, InitScheme, SchemeKind};
use serde::Serialize;
use serde_json::json;

use crate::util::{parse_family, CmdResult, Failure, Status};

#[derive(Args, Debug, Serialize)]
pub struct TableArgs {
    /// `d_i,d_j,d_k[,d_l]`: layer fan-out, layer fan-in, weight-head input
    /// width, bias-head input width (defaults to d_k).
    #[arg(long, value_parser = parse_geometry)]
    pub geometry: [usize; 4],
    #[arg(long, default_value_t = 1.0)]
    pub var_e: f64,
    /// Variance of the bias embedding features, if different.
    #[arg(long)]
    pub var_e2: Option<f64>,
    /// Kernel area of a convolution.
    #[arg(long, default_value_t = 1)]
    pub receptive_field: usize,
    #[arg(long)]
    pub relu: bool,
    #[arg(long)]
    pub gen_bias: bool,
    #[arg(long, value_parser = parse_family, default_value = "uniform")]
    pub family: Family,
    #[arg(long)]
    pub json: bool,
}

fn parse_geometry(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [i, j, k] => Ok([i, j, k, k]),
        [i, j, k, l] => Ok([i, j, k, l]),
        _ => Err("expected d_i,d_j,d_k[,d_l]".into()),
    }
}

#[derive(Debug, Serialize)]
pub struct Row {
    pub scheme: String,
    pub weight_var: f64,
    pub bias_var: Option<f64>,
    pub weight_bound: Option<f64>,
    pub bias_bound: Option<f64>,
}

/// Head variances for every scheme on one geometry.
pub fn rows(g: &FanGeometry, relu: bool, gen_bias: bool, family: Family) -> Vec<Row> {
    let bound = |v: f64| (family == Family::Uniform).then(|| (3.0 * v).sqrt());
    SchemeKind::ALL
        .iter()
        .map(|&kind| {
            let s = InitScheme::new(kind).with_relu(relu).with_hypernet_bias(gen_bias);
            let (w, b) = if kind.is_hyperfan() {
                (
                    s.hyperfan_weight_variance(g, relu).expect("hyperfan"),
                    s.hyperfan_bias_variance(g, relu).expect("hyperfan"),
                )
            } else {
                let post = if kind == SchemeKind::ScaledOutputKaiming { s.scale() * s.scale() } else { 1.0 };
                let p = g.d_i * g.d_j * g.receptive_field;
                (
                    post * classical_head_variance(&s, g.d_k, p),
                    post * classical_head_variance(&s, g.d_l, g.d_i),
                )
            };
            let b = gen_bias.then_some(b);
            Row {
                scheme: kind.name().to_string(),
                weight_var: w,
                bias_var: b,
                weight_bound: bound(w),
                bias_bound: b.and_then(bound),
            }
        })
        .collect()
}

pub fn run(a: &TableArgs) -> CmdResult {
    let [d_i, d_j, d_k, d_l] = a.geometry;
    let g = FanGeometry {
        d_i,
        d_j,
        d_k,
        d_l,
        var_e1: a.var_e,
        var_e2: a.var_e2.unwrap_or(a.var_e),
        receptive_field: a.receptive_field,
    };
    g.validate()?;
    let rows = rows(&g, a.relu, a.gen_bias, a.family);
    if a.json {
        let doc = json!({ "geometry": g, "relu": a.relu, "gen_bias": a.gen_bias, "rows": rows });
        println!("{}", serde_json::to_string_pretty(&doc).map_err(|e| Failure::Io(e.to_string()))?);
        return Ok(Status::Ok);
    }
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
    println!(
        "{:<20} {:>12} {:>12} {:>12} {:>12}",
        "scheme", "weight-var", "bias-var", "weight-bound", "bias-bound"
    );
    for r in &rows {
        println!(
            "{:<20} {:>12} {:>12} {:>12} {:>12}",
            r.scheme,
            cell(Some(r.weight_var)),
            cell(r.bias_var),
            cell(r.weight_bound),
            cell(r.bias_bound)
        );
    }
    Ok(Status::Ok)
}
