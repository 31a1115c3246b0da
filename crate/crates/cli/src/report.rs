use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use crate::util::{CmdResult, Failure, Status};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Format {
    Table,
    Csv,
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// A run directory or a probe JSON file.
    pub path: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
    /// Statistic kinds to show.
    #[arg(long, value_delimiter = ',', default_value = "pre,weight,input_grad")]
    pub kinds: Vec<String>,
    /// Only this probe step.
    #[arg(long)]
    pub step: Option<usize>,
}

fn read_json(path: &Path) -> Result<Value, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{} is not valid JSON: {e}", path.display())))
}

#[derive(Debug, PartialEq)]
pub struct Line {
    pub step: usize,
    pub layer: usize,
    pub kind: String,
    pub var: f64,
    pub theory: Option<f64>,
    pub ratio: Option<f64>,
}

/// Flattens `{step: {layer: {kind: stat}}}`, numerically ordered.
pub fn lines(doc: &Value, kinds: &[String], only_step: Option<usize>) -> Result<Vec<Line>, String> {
    let steps = doc.as_object().ok_or("probe document is not an object")?;
    let mut out = Vec::new();
    for (step_key, layers) in steps {
        let step: usize = step_key.parse().map_err(|_| format!("bad step key {step_key:?}"))?;
        if only_step.is_some_and(|s| s != step) {
            continue;
        }
        for (layer_key, stats) in layers.as_object().ok_or("layers are not an object")? {
            let layer: usize = layer_key.parse().map_err(|_| format!("bad layer key {layer_key:?}"))?;
            for kind in kinds {
                let Some(s) = stats.get(kind) else { continue };
                out.push(Line {
                    step,
                    layer,
                    kind: kind.clone(),
                    var: s["var"].as_f64().unwrap_or(f64::NAN),
                    theory: s["theory"].as_f64(),
                    ratio: s["ratio"].as_f64(),
                });
            }
        }
    }
    out.sort_by(|a, b| (a.step, a.layer).cmp(&(b.step, b.layer)));
    Ok(out)
}

pub fn run(a: &ReportArgs) -> CmdResult {
    let probe_path = if a.path.is_dir() { a.path.join("probe.json") } else { a.path.clone() };
    if a.path.is_dir() && a.format == Format::Table {
        if let Ok(m) = read_json(&a.path.join("manifest.json")) {
            println!("run: {}", m["argv"].as_array().map(|v| {
                v.iter().filter_map(Value::as_str).collect::<Vec<_>>().join(" ")
            }).unwrap_or_default());
        }
        if let Ok(s) = read_json(&a.path.join("summary.json")) {
            println!("summary: {s}");
        }
    }
    let doc = read_json(&probe_path)?;
    let lines = lines(&doc, &a.kinds, a.step).map_err(|e| Failure::Io(format!("{}: {e}", probe_path.display())))?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4e}"));
    match a.format {
        Format::Csv => {
            println!("step,layer,kind,var,theory,ratio");
            for l in &lines {
                println!("{},{},{},{:e},{},{}", l.step, l.layer, l.kind, l.var, cell(l.theory), cell(l.ratio));
            }
        }
        Format::Table => {
            println!("{:>8} {:>5} {:<16} {:>12} {:>12} {:>8}", "step", "layer", "kind", "var", "theory", "ratio");
            for l in &lines {
                println!(
                    "{:>8} {:>5} {:<16} {:>12.4e} {:>12} {:>8}",
                    l.step,
                    l.layer,
                    l.kind,
                    l.var,
                    cell(l.theory),
                    l.ratio.map_or(String::new(), |r| format!("{r:.3}"))
                );
            }
        }
    }
    Ok(Status::Ok)
}
