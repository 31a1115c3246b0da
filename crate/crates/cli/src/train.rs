use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use hyperinit::mainnet::{Activation, Loss};
use hyperinit::probe;
use hyperinit::train::presets::{self, CifarSource, Preset, RunOutcome};
use hyperinit::train::{save_checkpoint, Checkpoint, SequenceOutcome};
use hyperinit::{Family, InitScheme, SchemeKind, TrainConfig, TrainOutcome};
use serde::Serialize;
use serde_json::{json, Value};

use crate::util::{manifest, parse_family, parse_scheme, write_file, write_json, CmdResult, Failure, Status};

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_preset)]
    pub preset: Preset,
    /// Initialization scheme for the hypernet (or the mainnet, for the
    /// classical control preset).
    #[arg(long = "init", value_parser = parse_scheme)]
    pub init: SchemeKind,
    /// Apply the ReLU gain; defaults to on for presets with ReLU mainnets.
    #[arg(long)]
    pub relu_gain: Option<bool>,
    #[arg(long, value_parser = parse_family, default_value = "uniform")]
    pub family: Family,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Keep only the first N training examples.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long, default_value_t = 42, conflicts_with = "seeds")]
    pub seed: u64,
    /// Several independent runs, one output directory each.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Training iterations per task of a sequence preset.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub probe_every: Option<usize>,
    #[arg(long)]
    pub no_probe: bool,
    /// Always take the generic update path.
    #[arg(long)]
    pub no_fast_path: bool,
    /// Dataset root; falls back to HYPERINIT_DATA_DIR, then ./data.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Use procedurally generated CIFAR-shaped data.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: hyperinit::Error| e.to_string())
}

fn config(a: &TrainArgs, seed: u64) -> TrainConfig {
    let relu = a
        .relu_gain
        .unwrap_or_else(|| a.preset.mainnet().layers.iter().any(|l| l.activation == Activation::Relu));
    let scheme = InitScheme::new(a.init).with_relu(relu).with_family(a.family);
    let mut c = a.preset.config(scheme, seed);
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(lr) = a.lr {
        c.learning_rate = lr;
    }
    if let Some(b) = a.batch {
        c.batch_size = b;
    }
    if a.max_steps.is_some() || a.iterations.is_some() {
        c.max_steps = a.iterations.or(a.max_steps);
    }
    if a.probe_every.is_some() {
        c.probe_every = a.probe_every;
    }
    if a.no_probe {
        c.probe_every = None;
    }
    c.fast_path = !a.no_fast_path;
    c
}

pub fn run(a: &TrainArgs) -> CmdResult {
    let seeds = if a.seeds.is_empty() { vec![a.seed] } else { a.seeds.clone() };
    let multi = seeds.len() > 1;
    let results: Vec<Result<bool, Failure>> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let dir = if multi { a.out.join(format!("seed-{seed}")) } else { a.out.clone() };
                s.spawn(move || run_one(a, seed, &dir))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Failure::Usage("training thread panicked".into()))))
            .collect()
    });
    let mut healthy = true;
    for r in results {
        healthy &= r?;
    }
    Ok(Status::from_pass(healthy))
}

/// Trains one seed into `dir`; `Ok(false)` when the run diverged.
fn run_one(a: &TrainArgs, seed: u64, dir: &Path) -> Result<bool, Failure> {
    let cfg = config(a, seed);
    cfg.validate()?;
    let source = if a.synthetic { CifarSource::Synthetic } else { CifarSource::Files };
    let data = presets::load_data(a.preset, a.data_dir.as_deref(), a.subset, source, seed)?;
    let outcome = presets::run(a.preset, &cfg, &data)?;

    let resolved = json!({
        "seed": seed,
        "config": serde_json::to_value(&cfg)?,
        "data_dir": hyperinit::data::resolve_data_dir(a.data_dir.as_deref()),
        "subset": a.subset.or(a.preset.default_subset()),
        "cifar_source": source,
        "mainnet": a.preset.mainnet(),
        "hypernet": a.preset.hypernet(),
    });
    write_json(&dir.join("manifest.json"), &manifest("train", a, resolved))?;

    let metric = match a.preset.mainnet().loss {
        Loss::SoftmaxCrossEntropy => "test accuracy",
        Loss::MeanSquaredError => "test mse",
    };
    let label = format!("{} {} seed {seed}", a.preset, a.init);
    match &outcome {
        RunOutcome::Single(o) => {
            write_single(dir, o, &cfg)?;
            println!("{label}: {}", summary_line(o, metric));
        }
        RunOutcome::Sequence(s) => {
            write_sequence(dir, s, &cfg)?;
            let losses: Vec<String> = s.final_losses.iter().map(|l| format!("{l:.4}")).collect();
            println!(
                "{label}: {} tasks, initial loss {:.4}, final losses [{}], mean {:.4}{}",
                s.tasks.len(),
                s.init_loss,
                losses.join(", "),
                s.mean_final_loss(),
                if s.diverged() { ", DIVERGED" } else { "" }
            );
        }
    }
    Ok(!outcome.diverged())
}

fn summary_line(o: &TrainOutcome, metric: &str) -> String {
    let mut s = format!("{} steps, loss {:.4} -> {:.4}", o.steps, o.start_loss, o.end_loss);
    if let Some(m) = o.final_metric() {
        let _ = write!(s, ", {metric} {m:.4}");
    }
    if let Some(d) = &o.divergence {
        let _ = write!(s, ", DIVERGED at step {} ({})", d.step, d.reason);
    }
    s
}

fn outcome_json(o: &TrainOutcome) -> Value {
    json!({
        "steps": o.steps,
        "start_loss": finite_or_null(o.start_loss),
        "end_loss": finite_or_null(o.end_loss),
        "epoch_losses": o.epoch_losses.iter().map(|&l| finite_or_null(l)).collect::<Vec<_>>(),
        "final_metric": o.final_metric().map(finite_or_null),
        "divergence": o.divergence.as_ref().map(|d| json!({"step": d.step, "reason": d.reason})),
    })
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn metrics_csv(o: &TrainOutcome) -> String {
    let mut s = String::from("step,epoch,value\n");
    for m in &o.test_metrics {
        let _ = writeln!(s, "{},{},{}", m.step, m.epoch, m.value);
    }
    s
}

fn checkpoint(dir: &Path, o: &TrainOutcome, cfg: &TrainConfig) -> Result<(), Failure> {
    let ck = Checkpoint {
        model: o.model.clone(),
        step: o.steps,
        scheme: Some(cfg.scheme),
        rng: None,
    };
    save_checkpoint(&dir.join("checkpoint.bin"), &ck)?;
    Ok(())
}

fn write_single(dir: &Path, o: &TrainOutcome, cfg: &TrainConfig) -> Result<(), Failure> {
    write_file(&dir.join("loss.csv"), o.curve_csv())?;
    write_file(&dir.join("metrics.csv"), metrics_csv(o))?;
    write_json(&dir.join("probe.json"), &probe::reports_to_json(&o.reports))?;
    write_file(&dir.join("probe.csv"), probe::reports_to_csv(&o.reports))?;
    write_json(&dir.join("summary.json"), &outcome_json(o))?;
    checkpoint(dir, o, cfg)
}

fn write_sequence(dir: &Path, s: &SequenceOutcome, cfg: &TrainConfig) -> Result<(), Failure> {
    let mut csv = String::from("task,step,epoch,train_loss,test_metric\n");
    for (t, o) in s.tasks.iter().enumerate() {
        for p in &o.curve {
            let m = p.test_metric.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(csv, "{t},{},{},{},{m}", p.step, p.epoch, p.train_loss);
        }
    }
    write_file(&dir.join("loss.csv"), csv)?;
    let reports: Vec<_> = s.tasks.iter().flat_map(|o| o.reports.iter().cloned()).collect();
    write_json(&dir.join("probe.json"), &probe::reports_to_json(&reports))?;
    write_file(&dir.join("probe.csv"), probe::reports_to_csv(&reports))?;
    let summary = json!({
        "init_loss": finite_or_null(s.init_loss),
        "final_losses": s.final_losses.iter().map(|&l| finite_or_null(l)).collect::<Vec<_>>(),
        "mean_final_loss": finite_or_null(s.mean_final_loss()),
        "tasks": s.tasks.iter().map(outcome_json).collect::<Vec<_>>(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    match s.tasks.last() {
        Some(o) => checkpoint(dir, o, cfg),
        None => Ok(()),
    }
}
