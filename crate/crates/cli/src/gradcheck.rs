use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use serde_json::json;

use crate::util::{manifest, write_json, CmdResult, Status};

#[derive(Args, Debug, Serialize)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(a: &GradCheckArgs) -> CmdResult {
    let reports = hyperinit::gradcheck::standard_suite(a.seed)?;
    let mut pass = true;
    println!("{:<32} {:>8} {:>12}", "architecture", "checked", "max-rel-err");
    for r in &reports {
        let ok = r.passes(a.tolerance);
        pass &= ok;
        println!(
            "{:<32} {:>8} {:>12.3e} {}",
            r.name,
            r.checked,
            r.max_relative_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = &a.out {
        let doc = json!({
            "manifest": manifest("grad-check", a, json!({})),
            "reports": reports,
            "passed": pass,
        });
        write_json(path, &doc)?;
    }
    Ok(Status::from_pass(pass))
}
