use std::fmt;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use hyperinit::{Family, SchemeKind};
use serde::Serialize;
use serde_json::{json, Value};

/// Why a command could not finish; each class maps to one exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or an architecture that cannot be built.
    Usage(String),
    /// Missing, unreadable or malformed files.
    Io(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Usage(_) => ExitCode::from(2),
            Failure::Io(_) => ExitCode::from(3),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

impl From<hyperinit::Error> for Failure {
    fn from(e: hyperinit::Error) -> Self {
        use hyperinit::Error as E;
        match e {
            E::Io { .. } | E::Format { .. } | E::Serde(_) => Failure::Io(e.to_string()),
            E::InvalidArgument(_) | E::Shape(_) | E::Spec(_) => Failure::Usage(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

/// Whether the checks a command ran came out clean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    CheckFailed,
}

impl Status {
    pub fn from_pass(pass: bool) -> Self {
        if pass {
            Status::Ok
        } else {
            Status::CheckFailed
        }
    }
}

pub type CmdResult = Result<Status, Failure>;

pub fn parse_scheme(s: &str) -> Result<SchemeKind, String> {
    s.parse().map_err(|e: hyperinit::Error| e.to_string())
}

pub fn parse_family(s: &str) -> Result<Family, String> {
    match s {
        "uniform" => Ok(Family::Uniform),
        "normal" => Ok(Family::Normal),
        _ => Err(format!("unknown family {s:?}; expected uniform or normal")),
    }
}

pub fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Io(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Io(e.to_string()))?;
    write_file(path, text + "\n")
}

/// Everything needed to replay a run: the argument vector, every resolved
/// flag (defaults included) and the versions that produced it.
pub fn manifest(command: &str, args: &impl Serialize, extra: Value) -> Value {
    json!({
        "tool": "hyperinit",
        "cli_version": env!("CARGO_PKG_VERSION"),
        "library_version": hyperinit::VERSION,
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "flags": serde_json::to_value(args).unwrap_or(Value::Null),
        "resolved": extra,
    })
}
