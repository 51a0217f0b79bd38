//! Shared command plumbing: error-to-exit-code mapping, seed resolution,
//! flag parsing, and report writing.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use glora_core::report::{RunReport, Timing};
use glora_core::tensor::ElemType;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or an invalid configuration; exit code 2.
    Usage(String),
    /// Anything the core library reports.
    Core(glora_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                glora_core::Error::Divergence { .. } => 3,
                glora_core::Error::Io { .. } | glora_core::Error::Format(_) => 4,
                _ => 2,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<glora_core::Error> for CliError {
    fn from(e: glora_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Seed resolution: the flag wins, then the GLORA_SEED environment variable,
/// then zero.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64, CliError> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("GLORA_SEED") {
        Ok(text) => text
            .parse::<u64>()
            .map_err(|_| usage(format!("GLORA_SEED is not an integer: {text:?}"))),
        Err(_) => Ok(0),
    }
}

/// "6,3" -> [6, 3]; every entry must be a positive integer.
pub fn parse_dims(text: &str, flag: &str) -> Result<Vec<usize>, CliError> {
    let dims: Result<Vec<usize>, _> = text.split(',').map(|p| p.trim().parse::<usize>()).collect();
    match dims {
        Ok(dims) if !dims.is_empty() && dims.iter().all(|&d| d > 0) => Ok(dims),
        _ => Err(usage(format!(
            "{flag} expects positive integers like \"8,4\", got {text:?}"
        ))),
    }
}

/// A required input file must already exist; a missing path is a usage error.
pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

pub fn peek_elem(path: &Path) -> Result<ElemType, CliError> {
    Ok(glora_core::persist::peek(path)?.elem)
}

/// Sidecar path convention: append a suffix to the artifact path.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn report_path(artifact: &Path) -> PathBuf {
    sidecar(artifact, ".report.json")
}

/// Timer started at command entry; its reading lands only in the report's
/// `timing` field, never in artifacts.
pub struct CommandTimer(Instant);

impl CommandTimer {
    pub fn start() -> Self {
        CommandTimer(Instant::now())
    }

    pub fn finish(self, report: &mut RunReport) {
        report.timing = Some(Timing {
            seconds: self.0.elapsed().as_secs_f64(),
        });
    }
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<(), CliError> {
    let mut bytes =
        serde_json::to_vec_pretty(report).map_err(|e| glora_core::Error::Format(e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| {
        CliError::Core(glora_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    Ok(())
}
