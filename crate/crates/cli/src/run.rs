//! Run manifests and the mapping from errors to exit codes.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use aosense::ExperimentConfig;
use serde::Serialize;
use serde_json::Value;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// Exit code for an error chain: the first library error found decides.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<aosense::Error>() {
            return match e {
                aosense::Error::InvalidArgument(_) => EXIT_USAGE,
                aosense::Error::Shape(_) | aosense::Error::Format(_) | aosense::Error::Json(_) => EXIT_FORMAT,
                aosense::Error::Numeric { .. } => EXIT_NUMERIC,
                aosense::Error::Io { .. } | aosense::Error::Predictor(_) => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

#[derive(Serialize)]
struct Versions {
    aosense: &'static str,
    cli: &'static str,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    args: Vec<String>,
    config: &'a ExperimentConfig,
    seed: Option<u64>,
    versions: Versions,
    started_unix_s: f64,
    wall_time_s: f64,
    result: Value,
}

/// Collects what a command did and writes it next to its output.
pub struct Run<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    started: SystemTime,
    clock: Instant,
    pub seed: Option<u64>,
}

impl<'a> Run<'a> {
    pub fn start(command: &'a str, config: &'a ExperimentConfig) -> Self {
        Self {
            command,
            config,
            started: SystemTime::now(),
            clock: Instant::now(),
            seed: None,
        }
    }

    /// Writes the manifest for an output file or directory.
    pub fn finish(self, out: &Path, result: Value) -> anyhow::Result<()> {
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            config: self.config,
            seed: self.seed,
            versions: Versions {
                aosense: aosense::VERSION,
                cli: env!("CARGO_PKG_VERSION"),
            },
            started_unix_s: self
                .started
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            wall_time_s: self.clock.elapsed().as_secs_f64(),
            result,
        };
        aosense::io::write_json(&manifest_path(out), &manifest)?;
        Ok(())
    }
}

/// `<dir>/run.json` for directory outputs, `<file>.run.json` otherwise.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("run.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".run.json");
        out.with_file_name(name)
    }
}
