//! Run report and atomic artifact output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ppde_core::stats::Estimate;

use crate::scenario::Scenario;
use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;

const ROUNDING: f64 = 1e-12;

/// A pass/fail verdict on one numeric quantity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    /// Absent when the value is exact.
    pub stderr: Option<f64>,
    pub exact: bool,
    pub tolerance: f64,
    pub detail: String,
}

/// A reported number with its standard error or an exact marker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Quantity {
    pub name: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub exact: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub tool_version: String,
    pub subcommand: String,
    pub seed: u64,
    pub scenario_digest: String,
    /// Reproduces the run on its own.
    pub scenario: Scenario,
    pub checks: Vec<Check>,
    pub results: Vec<Quantity>,
    pub artifacts: Vec<Artifact>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub passed: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn scenario_digest(s: &Scenario) -> String {
    sha256_hex(serde_json::to_string(s).expect("scenario serializes").as_bytes())
}

/// Collects checks, results and artifacts for one run.
pub struct Recorder {
    pub out: PathBuf,
    pub checks: Vec<Check>,
    pub results: Vec<Quantity>,
    pub artifacts: Vec<Artifact>,
    pub timings: BTreeMap<String, f64>,
}

impl Recorder {
    pub fn new(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        Ok(Self {
            out: out.to_path_buf(),
            checks: Vec::new(),
            results: Vec::new(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
        })
    }

    pub fn estimate(&mut self, name: impl Into<String>, e: Estimate) {
        let exact = e.stderr == 0.0;
        self.results.push(Quantity {
            name: name.into(),
            value: e.mean,
            stderr: (!exact).then_some(e.stderr),
            exact,
        });
    }

    pub fn exact(&mut self, name: impl Into<String>, value: f64) {
        self.results.push(Quantity {
            name: name.into(),
            value,
            stderr: None,
            exact: true,
        });
    }

    /// `|value - target| ≤ tolerance`, never tighter than rounding.
    pub fn check_near(&mut self, name: &str, e: Estimate, target: f64, tolerance: f64) {
        let tolerance = tolerance.max(ROUNDING * target.abs());
        let passed = (e.mean - target).abs() <= tolerance;
        let exact = e.stderr == 0.0;
        self.checks.push(Check {
            name: name.into(),
            passed,
            value: e.mean,
            stderr: (!exact).then_some(e.stderr),
            exact,
            tolerance,
            detail: format!("target {target}"),
        });
    }

    pub fn check(&mut self, name: &str, passed: bool, value: f64, stderr: Option<f64>, tolerance: f64, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            value,
            stderr,
            exact: stderr.is_none(),
            tolerance,
            detail,
        });
    }

    /// Writes `bytes` to `<out>/<file>` through a temporary file and a rename.
    pub fn write(&mut self, file: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.out.join(file), bytes)?;
        self.artifacts.push(Artifact {
            file: file.into(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

/// In-memory CSV table.
pub struct Csv(csv::Writer<Vec<u8>>);

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        Self(w)
    }

    pub fn row(&mut self, fields: &[String]) {
        self.0.write_record(fields).expect("in-memory write");
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0.into_inner().expect("in-memory flush")
    }
}

/// Shortest round-trip formatting, so CSVs are bit-faithful.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}
