//! CSV outputs, content hashes and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;

pub const CSV_SCHEMA: u32 = 1;

/// Plot-ready CSV with a `# schema=N` comment line ahead of the header.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("# schema={CSV_SCHEMA}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.header).expect("in-memory write");
            for r in &self.rows {
                w.write_record(r).expect("in-memory write");
            }
            w.flush().expect("in-memory write");
        }
        out
    }
}

/// Shortest round-trip formatting, so identical values give identical bytes.
pub fn num(x: f64) -> String {
    format!("{x:e}")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One verdict. `criterion` links the check to the acceptance list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: String,
    pub criterion: Option<u8>,
    pub metric: String,
    pub pass: bool,
    pub observed: String,
    pub required: String,
    pub detail: String,
}

impl Check {
    pub fn new(id: &str, criterion: Option<u8>, metric: &str, pass: bool, observed: String, required: String) -> Self {
        Self {
            id: id.to_string(),
            criterion,
            metric: metric.to_string(),
            pass,
            observed,
            required,
            detail: String::new(),
        }
    }

    pub fn detail(mut self, d: impl Into<String>) -> Self {
        self.detail = d.into();
        self
    }

    /// Failed check recording an experiment error.
    pub fn error(id: &str, criterion: Option<u8>, metric: &str, e: &dyn std::fmt::Display) -> Self {
        Self::new(id, criterion, metric, false, "error".into(), "completes".into()).detail(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub code_version: String,
    pub started: String,
    pub wall_clock_seconds: f64,
    pub threads: usize,
    /// Full key-value tree the run used.
    pub config: serde_json::Value,
    /// Grids and tolerances of the experiment.
    pub parameters: serde_json::Value,
    pub outputs: Vec<OutputEntry>,
    pub checks: Vec<Check>,
    pub observed: serde_json::Value,
    pub pass: bool,
}

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Creates `<root>/<experiment>-<timestamp>`, suffixed when the name is taken.
pub fn output_dir(root: &Path, experiment: &str, stamp: &chrono::DateTime<chrono::Local>) -> Result<PathBuf, HarnessError> {
    fs::create_dir_all(root).map_err(|e| HarnessError::io(root, e))?;
    let base = format!("{experiment}-{}", stamp.format("%Y%m%dT%H%M%S"));
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(HarnessError::io(&dir, e)),
        }
    }
    unreachable!()
}

/// Writes `bytes` under `dir` and returns its index entry (path relative to `dir`).
pub fn write_output(dir: &Path, rel: &str, bytes: &[u8]) -> Result<OutputEntry, HarnessError> {
    let path = dir.join(rel);
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).map_err(|e| HarnessError::io(p, e))?;
    }
    let mut f = fs::File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    f.write_all(bytes).map_err(|e| HarnessError::io(&path, e))?;
    Ok(OutputEntry {
        path: rel.to_string(),
        sha256: sha256_hex(bytes),
        bytes: bytes.len(),
    })
}

pub fn write_manifest(dir: &Path, m: &RunManifest) -> Result<PathBuf, HarnessError> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Manifest(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_schema_line() {
        let mut t = CsvTable::new("x", &["a", "b"]);
        t.push(vec![num(0.1), num(1e-12)]);
        let s = String::from_utf8(t.to_bytes()).unwrap();
        assert_eq!(s, "# schema=1\na,b\n1e-1,1e-12\n");
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
