//! JSON-lines metrics records and the wall-clock sidecar log.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use kvgate_core::engine::Accounting;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountingRecord {
    pub kv_bytes: usize,
    pub index_key_bytes: usize,
    pub memory_bytes: usize,
    pub total_bytes: usize,
}

impl From<Accounting> for AccountingRecord {
    fn from(a: Accounting) -> Self {
        Self {
            kv_bytes: a.kv_bytes,
            index_key_bytes: a.index_key_bytes,
            memory_bytes: a.memory_bytes,
            total_bytes: a.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accounting: Option<AccountingRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub series: BTreeMap<String, Vec<f64>>,
}

impl MetricsRecord {
    pub fn new(cfg: &ExperimentConfig, kind: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            experiment: cfg.experiment.clone(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            kind: kind.into(),
            policy: None,
            ratio: None,
            budget: None,
            step: None,
            values: BTreeMap::new(),
            accounting: None,
            series: BTreeMap::new(),
        }
    }

    pub fn value(mut self, key: &str, v: f64) -> Self {
        self.values.insert(key.into(), v);
        self
    }

    pub fn series(mut self, key: &str, v: Vec<f64>) -> Self {
        self.series.insert(key.into(), v);
        self
    }
}

/// Single serialized writer of one metrics file.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        if let Some((k, _)) = rec.values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(HarnessError::Format(format!("non-finite metric {k}")));
        }
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| HarnessError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

/// Reads every record of a metrics file, rejecting other schema versions.
pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| HarnessError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let version = raw.get("schema_version").and_then(serde_json::Value::as_u64);
        if version != Some(SCHEMA_VERSION as u64) {
            return Err(HarnessError::Format(format!(
                "{}:{}: schema version {version:?}, expected {SCHEMA_VERSION}",
                path.display(),
                i + 1
            )));
        }
        out.push(
            serde_json::from_value(raw)
                .map_err(|e| HarnessError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Wall-clock phase timings, kept out of the metrics files.
pub struct Timing {
    path: PathBuf,
    start: Instant,
    lines: Vec<String>,
}

impl Timing {
    pub fn new(out_dir: &Path, command: &str) -> Self {
        Self {
            path: out_dir.join(format!("{command}.timing.log")),
            start: Instant::now(),
            lines: Vec::new(),
        }
    }

    pub fn mark(&mut self, phase: &str) {
        let ms = self.start.elapsed().as_secs_f64() * 1e3;
        log::info!("{phase}: {ms:.1} ms");
        self.lines.push(format!("{phase}\t{ms:.1} ms"));
    }

    pub fn write(self) -> Result<()> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        std::fs::write(&self.path, text).map_err(|e| HarnessError::io(&self.path, e))
    }
}
