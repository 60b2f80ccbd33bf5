//! Per-step metrics log (one JSON object per line).

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Phase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss_kind: String,
    /// NaN (written as `null`) on an aborted step.
    #[serde(deserialize_with = "nullable_f64")]
    pub loss: f64,
    pub lr: f64,
    /// Data tokens consumed up to and including this step.
    pub data_tokens_seen: u64,
    /// Seconds since the run started.
    pub wallclock: f64,
    /// Set on the record of a step that was aborted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort: Option<String>,
}

fn nullable_f64<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl MetricsRecord {
    /// Equality ignoring wallclock, for comparing runs.
    pub fn same_as(&self, other: &MetricsRecord) -> bool {
        MetricsRecord {
            wallclock: 0.0,
            ..self.clone()
        } == MetricsRecord {
            wallclock: 0.0,
            ..other.clone()
        }
    }
}

/// Append-only metrics file. Each record goes out in a single write.
#[derive(Debug)]
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        Ok(MetricsWriter { file })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = File::open(path)?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line?;
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Compare two metrics streams field by field, ignoring wallclock. Returns
/// the first differing step.
pub fn first_difference(a: &[MetricsRecord], b: &[MetricsRecord]) -> Option<usize> {
    if let Some(i) = a.iter().zip(b).position(|(x, y)| !x.same_as(y)) {
        return Some(i);
    }
    (a.len() != b.len()).then(|| a.len().min(b.len()))
}
