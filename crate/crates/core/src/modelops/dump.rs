use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vote::PredictionMatrix;
use crate::error::{Error, Result};

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub split: String,
    pub example: u64,
    pub model: String,
    pub label: usize,
    pub pred: usize,
    pub probs: Vec<f64>,
}

pub fn write_dump(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<Vec<PredictionRecord>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("prediction dump", e.to_string())))
        .collect()
}

/// Dumps aligned on example ids, ready for voting.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDumps {
    pub matrix: PredictionMatrix,
    pub examples: Vec<u64>,
    pub labels: Vec<usize>,
    pub split: String,
}

/// Every dump must cover the same examples of the same split in the same order.
pub fn align_dumps(dumps: &[Vec<PredictionRecord>]) -> Result<AlignedDumps> {
    let first = dumps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no prediction dumps given".into()))?;
    let head = first
        .first()
        .ok_or_else(|| Error::format("prediction dump", "empty dump"))?;
    let classes = head.probs.len();
    for (m, d) in dumps.iter().enumerate() {
        if d.len() != first.len() {
            return Err(Error::format(
                "prediction dump",
                format!("dump {m} has {} rows, dump 0 has {}", d.len(), first.len()),
            ));
        }
        for (a, b) in d.iter().zip(first) {
            if a.example != b.example || a.split != b.split || a.label != b.label {
                return Err(Error::format(
                    "prediction dump",
                    format!("dump {m} disagrees with dump 0 at example {}", b.example),
                ));
            }
            if a.probs.len() != classes {
                return Err(Error::InvalidArgument(format!(
                    "dump {m} has {} answer classes, dump 0 has {classes}",
                    a.probs.len()
                )));
            }
        }
    }
    let preds = dumps.iter().map(|d| d.iter().map(|r| r.pred).collect()).collect();
    let probs = dumps
        .iter()
        .map(|d| d.iter().map(|r| r.probs.clone()).collect())
        .collect();
    Ok(AlignedDumps {
        matrix: PredictionMatrix::new(classes, preds, Some(probs))?,
        examples: first.iter().map(|r| r.example).collect(),
        labels: first.iter().map(|r| r.label).collect(),
        split: head.split.clone(),
    })
}
