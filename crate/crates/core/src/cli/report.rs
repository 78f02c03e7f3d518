use std::collections::BTreeMap;

use serde::Serialize;

use crate::advtrain::StepRecord;
use crate::error::{Error, Result};
use crate::modelops::PredictionRecord;
use crate::toyvqa::Split;

/// Split together with its prediction counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SplitScore {
    pub examples: usize,
    pub correct: usize,
}

impl SplitScore {
    pub fn accuracy(&self) -> f64 {
        if self.examples == 0 {
            0.0
        } else {
            self.correct as f64 / self.examples as f64
        }
    }
}

/// One method row of the accuracy table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub splits: BTreeMap<Split, SplitScore>,
}

impl ReportRow {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            splits: BTreeMap::new(),
        }
    }

    /// Adds one dump; a dump must cover a single split not already present.
    pub fn add_dump(&mut self, records: &[PredictionRecord]) -> Result<()> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("row `{}`: empty prediction dump", self.name)))?;
        let split: Split = first.split.parse()?;
        if records.iter().any(|r| r.split != first.split) {
            return Err(Error::InvalidArgument(format!(
                "row `{}`: dump mixes splits",
                self.name
            )));
        }
        if self.splits.contains_key(&split) {
            return Err(Error::InvalidArgument(format!(
                "row `{}`: split {split} given twice",
                self.name
            )));
        }
        let correct = records.iter().filter(|r| r.pred == r.label).count();
        self.splits.insert(
            split,
            SplitScore {
                examples: records.len(),
                correct,
            },
        );
        Ok(())
    }
}

/// Splits `NAME=VALUE`.
pub(crate) fn parse_named(spec: &str) -> Result<(&str, &str)> {
    match spec.split_once('=') {
        Some((n, v)) if !n.is_empty() && !v.is_empty() => Ok((n, v)),
        _ => Err(Error::InvalidArgument(format!("expected NAME=VALUE, got `{spec}`"))),
    }
}

#[derive(Serialize)]
struct JsonRow<'a> {
    method: &'a str,
    splits: BTreeMap<&'static str, JsonScore>,
}

#[derive(Serialize)]
struct JsonScore {
    examples: usize,
    correct: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct JsonLog<'a> {
    run: &'a str,
    steps: usize,
    last: Option<&'a StepRecord>,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    rows: Vec<JsonRow<'a>>,
    logs: Vec<JsonLog<'a>>,
}

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Text table plus its JSON twin. Accuracies are percentages with two
/// decimals; a missing split prints as `-`.
pub fn render_report(rows: &[ReportRow], logs: &[(String, Vec<StepRecord>)]) -> (String, serde_json::Value) {
    let header: Vec<String> = std::iter::once("Method".to_string())
        .chain(SPLITS.iter().map(|s| s.name().to_string()))
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            std::iter::once(r.name.clone())
                .chain(SPLITS.iter().map(|s| match r.splits.get(s) {
                    Some(sc) => format!("{:.2}", 100.0 * sc.accuracy()),
                    None => "-".into(),
                }))
                .collect()
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let mut s = cells
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect::<Vec<_>>()
            .join(" | ");
        s.push('\n');
        s
    };
    let mut text = line(&header);
    text.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
    text.push('\n');
    for r in &body {
        text.push_str(&line(r));
    }
    for (name, log) in logs {
        match log.last() {
            Some(l) => text.push_str(&format!(
                "\n{name}: {} steps, final l_con {:.6}, combined {:.6}",
                log.len(),
                l.l_con,
                l.combined
            )),
            None => text.push_str(&format!("\n{name}: empty log")),
        }
    }
    if !logs.is_empty() {
        text.push('\n');
    }

    let json = JsonReport {
        rows: rows
            .iter()
            .map(|r| JsonRow {
                method: &r.name,
                splits: r
                    .splits
                    .iter()
                    .map(|(s, sc)| {
                        (
                            s.name(),
                            JsonScore {
                                examples: sc.examples,
                                correct: sc.correct,
                                accuracy: sc.accuracy(),
                            },
                        )
                    })
                    .collect(),
            })
            .collect(),
        logs: logs
            .iter()
            .map(|(n, l)| JsonLog {
                run: n,
                steps: l.len(),
                last: l.last(),
            })
            .collect(),
    };
    (text, serde_json::to_value(json).expect("report serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dump(split: &str, hits: &[bool]) -> Vec<PredictionRecord> {
        hits.iter()
            .enumerate()
            .map(|(i, &h)| PredictionRecord {
                split: split.into(),
                example: i as u64,
                model: "m".into(),
                label: 1,
                pred: if h { 1 } else { 0 },
                probs: vec![0.5, 0.5],
            })
            .collect()
    }

    #[test]
    fn grid_layout() {
        let mut a = ReportRow::new("vanilla");
        a.add_dump(&dump("val", &[true, false, true, true])).unwrap();
        let mut b = ReportRow::new("at+avg");
        b.add_dump(&dump("train", &[true, true])).unwrap();
        b.add_dump(&dump("val", &[true, true, true])).unwrap();
        let (text, json) = render_report(&[a, b], &[]);
        assert_eq!(
            text,
            "Method  |  train |    val | test\n\
             --------|--------|--------|-----\n\
             vanilla |      - |  75.00 |    -\n\
             at+avg  | 100.00 | 100.00 |    -\n"
        );
        assert_eq!(json["rows"][0]["splits"]["val"]["correct"], 3);
    }

    #[test]
    fn duplicate_and_mixed_splits_rejected() {
        let mut a = ReportRow::new("x");
        a.add_dump(&dump("val", &[true])).unwrap();
        assert!(a.add_dump(&dump("val", &[true])).is_err());
        let mut mixed = dump("val", &[true]);
        mixed.extend(dump("test", &[true]));
        assert!(ReportRow::new("y").add_dump(&mixed).is_err());
        assert!(parse_named("noequals").is_err());
    }
}
