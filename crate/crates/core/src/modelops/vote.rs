use crate::error::{Error, Result};

/// Predicted classes of `M` models on `N` examples, optionally with each
/// model's probability row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    classes: usize,
    preds: Vec<Vec<usize>>,
    probs: Option<Vec<Vec<Vec<f64>>>>,
}

impl PredictionMatrix {
    pub fn new(classes: usize, preds: Vec<Vec<usize>>, probs: Option<Vec<Vec<Vec<f64>>>>) -> Result<Self> {
        let m = preds.len();
        if m == 0 {
            return Err(Error::InvalidArgument("no models to vote".into()));
        }
        let n = preds[0].len();
        if preds.iter().any(|p| p.len() != n) {
            return Err(Error::Shape("models predict different numbers of examples".into()));
        }
        if let Some(c) = preds.iter().flatten().find(|&&c| c >= classes) {
            return Err(Error::InvalidArgument(format!("class {c} outside {classes} answers")));
        }
        if let Some(p) = &probs {
            let ok = p.len() == m
                && p.iter()
                    .all(|rows| rows.len() == n && rows.iter().all(|r| r.len() == classes));
            if !ok {
                return Err(Error::Shape(format!("probabilities must be {m} x {n} x {classes}")));
            }
        }
        Ok(Self { classes, preds, probs })
    }

    pub fn models(&self) -> usize {
        self.preds.len()
    }

    pub fn examples(&self) -> usize {
        self.preds[0].len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn predictions(&self, model: usize) -> &[usize] {
        &self.preds[model]
    }

    pub fn probabilities(&self) -> Option<&[Vec<Vec<f64>>]> {
        self.probs.as_deref()
    }
}

/// Per example: the most frequent class; among tied classes the highest
/// probability summed over models, then the lowest class index.
pub fn majority_vote(pm: &PredictionMatrix) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(pm.examples());
    let mut counts = vec![0usize; pm.classes];
    for e in 0..pm.examples() {
        counts.iter_mut().for_each(|c| *c = 0);
        for p in &pm.preds {
            counts[p[e]] += 1;
        }
        let top = *counts.iter().max().expect("at least one class");
        let tied: Vec<usize> = (0..pm.classes).filter(|&c| counts[c] == top).collect();
        if tied.len() == 1 {
            out.push(tied[0]);
            continue;
        }
        let probs = pm.probs.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "example {e}: classes {tied:?} tie on votes and no probabilities were given"
            ))
        })?;
        let mut best = tied[0];
        let mut best_mass = f64::NEG_INFINITY;
        for &c in &tied {
            let mass: f64 = probs.iter().map(|rows| rows[e][c]).sum();
            if mass > best_mass {
                best = c;
                best_mass = mass;
            }
        }
        out.push(best);
    }
    Ok(out)
}
