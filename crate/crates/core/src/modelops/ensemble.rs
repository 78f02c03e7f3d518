use serde::{Deserialize, Serialize};

use crate::diffcore::{argmax, softmax, Real, Tensor};
use crate::error::{Error, Result};
use crate::model::{logits_many, AnyCheckpoint, FusionInput, ModelParams};

use super::vote::{majority_vote, PredictionMatrix};

/// Examples per forward batch during evaluation; fixed so results do not
/// depend on the thread count.
pub const EVAL_CHUNK: usize = 64;

/// Anything that produces answer logits.
pub trait Predictor: Sync {
    fn answer_count(&self) -> usize;
    fn logits(&self, inputs: &[&FusionInput], threads: usize) -> Result<Vec<Vec<f64>>>;
}

impl<S: Real> Predictor for ModelParams<S> {
    fn answer_count(&self) -> usize {
        self.config().answer_count
    }

    fn logits(&self, inputs: &[&FusionInput], threads: usize) -> Result<Vec<Vec<f64>>> {
        Ok(logits_many(self, inputs, EVAL_CHUNK, threads)?
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.as_f64()).collect())
            .collect())
    }
}

impl Predictor for AnyCheckpoint {
    fn answer_count(&self) -> usize {
        self.config().answer_count
    }

    fn logits(&self, inputs: &[&FusionInput], threads: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            AnyCheckpoint::F32(c) => c.params.logits(inputs, threads),
            AnyCheckpoint::F64(c) => c.params.logits(inputs, threads),
        }
    }
}

/// Predictions of one model on a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
    pub accuracy: f64,
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

pub fn evaluate(
    model: &dyn Predictor,
    inputs: &[&FusionInput],
    labels: &[usize],
    threads: usize,
) -> Result<Evaluation> {
    if inputs.len() != labels.len() {
        return Err(Error::Shape("one label per input expected".into()));
    }
    let logits = model.logits(inputs, threads)?;
    let mut predictions = Vec::with_capacity(logits.len());
    let mut probabilities = Vec::with_capacity(logits.len());
    for row in logits {
        predictions.push(argmax(&row));
        probabilities.push(softmax(&Tensor::vector(row))?.into_data());
    }
    let accuracy = accuracy(&predictions, labels);
    Ok(Evaluation {
        predictions,
        probabilities,
        accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub accuracy: f64,
    pub per_model: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// Majority vote of several models, with each member's own accuracy.
pub fn ensemble_eval(
    models: &[&dyn Predictor],
    inputs: &[&FusionInput],
    labels: &[usize],
    threads: usize,
) -> Result<EnsembleReport> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("an ensemble needs at least one model".into()))?;
    let classes = first.answer_count();
    if let Some(i) = models.iter().position(|m| m.answer_count() != classes) {
        return Err(Error::InvalidArgument(format!(
            "model {i} answers {} classes, model 0 answers {classes}",
            models[i].answer_count()
        )));
    }
    let evals = models
        .iter()
        .map(|m| evaluate(*m, inputs, labels, threads))
        .collect::<Result<Vec<_>>>()?;
    let per_model = evals.iter().map(|e| e.accuracy).collect();
    let (preds, probs): (Vec<_>, Vec<_>) = evals.into_iter().map(|e| (e.predictions, e.probabilities)).unzip();
    let pm = PredictionMatrix::new(classes, preds, Some(probs))?;
    let predictions = majority_vote(&pm)?;
    Ok(EnsembleReport {
        accuracy: accuracy(&predictions, labels),
        per_model,
        predictions,
    })
}
