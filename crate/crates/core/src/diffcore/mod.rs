//! Dense tensors, a recorded gradient trace, and a finite-difference checker.

mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{softmax, Gradients, Graph, Op, Var};
pub use real::{Precision, Real};
pub use tensor::Tensor;

pub(crate) use graph::log_sum_exp;
#[allow(unused_imports)]
pub(crate) use graph::{jsd_terms, softmax_row};

use crate::error::{Error, Result};

/// `-log softmax(logits)[label]` for a single logit row.
pub fn cross_entropy<S: Real>(logits: &Tensor<S>, label: usize) -> Result<S> {
    if logits.rank() != 1 {
        return Err(Error::Shape(format!(
            "cross_entropy expects one logit row, got {:?}",
            logits.shape()
        )));
    }
    logits.ensure_finite("cross_entropy logits")?;
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let row = logits.data();
    Ok((log_sum_exp(row) - row[label]).max(S::zero()))
}

/// Index of the largest entry; the lowest index wins ties. NaN never wins.
pub fn argmax<S: Real>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] || (row[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}
