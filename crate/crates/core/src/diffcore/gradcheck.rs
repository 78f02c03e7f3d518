use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub per_input: Vec<f64>,
    pub coordinates: usize,
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences with step `h`, coordinate by coordinate over every input.
///
/// `build` receives a fresh graph and one leaf per input and returns the
/// scalar output node. The per-coordinate error is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
        let out = build(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        per_input: vec![0.0; inputs.len()],
        coordinates: 0,
    };
    let mut points = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for c in 0..inputs[i].len() {
            let x = inputs[i].data()[c];
            points[i].data_mut()[c] = x + h;
            let plus = eval(&points)?;
            points[i].data_mut()[c] = x - h;
            let minus = eval(&points)?;
            points[i].data_mut()[c] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[c];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if err > report.per_input[i] {
                report.per_input[i] = err;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, c);
            }
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Shape(format!(
            "grad_check needs a scalar output, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
