use rand::Rng;

use super::config::AdvConfig;
use super::losses::{check_labels, head};
use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{embed_batch, perturb_text, FusionInput, ModelParams, ParamVars};

/// Rescale every row (one embedding column of the sequence) whose L2 norm
/// exceeds `eps` back onto the ball.
pub fn project_columns<S: Real>(delta: &mut Tensor<S>, eps: f64) {
    let cols = delta.cols();
    for row in delta.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if norm > eps {
            let c = S::from_f64(eps / norm);
            for v in row.iter_mut() {
                *v = *v * c;
            }
        }
    }
}

/// Largest row norm, i.e. the largest per-column perturbation size.
pub fn max_column_norm<S: Real>(delta: &Tensor<S>) -> f64 {
    let cols = delta.cols();
    delta
        .data()
        .chunks(cols)
        .map(|r| r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

/// Uniform `(-scale, scale)` draws, one `rows × width` matrix per entry of `rows`.
pub fn init_deltas<S: Real, R: Rng + ?Sized>(rows: &[usize], width: usize, scale: f64, rng: &mut R) -> Vec<Tensor<S>> {
    rows.iter()
        .map(|&r| {
            let data = (0..r * width)
                .map(|_| {
                    if scale > 0.0 {
                        S::from_f64(rng.random_range(-scale..scale))
                    } else {
                        S::zero()
                    }
                })
                .collect();
            Tensor::new(vec![r, width], data).expect("shape matches data")
        })
        .collect()
}

/// `K` steps of `δ ← Π_ε(δ + η g/‖g‖_F)`, normalizing each perturbation by
/// its own gradient. `grad` returns the gradient for every perturbation.
pub fn ascend<S: Real, F>(mut deltas: Vec<Tensor<S>>, cfg: &AdvConfig, mut grad: F) -> Result<Vec<Tensor<S>>>
where
    F: FnMut(&[Tensor<S>]) -> Result<Vec<Tensor<S>>>,
{
    for _ in 0..cfg.ascent_steps {
        let grads = grad(&deltas)?;
        if grads.len() != deltas.len() {
            return Err(Error::Shape("one gradient per perturbation expected".into()));
        }
        for (d, g) in deltas.iter_mut().zip(&grads) {
            if g.shape() != d.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for perturbation {:?}",
                    g.shape(),
                    d.shape()
                )));
            }
            let norm = g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite("perturbation gradient".into()));
            }
            if norm > 0.0 {
                let c = S::from_f64(cfg.ascent_lr / norm);
                for (dv, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                    *dv = *dv + c * gv;
                }
            }
            project_columns(d, cfg.epsilon);
        }
    }
    Ok(deltas)
}

/// Worst-case text perturbations for a frozen model, one per example.
/// The clean branch does not depend on δ, so its logits enter as constants.
pub fn inner_maximize<S: Real, R: Rng + ?Sized>(
    batch: &[&FusionInput],
    labels: &[usize],
    params: &ModelParams<S>,
    cfg: &AdvConfig,
    rng: &mut R,
) -> Result<Vec<Tensor<S>>> {
    cfg.validate()?;
    let mcfg = params.config();
    check_labels(batch.len(), labels, mcfg)?;

    let mut g0 = Graph::new();
    let pv0 = ParamVars::new(&mut g0, params, false);
    let (x0, spans) = embed_batch(&mut g0, &pv0, mcfg, batch)?;
    let clean0 = head(&mut g0, &pv0, mcfg, x0, &spans)?;
    let embedded = g0.value(x0).clone();
    let clean_logits = g0.value(clean0).clone();
    drop(g0);

    let rows: Vec<usize> = spans.iter().map(|s| s.text_len).collect();
    let start = init_deltas(&rows, mcfg.hidden_dim, cfg.init_scale, rng);
    ascend(start, cfg, |deltas| {
        let mut g = Graph::new();
        let pv = ParamVars::new(&mut g, params, false);
        let x = g.constant(embedded.clone());
        let clean = g.constant(clean_logits.clone());
        let dv: Vec<Var> = deltas.iter().map(|d| g.param(d.clone())).collect();
        let xp = perturb_text(&mut g, x, &spans, &dv)?;
        let pert = head(&mut g, &pv, mcfg, xp, &spans)?;
        let ce = g.cross_entropy(pert, labels.to_vec())?;
        let loss = if cfg.alpha > 0.0 {
            let j = g.jsd(pert, clean)?;
            let j = g.scale(j, cfg.alpha)?;
            g.add(ce, j)?
        } else {
            ce
        };
        let mut grads = g.backward(loss)?;
        Ok(dv
            .iter()
            .zip(deltas)
            .map(|(&v, d)| grads.take(v).unwrap_or_else(|| Tensor::zeros(d.shape())))
            .collect())
    })
}
