use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{
    classify_graph, embed_batch, encode_graph, perturb_text, FusionInput, ModelConfig, ModelParams, ParamVars, SpanMap,
};

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if let Some(i) = p.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{name}[{i}] = {} is not a probability",
            p[i]
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in nats.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution("p", p)?;
    check_distribution("q", q)?;
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(ai, _)| **ai > 0.0)
            .map(|(&ai, &bi)| ai * (ai / (0.5 * (ai + bi))).ln())
            .sum()
    };
    Ok((0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)).max(0.0))
}

/// Loss components of one batch, each the mean over examples.
/// `r_ce` and `r_jsd` are absent for vanilla steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_con: f64,
    pub r_ce: Option<f64>,
    pub r_jsd: Option<f64>,
    pub combined: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [Some(self.l_con), self.r_ce, self.r_jsd, Some(self.combined)]
            .into_iter()
            .flatten()
            .all(f64::is_finite)
    }
}

/// Logits of the `[CLS]` rows.
pub(crate) fn head<S: Real>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    input: Var,
    spans: &[SpanMap],
) -> Result<Var> {
    let hidden = encode_graph(g, pv, cfg, input, spans)?;
    let cls = g.gather_rows(hidden, spans.iter().map(|s| s.start).collect())?;
    classify_graph(g, pv, cfg, cls)
}

/// Scalar nodes of the full objective.
pub(crate) struct LossNodes {
    pub l_con: Var,
    pub r_ce: Var,
    pub r_jsd: Var,
    pub combined: Var,
}

/// Clean and perturbed branches sharing one embedding; gradients reach the
/// parameters through both branches.
pub(crate) fn adversarial_graph<S: Real>(
    g: &mut Graph<S>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    batch: &[&FusionInput],
    labels: &[usize],
    deltas: &[Var],
    alpha: f64,
) -> Result<LossNodes> {
    let (x, spans) = embed_batch(g, pv, cfg, batch)?;
    let clean = head(g, pv, cfg, x, &spans)?;
    let xp = perturb_text(g, x, &spans, deltas)?;
    let pert = head(g, pv, cfg, xp, &spans)?;
    let l_con = g.cross_entropy(clean, labels.to_vec())?;
    let r_ce = g.cross_entropy(pert, labels.to_vec())?;
    let r_jsd = g.jsd(pert, clean)?;
    let sum = g.add(l_con, r_ce)?;
    let weighted = g.scale(r_jsd, alpha)?;
    let combined = g.add(sum, weighted)?;
    Ok(LossNodes {
        l_con,
        r_ce,
        r_jsd,
        combined,
    })
}

pub(crate) fn check_labels(batch_len: usize, labels: &[usize], cfg: &ModelConfig) -> Result<()> {
    if labels.len() != batch_len {
        return Err(Error::Shape(format!(
            "{} labels for {} examples",
            labels.len(),
            batch_len
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= cfg.answer_count) {
        return Err(Error::InvalidArgument(format!(
            "label {y} outside {} answer classes",
            cfg.answer_count
        )));
    }
    Ok(())
}

fn scalar<S: Real>(g: &Graph<S>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

/// All loss components at the given perturbations (one per example).
pub fn losses<S: Real>(
    batch: &[&FusionInput],
    labels: &[usize],
    params: &ModelParams<S>,
    deltas: &[Tensor<S>],
    alpha: f64,
) -> Result<LossBreakdown> {
    let cfg = params.config();
    check_labels(batch.len(), labels, cfg)?;
    let mut g = Graph::new();
    let pv = ParamVars::new(&mut g, params, false);
    let dv: Vec<Var> = deltas.iter().map(|d| g.constant(d.clone())).collect();
    let n = adversarial_graph(&mut g, &pv, cfg, batch, labels, &dv, alpha)?;
    Ok(LossBreakdown {
        l_con: scalar(&g, n.l_con),
        r_ce: Some(scalar(&g, n.r_ce)),
        r_jsd: Some(scalar(&g, n.r_jsd)),
        combined: scalar(&g, n.combined),
    })
}

/// The quantity the inner loop ascends: `r_ce + alpha * r_jsd`.
pub fn objective<S: Real>(
    batch: &[&FusionInput],
    labels: &[usize],
    params: &ModelParams<S>,
    deltas: &[Tensor<S>],
    alpha: f64,
) -> Result<f64> {
    let l = losses(batch, labels, params, deltas, alpha)?;
    Ok(l.r_ce.unwrap_or(0.0) + alpha * l.r_jsd.unwrap_or(0.0))
}
