use serde::{Deserialize, Serialize};

use super::config::AdvConfig;
use super::inner::inner_maximize;
use super::losses::head;
use crate::diffcore::{argmax, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{embed_batch, perturb_text, FusionInput, ModelParams, ParamVars};
use crate::par::map_ordered;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub examples: usize,
    pub clean_correct: usize,
    pub attacked_correct: usize,
    pub clean_accuracy: f64,
    pub attacked_accuracy: f64,
}

/// Predicted classes with and without the perturbations.
fn predictions<S: Real>(
    batch: &[&FusionInput],
    params: &ModelParams<S>,
    deltas: &[Tensor<S>],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let cfg = params.config();
    let mut g = Graph::new();
    let pv = ParamVars::new(&mut g, params, false);
    let (x, spans) = embed_batch(&mut g, &pv, cfg, batch)?;
    let clean = head(&mut g, &pv, cfg, x, &spans)?;
    let dv: Vec<Var> = deltas.iter().map(|d| g.constant(d.clone())).collect();
    let xp = perturb_text(&mut g, x, &spans, &dv)?;
    let pert = head(&mut g, &pv, cfg, xp, &spans)?;
    let rows = |v: Var| -> Vec<usize> {
        let t = g.value(v);
        (0..t.rows()).map(|r| argmax(t.row(r))).collect()
    };
    Ok((rows(clean), rows(pert)))
}

/// Clean and attacked accuracy of a frozen model. The attack ascends the
/// perturbed cross-entropy alone. An example counts as attacked-correct only
/// if it is classified correctly both clean and under the returned δ, so the
/// attacked accuracy never exceeds the clean one.
///
/// Work is split into fixed chunks with one random stream per chunk, so the
/// result does not depend on `threads`.
pub fn attack_eval<S: Real>(
    inputs: &[&FusionInput],
    labels: &[usize],
    params: &ModelParams<S>,
    adv: &AdvConfig,
    seed: u64,
    chunk: usize,
    threads: usize,
) -> Result<AttackReport> {
    if inputs.len() != labels.len() {
        return Err(Error::Shape("one label per input expected".into()));
    }
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let attack = AdvConfig { alpha: 0.0, ..*adv };
    attack.validate()?;
    let idx: Vec<usize> = (0..inputs.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(chunk.max(1)).collect();
    let per_chunk = map_ordered(&chunks, threads, |ci, c| -> Result<(usize, usize)> {
        let batch: Vec<&FusionInput> = c.iter().map(|&i| inputs[i]).collect();
        let ys: Vec<usize> = c.iter().map(|&i| labels[i]).collect();
        let mut r = rng::indexed_stream(seed, "attack", ci as u64);
        let deltas = inner_maximize(&batch, &ys, params, &attack, &mut r)?;
        let (clean, pert) = predictions(&batch, params, &deltas)?;
        let mut ok = (0, 0);
        for ((y, c), p) in ys.iter().zip(clean).zip(pert) {
            if c == *y {
                ok.0 += 1;
                if p == *y {
                    ok.1 += 1;
                }
            }
        }
        Ok(ok)
    });
    let (mut clean_correct, mut attacked_correct) = (0, 0);
    for r in per_chunk {
        let (c, a) = r?;
        clean_correct += c;
        attacked_correct += a;
    }
    let n = inputs.len();
    Ok(AttackReport {
        examples: n,
        clean_correct,
        attacked_correct,
        clean_accuracy: clean_correct as f64 / n as f64,
        attacked_accuracy: attacked_correct as f64 / n as f64,
    })
}
