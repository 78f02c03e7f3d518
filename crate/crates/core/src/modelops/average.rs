use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};
use crate::model::{AnyCheckpoint, Checkpoint, ModelParams};

use super::snapshot::SnapshotRing;

/// Element-wise mean of every parameter tensor, accumulated in `f64` in the
/// given order. Seed and step come from the last (newest) checkpoint.
pub fn average<S: Real>(ckpts: &[Checkpoint<S>]) -> Result<Checkpoint<S>> {
    let newest = ckpts
        .last()
        .ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    let config = *newest.params.config();
    if let Some(c) = ckpts.iter().find(|c| *c.params.config() != config) {
        return Err(Error::InvalidArgument(format!(
            "checkpoint at step {} has a different model config",
            c.step
        )));
    }
    let k = ckpts.len() as f64;
    let tensors = newest
        .params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut acc = vec![0.0f64; t.len()];
            for c in ckpts {
                for (a, v) in acc.iter_mut().zip(c.params.tensor(i).data()) {
                    *a += v.as_f64();
                }
            }
            let data = acc.into_iter().map(|a| S::from_f64(a / k)).collect();
            Tensor::new(t.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint::new(
        ModelParams::from_tensors(config, tensors)?,
        newest.seed,
        newest.step,
    ))
}

/// Average of the newest `k` snapshots in a ring.
pub fn average_ring(ring: &SnapshotRing, k: usize) -> Result<AnyCheckpoint> {
    let ckpts = ring.load_last(k)?;
    average_any(&ckpts)
}

/// [`average`] over checkpoints that must share one precision.
pub fn average_any(ckpts: &[AnyCheckpoint]) -> Result<AnyCheckpoint> {
    let mixed = || Error::InvalidArgument("cannot average checkpoints of mixed precision".into());
    match ckpts.first() {
        None => Err(Error::InvalidArgument("nothing to average".into())),
        Some(AnyCheckpoint::F32(_)) => {
            let v: Vec<Checkpoint<f32>> = ckpts
                .iter()
                .map(|c| match c {
                    AnyCheckpoint::F32(c) => Ok(c.clone()),
                    _ => Err(mixed()),
                })
                .collect::<Result<_>>()?;
            Ok(AnyCheckpoint::F32(average(&v)?))
        }
        Some(AnyCheckpoint::F64(_)) => {
            let v: Vec<Checkpoint<f64>> = ckpts
                .iter()
                .map(|c| match c {
                    AnyCheckpoint::F64(c) => Ok(c.clone()),
                    _ => Err(mixed()),
                })
                .collect::<Result<_>>()?;
            Ok(AnyCheckpoint::F64(average(&v)?))
        }
    }
}
