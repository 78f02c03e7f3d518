use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{AdvConfig, OptimConfig, TrainMode};
use super::inner::inner_maximize;
use super::losses::{adversarial_graph, check_labels, head, LossBreakdown};
use crate::diffcore::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{embed_batch, FusionInput, ModelParams, ParamVars};
use crate::rng;

/// Adam with bias correction. Moments are kept in `f64` regardless of the
/// parameter precision.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new<S: Real>(cfg: OptimConfig, params: &ModelParams<S>) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step<S: Real>(&mut self, params: &mut ModelParams<S>, grads: &[Tensor<S>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let OptimConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i);
            if g.len() != p.len() {
                return Err(Error::Shape(format!("gradient {i} has the wrong size")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.as_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *pv = S::from_f64(pv.as_f64() - update);
            }
        }
        Ok(())
    }
}

fn scalar<S: Real>(g: &Graph<S>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

/// Loss and parameter gradients. `deltas = None` is the vanilla objective;
/// otherwise the full objective at the given (fixed) perturbations.
pub fn loss_gradients<S: Real>(
    batch: &[&FusionInput],
    labels: &[usize],
    params: &ModelParams<S>,
    deltas: Option<&[Tensor<S>]>,
    alpha: f64,
) -> Result<(LossBreakdown, Vec<Tensor<S>>)> {
    let cfg = params.config();
    check_labels(batch.len(), labels, cfg)?;
    let mut g = Graph::new();
    let pv = ParamVars::new(&mut g, params, true);
    let (root, breakdown) = match deltas {
        None => {
            let (x, spans) = embed_batch(&mut g, &pv, cfg, batch)?;
            let logits = head(&mut g, &pv, cfg, x, &spans)?;
            let l = g.cross_entropy(logits, labels.to_vec())?;
            let v = scalar(&g, l);
            (
                l,
                LossBreakdown {
                    l_con: v,
                    r_ce: None,
                    r_jsd: None,
                    combined: v,
                },
            )
        }
        Some(d) => {
            let dv: Vec<Var> = d.iter().map(|t| g.constant(t.clone())).collect();
            let n = adversarial_graph(&mut g, &pv, cfg, batch, labels, &dv, alpha)?;
            (
                n.combined,
                LossBreakdown {
                    l_con: scalar(&g, n.l_con),
                    r_ce: Some(scalar(&g, n.r_ce)),
                    r_jsd: Some(scalar(&g, n.r_jsd)),
                    combined: scalar(&g, n.combined),
                },
            )
        }
    };
    let mut grads = g.backward(root)?;
    let out = pv
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((breakdown, out))
}

/// One outer step: inner maximization with θ frozen (adversarial mode), then
/// one optimizer step at the returned δ. Returns the pre-step losses.
#[allow(clippy::too_many_arguments)]
pub fn train_step<S: Real, R: Rng + ?Sized>(
    batch: &[&FusionInput],
    labels: &[usize],
    params: &mut ModelParams<S>,
    mode: TrainMode,
    adv: &AdvConfig,
    opt: &mut Adam,
    rng: &mut R,
    step: u64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let diverged = |detail: String| Error::Diverged { step, detail };
    let deltas = match mode {
        TrainMode::Vanilla => None,
        TrainMode::Adversarial => Some(inner_maximize(batch, labels, params, adv, rng).map_err(|e| match e {
            Error::NonFinite(what) => diverged(what),
            other => other,
        })?),
    };
    let (breakdown, grads) = loss_gradients(batch, labels, params, deltas.as_deref(), adv.alpha)?;
    if !breakdown.is_finite() {
        return Err(diverged(format!("{breakdown:?}")));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(j) = g.first_non_finite() {
            return Err(diverged(format!("gradient of parameter tensor {i} at index {j}")));
        }
    }
    opt.step(params, &grads)?;
    Ok(breakdown)
}

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_con: f64,
    pub r_ce: Option<f64>,
    pub r_jsd: Option<f64>,
    pub combined: f64,
    /// Seconds since the run started; omitted in reproducible runs.
    pub wall_clock: Option<f64>,
}

/// Append-only JSON-lines metrics log.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<StepRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format("metrics log", e.to_string())))
            .collect()
    }
}

/// Epoch-level schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub mode: TrainMode,
    pub batch_size: usize,
    pub seed: u64,
    pub adv: AdvConfig,
    pub optim: OptimConfig,
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub last_step: u64,
    pub mean_combined: f64,
    pub mean_l_con: f64,
}

/// Minibatch training with a persistent optimizer and global step counter.
pub struct Trainer<S: Real> {
    pub params: ModelParams<S>,
    pub schedule: Schedule,
    opt: Adam,
    step: u64,
    started: Instant,
    record_wall_clock: bool,
}

impl<S: Real> Trainer<S> {
    /// `step` continues the numbering of the checkpoint `params` came from.
    pub fn new(params: ModelParams<S>, schedule: Schedule, step: u64) -> Result<Self> {
        if schedule.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        schedule.optim.validate()?;
        if schedule.mode == TrainMode::Adversarial {
            schedule.adv.validate()?;
        }
        let opt = Adam::new(schedule.optim, &params);
        Ok(Self {
            params,
            schedule,
            opt,
            step,
            started: Instant::now(),
            record_wall_clock: false,
        })
    }

    pub fn record_wall_clock(mut self, on: bool) -> Self {
        self.record_wall_clock = on;
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One shuffled pass over `inputs`; `on_step` sees every record.
    pub fn run_epoch(
        &mut self,
        inputs: &[FusionInput],
        labels: &[usize],
        epoch: usize,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<EpochSummary> {
        if inputs.len() != labels.len() || inputs.is_empty() {
            return Err(Error::InvalidArgument(
                "need one label per input and at least one input".into(),
            ));
        }
        let s = self.schedule;
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut rng::indexed_stream(s.seed, "shuffle", epoch as u64));
        let (mut sum_c, mut sum_l, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(s.batch_size) {
            let batch: Vec<&FusionInput> = idx.iter().map(|&i| &inputs[i]).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let step = self.step + 1;
            let mut drng = rng::indexed_stream(s.seed, "delta-init", step);
            let b = train_step(
                &batch,
                &ys,
                &mut self.params,
                s.mode,
                &s.adv,
                &mut self.opt,
                &mut drng,
                step,
            )?;
            self.step = step;
            sum_c += b.combined;
            sum_l += b.l_con;
            batches += 1;
            on_step(&StepRecord {
                step,
                epoch,
                l_con: b.l_con,
                r_ce: b.r_ce,
                r_jsd: b.r_jsd,
                combined: b.combined,
                wall_clock: self.record_wall_clock.then(|| self.started.elapsed().as_secs_f64()),
            })?;
        }
        Ok(EpochSummary {
            epoch,
            last_step: self.step,
            mean_combined: sum_c / batches as f64,
            mean_l_con: sum_l / batches as f64,
        })
    }
}
