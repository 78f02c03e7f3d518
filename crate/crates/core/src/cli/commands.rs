use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::report::{parse_named, render_report, ReportRow};
use super::{Cli, Command, ConfigArgs};
use crate::advtrain::{attack_eval, MetricsLog, Schedule, StepRecord, Trainer};
use crate::diffcore::{Precision, Real};
use crate::error::{Error, Result};
use crate::model::{AnyCheckpoint, Checkpoint, FusionInput, ModelParams};
use crate::modelops::{
    accuracy, align_dumps, average_ring, evaluate, majority_vote, read_dump, write_dump, PredictionMatrix,
    PredictionRecord, Predictor, SnapshotRing, EVAL_CHUNK,
};
use crate::toyvqa::{Dataset, Example, Split};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const FINAL_CHECKPOINT: &str = "final.tcf";
pub const SUMMARY_FILE: &str = "summary.json";

pub(super) fn dispatch(cli: Cli) -> Result<()> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::Generate {
            out,
            seed,
            overwrite,
            cfg,
        } => generate(&out, seed, overwrite, &cfg),
        Command::Train {
            data,
            out,
            mode,
            epochs,
            seed,
            init_from,
            overwrite,
            cfg,
        } => {
            let mut sets = cfg.set.clone();
            if let Some(m) = mode {
                sets.push(format!("mode={m}"));
            }
            if let Some(e) = epochs {
                sets.push(format!("epochs={e}"));
            }
            if let Some(s) = seed {
                sets.push(format!("seed={s}"));
            }
            let run = RunConfig::resolve(cfg.config.as_deref(), &sets)?;
            train(&data, &out, &run, init_from.as_deref(), overwrite)
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            dump,
            name,
            out,
        } => eval(
            &data,
            &checkpoint,
            &split,
            dump.as_deref(),
            name,
            out.as_deref(),
            threads,
        ),
        Command::AttackEval {
            data,
            checkpoint,
            split,
            seed,
            out,
            cfg,
        } => {
            let mut sets = cfg.set.clone();
            if let Some(s) = seed {
                sets.push(format!("seed={s}"));
            }
            let run = RunConfig::resolve(cfg.config.as_deref(), &sets)?;
            attack(&data, &checkpoint, &split, &run, out.as_deref(), threads)
        }
        Command::Average {
            snapshots,
            k,
            out,
            overwrite,
        } => average(&snapshots, k, &out, overwrite),
        Command::Ensemble {
            data,
            checkpoints,
            from_dumps,
            split,
            dump,
            out,
        } => ensemble(
            data.as_deref(),
            &checkpoints,
            &from_dumps,
            &split,
            dump.as_deref(),
            out.as_deref(),
            threads,
        ),
        Command::Report { rows, logs, out } => report(&rows, &logs, &out),
    }
}

fn ensure_absent(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::AlreadyExists(path.to_path_buf()));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Print JSON to stdout and optionally save it.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value).expect("value serializes"));
    match out {
        Some(p) => write_json(p, value),
        None => Ok(()),
    }
}

fn generate(out: &Path, seed: Option<u64>, overwrite: bool, cfg: &ConfigArgs) -> Result<()> {
    let run = RunConfig::resolve(cfg.config.as_deref(), &cfg.set)?;
    let seed = seed.unwrap_or(run.seed);
    let ds = Dataset::generate(&run.data(), seed)?;
    let manifest = ds.write(out, overwrite)?;
    log::info!(
        "wrote {} / {} / {} examples to {} ({} scenes skipped)",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display(),
        manifest.skipped_scenes
    );
    Ok(())
}

fn split_data(ds: &Dataset, split: &str) -> Result<(Split, Vec<FusionInput>, Vec<usize>, Vec<u64>)> {
    let split: Split = split.parse()?;
    let examples: &[Example] = ds.split(split);
    Ok((
        split,
        examples.iter().map(Example::input).collect(),
        examples.iter().map(|e| e.answer).collect(),
        examples.iter().map(|e| e.id).collect(),
    ))
}

#[derive(Serialize)]
struct TrainSummary {
    mode: String,
    precision: Precision,
    epochs: usize,
    first_step: u64,
    last_step: u64,
    final_step: Option<StepRecord>,
    last_epoch_mean_combined: f64,
    last_epoch_mean_l_con: f64,
}

fn train(data: &Path, out: &Path, run: &RunConfig, init_from: Option<&Path>, overwrite: bool) -> Result<()> {
    let ds = Dataset::load(data)?;
    let mcfg = run.model_for(&ds.config)?;
    let init = match init_from {
        Some(p) => {
            let c = AnyCheckpoint::load(p)?;
            if *c.config() != mcfg {
                return Err(Error::Config(format!(
                    "{} was trained with a different model config than this run",
                    p.display()
                )));
            }
            Some(c)
        }
        None => None,
    };
    if out.exists() && fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some() {
        if !overwrite {
            return Err(Error::AlreadyExists(out.to_path_buf()));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join(CONFIG_FILE), run.to_toml()).map_err(|e| Error::io(out.join(CONFIG_FILE), e))?;

    match run.precision {
        Precision::F32 => {
            let (params, step) = match init {
                Some(AnyCheckpoint::F32(c)) => (c.params, c.step),
                Some(AnyCheckpoint::F64(c)) => (c.params.cast(), c.step),
                None => (ModelParams::init(mcfg, run.seed)?, 0),
            };
            train_loop::<f32>(&ds, out, run, params, step)
        }
        Precision::F64 => {
            let (params, step) = match init {
                Some(AnyCheckpoint::F64(c)) => (c.params, c.step),
                Some(AnyCheckpoint::F32(c)) => (c.params.cast(), c.step),
                None => (ModelParams::init(mcfg, run.seed)?, 0),
            };
            train_loop::<f64>(&ds, out, run, params, step)
        }
    }
}

fn train_loop<S: Real>(ds: &Dataset, out: &Path, run: &RunConfig, params: ModelParams<S>, step: u64) -> Result<()> {
    let inputs: Vec<FusionInput> = ds.train.iter().map(Example::input).collect();
    let labels: Vec<usize> = ds.train.iter().map(|e| e.answer).collect();
    let schedule = Schedule {
        mode: run.mode,
        batch_size: run.batch_size,
        seed: run.seed,
        adv: run.adv(),
        optim: run.optim(),
    };
    let mut trainer = Trainer::new(params, schedule, step)?.record_wall_clock(run.wallclock);
    let mut log = MetricsLog::open(&out.join(METRICS_FILE))?;
    let mut ring = SnapshotRing::open(&out.join(SNAPSHOT_DIR), run.snapshot_capacity)?;
    let mut last = None;
    let mut summary = None;
    for epoch in 0..run.epochs {
        let s = trainer.run_epoch(&inputs, &labels, epoch, |rec| {
            last = Some(rec.clone());
            log.append(rec)
        });
        log.flush()?;
        let s = s?;
        ring.push(&Checkpoint::new(trainer.params.clone(), run.seed, trainer.step()))?;
        log::info!(
            "{} epoch {}/{}: step {} mean loss {:.5}",
            run.mode,
            epoch + 1,
            run.epochs,
            s.last_step,
            s.mean_combined
        );
        summary = Some(s);
    }
    let summary = summary.expect("at least one epoch");
    Checkpoint::new(trainer.params.clone(), run.seed, trainer.step()).save(&out.join(FINAL_CHECKPOINT))?;
    write_json(
        &out.join(SUMMARY_FILE),
        &TrainSummary {
            mode: run.mode.to_string(),
            precision: run.precision,
            epochs: run.epochs,
            first_step: step + 1,
            last_step: trainer.step(),
            final_step: last,
            last_epoch_mean_combined: summary.mean_combined,
            last_epoch_mean_l_con: summary.mean_l_con,
        },
    )
}

#[derive(Serialize)]
struct EvalOutput {
    split: Split,
    examples: usize,
    correct: usize,
    accuracy: f64,
}

fn records(
    split: Split,
    ids: &[u64],
    model: &str,
    labels: &[usize],
    preds: &[usize],
    probs: Vec<Vec<f64>>,
) -> Vec<PredictionRecord> {
    ids.iter()
        .zip(labels)
        .zip(preds)
        .zip(probs)
        .map(|(((&example, &label), &pred), probs)| PredictionRecord {
            split: split.name().to_string(),
            example,
            model: model.to_string(),
            label,
            pred,
            probs,
        })
        .collect()
}

fn model_name(checkpoint: &Path) -> String {
    checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn eval(
    data: &Path,
    checkpoint: &Path,
    split: &str,
    dump: Option<&Path>,
    name: Option<String>,
    out: Option<&Path>,
    threads: usize,
) -> Result<()> {
    let ds = Dataset::load(data)?;
    let ckpt = AnyCheckpoint::load(checkpoint)?;
    let (split, inputs, labels, ids) = split_data(&ds, split)?;
    let refs: Vec<&FusionInput> = inputs.iter().collect();
    let ev = evaluate(&ckpt, &refs, &labels, threads)?;
    if let Some(path) = dump {
        let name = name.unwrap_or_else(|| model_name(checkpoint));
        write_dump(
            path,
            &records(split, &ids, &name, &labels, &ev.predictions, ev.probabilities),
        )?;
    }
    let correct = ev.predictions.iter().zip(&labels).filter(|(p, y)| p == y).count();
    emit(
        &EvalOutput {
            split,
            examples: labels.len(),
            correct,
            accuracy: ev.accuracy,
        },
        out,
    )
}

#[derive(Serialize)]
struct AttackOutput {
    split: Split,
    epsilon: f64,
    ascent_steps: usize,
    #[serde(flatten)]
    report: crate::advtrain::AttackReport,
}

fn attack(
    data: &Path,
    checkpoint: &Path,
    split: &str,
    run: &RunConfig,
    out: Option<&Path>,
    threads: usize,
) -> Result<()> {
    let ds = Dataset::load(data)?;
    let ckpt = AnyCheckpoint::load(checkpoint)?;
    let (split, inputs, labels, _) = split_data(&ds, split)?;
    let refs: Vec<&FusionInput> = inputs.iter().collect();
    let adv = run.adv();
    let report = match &ckpt {
        AnyCheckpoint::F32(c) => attack_eval(&refs, &labels, &c.params, &adv, run.seed, EVAL_CHUNK, threads)?,
        AnyCheckpoint::F64(c) => attack_eval(&refs, &labels, &c.params, &adv, run.seed, EVAL_CHUNK, threads)?,
    };
    emit(
        &AttackOutput {
            split,
            epsilon: adv.epsilon,
            ascent_steps: adv.ascent_steps,
            report,
        },
        out,
    )
}

fn average(snapshots: &Path, k: usize, out: &Path, overwrite: bool) -> Result<()> {
    if !snapshots.is_dir() {
        return Err(Error::MissingArtifact(snapshots.to_path_buf()));
    }
    ensure_absent(out, overwrite)?;
    let ring = SnapshotRing::open(snapshots, usize::MAX)?;
    let avg = average_ring(&ring, k)?;
    avg.save(out)?;
    log::info!(
        "averaged steps {:?} into {}",
        &ring.steps()[ring.len() - k..],
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EnsembleOutput {
    split: String,
    examples: usize,
    accuracy: f64,
    members: Vec<String>,
    per_model: Vec<f64>,
}

fn ensemble(
    data: Option<&Path>,
    checkpoints: &[PathBuf],
    from_dumps: &[PathBuf],
    split: &str,
    dump: Option<&Path>,
    out: Option<&Path>,
    threads: usize,
) -> Result<()> {
    let (matrix, ids, labels, split, members): (PredictionMatrix, Vec<u64>, Vec<usize>, String, Vec<String>) =
        match (checkpoints.is_empty(), from_dumps.is_empty()) {
            (false, true) => {
                let data = data.ok_or_else(|| Error::InvalidArgument("--data is required with --checkpoint".into()))?;
                let ds = Dataset::load(data)?;
                let (split, inputs, labels, ids) = split_data(&ds, split)?;
                let refs: Vec<&FusionInput> = inputs.iter().collect();
                let models = checkpoints
                    .iter()
                    .map(|p| AnyCheckpoint::load(p))
                    .collect::<Result<Vec<_>>>()?;
                let classes = models[0].answer_count();
                if models.iter().any(|m| m.answer_count() != classes) {
                    return Err(Error::InvalidArgument(
                        "checkpoints disagree on the answer vocabulary".into(),
                    ));
                }
                let evals = models
                    .iter()
                    .map(|m| evaluate(m, &refs, &labels, threads))
                    .collect::<Result<Vec<_>>>()?;
                let (preds, probs) = evals.into_iter().map(|e| (e.predictions, e.probabilities)).unzip();
                let names = checkpoints.iter().map(|p| p.display().to_string()).collect();
                (
                    PredictionMatrix::new(classes, preds, Some(probs))?,
                    ids,
                    labels,
                    split.name().to_string(),
                    names,
                )
            }
            (true, false) => {
                let dumps = from_dumps.iter().map(|p| read_dump(p)).collect::<Result<Vec<_>>>()?;
                let names = dumps
                    .iter()
                    .map(|d| d.first().map(|r| r.model.clone()).unwrap_or_default())
                    .collect();
                let a = align_dumps(&dumps)?;
                (a.matrix, a.examples, a.labels, a.split, names)
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "give either --checkpoint (with --data) or --from-dump, not both".into(),
                ))
            }
        };
    let voted = majority_vote(&matrix)?;
    let per_model = (0..matrix.models())
        .map(|m| accuracy(matrix.predictions(m), &labels))
        .collect();
    if let Some(path) = dump {
        let probs = matrix.probabilities().expect("probabilities are always collected");
        let m = probs.len() as f64;
        let mean: Vec<Vec<f64>> = (0..labels.len())
            .map(|e| {
                (0..matrix.classes())
                    .map(|c| probs.iter().map(|p| p[e][c]).sum::<f64>() / m)
                    .collect()
            })
            .collect();
        let split_enum: Split = split.parse()?;
        write_dump(path, &records(split_enum, &ids, "ensemble", &labels, &voted, mean))?;
    }
    emit(
        &EnsembleOutput {
            split,
            examples: labels.len(),
            accuracy: accuracy(&voted, &labels),
            members,
            per_model,
        },
        out,
    )
}

fn report(rows: &[String], logs: &[String], out: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one --row".into()));
    }
    let mut table = Vec::new();
    for spec in rows {
        let (name, files) = parse_named(spec)?;
        let mut row = ReportRow::new(name);
        for f in files.split(',') {
            row.add_dump(&read_dump(Path::new(f))?)?;
        }
        table.push(row);
    }
    let mut runs = Vec::new();
    for spec in logs {
        let (name, file) = parse_named(spec)?;
        let path = Path::new(file);
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        runs.push((name.to_string(), MetricsLog::read(path)?));
    }
    let (text, json) = render_report(&table, &runs);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("report.txt"), &text).map_err(|e| Error::io(out.join("report.txt"), e))?;
    write_json(&out.join("report.json"), &json)?;
    print!("{text}");
    Ok(())
}
