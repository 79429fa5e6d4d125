use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, RunConfig};
use super::dataset::Sample;
use super::eval::evaluate;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PreparedScene, Vocabularies};
use crate::numerics::{adam_step, Checkpoint, OptimizerState, Tape, Tensor};
use crate::objective::{LossWeights, MetricsReport};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EPOCH_LOG: &str = "train_log.jsonl";
pub const STEP_LOG: &str = "steps.jsonl";

const STREAM_INIT: u64 = 10;
const STREAM_SHUFFLE: u64 = 11;
const STREAM_PE: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub bce: f64,
    pub dice: f64,
    pub rel: f64,
    pub score: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub stats: StepStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<MetricsReport>,
}

/// Everything needed to continue a run.
pub struct TrainState {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub epochs_done: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    vocab: Vocabularies,
    epochs_done: usize,
    step: u64,
    schedule: crate::numerics::LrSchedule,
    #[serde(default)]
    run: Option<RunConfig>,
}

const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

impl TrainState {
    pub fn fresh(cfg: &RunConfig, vocab: Vocabularies) -> Result<Self> {
        let model = Model::new(cfg.model.clone(), vocab, derive_seed(cfg.seed, STREAM_INIT, 0, 0))?;
        Ok(TrainState { model, optimizer: OptimizerState::new(cfg.train.schedule()), epochs_done: 0 })
    }

    pub fn to_checkpoint(&self, run: Option<&RunConfig>) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> =
            self.model.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        let opt = &self.optimizer;
        if !opt.first.is_empty() {
            for ((_, n, t), (m, v)) in self.model.store.iter().zip(opt.first.iter().zip(&opt.second)) {
                let shape = t.shape().to_vec();
                tensors.push((format!("{MOMENT1}{n}"), Tensor::new(shape.clone(), m.clone()).expect("moment shape")));
                tensors.push((format!("{MOMENT2}{n}"), Tensor::new(shape, v.clone()).expect("moment shape")));
            }
        }
        let meta = CheckpointMeta {
            model: self.model.config.clone(),
            vocab: self.model.vocab.clone(),
            epochs_done: self.epochs_done,
            step: opt.step,
            schedule: opt.schedule.clone(),
            run: run.cloned(),
        };
        Checkpoint { tensors, meta: serde_json::to_value(meta).expect("meta serializes") }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta)
            .map_err(|e| Error::Invalid(format!("checkpoint metadata: {e}")))?;
        let mut store = crate::numerics::ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (name, t) in ckpt.tensors {
            if let Some(p) = name.strip_prefix(MOMENT1) {
                first.push((p.to_string(), t.into_data()));
            } else if let Some(p) = name.strip_prefix(MOMENT2) {
                second.push((p.to_string(), t.into_data()));
            } else {
                store.insert(name, t);
            }
        }
        let model = Model::from_store(meta.model, meta.vocab, store)?;
        let order: Vec<&str> = model.store.iter().map(|(_, n, _)| n).collect();
        let arrange = |mut buf: Vec<(String, Vec<f64>)>| -> Result<Vec<Vec<f64>>> {
            if buf.is_empty() {
                return Ok(Vec::new());
            }
            order
                .iter()
                .map(|n| {
                    let i = buf
                        .iter()
                        .position(|(b, _)| b == n)
                        .ok_or_else(|| Error::Invalid(format!("checkpoint lacks moments for `{n}`")))?;
                    Ok(buf.swap_remove(i).1)
                })
                .collect()
        };
        let first = arrange(first)?;
        let second = arrange(second)?;
        let optimizer = OptimizerState { first, second, step: meta.step, schedule: meta.schedule };
        Ok(TrainState { model, optimizer, epochs_done: meta.epochs_done })
    }

    pub fn save(&self, path: &Path, run: Option<&RunConfig>) -> Result<()> {
        let tmp = path.with_extension("tmp");
        self.to_checkpoint(run).save(&tmp)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Loads only the model from a checkpoint written by training.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(TrainState::load(path)?.model)
}

/// Forward and backward for each sample of one batch, then one clipped Adam
/// update. `pe_seeds` gives the sign-flip seed of each sample.
pub fn train_step(
    state: &mut TrainState,
    scenes: &[PreparedScene],
    batch: &[&Sample],
    pe_seeds: &[u64],
    weights: &LossWeights,
    grad_clip: Option<f64>,
    lr: f64,
) -> Result<StepStats> {
    let model = &mut state.model;
    model.store.zero_grad();
    let mut stats = StepStats::default();
    let inv = 1.0 / batch.len() as f64;
    for (sample, &seed) in batch.iter().zip(pe_seeds) {
        let mut tape = Tape::new();
        let s = model.encode_scene(&mut tape, &scenes[sample.scene])?;
        let mut pe = sample.expr.pe.clone();
        pe.randomize_signs(&mut ChaCha8Rng::seed_from_u64(seed));
        let out = model.decode(&mut tape, s, &sample.expr, Some(&pe))?;
        let (total, terms) = model.loss(&mut tape, &out, &sample.expr, weights)?;
        let loss = tape.scalar(total);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} on {}", sample.expr.record.expr_id)));
        }
        stats.loss += inv * loss;
        stats.bce += inv * tape.scalar(terms.bce);
        stats.dice += inv * tape.scalar(terms.dice);
        stats.rel += inv * tape.scalar(terms.rel);
        stats.score += inv * tape.scalar(terms.score);
        let scaled = tape.scale(total, inv);
        tape.backward(scaled, &mut model.store)?;
    }
    let norm = model.store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    stats.grad_norm = norm;
    if let Some(c) = grad_clip {
        if norm > c {
            model.store.scale_grads(c / norm);
        }
    }
    adam_step(&mut state.optimizer, &mut model.store, lr)?;
    model.store.zero_grad();
    Ok(stats)
}

/// Options that do not belong in the run configuration.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub out: PathBuf,
    /// Continue from `out/checkpoint.bin` when it exists.
    pub resume: bool,
    /// Evaluate on these samples after each epoch.
    pub eval_each_epoch: bool,
    pub workers: usize,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochLog>,
}

/// Runs the configured schedule on `train`, logging to `opts.out`.
pub fn train(
    cfg: &RunConfig,
    vocab: Vocabularies,
    scenes: &[PreparedScene],
    train: &[Sample],
    val: &[Sample],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("no training samples".into()));
    }
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let ckpt_path = opts.out.join(CHECKPOINT_FILE);
    let mut state = if opts.resume && ckpt_path.exists() {
        TrainState::load(&ckpt_path)?
    } else {
        for f in [EPOCH_LOG, STEP_LOG] {
            let p = opts.out.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        TrainState::fresh(cfg, vocab)?
    };
    let schedule = cfg.train.schedule();
    let bs = cfg.train.batch_size;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    while state.epochs_done < cfg.train.epochs {
        if cfg.train.max_steps.is_some_and(|m| state.optimizer.step >= m as u64) {
            break;
        }
        let epoch = state.epochs_done;
        let lr = schedule.rate(epoch);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64, 0)));
        let mut sum = 0.0;
        let mut steps = 0u64;
        let mut step_lines = Vec::new();
        for chunk in order.chunks(bs) {
            if cfg.train.max_steps.is_some_and(|m| state.optimizer.step >= m as u64) {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> =
                chunk.iter().map(|&i| derive_seed(cfg.seed, STREAM_PE, epoch as u64, i as u64)).collect();
            let stats = match train_step(&mut state, scenes, &batch, &seeds, &cfg.loss, cfg.train.grad_clip, lr) {
                Ok(s) => s,
                Err(e @ Error::NonFinite(_)) => {
                    let dump = opts.out.join("nonfinite_dump.bin");
                    state.save(&dump, Some(cfg))?;
                    let ids: Vec<&str> = batch.iter().map(|s| s.expr.record.expr_id.as_str()).collect();
                    return Err(Error::NonFinite(format!(
                        "{e}; batch {ids:?} at epoch {epoch}, state dumped to {}",
                        dump.display()
                    )));
                }
                Err(e) => return Err(e),
            };
            sum += stats.loss;
            steps += 1;
            step_lines.push(StepLog { epoch, step: state.optimizer.step, lr, stats });
        }
        state.epochs_done += 1;
        let val_report = if opts.eval_each_epoch && !val.is_empty() {
            Some(evaluate(&state.model, scenes, val, opts.workers)?.0)
        } else {
            None
        };
        let log = EpochLog { epoch, steps, lr, mean_loss: sum / steps.max(1) as f64, val: val_report };
        append_jsonl(&opts.out.join(STEP_LOG), &step_lines)?;
        append_jsonl(&opts.out.join(EPOCH_LOG), std::slice::from_ref(&log))?;
        epochs.push(log);
        let last = state.epochs_done == cfg.train.epochs;
        if last || state.epochs_done % cfg.train.checkpoint_every.max(1) == 0 {
            state.save(&ckpt_path, Some(cfg))?;
        }
    }
    state.save(&ckpt_path, Some(cfg))?;
    Ok(TrainOutcome { state, epochs })
}

fn append_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::json(path, e))?;
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
