//! Optimization loop, evaluation and single-pair prediction.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_pretrained_encoder, Checkpoint, RngState};
use crate::data::{augment, BiTemporalTile, ChannelStats};
use crate::decoder::ChangeProbabilityMap;
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Mode};
use crate::loss::{DiceConfig, FocalConfig};
use crate::mask::BinaryMask;
use crate::metrics::{ConfusionCounts, Scores};
use crate::model::{assemble_model, stack_inputs, Model, ModelConfig, Variant};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub augment: bool,
    /// Epochs without a val-F1 improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 4,
            epochs: 200,
            lr_milestones: (1..=20).map(|k| 10 * k).collect(),
            lr_gamma: 0.9,
            seed: 0,
            variant: Variant::Full,
            max_steps: 0,
            augment: true,
            early_stop_patience: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma.is_finite()) {
            return Err(Error::config(format!("lr_gamma must be positive, got {}", self.lr_gamma)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight_decay must be ≥ 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "lr_milestones must be strictly increasing, got {:?}",
                self.lr_milestones
            )));
        }
        Ok(())
    }
}

/// `lr · gamma^(milestones ≤ epoch)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let passed = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    cfg.lr * cfg.lr_gamma.powi(passed as i32)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with L2 weight decay folded into the gradient of decaying tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub weight_decay: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Parameters that receive weight decay.
    pub fn decay_group(store: &ParamStore) -> Vec<String> {
        store.params().filter(|(_, p)| p.kind.decays()).map(|(n, _)| n.clone()).collect()
    }

    pub fn no_decay_group(store: &ParamStore) -> Vec<String> {
        store.params().filter(|(_, p)| !p.kind.decays()).map(|(n, _)| n.clone()).collect()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, p) in store.params_mut() {
            let Some(g) = grads.param(name) else { continue };
            let n = p.value.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || g.numel() != n {
                return Err(Error::shape(format!("optimizer state for `{name}` does not match the parameter")));
            }
            let wd = if p.kind.decays() { self.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi + wd * *w;
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *w -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step { step: usize, epoch: usize, loss: f64, lr: f64 },
    Epoch { epoch: usize, lr: f64, val: Option<Scores> },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the final step.
    pub last: Checkpoint,
    /// Highest validation F1 seen (ties keep the earlier epoch); `last` when
    /// there is no validation set.
    pub best: Checkpoint,
    pub losses: Vec<f64>,
    pub log: Vec<LogRecord>,
}

struct LogSink(Option<BufWriter<File>>);

impl LogSink {
    fn write(&mut self, rec: &LogRecord, path: &Path) -> Result<()> {
        if let Some(w) = self.0.as_mut() {
            let line = serde_json::to_string(rec).expect("log record serializes");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Trains `cfg.variant` on `train_set`, validating after every epoch. With an
/// `out_dir`, writes `train.log.jsonl`, `best.ckpt` and `last.ckpt` there.
#[allow(clippy::too_many_arguments)]
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    focal: &FocalConfig,
    dice: &DiceConfig,
    train_set: &[BiTemporalTile],
    val_set: &[BiTemporalTile],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    focal.validate()?;
    dice.validate()?;
    if train_set.is_empty() {
        return Err(Error::Ingestion("training split is empty".into()));
    }
    if train_set.iter().any(|t| t.mask.is_none()) {
        return Err(Error::Ingestion("every training tile needs a mask".into()));
    }
    let mut model = assemble_model(cfg.variant, model_cfg, cfg.seed)?;
    if model_cfg.encoder.pretrained {
        load_pretrained_encoder(&mut model, Path::new(&model_cfg.encoder.pretrained_weights))?;
    }
    model.stats = ChannelStats::compute(train_set)?;

    let log_path = out_dir.map(|d| d.join("train.log.jsonl")).unwrap_or_default();
    let mut sink = LogSink(None);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        sink.0 = Some(BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut losses = Vec::new();
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0usize;
    let mut step = 0usize;
    let mut epoch = 0usize;
    let snapshot = |model: &Model, adam: &Adam, rng: &ChaCha8Rng, epoch: usize, step: usize| Checkpoint {
        model: model.clone(),
        train: cfg.clone(),
        epoch,
        step: step as u64,
        optimizer: adam.clone(),
        rng: RngState::capture(rng),
    };

    'epochs: while epoch < cfg.epochs {
        let lr = lr_at(cfg, epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            let batch: Vec<BiTemporalTile> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train_set[i], &mut rng)
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let loss = train_step(&mut model, &mut adam, &batch, focal, dice, lr)
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Numerical(format!("step {}: {msg}", step + 1)),
                    other => other,
                })?;
            step += 1;
            losses.push(loss);
            let rec = LogRecord::Step { step, epoch, loss, lr };
            sink.write(&rec, &log_path)?;
            log.push(rec);
        }
        let val = if val_set.is_empty() { None } else { Some(evaluate(&model, val_set)?) };
        let rec = LogRecord::Epoch { epoch, lr, val };
        sink.write(&rec, &log_path)?;
        log.push(rec);
        epoch += 1;
        if let Some(s) = val {
            if best.as_ref().is_none_or(|(f, _)| s.f1 > *f) {
                let ck = snapshot(&model, &adam, &rng, epoch, step);
                if let Some(dir) = out_dir {
                    ck.save(&dir.join("best.ckpt"))?;
                }
                best = Some((s.f1, ck));
                stale = 0;
            } else {
                stale += 1;
            }
        }
        if let Some(dir) = out_dir {
            snapshot(&model, &adam, &rng, epoch, step).save(&dir.join("last.ckpt"))?;
        }
        if cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience {
            break;
        }
    }

    let last = snapshot(&model, &adam, &rng, epoch, step);
    if let Some(dir) = out_dir {
        last.save(&dir.join("last.ckpt"))?;
    }
    let best = match best {
        Some((_, ck)) => ck,
        None => {
            if let Some(dir) = out_dir {
                last.save(&dir.join("best.ckpt"))?;
            }
            last.clone()
        }
    };
    Ok(TrainOutcome {
        last,
        best,
        losses,
        log,
    })
}

/// One forward/backward pass and optimizer update; returns the batch loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[BiTemporalTile],
    focal: &FocalConfig,
    dice: &DiceConfig,
    lr: f64,
) -> Result<f64> {
    let refs: Vec<&BiTemporalTile> = batch.iter().collect();
    let (a, b) = stack_inputs(&refs, &model.stats)?;
    let masks: Vec<&BinaryMask> = batch
        .iter()
        .map(|t| t.mask.as_ref().ok_or_else(|| Error::Ingestion(format!("{}: tile has no mask", t.name))))
        .collect::<Result<_>>()?;
    let target = BinaryMask::stack(&masks)?;
    let (loss, grads, updates) = {
        let mut g = Graph::new(&model.params, Mode::Train);
        let (x1, x2) = (g.input(a), g.input(b));
        let logits = model.net.forward(&mut g, x1, x2)?;
        let loss = g.hybrid_loss(logits, &target, *focal, *dice)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        (value, grads, g.take_norm_updates())
    };
    for (name, grad) in grads.params() {
        if grad.is_some_and(|t| !t.all_finite()) {
            return Err(Error::numerical(format!("non-finite gradient for `{name}`")));
        }
    }
    adam.step(&mut model.params, &grads, lr)?;
    for u in &updates {
        model.params.apply_norm_update(u)?;
    }
    Ok(loss)
}

/// Scores of `predictor` on every masked tile, in dataset order.
pub fn evaluate_with(
    dataset: &[BiTemporalTile],
    mut predictor: impl FnMut(&BiTemporalTile) -> Result<BinaryMask>,
) -> Result<Scores> {
    if dataset.is_empty() {
        return Err(Error::Ingestion("cannot evaluate an empty split".into()));
    }
    let mut counts = ConfusionCounts::default();
    for tile in dataset {
        let gt = tile
            .mask
            .as_ref()
            .ok_or_else(|| Error::Ingestion(format!("{}: evaluation needs a ground-truth mask", tile.name)))?;
        let pred = predictor(tile)?;
        counts = counts.accumulate(&pred, gt)?;
    }
    counts.finalize()
}

/// Un-augmented forward pass of every tile, binarized and scored.
pub fn evaluate(model: &Model, dataset: &[BiTemporalTile]) -> Result<Scores> {
    evaluate_with(dataset, |t| Ok(model.predict_tile(t)?.1))
}

/// Change map for a pair of 3×H×W images in [0, 1].
pub fn predict(model: &Model, t1: &Tensor, t2: &Tensor) -> Result<(ChangeProbabilityMap, BinaryMask)> {
    let tile = BiTemporalTile::new("input", t1.clone(), t2.clone(), None)?;
    model.predict_tile(&tile)
}
