use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment, Normalization};
use super::data::Sample;
use super::loss::bce_dice_loss;
use super::metrics::{compute_metrics, Metrics};
use super::optim::{cosine_lr, AdamW};
use crate::error::{config_err, Error, Result};
use crate::network::{ArrayKind, Checkpoint, NamedArray, Network, RngState};
use crate::numerics::{Graph, Mode, Tensor};

const SHUFFLE_KEY: u64 = 0x5348_5546_464c_4531;
const AUGMENT_KEY: u64 = 0x4155_474d_454e_5431;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub t_max: usize,
    pub eta_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-2,
            t_max: 50,
            eta_min: 1e-5,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(config_err!("lr: must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("weight_decay: must be non-negative, got {}", self.weight_decay));
        }
        if !(self.eta_min >= 0.0) || self.eta_min > self.lr {
            return Err(config_err!("eta_min: must lie in [0, lr], got {}", self.eta_min));
        }
        if self.t_max == 0 {
            return Err(config_err!("t_max: must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size: must be >= 1"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        cosine_lr(self.lr, self.eta_min, self.t_max, epoch)
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub metrics: Metrics,
}

pub const LOG_HEADER: [&str; 8] = ["epoch", "lr", "loss", "miou", "dsc", "acc", "spe", "sen"];

impl EpochLog {
    fn record(&self) -> [String; 8] {
        let m = &self.metrics;
        [
            self.epoch.to_string(),
            format!("{:e}", self.lr),
            format!("{:.6}", self.loss),
            format!("{:.6}", m.miou()),
            format!("{:.6}", m.dsc()),
            format!("{:.6}", m.acc()),
            format!("{:.6}", m.spe()),
            format!("{:.6}", m.sen()),
        ]
    }
}

/// Writes the log as CSV with columns `epoch,lr,loss,miou,dsc,acc,spe,sen`.
pub fn write_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let io = |e: csv::Error| Error::Data(format!("cannot write {}: {}", path.display(), e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(LOG_HEADER).map_err(io)?;
    for r in rows {
        w.write_record(r.record()).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends one row, writing the header first when the file is new or empty.
pub fn append_log(path: &Path, row: &EpochLog) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let io = |e: csv::Error| Error::Data(format!("cannot write {}: {}", path.display(), e));
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        w.write_record(LOG_HEADER).map_err(io)?;
    }
    w.write_record(row.record()).map_err(io)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Stacks images (and masks) of `samples` into `[B, C, H, W]`.
pub fn stack(samples: &[Sample], mask: bool) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    fn part(s: &Sample, mask: bool) -> &Tensor<f32> {
        if mask {
            &s.mask
        } else {
            &s.image
        }
    }
    let pick = |s| part(s, mask);
    let shape = pick(first).shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * pick(first).numel());
    for s in samples {
        if pick(s).shape() != shape.as_slice() {
            return Err(Error::Dimension(format!("sample `{}` has shape {:?}, batch has {:?}", s.id, pick(s).shape(), shape)));
        }
        data.extend_from_slice(pick(s).data());
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// Inference-mode metrics over `data`, micro-averaged.
pub fn evaluate(net: &Network<f32>, data: &[Sample], norm: &Normalization, batch_size: usize) -> Result<Metrics> {
    let mut total = Metrics::default();
    for chunk in data.chunks(batch_size.max(1)) {
        let prepared: Vec<Sample> =
            chunk.iter().map(|s| Sample { image: norm.apply(&s.image), ..s.clone() }).collect();
        let pred = net.predict(&stack(&prepared, false)?)?;
        total += compute_metrics(&pred, &stack(chunk, true)?)?;
    }
    Ok(total)
}

/// Mini-batch AdamW training with a per-epoch cosine schedule.
///
/// Every random draw comes from ChaCha streams keyed by the seed: the batch
/// order of epoch `e` from stream `e`, the augmentation of the sample at
/// position `i` of epoch `e` from its own stream. Training can therefore
/// resume at any step from the epoch and step counters alone.
pub struct Trainer<'n> {
    pub net: &'n mut Network<f32>,
    pub cfg: TrainConfig,
    pub norm: Normalization,
    pub opt: AdamW<f32>,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimizer steps taken in the current epoch.
    pub batch: usize,
}

impl<'n> Trainer<'n> {
    pub fn new(net: &'n mut Network<f32>, cfg: TrainConfig, norm: Normalization) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&net.store, cfg.weight_decay);
        Ok(Trainer { net, cfg, norm, opt, epoch: 0, batch: 0 })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr_at(self.epoch)
    }

    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    fn order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ SHUFFLE_KEY);
        rng.set_stream(epoch as u64);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Augmented, normalized samples of batch `b` in the current epoch.
    pub fn batch_samples(&self, data: &[Sample], b: usize) -> Vec<Sample> {
        let order = self.order(data.len(), self.epoch);
        let bs = self.cfg.batch_size;
        let hi = ((b + 1) * bs).min(data.len());
        (b * bs..hi)
            .map(|pos| {
                let s = &data[order[pos]];
                if self.cfg.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ AUGMENT_KEY);
                    rng.set_stream((self.epoch * data.len() + pos) as u64);
                    augment(s, &mut rng, &self.norm)
                } else {
                    Sample { image: self.norm.apply(&s.image), ..s.clone() }
                }
            })
            .collect()
    }

    /// Forward, backward and one optimizer update on prepared samples.
    /// Returns the loss and the confusion counts of the training
    /// predictions.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<(f64, Metrics)> {
        let x = stack(batch, false)?;
        let y = stack(batch, true)?;
        let lr = self.lr();
        let (loss, metrics, grads, updates) = {
            let g = Graph::new(&self.net.store, Mode::Train);
            let xv = g.input(x);
            let pred = self.net.forward(&g, xv)?;
            let loss = bce_dice_loss(&g, pred, &y)?;
            let metrics = compute_metrics(&g.value(pred), &y)?;
            let grads = g.backward(loss)?;
            (g.value(loss).data()[0] as f64, metrics, grads, g.take_buffer_updates())
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {}", loss)));
        }
        self.net.store.apply_buffer_updates(updates);
        self.opt.update(&mut self.net.store, &grads, lr)?;
        Ok((loss, metrics))
    }

    /// Runs the rest of the current epoch. Without `eval` the logged
    /// metrics are the training-batch predictions of this epoch; with it,
    /// an inference pass over `eval` after the epoch.
    pub fn run_epoch(&mut self, data: &[Sample], eval: Option<&[Sample]>) -> Result<EpochLog> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let lr = self.lr();
        let nb = self.batches_per_epoch(data.len());
        let (mut loss_sum, mut seen, mut running) = (0.0, 0usize, Metrics::default());
        while self.batch < nb {
            let batch = self.batch_samples(data, self.batch);
            let (loss, m) = self.train_step(&batch).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "training diverged at epoch {}, step {}: {}",
                    self.epoch + 1,
                    self.batch + 1,
                    msg
                )),
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            running += m;
            self.batch += 1;
        }
        let metrics = match eval {
            Some(ev) => evaluate(self.net, ev, &self.norm, self.cfg.batch_size)?,
            None => running,
        };
        let row = EpochLog { epoch: self.epoch + 1, lr, loss: loss_sum / seen.max(1) as f64, metrics };
        self.epoch += 1;
        self.batch = 0;
        Ok(row)
    }

    /// Runs epochs until `cfg.epochs` are complete, calling `on_epoch` after
    /// each.
    pub fn run(&mut self, data: &[Sample], eval: Option<&[Sample]>, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let mut rows = Vec::new();
        while self.epoch < self.cfg.epochs {
            let row = self.run_epoch(data, eval)?;
            on_epoch(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    /// Weights, buffers, optimizer moments and counters.
    pub fn checkpoint(&self, config_text: String, n_samples: usize) -> Checkpoint {
        let mut ck = Checkpoint::from_network(self.net, config_text);
        ck.epoch = self.epoch as u64;
        ck.step = (self.epoch * self.batches_per_epoch(n_samples) + self.batch) as u64;
        ck.rng = Some(RngState { seed: self.cfg.seed, stream: self.epoch as u64, word_pos: 0 });
        for (p, (m, v)) in self.net.store.params().iter().zip(self.opt.m.iter().zip(&self.opt.v)) {
            ck.arrays.push(NamedArray { kind: ArrayKind::OptimM, name: p.name.clone(), value: m.clone() });
            ck.arrays.push(NamedArray { kind: ArrayKind::OptimV, name: p.name.clone(), value: v.clone() });
        }
        ck
    }

    /// Restores weights and optimizer state from `ck` into `net` and
    /// continues from its step.
    pub fn resume(
        net: &'n mut Network<f32>,
        ck: &Checkpoint,
        cfg: TrainConfig,
        norm: Normalization,
        n_samples: usize,
    ) -> Result<Self> {
        ck.load_into(net)?;
        let mut t = Trainer::new(net, cfg, norm)?;
        for (kind, slot) in [(ArrayKind::OptimM, 0), (ArrayKind::OptimV, 1)] {
            let mut found = 0;
            for a in ck.arrays_of(kind) {
                let id = t
                    .net
                    .store
                    .find(&a.name)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter `{}`", a.name)))?;
                let dst = if slot == 0 { &mut t.opt.m[id.0] } else { &mut t.opt.v[id.0] };
                if dst.shape() != a.value.shape() {
                    return Err(Error::Checkpoint(format!("optimizer state `{}` has shape {:?}", a.name, a.value.shape())));
                }
                *dst = a.value.clone();
                found += 1;
            }
            if found != 0 && found != t.opt.m.len() {
                return Err(Error::Checkpoint(format!("optimizer state covers {} of {} parameters", found, t.opt.m.len())));
            }
        }
        let nb = t.batches_per_epoch(n_samples) as u64;
        t.epoch = ck.epoch as usize;
        let within = ck.step.checked_sub(ck.epoch * nb).filter(|&b| b < nb.max(1));
        t.batch = within.ok_or_else(|| {
            Error::Checkpoint(format!("step {} is not inside epoch {} ({} batches per epoch)", ck.step, ck.epoch, nb))
        })? as usize;
        t.opt.step = ck.step;
        Ok(t)
    }
}
