//! The optimization loop.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::NormWindow;
use crate::error::{Error, Result};
use crate::model::{Batch, LossParts, Noise, PhysDiff, RoutingProbe};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::training::optim::{clip_grad_norm, cosine_lr, Adam};

const SHUFFLE_KEY: u64 = 0x5401;
const NOISE_KEY: u64 = 0x5402;
const VAL_KEY: u64 = 0x5403;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_diff: f64,
    pub loss_traj: f64,
    pub loss_wind: f64,
    pub loss_pres: f64,
    pub s_diff: f64,
    pub s_recon: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    fn new(step: usize, epoch: usize, l: &LossParts, lr: f64, grad_norm: f64) -> Self {
        Self {
            step,
            epoch,
            loss_total: l.total,
            loss_diff: l.diff,
            loss_traj: l.traj,
            loss_wind: l.wind,
            loss_pres: l.pres,
            s_diff: l.s_diff,
            s_recon: l.s_recon,
            lr,
            grad_norm,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    /// Mean validation `L_total` after each epoch (empty without a val set).
    pub val_losses: Vec<f64>,
    /// Epoch index and parameter values with the lowest validation loss.
    pub best: Option<(usize, Vec<Tensor>)>,
}

/// Optimizer steps for a run: `epochs · ⌈windows / batch⌉`, capped by
/// `max_steps`.
pub fn total_steps(cfg: &TrainConfig, n_windows: usize) -> usize {
    let per_epoch = n_windows.div_ceil(cfg.batch_size);
    let all = cfg.epochs * per_epoch;
    cfg.max_steps.map_or(all, |m| m.min(all))
}

/// Batch index lists for one epoch; depends only on the seed, the epoch and
/// the window count, so every model variant sees the same batches.
pub fn epoch_batches(cfg: &TrainConfig, n_windows: usize, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n_windows).collect();
    idx.shuffle(&mut stream(cfg.seed, SHUFFLE_KEY, epoch as u64));
    idx.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
}

pub fn step_noise(model: &PhysDiff, seed: u64, step: usize, batch: usize) -> Noise {
    let mut rng = stream(seed, NOISE_KEY, step as u64);
    Noise::draw(&mut rng, batch, model.n, model.cfg.d_embedding, model.sched.t_max)
}

/// Mean `L_total` over `windows` with a fixed noise draw per batch.
pub fn validation_loss(model: &PhysDiff, windows: &[NormWindow], batch_size: usize, seed: u64) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, chunk) in windows.chunks(batch_size.max(1)).enumerate() {
        let batch = Batch::new(chunk.iter().collect())?;
        let mut rng = stream(seed, VAL_KEY, i as u64);
        let noise = Noise::draw(&mut rng, chunk.len(), model.n, model.cfg.d_embedding, model.sched.t_max);
        sum += model.loss(&batch, &noise)?.total * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(if count == 0 { f64::NAN } else { sum / count as f64 })
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub step: usize,
    pub total: usize,
}

impl Trainer {
    pub fn new(model: &PhysDiff, cfg: &TrainConfig, n_windows: usize) -> Result<Self> {
        cfg.validate()?;
        if n_windows == 0 {
            return Err(Error::Config("no training windows".into()));
        }
        Ok(Self { cfg: cfg.clone(), adam: Adam::new(&model.ps), step: 0, total: total_steps(cfg, n_windows).max(1) })
    }

    /// One optimizer update on `batch`.
    pub fn train_step(
        &mut self,
        model: &mut PhysDiff,
        batch: &Batch<'_>,
        epoch: usize,
        probe: Option<&mut RoutingProbe>,
    ) -> Result<StepRecord> {
        let noise = step_noise(model, self.cfg.seed, self.step, batch.len());
        let lr = cosine_lr(self.step.min(self.total), self.total, self.cfg.lr, self.cfg.lr_min)?;
        let diag = |e: Error, step: usize| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!(
                "{msg} at step {step}, epoch {epoch}; batch windows: {}",
                batch.windows.iter().map(|w| format!("{}@{}", w.key.track_id, w.key.origin_time)).collect::<Vec<_>>().join(" ")
            )),
            other => other,
        };
        let l = model.loss_and_grad(batch, &noise, self.cfg.routing, probe).map_err(|e| diag(e, self.step))?;
        let grad_norm = clip_grad_norm(&mut model.ps, self.cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(diag(Error::NonFinite(format!("gradient norm {grad_norm}")), self.step));
        }
        self.adam.step(&mut model.ps, lr);
        let rec = StepRecord::new(self.step, epoch, &l, lr, grad_norm);
        self.step += 1;
        Ok(rec)
    }

    pub fn done(&self) -> bool {
        self.step >= self.total
    }
}

/// Full run over `train` with per-epoch validation. Each step's record is
/// written to `log` as one JSON line when given.
pub fn train(
    model: &mut PhysDiff,
    train: &[NormWindow],
    val: &[NormWindow],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, cfg, train.len())?;
    let mut out = TrainOutcome::default();
    let mut best_val = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        for (bi, idx) in epoch_batches(cfg, train.len(), epoch).into_iter().enumerate() {
            if trainer.done() {
                break;
            }
            let batch = Batch::new(idx.iter().map(|&i| &train[i]).collect())?;
            let rec = trainer.train_step(model, &batch, epoch, None).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (batch index {bi})")),
                other => other,
            })?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            out.records.push(rec);
        }
        if !val.is_empty() {
            let v = validation_loss(model, val, cfg.batch_size, cfg.seed)?;
            out.val_losses.push(v);
            if v < best_val {
                best_val = v;
                out.best = Some((epoch, model.ps.leaves().iter().map(|l| l.value.clone()).collect()));
            }
        }
        if trainer.done() {
            break;
        }
    }
    Ok(out)
}
