//! Unsupervised training loop.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::{random_patches, ImageError, ImagePair};
use crate::loss::{total_loss, total_loss_on_tape, LossBreakdown, LossConfig, LossError};
use crate::model::{AtfuseModel, CheckpointError, ModelError};
use crate::tensor::{clip_grad_norm, collect_grads, AdamW, AdamWConfig, Tape, Tensor, TensorError};

pub const LOG_HEADER: &str = "epoch,step,lr,l_part1,l_part2,l_texture,total,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Epochs after which the learning rate is halved.
    pub lr_halving_epochs: Vec<usize>,
    pub patch_size: usize,
    pub patches_per_epoch: usize,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Global gradient-norm cap; 0 disables.
    pub grad_clip: f64,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            initial_lr: 2e-3,
            lr_halving_epochs: vec![50, 100, 200, 400],
            patch_size: 32,
            patches_per_epoch: 64,
            seed: 0,
            checkpoint_every: 0,
            grad_clip: 0.0,
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("patch_size", self.patch_size),
            ("patches_per_epoch", self.patches_per_epoch),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(format!("train.{name} must be positive"));
            }
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(format!("train.initial_lr must be positive, got {}", self.initial_lr));
        }
        if self.lr_halving_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err("train.lr_halving_epochs must be strictly increasing".into());
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err("train.grad_clip must be non-negative".into());
        }
        self.loss.validate().map_err(|e| e.to_string())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        lr_at_epoch(self.initial_lr, &self.lr_halving_epochs, epoch)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.patches_per_epoch.div_ceil(self.batch_size)
    }
}

/// Step schedule with 1-based epochs: the rate halves once an epoch listed in
/// `halving` has completed, so `halving = [50]` gives epoch 50 the initial
/// rate and epoch 51 half of it.
pub fn lr_at_epoch(initial: f64, halving: &[usize], epoch: usize) -> f64 {
    let drops = halving.iter().filter(|&&b| b < epoch).count();
    initial * 0.5f64.powi(drops as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    /// Global optimizer step, starting at 1.
    pub step: usize,
    pub lr: f64,
    pub l_part1: f64,
    pub l_part2: f64,
    pub l_texture: f64,
    pub total: f64,
    pub seconds: f64,
}

impl TrainLogRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.epoch, self.step, self.lr, self.l_part1, self.l_part2, self.l_texture, self.total, self.seconds
        )
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss or parameters at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Observer(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Hooks called during [`train`]; all default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &TrainLogRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: usize, _model: &AtfuseModel) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

fn stack(pairs: &[ImagePair], pick: impl Fn(&ImagePair) -> Vec<f64>) -> std::result::Result<Tensor, TensorError> {
    let (h, w) = pairs[0].dims();
    let data: Vec<f64> = pairs.iter().flat_map(pick).collect();
    Tensor::new(vec![pairs.len(), 1, h, w], data)
}

/// One forward/backward/update on `batch`; returns the loss before the update.
pub fn train_step(model: &mut AtfuseModel, opt: &mut AdamW, batch: &[ImagePair], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut stats = model.running_stats();
    let ir = tape.constant(stack(batch, |p| p.ir.to_f64())?);
    let vi = tape.constant(stack(batch, |p| p.vi.to_f64())?);
    let pass = model.forward(&mut tape, &bound, &mut stats, ir, vi, true)?;
    let loss = total_loss_on_tape(&mut tape, pass.fused, batch, &cfg.loss)?;
    let breakdown = loss.breakdown(&tape);
    let mut grads = tape.backward(loss.total)?;
    let mut g = collect_grads(model.store(), &bound, &mut grads);
    if cfg.grad_clip > 0.0 {
        clip_grad_norm(&mut g, cfg.grad_clip);
    }
    opt.step(model.store_mut(), &g)?;
    model.set_running_stats(&stats)?;
    Ok(breakdown)
}

fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Tensor(TensorError::NonFinite { .. })
            | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
            | TrainError::Loss(LossError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Trains `model` on random patches of `pairs`. Each epoch draws
/// `patches_per_epoch` crops from a generator seeded by `cfg.seed` and walks
/// them in batches. Returns one log record per step.
pub fn train(
    model: &mut AtfuseModel,
    pairs: &[ImagePair],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<TrainLogRecord>> {
    cfg.validate().map_err(TrainError::Config)?;
    if pairs.is_empty() {
        return Err(TrainError::Config("no training pairs".into()));
    }
    model.config().check_dims(cfg.patch_size, cfg.patch_size)?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.store(), cfg.initial_lr, cfg.optimizer);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        opt.learning_rate = lr;
        let set = random_patches(pairs, cfg.patch_size, cfg.patches_per_epoch, rng.random())?;
        for batch in set.patches.chunks(cfg.batch_size) {
            step += 1;
            let loss = match train_step(model, &mut opt, batch, cfg) {
                Ok(l) => l,
                Err(e) if is_non_finite(&e) => return Err(TrainError::NonFinite { epoch, step }),
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() || !model.store().all_finite() {
                return Err(TrainError::NonFinite { epoch, step });
            }
            let record = TrainLogRecord {
                epoch,
                step,
                lr,
                l_part1: loss.l_part1,
                l_part2: loss.l_part2,
                l_texture: loss.l_texture,
                total: loss.total,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::debug!("{}", record.csv_line());
            observer.on_step(&record)?;
            log.push(record);
        }
        observer.on_epoch_end(epoch, model)?;
    }
    Ok(log)
}

/// Mean eval-mode loss of the fused outputs over `pairs`.
pub fn evaluate_loss(model: &AtfuseModel, pairs: &[ImagePair], cfg: &LossConfig) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for pair in pairs {
        let fused = model.fuse_images(pair)?;
        let b = total_loss(&fused, &pair.ir, &pair.vi, cfg)?;
        acc.l_part1 += b.l_part1;
        acc.l_part2 += b.l_part2;
        acc.l_pixel += b.l_pixel;
        acc.l_texture += b.l_texture;
        acc.total += b.total;
    }
    let n = pairs.len().max(1) as f64;
    Ok(LossBreakdown {
        l_part1: acc.l_part1 / n,
        l_part2: acc.l_part2 / n,
        l_pixel: acc.l_pixel / n,
        l_texture: acc.l_texture / n,
        total: acc.total / n,
    })
}
