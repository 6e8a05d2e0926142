//! Small training setups shared by the training and acceptance targets.

use atfuse::image::{bright_square, synthetic_corpus, texture_field, GrayImage, ImagePair};
use atfuse::loss::texture_loss;
use atfuse::model::{AtfuseModel, ModelConfig};
use atfuse::train::{train, TrainConfig, TrainLogRecord};

/// Whole-image batches with a flat learning rate: `steps` steps over `pairs`.
pub fn overfit_config(pairs: usize, size: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        epochs: steps,
        batch_size: pairs,
        patch_size: size,
        patches_per_epoch: pairs,
        lr_halving_epochs: vec![],
        ..Default::default()
    }
}

pub struct Overfit {
    pub model: AtfuseModel,
    pub log: Vec<TrainLogRecord>,
}

impl Overfit {
    /// Mean of the last `n` logged totals over the first one.
    pub fn loss_ratio(&self, n: usize) -> f64 {
        let tail = &self.log[self.log.len() - n..];
        tail.iter().map(|r| r.total).sum::<f64>() / n as f64 / self.log[0].total
    }
}

/// Four synthetic 16x16 pairs, default network, 200 steps.
pub fn overfit_four(seed: u64) -> Overfit {
    let pairs = synthetic_corpus(4, 16, seed);
    let cfg = TrainConfig { seed, ..overfit_config(4, 16, 200) };
    let mut model = AtfuseModel::new(ModelConfig { seed, ..Default::default() }).unwrap();
    let log = train(&mut model, &pairs, &cfg, &mut ()).unwrap();
    Overfit { model, log }
}

pub struct Salience {
    pub pair: ImagePair,
    pub fused: GrayImage,
    pub fused_in_square: f64,
    pub vi_in_square: f64,
    pub texture_before: f64,
    pub texture_after: f64,
}

/// Bright 6x6 square on black (infrared) against a texture field (visible),
/// one pair overfit for 500 steps.
pub fn salience(seed: u64) -> Salience {
    let pair = ImagePair::new(bright_square(16, 16, 5, 5, 6), texture_field(16, 16, seed)).unwrap();
    let cfg = TrainConfig { seed, ..overfit_config(1, 16, 500) };
    let mut model = AtfuseModel::new(ModelConfig { seed, ..Default::default() }).unwrap();
    let before = model.fuse_images(&pair).unwrap();
    train(&mut model, std::slice::from_ref(&pair), &cfg, &mut ()).unwrap();
    let fused = model.fuse_images(&pair).unwrap();
    let inside = |img: &GrayImage| {
        let mut sum = 0.0;
        for y in 5..11 {
            for x in 5..11 {
                sum += img.get(y, x) as f64;
            }
        }
        sum / 36.0
    };
    Salience {
        fused_in_square: inside(&fused),
        vi_in_square: inside(&pair.vi),
        texture_before: texture_loss(&before, &pair.ir, &pair.vi).unwrap(),
        texture_after: texture_loss(&fused, &pair.ir, &pair.vi).unwrap(),
        fused,
        pair,
    }
}
