//! Overfits the network to four synthetic 16x16 pairs (a warm square over a
//! textured scene) and reports how the loss terms and the square's brightness
//! evolve.
//!
//! cargo run --release --example train_synthetic [steps]

use std::time::Instant;

use atfuse::image::synthetic_corpus;
use atfuse::model::{AtfuseModel, ModelConfig};
use atfuse::train::{evaluate_loss, train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let pairs = synthetic_corpus(4, 16, 1);
    let model_cfg = ModelConfig { shallow_channels: 8, embed_dim: 16, mlp_hidden: 32, ..Default::default() };
    // whole images, all four per batch: one step per epoch
    let cfg = TrainConfig {
        epochs: steps,
        batch_size: 4,
        patch_size: 16,
        patches_per_epoch: 4,
        lr_halving_epochs: vec![],
        ..Default::default()
    };
    let mut model = AtfuseModel::new(model_cfg)?;
    println!("parameters: {}", model.parameter_count());
    let before = evaluate_loss(&model, &pairs, &cfg.loss)?;

    let start = Instant::now();
    let log = train(&mut model, &pairs, &cfg, &mut ())?;
    for r in log.iter().filter(|r| r.step == 1 || r.step % 25 == 0) {
        println!(
            "step {:>4}  total {:.5}  part1 {:.5}  part2 {:.5}  texture {:.5}",
            r.step, r.total, r.l_part1, r.l_part2, r.l_texture
        );
    }
    let after = evaluate_loss(&model, &pairs, &cfg.loss)?;
    println!("{:.1}s", start.elapsed().as_secs_f64());
    println!("eval loss {:.5} -> {:.5}, texture {:.5} -> {:.5}", before.total, after.total, before.l_texture, after.l_texture);

    // brightness inside the infrared square: fused vs visible
    for (i, p) in pairs.iter().enumerate() {
        let fused = model.fuse_images(p)?;
        let inside: Vec<usize> = (0..256).filter(|&k| p.ir.pixels()[k] > 0.5).collect();
        let mean = |v: &[f32]| inside.iter().map(|&k| v[k] as f64).sum::<f64>() / inside.len() as f64;
        println!(
            "pair {i}: square mean fused {:.3}  vi {:.3}  ir {:.3}",
            mean(fused.pixels()),
            mean(p.vi.pixels()),
            mean(p.ir.pixels())
        );
    }
    Ok(())
}
