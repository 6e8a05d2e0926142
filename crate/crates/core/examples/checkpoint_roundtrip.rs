//! Saves a model, reloads it, and confirms parameters and fused output are
//! bitwise identical. Also shows the error for a corrupted file.

use atfuse::image::synthetic_pair;
use atfuse::model::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, AtfuseModel, ModelConfig, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("atfuse_checkpoint_example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.atf");

    let model = AtfuseModel::new(ModelConfig { seed: 11, variant: Variant::NoDiim, ..Default::default() })?;
    save_checkpoint(&model, &path)?;
    let back = load_checkpoint(&path)?;
    println!("{} tensors, {} parameters", model.store().len(), model.parameter_count());
    println!("checksum {:016x} -> {:016x}", model.store().checksum(), back.store().checksum());
    let has_diim = back.store().iter().any(|(_, p)| p.name.contains(".diim."));
    println!("variant {}, DIIM blobs present: {has_diim}", back.config().variant);

    let pair = synthetic_pair(16, 2);
    println!("fused output identical: {}", model.fuse_images(&pair)? == back.fuse_images(&pair)?);

    let mut bytes = write_checkpoint(&model);
    bytes.truncate(bytes.len() / 2);
    println!("truncated file: {}", read_checkpoint(&bytes).unwrap_err());
    Ok(())
}
