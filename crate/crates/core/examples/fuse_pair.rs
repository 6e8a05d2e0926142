//! Fuses one infrared/visible pair and prints the quality metrics.
//!
//! With no arguments a synthetic pair is used with a freshly initialized
//! network. Otherwise:
//!
//! cargo run --release --example fuse_pair -- CHECKPOINT IR VI OUT

use std::path::PathBuf;

use atfuse::image::{load_gray, save_gray, synthetic_pair, ImagePair};
use atfuse::metrics::MetricReport;
use atfuse::model::{load_checkpoint, AtfuseModel, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<PathBuf> = std::env::args_os().skip(1).map(PathBuf::from).collect();
    let (model, pair, out) = match args.as_slice() {
        [ckpt, ir, vi, out] => {
            let pair = ImagePair::new(load_gray(ir)?, load_gray(vi)?)?;
            (load_checkpoint(ckpt)?, pair, out.clone())
        }
        [] => {
            let model = AtfuseModel::new(ModelConfig::default())?;
            (model, synthetic_pair(32, 7), std::env::temp_dir().join("atfuse_fused.pgm"))
        }
        _ => return Err("usage: fuse_pair [CHECKPOINT IR VI OUT]".into()),
    };

    let (h, w) = pair.dims();
    let p = model.config().patch_size;
    if h % p != 0 || w % p != 0 {
        eprintln!("{h}x{w} is not a multiple of {p}; cropping");
    }
    let pair = ImagePair::new(pair.ir.crop_to_multiple(p)?, pair.vi.crop_to_multiple(p)?)?;

    let fused = model.fuse_images(&pair)?;
    save_gray(&fused, &out)?;
    println!("wrote {} ({}x{})", out.display(), fused.height(), fused.width());
    println!("fused: {}", MetricReport::evaluate(&fused, &pair.ir, &pair.vi)?);
    println!("ir:    {}", MetricReport::evaluate(&pair.ir, &pair.ir, &pair.vi)?);
    println!("vi:    {}", MetricReport::evaluate(&pair.vi, &pair.ir, &pair.vi)?);
    Ok(())
}
