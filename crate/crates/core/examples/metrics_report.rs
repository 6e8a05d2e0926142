//! AG, EN, SD, SF and Qabf for a few reference images.

use atfuse::image::{synthetic_pair, GrayImage};
use atfuse::metrics::{avg_gradient, entropy, qabf, spatial_frequency, std_dev, MetricReport};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // every 8-bit level exactly once
    let ramp = GrayImage::from_fn(16, 16, |y, x| (y * 16 + x) as f32 / 255.0)?;
    println!(
        "ramp: EN {} AG {:.4} SD {:.4} SF {:.4}",
        entropy(&ramp),
        avg_gradient(&ramp),
        std_dev(&ramp),
        spatial_frequency(&ramp)
    );

    let pair = synthetic_pair(32, 5);
    let (h, w) = pair.dims();
    let average = GrayImage::from_fn(h, w, |y, x| (pair.ir.get(y, x) + pair.vi.get(y, x)) / 2.0)?;
    let flat = GrayImage::constant(h, w, 0.5)?;
    for (name, img) in [("ir", &pair.ir), ("vi", &pair.vi), ("average", &average), ("flat", &flat)] {
        println!("{name:>8}: {}", MetricReport::evaluate(img, &pair.ir, &pair.vi)?);
    }
    println!("Qabf(ir as fused) = {:.4}", qabf(&pair.ir, &pair.ir, &pair.ir)?);
    Ok(())
}
