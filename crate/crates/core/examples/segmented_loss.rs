//! The importance-partitioned pixel loss on a synthetic pair, across alpha.
//!
//! At alpha = 100 every pixel takes the max constraint, at alpha = 0 every
//! pixel takes the average constraint.

use atfuse::image::{synthetic_pair, GrayImage};
use atfuse::loss::{partition_masks, segmented_pixel_loss, texture_loss, total_loss, LossConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pair = synthetic_pair(24, 3);
    let (ir, vi) = (&pair.ir, &pair.vi);
    let (h, w) = pair.dims();
    let average = GrayImage::from_fn(h, w, |y, x| (ir.get(y, x) + vi.get(y, x)) / 2.0)?;
    let brightest = GrayImage::from_fn(h, w, |y, x| ir.get(y, x).max(vi.get(y, x)))?;

    println!("alpha  part1-pixels  loss(avg image)  loss(max image)");
    for alpha in [0.0, 10.0, 20.0, 50.0, 80.0, 100.0] {
        let masks = partition_masks(ir, vi, alpha)?;
        let n1 = masks.part1.iter().filter(|&&b| b).count();
        let (_, _, on_avg) = segmented_pixel_loss(&average, ir, vi, &masks)?;
        let (_, _, on_max) = segmented_pixel_loss(&brightest, ir, vi, &masks)?;
        println!("{alpha:>5}  {n1:>12}  {on_avg:>15.5}  {on_max:>15.5}");
    }

    println!("texture loss of the max image: {:.5}", texture_loss(&brightest, ir, vi)?);
    let b = total_loss(&average, ir, vi, &LossConfig::default())?;
    println!("total at defaults (average image): {b:?}");
    Ok(())
}
