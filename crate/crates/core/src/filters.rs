//! Fixed 3x3 filters on plain `f64` planes.

use crate::tensor::ops_reflect as reflect;

/// Horizontal-derivative Sobel kernel, row-major.
pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
/// Vertical-derivative Sobel kernel, row-major.
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Cross-correlation with reflect-101 borders.
pub fn filter3x3(data: &[f64], height: usize, width: usize, kernel: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0.0; height * width];
    filter_plane(data, height, width, kernel, &mut out);
    out
}

/// Each kernel row is summed separately before the rows are combined, so a
/// response that cancels by mirror symmetry at a border is exactly zero
/// rather than a rounding residue of either sign.
pub(crate) fn filter_plane(src: &[f64], height: usize, width: usize, kernel: &[f64; 9], dst: &mut [f64]) {
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for ky in 0..3 {
                let sy = reflect(y as isize + ky as isize - 1, height);
                let mut row = 0.0;
                for kx in 0..3 {
                    let sx = reflect(x as isize + kx as isize - 1, width);
                    row += kernel[ky * 3 + kx] * src[sy * width + sx];
                }
                acc += row;
            }
            dst[y * width + x] = acc;
        }
    }
}

pub fn sobel(data: &[f64], height: usize, width: usize) -> (Vec<f64>, Vec<f64>) {
    (filter3x3(data, height, width, &SOBEL_X), filter3x3(data, height, width, &SOBEL_Y))
}

/// `|Gx| + |Gy|` per pixel.
pub fn sobel_l1(data: &[f64], height: usize, width: usize) -> Vec<f64> {
    let (gx, gy) = sobel(data, height, width);
    gx.iter().zip(&gy).map(|(a, b)| a.abs() + b.abs()).collect()
}
