//! No-reference fusion quality metrics.
//!
//! Scales: AG and SD are computed on `[0, 255]`, EN on 256 quantized levels,
//! SF on `[0, 1]`. Qabf is scale-free.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use crate::filters::sobel;
use crate::image::GrayImage;
use crate::loss::LossError;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub ag: f64,
    pub en: f64,
    pub sd: f64,
    pub sf: f64,
    pub qabf: f64,
}

impl MetricReport {
    pub fn evaluate(fused: &GrayImage, ir: &GrayImage, vi: &GrayImage) -> Result<Self, LossError> {
        Ok(Self {
            ag: avg_gradient(fused),
            en: entropy(fused),
            sd: std_dev(fused),
            sf: spatial_frequency(fused),
            qabf: qabf(fused, ir, vi)?,
        })
    }

    pub fn mean(reports: &[MetricReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(Self { ag: sum(|r| r.ag), en: sum(|r| r.en), sd: sum(|r| r.sd), sf: sum(|r| r.sf), qabf: sum(|r| r.qabf) })
    }

    pub fn csv_fields(&self) -> String {
        format!("{},{},{},{},{}", self.ag, self.en, self.sd, self.sf, self.qabf)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AG={:.4} EN={:.4} SD={:.4} SF={:.4} Qabf={:.4}", self.ag, self.en, self.sd, self.sf, self.qabf)
    }
}

pub const CSV_HEADER: &str = "name,ag,en,sd,sf,qabf";

fn scaled(img: &GrayImage, scale: f64) -> Vec<f64> {
    img.pixels().iter().map(|&p| p as f64 * scale).collect()
}

/// Mean of `sqrt((dx^2 + dy^2) / 2)` over the `(H-1) x (W-1)` forward
/// differences, on the `[0, 255]` scale. Zero when either side is 1.
pub fn avg_gradient(img: &GrayImage) -> f64 {
    let (h, w) = img.dims();
    if h < 2 || w < 2 {
        return 0.0;
    }
    let v = scaled(img, 255.0);
    let mut total = 0.0;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let c = v[y * w + x];
            let dx = v[y * w + x + 1] - c;
            let dy = v[(y + 1) * w + x] - c;
            total += ((dx * dx + dy * dy) / 2.0).sqrt();
        }
    }
    total / ((h - 1) * (w - 1)) as f64
}

/// Shannon entropy in bits of the 256-bin histogram.
pub fn entropy(img: &GrayImage) -> f64 {
    let mut hist = [0usize; 256];
    for q in img.quantized() {
        hist[q as usize] += 1;
    }
    let n = img.pixels().len() as f64;
    let e: f64 = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    // a single occupied bin gives -0.0
    e.max(0.0)
}

/// Population standard deviation of `scale * pixel`.
pub fn std_dev_scaled(img: &GrayImage, scale: f64) -> f64 {
    let v = scaled(img, scale);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Standard deviation on the `[0, 255]` scale.
pub fn std_dev(img: &GrayImage) -> f64 {
    std_dev_scaled(img, 255.0)
}

/// `sqrt(RF^2 + CF^2)` with RF/CF the RMS of horizontal/vertical neighbour
/// differences on the `[0, 1]` scale. A direction with no differences
/// contributes 0.
pub fn spatial_frequency(img: &GrayImage) -> f64 {
    let (h, w) = img.dims();
    let v = scaled(img, 1.0);
    let rms = |pairs: &mut dyn Iterator<Item = (usize, usize)>| {
        let (mut s, mut n) = (0.0, 0usize);
        for (a, b) in pairs {
            let d = v[a] - v[b];
            s += d * d;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            (s / n as f64).sqrt()
        }
    };
    let rf = rms(&mut (0..h).flat_map(|y| (1..w).map(move |x| (y * w + x, y * w + x - 1))));
    let cf = rms(&mut (1..h).flat_map(|y| (0..w).map(move |x| (y * w + x, (y - 1) * w + x))));
    (rf * rf + cf * cf).sqrt()
}

const QG: (f64, f64, f64) = (0.9994, -15.0, 0.5);
const QA: (f64, f64, f64) = (0.9879, -22.0, 0.8);

struct EdgeMap {
    strength: Vec<f64>,
    angle: Vec<f64>,
}

fn edges(img: &GrayImage) -> EdgeMap {
    let (h, w) = img.dims();
    let (gx, gy) = sobel(&img.to_f64(), h, w);
    let strength = gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect();
    let angle = gx.iter().zip(&gy).map(|(&x, &y)| if x == 0.0 { FRAC_PI_2 } else { (y / x).atan() }).collect();
    EdgeMap { strength, angle }
}

/// Per-pixel edge preservation of `f` relative to source `s`.
fn preservation(s: &EdgeMap, f: &EdgeMap, i: usize) -> f64 {
    let (gs, gf) = (s.strength[i], f.strength[i]);
    let g = if gs == 0.0 || gf == 0.0 {
        0.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    // orientations are lines, so the difference is folded modulo pi
    let a = ((s.angle[i] - f.angle[i]).abs() - FRAC_PI_2).abs() / FRAC_PI_2;
    let qg = QG.0 / (1.0 + (QG.1 * (g - QG.2)).exp());
    let qa = QA.0 / (1.0 + (QA.1 * (a - QA.2)).exp());
    qg * qa
}

/// Edge-transfer fidelity weighted by source edge strength. Pixels where
/// neither source has an edge are excluded; with no source edges at all the
/// result is 0.
pub fn qabf(fused: &GrayImage, ir: &GrayImage, vi: &GrayImage) -> Result<f64, LossError> {
    for s in [ir, vi] {
        if s.dims() != fused.dims() {
            return Err(LossError::Dims(fused.dims(), s.dims()));
        }
    }
    let (ef, ea, eb) = (edges(fused), edges(ir), edges(vi));
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..fused.pixels().len() {
        let (wa, wb) = (ea.strength[i], eb.strength[i]);
        if wa == 0.0 && wb == 0.0 {
            continue;
        }
        num += preservation(&ea, &ef, i) * wa + preservation(&eb, &ef, i) * wb;
        den += wa + wb;
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}
