//! Unsupervised fusion losses.
//!
//! The total objective is `l_pixel + gamma * l_texture`:
//!
//! * `l_texture` is the mean L1 distance between the Sobel gradient magnitude
//!   of the fused image and the elementwise maximum of the sources' gradient
//!   magnitudes.
//! * `l_pixel` splits pixels by importance (`|grad I| * I`). Pixels in the top
//!   `alpha`% of either source are pulled toward `max(ir, vi)`; the rest are
//!   pulled toward both sources equally. Both parts are normalized by the full
//!   pixel count, so `alpha = 100` is a plain max constraint and `alpha = 0` a
//!   plain average constraint.
//!
//! Gradient magnitude is `|Gx| + |Gy|` with reflect-101 borders. Masks are
//! computed from the sources only and treated as constants.

use thiserror::Error;

use crate::filters::{sobel_l1, SOBEL_X, SOBEL_Y};
use crate::image::{GrayImage, ImagePair};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    Dims((usize, usize), (usize, usize)),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Percentage of most important pixels per source, in `[0, 100]`.
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 20.0, gamma: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.alpha) {
            return Err(LossError::Config(format!("alpha {} outside [0, 100]", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LossError::Config(format!("gamma {} must be a nonnegative number", self.gamma)));
        }
        Ok(())
    }
}

/// Disjoint cover of the pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMasks {
    pub height: usize,
    pub width: usize,
    pub part1: Vec<bool>,
    pub part2: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_part1: f64,
    pub l_part2: f64,
    pub l_pixel: f64,
    pub l_texture: f64,
    pub total: f64,
}

fn check_dims(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(LossError::Dims(a.dims(), b.dims()));
    }
    Ok(())
}

pub fn sobel_grad_mag(img: &GrayImage) -> Vec<f64> {
    sobel_l1(&img.to_f64(), img.height(), img.width())
}

/// Pixel importance `|grad I| * I`.
pub fn importance_map(img: &GrayImage) -> Vec<f64> {
    sobel_grad_mag(img).iter().zip(img.pixels()).map(|(g, &p)| g * p as f64).collect()
}

/// Smallest value among the top `ceil(alpha% * n)` entries, or `+inf` when
/// that count is zero. Every value `>=` the result is "in the top alpha%".
pub fn top_alpha_threshold(values: &[f64], alpha: f64) -> f64 {
    let n = values.len();
    let k = ((alpha * n as f64) / 100.0).ceil() as usize;
    if k == 0 {
        return f64::INFINITY;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[k.min(n) - 1]
}

pub fn partition_masks(ir: &GrayImage, vi: &GrayImage, alpha: f64) -> Result<PartitionMasks> {
    check_dims(ir, vi)?;
    let (pi_ir, pi_vi) = (importance_map(ir), importance_map(vi));
    let t_ir = top_alpha_threshold(&pi_ir, alpha);
    let t_vi = top_alpha_threshold(&pi_vi, alpha);
    let part1: Vec<bool> = pi_ir.iter().zip(&pi_vi).map(|(&a, &b)| a >= t_ir || b >= t_vi).collect();
    let part2 = part1.iter().map(|&p| !p).collect();
    Ok(PartitionMasks { height: ir.height(), width: ir.width(), part1, part2 })
}

/// Loss terms recorded on a tape, each a `[1]` tensor.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub part1: Var,
    pub part2: Var,
    pub pixel: Var,
    pub texture: Var,
    pub total: Var,
}

fn mask_tensor(masks: &[&[bool]], shape: Vec<usize>) -> Tensor {
    let data = masks.iter().flat_map(|m| m.iter().map(|&b| if b { 1.0 } else { 0.0 })).collect();
    Tensor::new(shape, data).expect("mask shape")
}

/// Per-pixel sources stacked as constants on the tape.
struct Sources {
    ir: Var,
    vi: Var,
    shape: Vec<usize>,
    pixels: usize,
}

fn stack_sources(tape: &mut Tape, pairs: &[ImagePair], fused_shape: &[usize]) -> Result<Sources> {
    let (h, w) = pairs[0].dims();
    let n = pairs.len();
    for p in pairs {
        if p.dims() != (h, w) {
            return Err(LossError::Dims((h, w), p.dims()));
        }
    }
    if fused_shape.iter().product::<usize>() != n * h * w || fused_shape[fused_shape.len() - 2..] != [h, w] {
        return Err(LossError::Tensor(TensorError::Shape { op: "loss", lhs: fused_shape.to_vec(), rhs: vec![n, 1, h, w] }));
    }
    let shape = fused_shape.to_vec();
    let ir = pairs.iter().flat_map(|p| p.ir.to_f64()).collect();
    let vi = pairs.iter().flat_map(|p| p.vi.to_f64()).collect();
    Ok(Sources {
        ir: tape.constant(Tensor::new(shape.clone(), ir)?),
        vi: tape.constant(Tensor::new(shape.clone(), vi)?),
        shape,
        pixels: n * h * w,
    })
}

fn grad_l1(tape: &mut Tape, x: Var) -> Result<Var> {
    let gx = tape.filter3x3_reflect(x, SOBEL_X)?;
    let gy = tape.filter3x3_reflect(x, SOBEL_Y)?;
    let ax = tape.abs(gx)?;
    let ay = tape.abs(gy)?;
    Ok(tape.add(ax, ay)?)
}

/// Texture term for a batch `fused` of shape `[N, 1, H, W]` (or `[N, H, W]`).
pub fn texture_loss_on_tape(tape: &mut Tape, fused: Var, pairs: &[ImagePair]) -> Result<Var> {
    let shape = tape.shape(fused).to_vec();
    let src = stack_sources(tape, pairs, &shape)?;
    texture_term(tape, fused, &src)
}

fn texture_term(tape: &mut Tape, fused: Var, src: &Sources) -> Result<Var> {
    let g_ir = grad_l1(tape, src.ir)?;
    let g_vi = grad_l1(tape, src.vi)?;
    let target = tape.max_elementwise(g_ir, g_vi)?;
    let g_f = grad_l1(tape, fused)?;
    let diff = tape.sub(g_f, target)?;
    let l1 = tape.abs_sum(diff)?;
    Ok(tape.scale(l1, 1.0 / src.pixels as f64)?)
}

/// Segmented pixel terms `(part1, part2)` for the given masks, one per pair.
pub fn pixel_loss_on_tape(tape: &mut Tape, fused: Var, pairs: &[ImagePair], masks: &[PartitionMasks]) -> Result<(Var, Var)> {
    let shape = tape.shape(fused).to_vec();
    let src = stack_sources(tape, pairs, &shape)?;
    pixel_terms(tape, fused, &src, masks)
}

fn pixel_terms(tape: &mut Tape, fused: Var, src: &Sources, masks: &[PartitionMasks]) -> Result<(Var, Var)> {
    let m1: Vec<&[bool]> = masks.iter().map(|m| m.part1.as_slice()).collect();
    let m2: Vec<&[bool]> = masks.iter().map(|m| m.part2.as_slice()).collect();
    let mask1 = tape.constant(mask_tensor(&m1, src.shape.clone()));
    let mask2 = tape.constant(mask_tensor(&m2, src.shape.clone()));

    let brightest = tape.max_elementwise(src.ir, src.vi)?;
    let d_max = tape.sub(fused, brightest)?;
    let a_max = tape.abs(d_max)?;
    let masked1 = tape.mul(a_max, mask1)?;
    let s1 = tape.sum(masked1)?;
    let part1 = tape.scale(s1, 1.0 / src.pixels as f64)?;

    let d_ir = tape.sub(fused, src.ir)?;
    let d_vi = tape.sub(fused, src.vi)?;
    let a_ir = tape.abs(d_ir)?;
    let a_vi = tape.abs(d_vi)?;
    let both = tape.add(a_ir, a_vi)?;
    let masked2 = tape.mul(both, mask2)?;
    let s2 = tape.sum(masked2)?;
    let part2 = tape.scale(s2, 0.5 / src.pixels as f64)?;
    Ok((part1, part2))
}

/// Full objective for a batch; per-image losses are averaged over the batch.
pub fn total_loss_on_tape(tape: &mut Tape, fused: Var, pairs: &[ImagePair], cfg: &LossConfig) -> Result<LossVars> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(LossError::Config("empty batch".into()));
    }
    let shape = tape.shape(fused).to_vec();
    let src = stack_sources(tape, pairs, &shape)?;
    let masks = pairs.iter().map(|p| partition_masks(&p.ir, &p.vi, cfg.alpha)).collect::<Result<Vec<_>>>()?;
    let (part1, part2) = pixel_terms(tape, fused, &src, &masks)?;
    let pixel = tape.add(part1, part2)?;
    let texture = texture_term(tape, fused, &src)?;
    let weighted = tape.scale(texture, cfg.gamma)?;
    let total = tape.add(pixel, weighted)?;
    Ok(LossVars { part1, part2, pixel, texture, total })
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        LossBreakdown {
            l_part1: v(self.part1),
            l_part2: v(self.part2),
            l_pixel: v(self.pixel),
            l_texture: v(self.texture),
            total: v(self.total),
        }
    }
}

fn fused_constant(tape: &mut Tape, f: &GrayImage) -> Result<Var> {
    Ok(tape.constant(Tensor::new(vec![1, 1, f.height(), f.width()], f.to_f64())?))
}

fn single_pair(f: &GrayImage, ir: &GrayImage, vi: &GrayImage) -> Result<ImagePair> {
    check_dims(f, ir)?;
    check_dims(f, vi)?;
    Ok(ImagePair { ir: ir.clone(), vi: vi.clone() })
}

pub fn texture_loss(f: &GrayImage, ir: &GrayImage, vi: &GrayImage) -> Result<f64> {
    let pair = single_pair(f, ir, vi)?;
    let mut tape = Tape::new();
    let fv = fused_constant(&mut tape, f)?;
    let t = texture_loss_on_tape(&mut tape, fv, &[pair])?;
    Ok(tape.value(t).item())
}

/// `(l_part1, l_part2, l_pixel)`.
pub fn segmented_pixel_loss(f: &GrayImage, ir: &GrayImage, vi: &GrayImage, masks: &PartitionMasks) -> Result<(f64, f64, f64)> {
    let pair = single_pair(f, ir, vi)?;
    if (masks.height, masks.width) != f.dims() {
        return Err(LossError::Dims((masks.height, masks.width), f.dims()));
    }
    let mut tape = Tape::new();
    let fv = fused_constant(&mut tape, f)?;
    let (p1, p2) = pixel_loss_on_tape(&mut tape, fv, &[pair], std::slice::from_ref(masks))?;
    let (a, b) = (tape.value(p1).item(), tape.value(p2).item());
    Ok((a, b, a + b))
}

pub fn total_loss(f: &GrayImage, ir: &GrayImage, vi: &GrayImage, cfg: &LossConfig) -> Result<LossBreakdown> {
    let pair = single_pair(f, ir, vi)?;
    let mut tape = Tape::new();
    let fv = fused_constant(&mut tape, f)?;
    let vars = total_loss_on_tape(&mut tape, fv, &[pair], cfg)?;
    Ok(vars.breakdown(&tape))
}
