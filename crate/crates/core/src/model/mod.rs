//! The fusion network: shallow extraction, patch embedding, attention-based
//! feature fusion, and reconstruction.
//!
//! All learnable tensors live in one [`ParamStore`]; the `layout` holds typed
//! handles into it. Forwards run on a [`Tape`] against a [`Bound`] view of the
//! store, so the same code serves training, inference, and gradient checks.

pub mod attention;
pub mod checkpoint;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::image::{GrayImage, ImageError, ImagePair};
use crate::tensor::{Bound, ParamStore, RunningStats, Tape, Tensor, TensorError, Var};

pub use attention::{
    aciim_forward, attention_block, diim_forward, vanilla_cross_attention, AttentionOutput, AttentionParams, Injection,
};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use layers::{BatchNorm, Conv, ConvBnAct, LayerNorm, Linear, Mlp, RefineBlock};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image {height}x{width} is not divisible by patch size {patch}; pad or crop the inputs to a multiple of {patch}")]
    Divisibility { height: usize, width: usize, patch: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which parts of the fusion stage are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    /// Discrepancy block removed; visible tokens seed the common-injection chain.
    NoDiim,
    /// Common-injection blocks removed; the fusion output is the discrepancy block's.
    NoAciim,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDiim => "no_diim",
            Variant::NoAciim => "no_aciim",
        }
    }

    fn has_diim(self) -> bool {
        self != Variant::NoDiim
    }

    fn has_aciim(self) -> bool {
        self != Variant::NoAciim
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Variant::Full),
            "no_diim" => Ok(Variant::NoDiim),
            "no_aciim" => Ok(Variant::NoAciim),
            other => Err(format!("unknown variant `{other}` (expected full, no_diim or no_aciim)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub shallow_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub fusion_blocks: usize,
    pub refine_blocks: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            shallow_channels: 16,
            patch_size: 4,
            embed_dim: 32,
            mlp_hidden: 64,
            fusion_blocks: 1,
            refine_blocks: 2,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("shallow_channels", self.shallow_channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("fusion_blocks", self.fusion_blocks),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        let p = self.patch_size;
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) || height < 3 || width < 3 {
            return Err(ModelError::Divisibility { height, width, patch: p });
        }
        Ok(())
    }
}

/// Patch tokens `[N, h*w, d]`; token `i` covers patch `(i / w, i % w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-modality front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branch {
    pub extract: ConvBnAct,
    pub embed: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionBlock {
    pub diim: Option<AttentionParams>,
    pub aciim_vi: Option<AttentionParams>,
    pub aciim_ir: Option<AttentionParams>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub ir: Branch,
    pub vi: Branch,
    pub blocks: Vec<FusionBlock>,
    pub up: Linear,
    pub refine: Vec<RefineBlock>,
    pub head: Conv,
    /// Every batch-norm layer, in slot order.
    pub batch_norms: Vec<BatchNorm>,
}

/// Recorded outputs of one fusion block.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    pub z1: Var,
    pub z2: Option<Var>,
    pub z3: Option<Var>,
    pub out: Var,
    pub diim: Option<AttentionOutput>,
    pub aciim: Vec<AttentionOutput>,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub ir_features: Var,
    pub vi_features: Var,
    pub ir_tokens: TokenGrid,
    pub vi_tokens: TokenGrid,
    pub fusion: Vec<FusionTrace>,
    pub fused_tokens: TokenGrid,
    /// `[N, 1, H, W]` in `[0, 1]`.
    pub fused: Var,
}

#[derive(Debug, Clone)]
pub struct AtfuseModel {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

impl AtfuseModel {
    /// Builds and initializes a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = config.shallow_channels;
        let (p, d) = (config.patch_size, config.embed_dim);
        let mut batch_norms = Vec::new();
        let branch = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, bns: &mut Vec<BatchNorm>| {
            let conv = Conv::register(store, &format!("{name}.conv"), 1, c, rng);
            let bn = BatchNorm::register(store, &format!("{name}.bn"), c, bns.len());
            bns.push(bn);
            let embed = Linear::register(store, &format!("{name}.embed"), c * p * p, d, rng);
            Branch { extract: ConvBnAct { conv, bn }, embed }
        };
        let ir = branch(&mut store, &mut rng, "ir", &mut batch_norms);
        let vi = branch(&mut store, &mut rng, "vi", &mut batch_norms);
        let h = config.mlp_hidden;
        let blocks = (0..config.fusion_blocks)
            .map(|b| {
                let mut attn = |name: &str, present: bool| {
                    present.then(|| AttentionParams::register(&mut store, &format!("fusion{b}.{name}"), d, h, &mut rng))
                };
                FusionBlock {
                    diim: attn("diim", config.variant.has_diim()),
                    aciim_vi: attn("aciim_vi", config.variant.has_aciim()),
                    aciim_ir: attn("aciim_ir", config.variant.has_aciim()),
                }
            })
            .collect();
        let up = Linear::register(&mut store, "up", d, c * p * p, &mut rng);
        let mut refine = Vec::new();
        for r in 0..config.refine_blocks {
            let conv1 = Conv::register(&mut store, &format!("refine{r}.conv1"), c, c, &mut rng);
            let bn = BatchNorm::register(&mut store, &format!("refine{r}.bn"), c, batch_norms.len());
            batch_norms.push(bn);
            let conv2 = Conv::register(&mut store, &format!("refine{r}.conv2"), c, c, &mut rng);
            refine.push(RefineBlock { conv1, bn, conv2 });
        }
        let head = Conv::register(&mut store, "head", c, 1, &mut rng);
        let layout = Layout { ir, vi, blocks, up, refine, head, batch_norms };
        Ok(Self { config, store, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn running_stats(&self) -> Vec<RunningStats> {
        self.layout.batch_norms.iter().map(|bn| bn.read_stats(&self.store)).collect()
    }

    pub fn set_running_stats(&mut self, stats: &[RunningStats]) -> Result<()> {
        for (bn, s) in self.layout.batch_norms.iter().zip(stats) {
            bn.write_stats(&mut self.store, s)?;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.store.bind(tape)
    }

    /// Full network on `[N, 1, H, W]` inputs. In train mode batch-norm
    /// layers use batch statistics and fold them into `stats`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        stats: &mut [RunningStats],
        ir: Var,
        vi: Var,
        train: bool,
    ) -> Result<ForwardPass> {
        let shape = tape.shape(ir).to_vec();
        if shape.len() != 4 || shape[1] != 1 || tape.shape(vi) != shape.as_slice() {
            return Err(TensorError::Shape { op: "forward", lhs: shape, rhs: tape.shape(vi).to_vec() }.into());
        }
        self.config.check_dims(shape[2], shape[3])?;
        let l = &self.layout;
        let p = self.config.patch_size;
        let ir_features = l.ir.extract.forward(tape, bound, stats, ir, train)?;
        let vi_features = l.vi.extract.forward(tape, bound, stats, vi, train)?;
        let ir_tokens = patch_embed(tape, bound, &l.ir.embed, ir_features, p)?;
        let vi_tokens = patch_embed(tape, bound, &l.vi.embed, vi_features, p)?;
        let (fused_tokens, fusion) = feature_fusion(tape, bound, &l.blocks, &ir_tokens, &vi_tokens)?;
        let fused = self.reconstruct(tape, bound, stats, &fused_tokens, train)?;
        Ok(ForwardPass { ir_features, vi_features, ir_tokens, vi_tokens, fusion, fused_tokens, fused })
    }

    /// Upsampling back to `[N, C, H, W]`, residual refinement, and the
    /// sigmoid output head.
    pub fn reconstruct(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        stats: &mut [RunningStats],
        grid: &TokenGrid,
        train: bool,
    ) -> Result<Var> {
        let l = &self.layout;
        let mut x = patch_unembed(tape, bound, &l.up, grid, self.config.patch_size, self.config.shallow_channels)?;
        for block in &l.refine {
            x = block.forward(tape, bound, stats, x, train)?;
        }
        let y = l.head.forward(tape, bound, x)?;
        Ok(tape.sigmoid(y)?)
    }

    /// Eval-mode fusion of one registered pair.
    pub fn fuse_images(&self, pair: &ImagePair) -> Result<GrayImage> {
        let (h, w) = pair.dims();
        self.config.check_dims(h, w)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut stats = self.running_stats();
        let ir = tape.constant(Tensor::new(vec![1, 1, h, w], pair.ir.to_f64())?);
        let vi = tape.constant(Tensor::new(vec![1, 1, h, w], pair.vi.to_f64())?);
        let pass = self.forward(&mut tape, &bound, &mut stats, ir, vi, false)?;
        Ok(GrayImage::from_f64_clamped(h, w, tape.data(pass.fused))?)
    }
}

/// Splits `[N, C, H, W]` features into non-overlapping `p x p` patches,
/// flattened in `(c, py, px)` order, and projects each to `d`.
pub fn patch_embed(tape: &mut Tape, bound: &Bound, embed: &Linear, features: Var, p: usize) -> Result<TokenGrid> {
    let shape = tape.shape(features).to_vec();
    let (n, c, hh, ww) = match shape.as_slice() {
        [n, c, h, w] => (*n, *c, *h, *w),
        _ => return Err(TensorError::Invalid { op: "patch_embed", msg: format!("expected [N, C, H, W], got {shape:?}") }.into()),
    };
    if hh % p != 0 || ww % p != 0 {
        return Err(ModelError::Divisibility { height: hh, width: ww, patch: p });
    }
    let (h, w) = (hh / p, ww / p);
    let index = patch_index(n, c, h, w, p);
    let patches = tape.gather(features, vec![n * h * w, c * p * p], index)?;
    let tokens = embed.forward(tape, bound, patches)?;
    let tokens = tape.reshape(tokens, vec![n, h * w, embed.output])?;
    Ok(TokenGrid { tokens, h, w })
}

/// Source offset in `[N, C, H, W]` for each `(token, c, py, px)` slot.
fn patch_index(n: usize, c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (hh, ww) = (h * p, w * p);
    let mut index = Vec::with_capacity(n * c * hh * ww);
    for b in 0..n {
        for ty in 0..h {
            for tx in 0..w {
                for ch in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            index.push(((b * c + ch) * hh + ty * p + py) * ww + tx * p + px);
                        }
                    }
                }
            }
        }
    }
    index
}

/// Inverse of [`patch_embed`]'s rearrangement: projects tokens to `C*p*p`
/// and scatters them back to `[N, C, H, W]`.
pub fn patch_unembed(tape: &mut Tape, bound: &Bound, up: &Linear, grid: &TokenGrid, p: usize, channels: usize) -> Result<Var> {
    let n = tape.shape(grid.tokens)[0];
    if up.output != channels * p * p {
        return Err(TensorError::Shape { op: "patch_unembed", lhs: vec![up.input, up.output], rhs: vec![channels, p, p] }.into());
    }
    let patches = up.forward(tape, bound, grid.tokens)?;
    let forward = patch_index(n, channels, grid.h, grid.w, p);
    let mut inverse = vec![0; forward.len()];
    for (slot, &src) in forward.iter().enumerate() {
        inverse[src] = slot;
    }
    Ok(tape.gather(patches, vec![n, channels, grid.h * p, grid.w * p], inverse)?)
}

/// Runs the fusion blocks. Each block computes
/// `Z1 = DIIM(q = running, kv = ir)`, `Z2 = ACIIM(vi -> Z1)`,
/// `Z3 = ACIIM(ir -> Z2)` and outputs `Z3 + Z1`. The running tokens start as
/// the visible tokens.
pub fn feature_fusion(
    tape: &mut Tape,
    bound: &Bound,
    blocks: &[FusionBlock],
    ir: &TokenGrid,
    vi: &TokenGrid,
) -> Result<(TokenGrid, Vec<FusionTrace>)> {
    if (ir.h, ir.w) != (vi.h, vi.w) {
        return Err(TensorError::Shape { op: "feature_fusion", lhs: vec![ir.h, ir.w], rhs: vec![vi.h, vi.w] }.into());
    }
    let mut running = vi.tokens;
    let mut traces = Vec::with_capacity(blocks.len());
    for block in blocks {
        let trace = fusion_block(tape, bound, block, running, ir.tokens, vi.tokens)?;
        running = trace.out;
        traces.push(trace);
    }
    Ok((TokenGrid { tokens: running, h: ir.h, w: ir.w }, traces))
}

fn fusion_block(tape: &mut Tape, bound: &Bound, block: &FusionBlock, running: Var, ir: Var, vi: Var) -> Result<FusionTrace> {
    let diim = match &block.diim {
        Some(p) => Some(diim_forward(tape, bound, p, running, ir)?),
        None => None,
    };
    let z1 = diim.map_or(running, |o| o.out);
    let (Some(pv), Some(pi)) = (&block.aciim_vi, &block.aciim_ir) else {
        return Ok(FusionTrace { z1, z2: None, z3: None, out: z1, diim, aciim: Vec::new() });
    };
    let a2 = aciim_forward(tape, bound, pv, vi, z1)?;
    let a3 = aciim_forward(tape, bound, pi, ir, a2.out)?;
    let out = tape.add(a3.out, z1)?;
    Ok(FusionTrace { z1, z2: Some(a2.out), z3: Some(a3.out), out, diim, aciim: vec![a2, a3] })
}

#[cfg(test)]
mod tests;
