//! Ready-made gradient-check suites over small random instances.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_function, FdInput, FdOptions, GradCheckReport};
use crate::filters::SOBEL_Y;
use crate::image::{GrayImage, ImagePair};
use crate::loss::{partition_masks, pixel_loss_on_tape, texture_loss_on_tape, total_loss_on_tape, LossConfig};
use crate::model::{aciim_forward, diim_forward, feature_fusion, AtfuseModel, AttentionParams, ModelConfig, TokenGrid};
use crate::tensor::{Bound, ParamStore, Result, RunningStats, Tape, Tensor, Var, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scope {
    #[default]
    All,
    Ops,
    Blocks,
    Losses,
    Model,
}

impl Scope {
    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::All => "all",
            Scope::Ops => "ops",
            Scope::Blocks => "blocks",
            Scope::Losses => "losses",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Scope::All),
            "ops" => Ok(Scope::Ops),
            "blocks" => Ok(Scope::Blocks),
            "losses" => Ok(Scope::Losses),
            "model" => Ok(Scope::Model),
            other => Err(format!("unknown scope `{other}` (expected all, ops, blocks, losses or model)")),
        }
    }
}

const SIDE: usize = 8;
const DIM: usize = 8;
const TOKENS: usize = 4;

/// Network small enough to check exhaustively: 8x8 images, `p = 4`,
/// so four tokens of width 8.
pub fn check_config() -> ModelConfig {
    ModelConfig {
        shallow_channels: 2,
        patch_size: 4,
        embed_dim: DIM,
        mlp_hidden: DIM,
        fusion_blocks: 1,
        refine_blocks: 1,
        seed: 3,
        ..Default::default()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("finite")
}

fn random_image(rng: &mut ChaCha8Rng) -> GrayImage {
    let px = (0..SIDE * SIDE).map(|_| rng.random_range(0.05..0.95f32)).collect();
    GrayImage::new(SIDE, SIDE, px).expect("in range")
}

/// Weighted sum with fixed, distinct weights so every output element
/// contributes its own upstream gradient.
fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let n = tape.value(y).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let wv = tape.constant(Tensor::new(tape.shape(y).to_vec(), w)?);
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

/// Store tensors as inputs, grouped as `prefix/name`. Non-trainable buffers
/// and names rejected by `keep` become constants.
fn store_inputs(store: &ParamStore, prefix: &str, keep: impl Fn(&str) -> bool) -> Vec<FdInput> {
    store
        .iter()
        .map(|(id, p)| {
            let t = store.tensor(id);
            if p.trainable && keep(&p.name) {
                FdInput::var(format!("{prefix}/{}", p.name), t)
            } else {
                FdInput::constant(t)
            }
        })
        .collect()
}

fn named(group: &str, t: Tensor) -> FdInput {
    FdInput::var(group, t)
}

struct Suite {
    opts: FdOptions,
    report: GradCheckReport,
}

impl Suite {
    fn run(&mut self, inputs: Vec<FdInput>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<()> {
        let r = check_function(&inputs, f, self.opts)?;
        self.report.extend(r);
        Ok(())
    }
}

fn ops(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut r = |shape: &[usize]| random(rng, shape, -1.0, 1.0);
    s.run(vec![named("ops/matmul.a", r(&[3, 4])), named("ops/matmul.b", r(&[4, 2]))], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        t.sum(c)
    })?;
    s.run(vec![named("ops/batch_matmul.a", r(&[2, 3, 4])), named("ops/batch_matmul.b", r(&[2, 3, 4]))], |t, v| {
        let bt = t.transpose(v[1])?;
        let c = t.batch_matmul(v[0], bt)?;
        probe(t, c)
    })?;
    s.run(vec![named("ops/softmax", r(&[3, 5]))], |t, v| {
        let y = t.softmax_rows(v[0])?;
        probe(t, y)
    })?;
    s.run(
        vec![named("ops/conv.x", r(&[1, 4, 4])), named("ops/conv.weight", r(&[2, 1, 3, 3])), named("ops/conv.bias", r(&[2]))],
        |t, v| {
            let y = t.conv2d_3x3(v[0], v[1], v[2])?;
            probe(t, y)
        },
    )?;
    s.run(
        vec![
            named("ops/layer_norm.x", r(&[2, 8])),
            named("ops/layer_norm.gain", r(&[8])),
            named("ops/layer_norm.shift", r(&[8])),
        ],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
            probe(t, y)
        },
    )?;
    for train in [true, false] {
        let tag = if train { "train" } else { "eval" };
        s.run(
            vec![
                named(&format!("ops/batch_norm_{tag}.x"), r(&[2, 3, 4, 4])),
                named(&format!("ops/batch_norm_{tag}.gain"), r(&[3])),
                named(&format!("ops/batch_norm_{tag}.shift"), r(&[3])),
            ],
            move |t, v| {
                let mut stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
                let y = t.batch_norm_2d(v[0], v[1], v[2], &mut stats, train)?;
                probe(t, y)
            },
        )?;
    }
    let wide = random(rng, &[12], -4.0, 4.0);
    s.run(vec![named("ops/activations", wide)], |t, v| {
        let a = t.hardswish(v[0])?;
        let b = t.sigmoid(v[0])?;
        let c = t.gelu(v[0])?;
        let ab = t.add(a, b)?;
        let y = t.add(ab, c)?;
        probe(t, y)
    })?;
    let mut r = |shape: &[usize]| random(rng, shape, -1.0, 1.0);
    s.run(vec![named("ops/elementwise.a", r(&[3, 4])), named("ops/elementwise.b", r(&[3, 4]))], |t, v| {
        let m = t.max_elementwise(v[0], v[1])?;
        let mean = t.mean(m)?;
        let d = t.sub(v[0], v[1])?;
        let p = t.mul(d, v[1])?;
        let l1 = t.abs_sum(p)?;
        let q = t.scale(l1, 0.3)?;
        t.add(mean, q)
    })?;
    s.run(vec![named("ops/indexing.x", r(&[3, 4])), named("ops/indexing.bias", r(&[4]))], |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        let y = t.reshape(y, vec![2, 6])?;
        let y = t.gather(y, vec![5], vec![11, 0, 3, 3, 7])?;
        probe(t, y)
    })?;
    s.run(vec![named("ops/sobel", r(&[2, 5, 4]))], |t, v| {
        let y = t.filter3x3_reflect(v[0], SOBEL_Y)?;
        probe(t, y)
    })
}

fn blocks(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let model = AtfuseModel::new(check_config()).expect("valid config");
    let store = model.store();
    let n = store.len();
    let layout = model.layout().clone();

    // shallow extraction: conv -> BN (batch statistics) -> HardSwish
    let mut inputs = store_inputs(store, "shallow_extract", |name| name.starts_with("ir."));
    inputs.push(named("shallow_extract/input", random(rng, &[2, 1, SIDE, SIDE], 0.0, 1.0)));
    let branch = layout.ir;
    s.run(inputs, |t, v| {
        let bound = Bound::from_vars(v[..n].to_vec());
        let mut stats = model.running_stats();
        let f = branch.extract.forward(t, &bound, &mut stats, v[n], true)?;
        probe(t, f)
    })?;

    let mut attn_store = ParamStore::new();
    let attn = AttentionParams::register(&mut attn_store, "attn", DIM, 2 * DIM, rng);
    let m = attn_store.len();
    for (name, discrepancy) in [("diim", true), ("aciim", false)] {
        let mut inputs = store_inputs(&attn_store, name, |_| true);
        inputs.push(named(&format!("{name}/q_src"), random(rng, &[1, TOKENS, DIM], -1.0, 1.0)));
        inputs.push(named(&format!("{name}/kv_src"), random(rng, &[1, TOKENS, DIM], -1.0, 1.0)));
        s.run(inputs, |t, v| {
            let bound = Bound::from_vars(v[..m].to_vec());
            let out = if discrepancy {
                diim_forward(t, &bound, &attn, v[m], v[m + 1])?
            } else {
                aciim_forward(t, &bound, &attn, v[m + 1], v[m])?
            };
            probe(t, out.out)
        })?;
    }

    let mut inputs = store_inputs(store, "feature_fusion", |name| name.starts_with("fusion"));
    inputs.push(named("feature_fusion/ir_tokens", random(rng, &[1, TOKENS, DIM], -1.0, 1.0)));
    inputs.push(named("feature_fusion/vi_tokens", random(rng, &[1, TOKENS, DIM], -1.0, 1.0)));
    s.run(inputs, |t, v| {
        let bound = Bound::from_vars(v[..n].to_vec());
        let ir = TokenGrid { tokens: v[n], h: 2, w: 2 };
        let vi = TokenGrid { tokens: v[n + 1], h: 2, w: 2 };
        let (out, _) = feature_fusion(t, &bound, &layout.blocks, &ir, &vi).map_err(model_err)?;
        probe(t, out.tokens)
    })?;

    let mut inputs = store_inputs(store, "reconstruct", |name| {
        name.starts_with("up.") || name.starts_with("refine") || name.starts_with("head.")
    });
    inputs.push(named("reconstruct/tokens", random(rng, &[1, TOKENS, DIM], -1.0, 1.0)));
    s.run(inputs, |t, v| {
        let bound = Bound::from_vars(v[..n].to_vec());
        let mut stats = model.running_stats();
        let grid = TokenGrid { tokens: v[n], h: 2, w: 2 };
        let img = model.reconstruct(t, &bound, &mut stats, &grid, true).map_err(model_err)?;
        probe(t, img)
    })
}

fn model_err(e: crate::model::ModelError) -> crate::tensor::TensorError {
    match e {
        crate::model::ModelError::Tensor(t) => t,
        other => crate::tensor::TensorError::Invalid { op: "model", msg: other.to_string() },
    }
}

fn loss_err(e: crate::loss::LossError) -> crate::tensor::TensorError {
    match e {
        crate::loss::LossError::Tensor(t) => t,
        other => crate::tensor::TensorError::Invalid { op: "loss", msg: other.to_string() },
    }
}

fn losses(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let pair = ImagePair::new(random_image(rng), random_image(rng)).expect("same dims");
    let pairs = vec![pair];
    let fused = random(rng, &[1, 1, SIDE, SIDE], 0.05, 0.95);
    s.run(vec![named("losses/texture.i_f", fused.clone())], |t, v| texture_loss_on_tape(t, v[0], &pairs).map_err(loss_err))?;
    let masks = vec![partition_masks(&pairs[0].ir, &pairs[0].vi, 50.0).map_err(loss_err)?];
    s.run(vec![named("losses/pixel.i_f", fused.clone())], |t, v| {
        let (a, b) = pixel_loss_on_tape(t, v[0], &pairs, &masks).map_err(loss_err)?;
        t.add(a, b)
    })?;
    let cfg = LossConfig::default();
    s.run(vec![named("losses/total.i_f", fused)], |t, v| Ok(total_loss_on_tape(t, v[0], &pairs, &cfg).map_err(loss_err)?.total))
}

fn end_to_end(s: &mut Suite, rng: &mut ChaCha8Rng) -> Result<()> {
    let model = AtfuseModel::new(check_config()).expect("valid config");
    let n = model.store().len();
    let pairs = vec![ImagePair::new(random_image(rng), random_image(rng)).expect("same dims")];
    let to_tensor = |img: &GrayImage| Tensor::new(vec![1, 1, SIDE, SIDE], img.to_f64());
    let mut inputs = store_inputs(model.store(), "model", |_| true);
    inputs.push(FdInput::constant(to_tensor(&pairs[0].ir)?));
    inputs.push(FdInput::constant(to_tensor(&pairs[0].vi)?));
    let cfg = LossConfig::default();
    // O(h^2) truncation error of the whole pipeline is ~1e-3 relative at the
    // default step, so this check uses a ten times smaller one.
    let saved = s.opts;
    s.opts.step = saved.step / 10.0;
    let result = s.run(inputs, |t, v| {
        let bound = Bound::from_vars(v[..n].to_vec());
        let mut stats = model.running_stats();
        let pass = model.forward(t, &bound, &mut stats, v[n], v[n + 1], true).map_err(model_err)?;
        Ok(total_loss_on_tape(t, pass.fused, &pairs, &cfg).map_err(loss_err)?.total)
    });
    s.opts = saved;
    result
}

/// Runs the suites selected by `scope`; a group passes when its largest
/// relative error is below `tolerance`.
pub fn grad_check(scope: Scope, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(scope, FdOptions { tolerance, ..Default::default() })
}

/// [`grad_check`] with explicit finite-difference settings.
pub fn grad_check_with(scope: Scope, opts: FdOptions) -> Result<GradCheckReport> {
    let mut suite = Suite { opts, report: GradCheckReport::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    if scope.includes(Scope::Ops) {
        ops(&mut suite, &mut rng)?;
    }
    if scope.includes(Scope::Blocks) {
        blocks(&mut suite, &mut rng)?;
    }
    if scope.includes(Scope::Losses) {
        losses(&mut suite, &mut rng)?;
    }
    if scope.includes(Scope::Model) {
        end_to_end(&mut suite, &mut rng)?;
    }
    Ok(suite.report)
}
