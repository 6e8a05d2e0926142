//! Single-head cross-attention blocks.
//!
//! Both blocks compute `CM = softmax(Q K^T / sqrt(d)) V` with `Q` projected
//! from the query source and `K`, `V` from the key/value source. They differ
//! in what is injected back into the query tokens:
//!
//! * discrepancy (DIIM): `F_add = W_O(V - CM) + q_src`
//! * common (ACIIM):     `F_add = W_O(CM) + q_src`
//!
//! followed by `out = MLP(LN(F_add)) + F_add`.

use rand_chacha::ChaCha8Rng;

use super::layers::{LayerNorm, Linear, Mlp};
use crate::tensor::{Bound, ParamStore, Result, Tape, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm: LayerNorm,
    pub mlp: Mlp,
    pub dim: usize,
}

impl AttentionParams {
    pub fn register(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::register(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::register(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::register(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::register(store, &format!("{name}.o"), dim, dim, rng),
            norm: LayerNorm::register(store, &format!("{name}.ln"), dim),
            mlp: Mlp::register(store, &format!("{name}.mlp"), dim, hidden, rng),
            dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    Discrepancy,
    Common,
}

/// Intermediate values of one attention block, all `[N, s, *]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Row-stochastic attention map `[N, s, s]`.
    pub attention: Var,
    pub values: Var,
    /// `CM`.
    pub common: Var,
    /// `W_O(V - CM)` or `W_O(CM)`.
    pub injected: Var,
    pub f_add: Var,
    pub out: Var,
}

fn check_tokens(tape: &Tape, q_src: Var, kv_src: Var, dim: usize) -> Result<()> {
    let (qs, ks) = (tape.shape(q_src), tape.shape(kv_src));
    if qs.len() != 3 || qs != ks || qs[2] != dim {
        return Err(TensorError::Shape { op: "attention", lhs: qs.to_vec(), rhs: ks.to_vec() });
    }
    Ok(())
}

pub fn attention_block(
    tape: &mut Tape,
    bound: &Bound,
    p: &AttentionParams,
    q_src: Var,
    kv_src: Var,
    injection: Injection,
) -> Result<AttentionOutput> {
    check_tokens(tape, q_src, kv_src, p.dim)?;
    let q = p.q.forward(tape, bound, q_src)?;
    let k = p.k.forward(tape, bound, kv_src)?;
    let values = p.v.forward(tape, bound, kv_src)?;
    let kt = tape.transpose(k)?;
    let scores = tape.batch_matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (p.dim as f64).sqrt())?;
    let attention = tape.softmax_rows(scores)?;
    let common = tape.batch_matmul(attention, values)?;
    let pre = match injection {
        Injection::Discrepancy => tape.sub(values, common)?,
        Injection::Common => common,
    };
    let injected = p.o.forward(tape, bound, pre)?;
    let f_add = tape.add(injected, q_src)?;
    let normed = p.norm.forward(tape, bound, f_add)?;
    let mlp = p.mlp.forward(tape, bound, normed)?;
    let out = tape.add(mlp, f_add)?;
    Ok(AttentionOutput { attention, values, common, injected, f_add, out })
}

/// Discrepancy injection: queries from `q_src`, keys and values from `kv_src`.
pub fn diim_forward(tape: &mut Tape, bound: &Bound, p: &AttentionParams, q_src: Var, kv_src: Var) -> Result<AttentionOutput> {
    attention_block(tape, bound, p, q_src, kv_src, Injection::Discrepancy)
}

/// Common-information injection of `kv_src` into the running tokens `q_src`.
pub fn aciim_forward(tape: &mut Tape, bound: &Bound, p: &AttentionParams, kv_src: Var, q_src: Var) -> Result<AttentionOutput> {
    attention_block(tape, bound, p, q_src, kv_src, Injection::Common)
}

/// Plain cross-attention with the same parameters and roles as
/// [`diim_forward`], injecting `CM` instead of `V - CM`.
pub fn vanilla_cross_attention(
    tape: &mut Tape,
    bound: &Bound,
    p: &AttentionParams,
    q_src: Var,
    kv_src: Var,
) -> Result<AttentionOutput> {
    attention_block(tape, bound, p, q_src, kv_src, Injection::Common)
}
