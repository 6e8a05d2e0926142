//! Discrepancy vs. common-information injection on random tokens.
//!
//! Shows that the attention rows are distributions, that the discrepancy
//! branch differs from plain cross-attention, and that a fusion block's
//! output is `Z3 + Z1`.

use atfuse::model::{
    aciim_forward, diim_forward, feature_fusion, vanilla_cross_attention, AtfuseModel, AttentionParams, ModelConfig, TokenGrid,
};
use atfuse::tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tokens(rng: &mut ChaCha8Rng, s: usize, d: usize) -> Tensor {
    Tensor::new(vec![1, s, d], (0..s * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (s, d) = (6, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let block = AttentionParams::register(&mut store, "block", d, 2 * d, &mut rng);

    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let vi = tape.constant(tokens(&mut rng, s, d));
    let ir = tape.constant(tokens(&mut rng, s, d));

    let diim = diim_forward(&mut tape, &bound, &block, vi, ir)?;
    let plain = vanilla_cross_attention(&mut tape, &bound, &block, vi, ir)?;
    let rows: Vec<f64> = tape.data(diim.attention).chunks(s).map(|r| r.iter().sum()).collect();
    println!("attention row sums: {rows:.12?}");
    println!("|V - CM| mean: {:.4}", tape.data(diim.injected).iter().map(|v| v.abs()).sum::<f64>() / (s * d) as f64);
    println!("max |DIIM - cross-attention|: {:.4}", max_abs_diff(tape.data(diim.out), tape.data(plain.out)));

    let aciim = aciim_forward(&mut tape, &bound, &block, vi, diim.out)?;
    println!("ACIIM output norm: {:.4}", tape.data(aciim.out).iter().map(|v| v * v).sum::<f64>().sqrt());

    // a full fusion block, instrumented
    let model = AtfuseModel::new(ModelConfig { embed_dim: d, mlp_hidden: 2 * d, ..Default::default() })?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let ir = TokenGrid { tokens: tape.constant(tokens(&mut rng, 4, d)), h: 2, w: 2 };
    let vi = TokenGrid { tokens: tape.constant(tokens(&mut rng, 4, d)), h: 2, w: 2 };
    let (out, traces) = feature_fusion(&mut tape, &bound, &model.layout().blocks, &ir, &vi)?;
    let t = &traces[0];
    let sum: Vec<f64> = tape.data(t.z3.unwrap()).iter().zip(tape.data(t.z1)).map(|(a, b)| a + b).collect();
    println!("output == Z3 + Z1: {}", tape.data(out.tokens) == sum.as_slice());
    Ok(())
}
