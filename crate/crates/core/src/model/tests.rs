use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::image::GrayImage;

fn small() -> ModelConfig {
    ModelConfig { shallow_channels: 4, patch_size: 2, embed_dim: 8, mlp_hidden: 16, ..Default::default() }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_image(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..h * w).map(|_| rng.random_range(0.0..1.0f32)).collect();
    GrayImage::new(h, w, px).unwrap()
}

fn random_pair(h: usize, w: usize, seed: u64) -> ImagePair {
    ImagePair::new(random_image(h, w, seed), random_image(h, w, seed + 1)).unwrap()
}

fn attention_store(d: usize, seed: u64) -> (ParamStore, AttentionParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = AttentionParams::register(&mut store, "attn", d, 2 * d, &mut rng);
    (store, p)
}

fn zero_all(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).data.len();
        store.set_from_f64(id, &vec![0.0; n]).unwrap();
    }
}

#[test]
fn shallow_extract_shape_and_zero_weights() {
    let mut model = AtfuseModel::new(ModelConfig::default()).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut stats = model.running_stats();
    let x = tape.constant(random(&[1, 1, 32, 32], 1));
    let f = model.layout().ir.extract.forward(&mut tape, &bound, &mut stats, x, true).unwrap();
    assert_eq!(tape.shape(f), &[1, 16, 32, 32]);

    let ex = model.layout().vi.extract;
    for id in [ex.conv.weight, ex.conv.bias, ex.bn.shift] {
        let n = model.store().get(id).data.len();
        model.store_mut().set_from_f64(id, &vec![0.0; n]).unwrap();
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let x = tape.constant(random(&[2, 1, 8, 8], 2));
    for train in [true, false] {
        let f = ex.forward(&mut tape, &bound, &mut stats, x, train).unwrap();
        assert!(tape.data(f).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn patch_embed_shapes_and_identity_roundtrip() {
    let model = AtfuseModel::new(ModelConfig::default()).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let f = tape.constant(random(&[1, 16, 32, 32], 3));
    let grid = patch_embed(&mut tape, &bound, &model.layout().ir.embed, f, 4).unwrap();
    assert_eq!((grid.h, grid.w, grid.len()), (8, 8, 64));
    assert_eq!(tape.shape(grid.tokens), &[1, 64, 32]);

    // p = 1 with identity projections: tokens are the per-pixel features.
    let c = 3;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let embed = Linear::register(&mut store, "e", c, c, &mut rng);
    let up = Linear::register(&mut store, "u", c, c, &mut rng);
    let eye: Vec<f64> = (0..c * c).map(|i| if i % (c + 1) == 0 { 1.0 } else { 0.0 }).collect();
    store.set_from_f64(embed.weight, &eye).unwrap();
    store.set_from_f64(up.weight, &eye).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let x = random(&[2, c, 3, 4], 4);
    let xv = tape.constant(x.clone());
    let grid = patch_embed(&mut tape, &bound, &embed, xv, 1).unwrap();
    let tokens = tape.data(grid.tokens);
    for n in 0..2 {
        for y in 0..3 {
            for xx in 0..4 {
                for ch in 0..c {
                    let t = tokens[(n * 12 + y * 4 + xx) * c + ch];
                    assert_eq!(t, x.data()[((n * c + ch) * 3 + y) * 4 + xx]);
                }
            }
        }
    }
    let back = patch_unembed(&mut tape, &bound, &up, &grid, 1, c).unwrap();
    assert_eq!(tape.data(back), x.data());
}

#[test]
fn unembed_inverts_embed_for_larger_patches() {
    let (c, p) = (2, 2);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let k = c * p * p;
    let embed = Linear::register(&mut store, "e", k, k, &mut rng);
    let up = Linear::register(&mut store, "u", k, k, &mut rng);
    let eye: Vec<f64> = (0..k * k).map(|i| if i % (k + 1) == 0 { 1.0 } else { 0.0 }).collect();
    store.set_from_f64(embed.weight, &eye).unwrap();
    store.set_from_f64(up.weight, &eye).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let x = random(&[1, c, 4, 6], 5);
    let xv = tape.constant(x.clone());
    let grid = patch_embed(&mut tape, &bound, &embed, xv, p).unwrap();
    let back = patch_unembed(&mut tape, &bound, &up, &grid, p, c).unwrap();
    assert_eq!(tape.data(back), x.data());
}

#[test]
fn patch_embed_rejects_indivisible() {
    let model = AtfuseModel::new(ModelConfig::default()).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let f = tape.constant(random(&[1, 16, 10, 12], 6));
    let err = patch_embed(&mut tape, &bound, &model.layout().ir.embed, f, 4).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("10x12") && msg.contains('4'), "{msg}");
}

#[test]
fn single_token_discrepancy_vanishes() {
    let (store, p) = attention_store(8, 7);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let q = tape.constant(random(&[1, 1, 8], 8));
    let kv = tape.constant(random(&[1, 1, 8], 9));
    let out = diim_forward(&mut tape, &bound, &p, q, kv).unwrap();
    assert_eq!(tape.data(out.attention), &[1.0]);
    assert_eq!(tape.data(out.common), tape.data(out.values));
    // zero W_O bias: injected term is exactly zero and F_add is the query
    assert!(tape.data(out.injected).iter().all(|&v| v == 0.0));
    assert_eq!(tape.data(out.f_add), tape.data(q));
}

#[test]
fn zero_everything_gives_zero() {
    let (mut store, p) = attention_store(8, 10);
    zero_all(&mut store);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let z = tape.constant(Tensor::zeros(vec![1, 4, 8]));
    for out in [diim_forward(&mut tape, &bound, &p, z, z).unwrap(), aciim_forward(&mut tape, &bound, &p, z, z).unwrap()] {
        assert!(tape.data(out.out).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn diim_differs_from_vanilla_attention() {
    let (store, p) = attention_store(8, 11);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let q = tape.constant(random(&[1, 4, 8], 12));
    let kv = tape.constant(random(&[1, 4, 8], 13));
    let d = diim_forward(&mut tape, &bound, &p, q, kv).unwrap();
    let v = vanilla_cross_attention(&mut tape, &bound, &p, q, kv).unwrap();
    let diff = tape.data(d.out).iter().zip(tape.data(v.out)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-3, "max diff {diff}");
    for row in tape.data(d.attention).chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn aciim_single_token_and_zero_kv() {
    let d = 8;
    let (mut store, p) = attention_store(d, 14);
    let eye: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
    store.set_from_f64(p.o.weight, &eye).unwrap();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let q = tape.constant(random(&[1, 1, d], 15));
    let kv = tape.constant(random(&[1, 1, d], 16));
    let out = aciim_forward(&mut tape, &bound, &p, kv, q).unwrap();
    let expect: Vec<f64> = tape.data(out.values).iter().zip(tape.data(q)).map(|(a, b)| a + b).collect();
    assert_eq!(tape.data(out.f_add), expect.as_slice());

    let (mut store, p) = attention_store(d, 17);
    for id in [p.k.weight, p.k.bias, p.v.weight, p.v.bias] {
        let n = store.get(id).data.len();
        store.set_from_f64(id, &vec![0.0; n]).unwrap();
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let q = tape.constant(random(&[1, 4, d], 18));
    let kv = tape.constant(random(&[1, 4, d], 19));
    let out = aciim_forward(&mut tape, &bound, &p, kv, q).unwrap();
    assert_eq!(tape.data(out.f_add), tape.data(q));
}

#[test]
fn attention_rejects_mismatched_tokens() {
    let (store, p) = attention_store(8, 20);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let q = tape.constant(random(&[1, 4, 8], 21));
    let kv = tape.constant(random(&[1, 3, 8], 22));
    assert!(diim_forward(&mut tape, &bound, &p, q, kv).is_err());
}

#[test]
fn attention_is_permutation_equivariant() {
    let (store, p) = attention_store(8, 23);
    let perm = [2usize, 0, 3, 1];
    let q = random(&[1, 4, 8], 24);
    let kv = random(&[1, 4, 8], 25);
    let permute = |t: &Tensor| {
        let mut out = Vec::new();
        for &i in &perm {
            out.extend_from_slice(&t.data()[i * 8..(i + 1) * 8]);
        }
        Tensor::new(vec![1, 4, 8], out).unwrap()
    };
    for injection in [Injection::Discrepancy, Injection::Common] {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (qa, ka) = (tape.constant(q.clone()), tape.constant(kv.clone()));
        let (qb, kb) = (tape.constant(permute(&q)), tape.constant(permute(&kv)));
        let a = attention_block(&mut tape, &bound, &p, qa, ka, injection).unwrap();
        let b = attention_block(&mut tape, &bound, &p, qb, kb, injection).unwrap();
        let (a, b) = (tape.data(a.out), tape.data(b.out));
        for (j, &i) in perm.iter().enumerate() {
            for k in 0..8 {
                assert!((a[i * 8 + k] - b[j * 8 + k]).abs() < 1e-5);
            }
        }
    }
}

fn run_fusion(model: &AtfuseModel, seed: u64) -> (Tape, Vec<FusionTrace>, Var) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let d = model.config().embed_dim;
    let ir = TokenGrid { tokens: tape.constant(random(&[1, 4, d], seed)), h: 2, w: 2 };
    let vi = TokenGrid { tokens: tape.constant(random(&[1, 4, d], seed + 1)), h: 2, w: 2 };
    let (out, traces) = feature_fusion(&mut tape, &bound, &model.layout().blocks, &ir, &vi).unwrap();
    (tape, traces, out.tokens)
}

#[test]
fn fusion_output_is_z3_plus_z1() {
    let model = AtfuseModel::new(small()).unwrap();
    let (tape, traces, out) = run_fusion(&model, 30);
    let t = &traces[0];
    let sum: Vec<f64> = tape.data(t.z3.unwrap()).iter().zip(tape.data(t.z1)).map(|(a, b)| a + b).collect();
    assert_eq!(tape.data(out), sum.as_slice());
}

#[test]
fn zero_parameters_fuse_to_zero() {
    let mut model = AtfuseModel::new(small()).unwrap();
    zero_all(model.store_mut());
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let z = tape.constant(Tensor::zeros(vec![1, 4, 8]));
    let grid = TokenGrid { tokens: z, h: 2, w: 2 };
    let (out, _) = feature_fusion(&mut tape, &bound, &model.layout().blocks, &grid, &grid).unwrap();
    assert!(tape.data(out.tokens).iter().all(|&v| v == 0.0));
}

#[test]
fn variants_change_structure_and_output() {
    let full = AtfuseModel::new(small()).unwrap();
    let no_diim = AtfuseModel::new(ModelConfig { variant: Variant::NoDiim, ..small() }).unwrap();
    let no_aciim = AtfuseModel::new(ModelConfig { variant: Variant::NoAciim, ..small() }).unwrap();
    assert!(no_diim.store().iter().all(|(_, p)| !p.name.contains(".diim.")));
    assert!(no_aciim.store().iter().all(|(_, p)| !p.name.contains(".aciim")));
    assert!(no_diim.parameter_count() < full.parameter_count());

    let (_, traces, _) = run_fusion(&no_aciim, 31);
    assert_eq!(traces[0].out, traces[0].z1);
    let pair = random_pair(8, 8, 32);
    let a = full.fuse_images(&pair).unwrap();
    let b = no_diim.fuse_images(&pair).unwrap();
    assert_ne!(a, b);
}

#[test]
fn multi_block_chains_outputs() {
    let model = AtfuseModel::new(ModelConfig { fusion_blocks: 3, ..small() }).unwrap();
    let (tape, traces, out) = run_fusion(&model, 33);
    assert_eq!(traces.len(), 3);
    assert_eq!(out, traces[2].out);
    // later blocks query the previous output
    let d = traces[1].diim.unwrap();
    let expect: Vec<f64> = tape.data(d.injected).iter().zip(tape.data(traces[0].out)).map(|(a, b)| a + b).collect();
    assert_eq!(tape.data(d.f_add), expect.as_slice());
}

#[test]
fn reconstruct_dims_and_zero_head() {
    let mut model = AtfuseModel::new(small()).unwrap();
    let head = model.layout().head;
    for id in [head.weight, head.bias] {
        let n = model.store().get(id).data.len();
        model.store_mut().set_from_f64(id, &vec![0.0; n]).unwrap();
    }
    let out = model.fuse_images(&random_pair(8, 12, 34)).unwrap();
    assert_eq!(out.dims(), (8, 12));
    assert!(out.pixels().iter().all(|&v| v == 0.5));
}

#[test]
fn fuse_images_contract() {
    let model = AtfuseModel::new(ModelConfig::default()).unwrap();
    let pair = random_pair(32, 32, 35);
    let a = model.fuse_images(&pair).unwrap();
    assert_eq!(a.dims(), (32, 32));
    assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    let b = model.fuse_images(&pair).unwrap();
    assert_eq!(a, b);

    let err = model.fuse_images(&random_pair(30, 32, 36)).unwrap_err();
    assert!(err.to_string().contains("pad or crop"), "{err}");
}

#[test]
fn parameter_count_depends_only_on_config() {
    let a = AtfuseModel::new(ModelConfig { seed: 1, ..Default::default() }).unwrap();
    let b = AtfuseModel::new(ModelConfig { seed: 2, ..Default::default() }).unwrap();
    assert_eq!(a.parameter_count(), b.parameter_count());
    assert_ne!(a.store().checksum(), b.store().checksum());
    let c = AtfuseModel::new(ModelConfig { seed: 1, ..Default::default() }).unwrap();
    assert_eq!(a.store().checksum(), c.store().checksum());
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let model = AtfuseModel::new(ModelConfig { seed: 9, variant: Variant::NoDiim, ..small() }).unwrap();
    let bytes = write_checkpoint(&model);
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.store().checksum(), model.store().checksum());
    assert_eq!(write_checkpoint(&back), bytes);
}

#[test]
fn checkpoint_errors() {
    let model = AtfuseModel::new(small()).unwrap();
    let mut bytes = write_checkpoint(&model);
    assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated { .. })));
    bytes[0] = b'X';
    let err = read_checkpoint(&bytes).unwrap_err();
    assert_eq!(err.to_string(), "bad checkpoint magic");

    // a d=8 checkpoint relabelled as d=16
    let bytes = write_checkpoint(&model);
    let text = model.config().to_text();
    let patched = text.replace("model.embed_dim = 8", "model.embed_dim = 16");
    let mut forged = b"ATFUSE1".to_vec();
    forged.extend_from_slice(&(patched.len() as u32).to_le_bytes());
    forged.extend_from_slice(patched.as_bytes());
    forged.extend_from_slice(&bytes[7 + 4 + text.len()..]);
    assert!(matches!(read_checkpoint(&forged), Err(CheckpointError::Shape { .. })));
}
