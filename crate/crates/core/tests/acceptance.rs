//! Acceptance criteria, one line per criterion. Runs as a plain binary so the
//! verdicts always reach stdout; exits non-zero if any criterion fails.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use atfuse::cli::{ablation_grid, cmd_ablate, Study, ABLATION_HEADER};
use atfuse::config::RunConfig;
use atfuse::gradcheck::{grad_check, GroupStatus, Scope};
use atfuse::image::{synthetic_corpus, write_corpus, GrayImage};
use atfuse::loss::{partition_masks, segmented_pixel_loss};
use atfuse::metrics::{avg_gradient, entropy, qabf, spatial_frequency, std_dev};
use atfuse::model::{
    diim_forward, feature_fusion, load_checkpoint, read_checkpoint, save_checkpoint, vanilla_cross_attention, write_checkpoint,
    AtfuseModel, AttentionParams, ModelConfig, TokenGrid, Variant,
};
use atfuse::tensor::{ParamStore, Tape, Tensor};
use atfuse::train::{lr_at_epoch, train, TrainConfig};
use common::random_image;
use common::scenarios::{overfit_config, overfit_four, salience};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Verdict);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let report = grad_check(Scope::All, 1e-4).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let failed: Vec<&str> = report.groups.iter().filter(|g| g.status == GroupStatus::Fail).map(|g| g.name.as_str()).collect();
    ensure(failed.is_empty(), || format!("failed groups: {failed:?}"))?;
    for prefix in ["ops/", "shallow_extract/", "diim/", "aciim/", "feature_fusion/", "reconstruct/", "losses/total", "model/"] {
        let passed = report.groups.iter().any(|g| g.name.starts_with(prefix) && g.status == GroupStatus::Pass);
        ensure(passed, || format!("no passing group under {prefix}"))?;
    }
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    let worst = report.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    let skipped = report.groups.iter().filter(|g| g.status == GroupStatus::SkippedKink).count();
    Ok(format!("{} groups, worst rel err {worst:.2e}, {skipped} kink-only, {:.1}s", report.groups.len(), elapsed.as_secs_f64()))
}

fn attention_params(d: usize, seed: u64) -> (ParamStore, AttentionParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = AttentionParams::register(&mut store, "diim", d, 2 * d, &mut rng);
    (store, p)
}

fn diim_invariants() -> Verdict {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_row = 0.0f64;
    let mut min_diff = f64::INFINITY;
    for trial in 0..20 {
        let (store, p) = attention_params(d, trial);
        let s = 2 + trial as usize % 7;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.constant(random_tensor(&[2, s, d], &mut rng));
        let kv = tape.constant(random_tensor(&[2, s, d], &mut rng));
        let out = diim_forward(&mut tape, &bound, &p, q, kv).map_err(|e| e.to_string())?;
        for row in tape.data(out.attention).chunks(s) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let plain = vanilla_cross_attention(&mut tape, &bound, &p, q, kv).map_err(|e| e.to_string())?;
        let diff = tape.data(out.out).iter().zip(tape.data(plain.out)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        min_diff = min_diff.min(diff);
    }
    ensure(worst_row <= 1e-6, || format!("attention row sum off by {worst_row:e}"))?;
    ensure(min_diff > 1e-3, || format!("DIIM matched vanilla attention (max diff {min_diff:e})"))?;

    // one token attends only to itself, so V - CM vanishes
    for trial in 0..10 {
        let (store, p) = attention_params(d, 100 + trial);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let q = tape.constant(random_tensor(&[1, 1, d], &mut rng));
        let kv = tape.constant(random_tensor(&[1, 1, d], &mut rng));
        let out = diim_forward(&mut tape, &bound, &p, q, kv).map_err(|e| e.to_string())?;
        ensure(tape.data(out.values) == tape.data(out.common), || "single-token discrepancy is non-zero".into())?;
    }
    Ok(format!("max row-sum error {worst_row:.1e}, min DIIM/vanilla diff {min_diff:.3}"))
}

fn fusion_composition() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..100u64 {
        let blocks = 1 + i as usize % 3;
        let cfg = ModelConfig {
            shallow_channels: 4,
            patch_size: 2,
            embed_dim: 8,
            mlp_hidden: 16,
            fusion_blocks: blocks,
            seed: i,
            ..Default::default()
        };
        let model = AtfuseModel::new(cfg).unwrap();
        let (h, w) = (1 + i as usize % 3, 1 + (i as usize / 3) % 4);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let ir = TokenGrid { tokens: tape.constant(random_tensor(&[1, h * w, 8], &mut rng)), h, w };
        let vi = TokenGrid { tokens: tape.constant(random_tensor(&[1, h * w, 8], &mut rng)), h, w };
        let (_, traces) = feature_fusion(&mut tape, &bound, &model.layout().blocks, &ir, &vi).map_err(|e| e.to_string())?;
        for (b, t) in traces.iter().enumerate() {
            let (z1, z3) = (tape.data(t.z1), tape.data(t.z3.ok_or("missing Z3")?));
            let sum: Vec<u64> = z3.iter().zip(z1).map(|(a, b)| (a + b).to_bits()).collect();
            let out: Vec<u64> = tape.data(t.out).iter().map(|v| v.to_bits()).collect();
            ensure(sum == out, || format!("input {i}, block {b}: output != Z3 + Z1"))?;
            ensure(t.z2.is_some(), || "missing Z2".into())?;
        }
    }
    Ok("100 inputs, 1-3 blocks, bitwise equal".into())
}

fn loss_limits() -> Verdict {
    let mut worst = 0.0f64;
    for i in 0..50 {
        let (f, ir, vi) = (random_image(8, 8, 3 * i), random_image(8, 8, 3 * i + 1), random_image(8, 8, 3 * i + 2));
        let at = |alpha: f64| {
            let masks = partition_masks(&ir, &vi, alpha).unwrap();
            segmented_pixel_loss(&f, &ir, &vi, &masks).unwrap().2
        };
        let (max_c, avg_c) = (common::max_constraint(&f, &ir, &vi), common::average_constraint(&f, &ir, &vi));
        worst = worst.max((at(100.0) - max_c).abs()).max((at(0.0) - avg_c).abs());
    }
    ensure(worst <= 1e-9, || format!("limit mismatch {worst:e}"))?;

    for i in 0..20 {
        let (ir, vi) = (random_image(8, 8, 500 + i), random_image(8, 8, 600 + i));
        let mut prev: Option<Vec<bool>> = None;
        for a in (0..=100).step_by(10) {
            let alpha = a as f64;
            let m = partition_masks(&ir, &vi, alpha).unwrap();
            ensure(m.part1.iter().zip(&m.part2).all(|(p, q)| p != q), || format!("alpha {a}: masks overlap or leave gaps"))?;
            ensure(m.part1 == common::part1(&ir, &vi, alpha), || format!("alpha {a}: part1 differs from reference"))?;
            let count = m.part1.iter().filter(|&&p| p).count();
            match a {
                0 => ensure(count == 0, || "alpha 0 selected pixels".into())?,
                100 => ensure(count == 64, || "alpha 100 left pixels out".into())?,
                _ => {}
            }
            if let Some(p) = &prev {
                ensure(p.iter().zip(&m.part1).all(|(&was, &now)| !was || now), || format!("alpha {a}: part1 shrank"))?;
            }
            prev = Some(m.part1);
        }
    }
    Ok(format!("50 triples, max limit error {worst:.1e}; masks ok for alpha 0..100"))
}

fn metric_oracles() -> Verdict {
    let mut worst = 0.0f64;
    for i in 0..20 {
        let (f, a, b) = (random_image(8, 8, 7 * i), random_image(8, 8, 7 * i + 1), random_image(8, 8, 7 * i + 2));
        let pairs = [
            ("AG", avg_gradient(&f), common::ag(&f)),
            ("EN", entropy(&f), common::en(&f)),
            ("SD", std_dev(&f), common::sd(&f)),
            ("SF", spatial_frequency(&f), common::sf(&f)),
            ("Qabf", qabf(&f, &a, &b).unwrap(), common::qabf(&f, &a, &b)),
        ];
        for (name, lib, reference) in pairs {
            ensure(close(lib, reference, 1e-9), || format!("{name} on image {i}: {lib} vs {reference}"))?;
            worst = worst.max((lib - reference).abs() / (1.0 + reference.abs()));
        }
    }
    let ramp = GrayImage::from_fn(16, 16, |y, x| (16 * y + x) as f32 / 255.0).unwrap();
    let en = entropy(&ramp);
    ensure(en == 8.0, || format!("entropy of all 256 levels is {en}"))?;
    Ok(format!("20 images, max rel diff {worst:.1e}; full-range entropy {en}"))
}

fn training_behaviour() -> Verdict {
    let start = Instant::now();
    let run = overfit_four(0);
    let ratio = run.loss_ratio(5);
    ensure(run.log.len() == 200, || format!("{} steps", run.log.len()))?;
    ensure(ratio <= 0.5, || format!("loss only fell to {ratio:.3} of initial"))?;
    let s = salience(0);
    ensure(s.fused_in_square > s.vi_in_square, || {
        format!("square mean fused {:.3} <= vi {:.3}", s.fused_in_square, s.vi_in_square)
    })?;
    ensure(s.texture_after < s.texture_before, || format!("texture loss {:.4} -> {:.4}", s.texture_before, s.texture_after))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "loss ratio {ratio:.3}; square fused {:.3} vs vi {:.3}; texture {:.3} -> {:.3}; {:.1}s",
        s.fused_in_square,
        s.vi_in_square,
        s.texture_before,
        s.texture_after,
        elapsed.as_secs_f64()
    ))
}

fn lr_schedule() -> Verdict {
    let cfg = TrainConfig::default();
    let expected = [
        (1, 2e-3),
        (50, 2e-3),
        (51, 1e-3),
        (100, 1e-3),
        (101, 5e-4),
        (200, 5e-4),
        (201, 2.5e-4),
        (400, 2.5e-4),
        (401, 1.25e-4),
        (500, 1.25e-4),
    ];
    for (epoch, lr) in expected {
        let got = cfg.lr_at_epoch(epoch);
        ensure(got == lr, || format!("epoch {epoch}: {got} != {lr}"))?;
        ensure(lr_at_epoch(2e-3, &[50, 100, 200, 400], epoch) == lr, || format!("epoch {epoch}"))?;
    }
    Ok("2e-3 -> 1e-3 -> 5e-4 -> 2.5e-4 -> 1.25e-4 after epochs 50/100/200/400".into())
}

fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig { shallow_channels: 4, embed_dim: 8, mlp_hidden: 16, seed, ..Default::default() }
}

fn determinism() -> Verdict {
    let pairs = synthetic_corpus(3, 16, 8);
    let train_once = |seed: u64| {
        let mut model = AtfuseModel::new(tiny_model(seed)).unwrap();
        let cfg = TrainConfig { seed, patches_per_epoch: 6, batch_size: 2, ..overfit_config(3, 16, 4) };
        train(&mut model, &pairs, &cfg, &mut ()).unwrap();
        model
    };
    let (a, b) = (train_once(5), train_once(5));
    ensure(a.store().checksum() == b.store().checksum(), || "same seed, different parameters".into())?;
    ensure(a.store().checksum() != train_once(6).store().checksum(), || "seed has no effect".into())?;

    let bytes = write_checkpoint(&a);
    let back = read_checkpoint(&bytes).map_err(|e| e.to_string())?;
    ensure(write_checkpoint(&back) == bytes, || "checkpoint bytes changed on roundtrip".into())?;
    ensure(back.store().checksum() == a.store().checksum(), || "checkpoint parameters changed".into())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.atf");
    save_checkpoint(&a, &path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure(loaded.config() == a.config(), || "config changed on roundtrip".into())?;

    let pair = &pairs[0];
    let fused = a.fuse_images(pair).map_err(|e| e.to_string())?;
    for other in [&a, &b, &back, &loaded] {
        let again = other.fuse_images(pair).map_err(|e| e.to_string())?;
        let same = again.pixels().iter().zip(fused.pixels()).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || "fused output differs bitwise".into())?;
    }
    Ok(format!("checksum {:016x}; {} checkpoint bytes roundtrip exactly", a.store().checksum(), bytes.len()))
}

fn ablation_harness() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus");
    write_corpus(&corpus, &synthetic_corpus(2, 16, 9)).map_err(|e| e.to_string())?;
    let mut base = RunConfig { model: tiny_model(4), train: TrainConfig { seed: 4, ..overfit_config(2, 16, 3) } };
    base.train.checkpoint_every = 0;
    let out = dir.path().join("ablate");
    let results = cmd_ablate(Study::All, &base, &corpus, &out).map_err(|e| e.to_string())?;
    ensure(results.len() == ablation_grid(Study::All, &base).len(), || "missing runs".into())?;

    let expected: [(&str, &[&str]); 5] = [
        ("no_diim", &["full", "no_diim"]),
        ("no_aciim", &["full", "no_aciim"]),
        ("alpha_sweep", &["alpha=0", "alpha=20", "alpha=50", "alpha=80", "alpha=100"]),
        ("gamma_sweep", &["gamma=0.5", "gamma=0.75", "gamma=1"]),
        ("block_count", &["blocks=1", "blocks=2", "blocks=3"]),
    ];
    let columns = ABLATION_HEADER.split(',').count();
    let mut rows = 0;
    for (study, labels) in expected {
        let text = fs::read_to_string(out.join(format!("ablation_{study}.csv"))).map_err(|e| format!("{study}: {e}"))?;
        let mut lines = text.lines();
        ensure(lines.next() == Some(ABLATION_HEADER), || format!("{study}: bad header"))?;
        let body: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        let got: Vec<&str> = body.iter().map(|r| r[1]).collect();
        ensure(got == labels, || format!("{study}: variants {got:?}"))?;
        for r in &body {
            ensure(r.len() == columns && r[0] == study, || format!("{study}: malformed row {r:?}"))?;
            ensure(r[2] == "4", || format!("{study}: seed {}", r[2]))?;
            ensure(r[4..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)), || format!("{study}: non-numeric {r:?}"))?;
        }
        rows += body.len();
    }

    let params = |study: Study, label: &str| {
        results
            .iter()
            .find(|r| r.run.study == study && r.run.label == label)
            .map(|r| (r.parameters, r.checkpoint.clone()))
            .unwrap()
    };
    let (full_n, full_ckpt) = params(Study::NoDiim, "full");
    let (no_diim_n, no_diim_ckpt) = params(Study::NoDiim, "no_diim");
    let (no_aciim_n, _) = params(Study::NoAciim, "no_aciim");
    ensure(no_diim_n < full_n && no_aciim_n < full_n, || "ablated variants should be smaller".into())?;
    let blocks: Vec<usize> = ["blocks=1", "blocks=2", "blocks=3"].iter().map(|l| params(Study::BlockCount, l).0).collect();
    ensure(blocks[0] < blocks[1] && blocks[1] < blocks[2], || format!("block counts {blocks:?}"))?;

    let raw = |p: &std::path::Path| fs::read(p).map_err(|e| e.to_string());
    let has = |bytes: &[u8], needle: &[u8]| bytes.windows(needle.len()).any(|w| w == needle);
    ensure(has(&raw(&full_ckpt)?, b".diim."), || "full checkpoint lacks DIIM blobs".into())?;
    ensure(!has(&raw(&no_diim_ckpt)?, b".diim."), || "no_diim checkpoint carries DIIM blobs".into())?;
    let m = load_checkpoint(&no_diim_ckpt).map_err(|e| e.to_string())?;
    ensure(m.config().variant == Variant::NoDiim, || "variant not recorded".into())?;
    ensure(m.store().iter().all(|(_, p)| !p.name.contains(".diim.")), || "no_diim model has DIIM params".into())?;
    Ok(format!("{rows} rows in 5 tables, shared seed 4, no_diim {no_diim_n} vs full {full_n} params"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "gradient suite", gradient_suite),
        (2, "DIIM invariants", diim_invariants),
        (3, "output = Z3 + Z1", fusion_composition),
        (4, "loss limits and masks", loss_limits),
        (5, "metric oracles", metric_oracles),
        (6, "desk-scale training", training_behaviour),
        (7, "learning-rate schedule", lr_schedule),
        (8, "determinism and serialization", determinism),
        (9, "ablation harness", ablation_harness),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (n, name, check) in criteria {
        let verdict = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(v) => v,
            Err(e) => Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match verdict {
            Ok(detail) => println!("criterion {n}: PASS {name} ({detail})"),
            Err(why) => {
                failures += 1;
                println!("criterion {n}: FAIL {name} ({why})");
            }
        }
    }
    let _ = panic::take_hook();
    println!("{} of 9 criteria passed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
