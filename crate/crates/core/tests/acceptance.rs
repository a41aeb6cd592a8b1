//! Acceptance suite: one test per criterion, each printing a PASS line
//! (visible with `cargo test --test acceptance -- --nocapture`).

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hct_core::autodiff::Graph;
use hct_core::checkpoint::load_checkpoint;
use hct_core::data::{generate_phantom, payload_checksum, write_dataset, Image, Mask};
use hct_core::eval::{
    ablation_run, binarize, confusion, default_thresholds, evaluate, kfold_split, metrics_csv,
    pr_curve, write_ablation_files,
};
use hct_core::gradcheck::{run_suite, SuiteConfig, REL_TOL};
use hct_core::model::{build_variant, ModelConfig, Variant};
use hct_core::nn::{ParamStore, Scope, TransformerModule};
use hct_core::tensor::Tensor;
use hct_core::train::{cross_entropy, train, AdamState, TrainConfig};

fn tmp_dir(tag: &str) -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("hct_accept_{}_{}", tag, std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        h: 32,
        w: 32,
        d_embed: 16,
        depth: 1,
        n_heads: 2,
        backbone_widths: [2, 2, 4, 4],
        variant,
        ..ModelConfig::default()
    }
}

#[test]
fn criterion1_gradient_suite() {
    let started = Instant::now();
    let reports = run_suite(&SuiteConfig::default()).unwrap();
    for r in &reports {
        assert!(
            r.passed,
            "{} exceeded tolerance: max rel err {:.3e} >= {REL_TOL:.0e}",
            r.name, r.max_rel_err
        );
    }
    let named = [
        "conv2d",
        "residual_block",
        "layer_norm",
        "msa",
        "mlp_block",
        "transformer_module",
        "segmentation_head",
        "hct_end_to_end",
    ];
    for want in named {
        assert!(reports.iter().any(|r| r.name == want), "missing op {want}");
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient suite took {elapsed:.0}s");
    println!(
        "criterion 1 (gradient suite, {} ops, {:.1}s): PASS",
        reports.len(),
        elapsed
    );
}

#[test]
fn criterion2_shape_and_fusion_invariants() {
    // default configuration: 64x64 inputs, D = 256, depth 4
    let cfg = ModelConfig::default();
    assert_eq!(cfg.d_embed, 256);
    let model = build_variant::<f32>(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let unit = |rng: &mut ChaCha8Rng| {
        Image::from_vec(
            64,
            64,
            (0..64 * 64).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    };
    let pet = unit(&mut rng);
    let ct = unit(&mut rng);
    let mut g = Graph::new();
    let (out, trace) = model.forward_traced(&mut g, &pet, &ct).unwrap();
    assert_eq!(
        trace.branch_tokens,
        vec![vec![16, 256]; 3],
        "16 tokens per branch"
    );
    assert_eq!(
        trace.decoder_in,
        Some(vec![48, 256]),
        "decoder consumes 48 tokens"
    );
    assert_eq!(
        trace.decoder_out,
        Some(vec![16, 256]),
        "decoder emits 16 tokens"
    );
    assert_eq!(g.shape(out), &[1, 2, 64, 64]);
    let probs = g.value(out).data();
    let hw = 64 * 64;
    for pix in 0..hw {
        let sum = probs[pix] + probs[hw + pix];
        assert!((sum - 1.0).abs() < 1e-6, "pixel {pix} sums to {sum}");
    }
    // decoder attention spans all three modality streams and stays normalized
    assert_eq!(trace.decoder_attn.len(), cfg.depth * cfg.n_heads);
    for &attn in &trace.decoder_attn {
        assert_eq!(g.shape(attn), &[48, 48]);
        for r in 0..48 {
            let sum: f32 = g.value(attn).data()[r * 48..(r + 1) * 48].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }
    println!("criterion 2 (shape/fusion invariants at 64x64, D=256): PASS");
}

#[test]
fn criterion3_zero_weight_identities() {
    // zeroed transformer sub-blocks: exact identity
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let block = TransformerModule::init(&mut store, &Scope::root("blk"), 16, 4, &mut rng).unwrap();
    store.zero_prefixed("blk.msa");
    store.zero_prefixed("blk.mlp");
    let mut g = Graph::new();
    let data: Vec<f32> = (0..8 * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x = g.leaf(Tensor::from_vec(&[8, 16], data).unwrap());
    let y = block.forward(&mut g, &store, x).unwrap();
    assert_eq!(
        g.value(y).data(),
        g.value(x).data(),
        "identity must be exact"
    );

    // zeroed final conv: uniform 0.5 maps, exact in float
    let mut model = build_variant::<f32>(&tiny_config(Variant::Hct), 3).unwrap();
    model.store.zero_prefixed("head.out");
    let img = Image::from_vec(32, 32, (0..1024).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
    let probs = model.forward_probs(&img, &img).unwrap();
    assert!(
        probs.data().iter().all(|&v| v == 0.5),
        "probabilities must be exactly 0.5"
    );
    println!("criterion 3 (zero-weight identities): PASS");
}

#[test]
fn criterion4_metric_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let thresholds = default_thresholds();
    for case in 0..100 {
        let prob_bits: Vec<f32> = (0..256).map(|_| rng.random_range(0.0..=1.0)).collect();
        let gt_bits: Vec<u8> = (0..256)
            .map(|_| u8::from(rng.random::<f64>() < 0.3))
            .collect();
        let prob = Image::from_vec(16, 16, prob_bits.clone()).unwrap();
        let gt = Mask::from_vec(16, 16, gt_bits.clone()).unwrap();

        // scalar metrics at 0.5 against an independent pixel count
        let c = confusion(&binarize(&prob, 0.5), &gt).unwrap();
        let (mut tp, mut fp, mut fneg, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..256 {
            match (prob_bits[i] as f64 >= 0.5, gt_bits[i] == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => tn += 1,
            }
        }
        let ratio = |n: u64, d: u64| if d == 0 { 1.0 } else { n as f64 / d as f64 };
        assert!(
            (c.dsc() - ratio(2 * tp, 2 * tp + fp + fneg)).abs() < 1e-9,
            "case {case}"
        );
        assert!((c.precision() - ratio(tp, tp + fp)).abs() < 1e-9);
        assert!((c.sensitivity() - ratio(tp, tp + fneg)).abs() < 1e-9);
        assert!((c.specificity() - ratio(tn, tn + fp)).abs() < 1e-9);

        // every PR point against per-threshold pixel counting
        let pts = pr_curve(&prob, &gt, &thresholds).unwrap();
        for (point, &tau) in pts.iter().zip(thresholds.iter()) {
            let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
            for i in 0..256 {
                match (prob_bits[i] as f64 >= tau, gt_bits[i] == 1) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
            assert!((point.precision - ratio(tp, tp + fp)).abs() < 1e-9);
            assert!((point.recall - ratio(tp, tp + fneg)).abs() < 1e-9);
        }
    }

    // hand-value spot checks
    let c = hct_core::eval::ConfusionCounts {
        true_pos: 1,
        false_pos: 1,
        false_neg: 3,
        true_neg: 95,
    };
    assert!((c.dsc() - 1.0 / 3.0).abs() < 1e-12);
    let uniform = Tensor::<f64>::full(&[1, 2, 8, 8], 0.5);
    let mask = Mask::zeros(8, 8);
    let ce = cross_entropy(&uniform, &mask).unwrap();
    assert!((ce - std::f64::consts::LN_2).abs() < 1e-9);
    println!("criterion 4 (metric oracle equivalence, 100 pairs x 101 thresholds): PASS");
}

fn overfit_criterion(variant: Variant) {
    let started = Instant::now();
    let ds = generate_phantom(7, 4, 1, 64, 64).unwrap();
    let cfg = ModelConfig {
        h: 64,
        w: 64,
        d_embed: 64,
        depth: 2,
        n_heads: 4,
        backbone_widths: [16, 32, 64, 128],
        variant,
        ..ModelConfig::default()
    };
    let mut model = build_variant::<f32>(&cfg, 1).unwrap();
    let mut opt = AdamState::new(&model.store);
    // lr 1e-4 with poly 0.9 are the TrainConfig defaults; 250 epochs of
    // 2 batches give exactly 500 Adam steps
    let tc = TrainConfig {
        epochs: 250,
        batch_size: 2,
        seed: 11,
        augment: false,
        ..TrainConfig::default()
    };
    assert_eq!(tc.lr0, 1e-4);
    assert_eq!(tc.poly_power, 0.9);
    train(&mut model, &mut opt, &ds.samples, &tc, 0, None).unwrap();
    assert!(opt.t <= 500, "used {} steps", opt.t);
    let report = evaluate(&model, &ds.samples, 0.5).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        report.metrics.dsc >= 0.95,
        "{variant}: training DSC {:.4} below 0.95",
        report.metrics.dsc
    );
    assert!(elapsed < 900.0, "{variant}: took {elapsed:.0}s");
    println!(
        "criterion 5 (learnability, {variant}: DSC {:.4} in {} steps, {:.0}s): PASS",
        report.metrics.dsc, opt.t, elapsed
    );
}

#[test]
fn criterion5_learnability_hct() {
    overfit_criterion(Variant::Hct);
}

#[test]
fn criterion5_learnability_ef_tn() {
    overfit_criterion(Variant::EfTn);
}

#[test]
fn criterion5_learnability_hf_fcn() {
    overfit_criterion(Variant::HfFcn);
}

#[test]
fn criterion6_protocol_integrity() {
    let ids: Vec<u32> = (0..70).collect();
    let folds = kfold_split(&ids, 5, 7).unwrap();
    assert_eq!(folds.len(), 5);
    let mut pooled = Vec::new();
    for (train_ids, test_ids) in &folds {
        assert_eq!(train_ids.len(), 56);
        assert_eq!(test_ids.len(), 14);
        for id in test_ids {
            assert!(!train_ids.contains(id), "patient {id} leaked");
        }
        pooled.extend_from_slice(test_ids);
    }
    pooled.sort_unstable();
    assert_eq!(pooled, ids, "test folds must partition the patients");
    assert_eq!(
        folds,
        kfold_split(&ids, 5, 7).unwrap(),
        "determinism under seed"
    );
    println!("criterion 6 (5-fold protocol integrity, 70 patients): PASS");
}

#[test]
fn criterion7_determinism_and_persistence() {
    // (a) dataset files: byte-identical across runs
    let d1 = tmp_dir("c7_ds1");
    let d2 = tmp_dir("c7_ds2");
    write_dataset(&generate_phantom(7, 2, 2, 32, 32).unwrap(), &d1).unwrap();
    write_dataset(&generate_phantom(7, 2, 2, 32, 32).unwrap(), &d2).unwrap();
    assert_eq!(
        payload_checksum(&d1).unwrap(),
        payload_checksum(&d2).unwrap()
    );

    // (b) epoch-loss logs: bit-identical loss/lr sequences
    let ds = generate_phantom(3, 2, 2, 32, 32).unwrap();
    let cfg = tiny_config(Variant::Hct);
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = build_variant::<f32>(&cfg, 9).unwrap();
        let mut opt = AdamState::new(&model.store);
        train(&mut model, &mut opt, &ds.samples, &tc, 0, None).unwrap()
    };
    let log_a = run();
    let log_b = run();
    for (a, b) in log_a.iter().zip(log_b.iter()) {
        assert_eq!(a.mean_loss.to_bits(), b.mean_loss.to_bits());
        assert_eq!(a.lr.to_bits(), b.lr.to_bits());
    }

    // (c) metrics tables: identical across repeated evaluation runs
    let model = build_variant::<f32>(&cfg, 9).unwrap();
    let r1 = evaluate(&model, &ds.samples, 0.5).unwrap();
    let r2 = evaluate(&model, &ds.samples, 0.5).unwrap();
    assert_eq!(r1.metrics.dsc.to_bits(), r2.metrics.dsc.to_bits());
    for (p1, p2) in r1.pr.iter().zip(r2.pr.iter()) {
        assert_eq!(p1.precision.to_bits(), p2.precision.to_bits());
        assert_eq!(p1.recall.to_bits(), p2.recall.to_bits());
    }

    // (d) checkpoint save/reload resumes within 1e-6 of the uninterrupted
    // run: the full run drops a checkpoint at epoch 3; a fresh process
    // resuming from it must replay epochs 3..6 exactly
    let resume_dir = tmp_dir("c7_resume");
    let full_cfg = TrainConfig {
        epochs: 6,
        checkpoint_every: 3,
        ..tc.clone()
    };
    let mut model_a = build_variant::<f32>(&cfg, 9).unwrap();
    let mut opt_a = AdamState::new(&model_a.store);
    let full_log = train(
        &mut model_a,
        &mut opt_a,
        &ds.samples,
        &full_cfg,
        0,
        Some(&resume_dir),
    )
    .unwrap();
    let loaded = load_checkpoint(&resume_dir.join("ckpt_epoch0003.bin")).unwrap();
    assert_eq!(loaded.epoch, 3);
    let mut model_b = loaded.model;
    let mut opt_b = loaded
        .opt
        .expect("training checkpoints carry optimizer state");
    let resumed_log = train(&mut model_b, &mut opt_b, &ds.samples, &full_cfg, 3, None).unwrap();
    assert_eq!(resumed_log.len(), 3);
    for (a, b) in full_log[3..].iter().zip(resumed_log.iter()) {
        assert!(
            (a.mean_loss - b.mean_loss).abs() <= 1e-6,
            "epoch {}: {} vs {}",
            a.epoch,
            a.mean_loss,
            b.mean_loss
        );
    }
    // resumed parameters land exactly where the uninterrupted run did
    for (name, t) in model_a.store.iter() {
        assert_eq!(model_b.store.get(name).unwrap(), t, "{name} diverged");
    }
    for d in [&d1, &d2, &resume_dir] {
        std::fs::remove_dir_all(d).ok();
    }
    println!("criterion 7 (determinism & persistence): PASS");
}

#[test]
fn criterion8_ablation_harness_reported() {
    let started = Instant::now();
    let ds = generate_phantom(7, 20, 4, 64, 64).unwrap();
    assert_eq!(ds.samples.len(), 80);
    let model_cfg = ModelConfig {
        h: 64,
        w: 64,
        d_embed: 32,
        depth: 1,
        n_heads: 4,
        backbone_widths: [8, 16, 32, 64],
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        lr0: 1e-3,
        seed: 7,
        ..TrainConfig::default()
    };
    let variants = [Variant::EfTn, Variant::LfTn, Variant::Hct];
    let result = ablation_run(&ds, &variants, &model_cfg, &train_cfg, 5, 0.5).unwrap();
    assert_eq!(result.variants.len(), 3);
    for r in &result.variants {
        assert_eq!(r.folds.len(), 5, "{}: 5 folds", r.variant);
        assert_eq!(r.pr.len(), 101, "{}: pooled PR curve", r.variant);
        assert!(r.param_count > 0);
    }
    let csv = metrics_csv(&result.variants);
    assert_eq!(csv.lines().count(), 16, "header + 15 rows");
    let dir = tmp_dir("c8_ablation");
    write_ablation_files(&result, &dir).unwrap();
    for v in ["EF-TN", "LF-TN", "HCT"] {
        assert!(dir.join(format!("pr_{v}.csv")).exists());
    }
    std::fs::remove_dir_all(&dir).ok();
    let observed = result
        .hf_ef_lf_ordering_observed
        .expect("all three fusion variants were evaluated");
    let summary: Vec<String> = result
        .variants
        .iter()
        .map(|r| format!("{} DSC {:.2}", r.variant, r.mean.dsc * 100.0))
        .collect();
    println!(
        "criterion 8 (ablation harness, {:.0}s; {}; HF > EF > LF observed: {observed} — reported, not asserted): PASS",
        started.elapsed().as_secs_f64(),
        summary.join(", ")
    );
}
