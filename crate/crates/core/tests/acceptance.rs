//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::{
    benchmark, brute_force_macro_f1, gradient_configs, random_distribution, rng, uniform_tensor, DIVERSE_BASES,
};
use petalnet::checkpoint::{encode, save_parameters};
use petalnet::dataset::{batches, Dataset, SplitManifests};
use petalnet::fusion::{dynamic_weights, fuse, verify_frozen, DynamicStrategy, FusionStrategy, FusionWeights};
use petalnet::losses::{focal_loss, focal_loss_backward, one_hot, FocalLossParams};
use petalnet::metrics::ConfusionMatrix;
use petalnet::netcore::{gradient_check, relative_error, Network, NetworkConfig, STEP};
use petalnet::optim::{AdamState, LrSchedule};
use petalnet::trainer::{
    evaluate, fine_tune_meta, replica_step, train, FusedEnsemble, MetaConfig, TrainConfig, TrainHistory,
};
use petalnet::Tensor;
use rand::Rng;
use sha2::{Digest, Sha256};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient_suite() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut runs = 0;
    let mut failures = Vec::new();
    for (name, config) in gradient_configs() {
        let (h, w, c) = config.input_shape;
        for seed in 0..20u64 {
            let batch = uniform_tensor(&[3, h, w, c], -1.0, 1.0, &mut rng(1000 + seed));
            for gamma in [0.0, 0.5, 2.0] {
                let report = gradient_check(&config, seed, &batch, gamma, TOL).unwrap();
                worst = worst.max(report.max_rel_error);
                runs += 1;
                if !report.passed {
                    failures.push(format!("{name}/seed{seed}/gamma{gamma}"));
                }
            }
        }
    }
    // Loss layer on its own, against differences of the logits.
    let mut r = rng(5);
    for gamma in [0.0, 0.5, 2.0] {
        let params = FocalLossParams::new(gamma).unwrap();
        for _ in 0..20 {
            let logits = uniform_tensor(&[4, 5], -3.0, 3.0, &mut r);
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            let targets = one_hot(&labels, 5).unwrap();
            let (_, grad) = focal_loss_backward(&logits, &targets, &params).unwrap();
            for j in 0..logits.len() {
                let mut up = logits.clone();
                up.data_mut()[j] += STEP;
                let mut down = logits.clone();
                down.data_mut()[j] -= STEP;
                let numeric = (focal_loss_backward(&up, &targets, &params).unwrap().0
                    - focal_loss_backward(&down, &targets, &params).unwrap().0)
                    / (2.0 * STEP);
                worst = worst.max(relative_error(grad.data()[j], numeric));
            }
            runs += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        failures.is_empty() && worst < TOL && elapsed < Duration::from_secs(60),
        format!(
            "{runs} checks over 20 seeds, gamma in {{0, 0.5, 2}}; max relative error {worst:.2e} (tol 1e-4); {:.1}s (limit 60s){}",
            secs(elapsed),
            if failures.is_empty() { String::new() } else { format!("; failing: {failures:?}") }
        ),
    )
}

fn focal_identities() -> Outcome {
    let mut r = rng(50);
    let mut worst_ce = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(1..6);
        let c = r.gen_range(2..7);
        let probs = random_distribution(n, c, &mut r);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let focal = focal_loss(&probs, &one_hot(&labels, c).unwrap(), &FocalLossParams::new(0.0).unwrap()).unwrap();
        let ce = -labels.iter().enumerate().map(|(i, &t)| probs.row(i)[t].ln()).sum::<f64>() / n as f64;
        worst_ce = worst_ce.max((focal - ce).abs());
    }
    let probs = Tensor::from_rows(&[vec![0.8, 0.2]]).unwrap();
    let worked = focal_loss(&probs, &one_hot(&[0], 2).unwrap(), &FocalLossParams::default()).unwrap();
    let oracle = -(0.2f64 * 0.2) * 0.8f64.ln();
    let sig6 = |v: f64| format!("{v:.5e}");
    outcome(
        worst_ce <= 1e-12 && sig6(worked) == sig6(oracle) && (worked - 0.0089257).abs() < 5e-8,
        format!(
            "gamma=0 vs cross-entropy max diff {worst_ce:.1e} (tol 1e-12); (0.8, 0.2) gamma=2 -> {worked:.9} vs -0.04 ln 0.8 = {oracle:.9}"
        ),
    )
}

fn scheduler_table() -> Outcome {
    let s = LrSchedule::default();
    let at = |k: i64| s.lr_at(k).unwrap();
    let step9 = (4e-4 - 1e-5) * 0.8 + 1e-5;
    let sustain = (4..=7).all(|k| at(k) == 4e-4);
    let tail_monotone = (8..200).all(|k| at(k + 1) <= at(k) && at(k) >= 1e-5);
    let ok = at(0) == 1e-5 && sustain && at(9) == step9 && at(1_000_000) == 1e-5 && tail_monotone;
    outcome(
        ok,
        format!(
            "step 0 -> {:e}, steps 4-7 -> 4e-4: {sustain}, step 9 -> {:e} (closed form {step9:e}, |diff to 3.22e-4| {:.1e}), step 1e6 -> {:e}",
            at(0),
            at(9),
            (at(9) - 3.22e-4).abs(),
            at(1_000_000)
        ),
    )
}

fn metric_oracle() -> Outcome {
    let mut r = rng(11);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let c = r.gen_range(2..=6);
        let n = r.gen_range(1..=30);
        let truth: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();
        let (f1, _) = ConfusionMatrix::from_labels(c, &pred, &truth).unwrap().macro_f1();
        if f1 != brute_force_macro_f1(&truth, &pred, c) {
            mismatches += 1;
        }
    }
    let (hand, _) = ConfusionMatrix::from_labels(3, &[0, 1, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap().macro_f1();
    outcome(
        mismatches == 0 && (hand - 0.822222).abs() <= 1e-6,
        format!("{mismatches} mismatches in 1000 exact comparisons; hand example {hand:.6}"),
    )
}

fn replica_equivalence(ds: &Dataset, splits: &SplitManifests) -> Outcome {
    let start = Instant::now();
    let net_config = NetworkConfig::small_convnet((32, 32, 3), DIVERSE_BASES[1].0, DIVERSE_BASES[1].1, 10);
    let init = Network::init(net_config.clone(), 0).unwrap();
    let batch = batches(ds, &splits.train, 128, Some(1), None).unwrap().next().unwrap().unwrap();
    let loss = FocalLossParams::default();
    let step = |k| {
        let mut params = init.params.clone();
        let mut adam = AdamState::new(&params);
        replica_step(&net_config, &mut params, &batch.images, &batch.labels, k, &loss, 4e-4, &mut adam).unwrap();
        params
    };
    let reference = step(1);
    let diffs: Vec<f64> = [2, 4, 8].iter().map(|&k| step(k).max_abs_diff(&reference).unwrap()).collect();
    let epoch = |k| {
        let cfg = TrainConfig {
            epochs: 1,
            replicas: k,
            ..TrainConfig::default()
        };
        let (net, _) = train(&cfg, &net_config, ds, splits).unwrap();
        evaluate(&net, ds, &splits.val).unwrap().macro_f1
    };
    let (f1_one, f1_four) = (epoch(1), epoch(4));
    let elapsed = start.elapsed();
    outcome(
        diffs.iter().all(|&d| d < 1e-9) && (f1_one - f1_four).abs() < 0.01 && elapsed < Duration::from_secs(120),
        format!(
            "one-step max param diff for K=2,4,8: {:.1e}, {:.1e}, {:.1e} (tol 1e-9); one epoch val macro-F1 K=1 {f1_one:.4} vs K=4 {f1_four:.4} (tol 0.01); {:.1}s (limit 120s)",
            diffs[0],
            diffs[1],
            diffs[2],
            secs(elapsed)
        ),
    )
}

struct PipelineRun {
    base_test: Vec<f64>,
    base_val: Vec<f64>,
    average_test: f64,
    meta_test: f64,
    bases_unchanged: bool,
    frozen_verified: bool,
    elapsed: Duration,
    hashes: Vec<(String, String)>,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_artifact(dir: &Path, name: &str, bytes: &[u8], hashes: &mut Vec<(String, String)>) {
    std::fs::write(dir.join(name), bytes).unwrap();
    hashes.push((name.to_string(), sha_hex(&std::fs::read(dir.join(name)).unwrap())));
}

fn history_artifact(dir: &Path, name: &str, history: &TrainHistory, hashes: &mut Vec<(String, String)>) {
    write_artifact(dir, name, history.to_csv().as_bytes(), hashes);
}

/// Full pipeline: benchmark generation, three diverse bases, uniform
/// averaging and the fine-tuned meta-classifier, all scored on test.
fn pipeline(dir: &Path) -> PipelineRun {
    let start = Instant::now();
    let (ds, splits) = benchmark();
    let mut hashes = Vec::new();
    let mut bases = Vec::new();
    let mut base_test = Vec::new();
    let mut base_val = Vec::new();
    for (i, (filters, feature, seed)) in DIVERSE_BASES.into_iter().enumerate() {
        let cfg = TrainConfig {
            init_seed: seed,
            shuffle_seed: seed + 10,
            augment_seed: seed + 20,
            ..TrainConfig::default()
        };
        let net_config = NetworkConfig::small_convnet((32, 32, 3), filters, feature, 10);
        let (net, history) = train(&cfg, &net_config, &ds, &splits).unwrap();
        history_artifact(dir, &format!("base{i}_history.csv"), &history, &mut hashes);
        let path = dir.join(format!("base{i}.dfl"));
        save_parameters(&path, &net.params).unwrap();
        hashes.push((format!("base{i}.dfl"), sha_hex(&std::fs::read(&path).unwrap())));
        base_test.push(evaluate(&net, &ds, &splits.test).unwrap().macro_f1);
        base_val.push(history.best_val_macro_f1().unwrap());
        bases.push(net);
    }
    let average = FusedEnsemble {
        members: bases.clone(),
        strategy: FusionStrategy::Average,
        val_accuracies: None,
    };
    let average_test = evaluate(&average, &ds, &splits.test).unwrap().macro_f1;
    let before_bytes: Vec<Vec<u8>> = bases.iter().map(|b| encode(b.params.entries()).unwrap()).collect();
    let snapshot_before = petalnet::fusion::MetaClassifier::new(
        bases.clone(),
        MetaConfig::default().concat_source,
        0,
    )
    .unwrap()
    .snapshot();
    let cfg = TrainConfig {
        init_seed: 99,
        ..TrainConfig::default()
    };
    let (meta, history) = fine_tune_meta(bases, &ds, &splits, &cfg, &MetaConfig::default()).unwrap();
    history_artifact(dir, "meta_history.csv", &history, &mut hashes);
    write_artifact(dir, "meta_head.dfl", &encode(meta.head().params.entries()).unwrap(), &mut hashes);
    let bases_unchanged = meta
        .bases()
        .iter()
        .zip(&before_bytes)
        .all(|(b, bytes)| &encode(b.network().params.entries()).unwrap() == bytes);
    let frozen_verified = verify_frozen(&snapshot_before, &meta.snapshot()).unwrap();
    let meta_test = evaluate(&meta, &ds, &splits.test).unwrap().macro_f1;
    PipelineRun {
        base_test,
        base_val,
        average_test,
        meta_test,
        bases_unchanged,
        frozen_verified,
        elapsed: start.elapsed(),
        hashes,
    }
}

fn frozen_bases(run: &PipelineRun) -> Outcome {
    outcome(
        run.bases_unchanged && run.frozen_verified,
        format!(
            "base parameter bytes unchanged: {}; verify_frozen: {}",
            run.bases_unchanged, run.frozen_verified
        ),
    )
}

fn ensemble_superiority(run: &PipelineRun) -> Outcome {
    let best = run.base_test.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ok = run.average_test >= best - 0.005
        && run.meta_test >= best - 0.005
        && run.meta_test >= run.average_test - 0.005
        && run.elapsed < Duration::from_secs(600);
    outcome(
        ok,
        format!(
            "test macro-F1 bases {:?} (val {:?}), average {:.4}, meta {:.4}; strict gain over best base: average {:+.4}, meta {:+.4}; {:.1}s (limit 600s)",
            run.base_test.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            run.base_val.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            run.average_test,
            run.meta_test,
            run.average_test - best,
            run.meta_test - best,
            secs(run.elapsed)
        ),
    )
}

fn fusion_algebra() -> Outcome {
    let start = Instant::now();
    let mut r = rng(60);
    let (mut convex, mut unanimous, mut invariant) = (0, 0, 0);
    const N: usize = 10_000;
    for _ in 0..N {
        let (k, n, c) = (r.gen_range(1..=5), r.gen_range(1..=4), r.gen_range(2..=6));
        let probs: Vec<Tensor> = (0..k).map(|_| random_distribution(n, c, &mut r)).collect();
        let scores: Vec<f64> = (0..k).map(|_| r.gen_range(0.01..1.0)).collect();
        let weights = match r.gen_range(0..3) {
            0 => FusionWeights::from_scores(&scores).unwrap(),
            1 => dynamic_weights(&probs, DynamicStrategy::Entropy).unwrap(),
            _ => dynamic_weights(&probs, DynamicStrategy::Confidence).unwrap(),
        };
        let fused = fuse(&probs, &weights).unwrap();
        let is_convex = (0..n).all(|i| {
            (fused.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12
                && (0..c).all(|j| {
                    let lo = probs.iter().map(|p| p.row(i)[j]).fold(f64::INFINITY, f64::min);
                    let hi = probs.iter().map(|p| p.row(i)[j]).fold(f64::NEG_INFINITY, f64::max);
                    fused.row(i)[j] >= lo - 1e-12 && fused.row(i)[j] <= hi + 1e-12
                })
        });
        convex += usize::from(is_convex);

        let same = vec![probs[0].clone(); k];
        let fused_same = fuse(&same, &weights).unwrap();
        unanimous += usize::from(fused_same.max_abs_diff(&probs[0]).unwrap() < 1e-12);

        let scale = r.gen_range(1e-3..1e3);
        let scaled: Vec<f64> = scores.iter().map(|s| s * scale).collect();
        let a = fuse(&probs, &FusionWeights::from_scores(&scores).unwrap()).unwrap();
        let b = fuse(&probs, &FusionWeights::from_scores(&scaled).unwrap()).unwrap();
        invariant += usize::from(a.argmax_rows() == b.argmax_rows());
    }
    let elapsed = start.elapsed();
    outcome(
        convex == N && unanimous == N && invariant == N,
        format!(
            "{N} instances: convex {convex}, unanimous {unanimous}, argmax invariant {invariant}; {:.2}s",
            secs(elapsed)
        ),
    )
}

fn determinism(a: &PipelineRun, b: &PipelineRun) -> Outcome {
    let differing: Vec<&str> = a
        .hashes
        .iter()
        .zip(&b.hashes)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        differing.is_empty() && a.hashes.len() == b.hashes.len() && a.meta_test == b.meta_test,
        format!(
            "{} artifacts (history CSVs and checkpoints) compared by SHA-256; differing: {differing:?}",
            a.hashes.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        println!("{} [{id}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    record(1, "gradient suite", gradient_suite());
    record(2, "focal-loss identities", focal_identities());
    record(3, "scheduler table", scheduler_table());
    record(4, "metric oracle", metric_oracle());
    let (ds, splits) = benchmark();
    record(5, "replica equivalence", replica_equivalence(&ds, &splits));
    drop((ds, splits));
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let first = pipeline(dir_a.path());
    record(6, "frozen-base bit identity", frozen_bases(&first));
    record(7, "ensemble superiority", ensemble_superiority(&first));
    record(8, "fusion algebra", fusion_algebra());
    let second = pipeline(dir_b.path());
    record(9, "determinism", determinism(&first, &second));
    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
