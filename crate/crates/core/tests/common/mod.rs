//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use petalnet::dataset::{generate_synthetic, split, Dataset, SplitManifests, SyntheticSpec, REFERENCE_SPLIT};
use petalnet::netcore::{LayerSpec, NetworkConfig, Padding};
use petalnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn conv(filters: usize, kernel: usize, stride: usize, padding: Padding) -> LayerSpec {
    LayerSpec::Conv2d {
        filters,
        kernel,
        stride,
        padding,
    }
}

/// Small networks that between them exercise every layer kind and both
/// padding modes and strides.
pub fn gradient_configs() -> Vec<(&'static str, NetworkConfig)> {
    vec![
        (
            "conv_same_stride1_gap",
            NetworkConfig {
                input_shape: (5, 5, 2),
                layers: vec![
                    conv(3, 3, 1, Padding::Same),
                    LayerSpec::Relu,
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::Dense { units: 4 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { units: 3 },
                ],
                num_classes: 3,
            },
        ),
        (
            "conv_valid_stride2_flatten",
            NetworkConfig {
                input_shape: (6, 5, 2),
                layers: vec![
                    conv(2, 2, 2, Padding::Valid),
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense { units: 3 },
                ],
                num_classes: 3,
            },
        ),
        (
            "two_conv_same_stride2",
            NetworkConfig::small_convnet((6, 6, 2), &[2, 3], 4, 4),
        ),
        (
            "dense_only",
            NetworkConfig {
                input_shape: (1, 1, 5),
                layers: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 4 }],
                num_classes: 4,
            },
        ),
    ]
}

/// Macro F1 recounted per class straight from the label lists.
pub fn brute_force_macro_f1(truth: &[usize], pred: &[usize], num_classes: usize) -> f64 {
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let mut total = 0.0;
    for c in 0..num_classes {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                (false, false) => {}
            }
        }
        let precision = div(tp, tp + fp);
        let recall = div(tp, tp + fn_);
        total += div(2.0 * precision * recall, precision + recall);
    }
    total / num_classes as f64
}

pub fn random_distribution(n: usize, c: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        let row: Vec<f64> = (0..c).map(|_| rng.gen_range(1e-3..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![n, c], data).unwrap()
}

pub const BENCHMARK_SEED: u64 = 7;

/// The 10-class, 200-per-class, 32×32 benchmark at the reference split.
pub fn benchmark() -> (Dataset, SplitManifests) {
    let (ds, m) = generate_synthetic(&SyntheticSpec::default(), BENCHMARK_SEED).unwrap();
    let s = split(&m, REFERENCE_SPLIT, BENCHMARK_SEED).unwrap();
    (ds, s)
}

/// Three bases differing in widths and seeds: (conv filters, feature width, seed).
pub const DIVERSE_BASES: [(&[usize], usize, u64); 3] = [(&[12, 24], 48, 1), (&[16, 32], 64, 2), (&[24, 32], 64, 3)];
