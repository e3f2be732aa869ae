mod common;

use common::{gradient_configs, rng, uniform_tensor};
use petalnet::losses::{focal_loss_backward, one_hot, FocalLossParams};
use petalnet::netcore::{gradient_check, relative_error, STEP};
use rand::Rng;

const TOL: f64 = 1e-4;

#[test]
fn every_layer_kind_matches_finite_differences() {
    for (name, config) in gradient_configs() {
        let (h, w, c) = config.input_shape;
        for seed in 0..20u64 {
            let batch = uniform_tensor(&[3, h, w, c], -1.0, 1.0, &mut rng(1000 + seed));
            for gamma in [0.0, 0.5, 2.0] {
                let report = gradient_check(&config, seed, &batch, gamma, TOL).unwrap();
                assert!(
                    report.passed,
                    "{name} seed {seed} gamma {gamma}: max rel error {:e}",
                    report.max_rel_error
                );
                let checked: usize = report.params.iter().map(|p| p.checked).sum();
                let skipped: usize = report.params.iter().map(|p| p.kink_skipped).sum();
                assert!(checked > 10 * skipped, "{name}: too many kink skips ({skipped})");
            }
        }
    }
}

#[test]
fn zero_images_give_finite_gradients() {
    for (name, config) in gradient_configs() {
        let (h, w, c) = config.input_shape;
        let batch = petalnet::Tensor::zeros(&[2, h, w, c]);
        let report = gradient_check(&config, 3, &batch, 2.0, TOL).unwrap();
        assert!(report.passed, "{name}: {:e}", report.max_rel_error);
    }
}

#[test]
fn focal_logit_gradient_matches_finite_differences() {
    let mut r = rng(5);
    for gamma in [0.0, 0.5, 2.0] {
        for _ in 0..20 {
            let logits = uniform_tensor(&[4, 5], -3.0, 3.0, &mut r);
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            let targets = one_hot(&labels, 5).unwrap();
            let params = FocalLossParams::new(gamma).unwrap();
            let (_, grad) = focal_loss_backward(&logits, &targets, &params).unwrap();
            for j in 0..logits.len() {
                let mut up = logits.clone();
                up.data_mut()[j] += STEP;
                let mut down = logits.clone();
                down.data_mut()[j] -= STEP;
                let numeric = (focal_loss_backward(&up, &targets, &params).unwrap().0
                    - focal_loss_backward(&down, &targets, &params).unwrap().0)
                    / (2.0 * STEP);
                let err = relative_error(grad.data()[j], numeric);
                assert!(err < TOL, "gamma {gamma}: coordinate {j} error {err:e}");
            }
        }
    }
}
