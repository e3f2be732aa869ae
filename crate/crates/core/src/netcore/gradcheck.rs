//! Central finite-difference check of the focal-loss parameter gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, build_network, forward, LayerSpec, NetworkConfig, Parameters};
use crate::error::Result;
use crate::losses::{focal_loss_backward, one_hot, FocalLossParams};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely rather than
/// relatively.
pub const RELATIVE_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±STEP perturbation flipped a relu input across
    /// zero; the central difference is not a derivative there.
    pub kink_skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn relu_pattern(config: &NetworkConfig, acts: &[Tensor]) -> Vec<bool> {
    config
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Relu))
        .flat_map(|(i, _)| acts[i].data().iter().map(|&v| v > 0.0))
        .collect()
}

/// Compares the analytic focal-loss gradient of a freshly initialized
/// network (parameters from `seed`, targets drawn from `seed` too) with
/// central finite differences of every parameter.
pub fn gradient_check(config: &NetworkConfig, seed: u64, batch: &Tensor, gamma: f64, tol: f64) -> Result<CheckReport> {
    let mut params = build_network(config, seed)?;
    // Non-zero biases so that bias gradients are exercised away from init.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for e in params.entries_mut() {
        if e.name.ends_with(".bias") {
            for v in e.value.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let labels: Vec<usize> = (0..batch.batch())
        .map(|_| rng.gen_range(0..config.num_classes))
        .collect();
    check_parameters(config, &params, batch, &labels, gamma, tol)
}

/// Gradient check at explicit parameters and labels.
pub fn check_parameters(
    config: &NetworkConfig,
    params: &Parameters,
    batch: &Tensor,
    labels: &[usize],
    gamma: f64,
    tol: f64,
) -> Result<CheckReport> {
    let loss_params = FocalLossParams::new(gamma)?;
    let targets = one_hot(labels, config.num_classes)?;
    let trace = forward(config, params, batch)?;
    let (_, dlogits) = focal_loss_backward(&trace.logits, &targets, &loss_params)?;
    let grads = backward(config, params, &trace, &dlogits)?;

    let eval = |p: &Parameters| -> Result<(f64, Vec<bool>)> {
        let t = forward(config, p, batch)?;
        let (loss, _) = focal_loss_backward(&t.logits, &targets, &loss_params)?;
        Ok((loss, relu_pattern(config, &t.activations)))
    };

    let mut report = CheckReport {
        params: Vec::new(),
        max_rel_error: 0.0,
        tol,
        passed: true,
    };
    let mut probe = params.clone();
    for (idx, entry) in params.entries().iter().enumerate() {
        let mut check = ParamCheck {
            name: entry.name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            kink_skipped: 0,
        };
        for j in 0..entry.value.len() {
            let original = entry.value.data()[j];
            probe.entries_mut()[idx].value.data_mut()[j] = original + STEP;
            let (up, up_pattern) = eval(&probe)?;
            probe.entries_mut()[idx].value.data_mut()[j] = original - STEP;
            let (down, down_pattern) = eval(&probe)?;
            probe.entries_mut()[idx].value.data_mut()[j] = original;
            if up_pattern != down_pattern {
                check.kink_skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.entries()[idx].value.data()[j];
            let err = relative_error(analytic, numeric);
            if !err.is_finite() {
                check.max_rel_error = f64::INFINITY;
            } else {
                check.max_rel_error = check.max_rel_error.max(err);
            }
            check.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    report.passed = report.max_rel_error < tol && grads.entries().iter().all(|g| g.value.is_finite());
    Ok(report)
}
