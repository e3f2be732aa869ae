//! Categorical focal loss fused with softmax.
//!
//! For a one-hot target `t` and predicted distribution `p` the per-sample
//! loss is `-(1 - p_t)^γ · ln p_t`, averaged over the batch. With `γ = 0`
//! this is plain categorical cross-entropy.

use crate::error::{Error, Result};
use crate::netcore::softmax;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLossParams {
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for FocalLossParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            epsilon: 1e-12,
        }
    }
}

impl FocalLossParams {
    pub fn new(gamma: f64) -> Result<Self> {
        let p = Self {
            gamma,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::validation(format!(
                "focal gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-6) {
            return Err(Error::validation(format!(
                "focal epsilon must lie in (0, 1e-6], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// One-hot `[N, C]` targets from class labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), num_classes]);
    for (i, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::validation(format!(
                "label {label} at row {i} out of range for {num_classes} classes"
            )));
        }
        t.row_mut(i)[label] = 1.0;
    }
    Ok(t)
}

fn check_pair(a: &Tensor, targets: &Tensor, what: &str) -> Result<()> {
    if a.rank() != 2 || a.shape() != targets.shape() {
        return Err(Error::dim(format!("{what} vs targets"), a.shape(), targets.shape()));
    }
    Ok(())
}

/// Index of the hot entry, or a validation error.
fn hot_index(row: &[f64], i: usize) -> Result<usize> {
    let mut hot = None;
    for (j, &v) in row.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(j);
        } else if v != 0.0 {
            return Err(Error::validation(format!("target row {i} is not one-hot")));
        }
    }
    hot.ok_or_else(|| Error::validation(format!("target row {i} is not one-hot")))
}

/// `1 - p_t` summed from the other classes, which keeps precision when
/// `p_t` is close to one.
fn complement(probs: &[f64], t: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != t)
        .map(|(_, p)| p)
        .sum()
}

/// `ln p_t`, taken through `ln_1p` of the complement when `p_t` is near one
/// and clamped at `epsilon` from below.
fn log_prob(pt: f64, q: f64, epsilon: f64) -> f64 {
    if q < 0.5 {
        (-q).ln_1p()
    } else {
        pt.max(epsilon).ln()
    }
}

fn row_loss(probs: &[f64], t: usize, params: &FocalLossParams) -> f64 {
    let q = complement(probs, t);
    let log_p = log_prob(probs[t], q, params.epsilon);
    let weight = if params.gamma == 0.0 {
        1.0
    } else {
        q.powf(params.gamma)
    };
    -weight * log_p
}

/// Mean focal loss of a batch of probability rows.
pub fn focal_loss(probs: &Tensor, targets_onehot: &Tensor, params: &FocalLossParams) -> Result<f64> {
    params.validate()?;
    check_pair(probs, targets_onehot, "probabilities")?;
    let n = probs.batch();
    if n == 0 {
        return Err(Error::validation("focal loss of an empty batch"));
    }
    let mut total = 0.0;
    for (i, (p, y)) in probs.rows().zip(targets_onehot.rows()).enumerate() {
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::validation(format!(
                "probability row {i} is not a distribution (sum {sum})"
            )));
        }
        total += row_loss(p, hot_index(y, i)?, params);
    }
    Ok(total / n as f64)
}

/// Mean focal loss of `softmax(logits)` and its exact gradient with respect
/// to the logits.
///
/// With `p = softmax(z)` and target `t`, `∂p_t/∂z_j = p_t(δ_tj - p_j)`, so
/// `∂L/∂z_j = A · (δ_tj - p_j)` where
/// `A = γ(1-p_t)^(γ-1) p_t ln p_t - (1-p_t)^γ`.
pub fn focal_loss_backward(
    logits: &Tensor,
    targets_onehot: &Tensor,
    params: &FocalLossParams,
) -> Result<(f64, Tensor)> {
    params.validate()?;
    check_pair(logits, targets_onehot, "logits")?;
    let n = logits.batch();
    if n == 0 {
        return Err(Error::validation("focal loss of an empty batch"));
    }
    let probs = softmax(logits)?;
    let inv_n = 1.0 / n as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for i in 0..n {
        let p = probs.row(i);
        let t = hot_index(targets_onehot.row(i), i)?;
        total += row_loss(p, t, params);
        let g = grad.row_mut(i);
        if params.gamma == 0.0 {
            for (j, (gj, &pj)) in g.iter_mut().zip(p).enumerate() {
                let y = if j == t { 1.0 } else { 0.0 };
                *gj = (pj - y) * inv_n;
            }
            continue;
        }
        let pt = p[t];
        let q = complement(p, t);
        let gamma = params.gamma;
        let log_term = if q > 0.0 {
            gamma * q.powf(gamma - 1.0) * pt * log_prob(pt, q, params.epsilon)
        } else {
            0.0
        };
        let direct = if pt >= params.epsilon { q.powf(gamma) } else { 0.0 };
        let a = log_term - direct;
        for (j, (gj, &pj)) in g.iter_mut().zip(p).enumerate() {
            let delta = if j == t { 1.0 } else { 0.0 };
            *gj = a * (delta - pj) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// Mean categorical cross-entropy, computed independently of the focal path.
pub fn cross_entropy(probs: &Tensor, targets_onehot: &Tensor, epsilon: f64) -> Result<f64> {
    check_pair(probs, targets_onehot, "probabilities")?;
    let n = probs.batch();
    let mut total = 0.0;
    for (p, y) in probs.rows().zip(targets_onehot.rows()) {
        total -= p
            .iter()
            .zip(y)
            .map(|(&pi, &yi)| yi * pi.max(epsilon).ln())
            .sum::<f64>();
    }
    Ok(total / n as f64)
}
