//! Adam and the ramp / sustain / exponential-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{Gradients, Parameters};

/// Whether schedule steps count epochs or optimizer batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepUnit {
    #[default]
    Epoch,
    Batch,
}

/// Linear ramp from `start_rate` to `max_rate` over `ramp_steps`, hold at
/// `max_rate` for `sustain_steps`, then decay exponentially towards
/// `min_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub start_rate: f64,
    pub max_rate: f64,
    pub min_rate: f64,
    pub ramp_steps: u32,
    pub sustain_steps: u32,
    pub decay: f64,
    pub step_unit: StepUnit,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            start_rate: 1e-5,
            max_rate: 4e-4,
            min_rate: 1e-5,
            ramp_steps: 4,
            sustain_steps: 4,
            decay: 0.8,
            step_unit: StepUnit::Epoch,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.start_rate > 0.0
            && self.start_rate <= self.max_rate
            && self.min_rate >= 0.0
            && self.min_rate <= self.max_rate
            && self.max_rate.is_finite()
            && self.decay > 0.0
            && self.decay < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "invalid learning-rate schedule {self:?}: need 0 < start <= max, 0 <= min <= max, 0 < decay < 1"
            )))
        }
    }

    /// Learning rate at `step` (an epoch or batch index depending on
    /// `step_unit`).
    pub fn lr_at(&self, step: i64) -> Result<f64> {
        if step < 0 {
            return Err(Error::validation(format!("negative schedule step {step}")));
        }
        self.validate()?;
        let step = step as u64;
        let ramp = u64::from(self.ramp_steps);
        let sustain = u64::from(self.sustain_steps);
        Ok(if step < ramp {
            self.start_rate + (self.max_rate - self.start_rate) * (step as f64 / ramp as f64)
        } else if step < ramp + sustain {
            self.max_rate
        } else {
            let offset = step - ramp - sustain;
            if offset == 0 {
                self.max_rate
            } else {
                let exponent = i32::try_from(offset).unwrap_or(i32::MAX);
                (self.max_rate - self.min_rate) * self.decay.powi(exponent) + self.min_rate
            }
        })
    }
}

/// Free-function form of [`LrSchedule::lr_at`].
pub fn lr_at(schedule: &LrSchedule, step: i64) -> Result<f64> {
    schedule.lr_at(step)
}

/// Adam moments for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut Parameters, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::validation(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        params.check_structure(grads, "adam gradients")?;
        params.check_structure(&self.m, "adam state")?;
        self.t += 1;
        let exponent = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - self.beta1.powi(exponent);
        let c2 = 1.0 - self.beta2.powi(exponent);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let tensors = params
            .entries_mut()
            .iter_mut()
            .zip(grads.entries())
            .zip(self.m.entries_mut().iter_mut().zip(self.v.entries_mut()));
        for ((p, g), (m, v)) in tensors {
            let values = p.value.data_mut().iter_mut().zip(g.value.data());
            let moments = m.value.data_mut().iter_mut().zip(v.value.data_mut());
            for ((x, &gv), (mv, vv)) in values.zip(moments) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut Parameters, grads: &Gradients, lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::ParamTensor;
    use crate::tensor::Tensor;

    fn scalar(name: &str, v: f64) -> Parameters {
        Parameters::from_entries(vec![ParamTensor {
            name: name.into(),
            value: Tensor::new(vec![1], vec![v]).unwrap(),
        }])
    }

    #[test]
    fn schedule_table() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0).unwrap(), 1e-5);
        for step in 4..=8 {
            assert_eq!(s.lr_at(step).unwrap(), 4e-4, "step {step}");
        }
        let nine = s.lr_at(9).unwrap();
        assert_eq!(nine, (4e-4 - 1e-5) * 0.8 + 1e-5);
        assert!((nine - 3.22e-4).abs() < 1e-18);
        let two = s.lr_at(2).unwrap();
        assert!((two - 2.05e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(100_000).unwrap(), 1e-5);
        assert!(s.lr_at(-1).is_err());
    }

    #[test]
    fn schedule_without_ramp_or_sustain() {
        let s = LrSchedule {
            ramp_steps: 0,
            sustain_steps: 0,
            ..LrSchedule::default()
        };
        assert_eq!(s.lr_at(0).unwrap(), 4e-4);
        assert!(s.lr_at(1).unwrap() < 4e-4);
    }

    #[test]
    fn invalid_schedules_rejected() {
        for bad in [
            LrSchedule { start_rate: 0.0, ..LrSchedule::default() },
            LrSchedule { start_rate: 1e-3, ..LrSchedule::default() },
            LrSchedule { decay: 1.0, ..LrSchedule::default() },
            LrSchedule { min_rate: 1.0, ..LrSchedule::default() },
        ] {
            assert!(bad.lr_at(0).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = scalar("w", 1.5);
        let g = scalar("w", 0.0);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &g, 1e-3).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = scalar("w", 0.0);
        let g = scalar("w", 0.5);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &g, 1e-3).unwrap();
        let delta = p.get("w").unwrap().data()[0];
        let expected = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((delta - expected).abs() < 1e-18);
        assert!((delta + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn identical_calls_are_bit_identical() {
        let g = scalar("w", -0.37);
        let run = || {
            let mut p = scalar("w", 0.2);
            let mut s = AdamState::new(&p);
            for _ in 0..5 {
                s.step(&mut p, &g, 3e-3).unwrap();
            }
            (p, s)
        };
        let (p1, s1) = run();
        let (p2, s2) = run();
        assert!(p1.bit_eq(&p2));
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar("w", 0.0);
        let g = scalar("other", 0.0);
        let mut s = AdamState::new(&p);
        assert!(matches!(s.step(&mut p, &g, 1e-3), Err(Error::Dimension { .. })));
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = scalar("x", 0.0);
        let mut s = AdamState::new(&p);
        for _ in 0..200 {
            let x = p.get("x").unwrap().data()[0];
            let g = scalar("x", 2.0 * (x - 3.0));
            s.step(&mut p, &g, 0.1).unwrap();
        }
        let x = p.get("x").unwrap().data()[0];
        assert!((x - 3.0).abs() < 1e-2, "x = {x}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn schedule_bounds_and_monotone_decay(
                start in 1e-6f64..1e-3,
                extra in 0.0f64..1e-2,
                min_frac in 0.0f64..1.0,
                ramp in 0u32..10,
                sustain in 0u32..10,
                decay in 0.05f64..0.99,
            ) {
                let max = start + extra;
                let s = LrSchedule {
                    start_rate: start,
                    max_rate: max,
                    min_rate: max * min_frac,
                    ramp_steps: ramp,
                    sustain_steps: sustain,
                    decay,
                    step_unit: StepUnit::Epoch,
                };
                let lo = start.min(s.min_rate);
                let mut prev = f64::INFINITY;
                for step in 0..80i64 {
                    let lr = s.lr_at(step).unwrap();
                    prop_assert!(lr >= lo * (1.0 - 1e-12) && lr <= max * (1.0 + 1e-12));
                    if step >= i64::from(ramp + sustain) {
                        prop_assert!(lr <= prev);
                        prev = lr;
                    }
                }
                prop_assert_eq!(s.lr_at(i64::from(ramp)).unwrap(), max);
                prop_assert_eq!(s.lr_at(i64::from(ramp + sustain)).unwrap(), max);
            }

            #[test]
            fn first_step_bounded_by_lr(g in prop::collection::vec(-10.0f64..10.0, 1..20), lr in 1e-5f64..1.0) {
                let params = Parameters::from_entries(vec![ParamTensor {
                    name: "w".into(),
                    value: Tensor::zeros(&[g.len()]),
                }]);
                let grads = Parameters::from_entries(vec![ParamTensor {
                    name: "w".into(),
                    value: Tensor::new(vec![g.len()], g).unwrap(),
                }]);
                let mut p = params.clone();
                AdamState::new(&params).step(&mut p, &grads, lr).unwrap();
                for d in p.get("w").unwrap().data() {
                    prop_assert!(d.abs() <= lr * (1.0 + 1e-12));
                }
            }
        }
    }
}
