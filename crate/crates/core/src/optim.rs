//! Optimizers, gradient clipping, and epoch schedules.

use crate::error::{Error, Result};

/// A named (parameter, gradient) pair for one optimizer step.
pub struct Slot<'a> {
    pub name: String,
    pub param: &'a mut [f64],
    pub grad: &'a mut [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimState {
    pub fn new(kind: OptimKind, lr: f64, weight_decay: f64) -> Self {
        let st = OptimState {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            moments: Vec::new(),
        };
        assert!(st.beta1 > 0.0 && st.beta1 < 1.0);
        assert!(st.beta2 > 0.0 && st.beta2 < 1.0);
        assert!(st.eps > 0.0);
        st
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimKind::Adam, lr, 0.0)
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimKind::AdamW, lr, weight_decay)
    }

    /// One optimizer step over all slots. Refuses the whole step if any
    /// gradient is non-finite; the error names the offending parameter.
    pub fn step(&mut self, slots: &mut [Slot]) -> Result<()> {
        for s in slots.iter() {
            if s.grad.len() != s.param.len() {
                return Err(Error::dim(
                    format!("optimizer slot {}", s.name),
                    s.param.len().to_string(),
                    s.grad.len().to_string(),
                ));
            }
            if s.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::numerical(
                    format!("optimizer slot {}", s.name),
                    "non-finite gradient; step refused",
                ));
            }
        }
        if self.moments.is_empty() {
            self.moments = slots
                .iter()
                .map(|s| (vec![0.0; s.param.len()], vec![0.0; s.param.len()]))
                .collect();
        } else if self.moments.len() != slots.len() {
            return Err(Error::dim(
                "optimizer moment buffers",
                self.moments.len().to_string(),
                slots.len().to_string(),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (s, (m, v)) in slots.iter_mut().zip(&mut self.moments) {
            // Decoupled weight decay applies before the moment update.
            if self.kind == OptimKind::AdamW && self.weight_decay != 0.0 {
                let f = self.lr * self.weight_decay;
                for p in s.param.iter_mut() {
                    *p -= f * *p;
                }
            }
            for i in 0..s.param.len() {
                let g = s.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                s.param[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scale gradients in place if their global L2 norm exceeds `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let sq: f64 = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Clip across the gradient sides of a slot list.
pub fn clip_slots(slots: &mut [Slot], max_norm: f64) -> f64 {
    let mut views: Vec<&mut [f64]> = slots.iter_mut().map(|s| &mut *s.grad).collect();
    clip_grad_norm(&mut views, max_norm)
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Constant {
        value: f64,
    },
    /// Cosine from `base` at epoch 0 down (or up) to `final_value` at the
    /// horizon.
    Cosine {
        base: f64,
        final_value: f64,
        horizon: usize,
    },
    /// Linear from `base` to `final_value` over the first `ramp_end` epochs,
    /// then held at `final_value`.
    LinearRamp {
        base: f64,
        final_value: f64,
        horizon: usize,
        ramp_end: usize,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Constant { .. } => Ok(()),
            Schedule::Cosine { horizon, .. } => {
                if horizon < 1 {
                    Err(Error::Validation("cosine schedule horizon must be >= 1".into()))
                } else {
                    Ok(())
                }
            }
            Schedule::LinearRamp { horizon, ramp_end, .. } => {
                if horizon < 1 {
                    Err(Error::Validation("linear_ramp horizon must be >= 1".into()))
                } else if ramp_end == 0 || ramp_end > horizon {
                    Err(Error::Validation(
                        "linear_ramp requires 0 < ramp_end <= horizon".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Value of a schedule at an epoch. Epochs past the horizon clamp to the
/// final value.
pub fn schedule_value(s: &Schedule, epoch: usize) -> f64 {
    match *s {
        Schedule::Constant { value } => value,
        Schedule::Cosine {
            base,
            final_value,
            horizon,
        } => {
            let e = epoch.min(horizon) as f64;
            let h = horizon as f64;
            final_value + 0.5 * (base - final_value) * (1.0 + (std::f64::consts::PI * e / h).cos())
        }
        Schedule::LinearRamp {
            base,
            final_value,
            ramp_end,
            ..
        } => {
            let frac = (epoch as f64 / ramp_end as f64).min(1.0);
            base + frac * (final_value - base)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_slot<'a>(name: &str, p: &'a mut [f64], g: &'a mut [f64]) -> Vec<Slot<'a>> {
        vec![Slot {
            name: name.into(),
            param: p,
            grad: g,
        }]
    }

    #[test]
    fn adam_first_step_bias_corrected() {
        // Hand-expanded recurrences at t=1: mhat = g, vhat = g^2, so the
        // update is -lr * g/(|g| + eps) = -lr for g = 1.
        let mut st = OptimState::adam(1e-3);
        let mut p = [0.0];
        let mut g = [1.0];
        st.step(&mut one_slot("p", &mut p, &mut g)).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-9, "got {}", p[0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_param() {
        let mut st = OptimState::adam(1e-2);
        let mut p = [1.5];
        let mut g = [0.0];
        st.step(&mut one_slot("p", &mut p, &mut g)).unwrap();
        assert_eq!(p[0], 1.5);
    }

    #[test]
    fn adamw_zero_gradient_decays_param() {
        let mut st = OptimState::adamw(2e-4, 1e-5);
        let mut p = [1.0];
        let mut g = [0.0];
        st.step(&mut one_slot("p", &mut p, &mut g)).unwrap();
        assert!((p[0] - 0.999999998).abs() < 1e-12, "got {}", p[0]);
    }

    #[test]
    fn non_finite_gradient_refused_with_name() {
        let mut st = OptimState::adam(1e-3);
        let mut p = [1.0];
        let mut g = [f64::NAN];
        let err = st
            .step(&mut one_slot("layer7.bias", &mut p, &mut g))
            .unwrap_err();
        assert!(err.to_string().contains("layer7.bias"));
        assert_eq!(p[0], 1.0, "param must be untouched");
    }

    #[test]
    fn step_is_deterministic() {
        let run = || {
            let mut st = OptimState::adamw(1e-3, 1e-4);
            let mut p = [0.3, -0.7, 2.0];
            for k in 0..50 {
                let mut g = [0.1 * k as f64, -0.2, 0.05];
                st.step(&mut one_slot("p", &mut p, &mut g)).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_scales_above_max() {
        let mut g = [3.0, 4.0];
        let norm = clip_grad_norm(&mut [&mut g], 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((g[0] - 0.6).abs() < 1e-12);
        assert!((g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_and_zero() {
        let mut g = [0.3, 0.4];
        let norm = clip_grad_norm(&mut [&mut g], 1.0);
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(g, [0.3, 0.4]);

        let mut z = [0.0, 0.0];
        let norm = clip_grad_norm(&mut [&mut z], 1.0);
        assert_eq!(norm, 0.0);
        assert_eq!(z, [0.0, 0.0]);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = Schedule::Cosine {
            base: 1e-3,
            final_value: 0.0,
            horizon: 300,
        };
        assert!((schedule_value(&s, 0) - 1e-3).abs() < 1e-15);
        assert!(schedule_value(&s, 300).abs() < 1e-15);
        assert!((schedule_value(&s, 150) - 5e-4).abs() < 1e-12);
        // Past the horizon: clamp.
        assert!(schedule_value(&s, 500).abs() < 1e-15);
    }

    #[test]
    fn cosine_monotone_when_final_below_base() {
        let s = Schedule::Cosine {
            base: 1.0,
            final_value: 0.1,
            horizon: 40,
        };
        let mut prev = f64::INFINITY;
        for e in 0..=40 {
            let v = schedule_value(&s, e);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn linear_ramp_midpoint_and_clamp() {
        let s = Schedule::LinearRamp {
            base: 0.0,
            final_value: 1.0,
            horizon: 300,
            ramp_end: 120,
        };
        assert!((schedule_value(&s, 60) - 0.5).abs() < 1e-15);
        assert!((schedule_value(&s, 120) - 1.0).abs() < 1e-15);
        assert!((schedule_value(&s, 200) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ramp_end_validation() {
        let s = Schedule::LinearRamp {
            base: 0.0,
            final_value: 1.0,
            horizon: 100,
            ramp_end: 120,
        };
        assert!(s.validate().is_err());
    }
}
