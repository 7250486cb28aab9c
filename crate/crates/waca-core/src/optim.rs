//! AdamW with decoupled weight decay, plus the cosine learning-rate
//! schedule.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::ParamSet;

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW optimizer state. The step count is global (one increment per
/// `step` call), and moment buffers are allocated lazily per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update: theta <- theta - lr*wd*theta - lr * m_hat / (sqrt(v_hat) + eps).
    /// The decay term is decoupled from the adaptive step. Gradients are
    /// matched to parameters by name; missing names are treated as zero
    /// gradient (decay still applies).
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (name, theta) in params.iter_mut() {
            let n = theta.numel();
            let mom = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            debug_assert_eq!(mom.m.len(), n, "parameter {name} changed size");
            let zero = [];
            let g: &[f64] = match grads.get(name) {
                Some(g) => {
                    debug_assert_eq!(g.numel(), n, "gradient {name} shape mismatch");
                    g.data()
                }
                None => &zero,
            };
            for (k, th) in theta.data_mut().iter_mut().enumerate() {
                let gk = g.get(k).copied().unwrap_or(0.0);
                mom.m[k] = self.beta1 * mom.m[k] + (1.0 - self.beta1) * gk;
                mom.v[k] = self.beta2 * mom.v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = mom.m[k] / bc1;
                let v_hat = mom.v[k] / bc2;
                *th -= lr * self.weight_decay * *th;
                *th -= lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
    }
}

/// Cosine annealing: lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi step/total)).
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    assert!(step <= total_steps, "step {step} beyond total {total_steps}");
    if total_steps == 0 {
        return lr_max;
    }
    let frac = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + libm::cos(core::f64::consts::PI * frac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn scalar_set(name: &str, v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert(name, Tensor::scalar(v));
        ps
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut params = scalar_set("w", 1.5);
        let grads = scalar_set("w", 0.0);
        let mut opt = AdamW::new(0.0);
        for _ in 0..3 {
            opt.step(&mut params, &grads, 0.1);
        }
        assert_eq!(params.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn single_step_scalar_hand_oracle() {
        // theta=1, g=1, lr=0.1, wd=0: m_hat = v_hat = 1 after bias
        // correction, so theta' = 1 - 0.1/(1 + 1e-8) ~ 0.9.
        let mut params = scalar_set("w", 1.0);
        let grads = scalar_set("w", 1.0);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut params, &grads, 0.1);
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((params.get("w").unwrap().item() - expected).abs() < 1e-15);
        assert!((params.get("w").unwrap().item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_with_zero_grad_is_pure_shrink() {
        let mut params = scalar_set("w", 2.0);
        let grads = scalar_set("w", 0.0);
        let mut opt = AdamW::new(0.01);
        opt.step(&mut params, &grads, 0.5);
        let expected = 2.0 * (1.0 - 0.5 * 0.01);
        assert!((params.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_adaptive_step() {
        // With decay, the update must be shrink-then-step on the original
        // moments, not a decay folded into the gradient.
        let mut params = scalar_set("w", 1.0);
        let grads = scalar_set("w", 1.0);
        let mut opt = AdamW::new(0.1);
        opt.step(&mut params, &grads, 0.1);
        let expected = 1.0 - 0.1 * 0.1 * 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((params.get("w").unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn multi_step_matches_reference_recurrence() {
        let mut params = scalar_set("w", 0.7);
        let mut opt = AdamW::new(0.001);
        let gs = [0.3, -0.2, 0.05, 0.4];
        let lr = 0.01;
        // Plain recurrence as the oracle.
        let (b1, b2, eps, wd) = (0.9, 0.999, 1e-8, 0.001);
        let mut theta = 0.7;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in gs.iter().enumerate() {
            let grads = scalar_set("w", *g);
            opt.step(&mut params, &grads, lr);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            theta -= lr * wd * theta;
            theta -= lr * mh / (vh.sqrt() + eps);
            assert!((params.get("w").unwrap().item() - theta).abs() < 1e-15);
        }
        assert_eq!(opt.step_count(), 4);
    }

    #[test]
    fn moments_are_per_parameter() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::scalar(1.0));
        params.insert("b", Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let mut grads = ParamSet::new();
        grads.insert("a", Tensor::scalar(1.0));
        grads.insert("b", Tensor::from_vec(&[2], vec![0.0, -1.0]).unwrap());
        let mut opt = AdamW::new(0.0);
        opt.step(&mut params, &grads, 0.1);
        let a = params.get("a").unwrap().item();
        let b = params.get("b").unwrap().data().to_vec();
        assert!(a < 1.0);
        assert_eq!(b[0], 1.0);
        assert!(b[1] > 1.0); // negative gradient pushes up
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-20);
        let mid = cosine_lr(50, 100, 1e-3, 1e-5);
        assert!((mid - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        // Monotone decreasing.
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = cosine_lr(s, 100, 1e-3, 1e-5);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }
}
