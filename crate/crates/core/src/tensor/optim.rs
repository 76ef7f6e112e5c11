//! AdamW with decoupled weight decay.

use super::param::ParamSet;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First/second moment state per parameter, in registration order. The decay
/// term is decoupled from the adaptive step:
///
/// ```text
/// theta <- theta - lr * mhat / (sqrt(vhat) + eps) - lr * wd * theta
/// ```
///
/// with bias-corrected `mhat = m / (1 - beta1^t)`, `vhat = v / (1 - beta2^t)`.
/// Gradients are zeroed after every step.
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamSet) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamW {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, params: &ParamSet) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "optimizer was built for a different parameter set"
        );
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update(|j, theta, g| {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta - c.lr * mhat / (vhat.sqrt() + c.eps) - c.lr * c.weight_decay * theta
            });
            p.zero_grad();
        }
    }
}
