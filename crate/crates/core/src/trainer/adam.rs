//! Bias-corrected Adam over a fixed roster of parameter tensors.
//!
//! Every trainable tensor registers one slot holding its first/second moment
//! accumulators; a training step bumps the shared counter once and then
//! updates each slot. Updates are dense: untouched coordinates still decay
//! their moments, matching the reference recurrence.

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Moment accumulators for every registered tensor plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            cfg,
            step: 0,
            slots: sizes
                .iter()
                .map(|&n| Slot {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter; call once before updating the slots
    /// of one training step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// One Adam update for slot `slot`: `m = b1 m + (1-b1) g`,
    /// `v = b2 v + (1-b2) g^2`, `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64]) {
        let s = &mut self.slots[slot];
        assert_eq!(param.len(), s.m.len(), "slot {slot} size mismatch");
        assert_eq!(grad.len(), s.m.len(), "slot {slot} gradient size mismatch");
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..param.len() {
            let g = grad[i];
            s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
            s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
            let m_hat = s.m[i] / bc1;
            let v_hat = s.v[i] / bc2;
            param[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_scalar_reference_recurrence() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut adam = AdamState::new(cfg, &[1]);
        let mut param = [0.5f64];
        let grads = [0.3, -0.7, 0.1, 0.9, -0.2];

        // Independent scalar evaluation of the recurrence.
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut reference = 0.5f64;
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(t));
            let v_hat = v / (1.0 - cfg.beta2.powi(t));
            reference -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);

            adam.begin_step();
            adam.update(0, &mut param, &[g]);
        }
        assert_eq!(param[0], reference);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let cfg = AdamConfig::with_lr(1e-3);
        let mut adam = AdamState::new(cfg, &[1]);
        let mut param = [2.0f64];
        adam.begin_step();
        adam.update(0, &mut param, &[0.42]);
        let delta = (2.0 - param[0]).abs();
        assert!((delta - 1e-3).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn zero_gradient_never_moves_parameters() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut adam = AdamState::new(cfg, &[3]);
        let mut param = [1.0, -2.0, 0.25];
        let before = param;
        for _ in 0..50 {
            adam.begin_step();
            adam.update(0, &mut param, &[0.0, 0.0, 0.0]);
        }
        assert_eq!(param, before);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let cfg = AdamConfig::with_lr(0.05);
            let mut adam = AdamState::new(cfg, &[2]);
            let mut param = [0.1f64, -0.4];
            for t in 0..20 {
                adam.begin_step();
                let g = [(t as f64 * 0.37).sin(), (t as f64 * 0.11).cos()];
                adam.update(0, &mut param, &g);
            }
            param
        };
        assert_eq!(run(), run());
    }
}
