use crate::config::TrainConfig;

/// Linear warmup to `peak`, then cosine decay to `peak * floor_frac` at the
/// final step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
    pub floor_frac: f64,
}

impl Schedule {
    pub fn new(peak: f64, total: usize, warmup_frac: f64, floor_frac: f64) -> Self {
        let warmup = ((total as f64 * warmup_frac).round() as usize).min(total);
        Schedule {
            peak,
            warmup,
            total,
            floor_frac,
        }
    }

    /// Learning rate used by step `t` (0-based).
    pub fn lr(&self, t: usize) -> f64 {
        if t < self.warmup {
            return self.peak * (t + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((t - self.warmup) as f64 / span as f64).min(1.0);
        let floor = self.peak * self.floor_frac;
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(t: &TrainConfig, weight_decay: f64) -> Self {
        AdamW {
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            weight_decay,
        }
    }
}

/// First and second moments of one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    /// One AdamW update in place. Weight decay is decoupled and applied only
    /// when `decay` is set.
    pub fn step(&self, value: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, decay: bool) {
        if state.m.len() != value.len() {
            state.m = vec![0.0; value.len()];
            state.v = vec![0.0; value.len()];
        }
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        let wd = if decay { lr * self.weight_decay } else { 0.0 };
        for i in 0..value.len() {
            let g = grad[i];
            state.m[i] = self.beta1 * state.m[i] + (1.0 - self.beta1) * g;
            state.v[i] = self.beta2 * state.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = state.m[i] / bc1;
            let vhat = state.v[i] / bc2;
            value[i] -= wd * value[i] + lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
