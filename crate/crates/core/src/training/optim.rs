use serde::{Deserialize, Serialize};

/// Adam with per-slot moment buffers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters are tracked as `origin + delta`: updates accumulate in
/// `delta` and the parameter is rewritten as `origin + delta`, so the
/// difference to the starting point is always exactly representable as a
/// single addition.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    origin: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// One slot per entry of `origins`, holding the starting values of the
    /// coordinates that slot updates.
    pub fn new(config: AdamConfig, origins: Vec<Vec<f64>>) -> Self {
        let zeros = |o: &Vec<f64>| vec![0.0; o.len()];
        Self {
            config,
            step: 0,
            delta: origins.iter().map(zeros).collect(),
            m: origins.iter().map(zeros).collect(),
            v: origins.iter().map(zeros).collect(),
            origin: origins,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the bias-correction clock; call once per update.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates `values[coords[j]]` using `grad[coords[j]]` and moment slot
    /// entry `j`; with `coords = None` every coordinate is visited in order.
    /// Both paths run the same scalar update.
    pub fn update(
        &mut self,
        slot: usize,
        values: &mut [f64],
        grad: &[f64],
        coords: Option<&[usize]>,
        lr: f64,
    ) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        let (origin, delta) = (&self.origin[slot], &mut self.delta[slot]);
        let n = values.len();
        let mut apply = |j: usize, i: usize| {
            let g = grad[i];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            delta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            values[i] = origin[j] + delta[j];
        };
        match coords {
            Some(cs) => cs.iter().enumerate().for_each(|(j, &i)| apply(j, i)),
            None => (0..n).for_each(|i| apply(i, i)),
        }
    }
}

/// Linear warm-up to `lr` over `warmup` steps, constant afterwards.
/// Steps are 1-based.
pub fn lr_at(lr: f64, warmup: usize, step: usize) -> f64 {
    if warmup > 0 && step <= warmup {
        lr * step as f64 / warmup as f64
    } else {
        lr
    }
}
