use std::sync::{Arc, OnceLock};

use super::TrainConfig;
use crate::registry::{Named, Registry};

/// Per-parameter optimizer memory.
#[derive(Debug, Clone, Default)]
pub struct OptimState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }
}

pub trait UpdateRule: Named {
    fn step(&self, state: &mut OptimState, params: &mut [f64], grads: &[f64], cfg: &TrainConfig);
}

pub fn optimizers() -> &'static Registry<dyn UpdateRule> {
    static REG: OnceLock<Registry<dyn UpdateRule>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut reg: Registry<dyn UpdateRule> = Registry::new("optimizer");
        reg.register(Arc::new(Adam))
            .register(Arc::new(GradientDescent));
        reg
    })
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, Copy, Default)]
pub struct Adam;

impl Named for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }
    fn summary(&self) -> &'static str {
        "Adam (beta1, beta2, epsilon from config)"
    }
}

impl UpdateRule for Adam {
    fn step(&self, state: &mut OptimState, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
            let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
            state.first_moment[i] = m;
            state.second_moment[i] = v;
            params[i] -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradientDescent;

impl Named for GradientDescent {
    fn name(&self) -> &'static str {
        "gd"
    }
    fn summary(&self) -> &'static str {
        "plain full-batch gradient descent"
    }
}

impl UpdateRule for GradientDescent {
    fn step(&self, state: &mut OptimState, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        state.step += 1;
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= cfg.lr * g;
        }
    }
}
