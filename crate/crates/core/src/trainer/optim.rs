use crate::numerics::Real;
use crate::params::ParamStore;

use super::config::OptimizerConfig;

/// Adam with bias correction and an optional linear warmup.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    config: OptimizerConfig,
    step: usize,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: OptimizerConfig, store: &ParamStore<F>) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| vec![F::zero(); store.get(id).len()])
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used by the next update.
    pub fn current_lr(&self) -> f64 {
        let w = self.config.warmup_steps;
        if w > 0 && self.step < w {
            self.config.lr * (self.step + 1) as f64 / w as f64
        } else {
            self.config.lr
        }
    }

    /// Applies the accumulated gradients of `store` and clears them.
    pub fn update(&mut self, store: &mut ParamStore<F>) {
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (one, eps) = (F::one(), F::lit(c.eps));
        let bc1 = F::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = F::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = F::lit(lr);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = store.grad(id).to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = store.get_mut(id).data_mut();
            for k in 0..data.len() {
                let g = grad[k];
                m[k] = b1 * m[k] + (one - b1) * g;
                v[k] = b2 * v[k] + (one - b2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                data[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        store.zero_grads();
    }
}
