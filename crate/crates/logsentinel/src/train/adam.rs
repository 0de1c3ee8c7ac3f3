//! Adam with bias-corrected moment estimates. Moment buffers mirror the
//! parameter tensors and follow the same canonical order.

use crate::model::{s, ModelParams, Scalar};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<F> {
    config: AdamConfig,
    m: ModelParams<F>,
    v: ModelParams<F>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(template: &ModelParams<F>, config: AdamConfig) -> Self {
        Adam {
            config,
            m: template.zeros_like(),
            v: template.zeros_like(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. `grads` must have the same tensor layout as `params`.
    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>) {
        self.t += 1;
        let b1 = s::<F>(self.config.beta1);
        let b2 = s::<F>(self.config.beta2);
        let one = F::one();
        let lr = s::<F>(self.config.learning_rate);
        let eps = s::<F>(self.config.eps);
        let corr1 = s::<F>(1.0 - self.config.beta1.powi(self.t as i32));
        let corr2 = s::<F>(1.0 - self.config.beta2.powi(self.t as i32));

        let mut p_tensors = params.named_tensors_mut();
        let g_tensors = grads.named_tensors();
        let mut m_tensors = self.m.named_tensors_mut();
        let mut v_tensors = self.v.named_tensors_mut();
        debug_assert_eq!(p_tensors.len(), g_tensors.len());
        for i in 0..p_tensors.len() {
            debug_assert_eq!(p_tensors[i].0, g_tensors[i].0);
            let p = p_tensors[i].1.as_slice_mut();
            let g = g_tensors[i].1.as_slice();
            let m = m_tensors[i].1.as_slice_mut();
            let v = v_tensors[i].1.as_slice_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
