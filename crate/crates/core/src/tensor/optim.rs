use crate::error::{Error, Result};

use super::param::ParamStore;
use super::Element;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamW {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        AdamW {
            beta1: betas.0,
            beta2: betas.1,
            weight_decay,
            ..Default::default()
        }
    }

    /// Update every parameter that received a gradient.
    ///
    /// Parameters without a gradient (not reached by any backward pass since
    /// the last `zero_grad`) are left untouched, moments and step included.
    pub fn step<T: Element>(&self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if params.iter().all(|(_, p)| p.grad.is_none()) {
            return Err(Error::State("optimizer step before any backward pass".into()));
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for p in params.iter_mut() {
            let Some(grad) = p.grad.as_ref() else {
                continue;
            };
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let decay = T::of(1.0 - lr * self.weight_decay);
            let (tb1, tb2) = (T::of(b1), T::of(b2));
            let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
            let (tc1, tc2) = (T::of(c1), T::of(c2));
            let (tlr, teps) = (T::of(lr), T::of(self.eps));
            let w = p.value.data_mut();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for (j, &g) in grad.data().iter().enumerate() {
                w[j] = w[j] * decay;
                m[j] = tb1 * m[j] + one_b1 * g;
                v[j] = tb2 * v[j] + one_b2 * g * g;
                let mhat = m[j] / tc1;
                let vhat = v[j] / tc2;
                w[j] = w[j] - tlr * mhat / (vhat.sqrt() + teps);
            }
        }
        Ok(())
    }
}

/// Cosine-decayed learning rate: `peak` at step 0, reaching 0 at `total`.
pub fn cosine_lr(step: usize, total: usize, peak: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}
