use super::{ModelWeights, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one set of weights; zero until the first step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(weights: &ModelWeights<T>, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<T>> = weights.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update.
    pub fn step(&mut self, weights: &mut ModelWeights<T>, grads: &ModelWeights<T>) {
        self.t += 1;
        let c = self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = T::of(c.lr / bc1);
        let (inv_bc2, eps) = (T::of(1.0 / bc2), T::of(c.eps));
        for (((w, g), m), v) in weights.tensors.iter_mut().zip(&grads.tensors).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..w.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                w.data[i] -= step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}
