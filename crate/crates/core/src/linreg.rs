//! Synthetic federated least squares with Gaussian features.
//!
//! Device `k` holds `(X_k, y_k)` with `y_k = X_k w*_k + noise`, where the
//! device optima `w*_k` scatter around a common `w*`. Feature `j` has
//! variance `(j + 1)^-decay`. The global objective is
//! `F(w) = (1/K) Σ_k (1/2n_k) ‖X_k w - y_k‖² + (λ/2) ‖w‖²`, with exact full
//! gradients available for convergence checks.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{axpy, dot};
use crate::rng::{derive_seed, tag, Stream};
use crate::task::{Evaluation, Task};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinRegSpec {
    pub dim: usize,
    pub devices: usize,
    pub samples_per_device: usize,
    pub noise: f64,
    /// Spread of the per-device optima around the shared one.
    pub heterogeneity: f64,
    pub ridge: f64,
    /// Power-law decay of the feature variances; 0 gives isotropic features.
    pub spectrum_decay: f64,
}

impl Default for LinRegSpec {
    fn default() -> Self {
        Self {
            dim: 200,
            devices: 20,
            samples_per_device: 400,
            noise: 0.1,
            heterogeneity: 0.5,
            ridge: 0.01,
            spectrum_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinRegTask {
    spec: LinRegSpec,
    /// Row-major `n_k × dim` per device.
    features: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl LinRegTask {
    pub fn generate(spec: LinRegSpec, seed: u64) -> Self {
        let d = spec.dim;
        let mut s = Stream::new(derive_seed(seed, tag::SYNTHETIC_DATA, 0, 0, 0));
        let w_star: Vec<f64> = (0..d).map(|_| s.gaussian()).collect();
        let scale: Vec<f64> = (0..d).map(|j| libm::pow(j as f64 + 1.0, -0.5 * spec.spectrum_decay)).collect();
        let mut features = Vec::with_capacity(spec.devices);
        let mut targets = Vec::with_capacity(spec.devices);
        for k in 0..spec.devices {
            let mut s = Stream::new(derive_seed(seed, tag::SYNTHETIC_DATA, 1, k as u64, 0));
            let w_k: Vec<f64> = w_star.iter().map(|w| w + spec.heterogeneity * s.gaussian()).collect();
            let x: Vec<f64> = (0..spec.samples_per_device * d).map(|i| scale[i % d] * s.gaussian()).collect();
            let y: Vec<f64> = x.chunks_exact(d).map(|row| dot(row, &w_k) + spec.noise * s.gaussian()).collect();
            features.push(x);
            targets.push(y);
        }
        Self { spec, features, targets }
    }

    pub fn spec(&self) -> &LinRegSpec {
        &self.spec
    }

    /// `∇F(w)` of the global objective and `F(w)`.
    pub fn full_gradient(&self, w: &[f64]) -> (Vec<f64>, f64) {
        let mut total = vec![0.0; self.spec.dim];
        let mut grad = vec![0.0; self.spec.dim];
        let mut loss = 0.0;
        let all: Vec<usize> = (0..self.spec.samples_per_device).collect();
        for k in 0..self.spec.devices {
            loss += self.batch_gradient(w, k, &all, &mut grad);
            axpy(1.0, &grad, &mut total);
        }
        let inv = 1.0 / self.spec.devices as f64;
        total.iter_mut().for_each(|g| *g *= inv);
        (total, loss * inv)
    }
}

impl Task for LinRegTask {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn num_devices(&self) -> usize {
        self.spec.devices
    }

    fn shard_len(&self, _k: usize) -> usize {
        self.spec.samples_per_device
    }

    fn init(&self, seed: u64) -> Vec<f64> {
        let mut s = Stream::new(seed);
        (0..self.spec.dim).map(|_| s.gaussian()).collect()
    }

    fn batch_gradient(&self, w: &[f64], k: usize, batch: &[usize], grad: &mut [f64]) -> f64 {
        let d = self.spec.dim;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for &i in batch {
            let row = &self.features[k][i * d..(i + 1) * d];
            let r = dot(row, w) - self.targets[k][i];
            loss += 0.5 * r * r;
            axpy(r, row, grad);
        }
        let inv = 1.0 / batch.len() as f64;
        for (g, wi) in grad.iter_mut().zip(w) {
            *g = *g * inv + self.spec.ridge * wi;
        }
        loss * inv + 0.5 * self.spec.ridge * dot(w, w)
    }

    fn evaluate(&self, w: &[f64]) -> Evaluation {
        let (g, loss) = self.full_gradient(w);
        Evaluation { loss, accuracy: None, grad_norm_sq: Some(dot(&g, &g)) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_finite_difference() {
        let spec = LinRegSpec { dim: 6, devices: 3, samples_per_device: 10, ..Default::default() };
        let task = LinRegTask::generate(spec, 4);
        let w = task.init(1);
        let (g, _) = task.full_gradient(&w);
        let h = 1e-6;
        for i in 0..spec.dim {
            let mut a = w.clone();
            let mut b = w.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (task.evaluate(&a).loss - task.evaluate(&b).loss) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()));
        }
    }
}
