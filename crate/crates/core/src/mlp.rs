//! One-hidden-layer ReLU network with a softmax output and cross-entropy
//! loss, on a flat parameter vector.
//!
//! Parameter layout: `W1` (`hidden × input`, row-major), `b1`, `W2`
//! (`output × hidden`), `b2`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::LabeledDataset;
use crate::math::dot;
use crate::rng::Stream;
use crate::task::{Evaluation, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Activations kept from the forward pass of one sample.
#[derive(Debug, Clone)]
pub struct Activations {
    pub x: Vec<f64>,
    pub pre_hidden: Vec<f64>,
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Mlp {
    /// The 784-20-10 MNIST classifier.
    pub const MNIST: Mlp = Mlp { input: 784, hidden: 20, output: 10 };

    pub fn dim(&self) -> usize {
        self.hidden * self.input + self.hidden + self.output * self.hidden + self.output
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.output * self.hidden;
        (b1, w2, b2)
    }

    /// Weights and biases uniform on `±1/√fan_in`.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut s = Stream::new(seed);
        let (_, w2, _) = self.offsets();
        let r1 = 1.0 / libm::sqrt(self.input as f64);
        let r2 = 1.0 / libm::sqrt(self.hidden as f64);
        (0..self.dim())
            .map(|i| {
                let r = if i < w2 { r1 } else { r2 };
                r * (2.0 * s.uniform() - 1.0)
            })
            .collect()
    }

    pub fn forward(&self, w: &[f64], x: &[f32]) -> Activations {
        debug_assert_eq!(w.len(), self.dim());
        let (b1, w2, b2) = self.offsets();
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let pre_hidden: Vec<f64> =
            (0..self.hidden).map(|j| dot(&w[j * self.input..(j + 1) * self.input], &x) + w[b1 + j]).collect();
        let hidden: Vec<f64> = pre_hidden.iter().map(|&z| if z > 0.0 { z } else { 0.0 }).collect();
        let logits: Vec<f64> = (0..self.output)
            .map(|o| dot(&w[w2 + o * self.hidden..w2 + (o + 1) * self.hidden], &hidden) + w[b2 + o])
            .collect();
        let probs = softmax(&logits);
        Activations { x, pre_hidden, hidden, probs }
    }

    /// Adds the cross-entropy gradient of one sample to `grad` (unscaled)
    /// and returns its loss.
    pub fn accumulate_gradient(&self, w: &[f64], x: &[f32], label: usize, grad: &mut [f64]) -> f64 {
        let a = self.forward(w, x);
        let (b1, w2, b2) = self.offsets();
        let mut dz2 = a.probs.clone();
        dz2[label] -= 1.0;
        let mut dh = vec![0.0; self.hidden];
        for (o, &d) in dz2.iter().enumerate() {
            let row = w2 + o * self.hidden;
            for j in 0..self.hidden {
                grad[row + j] += d * a.hidden[j];
                dh[j] += d * w[row + j];
            }
            grad[b2 + o] += d;
        }
        for j in 0..self.hidden {
            // ReLU'(0) = 0.
            if a.pre_hidden[j] <= 0.0 {
                continue;
            }
            let d = dh[j];
            let row = &mut grad[j * self.input..(j + 1) * self.input];
            for (g, &xi) in row.iter_mut().zip(&a.x) {
                *g += d * xi;
            }
            grad[b1 + j] += d;
        }
        cross_entropy(&a.probs, label)
    }

    pub fn predict(&self, w: &[f64], x: &[f32]) -> usize {
        argmax(&self.forward(w, x).probs)
    }

    /// Average loss and accuracy over a dataset.
    pub fn evaluate(&self, w: &[f64], data: &LabeledDataset) -> (f64, f64) {
        if data.is_empty() {
            return (0.0, 0.0);
        }
        let mut loss = 0.0;
        let mut correct = 0usize;
        for i in 0..data.len() {
            let probs = self.forward(w, data.sample(i)).probs;
            loss += cross_entropy(&probs, data.label(i));
            if argmax(&probs) == data.label(i) {
                correct += 1;
            }
        }
        (loss / data.len() as f64, correct as f64 / data.len() as f64)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| libm::exp(z - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -libm::log(probs[label].max(f64::MIN_POSITIVE))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Federated classification with an [`Mlp`]: one shard of training indices
/// per device, accuracy on a held-out set.
#[derive(Debug, Clone)]
pub struct MlpTask {
    pub model: Mlp,
    pub train: Arc<LabeledDataset>,
    pub test: Arc<LabeledDataset>,
    pub shards: Vec<Vec<usize>>,
}

impl Task for MlpTask {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn num_devices(&self) -> usize {
        self.shards.len()
    }

    fn shard_len(&self, k: usize) -> usize {
        self.shards[k].len()
    }

    fn init(&self, seed: u64) -> Vec<f64> {
        self.model.init(seed)
    }

    fn batch_gradient(&self, w: &[f64], k: usize, batch: &[usize], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for &b in batch {
            let i = self.shards[k][b];
            loss += self.model.accumulate_gradient(w, self.train.sample(i), self.train.label(i), grad);
        }
        let inv = 1.0 / batch.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        loss * inv
    }

    fn evaluate(&self, w: &[f64]) -> Evaluation {
        let (loss, accuracy) = self.model.evaluate(w, &self.test);
        Evaluation { loss, accuracy: Some(accuracy), grad_norm_sq: None }
    }
}
