//! The learning problem seen by the simulator.

use alloc::vec::Vec;

/// Model quality at one point of training.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Evaluation {
    pub loss: f64,
    /// Test accuracy, for classifiers.
    pub accuracy: Option<f64>,
    /// `‖∇F(w)‖²` of the global objective, when it is cheap to compute.
    pub grad_norm_sq: Option<f64>,
}

/// A federated learning problem: a flat parameter vector, one local dataset
/// per device and a global evaluation.
pub trait Task: Sync {
    /// Number of model parameters `N`.
    fn dim(&self) -> usize;

    fn num_devices(&self) -> usize;

    /// Samples held by device `k`.
    fn shard_len(&self, k: usize) -> usize;

    /// Initial parameters drawn from `seed`.
    fn init(&self, seed: u64) -> Vec<f64>;

    /// Writes the average loss gradient over `batch` (indices into device
    /// `k`'s shard) to `grad` and returns the average loss.
    fn batch_gradient(&self, w: &[f64], k: usize, batch: &[usize], grad: &mut [f64]) -> f64;

    fn evaluate(&self, w: &[f64]) -> Evaluation;

    /// Parameters that are sent exactly and never compressed.
    fn bypass(&self) -> &[usize] {
        &[]
    }
}
