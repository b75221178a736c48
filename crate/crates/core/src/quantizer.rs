//! Lloyd-Max scalar quantizers for the standard Gaussian.
//!
//! The transformed value vector is close to i.i.d. N(0, 1), so one codebook
//! per level count `Q` is trained once against that density and shared by
//! every device and the server.

use alloc::vec::Vec;

use crate::math::{normal_interval_mass, normal_pdf, normal_quantile};

/// Largest level count trained by default.
pub const DEFAULT_Q_MAX: usize = 16;

/// Stop once no codeword moves by more than this.
pub const LLOYD_TOLERANCE: f64 = 1e-12;
pub const LLOYD_MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantizerError {
    #[error("quantization level {0} outside 2..={1}")]
    InvalidLevel(usize, usize),
    #[error("Lloyd iteration for Q={q} did not converge in {iterations} iterations (last change {last_change:e})")]
    IterationLimit { q: usize, iterations: usize, last_change: f64 },
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
}

/// A trained Q-level quantizer.
///
/// Cells are open-left, closed-right: `x` maps to cell `i` when
/// `thresholds[i] < x <= thresholds[i + 1]`, so a value sitting exactly on a
/// threshold goes to the lower cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    levels: Vec<f64>,
    /// `Q + 1` entries, `-inf` and `+inf` at the ends.
    thresholds: Vec<f64>,
    gamma: f64,
    psi: f64,
    iterations: usize,
}

impl Quantizer {
    /// Runs the Lloyd fixed-point iteration for N(0, 1).
    ///
    /// Codewords start at the quantiles `(2i - 1) / 2Q` and are symmetrized
    /// after every step, so the result is exactly odd-symmetric.
    pub fn train_lloyd_max(q: usize) -> Result<Self, QuantizerError> {
        Self::train_with_limit(q, usize::MAX, LLOYD_MAX_ITERATIONS)
    }

    pub(crate) fn train_with_limit(q: usize, q_max: usize, max_iterations: usize) -> Result<Self, QuantizerError> {
        if q < 2 || q > q_max {
            return Err(QuantizerError::InvalidLevel(q, q_max));
        }
        let mut levels: Vec<f64> = (1..=q).map(|i| normal_quantile((2 * i - 1) as f64 / (2 * q) as f64)).collect();
        symmetrize(&mut levels);

        let mut last_change = f64::INFINITY;
        for iteration in 1..=max_iterations {
            let thresholds = midpoints(&levels);
            let mut next = centroids(&thresholds);
            symmetrize(&mut next);
            last_change = levels.iter().zip(&next).map(|(a, b)| libm::fabs(a - b)).fold(0.0, f64::max);
            levels = next;
            if last_change < LLOYD_TOLERANCE {
                return Ok(Self::from_levels(levels, iteration));
            }
        }
        Err(QuantizerError::IterationLimit { q, iterations: max_iterations, last_change })
    }

    fn from_levels(levels: Vec<f64>, iterations: usize) -> Self {
        let thresholds = midpoints(&levels);
        let (gamma, psi) = bussgang_constants(&levels, &thresholds);
        Self { levels, thresholds, gamma, psi, iterations }
    }

    /// Number of levels `Q`.
    pub fn q_level(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    /// All `Q + 1` thresholds including the infinite end points.
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    /// `γ² / ψ`, the fraction of signal energy the LMMSE estimate keeps.
    pub fn gain(&self) -> f64 {
        self.gamma * self.gamma / self.psi
    }

    /// Per-entry LMMSE distortion `1 - γ²/ψ` for a unit-variance input.
    pub fn distortion(&self) -> f64 {
        1.0 - self.gain()
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Cell index of a single finite value.
    pub fn index_of(&self, x: f64) -> usize {
        let interior = &self.thresholds[1..self.thresholds.len() - 1];
        interior.partition_point(|&t| t < x)
    }

    pub fn quantize(&self, x: &[f64]) -> Result<Vec<usize>, QuantizerError> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| if v.is_nan() { Err(QuantizerError::NonFinite(i)) } else { Ok(self.index_of(v)) })
            .collect()
    }

    pub fn dequantize(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.levels[i]).collect()
    }

    /// One extra Lloyd step from the current codebook; used to check the
    /// fixed point.
    pub fn lloyd_step(&self) -> Vec<f64> {
        let mut next = centroids(&self.thresholds);
        symmetrize(&mut next);
        next
    }
}

/// `γ = Σ q_i (φ(τ_{i-1}) - φ(τ_i))` and `ψ = Σ q_i² P(τ_{i-1} < x <= τ_i)`.
///
/// `thresholds` must include the infinite end points.
pub fn bussgang_constants(levels: &[f64], thresholds: &[f64]) -> (f64, f64) {
    assert_eq!(thresholds.len(), levels.len() + 1);
    let mut gamma = 0.0;
    let mut psi = 0.0;
    for (i, &q) in levels.iter().enumerate() {
        let (a, b) = (thresholds[i], thresholds[i + 1]);
        gamma += q * (normal_pdf(a) - normal_pdf(b));
        psi += q * q * normal_interval_mass(a, b);
    }
    (gamma, psi)
}

fn midpoints(levels: &[f64]) -> Vec<f64> {
    let mut t = Vec::with_capacity(levels.len() + 1);
    t.push(f64::NEG_INFINITY);
    t.extend(levels.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    t.push(f64::INFINITY);
    t
}

/// Conditional means of N(0, 1) over each cell.
fn centroids(thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            (normal_pdf(a) - normal_pdf(b)) / normal_interval_mass(a, b)
        })
        .collect()
}

fn symmetrize(levels: &mut [f64]) {
    let q = levels.len();
    for i in 0..q / 2 {
        let m = 0.5 * (levels[q - 1 - i] - levels[i]);
        levels[i] = -m;
        levels[q - 1 - i] = m;
    }
    if q % 2 == 1 {
        levels[q / 2] = 0.0;
    }
}

/// Codebooks for `Q = 2..=q_max`, trained once and shared read-only.
#[derive(Debug, Clone)]
pub struct QuantizerBank {
    quantizers: Vec<Quantizer>,
}

impl QuantizerBank {
    pub fn train(q_max: usize) -> Result<Self, QuantizerError> {
        if q_max < 2 {
            return Err(QuantizerError::InvalidLevel(q_max, q_max));
        }
        let quantizers = (2..=q_max)
            .map(|q| Quantizer::train_with_limit(q, q_max, LLOYD_MAX_ITERATIONS))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { quantizers })
    }

    pub fn q_max(&self) -> usize {
        self.quantizers.len() + 1
    }

    pub fn get(&self, q: usize) -> Result<&Quantizer, QuantizerError> {
        if q < 2 || q > self.q_max() {
            return Err(QuantizerError::InvalidLevel(q, self.q_max()));
        }
        Ok(&self.quantizers[q - 2])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Quantizer> {
        self.quantizers.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn two_level_closed_form() {
        let q = Quantizer::train_lloyd_max(2).unwrap();
        let c = libm::sqrt(2.0 / PI);
        assert!((q.levels()[0] + c).abs() < 1e-12);
        assert!((q.levels()[1] - c).abs() < 1e-12);
        assert_eq!(q.thresholds()[1], 0.0);
        assert!((q.gamma() - 2.0 / PI).abs() < 1e-12);
        assert!((q.psi() - 2.0 / PI).abs() < 1e-12);
        assert!((q.distortion() - (1.0 - 2.0 / PI)).abs() < 1e-12);
    }

    #[test]
    fn four_level_codebook() {
        let q = Quantizer::train_lloyd_max(4).unwrap();
        let expected = [-1.510_417_608_498_205, -0.452_780_03, 0.452_780_03, 1.510_417_608_498_205];
        for (a, b) in q.levels().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn sign_quantizer_boundary_goes_low() {
        let q = Quantizer::train_lloyd_max(2).unwrap();
        assert_eq!(q.quantize(&[-3.0, 0.0, 0.1]).unwrap(), [0, 0, 1]);
    }

    #[test]
    fn threshold_value_maps_to_lower_cell() {
        let q = Quantizer::train_lloyd_max(4).unwrap();
        let tau = q.thresholds()[3];
        assert!((tau - 0.9816).abs() < 1e-3);
        assert_eq!(q.index_of(tau), 2);
        assert_eq!(q.index_of(f64::from_bits(tau.to_bits() + 1)), 3);
    }

    #[test]
    fn nan_rejected() {
        let q = Quantizer::train_lloyd_max(3).unwrap();
        assert_eq!(q.quantize(&[0.0, f64::NAN]), Err(QuantizerError::NonFinite(1)));
    }

    #[test]
    fn dequantized_values_are_codewords() {
        let q = Quantizer::train_lloyd_max(5).unwrap();
        let x = [-10.0, -0.3, 0.0, 0.7, 2.2, 99.0];
        let idx = q.quantize(&x).unwrap();
        for v in q.dequantize(&idx) {
            assert!(q.levels().contains(&v));
        }
    }

    #[test]
    fn bank_invariants() {
        let bank = QuantizerBank::train(DEFAULT_Q_MAX).unwrap();
        let mut prev_gain = 0.0;
        for q in bank.iter() {
            let n = q.q_level();
            for i in 0..n {
                assert_eq!(q.levels()[i], -q.levels()[n - 1 - i]);
            }
            for i in 0..=n {
                assert_eq!(q.thresholds()[i], -q.thresholds()[n - i]);
            }
            assert!(q.levels().windows(2).all(|w| w[0] < w[1]));
            let g2 = q.gamma() * q.gamma();
            assert!(0.0 < g2 && g2 < q.psi() && q.psi() < 1.0, "Q={n}");
            assert!(q.gain() > prev_gain);
            prev_gain = q.gain();

            let step = q.lloyd_step();
            for (a, b) in step.iter().zip(q.levels()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert!(bank.get(1).is_err());
        assert!(bank.get(17).is_err());
        assert_eq!(bank.get(7).unwrap().q_level(), 7);
    }

    #[test]
    fn out_of_range_level() {
        assert!(matches!(Quantizer::train_lloyd_max(1), Err(QuantizerError::InvalidLevel(1, _))));
        assert!(matches!(
            Quantizer::train_with_limit(17, DEFAULT_Q_MAX, 10),
            Err(QuantizerError::InvalidLevel(17, 16))
        ));
    }

    #[test]
    fn iteration_limit_reported() {
        let err = Quantizer::train_with_limit(16, 16, 3).unwrap_err();
        assert!(matches!(err, QuantizerError::IterationLimit { q: 16, iterations: 3, .. }));
    }
}
