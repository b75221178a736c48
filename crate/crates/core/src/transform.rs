//! Seeded Haar-distributed orthogonal matrices.
//!
//! A matrix of i.i.d. standard Gaussians is orthonormalized column by column
//! with modified Gram-Schmidt, run twice. The positive diagonal of the
//! implied triangular factor makes the result Haar distributed over seeds.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{axpy, dot};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransformError {
    #[error("transform dimension must be at least 1")]
    ZeroDimension,
    #[error("vector length {got} does not match transform dimension {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("Gram-Schmidt broke down at column {0}")]
    RankDeficient(usize),
}

/// An `S x S` orthogonal matrix `U` regenerated from `(dim, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoTransform {
    dim: usize,
    seed: u64,
    /// Column-major: column `j` occupies `cols[j * dim..(j + 1) * dim]`.
    cols: Vec<f64>,
}

impl OrthoTransform {
    /// Draws the Gaussian matrix column by column from [`Stream::gaussian`]
    /// and orthonormalizes it. Bit-identical for equal `(dim, seed)`.
    pub fn generate_haar(dim: usize, seed: u64) -> Result<Self, TransformError> {
        if dim == 0 {
            return Err(TransformError::ZeroDimension);
        }
        let mut stream = Stream::new(seed);
        let mut cols: Vec<f64> = (0..dim * dim).map(|_| stream.gaussian()).collect();
        for _ in 0..2 {
            modified_gram_schmidt(&mut cols, dim)?;
        }
        Ok(Self { dim, seed, cols })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.cols[j * self.dim..(j + 1) * self.dim]
    }

    /// Entry `U[i][j]`.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.cols[j * self.dim + i]
    }

    /// `U v`.
    pub fn forward(&self, v: &[f64]) -> Result<Vec<f64>, TransformError> {
        self.check_len(v.len())?;
        let mut x = vec![0.0; self.dim];
        for (j, &vj) in v.iter().enumerate() {
            if vj != 0.0 {
                axpy(vj, self.column(j), &mut x);
            }
        }
        Ok(x)
    }

    /// `Uᵀ x`.
    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>, TransformError> {
        self.check_len(x.len())?;
        Ok((0..self.dim).map(|j| dot(self.column(j), x)).collect())
    }

    fn check_len(&self, got: usize) -> Result<(), TransformError> {
        if got != self.dim {
            return Err(TransformError::LengthMismatch { expected: self.dim, got });
        }
        Ok(())
    }
}

/// One right-looking MGS sweep over the columns of a column-major square
/// matrix: normalize column `j`, then remove its component from every later
/// column.
fn modified_gram_schmidt(cols: &mut [f64], dim: usize) -> Result<(), TransformError> {
    for j in 0..dim {
        let (done, rest) = cols.split_at_mut((j + 1) * dim);
        let qj = &mut done[j * dim..];
        let norm = libm::sqrt(dot(qj, qj));
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(TransformError::RankDeficient(j));
        }
        let inv = 1.0 / norm;
        qj.iter_mut().for_each(|x| *x *= inv);
        let qj = &*qj;
        for col in rest.chunks_exact_mut(dim) {
            let r = dot(qj, col);
            axpy(-r, qj, col);
        }
    }
    Ok(())
}

/// Where the codec gets its matrices from. The std companion crate provides
/// a bounded cache; [`FreshTransforms`] regenerates every time.
pub trait TransformSource: Sync {
    fn transform(&self, dim: usize, seed: u64) -> Result<Arc<OrthoTransform>, TransformError>;
}

/// No caching.
#[derive(Debug, Default, Clone, Copy)]
pub struct FreshTransforms;

impl TransformSource for FreshTransforms {
    fn transform(&self, dim: usize, seed: u64) -> Result<Arc<OrthoTransform>, TransformError> {
        OrthoTransform::generate_haar(dim, seed).map(Arc::new)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_orthogonality_error(u: &OrthoTransform) -> f64 {
        let n = u.dim();
        let mut worst: f64 = 0.0;
        // U Uᵀ: rows of U are not contiguous, so form them explicitly.
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| u.entry(i, j)).collect()).collect();
        for i in 0..n {
            for k in 0..n {
                let d = dot(&rows[i], &rows[k]) - if i == k { 1.0 } else { 0.0 };
                worst = worst.max(d.abs());
            }
        }
        worst
    }

    #[test]
    fn one_dimensional_is_sign() {
        let u = OrthoTransform::generate_haar(1, 5).unwrap();
        assert_eq!(u.entry(0, 0).abs(), 1.0);
    }

    #[test]
    fn orthogonal_at_64() {
        for seed in 0..3 {
            let u = OrthoTransform::generate_haar(64, seed).unwrap();
            assert!(max_orthogonality_error(&u) < 1e-10);
        }
    }

    #[test]
    fn zero_dim_rejected() {
        assert_eq!(OrthoTransform::generate_haar(0, 1), Err(TransformError::ZeroDimension));
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = OrthoTransform::generate_haar(33, 99).unwrap();
        let b = OrthoTransform::generate_haar(33, 99).unwrap();
        assert_eq!(a, b);
        let c = OrthoTransform::generate_haar(33, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn length_mismatch() {
        let u = OrthoTransform::generate_haar(4, 1).unwrap();
        assert_eq!(u.forward(&[1.0, 2.0]), Err(TransformError::LengthMismatch { expected: 4, got: 2 }));
        assert!(u.inverse(&[0.0; 5]).is_err());
    }

    #[test]
    fn inverse_of_basis_vector_is_first_row() {
        let u = OrthoTransform::generate_haar(10, 4).unwrap();
        let mut e1 = vec![0.0; 10];
        e1[0] = 1.0;
        let r = u.inverse(&e1).unwrap();
        for (j, &x) in r.iter().enumerate() {
            assert_eq!(x, u.entry(0, j));
        }
        assert!((dot(&r, &r) - 1.0).abs() < 1e-12);
        assert_eq!(u.forward(&[0.0; 10]).unwrap(), vec![0.0; 10]);
    }
}
