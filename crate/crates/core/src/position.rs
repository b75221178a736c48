//! Support sets as combinatorial ranks.
//!
//! An `S`-subset `{p_1 < … < p_S}` of `{0, …, n-1}` maps to
//! `r = Σ_i C(p_i, i)` (1-based `i`, `C(a, b) = 0` for `a < b`), its 0-based
//! lexicographic index among all `S`-subsets in colex order. The rank is
//! sent in exactly `⌈log₂ C(n, S)⌉` bits.

use alloc::vec::Vec;

use num_bigint::BigUint;
use num_traits::{One, Zero};

use crate::math::log2_binomial;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PositionError {
    #[error("{s} positions requested from a set of {n}")]
    TooMany { s: usize, n: usize },
    #[error("position {position} is outside 0..{n}")]
    OutOfRange { position: usize, n: usize },
    #[error("positions not strictly increasing at index {0}")]
    NotIncreasing(usize),
    #[error("rank is not below C({n}, {s})")]
    RankOutOfRange { n: usize, s: usize },
}

/// Sorted, duplicate-free positions inside `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SupportSet {
    n: usize,
    positions: Vec<usize>,
}

impl SupportSet {
    pub fn new(n: usize, positions: Vec<usize>) -> Result<Self, PositionError> {
        if positions.len() > n {
            return Err(PositionError::TooMany { s: positions.len(), n });
        }
        for (i, &p) in positions.iter().enumerate() {
            if p >= n {
                return Err(PositionError::OutOfRange { position: p, n });
            }
            if i > 0 && positions[i - 1] >= p {
                return Err(PositionError::NotIncreasing(i));
            }
        }
        Ok(Self { n, positions })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn into_positions(self) -> Vec<usize> {
        self.positions
    }
}

/// Exact `C(n, k)`.
pub fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut c = BigUint::one();
    for i in 1..=k {
        c *= (n - k + i) as u64;
        c /= i as u64;
    }
    c
}

/// Bits needed to store any integer in `0..count`, i.e. `⌈log₂ count⌉`.
pub fn bits_for_count(count: &BigUint) -> usize {
    if count.is_zero() {
        return 0;
    }
    (count - 1u32).bits() as usize
}

/// `⌈log₂ C(n, s)⌉`, exact.
pub fn position_bit_cost(n: usize, s: usize) -> usize {
    bits_for_count(&binomial(n, s))
}

/// `log₂ C(n, s)` via log-gamma; no ceiling.
pub fn position_bit_cost_approx(n: usize, s: usize) -> f64 {
    log2_binomial(n as u64, s as u64)
}

/// Combinatorial rank of `set`.
pub fn rank(set: &SupportSet) -> BigUint {
    let p = &set.positions;
    let mut r = BigUint::zero();
    // Terms with p_i = i - 1 are C(i-1, i) = 0.
    let Some(start) = (0..p.len()).find(|&j| p[j] > j) else {
        return r;
    };
    let mut k = start + 1;
    let mut pos = p[start];
    let mut c = binomial(pos, k);
    r += &c;
    for &next in &p[start + 1..] {
        // C(pos + 1, k + 1) = C(pos, k) (pos + 1) / (k + 1)
        c *= (pos + 1) as u64;
        c /= (k + 1) as u64;
        pos += 1;
        k += 1;
        while pos < next {
            // C(pos + 1, k) = C(pos, k) (pos + 1) / (pos + 1 - k)
            c *= (pos + 1) as u64;
            c /= (pos + 1 - k) as u64;
            pos += 1;
        }
        r += &c;
    }
    r
}

/// Inverse of [`rank`] for `s` positions out of `n`.
pub fn unrank(n: usize, s: usize, r: &BigUint) -> Result<SupportSet, PositionError> {
    if s > n {
        return Err(PositionError::TooMany { s, n });
    }
    if s == 0 {
        return if r.is_zero() {
            Ok(SupportSet { n, positions: Vec::new() })
        } else {
            Err(PositionError::RankOutOfRange { n, s })
        };
    }
    // c tracks C(pos, k).
    let mut c = binomial(n - 1, s);
    let total = if s == n { BigUint::one() } else { &c * n as u64 / (n - s) as u64 };
    if *r >= total {
        return Err(PositionError::RankOutOfRange { n, s });
    }

    let mut rest = r.clone();
    let mut positions = alloc::vec![0usize; s];
    let mut pos = n - 1;
    let mut k = s;
    while k > 0 {
        if c.is_zero() {
            // pos = k - 1: the remaining positions are 0..k.
            for (j, slot) in positions[..k].iter_mut().enumerate() {
                *slot = j;
            }
            break;
        }
        while c > rest {
            // C(pos - 1, k) = C(pos, k) (pos - k) / pos
            c *= (pos - k) as u64;
            c /= pos as u64;
            pos -= 1;
            if c.is_zero() {
                break;
            }
        }
        if c.is_zero() {
            continue;
        }
        positions[k - 1] = pos;
        rest -= &c;
        if k == 1 {
            break;
        }
        // C(pos - 1, k - 1) = C(pos, k) k / pos
        c *= k as u64;
        c /= pos as u64;
        pos -= 1;
        k -= 1;
    }
    Ok(SupportSet { n, positions })
}
