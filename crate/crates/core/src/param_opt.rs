//! Choice of the sparsification level `S` and quantization level `Q` under a
//! per-payload bit budget.
//!
//! The residual energy after compression is
//! `‖g‖² - (γ²/ψ)‖g_S‖² - S μ_S² (1 - γ²/ψ)`. The default rule drops the mean
//! term, which makes the best `S` for each `Q` the largest one that fits, and
//! then picks the `Q` with the best `(γ²/ψ) ‖g_S‖²`.

use alloc::vec::Vec;

use crate::codec::value_index_bits;
use crate::position::{position_bit_cost, position_bit_cost_approx};
use crate::quantizer::QuantizerBank;

/// Side information per Lloyd-coded sub-vector: μ and ν as `f32`.
pub const HEADER_BITS: usize = 64;

/// Exact payload size of one Lloyd-coded sub-vector.
pub fn payload_bits(n: usize, s: usize, q: usize) -> usize {
    if s == 0 {
        return 0;
    }
    HEADER_BITS + value_index_bits(s, q) + position_bit_cost(n, s)
}

/// `S log₂ Q + 64 + log₂ C(n, S)` without ceilings.
pub fn approx_payload_bits(n: usize, s: usize, q: usize) -> f64 {
    s as f64 * libm::log2(q as f64) + HEADER_BITS as f64 + position_bit_cost_approx(n, s)
}

/// Largest `S` whose exact payload fits in `capacity_bits`.
///
/// Searched over `S ≤ n/2`, where the payload grows with `S`; keeping every
/// entry (`S = n`, no position field) is allowed when that fits too.
pub fn s_max_for_q(n: usize, q: usize, capacity_bits: usize) -> usize {
    if capacity_bits <= HEADER_BITS {
        return 0;
    }
    largest_fitting(n, capacity_bits, |s| payload_bits(n, s, q), |s| approx_payload_bits(n, s, q))
}

/// As [`s_max_for_q`] for values sent as raw `f32`.
pub fn s_max_float32(n: usize, capacity_bits: usize) -> usize {
    largest_fitting(
        n,
        capacity_bits,
        |s| 32 * s + position_bit_cost(n, s),
        |s| 32.0 * s as f64 + position_bit_cost_approx(n, s),
    )
}

fn largest_fitting(
    n: usize,
    capacity_bits: usize,
    exact: impl Fn(usize) -> usize,
    approx: impl Fn(usize) -> f64,
) -> usize {
    if n == 0 {
        return 0;
    }
    if exact(n) <= capacity_bits {
        return n;
    }
    let half = n / 2;
    let cap = capacity_bits as f64;
    // Binary search on the smooth approximation, then settle on the exact
    // boundary.
    let (mut lo, mut hi) = (0usize, half);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if approx(mid) <= cap {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let mut s = lo;
    while s > 0 && exact(s) > capacity_bits {
        s -= 1;
    }
    while s < half && exact(s + 1) <= capacity_bits {
        s += 1;
    }
    s
}

/// `S_Q^max` for every `Q` in a set, for one `(n, capacity)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetTable {
    n: usize,
    capacity_bits: usize,
    /// `(Q, S_Q^max)`, ascending in `Q`.
    entries: Vec<(usize, usize)>,
}

impl BudgetTable {
    pub fn new(n: usize, capacity_bits: usize, q_set: &[usize]) -> Self {
        let mut qs = q_set.to_vec();
        qs.sort_unstable();
        qs.dedup();
        let entries = qs.into_iter().map(|q| (q, s_max_for_q(n, q, capacity_bits))).collect();
        Self { n, capacity_bits, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn capacity_bits(&self) -> usize {
        self.capacity_bits
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn s_max(&self, q: usize) -> Option<usize> {
        self.entries.iter().find(|e| e.0 == q).map(|e| e.1)
    }
}

/// Outcome of the parameter search for one sub-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetedChoice {
    pub s_star: usize,
    pub q_star: usize,
    /// `(Q, S_Q^max)` for every candidate.
    pub s_max_per_q: Vec<(usize, usize)>,
    /// Objective value per candidate, aligned with `s_max_per_q`.
    pub objectives: Vec<f64>,
}

/// Squared magnitudes sorted in decreasing order, as prefix sums:
/// `out[s] = Σ_{i<s} |g_mag,i|²`.
pub fn sorted_energy_prefix(g: &[f64]) -> Vec<f64> {
    let mut sq: Vec<f64> = g.iter().map(|x| x * x).collect();
    sq.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut out = Vec::with_capacity(sq.len() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for v in sq {
        acc += v;
        out.push(acc);
    }
    out
}

/// Simplified rule: `S = S_Q^max` and `Q★ = argmax (γ²/ψ) ‖g_{S_Q^max}‖²`.
/// Ties go to the smaller `Q`; an all-zero `g` gets the smallest `Q`.
pub fn choose_parameters(g: &[f64], table: &BudgetTable, bank: &QuantizerBank) -> BudgetedChoice {
    assert_eq!(g.len(), table.n(), "update length differs from budget table");
    assert!(!table.entries.is_empty(), "empty quantization level set");
    let prefix = sorted_energy_prefix(g);
    let objectives: Vec<f64> = table.entries.iter().map(|&(q, s)| gain(bank, q) * prefix[s]).collect();
    let mut best = 0;
    for (i, &v) in objectives.iter().enumerate() {
        if v > objectives[best] {
            best = i;
        }
    }
    let (q_star, s_star) = table.entries[best];
    BudgetedChoice { s_star, q_star, s_max_per_q: table.entries.clone(), objectives }
}

fn gain(bank: &QuantizerBank, q: usize) -> f64 {
    bank.get(q).expect("level inside the trained bank").gain()
}

/// Magnitude-ordered values: prefix sums of the signed values and of their
/// squares, for `O(1)` evaluation of the full objective at any `S`.
struct Prefixes {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Prefixes {
    fn new(g: &[f64]) -> Self {
        let mut idx: Vec<usize> = (0..g.len()).collect();
        idx.sort_unstable_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
        let mut sum = Vec::with_capacity(g.len() + 1);
        let mut sum_sq = Vec::with_capacity(g.len() + 1);
        let (mut a, mut b) = (0.0, 0.0);
        sum.push(a);
        sum_sq.push(b);
        for i in idx {
            a += g[i];
            b += g[i] * g[i];
            sum.push(a);
            sum_sq.push(b);
        }
        Self { sum, sum_sq }
    }

    fn objective(&self, s: usize, gain: f64) -> f64 {
        if s == 0 {
            return 0.0;
        }
        let mu = self.sum[s] / s as f64;
        gain * self.sum_sq[s] + s as f64 * mu * mu * (1.0 - gain)
    }
}

/// Full objective `(γ²/ψ)‖g_S‖² + S μ_S² (1 - γ²/ψ)` for the top-`S` entries.
pub fn exact_objective(g: &[f64], s: usize, q: usize, bank: &QuantizerBank) -> f64 {
    Prefixes::new(g).objective(s, gain(bank, q))
}

/// Expected `‖g - ĝ‖²` under the Gaussian model of the transformed values.
pub fn predicted_mse(g: &[f64], s: usize, q: usize, bank: &QuantizerBank) -> f64 {
    let energy: f64 = g.iter().map(|x| x * x).sum();
    energy - exact_objective(g, s, q, bank)
}

/// Reference solver: every `Q` and every `S ≤ S_Q^max`, full objective.
pub fn choose_parameters_exhaustive(g: &[f64], table: &BudgetTable, bank: &QuantizerBank) -> BudgetedChoice {
    assert_eq!(g.len(), table.n(), "update length differs from budget table");
    assert!(!table.entries.is_empty(), "empty quantization level set");
    let prefixes = Prefixes::new(g);
    let mut best: Option<(f64, usize, usize)> = None;
    let mut objectives = Vec::with_capacity(table.entries.len());
    for &(q, s_max) in &table.entries {
        let k = gain(bank, q);
        let (mut best_s, mut best_v) = (0, 0.0);
        for s in 1..=s_max {
            let v = prefixes.objective(s, k);
            if v > best_v {
                best_v = v;
                best_s = s;
            }
        }
        if s_max > 0 && best_s == 0 {
            best_s = s_max;
        }
        objectives.push(best_v);
        if best.map_or(true, |(v, _, _)| best_v > v) {
            best = Some((best_v, q, best_s));
        }
    }
    let (_, q_star, s_star) = best.expect("nonempty level set");
    BudgetedChoice { s_star, q_star, s_max_per_q: table.entries.clone(), objectives }
}
