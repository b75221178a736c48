use std::collections::HashSet;

use fedspar_core::position::{binomial, position_bit_cost, position_bit_cost_approx, rank, unrank, SupportSet};
use fedspar_core::rng::Stream;
use num_bigint::BigUint;
use num_traits::ToPrimitive;
use proptest::prelude::*;

/// Subsets of `0..n` with `s` elements, in colexicographic order of their
/// bitmask as produced by a plain counter.
fn subsets(n: usize, s: usize) -> Vec<Vec<usize>> {
    (0u32..(1 << n))
        .filter(|m| m.count_ones() as usize == s)
        .map(|m| (0..n).filter(|i| m >> i & 1 == 1).collect())
        .collect()
}

#[test]
fn exhaustive_bijection_up_to_twenty() {
    for n in 0..=20usize {
        for s in 0..=n {
            let total = binomial(n, s).to_u64().unwrap();
            // Beyond 20k subsets per (n, s), walk the rank range instead.
            if total > 20_000 {
                let mut seen = HashSet::new();
                for r in 0..total {
                    let set = unrank(n, s, &BigUint::from(r)).unwrap();
                    assert_eq!(rank(&set).to_u64().unwrap(), r);
                    assert!(seen.insert(set.into_positions()));
                }
                continue;
            }
            let all = subsets(n, s);
            assert_eq!(all.len() as u64, total);
            let mut ranks = HashSet::new();
            for p in all {
                let set = SupportSet::new(n, p.clone()).unwrap();
                let r = rank(&set);
                assert!(r < binomial(n, s));
                assert!(ranks.insert(r.clone()));
                assert_eq!(unrank(n, s, &r).unwrap().positions(), &p[..]);
            }
        }
    }
}

#[test]
fn random_round_trips_at_model_scale() {
    let (n, s) = (15_910, 500);
    let mut st = Stream::new(5);
    for _ in 0..100 {
        let mut p = st.sample_indices(n, s);
        p.sort_unstable();
        let set = SupportSet::new(n, p).unwrap();
        let r = rank(&set);
        assert!(r.bits() as usize <= position_bit_cost(n, s));
        assert_eq!(unrank(n, s, &r).unwrap(), set);
    }
}

#[test]
fn rank_of_extremes() {
    let n = 15_910;
    let s = 500;
    let first = SupportSet::new(n, (0..s).collect()).unwrap();
    assert_eq!(rank(&first), BigUint::from(0u8));
    let last = SupportSet::new(n, (n - s..n).collect()).unwrap();
    assert_eq!(rank(&last) + 1u8, binomial(n, s));
    assert!(unrank(n, s, &binomial(n, s)).is_err());
}

#[test]
fn approximate_cost_tracks_exact() {
    for (n, s) in [(15_910, 1), (15_910, 132), (15_910, 7955), (2048, 300), (100, 50)] {
        let exact = position_bit_cost(n, s) as f64;
        let approx = position_bit_cost_approx(n, s);
        assert!(exact >= approx && exact - approx < 1.0 + 1e-6, "{n} {s}: {exact} vs {approx}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip(n in 1usize..3000, frac in 0.0f64..1.0, seed: u64) {
        let s = ((n as f64) * frac) as usize;
        let mut p = Stream::new(seed).sample_indices(n, s);
        p.sort_unstable();
        let set = SupportSet::new(n, p).unwrap();
        prop_assert_eq!(unrank(n, s, &rank(&set)).unwrap(), set);
    }

    #[test]
    fn rank_is_monotone_in_colex_order(n in 2usize..60, seed: u64) {
        // Moving the largest element up raises the rank.
        let mut st = Stream::new(seed);
        let s = 1 + st.below((n - 1) as u64) as usize;
        let mut p = st.sample_indices(n - 1, s);
        p.sort_unstable();
        let a = SupportSet::new(n, p.clone()).unwrap();
        let mut q = p.clone();
        *q.last_mut().unwrap() = n - 1;
        if q != p {
            let b = SupportSet::new(n, q).unwrap();
            prop_assert!(rank(&b) > rank(&a));
        }
    }
}
