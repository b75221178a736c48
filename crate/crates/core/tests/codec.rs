use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use fedspar_core::bits::BitBuf;
use fedspar_core::codec::{
    nmse, sparsify, value_index_bits, CodecContext, CodecError, DecodedValues, Field, PayloadHeader, SubvectorSpec,
    ValueCoding,
};
use fedspar_core::position::{position_bit_cost, unrank};
use fedspar_core::rng::Stream;
use fedspar_core::transform::{FreshTransforms, OrthoTransform, TransformError, TransformSource};
use fedspar_core::{QuantizerBank, SeedContext, SeedScope};
use proptest::prelude::*;

#[derive(Default)]
struct Memo(Mutex<HashMap<(usize, u64), Arc<OrthoTransform>>>);

impl TransformSource for Memo {
    fn transform(&self, dim: usize, seed: u64) -> Result<Arc<OrthoTransform>, TransformError> {
        if let Some(t) = self.0.lock().unwrap().get(&(dim, seed)) {
            return Ok(t.clone());
        }
        let t = Arc::new(OrthoTransform::generate_haar(dim, seed)?);
        self.0.lock().unwrap().insert((dim, seed), t.clone());
        Ok(t)
    }
}

fn bank() -> QuantizerBank {
    QuantizerBank::train(16).unwrap()
}

fn gaussian(n: usize, seed: u64) -> Vec<f64> {
    let mut s = Stream::new(seed);
    (0..n).map(|_| s.gaussian()).collect()
}

fn single(n: usize, s: usize, q: usize) -> PayloadHeader {
    PayloadHeader { n, coding: ValueCoding::Lloyd, subvectors: vec![SubvectorSpec::new(n, s, q)] }
}

#[test]
fn reconstruction_error_follows_the_mse_law() {
    let bank = bank();
    let memo = Memo::default();
    let (n, s, trials) = (1024, 256, 200);
    for q in [2, 4, 8, 16] {
        let gain = bank.get(q).unwrap().gain();
        let mut ratio = 0.0;
        for t in 0..trials {
            let ctx = CodecContext::new(&bank, &memo, SeedContext::new(7, t % 8, 0, SeedScope::PerRound));
            let g: Vec<f64> = gaussian(n, 1000 + t).iter().map(|x| 0.3 + 2.0 * x).collect();
            let c = ctx.compress(&g, single(n, s, q)).unwrap();
            let g_hat = ctx.reconstruct(&c).unwrap();
            let sp = sparsify(&g, s);
            let nu = match &ctx.decode(&c).unwrap()[0].values {
                DecodedValues::Lloyd { nu, .. } => *nu as f64,
                other => panic!("{other:?}"),
            };
            let err: f64 = sp.support.positions().iter().zip(&sp.values).map(|(&i, v)| (v - g_hat[i]).powi(2)).sum();
            ratio += err / (nu * s as f64);
        }
        ratio /= trials as f64;
        let want = 1.0 - gain;
        assert!((ratio - want).abs() < 0.04 * want, "Q={q}: {ratio} vs {want}");
    }
}

#[test]
fn hand_decoded_wire_format() {
    let bank = bank();
    let ctx = CodecContext::new(&bank, &FreshTransforms, SeedContext::new(1, 2, 3, SeedScope::PerRound));
    let g = [0.5, -3.0, 0.1, 2.0, 0.0, -0.2, 4.0, 0.3, -1.0, 0.05];
    let c = ctx.compress(&g, single(10, 3, 3)).unwrap();
    let index_bits = value_index_bits(3, 3);
    assert_eq!(index_bits, 5, "27 combinations need 5 bits");
    let pos_bits = position_bit_cost(10, 3);
    assert_eq!(pos_bits, 7, "C(10, 3) = 120");
    assert_eq!(c.bits.len(), 64 + index_bits + pos_bits);

    let mut r = c.bits.reader();
    let mu = r.read_f32().unwrap();
    let nu = r.read_f32().unwrap();
    let packed = r.read_bits(index_bits).unwrap() as usize;
    let rank = r.read_biguint(pos_bits).unwrap();
    assert_eq!(r.remaining(), 0);

    let kept = [-3.0f64, 2.0, 4.0];
    let mean = kept.iter().sum::<f64>() / 3.0;
    let var = kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert_eq!(mu, mean as f32);
    assert_eq!(nu, var as f32);
    assert_eq!(unrank(10, 3, &rank).unwrap().positions(), &[1, 3, 6]);
    let digits = [packed / 9, packed / 3 % 3, packed % 3];
    match &ctx.decode(&c).unwrap()[0].values {
        DecodedValues::Lloyd { indices, .. } => assert_eq!(indices, &digits),
        other => panic!("{other:?}"),
    }
}

#[test]
fn parallel_mode_matches_independent_subvectors() {
    let bank = bank();
    let memo = Memo::default();
    let seeds = SeedContext::new(4, 0, 0, SeedScope::Static);
    let ctx = CodecContext::new(&bank, &memo, seeds);
    let n = 1001;
    let l = 4;
    let g = gaussian(n, 8);
    let layout = ctx.layout(n, l);
    let parts = layout.split(&g);
    let specs: Vec<SubvectorSpec> =
        (0..l).map(|i| SubvectorSpec::new(layout.sub_len(), 20 + 5 * i, [2, 3, 8, 16][i])).collect();
    let header = PayloadHeader { n, coding: ValueCoding::Lloyd, subvectors: specs.clone() };
    let whole = ctx.reconstruct(&ctx.compress(&g, header).unwrap()).unwrap();

    // Reference: every part on its own as a one-sub-vector payload. Static
    // seeds give every sub-vector of a given size the same matrix, and pad
    // entries are zero so they never win the top-S selection here.
    let mut rebuilt = Vec::new();
    for (part, spec) in parts.iter().zip(&specs) {
        let h = single(part.len(), spec.s, spec.q);
        rebuilt.push(ctx.reconstruct(&ctx.compress(part, h).unwrap()).unwrap());
    }
    assert_eq!(layout.merge(&rebuilt), whole);
}

#[test]
fn constant_and_empty_updates() {
    let bank = bank();
    let ctx = CodecContext::new(&bank, &FreshTransforms, SeedContext::new(0, 0, 0, SeedScope::Static));
    let g = vec![2.5; 50];
    let c = ctx.compress(&g, single(50, 10, 4)).unwrap();
    let g_hat = ctx.reconstruct(&c).unwrap();
    assert_eq!(g_hat.iter().filter(|&&x| x == 2.5).count(), 10);
    assert_eq!(g_hat.iter().filter(|&&x| x == 0.0).count(), 40);

    let c = ctx.compress(&g, single(50, 0, 4)).unwrap();
    assert!(c.bits.is_empty());
    assert_eq!(ctx.reconstruct(&c).unwrap(), vec![0.0; 50]);
}

#[test]
fn corrupted_and_truncated_payloads() {
    let bank = bank();
    let ctx = CodecContext::new(&bank, &FreshTransforms, SeedContext::new(0, 0, 0, SeedScope::Static));
    let g = gaussian(200, 3);
    let c = ctx.compress(&g, single(200, 7, 5)).unwrap();

    let mut short = c.clone();
    let keep = c.bits.len() - 3;
    short.bits = BitBuf::from_bytes(c.bits.as_bytes()[..keep.div_ceil(8)].to_vec(), keep).unwrap();
    assert!(matches!(ctx.decode(&short), Err(CodecError::PayloadLength { .. } | CodecError::Truncated { .. })));

    // Setting the top bit of the rank field pushes it past C(200, 7).
    let mut bad = c.clone();
    let rank_start = 64 + value_index_bits(7, 5);
    let mut hit = false;
    for i in rank_start..bad.bits.len() {
        if !bad.bits.bit(i) {
            bad.bits.flip(i);
            hit = true;
            break;
        }
    }
    assert!(hit);
    if let Err(e) = ctx.decode(&bad) {
        assert_eq!(e, CodecError::Corrupt { subvector: 0, field: Field::PositionRank });
    }

    let mut all_ones = c.clone();
    for i in rank_start..all_ones.bits.len() {
        if !all_ones.bits.bit(i) {
            all_ones.bits.flip(i);
        }
    }
    assert_eq!(ctx.decode(&all_ones).unwrap_err(), CodecError::Corrupt { subvector: 0, field: Field::PositionRank });

    // 5^7 = 78125 < 2^17: an all-ones index field is out of range.
    let mut idx = c.clone();
    for i in 64..rank_start {
        if !idx.bits.bit(i) {
            idx.bits.flip(i);
        }
    }
    assert_eq!(ctx.decode(&idx).unwrap_err(), CodecError::Corrupt { subvector: 0, field: Field::ValueIndices });
}

#[test]
fn float32_baseline_is_exact_to_single_precision() {
    let bank = bank();
    let ctx = CodecContext::new(&bank, &FreshTransforms, SeedContext::new(0, 0, 0, SeedScope::Static));
    let g = gaussian(300, 21);
    let header =
        PayloadHeader { n: 300, coding: ValueCoding::Float32, subvectors: vec![SubvectorSpec::new(300, 30, 0)] };
    let c = ctx.compress(&g, header).unwrap();
    assert_eq!(c.bits.len(), 32 * 30 + position_bit_cost(300, 30));
    let g_hat = ctx.reconstruct(&c).unwrap();
    let sp = sparsify(&g, 30);
    for (&i, v) in sp.support.positions().iter().zip(&sp.values) {
        assert_eq!(g_hat[i], *v as f32 as f64);
    }
}

#[test]
fn more_levels_reduce_error() {
    let bank = bank();
    let memo = Memo::default();
    let g = gaussian(2000, 5);
    let mut last = f64::INFINITY;
    for q in [2, 4, 8, 16] {
        let mut total = 0.0;
        for r in 0..20 {
            let ctx = CodecContext::new(&bank, &memo, SeedContext::new(1, r, 0, SeedScope::PerRound));
            let c = ctx.compress(&g, single(2000, 200, q)).unwrap();
            total += nmse(&g, &ctx.reconstruct(&c).unwrap()).unwrap();
        }
        assert!(total < last, "Q={q}");
        last = total;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn payload_length_matches_budget(n in 2usize..400, l in 1usize..5, seed: u64) {
        let bank = QuantizerBank::train(16).unwrap();
        let ctx = CodecContext::new(&bank, &FreshTransforms, SeedContext::new(seed, 0, 0, SeedScope::Static));
        let mut st = Stream::new(seed);
        let g: Vec<f64> = (0..n).map(|_| st.gaussian() * 3.0).collect();
        let m = n.div_ceil(l);
        let subvectors: Vec<SubvectorSpec> = (0..l)
            .map(|_| SubvectorSpec::new(m, st.below(m.min(40) as u64 + 1) as usize, 2 + st.below(15) as usize))
            .collect();
        let header = PayloadHeader { n, coding: ValueCoding::Lloyd, subvectors };
        let want = header.total_bits();
        let c = ctx.compress(&g, header.clone()).unwrap();
        prop_assert_eq!(c.bits.len(), want);
        let decoded = ctx.decode(&c).unwrap();
        for (d, spec) in decoded.iter().zip(&header.subvectors) {
            prop_assert_eq!(d.support.len(), spec.s);
        }
        let g_hat = ctx.reconstruct(&c).unwrap();
        prop_assert_eq!(g_hat.iter().filter(|x| **x != 0.0).count() <= header.kept(), true);
    }

    #[test]
    fn decoding_is_deterministic(seed: u64) {
        let bank = QuantizerBank::train(8).unwrap();
        let ctx = CodecContext::new(&bank, &FreshTransforms, SeedContext::new(seed, 1, 1, SeedScope::PerRound));
        let g: Vec<f64> = {
            let mut st = Stream::new(seed);
            (0..120).map(|_| st.gaussian()).collect()
        };
        let c = ctx.compress(&g, single(120, 12, 8)).unwrap();
        prop_assert_eq!(ctx.reconstruct(&c).unwrap(), ctx.reconstruct(&c.clone()).unwrap());
    }
}
