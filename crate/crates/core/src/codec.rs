//! Compression and reconstruction of model updates.
//!
//! Per sub-vector the payload is
//!
//! ```text
//! μ (f32) ∥ ν (f32) ∥ value indices (⌈S log₂Q⌉ bits) ∥ position rank (⌈log₂ C(n, S)⌉ bits)
//! ```
//!
//! all MSB first. With [`ValueCoding::Float32`] the first three fields are
//! replaced by `S` raw `f32` values. A sub-vector with `S = 0` contributes no
//! bits. The header travels out of band.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};

use crate::bits::{BitBuf, BitError, BitReader, BitWriter};
use crate::math::dot;
use crate::position::{self, bits_for_count, PositionError, SupportSet};
use crate::quantizer::{QuantizerBank, QuantizerError};
use crate::rng::{SeedContext, Stream};
use crate::transform::{TransformError, TransformSource};

/// Below this sample variance the selected values are treated as constant.
pub const DEGENERATE_VARIANCE: f64 = 1e-24;

/// Payload field, for error reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    Mean,
    Variance,
    ValueIndices,
    Values,
    PositionRank,
}

impl core::fmt::Display for Field {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Field::Mean => "mean",
            Field::Variance => "variance",
            Field::ValueIndices => "value indices",
            Field::Values => "values",
            Field::PositionRank => "position rank",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("update has length {got}, header expects {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("header needs at least one sub-vector")]
    NoSubvectors,
    #[error("sub-vector {index} has length {got}, expected {expected}")]
    SubvectorLength { index: usize, expected: usize, got: usize },
    #[error("sub-vector {index} keeps {s} of {n} entries")]
    SparsityTooLarge { index: usize, s: usize, n: usize },
    #[error("sub-vector {index}: {source}")]
    Quantizer { index: usize, source: QuantizerError },
    #[error("sub-vector {subvector}: payload ends inside the {field} field")]
    Truncated { subvector: usize, field: Field },
    #[error("sub-vector {subvector}: invalid {field} field")]
    Corrupt { subvector: usize, field: Field },
    #[error("payload has {got} bits, header implies {expected}")]
    PayloadLength { expected: usize, got: usize },
    #[error("mean or variance of sub-vector {0} does not fit in f32")]
    Overflow(usize),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("reference vector is zero")]
    ZeroReference,
}

/// How the `S` selected values are carried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueCoding {
    /// Normalize, Haar transform, Lloyd-Max quantize, LMMSE reconstruct.
    Lloyd,
    /// Raw 32-bit floats.
    Float32,
}

/// Layout of one sub-vector: ambient length, kept entries and level count.
/// `q` is ignored under [`ValueCoding::Float32`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SubvectorSpec {
    pub n: usize,
    pub s: usize,
    pub q: usize,
}

impl SubvectorSpec {
    pub fn new(n: usize, s: usize, q: usize) -> Self {
        Self { n, s, q }
    }

    pub fn value_bits(&self, coding: ValueCoding) -> usize {
        if self.s == 0 {
            return 0;
        }
        match coding {
            ValueCoding::Lloyd => 64 + value_index_bits(self.s, self.q),
            ValueCoding::Float32 => 32 * self.s,
        }
    }

    pub fn position_bits(&self) -> usize {
        position::position_bit_cost(self.n, self.s)
    }

    pub fn total_bits(&self, coding: ValueCoding) -> usize {
        self.value_bits(coding) + self.position_bits()
    }
}

/// `⌈S log₂ Q⌉`, exact.
pub fn value_index_bits(s: usize, q: usize) -> usize {
    if s == 0 || q <= 1 {
        return 0;
    }
    if q.is_power_of_two() {
        return s * q.trailing_zeros() as usize;
    }
    bits_for_count(&BigUint::from(q).pow(s as u32))
}

/// Everything the decoder needs besides the bits.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PayloadHeader {
    /// Length of the original update, before padding.
    pub n: usize,
    pub coding: ValueCoding,
    pub subvectors: Vec<SubvectorSpec>,
}

impl PayloadHeader {
    pub fn l(&self) -> usize {
        self.subvectors.len()
    }

    pub fn total_bits(&self) -> usize {
        self.subvectors.iter().map(|s| s.total_bits(self.coding)).sum()
    }

    pub fn kept(&self) -> usize {
        self.subvectors.iter().map(|s| s.s).sum()
    }

    fn validate(&self, q_max: usize) -> Result<(), CodecError> {
        if self.subvectors.is_empty() {
            return Err(CodecError::NoSubvectors);
        }
        let sub_len = sub_len(self.n, self.l());
        for (index, spec) in self.subvectors.iter().enumerate() {
            if spec.n != sub_len {
                return Err(CodecError::SubvectorLength { index, expected: sub_len, got: spec.n });
            }
            if spec.s > spec.n {
                return Err(CodecError::SparsityTooLarge { index, s: spec.s, n: spec.n });
            }
            if self.coding == ValueCoding::Lloyd && spec.s > 0 && (spec.q < 2 || spec.q > q_max) {
                return Err(CodecError::Quantizer { index, source: QuantizerError::InvalidLevel(spec.q, q_max) });
            }
        }
        Ok(())
    }
}

/// Length of each sub-vector when `n` entries are padded to a multiple of `l`.
pub fn sub_len(n: usize, l: usize) -> usize {
    n.div_ceil(l.max(1))
}

/// A header plus the packed bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedUpdate {
    pub header: PayloadHeader,
    pub bits: BitBuf,
}

/// Top-`S` entries of a vector: support and the signed values on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sparsified {
    pub support: SupportSet,
    pub values: Vec<f64>,
}

/// Keeps the `s` largest magnitudes; equal magnitudes go to the lower index.
pub fn sparsify(g: &[f64], s: usize) -> Sparsified {
    sparsify_masked(g, s, |_| false)
}

/// As [`sparsify`], but entries flagged by `is_pad` lose every tie.
fn sparsify_masked(g: &[f64], s: usize, is_pad: impl Fn(usize) -> bool) -> Sparsified {
    assert!(s <= g.len(), "cannot keep {s} of {} entries", g.len());
    let mut idx: Vec<usize> = (0..g.len()).collect();
    if s < g.len() && s > 0 {
        let order = |&a: &usize, &b: &usize| -> Ordering {
            g[b].abs().total_cmp(&g[a].abs()).then_with(|| is_pad(a).cmp(&is_pad(b))).then_with(|| a.cmp(&b))
        };
        idx.select_nth_unstable_by(s - 1, order);
    }
    idx.truncate(s);
    idx.sort_unstable();
    let values = idx.iter().map(|&i| g[i]).collect();
    Sparsified { support: SupportSet::new(g.len(), idx).expect("sorted distinct indices"), values }
}

/// How an update of length `n` is cut into `l` sub-vectors.
///
/// With `l = 1` the update is used as is. Otherwise it is zero-padded to
/// `l · ⌈n / l⌉` entries, shuffled by a seeded Fisher-Yates permutation and
/// cut into consecutive blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    n: usize,
    l: usize,
    sub_len: usize,
    /// `perm[slot]` is the padded-vector index that lands in `slot`.
    perm: Option<Vec<usize>>,
}

impl Layout {
    pub fn new(n: usize, l: usize, shuffle_seed: u64) -> Self {
        let l = l.max(1);
        let sub_len = sub_len(n, l);
        let perm = (l > 1).then(|| {
            let mut perm: Vec<usize> = (0..sub_len * l).collect();
            Stream::new(shuffle_seed).shuffle(&mut perm);
            perm
        });
        Self { n, l, sub_len, perm }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn sub_len(&self) -> usize {
        self.sub_len
    }

    fn source(&self, slot: usize) -> usize {
        match &self.perm {
            Some(p) => p[slot],
            None => slot,
        }
    }

    /// Whether position `j` of sub-vector `part` is padding.
    pub fn is_pad(&self, part: usize, j: usize) -> bool {
        self.source(part * self.sub_len + j) >= self.n
    }

    pub fn split(&self, g: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(g.len(), self.n);
        if self.perm.is_none() {
            return vec![g.to_vec()];
        }
        (0..self.l)
            .map(|part| {
                (0..self.sub_len).map(|j| g.get(self.source(part * self.sub_len + j)).copied().unwrap_or(0.0)).collect()
            })
            .collect()
    }

    pub fn merge(&self, parts: &[Vec<f64>]) -> Vec<f64> {
        assert_eq!(parts.len(), self.l);
        let mut out = vec![0.0; self.n];
        for (part, values) in parts.iter().enumerate() {
            for (j, &v) in values.iter().enumerate() {
                let i = self.source(part * self.sub_len + j);
                if i < self.n {
                    out[i] = v;
                }
            }
        }
        out
    }
}

/// Decoded content of one sub-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedSubvector {
    pub spec: SubvectorSpec,
    pub values: DecodedValues,
    pub support: SupportSet,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecodedValues {
    Empty,
    Lloyd { mu: f32, nu: f32, indices: Vec<usize> },
    Float32(Vec<f32>),
}

/// Shared state both ends need: codebooks, matrices and seeds.
#[derive(Clone, Copy)]
pub struct CodecContext<'a> {
    pub bank: &'a QuantizerBank,
    pub transforms: &'a dyn TransformSource,
    pub seeds: SeedContext,
}

impl<'a> CodecContext<'a> {
    pub fn new(bank: &'a QuantizerBank, transforms: &'a dyn TransformSource, seeds: SeedContext) -> Self {
        Self { bank, transforms, seeds }
    }

    pub fn layout(&self, n: usize, l: usize) -> Layout {
        Layout::new(n, l, self.seeds.shuffle_seed())
    }

    /// Compresses `g` under `header`, which fixes `L` and every sub-vector's
    /// `(S, Q)`.
    pub fn compress(&self, g: &[f64], header: PayloadHeader) -> Result<CompressedUpdate, CodecError> {
        if g.len() != header.n {
            return Err(CodecError::LengthMismatch { expected: header.n, got: g.len() });
        }
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(CodecError::NonFinite(i));
        }
        let layout = self.layout(header.n, header.l());
        let parts = layout.split(g);
        self.compress_parts(&layout, &parts, header)
    }

    /// Compresses sub-vectors already produced by `layout.split`.
    pub fn compress_parts(
        &self,
        layout: &Layout,
        parts: &[Vec<f64>],
        header: PayloadHeader,
    ) -> Result<CompressedUpdate, CodecError> {
        header.validate(self.bank.q_max())?;
        let mut w = BitWriter::new();
        for (index, (spec, part)) in header.subvectors.iter().zip(parts).enumerate() {
            if part.len() != spec.n {
                return Err(CodecError::SubvectorLength { index, expected: spec.n, got: part.len() });
            }
            if spec.s == 0 {
                continue;
            }
            let sp = sparsify_masked(part, spec.s, |j| layout.is_pad(index, j));
            match header.coding {
                ValueCoding::Lloyd => self.encode_lloyd(&mut w, index, spec, &sp.values)?,
                ValueCoding::Float32 => {
                    for &v in &sp.values {
                        let f = v as f32;
                        if !f.is_finite() {
                            return Err(CodecError::Overflow(index));
                        }
                        w.write_f32(f);
                    }
                }
            }
            let rank = position::rank(&sp.support);
            w.write_biguint(&rank, spec.position_bits()).expect("rank below C(n, s)");
        }
        let bits = w.finish();
        debug_assert_eq!(bits.len(), header.total_bits());
        Ok(CompressedUpdate { header, bits })
    }

    fn encode_lloyd(
        &self,
        w: &mut BitWriter,
        index: usize,
        spec: &SubvectorSpec,
        values: &[f64],
    ) -> Result<(), CodecError> {
        let s = values.len();
        let mean = values.iter().sum::<f64>() / s as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s as f64;
        let mu = mean as f32;
        if !mu.is_finite() || !var.is_finite() {
            return Err(CodecError::Overflow(index));
        }
        w.write_f32(mu);
        let index_bits = value_index_bits(s, spec.q);
        if var < DEGENERATE_VARIANCE {
            w.write_f32(0.0);
            w.write_biguint(&BigUint::zero(), index_bits).expect("zero fits");
            return Ok(());
        }
        let nu = var as f32;
        if !nu.is_finite() {
            return Err(CodecError::Overflow(index));
        }
        w.write_f32(nu);

        let (mu, sd) = (mu as f64, libm::sqrt(nu as f64));
        let v: Vec<f64> = values.iter().map(|x| (x - mu) / sd).collect();
        let u = self.transforms.transform(s, self.seeds.transform_seed(index as u64, s as u64))?;
        let x = u.forward(&v)?;
        let quantizer = self.bank.get(spec.q).map_err(|source| CodecError::Quantizer { index, source })?;
        let indices = quantizer.quantize(&x).expect("finite after normalization");
        write_indices(w, &indices, spec.q, index_bits);
        Ok(())
    }

    /// Parses every field of the payload without reconstructing.
    pub fn decode(&self, c: &CompressedUpdate) -> Result<Vec<DecodedSubvector>, CodecError> {
        let header = &c.header;
        header.validate(self.bank.q_max())?;
        let expected = header.total_bits();
        if c.bits.len() != expected {
            return Err(CodecError::PayloadLength { expected, got: c.bits.len() });
        }
        let mut r = c.bits.reader();
        let mut out = Vec::with_capacity(header.l());
        for (subvector, spec) in header.subvectors.iter().enumerate() {
            let truncated = |field| move |_: BitError| CodecError::Truncated { subvector, field };
            let corrupt = |field| CodecError::Corrupt { subvector, field };
            if spec.s == 0 {
                out.push(DecodedSubvector {
                    spec: *spec,
                    values: DecodedValues::Empty,
                    support: SupportSet::new(spec.n, Vec::new()).expect("empty set"),
                });
                continue;
            }
            let values = match header.coding {
                ValueCoding::Lloyd => {
                    let mu = r.read_f32().map_err(truncated(Field::Mean))?;
                    if !mu.is_finite() {
                        return Err(corrupt(Field::Mean));
                    }
                    let nu = r.read_f32().map_err(truncated(Field::Variance))?;
                    if !(nu.is_finite() && nu >= 0.0) {
                        return Err(corrupt(Field::Variance));
                    }
                    let width = value_index_bits(spec.s, spec.q);
                    let indices = read_indices(&mut r, spec.s, spec.q, width).map_err(|e| match e {
                        IndexError::Bits => CodecError::Truncated { subvector, field: Field::ValueIndices },
                        IndexError::Range => corrupt(Field::ValueIndices),
                    })?;
                    if nu == 0.0 && indices.iter().any(|&i| i != 0) {
                        return Err(corrupt(Field::ValueIndices));
                    }
                    DecodedValues::Lloyd { mu, nu, indices }
                }
                ValueCoding::Float32 => {
                    let mut values = Vec::with_capacity(spec.s);
                    for _ in 0..spec.s {
                        let v = r.read_f32().map_err(truncated(Field::Values))?;
                        if !v.is_finite() {
                            return Err(corrupt(Field::Values));
                        }
                        values.push(v);
                    }
                    DecodedValues::Float32(values)
                }
            };
            let rank = r.read_biguint(spec.position_bits()).map_err(truncated(Field::PositionRank))?;
            let support = position::unrank(spec.n, spec.s, &rank).map_err(|e| match e {
                PositionError::RankOutOfRange { .. } => corrupt(Field::PositionRank),
                other => unreachable!("unrank on a validated header: {other}"),
            })?;
            out.push(DecodedSubvector { spec: *spec, values, support });
        }
        Ok(out)
    }

    /// Reconstructs the dense update `ĝ` of length `header.n`.
    pub fn reconstruct(&self, c: &CompressedUpdate) -> Result<Vec<f64>, CodecError> {
        let decoded = self.decode(c)?;
        let layout = self.layout(c.header.n, c.header.l());
        let mut parts = Vec::with_capacity(decoded.len());
        for (index, d) in decoded.iter().enumerate() {
            let mut dense = vec![0.0; d.spec.n];
            let estimate = self.estimate_values(index, d)?;
            for (&p, v) in d.support.positions().iter().zip(estimate) {
                dense[p] = v;
            }
            parts.push(dense);
        }
        Ok(layout.merge(&parts))
    }

    /// LMMSE estimate of the selected values, in support order.
    fn estimate_values(&self, index: usize, d: &DecodedSubvector) -> Result<Vec<f64>, CodecError> {
        Ok(match &d.values {
            DecodedValues::Empty => Vec::new(),
            DecodedValues::Float32(v) => v.iter().map(|&x| x as f64).collect(),
            DecodedValues::Lloyd { mu, nu, indices } => {
                let mu = *mu as f64;
                if *nu == 0.0 {
                    return Ok(vec![mu; d.spec.s]);
                }
                let s = d.spec.s;
                let quantizer = self.bank.get(d.spec.q).map_err(|source| CodecError::Quantizer { index, source })?;
                let scale = quantizer.gamma() / quantizer.psi();
                let x_hat: Vec<f64> = indices.iter().map(|&i| scale * quantizer.levels()[i]).collect();
                let u = self.transforms.transform(s, self.seeds.transform_seed(index as u64, s as u64))?;
                let sd = libm::sqrt(*nu as f64);
                u.inverse(&x_hat)?.into_iter().map(|v| sd * v + mu).collect()
            }
        })
    }
}

/// Largest `k` with `q^k < 2^64`.
fn chunk_len(q: usize) -> usize {
    let mut k = 0;
    let mut acc: u64 = 1;
    while let Some(next) = acc.checked_mul(q as u64) {
        acc = next;
        k += 1;
    }
    k
}

/// Mixed-radix packing, first index most significant.
fn write_indices(w: &mut BitWriter, indices: &[usize], q: usize, width: usize) {
    if q.is_power_of_two() {
        let b = q.trailing_zeros() as usize;
        for &i in indices {
            w.write_bits(i as u64, b);
        }
        return;
    }
    let k = chunk_len(q);
    let mut acc = BigUint::zero();
    for chunk in indices.chunks(k) {
        let mut radix: u64 = 1;
        let mut digit: u64 = 0;
        for &i in chunk {
            radix *= q as u64;
            digit = digit * q as u64 + i as u64;
        }
        acc = acc * radix + digit;
    }
    w.write_biguint(&acc, width).expect("index integer below Q^S");
}

enum IndexError {
    Bits,
    Range,
}

fn read_indices(r: &mut BitReader<'_>, s: usize, q: usize, width: usize) -> Result<Vec<usize>, IndexError> {
    if q.is_power_of_two() {
        let b = q.trailing_zeros() as usize;
        return (0..s).map(|_| r.read_bits(b).map(|v| v as usize).map_err(|_| IndexError::Bits)).collect();
    }
    let mut acc = r.read_biguint(width).map_err(|_| IndexError::Bits)?;
    let k = chunk_len(q);
    let mut out = vec![0usize; s];
    // Peel chunks from the least significant end; the last chunk may be short.
    let mut end = s;
    while end > 0 {
        let len = if end % k == 0 { k } else { end % k };
        let radix = (q as u64).pow(len as u32);
        let digit = (&acc % radix).to_u64().expect("remainder below radix");
        acc /= radix;
        let mut d = digit;
        for slot in out[end - len..end].iter_mut().rev() {
            *slot = (d % q as u64) as usize;
            d /= q as u64;
        }
        end -= len;
    }
    if !acc.is_zero() {
        return Err(IndexError::Range);
    }
    Ok(out)
}

/// `‖g - ĝ‖² / ‖g‖²`.
pub fn nmse(g: &[f64], g_hat: &[f64]) -> Result<f64, CodecError> {
    if g.len() != g_hat.len() {
        return Err(CodecError::LengthMismatch { expected: g.len(), got: g_hat.len() });
    }
    let energy = dot(g, g);
    if energy == 0.0 {
        return Err(CodecError::ZeroReference);
    }
    let err: f64 = g.iter().zip(g_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(err / energy)
}
