//! On-disk container for one compressed update, plus a readable dump.
//!
//! All integers are big-endian:
//!
//! ```text
//! "FSPL" | version u8 | q_max u8 | scope u8 | master u64 | round u64 | device u64
//! | n u64 | coding u8 | L u32 | L × (n_sub u32, S u32, Q u16) | bit length u64 | bytes
//! ```

use std::fmt::Write as _;

use fedspar_core::bits::BitBuf;
use fedspar_core::codec::{CodecContext, CodecError, DecodedValues, PayloadHeader, SubvectorSpec, ValueCoding};
use fedspar_core::param_opt::HEADER_BITS;
use fedspar_core::transform::TransformSource;
use fedspar_core::{CompressedUpdate, QuantizerBank, SeedContext, SeedScope};

pub const MAGIC: &[u8; 4] = b"FSPL";
pub const VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PayloadError {
    #[error("not a payload file (bad magic)")]
    Magic,
    #[error("unsupported payload version {0}")]
    Version(u8),
    #[error("file ends inside the {0}")]
    Truncated(&'static str),
    #[error("invalid {0}")]
    Invalid(&'static str),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("decode failed: {0}")]
    Codec(#[from] CodecError),
}

/// A compressed update with the seeds and codebook size needed to decode it.
#[derive(Debug, Clone, PartialEq)]
pub struct PayloadFile {
    pub q_max: usize,
    pub seeds: SeedContext,
    pub update: CompressedUpdate,
}

impl PayloadFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.update.header;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.q_max as u8);
        out.push(match self.seeds.scope {
            SeedScope::Static => 0,
            SeedScope::PerRound => 1,
        });
        for v in [self.seeds.master, self.seeds.round, self.seeds.device, h.n as u64] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.push(match h.coding {
            ValueCoding::Lloyd => 0,
            ValueCoding::Float32 => 1,
        });
        out.extend_from_slice(&(h.l() as u32).to_be_bytes());
        for s in &h.subvectors {
            out.extend_from_slice(&(s.n as u32).to_be_bytes());
            out.extend_from_slice(&(s.s as u32).to_be_bytes());
            out.extend_from_slice(&(s.q as u16).to_be_bytes());
        }
        out.extend_from_slice(&(self.update.bits.len() as u64).to_be_bytes());
        out.extend_from_slice(self.update.bits.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(PayloadError::Magic);
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(PayloadError::Version(version));
        }
        let q_max = r.u8("codebook size")? as usize;
        let scope = match r.u8("seed scope")? {
            0 => SeedScope::Static,
            1 => SeedScope::PerRound,
            _ => return Err(PayloadError::Invalid("seed scope")),
        };
        let master = r.u64("seeds")?;
        let round = r.u64("seeds")?;
        let device = r.u64("seeds")?;
        let n = r.u64("header")? as usize;
        let coding = match r.u8("header")? {
            0 => ValueCoding::Lloyd,
            1 => ValueCoding::Float32,
            _ => return Err(PayloadError::Invalid("value coding")),
        };
        let l = r.u32("header")? as usize;
        if l == 0 || l > n.max(1) {
            return Err(PayloadError::Invalid("sub-vector count"));
        }
        let mut subvectors = Vec::with_capacity(l);
        for _ in 0..l {
            let n_sub = r.u32("sub-vector table")? as usize;
            let s = r.u32("sub-vector table")? as usize;
            let q = r.u16("sub-vector table")? as usize;
            subvectors.push(SubvectorSpec::new(n_sub, s, q));
        }
        let len = r.u64("bit length")? as usize;
        let body = r.take(len.div_ceil(8), "payload bits")?;
        if r.pos != bytes.len() {
            return Err(PayloadError::Trailing(bytes.len() - r.pos));
        }
        let bits = BitBuf::from_bytes(body.to_vec(), len).ok_or(PayloadError::Invalid("bit length"))?;
        Ok(Self {
            q_max,
            seeds: SeedContext::new(master, round, device, scope),
            update: CompressedUpdate { header: PayloadHeader { n, coding, subvectors }, bits },
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], PayloadError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(PayloadError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, PayloadError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, PayloadError> {
        Ok(u16::from_be_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, PayloadError> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, PayloadError> {
        Ok(u64::from_be_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a payload and describes it: header, per-sub-vector `S`, `Q`,
/// `μ`, `ν` and the bit budget split.
pub fn describe(
    file: &PayloadFile,
    bank: &QuantizerBank,
    transforms: &dyn TransformSource,
) -> Result<String, PayloadError> {
    let h = &file.update.header;
    let ctx = CodecContext::new(bank, transforms, file.seeds);
    let decoded = ctx.decode(&file.update)?;
    let mut out = String::new();
    let coding = match h.coding {
        ValueCoding::Lloyd => "lloyd-max",
        ValueCoding::Float32 => "float32",
    };
    let _ = writeln!(out, "payload: N = {}, L = {}, coding = {coding}", h.n, h.l());
    let _ = writeln!(
        out,
        "seeds: master = {}, round = {}, device = {}, scope = {:?}",
        file.seeds.master, file.seeds.round, file.seeds.device, file.seeds.scope
    );
    let _ = writeln!(
        out,
        "bits: {} sent, {} from the header formula, {} kept entries",
        file.update.bits.len(),
        h.total_bits(),
        h.kept()
    );
    for (i, d) in decoded.iter().enumerate() {
        let spec = d.spec;
        let _ = write!(out, "sub-vector {i}: n = {}, S = {}", spec.n, spec.s);
        match &d.values {
            DecodedValues::Empty => {
                let _ = write!(out, ", empty");
            }
            DecodedValues::Lloyd { mu, nu, .. } => {
                let _ = write!(out, ", Q = {}, mu = {mu:e}, nu = {nu:e}", spec.q);
            }
            DecodedValues::Float32(v) => {
                let peak = v.iter().fold(0f32, |m, x| m.max(x.abs()));
                let _ = write!(out, ", max |value| = {peak:e}");
            }
        }
        let header_bits = if spec.s > 0 && h.coding == ValueCoding::Lloyd { HEADER_BITS } else { 0 };
        let value_bits = spec.value_bits(h.coding) - header_bits;
        let _ = writeln!(
            out,
            ", bits = {} (mean/variance {header_bits}, values {value_bits}, positions {})",
            spec.total_bits(h.coding),
            spec.position_bits()
        );
    }
    Ok(out)
}
