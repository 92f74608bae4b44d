//! Versioned little-endian weight container.
//!
//! ```text
//! "PGTW" u32:version u8:variant u8:policy-kind u8:numbering f64:alpha u32:base-channels
//! u32:tensor-count
//!   per tensor: u16:name-len name u8:rank(4) 4×u32:dims u8:dtype [u8:bits i16:frac] payload
//! u32:metadata-len metadata (UTF-8 JSON)
//! ```
//!
//! Payloads are f32 or f64 values, or signed fixed-point codes stored in
//! `ceil(bits / 8)` bytes each.

use crate::error::{Error, Result};
use crate::model::graph::{build, ModelGraph, Variant};
use crate::model::policy::{PolicyKind, ScalingPolicy, StageNumbering};
use crate::model::{Params, PgtNet};
use crate::tensor::{Scalar, Tensor4};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"PGTW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    /// Two's-complement code `q` meaning `q · 2^(−frac)`.
    Fixed {
        bits: u8,
        frac: i16,
    },
}

impl DType {
    pub fn of<T: Scalar>() -> Self {
        if T::NAME == "f32" {
            DType::F32
        } else {
            DType::F64
        }
    }

    /// Payload bytes per element.
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::Fixed { bits, .. } => (bits as usize).div_ceil(8),
        }
    }
}

/// One tensor as stored. Fixed-point tensors keep their integer codes in `codes`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: [usize; 4],
    pub dtype: DType,
    pub values: Vec<f64>,
    pub codes: Vec<i64>,
}

impl StoredTensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Real values, dequantizing fixed-point codes.
    pub fn real_values(&self) -> Vec<f64> {
        match self.dtype {
            DType::Fixed { frac, .. } => {
                let step = (-(frac as f64)).exp2();
                self.codes.iter().map(|&q| q as f64 * step).collect()
            }
            _ => self.values.clone(),
        }
    }
}

/// Parsed weight container.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub variant: Variant,
    pub policy: ScalingPolicy,
    pub base_channels: usize,
    pub tensors: Vec<StoredTensor>,
    pub metadata: String,
}

impl WeightFile {
    pub fn from_net<T: Scalar>(net: &PgtNet<T>) -> Self {
        let names = net.graph.parameter_names();
        let tensors = names
            .into_iter()
            .zip(net.params.tensors())
            .map(|(name, t)| StoredTensor {
                name,
                shape: t.shape().dims(),
                dtype: DType::of::<T>(),
                values: t.data().iter().map(|v| v.to_f64()).collect(),
                codes: Vec::new(),
            })
            .collect();
        WeightFile {
            variant: net.graph.variant,
            policy: net.graph.policy,
            base_channels: net.graph.base_channels,
            tensors,
            metadata: String::new(),
        }
    }

    pub fn graph(&self) -> Result<ModelGraph> {
        build(self.variant, self.policy, self.base_channels)
    }

    /// Rebuilds the network, checking every tensor name and shape against the graph.
    pub fn to_net<T: Scalar>(&self) -> Result<PgtNet<T>> {
        let graph = self.graph()?;
        let names = graph.parameter_names();
        if names.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "{} tensors stored, {} expects {}",
                self.tensors.len(),
                self.variant,
                names.len()
            )));
        }
        let mut params = Params::zeros(&graph);
        for ((name, slot), st) in names.iter().zip(params.tensors_mut()).zip(&self.tensors) {
            if *name != st.name || slot.shape().dims() != st.shape {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match graph entry {name} {}",
                    st.name,
                    st.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor4::from_vec(
                st.shape,
                st.real_values().into_iter().map(T::from_f64).collect(),
            )?;
        }
        Ok(PgtNet { graph, params })
    }

    /// Element type shared by all tensors, if uniform.
    /// Element type of the first tensor, if every tensor shares its kind and
    /// width (fixed-point fraction lengths may differ).
    pub fn dtype(&self) -> Option<DType> {
        let first = self.tensors.first()?.dtype;
        let same = |d: DType| match (d, first) {
            (DType::Fixed { bits: a, .. }, DType::Fixed { bits: b, .. }) => a == b,
            (a, b) => a == b,
        };
        self.tensors.iter().all(|t| same(t.dtype)).then_some(first)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.push(self.variant.tag());
        out.push(match self.policy.kind {
            PolicyKind::Proposed => 0,
            PolicyKind::AllPositive => 1,
            PolicyKind::ProposedShifted => 2,
        });
        out.push(match self.policy.numbering {
            StageNumbering::Parallel => 0,
            StageNumbering::Sequential => 1,
        });
        out.extend_from_slice(&self.policy.alpha.to_le_bytes());
        out.extend_from_slice(&(self.base_channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(4);
            for d in t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t.dtype {
                DType::F32 => {
                    out.push(0);
                    for &v in &t.values {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    out.push(1);
                    for &v in &t.values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                DType::Fixed { bits, frac } => {
                    out.push(2);
                    out.push(bits);
                    out.extend_from_slice(&frac.to_le_bytes());
                    let w = t.dtype.width();
                    for &q in &t.codes {
                        out.extend_from_slice(&q.to_le_bytes()[..w]);
                    }
                }
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(Error::Format("not a weight file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Format(format!(
                "weight file version {version}, this build reads {WEIGHTS_VERSION}"
            )));
        }
        let variant = Variant::from_tag(r.u8()?)?;
        let kind = match r.u8()? {
            0 => PolicyKind::Proposed,
            1 => PolicyKind::AllPositive,
            2 => PolicyKind::ProposedShifted,
            t => return Err(Error::Format(format!("unknown policy tag {t}"))),
        };
        let numbering = match r.u8()? {
            0 => StageNumbering::Parallel,
            1 => StageNumbering::Sequential,
            t => return Err(Error::Format(format!("unknown stage numbering tag {t}"))),
        };
        let alpha = f64::from_le_bytes(r.array()?);
        let base_channels = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if r.u8()? != 4 {
                return Err(Error::Format(format!("tensor {name} is not rank 4")));
            }
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u32()? as usize;
            }
            let count: usize = shape.iter().product();
            let (dtype, values, codes) = match r.u8()? {
                0 => {
                    let raw = r.take(count * 4)?;
                    let v = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect();
                    (DType::F32, v, Vec::new())
                }
                1 => {
                    let raw = r.take(count * 8)?;
                    let v = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    (DType::F64, v, Vec::new())
                }
                2 => {
                    let bits = r.u8()?;
                    if !(2..=32).contains(&bits) {
                        return Err(Error::Format(format!(
                            "fixed-point width {bits} unsupported"
                        )));
                    }
                    let frac = i16::from_le_bytes(r.array()?);
                    let dtype = DType::Fixed { bits, frac };
                    let w = dtype.width();
                    let raw = r.take(count * w)?;
                    let codes = raw.chunks_exact(w).map(|c| sign_extend(c)).collect();
                    (dtype, Vec::new(), codes)
                }
                t => return Err(Error::Format(format!("unknown dtype tag {t} for {name}"))),
            };
            tensors.push(StoredTensor {
                name,
                shape,
                dtype,
                values,
                codes,
            });
        }
        let mlen = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(mlen)?.to_vec())
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let policy = ScalingPolicy {
            kind,
            alpha,
            numbering,
        };
        Ok(WeightFile {
            variant,
            policy,
            base_channels,
            tensors,
            metadata,
        })
    }
}

fn sign_extend(c: &[u8]) -> i64 {
    let mut b = [0u8; 8];
    b[..c.len()].copy_from_slice(c);
    let shift = 64 - 8 * c.len() as u32;
    (i64::from_le_bytes(b) << shift) >> shift
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

pub fn save_weights<T: Scalar>(net: &PgtNet<T>) -> Vec<u8> {
    WeightFile::from_net(net).to_bytes()
}

/// Parses a container; `expected` rejects files of another variant.
pub fn load_weights<T: Scalar>(
    bytes: &[u8],
    expected: Option<Variant>,
) -> Result<(PgtNet<T>, WeightFile)> {
    let wf = WeightFile::from_bytes(bytes)?;
    if let Some(v) = expected {
        if v != wf.variant {
            return Err(Error::VariantMismatch {
                expected: v.to_string(),
                found: wf.variant.to_string(),
            });
        }
    }
    Ok((wf.to_net()?, wf))
}
