//! Binary checkpoint format.
//!
//! Layout: the magic `NHCK`, a little-endian `u32` version, a little-endian
//! `u64` header length, a JSON header, then the tensor payloads. The header
//! carries the architecture and one entry per tensor (`name`, `dtype`,
//! `shape`, `byte_offset` into the payload section, plus `scale` for FP8).
//! Payloads are little-endian, packed in header order with no gaps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp8::{self, Fp8Format, Fp8Tensor};
use crate::model::{ArchSpec, ModelWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NHCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    Fp8e4m3,
    Fp8e5m2,
}

impl DType {
    pub fn elem_bytes(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::Fp8e4m3 | DType::Fp8e5m2 => 1,
        }
    }

    fn fp8(self) -> Option<Fp8Format> {
        match self {
            DType::Fp8e4m3 => Some(Fp8Format::E4M3),
            DType::Fp8e5m2 => Some(Fp8Format::E5M2),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl TensorEntry {
    pub fn byte_len(&self) -> u64 {
        (self.shape.iter().product::<usize>() * self.dtype.elem_bytes()) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub arch: ArchSpec,
    pub tensors: Vec<TensorEntry>,
}

/// A stored tensor in its on-disk representation.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
    Fp8(Fp8Tensor),
}

impl Payload {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Fp8(t) => out.extend_from_slice(t.payload()),
        }
    }

    pub fn to_tensor(&self, shape: &[usize]) -> Result<Tensor> {
        match self {
            Payload::F64(v) => Tensor::new(shape.to_vec(), v.clone()),
            Payload::F32(v) => Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f64).collect()),
            Payload::Fp8(t) => Ok(t.dequantize()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub payloads: Vec<Payload>,
}

impl Checkpoint {
    /// Stores every parameter of `weights` as `dtype`. FP8 uses per-tensor
    /// current scaling, so only `F64` round-trips the weights themselves.
    pub fn from_weights(weights: &ModelWeights, dtype: DType) -> Result<Self> {
        let mut tensors = Vec::new();
        let mut payloads = Vec::new();
        let mut offset = 0u64;
        for (name, t) in weights.named_params() {
            let (payload, scale) = match dtype.fp8() {
                Some(f) => {
                    let q = fp8::quantize(t, f)?;
                    let s = q.scale();
                    (Payload::Fp8(q), Some(s))
                }
                None if dtype == DType::F64 => (Payload::F64(t.data().to_vec()), None),
                None => (Payload::F32(t.data().iter().map(|&x| x as f32).collect()), None),
            };
            let entry = TensorEntry {
                name,
                dtype,
                shape: t.shape().to_vec(),
                byte_offset: offset,
                scale,
            };
            offset += entry.byte_len();
            tensors.push(entry);
            payloads.push(payload);
        }
        Ok(Checkpoint {
            header: Header {
                arch: weights.spec.clone(),
                tensors,
            },
            payloads,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let body: u64 = self.header.tensors.iter().map(TensorEntry::byte_len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + body as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.payloads {
            p.encode(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing NHCK magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let body_start = 16usize
            .checked_add(usize::try_from(header_len).map_err(|_| bad("header length overflows"))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        header.arch.validate()?;
        let body = &bytes[body_start..];
        let mut expected = 0u64;
        let mut payloads = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.byte_offset != expected {
                return Err(Error::Checkpoint(format!(
                    "tensor {} at offset {}, expected {expected}",
                    e.name, e.byte_offset
                )));
            }
            let len = e.byte_len();
            let end = expected + len;
            if end > body.len() as u64 {
                return Err(Error::Checkpoint(format!("tensor {} runs past the end of the file", e.name)));
            }
            let raw = &body[expected as usize..end as usize];
            let payload = match e.dtype {
                DType::F64 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::F32 => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                DType::Fp8e4m3 | DType::Fp8e5m2 => {
                    let scale = e
                        .scale
                        .ok_or_else(|| Error::Checkpoint(format!("FP8 tensor {} has no scale", e.name)))?;
                    Payload::Fp8(Fp8Tensor::from_parts(raw.to_vec(), scale, e.dtype.fp8().unwrap(), e.shape.clone())?)
                }
            };
            payloads.push(payload);
            expected = end;
        }
        if expected != body.len() as u64 {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { header, payloads })
    }

    /// Decodes the payloads into weights, checking names and shapes against
    /// the architecture.
    pub fn to_weights(&self) -> Result<ModelWeights> {
        let expected = ModelWeights::expected_shapes(&self.header.arch);
        if expected.len() != self.header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, architecture needs {}",
                self.header.tensors.len(),
                expected.len()
            )));
        }
        let mut tensors = Vec::with_capacity(expected.len());
        for ((name, shape), (e, p)) in expected.iter().zip(self.header.tensors.iter().zip(&self.payloads)) {
            if name != &e.name || shape != &e.shape {
                return Err(Error::Checkpoint(format!("stored {} {:?}, expected {name} {shape:?}", e.name, e.shape)));
            }
            tensors.push(p.to_tensor(&e.shape)?);
        }
        ModelWeights::from_tensors(&self.header.arch, tensors)
    }
}

pub fn save(path: &Path, weights: &ModelWeights, dtype: DType) -> Result<()> {
    let bytes = Checkpoint::from_weights(weights, dtype)?.to_bytes()?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelWeights> {
    let bytes = std::fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)?.to_weights()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dims;

    fn weights() -> ModelWeights {
        let dims = Dims {
            d_model: 8,
            d_ffn: 16,
            n_q_heads: 2,
            n_kv_heads: 1,
            d_state: 4,
            n_groups: 1,
            mamba_head_dim: 4,
            mamba_expand: 2,
            conv_window: 3,
            vocab_size: 11,
        };
        ModelWeights::init(&ArchSpec::hybrid(6, 0.17, &dims).unwrap(), 1).unwrap()
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let w = weights();
        let bytes = Checkpoint::from_weights(&w, DType::F64).unwrap().to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap().to_weights().unwrap();
        for ((_, a), (_, b)) in w.named_params().iter().zip(back.named_params()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
        assert_eq!(&bytes[..4], b"NHCK");
    }

    #[test]
    fn every_dtype_reserializes_identically() {
        let w = weights();
        for dtype in [DType::F64, DType::F32, DType::Fp8e4m3, DType::Fp8e5m2] {
            let ck = Checkpoint::from_weights(&w, dtype).unwrap();
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
            let body: u64 = ck.header.tensors.iter().map(TensorEntry::byte_len).sum();
            assert_eq!(bytes.len(), 16 + header_len + body as usize);
            back.to_weights().unwrap();
        }
    }

    #[test]
    fn fp8_payload_decodes_to_quantized_values() {
        let w = weights();
        let ck = Checkpoint::from_weights(&w, DType::Fp8e4m3).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap().to_weights().unwrap();
        let q = fp8::quantize(&w.head, Fp8Format::E4M3).unwrap().dequantize();
        assert_eq!(back.head, q);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let w = weights();
        let bytes = Checkpoint::from_weights(&w, DType::F32).unwrap().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).is_err());
    }
}
