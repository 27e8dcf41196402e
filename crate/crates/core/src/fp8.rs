//! Software FP8 (E4M3 / E5M2) with per-tensor current scaling.
//!
//! Both formats are instances of [`MiniFloat`], a small sign/exponent/mantissa
//! encoding decoded directly from its bit fields. Encoding rounds to nearest
//! with ties to even, flushes magnitudes below half the smallest subnormal to
//! (signed) zero and saturates finite values above the largest finite value.
//! Infinities encode to the infinity codes where the format has them, so
//! every non-NaN code re-encodes to itself.
//!
//! E4M3 follows the "finite only" convention: no infinities, and only the
//! all-ones pattern `S.1111.111` is NaN. E5M2 is IEEE-like: an all-ones
//! exponent encodes infinities and NaNs.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// How the all-ones exponent field is interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Specials {
    /// Infinities (zero mantissa) and NaNs (nonzero mantissa).
    Ieee,
    /// Ordinary values except the all-ones mantissa, which is NaN.
    FiniteOnly,
}

/// A sign/exponent/mantissa float with `1 + exponent_bits + mantissa_bits`
/// bits and bias `2^(exponent_bits-1) - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MiniFloat {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub specials: Specials,
}

impl MiniFloat {
    pub const fn new(exponent_bits: u32, mantissa_bits: u32, specials: Specials) -> Self {
        MiniFloat {
            exponent_bits,
            mantissa_bits,
            specials,
        }
    }

    pub fn bias(&self) -> i32 {
        (1 << (self.exponent_bits - 1)) - 1
    }

    pub fn code_count(&self) -> u32 {
        1 << (1 + self.exponent_bits + self.mantissa_bits)
    }

    fn exp_mask(&self) -> u32 {
        (1 << self.exponent_bits) - 1
    }

    fn man_mask(&self) -> u32 {
        (1 << self.mantissa_bits) - 1
    }

    fn sign_bit(&self) -> u32 {
        1 << (self.exponent_bits + self.mantissa_bits)
    }

    /// Largest encodable (exponent field, mantissa field) pair.
    fn max_fields(&self) -> (u32, u32) {
        match self.specials {
            Specials::Ieee => (self.exp_mask() - 1, self.man_mask()),
            Specials::FiniteOnly => (self.exp_mask(), self.man_mask() - 1),
        }
    }

    pub fn max_finite(&self) -> f64 {
        let (e, m) = self.max_fields();
        self.decode(e << self.mantissa_bits | m)
    }

    pub fn min_subnormal(&self) -> f64 {
        2f64.powi(1 - self.bias() - self.mantissa_bits as i32)
    }

    pub fn min_normal(&self) -> f64 {
        2f64.powi(1 - self.bias())
    }

    fn nan_code(&self) -> u32 {
        self.exp_mask() << self.mantissa_bits | self.man_mask()
    }

    /// Exact value of `code`. NaN patterns decode to NaN, IEEE infinities to ±∞.
    pub fn decode(&self, code: u32) -> f64 {
        let m_bits = self.mantissa_bits;
        let negative = code & self.sign_bit() != 0;
        let ef = (code >> m_bits) & self.exp_mask();
        let mf = code & self.man_mask();
        let magnitude = if ef == self.exp_mask() && self.specials == Specials::Ieee {
            if mf == 0 {
                f64::INFINITY
            } else {
                f64::NAN
            }
        } else if ef == self.exp_mask() && mf == self.man_mask() {
            f64::NAN
        } else if ef == 0 {
            mf as f64 * self.min_subnormal()
        } else {
            (1.0 + mf as f64 / (1u64 << m_bits) as f64) * 2f64.powi(ef as i32 - self.bias())
        };
        if negative {
            -magnitude
        } else {
            magnitude
        }
    }

    /// Nearest code to `v` (ties to even), saturating finite values at the
    /// largest finite value. NaN maps to the canonical NaN pattern and ±∞ to
    /// the infinity codes where the format has them.
    pub fn encode(&self, v: f64) -> u32 {
        if v.is_nan() {
            return self.nan_code();
        }
        let sign = if v.is_sign_negative() { self.sign_bit() } else { 0 };
        let a = v.abs();
        let (max_e, max_m) = self.max_fields();
        let saturated = sign | max_e << self.mantissa_bits | max_m;
        if a.is_infinite() && self.specials == Specials::Ieee {
            return sign | self.exp_mask() << self.mantissa_bits;
        }
        if a >= self.max_finite() {
            return saturated;
        }
        let scale_m = (1u64 << self.mantissa_bits) as f64;
        if a < self.min_normal() {
            // subnormal grid; q == 2^m lands exactly on the smallest normal
            let q = (a / self.min_subnormal()).round_ties_even() as u32;
            return sign | q;
        }
        // a is a normal f64 here, so its exponent field is floor(log2 a)
        let mut e = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
        let mant = a / 2f64.powi(e);
        let mut q = ((mant - 1.0) * scale_m).round_ties_even() as u32;
        if q == 1 << self.mantissa_bits {
            q = 0;
            e += 1;
        }
        let ef = e + self.bias();
        if ef > max_e as i32 || (ef == max_e as i32 && q > max_m) {
            return saturated;
        }
        sign | (ef as u32) << self.mantissa_bits | q
    }

    /// `decode(encode(v))`
    pub fn round(&self, v: f64) -> f64 {
        self.decode(self.encode(v))
    }

    /// Fake-quantize a tensor with per-tensor current scaling in this format.
    pub fn quantize_dequantize(&self, t: &Tensor) -> Tensor {
        let scale = scale_for(t.max_abs(), self.max_finite());
        let inv = 1.0 / scale;
        let data = t.data().iter().map(|&v| self.round(v * scale) * inv).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }
}

/// The two 8-bit formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fp8Format {
    E4M3,
    E5M2,
}

pub const E4M3: MiniFloat = MiniFloat::new(4, 3, Specials::FiniteOnly);
pub const E5M2: MiniFloat = MiniFloat::new(5, 2, Specials::Ieee);

impl Fp8Format {
    pub fn spec(self) -> MiniFloat {
        match self {
            Fp8Format::E4M3 => E4M3,
            Fp8Format::E5M2 => E5M2,
        }
    }

    pub fn exponent_bits(self) -> u32 {
        self.spec().exponent_bits
    }

    pub fn mantissa_bits(self) -> u32 {
        self.spec().mantissa_bits
    }

    pub fn bias(self) -> i32 {
        self.spec().bias()
    }

    pub fn max_finite(self) -> f64 {
        codec(self).max_finite
    }

    pub fn min_subnormal(self) -> f64 {
        1.0 / codec(self).inv_min_subnormal
    }

    /// Serialized tag byte.
    pub fn tag(self) -> u8 {
        match self {
            Fp8Format::E4M3 => 0,
            Fp8Format::E5M2 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Fp8Format::E4M3),
            1 => Ok(Fp8Format::E5M2),
            t => Err(Error::Checkpoint(format!("unknown FP8 format tag {t}"))),
        }
    }
}

/// Precomputed constants and decode table of an 8-bit format. Encoding is
/// the same rounding as [`MiniFloat::encode`] done on the `f64` bit fields.
struct Codec {
    spec: MiniFloat,
    table: [f64; 256],
    max_finite: f64,
    min_normal: f64,
    inv_min_subnormal: f64,
    saturated: u8,
    max_fields: (u32, u32),
}

impl Codec {
    fn new(spec: MiniFloat) -> Self {
        let mut table = [0.0; 256];
        for (c, v) in table.iter_mut().enumerate() {
            *v = spec.decode(c as u32);
        }
        let (e, m) = spec.max_fields();
        Codec {
            spec,
            table,
            max_finite: spec.max_finite(),
            min_normal: spec.min_normal(),
            inv_min_subnormal: 1.0 / spec.min_subnormal(),
            saturated: (e << spec.mantissa_bits | m) as u8,
            max_fields: (e, m),
        }
    }

    #[inline]
    fn decode(&self, code: u8) -> f64 {
        self.table[code as usize]
    }

    #[inline]
    fn encode(&self, v: f64) -> u8 {
        if v.is_nan() {
            return self.spec.nan_code() as u8;
        }
        let m_bits = self.spec.mantissa_bits;
        let sign = if v.is_sign_negative() { self.spec.sign_bit() as u8 } else { 0 };
        let a = v.abs();
        if a.is_infinite() && self.spec.specials == Specials::Ieee {
            return sign | (self.spec.exp_mask() << m_bits) as u8;
        }
        if a >= self.max_finite {
            return sign | self.saturated;
        }
        if a < self.min_normal {
            return sign | (a * self.inv_min_subnormal).round_ties_even() as u8;
        }
        let bits = a.to_bits();
        let mut e = ((bits >> 52) & 0x7ff) as i32 - 1023;
        let frac = bits & ((1u64 << 52) - 1);
        let shift = 52 - m_bits;
        let mut q = (frac >> shift) as u32;
        let rem = frac & ((1u64 << shift) - 1);
        let half = 1u64 << (shift - 1);
        if rem > half || (rem == half && q & 1 == 1) {
            q += 1;
        }
        if q == 1 << m_bits {
            q = 0;
            e += 1;
        }
        let ef = e + self.spec.bias();
        let (max_e, max_m) = self.max_fields;
        if ef > max_e as i32 || (ef == max_e as i32 && q > max_m) {
            return sign | self.saturated;
        }
        sign | ((ef as u32) << m_bits | q) as u8
    }
}

fn codec(format: Fp8Format) -> &'static Codec {
    static CODECS: OnceLock<[Codec; 2]> = OnceLock::new();
    let all = CODECS.get_or_init(|| [Codec::new(E4M3), Codec::new(E5M2)]);
    &all[format.tag() as usize]
}

pub fn encode_fp8(value: f64, format: Fp8Format) -> u8 {
    codec(format).encode(value)
}

pub fn decode_fp8(code: u8, format: Fp8Format) -> f64 {
    codec(format).decode(code)
}

fn scale_for(amax: f64, max_finite: f64) -> f64 {
    if amax == 0.0 {
        return 1.0;
    }
    let s = max_finite / amax;
    if s.is_finite() {
        s
    } else {
        f64::MAX
    }
}

/// `max_finite / amax(|t|)`, or 1 for an all-zero tensor.
pub fn compute_scale(t: &Tensor, format: Fp8Format) -> Result<f64> {
    t.ensure_finite("compute_scale")?;
    Ok(scale_for(t.max_abs(), format.max_finite()))
}

/// One byte per element plus a single per-tensor scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Fp8Tensor {
    payload: Vec<u8>,
    scale: f64,
    format: Fp8Format,
    shape: Vec<usize>,
}

impl Fp8Tensor {
    pub fn from_parts(payload: Vec<u8>, scale: f64, format: Fp8Format, shape: Vec<usize>) -> Result<Self> {
        if payload.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("fp8_tensor", "payload length does not match shape"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("FP8 scale must be positive and finite, got {scale}")));
        }
        Ok(Fp8Tensor {
            payload,
            scale,
            format,
            shape,
        })
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn format(&self) -> Fp8Format {
        self.format
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dequantize(&self) -> Tensor {
        let codec = codec(self.format);
        let inv = 1.0 / self.scale;
        let data = self.payload.iter().map(|&c| codec.decode(c) * inv).collect();
        Tensor::new(self.shape.clone(), data).expect("payload matches shape")
    }

    /// Tag byte, little-endian `f64` scale, then the payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.payload.len());
        out.push(self.format.tag());
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8], shape: Vec<usize>) -> Result<Self> {
        if bytes.len() < 9 {
            return Err(Error::Checkpoint("truncated FP8 tensor".into()));
        }
        let format = Fp8Format::from_tag(bytes[0])?;
        let scale = f64::from_le_bytes(bytes[1..9].try_into().expect("8 bytes"));
        Fp8Tensor::from_parts(bytes[9..].to_vec(), scale, format, shape)
    }
}

/// Per-tensor current scaling: compute the scale from the tensor's own
/// absolute maximum, multiply, and cast.
pub fn quantize(t: &Tensor, format: Fp8Format) -> Result<Fp8Tensor> {
    let scale = compute_scale(t, format)?;
    let codec = codec(format);
    let payload = t.data().iter().map(|&v| codec.encode(v * scale)).collect();
    Ok(Fp8Tensor {
        payload,
        scale,
        format,
        shape: t.shape().to_vec(),
    })
}

fn matrix_dims(t: &Fp8Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape("qgemm", format!("expected a matrix, got {s:?}"))),
    }
}

/// `dequantize(a) · dequantize(b)` accumulated in `f64`.
pub fn qgemm(a: &Fp8Tensor, b: &Fp8Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a)?;
    let (k2, n) = matrix_dims(b)?;
    if k != k2 {
        return Err(Error::shape("qgemm", format!("[{m},{k}] · [{k2},{n}]")));
    }
    let out = kernels::matmul(a.dequantize().data(), b.dequantize().data(), m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `dequantize(x) · dequantize(w)ᵀ` for `x[n,in]`, `w[out,in]`.
pub fn qgemm_nt(x: &Fp8Tensor, w: &Fp8Tensor) -> Result<Tensor> {
    let (n, din) = matrix_dims(x)?;
    let (dout, din2) = matrix_dims(w)?;
    if din != din2 {
        return Err(Error::shape("qgemm_nt", format!("[{n},{din}] · [{dout},{din2}]ᵀ")));
    }
    let out = kernels::matmul_nt(x.dequantize().data(), w.dequantize().data(), n, din, dout);
    Tensor::new(vec![n, dout], out)
}

/// Which layers keep their linear layers in high precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionPolicy {
    pub high_precision_prefix: usize,
    pub high_precision_suffix: usize,
}

impl Default for PrecisionPolicy {
    fn default() -> Self {
        PrecisionPolicy {
            high_precision_prefix: 4,
            high_precision_suffix: 4,
        }
    }
}

impl PrecisionPolicy {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.high_precision_prefix + self.high_precision_suffix > n_layers {
            return Err(Error::InvalidArgument(format!(
                "precision policy keeps {}+{} layers in high precision but the model has {n_layers}",
                self.high_precision_prefix, self.high_precision_suffix
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerPrecision {
    Fp8,
    High,
}

pub fn assign_precision(layer_index: usize, n_layers: usize, policy: &PrecisionPolicy) -> Result<LayerPrecision> {
    if layer_index >= n_layers {
        return Err(Error::InvalidArgument(format!("layer {layer_index} out of range for {n_layers} layers")));
    }
    let high = layer_index < policy.high_precision_prefix
        || layer_index + policy.high_precision_suffix >= n_layers;
    Ok(if high { LayerPrecision::High } else { LayerPrecision::Fp8 })
}
