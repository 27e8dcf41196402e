//! Closed-form memory and FLOP accounting.
//!
//! Everything here is a function of the [`ArchSpec`] alone, which is what
//! lets the compression search filter candidates without materializing them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchSpec, LayerKind};

/// Knobs of the memory estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    /// Bits per stored weight (4 for FP4, 8 for FP8, 16 for BF16, ...).
    pub weight_bits: u32,
    /// Bytes per cached key/value and per recurrent-state element.
    #[serde(default = "default_elem_bytes")]
    pub cache_elem_bytes: u64,
    /// Fixed allowance for activations and scratch buffers.
    #[serde(default)]
    pub activation_reserve: u64,
    /// Extra bytes as a fraction of the weight bytes (allocator slack,
    /// runtime buffers). Zero by default.
    #[serde(default)]
    pub overhead_fraction: f64,
}

fn default_elem_bytes() -> u64 {
    2
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            weight_bits: 16,
            cache_elem_bytes: default_elem_bytes(),
            activation_reserve: 0,
            overhead_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub params: u64,
    pub weight_bits: u32,
    pub seq: u64,
    pub batch: u64,
    pub weight_bytes: u64,
    pub kv_bytes: u64,
    pub state_bytes: u64,
    pub activation_reserve: u64,
    pub overhead_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryReport {
    pub fn total_gib(&self) -> f64 {
        self.total_bytes as f64 / (1u64 << 30) as f64
    }

    /// Components in the order they are charged against a budget: fixed
    /// costs first, the context-dependent cache last.
    pub fn components(&self) -> [(&'static str, u64); 5] {
        [
            ("weights", self.weight_bytes),
            ("overhead", self.overhead_bytes),
            ("activations", self.activation_reserve),
            ("mamba_state", self.state_bytes),
            ("kv_cache", self.kv_bytes),
        ]
    }

    /// Fails with [`Error::OutOfMemory`] naming the first component whose
    /// cumulative total exceeds `budget`.
    pub fn check_budget(&self, budget: u64) -> Result<()> {
        let mut running = 0u64;
        for (component, bytes) in self.components() {
            running += bytes;
            if running > budget {
                return Err(Error::OutOfMemory {
                    component,
                    required: self.total_bytes,
                    budget,
                });
            }
        }
        Ok(())
    }
}

/// Bytes of cached keys and values: `Σ_attn 2·n_kv·head_dim·seq·batch·elem`.
pub fn kv_bytes(spec: &ArchSpec, seq: u64, batch: u64, elem_bytes: u64) -> u64 {
    let per_layer = 2 * (spec.n_kv_heads * spec.attn_head_dim()) as u64;
    spec.count(LayerKind::Attention) as u64 * per_layer * seq * batch * elem_bytes
}

/// Elements of recurrent state carried by one Mamba-2 layer for one
/// sequence: the SSM state plus the convolution tail.
pub fn mamba_state_elems(spec: &ArchSpec) -> u64 {
    let ssm = spec.ssd_dims().state_len();
    let conv = spec.conv_window.saturating_sub(1) * spec.conv_channels();
    (ssm + conv) as u64
}

/// Bytes of Mamba-2 state; independent of sequence length.
pub fn state_bytes(spec: &ArchSpec, batch: u64, elem_bytes: u64) -> u64 {
    spec.count(LayerKind::Mamba2) as u64 * mamba_state_elems(spec) * batch * elem_bytes
}

/// Weight bytes for `params` parameters at `bits` each, rounded up.
pub fn weight_bytes(params: u64, bits: u32) -> u64 {
    (params as u128 * bits as u128).div_ceil(8) as u64
}

pub fn memory_report(spec: &ArchSpec, seq: u64, batch: u64, cfg: &MemoryConfig) -> Result<MemoryReport> {
    if seq == 0 || batch == 0 || cfg.weight_bits == 0 {
        return Err(Error::InvalidArgument("memory report needs positive seq, batch and bit width".into()));
    }
    if !(cfg.overhead_fraction >= 0.0 && cfg.overhead_fraction.is_finite()) {
        return Err(Error::InvalidArgument(format!("overhead_fraction {}", cfg.overhead_fraction)));
    }
    let params = spec.count_params();
    let weights = weight_bytes(params, cfg.weight_bits);
    let kv = kv_bytes(spec, seq, batch, cfg.cache_elem_bytes);
    let state = state_bytes(spec, batch, cfg.cache_elem_bytes);
    let overhead = (weights as f64 * cfg.overhead_fraction).ceil() as u64;
    Ok(MemoryReport {
        params,
        weight_bits: cfg.weight_bits,
        seq,
        batch,
        weight_bytes: weights,
        kv_bytes: kv,
        state_bytes: state,
        activation_reserve: cfg.activation_reserve,
        overhead_bytes: overhead,
        total_bytes: weights + kv + state + cfg.activation_reserve + overhead,
    })
}

/// Largest batch whose memory fits `budget` at context `seq`, found by
/// doubling and then bisecting (memory is monotone in batch).
pub fn max_feasible_batch(spec: &ArchSpec, seq: u64, cfg: &MemoryConfig, budget: u64) -> Result<u64> {
    let fits = |b: u64| -> Result<bool> { Ok(memory_report(spec, seq, b, cfg)?.check_budget(budget).is_ok()) };
    if !fits(1)? {
        // surface the structured error for batch 1
        memory_report(spec, seq, 1, cfg)?.check_budget(budget)?;
    }
    let mut lo = 1u64;
    let mut hi = 2u64;
    while fits(hi)? {
        lo = hi;
        hi = hi.checked_mul(2).ok_or_else(|| Error::InvalidArgument("batch search overflow".into()))?;
    }
    // invariant: fits(lo), !fits(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Analytic FLOPs of one decode step, by layer type. Multiply-accumulates
/// count as two FLOPs; norms and pointwise activations are not counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub mamba: u64,
    pub attention: u64,
    pub ffn: u64,
    pub head: u64,
}

impl FlopLedger {
    pub fn total(&self) -> u64 {
        self.mamba + self.attention + self.ffn + self.head
    }
}

/// FLOPs of one Mamba-2 layer per token: projections, depthwise conv, state
/// update and readout.
pub fn mamba_step_flops(spec: &ArchSpec) -> u64 {
    let d = spec.d_model as u64;
    let proj = 2 * d * spec.mamba_in_width() as u64 + 2 * spec.d_inner() as u64 * d;
    let conv = 2 * (spec.conv_channels() * spec.conv_window) as u64;
    let scan = 4 * spec.ssd_dims().state_len() as u64;
    proj + conv + scan
}

/// FLOPs of one attention layer for a token attending over `attended`
/// positions (itself included).
pub fn attention_step_flops(spec: &ArchSpec, attended: u64) -> u64 {
    let d = spec.d_model as u64;
    let dh = spec.attn_head_dim() as u64;
    let (hq, hkv) = (spec.n_q_heads as u64, spec.n_kv_heads as u64);
    let proj = 2 * d * (hq + 2 * hkv) * dh + 2 * hq * dh * d;
    let reads = 4 * hq * dh * attended;
    proj + reads
}

pub fn ffn_step_flops(spec: &ArchSpec) -> u64 {
    4 * (spec.d_model * spec.d_ffn) as u64
}

/// FLOPs to produce the token at 0-based `position`, which attends over
/// `position + 1` cached entries.
pub fn decode_step_flops(spec: &ArchSpec, position: u64) -> FlopLedger {
    let mut ledger = FlopLedger {
        head: 2 * (spec.d_model * spec.vocab_size) as u64,
        ..Default::default()
    };
    for kind in &spec.layers {
        match kind {
            LayerKind::Mamba2 => ledger.mamba += mamba_step_flops(spec),
            LayerKind::Attention => ledger.attention += attention_step_flops(spec, position + 1),
            LayerKind::Ffn => ledger.ffn += ffn_step_flops(spec),
        }
    }
    ledger
}

/// Mean decode FLOPs per token when generating `gen_len` tokens after a
/// prompt of `prompt_len`.
pub fn mean_decode_flops(spec: &ArchSpec, prompt_len: u64, gen_len: u64) -> f64 {
    if gen_len == 0 {
        return 0.0;
    }
    let total: u128 = (0..gen_len)
        .map(|i| decode_step_flops(spec, prompt_len + i).total() as u128)
        .sum();
    total as f64 / gen_len as f64
}
