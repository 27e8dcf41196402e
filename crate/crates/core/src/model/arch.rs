//! Architecture descriptions and the hybrid layer-pattern builder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::SsdDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    Mamba2,
    Attention,
    #[serde(rename = "FFN")]
    Ffn,
}

impl LayerKind {
    pub fn symbol(self) -> char {
        match self {
            LayerKind::Mamba2 => 'M',
            LayerKind::Attention => 'A',
            LayerKind::Ffn => 'F',
        }
    }
}

fn default_head_dim() -> usize {
    64
}
fn default_expand() -> usize {
    2
}
fn default_conv_window() -> usize {
    4
}

/// Layer sequence plus the per-layer-type dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub layers: Vec<LayerKind>,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_state: usize,
    pub n_groups: usize,
    #[serde(default = "default_head_dim")]
    pub mamba_head_dim: usize,
    #[serde(default = "default_expand")]
    pub mamba_expand: usize,
    #[serde(default = "default_conv_window")]
    pub conv_window: usize,
    pub vocab_size: usize,
    /// Rotary position encoding in attention layers. Off for hybrids,
    /// on for the pure-attention baseline.
    #[serde(default)]
    pub rope: bool,
}

/// Everything in an [`ArchSpec`] except the layer sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_state: usize,
    pub n_groups: usize,
    pub mamba_head_dim: usize,
    pub mamba_expand: usize,
    pub conv_window: usize,
    pub vocab_size: usize,
}

impl Default for Dims {
    /// Desk-scale sizes over a byte vocabulary.
    fn default() -> Self {
        Dims {
            d_model: 32,
            d_ffn: 64,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_state: 16,
            n_groups: 2,
            mamba_head_dim: 16,
            mamba_expand: 2,
            conv_window: 4,
            vocab_size: 256,
        }
    }
}

impl Dims {
    /// Dimensions of the 52-layer 8B hybrid.
    pub fn hybrid_8b() -> Self {
        Dims {
            d_model: 4096,
            d_ffn: 21504,
            n_q_heads: 32,
            n_kv_heads: 8,
            d_state: 128,
            n_groups: 8,
            mamba_head_dim: 64,
            mamba_expand: 2,
            conv_window: 4,
            vocab_size: 131072,
        }
    }

    /// Dimensions of the 118-layer 56B hybrid.
    pub fn hybrid_56b() -> Self {
        Dims {
            d_model: 8192,
            d_ffn: 32768,
            n_q_heads: 64,
            n_kv_heads: 8,
            d_state: 256,
            n_groups: 8,
            mamba_head_dim: 64,
            mamba_expand: 2,
            conv_window: 4,
            vocab_size: 131072,
        }
    }
}

impl ArchSpec {
    pub fn from_layers(layers: Vec<LayerKind>, dims: &Dims, rope: bool) -> Result<Self> {
        let spec = ArchSpec {
            layers,
            d_model: dims.d_model,
            d_ffn: dims.d_ffn,
            n_q_heads: dims.n_q_heads,
            n_kv_heads: dims.n_kv_heads,
            d_state: dims.d_state,
            n_groups: dims.n_groups,
            mamba_head_dim: dims.mamba_head_dim,
            mamba_expand: dims.mamba_expand,
            conv_window: dims.conv_window,
            vocab_size: dims.vocab_size,
            rope,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Hybrid built by [`build_layer_pattern`].
    pub fn hybrid(total_layers: usize, attn_fraction: f64, dims: &Dims) -> Result<Self> {
        let spec = ArchSpec::from_layers(build_layer_pattern(total_layers, attn_fraction)?, dims, false)?;
        spec.check_placement()?;
        Ok(spec)
    }

    /// Pure-attention baseline: `blocks` × (attention, FFN) with rotary encoding.
    pub fn transformer(blocks: usize, dims: &Dims) -> Result<Self> {
        let layers = (0..blocks)
            .flat_map(|_| [LayerKind::Attention, LayerKind::Ffn])
            .collect();
        ArchSpec::from_layers(layers, dims, true)
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            n_q_heads: self.n_q_heads,
            n_kv_heads: self.n_kv_heads,
            d_state: self.d_state,
            n_groups: self.n_groups,
            mamba_head_dim: self.mamba_head_dim,
            mamba_expand: self.mamba_expand,
            conv_window: self.conv_window,
            vocab_size: self.vocab_size,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|&&k| k == kind).count()
    }

    pub fn pattern(&self) -> String {
        self.layers.iter().map(|k| k.symbol()).collect()
    }

    pub fn attn_head_dim(&self) -> usize {
        self.d_model / self.n_q_heads
    }

    pub fn d_inner(&self) -> usize {
        self.mamba_expand * self.d_model
    }

    pub fn mamba_heads(&self) -> usize {
        self.d_inner() / self.mamba_head_dim
    }

    pub fn ssd_dims(&self) -> SsdDims {
        SsdDims {
            heads: self.mamba_heads(),
            head_dim: self.mamba_head_dim,
            groups: self.n_groups,
            d_state: self.d_state,
        }
    }

    /// Width of the Mamba input projection: `z`, `x`, `B`, `C`, `Δ`.
    pub fn mamba_in_width(&self) -> usize {
        2 * self.d_inner() + 2 * self.n_groups * self.d_state + self.mamba_heads()
    }

    /// Channels that go through the causal convolution: `x`, `B`, `C`.
    pub fn conv_channels(&self) -> usize {
        self.d_inner() + 2 * self.n_groups * self.d_state
    }

    /// Structural consistency of the dimensions.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArch(m));
        if self.d_model == 0 || self.vocab_size == 0 {
            return fail("d_model and vocab_size must be positive".into());
        }
        if self.layers.contains(&LayerKind::Attention) {
            if self.n_q_heads == 0 || self.n_kv_heads == 0 {
                return fail("attention needs positive head counts".into());
            }
            if !self.d_model.is_multiple_of(self.n_q_heads) {
                return fail(format!("d_model {} not divisible by n_q_heads {}", self.d_model, self.n_q_heads));
            }
            if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
                return fail(format!("n_q_heads {} not divisible by n_kv_heads {}", self.n_q_heads, self.n_kv_heads));
            }
            if self.rope && !self.attn_head_dim().is_multiple_of(2) {
                return fail("rotary encoding needs an even head dimension".into());
            }
        }
        if self.layers.contains(&LayerKind::Mamba2) {
            if self.mamba_head_dim == 0 || !self.d_inner().is_multiple_of(self.mamba_head_dim) {
                return fail(format!("d_inner {} not divisible by head dim {}", self.d_inner(), self.mamba_head_dim));
            }
            if self.n_groups == 0 || !self.mamba_heads().is_multiple_of(self.n_groups) {
                return fail(format!("{} Mamba heads not divisible into {} groups", self.mamba_heads(), self.n_groups));
            }
            if self.d_state == 0 || self.conv_window == 0 {
                return fail("d_state and conv_window must be positive".into());
            }
        }
        if self.layers.contains(&LayerKind::Ffn) && self.d_ffn == 0 {
            return fail("d_ffn must be positive".into());
        }
        Ok(())
    }

    /// The hybrid placement rules: first layer is Mamba-2, last is FFN,
    /// and every attention layer is immediately followed by an FFN.
    pub fn check_placement(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidArch(format!("{m}: {}", self.pattern())));
        if self.layers.first() != Some(&LayerKind::Mamba2) {
            return fail("first layer must be Mamba2");
        }
        if self.layers.last() != Some(&LayerKind::Ffn) {
            return fail("last layer must be FFN");
        }
        for w in self.layers.windows(2) {
            if w[0] == LayerKind::Attention && w[1] != LayerKind::Ffn {
                return fail("attention must precede an FFN");
            }
        }
        Ok(())
    }

    pub fn layer_param_count(&self, kind: LayerKind) -> u64 {
        let d = self.d_model as u64;
        match kind {
            LayerKind::Mamba2 => {
                let di = self.d_inner() as u64;
                let h = self.mamba_heads() as u64;
                d // pre-norm
                    + self.mamba_in_width() as u64 * d
                    + self.conv_channels() as u64 * self.conv_window as u64
                    + 2 * h // dt bias, A log
                    + 2 * di // D, gated norm
                    + d * di
            }
            LayerKind::Attention => {
                let q = (self.n_q_heads * self.attn_head_dim()) as u64;
                let kv = (self.n_kv_heads * self.attn_head_dim()) as u64;
                d + q * d + 2 * kv * d + d * q
            }
            LayerKind::Ffn => d + 2 * self.d_ffn as u64 * d,
        }
    }

    /// Exact parameter count: embeddings, layers, final norm, output head.
    pub fn count_params(&self) -> u64 {
        let d = self.d_model as u64;
        let v = self.vocab_size as u64;
        let layers: u64 = self.layers.iter().map(|&k| self.layer_param_count(k)).sum();
        2 * v * d + d + layers
    }
}

/// Layer sequence with `round(attn_fraction · total)` attention layers and
/// the rest split evenly between Mamba-2 and FFN.
///
/// Construction: alternate Mamba-2/FFN (an odd remainder becomes an extra
/// trailing FFN), then insert attention layer `i` immediately before FFN
/// number `floor((i + 0.5) · n_ffn / n_attn)`.
pub fn build_layer_pattern(total_layers: usize, attn_fraction: f64) -> Result<Vec<LayerKind>> {
    if total_layers < 4 {
        return Err(Error::InvalidArch(format!("need at least 4 layers, got {total_layers}")));
    }
    if !(0.0..1.0).contains(&attn_fraction) {
        return Err(Error::InvalidArch(format!("attention fraction {attn_fraction} outside [0, 1)")));
    }
    let n_attn = (attn_fraction * total_layers as f64).round() as usize;
    let rest = total_layers - n_attn.min(total_layers);
    let n_mamba = rest / 2;
    let n_ffn = rest - n_mamba;
    if n_mamba == 0 || n_attn > n_ffn {
        return Err(Error::InvalidArch(format!(
            "{total_layers} layers with {n_attn} attention layers cannot satisfy the placement rules"
        )));
    }
    let insert_at: Vec<usize> = (0..n_attn)
        .map(|i| (2 * i + 1) * n_ffn / (2 * n_attn))
        .collect();
    let mut layers = Vec::with_capacity(total_layers);
    let mut ffn_seen = 0;
    let mut next = 0;
    let mut push_ffn = |layers: &mut Vec<LayerKind>| {
        if next < insert_at.len() && insert_at[next] == ffn_seen {
            layers.push(LayerKind::Attention);
            next += 1;
        }
        layers.push(LayerKind::Ffn);
        ffn_seen += 1;
    };
    for _ in 0..n_mamba {
        layers.push(LayerKind::Mamba2);
        push_ffn(&mut layers);
    }
    if n_ffn > n_mamba {
        push_ffn(&mut layers);
    }
    debug_assert_eq!(layers.len(), total_layers);
    Ok(layers)
}
