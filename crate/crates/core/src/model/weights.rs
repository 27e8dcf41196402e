use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::arch::{ArchSpec, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MambaWeights {
    pub norm: Tensor,
    /// `[2·d_inner + 2·G·N + H, d_model]`, output order `z, x, B, C, Δ`
    pub in_proj: Tensor,
    /// `[d_inner + 2·G·N, conv_window]`
    pub conv: Tensor,
    pub dt_bias: Tensor,
    pub a_log: Tensor,
    pub d_skip: Tensor,
    pub gate_norm: Tensor,
    /// `[d_model, d_inner]`
    pub out_proj: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// `FFN(X) = δ(X·W1ᵀ)·W2ᵀ` with `W1: [d_ffn, d_model]` (one row per neuron)
/// and `W2: [d_model, d_ffn]` (one column per neuron).
#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    pub norm: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerWeights {
    Mamba(MambaWeights),
    Attention(AttentionWeights),
    Ffn(FfnWeights),
}

impl LayerWeights {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerWeights::Mamba(_) => LayerKind::Mamba2,
            LayerWeights::Attention(_) => LayerKind::Attention,
            LayerWeights::Ffn(_) => LayerKind::Ffn,
        }
    }

    pub(crate) fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            LayerWeights::Mamba(m) => vec![
                ("norm", &m.norm),
                ("in_proj", &m.in_proj),
                ("conv", &m.conv),
                ("dt_bias", &m.dt_bias),
                ("a_log", &m.a_log),
                ("d_skip", &m.d_skip),
                ("gate_norm", &m.gate_norm),
                ("out_proj", &m.out_proj),
            ],
            LayerWeights::Attention(a) => vec![
                ("norm", &a.norm),
                ("wq", &a.wq),
                ("wk", &a.wk),
                ("wv", &a.wv),
                ("wo", &a.wo),
            ],
            LayerWeights::Ffn(f) => vec![("norm", &f.norm), ("w1", &f.w1), ("w2", &f.w2)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerWeights::Mamba(m) => vec![
                &mut m.norm,
                &mut m.in_proj,
                &mut m.conv,
                &mut m.dt_bias,
                &mut m.a_log,
                &mut m.d_skip,
                &mut m.gate_norm,
                &mut m.out_proj,
            ],
            LayerWeights::Attention(a) => vec![&mut a.norm, &mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo],
            LayerWeights::Ffn(f) => vec![&mut f.norm, &mut f.w1, &mut f.w2],
        }
    }

    /// Zero the projection that writes into the residual stream, making the
    /// layer an identity map.
    pub fn zero_output(&mut self) {
        let t = match self {
            LayerWeights::Mamba(m) => &mut m.out_proj,
            LayerWeights::Attention(a) => &mut a.wo,
            LayerWeights::Ffn(f) => &mut f.w2,
        };
        t.data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub spec: ArchSpec,
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

fn shapes_for(spec: &ArchSpec, kind: LayerKind) -> Vec<(&'static str, Vec<usize>)> {
    let d = spec.d_model;
    match kind {
        LayerKind::Mamba2 => {
            let (di, h) = (spec.d_inner(), spec.mamba_heads());
            vec![
                ("norm", vec![d]),
                ("in_proj", vec![spec.mamba_in_width(), d]),
                ("conv", vec![spec.conv_channels(), spec.conv_window]),
                ("dt_bias", vec![h]),
                ("a_log", vec![h]),
                ("d_skip", vec![di]),
                ("gate_norm", vec![di]),
                ("out_proj", vec![d, di]),
            ]
        }
        LayerKind::Attention => {
            let q = spec.n_q_heads * spec.attn_head_dim();
            let kv = spec.n_kv_heads * spec.attn_head_dim();
            vec![
                ("norm", vec![d]),
                ("wq", vec![q, d]),
                ("wk", vec![kv, d]),
                ("wv", vec![kv, d]),
                ("wo", vec![d, q]),
            ]
        }
        LayerKind::Ffn => vec![
            ("norm", vec![d]),
            ("w1", vec![spec.d_ffn, d]),
            ("w2", vec![d, spec.d_ffn]),
        ],
    }
}

fn layer_from_tensors(kind: LayerKind, mut t: Vec<Tensor>) -> LayerWeights {
    let mut next = || t.remove(0);
    match kind {
        LayerKind::Mamba2 => LayerWeights::Mamba(MambaWeights {
            norm: next(),
            in_proj: next(),
            conv: next(),
            dt_bias: next(),
            a_log: next(),
            d_skip: next(),
            gate_norm: next(),
            out_proj: next(),
        }),
        LayerKind::Attention => LayerWeights::Attention(AttentionWeights {
            norm: next(),
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
        }),
        LayerKind::Ffn => LayerWeights::Ffn(FfnWeights {
            norm: next(),
            w1: next(),
            w2: next(),
        }),
    }
}

/// Standard deviation of generic projections.
pub const INIT_STD: f64 = 0.02;

impl ModelWeights {
    /// Seeded initialization: `N(0, 0.02)` for projections and embeddings,
    /// `N(0, 0.02/√(2·n_layers))` for projections writing into the residual
    /// stream, unit norm gains, `D = 1`, `A = -[1, 16]`, `Δ ∈ [1e-3, 1e-1]`
    /// log-uniform through the softplus bias, and conv taps uniform in
    /// `±1/√window`.
    pub fn init(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.d_model;
        let normal = |rng: &mut ChaCha8Rng, shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
        };
        let resid_std = INIT_STD / (2.0 * spec.n_layers().max(1) as f64).sqrt();

        let embedding = normal(&mut rng, &[spec.vocab_size, d], INIT_STD);
        let mut layers = Vec::with_capacity(spec.n_layers());
        for &kind in &spec.layers {
            let layer = match kind {
                LayerKind::Mamba2 => {
                    let h = spec.mamba_heads();
                    let bound = 1.0 / (spec.conv_window as f64).sqrt();
                    let conv_n = spec.conv_channels() * spec.conv_window;
                    let conv = (0..conv_n).map(|_| rng.random_range(-bound..bound)).collect();
                    let dt_bias = (0..h)
                        .map(|_| {
                            let dt: f64 = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                            // inverse softplus
                            dt + (-(-dt).exp_m1()).ln()
                        })
                        .collect();
                    let a_log = (0..h).map(|_| rng.random_range(1.0f64..16.0).ln()).collect();
                    LayerWeights::Mamba(MambaWeights {
                        norm: Tensor::full(&[d], 1.0),
                        in_proj: normal(&mut rng, &[spec.mamba_in_width(), d], INIT_STD),
                        conv: Tensor::new(vec![spec.conv_channels(), spec.conv_window], conv)?,
                        dt_bias: Tensor::from_vec(dt_bias),
                        a_log: Tensor::from_vec(a_log),
                        d_skip: Tensor::full(&[spec.d_inner()], 1.0),
                        gate_norm: Tensor::full(&[spec.d_inner()], 1.0),
                        out_proj: normal(&mut rng, &[d, spec.d_inner()], resid_std),
                    })
                }
                LayerKind::Attention => {
                    let q = spec.n_q_heads * spec.attn_head_dim();
                    let kv = spec.n_kv_heads * spec.attn_head_dim();
                    LayerWeights::Attention(AttentionWeights {
                        norm: Tensor::full(&[d], 1.0),
                        wq: normal(&mut rng, &[q, d], INIT_STD),
                        wk: normal(&mut rng, &[kv, d], INIT_STD),
                        wv: normal(&mut rng, &[kv, d], INIT_STD),
                        wo: normal(&mut rng, &[d, q], resid_std),
                    })
                }
                LayerKind::Ffn => LayerWeights::Ffn(FfnWeights {
                    norm: Tensor::full(&[d], 1.0),
                    w1: normal(&mut rng, &[spec.d_ffn, d], INIT_STD),
                    w2: normal(&mut rng, &[d, spec.d_ffn], resid_std),
                }),
            };
            layers.push(layer);
        }
        let head = normal(&mut rng, &[spec.vocab_size, d], INIT_STD);
        Ok(ModelWeights {
            spec: spec.clone(),
            embedding,
            layers,
            final_norm: Tensor::full(&[d], 1.0),
            head,
        })
    }

    /// All parameters with stable names, in the canonical order used by
    /// optimizers, checkpoints and graph construction.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> u64 {
        self.named_params().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Expected `(name, shape)` list for `spec`, in canonical order.
    pub fn expected_shapes(spec: &ArchSpec) -> Vec<(String, Vec<usize>)> {
        let (v, d) = (spec.vocab_size, spec.d_model);
        let mut out = vec![("embedding".to_string(), vec![v, d])];
        for (i, &kind) in spec.layers.iter().enumerate() {
            for (name, shape) in shapes_for(spec, kind) {
                out.push((format!("layers.{i}.{name}"), shape));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("head".to_string(), vec![v, d]));
        out
    }

    /// Assemble weights from tensors given in canonical order.
    pub fn from_tensors(spec: &ArchSpec, tensors: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let expected = Self::expected_shapes(spec);
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, got {}", expected.len(), tensors.len())));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        let mut it = tensors.into_iter();
        let embedding = it.next().expect("embedding");
        let mut layers = Vec::with_capacity(spec.n_layers());
        for &kind in &spec.layers {
            let n = shapes_for(spec, kind).len();
            layers.push(layer_from_tensors(kind, it.by_ref().take(n).collect()));
        }
        let final_norm = it.next().expect("final norm");
        let head = it.next().expect("head");
        Ok(ModelWeights {
            spec: spec.clone(),
            embedding,
            layers,
            final_norm,
            head,
        })
    }

    /// Same architecture with every layer's residual branch zeroed.
    pub fn with_zero_branches(mut self) -> Self {
        for l in &mut self.layers {
            l.zero_output();
        }
        self
    }
}
