//! Prefill and constant-memory incremental decoding.
//!
//! Inference runs on plain buffers through the same kernels the autodiff
//! ops use, so decoded logits track teacher-forced ones to rounding error.
//! Mamba-2 layers carry a fixed-size state; attention layers append one
//! key/value row per token.

use std::time::Instant;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{self, MemoryConfig, MemoryReport};
use crate::error::{Error, Result};
use crate::kernels::{self, SsdInputs};
use crate::model::{ArchSpec, LayerWeights, ModelWeights, RMS_EPS};
use crate::tensor::Tensor;

/// Chunk length used by prefill's scan.
const PREFILL_CHUNK: usize = 16;

/// Recurrent state of one Mamba-2 layer. Both buffers are allocated once.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaState {
    /// `[H·P·N]`
    pub ssm: Vec<f64>,
    /// Last `conv_window − 1` convolution inputs, oldest first.
    pub conv: Vec<f64>,
}

impl MambaState {
    fn new(spec: &ArchSpec) -> Self {
        MambaState {
            ssm: vec![0.0; spec.ssd_dims().state_len()],
            conv: vec![0.0; spec.conv_window.saturating_sub(1) * spec.conv_channels()],
        }
    }

    /// Bytes actually allocated.
    pub fn allocated_bytes(&self) -> usize {
        (self.ssm.capacity() + self.conv.capacity()) * std::mem::size_of::<f64>()
    }
}

/// Cached keys and values of one attention layer, `[tokens, H_kv·head_dim]`
/// each.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    width: usize,
}

impl KvCache {
    fn new(width: usize) -> Self {
        KvCache {
            keys: Vec::new(),
            values: Vec::new(),
            width,
        }
    }

    pub fn tokens(&self) -> usize {
        self.keys.len() / self.width
    }

    /// Bytes of cached payload.
    pub fn payload_bytes(&self) -> usize {
        (self.keys.len() + self.values.len()) * std::mem::size_of::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerState {
    Mamba(MambaState),
    Attention(KvCache),
    Ffn,
}

/// Per-sequence decoding state.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub layers: Vec<LayerState>,
    /// Tokens processed so far.
    pub position: usize,
}

impl DecodeState {
    pub fn new(spec: &ArchSpec) -> Self {
        let kv_width = spec.n_kv_heads * spec.attn_head_dim();
        let layers = spec
            .layers
            .iter()
            .map(|k| match k {
                crate::model::LayerKind::Mamba2 => LayerState::Mamba(MambaState::new(spec)),
                crate::model::LayerKind::Attention => LayerState::Attention(KvCache::new(kv_width)),
                crate::model::LayerKind::Ffn => LayerState::Ffn,
            })
            .collect();
        DecodeState { layers, position: 0 }
    }

    /// Allocated bytes of all Mamba-2 states.
    pub fn mamba_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerState::Mamba(m) => m.allocated_bytes(),
                _ => 0,
            })
            .sum()
    }

    /// Payload bytes of all key/value caches.
    pub fn kv_bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerState::Attention(c) => c.payload_bytes(),
                _ => 0,
            })
            .sum()
    }
}

fn linear_rows(x: &[f64], w: &Tensor, rows: usize) -> Vec<f64> {
    kernels::matmul_nt(x, w.data(), rows, w.cols(), w.rows())
}

fn norm_rows(x: &[f64], gain: &Tensor) -> Vec<f64> {
    kernels::rmsnorm_rows(x, gain.data(), gain.len(), RMS_EPS).0
}

fn slice_cols(x: &[f64], width: usize, start: usize, len: usize) -> Vec<f64> {
    x.chunks_exact(width).flat_map(|r| r[start..start + len].iter().copied()).collect()
}

fn mamba_rows(spec: &ArchSpec, w: &crate::model::MambaWeights, x: &[f64], rows: usize, st: &mut MambaState) -> Vec<f64> {
    let di = spec.d_inner();
    let gn = spec.n_groups * spec.d_state;
    let heads = spec.mamba_heads();
    let width = spec.mamba_in_width();
    let channels = spec.conv_channels();
    let window = spec.conv_window;
    let u = norm_rows(x, &w.norm);
    let proj = linear_rows(&u, &w.in_proj, rows);
    let z = slice_cols(&proj, width, 0, di);
    let xbc = slice_cols(&proj, width, di, channels);
    let dt_raw = slice_cols(&proj, width, di + channels, heads);

    // convolve over [tail; xbc] and keep the new rows
    let tail_rows = window - 1;
    let mut padded = Vec::with_capacity(st.conv.len() + xbc.len());
    padded.extend_from_slice(&st.conv);
    padded.extend_from_slice(&xbc);
    let conv_all = kernels::causal_conv(&padded, w.conv.data(), tail_rows + rows, channels, window);
    st.conv.copy_from_slice(&padded[rows * channels..]);
    let mut xbc = conv_all[tail_rows * channels..].to_vec();
    xbc.iter_mut().for_each(|v| *v = kernels::silu(*v));

    let xs = slice_cols(&xbc, channels, 0, di);
    let bm = slice_cols(&xbc, channels, di, gn);
    let cm = slice_cols(&xbc, channels, di + gn, gn);
    let dt: Vec<f64> = dt_raw
        .chunks_exact(heads)
        .flat_map(|r| r.iter().zip(w.dt_bias.data()).map(|(a, b)| kernels::softplus(a + b)))
        .collect();
    let inp = SsdInputs {
        x: &xs,
        dt: &dt,
        a_log: w.a_log.data(),
        b: &bm,
        c: &cm,
        d: w.d_skip.data(),
    };
    let mut y = if rows == 1 {
        kernels::ssd_sequential(spec.ssd_dims(), inp, rows, &mut st.ssm)
    } else {
        kernels::ssd_chunked(spec.ssd_dims(), inp, rows, PREFILL_CHUNK, &mut st.ssm)
    };
    for (yv, zv) in y.iter_mut().zip(&z) {
        *yv *= kernels::silu(*zv);
    }
    let y = norm_rows(&y, &w.gate_norm);
    linear_rows(&y, &w.out_proj, rows)
}

fn attention_rows(
    spec: &ArchSpec,
    w: &crate::model::AttentionWeights,
    x: &[f64],
    rows: usize,
    offset: usize,
    cache: &mut KvCache,
) -> Vec<f64> {
    let (hq, hkv, dh) = (spec.n_q_heads, spec.n_kv_heads, spec.attn_head_dim());
    let u = norm_rows(x, &w.norm);
    let mut q = linear_rows(&u, &w.wq, rows);
    let mut k = linear_rows(&u, &w.wk, rows);
    let v = linear_rows(&u, &w.wv, rows);
    if spec.rope {
        kernels::rope_rows(&mut q, hq, dh, offset, false);
        kernels::rope_rows(&mut k, hkv, dh, offset, false);
    }
    cache.keys.extend_from_slice(&k);
    cache.values.extend_from_slice(&v);
    let mut out = Vec::with_capacity(rows * hq * dh);
    for t in 0..rows {
        let n = offset + t + 1;
        out.extend(kernels::attention_decode(
            &q[t * hq * dh..(t + 1) * hq * dh],
            &cache.keys,
            &cache.values,
            n,
            hq,
            hkv,
            dh,
        ));
    }
    linear_rows(&out, &w.wo, rows)
}

fn ffn_rows(w: &crate::model::FfnWeights, x: &[f64], rows: usize) -> Vec<f64> {
    let u = norm_rows(x, &w.norm);
    let mut h = linear_rows(&u, &w.w1, rows);
    h.iter_mut().for_each(|v| *v = kernels::squared_relu(*v));
    linear_rows(&h, &w.w2, rows)
}

/// Runs `tokens` through the model on top of `state` and returns the logits
/// of the last token.
fn advance(weights: &ModelWeights, state: &mut DecodeState, tokens: &[u32]) -> Result<Vec<f64>> {
    let spec = &weights.spec;
    let d = spec.d_model;
    let rows = tokens.len();
    let mut x = Vec::with_capacity(rows * d);
    for &t in tokens {
        if t as usize >= spec.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: t,
                vocab: spec.vocab_size,
            });
        }
        x.extend_from_slice(weights.embedding.row(t as usize));
    }
    let offset = state.position;
    for (layer, st) in weights.layers.iter().zip(state.layers.iter_mut()) {
        let branch = match (layer, st) {
            (LayerWeights::Mamba(w), LayerState::Mamba(m)) => mamba_rows(spec, w, &x, rows, m),
            (LayerWeights::Attention(w), LayerState::Attention(c)) => attention_rows(spec, w, &x, rows, offset, c),
            (LayerWeights::Ffn(w), LayerState::Ffn) => ffn_rows(w, &x, rows),
            _ => return Err(Error::InvalidArgument("decode state does not match the model".into())),
        };
        for (a, b) in x.iter_mut().zip(&branch) {
            *a += b;
        }
    }
    state.position += rows;
    let last = &x[(rows - 1) * d..];
    let h = norm_rows(last, &weights.final_norm);
    let logits = linear_rows(&h, &weights.head, 1);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "decode" });
    }
    Ok(logits)
}

/// Token selection from logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

impl Sampler {
    fn validate(&self) -> Result<()> {
        match self {
            Sampler::Temperature { temperature, .. } if !(*temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::InvalidArgument(format!("sampling temperature {temperature}")))
            }
            _ => Ok(()),
        }
    }
}

/// Inference front end with an optional memory budget.
#[derive(Clone, Debug)]
pub struct Engine<'a> {
    pub weights: &'a ModelWeights,
    pub memory: MemoryConfig,
    /// Bytes available; `None` disables the check.
    pub budget: Option<u64>,
}

impl<'a> Engine<'a> {
    pub fn new(weights: &'a ModelWeights) -> Self {
        Engine {
            weights,
            memory: MemoryConfig::default(),
            budget: None,
        }
    }

    pub fn with_budget(mut self, memory: MemoryConfig, budget: u64) -> Self {
        self.memory = memory;
        self.budget = Some(budget);
        self
    }

    fn check(&self, seq: usize, batch: usize) -> Result<MemoryReport> {
        let report = cost::memory_report(&self.weights.spec, seq as u64, batch as u64, &self.memory)?;
        if let Some(b) = self.budget {
            report.check_budget(b)?;
        }
        Ok(report)
    }

    /// Processes the whole prompt and returns the last position's logits.
    pub fn prefill(&self, prompt: &[u32]) -> Result<(Vec<f64>, DecodeState)> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("prefill needs a nonempty prompt".into()));
        }
        self.check(prompt.len(), 1)?;
        let mut state = DecodeState::new(&self.weights.spec);
        let logits = advance(self.weights, &mut state, prompt)?;
        Ok((logits, state))
    }

    /// Feeds one token and returns the logits for the next position.
    pub fn step(&self, state: &mut DecodeState, token: u32) -> Result<Vec<f64>> {
        self.check(state.position + 1, 1)?;
        advance(self.weights, state, &[token])
    }

    /// Generates `n_tokens` tokens, starting from the logits returned by the
    /// previous prefill or step. `logits` is updated to the newest position.
    pub fn decode(&self, state: &mut DecodeState, logits: &mut Vec<f64>, n_tokens: usize, sampler: &Sampler) -> Result<Vec<u32>> {
        sampler.validate()?;
        let mut rng = match sampler {
            Sampler::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(*seed)),
            Sampler::Greedy => None,
        };
        let mut out = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let tok = match (sampler, rng.as_mut()) {
                (Sampler::Temperature { temperature, .. }, Some(rng)) => sample(logits, *temperature, rng)?,
                _ => kernels::argmax(logits) as u32,
            };
            out.push(tok);
            *logits = self.step(state, tok)?;
        }
        Ok(out)
    }
}

fn sample(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> Result<u32> {
    let mut p: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    kernels::softmax_rows(&mut p, logits.len());
    let dist = WeightedIndex::new(&p).map_err(|e| Error::InvalidArgument(format!("sampler: {e}")))?;
    Ok(dist.sample(rng) as u32)
}

/// Report of one throughput run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub batch: usize,
    /// Generated tokens per wall-clock second of decoding.
    pub tokens_per_sec: f64,
    /// Mean analytic FLOPs per generated token.
    pub flops_per_token: f64,
    /// Largest batch fitting the budget at `prompt_len + gen_len`, if a
    /// budget is configured.
    pub max_feasible_batch: Option<u64>,
    pub memory: MemoryReport,
}

/// Prefills `batch` random prompts, then decodes `gen_len` greedy tokens for
/// each in lockstep.
pub fn throughput_bench(engine: &Engine, prompt_len: usize, gen_len: usize, batch: usize, seed: u64) -> Result<BenchReport> {
    if prompt_len == 0 || batch == 0 {
        return Err(Error::InvalidArgument("bench needs prompt_len ≥ 1 and batch ≥ 1".into()));
    }
    let spec = &engine.weights.spec;
    let total = prompt_len + gen_len;
    let memory = engine.check(total, batch)?;
    let max_batch = match engine.budget {
        Some(b) => Some(cost::max_feasible_batch(spec, total as u64, &engine.memory, b)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let prompt: Vec<u32> = (0..prompt_len).map(|_| rng.random_range(0..spec.vocab_size as u32)).collect();
        seqs.push(engine.prefill(&prompt)?);
    }
    let started = Instant::now();
    for _ in 0..gen_len {
        for (logits, state) in seqs.iter_mut() {
            let tok = kernels::argmax(logits) as u32;
            *logits = engine.step(state, tok)?;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let generated = (gen_len * batch) as f64;
    Ok(BenchReport {
        prompt_len,
        gen_len,
        batch,
        tokens_per_sec: if secs > 0.0 { generated / secs } else { 0.0 },
        flops_per_token: cost::mean_decode_flops(spec, prompt_len as u64, gen_len as u64),
        max_feasible_batch: max_batch,
        memory,
    })
}
