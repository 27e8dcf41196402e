//! Teacher-forced forward pass on an autodiff [`Graph`].

use super::arch::ArchSpec;
use super::weights::{AttentionWeights, FfnWeights, LayerWeights, MambaWeights, ModelWeights};
use crate::autodiff::{Graph, ScanMode, Var};
use crate::error::{Error, Result};
use crate::fp8::{assign_precision, Fp8Format, LayerPrecision, PrecisionPolicy};
use crate::tensor::Tensor;

/// RMSNorm epsilon.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// Route linear layers through FP8 according to this policy.
    pub fp8: Option<PrecisionPolicy>,
    /// Layers bypassed through their residual connection.
    pub skip_layers: Vec<usize>,
    /// Record the post-activation FFN hidden tensors.
    pub capture_ffn: bool,
    /// Register weights as differentiable parameters.
    pub trainable: bool,
    pub scan_mode: ScanMode,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            fp8: None,
            skip_layers: Vec::new(),
            capture_ffn: false,
            trainable: false,
            scan_mode: ScanMode::Chunked(16),
        }
    }
}

impl ForwardOptions {
    pub fn training(fp8: Option<PrecisionPolicy>) -> Self {
        ForwardOptions {
            fp8,
            trainable: true,
            ..Default::default()
        }
    }
}

pub struct ForwardOutput {
    /// `[B·T, vocab]`
    pub logits: Var,
    /// Final-norm output feeding the LM head, `[B·T, d_model]`.
    pub pre_head: Var,
    /// One handle per parameter, in [`ModelWeights::named_params`] order.
    pub params: Vec<Var>,
    /// `(layer index, δ(X·W1ᵀ))` for every FFN layer when captured.
    pub ffn_hidden: Vec<(usize, Var)>,
}

struct Ctx<'a> {
    g: &'a mut Graph,
    params: Vec<Var>,
    trainable: bool,
}

impl Ctx<'_> {
    fn input(&mut self, t: &Tensor) -> Var {
        let v = if self.trainable {
            self.g.param(t.clone())
        } else {
            self.g.constant(t.clone())
        };
        self.params.push(v);
        v
    }

    fn linear(&mut self, x: Var, w: Var, fp8: bool) -> Result<Var> {
        if fp8 {
            self.g.linear_fp8(x, w, Fp8Format::E4M3, Fp8Format::E5M2)
        } else {
            self.g.linear(x, w)
        }
    }
}

fn mamba_block(
    ctx: &mut Ctx,
    spec: &ArchSpec,
    w: &MambaWeights,
    x: Var,
    seq: usize,
    fp8: bool,
    mode: ScanMode,
) -> Result<Var> {
    let norm = ctx.input(&w.norm);
    let in_proj = ctx.input(&w.in_proj);
    let conv = ctx.input(&w.conv);
    let dt_bias = ctx.input(&w.dt_bias);
    let a_log = ctx.input(&w.a_log);
    let d_skip = ctx.input(&w.d_skip);
    let gate_norm = ctx.input(&w.gate_norm);
    let out_proj = ctx.input(&w.out_proj);

    let di = spec.d_inner();
    let gn = spec.n_groups * spec.d_state;
    let heads = spec.mamba_heads();
    let g = &mut *ctx.g;
    let u = g.rmsnorm(x, norm, RMS_EPS)?;
    let proj = ctx.linear(u, in_proj, fp8)?;
    let g = &mut *ctx.g;
    let z = g.slice_cols(proj, 0, di)?;
    let xbc = g.slice_cols(proj, di, di + 2 * gn)?;
    let dt_raw = g.slice_cols(proj, 2 * di + 2 * gn, heads)?;
    let xbc = g.causal_conv(xbc, conv, seq)?;
    let xbc = g.silu(xbc)?;
    let xs = g.slice_cols(xbc, 0, di)?;
    let bm = g.slice_cols(xbc, di, gn)?;
    let cm = g.slice_cols(xbc, di + gn, gn)?;
    let dt = g.add_row(dt_raw, dt_bias)?;
    let dt = g.softplus(dt)?;
    let y = g.scan(xs, dt, a_log, bm, cm, d_skip, spec.ssd_dims(), seq, mode)?;
    let gate = g.silu(z)?;
    let y = g.mul(y, gate)?;
    let y = g.rmsnorm(y, gate_norm, RMS_EPS)?;
    ctx.linear(y, out_proj, fp8)
}

fn attention_block(
    ctx: &mut Ctx,
    spec: &ArchSpec,
    w: &AttentionWeights,
    x: Var,
    seq: usize,
    fp8: bool,
) -> Result<Var> {
    let norm = ctx.input(&w.norm);
    let wq = ctx.input(&w.wq);
    let wk = ctx.input(&w.wk);
    let wv = ctx.input(&w.wv);
    let wo = ctx.input(&w.wo);
    let u = ctx.g.rmsnorm(x, norm, RMS_EPS)?;
    let mut q = ctx.linear(u, wq, fp8)?;
    let mut k = ctx.linear(u, wk, fp8)?;
    let v = ctx.linear(u, wv, fp8)?;
    if spec.rope {
        q = ctx.g.rope(q, seq, spec.n_q_heads)?;
        k = ctx.g.rope(k, seq, spec.n_kv_heads)?;
    }
    let a = ctx.g.attention(q, k, v, seq, spec.n_q_heads, spec.n_kv_heads)?;
    ctx.linear(a, wo, fp8)
}

fn ffn_block(ctx: &mut Ctx, w: &FfnWeights, x: Var, fp8: bool) -> Result<(Var, Var)> {
    let norm = ctx.input(&w.norm);
    let w1 = ctx.input(&w.w1);
    let w2 = ctx.input(&w.w2);
    let u = ctx.g.rmsnorm(x, norm, RMS_EPS)?;
    let h = ctx.linear(u, w1, fp8)?;
    let h = ctx.g.squared_relu(h)?;
    Ok((ctx.linear(h, w2, fp8)?, h))
}

/// Teacher-forced logits for `tokens`, a row-major batch of sequences of
/// length `seq`. Each layer computes `x ← x + Layer(rmsnorm(x))`; a final
/// RMSNorm feeds the (untied) output head.
pub fn forward(
    g: &mut Graph,
    weights: &ModelWeights,
    tokens: &[u32],
    seq: usize,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let spec = &weights.spec;
    if seq == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(seq) {
        return Err(Error::shape("forward", format!("{} tokens in sequences of {seq}", tokens.len())));
    }
    if let Some(p) = &opts.fp8 {
        p.validate(spec.n_layers())?;
    }
    let mut ctx = Ctx {
        g,
        params: Vec::with_capacity(weights.named_params().len()),
        trainable: opts.trainable,
    };
    let emb = ctx.input(&weights.embedding);
    let mut x = ctx.g.embedding(emb, tokens)?;
    let mut ffn_hidden = Vec::new();
    let n_layers = spec.n_layers();
    for (i, layer) in weights.layers.iter().enumerate() {
        let fp8 = match &opts.fp8 {
            Some(p) => assign_precision(i, n_layers, p)? == LayerPrecision::Fp8,
            None => false,
        };
        if opts.skip_layers.contains(&i) {
            // register parameters anyway so handles stay aligned
            for (_, t) in layer.named() {
                ctx.input(t);
            }
            continue;
        }
        let branch = match layer {
            LayerWeights::Mamba(w) => mamba_block(&mut ctx, spec, w, x, seq, fp8, opts.scan_mode)?,
            LayerWeights::Attention(w) => attention_block(&mut ctx, spec, w, x, seq, fp8)?,
            LayerWeights::Ffn(w) => {
                let (out, hidden) = ffn_block(&mut ctx, w, x, fp8)?;
                if opts.capture_ffn {
                    ffn_hidden.push((i, hidden));
                }
                out
            }
        };
        x = ctx.g.add(x, branch)?;
    }
    let final_norm = ctx.input(&weights.final_norm);
    let head = ctx.input(&weights.head);
    let pre_head = ctx.g.rmsnorm(x, final_norm, RMS_EPS)?;
    let logits = ctx.g.linear(pre_head, head)?;
    Ok(ForwardOutput {
        logits,
        pre_head,
        params: ctx.params,
        ffn_hidden,
    })
}

/// Convenience: logits as a plain tensor.
pub fn logits(weights: &ModelWeights, tokens: &[u32], seq: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = forward(&mut g, weights, tokens, seq, &ForwardOptions::default())?;
    Ok(g.value(out.logits).clone())
}
