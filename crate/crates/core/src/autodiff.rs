//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation on a [`Graph`] evaluates eagerly, stores its output and
//! whatever it needs for the reverse pass, and returns a [`Var`] handle.
//! Inputs always precede their consumers, so the tape is topologically
//! ordered by construction and [`Graph::backward`] is a single reverse sweep.
//!
//! Sequence-mixing operations (convolution, scan, attention) take inputs laid
//! out as `[batch·seq, features]` plus the sequence length.

use crate::error::{Error, Result};
use crate::fp8::{self, Fp8Format};
use crate::kernels::{self, SsdDims, SsdGrads, SsdInputs};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a scan is evaluated in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    /// Closed-form blocks of the given length.
    Chunked(usize),
}

/// Block length at which sequential scans checkpoint their state.
const SCAN_CHECKPOINT: usize = 16;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    SquaredRelu(Var),
    Silu(Var),
    Softplus(Var),
    MatMul(Var, Var),
    Linear(Var, Var),
    LinearFp8 {
        x: Var,
        w: Var,
        /// Dequantized FP8 operands, reused by the reverse pass.
        qx: Tensor,
        qw: Tensor,
        grad_format: Fp8Format,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<f64>,
    },
    KlDiv {
        logits: Var,
        teacher: Vec<f64>,
        probs: Vec<f64>,
        temperature: f64,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    CausalConv {
        x: Var,
        w: Var,
        seq: usize,
    },
    Scan {
        inputs: [Var; 6],
        dims: SsdDims,
        seq: usize,
        block: usize,
        /// state entering each backward block, per sequence
        boundaries: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        hq: usize,
        hkv: usize,
        probs: Vec<f64>,
    },
    Rope {
        x: Var,
        seq: usize,
        heads: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros if `v` was not reached from the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out; zeros if unreached.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input (parameter).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is propagated into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg, "sub")
    }

    /// `a[n, d] + b[d]`, broadcasting over the leading dimension.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let d = x.cols();
        if y.len() != d {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", x.shape(), y.shape())));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (r, v) in row.iter_mut().zip(y.data()) {
                *r += v;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::AddRow(a, b), rg, "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), "scale", |v| v * c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), "exp", f64::exp)
    }

    /// `max(0, x)²`
    pub fn squared_relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::SquaredRelu(a), "squared_relu", kernels::squared_relu)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), "silu", kernels::silu)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a), "softplus", kernels::softplus)
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix("matmul", self.value(a))?;
        let (k2, n) = matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] · [{k2},{n}]")));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    /// `x[n,in] · w[out,in]ᵀ`
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, din) = matrix("linear", self.value(x))?;
        let (dout, din2) = matrix("linear", self.value(w))?;
        if din != din2 {
            return Err(Error::shape("linear", format!("x [{n},{din}] with W [{dout},{din2}]")));
        }
        let out = kernels::matmul_nt(self.value(x).data(), self.value(w).data(), n, din, dout);
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(vec![n, dout], out)?, Op::Linear(x, w), rg, "linear")
    }

    /// Linear layer computed on FP8 operands: `x` and `w` are quantized with
    /// per-tensor current scaling in `fwd_format`; on the reverse pass the
    /// incoming gradient is quantized in `grad_format` and multiplied with
    /// the saved quantized operands.
    pub fn linear_fp8(&mut self, x: Var, w: Var, fwd_format: Fp8Format, grad_format: Fp8Format) -> Result<Var> {
        let (n, din) = matrix("linear_fp8", self.value(x))?;
        let (dout, din2) = matrix("linear_fp8", self.value(w))?;
        if din != din2 {
            return Err(Error::shape("linear_fp8", format!("x [{n},{din}] with W [{dout},{din2}]")));
        }
        let qx = fp8::quantize(self.value(x), fwd_format)?.dequantize();
        let qw = fp8::quantize(self.value(w), fwd_format)?.dequantize();
        let out = Tensor::new(vec![n, dout], kernels::matmul_nt(qx.data(), qw.data(), n, din, dout))?;
        let rg = self.rg(x) || self.rg(w);
        self.push(
            out,
            Op::LinearFp8 {
                x,
                w,
                qx,
                qw,
                grad_format,
            },
            rg,
            "linear_fp8",
        )
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d {
            return Err(Error::shape("rmsnorm", format!("gain {:?} for width {d}", self.value(gain).shape())));
        }
        let (out, inv_rms) = kernels::rmsnorm_rows(self.value(x).data(), self.value(gain).data(), d, eps);
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain);
        self.push(value, Op::RmsNorm { x, gain, inv_rms }, rg, "rmsnorm")
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = x.cols();
        let mut data = x.data().to_vec();
        kernels::softmax_rows(&mut data, d);
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(value, Op::Softmax(a), rg, "softmax")
    }

    /// Mean token cross-entropy of `logits[n, V]` against `targets[n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let x = self.value(logits);
        let (n, vocab) = matrix("cross_entropy", x)?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", format!("{n} rows, {} targets", targets.len())));
        }
        let mut probs = x.data().to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            let row = x.row(i);
            loss += kernels::logsumexp(row) - row[t as usize];
        }
        kernels::softmax_rows(&mut probs, vocab);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Mean over rows of forward KL `Σ p_T log(p_T / p_S)` where
    /// `p_S = softmax(logits / temperature)` and `teacher` holds the teacher
    /// probabilities (already tempered), laid out like `logits`.
    pub fn kl_divergence(&mut self, logits: Var, teacher: &[f64], temperature: f64) -> Result<Var> {
        let x = self.value(logits);
        let (n, vocab) = matrix("kl_divergence", x)?;
        if teacher.len() != x.len() {
            return Err(Error::shape("kl_divergence", "teacher shape differs from logits"));
        }
        if temperature <= 0.0 {
            return Err(Error::InvalidArgument("temperature must be positive".into()));
        }
        let mut probs: Vec<f64> = x.data().iter().map(|v| v / temperature).collect();
        let mut loss = 0.0;
        for i in 0..n {
            let row = &probs[i * vocab..(i + 1) * vocab];
            let lse = kernels::logsumexp(row);
            for (s, &pt) in row.iter().zip(&teacher[i * vocab..(i + 1) * vocab]) {
                if pt > 0.0 {
                    loss += pt * (pt.ln() - (s - lse));
                }
            }
        }
        kernels::softmax_rows(&mut probs, vocab);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::KlDiv {
                logits,
                teacher: teacher.to_vec(),
                probs,
                temperature,
            },
            rg,
            "kl_divergence",
        )
    }

    /// Rows of `table[V, d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = matrix("embedding", t)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(t.row(id as usize));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        )
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = matrix("slice_cols", self.value(x))?;
        if start + len > d {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {d}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, len], data)?, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Depthwise causal convolution: `x[B·T, C]`, `w[C, K]`.
    pub fn causal_conv(&mut self, x: Var, w: Var, seq: usize) -> Result<Var> {
        let (rows, ch) = matrix("causal_conv", self.value(x))?;
        let (ch2, window) = matrix("causal_conv", self.value(w))?;
        if ch != ch2 || seq == 0 || rows % seq != 0 {
            return Err(Error::shape("causal_conv", format!("x [{rows},{ch}], w [{ch2},{window}], seq {seq}")));
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let mut out = Vec::with_capacity(rows * ch);
        for b in 0..rows / seq {
            out.extend(kernels::causal_conv(&xd[b * seq * ch..(b + 1) * seq * ch], wd, seq, ch, window));
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(Tensor::new(vec![rows, ch], out)?, Op::CausalConv { x, w, seq }, rg, "causal_conv")
    }

    /// Selective scan `h_t = a_t·h_{t-1} + Δ_t·(x_t ⊗ B_t)`, `y_t = h_t·C_t + D⊙x_t`
    /// over each sequence, from a zero initial state.
    ///
    /// Inputs: `x[B·T, H·P]`, `dt[B·T, H]` (positive), `a_log[H]`,
    /// `b`,`c[B·T, G·N]`, `d[H·P]`.
    #[allow(clippy::too_many_arguments)]
    pub fn scan(
        &mut self,
        x: Var,
        dt: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d: Var,
        dims: SsdDims,
        seq: usize,
        mode: ScanMode,
    ) -> Result<Var> {
        let rows = self.value(x).rows();
        let checks = [
            (x, dims.inner()),
            (dt, dims.heads),
            (b, dims.bc_width()),
            (c, dims.bc_width()),
        ];
        for (v, width) in checks {
            let t = self.value(v);
            if t.rows() != rows || t.cols() != width || t.shape().len() != 2 {
                return Err(Error::shape("scan", format!("input {:?}, expected [{rows},{width}]", t.shape())));
            }
        }
        if self.value(a_log).len() != dims.heads || self.value(d).len() != dims.inner() {
            return Err(Error::shape("scan", "a_log/d width"));
        }
        if seq == 0 || !rows.is_multiple_of(seq) || dims.groups == 0 || !dims.heads.is_multiple_of(dims.groups) {
            return Err(Error::shape("scan", format!("seq {seq} for {rows} rows, dims {dims:?}")));
        }
        let block = match mode {
            ScanMode::Sequential => SCAN_CHECKPOINT,
            ScanMode::Chunked(c) => c.max(1),
        };
        let sl = dims.state_len();
        let n_blocks = seq.div_ceil(block);
        let batch = rows / seq;
        let all = SsdInputs {
            x: self.value(x).data(),
            dt: self.value(dt).data(),
            a_log: self.value(a_log).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
        };
        let mut y = Vec::with_capacity(rows * dims.inner());
        let mut boundaries = Vec::with_capacity(batch * n_blocks * sl);
        for s in 0..batch {
            let mut state = vec![0.0; sl];
            let mut start = 0;
            while start < seq {
                let len = block.min(seq - start);
                boundaries.extend_from_slice(&state);
                let inp = all.rows(dims, s * seq + start, len);
                let part = match mode {
                    ScanMode::Sequential => kernels::ssd_sequential(dims, inp, len, &mut state),
                    ScanMode::Chunked(_) => kernels::ssd_chunk(dims, inp, len, &mut state),
                };
                y.extend(part);
                start += len;
            }
        }
        let rg = [x, dt, a_log, b, c, d].iter().any(|&v| self.rg(v));
        self.push(
            Tensor::new(vec![rows, dims.inner()], y)?,
            Op::Scan {
                inputs: [x, dt, a_log, b, c, d],
                dims,
                seq,
                block,
                boundaries,
            },
            rg,
            "scan",
        )
    }

    /// Causal grouped-query attention. `q[B·T, Hq·dh]`, `k`,`v[B·T, Hkv·dh]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, hq: usize, hkv: usize) -> Result<Var> {
        let (rows, qw) = matrix("attention", self.value(q))?;
        let (rk, kw) = matrix("attention", self.value(k))?;
        let (rv, vw) = matrix("attention", self.value(v))?;
        if hq == 0 || hkv == 0 || !hq.is_multiple_of(hkv) || qw % hq != 0 {
            return Err(Error::shape("attention", format!("{hq} query heads, {hkv} kv heads")));
        }
        let dh = qw / hq;
        if rk != rows || rv != rows || kw != hkv * dh || vw != kw || seq == 0 || rows % seq != 0 {
            return Err(Error::shape("attention", format!("q [{rows},{qw}], k [{rk},{kw}], v [{rv},{vw}]")));
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = Vec::with_capacity(rows * qw);
        let mut probs = Vec::with_capacity((rows / seq) * hq * seq * seq);
        for b in 0..rows / seq {
            let (o, p) = kernels::attention_causal(
                &qd[b * seq * qw..(b + 1) * seq * qw],
                &kd[b * seq * kw..(b + 1) * seq * kw],
                &vd[b * seq * kw..(b + 1) * seq * kw],
                seq,
                hq,
                hkv,
                dh,
            );
            out.extend(o);
            probs.extend(p);
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::new(vec![rows, qw], out)?,
            Op::Attention {
                q,
                k,
                v,
                seq,
                hq,
                hkv,
                probs,
            },
            rg,
            "attention",
        )
    }

    /// Rotary position encoding on `x[B·T, heads·dh]`, positions restarting
    /// at each sequence.
    pub fn rope(&mut self, x: Var, seq: usize, heads: usize) -> Result<Var> {
        let (rows, w) = matrix("rope", self.value(x))?;
        if heads == 0 || w % heads != 0 || !(w / heads).is_multiple_of(2) || seq == 0 || rows % seq != 0 {
            return Err(Error::shape("rope", format!("[{rows},{w}] with {heads} heads")));
        }
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_exact_mut(seq * w) {
            kernels::rope_rows(chunk, heads, w / heads, 0, false);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![rows, w], data)?, Op::Rope { x, seq, heads }, rg, "rope")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|d| Tensor::new(node.value.shape().to_vec(), d).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, src: &[f64]) {
        assert!(target.0 < grads.len(), "tape order violated");
        if !self.rg(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, s) in acc.iter_mut().zip(src) {
                    *a += s;
                }
            }
            slot @ None => *slot = Some(src.to_vec()),
        }
    }

    fn accumulate_owned(&self, grads: &mut [Option<Vec<f64>>], target: Var, src: Vec<f64>) {
        if !self.rg(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, s) in acc.iter_mut().zip(&src) {
                    *a += s;
                }
            }
            slot @ None => *slot = Some(src),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate_owned(grads, *b, neg);
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g);
                let d = self.value(*b).len();
                let mut gb = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accumulate_owned(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.iter().zip(x).map(|(g, x)| g * x).collect();
                self.accumulate_owned(grads, *a, ga);
                self.accumulate_owned(grads, *b, gb);
            }
            Op::Scale(a, c) => {
                let ga = g.iter().map(|v| v * c).collect();
                self.accumulate_owned(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                self.accumulate_owned(grads, *a, ga);
            }
            Op::SquaredRelu(a) => {
                let x = self.value(*a).data();
                let ga = g.iter().zip(x).map(|(g, &x)| g * 2.0 * x.max(0.0)).collect();
                self.accumulate_owned(grads, *a, ga);
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = kernels::sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accumulate_owned(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let ga = g.iter().zip(x).map(|(g, &x)| g * kernels::sigmoid(x)).collect();
                self.accumulate_owned(grads, *a, ga);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                if self.rg(*a) {
                    // g[m,n] · b[k,n]ᵀ
                    let ga = kernels::matmul_nt(g, self.value(*b).data(), m, n, k);
                    self.accumulate_owned(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = kernels::matmul_tn(self.value(*a).data(), g, m, k, n);
                    self.accumulate_owned(grads, *b, gb);
                }
            }
            Op::Linear(x, w) => {
                let (n, din) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let dout = self.value(*w).shape()[0];
                if self.rg(*x) {
                    let gx = kernels::matmul(g, self.value(*w).data(), n, dout, din);
                    self.accumulate_owned(grads, *x, gx);
                }
                if self.rg(*w) {
                    let gw = kernels::matmul_tn(g, self.value(*x).data(), n, dout, din);
                    self.accumulate_owned(grads, *w, gw);
                }
            }
            Op::LinearFp8 {
                x,
                w,
                qx,
                qw,
                grad_format,
            } => {
                let (n, din) = (qx.shape()[0], qx.shape()[1]);
                let dout = qw.shape()[0];
                let gt = Tensor::new(vec![n, dout], g.to_vec())?;
                let qg = fp8::quantize(&gt, *grad_format)?.dequantize();
                if self.rg(*x) {
                    let gx = kernels::matmul(qg.data(), qw.data(), n, dout, din);
                    self.accumulate_owned(grads, *x, gx);
                }
                if self.rg(*w) {
                    let gw = kernels::matmul_tn(qg.data(), qx.data(), n, dout, din);
                    self.accumulate_owned(grads, *w, gw);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                let d = gd.len();
                let mut gx = vec![0.0; xd.len()];
                let mut gg = vec![0.0; d];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xr = &xd[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut proj = 0.0;
                    for j in 0..d {
                        let xhat = xr[j] * inv;
                        gg[j] += gr[j] * xhat;
                        proj += gr[j] * gd[j] * xhat;
                    }
                    proj /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv * (gr[j] * gd[j] - xr[j] * inv * proj);
                    }
                }
                self.accumulate_owned(grads, *x, gx);
                self.accumulate_owned(grads, *gain, gg);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.cols();
                let mut ga = vec![0.0; y.len()];
                for r in 0..y.len() / d {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let s = kernels::dot(yr, gr);
                    for j in 0..d {
                        ga[r * d + j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate_owned(grads, *a, ga);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0] / targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * vocab + t as usize] -= scale;
                }
                self.accumulate_owned(grads, *logits, gl);
            }
            Op::KlDiv {
                logits,
                teacher,
                probs,
                temperature,
            } => {
                let n = self.value(*logits).rows();
                let scale = g[0] / (n as f64 * temperature);
                let gl = probs.iter().zip(teacher).map(|(ps, pt)| (ps - pt) * scale).collect();
                self.accumulate_owned(grads, *logits, gl);
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let t = self.value(*table);
                    let d = t.cols();
                    let mut gt = vec![0.0; t.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                        for (o, v) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    self.accumulate_owned(grads, *table, gt);
                }
            }
            Op::SliceCols { x, start } => {
                let (n, d) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let len = node.value.cols();
                let mut gx = vec![0.0; n * d];
                for r in 0..n {
                    gx[r * d + start..r * d + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate_owned(grads, *x, gx);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(*a).len()];
                self.accumulate_owned(grads, *a, ga);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let ga = vec![g[0] / n as f64; n];
                self.accumulate_owned(grads, *a, ga);
            }
            Op::CausalConv { x, w, seq } => {
                let (rows, ch) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let window = self.value(*w).shape()[1];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut gx = vec![0.0; rows * ch];
                let mut gw = vec![0.0; ch * window];
                for b in 0..rows / seq {
                    for t in 0..*seq {
                        let row = b * seq + t;
                        for k in 0..window {
                            let src = t as isize - (window as isize - 1) + k as isize;
                            if src < 0 {
                                continue;
                            }
                            let sr = b * seq + src as usize;
                            for c in 0..ch {
                                let gv = g[row * ch + c];
                                gx[sr * ch + c] += wd[c * window + k] * gv;
                                gw[c * window + k] += xd[sr * ch + c] * gv;
                            }
                        }
                    }
                }
                self.accumulate_owned(grads, *x, gx);
                self.accumulate_owned(grads, *w, gw);
            }
            Op::Scan {
                inputs,
                dims,
                seq,
                block,
                boundaries,
            } => {
                let [x, dt, a_log, b, c, d] = *inputs;
                let dims = *dims;
                let all = SsdInputs {
                    x: self.value(x).data(),
                    dt: self.value(dt).data(),
                    a_log: self.value(a_log).data(),
                    b: self.value(b).data(),
                    c: self.value(c).data(),
                    d: self.value(d).data(),
                };
                let rows = self.value(x).rows();
                let (hp, h, bc, sl) = (dims.inner(), dims.heads, dims.bc_width(), dims.state_len());
                let mut gx = vec![0.0; rows * hp];
                let mut gdt = vec![0.0; rows * h];
                let mut ga = vec![0.0; h];
                let mut gb = vec![0.0; rows * bc];
                let mut gc = vec![0.0; rows * bc];
                let mut gd = vec![0.0; hp];
                let n_blocks = seq.div_ceil(*block);
                for s in 0..rows / seq {
                    let mut carry = vec![0.0; sl];
                    for blk in (0..n_blocks).rev() {
                        let start = blk * block;
                        let len = (*block).min(seq - start);
                        let r0 = s * seq + start;
                        let init = &boundaries[(s * n_blocks + blk) * sl..(s * n_blocks + blk + 1) * sl];
                        let mut sg = SsdGrads {
                            x: &mut gx[r0 * hp..(r0 + len) * hp],
                            dt: &mut gdt[r0 * h..(r0 + len) * h],
                            a_log: &mut ga,
                            b: &mut gb[r0 * bc..(r0 + len) * bc],
                            c: &mut gc[r0 * bc..(r0 + len) * bc],
                            d: &mut gd,
                        };
                        kernels::ssd_backward_block(
                            dims,
                            all.rows(dims, r0, len),
                            len,
                            init,
                            &g[r0 * hp..(r0 + len) * hp],
                            &mut carry,
                            &mut sg,
                        );
                    }
                }
                self.accumulate_owned(grads, x, gx);
                self.accumulate_owned(grads, dt, gdt);
                self.accumulate_owned(grads, a_log, ga);
                self.accumulate_owned(grads, b, gb);
                self.accumulate_owned(grads, c, gc);
                self.accumulate_owned(grads, d, gd);
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                hq,
                hkv,
                probs,
            } => {
                let (rows, qw) = (self.value(*q).shape()[0], self.value(*q).shape()[1]);
                let kw = self.value(*k).cols();
                let dh = qw / hq;
                let group = hq / hkv;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; rows * qw];
                let mut gk = vec![0.0; rows * kw];
                let mut gv = vec![0.0; rows * kw];
                let mut gp = vec![0.0; *seq];
                for b in 0..rows / seq {
                    let base = b * seq;
                    for h in 0..*hq {
                        let kh = h / group;
                        for t in 0..*seq {
                            let p = &probs[((b * hq + h) * seq + t) * seq..((b * hq + h) * seq + t) * seq + t + 1];
                            let go = &g[(base + t) * qw + h * dh..(base + t) * qw + (h + 1) * dh];
                            for tau in 0..=t {
                                let vo = (base + tau) * kw + kh * dh;
                                gp[tau] = kernels::dot(go, &vd[vo..vo + dh]);
                                kernels::axpy(p[tau], go, &mut gv[vo..vo + dh]);
                            }
                            let s = kernels::dot(p, &gp[..=t]);
                            let qo = (base + t) * qw + h * dh;
                            for tau in 0..=t {
                                let gs = p[tau] * (gp[tau] - s) * scale;
                                if gs == 0.0 {
                                    continue;
                                }
                                let ko = (base + tau) * kw + kh * dh;
                                kernels::axpy(gs, &kd[ko..ko + dh], &mut gq[qo..qo + dh]);
                                kernels::axpy(gs, &qd[qo..qo + dh], &mut gk[ko..ko + dh]);
                            }
                        }
                    }
                }
                self.accumulate_owned(grads, *q, gq);
                self.accumulate_owned(grads, *k, gk);
                self.accumulate_owned(grads, *v, gv);
            }
            Op::Rope { x, seq, heads } => {
                let w = node.value.cols();
                let mut gx = g.to_vec();
                for chunk in gx.chunks_exact_mut(seq * w) {
                    kernels::rope_rows(chunk, *heads, w / heads, 0, true);
                }
                self.accumulate_owned(grads, *x, gx);
            }
        }
        Ok(())
    }
}

/// Central finite-difference gradient of a scalar function:
/// `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` per coordinate.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, gi) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_gradient" });
        }
        *gi = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest relative error between two gradients, with an absolute floor so
/// that near-zero components do not dominate.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-8);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()).max(1e-3 * scale)))
        .fold(0.0, f64::max)
}
