//! Plain numeric kernels over row-major slices.
//!
//! These are shared by the autodiff graph (training, teacher-forced
//! evaluation) and by the incremental inference engine, so that both paths
//! run the same arithmetic in the same order.

/// Dot product with a fixed four-lane accumulation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_nt(a, &transpose(b, k, n), m, k, n)
}

/// `x[r,c]ᵀ`
pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`, the layout of every linear layer (`x · Wᵀ`).
///
/// Each output is accumulated in a single lane in increasing `k` order
/// starting from zero, so results do not depend on the tiling or on how
/// many rows are processed together, and exact zeros in `a` or `b` leave
/// sums bit-identical.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    const T: usize = 4;
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    // pack b into panels of T rows interleaved along k
    let panels = n.div_ceil(T);
    let mut packed = vec![0.0; panels * k * T];
    for j in 0..n {
        let (jb, jj) = (j / T, j % T);
        let dst = &mut packed[jb * k * T..(jb + 1) * k * T];
        for (p, &v) in b[j * k..(j + 1) * k].iter().enumerate() {
            dst[p * T + jj] = v;
        }
    }
    let mut out = vec![0.0; m * n];
    let mut i0 = 0;
    while i0 < m {
        let rows = (m - i0).min(T);
        for jb in 0..panels {
            let panel = &packed[jb * k * T..(jb + 1) * k * T];
            let mut acc = [[0.0f64; T]; T];
            if rows == T {
                let a0 = &a[i0 * k..(i0 + 1) * k];
                let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
                let a2 = &a[(i0 + 2) * k..(i0 + 3) * k];
                let a3 = &a[(i0 + 3) * k..(i0 + 4) * k];
                for (p, bv) in panel.chunks_exact(T).enumerate() {
                    let av = [a0[p], a1[p], a2[p], a3[p]];
                    for ii in 0..T {
                        for jj in 0..T {
                            acc[ii][jj] += av[ii] * bv[jj];
                        }
                    }
                }
            } else {
                for (ii, acc_row) in acc.iter_mut().enumerate().take(rows) {
                    let ar = &a[(i0 + ii) * k..(i0 + ii + 1) * k];
                    for (p, bv) in panel.chunks_exact(T).enumerate() {
                        for jj in 0..T {
                            acc_row[jj] += ar[p] * bv[jj];
                        }
                    }
                }
            }
            let cols = (n - jb * T).min(T);
            for (ii, acc_row) in acc.iter().enumerate().take(rows) {
                let o = (i0 + ii) * n + jb * T;
                out[o..o + cols].copy_from_slice(&acc_row[..cols]);
            }
        }
        i0 += T;
    }
    out
}

/// `a[r,m]ᵀ · b[r,n]`, used for weight gradients.
pub fn matmul_tn(a: &[f64], b: &[f64], r: usize, m: usize, n: usize) -> Vec<f64> {
    matmul_nt(&transpose(a, r, m), &transpose(b, r, n), m, r, n)
}

#[inline]
pub fn squared_relu(x: f64) -> f64 {
    let r = x.max(0.0);
    r * r
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Row-wise RMS normalization. Returns the output and per-row `1/rms`.
pub fn rmsnorm_rows(x: &[f64], gain: &[f64], d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; n];
    for i in 0..n {
        let xr = &x[i * d..(i + 1) * d];
        let ms = dot(xr, xr) / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        inv[i] = r;
        for ((o, v), g) in out[i * d..(i + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = v * r * g;
        }
    }
    (out, inv)
}

/// In-place row softmax.
pub fn softmax_rows(x: &mut [f64], d: usize) {
    for row in x.chunks_exact_mut(d) {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = 1.0 / s;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Row-wise log-sum-exp.
pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Depthwise causal convolution over one sequence of `rows` time steps.
///
/// `y[t,c] = Σ_k w[c,k] · x[t-(K-1)+k, c]`, with zeros before the sequence
/// start.
pub fn causal_conv(x: &[f64], w: &[f64], rows: usize, channels: usize, window: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * channels];
    for t in 0..rows {
        let yr = &mut y[t * channels..(t + 1) * channels];
        for k in 0..window {
            let src = t as isize - (window as isize - 1) + k as isize;
            if src < 0 {
                continue;
            }
            let xr = &x[src as usize * channels..(src as usize + 1) * channels];
            for c in 0..channels {
                yr[c] += w[c * window + k] * xr[c];
            }
        }
    }
    y
}

/// One convolution step. `tail` holds the previous `window-1` inputs,
/// oldest first, and is shifted to include `x`.
pub fn causal_conv_step(tail: &mut [f64], x: &[f64], w: &[f64], window: usize, y: &mut [f64]) {
    let channels = x.len();
    for c in 0..channels {
        let mut acc = 0.0;
        for k in 0..window - 1 {
            acc += w[c * window + k] * tail[k * channels + c];
        }
        // same summation order as `causal_conv`: oldest tap first
        y[c] = acc + w[c * window + window - 1] * x[c];
    }
    if window > 1 {
        tail.copy_within(channels.., 0);
        let last = (window - 2) * channels;
        tail[last..last + channels].copy_from_slice(x);
    }
}

/// Shape of the selective-scan state: `heads` heads of `head_dim` channels,
/// each carrying a `head_dim × d_state` matrix; `B`/`C` are shared by the
/// heads of one of `groups` groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsdDims {
    pub heads: usize,
    pub head_dim: usize,
    pub groups: usize,
    pub d_state: usize,
}

impl SsdDims {
    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn bc_width(&self) -> usize {
        self.groups * self.d_state
    }

    pub fn state_len(&self) -> usize {
        self.heads * self.head_dim * self.d_state
    }

    pub fn heads_per_group(&self) -> usize {
        self.heads / self.groups
    }
}

/// Per-sequence inputs of the selective scan. Row-major over time:
/// `x: [T, H·P]`, `dt: [T, H]` (already positive), `b`/`c: [T, G·N]`;
/// `a_log: [H]`, `d: [H·P]`.
#[derive(Clone, Copy)]
pub struct SsdInputs<'a> {
    pub x: &'a [f64],
    pub dt: &'a [f64],
    pub a_log: &'a [f64],
    pub b: &'a [f64],
    pub c: &'a [f64],
    pub d: &'a [f64],
}

impl<'a> SsdInputs<'a> {
    /// Restrict the time-indexed inputs to rows `start..start+len`.
    pub fn rows(&self, dims: SsdDims, start: usize, len: usize) -> SsdInputs<'a> {
        let (hp, h, bc) = (dims.inner(), dims.heads, dims.bc_width());
        SsdInputs {
            x: &self.x[start * hp..(start + len) * hp],
            dt: &self.dt[start * h..(start + len) * h],
            a_log: self.a_log,
            b: &self.b[start * bc..(start + len) * bc],
            c: &self.c[start * bc..(start + len) * bc],
            d: self.d,
        }
    }
}

/// One recurrence step: `h ← a·h + Δ·(x ⊗ B)`, `y = h·C + D⊙x`,
/// with `a = exp(-Δ·exp(A_log))`.
#[allow(clippy::too_many_arguments)]
pub fn ssd_step(
    dims: SsdDims,
    state: &mut [f64],
    x: &[f64],
    dt: &[f64],
    a_log: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    y: &mut [f64],
) {
    let (p_dim, n_dim, hpg) = (dims.head_dim, dims.d_state, dims.heads_per_group());
    for h in 0..dims.heads {
        let g = h / hpg;
        let a = (-dt[h] * a_log[h].exp()).exp();
        let bg = &b[g * n_dim..(g + 1) * n_dim];
        let cg = &c[g * n_dim..(g + 1) * n_dim];
        for p in 0..p_dim {
            let ch = h * p_dim + p;
            let coef = dt[h] * x[ch];
            let st = &mut state[ch * n_dim..(ch + 1) * n_dim];
            for (s, bv) in st.iter_mut().zip(bg) {
                *s = a * *s + coef * bv;
            }
            y[ch] = dot(st, cg) + d[ch] * x[ch];
        }
    }
}

/// Sequential scan over `rows` steps starting from `state` (updated in place).
pub fn ssd_sequential(dims: SsdDims, inp: SsdInputs, rows: usize, state: &mut [f64]) -> Vec<f64> {
    let (hp, h, bc) = (dims.inner(), dims.heads, dims.bc_width());
    let mut y = vec![0.0; rows * hp];
    for t in 0..rows {
        ssd_step(
            dims,
            state,
            &inp.x[t * hp..(t + 1) * hp],
            &inp.dt[t * h..(t + 1) * h],
            inp.a_log,
            &inp.b[t * bc..(t + 1) * bc],
            &inp.c[t * bc..(t + 1) * bc],
            inp.d,
            &mut y[t * hp..(t + 1) * hp],
        );
    }
    y
}

/// Closed-form evaluation of one chunk (the quadratic "dual" form): outputs
/// are an intra-chunk decayed attention-like sum plus the decayed
/// contribution of the incoming state. `state` is replaced by the state at
/// the end of the chunk.
pub fn ssd_chunk(dims: SsdDims, inp: SsdInputs, rows: usize, state: &mut [f64]) -> Vec<f64> {
    let (hp, p_dim, n_dim) = (dims.inner(), dims.head_dim, dims.d_state);
    let (heads, bc, hpg) = (dims.heads, dims.bc_width(), dims.heads_per_group());
    let mut y = vec![0.0; rows * hp];
    let mut end = vec![0.0; state.len()];

    // C_t · B_τ per group, lower triangle
    let mut cb = vec![0.0; dims.groups * rows * rows];
    for g in 0..dims.groups {
        for t in 0..rows {
            let ct = &inp.c[t * bc + g * n_dim..t * bc + (g + 1) * n_dim];
            for tau in 0..=t {
                let bt = &inp.b[tau * bc + g * n_dim..tau * bc + (g + 1) * n_dim];
                cb[(g * rows + t) * rows + tau] = dot(ct, bt);
            }
        }
    }

    let mut cum = vec![0.0; rows];
    let mut weights = vec![0.0; rows * rows];
    let mut into_end = vec![0.0; rows];
    for h in 0..heads {
        let g = h / hpg;
        let ea = inp.a_log[h].exp();
        let mut acc = 0.0;
        for (t, cv) in cum.iter_mut().enumerate() {
            acc += -inp.dt[t * heads + h] * ea;
            *cv = acc;
        }
        let total = cum[rows - 1];
        // decayed input weights, shared by the channels of this head
        for t in 0..rows {
            for tau in 0..=t {
                weights[t * rows + tau] =
                    (cum[t] - cum[tau]).exp() * inp.dt[tau * heads + h] * cb[(g * rows + t) * rows + tau];
            }
        }
        for (tau, w) in into_end.iter_mut().enumerate() {
            *w = (total - cum[tau]).exp() * inp.dt[tau * heads + h];
        }
        for t in 0..rows {
            let ct = &inp.c[t * bc + g * n_dim..t * bc + (g + 1) * n_dim];
            let decay_in = cum[t].exp();
            let wt = &weights[t * rows..t * rows + t + 1];
            for p in 0..p_dim {
                let ch = h * p_dim + p;
                let mut v = decay_in * dot(&state[ch * n_dim..(ch + 1) * n_dim], ct);
                for (tau, w) in wt.iter().enumerate() {
                    v += w * inp.x[tau * hp + ch];
                }
                y[t * hp + ch] = v + inp.d[ch] * inp.x[t * hp + ch];
            }
        }
        let decay_all = total.exp();
        for p in 0..p_dim {
            let ch = h * p_dim + p;
            let dst = &mut end[ch * n_dim..(ch + 1) * n_dim];
            for (e, s) in dst.iter_mut().zip(&state[ch * n_dim..(ch + 1) * n_dim]) {
                *e = decay_all * s;
            }
            for (tau, w) in into_end.iter().enumerate() {
                axpy(w * inp.x[tau * hp + ch], &inp.b[tau * bc + g * n_dim..tau * bc + (g + 1) * n_dim], dst);
            }
        }
    }
    state.copy_from_slice(&end);
    y
}

/// Chunked scan: `ssd_chunk` over consecutive blocks of `chunk` rows, with
/// the state passed between blocks.
pub fn ssd_chunked(
    dims: SsdDims,
    inp: SsdInputs,
    rows: usize,
    chunk: usize,
    state: &mut [f64],
) -> Vec<f64> {
    let chunk = chunk.max(1);
    let mut y = Vec::with_capacity(rows * dims.inner());
    let mut start = 0;
    while start < rows {
        let len = chunk.min(rows - start);
        y.extend(ssd_chunk(dims, inp.rows(dims, start, len), len, state));
        start += len;
    }
    y
}

/// Gradient buffers for one sequence of the scan.
pub struct SsdGrads<'a> {
    pub x: &'a mut [f64],
    pub dt: &'a mut [f64],
    pub a_log: &'a mut [f64],
    pub b: &'a mut [f64],
    pub c: &'a mut [f64],
    pub d: &'a mut [f64],
}

/// Reverse pass over one block of `rows` steps that started from `init`.
/// `carry` enters as the gradient with respect to the block's final state
/// and leaves as the gradient with respect to `init`. Gradient slices for
/// time-indexed inputs are relative to the block.
pub fn ssd_backward_block(
    dims: SsdDims,
    inp: SsdInputs,
    rows: usize,
    init: &[f64],
    gy: &[f64],
    carry: &mut [f64],
    grads: &mut SsdGrads,
) {
    let (hp, p_dim, n_dim) = (dims.inner(), dims.head_dim, dims.d_state);
    let (heads, bc, hpg, sl) = (dims.heads, dims.bc_width(), dims.heads_per_group(), dims.state_len());

    // recompute the states of this block
    let mut states = vec![0.0; rows * sl];
    let mut st = init.to_vec();
    let mut scratch = vec![0.0; hp];
    for t in 0..rows {
        ssd_step(
            dims,
            &mut st,
            &inp.x[t * hp..(t + 1) * hp],
            &inp.dt[t * heads..(t + 1) * heads],
            inp.a_log,
            &inp.b[t * bc..(t + 1) * bc],
            &inp.c[t * bc..(t + 1) * bc],
            inp.d,
            &mut scratch,
        );
        states[t * sl..(t + 1) * sl].copy_from_slice(&st);
    }

    let mut gh = vec![0.0; n_dim];
    for t in (0..rows).rev() {
        let cur = &states[t * sl..(t + 1) * sl];
        let prev = if t == 0 { init } else { &states[(t - 1) * sl..t * sl] };
        for h in 0..heads {
            let g = h / hpg;
            let ea = inp.a_log[h].exp();
            let dt = inp.dt[t * heads + h];
            let a = (-dt * ea).exp();
            let bg = &inp.b[t * bc + g * n_dim..t * bc + (g + 1) * n_dim];
            let cg = &inp.c[t * bc + g * n_dim..t * bc + (g + 1) * n_dim];
            let mut ga = 0.0;
            let mut gdt = 0.0;
            for p in 0..p_dim {
                let ch = h * p_dim + p;
                let gyv = gy[t * hp + ch];
                let xv = inp.x[t * hp + ch];
                let hs = &cur[ch * n_dim..(ch + 1) * n_dim];
                let hprev = &prev[ch * n_dim..(ch + 1) * n_dim];
                let cr = &mut carry[ch * n_dim..(ch + 1) * n_dim];
                let gc = &mut grads.c[t * bc + g * n_dim..t * bc + (g + 1) * n_dim];
                axpy(gyv, hs, gc);
                for n in 0..n_dim {
                    gh[n] = cr[n] + gyv * cg[n];
                }
                ga += dot(&gh, hprev);
                let ghb = dot(&gh, bg);
                gdt += ghb * xv;
                grads.x[t * hp + ch] += dt * ghb + inp.d[ch] * gyv;
                axpy(dt * xv, &gh, &mut grads.b[t * bc + g * n_dim..t * bc + (g + 1) * n_dim]);
                grads.d[ch] += gyv * xv;
                for n in 0..n_dim {
                    cr[n] = a * gh[n];
                }
            }
            // a = exp(-dt·e^A)
            grads.dt[t * heads + h] += gdt - ga * ea * a;
            grads.a_log[h] += -ga * dt * ea * a;
        }
    }
}

/// Causal multi-head attention with grouped key/value heads over one
/// sequence. `q: [T, Hq·dh]`, `k`,`v: [T, Hkv·dh]`. Returns the output and
/// the attention probabilities `[Hq, T, T]` (zero above the diagonal).
pub fn attention_causal(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    rows: usize,
    hq: usize,
    hkv: usize,
    dh: usize,
) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (dh as f64).sqrt();
    let group = hq / hkv;
    let (qw, kw) = (hq * dh, hkv * dh);
    let mut out = vec![0.0; rows * qw];
    let mut probs = vec![0.0; hq * rows * rows];
    for h in 0..hq {
        let kh = h / group;
        for t in 0..rows {
            let qt = &q[t * qw + h * dh..t * qw + (h + 1) * dh];
            let pr = &mut probs[(h * rows + t) * rows..(h * rows + t) * rows + t + 1];
            for (tau, s) in pr.iter_mut().enumerate() {
                *s = scale * dot(qt, &k[tau * kw + kh * dh..tau * kw + (kh + 1) * dh]);
            }
            softmax_rows(pr, t + 1);
            let o = &mut out[t * qw + h * dh..t * qw + (h + 1) * dh];
            for (tau, &p) in pr.iter().enumerate() {
                axpy(p, &v[tau * kw + kh * dh..tau * kw + (kh + 1) * dh], o);
            }
        }
    }
    (out, probs)
}

/// Attention of one new query against `n` cached positions laid out as
/// `[n, Hkv·dh]`.
pub fn attention_decode(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    n: usize,
    hq: usize,
    hkv: usize,
    dh: usize,
) -> Vec<f64> {
    let scale = 1.0 / (dh as f64).sqrt();
    let group = hq / hkv;
    let kw = hkv * dh;
    let mut out = vec![0.0; hq * dh];
    let mut scores = vec![0.0; n];
    for h in 0..hq {
        let kh = h / group;
        let qh = &q[h * dh..(h + 1) * dh];
        for (tau, s) in scores.iter_mut().enumerate() {
            *s = scale * dot(qh, &keys[tau * kw + kh * dh..tau * kw + (kh + 1) * dh]);
        }
        softmax_rows(&mut scores, n);
        let o = &mut out[h * dh..(h + 1) * dh];
        for (tau, &p) in scores.iter().enumerate() {
            axpy(p, &values[tau * kw + kh * dh..tau * kw + (kh + 1) * dh], o);
        }
    }
    out
}

/// Rotary position encoding applied in place to rows `[T, heads·dh]`,
/// row `t` at position `offset + t`. `inverse` applies the transpose.
pub fn rope_rows(x: &mut [f64], heads: usize, dh: usize, offset: usize, inverse: bool) {
    let width = heads * dh;
    let half = dh / 2;
    for (t, row) in x.chunks_exact_mut(width).enumerate() {
        let pos = (offset + t) as f64;
        for i in 0..half {
            let theta = pos * 10000f64.powf(-2.0 * i as f64 / dh as f64);
            let (s, c) = theta.sin_cos();
            let s = if inverse { -s } else { s };
            for h in 0..heads {
                let j = h * dh + 2 * i;
                let (a, b) = (row[j], row[j + 1]);
                row[j] = a * c - b * s;
                row[j + 1] = a * s + b * c;
            }
        }
    }
}
