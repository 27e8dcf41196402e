//! Pre-training loop: AdamW with decoupled weight decay, linear warmup into
//! cosine decay, phased data blending and per-interval run logs for
//! comparing full-precision and FP8 runs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fp8::PrecisionPolicy;
use crate::model::{forward, ForwardOptions, ForwardOutput, ModelWeights};
use crate::tensor::Tensor;

/// Token streams keyed by category name.
pub type Corpora = BTreeMap<String, Vec<u32>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrecisionMode {
    #[serde(rename = "FULL")]
    Full,
    #[serde(rename = "FP8_MIXED")]
    Fp8Mixed,
}

impl PrecisionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PrecisionMode::Full => "FULL",
            PrecisionMode::Fp8Mixed => "FP8_MIXED",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub min_lr_fraction: f64,
    pub warmup_tokens: u64,
    pub total_tokens: u64,
    pub batch_tokens: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seq_len: usize,
    pub precision_mode: PrecisionMode,
    pub precision_policy: PrecisionPolicy,
    /// Global-norm clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Sequences per gradient shard. Shards are fixed by the batch layout,
    /// so results do not depend on how many threads process them.
    pub micro_batch_seqs: usize,
    /// Log interval as a fraction of `total_tokens`.
    pub log_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 3e-3,
            min_lr_fraction: 0.01,
            warmup_tokens: 100_000,
            total_tokens: 5_000_000,
            batch_tokens: 16_384,
            weight_decay: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            seq_len: 256,
            precision_mode: PrecisionMode::Full,
            precision_policy: PrecisionPolicy::default(),
            grad_clip: Some(1.0),
            micro_batch_seqs: 4,
            log_fraction: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.total_tokens > 0 && self.warmup_tokens >= self.total_tokens {
            return bad(format!(
                "warmup_tokens ({}) must be below total_tokens ({})",
                self.warmup_tokens, self.total_tokens
            ));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be finite and nonnegative".into());
        }
        if !(self.min_lr_fraction > 0.0 && self.min_lr_fraction <= 1.0) {
            return bad("min_lr_fraction must lie in (0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return bad("weight_decay must be nonnegative and adam_eps positive".into());
        }
        if self.seq_len == 0 || self.micro_batch_seqs == 0 {
            return bad("seq_len and micro_batch_seqs must be positive".into());
        }
        if self.batch_tokens == 0 || !self.batch_tokens.is_multiple_of(self.seq_len as u64) {
            return bad(format!(
                "batch_tokens ({}) must be a positive multiple of seq_len ({})",
                self.batch_tokens, self.seq_len
            ));
        }
        if !(self.log_fraction > 0.0 && self.log_fraction <= 1.0) {
            return bad("log_fraction must lie in (0, 1]".into());
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0 || c.is_nan()) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn batch_seqs(&self) -> usize {
        (self.batch_tokens / self.seq_len as u64) as usize
    }

    pub fn fp8_policy(&self) -> Option<PrecisionPolicy> {
        match self.precision_mode {
            PrecisionMode::Full => None,
            PrecisionMode::Fp8Mixed => Some(self.precision_policy),
        }
    }

    /// Learning rate after `tokens_seen` tokens: linear ramp from zero to
    /// the peak over the warmup, then cosine decay to `min_lr_fraction·peak`
    /// at `total_tokens`.
    pub fn lr_at(&self, tokens_seen: u64) -> Result<f64> {
        if tokens_seen > self.total_tokens {
            return Err(Error::InvalidArgument(format!(
                "tokens_seen {tokens_seen} beyond total_tokens {}",
                self.total_tokens
            )));
        }
        let peak = self.peak_lr;
        if tokens_seen < self.warmup_tokens {
            return Ok(peak * tokens_seen as f64 / self.warmup_tokens as f64);
        }
        let min = self.min_lr_fraction * peak;
        let span = (self.total_tokens - self.warmup_tokens) as f64;
        let progress = if span == 0.0 {
            1.0
        } else {
            (tokens_seen - self.warmup_tokens) as f64 / span
        };
        Ok(min + 0.5 * (peak - min) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// AdamW with bias-corrected moments. Weight decay is decoupled and applies
/// to matrices only; gains, biases and per-head scalars are not decayed.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Applied updates.
    pub steps: u64,
    /// Updates skipped because a gradient was not finite.
    pub skipped: u64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            grad_clip: None,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
            skipped: 0,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamW {
            grad_clip: cfg.grad_clip,
            ..AdamW::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
        }
    }

    /// One update. Returns `false` (and leaves `params` untouched) when any
    /// gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<bool> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam_step", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
        }
        if grads.iter().any(|g| g.data().iter().any(|x| !x.is_finite())) {
            self.skipped += 1;
            return Ok(false);
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        let clip = match self.grad_clip {
            Some(c) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj * clip;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w -= lr * (update + decay * *w);
            }
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendPhase {
    pub start_fraction: f64,
    pub weights: BTreeMap<String, f64>,
}

/// Category weights that switch at fixed fractions of the token budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlendSchedule {
    pub phases: Vec<BlendPhase>,
}

impl BlendSchedule {
    pub fn single(category: &str) -> Self {
        BlendSchedule {
            phases: vec![BlendPhase {
                start_fraction: 0.0,
                weights: BTreeMap::from([(category.to_string(), 1.0)]),
            }],
        }
    }

    /// Three phases switching at 60% and 80% of training. The later phases
    /// shift weight towards the structured categories.
    pub fn three_phase(categories: &[&str]) -> Self {
        let phase = |start: f64, boost: f64| BlendPhase {
            start_fraction: start,
            weights: categories
                .iter()
                .enumerate()
                .map(|(i, c)| (c.to_string(), if i + 1 < categories.len() { boost } else { 1.0 }))
                .collect(),
        };
        BlendSchedule {
            phases: vec![phase(0.0, 1.0), phase(0.6, 1.5), phase(0.8, 2.0)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.phases.first().ok_or_else(|| Error::Config("blend has no phases".into()))?;
        if first.start_fraction != 0.0 {
            return Err(Error::Config("first blend phase must start at 0".into()));
        }
        for pair in self.phases.windows(2) {
            // negated so that NaN starts are rejected too
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(pair[1].start_fraction > pair[0].start_fraction) {
                return Err(Error::Config("blend phase starts must be strictly increasing".into()));
            }
        }
        for p in &self.phases {
            if p.start_fraction > 1.0 {
                return Err(Error::Config("blend phase starts beyond the end of training".into()));
            }
            if p.weights.values().any(|&w| !(w >= 0.0 && w.is_finite())) {
                return Err(Error::Config("blend weights must be finite and nonnegative".into()));
            }
            if p.weights.values().sum::<f64>() <= 0.0 {
                return Err(Error::Config("blend phase weights sum to zero".into()));
            }
        }
        Ok(())
    }

    /// Phase active at `progress ∈ [0, 1]`.
    pub fn active(&self, progress: f64) -> &BlendPhase {
        self.phases
            .iter()
            .rev()
            .find(|p| p.start_fraction <= progress)
            .unwrap_or(&self.phases[0])
    }

    pub fn categories(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.phases.iter().flat_map(|p| p.weights.keys().map(String::as_str)).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// `batch` sequences of inputs with next-token targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub seq: usize,
    /// Category of each sequence.
    pub categories: Vec<String>,
}

/// Draws `batch` windows of `seq + 1` tokens. Each window picks its category
/// with probability proportional to the weights of the phase active at
/// `progress`, then a uniform offset into that category's stream.
pub fn sample_batch(
    blend: &BlendSchedule,
    progress: f64,
    corpora: &Corpora,
    batch: usize,
    seq: usize,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let phase = blend.active(progress);
    let mut table = Vec::new();
    let mut total = 0.0;
    for (name, &w) in &phase.weights {
        if w <= 0.0 {
            continue;
        }
        let stream = corpora
            .get(name)
            .ok_or_else(|| Error::Config(format!("blend category {name:?} has no corpus")))?;
        if stream.len() < seq + 1 {
            return Err(Error::Config(format!(
                "corpus {name:?} holds {} tokens, need at least {}",
                stream.len(),
                seq + 1
            )));
        }
        total += w;
        table.push((total, name, stream));
    }
    if table.is_empty() {
        return Err(Error::Config("active blend phase has no positive weights".into()));
    }
    let mut out = Batch {
        inputs: Vec::with_capacity(batch * seq),
        targets: Vec::with_capacity(batch * seq),
        seq,
        categories: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let u = rng.random::<f64>() * total;
        let (_, name, stream) = table.iter().find(|(c, _, _)| u < *c).unwrap_or(table.last().unwrap());
        let start = rng.random_range(0..=stream.len() - seq - 1);
        out.inputs.extend_from_slice(&stream[start..start + seq]);
        out.targets.extend_from_slice(&stream[start + 1..start + seq + 1]);
        out.categories.push(name.to_string());
    }
    Ok(out)
}

/// Splits a token stream into consecutive `(inputs, targets)` windows of
/// `seq` tokens for evaluation.
pub fn eval_windows(stream: &[u32], seq: usize, max_windows: usize) -> Result<Batch> {
    let n = stream.len().saturating_sub(1).checked_div(seq).unwrap_or(0);
    let n = n.min(max_windows);
    if n == 0 {
        return Err(Error::Config(format!("evaluation stream of {} tokens is shorter than one window", stream.len())));
    }
    let mut out = Batch {
        inputs: Vec::with_capacity(n * seq),
        targets: Vec::with_capacity(n * seq),
        seq,
        categories: vec![String::new(); n],
    };
    for i in 0..n {
        out.inputs.extend_from_slice(&stream[i * seq..(i + 1) * seq]);
        out.targets.extend_from_slice(&stream[i * seq + 1..(i + 1) * seq + 1]);
    }
    Ok(out)
}

/// Runs forward/backward over fixed shards of `micro` sequences in parallel
/// and returns the row-weighted mean loss and gradients. `loss` builds the
/// objective for the token rows `lo..hi` of the batch.
pub(crate) fn gradient_pass<F>(
    weights: &ModelWeights,
    inputs: &[u32],
    seq: usize,
    micro: usize,
    opts: &ForwardOptions,
    loss: F,
) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&mut Graph, &ForwardOutput, usize, usize) -> Result<Var> + Sync,
{
    let rows = inputs.len();
    let shard = micro * seq;
    let shards: Vec<(usize, usize)> = (0..rows).step_by(shard).map(|lo| (lo, (lo + shard).min(rows))).collect();
    let results: Vec<Result<(f64, Vec<Tensor>)>> = shards
        .par_iter()
        .map(|&(lo, hi)| {
            let mut g = Graph::new();
            let out = forward(&mut g, weights, &inputs[lo..hi], seq, opts)?;
            let l = loss(&mut g, &out, lo, hi)?;
            let value = g.value(l).item();
            let mut grads = g.backward(l)?;
            let w = (hi - lo) as f64 / rows as f64;
            Ok((value * w, out.params.iter().map(|&p| grads.take(p)).collect()))
        })
        .collect();
    let mut total = 0.0;
    let mut sum: Vec<Tensor> = Vec::new();
    for (r, &(lo, hi)) in results.into_iter().zip(&shards) {
        let (l, grads) = r?;
        let w = (hi - lo) as f64 / rows as f64;
        total += l;
        if sum.is_empty() {
            sum = grads;
            for t in &mut sum {
                t.data_mut().iter_mut().for_each(|x| *x *= w);
            }
        } else {
            for (s, g) in sum.iter_mut().zip(&grads) {
                for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                    *a += w * b;
                }
            }
        }
    }
    Ok((total, sum))
}

/// Mean next-token cross-entropy over `batch`, evaluated in shards.
pub fn evaluate_loss(weights: &ModelWeights, batch: &Batch, fp8: Option<PrecisionPolicy>, micro: usize) -> Result<f64> {
    let seq = batch.seq;
    let rows = batch.inputs.len();
    let shard = micro.max(1) * seq;
    let opts = ForwardOptions {
        fp8,
        ..Default::default()
    };
    let parts: Vec<Result<f64>> = (0..rows)
        .step_by(shard)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&lo| {
            let hi = (lo + shard).min(rows);
            let mut g = Graph::new();
            let out = forward(&mut g, weights, &batch.inputs[lo..hi], seq, &opts)?;
            let l = g.cross_entropy(out.logits, &batch.targets[lo..hi])?;
            Ok(g.value(l).item() * (hi - lo) as f64)
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / rows as f64)
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub tokens: u64,
    pub step: u64,
    pub lr: f64,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub val_loss: f64,
    pub mode: PrecisionMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub steps: u64,
    pub skipped_steps: u64,
    pub tokens: u64,
    pub final_val_loss: f64,
}

impl RunLog {
    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("log record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_ndjson(text: &str) -> Result<Vec<LogRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Trains `weights` in place. `val` is evaluated at every log interval;
/// `on_record` sees each log line as it is produced.
pub fn train(
    weights: &mut ModelWeights,
    cfg: &TrainConfig,
    blend: &BlendSchedule,
    corpora: &Corpora,
    val: &Batch,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<RunLog> {
    cfg.validate()?;
    blend.validate()?;
    let fp8 = cfg.fp8_policy();
    if let Some(p) = &fp8 {
        p.validate(weights.spec.n_layers())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::from_config(cfg);
    let opts = ForwardOptions::training(fp8);
    let batch_seqs = cfg.batch_seqs();
    let interval = ((cfg.total_tokens as f64 * cfg.log_fraction).round() as u64).max(1);

    let mut log = RunLog {
        records: Vec::new(),
        steps: 0,
        skipped_steps: 0,
        tokens: 0,
        final_val_loss: f64::NAN,
    };
    let mut tokens = 0u64;
    let mut next_log = interval;
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);
    let mut step = 0u64;
    while tokens < cfg.total_tokens {
        let progress = tokens as f64 / cfg.total_tokens as f64;
        let batch = sample_batch(blend, progress, corpora, batch_seqs, cfg.seq_len, &mut rng)?;
        let (loss, grads) = gradient_pass(weights, &batch.inputs, cfg.seq_len, cfg.micro_batch_seqs, &opts, |g, out, lo, hi| {
            g.cross_entropy(out.logits, &batch.targets[lo..hi])
        })
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step: step + 1, loss: f64::NAN },
            e => e,
        })?;
        step += 1;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        tokens = (tokens + cfg.batch_tokens).min(cfg.total_tokens);
        let lr = cfg.lr_at(tokens)?;
        opt.step(&mut weights.params_mut(), &grads, lr)?;
        loss_sum += loss;
        loss_n += 1;
        if tokens >= next_log || tokens == cfg.total_tokens {
            let val_loss = evaluate_loss(weights, val, fp8, cfg.micro_batch_seqs)?;
            if !val_loss.is_finite() {
                return Err(Error::Diverged { step, loss: val_loss });
            }
            let rec = LogRecord {
                tokens,
                step,
                lr,
                train_loss: loss_sum / loss_n as f64,
                val_loss,
                mode: cfg.precision_mode,
            };
            on_record(&rec);
            log.records.push(rec);
            log.final_val_loss = val_loss;
            (loss_sum, loss_n) = (0.0, 0);
            while next_log <= tokens {
                next_log += interval;
            }
        }
    }
    if log.records.is_empty() {
        log.final_val_loss = evaluate_loss(weights, val, fp8, cfg.micro_batch_seqs)?;
    }
    log.steps = step;
    log.skipped_steps = opt.skipped;
    log.tokens = tokens;
    Ok(log)
}

/// Per-interval comparison of two runs over the same data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub tokens: u64,
    pub full_train: f64,
    pub fp8_train: f64,
    /// `(L_fp8 − L_full) / L_full` on the training loss.
    pub train_gap: f64,
    pub full_val: f64,
    pub fp8_val: f64,
    pub val_gap: f64,
}

pub fn loss_gap(full: &[LogRecord], fp8: &[LogRecord]) -> Result<Vec<GapRow>> {
    if full.len() != fp8.len() {
        return Err(Error::InvalidArgument(format!(
            "run logs have {} and {} records",
            full.len(),
            fp8.len()
        )));
    }
    full.iter()
        .zip(fp8)
        .map(|(a, b)| {
            if a.tokens != b.tokens {
                return Err(Error::InvalidArgument(format!("records at {} and {} tokens", a.tokens, b.tokens)));
            }
            Ok(GapRow {
                tokens: a.tokens,
                full_train: a.train_loss,
                fp8_train: b.train_loss,
                train_gap: (b.train_loss - a.train_loss) / a.train_loss,
                full_val: a.val_loss,
                fp8_val: b.val_loss,
                val_gap: (b.val_loss - a.val_loss) / a.val_loss,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            peak_lr: 1.0,
            warmup_tokens: 100,
            total_tokens: 1100,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(c.lr_at(0).unwrap(), 0.0);
        assert_eq!(c.lr_at(50).unwrap(), 0.5);
        assert!((c.lr_at(100).unwrap() - 1.0).abs() < 1e-15);
        assert!((c.lr_at(600).unwrap() - 0.505).abs() < 1e-12);
        assert!((c.lr_at(1100).unwrap() - 0.01).abs() < 1e-15);
        assert!(c.lr_at(1101).is_err());
    }

    #[test]
    fn schedule_is_continuous_and_then_non_increasing() {
        let c = cfg();
        let below = c.lr_at(99).unwrap();
        assert!((c.lr_at(100).unwrap() - below) <= 0.011);
        let mut prev = f64::INFINITY;
        for t in 100..=1100 {
            let lr = c.lr_at(t).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = cfg();
        c.warmup_tokens = 1100;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_tokens: 100,
            seq_len: 64,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let bad: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"peak_lr": 1e-3, "lr": 2}"#);
        assert!(bad.is_err());
        let mode: TrainConfig = serde_json::from_str(r#"{"precision_mode": "FP8_MIXED"}"#).unwrap();
        assert_eq!(mode.precision_mode, PrecisionMode::Fp8Mixed);
    }

    #[test]
    fn zero_gradients_without_decay_leave_params_alone() {
        let mut w = Tensor::from_vec(vec![1.0, -2.0]);
        let before = w.clone();
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.0);
        for _ in 0..5 {
            opt.step(&mut [&mut w], &[Tensor::zeros(&[2])], 0.1).unwrap();
        }
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_is_bounded_by_lr() {
        let mut w = Tensor::scalar(1.0);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.0);
        let g = Tensor::scalar(1.0); // d/dw w²/2 at w = 1
        opt.step(&mut [&mut w], &[g], 0.05).unwrap();
        let dw = 1.0 - w.item();
        assert!(dw > 0.0 && dw <= 0.05 + 1e-12);
    }

    #[test]
    fn quadratic_converges_in_200_steps() {
        let mut w = Tensor::scalar(1.0);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.0);
        let lr_cfg = TrainConfig {
            peak_lr: 0.1,
            warmup_tokens: 0,
            total_tokens: 200,
            ..Default::default()
        };
        for t in 0..200 {
            let g = Tensor::scalar(w.item());
            opt.step(&mut [&mut w], &[g], lr_cfg.lr_at(t + 1).unwrap()).unwrap();
        }
        assert!(w.item().abs() < 1e-2, "{}", w.item());
    }

    #[test]
    fn non_finite_gradient_is_skipped_and_counted() {
        let mut w = Tensor::scalar(1.0);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.1);
        assert!(!opt.step(&mut [&mut w], &[Tensor::scalar(f64::NAN)], 0.1).unwrap());
        assert_eq!((w.item(), opt.skipped, opt.steps), (1.0, 1, 0));
    }

    #[test]
    fn decay_applies_to_matrices_only() {
        let mut m = Tensor::full(&[1, 1], 1.0);
        let mut v = Tensor::full(&[1], 1.0);
        let mut opt = AdamW::new(0.9, 0.95, 1e-8, 0.5);
        let z = [Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])];
        opt.step(&mut [&mut m, &mut v], &z, 0.1).unwrap();
        assert!((m.item() - 0.95).abs() < 1e-15);
        assert_eq!(v.item(), 1.0);
    }

    #[test]
    fn clipping_bounds_the_applied_gradient() {
        let mut a = Tensor::scalar(0.0);
        let mut b = Tensor::scalar(0.0);
        let mut opt = AdamW::new(0.0, 0.0, 0.0, 0.0);
        opt.grad_clip = Some(1.0);
        // with β = 0 the Adam update is sign(g); clipping must not change that
        opt.step(&mut [&mut a, &mut b], &[Tensor::scalar(30.0), Tensor::scalar(-40.0)], 1.0).unwrap();
        assert_eq!((a.item(), b.item()), (-1.0, 1.0));
    }

    fn corpora() -> Corpora {
        Corpora::from([("a".to_string(), vec![1; 50]), ("b".to_string(), vec![2; 50])])
    }

    #[test]
    fn single_category_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&BlendSchedule::single("b"), 0.3, &corpora(), 8, 4, &mut rng).unwrap();
        assert!(b.inputs.iter().all(|&t| t == 2));
        assert!(b.categories.iter().all(|c| c == "b"));
    }

    #[test]
    fn phase_boundaries() {
        let s = BlendSchedule::three_phase(&["a", "b", "c"]);
        s.validate().unwrap();
        assert_eq!(s.active(0.59).start_fraction, 0.0);
        assert_eq!(s.active(0.6).start_fraction, 0.6);
        assert_eq!(s.active(0.7).start_fraction, 0.6);
        assert_eq!(s.active(0.8).start_fraction, 0.8);
        assert_eq!(s.active(1.0).start_fraction, 0.8);
    }

    #[test]
    fn draw_frequencies_follow_weights() {
        let blend = BlendSchedule {
            phases: vec![BlendPhase {
                start_fraction: 0.0,
                weights: BTreeMap::from([("a".into(), 0.75), ("b".into(), 0.25)]),
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = sample_batch(&blend, 0.0, &corpora(), 10_000, 2, &mut rng).unwrap();
        let a = b.categories.iter().filter(|c| *c == "a").count() as f64 / 10_000.0;
        assert!((a - 0.75).abs() <= 0.02, "{a}");
    }

    #[test]
    fn invalid_blends_and_missing_corpora() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(&BlendSchedule::single("zzz"), 0.0, &corpora(), 1, 4, &mut rng).is_err());
        assert!(sample_batch(&BlendSchedule::single("a"), 0.0, &corpora(), 1, 50, &mut rng).is_err());
        let mut s = BlendSchedule::three_phase(&["a", "b"]);
        s.phases[1].start_fraction = 0.0;
        assert!(s.validate().is_err());
        let zero = BlendSchedule {
            phases: vec![BlendPhase {
                start_fraction: 0.0,
                weights: BTreeMap::from([("a".into(), 0.0)]),
            }],
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn gap_rows() {
        let rec = |tokens, loss| LogRecord {
            tokens,
            step: 1,
            lr: 0.0,
            train_loss: loss,
            val_loss: loss,
            mode: PrecisionMode::Full,
        };
        let rows = loss_gap(&[rec(10, 2.0)], &[rec(10, 2.02)]).unwrap();
        assert!((rows[0].train_gap - 0.01).abs() < 1e-12);
        assert!(loss_gap(&[rec(10, 2.0)], &[rec(11, 2.0)]).is_err());
    }
}
