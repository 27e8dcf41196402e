//! Prune-search-distill compression.
//!
//! Layers are scored by how much the pre-head activation moves when the
//! layer is bypassed; FFN neurons by aggregated activation magnitude on a
//! calibration set. Candidate architectures on a grid of layer counts and FFN
//! widths keep the most important layers and neurons, are filtered by a
//! memory budget, scored by next-token accuracy and agreement with the
//! parent, shortlisted, and then recovered by logit distillation.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::cost::{self, MemoryConfig};
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{forward, ArchSpec, ForwardOptions, LayerKind, LayerWeights, ModelWeights};
use crate::tensor::Tensor;
use crate::train::{gradient_pass, sample_batch, AdamW, Batch, BlendSchedule, Corpora, LogRecord, TrainConfig};

/// Calibration or evaluation sequences, all of one length.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub tokens: Vec<u32>,
    pub seq: usize,
}

impl Samples {
    pub fn new(tokens: Vec<u32>, seq: usize) -> Result<Self> {
        if seq == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(seq) {
            return Err(Error::InvalidArgument(format!(
                "{} calibration tokens do not split into sequences of {seq}",
                tokens.len()
            )));
        }
        Ok(Samples { tokens, seq })
    }

    pub fn from_batch(b: &Batch) -> Self {
        Samples {
            tokens: b.inputs.clone(),
            seq: b.seq,
        }
    }

    pub fn count(&self) -> usize {
        self.tokens.len() / self.seq
    }

    fn sample(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq..(i + 1) * self.seq]
    }
}

fn pre_head(weights: &ModelWeights, tokens: &[u32], seq: usize, skip: Option<usize>) -> Result<Tensor> {
    let mut g = Graph::new();
    let opts = ForwardOptions {
        skip_layers: skip.into_iter().collect(),
        ..Default::default()
    };
    let out = forward(&mut g, weights, tokens, seq, &opts)?;
    Ok(g.value(out.pre_head).clone())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Per-layer importance: the mean over calibration samples of the MSE
/// between the full model's pre-head activation and that of the model with
/// the layer bypassed.
pub fn layer_importance(parent: &ModelWeights, calib: &Samples) -> Result<Vec<f64>> {
    let reference: Vec<Tensor> = (0..calib.count())
        .map(|s| pre_head(parent, calib.sample(s), calib.seq, None))
        .collect::<Result<_>>()?;
    (0..parent.spec.n_layers())
        .into_par_iter()
        .map(|layer| {
            let mut total = 0.0;
            for (s, r) in reference.iter().enumerate() {
                let ablated = pre_head(parent, calib.sample(s), calib.seq, Some(layer))?;
                total += mse(r.data(), ablated.data());
            }
            Ok(total / calib.count() as f64)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agg {
    Mean,
    L2,
}

impl Agg {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mean" => Ok(Agg::Mean),
            "l2" => Ok(Agg::L2),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }

    /// `mean`: `(1/n)·Σ|sᵢ|`; `l2`: `√(Σ sᵢ²)`.
    pub fn apply(self, values: &[f64]) -> f64 {
        match self {
            Agg::Mean => values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64,
            Agg::L2 => values.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

/// Sequence aggregation runs first, then batch aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregation {
    pub sequence: Agg,
    pub batch: Agg,
}

impl Default for Aggregation {
    fn default() -> Self {
        Aggregation {
            sequence: Agg::Mean,
            batch: Agg::L2,
        }
    }
}

/// Importance of every FFN neuron, built from the post-activation hidden
/// tensor `δ(X·W1ᵀ)`. Returns `(layer index, scores over d_ffn)` for each
/// FFN layer.
pub fn ffn_neuron_importance(parent: &ModelWeights, calib: &Samples, agg: Aggregation) -> Result<Vec<(usize, Vec<f64>)>> {
    let d_ffn = parent.spec.d_ffn;
    let opts = ForwardOptions {
        capture_ffn: true,
        ..Default::default()
    };
    // per_sample[s][k][j]: sequence-aggregated score of neuron j in FFN k
    let per_sample: Vec<Vec<(usize, Vec<f64>)>> = (0..calib.count())
        .into_par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let out = forward(&mut g, parent, calib.sample(s), calib.seq, &opts)?;
            Ok(out
                .ffn_hidden
                .iter()
                .map(|&(layer, h)| {
                    let h = g.value(h);
                    let scores = (0..d_ffn)
                        .map(|j| {
                            let col: Vec<f64> = (0..calib.seq).map(|t| h.data()[t * d_ffn + j]).collect();
                            agg.sequence.apply(&col)
                        })
                        .collect();
                    (layer, scores)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let Some(first) = per_sample.first() else {
        return Err(Error::InvalidArgument("calibration set is empty".into()));
    };
    Ok(first
        .iter()
        .enumerate()
        .map(|(k, &(layer, _))| {
            let scores = (0..d_ffn)
                .map(|j| {
                    let over_batch: Vec<f64> = per_sample.iter().map(|s| s[k].1[j]).collect();
                    agg.batch.apply(&over_batch)
                })
                .collect();
            (layer, scores)
        })
        .collect())
}

/// Indices of the `k` largest scores, returned in ascending index order.
/// Ties prefer the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchGrid {
    pub n_attention: Vec<usize>,
    pub n_mamba: Vec<usize>,
    pub n_ffn: Vec<usize>,
    pub ffn_width: Vec<usize>,
}

impl SearchGrid {
    pub fn size(&self) -> usize {
        self.n_attention.len() * self.n_mamba.len() * self.n_ffn.len() * self.ffn_width.len()
    }

    /// Every count from `parent − drop` to the parent's count, and widths
    /// stepping down from the parent width by `width_step`.
    pub fn around(parent: &ArchSpec, drop: [usize; 3], width_step: usize, width_steps: usize) -> Self {
        let range = |kind, drop: usize| {
            let n = parent.count(kind);
            (n.saturating_sub(drop)..=n).collect::<Vec<_>>()
        };
        SearchGrid {
            n_attention: range(LayerKind::Attention, drop[0]),
            n_mamba: range(LayerKind::Mamba2, drop[1]),
            n_ffn: range(LayerKind::Ffn, drop[2]),
            ffn_width: (0..=width_steps)
                .map(|i| parent.d_ffn.saturating_sub(i * width_step))
                .filter(|&w| w > 0)
                .collect(),
        }
    }
}

/// Sequence length and batch the memory budget is evaluated at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryTarget {
    pub seq: u64,
    pub batch: u64,
    pub memory: MemoryConfig,
    pub budget_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub id: usize,
    pub spec: ArchSpec,
    pub kept_layer_ids: Vec<usize>,
    pub ffn_width: usize,
    pub memory_bytes: u64,
    pub next_token_accuracy: f64,
    pub parent_agreement: f64,
    /// Held-out loss of the pruned model before any distillation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_prune_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark_avg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_short_distill_avg: Option<f64>,
}

/// Enumerates the grid. Each point keeps the highest-importance layers of
/// each type (in their original order) and is dropped when its memory
/// footprint exceeds the budget. Scores are left at zero.
pub fn enumerate_candidates(
    parent: &ArchSpec,
    importance: &[f64],
    grid: &SearchGrid,
    target: &MemoryTarget,
) -> Result<Vec<CandidateReport>> {
    if grid.size() == 0 {
        return Err(Error::Config("search grid is empty".into()));
    }
    if importance.len() != parent.n_layers() {
        return Err(Error::shape("enumerate_candidates", "one importance score per layer"));
    }
    if target.budget_bytes == 0 {
        return Err(Error::NoCandidates("memory budget is zero".into()));
    }
    let by_kind = |kind: LayerKind| {
        let mut ids: Vec<usize> = (0..parent.n_layers()).filter(|&i| parent.layers[i] == kind).collect();
        ids.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
        ids
    };
    let ranked = [by_kind(LayerKind::Attention), by_kind(LayerKind::Mamba2), by_kind(LayerKind::Ffn)];
    let mut out = Vec::new();
    for &na in &grid.n_attention {
        for &nm in &grid.n_mamba {
            for &nf in &grid.n_ffn {
                for &width in &grid.ffn_width {
                    if na > ranked[0].len() || nm > ranked[1].len() || nf > ranked[2].len() || width > parent.d_ffn {
                        continue;
                    }
                    let mut kept: Vec<usize> = ranked[0][..na]
                        .iter()
                        .chain(&ranked[1][..nm])
                        .chain(&ranked[2][..nf])
                        .copied()
                        .collect();
                    kept.sort_unstable();
                    if kept.is_empty() {
                        continue;
                    }
                    let mut spec = parent.clone();
                    spec.layers = kept.iter().map(|&i| parent.layers[i]).collect();
                    spec.d_ffn = width;
                    if spec.validate().is_err() {
                        continue;
                    }
                    let report = cost::memory_report(&spec, target.seq, target.batch, &target.memory)?;
                    if report.total_bytes > target.budget_bytes {
                        continue;
                    }
                    out.push(CandidateReport {
                        id: out.len(),
                        spec,
                        kept_layer_ids: kept,
                        ffn_width: width,
                        memory_bytes: report.total_bytes,
                        next_token_accuracy: 0.0,
                        parent_agreement: 0.0,
                        post_prune_loss: None,
                        benchmark_avg: None,
                        post_short_distill_avg: None,
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoCandidates(format!(
            "no grid point fits in {} bytes",
            target.budget_bytes
        )));
    }
    Ok(out)
}

/// Child weights for `candidate`: kept layers are copied verbatim except
/// FFNs, whose W1 rows and matching W2 columns are sliced to the
/// highest-scoring neurons.
pub fn realize_pruned(
    parent: &ModelWeights,
    candidate: &CandidateReport,
    neurons: &[(usize, Vec<f64>)],
) -> Result<ModelWeights> {
    let spec = &parent.spec;
    let width = candidate.ffn_width;
    if width == 0 || width > spec.d_ffn {
        return Err(Error::InvalidArgument(format!("FFN width {width} for a parent of {}", spec.d_ffn)));
    }
    if candidate.kept_layer_ids.windows(2).any(|w| w[0] >= w[1])
        || candidate.kept_layer_ids.last().is_some_and(|&i| i >= spec.n_layers())
    {
        return Err(Error::InvalidArgument("kept layer ids must be ascending parent indices".into()));
    }
    let mut layers = Vec::with_capacity(candidate.kept_layer_ids.len());
    for &i in &candidate.kept_layer_ids {
        let layer = match &parent.layers[i] {
            LayerWeights::Ffn(f) => {
                let scores = neurons
                    .iter()
                    .find(|(l, _)| *l == i)
                    .map(|(_, s)| s)
                    .ok_or_else(|| Error::InvalidArgument(format!("no neuron ranking for FFN layer {i}")))?;
                if scores.len() != spec.d_ffn {
                    return Err(Error::shape("realize_pruned", format!("{} scores for width {}", scores.len(), spec.d_ffn)));
                }
                let keep = top_k(scores, width);
                let d = spec.d_model;
                let mut w1 = Vec::with_capacity(width * d);
                for &j in &keep {
                    w1.extend_from_slice(f.w1.row(j));
                }
                let mut w2 = Vec::with_capacity(d * width);
                for r in 0..d {
                    let row = f.w2.row(r);
                    w2.extend(keep.iter().map(|&j| row[j]));
                }
                let mut f = f.clone();
                f.w1 = Tensor::new(vec![width, d], w1)?;
                f.w2 = Tensor::new(vec![d, width], w2)?;
                LayerWeights::Ffn(f)
            }
            other => other.clone(),
        };
        layers.push(layer);
    }
    let mut child_spec = spec.clone();
    child_spec.layers = candidate.kept_layer_ids.iter().map(|&i| spec.layers[i]).collect();
    child_spec.d_ffn = width;
    if child_spec != candidate.spec {
        return Err(Error::InvalidArgument("candidate spec does not follow from its kept layers".into()));
    }
    Ok(ModelWeights {
        spec: child_spec,
        embedding: parent.embedding.clone(),
        layers,
        final_norm: parent.final_norm.clone(),
        head: parent.head.clone(),
    })
}

fn argmax_rows(logits: &Tensor) -> Vec<u32> {
    let v = logits.cols();
    logits
        .data()
        .chunks(v)
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

/// Greedy predictions at every position of `batch`.
pub fn greedy_predictions(weights: &ModelWeights, batch: &Batch) -> Result<Vec<u32>> {
    let seq = batch.seq;
    let shards: Vec<usize> = (0..batch.inputs.len()).step_by(seq * 4).collect();
    let parts: Vec<Result<Vec<u32>>> = shards
        .par_iter()
        .map(|&lo| {
            let hi = (lo + seq * 4).min(batch.inputs.len());
            let mut g = Graph::new();
            let out = forward(&mut g, weights, &batch.inputs[lo..hi], seq, &ForwardOptions::default())?;
            Ok(argmax_rows(g.value(out.logits)))
        })
        .collect();
    let mut out = Vec::with_capacity(batch.inputs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `(next-token accuracy, agreement with the parent's greedy predictions)`.
pub fn score_candidate(child: &ModelWeights, parent_pred: &[u32], batch: &Batch) -> Result<(f64, f64)> {
    if parent_pred.len() != batch.targets.len() {
        return Err(Error::shape("score_candidate", "parent predictions do not cover the batch"));
    }
    let pred = greedy_predictions(child, batch)?;
    Ok(agreement_scores(&pred, parent_pred, &batch.targets))
}

pub fn agreement_scores(pred: &[u32], parent_pred: &[u32], targets: &[u32]) -> (f64, f64) {
    let n = pred.len() as f64;
    let acc = pred.iter().zip(targets).filter(|(a, b)| a == b).count() as f64 / n;
    let agree = pred.iter().zip(parent_pred).filter(|(a, b)| a == b).count() as f64 / n;
    (acc, agree)
}

/// Competition ranks for "higher is better" (`1, 2, 2, 4`).
fn ranks_desc(values: &[f64]) -> Vec<usize> {
    values
        .iter()
        .map(|v| 1 + values.iter().filter(|&&o| o > *v).count())
        .collect()
}

fn spec_key(s: &ArchSpec) -> (String, usize) {
    (s.pattern(), s.d_ffn)
}

fn tie_break(a: &CandidateReport, b: &CandidateReport) -> Ordering {
    a.memory_bytes
        .cmp(&b.memory_bytes)
        .then_with(|| spec_key(&a.spec).cmp(&spec_key(&b.spec)))
        .then(a.id.cmp(&b.id))
}

/// Orders candidates by the better of their accuracy rank and agreement
/// rank, ties broken by lower memory then architecture.
pub fn combined_ranking(reports: &[CandidateReport]) -> Vec<usize> {
    let acc: Vec<f64> = reports.iter().map(|r| r.next_token_accuracy).collect();
    let agree: Vec<f64> = reports.iter().map(|r| r.parent_agreement).collect();
    let combined: Vec<usize> = ranks_desc(&acc)
        .into_iter()
        .zip(ranks_desc(&agree))
        .map(|(a, g)| a.min(g))
        .collect();
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| combined[a].cmp(&combined[b]).then_with(|| tie_break(&reports[a], &reports[b])));
    order
}

/// Keeps the top `k1` by combined rank, fills in `benchmark_avg` (lower is
/// better) with `bench`, and returns the best `k2` of those.
pub fn rank_and_select<F>(reports: &[CandidateReport], k1: usize, k2: usize, bench: F) -> Result<Vec<CandidateReport>>
where
    F: Fn(&CandidateReport) -> Result<f64> + Sync,
{
    if !(k2 <= k1 && k1 <= reports.len()) {
        return Err(Error::InvalidArgument(format!(
            "need k2 ≤ k1 ≤ {} candidates, got k1 = {k1}, k2 = {k2}",
            reports.len()
        )));
    }
    let order = combined_ranking(reports);
    let mut short: Vec<CandidateReport> = order[..k1].iter().map(|&i| reports[i].clone()).collect();
    let scores: Vec<Result<f64>> = short.par_iter().map(&bench).collect();
    for (r, s) in short.iter_mut().zip(scores) {
        r.benchmark_avg = Some(s?);
    }
    short.sort_by(|a, b| {
        a.benchmark_avg
            .unwrap()
            .total_cmp(&b.benchmark_avg.unwrap())
            .then_with(|| tie_break(a, b))
    });
    short.truncate(k2);
    Ok(short)
}

/// Distillation settings: the optimizer and schedule come from `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub train: TrainConfig,
    pub temperature: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            train: TrainConfig::default(),
            temperature: 1.0,
        }
    }
}

/// Tempered teacher probabilities for every position of `tokens`.
fn teacher_probs(teacher: &ModelWeights, tokens: &[u32], seq: usize, temperature: f64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let out = forward(&mut g, teacher, tokens, seq, &ForwardOptions::default())?;
    let logits = g.value(out.logits);
    let v = logits.cols();
    let mut p: Vec<f64> = logits.data().iter().map(|x| x / temperature).collect();
    kernels::softmax_rows(&mut p, v);
    Ok(p)
}

/// Forward KL `Σ p log(p/q)` between two distributions.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Trains `student` to match `teacher` by minimizing forward KL
/// `KL(p_teacher ∥ p_student)` at every position. The teacher only runs
/// forward passes. Returns one log line per interval; `train_loss` holds
/// the KL and `val_loss` the student's cross-entropy on `val`.
pub fn distill(
    teacher: &ModelWeights,
    student: &mut ModelWeights,
    cfg: &DistillConfig,
    blend: &BlendSchedule,
    corpora: &Corpora,
    val: &Batch,
) -> Result<Vec<LogRecord>> {
    let tc = &cfg.train;
    tc.validate()?;
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::Config("distillation temperature must be positive".into()));
    }
    if teacher.spec.vocab_size != student.spec.vocab_size {
        return Err(Error::InvalidArgument("teacher and student vocabularies differ".into()));
    }
    let fp8 = tc.fp8_policy();
    if let Some(p) = &fp8 {
        p.validate(student.spec.n_layers())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = AdamW::from_config(tc);
    let opts = ForwardOptions::training(fp8);
    let interval = ((tc.total_tokens as f64 * tc.log_fraction).round() as u64).max(1);
    let mut records = Vec::new();
    let (mut tokens, mut step, mut next_log) = (0u64, 0u64, interval);
    let (mut sum, mut n) = (0.0, 0u64);
    while tokens < tc.total_tokens {
        let progress = tokens as f64 / tc.total_tokens as f64;
        let batch = sample_batch(blend, progress, corpora, tc.batch_seqs(), tc.seq_len, &mut rng)?;
        let probs = teacher_probs(teacher, &batch.inputs, tc.seq_len, cfg.temperature)?;
        let v = student.spec.vocab_size;
        let (loss, grads) = gradient_pass(student, &batch.inputs, tc.seq_len, tc.micro_batch_seqs, &opts, |g, out, lo, hi| {
            g.kl_divergence(out.logits, &probs[lo * v..hi * v], cfg.temperature)
        })?;
        step += 1;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        tokens = (tokens + tc.batch_tokens).min(tc.total_tokens);
        let lr = tc.lr_at(tokens)?;
        opt.step(&mut student.params_mut(), &grads, lr)?;
        sum += loss;
        n += 1;
        if tokens >= next_log || tokens == tc.total_tokens {
            let val_loss = crate::train::evaluate_loss(student, val, fp8, tc.micro_batch_seqs)?;
            records.push(LogRecord {
                tokens,
                step,
                lr,
                train_loss: sum / n as f64,
                val_loss,
                mode: tc.precision_mode,
            });
            (sum, n) = (0.0, 0);
            while next_log <= tokens {
                next_log += interval;
            }
        }
    }
    Ok(records)
}

/// Elementwise `(1−α)·w1 + α·w2`, computed as `w1 + α·(w2 − w1)` so each
/// weight moves monotonically in α. α = 0 and α = 1 return the endpoints
/// bit for bit.
pub fn merge_checkpoints(w1: &ModelWeights, w2: &ModelWeights, alpha: f64) -> Result<ModelWeights> {
    if w1.spec != w2.spec {
        return Err(Error::InvalidArgument("cannot interpolate checkpoints of different architectures".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if alpha == 0.0 {
        return Ok(w1.clone());
    }
    if alpha == 1.0 {
        return Ok(w2.clone());
    }
    let mut out = w1.clone();
    let others: Vec<&Tensor> = w2.named_params().into_iter().map(|(_, t)| t).collect();
    for (t, o) in out.params_mut().into_iter().zip(others) {
        for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
            *a += alpha * (b - *a);
        }
    }
    Ok(out)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length series of at least 2".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::InvalidArgument("spearman of a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}
