//! Command implementations. Every command works inside a run directory:
//!
//! ```text
//! <out>/config.json      effective configuration
//! <out>/corpus/          one text file per category
//! <out>/checkpoints/     NHCK checkpoints
//! <out>/logs/            NDJSON run logs
//! <out>/reports/         JSON, JSONL, CSV and Markdown outputs
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hybridlm::checkpoint::{self, DType};
use hybridlm::compress::{self, CandidateReport, DistillConfig, Samples, SearchGrid};
use hybridlm::corpus::{self, Category};
use hybridlm::cost;
use hybridlm::infer::{throughput_bench, BenchReport, Engine};
use hybridlm::model::{ArchSpec, ModelWeights};
use hybridlm::train::{self, eval_windows, Batch, Corpora, LogRecord, PrecisionMode, TrainConfig};
use hybridlm::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::report;

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "logs", "reports"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.nhck"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        fs::write(self.root.join("config.json"), cfg.to_json())?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn mode_name(mode: PrecisionMode) -> &'static str {
    match mode {
        PrecisionMode::Full => "full",
        PrecisionMode::Fp8Mixed => "fp8_mixed",
    }
}

/// Writes one text file per category and returns their paths.
pub fn gen_corpus(cfg: &RunConfig, dir: &RunDir) -> Result<Vec<PathBuf>> {
    let texts = corpus::generate(cfg.seed, cfg.corpus.bytes_per_category, &cfg.corpus.categories)?;
    fs::create_dir_all(dir.corpus())?;
    let mut out = Vec::new();
    for (cat, text) in texts {
        let path = dir.corpus().join(format!("{}.txt", cat.name()));
        fs::write(&path, text)?;
        out.push(path);
    }
    Ok(out)
}

/// Tokenized corpora split into training streams and held-out streams.
pub struct Data {
    pub train: Corpora,
    pub heldout: BTreeMap<String, Vec<u32>>,
}

impl Data {
    /// Reads the run's corpus, generating it first if it is missing.
    pub fn load(cfg: &RunConfig, dir: &RunDir) -> Result<Self> {
        let mut train = Corpora::new();
        let mut heldout = BTreeMap::new();
        for &cat in &cfg.corpus.categories {
            let path = dir.corpus().join(format!("{}.txt", cat.name()));
            if !path.exists() {
                gen_corpus(cfg, dir)?;
            }
            let text = fs::read_to_string(&path)?;
            let (a, b) = corpus::split_holdout(&text, cfg.corpus.holdout_fraction);
            train.insert(cat.name().to_string(), corpus::encode(a)?);
            heldout.insert(cat.name().to_string(), corpus::encode(b)?);
        }
        Ok(Data { train, heldout })
    }

    /// Held-out windows per category. The first half of each held-out
    /// stream is used for candidate scoring, the second for losses.
    fn windows(&self, second_half: bool, seq: usize, n: usize) -> Result<BTreeMap<String, Batch>> {
        self.heldout
            .iter()
            .map(|(name, s)| {
                let half = s.len() / 2;
                let part = if second_half { &s[half..] } else { &s[..half] };
                Ok((name.clone(), eval_windows(part, seq, n)?))
            })
            .collect()
    }

    pub fn loss_windows(&self, seq: usize, n: usize) -> Result<BTreeMap<String, Batch>> {
        self.windows(true, seq, n)
    }

    pub fn score_windows(&self, seq: usize, n: usize) -> Result<BTreeMap<String, Batch>> {
        self.windows(false, seq, n)
    }
}

pub fn concat(batches: &BTreeMap<String, Batch>) -> Batch {
    let mut out = Batch {
        inputs: Vec::new(),
        targets: Vec::new(),
        seq: batches.values().next().map_or(1, |b| b.seq),
        categories: Vec::new(),
    };
    for (name, b) in batches {
        out.inputs.extend_from_slice(&b.inputs);
        out.targets.extend_from_slice(&b.targets);
        out.categories.extend(std::iter::repeat_n(name.clone(), b.categories.len()));
    }
    out
}

/// Held-out loss per category and their unweighted mean.
pub fn category_losses(w: &ModelWeights, sets: &BTreeMap<String, Batch>) -> Result<(BTreeMap<String, f64>, f64)> {
    let mut out = BTreeMap::new();
    for (name, b) in sets {
        out.insert(name.clone(), train::evaluate_loss(w, b, None, 4)?);
    }
    let mean = out.values().sum::<f64>() / out.len() as f64;
    Ok((out, mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: PrecisionMode,
    pub arch: String,
    pub params: u64,
    pub steps: u64,
    pub skipped_steps: u64,
    pub tokens: u64,
    pub final_val_loss: f64,
    pub category_val_loss: BTreeMap<String, f64>,
}

/// Trains one model per requested precision mode.
pub fn train_cmd(cfg: &RunConfig, dir: &RunDir, modes: &[PrecisionMode]) -> Result<Vec<TrainSummary>> {
    let spec = cfg.validate()?;
    let data = Data::load(cfg, dir)?;
    let seq = cfg.train.seq_len;
    let per_cat = data.loss_windows(seq, cfg.corpus.val_windows)?;
    let val = concat(&per_cat);
    let blend = cfg.blend();
    let mut out = Vec::new();
    for &mode in modes {
        let name = mode_name(mode);
        let tc = TrainConfig {
            precision_mode: mode,
            ..cfg.train.clone()
        };
        let mut weights = ModelWeights::init(&spec, cfg.seed)?;
        let mut log_file = fs::File::create(dir.log(&format!("train_{name}.ndjson")))?;
        let mut io_err = None;
        let log = train::train(&mut weights, &tc, &blend, &data.train, &val, |r| {
            let line = serde_json::to_string(r).expect("record serializes");
            if let Err(e) = writeln!(log_file, "{line}") {
                io_err.get_or_insert(e);
            }
            eprintln!("[train {name}] tokens {} loss {:.4} val {:.4}", r.tokens, r.train_loss, r.val_loss);
        })?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        checkpoint::save(&dir.checkpoint(&format!("model_{name}")), &weights, DType::F64)?;
        let (category_val_loss, _) = category_losses(&weights, &per_cat)?;
        let summary = TrainSummary {
            mode,
            arch: spec.pattern(),
            params: spec.count_params(),
            steps: log.steps,
            skipped_steps: log.skipped_steps,
            tokens: log.tokens,
            final_val_loss: log.final_val_loss,
            category_val_loss,
        };
        write_json(&dir.report(&format!("train_{name}.json")), &summary)?;
        out.push(summary);
    }
    report::write_all(dir)?;
    Ok(out)
}

/// The model checkpoint a command should start from.
pub fn default_checkpoint(dir: &RunDir) -> PathBuf {
    let full = dir.checkpoint("model_full");
    if full.exists() {
        full
    } else {
        dir.checkpoint("model_fp8_mixed")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopRow {
    pub position: u64,
    pub hybrid: f64,
    pub baseline: f64,
    pub hybrid_kv_bytes: u64,
    pub baseline_kv_bytes: u64,
    pub hybrid_state_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub arch: String,
    pub baseline_arch: String,
    pub bench: BenchReport,
    pub flops: Vec<FlopRow>,
}

/// Decode throughput plus analytic FLOP and memory curves against a
/// pure-attention model of equal depth.
pub fn bench_cmd(cfg: &RunConfig, dir: &RunDir, ckpt: &Path) -> Result<BenchOutput> {
    let weights = checkpoint::load(ckpt)?;
    let spec = &weights.spec;
    let b = &cfg.bench;
    let mut engine = Engine::new(&weights);
    if let Some(budget) = b.budget_bytes {
        engine = engine.with_budget(b.memory.clone(), budget);
    }
    let bench = throughput_bench(&engine, b.prompt_len, b.gen_len, b.batch, cfg.seed)?;
    let baseline = ArchSpec::transformer(spec.n_layers().div_ceil(2), &spec.dims())?;
    let elem = b.memory.cache_elem_bytes;
    let flops = b
        .flop_positions
        .iter()
        .map(|&p| FlopRow {
            position: p,
            hybrid: cost::decode_step_flops(spec, p).total() as f64,
            baseline: cost::decode_step_flops(&baseline, p).total() as f64,
            hybrid_kv_bytes: cost::kv_bytes(spec, p, 1, elem),
            baseline_kv_bytes: cost::kv_bytes(&baseline, p, 1, elem),
            hybrid_state_bytes: cost::state_bytes(spec, 1, elem),
        })
        .collect();
    let out = BenchOutput {
        arch: spec.pattern(),
        baseline_arch: baseline.pattern(),
        bench,
        flops,
    };
    write_json(&dir.report("bench.json"), &out)?;
    report::write_all(dir)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortlistEntry {
    pub candidate: CandidateReport,
    pub before: BTreeMap<String, f64>,
    pub after: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub candidates: usize,
    pub grid_points: usize,
    /// Spearman correlation of each score with the post-prune loss; absent
    /// when a series is constant.
    pub rho_accuracy: Option<f64>,
    pub rho_agreement: Option<f64>,
    pub parent_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutput {
    pub ranking: Ranking,
    pub shortlist: Vec<ShortlistEntry>,
}

fn calibration(cfg: &RunConfig, data: &Data) -> Result<Samples> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let b = train::sample_batch(&cfg.blend(), 0.0, &data.train, cfg.search.calib_samples, cfg.search.calib_seq, &mut rng)?;
    Ok(Samples::from_batch(&b))
}

fn short_distill_config(cfg: &RunConfig) -> DistillConfig {
    let ext = &cfg.distill.train;
    let total = cfg.search.short_distill_tokens;
    let warmup = (ext.warmup_tokens as f64 * total as f64 / ext.total_tokens.max(1) as f64) as u64;
    DistillConfig {
        train: TrainConfig {
            total_tokens: total,
            warmup_tokens: warmup.min(total.saturating_sub(1)),
            log_fraction: ext.log_fraction.max(0.1),
            ..ext.clone()
        },
        temperature: cfg.distill.temperature,
    }
}

/// Importance estimation, candidate enumeration and scoring, two-metric
/// shortlisting, and short distillation of the shortlist.
pub fn prune_search_cmd(cfg: &RunConfig, dir: &RunDir, ckpt: &Path) -> Result<SearchOutput> {
    cfg.validate()?;
    let parent = checkpoint::load(ckpt)?;
    let spec = parent.spec.clone();
    let data = Data::load(cfg, dir)?;
    let s = &cfg.search;
    let seq = cfg.train.seq_len;

    let calib = calibration(cfg, &data)?;
    let layer_scores = compress::layer_importance(&parent, &calib)?;
    let layer_json: BTreeMap<String, f64> = layer_scores.iter().enumerate().map(|(i, &v)| (i.to_string(), v)).collect();
    write_json(&dir.report("layer_importance.json"), &layer_json)?;
    let neurons = compress::ffn_neuron_importance(&parent, &calib, s.aggregation)?;
    let neuron_json: BTreeMap<String, &Vec<f64>> = neurons.iter().map(|(i, v)| (i.to_string(), v)).collect();
    write_json(&dir.report("neuron_importance.json"), &neuron_json)?;

    let grid = s
        .grid
        .clone()
        .unwrap_or_else(|| SearchGrid::around(&spec, s.grid_drop, s.width_step, s.width_steps));
    let mut candidates = compress::enumerate_candidates(&spec, &layer_scores, &grid, &s.target)?;
    eprintln!("[prune-search] {} feasible candidates of {} grid points", candidates.len(), grid.size());

    let score_set = concat(&data.score_windows(seq, s.score_windows)?);
    let loss_sets = data.loss_windows(seq, cfg.corpus.val_windows)?;
    let parent_pred = compress::greedy_predictions(&parent, &score_set)?;
    let (_, parent_loss) = category_losses(&parent, &loss_sets)?;
    let scored: Vec<Result<(f64, f64, f64)>> = candidates
        .par_iter()
        .map(|c| {
            let child = compress::realize_pruned(&parent, c, &neurons)?;
            let (acc, agree) = compress::score_candidate(&child, &parent_pred, &score_set)?;
            let (_, loss) = category_losses(&child, &loss_sets)?;
            Ok((acc, agree, loss))
        })
        .collect();
    for (c, r) in candidates.iter_mut().zip(scored) {
        let (acc, agree, loss) = r?;
        c.next_token_accuracy = acc;
        c.parent_agreement = agree;
        c.post_prune_loss = Some(loss);
    }
    let mut jsonl = String::new();
    for c in &candidates {
        jsonl.push_str(&serde_json::to_string(c)?);
        jsonl.push('\n');
    }
    fs::write(dir.report("candidates.jsonl"), jsonl)?;

    let losses: Vec<f64> = candidates.iter().map(|c| c.post_prune_loss.unwrap()).collect();
    let acc: Vec<f64> = candidates.iter().map(|c| c.next_token_accuracy).collect();
    let agree: Vec<f64> = candidates.iter().map(|c| c.parent_agreement).collect();
    let rho = |x: &[f64]| compress::spearman(x, &losses).ok().filter(|r| r.is_finite());
    let ranking = Ranking {
        candidates: candidates.len(),
        grid_points: grid.size(),
        rho_accuracy: rho(&acc),
        rho_agreement: rho(&agree),
        parent_loss,
    };
    write_json(&dir.report("ranking.json"), &ranking)?;

    let k1 = s.k1.min(candidates.len());
    let k2 = s.k2.min(k1);
    let picked = compress::rank_and_select(&candidates, k1, k2, |c| Ok(c.post_prune_loss.unwrap()))?;
    let short_cfg = short_distill_config(cfg);
    let blend = cfg.blend();
    let val = concat(&loss_sets);
    let mut shortlist = Vec::new();
    for mut c in picked {
        let mut child = compress::realize_pruned(&parent, &c, &neurons)?;
        let (before, _) = category_losses(&child, &loss_sets)?;
        let log = if short_cfg.train.total_tokens > 0 {
            compress::distill(&parent, &mut child, &short_cfg, &blend, &data.train, &val)?
        } else {
            Vec::new()
        };
        write_log(&dir.log(&format!("short_distill_{}.ndjson", c.id)), &log)?;
        let (after, avg) = category_losses(&child, &loss_sets)?;
        c.post_short_distill_avg = Some(avg);
        checkpoint::save(&dir.checkpoint(&format!("short_{}", c.id)), &child, DType::F64)?;
        eprintln!("[prune-search] candidate {} {} short-distilled to {avg:.4}", c.id, c.spec.pattern());
        shortlist.push(ShortlistEntry { candidate: c, before, after });
    }
    write_json(&dir.report("shortlist.json"), &shortlist)?;
    report::write_all(dir)?;
    Ok(SearchOutput { ranking, shortlist })
}

fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub parent: f64,
    pub pruned: f64,
    pub distilled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillOutput {
    pub candidate: CandidateReport,
    pub parent_loss: f64,
    pub pruned_loss: f64,
    pub distilled_loss: f64,
    /// Fraction of the pruned-vs-parent loss gap closed by distillation;
    /// absent when pruning left the loss unchanged.
    pub recovery: Option<f64>,
    pub rows: Vec<MetricRow>,
}

/// Extended distillation of the best short-distilled candidate.
pub fn distill_cmd(cfg: &RunConfig, dir: &RunDir, ckpt: &Path) -> Result<DistillOutput> {
    cfg.validate()?;
    let parent = checkpoint::load(ckpt)?;
    let data = Data::load(cfg, dir)?;
    let shortlist: Vec<ShortlistEntry> = read_json(&dir.report("shortlist.json"))?;
    let best = shortlist
        .iter()
        .min_by(|a, b| {
            let key = |e: &ShortlistEntry| e.candidate.post_short_distill_avg.unwrap_or(f64::INFINITY);
            key(a).total_cmp(&key(b)).then(a.candidate.id.cmp(&b.candidate.id))
        })
        .ok_or_else(|| Error::NoCandidates("shortlist is empty".into()))?;
    let seq = cfg.train.seq_len;
    let loss_sets = data.loss_windows(seq, cfg.corpus.val_windows)?;
    let score_set = concat(&data.score_windows(seq, cfg.search.score_windows)?);
    let parent_pred = compress::greedy_predictions(&parent, &score_set)?;

    // the pruned starting point, before any distillation
    let calib = calibration(cfg, &data)?;
    let neurons = compress::ffn_neuron_importance(&parent, &calib, cfg.search.aggregation)?;
    let pruned = compress::realize_pruned(&parent, &best.candidate, &neurons)?;
    let mut student = checkpoint::load(&dir.checkpoint(&format!("short_{}", best.candidate.id)))?;
    let val = concat(&loss_sets);
    let log = compress::distill(&parent, &mut student, &cfg.distill, &cfg.blend(), &data.train, &val)?;
    write_log(&dir.log("distill.ndjson"), &log)?;
    checkpoint::save(&dir.checkpoint("distilled"), &student, DType::F64)?;

    let mut rows = Vec::new();
    let (p_cat, p_avg) = category_losses(&parent, &loss_sets)?;
    let (b_cat, b_avg) = category_losses(&pruned, &loss_sets)?;
    let (a_cat, a_avg) = category_losses(&student, &loss_sets)?;
    for name in p_cat.keys() {
        rows.push(MetricRow {
            metric: format!("{name} loss"),
            parent: p_cat[name],
            pruned: b_cat[name],
            distilled: a_cat[name],
        });
    }
    rows.push(MetricRow {
        metric: "mean loss".into(),
        parent: p_avg,
        pruned: b_avg,
        distilled: a_avg,
    });
    let (p_acc, _) = compress::score_candidate(&parent, &parent_pred, &score_set)?;
    let (b_acc, b_agree) = compress::score_candidate(&pruned, &parent_pred, &score_set)?;
    let (a_acc, a_agree) = compress::score_candidate(&student, &parent_pred, &score_set)?;
    rows.push(MetricRow {
        metric: "next-token accuracy".into(),
        parent: p_acc,
        pruned: b_acc,
        distilled: a_acc,
    });
    rows.push(MetricRow {
        metric: "parent agreement".into(),
        parent: 1.0,
        pruned: b_agree,
        distilled: a_agree,
    });
    let out = DistillOutput {
        candidate: best.candidate.clone(),
        parent_loss: p_avg,
        pruned_loss: b_avg,
        distilled_loss: a_avg,
        recovery: Some((b_avg - a_avg) / (b_avg - p_avg)).filter(|r| r.is_finite()),
        rows,
    };
    write_json(&dir.report("distill.json"), &out)?;
    report::write_all(dir)?;
    Ok(out)
}

/// Parses the categories flag of `gen-corpus`.
pub fn parse_categories(list: &str) -> Result<Vec<Category>> {
    list.split(',').map(|s| Category::parse(s.trim())).collect()
}
