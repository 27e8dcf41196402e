//! Run configuration: one JSON document describing every stage.
//!
//! Unknown keys are rejected everywhere. Missing sections take the desk-scale
//! defaults from [`RunConfig::default`].

use std::path::Path;

use hybridlm::compress::{Aggregation, DistillConfig, MemoryTarget, SearchGrid};
use hybridlm::corpus::{self, Category};
use hybridlm::cost::MemoryConfig;
use hybridlm::model::{ArchSpec, Dims, LayerKind};
use hybridlm::train::{BlendSchedule, TrainConfig};
use hybridlm::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layout {
    /// Built from a layer count and attention fraction.
    Hybrid { total_layers: usize, attn_fraction: f64 },
    /// `blocks` × (attention, FFN) with rotary encoding.
    Transformer { blocks: usize },
    /// Explicit symbols: `M` Mamba-2, `A` attention, `F` FFN.
    Pattern { pattern: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: Dims,
    pub layout: Layout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dims: Dims {
                vocab_size: corpus::vocab_size(),
                ..Dims::default()
            },
            layout: Layout::Hybrid {
                total_layers: 8,
                attn_fraction: 0.1,
            },
        }
    }
}

impl ModelConfig {
    pub fn spec(&self) -> Result<ArchSpec> {
        match &self.layout {
            Layout::Hybrid {
                total_layers,
                attn_fraction,
            } => ArchSpec::hybrid(*total_layers, *attn_fraction, &self.dims),
            Layout::Transformer { blocks } => ArchSpec::transformer(*blocks, &self.dims),
            Layout::Pattern { pattern } => {
                let layers = pattern
                    .chars()
                    .map(|c| match c {
                        'M' => Ok(LayerKind::Mamba2),
                        'A' => Ok(LayerKind::Attention),
                        'F' => Ok(LayerKind::Ffn),
                        other => Err(Error::Config(format!("unknown layer symbol {other:?}"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                ArchSpec::from_layers(layers, &self.dims, false)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub bytes_per_category: usize,
    pub categories: Vec<Category>,
    /// Fraction of each category held out for validation and scoring.
    pub holdout_fraction: f64,
    /// Validation windows per category.
    pub val_windows: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            bytes_per_category: 400_000,
            categories: Category::ALL.to_vec(),
            holdout_fraction: 0.1,
            val_windows: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub batch: usize,
    pub memory: MemoryConfig,
    pub budget_bytes: Option<u64>,
    /// Decode positions for the FLOP comparison against a pure-attention
    /// model of the same depth.
    pub flop_positions: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            prompt_len: 64,
            gen_len: 64,
            batch: 4,
            memory: MemoryConfig::default(),
            budget_bytes: Some(64 << 20),
            flop_positions: vec![128, 512, 1024, 4096, 8192, 16384, 65536],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub calib_samples: usize,
    pub calib_seq: usize,
    pub aggregation: Aggregation,
    /// Explicit grid; when absent one is built around the parent from
    /// `grid_drop`, `width_step` and `width_steps`.
    pub grid: Option<SearchGrid>,
    /// How many attention, Mamba-2 and FFN layers may be dropped.
    pub grid_drop: [usize; 3],
    pub width_step: usize,
    pub width_steps: usize,
    pub target: MemoryTarget,
    /// Windows per category used for accuracy and agreement scoring.
    pub score_windows: usize,
    pub k1: usize,
    pub k2: usize,
    pub short_distill_tokens: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            calib_samples: 32,
            calib_seq: 128,
            aggregation: Aggregation::default(),
            grid: None,
            grid_drop: [1, 4, 4],
            width_step: 8,
            width_steps: 3,
            target: MemoryTarget {
                seq: 4096,
                batch: 1,
                memory: MemoryConfig::default(),
                budget_bytes: u64::MAX,
            },
            score_windows: 16,
            k1: 20,
            k2: 3,
            short_distill_tokens: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    /// Defaults to three phases over the corpus categories.
    pub blend: Option<BlendSchedule>,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub search: SearchConfig,
    /// Extended distillation of the selected candidate.
    pub distill: DistillConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            blend: None,
            train: TrainConfig {
                seq_len: 128,
                batch_tokens: 2048,
                total_tokens: 5_000_000,
                warmup_tokens: 100_000,
                peak_lr: 3e-3,
                precision_policy: hybridlm::fp8::PrecisionPolicy {
                    high_precision_prefix: 1,
                    high_precision_suffix: 1,
                },
                ..TrainConfig::default()
            },
            bench: BenchConfig::default(),
            search: SearchConfig::default(),
            distill: DistillConfig {
                train: TrainConfig {
                    seq_len: 128,
                    batch_tokens: 2048,
                    total_tokens: 900_000,
                    warmup_tokens: 20_000,
                    peak_lr: 2e-3,
                    ..TrainConfig::default()
                },
                temperature: 1.0,
            },
        }
    }
}

/// Set to `1` to shrink every budget for quick CI runs.
pub const SMOKE_ENV: &str = "NH_DESK_SMOKE";

pub fn smoke_enabled() -> bool {
    std::env::var(SMOKE_ENV).is_ok_and(|v| v == "1")
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parses a possibly partial document. Keys it sets override the run
    /// defaults one leaf at a time, so a `train` section naming only
    /// `total_tokens` keeps the other run-level training defaults.
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, serde_json::from_str(text)?);
        serde_json::from_value(base)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn blend(&self) -> BlendSchedule {
        self.blend.clone().unwrap_or_else(|| {
            let names: Vec<&str> = self.corpus.categories.iter().map(|c| c.name()).collect();
            BlendSchedule::three_phase(&names)
        })
    }

    /// Fixes the stage seeds from the run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.distill.train.seed = seed.wrapping_add(1);
        self
    }

    /// Caps every budget so a whole pipeline finishes in seconds.
    pub fn smoke(mut self) -> Self {
        let shrink = |t: &mut TrainConfig, seqs: u64| {
            t.total_tokens = t.total_tokens.min(seqs * t.seq_len as u64);
            t.batch_tokens = t.batch_tokens.min(4 * t.seq_len as u64);
            t.warmup_tokens = t.warmup_tokens.min(t.total_tokens / 10);
        };
        self.corpus.bytes_per_category = self.corpus.bytes_per_category.min(30_000);
        self.corpus.val_windows = self.corpus.val_windows.min(4);
        shrink(&mut self.train, 16);
        shrink(&mut self.distill.train, 8);
        let s = &mut self.search;
        s.calib_samples = s.calib_samples.min(4);
        s.score_windows = s.score_windows.min(2);
        s.width_steps = s.width_steps.min(1);
        s.grid_drop = s.grid_drop.map(|d| d.min(1));
        s.k1 = s.k1.min(4);
        s.k2 = s.k2.min(2);
        s.short_distill_tokens = s.short_distill_tokens.min(2 * self.distill.train.batch_tokens);
        self.bench.prompt_len = self.bench.prompt_len.min(16);
        self.bench.gen_len = self.bench.gen_len.min(8);
        self
    }

    pub fn validate(&self) -> Result<ArchSpec> {
        let spec = self.model.spec()?;
        if spec.vocab_size != corpus::vocab_size() {
            return Err(Error::Config(format!(
                "model.dims.vocab_size is {} but the corpus alphabet has {} symbols",
                spec.vocab_size,
                corpus::vocab_size()
            )));
        }
        if self.corpus.categories.is_empty() {
            return Err(Error::Config("corpus.categories is empty".into()));
        }
        if !(self.corpus.holdout_fraction > 0.0 && self.corpus.holdout_fraction < 1.0) {
            return Err(Error::Config("corpus.holdout_fraction must lie in (0, 1)".into()));
        }
        if self.corpus.val_windows == 0 {
            return Err(Error::Config("corpus.val_windows must be positive".into()));
        }
        self.train.validate()?;
        self.distill.train.validate()?;
        self.blend().validate()?;
        let s = &self.search;
        if s.calib_samples == 0 || s.calib_seq == 0 || s.score_windows == 0 {
            return Err(Error::Config("search sample counts must be positive".into()));
        }
        if s.k2 == 0 || s.k2 > s.k1 {
            return Err(Error::Config(format!("search needs 1 ≤ k2 ≤ k1, got k1 = {}, k2 = {}", s.k1, s.k2)));
        }
        Ok(spec)
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    use serde_json::Value;
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // a tagged layout is replaced whole so variants do not mix
                    Some(slot) if k != "layout" => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        c.clone().smoke().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"peak": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"dims": {"width": 3}}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_run_defaults() {
        let partial = RunConfig::from_json(r#"{"seed": 4, "train": {"total_tokens": 0}}"#).unwrap();
        let d = RunConfig::default();
        assert_eq!(partial.train.total_tokens, 0);
        assert_eq!(partial.train.precision_policy, d.train.precision_policy);
        assert_eq!(partial.train.seq_len, d.train.seq_len);
        let layout = RunConfig::from_json(r#"{"model": {"layout": {"kind": "transformer", "blocks": 2}}}"#).unwrap();
        assert_eq!(layout.model.layout, Layout::Transformer { blocks: 2 });
        assert_eq!(layout.model.dims, d.model.dims);
    }

    #[test]
    fn layouts() {
        let m = |layout| ModelConfig {
            layout,
            ..ModelConfig::default()
        };
        assert_eq!(m(Layout::Pattern { pattern: "MAF".into() }).spec().unwrap().pattern(), "MAF");
        assert!(m(Layout::Pattern { pattern: "MXF".into() }).spec().is_err());
        assert_eq!(m(Layout::Transformer { blocks: 2 }).spec().unwrap().pattern(), "AFAF");
        let wrong_vocab = RunConfig {
            model: ModelConfig {
                dims: Dims::default(),
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        };
        assert!(wrong_vocab.validate().is_err());
    }
}
