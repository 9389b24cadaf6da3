//! Versioned experiment configuration (JSON).
//!
//! One file describes a whole experiment: where the benchmark and the
//! artifacts live, the encoder shape, the pretraining mixture, module and
//! training settings, and the named ranking pipelines. Relative paths are
//! resolved against the directory holding the config file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use modrank::adapters::LaMode;
use modrank::encoder::EncoderConfig;
use modrank::sftm::Eligibility;
use modrank::training::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Seed for module training; each artifact derives its own stream.
    pub seed: u64,
    pub paths: Paths,
    pub encoder: EncoderShape,
    pub pretrain: PretrainConfig,
    pub training: TrainingSettings,
    pub adapters: AdapterSettings,
    pub masks: MaskSettings,
    pub rank: RankSettings,
    pub pipelines: Vec<PipelineConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory written by `synth` (or laid out the same way).
    pub benchmark: PathBuf,
    /// Directory for checkpoints, modules, runs and reports.
    pub work: PathBuf,
}

/// Encoder dimensions; the vocabulary size comes from the tokenizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderShape {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
}

impl EncoderShape {
    pub fn to_config(self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_seq_len: self.max_seq_len,
        }
    }
}

/// Masked-language-model pretraining of the base checkpoint θ⁰.
///
/// The mixture holds every source MLM document, the first `target_docs`
/// target MLM documents and `mixed_docs` code-mixed documents: source
/// documents whose words are each replaced by their cipher image with
/// probability `mix_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub target_docs: usize,
    pub mixed_docs: usize,
    pub mix_rate: f64,
    pub vocab_cap: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSettings {
    /// Language whose training queries and judgments train ranking modules.
    pub ranking_language: String,
    /// Schedule for language adapters and language masks (both phases).
    pub language: TrainConfig,
    /// Schedule for full fine-tuning, ranking adapters and ranking masks.
    pub ranking: TrainConfig,
    /// Non-relevant training documents come from this BM25 depth.
    pub negative_depth: usize,
    /// Validation reranks this many BM25 candidates per query.
    pub validation_depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSettings {
    pub language_reduction_factor: usize,
    pub ranking_reduction_factor: usize,
    pub invertible: bool,
    /// Learning rate for ranking adapters; the ranking schedule's otherwise.
    pub ranking_lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSettings {
    /// Budget K of language masks, as the equivalent adapter reduction factor.
    pub language_reduction_factor: usize,
    pub ranking_reduction_factor: usize,
    pub language_eligibility: Eligibility,
    pub ranking_eligibility: Eligibility,
    /// Learning rate for the sparse phase of ranking masks.
    pub ranking_lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preranker {
    Bm25,
    Biencoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankSettings {
    pub preranker: Preranker,
    /// Reranking depth.
    pub k: usize,
    pub ensemble: bool,
    pub split: Split,
    /// MAP cutoff; the whole returned ranking when absent.
    pub cutoff: Option<usize>,
}

/// How masks for the query and document languages are composed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskMode {
    /// Query-language mask only.
    Q,
    /// Document-language mask only.
    D,
    /// Both language masks, combined by sparse addition.
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reranker {
    /// Preranking only: no R1 or ensemble run is produced.
    None,
    /// The fully fine-tuned baseline.
    Full,
    /// Ranking adapter stacked on language adapters.
    Adapters { mode: LaMode, drop: usize },
    /// Ranking mask composed with language masks.
    Masks { mode: MaskMode },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    pub query_language: String,
    pub document_language: String,
    pub reranker: Reranker,
}

fn desk_train(
    lr: f64,
    batch_size: usize,
    steps: usize,
    warmup: usize,
    eval_every: usize,
) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size,
        steps,
        warmup,
        eval_every,
        seed: 0,
        max_seq_len: 64,
        adam: AdamConfig::default(),
    }
}

impl ExperimentConfig {
    /// Small configuration that runs the full cipher experiment on one CPU
    /// in a few minutes.
    pub fn desk(benchmark: impl Into<PathBuf>, work: impl Into<PathBuf>, seed: u64) -> Self {
        let pipeline = |name: &str, lang: &str, reranker: Reranker| PipelineConfig {
            name: name.into(),
            query_language: lang.into(),
            document_language: lang.into(),
            reranker,
        };
        Self {
            version: CONFIG_VERSION,
            seed,
            paths: Paths {
                benchmark: benchmark.into(),
                work: work.into(),
            },
            encoder: EncoderShape {
                num_layers: 2,
                hidden: 32,
                heads: 2,
                ffn_dim: 64,
                max_seq_len: 64,
            },
            pretrain: PretrainConfig {
                seed,
                target_docs: 0,
                mixed_docs: 3000,
                mix_rate: 0.5,
                vocab_cap: 30_000,
                train: desk_train(1e-3, 16, 3000, 100, 0),
            },
            training: TrainingSettings {
                ranking_language: "src".into(),
                language: desk_train(3e-4, 16, 1000, 0, 0),
                ranking: desk_train(1e-3, 16, 1000, 100, 250),
                negative_depth: 30,
                validation_depth: 50,
            },
            adapters: AdapterSettings {
                language_reduction_factor: 1,
                ranking_reduction_factor: 1,
                invertible: true,
                ranking_lr: Some(3e-3),
            },
            masks: MaskSettings {
                language_reduction_factor: 1,
                ranking_reduction_factor: 1,
                language_eligibility: Eligibility::Encoder,
                ranking_eligibility: Eligibility::EncoderBody,
                ranking_lr: Some(3e-3),
            },
            rank: RankSettings {
                preranker: Preranker::Bm25,
                k: 50,
                ensemble: true,
                split: Split::Test,
                cutoff: None,
            },
            pipelines: vec![
                pipeline("bm25-tgt", "tgt", Reranker::None),
                pipeline("full-tgt", "tgt", Reranker::Full),
                pipeline("masks-tgt", "tgt", Reranker::Masks { mode: MaskMode::Q }),
                pipeline("full-src", "src", Reranker::Full),
                pipeline("masks-src", "src", Reranker::Masks { mode: MaskMode::Q }),
            ],
        }
    }

    /// A few-minute configuration over [`crate::synth::SynthConfig::small`]
    /// that exercises every reranker kind and composition mode.
    pub fn small(benchmark: impl Into<PathBuf>, work: impl Into<PathBuf>, seed: u64) -> Self {
        let mut c = Self::desk(benchmark, work, seed);
        c.pretrain.mixed_docs = 400;
        c.pretrain.train.steps = 300;
        c.pretrain.train.warmup = 30;
        c.training.language.steps = 60;
        c.training.ranking = desk_train(1e-3, 16, 80, 10, 40);
        c.training.negative_depth = 20;
        c.training.validation_depth = 20;
        c.rank.k = 20;
        let pipeline = |name: &str, q: &str, d: &str, reranker: Reranker| PipelineConfig {
            name: name.into(),
            query_language: q.into(),
            document_language: d.into(),
            reranker,
        };
        c.pipelines = vec![
            pipeline("bm25-tgt", "tgt", "tgt", Reranker::None),
            pipeline("full-tgt", "tgt", "tgt", Reranker::Full),
            pipeline(
                "masks-tgt",
                "tgt",
                "tgt",
                Reranker::Masks { mode: MaskMode::Q },
            ),
            pipeline(
                "masks-cross",
                "src",
                "tgt",
                Reranker::Masks { mode: MaskMode::B },
            ),
            pipeline(
                "adapters-tgt",
                "tgt",
                "tgt",
                Reranker::Adapters {
                    mode: LaMode::Q,
                    drop: 0,
                },
            ),
            pipeline(
                "adapters-cross",
                "src",
                "tgt",
                Reranker::Adapters {
                    mode: LaMode::S,
                    drop: 1,
                },
            ),
        ];
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!(
                "unsupported config version {} (this build reads version {CONFIG_VERSION})",
                self.version
            );
        }
        self.encoder.to_config(16).validate()?;
        for t in [
            &self.pretrain.train,
            &self.training.language,
            &self.training.ranking,
        ] {
            t.validate()?;
        }
        if !(0.0..=1.0).contains(&self.pretrain.mix_rate) {
            bail!("mix_rate must lie in [0, 1]");
        }
        if self.rank.k == 0 {
            bail!("reranking depth k must be at least 1");
        }
        if self.training.negative_depth == 0 || self.training.validation_depth == 0 {
            bail!("negative and validation depths must be at least 1");
        }
        let mut names = HashSet::new();
        for p in &self.pipelines {
            if p.name.is_empty()
                || !p
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
            {
                bail!(
                    "pipeline name {:?} must be non-empty and use only [A-Za-z0-9-_.]",
                    p.name
                );
            }
            if !names.insert(p.name.as_str()) {
                bail!("duplicate pipeline name {}", p.name);
            }
            if let Reranker::Adapters { drop, .. } = p.reranker {
                if drop > self.encoder.num_layers {
                    bail!(
                        "pipeline {}: cannot drop adapters from {drop} of {} layers",
                        p.name,
                        self.encoder.num_layers
                    );
                }
            }
        }
        Ok(())
    }

    pub fn pipeline(&self, name: &str) -> Result<&PipelineConfig> {
        self.pipelines
            .iter()
            .find(|p| p.name == name)
            .with_context(|| format!("no pipeline named {name}"))
    }

    /// Reads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.paths.benchmark, &mut config.paths.work] {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
