//! Experiment steps behind the CLI: pretraining, module training, ranking,
//! evaluation and sweeps. Every step reads its inputs from the benchmark and
//! work directories named in the config and writes its outputs atomically.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use modrank::adapters::{
    AdapterConfig, AdapterFile, AdapterParams, AdapterRole, AdapterStack, LaMode,
};
use modrank::artifact::{self, write_atomic};
use modrank::encoder::{Checkpoint, CrossEncoder, ParamStore, ScoreHead, Tokenizer};
use modrank::eval::{mean_average_precision, measure_latency, paired_t_test, MetricReport, Qrels};
use modrank::retrieval::trec::{format_run, parse_run};
use modrank::retrieval::{
    biencoder_rank, bm25_rank, ensemble, rerank, BiEncoderIndex, Bm25Params, Corpus, InvertedIndex,
    Query, Ranking,
};
use modrank::sftm::{
    combine_masks, compose_params, k_from_reduction_factor, learn_language_mask,
    learn_ranking_mask, MaskFile, MaskRole, SftConfig, SparseMask,
};
use modrank::training::{
    train_full, train_mlm, train_ranking, MlmData, Modules, RankingData, Selector, TrainConfig,
    TrainReport, ValidationSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MaskMode, PipelineConfig, Preranker, Reranker};
use crate::synth::{load_cipher, qrels_path, side_paths, LanguageSide, SOURCE, TARGET};

/// Seed for one artifact, derived from the experiment seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let digest = artifact::fingerprint(&[&seed.to_le_bytes(), label.as_bytes()]);
    u64::from_str_radix(&digest[..16], 16).expect("fingerprint is hex")
}

/// Metadata stored next to a fully fine-tuned checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullMeta {
    pub base_fingerprint: String,
    pub language: String,
}

/// Paths of every artifact an experiment reads or writes.
#[derive(Debug, Clone)]
pub struct Layout {
    pub benchmark: PathBuf,
    pub work: PathBuf,
}

impl Layout {
    pub fn new(config: &ExperimentConfig) -> Self {
        Self {
            benchmark: config.paths.benchmark.clone(),
            work: config.paths.work.clone(),
        }
    }

    pub fn base(&self) -> PathBuf {
        self.work.join("base.ckpt")
    }

    pub fn index(&self, lang: &str) -> PathBuf {
        self.work.join(format!("index-{lang}.idx"))
    }

    pub fn adapter(&self, role: AdapterRole, tag: &str, r: usize) -> PathBuf {
        self.work.join(AdapterFile::file_name(role, tag, r))
    }

    pub fn mask(&self, role: MaskRole, tag: &str, k: usize) -> PathBuf {
        self.work.join(MaskFile::file_name(role, tag, k))
    }

    pub fn full(&self) -> PathBuf {
        self.work.join("full-rank.ckpt")
    }

    pub fn full_meta(&self) -> PathBuf {
        self.work.join("full-rank.json")
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.work.join("logs").join(format!("{name}.jsonl"))
    }

    pub fn run(&self, pipeline: &str, stage: &str) -> PathBuf {
        self.work
            .join("runs")
            .join(format!("{pipeline}.{stage}.trec"))
    }

    pub fn metrics(&self, pipeline: &str, stage: &str) -> PathBuf {
        self.work
            .join("metrics")
            .join(format!("{pipeline}.{stage}.jsonl"))
    }
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {} (run `modrank {hint}` first)", path.display());
    }
    Ok(())
}

pub fn load_base(layout: &Layout) -> Result<Checkpoint> {
    let path = layout.base();
    require(&path, "pretrain")?;
    Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn write_log(layout: &Layout, name: &str, reports: &[&TrainReport]) -> Result<()> {
    let text: String = reports.iter().map(|r| r.to_jsonl()).collect();
    write_atomic(&layout.log(name), text.as_bytes())?;
    Ok(())
}

fn load_side(layout: &Layout, lang: &str) -> Result<LanguageSide> {
    LanguageSide::load(&layout.benchmark, lang)
}

/// Texts of the pretraining mixture, in training order.
pub fn pretraining_texts(config: &ExperimentConfig) -> Result<Vec<String>> {
    let layout = Layout::new(config);
    let p = &config.pretrain;
    let source = load_side(&layout, SOURCE)?;
    let target = load_side(&layout, TARGET)?;
    if p.target_docs > target.mlm.len() || p.mixed_docs > source.mlm.len() {
        bail!(
            "pretraining asks for {} target and {} mixed documents; the benchmark has {} and {}",
            p.target_docs,
            p.mixed_docs,
            target.mlm.len(),
            source.mlm.len()
        );
    }
    let cipher = load_cipher(&layout.benchmark)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(p.seed, "code-mix"));
    let mut mixed = Vec::with_capacity(p.mixed_docs);
    for doc in source.mlm.iter().rev().take(p.mixed_docs) {
        let words = doc
            .split(' ')
            .map(|w| {
                if rng.gen::<f64>() < p.mix_rate {
                    cipher.encode(w)
                } else {
                    Ok(w.to_string())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        mixed.push(words.join(" "));
    }
    let mut texts = source.mlm;
    texts.extend(target.mlm.into_iter().take(p.target_docs));
    texts.extend(mixed);
    Ok(texts)
}

/// Builds the tokenizer over every benchmark text, then pretrains θ⁰ with
/// masked language modeling and saves it.
pub fn pretrain(config: &ExperimentConfig) -> Result<Checkpoint> {
    let layout = Layout::new(config);
    let p = &config.pretrain;
    let mut vocab_texts = Vec::new();
    for lang in [SOURCE, TARGET] {
        let side = load_side(&layout, lang)?;
        vocab_texts.extend(side.corpus.docs().iter().map(|d| d.text.clone()));
        vocab_texts.extend(side.mlm);
    }
    let tokenizer = Tokenizer::build(vocab_texts.iter().map(String::as_str), p.vocab_cap);
    let mut ck = Checkpoint::init(config.encoder.to_config(0), tokenizer, p.seed)?;
    let texts = pretraining_texts(config)?;
    log::info!(
        "pretraining on {} documents, vocabulary {}",
        texts.len(),
        ck.tokenizer.len()
    );
    let data = MlmData::from_texts(
        &ck.tokenizer,
        texts.iter().map(String::as_str),
        p.train.max_seq_len,
    )?;
    let train = TrainConfig {
        seed: p.seed,
        ..p.train
    };
    let (m, report) = train_mlm(
        &ck.config,
        Modules::base(ck.params.clone()),
        &Selector::all(&ck.params),
        &data,
        &train,
        None,
    )?;
    ck.params = m.params;
    ck.save(&layout.base())?;
    write_log(&layout, "pretrain", &[&report])?;
    Ok(ck)
}

pub fn build_index(corpus_path: &Path, out: &Path) -> Result<InvertedIndex> {
    let corpus =
        Corpus::load(corpus_path).with_context(|| format!("reading {}", corpus_path.display()))?;
    let index = InvertedIndex::build(&corpus)?;
    index.save(out)?;
    Ok(index)
}

pub fn index_language(config: &ExperimentConfig, lang: &str) -> Result<InvertedIndex> {
    let layout = Layout::new(config);
    build_index(
        &side_paths(&layout.benchmark, lang).corpus,
        &layout.index(lang),
    )
}

fn load_index(layout: &Layout, lang: &str) -> Result<InvertedIndex> {
    let path = layout.index(lang);
    require(&path, &format!("index --lang {lang}"))?;
    InvertedIndex::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn seeded(train: &TrainConfig, seed: u64, label: &str) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(seed, label),
        ..*train
    }
}

fn with_lr(train: TrainConfig, lr: Option<f64>) -> TrainConfig {
    TrainConfig {
        lr: lr.unwrap_or(train.lr),
        ..train
    }
}

pub fn language_k(config: &ExperimentConfig) -> Result<usize> {
    Ok(k_from_reduction_factor(
        config.masks.language_reduction_factor,
        config.encoder.num_layers,
        config.encoder.hidden,
    )?)
}

pub fn ranking_k(config: &ExperimentConfig, reduction_factor: usize) -> Result<usize> {
    Ok(k_from_reduction_factor(
        reduction_factor,
        config.encoder.num_layers,
        config.encoder.hidden,
    )?)
}

fn mlm_data(ck: &Checkpoint, layout: &Layout, lang: &str, max_len: usize) -> Result<MlmData> {
    let side = load_side(layout, lang)?;
    Ok(MlmData::from_texts(
        &ck.tokenizer,
        side.mlm.iter().map(String::as_str),
        max_len,
    )?)
}

/// Language adapter trained with MLM on the language's monolingual text.
pub fn train_language_adapter(config: &ExperimentConfig, lang: &str) -> Result<PathBuf> {
    let layout = Layout::new(config);
    let ck = load_base(&layout)?;
    let train = seeded(
        &config.training.language,
        config.seed,
        &format!("LA-{lang}"),
    );
    let data = mlm_data(&ck, &layout, lang, train.max_seq_len)?;
    let r = config.adapters.language_reduction_factor;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let la = AdapterParams::init(
        AdapterConfig::new(r, ck.config.hidden)?,
        AdapterRole::Language,
        lang,
        ck.config.num_layers,
        config.adapters.invertible,
        &mut rng,
    )?;
    let modules = Modules {
        params: ck.params.clone(),
        language: Some(la),
        ranking: None,
    };
    let selector = Selector::frozen(&ck.params).with_language(true);
    let (m, report) = train_mlm(&ck.config, modules, &selector, &data, &train, None)?;
    let file = AdapterFile {
        params: m
            .language
            .context("language adapter missing after training")?,
        base_fingerprint: ck.fingerprint(),
        head: None,
    };
    let path = layout.adapter(AdapterRole::Language, lang, r);
    file.save(&path)?;
    write_log(&layout, &format!("LA-{lang}-r{r}"), &[&report])?;
    Ok(path)
}

/// Training and validation data for ranking modules, built from the
/// ranking language's training queries and BM25 candidates.
pub struct RankingInputs {
    pub data: RankingData,
    pub validation: Option<ValidationSet>,
}

pub fn ranking_inputs(config: &ExperimentConfig, ck: &Checkpoint) -> Result<RankingInputs> {
    let layout = Layout::new(config);
    let t = &config.training;
    let side = load_side(&layout, &t.ranking_language)?;
    let index = load_index(&layout, &t.ranking_language)?;
    let data = RankingData::from_bm25(
        &ck.tokenizer,
        &side.corpus,
        &index,
        &side.train,
        &side.qrels,
        t.negative_depth,
    )?;
    let validation = if t.ranking.eval_every > 0 && !side.val.is_empty() {
        Some(ValidationSet::from_bm25(
            &ck.tokenizer,
            &side.corpus,
            &index,
            &side.val,
            &side.qrels,
            t.validation_depth,
        )?)
    } else {
        None
    };
    Ok(RankingInputs { data, validation })
}

fn load_adapter(path: &Path, ck_fingerprint: &str, hint: &str) -> Result<AdapterFile> {
    require(path, hint)?;
    let file = AdapterFile::load(path).with_context(|| format!("loading {}", path.display()))?;
    file.check_base(ck_fingerprint)
        .with_context(|| format!("checking {}", path.display()))?;
    Ok(file)
}

fn load_mask(path: &Path, ck_fingerprint: &str, hint: &str) -> Result<MaskFile> {
    require(path, hint)?;
    let file = MaskFile::load(path).with_context(|| format!("loading {}", path.display()))?;
    file.check_base(ck_fingerprint)
        .with_context(|| format!("checking {}", path.display()))?;
    Ok(file)
}

/// Ranking adapter with reduction factor `r`, stacked on the ranking
/// language's adapter and trained with the scoring head.
pub fn train_ranking_adapter(config: &ExperimentConfig, r: usize) -> Result<PathBuf> {
    let layout = Layout::new(config);
    let ck = load_base(&layout)?;
    let fp = ck.fingerprint();
    let lang = &config.training.ranking_language;
    let la_path = layout.adapter(
        AdapterRole::Language,
        lang,
        config.adapters.language_reduction_factor,
    );
    let la = load_adapter(&la_path, &fp, &format!("train la --lang {lang}"))?;
    let inputs = ranking_inputs(config, &ck)?;
    let train = with_lr(
        seeded(&config.training.ranking, config.seed, "RA"),
        config.adapters.ranking_lr,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let ra = AdapterParams::init(
        AdapterConfig::new(r, ck.config.hidden)?,
        AdapterRole::Ranking,
        "rank",
        ck.config.num_layers,
        false,
        &mut rng,
    )?;
    let modules = Modules {
        params: ck.params.clone(),
        language: Some(la.params),
        ranking: Some(ra),
    };
    let selector = Selector::score_head(&ck.params).with_ranking(true);
    let (m, report) = train_ranking(
        &ck.config,
        modules,
        &selector,
        &inputs.data,
        &train,
        inputs.validation.as_ref(),
    )?;
    let file = AdapterFile {
        params: m
            .ranking
            .context("ranking adapter missing after training")?,
        base_fingerprint: fp,
        head: Some(ScoreHead::from_params(&m.params)?),
    };
    let path = layout.adapter(AdapterRole::Ranking, "rank", r);
    file.save(&path)?;
    write_log(&layout, &format!("RA-rank-r{r}"), &[&report])?;
    Ok(path)
}

/// Language mask learned from the language's monolingual text.
pub fn train_language_mask(config: &ExperimentConfig, lang: &str) -> Result<PathBuf> {
    let layout = Layout::new(config);
    let ck = load_base(&layout)?;
    let train = seeded(
        &config.training.language,
        config.seed,
        &format!("LM-{lang}"),
    );
    let data = mlm_data(&ck, &layout, lang, train.max_seq_len)?;
    let k = language_k(config)?;
    let sft = SftConfig {
        k,
        phase1: train,
        phase2: train,
        eligibility: config.masks.language_eligibility,
    };
    let out = learn_language_mask(&ck.config, &ck.params, &data, &sft, None, lang)?;
    let file = MaskFile {
        mask: out.mask,
        base_fingerprint: ck.fingerprint(),
        head: None,
    };
    let path = layout.mask(MaskRole::Language, lang, k);
    file.save(&path)?;
    write_log(
        &layout,
        &format!("LM-{lang}-k{k}"),
        &[&out.phase1, &out.phase2],
    )?;
    Ok(path)
}

/// Ranking mask learned on top of the ranking language's mask. The budget
/// corresponds to reduction factor `r`.
pub fn train_ranking_mask(config: &ExperimentConfig, r: usize) -> Result<PathBuf> {
    let layout = Layout::new(config);
    let ck = load_base(&layout)?;
    let fp = ck.fingerprint();
    let lang = &config.training.ranking_language;
    let lm_path = layout.mask(MaskRole::Language, lang, language_k(config)?);
    let lm = load_mask(&lm_path, &fp, &format!("train lm --lang {lang}"))?;
    let base = compose_params(&ck.params, &[&lm.mask])?;
    let inputs = ranking_inputs(config, &ck)?;
    let phase1 = seeded(&config.training.ranking, config.seed, "RM");
    let k = ranking_k(config, r)?;
    let sft = SftConfig {
        k,
        phase1,
        phase2: with_lr(phase1, config.masks.ranking_lr),
        eligibility: config.masks.ranking_eligibility,
    };
    let out = learn_ranking_mask(
        &ck.config,
        &base,
        &inputs.data,
        &sft,
        inputs.validation.as_ref(),
    )?;
    let file = MaskFile {
        mask: out.mask,
        base_fingerprint: fp,
        head: out.head,
    };
    let path = layout.mask(MaskRole::Ranking, "rank", k);
    file.save(&path)?;
    write_log(
        &layout,
        &format!("RM-rank-k{k}"),
        &[&out.phase1, &out.phase2],
    )?;
    Ok(path)
}

/// Full fine-tuning of θ⁰ on the ranking data: the monolithic baseline.
pub fn train_full_model(config: &ExperimentConfig) -> Result<PathBuf> {
    let layout = Layout::new(config);
    let ck = load_base(&layout)?;
    let inputs = ranking_inputs(config, &ck)?;
    let train = seeded(&config.training.ranking, config.seed, "full");
    let (params, report) = train_full(
        &ck.config,
        ck.params.clone(),
        &inputs.data,
        &train,
        inputs.validation.as_ref(),
    )?;
    let meta = FullMeta {
        base_fingerprint: ck.fingerprint(),
        language: config.training.ranking_language.clone(),
    };
    let full = Checkpoint { params, ..ck };
    full.save(&layout.full())?;
    write_atomic(
        &layout.full_meta(),
        (serde_json::to_string_pretty(&meta)? + "\n").as_bytes(),
    )?;
    write_log(&layout, "full-rank", &[&report])?;
    Ok(layout.full())
}

/// Artifacts behind one reranker, loaded and checked against θ⁰.
pub enum LoadedReranker {
    None,
    Params(ParamStore),
    Adapters {
        params: ParamStore,
        query: AdapterParams,
        document: AdapterParams,
        ranking: AdapterParams,
        mode: LaMode,
        drop: usize,
    },
}

impl LoadedReranker {
    pub fn load(
        config: &ExperimentConfig,
        ck: &Checkpoint,
        pipeline: &PipelineConfig,
    ) -> Result<Self> {
        Self::load_with(config, ck, pipeline, None)
    }

    /// Like [`LoadedReranker::load`], with the ranking module's reduction
    /// factor overridden.
    pub fn load_with(
        config: &ExperimentConfig,
        ck: &Checkpoint,
        pipeline: &PipelineConfig,
        ranking_r: Option<usize>,
    ) -> Result<Self> {
        let layout = Layout::new(config);
        let fp = ck.fingerprint();
        let (ql, dl) = (&pipeline.query_language, &pipeline.document_language);
        match pipeline.reranker {
            Reranker::None => Ok(Self::None),
            Reranker::Full => {
                let path = layout.full();
                require(&path, "train full")?;
                let text = std::fs::read_to_string(layout.full_meta())
                    .with_context(|| format!("reading {}", layout.full_meta().display()))?;
                let meta: FullMeta = serde_json::from_str(&text)?;
                if meta.base_fingerprint != fp {
                    return Err(modrank::Error::FingerprintMismatch {
                        base: fp,
                        artifact: meta.base_fingerprint,
                    }
                    .into());
                }
                let full = Checkpoint::load(&path)
                    .with_context(|| format!("loading {}", path.display()))?;
                if full.config != ck.config || full.tokenizer != ck.tokenizer {
                    bail!(
                        "{} does not match the base model's shape or vocabulary",
                        path.display()
                    );
                }
                Ok(Self::Params(full.params))
            }
            Reranker::Adapters { mode, drop } => {
                let lr = config.adapters.language_reduction_factor;
                let r = ranking_r.unwrap_or(config.adapters.ranking_reduction_factor);
                let la = |lang: &str| {
                    load_adapter(
                        &layout.adapter(AdapterRole::Language, lang, lr),
                        &fp,
                        &format!("train la --lang {lang}"),
                    )
                };
                let ra = load_adapter(
                    &layout.adapter(AdapterRole::Ranking, "rank", r),
                    &fp,
                    "train ra",
                )?;
                let head = ra
                    .head
                    .context("ranking adapter file carries no scoring head")?;
                let mut params = ck.params.clone();
                head.install(&mut params)?;
                let query = la(ql)?.params;
                let document = if dl == ql {
                    query.clone()
                } else {
                    la(dl)?.params
                };
                Ok(Self::Adapters {
                    params,
                    query,
                    document,
                    ranking: ra.params,
                    mode,
                    drop,
                })
            }
            Reranker::Masks { mode } => {
                let k = language_k(config)?;
                let rk = ranking_k(
                    config,
                    ranking_r.unwrap_or(config.masks.ranking_reduction_factor),
                )?;
                let lm = |lang: &str| {
                    load_mask(
                        &layout.mask(MaskRole::Language, lang, k),
                        &fp,
                        &format!("train lm --lang {lang}"),
                    )
                };
                let rm = load_mask(&layout.mask(MaskRole::Ranking, "rank", rk), &fp, "train rm")?;
                let language: SparseMask = match mode {
                    MaskMode::Q => lm(ql)?.mask,
                    MaskMode::D => lm(dl)?.mask,
                    MaskMode::B if ql == dl => lm(ql)?.mask,
                    MaskMode::B => combine_masks(&lm(ql)?.mask, &lm(dl)?.mask)?,
                };
                let mut params = compose_params(&ck.params, &[&language, &rm.mask])?;
                rm.head
                    .context("ranking mask file carries no scoring head")?
                    .install(&mut params)?;
                Ok(Self::Params(params))
            }
        }
    }

    /// Cross-encoder scorer, or `None` for preranking-only pipelines.
    pub fn scorer<'a>(&'a self, ck: &'a Checkpoint) -> Option<CrossEncoder<'a>> {
        self.scorer_with_drop(ck, None)
    }

    /// Scorer with the adapter drop overridden (adapter rerankers only).
    pub fn scorer_with_drop<'a>(
        &'a self,
        ck: &'a Checkpoint,
        drop: Option<usize>,
    ) -> Option<CrossEncoder<'a>> {
        match self {
            Self::None => None,
            Self::Params(p) => Some(ck.cross_encoder(None).with_params(p)),
            Self::Adapters {
                params,
                query,
                document,
                ranking,
                mode,
                drop: configured,
            } => {
                let stack = match mode {
                    LaMode::Q => AdapterStack::stacked(query, ranking),
                    LaMode::D => AdapterStack::stacked(document, ranking),
                    LaMode::S => AdapterStack::split(query, document, Some(ranking)),
                };
                let stack = stack.with_drop(drop.unwrap_or(*configured));
                Some(ck.cross_encoder(Some(stack)).with_params(params))
            }
        }
    }

    /// Scoring-head parameters without any adapter: what the adapter
    /// reranker computes once every layer's adapters are dropped.
    pub fn adapter_free<'a>(&'a self, ck: &'a Checkpoint) -> Option<CrossEncoder<'a>> {
        match self {
            Self::Adapters { params, .. } => Some(ck.cross_encoder(None).with_params(params)),
            _ => None,
        }
    }
}

/// Queries, corpus, judgments and first-stage retriever of one pipeline.
pub struct PipelineInputs {
    pub queries: Vec<Query>,
    pub corpus: Corpus,
    pub qrels: Qrels,
    preranker: Prerank,
}

enum Prerank {
    Bm25(InvertedIndex),
    Dense(BiEncoderIndex),
}

impl PipelineInputs {
    pub fn load(
        config: &ExperimentConfig,
        ck: &Checkpoint,
        pipeline: &PipelineConfig,
    ) -> Result<Self> {
        let layout = Layout::new(config);
        let q = load_side(&layout, &pipeline.query_language)?;
        let d = if pipeline.document_language == pipeline.query_language {
            q.corpus.clone()
        } else {
            load_side(&layout, &pipeline.document_language)?.corpus
        };
        let queries = match config.rank.split {
            crate::config::Split::Train => q.train,
            crate::config::Split::Val => q.val,
            crate::config::Split::Test => q.test,
        };
        let qrels_file = qrels_path(
            &layout.benchmark,
            &pipeline.query_language,
            &pipeline.document_language,
        );
        let qrels = Qrels::load(&qrels_file)
            .with_context(|| format!("reading {}", qrels_file.display()))?;
        let preranker = match config.rank.preranker {
            Preranker::Bm25 => Prerank::Bm25(load_index(&layout, &pipeline.document_language)?),
            Preranker::Biencoder => Prerank::Dense(BiEncoderIndex::build(&d, &ck.bi_encoder())?),
        };
        Ok(Self {
            queries,
            corpus: d,
            qrels,
            preranker,
        })
    }

    pub fn first_stage(&self, ck: &Checkpoint, query: &Query) -> Result<Ranking> {
        Ok(match &self.preranker {
            Prerank::Bm25(index) => bm25_rank(&query.id, &query.text, index, Bm25Params::default()),
            Prerank::Dense(index) => {
                biencoder_rank(&query.id, &query.text, index, &ck.bi_encoder())?
            }
        })
    }
}

/// Runs of one pipeline over its query split.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRuns {
    pub r0: Vec<Ranking>,
    pub r1: Option<Vec<Ranking>>,
    pub ens: Option<Vec<Ranking>>,
}

impl PipelineRuns {
    /// `(stage, run)` pairs in R0, R1, ENS order.
    pub fn stages(&self) -> Vec<(&'static str, &[Ranking])> {
        let mut out: Vec<(&'static str, &[Ranking])> = vec![("R0", &self.r0)];
        if let Some(r1) = &self.r1 {
            out.push(("R1", r1));
        }
        if let Some(ens) = &self.ens {
            out.push(("ENS", ens));
        }
        out
    }
}

/// Preranks every query and, when a scorer is given, reranks the top `k`
/// and optionally ensembles the two stages.
pub fn run_pipeline(
    ck: &Checkpoint,
    inputs: &PipelineInputs,
    scorer: Option<&CrossEncoder<'_>>,
    k: usize,
    with_ensemble: bool,
) -> Result<PipelineRuns> {
    let mut r0 = Vec::with_capacity(inputs.queries.len());
    let mut r1 = Vec::new();
    let mut ens = Vec::new();
    for q in &inputs.queries {
        let first = inputs.first_stage(ck, q)?;
        if let Some(s) = scorer {
            let second = rerank(&first, k, &q.text, &inputs.corpus, s)?;
            if with_ensemble {
                ens.push(ensemble(&first, &second)?);
            }
            r1.push(second);
        }
        r0.push(first);
    }
    let reranked = scorer.is_some();
    Ok(PipelineRuns {
        r0,
        r1: reranked.then_some(r1),
        ens: (reranked && with_ensemble).then_some(ens),
    })
}

/// Runs a named pipeline and writes one TREC file per stage.
pub fn rank(config: &ExperimentConfig, name: &str) -> Result<PipelineRuns> {
    let layout = Layout::new(config);
    let pipeline = config.pipeline(name)?;
    let ck = load_base(&layout)?;
    let reranker = LoadedReranker::load(config, &ck, pipeline)?;
    let inputs = PipelineInputs::load(config, &ck, pipeline)?;
    let scorer = reranker.scorer(&ck);
    let runs = run_pipeline(
        &ck,
        &inputs,
        scorer.as_ref(),
        config.rank.k,
        config.rank.ensemble,
    )?;
    for (stage, run) in runs.stages() {
        write_atomic(&layout.run(name, stage), format_run(run).as_bytes())?;
    }
    Ok(runs)
}

/// MAP of a run file, optionally with a paired t-test against a baseline run.
pub fn evaluate_files(
    run: &Path,
    qrels: &Path,
    cutoff: Option<usize>,
    baseline: Option<&Path>,
) -> Result<MetricReport> {
    let read_run = |p: &Path| -> Result<Vec<Ranking>> {
        let text =
            std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        parse_run(&text).with_context(|| format!("parsing {}", p.display()))
    };
    let qrels = Qrels::load(qrels).with_context(|| format!("reading {}", qrels.display()))?;
    let mut report = mean_average_precision(&read_run(run)?, &qrels, cutoff)?;
    if let Some(b) = baseline {
        let base = mean_average_precision(&read_run(b)?, &qrels, cutoff)?;
        let (a, b) = report.paired_aps(&base);
        report.t_test = Some(paired_t_test(&a, &b)?);
    }
    Ok(report)
}

/// Evaluates every stage of a ranked pipeline and writes metrics JSONL.
pub fn evaluate_pipeline(
    config: &ExperimentConfig,
    name: &str,
) -> Result<Vec<(String, MetricReport)>> {
    let layout = Layout::new(config);
    let pipeline = config.pipeline(name)?;
    let qrels = qrels_path(
        &layout.benchmark,
        &pipeline.query_language,
        &pipeline.document_language,
    );
    let mut out = Vec::new();
    for stage in ["R0", "R1", "ENS"] {
        let run = layout.run(name, stage);
        if !run.exists() {
            continue;
        }
        let baseline = (stage != "R0").then(|| layout.run(name, "R0"));
        let report = evaluate_files(&run, &qrels, config.rank.cutoff, baseline.as_deref())?;
        write_atomic(&layout.metrics(name, stage), report.to_jsonl().as_bytes())?;
        out.push((stage.to_string(), report));
    }
    if out.is_empty() {
        bail!("no runs for pipeline {name} (run `modrank rank --pipeline {name}` first)");
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    ReductionFactor,
    AdapterDrop,
}

/// One setting of a sweep: reranked (R1) MAP and per-query latency, with
/// the latency difference to the first row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub map: f64,
    pub latency_ms: f64,
    pub delta_latency_ms: f64,
}

pub fn format_sweep(kind: SweepKind, rows: &[SweepRow]) -> String {
    let name = match kind {
        SweepKind::ReductionFactor => "reduction_factor",
        SweepKind::AdapterDrop => "adapter_drop",
    };
    let mut out = format!("{name}\tmap\tdelta_latency_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.3}\n",
            r.value, r.map, r.delta_latency_ms
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatencyPlan {
    /// Queries timed per repetition (the first ones of the split).
    pub queries: usize,
    pub repetitions: usize,
}

impl Default for LatencyPlan {
    fn default() -> Self {
        Self {
            queries: 20,
            repetitions: 5,
        }
    }
}

fn r1_map(runs: &PipelineRuns, qrels: &Qrels, cutoff: Option<usize>) -> Result<f64> {
    let run = runs
        .r1
        .as_ref()
        .context("pipeline produced no reranked run")?;
    Ok(mean_average_precision(run, qrels, cutoff)?.map)
}

fn timed_rows(
    ck: &Checkpoint,
    inputs: &PipelineInputs,
    scorers: &[CrossEncoder<'_>],
    values: &[usize],
    config: &ExperimentConfig,
    plan: LatencyPlan,
) -> Result<Vec<SweepRow>> {
    let mut maps = Vec::with_capacity(scorers.len());
    for s in scorers {
        let runs = run_pipeline(ck, inputs, Some(s), config.rank.k, false)?;
        maps.push(r1_map(&runs, &inputs.qrels, config.rank.cutoff)?);
    }
    let n = plan.queries.min(inputs.queries.len());
    let first: Vec<Ranking> = inputs.queries[..n]
        .iter()
        .map(|q| inputs.first_stage(ck, q))
        .collect::<Result<_>>()?;
    let k = config.rank.k;
    let mut closures: Vec<Box<dyn FnMut(usize) -> modrank::Result<()> + '_>> = scorers
        .iter()
        .map(|s| {
            let first = &first;
            Box::new(move |i: usize| -> modrank::Result<()> {
                let q = &inputs.queries[i];
                rerank(&first[i], k, &q.text, &inputs.corpus, s).map(|_| ())
            }) as Box<dyn FnMut(usize) -> modrank::Result<()> + '_>
        })
        .collect();
    let mut refs: Vec<&mut dyn FnMut(usize) -> modrank::Result<()>> = closures
        .iter_mut()
        .map(|c| c.as_mut() as &mut dyn FnMut(usize) -> modrank::Result<()>)
        .collect();
    let stats = measure_latency(&mut refs, n, plan.repetitions)?;
    let base = stats[0].median_ms;
    Ok(values
        .iter()
        .zip(maps)
        .zip(stats)
        .map(|((&value, map), s)| SweepRow {
            value,
            map,
            latency_ms: s.median_ms,
            delta_latency_ms: s.median_ms - base,
        })
        .collect())
}

/// Adapter drop sweep over `values` (layers without adapters) for an
/// adapter pipeline.
pub fn sweep_adapter_drop(
    config: &ExperimentConfig,
    name: &str,
    values: &[usize],
    plan: LatencyPlan,
) -> Result<Vec<SweepRow>> {
    let layout = Layout::new(config);
    let pipeline = config.pipeline(name)?;
    if !matches!(pipeline.reranker, Reranker::Adapters { .. }) {
        bail!("adapter drop applies to adapter pipelines; {name} is not one");
    }
    if let Some(&n) = values.iter().find(|&&n| n > config.encoder.num_layers) {
        bail!(
            "adapter drop {n} out of range 0..={}",
            config.encoder.num_layers
        );
    }
    let ck = load_base(&layout)?;
    let reranker = LoadedReranker::load(config, &ck, pipeline)?;
    let inputs = PipelineInputs::load(config, &ck, pipeline)?;
    let scorers: Vec<CrossEncoder<'_>> = values
        .iter()
        .map(|&n| {
            reranker
                .scorer_with_drop(&ck, Some(n))
                .expect("adapter reranker")
        })
        .collect();
    timed_rows(&ck, &inputs, &scorers, values, config, plan)
}

/// Reduction-factor sweep: trains the pipeline's ranking module at each
/// factor (language modules stay fixed), then ranks with it.
pub fn sweep_reduction_factor(
    config: &ExperimentConfig,
    name: &str,
    values: &[usize],
    plan: LatencyPlan,
) -> Result<Vec<SweepRow>> {
    let layout = Layout::new(config);
    let pipeline = config.pipeline(name)?;
    for &r in values {
        match pipeline.reranker {
            Reranker::Adapters { .. } => train_ranking_adapter(config, r)?,
            Reranker::Masks { .. } => train_ranking_mask(config, r)?,
            _ => bail!(
                "reduction-factor sweeps apply to adapter or mask pipelines; {name} is neither"
            ),
        };
    }
    let ck = load_base(&layout)?;
    let rerankers = values
        .iter()
        .map(|&r| LoadedReranker::load_with(config, &ck, pipeline, Some(r)))
        .collect::<Result<Vec<_>>>()?;
    let inputs = PipelineInputs::load(config, &ck, pipeline)?;
    let scorers: Vec<CrossEncoder<'_>> = rerankers
        .iter()
        .map(|r| r.scorer(&ck).expect("reranker"))
        .collect();
    timed_rows(&ck, &inputs, &scorers, values, config, plan)
}

/// Languages whose language modules a pipeline composes.
pub fn language_modules(p: &PipelineConfig) -> Vec<&str> {
    let (q, d) = (p.query_language.as_str(), p.document_language.as_str());
    match p.reranker {
        Reranker::Adapters {
            mode: LaMode::Q, ..
        }
        | Reranker::Masks { mode: MaskMode::Q } => vec![q],
        Reranker::Adapters {
            mode: LaMode::D, ..
        }
        | Reranker::Masks { mode: MaskMode::D } => vec![d],
        Reranker::Adapters {
            mode: LaMode::S, ..
        }
        | Reranker::Masks { mode: MaskMode::B } => vec![q, d],
        Reranker::None | Reranker::Full => Vec::new(),
    }
}

/// MAP of every stage of every pipeline, as evaluated by [`run_all`].
pub type SuiteMetrics = Vec<(String, String, MetricReport)>;

/// Runs the whole experiment: pretraining, indexing, every module the
/// pipelines need, ranking and evaluation.
pub fn run_all(config: &ExperimentConfig) -> Result<SuiteMetrics> {
    let layout = Layout::new(config);
    pretrain(config)?;
    let mut languages: Vec<&str> = vec![config.training.ranking_language.as_str()];
    for p in &config.pipelines {
        languages.push(&p.query_language);
        languages.push(&p.document_language);
    }
    languages.sort_unstable();
    languages.dedup();
    for lang in &languages {
        index_language(config, lang)?;
    }

    let module_languages = |adapters: bool| -> Vec<&str> {
        let mut langs = vec![config.training.ranking_language.as_str()];
        for p in &config.pipelines {
            if matches!(p.reranker, Reranker::Adapters { .. }) == adapters {
                langs.extend(language_modules(p));
            }
        }
        langs.sort_unstable();
        langs.dedup();
        langs
    };
    let has = |f: fn(&Reranker) -> bool| config.pipelines.iter().any(|p| f(&p.reranker));
    if has(|r| matches!(r, Reranker::Full)) {
        train_full_model(config)?;
    }
    if has(|r| matches!(r, Reranker::Adapters { .. })) {
        for lang in module_languages(true) {
            train_language_adapter(config, lang)?;
        }
        train_ranking_adapter(config, config.adapters.ranking_reduction_factor)?;
    }
    if has(|r| matches!(r, Reranker::Masks { .. })) {
        for lang in module_languages(false) {
            train_language_mask(config, lang)?;
        }
        train_ranking_mask(config, config.masks.ranking_reduction_factor)?;
    }

    let mut out = Vec::new();
    for p in &config.pipelines {
        rank(config, &p.name)?;
        for (stage, report) in evaluate_pipeline(config, &p.name)? {
            out.push((p.name.clone(), stage, report));
        }
    }
    let summary: String = out
        .iter()
        .map(|(p, s, r)| format!("{p}\t{s}\t{:.6}\n", r.map))
        .collect();
    write_atomic(&layout.work.join("summary.tsv"), summary.as_bytes())?;
    Ok(out)
}
