//! Micro BERT-style encoder: tokenizer, parameters, forward pass, the
//! cross-encoder scoring head, mean-pooled bi-encoder embeddings and the
//! MLM head.

mod config;
pub mod model;
pub mod params;
pub mod tokenizer;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::EncoderConfig;
pub use params::{BoundParams, ParamStore};
pub use tokenizer::{TokenSequence, Tokenizer};

use crate::adapters::AdapterStack;
use crate::artifact::{self, Kind, PayloadReader, PayloadWriter};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Pairs scored per tape during inference.
pub const SCORE_CHUNK: usize = 16;

/// Dense scoring layer `h → 1` applied to the `[CLS]` state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ScoreHead {
    pub fn from_params(params: &ParamStore) -> Result<Self> {
        Ok(Self {
            weight: params.require("score.weight")?.clone(),
            bias: params.require("score.bias")?.clone(),
        })
    }

    pub fn install(&self, params: &mut ParamStore) -> Result<()> {
        for (name, t) in [("score.weight", &self.weight), ("score.bias", &self.bias)] {
            let slot = params.get_mut(name).ok_or_else(|| {
                Error::format("parameter store", format!("missing tensor {name}"))
            })?;
            if slot.shape() != t.shape() {
                return Err(Error::contract(format!(
                    "score head shape {:?} does not fit {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weight.data().to_vec();
        v.extend_from_slice(self.bias.data());
        v
    }

    pub fn from_flat(hidden: usize, values: &[f64]) -> Result<Self> {
        if values.len() != hidden + 1 {
            return Err(Error::format(
                "score head",
                format!("{} values for hidden {hidden}", values.len()),
            ));
        }
        Ok(Self {
            weight: Tensor::new(vec![hidden, 1], values[..hidden].to_vec())?,
            bias: Tensor::new(vec![1], vec![values[hidden]])?,
        })
    }
}

/// Base model: configuration, vocabulary and parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    vocab: Vec<String>,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    /// Randomly initialized model over `tokenizer`'s vocabulary.
    pub fn init(mut config: EncoderConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.vocab_size = tokenizer.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::init(&config, &mut rng)?;
        Ok(Self {
            config,
            tokenizer,
            params,
        })
    }

    /// Hash of configuration, vocabulary and every parameter bit.
    pub fn fingerprint(&self) -> String {
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        let vocab = serde_json::to_vec(self.tokenizer.vocab()).expect("vocab serializes");
        let theta = artifact::f64_bytes(&self.params.flatten());
        artifact::fingerprint(&[&config, &vocab, &theta])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            vocab: self.tokenizer.vocab().to_vec(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect(),
        };
        let mut w = PayloadWriter::default();
        w.f64s(&self.params.flatten());
        artifact::encode(Kind::Base, &header, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (CheckpointHeader, _) = artifact::decode(Kind::Base, bytes)?;
        header.config.validate()?;
        if header.vocab.len() != header.config.vocab_size {
            return Err(Error::format(
                "checkpoint",
                "vocabulary size disagrees with config",
            ));
        }
        let mut r = PayloadReader::new(payload);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, shape) in header.tensors {
            let n = shape.iter().product();
            tensors.push((name, Tensor::new(shape, r.f64s(n)?)?));
        }
        r.finish()?;
        let params = ParamStore::from_tensors(tensors);
        params.check_layout(&header.config)?;
        let tokenizer = Tokenizer::from_vocab(header.vocab);
        Ok(Self {
            config: header.config,
            tokenizer,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn cross_encoder<'a>(&'a self, adapters: Option<AdapterStack<'a>>) -> CrossEncoder<'a> {
        CrossEncoder {
            config: &self.config,
            tokenizer: &self.tokenizer,
            params: &self.params,
            adapters,
        }
    }

    pub fn bi_encoder(&self) -> BiEncoder<'_> {
        BiEncoder {
            config: &self.config,
            tokenizer: &self.tokenizer,
            params: &self.params,
        }
    }
}

/// Cross-encoder relevance scorer over `[CLS] q [SEP] d [SEP]`.
#[derive(Debug, Clone, Copy)]
pub struct CrossEncoder<'a> {
    pub config: &'a EncoderConfig,
    pub tokenizer: &'a Tokenizer,
    pub params: &'a ParamStore,
    pub adapters: Option<AdapterStack<'a>>,
}

impl<'a> CrossEncoder<'a> {
    pub fn with_params(self, params: &'a ParamStore) -> Self {
        Self { params, ..self }
    }

    /// Scores one query against several documents. Each score depends only
    /// on its own pair.
    pub fn score_pairs(&self, query: &str, documents: &[&str]) -> Result<Vec<f64>> {
        let q = self.tokenizer.tokenize(query);
        let docs: Vec<Vec<usize>> = documents
            .iter()
            .map(|d| self.tokenizer.tokenize(d))
            .collect();
        self.score_tokens(&q, &docs)
    }

    pub fn score_tokens(&self, query: &[usize], documents: &[Vec<usize>]) -> Result<Vec<f64>> {
        let mut scores = Vec::with_capacity(documents.len());
        for chunk in documents.chunks(SCORE_CHUNK) {
            let tape = Tape::new();
            let bound = self.params.bind(&tape, |_| false)?;
            let stack = self.adapters.map(|a| a.bind(&tape));
            let plugins = stack.as_ref().map(|s| s.plugins());
            for d in chunk {
                let seq = TokenSequence::pair(query, d, self.config.max_seq_len);
                let logit = model::ce_logit(self.config, &bound, &seq, plugins.as_ref())?;
                let s = logit.value().item();
                scores.push(s);
            }
        }
        Ok(scores)
    }

    pub fn score(&self, query: &str, document: &str) -> Result<f64> {
        Ok(self.score_pairs(query, &[document])?[0])
    }
}

/// Bi-encoder: mean-pooled hidden states of the base encoder, no adapters.
#[derive(Debug, Clone, Copy)]
pub struct BiEncoder<'a> {
    pub config: &'a EncoderConfig,
    pub tokenizer: &'a Tokenizer,
    pub params: &'a ParamStore,
}

impl<'a> BiEncoder<'a> {
    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.embed_batch(&[text])?.pop().expect("one embedding"))
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(SCORE_CHUNK) {
            let tape = Tape::new();
            let bound = self.params.bind(&tape, |_| false)?;
            for text in chunk {
                let tokens = self.tokenizer.tokenize(text);
                if tokens.is_empty() {
                    log::warn!("bi-encoder input has no tokens; using a zero embedding");
                    out.push(vec![0.0; self.config.hidden]);
                    continue;
                }
                let seq = TokenSequence::single(&tokens, self.config.max_seq_len);
                out.push(self.embed_sequence(&tape, &bound, &seq)?);
            }
        }
        Ok(out)
    }

    /// Pooled embedding of an already tokenized (possibly padded) sequence.
    pub fn embed_sequence<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        seq: &TokenSequence,
    ) -> Result<Vec<f64>> {
        let hidden = model::encode(self.config, bound, seq, None)?;
        let pooled = model::mean_pool(tape, &hidden, &seq.valid)?;
        let v = pooled.value().data().to_vec();
        Ok(v)
    }
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = crate::tensor::dot(a, a).sqrt();
    let nb = crate::tensor::dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (crate::tensor::dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}
