use std::collections::BTreeSet;

use rand::Rng;

use crate::encoder::tokenizer::{CLS, MASK, NUM_SPECIAL, PAD, SEP};
use crate::encoder::{TokenSequence, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::retrieval::{bm25_rank, Bm25Params, Corpus, InvertedIndex, Query};

pub const MASK_RATE: f64 = 0.15;

/// Unlabeled token streams for masked language modeling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmData {
    pub sequences: Vec<Vec<usize>>,
}

impl MlmData {
    /// Tokenizes `texts`, cutting long ones into windows that fit
    /// `[CLS] … [SEP]` within `max_len`. Empty texts are skipped.
    pub fn from_texts<'a>(
        tokenizer: &Tokenizer,
        texts: impl IntoIterator<Item = &'a str>,
        max_len: usize,
    ) -> Result<Self> {
        let room = max_len.saturating_sub(2);
        if room == 0 {
            return Err(Error::contract("max_len leaves no room for MLM tokens"));
        }
        let sequences: Vec<Vec<usize>> = texts
            .into_iter()
            .flat_map(|t| {
                let ids = tokenizer.tokenize(t);
                ids.chunks(room).map(<[usize]>::to_vec).collect::<Vec<_>>()
            })
            .collect();
        if sequences.is_empty() {
            return Err(Error::contract("MLM corpus is empty"));
        }
        Ok(Self { sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// A sequence with some positions corrupted, and the original ids there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub seq: TokenSequence,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Selects each maskable position with probability `rate` (at least one is
/// always chosen); a chosen token becomes `[MASK]` 80% of the time, a random
/// ordinary token 10% and stays unchanged 10%.
pub fn mask_tokens<R: Rng + ?Sized>(
    seq: &TokenSequence,
    vocab_size: usize,
    rate: f64,
    rng: &mut R,
) -> Result<MaskedExample> {
    let candidates: Vec<usize> = (0..seq.len())
        .filter(|&i| seq.valid[i] && ![CLS, SEP, PAD].contains(&seq.ids[i]))
        .collect();
    if candidates.is_empty() {
        return Err(Error::contract("sequence has no maskable tokens"));
    }
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::contract("vocabulary has no ordinary tokens"));
    }
    let mut positions: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() < rate)
        .collect();
    if positions.is_empty() {
        positions.push(candidates[rng.gen_range(0..candidates.len())]);
    }
    let mut out = seq.clone();
    let targets = positions.iter().map(|&p| seq.ids[p]).collect();
    for &p in &positions {
        let r: f64 = rng.gen();
        if r < 0.8 {
            out.ids[p] = MASK;
        } else if r < 0.9 {
            out.ids[p] = rng.gen_range(NUM_SPECIAL..vocab_size);
        }
    }
    Ok(MaskedExample {
        seq: out,
        positions,
        targets,
    })
}

/// A fixed masked sample for measuring MLM loss and accuracy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmEval {
    pub examples: Vec<MaskedExample>,
}

impl MlmEval {
    pub fn new<R: Rng + ?Sized>(
        data: &MlmData,
        vocab_size: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let examples = data
            .sequences
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| {
                mask_tokens(
                    &TokenSequence::single(s, max_len),
                    vocab_size,
                    MASK_RATE,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        if examples.is_empty() {
            return Err(Error::contract("MLM evaluation set is empty"));
        }
        Ok(Self { examples })
    }

    pub fn num_targets(&self) -> usize {
        self.examples.iter().map(|e| e.targets.len()).sum()
    }
}

/// `(query, document, label)` with indices into [`RankingData`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingExample {
    pub query: usize,
    pub doc: usize,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingQuery {
    pub qid: String,
    pub tokens: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Tokenized training queries with relevant documents and BM25 negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingData {
    /// Tokenized corpus, indexed like the corpus.
    pub docs: Vec<Vec<usize>>,
    pub queries: Vec<RankingQuery>,
}

pub fn tokenize_corpus(tokenizer: &Tokenizer, corpus: &Corpus) -> Vec<Vec<usize>> {
    corpus
        .docs()
        .iter()
        .map(|d| tokenizer.tokenize(&d.text))
        .collect()
}

fn doc_indices(corpus: &Corpus, ids: impl IntoIterator<Item = impl AsRef<str>>) -> Vec<usize> {
    ids.into_iter()
        .filter_map(|id| corpus.index_of(id.as_ref()))
        .collect()
}

impl RankingData {
    /// Positives are the judged-relevant documents; negatives are the
    /// non-relevant documents among the BM25 top `depth`.
    pub fn from_bm25(
        tokenizer: &Tokenizer,
        corpus: &Corpus,
        index: &InvertedIndex,
        queries: &[Query],
        qrels: &Qrels,
        depth: usize,
    ) -> Result<Self> {
        let mut out = Vec::with_capacity(queries.len());
        for q in queries {
            let relevant = qrels.get(&q.id).cloned().unwrap_or_default();
            let positives = doc_indices(corpus, &relevant);
            let r0 = bm25_rank(&q.id, &q.text, index, Bm25Params::default());
            let negatives = doc_indices(
                corpus,
                r0.doc_ids().take(depth).filter(|d| !relevant.contains(*d)),
            );
            out.push(RankingQuery {
                qid: q.id.clone(),
                tokens: tokenizer.tokenize(&q.text),
                positives,
                negatives,
            });
        }
        let data = Self {
            docs: tokenize_corpus(tokenizer, corpus),
            queries: out,
        };
        data.check()?;
        Ok(data)
    }

    fn usable(&self) -> Vec<usize> {
        self.queries
            .iter()
            .enumerate()
            .filter(|(_, q)| !q.positives.is_empty() && !q.negatives.is_empty())
            .map(|(i, _)| i)
            .collect()
    }

    /// Training needs at least one query with both a positive and a negative.
    pub fn check(&self) -> Result<()> {
        let has_pos = self.queries.iter().any(|q| !q.positives.is_empty());
        let has_neg = self.queries.iter().any(|q| !q.negatives.is_empty());
        if !has_pos || !has_neg {
            return Err(Error::contract(
                "ranking data must contain both relevant and non-relevant examples",
            ));
        }
        if self.usable().is_empty() {
            return Err(Error::contract(
                "no query has both a relevant and a non-relevant document",
            ));
        }
        let n = self.docs.len();
        for q in &self.queries {
            if q.positives.iter().chain(&q.negatives).any(|&d| d >= n) {
                return Err(Error::contract(format!(
                    "query {} references a missing document",
                    q.qid
                )));
            }
        }
        Ok(())
    }

    /// `ceil(batch/2)` positive/negative pairs; each pair draws a query, one
    /// of its positives and one of its negatives uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<RankingExample> {
        let usable = self.usable();
        let mut out = Vec::with_capacity(batch_size + 1);
        for _ in 0..batch_size.div_ceil(2) {
            let qi = usable[rng.gen_range(0..usable.len())];
            let q = &self.queries[qi];
            let pos = q.positives[rng.gen_range(0..q.positives.len())];
            let neg = q.negatives[rng.gen_range(0..q.negatives.len())];
            out.push(RankingExample {
                query: qi,
                doc: pos,
                label: 1.0,
            });
            out.push(RankingExample {
                query: qi,
                doc: neg,
                label: 0.0,
            });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationQuery {
    pub qid: String,
    pub tokens: Vec<usize>,
    /// Candidate documents in preranking order.
    pub candidates: Vec<usize>,
    pub relevant: BTreeSet<usize>,
}

/// Queries with candidate lists for validation MAP of a reranker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationSet {
    pub docs: Vec<Vec<usize>>,
    pub queries: Vec<ValidationQuery>,
}

impl ValidationSet {
    /// Candidates are the BM25 top `depth`; queries without a relevant
    /// document in the corpus are left out.
    pub fn from_bm25(
        tokenizer: &Tokenizer,
        corpus: &Corpus,
        index: &InvertedIndex,
        queries: &[Query],
        qrels: &Qrels,
        depth: usize,
    ) -> Result<Self> {
        let mut out = Vec::new();
        for q in queries {
            let Some(rel) = qrels.get(&q.id) else {
                continue;
            };
            let relevant: BTreeSet<usize> = doc_indices(corpus, rel).into_iter().collect();
            if relevant.is_empty() {
                continue;
            }
            let r0 = bm25_rank(&q.id, &q.text, index, Bm25Params::default());
            out.push(ValidationQuery {
                qid: q.id.clone(),
                tokens: tokenizer.tokenize(&q.text),
                candidates: doc_indices(corpus, r0.doc_ids().take(depth)),
                relevant,
            });
        }
        if out.is_empty() {
            return Err(Error::contract(
                "validation set has no query with a relevant document",
            ));
        }
        Ok(Self {
            docs: tokenize_corpus(tokenizer, corpus),
            queries: out,
        })
    }
}
