use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Ranking, Stage};
use crate::artifact;
use crate::encoder::tokenizer::words;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    /// Position of the document in the corpus.
    pub doc: usize,
    pub tf: usize,
}

/// Term statistics over a corpus. Terms are the tokenizer's lowercase
/// words, independent of any model vocabulary cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub doc_ids: Vec<String>,
    pub doc_len: Vec<usize>,
    #[serde(skip)]
    pub avgdl: f64,
}

/// Okapi BM25 constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

impl InvertedIndex {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::contract("cannot index an empty corpus"));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(corpus.len());
        for (i, d) in corpus.docs().iter().enumerate() {
            let mut tf: HashMap<String, usize> = HashMap::new();
            let mut len = 0;
            for w in words(&d.text) {
                *tf.entry(w).or_default() += 1;
                len += 1;
            }
            doc_len.push(len);
            for (term, count) in tf {
                postings
                    .entry(term)
                    .or_default()
                    .push(Posting { doc: i, tf: count });
            }
        }
        let mut index = Self {
            postings,
            doc_ids: corpus.docs().iter().map(|d| d.id.clone()).collect(),
            doc_len,
            avgdl: 0.0,
        };
        index.avgdl = index.mean_doc_len();
        Ok(index)
    }

    fn mean_doc_len(&self) -> f64 {
        self.doc_len.iter().sum::<usize>() as f64 / self.doc_len.len().max(1) as f64
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn tf(&self, term: &str, doc: usize) -> usize {
        self.postings
            .get(term)
            .and_then(|p| p.iter().find(|x| x.doc == doc))
            .map_or(0, |x| x.tf)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.df(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 score of every document, indexed by corpus position.
    pub fn bm25_scores(&self, query: &str, params: Bm25Params) -> Vec<f64> {
        let mut scores = vec![0.0; self.num_docs()];
        let avgdl = if self.avgdl > 0.0 { self.avgdl } else { 1.0 };
        for term in words(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for p in list {
                let tf = p.tf as f64;
                let norm =
                    params.k1 * (1.0 - params.b + params.b * self.doc_len[p.doc] as f64 / avgdl);
                scores[p.doc] += idf * tf * (params.k1 + 1.0) / (tf + norm);
            }
        }
        scores
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut index: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if index.doc_len.len() != index.doc_ids.len() {
            return Err(Error::format("index", "document tables differ in length"));
        }
        index.avgdl = index.mean_doc_len();
        Ok(index)
    }
}

/// Orders documents by descending score, ties by ascending doc id.
pub(crate) fn sorted_ranking(
    qid: &str,
    stage: Stage,
    doc_ids: &[String],
    scores: &[f64],
) -> Ranking {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| doc_ids[a].cmp(&doc_ids[b]))
    });
    Ranking {
        qid: qid.to_string(),
        stage,
        entries: order
            .into_iter()
            .map(|i| (doc_ids[i].clone(), scores[i]))
            .collect(),
        reranked: 0,
    }
}

/// Scores every document with BM25 (R0). Documents without any query term
/// score zero and follow in ascending id order.
pub fn bm25_rank(qid: &str, query: &str, index: &InvertedIndex, params: Bm25Params) -> Ranking {
    if words(query).next().is_none() {
        log::warn!("query {qid} has no terms; every document scores zero");
    }
    let scores = index.bm25_scores(query, params);
    sorted_ranking(qid, Stage::R0, &index.doc_ids, &scores)
}
