//! Multi-stage retrieval: BM25 and bi-encoder preranking (R0),
//! cross-encoder reranking of the top-k (R1) and rank-average ensembling.

mod dense;
mod index;
mod rerank;
pub mod trec;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dense::{biencoder_rank, BiEncoderIndex};
pub use index::{bm25_rank, Bm25Params, InvertedIndex, Posting};
pub use rerank::{ensemble, rerank, PairScorer};

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub lang: String,
}

/// Document collection with unique ids, kept in file order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    position: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut position = HashMap::with_capacity(docs.len());
        for (i, d) in docs.iter().enumerate() {
            if position.insert(d.id.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate document id {}", d.id)));
            }
        }
        Ok(Self { docs, position })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.position.get(id).map(|&i| &self.docs[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.position.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Parses line-delimited JSON records `{"id", "text", "lang"}`.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let docs = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::format("corpus", format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<Document>>>()?;
        Self::new(docs)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.docs {
            out.push_str(&serde_json::to_string(d).expect("document serializes"));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub text: String,
}

/// Parses `qid<TAB>text` lines.
pub fn parse_queries(text: &str) -> Result<Vec<Query>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (id, text) = l.split_once('\t').ok_or_else(|| {
                Error::format("queries", format!("line {}: expected qid<TAB>text", i + 1))
            })?;
            Ok(Query {
                id: id.trim().to_string(),
                text: text.to_string(),
            })
        })
        .collect()
}

pub fn format_queries(queries: &[Query]) -> String {
    queries
        .iter()
        .map(|q| format!("{}\t{}\n", q.id, q.text))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    R0,
    R1,
    Ens,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::R0 => "R0",
            Stage::R1 => "R1",
            Stage::Ens => "ENS",
        })
    }
}

/// Ordered `(doc id, score)` list for one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub qid: String,
    pub stage: Stage,
    pub entries: Vec<(String, f64)>,
    /// Number of leading entries re-scored by the cross-encoder (R1 only).
    pub reranked: usize,
}

impl Ranking {
    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(d, _)| d.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks the ordering and uniqueness invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for (i, (d, s)) in self.entries.iter().enumerate() {
            if !seen.insert(d.as_str()) {
                return Err(Error::contract(format!(
                    "query {}: duplicate doc {d}",
                    self.qid
                )));
            }
            if i > 0 && self.entries[i - 1].1 < *s {
                return Err(Error::contract(format!(
                    "query {}: scores increase at rank {}",
                    self.qid,
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
