use std::collections::HashMap;

use super::{Corpus, Ranking, Stage};
use crate::encoder::CrossEncoder;
use crate::error::{Error, Result};

/// Relevance scorer for query/document pairs; higher is more relevant.
pub trait PairScorer {
    fn score_pairs(&self, query: &str, documents: &[&str]) -> Result<Vec<f64>>;
}

impl PairScorer for CrossEncoder<'_> {
    fn score_pairs(&self, query: &str, documents: &[&str]) -> Result<Vec<f64>> {
        CrossEncoder::score_pairs(self, query, documents)
    }
}

impl<F> PairScorer for F
where
    F: Fn(&str, &str) -> Result<f64>,
{
    fn score_pairs(&self, query: &str, documents: &[&str]) -> Result<Vec<f64>> {
        documents.iter().map(|d| self(query, d)).collect()
    }
}

fn pair_error(qid: &str, doc: &str, cause: impl std::fmt::Display) -> Error {
    Error::contract(format!(
        "scoring failed for query {qid}, document {doc}: {cause}"
    ))
}

/// Re-scores the top `k` documents of `r0` and reorders them (R1).
///
/// Ties in the new score keep the preranker order. Documents past `k` keep
/// their R0 order after the block; their scores are shifted so the list stays
/// non-increasing.
pub fn rerank(
    r0: &Ranking,
    k: usize,
    query: &str,
    corpus: &Corpus,
    scorer: &dyn PairScorer,
) -> Result<Ranking> {
    if k == 0 {
        return Err(Error::contract("rerank depth k must be at least 1"));
    }
    let depth = k.min(r0.len());
    let block = &r0.entries[..depth];
    let texts = block
        .iter()
        .map(|(d, _)| {
            corpus.get(d).map(|doc| doc.text.as_str()).ok_or_else(|| {
                Error::contract(format!("query {}: document {d} not in corpus", r0.qid))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = match scorer.score_pairs(query, &texts) {
        Ok(s) => s,
        Err(e) => {
            for (i, t) in texts.iter().enumerate() {
                if let Err(inner) = scorer.score_pairs(query, std::slice::from_ref(t)) {
                    return Err(pair_error(&r0.qid, &block[i].0, inner));
                }
            }
            return Err(Error::contract(format!(
                "scoring failed for query {}: {e}",
                r0.qid
            )));
        }
    };
    if scores.len() != depth {
        return Err(Error::contract(format!(
            "scorer returned {} scores for {depth} documents",
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(pair_error(&r0.qid, &block[i].0, "non-finite score"));
    }
    let mut order: Vec<usize> = (0..depth).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut entries: Vec<(String, f64)> = order
        .iter()
        .map(|&i| (block[i].0.clone(), scores[i]))
        .collect();

    let tail = &r0.entries[depth..];
    if let Some(&(_, tail_max)) = tail.first() {
        let block_min = entries.last().map_or(0.0, |e| e.1);
        let shift = block_min - 1.0 - tail_max;
        entries.extend(tail.iter().map(|(d, s)| (d.clone(), s + shift)));
    }
    Ok(Ranking {
        qid: r0.qid.clone(),
        stage: Stage::R1,
        entries,
        reranked: depth,
    })
}

/// Rank-average ensemble of a preranking and its reranking.
///
/// Inside the reranked block the key is the mean of the two 1-based ranks;
/// outside it the R0 rank. Documents are sorted by ascending key, ties by R0
/// rank, then id. The reported score is the negated key.
pub fn ensemble(r0: &Ranking, r1: &Ranking) -> Result<Ranking> {
    if r0.qid != r1.qid {
        return Err(Error::contract(format!(
            "cannot ensemble rankings of queries {} and {}",
            r0.qid, r1.qid
        )));
    }
    if r0.len() != r1.len() {
        return Err(Error::contract(format!(
            "query {}: R0 has {} documents, R1 has {}",
            r0.qid,
            r0.len(),
            r1.len()
        )));
    }
    let r1_rank: HashMap<&str, usize> = r1.doc_ids().enumerate().map(|(i, d)| (d, i + 1)).collect();
    let block = r1.reranked;
    let mut keyed = Vec::with_capacity(r0.len());
    for (i, (doc, _)) in r0.entries.iter().enumerate() {
        let rank0 = i + 1;
        let key = if rank0 <= block {
            let rank1 = *r1_rank.get(doc.as_str()).ok_or_else(|| {
                Error::contract(format!("query {}: {doc} missing from R1", r0.qid))
            })?;
            (rank0 + rank1) as f64 / 2.0
        } else {
            rank0 as f64
        };
        keyed.push((key, rank0, doc));
    }
    keyed.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(b.2))
    });
    Ok(Ranking {
        qid: r0.qid.clone(),
        stage: Stage::Ens,
        entries: keyed.into_iter().map(|(k, _, d)| (d.clone(), -k)).collect(),
        reranked: block,
    })
}
