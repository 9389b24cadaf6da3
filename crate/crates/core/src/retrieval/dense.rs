use super::index::sorted_ranking;
use super::{Corpus, Ranking, Stage};
use crate::encoder::{cosine, BiEncoder};
use crate::error::Result;

/// Precomputed bi-encoder document embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoderIndex {
    pub doc_ids: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl BiEncoderIndex {
    pub fn build(corpus: &Corpus, encoder: &BiEncoder<'_>) -> Result<Self> {
        let texts: Vec<&str> = corpus.docs().iter().map(|d| d.text.as_str()).collect();
        Ok(Self {
            doc_ids: corpus.docs().iter().map(|d| d.id.clone()).collect(),
            embeddings: encoder.embed_batch(&texts)?,
        })
    }
}

/// Ranks every document by cosine similarity to the query embedding (R0).
/// Zero-norm embeddings score 0.
pub fn biencoder_rank(
    qid: &str,
    query: &str,
    index: &BiEncoderIndex,
    encoder: &BiEncoder<'_>,
) -> Result<Ranking> {
    let q = encoder.embed(query)?;
    let scores: Vec<f64> = index.embeddings.iter().map(|d| cosine(&q, d)).collect();
    Ok(sorted_ranking(qid, Stage::R0, &index.doc_ids, &scores))
}
