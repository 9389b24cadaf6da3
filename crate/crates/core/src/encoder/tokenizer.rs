//! Word-level tokenizer with a corpus-built vocabulary.

use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Lowercases and splits on anything that is not alphanumeric.
///
/// This is the single word segmentation shared by the tokenizer and the
/// lexical index, so term statistics agree with what the encoder sees.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Builds a vocabulary from `texts`, keeping at most `cap` types in total
    /// (special tokens included). Types are ranked by descending frequency,
    /// ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for t in texts {
            for w in words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = cap.saturating_sub(NUM_SPECIAL);
        let vocab = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(keep).map(|(w, _)| w))
            .collect();
        Self::from_vocab(vocab)
    }

    /// Rebuilds a tokenizer from a stored vocabulary list.
    pub fn from_vocab(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { vocab, index }
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        words(text).map(|w| self.id(&w)).collect()
    }
}

/// Encoder input: token ids with segment flags and a validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub valid: Vec<bool>,
}

impl TokenSequence {
    /// `[CLS] tokens [SEP]`, truncated to `max_len`.
    pub fn single(tokens: &[usize], max_len: usize) -> Self {
        let room = max_len.saturating_sub(2);
        if tokens.len() > room {
            log::debug!(
                "truncating single sequence from {} to {} tokens",
                tokens.len(),
                room
            );
        }
        let body = &tokens[..tokens.len().min(room)];
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(body);
        ids.push(SEP);
        let n = ids.len();
        Self {
            ids,
            segments: vec![0; n],
            valid: vec![true; n],
        }
    }

    /// `[CLS] query [SEP] document [SEP]`. Document tokens are dropped first
    /// when the pair exceeds `max_len`; the query is cut only if it cannot fit
    /// on its own.
    pub fn pair(query: &[usize], document: &[usize], max_len: usize) -> Self {
        let room = max_len.saturating_sub(3);
        let q_len = query.len().min(room);
        let d_len = document.len().min(room - q_len);
        if q_len < query.len() || d_len < document.len() {
            log::debug!(
                "truncating pair ({} + {} tokens) to ({} + {})",
                query.len(),
                document.len(),
                q_len,
                d_len
            );
        }
        let mut ids = Vec::with_capacity(q_len + d_len + 3);
        ids.push(CLS);
        ids.extend_from_slice(&query[..q_len]);
        ids.push(SEP);
        let first_doc = ids.len();
        ids.extend_from_slice(&document[..d_len]);
        ids.push(SEP);
        let n = ids.len();
        let segments = (0..n).map(|i| usize::from(i >= first_doc)).collect();
        Self {
            ids,
            segments,
            valid: vec![true; n],
        }
    }

    /// Appends `[PAD]` positions (masked out) up to `len`.
    pub fn padded(mut self, len: usize) -> Self {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.segments.push(0);
            self.valid.push(false);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn has_padding(&self) -> bool {
        self.valid.iter().any(|&v| !v)
    }

    /// Index of the first `[SEP]`.
    pub fn first_sep(&self) -> Option<usize> {
        self.ids.iter().position(|&t| t == SEP)
    }
}
