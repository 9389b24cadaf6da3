//! Synthetic bilingual retrieval benchmark.
//!
//! Documents are drawn from a term-cluster generator: each document has a
//! primary topic, a secondary (confounding) topic and background words.
//! Queries sample words of one topic; a document is relevant when its
//! primary topic is the query topic. The target language is the source
//! passed through a word-level cipher onto a disjoint vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use anyhow::{bail, Context, Result};
use modrank::artifact::write_atomic;
use modrank::eval::Qrels;
use modrank::retrieval::{format_queries, parse_queries, Corpus, Document, Query};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SOURCE: &str = "src";
pub const TARGET: &str = "tgt";

const SOURCE_ONSETS: &str = "bdfgklmnprstv";
const TARGET_ONSETS: &str = "cjqwxyzh";
const VOWELS: &str = "aeiou";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub docs: usize,
    pub train_queries: usize,
    pub val_queries: usize,
    pub test_queries: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    pub background_words: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    /// Share of document tokens drawn from the primary topic.
    pub primary_share: f64,
    /// Share drawn from the secondary topic; the rest is background.
    pub secondary_share: f64,
    /// Monolingual MLM documents generated per language.
    pub mlm_docs: usize,
}

impl SynthConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            docs: 1000,
            train_queries: 400,
            val_queries: 30,
            test_queries: 60,
            topics: 25,
            words_per_topic: 12,
            background_words: 60,
            min_doc_len: 20,
            max_doc_len: 36,
            primary_share: 0.45,
            secondary_share: 0.25,
            mlm_docs: 3000,
        }
    }

    /// A quick benchmark for smoke runs and reproducibility checks.
    pub fn small(seed: u64) -> Self {
        Self {
            docs: 200,
            train_queries: 80,
            val_queries: 10,
            test_queries: 30,
            topics: 10,
            words_per_topic: 8,
            background_words: 30,
            min_doc_len: 12,
            max_doc_len: 24,
            mlm_docs: 400,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let queries = self.train_queries + self.val_queries + self.test_queries;
        if self.docs < 100 || queries < 20 {
            bail!(
                "benchmark too small: {} docs and {queries} queries (need at least 100 and 20)",
                self.docs
            );
        }
        if self.test_queries == 0 || self.train_queries == 0 {
            bail!("train and test query splits must be non-empty");
        }
        if self.topics < 2 || self.words_per_topic < 2 || self.background_words == 0 {
            bail!("need at least 2 topics of 2 words and some background words");
        }
        if self.min_doc_len == 0 || self.min_doc_len > self.max_doc_len {
            bail!("invalid document length range");
        }
        let shares = self.primary_share + self.secondary_share;
        if !(0.0..=1.0).contains(&shares) || self.primary_share <= 0.0 || self.secondary_share < 0.0
        {
            bail!("topic shares must be non-negative and sum to at most 1");
        }
        Ok(())
    }
}

/// Word-level bijection between the source and target vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cipher {
    forward: BTreeMap<String, String>,
    inverse: BTreeMap<String, String>,
}

impl Cipher {
    pub fn new(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut forward = BTreeMap::new();
        let mut inverse = BTreeMap::new();
        for (s, t) in pairs {
            if forward.insert(s.clone(), t.clone()).is_some()
                || inverse.insert(t.clone(), s.clone()).is_some()
            {
                bail!("cipher is not a bijection at {s} -> {t}");
            }
        }
        if forward.keys().any(|w| inverse.contains_key(w)) {
            bail!("cipher vocabularies overlap");
        }
        Ok(Self { forward, inverse })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    fn map(table: &BTreeMap<String, String>, text: &str) -> Result<String> {
        text.split(' ')
            .map(|w| {
                table
                    .get(w)
                    .cloned()
                    .with_context(|| format!("word {w:?} is outside the cipher vocabulary"))
            })
            .collect::<Result<Vec<_>>>()
            .map(|ws| ws.join(" "))
    }

    pub fn encode(&self, text: &str) -> Result<String> {
        Self::map(&self.forward, text)
    }

    pub fn decode(&self, text: &str) -> Result<String> {
        Self::map(&self.inverse, text)
    }

    pub fn to_tsv(&self) -> String {
        self.forward
            .iter()
            .map(|(s, t)| format!("{s}\t{t}\n"))
            .collect()
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let pairs = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                let (s, t) = l.split_once('\t').context("cipher line without a tab")?;
                Ok((s.to_string(), t.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(pairs)
    }
}

/// Corpus, query splits and judgments for one language.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageSide {
    pub tag: String,
    pub corpus: Corpus,
    pub train: Vec<Query>,
    pub val: Vec<Query>,
    pub test: Vec<Query>,
    pub qrels: Qrels,
    /// Monolingual text for masked language modeling, one document per line.
    pub mlm: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub config: SynthConfig,
    pub cipher: Cipher,
    /// Source-language words of each topic.
    pub topics: Vec<Vec<String>>,
    pub source: LanguageSide,
    pub target: LanguageSide,
}

fn make_words(onsets: &str, count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let syllables: Vec<String> = onsets
        .chars()
        .flat_map(|c| VOWELS.chars().map(move |v| format!("{c}{v}")))
        .collect();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.gen_range(2..=3);
        let w: String = (0..n)
            .map(|_| syllables[rng.gen_range(0..syllables.len())].as_str())
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Zipf-like weights `1/(rank+1)^0.7`, cumulative.
fn cumulative_weights(n: usize) -> Vec<f64> {
    let mut acc = 0.0;
    (0..n)
        .map(|i| {
            acc += 1.0 / ((i + 1) as f64).powf(0.7);
            acc
        })
        .collect()
}

fn draw(cumulative: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let x = rng.gen::<f64>() * cumulative.last().expect("non-empty weights");
    cumulative
        .partition_point(|&c| c <= x)
        .min(cumulative.len() - 1)
}

struct Generator<'a> {
    config: &'a SynthConfig,
    topics: Vec<Vec<String>>,
    background: Vec<String>,
    topic_weights: Vec<f64>,
    background_weights: Vec<f64>,
}

impl Generator<'_> {
    fn document(&self, primary: usize, rng: &mut ChaCha8Rng) -> String {
        let c = self.config;
        let secondary = loop {
            let s = rng.gen_range(0..c.topics);
            if s != primary {
                break s;
            }
        };
        let len = rng.gen_range(c.min_doc_len..=c.max_doc_len);
        (0..len)
            .map(|_| {
                let u: f64 = rng.gen();
                if u < c.primary_share {
                    self.topics[primary][draw(&self.topic_weights, rng)].as_str()
                } else if u < c.primary_share + c.secondary_share {
                    self.topics[secondary][draw(&self.topic_weights, rng)].as_str()
                } else {
                    self.background[draw(&self.background_weights, rng)].as_str()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn query(&self, topic: usize, rng: &mut ChaCha8Rng) -> String {
        let n = rng.gen_range(2..=3);
        let words: Vec<&str> = self.topics[topic]
            .choose_multiple(rng, n)
            .map(String::as_str)
            .collect();
        words.join(" ")
    }
}

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

pub fn generate(config: &SynthConfig) -> Result<SyntheticBenchmark> {
    config.validate()?;
    let mut vocab_rng = stream(config.seed, 1);
    let total = config.topics * config.words_per_topic + config.background_words;
    let source_words = make_words(SOURCE_ONSETS, total, &mut vocab_rng);
    let mut target_words = make_words(TARGET_ONSETS, total, &mut vocab_rng);
    target_words.shuffle(&mut vocab_rng);
    let cipher = Cipher::new(source_words.iter().cloned().zip(target_words))?;

    let gen = Generator {
        config,
        topics: source_words[..config.topics * config.words_per_topic]
            .chunks(config.words_per_topic)
            .map(<[String]>::to_vec)
            .collect(),
        background: source_words[config.topics * config.words_per_topic..].to_vec(),
        topic_weights: cumulative_weights(config.words_per_topic),
        background_weights: cumulative_weights(config.background_words),
    };

    let mut doc_rng = stream(config.seed, 2);
    let mut by_topic: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); config.topics];
    let mut texts = Vec::with_capacity(config.docs);
    for i in 0..config.docs {
        // Every topic gets documents before topics repeat at random.
        let topic = if i < config.topics {
            i
        } else {
            doc_rng.gen_range(0..config.topics)
        };
        by_topic[topic].insert(i);
        texts.push(gen.document(topic, &mut doc_rng));
    }
    let mut order: Vec<usize> = (0..config.docs).collect();
    order.shuffle(&mut doc_rng);
    let mut position = vec![0; config.docs];
    for (new, &old) in order.iter().enumerate() {
        position[old] = new;
    }

    let mut query_rng = stream(config.seed, 3);
    let n_queries = config.train_queries + config.val_queries + config.test_queries;
    let queries: Vec<(usize, String)> = (0..n_queries)
        .map(|_| {
            let t = query_rng.gen_range(0..config.topics);
            (t, gen.query(t, &mut query_rng))
        })
        .collect();

    let mut mlm_src_rng = stream(config.seed, 4);
    let mlm_src: Vec<String> = (0..config.mlm_docs)
        .map(|_| {
            let t = mlm_src_rng.gen_range(0..config.topics);
            gen.document(t, &mut mlm_src_rng)
        })
        .collect();
    let mut mlm_tgt_rng = stream(config.seed, 5);
    let mlm_tgt: Vec<String> = (0..config.mlm_docs)
        .map(|_| {
            let t = mlm_tgt_rng.gen_range(0..config.topics);
            cipher.encode(&gen.document(t, &mut mlm_tgt_rng))
        })
        .collect::<Result<_>>()?;

    let side = |tag: &str,
                encode: &dyn Fn(&str) -> Result<String>,
                mlm: Vec<String>|
     -> Result<LanguageSide> {
        let doc_id = |i: usize| format!("{tag}-{:04}", position[i]);
        let mut docs = vec![None; config.docs];
        for (i, t) in texts.iter().enumerate() {
            docs[position[i]] = Some(Document {
                id: doc_id(i),
                text: encode(t)?,
                lang: tag.to_string(),
            });
        }
        let corpus = Corpus::new(
            docs.into_iter()
                .map(|d| d.expect("every slot filled"))
                .collect(),
        )?;
        let mut qrels = Qrels::default();
        let mut all = Vec::with_capacity(n_queries);
        for (n, (topic, text)) in queries.iter().enumerate() {
            let qid = format!("{tag}-q{n:03}");
            qrels.relevant.insert(
                qid.clone(),
                by_topic[*topic].iter().map(|&i| doc_id(i)).collect(),
            );
            all.push(Query {
                id: qid,
                text: encode(text)?,
            });
        }
        let test = all.split_off(config.train_queries + config.val_queries);
        let val = all.split_off(config.train_queries);
        Ok(LanguageSide {
            tag: tag.to_string(),
            corpus,
            train: all,
            val,
            test,
            qrels,
            mlm,
        })
    };
    let source = side(SOURCE, &|t| Ok(t.to_string()), mlm_src)?;
    let target = side(TARGET, &|t| cipher.encode(t), mlm_tgt)?;
    Ok(SyntheticBenchmark {
        config: *config,
        cipher,
        topics: gen.topics.clone(),
        source,
        target,
    })
}

/// File names of one language side inside a benchmark directory.
pub struct SidePaths {
    pub corpus: std::path::PathBuf,
    pub train: std::path::PathBuf,
    pub val: std::path::PathBuf,
    pub test: std::path::PathBuf,
    pub qrels: std::path::PathBuf,
    pub mlm: std::path::PathBuf,
}

pub fn side_paths(dir: &Path, tag: &str) -> SidePaths {
    SidePaths {
        corpus: dir.join(format!("corpus-{tag}.jsonl")),
        train: dir.join(format!("queries-train-{tag}.tsv")),
        val: dir.join(format!("queries-val-{tag}.tsv")),
        test: dir.join(format!("queries-test-{tag}.tsv")),
        qrels: qrels_path(dir, tag, tag),
        mlm: dir.join(format!("mlm-{tag}.txt")),
    }
}

/// Judgments for queries in language `query` against the corpus in `document`.
pub fn qrels_path(dir: &Path, query: &str, document: &str) -> std::path::PathBuf {
    if query == document {
        dir.join(format!("qrels-{query}.txt"))
    } else {
        dir.join(format!("qrels-{query}-{document}.txt"))
    }
}

/// Rewrites judgments onto the parallel corpus of another language: query
/// ids keep their language, document `{from}-N` becomes `{to}-N`.
pub fn cross_qrels(qrels: &Qrels, from: &str, to: &str) -> Qrels {
    let prefix = format!("{from}-");
    let mut out = Qrels::default();
    for (qid, docs) in &qrels.relevant {
        let mapped = docs
            .iter()
            .map(|d| match d.strip_prefix(&prefix) {
                Some(rest) => format!("{to}-{rest}"),
                None => d.clone(),
            })
            .collect();
        out.relevant.insert(qid.clone(), mapped);
    }
    out
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

fn read_queries(path: &Path) -> Result<Vec<Query>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_queries(&text).with_context(|| format!("parsing {}", path.display()))
}

impl LanguageSide {
    /// Reads one language of a benchmark directory.
    pub fn load(dir: &Path, tag: &str) -> Result<Self> {
        let p = side_paths(dir, tag);
        Ok(Self {
            tag: tag.to_string(),
            corpus: Corpus::load(&p.corpus)
                .with_context(|| format!("reading {}", p.corpus.display()))?,
            train: read_queries(&p.train)?,
            val: read_queries(&p.val)?,
            test: read_queries(&p.test)?,
            qrels: Qrels::load(&p.qrels)
                .with_context(|| format!("reading {}", p.qrels.display()))?,
            mlm: read_lines(&p.mlm)?,
        })
    }
}

/// Reads the cipher written next to a benchmark.
pub fn load_cipher(dir: &Path) -> Result<Cipher> {
    let path = dir.join("cipher.tsv");
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Cipher::parse_tsv(&text)
}

impl SyntheticBenchmark {
    /// Writes every file of the benchmark under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for side in [&self.source, &self.target] {
            let p = side_paths(dir, &side.tag);
            write_atomic(&p.corpus, side.corpus.to_jsonl().as_bytes())?;
            write_atomic(&p.train, format_queries(&side.train).as_bytes())?;
            write_atomic(&p.val, format_queries(&side.val).as_bytes())?;
            write_atomic(&p.test, format_queries(&side.test).as_bytes())?;
            write_atomic(&p.qrels, side.qrels.format().as_bytes())?;
            let mlm: String = side.mlm.iter().map(|l| format!("{l}\n")).collect();
            write_atomic(&p.mlm, mlm.as_bytes())?;
        }
        for (q, d) in [(&self.source, &self.target), (&self.target, &self.source)] {
            let qrels = cross_qrels(&q.qrels, &q.tag, &d.tag);
            write_atomic(&qrels_path(dir, &q.tag, &d.tag), qrels.format().as_bytes())?;
        }
        write_atomic(&dir.join("cipher.tsv"), self.cipher.to_tsv().as_bytes())?;
        let manifest = serde_json::to_string_pretty(&self.config)? + "\n";
        write_atomic(&dir.join("synth.json"), manifest.as_bytes())?;
        Ok(())
    }
}
