use std::collections::HashMap;

use rand::Rng;

use super::*;
use crate::testutil::{rng, roughen, tiny_checkpoint};

fn corpus(texts: &[&str]) -> Corpus {
    Corpus::new(
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                id: format!("d{i}"),
                text: t.to_string(),
                lang: "src".into(),
            })
            .collect(),
    )
    .unwrap()
}

fn random_corpus(n: usize, seed: u64) -> Corpus {
    let mut g = rng(seed);
    let texts: Vec<String> = (0..n)
        .map(|_| {
            let len = g.gen_range(1..30);
            (0..len)
                .map(|_| format!("w{}", g.gen_range(0..60)))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    corpus(&texts.iter().map(String::as_str).collect::<Vec<_>>())
}

/// Direct evaluation of the BM25 formula from raw token lists.
fn brute_bm25(corpus: &Corpus, query: &str) -> Vec<f64> {
    let docs: Vec<Vec<String>> = corpus
        .docs()
        .iter()
        .map(|d| d.text.split_whitespace().map(str::to_lowercase).collect())
        .collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let (k1, b) = (0.9, 0.4);
    docs.iter()
        .map(|d| {
            query
                .split_whitespace()
                .map(|t| {
                    let df = docs.iter().filter(|x| x.iter().any(|w| w == t)).count() as f64;
                    let tf = d.iter().filter(|w| *w == t).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
                    idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avgdl))
                })
                .sum()
        })
        .collect()
}

#[test]
fn index_statistics() {
    let idx = InvertedIndex::build(&corpus(&["a b a"])).unwrap();
    assert_eq!(idx.tf("a", 0), 2);
    assert_eq!(idx.tf("b", 0), 1);
    assert_eq!(idx.avgdl, 3.0);

    let idx = InvertedIndex::build(&corpus(&["x y", "x", "z", "x z", "y"])).unwrap();
    assert_eq!(idx.df("x"), 3);
    assert!(InvertedIndex::build(&Corpus::default()).is_err());
}

#[test]
fn index_matches_recount() {
    let c = random_corpus(100, 1);
    let idx = InvertedIndex::build(&c).unwrap();
    let mut counts: HashMap<(String, usize), usize> = HashMap::new();
    for (i, d) in c.docs().iter().enumerate() {
        let words: Vec<&str> = d.text.split_whitespace().collect();
        assert_eq!(idx.doc_len[i], words.len());
        for w in words {
            *counts.entry((w.to_string(), i)).or_default() += 1;
        }
    }
    let mut total = 0;
    for (term, list) in &idx.postings {
        for p in list {
            assert_eq!(counts[&(term.clone(), p.doc)], p.tf);
            total += 1;
        }
        let df = counts.keys().filter(|(t, _)| t == term).count();
        assert_eq!(df, list.len());
    }
    assert_eq!(total, counts.len());
    for i in 0..c.len() {
        let sum: usize = idx
            .postings
            .values()
            .flatten()
            .filter(|p| p.doc == i)
            .map(|p| p.tf)
            .sum();
        assert_eq!(sum, idx.doc_len[i]);
    }
}

#[test]
fn bm25_matches_brute_force() {
    for seed in 0..5 {
        let c = random_corpus(50 + 30 * seed as usize, 10 + seed);
        let idx = InvertedIndex::build(&c).unwrap();
        for q in ["w1 w2 w3", "w5", "w7 w7 w8", "nothing"] {
            let r = bm25_rank("q", q, &idx, Bm25Params::default());
            r.validate().unwrap();
            let oracle = brute_bm25(&c, q);
            for (d, s) in &r.entries {
                let i: usize = d[1..].parse().unwrap();
                assert!(
                    (oracle[i] - s).abs() < 1e-9,
                    "{q} {d}: {s} vs {}",
                    oracle[i]
                );
            }
        }
    }
}

#[test]
fn bm25_edge_cases() {
    let c = corpus(&["apple pie", "banana split", "cherry tart"]);
    let idx = InvertedIndex::build(&c).unwrap();
    let r = bm25_rank("q", "kiwi", &idx, Bm25Params::default());
    assert!(r.entries.iter().all(|(_, s)| *s == 0.0));
    assert_eq!(r.doc_ids().collect::<Vec<_>>(), vec!["d0", "d1", "d2"]);
    let r = bm25_rank("q", "cherry", &idx, Bm25Params::default());
    assert_eq!(r.entries[0].0, "d2");
    assert!(r.entries[0].1 > r.entries[1].1);
    let r = bm25_rank("q", "", &idx, Bm25Params::default());
    assert_eq!(r.len(), 3);
}

fn r0_of(ids: &[&str]) -> Ranking {
    Ranking {
        qid: "q".into(),
        stage: Stage::R0,
        entries: ids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.to_string(), 10.0 - i as f64))
            .collect(),
        reranked: 0,
    }
}

#[test]
fn rerank_properties() {
    let c = corpus(&["zero", "one one", "two two two", "three", "four"]);
    let r0 = r0_of(&["d0", "d1", "d2", "d3", "d4"]);
    let by_len = |_: &str, d: &str| -> crate::Result<f64> { Ok(d.len() as f64) };
    assert!(rerank(&r0, 0, "q", &c, &by_len).is_err());

    let r1 = rerank(&r0, 3, "q", &c, &by_len).unwrap();
    r1.validate().unwrap();
    assert_eq!(
        r1.doc_ids().collect::<Vec<_>>(),
        vec!["d2", "d1", "d0", "d3", "d4"]
    );
    assert_eq!(r1.reranked, 3);

    let whole = rerank(&r0, 50, "q", &c, &by_len).unwrap();
    assert_eq!(whole.reranked, 5);
    let mut ids: Vec<&str> = whole.doc_ids().collect();
    ids.sort();
    assert_eq!(ids, vec!["d0", "d1", "d2", "d3", "d4"]);

    let constant = |_: &str, _: &str| -> crate::Result<f64> { Ok(0.5) };
    let same = rerank(&r0, 4, "q", &c, &constant).unwrap();
    assert_eq!(
        same.doc_ids().collect::<Vec<_>>(),
        r0.doc_ids().collect::<Vec<_>>()
    );

    let failing = |_: &str, d: &str| -> crate::Result<f64> {
        if d == "three" {
            Err(crate::Error::contract("boom"))
        } else {
            Ok(1.0)
        }
    };
    let err = rerank(&r0, 5, "q", &c, &failing).unwrap_err().to_string();
    assert!(err.contains("d3"), "{err}");
}

#[test]
fn ensemble_rules() {
    let r0 = r0_of(&["d1", "d2", "d3", "d4"]);
    let mut r1 = r0_of(&["d2", "d3", "d1", "d4"]);
    r1.stage = Stage::R1;
    r1.reranked = 4;
    let e = ensemble(&r0, &r1).unwrap();
    assert_eq!(
        e.doc_ids().collect::<Vec<_>>(),
        vec!["d2", "d1", "d3", "d4"]
    );
    assert_eq!(
        e.entries.iter().map(|x| x.1).collect::<Vec<_>>(),
        vec![-1.5, -2.0, -2.5, -4.0]
    );

    let mut same = r0.clone();
    same.reranked = 4;
    let e = ensemble(&r0, &same).unwrap();
    assert_eq!(
        e.doc_ids().collect::<Vec<_>>(),
        r0.doc_ids().collect::<Vec<_>>()
    );

    let mut other = r1.clone();
    other.qid = "x".into();
    assert!(ensemble(&r0, &other).is_err());
}

#[test]
fn run_file_round_trip() {
    let c = corpus(&["a", "b", "c"]);
    let idx = InvertedIndex::build(&c).unwrap();
    let runs = vec![
        bm25_rank("q1", "a", &idx, Bm25Params::default()),
        bm25_rank("q2", "c", &idx, Bm25Params::default()),
    ];
    let text = trec::format_run(&runs);
    assert!(text.starts_with("q1 Q0 d0 1 "));
    assert_eq!(trec::parse_run(&text).unwrap(), runs);
    assert!(trec::parse_run("q1 Q0 d0 x 1.0 R0").is_err());
}

#[test]
fn biencoder_ranking() {
    let mut ck = tiny_checkpoint(5);
    roughen(&mut ck, 0.2, 6);
    let c = corpus(&["alpha beta", "gamma delta epsilon", "zeta eta", ""]);
    let be = ck.bi_encoder();
    let index = BiEncoderIndex::build(&c, &be).unwrap();
    let r = biencoder_rank("q", "gamma delta epsilon", &index, &be).unwrap();
    assert_eq!(r.entries[0].0, "d1");
    assert!((r.entries[0].1 - 1.0).abs() < 1e-12);
    assert!(r.entries.iter().all(|(_, s)| (-1.0..=1.0).contains(s)));
    let empty = r.entries.iter().find(|(d, _)| d == "d3").unwrap();
    assert_eq!(empty.1, 0.0);
    for (d, s) in &r.entries {
        let i: usize = d[1..].parse().unwrap();
        let q = be.embed("gamma delta epsilon").unwrap();
        let v = &index.embeddings[i];
        let dot: f64 = q.iter().zip(v).map(|(a, b)| a * b).sum();
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let oracle = if norm(v) == 0.0 {
            0.0
        } else {
            dot / (norm(&q) * norm(v))
        };
        assert!((oracle - s).abs() < 1e-12);
    }
}
