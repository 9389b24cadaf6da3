use std::collections::{BTreeMap, BTreeSet};

use modrank::eval::{average_precision, mean_average_precision, paired_t_test, Qrels};
use modrank::retrieval::trec::{format_run, parse_run};
use modrank::retrieval::{ensemble, rerank, Corpus, Document, Ranking, Stage};
use modrank::sftm::{combine_masks, compose, select_support, MaskRole, SparseMask};
use proptest::prelude::*;

fn sparse(dim: usize, entries: BTreeMap<usize, f64>, role: MaskRole) -> SparseMask {
    SparseMask {
        dim,
        k: entries.len(),
        role,
        tag: "x".into(),
        indices: entries.keys().copied().collect(),
        values: entries.values().copied().collect(),
    }
}

fn mask_strategy(dim: usize, role: MaskRole) -> impl Strategy<Value = SparseMask> {
    prop::collection::btree_map(0..dim, -4.0f64..4.0, 0..dim.min(40))
        .prop_map(move |m| sparse(dim, m, role))
}

fn dense(m: &SparseMask) -> Vec<f64> {
    let mut v = vec![0.0; m.dim];
    for (&i, &x) in m.indices.iter().zip(&m.values) {
        v[i] = x;
    }
    v
}

fn ranking(qid: &str, docs: &[usize]) -> Ranking {
    let n = docs.len();
    Ranking {
        qid: qid.into(),
        stage: Stage::R0,
        entries: docs
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("d{d}"), (n - i) as f64))
            .collect(),
        reranked: 0,
    }
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composition_is_dense_addition(
        theta in prop::collection::vec(-2.0f64..2.0, 60),
        rm in mask_strategy(60, MaskRole::Ranking),
        lm in mask_strategy(60, MaskRole::Language),
        lm2 in mask_strategy(60, MaskRole::Language),
    ) {
        let out = compose(&theta, &rm, &lm).unwrap();
        let (r, l) = (dense(&rm), dense(&lm));
        for i in 0..60 {
            prop_assert_eq!(out[i], (theta[i] + l[i]) + r[i]);
        }
        let both = combine_masks(&lm, &lm2).unwrap();
        let l2 = dense(&lm2);
        let summed = dense(&both);
        for i in 0..60 {
            prop_assert_eq!(summed[i], l[i] + l2[i]);
        }
        prop_assert!(both.indices.windows(2).all(|w| w[0] < w[1]));
        let empty = SparseMask::empty(60, 0, MaskRole::Ranking, "rank");
        let same = compose(&theta, &empty, &SparseMask::empty(60, 0, MaskRole::Language, "x")).unwrap();
        prop_assert!(same.iter().zip(&theta).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn support_holds_the_largest_changes(
        pairs in prop::collection::vec((-1.0f64..1.0, -3i32..4), 1..120),
        k_frac in 0.0f64..1.0,
        elig_seed in any::<u64>(),
    ) {
        let t0: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let t1: Vec<f64> = pairs.iter().map(|p| p.0 + p.1 as f64 * 0.5).collect();
        let eligible: Vec<bool> = (0..t0.len()).map(|i| (elig_seed >> (i % 64)) & 1 == 1 || i % 3 == 0).collect();
        let count = eligible.iter().filter(|&&e| e).count();
        let k = (k_frac * count as f64) as usize;
        let s = select_support(&t0, &t1, k, Some(&eligible)).unwrap();
        prop_assert_eq!(s.len(), k);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&i| eligible[i]));
        let chosen: BTreeSet<usize> = s.iter().copied().collect();
        let delta = |i: usize| (t1[i] - t0[i]).abs();
        let min_in = s.iter().map(|&i| delta(i)).fold(f64::INFINITY, f64::min);
        for i in (0..t0.len()).filter(|i| eligible[*i] && !chosen.contains(i)) {
            prop_assert!(delta(i) <= min_in);
        }
    }

    #[test]
    fn average_precision_is_bounded(
        order in permutation(30),
        rel in prop::collection::btree_set(0usize..40, 1..10),
        cutoff in prop::option::of(1usize..40),
    ) {
        let ids: Vec<String> = order.iter().map(|d| format!("d{d}")).collect();
        let relevant: BTreeSet<String> = rel.iter().map(|d| format!("d{d}")).collect();
        let ap = average_precision(ids.iter().map(String::as_str), &relevant, cutoff).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
        let perfect: Vec<String> = relevant.iter().cloned().collect();
        let best = average_precision(perfect.iter().map(String::as_str), &relevant, None).unwrap();
        prop_assert_eq!(best, 1.0);
    }

    #[test]
    fn map_ignores_query_order(runs in prop::collection::vec(permutation(12), 2..8), shuffle in any::<u64>()) {
        let mut qrels = Qrels::default();
        let mut run = Vec::new();
        for (q, docs) in runs.iter().enumerate() {
            let qid = format!("q{q}");
            qrels.relevant.insert(qid.clone(), [format!("d{}", q % 12), format!("d{}", (q * 5 + 1) % 12)].into());
            run.push(ranking(&qid, docs));
        }
        let a = mean_average_precision(&run, &qrels, None).unwrap();
        let n = run.len();
        run.rotate_left((shuffle as usize) % n);
        run.reverse();
        let b = mean_average_precision(&run, &qrels, None).unwrap();
        prop_assert_eq!(a.map.to_bits(), b.map.to_bits());
    }

    #[test]
    fn t_test_is_antisymmetric(pairs in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..40)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ab = paired_t_test(&a, &b).unwrap();
        let ba = paired_t_test(&b, &a).unwrap();
        prop_assert!((ab.p - ba.p).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p));
        if !ab.degenerate {
            prop_assert!((ab.t + ba.t).abs() < 1e-9 * (1.0 + ab.t.abs()));
        }
    }

    #[test]
    fn rerank_and_ensemble_permute_the_candidates(
        order in permutation(25),
        k in 1usize..30,
        salt in any::<u64>(),
    ) {
        let docs: Vec<Document> = (0..25)
            .map(|i| Document { id: format!("d{i}"), text: format!("w{i} w{}", i % 4), lang: "x".into() })
            .collect();
        let corpus = Corpus::new(docs).unwrap();
        let r0 = ranking("q", &order);
        let scorer = |_: &str, d: &str| -> modrank::Result<f64> {
            Ok(((d.len() as u64).wrapping_mul(salt | 1) % 7) as f64)
        };
        let r1 = rerank(&r0, k, "w1", &corpus, &scorer).unwrap();
        r1.validate().unwrap();
        let depth = k.min(25);
        let top0: BTreeSet<&str> = r0.doc_ids().take(depth).collect();
        let top1: BTreeSet<&str> = r1.doc_ids().take(depth).collect();
        prop_assert_eq!(top0, top1);
        prop_assert!(r1.doc_ids().skip(depth).eq(r0.doc_ids().skip(depth)));
        let ens = ensemble(&r0, &r1).unwrap();
        ens.validate().unwrap();
        let all0: BTreeSet<&str> = r0.doc_ids().collect();
        let all_e: BTreeSet<&str> = ens.doc_ids().collect();
        prop_assert_eq!(all0, all_e);
    }

    #[test]
    fn run_files_round_trip(order in permutation(15), scores in prop::collection::vec(-1e6f64..1e6, 15)) {
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let r = Ranking {
            qid: "q7".into(),
            stage: Stage::R1,
            entries: order.iter().zip(&sorted).map(|(d, s)| (format!("d{d}"), *s)).collect(),
            reranked: 0,
        };
        let back = parse_run(&format_run(std::slice::from_ref(&r))).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0].entries, &r.entries);
        prop_assert_eq!(back[0].stage, Stage::R1);
    }
}
