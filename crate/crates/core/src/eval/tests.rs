use rand::seq::SliceRandom;

use super::*;
use crate::retrieval::Stage;
use crate::testutil::rng;

fn rel(ids: &[&str]) -> BTreeSet<String> {
    ids.iter().map(|s| s.to_string()).collect()
}

fn ranking(qid: &str, ids: &[&str]) -> Ranking {
    Ranking {
        qid: qid.into(),
        stage: Stage::R0,
        entries: ids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.to_string(), -(i as f64)))
            .collect(),
        reranked: 0,
    }
}

#[test]
fn average_precision_cases() {
    let r = rel(&["a", "c"]);
    assert_eq!(
        average_precision(["a", "b", "c"], &r, None).unwrap(),
        5.0 / 6.0
    );
    assert_eq!(average_precision(["a", "c", "b"], &r, None).unwrap(), 1.0);
    assert_eq!(
        average_precision(["b", "a", "c"], &r, Some(1)).unwrap(),
        0.0
    );
    assert_eq!(average_precision(["a", "b"], &r, None).unwrap(), 0.5);
    assert!(average_precision(["a"], &BTreeSet::new(), None).is_err());
}

#[test]
fn map_cases() {
    let qrels = Qrels::parse("q1 0 a 1\nq1 0 x 0\nq2 0 b 1\nq3 0 z 0\n").unwrap();
    let run = vec![
        ranking("q1", &["x", "y", "z", "a", "b"]),
        ranking("q2", &["b", "y"]),
        ranking("q3", &["z"]),
    ];
    let rep = mean_average_precision(&run, &qrels, None).unwrap();
    assert_eq!(rep.per_query.len(), 2);
    assert_eq!(rep.map, (0.25 + 1.0) / 2.0);
    let single = mean_average_precision(&run[1..2], &qrels, None).unwrap();
    assert_eq!(single.map, 1.0);
    assert!(mean_average_precision(&run[2..], &qrels, None).is_err());

    let mut reversed = run.clone();
    reversed.reverse();
    assert_eq!(
        mean_average_precision(&reversed, &qrels, None).unwrap().map,
        rep.map
    );
    assert_eq!(
        Qrels::parse(&qrels.format()).unwrap().relevant["q1"],
        rel(&["a"])
    );
}

#[test]
fn random_rankings_match_analytic_expectation() {
    let (n, r, queries) = (200usize, 10usize, 400usize);
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let expected = (h + (r as f64 - 1.0) / (n as f64 - 1.0) * (n as f64 - h)) / n as f64;
    let docs: Vec<String> = (0..n).map(|i| format!("d{i}")).collect();
    let relevant: BTreeSet<String> = docs[..r].iter().cloned().collect();
    let mut g = rng(3);
    let aps: Vec<f64> = (0..queries)
        .map(|_| {
            let mut perm: Vec<&str> = docs.iter().map(String::as_str).collect();
            perm.shuffle(&mut g);
            average_precision(perm, &relevant, None).unwrap()
        })
        .collect();
    let mean = aps.iter().sum::<f64>() / queries as f64;
    let sd = (aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (queries - 1) as f64).sqrt();
    assert!(
        (mean - expected).abs() < 3.0 * sd / (queries as f64).sqrt(),
        "{mean} vs {expected}"
    );
}

#[test]
fn t_test_fixture_and_symmetry() {
    // Reference values from an independent statistics library (paired t-test).
    let a = [0.61, 0.42, 0.77, 0.35, 0.58, 0.49, 0.66, 0.52, 0.71, 0.44];
    let b = [0.55, 0.40, 0.69, 0.37, 0.51, 0.45, 0.60, 0.50, 0.62, 0.43];
    let t = paired_t_test(&a, &b).unwrap();
    assert!((t.t - 3.887729596678983).abs() < 1e-6);
    assert!((t.p - 0.0036876920780490575).abs() < 1e-6);
    assert_eq!(t.df, 9);
    let s = paired_t_test(&b, &a).unwrap();
    assert_eq!(s.t, -t.t);
    assert_eq!(s.p, t.p);

    let small = paired_t_test(&[0.2, 0.5, 0.9], &[0.3, 0.1, 0.4]).unwrap();
    assert!((small.t - 1.4368424162141993).abs() < 1e-6);
    assert!((small.p - 0.28730335490020154).abs() < 1e-6);

    let same = paired_t_test(&a, &a).unwrap();
    assert!(same.degenerate);
    assert_eq!(same.p, 1.0);
    let shifted: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
    let constant = paired_t_test(
        &shifted,
        &shifted.iter().map(|x| x - 0.25).collect::<Vec<_>>(),
    )
    .unwrap();
    assert!(constant.p < 1e-6);
    assert!(paired_t_test(&[1.0], &[2.0]).is_err());
    assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
}

#[test]
fn latency_is_positive_and_validated() {
    let mut work = |_: usize| -> crate::Result<()> {
        let mut x = 0u64;
        for i in 0..20_000u64 {
            x = x.wrapping_mul(31).wrapping_add(i);
        }
        std::hint::black_box(x);
        Ok(())
    };
    let stats = measure_latency(&mut [&mut work], 5, 3).unwrap();
    assert!(stats[0].mean_ms > 0.0);
    assert_eq!(stats[0].per_rep_ms.len(), 3);
    assert!(measure_latency(&mut [&mut work], 5, 2).is_err());
}
