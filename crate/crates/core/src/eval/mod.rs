//! Average precision, MAP, the paired two-tailed t-test and per-query
//! latency measurement.

mod latency;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::retrieval::Ranking;

pub use latency::{measure_latency, LatencyStats};

/// Binary relevance judgments: query id → relevant doc ids.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Qrels {
    pub relevant: BTreeMap<String, BTreeSet<String>>,
}

impl Qrels {
    /// Parses `qid 0 docid rel` lines; `rel > 0` counts as relevant.
    pub fn parse(text: &str) -> Result<Self> {
        let mut relevant: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(Error::format(
                    "qrels",
                    format!("line {}: expected 4 columns", n + 1),
                ));
            }
            let rel: i64 = cols[3].parse().map_err(|_| {
                Error::format(
                    "qrels",
                    format!("line {}: relevance is not an integer", n + 1),
                )
            })?;
            let entry = relevant.entry(cols[0].to_string()).or_default();
            if rel > 0 {
                entry.insert(cols[2].to_string());
            }
        }
        Ok(Self { relevant })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.relevant {
            for d in docs {
                out.push_str(&format!("{q} 0 {d} 1\n"));
            }
        }
        out
    }

    pub fn get(&self, qid: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(qid)
    }
}

/// `(1/|R|) Σ_{i ≤ cutoff, doc_i ∈ R} precision@i`.
///
/// The sum is carried in double-double precision so the result is the
/// correctly rounded value in all but pathological cases (e.g. exactly 5/6
/// for `[rel, non, rel]` with two relevant documents).
pub fn average_precision<'a>(
    ranking: impl IntoIterator<Item = &'a str>,
    relevant: &BTreeSet<String>,
    cutoff: Option<usize>,
) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::contract(
            "average precision needs at least one relevant document",
        ));
    }
    let mut hits = 0usize;
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for (i, doc) in ranking
        .into_iter()
        .take(cutoff.unwrap_or(usize::MAX))
        .enumerate()
    {
        if relevant.contains(doc) {
            hits += 1;
            let (num, den) = (hits as f64, (i + 1) as f64);
            let q = num / den;
            let q_lo = (-q).mul_add(den, num) / den;
            let s = hi + q;
            let b = s - hi;
            let err = (hi - (s - b)) + (q - b);
            hi = s;
            lo += err + q_lo;
        }
    }
    let r = relevant.len() as f64;
    let q = hi / r;
    let rem = ((-q).mul_add(r, hi) + lo) / r;
    Ok(q + rem)
}

/// Per-query AP and their mean, plus optional significance and latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_query: BTreeMap<String, f64>,
    pub map: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_test: Option<TTest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<f64>,
}

impl MetricReport {
    /// Line-delimited records: one per query, then one summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (q, ap) in &self.per_query {
            out.push_str(&serde_json::json!({ "qid": q, "ap": ap }).to_string());
            out.push('\n');
        }
        let mut summary = serde_json::json!({ "map": self.map, "queries": self.per_query.len() });
        if let Some(t) = &self.t_test {
            summary["t"] = serde_json::json!(t.t);
            summary["p"] = serde_json::json!(t.p);
            summary["degenerate"] = serde_json::json!(t.degenerate);
        }
        if let Some(l) = self.latency_ms {
            summary["latency_ms"] = serde_json::json!(l);
        }
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    /// APs aligned on the queries both reports share, in query order.
    pub fn paired_aps(&self, other: &MetricReport) -> (Vec<f64>, Vec<f64>) {
        self.per_query
            .iter()
            .filter_map(|(q, a)| other.per_query.get(q).map(|b| (*a, *b)))
            .unzip()
    }
}

/// MAP over the run's queries that have at least one relevant document.
/// Queries without judgments are skipped with a warning.
pub fn mean_average_precision(
    run: &[Ranking],
    qrels: &Qrels,
    cutoff: Option<usize>,
) -> Result<MetricReport> {
    let mut per_query = BTreeMap::new();
    for r in run {
        match qrels.get(&r.qid) {
            Some(rel) if !rel.is_empty() => {
                per_query.insert(r.qid.clone(), average_precision(r.doc_ids(), rel, cutoff)?);
            }
            _ => log::warn!("query {} has no relevant documents; skipped", r.qid),
        }
    }
    if per_query.is_empty() {
        return Err(Error::contract(
            "no evaluable queries: none has a relevant document",
        ));
    }
    // Summing in sorted query order keeps MAP independent of run order.
    let map = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok(MetricReport {
        per_query,
        map,
        t_test: None,
        latency_ms: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-tailed p-value.
    pub p: f64,
    pub df: usize,
    /// All paired differences were zero; `p = 1` by convention.
    pub degenerate: bool,
}

/// Student's paired t-test on `a[i] - b[i]`, two-tailed.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::contract("paired t-test needs at least two pairs"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = n - 1;
    if diffs.iter().all(|&d| d == 0.0) {
        log::warn!("paired t-test: all differences are zero; reporting p = 1");
        return Ok(TTest {
            t: 0.0,
            p: 1.0,
            df,
            degenerate: true,
        });
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / df as f64;
    let se = (var / n as f64).sqrt();
    if se == 0.0 {
        return Ok(TTest {
            t: mean.signum() * f64::INFINITY,
            p: 0.0,
            df,
            degenerate: false,
        });
    }
    let t = mean / se;
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::contract(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest {
        t,
        p,
        df,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests;
