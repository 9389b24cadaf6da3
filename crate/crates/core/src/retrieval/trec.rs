//! TREC run files: `qid Q0 docid rank score tag`, rank 1-based.

use std::collections::HashMap;

use super::{Ranking, Stage};
use crate::error::{Error, Result};

/// Formats rankings as run lines. The tag column carries the stage name.
pub fn format_run(rankings: &[Ranking]) -> String {
    let mut out = String::new();
    for r in rankings {
        for (i, (doc, score)) in r.entries.iter().enumerate() {
            out.push_str(&format!(
                "{} Q0 {} {} {} {}\n",
                r.qid,
                doc,
                i + 1,
                score,
                r.stage
            ));
        }
    }
    out
}

/// Parses a run file. Queries keep their first-appearance order; entries
/// are ordered by the rank column.
pub fn parse_run(text: &str) -> Result<Vec<Ranking>> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (Stage, Vec<(usize, String, f64)>)> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |d: &str| Error::format("run file", format!("line {}: {d}", n + 1));
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let rank: usize = cols[3].parse().map_err(|_| bad("rank is not an integer"))?;
        let score: f64 = cols[4].parse().map_err(|_| bad("score is not a number"))?;
        let stage = match cols[5] {
            "R1" => Stage::R1,
            "ENS" => Stage::Ens,
            _ => Stage::R0,
        };
        let entry = rows.entry(cols[0].to_string()).or_insert_with(|| {
            order.push(cols[0].to_string());
            (stage, Vec::new())
        });
        entry.1.push((rank, cols[2].to_string(), score));
    }
    Ok(order
        .into_iter()
        .map(|qid| {
            let (stage, mut list) = rows.remove(&qid).expect("query recorded");
            list.sort_by_key(|e| e.0);
            Ranking {
                qid,
                stage,
                entries: list.into_iter().map(|(_, d, s)| (d, s)).collect(),
                reranked: 0,
            }
        })
        .collect())
}
