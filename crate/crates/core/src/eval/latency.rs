use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    /// Mean milliseconds per query of each repetition.
    pub per_rep_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Coefficient of variation across repetitions.
    pub cv: f64,
}

impl LatencyStats {
    fn from_reps(per_rep_ms: Vec<f64>) -> Self {
        let n = per_rep_ms.len() as f64;
        let mean = per_rep_ms.iter().sum::<f64>() / n;
        let var = per_rep_ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let mut sorted = per_rep_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            (sorted[mid - 1] + sorted[mid]) / 2.0
        };
        Self {
            per_rep_ms,
            mean_ms: mean,
            median_ms: median,
            cv: if mean > 0.0 { var.sqrt() / mean } else { 0.0 },
        }
    }
}

/// Wall-clock milliseconds per query for each pipeline.
///
/// Every pipeline first runs one warm-up pass over all queries. Repetitions
/// then visit the pipelines round-robin so slow drift in machine load is
/// spread evenly across settings. Runs on the calling thread only.
pub fn measure_latency(
    pipelines: &mut [&mut dyn FnMut(usize) -> Result<()>],
    num_queries: usize,
    repetitions: usize,
) -> Result<Vec<LatencyStats>> {
    if repetitions < 3 {
        return Err(Error::contract(
            "latency measurement needs at least 3 repetitions",
        ));
    }
    if num_queries == 0 {
        return Err(Error::contract(
            "latency measurement needs at least one query",
        ));
    }
    for p in pipelines.iter_mut() {
        for q in 0..num_queries {
            p(q)?;
        }
    }
    let mut reps = vec![Vec::with_capacity(repetitions); pipelines.len()];
    for _ in 0..repetitions {
        for (i, p) in pipelines.iter_mut().enumerate() {
            let start = Instant::now();
            for q in 0..num_queries {
                p(q)?;
            }
            let ms = start.elapsed().as_secs_f64() * 1e3 / num_queries as f64;
            reps[i].push(ms.max(f64::MIN_POSITIVE));
        }
    }
    Ok(reps.into_iter().map(LatencyStats::from_reps).collect())
}
