//! Retrieval metrics: hit rate and mean reciprocal rank at k.

use crate::error::{Error, Result};

/// HR@k = mean hit indicator; MRR@k = mean of 1/rank for hits inside the
/// top k (misses contribute 0).
pub fn eval_hr_mrr(results: &[(Vec<u32>, u32)], k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if results.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut hits = 0usize;
    let mut rr = 0.0f64;
    for (ranked, truth) in results {
        if let Some(pos) = ranked.iter().take(k).position(|a| a == truth) {
            hits += 1;
            rr += 1.0 / (pos + 1) as f64;
        }
    }
    let n = results.len() as f64;
    Ok((hits as f64 / n, rr / n))
}
