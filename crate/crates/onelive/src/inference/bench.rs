//! Decoding benchmark: wall-clock and call-count comparison of the standard
//! and MTP paths over a fixed query set.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::generator::BehaviorContext;
use crate::inference::beam::{beam_search_standard, mtp_generate, BeamOutcome};
use crate::inference::frozen::FrozenForward;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchEntry {
    pub path: String,
    pub width: usize,
    pub queries: usize,
    pub mean_us: f64,
    pub p99_us: f64,
    pub qps: f64,
    pub full_calls_per_query: u64,
    pub lite_calls_per_query: u64,
    pub layer_calls_per_query: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub layers: usize,
    pub entries: Vec<BenchEntry>,
}

fn percentile(sorted: &[u64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() as f64 * p).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx] as f64
}

/// Run both decode paths at each width over the same queries. Encoding E is
/// part of each timed query, as both paths pay it identically.
pub fn bench_decoding(
    frozen: &FrozenForward,
    contexts: &[BehaviorContext],
    widths: &[usize],
) -> Result<BenchReport> {
    let mut entries = Vec::new();
    for &width in widths {
        for path in ["standard", "mtp"] {
            let mut lat = Vec::with_capacity(contexts.len());
            let mut full = 0u64;
            let mut lite = 0u64;
            let mut layer = 0u64;
            for ctx in contexts {
                let start = std::time::Instant::now();
                let qc = frozen.encode_query(ctx)?;
                let out: BeamOutcome = match path {
                    "standard" => beam_search_standard(frozen, &qc, width)?,
                    _ => mtp_generate(frozen, &qc, width)?,
                };
                lat.push(start.elapsed().as_micros() as u64);
                full += out.stats.full_calls;
                lite += out.stats.lite_calls;
                layer += out.stats.layer_calls;
            }
            lat.sort_unstable();
            let n = contexts.len().max(1) as u64;
            let mean = lat.iter().sum::<u64>() as f64 / n as f64;
            entries.push(BenchEntry {
                path: path.to_string(),
                width,
                queries: contexts.len(),
                mean_us: mean,
                p99_us: percentile(&lat, 0.99),
                qps: if mean > 0.0 { 1e6 / mean } else { f64::NAN },
                full_calls_per_query: full / n,
                lite_calls_per_query: lite / n,
                layer_calls_per_query: layer / n,
            });
        }
    }
    Ok(BenchReport {
        layers: frozen.model.config.layers,
        entries,
    })
}

/// Aligned plain-text table.
pub fn render_table(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("decode benchmark (L={})\n", report.layers));
    out.push_str(&format!(
        "{:<10} {:>6} {:>8} {:>12} {:>12} {:>10} {:>6} {:>6} {:>7}\n",
        "path", "width", "queries", "mean_us", "p99_us", "qps", "full", "lite", "layers"
    ));
    for e in &report.entries {
        out.push_str(&format!(
            "{:<10} {:>6} {:>8} {:>12.1} {:>12.1} {:>10.1} {:>6} {:>6} {:>7}\n",
            e.path,
            e.width,
            e.queries,
            e.mean_us,
            e.p99_us,
            e.qps,
            e.full_calls_per_query,
            e.lite_calls_per_query,
            e.layer_calls_per_query
        ));
    }
    out
}
