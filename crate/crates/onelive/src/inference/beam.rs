//! Beam search over Semantic IDs.
//!
//! Standard path: every expansion round runs the full L-layer decoder with
//! per-hypothesis KV caches. MTP path: one full-depth round for q^0, then
//! only the lite blocks for q^1 and q^2, reusing the layer-0 cache. Counters
//! record one full-depth call per standard round and one lite call per lite
//! round, independent of beam width; layer_calls = L·full + 1·lite.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::frozen::{FrozenForward, PrefixCache, QueryContext};
use crate::numerics::ops::log_sum_exp;
use crate::tokenizer::SemanticId;

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct DecodeStats {
    pub full_calls: u64,
    pub lite_calls: u64,
    pub layer_calls: u64,
    pub micros: u64,
}

#[derive(Debug, Clone)]
pub struct RankedSid {
    pub sid: SemanticId,
    pub logp: f64,
}

#[derive(Debug, Clone)]
pub struct BeamOutcome {
    pub ranked: Vec<RankedSid>,
    pub stats: DecodeStats,
}

struct Hypothesis {
    codes: Vec<u16>,
    logp: f64,
    cache: PrefixCache,
    /// Hidden row the next expansion consumes (MTP path).
    hidden: Vec<f64>,
}

/// Keep the best `width` candidates: log-prob descending, then codes
/// lexicographic ascending.
fn prune(
    mut cands: Vec<(Vec<u16>, f64, usize, u16)>,
    width: usize,
) -> Vec<(Vec<u16>, f64, usize, u16)> {
    cands.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    cands.truncate(width);
    cands
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}

/// Three expansion rounds through the full decoder.
pub fn beam_search_standard(
    frozen: &FrozenForward,
    qc: &QueryContext,
    width: usize,
) -> Result<BeamOutcome> {
    if width < 1 {
        return Err(Error::Config("beam width must be ≥ 1".into()));
    }
    let start = Instant::now();
    let layers = frozen.model.config.layers as u64;
    let mut stats = DecodeStats::default();

    // Round 0: anchor → q^0 logits.
    let mut cache = frozen.fresh_cache();
    let h = frozen.main_step(qc, &mut cache, &qc.anchor);
    stats.full_calls += 1;
    let lp0 = log_softmax(&frozen.head_logits(0, &h));
    let cands: Vec<(Vec<u16>, f64, usize, u16)> = lp0
        .iter()
        .enumerate()
        .map(|(c, lp)| (vec![c as u16], *lp, 0, c as u16))
        .collect();
    let kept = prune(cands, width);
    let mut beams: Vec<Hypothesis> = kept
        .into_iter()
        .map(|(codes, logp, _, _)| Hypothesis {
            codes,
            logp,
            cache: cache.clone(),
            hidden: Vec::new(),
        })
        .collect();

    // Rounds 1..2: extend each hypothesis through the full decoder.
    for level in 1..3 {
        stats.full_calls += 1;
        let mut expanded = Vec::with_capacity(beams.len() * frozen.model.config.vocab[level]);
        let mut caches = Vec::with_capacity(beams.len());
        for (bi, hyp) in beams.iter_mut().enumerate() {
            let input = frozen.sid_embedding(level - 1, *hyp.codes.last().expect("code"));
            let mut cache = hyp.cache.clone();
            let h = frozen.main_step(qc, &mut cache, &input);
            caches.push(cache);
            let lps = log_softmax(&frozen.head_logits(level, &h));
            for (c, lp) in lps.iter().enumerate() {
                let mut codes = hyp.codes.clone();
                codes.push(c as u16);
                expanded.push((codes, hyp.logp + lp, bi, c as u16));
            }
        }
        let kept = prune(expanded, width);
        beams = kept
            .into_iter()
            .map(|(codes, logp, bi, _)| Hypothesis {
                codes,
                logp,
                cache: caches[bi].clone(),
                hidden: Vec::new(),
            })
            .collect();
    }

    stats.layer_calls = stats.full_calls * layers;
    stats.micros = start.elapsed().as_micros() as u64;
    let ranked = beams
        .into_iter()
        .map(|h| RankedSid {
            sid: SemanticId([h.codes[0], h.codes[1], h.codes[2]]),
            logp: h.logp,
        })
        .collect();
    Ok(BeamOutcome { ranked, stats })
}

/// MTP fast path: one full-depth round for q^0, lite blocks for q^1 and q^2
/// reusing the main decoder's layer-0 cache.
pub fn mtp_generate(
    frozen: &FrozenForward,
    qc: &QueryContext,
    width: usize,
) -> Result<BeamOutcome> {
    if width < 1 {
        return Err(Error::Config("beam width must be ≥ 1".into()));
    }
    let start = Instant::now();
    let layers = frozen.model.config.layers as u64;
    let mut stats = DecodeStats::default();

    let mut cache = frozen.fresh_cache();
    let h_main = frozen.main_step(qc, &mut cache, &qc.anchor);
    stats.full_calls += 1;
    let lp0 = log_softmax(&frozen.head_logits(0, &h_main));
    let cands: Vec<(Vec<u16>, f64, usize, u16)> = lp0
        .iter()
        .enumerate()
        .map(|(c, lp)| (vec![c as u16], *lp, 0, c as u16))
        .collect();
    let kept = prune(cands, width);
    let mut beams: Vec<Hypothesis> = kept
        .into_iter()
        .map(|(codes, logp, _, _)| Hypothesis {
            codes,
            logp,
            cache: cache.clone(),
            hidden: h_main.clone(),
        })
        .collect();

    for (module, level) in [(1usize, 1usize), (2, 2)] {
        stats.lite_calls += 1;
        let mut expanded = Vec::with_capacity(beams.len() * frozen.model.config.vocab[level]);
        let mut carry = Vec::with_capacity(beams.len());
        for (bi, hyp) in beams.iter().enumerate() {
            let token = frozen.sid_embedding(level - 1, *hyp.codes.last().expect("code"));
            let fused = frozen.fuse(module, &hyp.hidden, &token);
            let mut cache = hyp.cache.clone();
            let h = frozen.lite_step(qc, &mut cache, module, &fused);
            let lps = log_softmax(&frozen.head_logits(level, &h));
            carry.push((cache, h));
            for (c, lp) in lps.iter().enumerate() {
                let mut codes = hyp.codes.clone();
                codes.push(c as u16);
                expanded.push((codes, hyp.logp + lp, bi, c as u16));
            }
        }
        let kept = prune(expanded, width);
        beams = kept
            .into_iter()
            .map(|(codes, logp, bi, _)| Hypothesis {
                codes,
                logp,
                cache: carry[bi].0.clone(),
                hidden: carry[bi].1.clone(),
            })
            .collect();
    }

    stats.layer_calls = stats.full_calls * layers + stats.lite_calls;
    stats.micros = start.elapsed().as_micros() as u64;
    let ranked = beams
        .into_iter()
        .map(|h| RankedSid {
            sid: SemanticId([h.codes[0], h.codes[1], h.codes[2]]),
            logp: h.logp,
        })
        .collect();
    Ok(BeamOutcome { ranked, stats })
}
