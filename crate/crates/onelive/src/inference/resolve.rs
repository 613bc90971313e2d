//! SID → live-author resolution.
//!
//! The serving index maps each Semantic ID to the live authors currently
//! tokenized to it, ordered by most recent re-tokenization (then author id).
//! Hypotheses that resolve to nobody are skipped and the next hypothesis is
//! promoted, so the returned list holds live authors whenever any exist.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::inference::beam::{BeamOutcome, DecodeStats};
use crate::sim::World;
use crate::tokenizer::{AuthorSidTimeline, SemanticId};

/// Snapshot of the author catalogue at one query time.
pub struct SidIndex {
    map: BTreeMap<SemanticId, Vec<(u32, u64)>>,
    pub query_ts: u64,
}

impl SidIndex {
    /// Build from the live-author set at `ts` and each author's latest SID.
    pub fn build(world: &World, timeline: &AuthorSidTimeline, ts: u64) -> Self {
        let mut map: BTreeMap<SemanticId, Vec<(u32, u64)>> = BTreeMap::new();
        for author in world.live_authors_at(ts) {
            let (Some(sid), Some(tick)) =
                (timeline.sid_at(author, ts), timeline.tick_at(author, ts))
            else {
                continue;
            };
            map.entry(sid).or_default().push((author, tick));
        }
        for entries in map.values_mut() {
            // Most recent segment first, author id breaking ties.
            entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        SidIndex { map, query_ts: ts }
    }

    /// Live authors currently holding `sid`, in serving order.
    pub fn resolve(&self, sid: SemanticId) -> Vec<u32> {
        self.map
            .get(&sid)
            .map(|v| v.iter().map(|(a, _)| *a).collect())
            .unwrap_or_default()
    }

    pub fn live_count(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedEntry {
    pub q0: u16,
    pub q1: u16,
    pub q2: u16,
    pub logp: f64,
    pub authors: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationResult {
    pub query_ts: u64,
    /// Descending log-prob; every listed author is live at query_ts.
    pub ranked: Vec<RankedEntry>,
    pub stats: DecodeStats,
}

impl GenerationResult {
    /// Recommended authors in rank order.
    pub fn authors(&self) -> Vec<u32> {
        self.ranked
            .iter()
            .flat_map(|e| e.authors.iter().copied())
            .collect()
    }
}

/// Resolve a beam outcome against the index, skipping empty hypotheses and
/// stopping once `top_k` authors are collected.
pub fn resolve_results(outcome: &BeamOutcome, index: &SidIndex, top_k: usize) -> GenerationResult {
    let mut ranked = Vec::new();
    let mut total = 0usize;
    for hyp in &outcome.ranked {
        if total >= top_k {
            break;
        }
        let authors = index.resolve(hyp.sid);
        if authors.is_empty() {
            continue;
        }
        total += authors.len();
        ranked.push(RankedEntry {
            q0: hyp.sid.0[0],
            q1: hyp.sid.0[1],
            q2: hyp.sid.0[2],
            logp: hyp.logp,
            authors,
        });
    }
    GenerationResult {
        query_ts: index.query_ts,
        ranked,
        stats: outcome.stats,
    }
}
