//! Behavior context assembly.
//!
//! A query (user, time) turns into n fixed-length behavior sequences drawn
//! from the user's events strictly before the query time: effective viewing
//! (long-view), gifting, and general viewing (click). Each position carries
//! the author identity, the author's IA embedding at the event's segment
//! window, and hour/day-of-week/day-of-month buckets of the event time.

use std::collections::HashMap;

use crate::error::Result;
use crate::sim::{InteractionEvent, World};
use crate::tokenizer::{AlignmentModel, SemanticId};

/// Behavior sequence kinds, in block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqKind {
    /// Effective viewing: long-view positives.
    Eff,
    /// Gifting positives.
    Gift,
    /// General viewing: click positives.
    Video,
}

pub const SEQ_KINDS: [SeqKind; 3] = [SeqKind::Eff, SeqKind::Gift, SeqKind::Video];

/// hour ∈ [0,24), day-of-week ∈ [0,7), day-of-month bucket ∈ [0,31).
pub fn time_buckets(ts: u64) -> (usize, usize, usize) {
    let hour = ((ts / 3600) % 24) as usize;
    let dow = ((ts / 86_400) % 7) as usize;
    let dom = ((ts / 86_400) % 31) as usize;
    (hour, dow, dom)
}

#[derive(Debug, Clone)]
pub struct CtxPosition {
    /// Author embedding row; the pad row for padding positions.
    pub author: usize,
    /// IA embedding at the event's segment window; zeros for pads.
    pub ia: Vec<f64>,
    pub hour: usize,
    pub dow: usize,
    pub dom: usize,
    /// Sequence block index (0..n).
    pub seq_type: usize,
    pub is_pad: bool,
}

#[derive(Debug, Clone)]
pub struct BehaviorContext {
    /// n × l positions, sequence blocks concatenated in kind order, each
    /// block ordered by timestamp with pads at the tail.
    pub positions: Vec<CtxPosition>,
    pub query_ts: u64,
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub user_id: u32,
    pub query_ts: u64,
    pub context: BehaviorContext,
    pub target: SemanticId,
}

/// Precomputes per-event IA embeddings and per-user event order, then builds
/// contexts for arbitrary (user, ts) queries.
pub struct ContextBuilder {
    seqs: usize,
    seq_len: usize,
    ia_dim: usize,
    pad_author: usize,
    /// (event, ia embedding) per user, ascending ts.
    by_user: HashMap<u32, Vec<(InteractionEvent, Vec<f64>)>>,
}

impl ContextBuilder {
    pub fn new(
        world: &World,
        tokenizer: &AlignmentModel,
        events: &[InteractionEvent],
        seqs: usize,
        seq_len: usize,
        pad_author: usize,
    ) -> Result<Self> {
        use rayon::prelude::*;
        let ias: Vec<Result<Vec<f64>>> = events
            .par_iter()
            .map(|e| {
                let session = world.session(e.session_id);
                let seg = session.segment_index_at(e.ts)?;
                Ok(tokenizer.ia_embedding(session, seg)?.vector)
            })
            .collect();
        let mut by_user: HashMap<u32, Vec<(InteractionEvent, Vec<f64>)>> = HashMap::new();
        for (e, ia) in events.iter().zip(ias) {
            by_user.entry(e.user_id).or_default().push((*e, ia?));
        }
        for evs in by_user.values_mut() {
            evs.sort_by_key(|(e, _)| e.ts);
        }
        Ok(ContextBuilder {
            seqs,
            seq_len,
            ia_dim: tokenizer.config.dim,
            pad_author,
            by_user,
        })
    }

    fn kind_matches(kind: SeqKind, e: &InteractionEvent) -> bool {
        match kind {
            SeqKind::Eff => e.labels.long_view,
            SeqKind::Gift => e.labels.gift,
            SeqKind::Video => e.labels.click,
        }
    }

    /// Build the context for a query strictly after the events it may see.
    pub fn build(&self, user_id: u32, query_ts: u64) -> BehaviorContext {
        let empty = Vec::new();
        let events = self.by_user.get(&user_id).unwrap_or(&empty);
        let visible = &events[..events.partition_point(|(e, _)| e.ts < query_ts)];
        let mut positions = Vec::with_capacity(self.seqs * self.seq_len);
        for (block, kind) in SEQ_KINDS.iter().enumerate().take(self.seqs) {
            let recent: Vec<&(InteractionEvent, Vec<f64>)> = visible
                .iter()
                .rev()
                .filter(|(e, _)| Self::kind_matches(*kind, e))
                .take(self.seq_len)
                .collect();
            // rev() gave newest-first; emit oldest-first.
            for (e, ia) in recent.into_iter().rev() {
                let (hour, dow, dom) = time_buckets(e.ts);
                positions.push(CtxPosition {
                    author: e.author_id as usize,
                    ia: ia.clone(),
                    hour,
                    dow,
                    dom,
                    seq_type: block,
                    is_pad: false,
                });
            }
            while positions.len() < (block + 1) * self.seq_len {
                positions.push(CtxPosition {
                    author: self.pad_author,
                    ia: vec![0.0; self.ia_dim],
                    hour: 0,
                    dow: 0,
                    dom: 0,
                    seq_type: block,
                    is_pad: true,
                });
            }
        }
        BehaviorContext {
            positions,
            query_ts,
        }
    }

    pub fn users(&self) -> impl Iterator<Item = &u32> {
        self.by_user.keys()
    }
}
