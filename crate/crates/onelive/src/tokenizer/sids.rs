//! Semantic-ID timelines.
//!
//! An author's SID is recomputed once per 30 s segment window: IA embedding at
//! the tick, quantized against the frozen codebook. Records are written to
//! `sids.jsonl` and read back into a per-author timeline for time-indexed
//! lookups (teacher-forcing targets and the serving-side SID index).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::World;
use crate::tokenizer::{quantize, AlignmentModel, Codebook, SemanticId};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SidRecord {
    pub author_id: u32,
    pub ts: u64,
    pub q0: u16,
    pub q1: u16,
    pub q2: u16,
}

impl SidRecord {
    pub fn sid(&self) -> SemanticId {
        SemanticId([self.q0, self.q1, self.q2])
    }
}

/// Quantize every segment tick of every session. Sessions are processed in
/// parallel; output is sorted by (author_id, ts).
pub fn compute_sid_timeline(
    world: &World,
    model: &AlignmentModel,
    codebook: &Codebook,
) -> Result<Vec<SidRecord>> {
    let per_session: Vec<Result<Vec<SidRecord>>> = world
        .sessions
        .par_iter()
        .map(|session| {
            let mut out = Vec::with_capacity(session.segment_count());
            for i in 0..session.segment_count() {
                let ia = model.ia_embedding(session, i)?;
                let q = quantize(&ia.vector, codebook);
                out.push(SidRecord {
                    author_id: session.author_id,
                    ts: ia.as_of,
                    q0: q.codes[0],
                    q1: q.codes[1],
                    q2: q.codes[2],
                });
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_session {
        records.extend(r?);
    }
    records.sort_by_key(|r| (r.author_id, r.ts));
    Ok(records)
}

pub fn write_sids(records: &[SidRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::parse("sids.jsonl", e))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_sids(path: &Path) -> Result<Vec<SidRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(format!("sids.jsonl line {}", i + 1), e))?,
        );
    }
    Ok(out)
}

/// Per-author SID history ordered by timestamp.
#[derive(Debug, Clone, Default)]
pub struct AuthorSidTimeline {
    by_author: Vec<Vec<(u64, SemanticId)>>,
}

impl AuthorSidTimeline {
    pub fn build(records: &[SidRecord], num_authors: usize) -> Self {
        let mut by_author = vec![Vec::new(); num_authors];
        for r in records {
            by_author[r.author_id as usize].push((r.ts, r.sid()));
        }
        for t in by_author.iter_mut() {
            t.sort_by_key(|(ts, _)| *ts);
        }
        AuthorSidTimeline { by_author }
    }

    /// Latest SID at or before `ts`.
    pub fn sid_at(&self, author_id: u32, ts: u64) -> Option<SemanticId> {
        let t = self.by_author.get(author_id as usize)?;
        let idx = t.partition_point(|(rts, _)| *rts <= ts);
        if idx == 0 {
            None
        } else {
            Some(t[idx - 1].1)
        }
    }

    /// Timestamp of the latest re-tokenization at or before `ts`.
    pub fn tick_at(&self, author_id: u32, ts: u64) -> Option<u64> {
        let t = self.by_author.get(author_id as usize)?;
        let idx = t.partition_point(|(rts, _)| *rts <= ts);
        if idx == 0 {
            None
        } else {
            Some(t[idx - 1].0)
        }
    }

    pub fn num_authors(&self) -> usize {
        self.by_author.len()
    }
}
