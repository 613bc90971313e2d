//! Synthetic live-streaming world.
//!
//! Deterministic stand-in for production logs and for the multimodal content
//! encoder: authors with drifting topics, sessions with finite lifecycles and
//! one content embedding per 30-second window, users with heterogeneous
//! objective propensities, and a timestamped multi-objective event log.
//! Identical (config, seed) always produces an identical world.

mod events;
pub(crate) mod export;
mod worldgen;

pub use events::{sample_interactions, split_train_test};
pub use export::{
    export_dataset, read_events, read_segments, read_world_meta, write_events, write_segments,
    write_world_meta, WorldMeta,
};
pub use worldgen::generate_world;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds per content segment window.
pub const SEGMENT_SECONDS: u64 = 30;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct WorldConfig {
    pub num_users: usize,
    pub num_authors: usize,
    pub horizon_days: u64,
    /// Content embedding dimension d_c.
    pub content_dim: usize,
    pub mean_session_minutes: f64,
    /// Target fraction of authors live at any instant.
    pub live_fraction: f64,
    pub events_per_user_per_day: f64,
    pub max_drift_rate: f64,
    pub drift_noise: f64,
    /// Steepness of the sigmoid label model on ⟨preference, segment⟩.
    pub affinity_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_users: 1000,
            num_authors: 200,
            horizon_days: 7,
            content_dim: 16,
            mean_session_minutes: 45.0,
            live_fraction: 0.25,
            events_per_user_per_day: 30.0,
            max_drift_rate: 0.12,
            drift_noise: 0.05,
            affinity_scale: 3.0,
        }
    }
}

impl WorldConfig {
    pub fn horizon_seconds(&self) -> u64 {
        self.horizon_days * 86_400
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users < 1 || self.num_authors < 1 || self.horizon_days < 1 {
            return Err(Error::Config("world sizes must be ≥ 1".into()));
        }
        if self.content_dim < 2 {
            return Err(Error::Config("content_dim must be ≥ 2".into()));
        }
        if !(0.0..1.0).contains(&self.live_fraction) || self.live_fraction <= 0.0 {
            return Err(Error::Config("live_fraction must be in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Author {
    pub id: u32,
    /// Unit vector in content space.
    pub base_topic: Vec<f64>,
    /// Topic change per segment, ≥ 0.
    pub drift_rate: f64,
    /// In (0,1); modulates exposure and engagement.
    pub popularity: f64,
}

/// Per-objective base rates. Gift stays below click (engagement funnel).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Propensities {
    pub click: f64,
    pub long_view: f64,
    pub follow: f64,
    pub gift: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct User {
    pub id: u32,
    /// Unit vector in content space.
    pub preference: Vec<f64>,
    pub propensities: Propensities,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiveSession {
    pub id: u32,
    pub author_id: u32,
    pub start: u64,
    pub end: u64,
    /// Flattened f32 segment embeddings, one unit row per 30 s window.
    pub segments: Vec<f32>,
    pub content_dim: usize,
}

impl LiveSession {
    pub fn segment_count(&self) -> usize {
        self.segments.len() / self.content_dim
    }

    pub fn segment(&self, index: usize) -> Result<&[f32]> {
        if index >= self.segment_count() {
            return Err(Error::Index(format!(
                "segment {index} of session {} with {} segments",
                self.id,
                self.segment_count()
            )));
        }
        Ok(&self.segments[index * self.content_dim..(index + 1) * self.content_dim])
    }

    pub fn segment_f64(&self, index: usize) -> Result<Vec<f64>> {
        Ok(self.segment(index)?.iter().map(|v| *v as f64).collect())
    }

    /// Index of the segment window containing time `ts`.
    pub fn segment_index_at(&self, ts: u64) -> Result<usize> {
        if ts < self.start || ts >= self.end {
            return Err(Error::Index(format!("ts {ts} outside session {}", self.id)));
        }
        let idx = ((ts - self.start) / SEGMENT_SECONDS) as usize;
        Ok(idx.min(self.segment_count().saturating_sub(1)))
    }

    pub fn segment_time(&self, index: usize) -> u64 {
        self.start + index as u64 * SEGMENT_SECONDS
    }

    pub fn contains(&self, ts: u64) -> bool {
        ts >= self.start && ts < self.end
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct Labels {
    pub click: bool,
    pub long_view: bool,
    pub follow: bool,
    pub gift: bool,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: u32,
    pub author_id: u32,
    pub session_id: u32,
    pub ts: u64,
    pub labels: Labels,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub seed: u64,
    pub users: Vec<User>,
    pub authors: Vec<Author>,
    pub sessions: Vec<LiveSession>,
    pub events: Vec<InteractionEvent>,
    /// Per author: session indices sorted by start time.
    pub author_sessions: Vec<Vec<usize>>,
}

impl World {
    pub fn session(&self, id: u32) -> &LiveSession {
        &self.sessions[id as usize]
    }

    /// Authors live at `ts` (some session contains ts), ascending by id.
    pub fn live_authors_at(&self, ts: u64) -> Vec<u32> {
        let mut live = Vec::new();
        for (author, sess) in self.author_sessions.iter().enumerate() {
            if sess.iter().any(|&s| self.sessions[s].contains(ts)) {
                live.push(author as u32);
            }
        }
        live
    }

    /// The session of `author` containing `ts`, if any.
    pub fn live_session_of(&self, author: u32, ts: u64) -> Option<&LiveSession> {
        self.author_sessions[author as usize]
            .iter()
            .map(|&s| &self.sessions[s])
            .find(|s| s.contains(ts))
    }
}
