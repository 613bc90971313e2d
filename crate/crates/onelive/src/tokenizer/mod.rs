//! Dynamic tokenization.
//!
//! Fuses static author identity with real-time and pooled content through a
//! gated author tower, aligns it against user behavior with an in-batch
//! softmax over click pairs, then residual-quantizes the resulting IA
//! embeddings into 3-level Semantic IDs. Codebook health is reported as
//! utilization and collision rates.

mod rkmeans;
mod sids;
mod stats;
mod towers;

pub use rkmeans::{
    kmeans, quantize, read_codebook, reconstruct, res_kmeans_fit, write_codebook, Codebook,
    Quantized,
};
pub use sids::{compute_sid_timeline, read_sids, write_sids, AuthorSidTimeline, SidRecord};
pub use stats::{
    codebook_metrics, CodebookMetrics, PRODUCTION_CR_AUTHOR, PRODUCTION_CR_SID,
    PRODUCTION_LEVEL_SIZES,
};
pub use towers::{
    alignment_batch_loss, collect_ia_snapshots, train_alignment, AlignmentModel, AuthorTowerInput,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of quantization levels.
pub const SID_LEVELS: usize = 3;

/// Ordered triple of per-level codebook indices identifying an author's
/// current state; also the generator's token vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticId(pub [u16; SID_LEVELS]);

impl SemanticId {
    pub fn from_codes(codes: &[u16]) -> Result<Self> {
        if codes.len() != SID_LEVELS {
            return Err(Error::Dimension(format!(
                "semantic id needs {SID_LEVELS} codes, got {}",
                codes.len()
            )));
        }
        Ok(SemanticId([codes[0], codes[1], codes[2]]))
    }

    pub fn level(&self, l: usize) -> u16 {
        self.0[l]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Tower output dimension d.
    pub dim: usize,
    /// Hidden width of the fusion and user MLPs.
    pub hidden: usize,
    /// In-batch softmax temperature, learnable, this is the init.
    pub temperature_init: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Codebook size per level (N_0, N_1, N_2).
    pub level_sizes: Vec<usize>,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    /// Cap on the number of IA snapshots used to fit the codebook.
    pub fit_sample: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            dim: 32,
            hidden: 64,
            temperature_init: 10.0,
            batch_size: 64,
            steps: 500,
            lr: 1e-3,
            level_sizes: vec![64, 64, 64],
            kmeans_iters: 25,
            kmeans_tol: 1e-4,
            fit_sample: 20_000,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_sizes.len() != SID_LEVELS {
            return Err(Error::Config(format!(
                "expected {SID_LEVELS} codebook levels, got {}",
                self.level_sizes.len()
            )));
        }
        if self.level_sizes.iter().any(|&n| n < 1) {
            return Err(Error::Config("codebook level sizes must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("alignment batch size must be ≥ 2".into()));
        }
        Ok(())
    }
}

/// Author representation tagged with the segment window it reflects.
#[derive(Debug, Clone)]
pub struct IAEmbedding {
    pub author_id: u32,
    pub as_of: u64,
    pub vector: Vec<f64>,
}
