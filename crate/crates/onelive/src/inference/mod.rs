//! Beam-search inference with live-validity filtering, the MTP fast path,
//! retrieval metrics, and the decoding benchmark.

pub mod beam;
pub mod bench;
pub mod frozen;
pub mod metrics;
pub mod resolve;

pub use beam::{beam_search_standard, mtp_generate, BeamOutcome, DecodeStats, RankedSid};
pub use bench::{bench_decoding, render_table, BenchEntry, BenchReport};
pub use frozen::{FrozenForward, PrefixCache, QueryContext};
pub use metrics::eval_hr_mrr;
pub use resolve::{resolve_results, GenerationResult, RankedEntry, SidIndex};
