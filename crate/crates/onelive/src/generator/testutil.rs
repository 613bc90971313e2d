//! Shared test fixtures: a tiny model configuration and a synthetic context.

use rand::Rng;

use crate::generator::context::{BehaviorContext, CtxPosition};
use crate::generator::ModelConfig;
use crate::rng;

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        ffn_hidden: 8,
        vocab: [5, 6, 7],
        seqs: 2,
        seq_len: 3,
        author_feat_dim: 4,
        ia_dim: 4,
        time_feat_dim: 3,
        // Healthy gradient flow through the stacked sigmoid MLPs keeps
        // every tensor's gradient scale above the finite-difference
        // noise floor in the gradient checks.
        init_std: 0.4,
        ..ModelConfig::default()
    }
}

pub(crate) fn tiny_context(cfg: &ModelConfig, label: &str) -> BehaviorContext {
    let mut r = rng::stream(77, label, 0);
    let positions = (0..cfg.context_rows())
        .map(|i| {
            let is_pad = i % 5 == 4;
            CtxPosition {
                author: if is_pad { 9 } else { r.random_range(0..9) },
                ia: (0..cfg.ia_dim)
                    .map(|_| {
                        if is_pad {
                            0.0
                        } else {
                            r.random_range(-1.0..1.0)
                        }
                    })
                    .collect(),
                hour: r.random_range(0..24),
                dow: r.random_range(0..7),
                dom: r.random_range(0..31),
                seq_type: i / cfg.seq_len,
                is_pad,
            }
        })
        .collect();
    BehaviorContext {
        positions,
        query_ts: 86_461,
    }
}
