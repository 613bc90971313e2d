//! Lazy decoder-only generative model over Semantic IDs.
//!
//! Long behavior histories are never self-encoded; they enter each decoder
//! block only as cross-attention keys/values. The decoder runs three stacked
//! sublayers per block (cross-attention, causal self-attention, FFN, all
//! pre-norm residual), with optional elementwise attention gating and QK
//! normalization. Two lite single-block decoders chained behind the main
//! decoder implement sequential multi-token prediction; their attention
//! parameters alias the main decoder's first layer so inference can reuse its
//! KV cache, while their FFNs stay private.

mod context;
mod forward;
#[cfg(test)]
pub(crate) mod testutil;
pub mod train;

pub use context::{
    time_buckets, BehaviorContext, ContextBuilder, CtxPosition, SeqKind, TrainSample,
};
pub use forward::{DecoderOut, MtpOut};
pub use train::{
    assemble_batch, batch_gradients, build_train_pool, distill_lite_modules, eval_acc_all,
    train_generator, train_step, StepMetrics,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore};
use crate::rng;
use crate::tokenizer::SID_LEVELS;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Model width d.
    pub dim: usize,
    /// Main decoder depth L.
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Vocabulary per SID level (N_0, N_1, N_2).
    pub vocab: [usize; SID_LEVELS],
    /// Number of behavior sequences n.
    pub seqs: usize,
    /// Per-sequence length l.
    pub seq_len: usize,
    /// Loss weights (w_0, w_1, w_2); later modules weigh less.
    pub mtp_weights: [f64; SID_LEVELS],
    pub qk_norm: bool,
    pub gated_attention: bool,
    /// Author identity feature width inside Eq.-7 style item features.
    pub author_feat_dim: usize,
    /// IA embedding width (the tokenizer's d).
    pub ia_dim: usize,
    /// Width of each temporal bucket embedding.
    pub time_feat_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Gaussian init scale for weights and embeddings.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            layers: 3,
            heads: 4,
            ffn_hidden: 64,
            vocab: [64, 64, 64],
            seqs: 3,
            seq_len: 50,
            mtp_weights: [1.0, 0.5, 0.25],
            qk_norm: true,
            gated_attention: true,
            author_feat_dim: 16,
            ia_dim: 32,
            time_feat_dim: 8,
            steps: 500,
            batch_size: 32,
            lr: 1e-3,
            grad_clip: 1.0,
            init_std: 0.08,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn context_rows(&self) -> usize {
        self.seqs * self.seq_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(Error::Config(
                "model width must be divisible by head count".into(),
            ));
        }
        if self.layers < 1 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let [w0, w1, w2] = self.mtp_weights;
        if w0 <= 0.0 || w1 <= 0.0 || w2 <= 0.0 || w1 >= w0 || w2 > w1 {
            return Err(Error::Config(
                "mtp weights must satisfy w0 > w1 >= w2 > 0".into(),
            ));
        }
        if self.seqs == 0 || self.seq_len == 0 {
            return Err(Error::Config("context shape must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub gate: ParamId,
    pub q_gain: ParamId,
    pub k_gain: ParamId,
    pub norm_gain: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub norm_gain: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIds {
    pub cross: AttnIds,
    pub selfa: AttnIds,
    pub ffn: FfnIds,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MtpIds {
    pub fuse_w1: ParamId,
    pub fuse_b1: ParamId,
    pub fuse_w2: ParamId,
    pub fuse_b2: ParamId,
    pub block: BlockIds,
}

#[derive(Debug, Clone)]
pub(crate) struct GenIds {
    pub author_emb: ParamId,
    pub item_w: ParamId,
    pub item_b: ParamId,
    pub seqtype_emb: ParamId,
    pub hour_emb: ParamId,
    pub dow_emb: ParamId,
    pub dom_emb: ParamId,
    pub time_w1: ParamId,
    pub time_b1: ParamId,
    pub time_w2: ParamId,
    pub time_b2: ParamId,
    pub ctx_w1: ParamId,
    pub ctx_b1: ParamId,
    pub ctx_w2: ParamId,
    pub ctx_b2: ParamId,
    pub bos: ParamId,
    pub sid_emb: [ParamId; SID_LEVELS],
    pub head_w: [ParamId; SID_LEVELS],
    pub head_b: [ParamId; SID_LEVELS],
    pub layers: Vec<BlockIds>,
    pub mtp: [MtpIds; 2],
}

pub struct GeneratorModel {
    pub store: ParamStore,
    pub config: ModelConfig,
    pub num_authors: usize,
    pub(crate) ids: GenIds,
}

impl GeneratorModel {
    pub fn new(config: &ModelConfig, num_authors: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "generator-init", 0);
        let d = config.dim;
        let d_h = config.head_dim();
        let std = config.init_std;

        let attn =
            |store: &mut ParamStore, prefix: &str, r: &mut rand_chacha::ChaCha8Rng| AttnIds {
                wq: store.register_randn(&format!("{prefix}.wq"), d, d, std, r),
                wk: store.register_randn(&format!("{prefix}.wk"), d, d, std, r),
                wv: store.register_randn(&format!("{prefix}.wv"), d, d, std, r),
                wo: store.register_randn(&format!("{prefix}.wo"), d, d, std, r),
                gate: store.register_randn(&format!("{prefix}.gate"), d, d, std, r),
                q_gain: store.register_const(&format!("{prefix}.q_gain"), 1, d_h, 1.0),
                k_gain: store.register_const(&format!("{prefix}.k_gain"), 1, d_h, 1.0),
                norm_gain: store.register_const(&format!("{prefix}.norm_gain"), 1, d, 1.0),
            };
        let ffn = |store: &mut ParamStore, prefix: &str, r: &mut rand_chacha::ChaCha8Rng| FfnIds {
            w1: store.register_randn(&format!("{prefix}.w1"), d, config.ffn_hidden, std, r),
            b1: store.register_zeros(&format!("{prefix}.b1"), 1, config.ffn_hidden),
            w2: store.register_randn(&format!("{prefix}.w2"), config.ffn_hidden, d, std, r),
            b2: store.register_zeros(&format!("{prefix}.b2"), 1, d),
            norm_gain: store.register_const(&format!("{prefix}.norm_gain"), 1, d, 1.0),
        };
        let alias_attn = |store: &mut ParamStore, prefix: &str, src: &AttnIds| AttnIds {
            wq: store.alias(&format!("{prefix}.wq"), src.wq),
            wk: store.alias(&format!("{prefix}.wk"), src.wk),
            wv: store.alias(&format!("{prefix}.wv"), src.wv),
            wo: store.alias(&format!("{prefix}.wo"), src.wo),
            gate: store.alias(&format!("{prefix}.gate"), src.gate),
            q_gain: store.alias(&format!("{prefix}.q_gain"), src.q_gain),
            k_gain: store.alias(&format!("{prefix}.k_gain"), src.k_gain),
            norm_gain: store.alias(&format!("{prefix}.norm_gain"), src.norm_gain),
        };

        let item_in = config.author_feat_dim + config.ia_dim;
        let t3 = 3 * config.time_feat_dim;
        // Pad positions use a dedicated author-embedding row (index
        // num_authors) as the learned pad token; they are masked in attention.
        let author_emb = store.register_randn(
            "gen.author_emb",
            num_authors + 1,
            config.author_feat_dim,
            std,
            &mut r,
        );
        let item_w = store.register_randn("gen.item_proj.w", item_in, d, std, &mut r);
        let item_b = store.register_zeros("gen.item_proj.b", 1, d);
        let seqtype_emb = store.register_randn("gen.seqtype_emb", 3, d, std, &mut r);
        let hour_emb =
            store.register_randn("gen.time.hour_emb", 24, config.time_feat_dim, std, &mut r);
        let dow_emb =
            store.register_randn("gen.time.dow_emb", 7, config.time_feat_dim, std, &mut r);
        let dom_emb =
            store.register_randn("gen.time.dom_emb", 31, config.time_feat_dim, std, &mut r);
        let time_w1 = store.register_randn("gen.time.mlp.w1", t3, d, std, &mut r);
        let time_b1 = store.register_zeros("gen.time.mlp.b1", 1, d);
        let time_w2 = store.register_randn("gen.time.mlp.w2", d, d, std, &mut r);
        let time_b2 = store.register_zeros("gen.time.mlp.b2", 1, d);
        let ctx_w1 = store.register_randn("gen.ctx_mlp.w1", d, d, std, &mut r);
        let ctx_b1 = store.register_zeros("gen.ctx_mlp.b1", 1, d);
        let ctx_w2 = store.register_randn("gen.ctx_mlp.w2", d, d, std, &mut r);
        let ctx_b2 = store.register_zeros("gen.ctx_mlp.b2", 1, d);
        let bos = store.register_randn("gen.bos", 1, d, std, &mut r);
        let sid_emb = [
            store.register_randn("gen.sid_emb.0", config.vocab[0], d, std, &mut r),
            store.register_randn("gen.sid_emb.1", config.vocab[1], d, std, &mut r),
            store.register_randn("gen.sid_emb.2", config.vocab[2], d, std, &mut r),
        ];
        let head_w = [
            store.register_randn("gen.head.0.w", d, config.vocab[0], std, &mut r),
            store.register_randn("gen.head.1.w", d, config.vocab[1], std, &mut r),
            store.register_randn("gen.head.2.w", d, config.vocab[2], std, &mut r),
        ];
        let head_b = [
            store.register_zeros("gen.head.0.b", 1, config.vocab[0]),
            store.register_zeros("gen.head.1.b", 1, config.vocab[1]),
            store.register_zeros("gen.head.2.b", 1, config.vocab[2]),
        ];

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(BlockIds {
                cross: attn(&mut store, &format!("gen.l{l}.cross"), &mut r),
                selfa: attn(&mut store, &format!("gen.l{l}.self"), &mut r),
                ffn: ffn(&mut store, &format!("gen.l{l}.ffn"), &mut r),
            });
        }

        // Lite decoders alias the first main layer's attention; FFNs private.
        let mtp_module =
            |store: &mut ParamStore, k: usize, r: &mut rand_chacha::ChaCha8Rng| MtpIds {
                fuse_w1: store.register_randn(&format!("gen.mtp{k}.fuse.w1"), 2 * d, d, std, r),
                fuse_b1: store.register_zeros(&format!("gen.mtp{k}.fuse.b1"), 1, d),
                fuse_w2: store.register_randn(&format!("gen.mtp{k}.fuse.w2"), d, d, std, r),
                fuse_b2: store.register_zeros(&format!("gen.mtp{k}.fuse.b2"), 1, d),
                block: BlockIds {
                    cross: alias_attn(store, &format!("gen.mtp{k}.cross"), &layers[0].cross),
                    selfa: alias_attn(store, &format!("gen.mtp{k}.self"), &layers[0].selfa),
                    ffn: ffn(store, &format!("gen.mtp{k}.ffn"), r),
                },
            };
        let mtp = [
            mtp_module(&mut store, 1, &mut r),
            mtp_module(&mut store, 2, &mut r),
        ];

        let ids = GenIds {
            author_emb,
            item_w,
            item_b,
            seqtype_emb,
            hour_emb,
            dow_emb,
            dom_emb,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            ctx_w1,
            ctx_b1,
            ctx_w2,
            ctx_b2,
            bos,
            sid_emb,
            head_w,
            head_b,
            layers,
            mtp,
        };
        Ok(GeneratorModel {
            store,
            config: config.clone(),
            num_authors,
            ids,
        })
    }

    /// Rebind ids against a store loaded from a checkpoint. Aliases survive
    /// because both names resolve to one tensor slot.
    pub fn from_store(config: &ModelConfig, num_authors: usize, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let attn = |s: &ParamStore, prefix: &str| -> Result<AttnIds> {
            Ok(AttnIds {
                wq: s.lookup(&format!("{prefix}.wq"))?,
                wk: s.lookup(&format!("{prefix}.wk"))?,
                wv: s.lookup(&format!("{prefix}.wv"))?,
                wo: s.lookup(&format!("{prefix}.wo"))?,
                gate: s.lookup(&format!("{prefix}.gate"))?,
                q_gain: s.lookup(&format!("{prefix}.q_gain"))?,
                k_gain: s.lookup(&format!("{prefix}.k_gain"))?,
                norm_gain: s.lookup(&format!("{prefix}.norm_gain"))?,
            })
        };
        let ffn = |s: &ParamStore, prefix: &str| -> Result<FfnIds> {
            Ok(FfnIds {
                w1: s.lookup(&format!("{prefix}.w1"))?,
                b1: s.lookup(&format!("{prefix}.b1"))?,
                w2: s.lookup(&format!("{prefix}.w2"))?,
                b2: s.lookup(&format!("{prefix}.b2"))?,
                norm_gain: s.lookup(&format!("{prefix}.norm_gain"))?,
            })
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(BlockIds {
                cross: attn(&store, &format!("gen.l{l}.cross"))?,
                selfa: attn(&store, &format!("gen.l{l}.self"))?,
                ffn: ffn(&store, &format!("gen.l{l}.ffn"))?,
            });
        }
        let mtp_module = |s: &ParamStore, k: usize| -> Result<MtpIds> {
            Ok(MtpIds {
                fuse_w1: s.lookup(&format!("gen.mtp{k}.fuse.w1"))?,
                fuse_b1: s.lookup(&format!("gen.mtp{k}.fuse.b1"))?,
                fuse_w2: s.lookup(&format!("gen.mtp{k}.fuse.w2"))?,
                fuse_b2: s.lookup(&format!("gen.mtp{k}.fuse.b2"))?,
                block: BlockIds {
                    cross: attn(s, &format!("gen.mtp{k}.cross"))?,
                    selfa: attn(s, &format!("gen.mtp{k}.self"))?,
                    ffn: ffn(s, &format!("gen.mtp{k}.ffn"))?,
                },
            })
        };
        let ids = GenIds {
            author_emb: store.lookup("gen.author_emb")?,
            item_w: store.lookup("gen.item_proj.w")?,
            item_b: store.lookup("gen.item_proj.b")?,
            seqtype_emb: store.lookup("gen.seqtype_emb")?,
            hour_emb: store.lookup("gen.time.hour_emb")?,
            dow_emb: store.lookup("gen.time.dow_emb")?,
            dom_emb: store.lookup("gen.time.dom_emb")?,
            time_w1: store.lookup("gen.time.mlp.w1")?,
            time_b1: store.lookup("gen.time.mlp.b1")?,
            time_w2: store.lookup("gen.time.mlp.w2")?,
            time_b2: store.lookup("gen.time.mlp.b2")?,
            ctx_w1: store.lookup("gen.ctx_mlp.w1")?,
            ctx_b1: store.lookup("gen.ctx_mlp.b1")?,
            ctx_w2: store.lookup("gen.ctx_mlp.w2")?,
            ctx_b2: store.lookup("gen.ctx_mlp.b2")?,
            bos: store.lookup("gen.bos")?,
            sid_emb: [
                store.lookup("gen.sid_emb.0")?,
                store.lookup("gen.sid_emb.1")?,
                store.lookup("gen.sid_emb.2")?,
            ],
            head_w: [
                store.lookup("gen.head.0.w")?,
                store.lookup("gen.head.1.w")?,
                store.lookup("gen.head.2.w")?,
            ],
            head_b: [
                store.lookup("gen.head.0.b")?,
                store.lookup("gen.head.1.b")?,
                store.lookup("gen.head.2.b")?,
            ],
            layers,
            mtp: [mtp_module(&store, 1)?, mtp_module(&store, 2)?],
        };
        Ok(GeneratorModel {
            store,
            config: config.clone(),
            num_authors,
            ids,
        })
    }

    /// Index of the learned pad row inside the author embedding table.
    pub fn pad_author_index(&self) -> usize {
        self.num_authors
    }

    pub(crate) fn layer_ids(&self) -> &[BlockIds] {
        &self.ids.layers
    }

    /// Block parameter set of MTP module 1 or 2 (attention aliased to main
    /// layer 0, FFN private).
    pub(crate) fn mtp_block_ids(&self, module: usize) -> BlockIds {
        self.ids.mtp[module - 1].block
    }

    pub(crate) fn mtp_fuse_ids(&self, module: usize) -> (ParamId, ParamId, ParamId, ParamId) {
        let m = &self.ids.mtp[module - 1];
        (m.fuse_w1, m.fuse_b1, m.fuse_w2, m.fuse_b2)
    }

    pub(crate) fn head_ids(&self, level: usize) -> (ParamId, ParamId) {
        (self.ids.head_w[level], self.ids.head_b[level])
    }

    pub(crate) fn sid_emb_id(&self, level: usize) -> ParamId {
        self.ids.sid_emb[level]
    }

    pub fn clone_model(&self) -> Self {
        GeneratorModel {
            store: self.store.clone(),
            config: self.config.clone(),
            num_authors: self.num_authors,
            ids: self.ids.clone(),
        }
    }
}
