//! Tape-free forward for inference.
//!
//! Context encoding runs once per query (through the same tape code the
//! trainer uses, so E is identical by construction); the decode hot path is
//! hand-rolled incremental math with per-hypothesis KV caches. Key rows are
//! stored already QK-normalized so beam expansion only normalizes its own
//! query row.

use crate::error::Result;
use crate::generator::{BehaviorContext, GeneratorModel};
use crate::numerics::matrix::{dot, Matrix};
use crate::numerics::ops::{rms_norm, sigmoid, softmax, RMS_EPS};
use crate::numerics::tape::Tape;
use crate::numerics::ParamId;

/// Per-query constants: E, validity mask, anchor, and per-layer projected
/// (and normalized) cross-attention keys/values.
pub struct QueryContext {
    pub query_ts: u64,
    pub e: Matrix,
    pub valid: Vec<bool>,
    /// False when every context position is padding (cold start).
    pub has_context: bool,
    pub anchor: Vec<f64>,
    /// Per main layer.
    cross_k: Vec<Matrix>,
    cross_v: Vec<Matrix>,
}

/// Per-hypothesis self-attention cache: per layer, the appended (normalized)
/// key rows and value rows.
#[derive(Clone, Default)]
pub struct PrefixCache {
    k: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
}

impl PrefixCache {
    fn new(layers: usize) -> Self {
        PrefixCache {
            k: vec![Vec::new(); layers],
            v: vec![Vec::new(); layers],
        }
    }

    pub fn len_at(&self, layer: usize) -> usize {
        self.k[layer].len()
    }
}

pub struct FrozenForward<'a> {
    pub model: &'a GeneratorModel,
}

impl<'a> FrozenForward<'a> {
    pub fn new(model: &'a GeneratorModel) -> Self {
        FrozenForward { model }
    }

    fn p(&self, id: ParamId) -> &Matrix {
        self.model.store.get(id)
    }

    fn row_matmul(&self, x: &[f64], w: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; w.cols];
        for (j, v) in x.iter().enumerate() {
            if *v == 0.0 {
                continue;
            }
            for (o, wv) in out.iter_mut().zip(w.row(j)) {
                *o += v * wv;
            }
        }
        out
    }

    fn rms_row(&self, x: &[f64], gain: &Matrix) -> Vec<f64> {
        rms_norm(x, &gain.data, RMS_EPS).expect("gain length")
    }

    /// Per-head RMS-normalize a full-width key/query row in place, applying
    /// the shared head gain.
    fn qk_normalize(&self, row: &mut [f64], gain: &Matrix) {
        let d_h = self.model.config.head_dim();
        for h in 0..self.model.config.heads {
            let normed =
                rms_norm(&row[h * d_h..(h + 1) * d_h], &gain.data, RMS_EPS).expect("head slice");
            row[h * d_h..(h + 1) * d_h].copy_from_slice(&normed);
        }
    }

    /// Encode the behavior context, anchor, and per-layer cross K/V.
    pub fn encode_query(&self, ctx: &BehaviorContext) -> Result<QueryContext> {
        let mut tape = Tape::new();
        let (e_buf, valid) = self.model.encode_context_tape(&mut tape, ctx)?;
        let anchor_buf = self.model.anchor_tape(&mut tape, ctx.query_ts)?;
        let e = tape.value(e_buf).clone();
        let anchor = tape.value(anchor_buf).data.clone();

        let cfg = &self.model.config;
        let mut cross_k = Vec::with_capacity(cfg.layers);
        let mut cross_v = Vec::with_capacity(cfg.layers);
        for block in self.model.layer_ids() {
            let mut k = e.matmul(self.p(block.cross.wk))?;
            if cfg.qk_norm {
                let gain = self.p(block.cross.k_gain);
                for r in 0..k.rows {
                    let mut row = k.row(r).to_vec();
                    self.qk_normalize(&mut row, gain);
                    k.row_mut(r).copy_from_slice(&row);
                }
            }
            cross_k.push(k);
            cross_v.push(e.matmul(self.p(block.cross.wv))?);
        }
        let has_context = valid.iter().any(|v| *v);
        Ok(QueryContext {
            query_ts: ctx.query_ts,
            e,
            valid,
            has_context,
            anchor,
            cross_k,
            cross_v,
        })
    }

    pub fn fresh_cache(&self) -> PrefixCache {
        PrefixCache::new(self.model.config.layers)
    }

    /// Attention of one query row over pre-normalized key rows.
    fn attend_row(
        &self,
        q: &[f64],
        keys: &[Vec<f64>],
        values: &[Vec<f64>],
        valid: Option<&[bool]>,
    ) -> Vec<f64> {
        let cfg = &self.model.config;
        let d_h = cfg.head_dim();
        let scale = 1.0 / (d_h as f64).sqrt();
        let mut out = vec![0.0; cfg.dim];
        for h in 0..cfg.heads {
            let qh = &q[h * d_h..(h + 1) * d_h];
            let mut logits = Vec::with_capacity(keys.len());
            for (j, k) in keys.iter().enumerate() {
                if valid.map(|v| !v[j]).unwrap_or(false) {
                    logits.push(f64::NEG_INFINITY);
                } else {
                    logits.push(dot(qh, &k[h * d_h..(h + 1) * d_h]) * scale);
                }
            }
            let probs = softmax(&logits).expect("non-empty keys");
            let orow = &mut out[h * d_h..(h + 1) * d_h];
            for (p, v) in probs.iter().zip(values) {
                if *p == 0.0 {
                    continue;
                }
                for (o, x) in orow.iter_mut().zip(&v[h * d_h..(h + 1) * d_h]) {
                    *o += p * x;
                }
            }
        }
        out
    }

    /// Attention over a matrix of pre-normalized keys (the cross path).
    fn attend_matrix(&self, q: &[f64], keys: &Matrix, values: &Matrix, valid: &[bool]) -> Vec<f64> {
        let cfg = &self.model.config;
        let d_h = cfg.head_dim();
        let scale = 1.0 / (d_h as f64).sqrt();
        let mut out = vec![0.0; cfg.dim];
        for h in 0..cfg.heads {
            let qh = &q[h * d_h..(h + 1) * d_h];
            let mut logits = Vec::with_capacity(keys.rows);
            for j in 0..keys.rows {
                if valid[j] {
                    logits.push(dot(qh, &keys.row(j)[h * d_h..(h + 1) * d_h]) * scale);
                } else {
                    logits.push(f64::NEG_INFINITY);
                }
            }
            let probs = softmax(&logits).expect("non-empty keys");
            let orow = &mut out[h * d_h..(h + 1) * d_h];
            for (j, p) in probs.iter().enumerate() {
                if *p == 0.0 {
                    continue;
                }
                for (o, x) in orow.iter_mut().zip(&values.row(j)[h * d_h..(h + 1) * d_h]) {
                    *o += p * x;
                }
            }
        }
        out
    }

    /// One decoder block applied to one new position. `layer` selects the
    /// layer's cross K/V in the query context and the self cache lane; the
    /// parameter set may be the layer's own or an aliased lite block's.
    fn block_step(
        &self,
        x: &mut [f64],
        qc: &QueryContext,
        cache: &mut PrefixCache,
        layer: usize,
        block: &crate::generator::BlockIds,
    ) {
        let cfg = &self.model.config;
        let gated = cfg.gated_attention;

        // Cross-attention to E; skipped entirely for an all-padded context,
        // mirroring the training path.
        if qc.has_context {
            let xn = self.rms_row(x, self.p(block.cross.norm_gain));
            let mut q = self.row_matmul(&xn, self.p(block.cross.wq));
            if cfg.qk_norm {
                self.qk_normalize(&mut q, self.p(block.cross.q_gain));
            }
            let mut branch =
                self.attend_matrix(&q, &qc.cross_k[layer], &qc.cross_v[layer], &qc.valid);
            if gated {
                let score = self.row_matmul(&xn, self.p(block.cross.gate));
                for (b, s) in branch.iter_mut().zip(score) {
                    *b *= sigmoid(s);
                }
            }
            let branch = self.row_matmul(&branch, self.p(block.cross.wo));
            for (xv, b) in x.iter_mut().zip(branch) {
                *xv += b;
            }
        }

        // Causal self-attention over cached positions plus this one.
        let xn = self.rms_row(x, self.p(block.selfa.norm_gain));
        let mut q = self.row_matmul(&xn, self.p(block.selfa.wq));
        if cfg.qk_norm {
            self.qk_normalize(&mut q, self.p(block.selfa.q_gain));
        }
        let mut k_new = self.row_matmul(&xn, self.p(block.selfa.wk));
        if cfg.qk_norm {
            self.qk_normalize(&mut k_new, self.p(block.selfa.k_gain));
        }
        let v_new = self.row_matmul(&xn, self.p(block.selfa.wv));
        cache.k[layer].push(k_new);
        cache.v[layer].push(v_new);
        let mut branch = self.attend_row(&q, &cache.k[layer], &cache.v[layer], None);
        if gated {
            let score = self.row_matmul(&xn, self.p(block.selfa.gate));
            for (b, s) in branch.iter_mut().zip(score) {
                *b *= sigmoid(s);
            }
        }
        let branch = self.row_matmul(&branch, self.p(block.selfa.wo));
        for (xv, b) in x.iter_mut().zip(branch) {
            *xv += b;
        }

        // FFN.
        let xn = self.rms_row(x, self.p(block.ffn.norm_gain));
        let mut hid = self.row_matmul(&xn, self.p(block.ffn.w1));
        for (h, b) in hid.iter_mut().zip(&self.p(block.ffn.b1).data) {
            *h = sigmoid(*h + b);
        }
        let mut out = self.row_matmul(&hid, self.p(block.ffn.w2));
        for (o, b) in out.iter_mut().zip(&self.p(block.ffn.b2).data) {
            *o += b;
        }
        for (xv, b) in x.iter_mut().zip(out) {
            *xv += b;
        }
    }

    /// Run one position through the full L-layer main decoder.
    pub fn main_step(&self, qc: &QueryContext, cache: &mut PrefixCache, input: &[f64]) -> Vec<f64> {
        let mut x = input.to_vec();
        for (layer, block) in self.model.layer_ids().iter().enumerate() {
            self.block_step(&mut x, qc, cache, layer, block);
        }
        x
    }

    /// Run the lite block of MTP module `k` (1 or 2). It reads and extends
    /// the layer-0 cache lane: that is the cache the aliased parameters make
    /// reusable.
    pub fn lite_step(
        &self,
        qc: &QueryContext,
        cache: &mut PrefixCache,
        module: usize,
        input: &[f64],
    ) -> Vec<f64> {
        assert!(
            cache.len_at(0) >= module,
            "lite module {module} needs a layer-0 cache with ≥ {module} rows, found {}",
            cache.len_at(0)
        );
        let mut x = input.to_vec();
        let block = self.model.mtp_block_ids(module);
        self.block_step(&mut x, qc, cache, 0, &block);
        x
    }

    /// Fusion MLP of MTP module `k`: concat(hidden, token embedding) → d.
    pub fn fuse(&self, module: usize, hidden: &[f64], token_emb: &[f64]) -> Vec<f64> {
        let (w1, b1, w2, b2) = self.model.mtp_fuse_ids(module);
        let mut cat = Vec::with_capacity(hidden.len() + token_emb.len());
        cat.extend_from_slice(hidden);
        cat.extend_from_slice(token_emb);
        let mut hid = self.row_matmul(&cat, self.p(w1));
        for (h, b) in hid.iter_mut().zip(&self.p(b1).data) {
            *h = sigmoid(*h + b);
        }
        let mut out = self.row_matmul(&hid, self.p(w2));
        for (o, b) in out.iter_mut().zip(&self.p(b2).data) {
            *o += b;
        }
        out
    }

    pub fn head_logits(&self, level: usize, hidden: &[f64]) -> Vec<f64> {
        let (w, b) = self.model.head_ids(level);
        let mut out = self.row_matmul(hidden, self.p(w));
        for (o, bv) in out.iter_mut().zip(&self.p(b).data) {
            *o += bv;
        }
        out
    }

    pub fn sid_embedding(&self, level: usize, code: u16) -> Vec<f64> {
        self.p(self.model.sid_emb_id(level))
            .row(code as usize)
            .to_vec()
    }

    /// Teacher-forced sequence log-probability under the main decoder:
    /// Σ_i log p(q^i | [BOS], q^{<i}, E).
    pub fn sequence_logprob(&self, qc: &QueryContext, sid: crate::tokenizer::SemanticId) -> f64 {
        let mut cache = self.fresh_cache();
        let mut lp = 0.0;
        let mut input = qc.anchor.clone();
        for level in 0..3 {
            let h = self.main_step(qc, &mut cache, &input);
            let logits = self.head_logits(level, &h);
            let lse = crate::numerics::ops::log_sum_exp(&logits);
            lp += logits[sid.0[level] as usize] - lse;
            if level < 2 {
                input = self.sid_embedding(level, sid.0[level]);
            }
        }
        lp
    }
}
