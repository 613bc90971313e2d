//! Tape forward passes: context encoding, decoder blocks, sequential MTP,
//! and the training losses.

use crate::error::Result;
use crate::generator::{AttnIds, BlockIds, GeneratorModel, MtpIds};
use crate::numerics::matrix::Matrix;
use crate::numerics::ops::RMS_EPS;
use crate::numerics::tape::{BufId, Tape};
use crate::tokenizer::SemanticId;

use super::context::BehaviorContext;

const MASK_OFF: f64 = -1e30;

pub(crate) enum KvSrc {
    /// Cross-attention: keys/values projected from an external matrix (E,
    /// unnormalized, per the lazy decoder contract).
    External(BufId),
    /// Self-attention: keys/values from the normalized input itself,
    /// optionally preceded by already-projected prefix rows.
    SelfSame { prefix: Option<(BufId, BufId)> },
}

pub(crate) struct AttnOut {
    pub out: BufId,
    /// Projected per-position key/value rows (pre head-split), the cache
    /// currency the MTP path reuses.
    pub k_rows: BufId,
    pub v_rows: BufId,
    pub max_qk: f64,
}

#[derive(Debug)]
pub struct DecoderOut {
    /// Per-position logits over (N_0, N_1, N_2).
    pub logits: Vec<BufId>,
    /// Final hidden states, one row per input position.
    pub h_final: BufId,
    /// First-layer self-attention K/V rows (cache handed to lite decoders).
    pub l0_self_k: BufId,
    pub l0_self_v: BufId,
    pub max_qk: f64,
}

#[derive(Debug)]
pub struct MtpOut {
    pub main: DecoderOut,
    /// Module 1 logits: q^1 at slot 0, q^2 at slot 1.
    pub mtp1_logits: [BufId; 2],
    /// Module 2 logits: q^2.
    pub mtp2_logits: BufId,
    pub max_qk: f64,
}

impl GeneratorModel {
    /// Multi-head attention sublayer. Returns the branch output (before the
    /// residual add), the projected K/V rows, and the largest |QK logit|.
    pub(crate) fn attention_tape(
        &self,
        tape: &mut Tape,
        x: BufId,
        kv: KvSrc,
        ids: &AttnIds,
        mask: &Matrix,
        gated: bool,
    ) -> Result<AttnOut> {
        let cfg = &self.config;
        let d_h = cfg.head_dim();
        let norm_gain = tape.param(&self.store, ids.norm_gain);
        let xn = tape.rms_norm(x, norm_gain, RMS_EPS)?;
        let wq = tape.param(&self.store, ids.wq);
        let wk = tape.param(&self.store, ids.wk);
        let wv = tape.param(&self.store, ids.wv);
        let q = tape.matmul(xn, wq)?;
        let (kv_input, prefix) = match kv {
            KvSrc::External(e) => (e, None),
            KvSrc::SelfSame { prefix } => (xn, prefix),
        };
        let k_new = tape.matmul(kv_input, wk)?;
        let v_new = tape.matmul(kv_input, wv)?;
        let (k_full, v_full) = match prefix {
            Some((pk, pv)) => (
                tape.concat_rows(&[pk, k_new])?,
                tape.concat_rows(&[pv, v_new])?,
            ),
            None => (k_new, v_new),
        };

        let q_gain = tape.param(&self.store, ids.q_gain);
        let k_gain = tape.param(&self.store, ids.k_gain);
        let mask_buf = tape.constant(mask.clone());
        let scale = 1.0 / (d_h as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut max_qk = 0.0f64;
        for h in 0..cfg.heads {
            let mut qh = tape.slice_cols(q, h * d_h, d_h)?;
            let mut kh = tape.slice_cols(k_full, h * d_h, d_h)?;
            if cfg.qk_norm {
                qh = tape.rms_norm(qh, q_gain, RMS_EPS)?;
                kh = tape.rms_norm(kh, k_gain, RMS_EPS)?;
            }
            let logits = tape.matmul_tb(qh, kh)?;
            let logits = tape.scale(logits, scale);
            max_qk = max_qk.max(tape.max_abs(logits));
            let masked = tape.add(logits, mask_buf)?;
            let probs = tape.softmax(masked);
            let vh = tape.slice_cols(v_full, h * d_h, d_h)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let gated_cat = if gated {
            let gw = tape.param(&self.store, ids.gate);
            let scores_lin = tape.matmul(xn, gw)?;
            let scores = tape.sigmoid(scores_lin);
            tape.mul(cat, scores)?
        } else {
            cat
        };
        let wo = tape.param(&self.store, ids.wo);
        let out = tape.matmul(gated_cat, wo)?;
        Ok(AttnOut {
            out,
            k_rows: k_new,
            v_rows: v_new,
            max_qk,
        })
    }

    fn ffn_tape(&self, tape: &mut Tape, x: BufId, ids: &super::FfnIds) -> Result<BufId> {
        let gain = tape.param(&self.store, ids.norm_gain);
        let xn = tape.rms_norm(x, gain, RMS_EPS)?;
        let w1 = tape.param(&self.store, ids.w1);
        let b1 = tape.param(&self.store, ids.b1);
        let w2 = tape.param(&self.store, ids.w2);
        let b2 = tape.param(&self.store, ids.b2);
        tape.mlp2(xn, w1, b1, w2, b2)
    }

    /// One decoder block: pre-norm residual cross-attention, causal
    /// self-attention, FFN. Returns the new hidden state, the self-attention
    /// K/V rows, and the block's max |QK logit|.
    ///
    /// A fully-padded context has no valid cross keys; the cross sublayer is
    /// skipped so cold-start queries decode from the anchor and self path
    /// alone (identically on the incremental inference path).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn block_tape(
        &self,
        tape: &mut Tape,
        h: BufId,
        e: BufId,
        e_mask: &Matrix,
        has_context: bool,
        self_mask: &Matrix,
        self_prefix: Option<(BufId, BufId)>,
        block: &BlockIds,
    ) -> Result<(BufId, BufId, BufId, f64)> {
        let gated = self.config.gated_attention;
        let mut max_qk = 0.0f64;
        let h = if has_context {
            let cross =
                self.attention_tape(tape, h, KvSrc::External(e), &block.cross, e_mask, gated)?;
            max_qk = max_qk.max(cross.max_qk);
            tape.add(h, cross.out)?
        } else {
            h
        };
        let selfa = self.attention_tape(
            tape,
            h,
            KvSrc::SelfSame {
                prefix: self_prefix,
            },
            &block.selfa,
            self_mask,
            gated,
        )?;
        let h = tape.add(h, selfa.out)?;
        let f = self.ffn_tape(tape, h, &block.ffn)?;
        let h = tape.add(h, f)?;
        Ok((h, selfa.k_rows, selfa.v_rows, max_qk.max(selfa.max_qk)))
    }

    /// Encode a behavior context into E (|S| × d) plus the key-validity mask.
    pub fn encode_context_tape(
        &self,
        tape: &mut Tape,
        ctx: &BehaviorContext,
    ) -> Result<(BufId, Vec<bool>)> {
        let ids = &self.ids;
        let n = ctx.positions.len();
        let authors: Vec<usize> = ctx.positions.iter().map(|p| p.author).collect();
        let types: Vec<usize> = ctx.positions.iter().map(|p| p.seq_type).collect();
        let hours: Vec<usize> = ctx.positions.iter().map(|p| p.hour).collect();
        let dows: Vec<usize> = ctx.positions.iter().map(|p| p.dow).collect();
        let doms: Vec<usize> = ctx.positions.iter().map(|p| p.dom).collect();
        let mut ia = Matrix::zeros(n, self.config.ia_dim);
        for (r, p) in ctx.positions.iter().enumerate() {
            ia.row_mut(r).copy_from_slice(&p.ia);
        }

        let author_emb = tape.param(&self.store, ids.author_emb);
        let a = tape.gather(author_emb, &authors)?;
        let ia = tape.constant(ia);
        let feats = tape.concat_cols(&[a, ia])?;
        let iw = tape.param(&self.store, ids.item_w);
        let ib = tape.param(&self.store, ids.item_b);
        let x = tape.linear(feats, iw, ib)?;
        let type_emb = tape.param(&self.store, ids.seqtype_emb);
        let t = tape.gather(type_emb, &types)?;
        let x = tape.add(x, t)?;

        // Multi-granular time bias, added to each item feature.
        let th = {
            let e = tape.param(&self.store, ids.hour_emb);
            tape.gather(e, &hours)?
        };
        let td = {
            let e = tape.param(&self.store, ids.dow_emb);
            tape.gather(e, &dows)?
        };
        let tm = {
            let e = tape.param(&self.store, ids.dom_emb);
            tape.gather(e, &doms)?
        };
        let tcat = tape.concat_cols(&[th, td, tm])?;
        let tw1 = tape.param(&self.store, ids.time_w1);
        let tb1 = tape.param(&self.store, ids.time_b1);
        let tw2 = tape.param(&self.store, ids.time_w2);
        let tb2 = tape.param(&self.store, ids.time_b2);
        let tbias = tape.mlp2(tcat, tw1, tb1, tw2, tb2)?;
        let x_ta = tape.add(x, tbias)?;

        let cw1 = tape.param(&self.store, ids.ctx_w1);
        let cb1 = tape.param(&self.store, ids.ctx_b1);
        let cw2 = tape.param(&self.store, ids.ctx_w2);
        let cb2 = tape.param(&self.store, ids.ctx_b2);
        let e = tape.mlp2(x_ta, cw1, cb1, cw2, cb2)?;
        let mask = ctx.positions.iter().map(|p| !p.is_pad).collect();
        Ok((e, mask))
    }

    /// Generation anchor: the BOS embedding plus the temporal bias of the
    /// query moment.
    pub fn anchor_tape(&self, tape: &mut Tape, query_ts: u64) -> Result<BufId> {
        let ids = &self.ids;
        let (hour, dow, dom) = super::context::time_buckets(query_ts);
        let bos = tape.param(&self.store, ids.bos);
        let he = tape.param(&self.store, ids.hour_emb);
        let de = tape.param(&self.store, ids.dow_emb);
        let me = tape.param(&self.store, ids.dom_emb);
        let th = tape.gather(he, &[hour])?;
        let td = tape.gather(de, &[dow])?;
        let tm = tape.gather(me, &[dom])?;
        let tcat = tape.concat_cols(&[th, td, tm])?;
        let tw1 = tape.param(&self.store, ids.time_w1);
        let tb1 = tape.param(&self.store, ids.time_b1);
        let tw2 = tape.param(&self.store, ids.time_w2);
        let tb2 = tape.param(&self.store, ids.time_b2);
        let tbias = tape.mlp2(tcat, tw1, tb1, tw2, tb2)?;
        tape.add(bos, tbias)
    }

    fn cross_mask(&self, rows: usize, e_mask: &[bool]) -> Matrix {
        let mut m = Matrix::zeros(rows, e_mask.len());
        for r in 0..rows {
            for (c, ok) in e_mask.iter().enumerate() {
                if !ok {
                    m.set(r, c, MASK_OFF);
                }
            }
        }
        m
    }

    /// Causal mask for `rows` queries whose first absolute position is
    /// `offset`, over `offset + rows` keys.
    fn causal_mask(rows: usize, offset: usize) -> Matrix {
        let cols = offset + rows;
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in offset + r + 1..cols {
                m.set(r, c, MASK_OFF);
            }
        }
        m
    }

    fn head_logits(&self, tape: &mut Tape, h: BufId, pos: usize, level: usize) -> Result<BufId> {
        let row = tape.slice_rows(h, pos, 1)?;
        let w = tape.param(&self.store, self.ids.head_w[level]);
        let b = tape.param(&self.store, self.ids.head_b[level]);
        tape.linear(row, w, b)
    }

    /// Teacher-forced main decoder over ([BOS], q^0, q^1) emitting logits for
    /// (q^0, q^1, q^2).
    pub fn decoder_forward_tape(
        &self,
        tape: &mut Tape,
        e: BufId,
        e_mask: &[bool],
        teacher: SemanticId,
        query_ts: u64,
    ) -> Result<DecoderOut> {
        let ids = &self.ids;
        for (l, &v) in teacher.0.iter().enumerate().take(2) {
            if v as usize >= self.config.vocab[l] {
                return Err(crate::error::Error::Index(format!(
                    "teacher token {v} out of level-{l} vocabulary {}",
                    self.config.vocab[l]
                )));
            }
        }
        let anchor = self.anchor_tape(tape, query_ts)?;
        let e0 = {
            let t = tape.param(&self.store, ids.sid_emb[0]);
            tape.gather(t, &[teacher.0[0] as usize])?
        };
        let e1 = {
            let t = tape.param(&self.store, ids.sid_emb[1]);
            tape.gather(t, &[teacher.0[1] as usize])?
        };
        let mut h = tape.concat_rows(&[anchor, e0, e1])?;

        let e_mask_m = self.cross_mask(3, e_mask);
        let has_context = e_mask.iter().any(|v| *v);
        let self_mask = Self::causal_mask(3, 0);
        let mut l0_kv = None;
        let mut max_qk = 0.0f64;
        for (li, block) in ids.layers.iter().enumerate() {
            let (nh, sk, sv, qk) =
                self.block_tape(tape, h, e, &e_mask_m, has_context, &self_mask, None, block)?;
            h = nh;
            max_qk = max_qk.max(qk);
            if li == 0 {
                l0_kv = Some((sk, sv));
            }
        }
        let (l0_self_k, l0_self_v) = l0_kv.expect("at least one layer");
        let logits = (0..3)
            .map(|p| self.head_logits(tape, h, p, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderOut {
            logits,
            h_final: h,
            l0_self_k,
            l0_self_v,
            max_qk,
        })
    }

    fn fuse_tape(
        &self,
        tape: &mut Tape,
        hidden_rows: BufId,
        token_rows: BufId,
        mtp: &MtpIds,
    ) -> Result<BufId> {
        let cat = tape.concat_cols(&[hidden_rows, token_rows])?;
        let w1 = tape.param(&self.store, mtp.fuse_w1);
        let b1 = tape.param(&self.store, mtp.fuse_b1);
        let w2 = tape.param(&self.store, mtp.fuse_w2);
        let b2 = tape.param(&self.store, mtp.fuse_b2);
        tape.mlp2(cat, w1, b1, w2, b2)
    }

    /// Full sequential-MTP teacher pass: main decoder, then the two lite
    /// modules chained on its hidden states, reusing the first layer's
    /// self-attention rows as their cache prefix.
    pub fn mtp_forward_tape(
        &self,
        tape: &mut Tape,
        e: BufId,
        e_mask: &[bool],
        target: SemanticId,
        query_ts: u64,
    ) -> Result<MtpOut> {
        let ids = &self.ids;
        if target.0[2] as usize >= self.config.vocab[2] {
            return Err(crate::error::Error::Index(format!(
                "teacher token {} out of level-2 vocabulary {}",
                target.0[2], self.config.vocab[2]
            )));
        }
        let main = self.decoder_forward_tape(tape, e, e_mask, target, query_ts)?;
        let mut max_qk = main.max_qk;

        // Cache prefix for the lite decoders: main layer-0 K/V of the anchor.
        let main_k0 = tape.slice_rows(main.l0_self_k, 0, 1)?;
        let main_v0 = tape.slice_rows(main.l0_self_v, 0, 1)?;

        // Module 1 consumes (h_p, Emb(q^p)) at p = 0, 1 → absolute pos 1, 2.
        let h01 = tape.slice_rows(main.h_final, 0, 2)?;
        let tok01 = {
            let t0 = tape.param(&self.store, ids.sid_emb[0]);
            let r0 = tape.gather(t0, &[target.0[0] as usize])?;
            let t1 = tape.param(&self.store, ids.sid_emb[1]);
            let r1 = tape.gather(t1, &[target.0[1] as usize])?;
            tape.concat_rows(&[r0, r1])?
        };
        let x1 = self.fuse_tape(tape, h01, tok01, &ids.mtp[0])?;
        let has_context = e_mask.iter().any(|v| *v);
        let e_mask_2 = self.cross_mask(2, e_mask);
        let self_mask_2 = Self::causal_mask(2, 1);
        let (h1, k1, v1, qk1) = self.block_tape(
            tape,
            x1,
            e,
            &e_mask_2,
            has_context,
            &self_mask_2,
            Some((main_k0, main_v0)),
            &ids.mtp[0].block,
        )?;
        max_qk = max_qk.max(qk1);
        let mtp1_logits = [
            self.head_logits(tape, h1, 0, 1)?,
            self.head_logits(tape, h1, 1, 2)?,
        ];

        // Module 2 consumes (h'^1_0, Emb(q^1)) at absolute pos 2; its cache
        // prefix is the anchor row plus module 1's first K/V row.
        let h1_row0 = tape.slice_rows(h1, 0, 1)?;
        let tok1 = {
            let t = tape.param(&self.store, ids.sid_emb[1]);
            tape.gather(t, &[target.0[1] as usize])?
        };
        let x2 = self.fuse_tape(tape, h1_row0, tok1, &ids.mtp[1])?;
        let k1_row0 = tape.slice_rows(k1, 0, 1)?;
        let v1_row0 = tape.slice_rows(v1, 0, 1)?;
        let prefix_k = tape.concat_rows(&[main_k0, k1_row0])?;
        let prefix_v = tape.concat_rows(&[main_v0, v1_row0])?;
        let e_mask_1 = self.cross_mask(1, e_mask);
        let self_mask_1 = Self::causal_mask(1, 2);
        let (h2, _, _, qk2) = self.block_tape(
            tape,
            x2,
            e,
            &e_mask_1,
            has_context,
            &self_mask_1,
            Some((prefix_k, prefix_v)),
            &ids.mtp[1].block,
        )?;
        max_qk = max_qk.max(qk2);
        let mtp2_logits = self.head_logits(tape, h2, 0, 2)?;

        Ok(MtpOut {
            main,
            mtp1_logits,
            mtp2_logits,
            max_qk,
        })
    }

    /// Σ over the three positions of the clamped cross-entropy.
    pub fn ntp_loss_tape(
        &self,
        tape: &mut Tape,
        out: &DecoderOut,
        target: SemanticId,
    ) -> Result<BufId> {
        let mut total = None;
        for (p, &logits) in out.logits.iter().enumerate() {
            let ce = tape.ce_sum(logits, &[target.0[p] as usize])?;
            total = Some(match total {
                None => ce,
                Some(t) => tape.add(t, ce)?,
            });
        }
        Ok(total.expect("three positions"))
    }

    /// w_0·L_main + w_1·L_MTP1 + w_2·L_MTP2, plus the unweighted parts.
    pub fn mtp_loss_tape(
        &self,
        tape: &mut Tape,
        out: &MtpOut,
        target: SemanticId,
    ) -> Result<(BufId, [f64; 3])> {
        let l_main = self.ntp_loss_tape(tape, &out.main, target)?;
        let ce1a = tape.ce_sum(out.mtp1_logits[0], &[target.0[1] as usize])?;
        let ce1b = tape.ce_sum(out.mtp1_logits[1], &[target.0[2] as usize])?;
        let l1 = tape.add(ce1a, ce1b)?;
        let l2 = tape.ce_sum(out.mtp2_logits, &[target.0[2] as usize])?;
        let [w0, w1, w2] = self.config.mtp_weights;
        let parts = [
            tape.scalar_value(l_main),
            tape.scalar_value(l1),
            tape.scalar_value(l2),
        ];
        let s0 = tape.scale(l_main, w0);
        let s1 = tape.scale(l1, w1);
        let s2 = tape.scale(l2, w2);
        let t = tape.add(s0, s1)?;
        let total = tape.add(t, s2)?;
        Ok((total, parts))
    }
}
