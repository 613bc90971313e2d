//! Preference-optimization losses on the tape.

use crate::error::{Error, Result};
use crate::generator::GeneratorModel;
use crate::numerics::tape::{BufId, Tape};
use crate::tokenizer::SemanticId;

use super::group::GroupSample;

/// Teacher-forced sequence log-probability as a tape node:
/// Σ_i (logits_i[q^i] − logsumexp(logits_i)). Computed without clamping so
/// preference gradients stay exact, and without ln(softmax) so underflowing
/// classes cannot poison the value.
pub fn sequence_logp_tape(
    model: &GeneratorModel,
    tape: &mut Tape,
    e: BufId,
    e_mask: &[bool],
    sid: SemanticId,
    query_ts: u64,
) -> Result<BufId> {
    let out = model.decoder_forward_tape(tape, e, e_mask, sid, query_ts)?;
    let mut total: Option<BufId> = None;
    for (level, &logits) in out.logits.iter().enumerate() {
        let picked = tape.slice_cols(logits, sid.0[level] as usize, 1)?;
        let lse = tape.log_sum_exp(logits);
        let neg_lse = tape.scale(lse, -1.0);
        let lp = tape.add(picked, neg_lse)?;
        total = Some(match total {
            None => lp,
            Some(t) => tape.add(t, lp)?,
        });
    }
    Ok(total.expect("three levels"))
}

/// −ln σ(β·[Δ_pos − Δ_neg]) where Δ_x = log π_θ(x|q) − log π_ref(x|q). The
/// positive/negative pair is the highest/lowest advantage in the group (ties
/// break to the earlier beam rank). Degenerate groups yield None.
pub fn dpo_loss_tape(
    model: &GeneratorModel,
    tape: &mut Tape,
    e: BufId,
    e_mask: &[bool],
    group: &GroupSample,
    beta: f64,
) -> Result<Option<BufId>> {
    if beta <= 0.0 {
        return Err(Error::Config("dpo beta must be positive".into()));
    }
    if group.responses.iter().all(|r| r.advantage == 0.0) {
        return Ok(None);
    }
    let mut pos = 0;
    let mut neg = 0;
    for (i, r) in group.responses.iter().enumerate() {
        if r.advantage > group.responses[pos].advantage {
            pos = i;
        }
        if r.advantage < group.responses[neg].advantage {
            neg = i;
        }
    }
    let rp = &group.responses[pos];
    let rn = &group.responses[neg];
    let lp_pos = sequence_logp_tape(model, tape, e, e_mask, rp.sid, group.query_ts)?;
    let lp_neg = sequence_logp_tape(model, tape, e, e_mask, rn.sid, group.query_ts)?;
    // margin = β([lp_pos − ref_pos] − [lp_neg − ref_neg])
    let neg_lp_neg = tape.scale(lp_neg, -1.0);
    let diff = tape.add(lp_pos, neg_lp_neg)?;
    let diff = tape.add_const(diff, rn.ref_logp - rp.ref_logp);
    let margin = tape.scale(diff, beta);
    // −ln σ(m) = softplus(−m)
    let neg_margin = tape.scale(margin, -1.0);
    Ok(Some(tape.softplus(neg_margin)))
}

/// −(1/G) Σ min(ρ_i·A_i, clip(ρ_i, 1−ε, 1+ε)·A_i) with ρ_i the policy/
/// reference probability ratio. Responses with non-finite ratios are dropped
/// with a warning. Returns None if nothing survives.
pub fn grpo_loss_tape(
    model: &GeneratorModel,
    tape: &mut Tape,
    e: BufId,
    e_mask: &[bool],
    group: &GroupSample,
    epsilon: f64,
) -> Result<Option<BufId>> {
    if !(0.0..1.0).contains(&epsilon) || epsilon == 0.0 {
        return Err(Error::Config("grpo epsilon must lie in (0,1)".into()));
    }
    let g = group.responses.len();
    let mut terms: Vec<BufId> = Vec::with_capacity(g);
    for r in &group.responses {
        // Cheap finiteness screen with the recorded policy log-prob.
        if !(r.policy_logp - r.ref_logp).exp().is_finite() {
            eprintln!(
                "warning: dropping response with non-finite ratio (logp {} vs ref {})",
                r.policy_logp, r.ref_logp
            );
            continue;
        }
        let lp = sequence_logp_tape(model, tape, e, e_mask, r.sid, group.query_ts)?;
        let centered = tape.add_const(lp, -r.ref_logp);
        let rho = tape.exp(centered);
        let unclipped = tape.scale(rho, r.advantage);
        let clipped_rho = tape.clamp_const(rho, 1.0 - epsilon, 1.0 + epsilon);
        let clipped = tape.scale(clipped_rho, r.advantage);
        terms.push(tape.min_pair(unclipped, clipped)?);
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    Ok(Some(tape.scale(sum, -1.0 / g as f64)))
}
