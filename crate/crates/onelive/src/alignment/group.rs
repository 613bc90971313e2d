//! Group sampling and advantage normalization.

use crate::error::{Error, Result};
use crate::generator::{BehaviorContext, GeneratorModel};
use crate::inference::{beam_search_standard, FrozenForward, SidIndex};
use crate::sim::World;
use crate::tokenizer::SemanticId;

use super::reward::RewardModel;

#[derive(Debug, Clone)]
pub struct GroupResponse {
    pub sid: SemanticId,
    /// Top resolved live author under the serving recency rule.
    pub author: u32,
    pub reward: f64,
    pub advantage: f64,
    pub ref_logp: f64,
    pub policy_logp: f64,
}

#[derive(Debug, Clone)]
pub struct GroupSample {
    pub user_id: u32,
    pub query_ts: u64,
    pub responses: Vec<GroupResponse>,
}

/// Population-std normalization: (r − mean)/std. Degenerate groups (std
/// below 1e-8) contribute no gradient, so every advantage is zeroed. The
/// last advantage is pinned to the negated partial sum of the others, which
/// makes the sequential sum exactly zero (the on-policy GRPO surrogate then
/// vanishes exactly); the adjustment is within a few ulps of the true value.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(
            "advantage normalization needs a group of ≥ 2".into(),
        ));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; rewards.len()]);
    }
    let mut adv: Vec<f64> = rewards.iter().map(|r| (r - mean) / std).collect();
    let partial: f64 = adv[..adv.len() - 1].iter().sum();
    let last = adv.len() - 1;
    adv[last] = -partial;
    Ok(adv)
}

/// Canonical sequence log-probability for RL: the tape-path teacher-forced
/// main-decoder chain. Reference and policy both use it, so identical
/// parameters give bit-identical values (and ratios exactly 1 after a sync).
pub fn sequence_logp_value(
    model: &GeneratorModel,
    ctx: &BehaviorContext,
    sid: SemanticId,
) -> Result<f64> {
    let mut tape = crate::numerics::Tape::new();
    let (e, mask) = model.encode_context_tape(&mut tape, ctx)?;
    let node = super::losses::sequence_logp_tape(model, &mut tape, e, &mask, sid, ctx.query_ts)?;
    Ok(tape.scalar_value(node))
}

/// Draw G distinct responses from the reference policy's beam, resolve them
/// against the live catalogue, score their top authors, and normalize
/// advantages. Groups that end up smaller than 2 are discarded (None).
#[allow(clippy::too_many_arguments)]
pub fn group_sample(
    reference: &GeneratorModel,
    policy: &GeneratorModel,
    reward_model: &RewardModel,
    world: &World,
    index: &SidIndex,
    ctx: &BehaviorContext,
    user_id: u32,
    group_size: usize,
    beam_width: usize,
) -> Result<Option<GroupSample>> {
    if group_size > beam_width {
        return Err(Error::Config(
            "group size cannot exceed the beam width".into(),
        ));
    }
    let frozen_ref = FrozenForward::new(reference);
    let qc = frozen_ref.encode_query(ctx)?;
    let outcome = beam_search_standard(&frozen_ref, &qc, beam_width)?;

    let mut responses = Vec::with_capacity(group_size);
    for hyp in &outcome.ranked {
        if responses.len() >= group_size {
            break;
        }
        let authors = index.resolve(hyp.sid);
        let Some(&author) = authors.first() else {
            continue;
        };
        let reward = reward_model.reward_score(world, user_id, author, ctx.query_ts)?;
        responses.push(GroupResponse {
            sid: hyp.sid,
            author,
            reward,
            advantage: 0.0,
            ref_logp: sequence_logp_value(reference, ctx, hyp.sid)?,
            policy_logp: sequence_logp_value(policy, ctx, hyp.sid)?,
        });
    }
    if responses.len() < group_size {
        eprintln!(
            "warning: group for user {user_id} at {} shrank to {} valid live responses",
            ctx.query_ts,
            responses.len()
        );
    }
    if responses.len() < 2 {
        return Ok(None);
    }
    let rewards: Vec<f64> = responses.iter().map(|r| r.reward).collect();
    let advantages = compute_advantages(&rewards)?;
    for (r, a) in responses.iter_mut().zip(advantages) {
        r.advantage = a;
    }
    Ok(Some(GroupSample {
        user_id,
        query_ts: ctx.query_ts,
        responses,
    }))
}
