//! Combined training: supervised MTP plus a reinforcement term on sampled
//! queries, with a periodically synchronized reference policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::generator::{assemble_batch, train::batch_gradients, ContextBuilder, GeneratorModel};
use crate::inference::{beam_search_standard, FrozenForward, SidIndex};
use crate::numerics::{Adam, Tape};
use crate::rng;
use crate::sim::World;
use crate::tokenizer::{AuthorSidTimeline, SemanticId};

use super::group::group_sample;
use super::losses::{dpo_loss_tape, grpo_loss_tape};
use super::reward::{RewardConfig, RewardModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RlObjective {
    Grpo,
    Dpo,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RlConfig {
    /// Responses per query group, G.
    pub group_size: usize,
    /// DPO temperature.
    pub beta: f64,
    /// GRPO clip range.
    pub epsilon: f64,
    /// Weight of the RL term in the combined loss.
    pub rl_weight: f64,
    /// Fraction of candidate queries that run the RL policy each pass.
    pub sample_rate: f64,
    /// Passes between reference synchronizations.
    pub sync_period: usize,
    pub passes: usize,
    pub objective: RlObjective,
    /// Candidate queries drawn per pass (each kept with sample_rate).
    pub queries_per_pass: usize,
    /// Beam width for group sampling (≥ group_size).
    pub beam_width: usize,
    /// Fixed probe queries for the per-pass mean top-64 reward (0 disables).
    pub probe_queries: usize,
    pub reward: RewardConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            group_size: 8,
            beta: 0.1,
            epsilon: 0.2,
            rl_weight: 0.1,
            sample_rate: 0.01,
            sync_period: 200,
            passes: 200,
            objective: RlObjective::Grpo,
            queries_per_pass: 4,
            beam_width: 16,
            probe_queries: 4,
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlTraceEntry {
    pub step: usize,
    pub sampled_queries: usize,
    pub mean_reward_top64: Option<f64>,
    pub l_mtp: f64,
    pub l_rl: Option<f64>,
    pub synced: bool,
}

/// Mean reward of the top-`k` beam candidates (standard path) over a query
/// set: per query, candidates resolving to a live author are scored on their
/// top author; queries with no resolvable candidate are skipped.
pub fn mean_reward_topk(
    policy: &GeneratorModel,
    reward_model: &RewardModel,
    world: &World,
    builder: &ContextBuilder,
    timeline: &AuthorSidTimeline,
    queries: &[(u32, u64)],
    k: usize,
) -> Result<Option<f64>> {
    let frozen = FrozenForward::new(policy);
    let mut total = 0.0;
    let mut counted = 0usize;
    for &(user, ts) in queries {
        let index = SidIndex::build(world, timeline, ts);
        let ctx = builder.build(user, ts);
        let qc = frozen.encode_query(&ctx)?;
        let outcome = beam_search_standard(&frozen, &qc, k)?;
        let mut sum = 0.0;
        let mut n = 0usize;
        for hyp in &outcome.ranked {
            if let Some(&author) = index.resolve(hyp.sid).first() {
                sum += reward_model.reward_score(world, user, author, ts)?;
                n += 1;
            }
        }
        if n > 0 {
            total += sum / n as f64;
            counted += 1;
        }
    }
    Ok(if counted > 0 {
        Some(total / counted as f64)
    } else {
        None
    })
}

/// Inputs the alignment stage works over.
pub struct AlignmentInputs<'a> {
    pub world: &'a World,
    pub builder: &'a ContextBuilder,
    pub timeline: &'a AuthorSidTimeline,
    /// Supervised teacher-forcing pool.
    pub train_pool: &'a [(u32, u64, SemanticId)],
    /// RL query candidates (user, query time).
    pub query_pool: &'a [(u32, u64)],
}

/// Run the combined objective for `cfg.passes` steps. Ownership of the
/// reference model stays inside; the policy is updated in place. Returns the
/// per-pass trace.
pub fn run_alignment(
    policy: &mut GeneratorModel,
    reward_model: &RewardModel,
    inputs: &AlignmentInputs,
    cfg: &RlConfig,
    seed: u64,
) -> Result<Vec<RlTraceEntry>> {
    let gen_cfg = policy.config.clone();
    let mut reference = policy.clone_model();
    let mut opt = Adam::new(&policy.store, gen_cfg.lr, gen_cfg.grad_clip);
    // Same stream as plain supervised training: with rl_weight = 0 the run
    // reproduces it bit for bit.
    let mut batch_rng = rng::stream(seed, "generator-train", 0);
    let mut rl_rng = rng::stream(seed, "rl-queries", 0);
    let mut probe_rng = rng::stream(seed, "rl-probe", 0);
    let probes: Vec<(u32, u64)> = (0..cfg.probe_queries)
        .filter(|_| !inputs.query_pool.is_empty())
        .map(|_| inputs.query_pool[probe_rng.random_range(0..inputs.query_pool.len())])
        .collect();

    let rl_active = cfg.rl_weight > 0.0;
    let mut trace = Vec::with_capacity(cfg.passes);
    for pass in 0..cfg.passes {
        let synced = pass > 0 && pass % cfg.sync_period == 0;
        if synced {
            reference = policy.clone_model();
        }

        // Supervised gradients.
        let indices: Vec<usize> = (0..gen_cfg.batch_size)
            .map(|_| batch_rng.random_range(0..inputs.train_pool.len()))
            .collect();
        let batch = assemble_batch(inputs.builder, inputs.train_pool, &indices);
        let (mut grads, l_mtp, _, _) = batch_gradients(policy, &batch)?;

        // Reinforcement gradients on sampled queries.
        let mut l_rl = None;
        let mut sampled = 0usize;
        if rl_active && !inputs.query_pool.is_empty() {
            let mut rl_losses = Vec::new();
            let mut rl_grads: Option<Vec<Vec<f64>>> = None;
            for _ in 0..cfg.queries_per_pass {
                let (user, ts) = inputs.query_pool[rl_rng.random_range(0..inputs.query_pool.len())];
                if rl_rng.random::<f64>() >= cfg.sample_rate {
                    continue;
                }
                let index = SidIndex::build(inputs.world, inputs.timeline, ts);
                let ctx = inputs.builder.build(user, ts);
                let Some(group) = group_sample(
                    &reference,
                    policy,
                    reward_model,
                    inputs.world,
                    &index,
                    &ctx,
                    user,
                    cfg.group_size,
                    cfg.beam_width,
                )?
                else {
                    continue;
                };
                sampled += 1;
                let mut tape = Tape::new();
                let (e, mask) = policy.encode_context_tape(&mut tape, &ctx)?;
                let loss = match cfg.objective {
                    RlObjective::Grpo => {
                        grpo_loss_tape(policy, &mut tape, e, &mask, &group, cfg.epsilon)?
                    }
                    RlObjective::Dpo => {
                        dpo_loss_tape(policy, &mut tape, e, &mask, &group, cfg.beta)?
                    }
                };
                let Some(loss) = loss else { continue };
                rl_losses.push(tape.scalar_value(loss));
                tape.backward(loss);
                let g = tape.param_grads(&policy.store);
                match &mut rl_grads {
                    None => rl_grads = Some(g),
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(g) {
                            for (av, gv) in a.iter_mut().zip(gi) {
                                *av += gv;
                            }
                        }
                    }
                }
            }
            if let Some(mut rg) = rl_grads {
                let scale = cfg.rl_weight / rl_losses.len() as f64;
                for (g, r) in grads.iter_mut().zip(rg.iter_mut()) {
                    for (gv, rv) in g.iter_mut().zip(r.iter()) {
                        *gv += scale * rv;
                    }
                }
                l_rl = Some(rl_losses.iter().sum::<f64>() / rl_losses.len() as f64);
            }
        }

        opt.apply(&mut policy.store, &mut grads);

        let mean_reward_top64 = if probes.is_empty() {
            None
        } else {
            mean_reward_topk(
                policy,
                reward_model,
                inputs.world,
                inputs.builder,
                inputs.timeline,
                &probes,
                64,
            )?
        };
        trace.push(RlTraceEntry {
            step: pass,
            sampled_queries: sampled,
            mean_reward_top64,
            l_mtp,
            l_rl,
            synced,
        });
    }
    Ok(trace)
}
