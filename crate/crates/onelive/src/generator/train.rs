//! Teacher-forced training on the weighted MTP objective.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::context::{ContextBuilder, TrainSample};
use crate::generator::{DecoderOut, GeneratorModel};
use crate::numerics::{Adam, Tape};
use crate::rng;
use crate::sim::InteractionEvent;
use crate::tokenizer::{AuthorSidTimeline, SemanticId};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub acc_all: f64,
    pub max_qk_logit: f64,
    pub max_qk_gain: f64,
}

/// Click-positive training queries: (user, query time, target SID at that
/// time). The target is the author the user actually clicked next.
pub fn build_train_pool(
    events: &[InteractionEvent],
    timeline: &AuthorSidTimeline,
) -> Vec<(u32, u64, SemanticId)> {
    events
        .iter()
        .filter(|e| e.labels.click)
        .filter_map(|e| {
            timeline
                .sid_at(e.author_id, e.ts)
                .map(|sid| (e.user_id, e.ts, sid))
        })
        .collect()
}

pub fn assemble_batch(
    builder: &ContextBuilder,
    pool: &[(u32, u64, SemanticId)],
    indices: &[usize],
) -> Vec<TrainSample> {
    indices
        .iter()
        .map(|&i| {
            let (user_id, ts, target) = pool[i];
            TrainSample {
                user_id,
                query_ts: ts,
                context: builder.build(user_id, ts),
                target,
            }
        })
        .collect()
}

/// Argmax hits of the main decoder across the three levels.
pub(crate) fn level_hits(tape: &Tape, out: &DecoderOut, target: SemanticId) -> usize {
    out.logits
        .iter()
        .enumerate()
        .filter(|(p, &l)| {
            let row = tape.value(l);
            let mut best = 0;
            for c in 1..row.cols {
                if row.data[c] > row.data[best] {
                    best = c;
                }
            }
            best == target.0[*p] as usize
        })
        .count()
}

/// Largest |gain| across every QK-norm gain vector (the bound on QK logits
/// is √d_h times its square).
pub fn max_qk_gain(model: &GeneratorModel) -> f64 {
    model
        .store
        .names()
        .filter(|(n, _)| n.ends_with(".q_gain") || n.ends_with(".k_gain"))
        .flat_map(|(_, id)| model.store.get(id).data.iter().copied())
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Batch gradients of the weighted MTP loss: per-sample tapes in parallel,
/// reduced in sample order, so the result is deterministic. Returns
/// (mean gradients, mean loss, ACC@all, max |QK logit|).
pub fn batch_gradients(
    model: &GeneratorModel,
    batch: &[TrainSample],
) -> Result<(Vec<Vec<f64>>, f64, f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    struct SampleOut {
        loss: f64,
        hits: usize,
        max_qk: f64,
        grads: Vec<Vec<f64>>,
    }
    let per_sample: Vec<Result<SampleOut>> = batch
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let (e, mask) = model.encode_context_tape(&mut tape, &s.context)?;
            let out = model.mtp_forward_tape(&mut tape, e, &mask, s.target, s.query_ts)?;
            let (loss, _) = model.mtp_loss_tape(&mut tape, &out, s.target)?;
            let loss_v = tape.scalar_value(loss);
            let hits = level_hits(&tape, &out.main, s.target);
            let max_qk = out.max_qk;
            tape.backward(loss);
            Ok(SampleOut {
                loss: loss_v,
                hits,
                max_qk,
                grads: tape.param_grads(&model.store),
            })
        })
        .collect();

    let inv_b = 1.0 / batch.len() as f64;
    let mut total = vec![Vec::new(); model.store.len()];
    let mut loss_sum = 0.0;
    let mut hit_sum = 0usize;
    let mut max_qk = 0.0f64;
    for s in per_sample {
        let s = s?;
        loss_sum += s.loss;
        hit_sum += s.hits;
        max_qk = max_qk.max(s.max_qk);
        for (acc, g) in total.iter_mut().zip(s.grads) {
            if acc.is_empty() {
                *acc = g;
            } else {
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            }
        }
    }
    for g in total.iter_mut() {
        for v in g.iter_mut() {
            *v *= inv_b;
        }
    }
    let acc = hit_sum as f64 / (3 * batch.len()) as f64;
    Ok((total, loss_sum * inv_b, acc, max_qk))
}

/// One gradient step on the weighted MTP loss over a batch.
pub fn train_step(
    model: &mut GeneratorModel,
    batch: &[TrainSample],
    opt: &mut Adam,
    step: usize,
) -> Result<StepMetrics> {
    let (mut grads, loss, acc_all, max_qk) = batch_gradients(model, batch)?;
    opt.apply(&mut model.store, &mut grads);
    Ok(StepMetrics {
        step,
        loss,
        acc_all,
        max_qk_logit: max_qk,
        max_qk_gain: max_qk_gain(model),
    })
}

/// Full supervised run over the configured number of steps.
pub fn train_generator(
    model: &mut GeneratorModel,
    builder: &ContextBuilder,
    pool: &[(u32, u64, SemanticId)],
    seed: u64,
) -> Result<Vec<StepMetrics>> {
    if pool.is_empty() {
        return Err(Error::Config("empty training pool".into()));
    }
    let cfg = model.config.clone();
    let mut opt = Adam::new(&model.store, cfg.lr, cfg.grad_clip);
    let mut r = rng::stream(seed, "generator-train", 0);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| r.random_range(0..pool.len()))
            .collect();
        let batch = assemble_batch(builder, pool, &indices);
        trace.push(train_step(model, &batch, &mut opt, step)?);
    }
    Ok(trace)
}

/// Distill the lite decoders toward the main decoder.
///
/// Only the modules' private parameters (fusion MLPs and FFNs) move; the
/// main decoder, including the attention the lite blocks alias, stays
/// frozen, so the full-depth path is bit-identical afterwards. Teachers are
/// the main decoder's own next-level distributions on the prefix branches a
/// beam explores (top q^0 candidates, then top q^1 continuations), and the
/// lite outputs match them in distribution, not just argmax, so joint beam
/// rankings line up across the two paths. Returns the per-step loss trace.
pub fn distill_lite_modules(
    model: &mut GeneratorModel,
    builder: &ContextBuilder,
    queries: &[(u32, u64)],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    use crate::inference::FrozenForward;
    use crate::numerics::ops::softmax;
    if queries.is_empty() {
        return Err(Error::Config("no queries to distill on".into()));
    }
    // Branch fan-out: q^0 candidates per query, q^1 continuations per q^0.
    let m0 = model.config.vocab[0].min(6);
    let m1 = model.config.vocab[1].min(2);
    // Private lite parameters: fusion MLPs and FFNs. Aliased attention slots
    // are exactly the main layer-0 tensors and must not move.
    let allowed: std::collections::BTreeSet<usize> = model
        .store
        .names()
        .filter(|(n, _)| n.starts_with("gen.mtp") && (n.contains(".fuse.") || n.contains(".ffn.")))
        .map(|(_, id)| id.0)
        .collect();

    let top = |p: &[f64], k: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..p.len()).collect();
        idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
        idx.truncate(k);
        idx
    };

    let mut opt = Adam::new(&model.store, lr, 1.0);
    let mut r = rng::stream(seed, "mtp-distill", 0);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<(u32, u64)> = (0..batch_size)
            .map(|_| queries[r.random_range(0..queries.len())])
            .collect();
        struct Out {
            loss: f64,
            grads: Vec<Vec<f64>>,
        }
        let outs: Vec<Result<Out>> = batch
            .par_iter()
            .map(|&(user, ts)| {
                let ctx = builder.build(user, ts);
                // Teacher distributions from the frozen main path.
                let frozen = FrozenForward::new(model);
                let qc = frozen.encode_query(&ctx)?;
                let mut cache0 = frozen.fresh_cache();
                let h0 = frozen.main_step(&qc, &mut cache0, &qc.anchor);
                let p0 = softmax(&frozen.head_logits(0, &h0))?;
                let mut branches = Vec::new(); // (q0, q1, p1_teacher, p2_teacher)
                for &q0 in &top(&p0, m0) {
                    let mut c1 = cache0.clone();
                    let h1 = frozen.main_step(&qc, &mut c1, &frozen.sid_embedding(0, q0 as u16));
                    let p1 = softmax(&frozen.head_logits(1, &h1))?;
                    for &q1 in &top(&p1, m1) {
                        let mut c2 = c1.clone();
                        let h2 =
                            frozen.main_step(&qc, &mut c2, &frozen.sid_embedding(1, q1 as u16));
                        let p2 = softmax(&frozen.head_logits(2, &h2))?;
                        branches.push((q0 as u16, q1 as u16, p1.clone(), p2));
                    }
                }

                // Soft cross-entropy of the lite outputs against the
                // teachers, accumulated over all branches on one tape.
                let mut tape = Tape::new();
                let (e, mask) = model.encode_context_tape(&mut tape, &ctx)?;
                let mut total: Option<crate::numerics::BufId> = None;
                let n_branches = branches.len() as f64;
                for (q0, q1, p1, p2) in branches {
                    let target = SemanticId([q0, q1, 0]);
                    let out = model.mtp_forward_tape(&mut tape, e, &mask, target, ts)?;
                    for (logits, teacher) in [(out.mtp1_logits[0], p1), (out.mtp2_logits, p2)] {
                        // Soft CE: logsumexp(logits) − ⟨teacher, logits⟩,
                        // stable even when a class underflows.
                        let lse = tape.log_sum_exp(logits);
                        let t = tape.constant_row(teacher);
                        let w = tape.mul(logits, t)?;
                        let dot = tape.sum_all(w);
                        let neg_dot = tape.scale(dot, -1.0);
                        let ce = tape.add(lse, neg_dot)?;
                        let ce = tape.scale(ce, 1.0 / n_branches);
                        total = Some(match total {
                            None => ce,
                            Some(acc) => tape.add(acc, ce)?,
                        });
                    }
                }
                let loss = total.expect("at least one branch");
                let loss_v = tape.scalar_value(loss);
                tape.backward(loss);
                Ok(Out {
                    loss: loss_v,
                    grads: tape.param_grads(&model.store),
                })
            })
            .collect();
        let mut total = vec![Vec::new(); model.store.len()];
        let mut loss_sum = 0.0;
        for o in outs {
            let o = o?;
            loss_sum += o.loss;
            for (acc, g) in total.iter_mut().zip(o.grads) {
                if acc.is_empty() {
                    *acc = g;
                } else {
                    for (a, v) in acc.iter_mut().zip(&g) {
                        *a += v;
                    }
                }
            }
        }
        let inv_b = 1.0 / batch.len() as f64;
        for (idx, g) in total.iter_mut().enumerate() {
            if allowed.contains(&idx) {
                for v in g.iter_mut() {
                    *v *= inv_b;
                }
            } else {
                for v in g.iter_mut() {
                    *v = 0.0;
                }
            }
        }
        opt.apply(&mut model.store, &mut total);
        trace.push(loss_sum * inv_b);
    }
    Ok(trace)
}

/// Teacher-forced ACC@all on an evaluation set, no updates.
pub fn eval_acc_all(model: &GeneratorModel, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let hits: Vec<Result<usize>> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let (e, mask) = model.encode_context_tape(&mut tape, &s.context)?;
            let out = model.decoder_forward_tape(&mut tape, e, &mask, s.target, s.query_ts)?;
            Ok(level_hits(&tape, &out, s.target))
        })
        .collect();
    let mut total = 0usize;
    for h in hits {
        total += h?;
    }
    Ok(total as f64 / (3 * samples.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::testutil::{tiny_config, tiny_context};
    use crate::generator::ModelConfig;

    fn rigged_model(cfg: &ModelConfig) -> GeneratorModel {
        // Zero head weights and steer argmaxes purely via biases.
        let mut model = GeneratorModel::new(cfg, 9, 21).unwrap();
        for level in 0..3 {
            let w = model.store.lookup(&format!("gen.head.{level}.w")).unwrap();
            model
                .store
                .get_mut(w)
                .data
                .iter_mut()
                .for_each(|v| *v = 0.0);
            let b = model.store.lookup(&format!("gen.head.{level}.b")).unwrap();
            model
                .store
                .get_mut(b)
                .data
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        model
    }

    #[test]
    fn acc_all_counts_three_of_six() {
        let cfg = tiny_config();
        let mut model = rigged_model(&cfg);
        // Level 0 argmax → 2 (correct for both samples), level 1 → 0 (wrong
        // for both), level 2 → 4 (correct for sample A only): 3/6 = 0.5.
        let b0 = model.store.lookup("gen.head.0.b").unwrap();
        model.store.get_mut(b0).data[2] = 5.0;
        let b1 = model.store.lookup("gen.head.1.b").unwrap();
        model.store.get_mut(b1).data[0] = 5.0;
        let b2 = model.store.lookup("gen.head.2.b").unwrap();
        model.store.get_mut(b2).data[4] = 5.0;
        let samples = vec![
            TrainSample {
                user_id: 0,
                query_ts: 5_000,
                context: tiny_context(&cfg, "acc-a"),
                target: SemanticId([2, 1, 4]),
            },
            TrainSample {
                user_id: 1,
                query_ts: 9_000,
                context: tiny_context(&cfg, "acc-b"),
                target: SemanticId([2, 1, 5]),
            },
        ];
        let acc = eval_acc_all(&model, &samples).unwrap();
        assert!((acc - 0.5).abs() < 1e-12, "acc {acc}");
    }

    #[test]
    fn perfect_biases_give_acc_one() {
        let cfg = tiny_config();
        let mut model = rigged_model(&cfg);
        for (level, want) in [(0usize, 1usize), (1, 2), (2, 3)] {
            let b = model.store.lookup(&format!("gen.head.{level}.b")).unwrap();
            model.store.get_mut(b).data[want] = 5.0;
        }
        let samples = vec![TrainSample {
            user_id: 0,
            query_ts: 4_000,
            context: tiny_context(&cfg, "acc-c"),
            target: SemanticId([1, 2, 3]),
        }];
        assert_eq!(eval_acc_all(&model, &samples).unwrap(), 1.0);
    }

    #[test]
    fn training_on_a_fixed_target_drives_loss_down() {
        let cfg = tiny_config();
        let mut model = GeneratorModel::new(&cfg, 9, 33).unwrap();
        let mut opt = Adam::new(&model.store, 5e-3, 1.0);
        let sample = TrainSample {
            user_id: 0,
            query_ts: 7_000,
            context: tiny_context(&cfg, "fit"),
            target: SemanticId([2, 3, 4]),
        };
        let batch = vec![sample.clone(), sample];
        let first = train_step(&mut model, &batch, &mut opt, 0).unwrap();
        let mut last = first;
        for step in 1..60 {
            last = train_step(&mut model, &batch, &mut opt, step).unwrap();
        }
        assert!(
            last.loss < first.loss * 0.5,
            "{} → {}",
            first.loss,
            last.loss
        );
        assert_eq!(last.acc_all, 1.0);
        assert!(last.max_qk_gain > 0.0);
    }
}
