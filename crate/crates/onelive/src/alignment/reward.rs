//! Ensemble reward model.
//!
//! One scalar score per (user, author, current segment) triple, trained
//! simultaneously against all four engagement labels with a weighted BCE.
//! The score itself (not any per-objective head) is the reward used by
//! the policy optimization stage.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::sigmoid;
use crate::numerics::{Adam, Matrix, ParamId, ParamStore, Tape};
use crate::rng;
use crate::sim::{InteractionEvent, World};
use serde::{Deserialize, Serialize};

pub const XTR_LABELS: [&str; 4] = ["ctr", "lvtr", "wtr", "gtr"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RewardConfig {
    pub emb_dim: usize,
    pub hidden: usize,
    /// Per-objective loss weights (CTR, LVTR, WTR, GTR).
    pub weights: [f64; 4],
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub init_std: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            emb_dim: 16,
            hidden: 32,
            weights: [1.0, 1.0, 1.0, 1.0],
            steps: 300,
            batch_size: 64,
            lr: 1e-3,
            init_std: 0.2,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| *w < 0.0) || self.weights.iter().all(|w| *w == 0.0) {
            return Err(Error::Config(
                "objective weights must be non-negative with at least one positive".into(),
            ));
        }
        Ok(())
    }
}

struct RewardIds {
    user_emb: ParamId,
    author_emb: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub struct RewardModel {
    pub store: ParamStore,
    pub config: RewardConfig,
    pub content_dim: usize,
    ids: RewardIds,
}

impl RewardModel {
    pub fn new(
        config: &RewardConfig,
        num_users: usize,
        num_authors: usize,
        content_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "reward-init", 0);
        let e = config.emb_dim;
        let input = 2 * e + content_dim;
        let std = config.init_std;
        let ids = RewardIds {
            user_emb: store.register_randn("rm.user_emb", num_users, e, std, &mut r),
            author_emb: store.register_randn("rm.author_emb", num_authors, e, std, &mut r),
            w1: store.register_randn("rm.mlp.w1", input, config.hidden, std, &mut r),
            b1: store.register_zeros("rm.mlp.b1", 1, config.hidden),
            w2: store.register_randn("rm.mlp.w2", config.hidden, 1, std, &mut r),
            b2: store.register_zeros("rm.mlp.b2", 1, 1),
        };
        Ok(RewardModel {
            store,
            config: config.clone(),
            content_dim,
            ids,
        })
    }

    pub fn from_store(
        config: &RewardConfig,
        content_dim: usize,
        store: ParamStore,
    ) -> Result<Self> {
        let ids = RewardIds {
            user_emb: store.lookup("rm.user_emb")?,
            author_emb: store.lookup("rm.author_emb")?,
            w1: store.lookup("rm.mlp.w1")?,
            b1: store.lookup("rm.mlp.b1")?,
            w2: store.lookup("rm.mlp.w2")?,
            b2: store.lookup("rm.mlp.b2")?,
        };
        Ok(RewardModel {
            store,
            config: config.clone(),
            content_dim,
            ids,
        })
    }

    fn pre_sigmoid(&self, user: u32, author: u32, segment: &[f64]) -> Result<f64> {
        let ue = self.store.get(self.ids.user_emb);
        let ae = self.store.get(self.ids.author_emb);
        if user as usize >= ue.rows {
            return Err(Error::Lookup(format!("unknown user {user}")));
        }
        if author as usize >= ae.rows {
            return Err(Error::Lookup(format!("unknown author {author}")));
        }
        let mut x = Vec::with_capacity(2 * self.config.emb_dim + self.content_dim);
        x.extend_from_slice(ue.row(user as usize));
        x.extend_from_slice(ae.row(author as usize));
        x.extend_from_slice(segment);
        let w1 = self.store.get(self.ids.w1);
        let b1 = self.store.get(self.ids.b1);
        let mut h = b1.data.clone();
        for (j, v) in x.iter().enumerate() {
            for (o, wv) in h.iter_mut().zip(w1.row(j)) {
                *o += v * wv;
            }
        }
        for e in h.iter_mut() {
            *e = sigmoid(*e);
        }
        let w2 = self.store.get(self.ids.w2);
        let mut z = self.store.get(self.ids.b2).data[0];
        for (hv, wv) in h.iter().zip(w2.data.iter()) {
            z += hv * wv;
        }
        Ok(z)
    }

    /// Score ∈ (0,1) for an author live at `query_ts`.
    pub fn reward_score(
        &self,
        world: &World,
        user: u32,
        author: u32,
        query_ts: u64,
    ) -> Result<f64> {
        let session = world
            .live_session_of(author, query_ts)
            .ok_or_else(|| Error::Lookup(format!("author {author} offline at {query_ts}")))?;
        let seg = session.segment_f64(session.segment_index_at(query_ts)?)?;
        Ok(sigmoid(self.pre_sigmoid(user, author, &seg)?))
    }

    /// Weighted-BCE batch loss over the four labels on the tape.
    /// BCE(σ(z), y) = softplus(−z) + (1−y)·z per objective.
    pub fn batch_loss(
        &self,
        users: &[usize],
        authors: &[usize],
        segments: Matrix,
        labels: &[[f64; 4]],
    ) -> Result<(Tape, crate::numerics::BufId)> {
        let b = users.len();
        let mut tape = Tape::new();
        let ue = tape.param(&self.store, self.ids.user_emb);
        let ae = tape.param(&self.store, self.ids.author_emb);
        let u = tape.gather(ue, users)?;
        let a = tape.gather(ae, authors)?;
        let seg = tape.constant(segments);
        let x = tape.concat_cols(&[u, a, seg])?;
        let w1 = tape.param(&self.store, self.ids.w1);
        let b1 = tape.param(&self.store, self.ids.b1);
        let w2 = tape.param(&self.store, self.ids.w2);
        let b2 = tape.param(&self.store, self.ids.b2);
        let z = tape.mlp2(x, w1, b1, w2, b2)?; // B×1 pre-sigmoid scores

        let w_total: f64 = self.config.weights.iter().sum();
        let coeff: Vec<f64> = labels
            .iter()
            .map(|y| {
                self.config
                    .weights
                    .iter()
                    .zip(y)
                    .map(|(w, yl)| w * (1.0 - yl))
                    .sum()
            })
            .collect();
        let neg_z = tape.scale(z, -1.0);
        let sp = tape.softplus(neg_z);
        let sp = tape.scale(sp, w_total);
        let c = tape.constant(Matrix {
            rows: b,
            cols: 1,
            data: coeff,
        });
        let lin = tape.mul(z, c)?;
        let total = tape.add(sp, lin)?;
        let sum = tape.sum_all(total);
        let loss = tape.scale(sum, 1.0 / b as f64);
        Ok((tape, loss))
    }
}

fn event_labels(e: &InteractionEvent) -> [f64; 4] {
    [
        e.labels.click as u8 as f64,
        e.labels.long_view as u8 as f64,
        e.labels.follow as u8 as f64,
        e.labels.gift as u8 as f64,
    ]
}

pub fn batch_features(
    world: &World,
    events: &[&InteractionEvent],
) -> Result<(Vec<usize>, Vec<usize>, Matrix, Vec<[f64; 4]>)> {
    let d_c = world.config.content_dim;
    let mut users = Vec::with_capacity(events.len());
    let mut authors = Vec::with_capacity(events.len());
    let mut segs = Matrix::zeros(events.len(), d_c);
    let mut labels = Vec::with_capacity(events.len());
    for (i, e) in events.iter().enumerate() {
        users.push(e.user_id as usize);
        authors.push(e.author_id as usize);
        let session = world.session(e.session_id);
        let seg = session.segment_f64(session.segment_index_at(e.ts)?)?;
        segs.row_mut(i).copy_from_slice(&seg);
        labels.push(event_labels(e));
    }
    Ok((users, authors, segs, labels))
}

/// Train on the full event stream (clicked and unclicked exposures alike).
pub fn train_reward(
    model: &mut RewardModel,
    world: &World,
    events: &[InteractionEvent],
    seed: u64,
) -> Result<Vec<f64>> {
    if events.len() < model.config.batch_size {
        return Err(Error::Config(
            "not enough events to train the reward model".into(),
        ));
    }
    let mut opt = Adam::new(&model.store, model.config.lr, 1.0);
    let mut r = rng::stream(seed, "reward-train", 0);
    let mut trace = Vec::with_capacity(model.config.steps);
    for _ in 0..model.config.steps {
        let batch: Vec<&InteractionEvent> = (0..model.config.batch_size)
            .map(|_| &events[r.random_range(0..events.len())])
            .collect();
        let (users, authors, segs, labels) = batch_features(world, &batch)?;
        let (mut tape, loss) = model.batch_loss(&users, &authors, segs, &labels)?;
        trace.push(tape.scalar_value(loss));
        tape.backward(loss);
        let mut grads = tape.param_grads(&model.store);
        opt.apply(&mut model.store, &mut grads);
    }
    Ok(trace)
}
