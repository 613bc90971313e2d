//! Two-tower behavioral alignment.
//!
//! Author tower: gated fusion of the learned identity embedding with content
//! features (latest 30 s window plus a running session pooling, both passed
//! through a shared content projection and a fusion MLP). User tower: an MLP
//! on the user identity embedding. Towers are aligned with an in-batch
//! softmax over click-positive pairs; the trained author tower output is the
//! IA embedding handed to quantization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::ops::sigmoid;
use crate::numerics::{Adam, BufId, Matrix, ParamId, ParamStore, Tape};
use crate::rng;
use crate::sim::{InteractionEvent, LiveSession, World};
use crate::tokenizer::{IAEmbedding, TokenizerConfig};

/// Author-tower input with content features already projected to R^d.
#[derive(Debug, Clone)]
pub struct AuthorTowerInput {
    pub x_aid: Vec<f64>,
    pub x_30s: Vec<f64>,
    pub x_pooling: Vec<f64>,
}

pub struct AlignmentModel {
    pub store: ParamStore,
    pub config: TokenizerConfig,
    pub content_dim: usize,
    ids: TowerIds,
}

struct TowerIds {
    author_emb: ParamId,
    user_emb: ParamId,
    content_w: ParamId,
    content_b: ParamId,
    fuse_w1: ParamId,
    fuse_b1: ParamId,
    fuse_w2: ParamId,
    lambda_raw: ParamId,
    user_w1: ParamId,
    user_b1: ParamId,
    user_w2: ParamId,
    user_b2: ParamId,
    temperature: ParamId,
}

impl AlignmentModel {
    pub fn new(
        config: &TokenizerConfig,
        num_users: usize,
        num_authors: usize,
        content_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let h = config.hidden;
        let mut r = rng::stream(seed, "tokenizer-init", 0);
        let mut store = ParamStore::new();
        let std = 0.1;
        let ids = TowerIds {
            author_emb: store.register_randn("tok.author_emb", num_authors, d, std, &mut r),
            user_emb: store.register_randn("tok.user_emb", num_users, d, std, &mut r),
            content_w: store.register_randn("tok.content.w", content_dim, d, std, &mut r),
            content_b: store.register_zeros("tok.content.b", 1, d),
            fuse_w1: store.register_randn("tok.fuse.w1", 2 * d, h, std, &mut r),
            fuse_b1: store.register_zeros("tok.fuse.b1", 1, h),
            fuse_w2: store.register_randn("tok.fuse.w2", h, d, std, &mut r),
            lambda_raw: store.register_zeros("tok.lambda_raw", 1, 1),
            user_w1: store.register_randn("tok.user.w1", d, h, std, &mut r),
            user_b1: store.register_zeros("tok.user.b1", 1, h),
            user_w2: store.register_randn("tok.user.w2", h, d, std, &mut r),
            user_b2: store.register_zeros("tok.user.b2", 1, d),
            temperature: store.register_const("tok.temperature", 1, 1, config.temperature_init),
        };
        Ok(AlignmentModel {
            store,
            config: config.clone(),
            content_dim,
            ids,
        })
    }

    pub fn from_store(
        config: &TokenizerConfig,
        content_dim: usize,
        store: ParamStore,
    ) -> Result<Self> {
        let ids = TowerIds {
            author_emb: store.lookup("tok.author_emb")?,
            user_emb: store.lookup("tok.user_emb")?,
            content_w: store.lookup("tok.content.w")?,
            content_b: store.lookup("tok.content.b")?,
            fuse_w1: store.lookup("tok.fuse.w1")?,
            fuse_b1: store.lookup("tok.fuse.b1")?,
            fuse_w2: store.lookup("tok.fuse.w2")?,
            lambda_raw: store.lookup("tok.lambda_raw")?,
            user_w1: store.lookup("tok.user.w1")?,
            user_b1: store.lookup("tok.user.b1")?,
            user_w2: store.lookup("tok.user.w2")?,
            user_b2: store.lookup("tok.user.b2")?,
            temperature: store.lookup("tok.temperature")?,
        };
        Ok(AlignmentModel {
            store,
            config: config.clone(),
            content_dim,
            ids,
        })
    }

    pub fn gate(&self) -> f64 {
        sigmoid(self.store.get(self.ids.lambda_raw).data[0])
    }

    pub fn set_lambda_raw(&mut self, v: f64) {
        self.store.get_mut(self.ids.lambda_raw).data[0] = v;
    }

    /// Project a raw content vector (R^{d_c}) into tower space (R^d).
    pub fn project_content(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.content_dim {
            return Err(Error::Dimension(format!(
                "content vector length {} vs d_c {}",
                raw.len(),
                self.content_dim
            )));
        }
        let w = self.store.get(self.ids.content_w);
        let b = self.store.get(self.ids.content_b);
        let mut out = b.data.clone();
        for (j, v) in raw.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(w.row(j)) {
                *o += v * wv;
            }
        }
        Ok(out)
    }

    fn mlp2_frozen(
        &self,
        x: &[f64],
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: Option<ParamId>,
    ) -> Vec<f64> {
        let w1 = self.store.get(w1);
        let b1 = self.store.get(b1);
        let w2 = self.store.get(w2);
        let mut h = b1.data.clone();
        for (j, v) in x.iter().enumerate() {
            for (o, wv) in h.iter_mut().zip(w1.row(j)) {
                *o += v * wv;
            }
        }
        for e in h.iter_mut() {
            *e = sigmoid(*e);
        }
        let mut out = match b2 {
            Some(b2) => self.store.get(b2).data.clone(),
            None => vec![0.0; w2.cols],
        };
        for (j, v) in h.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(w2.row(j)) {
                *o += v * wv;
            }
        }
        out
    }

    /// Gated fusion: σ(λ)·x_AId + (1−σ(λ))·MLP(x_30s ⊕ x_pooling).
    pub fn fuse_author(&self, input: &AuthorTowerInput) -> Result<Vec<f64>> {
        let d = self.config.dim;
        if input.x_aid.len() != d || input.x_30s.len() != d || input.x_pooling.len() != d {
            return Err(Error::Dimension(
                "author tower inputs must all have length d".into(),
            ));
        }
        let mut cat = Vec::with_capacity(2 * d);
        cat.extend_from_slice(&input.x_30s);
        cat.extend_from_slice(&input.x_pooling);
        // No output bias on the fusion MLP: a shared shift of every author
        // vector is invisible to the row-wise in-batch softmax (flat loss
        // direction) and to quantization geometry.
        let x_mllm = self.mlp2_frozen(
            &cat,
            self.ids.fuse_w1,
            self.ids.fuse_b1,
            self.ids.fuse_w2,
            None,
        );
        let g = self.gate();
        Ok(input
            .x_aid
            .iter()
            .zip(&x_mllm)
            .map(|(a, m)| g * a + (1.0 - g) * m)
            .collect())
    }

    pub fn user_tower(&self, user_id: u32) -> Result<Vec<f64>> {
        let table = self.store.get(self.ids.user_emb);
        if user_id as usize >= table.rows {
            return Err(Error::Lookup(format!("unknown user {user_id}")));
        }
        Ok(self.mlp2_frozen(
            table.row(user_id as usize),
            self.ids.user_w1,
            self.ids.user_b1,
            self.ids.user_w2,
            Some(self.ids.user_b2),
        ))
    }

    /// Author-tower input at a segment tick: identity embedding, projected
    /// latest window, projected mean over the session's windows so far.
    pub fn author_input(
        &self,
        session: &LiveSession,
        segment_index: usize,
    ) -> Result<AuthorTowerInput> {
        let table = self.store.get(self.ids.author_emb);
        let author = session.author_id as usize;
        if author >= table.rows {
            return Err(Error::Lookup(format!("unknown author {author}")));
        }
        let d_c = session.content_dim;
        let latest = session.segment_f64(segment_index)?;
        let mut pooled = vec![0.0; d_c];
        for i in 0..=segment_index {
            for (p, v) in pooled.iter_mut().zip(session.segment(i)?) {
                *p += *v as f64;
            }
        }
        for p in pooled.iter_mut() {
            *p /= (segment_index + 1) as f64;
        }
        Ok(AuthorTowerInput {
            x_aid: table.row(author).to_vec(),
            x_30s: self.project_content(&latest)?,
            x_pooling: self.project_content(&pooled)?,
        })
    }

    pub fn ia_embedding(&self, session: &LiveSession, segment_index: usize) -> Result<IAEmbedding> {
        let input = self.author_input(session, segment_index)?;
        Ok(IAEmbedding {
            author_id: session.author_id,
            as_of: session.segment_time(segment_index),
            vector: self.fuse_author(&input)?,
        })
    }

    /// Tape forward for one batch. Returns (loss buffer, tape).
    fn batch_loss(
        &self,
        users: &[usize],
        authors: &[usize],
        content_30s: Matrix,
        content_pool: Matrix,
    ) -> Result<(Tape, BufId)> {
        let ids = &self.ids;
        let b = users.len();
        let mut tape = Tape::new();
        let user_emb = tape.param(&self.store, ids.user_emb);
        let author_emb = tape.param(&self.store, ids.author_emb);
        let cw = tape.param(&self.store, ids.content_w);
        let cb = tape.param(&self.store, ids.content_b);

        let u = tape.gather(user_emb, users)?;
        let uw1 = tape.param(&self.store, ids.user_w1);
        let ub1 = tape.param(&self.store, ids.user_b1);
        let uw2 = tape.param(&self.store, ids.user_w2);
        let ub2 = tape.param(&self.store, ids.user_b2);
        let u = tape.mlp2(u, uw1, ub1, uw2, ub2)?;

        let c30 = tape.constant(content_30s);
        let cpool = tape.constant(content_pool);
        let p30 = tape.linear(c30, cw, cb)?;
        let ppool = tape.linear(cpool, cw, cb)?;
        let cat = tape.concat_cols(&[p30, ppool])?;
        let fw1 = tape.param(&self.store, ids.fuse_w1);
        let fb1 = tape.param(&self.store, ids.fuse_b1);
        let fw2 = tape.param(&self.store, ids.fuse_w2);
        let hid = tape.linear(cat, fw1, fb1)?;
        let hid = tape.sigmoid(hid);
        let mllm = tape.matmul(hid, fw2)?;

        let aid = tape.gather(author_emb, authors)?;
        let lraw = tape.param(&self.store, ids.lambda_raw);
        let gate = tape.sigmoid(lraw);
        let gated_aid = tape.scale_by(aid, gate)?;
        let neg = tape.scale(gate, -1.0);
        let inv_gate = tape.add_const(neg, 1.0);
        let gated_mllm = tape.scale_by(mllm, inv_gate)?;
        let author = tape.add(gated_aid, gated_mllm)?;

        let logits = tape.matmul_tb(u, author)?;
        let temp = tape.param(&self.store, ids.temperature);
        let logits = tape.scale_by(logits, temp)?;
        let targets: Vec<usize> = (0..b).collect();
        let ce = tape.ce_sum(logits, &targets)?;
        let loss = tape.scale(ce, 1.0 / b as f64);
        Ok((tape, loss))
    }
}

/// One batch sample: positive (user, author-at-time) pair from a click event.
fn batch_features(
    model: &AlignmentModel,
    world: &World,
    events: &[&InteractionEvent],
) -> Result<(Vec<usize>, Vec<usize>, Matrix, Matrix)> {
    let d_c = model.content_dim;
    let mut users = Vec::with_capacity(events.len());
    let mut authors = Vec::with_capacity(events.len());
    let mut c30 = Matrix::zeros(events.len(), d_c);
    let mut cpool = Matrix::zeros(events.len(), d_c);
    for (i, e) in events.iter().enumerate() {
        users.push(e.user_id as usize);
        authors.push(e.author_id as usize);
        let session = world.session(e.session_id);
        let seg = session.segment_index_at(e.ts)?;
        let latest = session.segment_f64(seg)?;
        c30.row_mut(i).copy_from_slice(&latest);
        let mut pooled = vec![0.0; d_c];
        for j in 0..=seg {
            for (p, v) in pooled.iter_mut().zip(session.segment(j)?) {
                *p += *v as f64;
            }
        }
        for p in pooled.iter_mut() {
            *p /= (seg + 1) as f64;
        }
        cpool.row_mut(i).copy_from_slice(&pooled);
    }
    Ok((users, authors, c30, cpool))
}

/// Train both towers with the in-batch softmax objective on click-positive
/// events. Batches with fewer than two distinct authors are skipped (the
/// softmax over negatives degenerates). Returns the per-step loss trace.
pub fn train_alignment(
    model: &mut AlignmentModel,
    world: &World,
    train_events: &[InteractionEvent],
    seed: u64,
) -> Result<Vec<f64>> {
    let positives: Vec<&InteractionEvent> =
        train_events.iter().filter(|e| e.labels.click).collect();
    if positives.len() < model.config.batch_size {
        return Err(Error::Config(format!(
            "need at least {} click events to train alignment, got {}",
            model.config.batch_size,
            positives.len()
        )));
    }
    let mut opt = Adam::new(&model.store, model.config.lr, 1.0);
    let mut r = rng::stream(seed, "tokenizer-train", 0);
    let mut trace = Vec::with_capacity(model.config.steps);
    let mut skipped = 0usize;
    for _ in 0..model.config.steps {
        let batch: Vec<&InteractionEvent> = (0..model.config.batch_size)
            .map(|_| positives[r.random_range(0..positives.len())])
            .collect();
        let distinct_authors: std::collections::BTreeSet<u32> =
            batch.iter().map(|e| e.author_id).collect();
        if distinct_authors.len() < 2 {
            skipped += 1;
            continue;
        }
        let (users, authors, c30, cpool) = batch_features(model, world, &batch)?;
        let (mut tape, loss) = model.batch_loss(&users, &authors, c30, cpool)?;
        trace.push(tape.scalar_value(loss));
        tape.backward(loss);
        let mut grads = tape.param_grads(&model.store);
        opt.apply(&mut model.store, &mut grads);
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} degenerate alignment batches (<2 distinct authors)");
    }
    Ok(trace)
}

/// Build the in-batch softmax loss tape for a set of click-positive events
/// (used by training and by the gradient-correctness harness).
pub fn alignment_batch_loss(
    model: &AlignmentModel,
    world: &World,
    events: &[&InteractionEvent],
) -> Result<(Tape, BufId)> {
    let (users, authors, c30, cpool) = batch_features(model, world, events)?;
    model.batch_loss(&users, &authors, c30, cpool)
}

/// IA snapshots for codebook fitting: every author's segment ticks before
/// `boundary_ts`, strided down to at most `cap` vectors.
pub fn collect_ia_snapshots(
    model: &AlignmentModel,
    world: &World,
    boundary_ts: u64,
    cap: usize,
) -> Result<Vec<IAEmbedding>> {
    let mut ticks = Vec::new();
    for s in &world.sessions {
        for i in 0..s.segment_count() {
            if s.segment_time(i) < boundary_ts {
                ticks.push((s.id, i));
            }
        }
    }
    let stride = (ticks.len() / cap.max(1)).max(1);
    let mut out = Vec::new();
    for (n, (sid, i)) in ticks.into_iter().enumerate() {
        if n % stride == 0 {
            out.push(model.ia_embedding(world.session(sid), i)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::sim::{generate_world, WorldConfig};

    fn tiny_world() -> World {
        generate_world(
            &WorldConfig {
                num_users: 12,
                num_authors: 6,
                horizon_days: 1,
                events_per_user_per_day: 60.0,
                ..WorldConfig::default()
            },
            17,
        )
        .unwrap()
    }

    fn tiny_config() -> TokenizerConfig {
        TokenizerConfig {
            dim: 8,
            hidden: 10,
            batch_size: 6,
            steps: 30,
            level_sizes: vec![4, 4, 4],
            ..TokenizerConfig::default()
        }
    }

    fn tiny_model(world: &World) -> AlignmentModel {
        AlignmentModel::new(
            &tiny_config(),
            world.users.len(),
            world.authors.len(),
            world.config.content_dim,
            3,
        )
        .unwrap()
    }

    #[test]
    fn gate_saturation_selects_one_branch() {
        let world = tiny_world();
        let mut model = tiny_model(&world);
        let session = &world.sessions[0];
        let input = model.author_input(session, 0).unwrap();

        model.set_lambda_raw(50.0); // σ → 1
        let out = model.fuse_author(&input).unwrap();
        for (o, a) in out.iter().zip(&input.x_aid) {
            assert!((o - a).abs() < 1e-9);
        }

        model.set_lambda_raw(-50.0); // σ → 0
        let out = model.fuse_author(&input).unwrap();
        let mut cat = input.x_30s.clone();
        cat.extend_from_slice(&input.x_pooling);
        let mllm = model.mlp2_frozen(
            &cat,
            model.ids.fuse_w1,
            model.ids.fuse_b1,
            model.ids.fuse_w2,
            None,
        );
        for (o, m) in out.iter().zip(&mllm) {
            assert!((o - m).abs() < 1e-9);
        }

        model.set_lambda_raw(0.0); // σ = 0.5
        let out = model.fuse_author(&input).unwrap();
        for ((o, a), m) in out.iter().zip(&input.x_aid).zip(&mllm) {
            assert!((o - 0.5 * a - 0.5 * m).abs() < 1e-9);
        }
    }

    #[test]
    fn user_tower_is_deterministic_and_distinct() {
        let world = tiny_world();
        let model = tiny_model(&world);
        let a = model.user_tower(0).unwrap();
        let b = model.user_tower(0).unwrap();
        assert_eq!(a, b);
        let c = model.user_tower(1).unwrap();
        assert_ne!(a, c);
        assert!(model.user_tower(99).is_err());
    }

    #[test]
    fn zero_user_mlp_gives_constant_bias_path() {
        let world = tiny_world();
        let mut model = tiny_model(&world);
        for name in ["tok.user.w1", "tok.user.b1", "tok.user.w2", "tok.user.b2"] {
            let id = model.store.lookup(name).unwrap();
            model
                .store
                .get_mut(id)
                .data
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let out = model.user_tower(2).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_towers_give_ln_b_loss() {
        // Zero every tower parameter: user and author outputs are all-zero,
        // logits uniform, so the in-batch loss is exactly ln B.
        let world = tiny_world();
        let mut model = tiny_model(&world);
        let names: Vec<String> = model.store.names().map(|(n, _)| n.to_string()).collect();
        for name in names {
            if name != "tok.temperature" {
                let id = model.store.lookup(&name).unwrap();
                model
                    .store
                    .get_mut(id)
                    .data
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let b = 5;
        let events: Vec<&InteractionEvent> = world
            .events
            .iter()
            .filter(|e| e.labels.click)
            .take(b)
            .collect();
        assert_eq!(events.len(), b);
        let (users, authors, c30, cpool) = batch_features(&model, &world, &events).unwrap();
        let (tape, loss) = model.batch_loss(&users, &authors, c30, cpool).unwrap();
        assert!((tape.scalar_value(loss) - (b as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss() {
        let world = tiny_world();
        let mut model = tiny_model(&world);
        let trace = train_alignment(&mut model, &world, &world.events, 5).unwrap();
        assert!(trace.len() >= 20);
        let head: f64 = trace[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = trace[trace.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not trend down: {head} → {tail}");
    }

    #[test]
    fn alignment_batch_gradient_matches_finite_differences() {
        let world = tiny_world();
        let model = tiny_model(&world);
        // Distinct authors: with duplicated columns the in-batch softmax has
        // exactly-zero analytic gradients that finite differences see as
        // one-ulp noise over the 1e-8 denominator floor.
        let mut seen = std::collections::BTreeSet::new();
        let events: Vec<&InteractionEvent> = world
            .events
            .iter()
            .filter(|e| e.labels.click && seen.insert(e.author_id))
            .take(4)
            .collect();
        assert_eq!(events.len(), 4);
        let (users, authors, c30, cpool) = batch_features(&model, &world, &events).unwrap();

        let (mut tape, loss) = model
            .batch_loss(&users, &authors, c30.clone(), cpool.clone())
            .unwrap();
        tape.backward(loss);
        let analytic: Vec<f64> = tape
            .param_grads(&model.store)
            .into_iter()
            .flatten()
            .collect();

        let base = model.store.flatten();
        let f = |p: &[f64]| {
            let mut m =
                AlignmentModel::from_store(&model.config, model.content_dim, model.store.clone())
                    .unwrap();
            m.store.load_flat(p).unwrap();
            let (t, l) = m
                .batch_loss(&users, &authors, c30.clone(), cpool.clone())
                .unwrap();
            t.scalar_value(l)
        };
        let err = grad_check(&f, &base, &analytic, 1e-4).unwrap();
        if err > 1e-4 {
            // Locate the offender for the failure message.
            let h = 1e-4;
            let mut work = base.clone();
            let mut msg = String::new();
            for i in 0..base.len() {
                let o = work[i];
                work[i] = o + h;
                let fp = f(&work);
                work[i] = o - h;
                let fm = f(&work);
                work[i] = o;
                let num = (fp - fm) / (2.0 * h);
                let den = analytic[i].abs().max(num.abs()).max(1e-8);
                if (analytic[i] - num).abs() / den > 1e-4 {
                    let mut cum = 0;
                    for (idx, t) in model.store.tensors().iter().enumerate() {
                        if i < cum + t.data.len() {
                            for (n, id) in model.store.names() {
                                if id.0 == idx {
                                    msg = format!("{n}[{}] a={} n={}", i - cum, analytic[i], num);
                                }
                            }
                            break;
                        }
                        cum += t.data.len();
                    }
                    break;
                }
            }
            panic!("rel err {err}: {msg}");
        }
    }
}
