//! Stage orchestration, artifact manifests, evaluation, and reporting.
//!
//! Stages: simulate → train-tokenizer → quantize → train-generator → align →
//! infer → eval → bench. Each stage reads upstream artifacts, writes its own,
//! and records a manifest entry (input content hashes, config hash, seed) so
//! a rerun with identical inputs is exactly reproducible.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    mean_reward_topk, run_alignment, train_reward, AlignmentInputs, RewardModel,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::formats;
use crate::generator::{
    build_train_pool, eval_acc_all, train_generator, ContextBuilder, GeneratorModel, TrainSample,
};
use crate::inference::{
    beam_search_standard, bench_decoding, eval_hr_mrr, render_table, resolve_results,
    FrozenForward, GenerationResult, SidIndex,
};
use crate::sim::{self, InteractionEvent, World};
use crate::tokenizer::{
    codebook_metrics, collect_ia_snapshots, compute_sid_timeline, read_sids, res_kmeans_fit,
    train_alignment, AlignmentModel, AuthorSidTimeline, CodebookMetrics, SemanticId,
};

pub const STAGES: [&str; 8] = [
    "simulate",
    "train-tokenizer",
    "quantize",
    "train-generator",
    "align",
    "infer",
    "eval",
    "bench",
];

/// Artifact locations under one data root.
#[derive(Debug, Clone)]
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Paths { root: root.into() }
    }

    pub fn world_json(&self) -> PathBuf {
        self.root.join("world.json")
    }
    pub fn events(&self) -> PathBuf {
        self.root.join("events.jsonl")
    }
    pub fn segments_bin(&self) -> PathBuf {
        self.root.join("segments.bin")
    }
    pub fn segments_idx(&self) -> PathBuf {
        self.root.join("segments.idx.jsonl")
    }
    pub fn tokenizer_model(&self) -> PathBuf {
        self.root.join("tokenizer_model.bin")
    }
    pub fn tokenizer_trace(&self) -> PathBuf {
        self.root.join("tokenizer_trace.jsonl")
    }
    pub fn codebook(&self) -> PathBuf {
        self.root.join("codebook.bin")
    }
    pub fn codebook_stats(&self) -> PathBuf {
        self.root.join("codebook_stats.json")
    }
    pub fn sids(&self) -> PathBuf {
        self.root.join("sids.jsonl")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.bin")
    }
    pub fn checkpoint_rl(&self) -> PathBuf {
        self.root.join("checkpoint_rl.bin")
    }
    pub fn reward_model(&self) -> PathBuf {
        self.root.join("reward_model.bin")
    }
    pub fn train_trace(&self) -> PathBuf {
        self.root.join("train_trace.jsonl")
    }
    pub fn rl_trace(&self) -> PathBuf {
        self.root.join("rl_trace.jsonl")
    }
    pub fn results(&self) -> PathBuf {
        self.root.join("results.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn bench_json(&self) -> PathBuf {
        self.root.join("bench.json")
    }
    pub fn bench_txt(&self) -> PathBuf {
        self.root.join("bench.txt")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StageManifest {
    pub inputs: BTreeMap<String, String>,
    pub config_hash: String,
    pub seed: u64,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageManifest>,
}

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} (produced by the `{produced_by}` stage)",
            path.display()
        )));
    }
    Ok(())
}

fn update_manifest(
    paths: &Paths,
    stage: &str,
    cfg: &PipelineConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let mut manifest: Manifest = if paths.manifest().exists() {
        let text = std::fs::read_to_string(paths.manifest())
            .map_err(|e| Error::io(paths.manifest().display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse("manifest.json", e))?
    } else {
        Manifest::default()
    };
    let rel = |p: &PathBuf| {
        p.strip_prefix(&paths.root)
            .map(|r| r.display().to_string())
            .unwrap_or_else(|_| p.display().to_string())
    };
    let mut entry = StageManifest {
        inputs: BTreeMap::new(),
        config_hash: cfg.content_hash(),
        seed: cfg.seed,
        outputs: outputs.iter().map(&rel).collect(),
    };
    for input in inputs {
        entry
            .inputs
            .insert(rel(input), formats::artifact_hash(input)?);
    }
    manifest.stages.insert(stage.to_string(), entry);
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::parse("manifest.json", e))?;
    std::fs::write(paths.manifest(), json)
        .map_err(|e| Error::io(paths.manifest().display().to_string(), e))
}

/// Test split boundary: the final simulated day.
pub fn boundary_ts(cfg: &PipelineConfig) -> u64 {
    (cfg.world.horizon_days - 1) * 86_400
}

// ── Shared loading ──────────────────────────────────────────────────

fn load_world(paths: &Paths) -> Result<World> {
    require(&paths.world_json(), "simulate")?;
    let meta = sim::read_world_meta(&paths.world_json())?;
    sim::generate_world(&meta.config, meta.seed)
}

fn load_events(paths: &Paths) -> Result<Vec<InteractionEvent>> {
    require(&paths.events(), "simulate")?;
    sim::read_events(&paths.events())
}

fn load_tokenizer(paths: &Paths, cfg: &PipelineConfig) -> Result<AlignmentModel> {
    require(&paths.tokenizer_model(), "train-tokenizer")?;
    let store = formats::load_checkpoint(&paths.tokenizer_model())?;
    AlignmentModel::from_store(&cfg.tokenizer, cfg.world.content_dim, store)
}

fn load_timeline(paths: &Paths, world: &World) -> Result<AuthorSidTimeline> {
    require(&paths.sids(), "quantize")?;
    let records = read_sids(&paths.sids())?;
    Ok(AuthorSidTimeline::build(&records, world.authors.len()))
}

/// The serving checkpoint: aligned when available, supervised otherwise.
fn serving_checkpoint(paths: &Paths) -> Result<PathBuf> {
    if paths.checkpoint_rl().exists() {
        Ok(paths.checkpoint_rl())
    } else if paths.checkpoint().exists() {
        Ok(paths.checkpoint())
    } else {
        Err(Error::MissingArtifact(format!(
            "{} (produced by the `train-generator` stage)",
            paths.checkpoint().display()
        )))
    }
}

fn load_generator(cfg: &PipelineConfig, world: &World, path: &Path) -> Result<GeneratorModel> {
    let store = formats::load_checkpoint(path)?;
    GeneratorModel::from_store(&cfg.generator, world.authors.len(), store)
}

/// Deterministic evaluation queries: click-positive test-day events whose
/// author has a SID history, strided down to the configured cap.
fn test_queries(
    cfg: &PipelineConfig,
    events: &[InteractionEvent],
    timeline: &AuthorSidTimeline,
) -> Vec<(u32, u64, u32, SemanticId)> {
    let boundary = boundary_ts(cfg);
    let mut queries: Vec<(u32, u64, u32, SemanticId)> = events
        .iter()
        .filter(|e| e.ts >= boundary && e.labels.click)
        .filter_map(|e| {
            timeline
                .sid_at(e.author_id, e.ts)
                .map(|sid| (e.user_id, e.ts, e.author_id, sid))
        })
        .collect();
    queries.sort_by_key(|(u, ts, a, _)| (*ts, *u, *a));
    let cap = cfg.inference.eval_queries.max(1);
    if queries.len() > cap {
        let stride = queries.len() / cap;
        queries = queries
            .into_iter()
            .step_by(stride.max(1))
            .take(cap)
            .collect();
    }
    queries
}

// ── Stages ──────────────────────────────────────────────────────────

pub fn stage_simulate(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&paths.root)
        .map_err(|e| Error::io(paths.root.display().to_string(), e))?;
    let world = sim::generate_world(&cfg.world, cfg.seed)?;
    sim::export_dataset(&world, &paths.root)?;
    update_manifest(
        paths,
        "simulate",
        cfg,
        &[],
        &[
            paths.world_json(),
            paths.events(),
            paths.segments_bin(),
            paths.segments_idx(),
        ],
    )
}

#[derive(Serialize, Deserialize)]
struct LossLine {
    step: usize,
    loss: f64,
}

pub fn stage_train_tokenizer(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let world = load_world(paths)?;
    let events = load_events(paths)?;
    let (train, _) = sim::split_train_test(&events, boundary_ts(cfg));
    let mut model = AlignmentModel::new(
        &cfg.tokenizer,
        world.users.len(),
        world.authors.len(),
        cfg.world.content_dim,
        cfg.seed,
    )?;
    let trace = train_alignment(&mut model, &world, &train, cfg.seed)?;
    formats::save_checkpoint(&model.store, &paths.tokenizer_model())?;
    let lines: Vec<LossLine> = trace
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossLine { step, loss })
        .collect();
    formats::write_jsonl(&lines, &paths.tokenizer_trace())?;
    update_manifest(
        paths,
        "train-tokenizer",
        cfg,
        &[paths.world_json(), paths.events()],
        &[paths.tokenizer_model(), paths.tokenizer_trace()],
    )
}

pub fn stage_quantize(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let world = load_world(paths)?;
    let tokenizer = load_tokenizer(paths, cfg)?;
    let snapshots = collect_ia_snapshots(
        &tokenizer,
        &world,
        boundary_ts(cfg),
        cfg.tokenizer.fit_sample,
    )?;
    let vectors: Vec<Vec<f64>> = snapshots.into_iter().map(|s| s.vector).collect();
    let codebook = res_kmeans_fit(
        &vectors,
        &cfg.tokenizer.level_sizes,
        cfg.tokenizer.kmeans_iters,
        cfg.tokenizer.kmeans_tol,
        cfg.seed,
    )?;
    crate::tokenizer::write_codebook(&codebook, &paths.codebook())?;
    let stats = serde_json::json!({
        "levels": codebook.level_sizes(),
        "dim": codebook.dim,
        "fit_mse_per_level": codebook.fit_mse,
        "fit_vectors": vectors.len(),
    });
    std::fs::write(
        paths.codebook_stats(),
        serde_json::to_string_pretty(&stats).map_err(|e| Error::parse("codebook_stats.json", e))?,
    )
    .map_err(|e| Error::io(paths.codebook_stats().display().to_string(), e))?;
    let records = compute_sid_timeline(&world, &tokenizer, &codebook)?;
    crate::tokenizer::write_sids(&records, &paths.sids())?;
    update_manifest(
        paths,
        "quantize",
        cfg,
        &[paths.world_json(), paths.tokenizer_model()],
        &[paths.codebook(), paths.codebook_stats(), paths.sids()],
    )
}

pub fn stage_train_generator(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let world = load_world(paths)?;
    let events = load_events(paths)?;
    let tokenizer = load_tokenizer(paths, cfg)?;
    let timeline = load_timeline(paths, &world)?;
    let (train, _) = sim::split_train_test(&events, boundary_ts(cfg));
    let builder = ContextBuilder::new(
        &world,
        &tokenizer,
        &train,
        cfg.generator.seqs,
        cfg.generator.seq_len,
        world.authors.len(),
    )?;
    let pool = build_train_pool(&train, &timeline);
    let mut model = GeneratorModel::new(&cfg.generator, world.authors.len(), cfg.seed)?;
    let trace = train_generator(&mut model, &builder, &pool, cfg.seed)?;
    formats::save_checkpoint(&model.store, &paths.checkpoint())?;
    formats::write_jsonl(&trace, &paths.train_trace())?;
    update_manifest(
        paths,
        "train-generator",
        cfg,
        &[
            paths.world_json(),
            paths.events(),
            paths.tokenizer_model(),
            paths.codebook(),
            paths.sids(),
        ],
        &[paths.checkpoint(), paths.train_trace()],
    )
}

pub fn stage_align(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let world = load_world(paths)?;
    let events = load_events(paths)?;
    let tokenizer = load_tokenizer(paths, cfg)?;
    let timeline = load_timeline(paths, &world)?;
    require(&paths.checkpoint(), "train-generator")?;
    let (train, _) = sim::split_train_test(&events, boundary_ts(cfg));

    let mut reward = RewardModel::new(
        &cfg.alignment.reward,
        world.users.len(),
        world.authors.len(),
        cfg.world.content_dim,
        cfg.seed,
    )?;
    train_reward(&mut reward, &world, &train, cfg.seed)?;
    formats::save_checkpoint(&reward.store, &paths.reward_model())?;

    let builder = ContextBuilder::new(
        &world,
        &tokenizer,
        &train,
        cfg.generator.seqs,
        cfg.generator.seq_len,
        world.authors.len(),
    )?;
    let pool = build_train_pool(&train, &timeline);
    let query_pool: Vec<(u32, u64)> = pool.iter().map(|(u, ts, _)| (*u, *ts)).collect();
    let mut policy = load_generator(cfg, &world, &paths.checkpoint())?;
    let inputs = AlignmentInputs {
        world: &world,
        builder: &builder,
        timeline: &timeline,
        train_pool: &pool,
        query_pool: &query_pool,
    };
    let trace = run_alignment(&mut policy, &reward, &inputs, &cfg.alignment, cfg.seed)?;
    formats::save_checkpoint(&policy.store, &paths.checkpoint_rl())?;
    formats::write_jsonl(&trace, &paths.rl_trace())?;
    update_manifest(
        paths,
        "align",
        cfg,
        &[
            paths.world_json(),
            paths.events(),
            paths.tokenizer_model(),
            paths.sids(),
            paths.checkpoint(),
        ],
        &[
            paths.reward_model(),
            paths.checkpoint_rl(),
            paths.rl_trace(),
        ],
    )
}

/// Wire form of the per-query decode statistics.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResultStats {
    pub full_calls: u64,
    pub lite_calls: u64,
    pub micros: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ResultLine {
    pub query_id: usize,
    pub user_id: u32,
    pub ts: u64,
    pub ranked: Vec<crate::inference::RankedEntry>,
    pub stats: ResultStats,
}

pub fn stage_infer(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let world = load_world(paths)?;
    let events = load_events(paths)?;
    let tokenizer = load_tokenizer(paths, cfg)?;
    let timeline = load_timeline(paths, &world)?;
    let ckpt = serving_checkpoint(paths)?;
    let model = load_generator(cfg, &world, &ckpt)?;
    // Contexts may draw on everything before the query, including earlier
    // test-day events.
    let builder = ContextBuilder::new(
        &world,
        &tokenizer,
        &events,
        cfg.generator.seqs,
        cfg.generator.seq_len,
        world.authors.len(),
    )?;
    let queries = test_queries(cfg, &events, &timeline);
    let frozen = FrozenForward::new(&model);
    let lines: Vec<Result<ResultLine>> = queries
        .par_iter()
        .enumerate()
        .map(|(query_id, &(user, ts, _, _))| {
            let index = SidIndex::build(&world, &timeline, ts);
            let ctx = builder.build(user, ts);
            let qc = frozen.encode_query(&ctx)?;
            let outcome = beam_search_standard(&frozen, &qc, cfg.inference.beam_width)?;
            let result: GenerationResult = resolve_results(&outcome, &index, cfg.inference.top_k);
            Ok(ResultLine {
                query_id,
                user_id: user,
                ts,
                ranked: result.ranked,
                stats: ResultStats {
                    full_calls: result.stats.full_calls,
                    lite_calls: result.stats.lite_calls,
                    micros: result.stats.micros,
                },
            })
        })
        .collect();
    let lines: Vec<ResultLine> = lines.into_iter().collect::<Result<_>>()?;
    formats::write_jsonl(&lines, &paths.results())?;
    update_manifest(
        paths,
        "infer",
        cfg,
        &[
            paths.world_json(),
            paths.events(),
            paths.tokenizer_model(),
            paths.sids(),
            ckpt,
        ],
        &[paths.results()],
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub eval_queries: usize,
    /// HR@k and MRR@k keyed by k.
    pub hr: BTreeMap<String, f64>,
    pub mrr: BTreeMap<String, f64>,
    pub acc_all: Option<f64>,
    pub codebook: CodebookMetrics,
    /// Mean reward of the top-k recommended authors, keyed by k.
    pub reward_at_k: BTreeMap<String, f64>,
    /// Fraction of returned authors live at their query time.
    pub live_validity_rate: f64,
}

pub fn stage_eval(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let world = load_world(paths)?;
    let events = load_events(paths)?;
    let tokenizer = load_tokenizer(paths, cfg)?;
    let timeline = load_timeline(paths, &world)?;
    require(&paths.results(), "infer")?;
    require(&paths.reward_model(), "align")?;
    let results: Vec<ResultLine> = formats::read_jsonl(&paths.results())?;
    let queries = test_queries(cfg, &events, &timeline);
    if results.len() != queries.len() {
        return Err(Error::Invariant(format!(
            "results.jsonl has {} lines but the query set has {}",
            results.len(),
            queries.len()
        )));
    }

    // Retrieval metrics.
    let pairs: Vec<(Vec<u32>, u32)> = results
        .iter()
        .zip(&queries)
        .map(|(line, &(_, _, truth, _))| {
            (
                line.ranked
                    .iter()
                    .flat_map(|e| e.authors.iter().copied())
                    .collect(),
                truth,
            )
        })
        .collect();
    let mut hr = BTreeMap::new();
    let mut mrr = BTreeMap::new();
    for &k in &cfg.inference.hr_ks {
        let (h, m) = eval_hr_mrr(&pairs, k)?;
        if h.is_finite() && m.is_finite() {
            hr.insert(k.to_string(), h);
            mrr.insert(k.to_string(), m);
        }
    }

    // Live-validity audit over every returned author.
    let mut returned = 0usize;
    let mut live_ok = 0usize;
    for (line, _) in results.iter().zip(&queries) {
        for entry in &line.ranked {
            for a in &entry.authors {
                returned += 1;
                if world.live_session_of(*a, line.ts).is_some() {
                    live_ok += 1;
                }
            }
        }
    }
    let live_validity_rate = if returned == 0 {
        1.0
    } else {
        live_ok as f64 / returned as f64
    };

    // Teacher-forced ACC@all on the same query set.
    let ckpt = serving_checkpoint(paths)?;
    let model = load_generator(cfg, &world, &ckpt)?;
    let builder = ContextBuilder::new(
        &world,
        &tokenizer,
        &events,
        cfg.generator.seqs,
        cfg.generator.seq_len,
        world.authors.len(),
    )?;
    let samples: Vec<TrainSample> = queries
        .iter()
        .map(|&(user, ts, _, sid)| TrainSample {
            user_id: user,
            query_ts: ts,
            context: builder.build(user, ts),
            target: sid,
        })
        .collect();
    let acc_all = Some(eval_acc_all(&model, &samples)?).filter(|v| v.is_finite());

    // Codebook health over the author assignments at the test boundary.
    let boundary = boundary_ts(cfg);
    let mut assignments = BTreeMap::new();
    for author in 0..world.authors.len() as u32 {
        if let Some(sid) = timeline.sid_at(author, boundary) {
            assignments.insert(author, sid);
        }
    }
    let codebook = if assignments.is_empty() {
        CodebookMetrics {
            ur_levels: vec![],
            ur_l0_l1: 0.0,
            cr_sid: 0.0,
            cr_author: 0.0,
        }
    } else {
        codebook_metrics(&assignments, &cfg.tokenizer.level_sizes)?
    };

    // Reward of the top-k recommended authors.
    let reward_store = formats::load_checkpoint(&paths.reward_model())?;
    let reward =
        RewardModel::from_store(&cfg.alignment.reward, cfg.world.content_dim, reward_store)?;
    let mut reward_at_k = BTreeMap::new();
    for &k in &cfg.inference.reward_ks {
        let mut total = 0.0;
        let mut counted = 0usize;
        for line in &results {
            let authors: Vec<u32> = line
                .ranked
                .iter()
                .flat_map(|e| e.authors.iter().copied())
                .take(k)
                .collect();
            if authors.is_empty() {
                continue;
            }
            let mut sum = 0.0;
            for a in &authors {
                sum += reward.reward_score(&world, line.user_id, *a, line.ts)?;
            }
            total += sum / authors.len() as f64;
            counted += 1;
        }
        if counted > 0 {
            reward_at_k.insert(k.to_string(), total / counted as f64);
        }
    }

    let metrics = Metrics {
        eval_queries: queries.len(),
        hr,
        mrr,
        acc_all,
        codebook,
        reward_at_k,
        live_validity_rate,
    };
    let json =
        serde_json::to_string_pretty(&metrics).map_err(|e| Error::parse("metrics.json", e))?;
    std::fs::write(paths.metrics(), json)
        .map_err(|e| Error::io(paths.metrics().display().to_string(), e))?;
    update_manifest(
        paths,
        "eval",
        cfg,
        &[
            paths.world_json(),
            paths.events(),
            paths.tokenizer_model(),
            paths.sids(),
            paths.codebook(),
            paths.results(),
            paths.reward_model(),
            ckpt,
        ],
        &[paths.metrics()],
    )
}

pub fn stage_bench(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    let world = load_world(paths)?;
    let events = load_events(paths)?;
    let tokenizer = load_tokenizer(paths, cfg)?;
    let timeline = load_timeline(paths, &world)?;
    let ckpt = serving_checkpoint(paths)?;
    let model = load_generator(cfg, &world, &ckpt)?;
    let builder = ContextBuilder::new(
        &world,
        &tokenizer,
        &events,
        cfg.generator.seqs,
        cfg.generator.seq_len,
        world.authors.len(),
    )?;
    let queries = test_queries(cfg, &events, &timeline);
    let contexts: Vec<_> = queries
        .iter()
        .take(cfg.inference.bench_queries)
        .map(|&(user, ts, _, _)| builder.build(user, ts))
        .collect();
    let frozen = FrozenForward::new(&model);
    let report = bench_decoding(&frozen, &contexts, &cfg.inference.bench_widths)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::parse("bench.json", e))?;
    std::fs::write(paths.bench_json(), json)
        .map_err(|e| Error::io(paths.bench_json().display().to_string(), e))?;
    std::fs::write(paths.bench_txt(), render_table(&report))
        .map_err(|e| Error::io(paths.bench_txt().display().to_string(), e))?;
    update_manifest(
        paths,
        "bench",
        cfg,
        &[
            paths.world_json(),
            paths.events(),
            paths.tokenizer_model(),
            paths.sids(),
            ckpt,
        ],
        &[paths.bench_json(), paths.bench_txt()],
    )
}

pub fn run_stage(stage: &str, cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    match stage {
        "simulate" => stage_simulate(cfg, paths),
        "train-tokenizer" => stage_train_tokenizer(cfg, paths),
        "quantize" => stage_quantize(cfg, paths),
        "train-generator" => stage_train_generator(cfg, paths),
        "align" => stage_align(cfg, paths),
        "infer" => stage_infer(cfg, paths),
        "eval" => stage_eval(cfg, paths),
        "bench" => stage_bench(cfg, paths),
        other => Err(Error::Config(format!("unknown stage {other}"))),
    }
}

pub fn run_all(cfg: &PipelineConfig, paths: &Paths) -> Result<()> {
    for stage in STAGES {
        run_stage(stage, cfg, paths)?;
    }
    Ok(())
}

/// Post-alignment mean reward of the current serving checkpoint over probe
/// queries (used by the report to contextualize the RL trace).
#[allow(clippy::too_many_arguments)]
pub fn reward_probe(
    cfg: &PipelineConfig,
    paths: &Paths,
    k: usize,
    probe_count: usize,
) -> Result<Option<f64>> {
    let world = load_world(paths)?;
    let events = load_events(paths)?;
    let tokenizer = load_tokenizer(paths, cfg)?;
    let timeline = load_timeline(paths, &world)?;
    let ckpt = serving_checkpoint(paths)?;
    let model = load_generator(cfg, &world, &ckpt)?;
    let reward_store = formats::load_checkpoint(&paths.reward_model())?;
    let reward =
        RewardModel::from_store(&cfg.alignment.reward, cfg.world.content_dim, reward_store)?;
    let builder = ContextBuilder::new(
        &world,
        &tokenizer,
        &events,
        cfg.generator.seqs,
        cfg.generator.seq_len,
        world.authors.len(),
    )?;
    let queries: Vec<(u32, u64)> = test_queries(cfg, &events, &timeline)
        .into_iter()
        .take(probe_count)
        .map(|(u, ts, _, _)| (u, ts))
        .collect();
    mean_reward_topk(&model, &reward, &world, &builder, &timeline, &queries, k)
}

// ── Report ──────────────────────────────────────────────────────────

fn fmt_or_na(v: Option<&f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.4}"),
        _ => "n/a".to_string(),
    }
}

/// Human-readable metric summary; with a baseline, deltas are appended.
pub fn render_report(paths: &Paths, baseline: Option<&Paths>) -> Result<String> {
    require(&paths.metrics(), "eval")?;
    let metrics: Metrics = serde_json::from_str(
        &std::fs::read_to_string(paths.metrics())
            .map_err(|e| Error::io(paths.metrics().display().to_string(), e))?,
    )
    .map_err(|e| Error::parse("metrics.json", e))?;
    let base: Option<Metrics> = match baseline {
        Some(b) => {
            require(&b.metrics(), "eval (baseline)")?;
            Some(
                serde_json::from_str(
                    &std::fs::read_to_string(b.metrics())
                        .map_err(|e| Error::io(b.metrics().display().to_string(), e))?,
                )
                .map_err(|e| Error::parse("baseline metrics.json", e))?,
            )
        }
        None => None,
    };

    let delta = |ours: f64, theirs: Option<f64>| -> String {
        match theirs {
            Some(t) if t.is_finite() && ours.is_finite() => format!(" ({:+.4})", ours - t),
            _ => String::new(),
        }
    };

    let mut out = String::new();
    out.push_str(&format!("evaluation queries: {}\n\n", metrics.eval_queries));
    out.push_str("retrieval (click ground truth)\n");
    if metrics.hr.is_empty() {
        out.push_str("  HR  n/a (empty test set)\n  MRR n/a (empty test set)\n");
    }
    for (k, v) in &metrics.hr {
        let b = base.as_ref().and_then(|m| m.hr.get(k)).copied();
        out.push_str(&format!(
            "  HR@{k:<4} {}{}\n",
            fmt_or_na(Some(v)),
            delta(*v, b)
        ));
    }
    for (k, v) in &metrics.mrr {
        let b = base.as_ref().and_then(|m| m.mrr.get(k)).copied();
        out.push_str(&format!(
            "  MRR@{k:<3} {}{}\n",
            fmt_or_na(Some(v)),
            delta(*v, b)
        ));
    }
    let acc_base = base.as_ref().and_then(|m| m.acc_all);
    out.push_str(&format!(
        "\ntraining\n  ACC@all {}{}\n",
        fmt_or_na(metrics.acc_all.as_ref()),
        metrics
            .acc_all
            .map(|a| delta(a, acc_base))
            .unwrap_or_default()
    ));
    out.push_str(&format!(
        "  live validity rate {}\n",
        fmt_or_na(Some(&metrics.live_validity_rate))
    ));

    out.push_str("\ncodebook utilization / collisions\n  ");
    for (l, v) in metrics.codebook.ur_levels.iter().enumerate() {
        out.push_str(&format!("UR_L{l} {:.4}  ", v));
    }
    out.push_str(&format!(
        "UR_L0xL1 {:.4}\n  CR_SID {:.4}  CR_Author {:.4}\n",
        metrics.codebook.ur_l0_l1, metrics.codebook.cr_sid, metrics.codebook.cr_author
    ));

    out.push_str("\nreward by top-k\n");
    for (k, v) in &metrics.reward_at_k {
        let b = base.as_ref().and_then(|m| m.reward_at_k.get(k)).copied();
        out.push_str(&format!(
            "  k={k:<4} {}{}\n",
            fmt_or_na(Some(v)),
            delta(*v, b)
        ));
    }

    if paths.bench_json().exists() {
        let report: crate::inference::BenchReport = serde_json::from_str(
            &std::fs::read_to_string(paths.bench_json())
                .map_err(|e| Error::io(paths.bench_json().display().to_string(), e))?,
        )
        .map_err(|e| Error::parse("bench.json", e))?;
        out.push('\n');
        out.push_str(&render_table(&report));
    }
    Ok(out)
}
