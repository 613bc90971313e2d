//! World generation: users, authors, session lifecycles, segment embeddings.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};

use crate::error::Result;
use crate::numerics::params::gauss;
use crate::rng;
use crate::sim::{Author, LiveSession, Propensities, User, World, WorldConfig, SEGMENT_SECONDS};

/// Shape parameter of the log-normal session-duration distribution.
const DURATION_SIGMA: f64 = 0.5;
/// Sessions shorter than one segment window are dropped.
const MIN_SESSION_SECONDS: u64 = SEGMENT_SECONDS;
const MAX_SESSION_SECONDS: u64 = 6 * 3600;

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let horizon = config.horizon_seconds();

    let mut arng = rng::stream(seed, "authors", 0);
    let authors: Vec<Author> = (0..config.num_authors)
        .map(|i| Author {
            id: i as u32,
            base_topic: unit_vector(config.content_dim, &mut arng),
            drift_rate: arng.random::<f64>() * config.max_drift_rate,
            popularity: arng.random_range(0.05..0.95),
        })
        .collect();

    let mut urng = rng::stream(seed, "users", 0);
    let users: Vec<User> = (0..config.num_users)
        .map(|i| {
            let click = urng.random_range(0.3..0.8);
            User {
                id: i as u32,
                preference: unit_vector(config.content_dim, &mut urng),
                propensities: Propensities {
                    click,
                    long_view: urng.random_range(0.2..0.6),
                    follow: urng.random_range(0.05..0.3),
                    gift: click * urng.random_range(0.01..0.3),
                },
            }
        })
        .collect();

    // Session lifecycles: per author, alternate offline gaps (exponential)
    // and live sessions (log-normal around the target mean) so the expected
    // live fraction equals mean_session / (mean_session + mean_gap).
    let mean_session = config.mean_session_minutes * 60.0;
    let mean_gap = mean_session * (1.0 - config.live_fraction) / config.live_fraction;
    let gap_dist = Exp::new(1.0 / mean_gap).expect("gap rate");
    let mu = mean_session.ln() - DURATION_SIGMA * DURATION_SIGMA / 2.0;
    let dur_dist = LogNormal::new(mu, DURATION_SIGMA).expect("duration params");

    let mut sessions: Vec<LiveSession> = Vec::new();
    let mut author_sessions: Vec<Vec<usize>> = vec![Vec::new(); config.num_authors];
    for author in &authors {
        let mut srng = rng::stream(seed, "sessions", author.id as u64);
        let mut t = 0.0f64;
        loop {
            t += gap_dist.sample(&mut srng);
            let start = t as u64;
            if start >= horizon {
                break;
            }
            let dur = dur_dist
                .sample(&mut srng)
                .clamp(MIN_SESSION_SECONDS as f64, MAX_SESSION_SECONDS as f64);
            t += dur;
            let end = (t as u64).min(horizon);
            if end < start + MIN_SESSION_SECONDS {
                continue;
            }
            let id = sessions.len() as u32;
            let segments = segment_walk(config, seed, id, author, start, end);
            author_sessions[author.id as usize].push(sessions.len());
            sessions.push(LiveSession {
                id,
                author_id: author.id,
                start,
                end,
                segments,
                content_dim: config.content_dim,
            });
        }
    }

    let mut world = World {
        config: config.clone(),
        seed,
        users,
        authors,
        sessions,
        events: Vec::new(),
        author_sessions,
    };
    world.events = super::sample_interactions(&world);
    Ok(world)
}

/// One unit embedding per 30 s window:
/// normalize(base_topic + drift_rate · random_walk(i) + noise_i), with the
/// walk seeded per session so two sessions of one author never coincide.
fn segment_walk(
    config: &WorldConfig,
    seed: u64,
    session_id: u32,
    author: &Author,
    start: u64,
    end: u64,
) -> Vec<f32> {
    let count = ((end - start) / SEGMENT_SECONDS) as usize;
    let d = config.content_dim;
    let step_std = 1.0 / (d as f64).sqrt();
    let mut wrng = rng::stream(seed, "segments", session_id as u64);
    let mut walk = vec![0.0f64; d];
    let mut out = Vec::with_capacity(count * d);
    for _ in 0..count {
        for w in walk.iter_mut() {
            *w += gauss(&mut wrng) * step_std;
        }
        let mut v: Vec<f64> = (0..d)
            .map(|j| {
                author.base_topic[j]
                    + author.drift_rate * walk[j]
                    + config.drift_noise * gauss(&mut wrng) * step_std
            })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in v.iter_mut() {
            *x /= norm;
        }
        out.extend(v.iter().map(|x| *x as f32));
    }
    out
}
