//! Residual k-means quantization.
//!
//! Level 0 clusters the raw vectors; each deeper level clusters the residuals
//! left by the previous one. Quantization walks the levels greedily, picking
//! the nearest centroid (ties break to the lowest index) and threading the
//! residual forward.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng;

pub const CODEBOOK_MAGIC: &[u8; 5] = b"OLCB1";

/// T levels of centroid matrices; level l is N_l × d.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub levels: Vec<Matrix>,
    pub dim: usize,
    /// Mean squared residual norm measured on the fit set, per level.
    pub fit_mse: Vec<f64>,
}

impl Codebook {
    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.rows).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Quantized {
    pub codes: Vec<u16>,
    /// x − Σ_l c^l (centroids summed in level order).
    pub residual: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid row by Euclidean distance; strict less-than keeps the
/// lowest index on ties.
pub fn nearest_centroid(x: &[f64], centroids: &Matrix) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for r in 0..centroids.rows {
        let d = sq_dist(x, centroids.row(r));
        if d < best_d {
            best_d = d;
            best = r;
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded
/// from the point farthest from its assigned centroid. Stops after `iters`
/// rounds or when the relative inertia improvement drops below `tol`.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    iters: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Matrix> {
    if k < 1 {
        return Err(Error::Config("kmeans needs k ≥ 1".into()));
    }
    if points.is_empty() {
        return Err(Error::Config("kmeans needs at least one point".into()));
    }
    let dim = points[0].len();
    let n = points.len();

    // k-means++ seeding.
    let mut centroids = Matrix::zeros(k, dim);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(&points[first]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // All points coincide with chosen centroids; keep it deterministic.
            rng.random_range(0..n)
        } else {
            let mut dart = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, w) in d2.iter().enumerate() {
                dart -= w;
                if dart <= 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        };
        centroids.row_mut(c).copy_from_slice(&points[pick]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }

    let mut assign = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..iters {
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let a = nearest_centroid(p, &centroids);
            assign[i] = a;
            inertia += sq_dist(p, centroids.row(a));
        }
        // Update step.
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums.row_mut(assign[i]).iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed from the farthest point.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&points[a], centroids.row(assign[a]));
                        let db = sq_dist(&points[b], centroids.row(assign[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids.row_mut(c).copy_from_slice(&points[far]);
            } else {
                let inv = 1.0 / counts[c] as f64;
                let row = sums.row(c).to_vec();
                for (cv, s) in centroids.row_mut(c).iter_mut().zip(row) {
                    *cv = s * inv;
                }
            }
        }
        if prev_inertia.is_finite() {
            let rel = (prev_inertia - inertia).abs() / prev_inertia.max(1e-12);
            if rel < tol {
                break;
            }
        }
        prev_inertia = inertia;
    }
    Ok(centroids)
}

/// Fit a residual codebook: k-means per level on the residuals of the
/// previous level. Records the mean squared residual norm after each level.
pub fn res_kmeans_fit(
    embeddings: &[Vec<f64>],
    level_sizes: &[usize],
    iters: usize,
    tol: f64,
    seed: u64,
) -> Result<Codebook> {
    if level_sizes.iter().any(|&k| k < 1) {
        return Err(Error::Config("codebook level sizes must be ≥ 1".into()));
    }
    if embeddings.is_empty() {
        return Err(Error::Config(
            "cannot fit a codebook on zero embeddings".into(),
        ));
    }
    let dim = embeddings[0].len();
    let mut residuals: Vec<Vec<f64>> = embeddings.to_vec();
    let mut levels = Vec::with_capacity(level_sizes.len());
    let mut fit_mse = Vec::with_capacity(level_sizes.len());
    for (l, &k) in level_sizes.iter().enumerate() {
        let mut r = rng::stream(seed, "res-kmeans", l as u64);
        let centroids = kmeans(&residuals, k, iters, tol, &mut r)?;
        for x in residuals.iter_mut() {
            let q = nearest_centroid(x, &centroids);
            for (xv, cv) in x.iter_mut().zip(centroids.row(q)) {
                *xv -= cv;
            }
        }
        let mse = residuals
            .iter()
            .map(|x| sq_dist(x, &vec![0.0; dim]))
            .sum::<f64>()
            / residuals.len() as f64;
        fit_mse.push(mse);
        levels.push(centroids);
    }
    Ok(Codebook { levels, dim, fit_mse })
}

/// Greedy per-level quantization. The returned residual is
/// x − (c^0 + c^1 + …) with centroids summed low level to high.
pub fn quantize(x: &[f64], codebook: &Codebook) -> Quantized {
    let mut codes = Vec::with_capacity(codebook.levels.len());
    let mut residual = x.to_vec();
    let mut reconstruction = vec![0.0; x.len()];
    for level in &codebook.levels {
        let q = nearest_centroid(&residual, level);
        codes.push(q as u16);
        for ((r, rec), c) in residual
            .iter_mut()
            .zip(reconstruction.iter_mut())
            .zip(level.row(q))
        {
            *r -= c;
            *rec += c;
        }
    }
    let residual = x
        .iter()
        .zip(&reconstruction)
        .map(|(xv, s)| xv - s)
        .collect();
    Quantized { codes, residual }
}

/// Σ_l c^l_{q^l}, summed low level to high.
pub fn reconstruct(codes: &[u16], codebook: &Codebook) -> Result<Vec<f64>> {
    if codes.len() != codebook.levels.len() {
        return Err(Error::Dimension(
            "code count does not match codebook levels".into(),
        ));
    }
    let mut out = vec![0.0; codebook.dim];
    for (l, &q) in codes.iter().enumerate() {
        let level = &codebook.levels[l];
        if q as usize >= level.rows {
            return Err(Error::Index(format!(
                "code {q} out of level-{l} size {}",
                level.rows
            )));
        }
        for (o, c) in out.iter_mut().zip(level.row(q as usize)) {
            *o += c;
        }
    }
    Ok(out)
}

/// `codebook.bin`: magic, T, d, per-level sizes (LE u32), then f64 centroid
/// rows level by level. Fit diagnostics live in a sidecar, not here.
pub fn write_codebook(cb: &Codebook, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(CODEBOOK_MAGIC).map_err(io_err)?;
    w.write_all(&(cb.levels.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&(cb.dim as u32).to_le_bytes())
        .map_err(io_err)?;
    for level in &cb.levels {
        w.write_all(&(level.rows as u32).to_le_bytes())
            .map_err(io_err)?;
    }
    for level in &cb.levels {
        for v in &level.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CODEBOOK_MAGIC {
        return Err(Error::parse("codebook.bin", "bad magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(io_err)?;
    let t = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4).map_err(io_err)?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut sizes = Vec::with_capacity(t);
    for _ in 0..t {
        r.read_exact(&mut b4).map_err(io_err)?;
        sizes.push(u32::from_le_bytes(b4) as usize);
    }
    let mut levels = Vec::with_capacity(t);
    for &n in &sizes {
        let mut m = Matrix::zeros(n, dim);
        for v in m.data.iter_mut() {
            r.read_exact(&mut b8).map_err(io_err)?;
            *v = f64::from_le_bytes(b8);
        }
        levels.push(m);
    }
    // Fit diagnostics are not part of the wire format.
    Ok(Codebook {
        levels,
        dim,
        fit_mse: Vec::new(),
    })
}
