//! Reverse-mode tape over a small fixed primitive set.
//!
//! The model graphs in this crate are static, so instead of a general autodiff
//! system the tape records a fixed vocabulary of matrix primitives (matmul,
//! add, elementwise mul, sigmoid, softmax, rms-norm, concat, slice, gather,
//! reductions, and the scalar ops the preference losses need). Forward values
//! are computed eagerly at record time; `backward` replays the op list in
//! reverse and accumulates gradients per buffer.
//!
//! A tape is owned by exactly one training step. Parameters bind lazily via
//! [`Tape::param`]; an aliased parameter binds to a single buffer, so its
//! gradient accumulates across every use site.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::matrix::{matmul_into, matmul_tb_into, Matrix};
use crate::numerics::ops::{sigmoid, CE_CLAMP_EPS};
use crate::numerics::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufId(usize);

#[derive(Debug, Clone)]
enum Op {
    MatMul {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    MatMulTB {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Add {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    AddRowBroadcast {
        x: BufId,
        row: BufId,
        out: BufId,
    },
    Mul {
        a: BufId,
        b: BufId,
        out: BufId,
    },
    Scale {
        x: BufId,
        c: f64,
        out: BufId,
    },
    Sigmoid {
        x: BufId,
        out: BufId,
    },
    Softmax {
        x: BufId,
        out: BufId,
    },
    RmsNorm {
        x: BufId,
        gain: BufId,
        eps: f64,
        out: BufId,
    },
    ConcatCols {
        parts: Vec<BufId>,
        out: BufId,
    },
    ConcatRows {
        parts: Vec<BufId>,
        out: BufId,
    },
    SliceCols {
        x: BufId,
        start: usize,
        len: usize,
        out: BufId,
    },
    SliceRows {
        x: BufId,
        start: usize,
        len: usize,
        out: BufId,
    },
    Gather {
        table: BufId,
        indices: Vec<usize>,
        out: BufId,
    },
    SumAll {
        x: BufId,
        out: BufId,
    },
    LogSumExp {
        x: BufId,
        out: BufId,
    },
    CeSum {
        logits: BufId,
        targets: Vec<usize>,
        out: BufId,
    },
    ScaleBy {
        x: BufId,
        s: BufId,
        out: BufId,
    },
    AddConst {
        x: BufId,
        out: BufId,
    },
    Exp {
        x: BufId,
        out: BufId,
    },
    Ln {
        x: BufId,
        out: BufId,
    },
    Softplus {
        x: BufId,
        out: BufId,
    },
    ClampConst {
        x: BufId,
        lo: f64,
        hi: f64,
        out: BufId,
    },
    MinPair {
        a: BufId,
        b: BufId,
        out: BufId,
    },
}

#[derive(Default)]
pub struct Tape {
    bufs: Vec<Matrix>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, BufId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix) -> BufId {
        let id = BufId(self.bufs.len());
        self.bufs.push(value);
        self.grads.push(None);
        id
    }

    /// Constant leaf (inputs, masks, frozen features). Gradients flow into it
    /// but are never read back.
    pub fn constant(&mut self, value: Matrix) -> BufId {
        self.push(value)
    }

    pub fn constant_row(&mut self, data: Vec<f64>) -> BufId {
        self.push(Matrix::row_vector(data))
    }

    pub fn scalar(&mut self, v: f64) -> BufId {
        self.push(Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        })
    }

    /// Bind a parameter tensor. Repeated binds of the same id (including via
    /// an alias) return the same buffer.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> BufId {
        if let Some(&b) = self.bound.get(&id) {
            return b;
        }
        let b = self.push(store.get(id).clone());
        self.bound.insert(id, b);
        b
    }

    pub fn value(&self, id: BufId) -> &Matrix {
        &self.bufs[id.0]
    }

    pub fn scalar_value(&self, id: BufId) -> f64 {
        self.bufs[id.0].data[0]
    }

    pub fn grad(&self, id: BufId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient per parameter tensor, zeros where no gradient flowed.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        (0..store.len())
            .map(|i| {
                let id = ParamId(i);
                match self.bound.get(&id).and_then(|b| self.grads[b.0].clone()) {
                    Some(g) => g,
                    None => vec![0.0; store.get(id).data.len()],
                }
            })
            .collect()
    }

    fn shape(&self, id: BufId) -> (usize, usize) {
        (self.bufs[id.0].rows, self.bufs[id.0].cols)
    }

    // ── Primitives ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Dimension(format!("tape matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = Matrix::zeros(m, n);
        matmul_into(
            &self.bufs[a.0].data,
            &self.bufs[b.0].data,
            &mut out.data,
            m,
            k,
            n,
        );
        let out = self.push(out);
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    /// a (m×k) · bᵀ (b is n×k) → m×n.
    pub fn matmul_tb(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::Dimension(format!(
                "tape matmul_tb {m}x{k} by {n}x{k2}ᵀ"
            )));
        }
        let mut out = Matrix::zeros(m, n);
        matmul_tb_into(
            &self.bufs[a.0].data,
            &self.bufs[b.0].data,
            &mut out.data,
            m,
            k,
            n,
        );
        let out = self.push(out);
        self.ops.push(Op::MatMulTB { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension("tape add shape mismatch".into()));
        }
        let (r, c) = self.shape(a);
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let out = self.push(Matrix {
            rows: r,
            cols: c,
            data,
        });
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    /// x (m×n) + row (1×n) broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: BufId, row: BufId) -> Result<BufId> {
        let (m, n) = self.shape(x);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != n {
            return Err(Error::Dimension(
                "tape add_row_broadcast shape mismatch".into(),
            ));
        }
        let mut out = self.bufs[x.0].clone();
        for r in 0..m {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bufs[row.0].data) {
                *o += b;
            }
        }
        let out = self.push(out);
        self.ops.push(Op::AddRowBroadcast { x, row, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension("tape mul shape mismatch".into()));
        }
        let (r, c) = self.shape(a);
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let out = self.push(Matrix {
            rows: r,
            cols: c,
            data,
        });
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: BufId, c: f64) -> BufId {
        let v = self.bufs[x.0].scale(c);
        let out = self.push(v);
        self.ops.push(Op::Scale { x, c, out });
        out
    }

    pub fn sigmoid(&mut self, x: BufId) -> BufId {
        let mut v = self.bufs[x.0].clone();
        for e in &mut v.data {
            *e = sigmoid(*e);
        }
        let out = self.push(v);
        self.ops.push(Op::Sigmoid { x, out });
        out
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: BufId) -> BufId {
        let mut v = self.bufs[x.0].clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let out = self.push(v);
        self.ops.push(Op::Softmax { x, out });
        out
    }

    /// Row-wise RMS normalization with a learnable gain (1×n).
    pub fn rms_norm(&mut self, x: BufId, gain: BufId, eps: f64) -> Result<BufId> {
        let (m, n) = self.shape(x);
        let (gr, gc) = self.shape(gain);
        if gr != 1 || gc != n {
            return Err(Error::Dimension("tape rms_norm gain shape mismatch".into()));
        }
        let mut v = Matrix::zeros(m, n);
        for r in 0..m {
            let xr = self.bufs[x.0].row(r);
            let ms = xr.iter().map(|e| e * e).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for ((o, xv), g) in v.row_mut(r).iter_mut().zip(xr).zip(&self.bufs[gain.0].data) {
                *o = g * xv * inv;
            }
        }
        let out = self.push(v);
        self.ops.push(Op::RmsNorm { x, gain, eps, out });
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[BufId]) -> Result<BufId> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| &self.bufs[p.0]).collect();
        let v = Matrix::concat_cols(&mats)?;
        let out = self.push(v);
        self.ops.push(Op::ConcatCols {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn concat_rows(&mut self, parts: &[BufId]) -> Result<BufId> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| &self.bufs[p.0]).collect();
        let v = Matrix::concat_rows(&mats)?;
        let out = self.push(v);
        self.ops.push(Op::ConcatRows {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: BufId, start: usize, len: usize) -> Result<BufId> {
        let v = self.bufs[x.0].slice_cols(start, len)?;
        let out = self.push(v);
        self.ops.push(Op::SliceCols { x, start, len, out });
        Ok(out)
    }

    pub fn slice_rows(&mut self, x: BufId, start: usize, len: usize) -> Result<BufId> {
        let (m, n) = self.shape(x);
        if start + len > m {
            return Err(Error::Index(format!(
                "slice_rows {start}..{} of {m} rows",
                start + len
            )));
        }
        let data = self.bufs[x.0].data[start * n..(start + len) * n].to_vec();
        let out = self.push(Matrix {
            rows: len,
            cols: n,
            data,
        });
        self.ops.push(Op::SliceRows { x, start, len, out });
        Ok(out)
    }

    /// Gather rows of `table` by index; backward scatter-adds.
    pub fn gather(&mut self, table: BufId, indices: &[usize]) -> Result<BufId> {
        let (rows, n) = self.shape(table);
        let mut v = Matrix::zeros(indices.len(), n);
        for (r, &idx) in indices.iter().enumerate() {
            if idx >= rows {
                return Err(Error::Index(format!(
                    "gather index {idx} out of {rows} rows"
                )));
            }
            v.row_mut(r).copy_from_slice(self.bufs[table.0].row(idx));
        }
        let out = self.push(v);
        self.ops.push(Op::Gather {
            table,
            indices: indices.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn sum_all(&mut self, x: BufId) -> BufId {
        let s: f64 = self.bufs[x.0].data.iter().sum();
        let out = self.push(Matrix {
            rows: 1,
            cols: 1,
            data: vec![s],
        });
        self.ops.push(Op::SumAll { x, out });
        out
    }

    /// Row-wise log-sum-exp (stable), m×n → m×1.
    pub fn log_sum_exp(&mut self, x: BufId) -> BufId {
        let (m, _) = self.shape(x);
        let mut v = Matrix::zeros(m, 1);
        for r in 0..m {
            let row = self.bufs[x.0].row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v.data[r] = mx + row.iter().map(|e| (e - mx).exp()).sum::<f64>().ln();
        }
        let out = self.push(v);
        self.ops.push(Op::LogSumExp { x, out });
        out
    }

    pub fn mean_all(&mut self, x: BufId) -> BufId {
        let n = self.bufs[x.0].data.len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum over rows of the clamped cross-entropy between row-wise softmax of
    /// `logits` and the per-row target class. Computed via logsumexp; rows
    /// hitting the −ln(1e-12) clamp contribute no gradient.
    pub fn ce_sum(&mut self, logits: BufId, targets: &[usize]) -> Result<BufId> {
        let (m, n) = self.shape(logits);
        if targets.len() != m {
            return Err(Error::Dimension("ce_sum target count mismatch".into()));
        }
        let cap = -CE_CLAMP_EPS.ln();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::Index(format!(
                    "ce_sum target {t} out of {n} classes"
                )));
            }
            let row = self.bufs[logits.0].row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += (lse - row[t]).min(cap);
        }
        let out = self.push(Matrix {
            rows: 1,
            cols: 1,
            data: vec![total],
        });
        self.ops.push(Op::CeSum {
            logits,
            targets: targets.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Multiply by a 1×1 tape scalar (a learnable gate or temperature).
    pub fn scale_by(&mut self, x: BufId, s: BufId) -> Result<BufId> {
        if self.shape(s) != (1, 1) {
            return Err(Error::Dimension("scale_by expects a 1×1 scalar".into()));
        }
        let sv = self.bufs[s.0].data[0];
        let v = self.bufs[x.0].scale(sv);
        let out = self.push(v);
        self.ops.push(Op::ScaleBy { x, s, out });
        Ok(out)
    }

    pub fn add_const(&mut self, x: BufId, c: f64) -> BufId {
        let mut v = self.bufs[x.0].clone();
        for e in &mut v.data {
            *e += c;
        }
        let out = self.push(v);
        self.ops.push(Op::AddConst { x, out });
        out
    }

    pub fn exp(&mut self, x: BufId) -> BufId {
        let mut v = self.bufs[x.0].clone();
        for e in &mut v.data {
            *e = e.exp();
        }
        let out = self.push(v);
        self.ops.push(Op::Exp { x, out });
        out
    }

    pub fn ln(&mut self, x: BufId) -> BufId {
        let mut v = self.bufs[x.0].clone();
        for e in &mut v.data {
            *e = e.ln();
        }
        let out = self.push(v);
        self.ops.push(Op::Ln { x, out });
        out
    }

    /// ln(1 + eˣ), computed stably.
    pub fn softplus(&mut self, x: BufId) -> BufId {
        let mut v = self.bufs[x.0].clone();
        for e in &mut v.data {
            *e = e.max(0.0) + (-e.abs()).exp().ln_1p();
        }
        let out = self.push(v);
        self.ops.push(Op::Softplus { x, out });
        out
    }

    pub fn clamp_const(&mut self, x: BufId, lo: f64, hi: f64) -> BufId {
        let mut v = self.bufs[x.0].clone();
        for e in &mut v.data {
            *e = e.clamp(lo, hi);
        }
        let out = self.push(v);
        self.ops.push(Op::ClampConst { x, lo, hi, out });
        out
    }

    /// Elementwise min; gradient routes to the smaller argument (ties → a).
    pub fn min_pair(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension("tape min_pair shape mismatch".into()));
        }
        let (r, c) = self.shape(a);
        let data = self.bufs[a.0]
            .data
            .iter()
            .zip(&self.bufs[b.0].data)
            .map(|(x, y)| x.min(*y))
            .collect();
        let out = self.push(Matrix {
            rows: r,
            cols: c,
            data,
        });
        self.ops.push(Op::MinPair { a, b, out });
        Ok(out)
    }

    // ── Composites ─────────────────────────────────────────────────

    /// x·W + bias (bias broadcast over rows).
    pub fn linear(&mut self, x: BufId, w: BufId, bias: BufId) -> Result<BufId> {
        let xw = self.matmul(x, w)?;
        self.add_row_broadcast(xw, bias)
    }

    /// Two-layer perceptron with sigmoid hidden activation.
    pub fn mlp2(&mut self, x: BufId, w1: BufId, b1: BufId, w2: BufId, b2: BufId) -> Result<BufId> {
        let h = self.linear(x, w1, b1)?;
        let h = self.sigmoid(h);
        self.linear(h, w2, b2)
    }

    /// Largest |entry| of a buffer's forward value (off-graph scan).
    pub fn max_abs(&self, x: BufId) -> f64 {
        self.bufs[x.0].data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    // ── Backward ───────────────────────────────────────────────────

    fn accumulate(&mut self, id: BufId, g: &[f64]) {
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => self.grads[id.0] = Some(g.to_vec()),
        }
    }

    /// Reverse sweep from a scalar loss buffer (seeded with 1).
    pub fn backward(&mut self, loss: BufId) {
        assert_eq!(
            self.bufs[loss.0].data.len(),
            1,
            "backward expects a scalar loss"
        );
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            let op = self.ops[i].clone();
            self.backward_op(&op);
        }
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::MatMul { a, b, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                // dA = dOut · Bᵀ
                let mut da = vec![0.0; m * k];
                matmul_tb_into(&d, &self.bufs[b.0].data, &mut da, m, n, k);
                self.accumulate(*a, &da);
                // dB = Aᵀ · dOut
                let mut db = vec![0.0; k * n];
                let a_data = self.bufs[a.0].data.clone();
                for i in 0..m {
                    for kk in 0..k {
                        let av = a_data[i * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[kk * n + j] += av * d[i * n + j];
                        }
                    }
                }
                self.accumulate(*b, &db);
            }
            Op::MatMulTB { a, b, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                // out = A·Bᵀ: dA = dOut·B, dB = dOutᵀ·A
                let mut da = vec![0.0; m * k];
                matmul_into(&d, &self.bufs[b.0].data, &mut da, m, n, k);
                self.accumulate(*a, &da);
                let mut db = vec![0.0; n * k];
                let a_data = self.bufs[a.0].data.clone();
                for i in 0..m {
                    for j in 0..n {
                        let dv = d[i * n + j];
                        if dv == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            db[j * k + kk] += dv * a_data[i * k + kk];
                        }
                    }
                }
                self.accumulate(*b, &db);
            }
            Op::Add { a, b, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                self.accumulate(*a, &d);
                self.accumulate(*b, &d);
            }
            Op::AddRowBroadcast { x, row, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                self.accumulate(*x, &d);
                let (m, n) = self.shape(*x);
                let mut dr = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        dr[c] += d[r * n + c];
                    }
                }
                self.accumulate(*row, &dr);
            }
            Op::Mul { a, b, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let da: Vec<f64> = d
                    .iter()
                    .zip(&self.bufs[b.0].data)
                    .map(|(g, v)| g * v)
                    .collect();
                let db: Vec<f64> = d
                    .iter()
                    .zip(&self.bufs[a.0].data)
                    .map(|(g, v)| g * v)
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale { x, c, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let dx: Vec<f64> = d.iter().map(|g| g * c).collect();
                self.accumulate(*x, &dx);
            }
            Op::Sigmoid { x, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let dx: Vec<f64> = d
                    .iter()
                    .zip(&self.bufs[out.0].data)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Softmax { x, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let (m, n) = self.shape(*x);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let p = self.bufs[out.0].row(r);
                    let dr = &d[r * n..(r + 1) * n];
                    let dotv: f64 = p.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] = p[c] * (dr[c] - dotv);
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::RmsNorm { x, gain, eps, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let (m, n) = self.shape(*x);
                let mut dx = vec![0.0; m * n];
                let mut dg = vec![0.0; n];
                for r in 0..m {
                    let xr = self.bufs[x.0].row(r);
                    let g = &self.bufs[gain.0].data;
                    let dr = &d[r * n..(r + 1) * n];
                    let ms = xr.iter().map(|e| e * e).sum::<f64>() / n as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    // dx_j = inv·g_j·d_j − inv³/n · x_j · Σ_i d_i·g_i·x_i
                    let proj: f64 = dr
                        .iter()
                        .zip(g.iter())
                        .zip(xr)
                        .map(|((dv, gv), xv)| dv * gv * xv)
                        .sum();
                    let inv3 = inv * inv * inv;
                    for j in 0..n {
                        dx[r * n + j] = inv * g[j] * dr[j] - inv3 / n as f64 * xr[j] * proj;
                        dg[j] += dr[j] * xr[j] * inv;
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dg);
            }
            Op::ConcatCols { parts, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let (m, total) = self.shape(*out);
                let mut off = 0;
                for p in parts {
                    let (_, w) = self.shape(*p);
                    let mut dp = vec![0.0; m * w];
                    for r in 0..m {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&d[r * total + off..r * total + off + w]);
                    }
                    self.accumulate(*p, &dp);
                    off += w;
                }
            }
            Op::ConcatRows { parts, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let n = self.shape(*out).1;
                let mut off = 0;
                for p in parts {
                    let (pr, _) = self.shape(*p);
                    let dp = d[off * n..(off + pr) * n].to_vec();
                    self.accumulate(*p, &dp);
                    off += pr;
                }
            }
            Op::SliceCols { x, start, len, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let (m, n) = self.shape(*x);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + len]
                        .copy_from_slice(&d[r * len..(r + 1) * len]);
                }
                self.accumulate(*x, &dx);
            }
            Op::SliceRows { x, start, len, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let (m, n) = self.shape(*x);
                let mut dx = vec![0.0; m * n];
                dx[start * n..(start + len) * n].copy_from_slice(&d);
                self.accumulate(*x, &dx);
            }
            Op::Gather {
                table,
                indices,
                out,
            } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let (rows, n) = self.shape(*table);
                let mut dt = vec![0.0; rows * n];
                for (r, &idx) in indices.iter().enumerate() {
                    for c in 0..n {
                        dt[idx * n + c] += d[r * n + c];
                    }
                }
                self.accumulate(*table, &dt);
            }
            Op::SumAll { x, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let (m, n) = self.shape(*x);
                self.accumulate(*x, &vec![d[0]; m * n]);
            }
            Op::LogSumExp { x, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let (m, n) = self.shape(*x);
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let row = self.bufs[x.0].row(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|e| (e - mx).exp()).sum();
                    for c in 0..n {
                        dx[r * n + c] = d[r] * (row[c] - mx).exp() / denom;
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::CeSum {
                logits,
                targets,
                out,
            } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let seed = d[0];
                let (m, n) = self.shape(*logits);
                let cap = -CE_CLAMP_EPS.ln();
                let mut dl = vec![0.0; m * n];
                for (r, &t) in targets.iter().enumerate() {
                    let row = self.bufs[logits.0].row(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                    if lse - row[t] >= cap {
                        continue; // clamped row, flat region
                    }
                    let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for c in 0..n {
                        let p = (row[c] - mx).exp() / denom;
                        dl[r * n + c] = seed * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(*logits, &dl);
            }
            Op::ScaleBy { x, s, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let sv = self.bufs[s.0].data[0];
                let dx: Vec<f64> = d.iter().map(|g| g * sv).collect();
                let ds: f64 = d.iter().zip(&self.bufs[x.0].data).map(|(g, v)| g * v).sum();
                self.accumulate(*x, &dx);
                self.accumulate(*s, &[ds]);
            }
            Op::AddConst { x, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                self.accumulate(*x, &d);
            }
            Op::Exp { x, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let dx: Vec<f64> = d
                    .iter()
                    .zip(&self.bufs[out.0].data)
                    .map(|(g, e)| g * e)
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Ln { x, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let dx: Vec<f64> = d
                    .iter()
                    .zip(&self.bufs[x.0].data)
                    .map(|(g, v)| g / v)
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Softplus { x, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let dx: Vec<f64> = d
                    .iter()
                    .zip(&self.bufs[x.0].data)
                    .map(|(g, v)| g * sigmoid(*v))
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::ClampConst { x, lo, hi, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let dx: Vec<f64> = d
                    .iter()
                    .zip(&self.bufs[x.0].data)
                    .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::MinPair { a, b, out } => {
                let Some(d) = self.grads[out.0].clone() else {
                    return;
                };
                let av = self.bufs[a.0].data.clone();
                let bv = &self.bufs[b.0].data;
                let mut da = vec![0.0; d.len()];
                let mut db = vec![0.0; d.len()];
                for i in 0..d.len() {
                    if av[i] <= bv[i] {
                        da[i] = d[i];
                    } else {
                        db[i] = d[i];
                    }
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
        }
    }
}
