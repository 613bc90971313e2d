//! Pure (tape-free) numeric kernels: the scalar nonlinearities, row-wise
//! normalizations, and the multi-head attention core used at inference time.

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, Matrix};

/// Cross-entropy floor: −ln probabilities are clamped at −ln(CE_CLAMP_EPS).
pub const CE_CLAMP_EPS: f64 = 1e-12;

/// Default epsilon for RMS normalization.
pub const RMS_EPS: f64 = 1e-6;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// gain ⊙ x / sqrt(mean(x²) + eps).
pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() {
        return Err(Error::Dimension(format!(
            "rms_norm input length {} vs gain length {}",
            x.len(),
            gain.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Dimension("rms_norm on empty vector".into()));
    }
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    Ok(x.iter().zip(gain).map(|(v, g)| g * v * inv).collect())
}

/// Numerically stable softmax (max subtraction). Output sums to 1.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Dimension("softmax on empty vector".into()));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// −ln probs[target], clamped below by −ln(CE_CLAMP_EPS).
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    if target >= probs.len() {
        return Err(Error::Index(format!(
            "cross_entropy target {target} out of {} classes",
            probs.len()
        )));
    }
    let cap = -CE_CLAMP_EPS.ln();
    Ok((-probs[target].max(0.0).ln()).min(cap))
}

/// Multi-head scaled dot-product attention core.
///
/// `q`, `k`, `v` hold one matrix per head; `q[h]` is m×d_h, `k[h]` and `v[h]`
/// share the key length. With `qk_norm` on, query and key rows pass through
/// unit-gain RMS normalization before the dot product. Head outputs are
/// concatenated and, when `gate_scores` is given, gated elementwise. The
/// output projection is the caller's.
pub fn attention_core(
    q: &[Matrix],
    k: &[Matrix],
    v: &[Matrix],
    qk_norm: bool,
    gate_scores: Option<&Matrix>,
) -> Result<Matrix> {
    if q.is_empty() || q.len() != k.len() || q.len() != v.len() {
        return Err(Error::Dimension(
            "attention_core: head count mismatch".into(),
        ));
    }
    let m = q[0].rows;
    let d_h = q[0].cols;
    let mut heads = Vec::with_capacity(q.len());
    for ((qh, kh), vh) in q.iter().zip(k).zip(v) {
        if qh.rows != m || qh.cols != d_h || kh.cols != d_h || vh.rows != kh.rows {
            return Err(Error::Dimension(
                "attention_core: head shape mismatch".into(),
            ));
        }
        let unit = vec![1.0; d_h];
        let scale = 1.0 / (d_h as f64).sqrt();
        let mut out = Matrix::zeros(m, vh.cols);
        for i in 0..m {
            let qi = if qk_norm {
                rms_norm(qh.row(i), &unit, RMS_EPS)?
            } else {
                qh.row(i).to_vec()
            };
            let mut logits = Vec::with_capacity(kh.rows);
            for j in 0..kh.rows {
                let kj = if qk_norm {
                    rms_norm(kh.row(j), &unit, RMS_EPS)?
                } else {
                    kh.row(j).to_vec()
                };
                logits.push(dot(&qi, &kj) * scale);
            }
            let probs = softmax(&logits)?;
            let orow = out.row_mut(i);
            for (j, p) in probs.iter().enumerate() {
                for (o, x) in orow.iter_mut().zip(vh.row(j)) {
                    *o += p * x;
                }
            }
        }
        heads.push(out);
    }
    let refs: Vec<&Matrix> = heads.iter().collect();
    let mut cat = Matrix::concat_cols(&refs)?;
    if let Some(g) = gate_scores {
        if g.rows != cat.rows || g.cols != cat.cols {
            return Err(Error::Dimension(
                "attention_core: gate shape mismatch".into(),
            ));
        }
        for (c, s) in cat.data.iter_mut().zip(&g.data) {
            *c *= s;
        }
    }
    Ok(cat)
}

/// Pre-softmax QK logits of one head (used to audit the QK-norm bound).
pub fn qk_logits(q: &Matrix, k: &Matrix, qk_norm: bool) -> Result<Matrix> {
    if q.cols != k.cols {
        return Err(Error::Dimension("qk_logits: width mismatch".into()));
    }
    let d_h = q.cols;
    let unit = vec![1.0; d_h];
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut out = Matrix::zeros(q.rows, k.rows);
    for i in 0..q.rows {
        let qi = if qk_norm {
            rms_norm(q.row(i), &unit, RMS_EPS)?
        } else {
            q.row(i).to_vec()
        };
        for j in 0..k.rows {
            let kj = if qk_norm {
                rms_norm(k.row(j), &unit, RMS_EPS)?
            } else {
                k.row(j).to_vec()
            };
            out.set(i, j, dot(&qi, &kj) * scale);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn rms_norm_constant_input_gives_ones() {
        let x = vec![2.5; 6];
        let gain = vec![1.0; 6];
        let y = rms_norm(&x, &gain, 0.0).unwrap();
        for v in y {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rms_norm_three_four() {
        // mean(x²) = 12.5 → rms = 3.53553…
        let y = rms_norm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((y[0] - 0.84853).abs() < 5e-6, "{y:?}");
        assert!((y[1] - 1.13137).abs() < 5e-6, "{y:?}");
    }

    #[test]
    fn rms_norm_zero_input_stabilized() {
        let y = rms_norm(&[0.0, 0.0], &[1.0, 1.0], 1e-6).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn rms_norm_rejects_length_mismatch() {
        assert!(rms_norm(&[1.0], &[1.0, 1.0], 1e-6).is_err());
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let p = softmax(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let p = softmax(&[0.0, 3.0_f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
        let uniform = vec![1.0 / 64.0; 64];
        let l = cross_entropy(&uniform, 17).unwrap();
        assert!((l - 64.0_f64.ln()).abs() < 1e-12);
        assert!((l - 4.15888).abs() < 5e-6);
        // Clamp boundary.
        let l = cross_entropy(&[0.0, 1.0], 0).unwrap();
        assert!((l - 1e12_f64.ln()).abs() < 1e-9);
        assert!((l - 27.631).abs() < 1e-3);
        assert!(cross_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn attention_single_query_equals_value_row() {
        let q = Matrix::from_vec(1, 4, vec![0.3, -0.2, 0.5, 0.1]).unwrap();
        let k = q.clone();
        let v = Matrix::from_vec(1, 4, vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        let out = attention_core(&[q], &[k], std::slice::from_ref(&v), false, None).unwrap();
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn attention_half_gate_halves_output() {
        let mut r = rng::stream(3, "attn-gate", 0);
        let rand_mat = |r: &mut rand_chacha::ChaCha8Rng, m: usize, n: usize| -> Matrix {
            Matrix {
                rows: m,
                cols: n,
                data: (0..m * n).map(|_| r.random_range(-1.0..1.0)).collect(),
            }
        };
        let q = rand_mat(&mut r, 3, 4);
        let k = rand_mat(&mut r, 5, 4);
        let v = rand_mat(&mut r, 5, 4);
        let gate = Matrix {
            rows: 3,
            cols: 4,
            data: vec![0.5; 12],
        };
        let plain = attention_core(
            std::slice::from_ref(&q),
            std::slice::from_ref(&k),
            std::slice::from_ref(&v),
            false,
            None,
        )
        .unwrap();
        let gated = attention_core(&[q], &[k], &[v], false, Some(&gate)).unwrap();
        for (g, p) in gated.data.iter().zip(&plain.data) {
            assert!((g - 0.5 * p).abs() < 1e-12);
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_is_shift_invariant(
                z in proptest::collection::vec(-50.0f64..50.0, 1..12),
                c in -30.0f64..30.0,
            ) {
                let p = softmax(&z).unwrap();
                let sum: f64 = p.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(p.iter().all(|v| *v > 0.0));
                let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
                let q = softmax(&shifted).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn rms_norm_is_scale_invariant_for_positive_factors(
                x in proptest::collection::vec(-10.0f64..10.0, 2..10),
                alpha in 1e-3f64..1e3,
            ) {
                prop_assume!(x.iter().any(|v| v.abs() > 1e-6));
                let gain = vec![1.0; x.len()];
                let base = rms_norm(&x, &gain, 0.0).unwrap();
                let scaled_in: Vec<f64> = x.iter().map(|v| v * alpha).collect();
                let scaled = rms_norm(&scaled_in, &gain, 0.0).unwrap();
                for (a, b) in base.iter().zip(&scaled) {
                    prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn qk_norm_bounds_logits_randomized() {
        // Cauchy–Schwarz on RMS-normalized rows: |logit| ≤ √d_h with unit gains.
        let d_h = 8;
        let bound = (d_h as f64).sqrt();
        for trial in 0..1000 {
            let mut r = rng::stream(11, "qk-bound", trial);
            let scale = 10f64.powi(r.random_range(-2..4));
            let q = Matrix {
                rows: 3,
                cols: d_h,
                data: (0..3 * d_h)
                    .map(|_| r.random_range(-scale..scale))
                    .collect(),
            };
            let k = Matrix {
                rows: 5,
                cols: d_h,
                data: (0..5 * d_h)
                    .map(|_| r.random_range(-scale..scale))
                    .collect(),
            };
            let logits = qk_logits(&q, &k, true).unwrap();
            for v in &logits.data {
                assert!(v.abs() <= bound + 1e-9, "|{v}| > √d_h");
            }
        }
    }
}
