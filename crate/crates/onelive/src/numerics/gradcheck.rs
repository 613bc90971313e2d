//! Finite-difference gradient oracle.

use crate::error::{Error, Result};

/// Compare an analytic gradient against central differences of `f` at
/// `params`, coordinate by coordinate. Returns the maximum relative error
/// with denominator max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: &F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!(
            "gradient length {} vs parameter length {}",
            analytic.len(),
            params.len()
        )));
    }
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Eval(format!("non-finite loss at coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::{cross_entropy, softmax};

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let f = |p: &[f64]| p[0] * p[0];
        let err = grad_check(&f, &[3.0], &[6.0], 1e-4).unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let f = |_: &[f64]| 1.25;
        let err = grad_check(&f, &[0.5, -0.5], &[0.0, 0.0], 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn cross_entropy_of_softmax_on_eight_logits() {
        // Analytic gradient of CE∘softmax is p − onehot(target).
        let logits = [0.3, -1.2, 0.7, 2.0, -0.4, 0.1, -0.9, 1.5];
        let target = 2;
        let f = |z: &[f64]| cross_entropy(&softmax(z).unwrap(), target).unwrap();
        let p = softmax(&logits).unwrap();
        let analytic: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(i, v)| v - if i == target { 1.0 } else { 0.0 })
            .collect();
        let err = grad_check(&f, &logits, &analytic, 1e-4).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let f = |p: &[f64]| p[0].ln();
        assert!(grad_check(&f, &[0.0], &[0.0], 1e-4).is_err());
    }
}
