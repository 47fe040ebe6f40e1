//! Central finite-difference gradient checking.

use super::Tensor;
use crate::error::{FasError, Result};

/// Compares the reverse-mode gradient of `f` at `x` against central finite
/// differences and returns the worst relative disagreement:
/// max_i |analytic_i - cd_i| / max(1, |cd_i|).
///
/// `f` must build its output from the tensor it is handed, so the graph is
/// reconstructed for every probe. `coords = None` checks every coordinate;
/// `Some(list)` restricts to a subset, which keeps checks on large inputs
/// affordable.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64, coords: Option<&[usize]>) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if h <= 0.0 {
        return Err(FasError::Contract(
            "finite_diff_check: h must be positive".into(),
        ));
    }

    // Analytic gradient through a fresh tracked leaf.
    let leaf = Tensor::leaf(x.shape(), x.data().to_vec())?;
    let out = f(&leaf)?;
    if out.numel() != 1 {
        return Err(FasError::Contract(format!(
            "finite_diff_check: f must return a scalar, got shape {:?}",
            out.shape()
        )));
    }
    if !out.value().is_finite() {
        return Err(FasError::Numeric(
            "finite_diff_check: f(x) is not finite".into(),
        ));
    }
    out.backward()?;
    let analytic = leaf
        .grad()
        .ok_or_else(|| FasError::Contract("finite_diff_check: f does not depend on x".into()))?;

    let eval = |data: Vec<f64>| -> Result<f64> {
        let probe = Tensor::from_vec(x.shape(), data)?;
        let y = f(&probe)?;
        let v = y.value();
        if !v.is_finite() {
            return Err(FasError::Numeric(
                "finite_diff_check: f is not finite near x".into(),
            ));
        }
        Ok(v)
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };

    let mut max_rel = 0.0f64;
    for &i in coords {
        if i >= x.numel() {
            return Err(FasError::Contract(format!(
                "finite_diff_check: coordinate {i} out of range for {} elements",
                x.numel()
            )));
        }
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let cd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let rel = (analytic[i] - cd).abs() / cd.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
