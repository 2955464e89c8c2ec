use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::{Error, Result};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead. Central differences
/// at step 1e-5 carry roundoff near 1e-10, which this floor keeps below 1e-4.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// `max_i |a_i − n_i| / max(|a_i|, |n_i|, REL_ERROR_FLOOR)`
    pub max_rel_error: f64,
    pub parameter_count: usize,
    pub step_size: f64,
}

/// Central differences `(f(p + h·e_i) − f(p − h·e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut p = point.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let plus = f(&p)?;
        p[i] = orig - step;
        let minus = f(&p)?;
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(alloc::format!(
                "loss evaluation at coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Finite-difference gradient of `loss_fn` over every trainable parameter,
/// flattened in [`ModelParams::trainable`] order.
///
/// `loss_fn` must be deterministic: reseed any generator inside it so that
/// each evaluation draws the same dropout masks.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &ModelParams, step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&ModelParams) -> Result<f64>,
{
    let flat = params.flatten_trainable();
    let mut scratch = params.clone();
    central_difference(
        |p| {
            scratch.assign_trainable(p)?;
            loss_fn(&scratch)
        },
        &flat,
        step,
    )
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64], step: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR))
        .fold(0.0, f64::max);
    GradCheckReport {
        max_rel_error,
        parameter_count: analytic.len(),
        step_size: step,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let g = central_difference(|p| Ok(p[0] * p[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() <= 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = central_difference(|_| Ok(4.2), &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let r = central_difference(
            |p| Ok(if p[0] > 0.0 { f64::NAN } else { 0.0 }),
            &[0.0],
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert!(central_difference(|_| Ok(0.0), &[0.0], 0.0).is_err());
    }
}
