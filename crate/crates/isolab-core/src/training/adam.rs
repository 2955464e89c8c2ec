use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numcore::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: weights shrink by `lr · weight_decay` each step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        AdamState {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }

    pub fn for_params(params: &[&Matrix]) -> Self {
        let shapes: Vec<_> = params.iter().map(|p| p.shape()).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update.
///
/// `decay[i]` selects which tensors receive weight decay. Every gradient is
/// checked before anything is modified, so a non-finite gradient leaves
/// parameters and state untouched.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    decay: &[bool],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay.len() {
        return Err(Error::contract(
            "adam_step: parameter, gradient and state counts differ",
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::DimensionMismatch {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        if let Some(entry) = g.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { tensor: i, entry });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(config.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(config.beta2, t as f64);
    let lr = config.learning_rate;
    for (i, p) in params.iter_mut().enumerate() {
        let shrink = if decay[i] {
            1.0 - lr * config.weight_decay
        } else {
            1.0
        };
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w = *w * shrink - lr * m_hat / (libm::sqrt(v_hat) + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Matrix::from_rows(&[[1.0, -2.0]]);
        let before = p.clone();
        let mut state = AdamState::for_params(&[&p]);
        adam_step(
            &mut [&mut p],
            &[Matrix::zeros(1, 2)],
            &[true],
            &mut state,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Matrix::scalar(0.5);
        let mut state = AdamState::for_params(&[&p]);
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        adam_step(
            &mut [&mut p],
            &[Matrix::scalar(3.0)],
            &[false],
            &mut state,
            &cfg,
        )
        .unwrap();
        assert!((p[(0, 0)] - 0.49).abs() < 1e-9);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut p = Matrix::from_rows(&[[3.0, -4.0, 1.0]]);
        let start = p.frobenius_norm();
        let mut state = AdamState::for_params(&[&p]);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..Default::default()
        };
        for _ in 0..100 {
            let g = p.scale(2.0);
            adam_step(&mut [&mut p], &[g], &[true], &mut state, &cfg).unwrap();
        }
        assert!(p.frobenius_norm() <= 0.1 * start, "{}", p.frobenius_norm());
    }

    #[test]
    fn weight_decay_only_touches_masked_tensors() {
        let mut w = Matrix::scalar(2.0);
        let mut b = Matrix::scalar(2.0);
        let mut state = AdamState::for_params(&[&w, &b]);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let zeros = vec![Matrix::zeros(1, 1), Matrix::zeros(1, 1)];
        adam_step(
            &mut [&mut w, &mut b],
            &zeros,
            &[true, false],
            &mut state,
            &cfg,
        )
        .unwrap();
        assert!((w[(0, 0)] - 1.9).abs() < 1e-15);
        assert_eq!(b[(0, 0)], 2.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut a = Matrix::scalar(1.0);
        let mut b = Matrix::from_rows(&[[1.0, 2.0]]);
        let mut state = AdamState::for_params(&[&a, &b]);
        let grads = vec![Matrix::scalar(1.0), Matrix::from_rows(&[[0.0, f64::NAN]])];
        let err = adam_step(
            &mut [&mut a, &mut b],
            &grads,
            &[true, true],
            &mut state,
            &AdamConfig::default(),
        );
        assert_eq!(
            err,
            Err(Error::NonFiniteGradient {
                tensor: 1,
                entry: 1
            })
        );
        assert_eq!(a[(0, 0)], 1.0);
        assert_eq!(state.step, 0);
    }
}
