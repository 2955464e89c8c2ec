use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numcore::{log_sum_exp, Matrix};
use crate::{Error, Result};

/// Multinomial logistic regression fitted on frozen representations.
///
/// Minimizes `Σᵢ −log softmax(W xᵢ + b)_{yᵢ} + (l2_weight/2)‖W‖²` (the bias
/// is not penalized) by full-batch gradient descent from zero, with a
/// Barzilai-Borwein trial step shrunk by Armijo backtracking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegProbe {
    /// `C × d`
    pub weights: Matrix,
    /// `1 × C`
    pub bias: Matrix,
    pub l2_weight: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted iteration, starting at the zero model.
    pub objective_trace: Vec<f64>,
}

/// Solver settings for [`LogRegProbe::fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub l2_weight: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2_weight: 1.0,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

struct Problem<'a> {
    x: &'a Matrix,
    y: &'a [usize],
    classes: usize,
    l2: f64,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Objective and gradient at `theta = [W (row-major) | b]`.
    fn eval(&self, theta: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let (c, d) = (self.classes, self.dim());
        let (w, b) = theta.split_at(c * d);
        let mut grad = if want_grad {
            vec![0.0; theta.len()]
        } else {
            Vec::new()
        };
        let mut loss = 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>();
        let mut z = vec![0.0; c];
        for (i, &y) in self.y.iter().enumerate() {
            let xi = self.x.row(i);
            for k in 0..c {
                z[k] = b[k] + crate::numcore::dot(&w[k * d..(k + 1) * d], xi);
            }
            let lse = log_sum_exp(&z);
            loss += lse - z[y];
            if want_grad {
                for k in 0..c {
                    let p = libm::exp(z[k] - lse) - if k == y { 1.0 } else { 0.0 };
                    for (g, &xv) in grad[k * d..(k + 1) * d].iter_mut().zip(xi) {
                        *g += p * xv;
                    }
                    grad[c * d + k] += p;
                }
            }
        }
        if want_grad {
            for (g, &wv) in grad[..c * d].iter_mut().zip(w) {
                *g += self.l2 * wv;
            }
        }
        (loss, grad)
    }
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

impl LogRegProbe {
    /// Fits on `x` (one row per support example) with labels in `0..classes`.
    pub fn fit(x: &Matrix, labels: &[usize], classes: usize, config: &ProbeConfig) -> Result<Self> {
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(Error::DimensionMismatch {
                op: "fit_probe",
                left: x.shape(),
                right: (labels.len(), 1),
            });
        }
        if classes < 2 {
            return Err(Error::contract("probe needs at least 2 classes"));
        }
        if labels.iter().any(|&y| y >= classes) {
            return Err(Error::contract("probe label outside class range"));
        }
        if !(config.l2_weight > 0.0) {
            return Err(Error::config("probe l2_weight must be > 0"));
        }
        x.ensure_finite("probe inputs")?;
        let problem = Problem {
            x,
            y: labels,
            classes,
            l2: config.l2_weight,
        };
        let d = x.cols();
        let mut theta = vec![0.0; classes * d + classes];
        let (mut f, mut g) = problem.eval(&theta, true);
        let mut trace = vec![f];
        let mut converged = norm(&g) <= config.tol;
        let mut iterations = 0;
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut trial = 1.0 / (1.0 + config.l2_weight + x.max_abs() * x.max_abs() * d as f64);

        while !converged && iterations < config.max_iters {
            if let Some((p_theta, p_grad)) = &prev {
                let s: Vec<f64> = theta.iter().zip(p_theta).map(|(a, b)| a - b).collect();
                let yv: Vec<f64> = g.iter().zip(p_grad).map(|(a, b)| a - b).collect();
                let sy = crate::numcore::dot(&s, &yv);
                if sy > 0.0 {
                    trial = crate::numcore::dot(&s, &s) / sy;
                }
            }
            let gg = crate::numcore::dot(&g, &g);
            let mut step = trial;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let cand: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - step * gi).collect();
                let (fc, _) = problem.eval(&cand, false);
                if fc <= f - ARMIJO_C * step * gg {
                    accepted = Some((cand, fc));
                    break;
                }
                step *= 0.5;
            }
            let Some((cand, fc)) = accepted else {
                // no decrease representable at this precision: we are at the optimum
                converged = true;
                break;
            };
            let (_, gc) = problem.eval(&cand, true);
            prev = Some((
                core::mem::replace(&mut theta, cand),
                core::mem::replace(&mut g, gc),
            ));
            f = fc;
            trace.push(f);
            iterations += 1;
            converged = norm(&g) <= config.tol;
        }

        let (w, b) = theta.split_at(classes * d);
        Ok(LogRegProbe {
            weights: Matrix::from_vec(classes, d, w.to_vec())?,
            bias: Matrix::from_vec(1, classes, b.to_vec())?,
            l2_weight: config.l2_weight,
            max_iters: config.max_iters,
            tol: config.tol,
            iterations,
            converged,
            objective_trace: trace,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul_nt(&self.weights)?
            .broadcast_row(&self.bias, |z, b| z + b)
    }

    /// Arg-max class per row; ties go to the lowest class id.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let z = self.logits(x)?;
        Ok((0..z.rows())
            .map(|r| {
                let row = z.row(r);
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{central_difference, Rng};

    #[test]
    fn separable_pair() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]);
        let p = LogRegProbe::fit(&x, &[0, 1], 2, &ProbeConfig::default()).unwrap();
        assert!(p.converged);
        assert_eq!(p.predict(&x).unwrap(), vec![0, 1]);
        let w = p.weights.row(0)[0] - p.weights.row(1)[0];
        assert!(w > 0.0);
    }

    #[test]
    fn identical_points_give_uniform_prediction() {
        let x = Matrix::filled(6, 3, 0.7);
        let labels = [0, 1, 2, 0, 1, 2];
        let p = LogRegProbe::fit(&x, &labels, 3, &ProbeConfig::default()).unwrap();
        let z = p.logits(&x).unwrap();
        for r in 0..6 {
            let row = z.row(r);
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-6));
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let mut rng = Rng::new(4);
        let x = rng.normal_matrix(7, 3, 1.0);
        let y = [0, 1, 2, 1, 0, 2, 2];
        let problem = Problem {
            x: &x,
            y: &y,
            classes: 3,
            l2: 0.7,
        };
        let theta: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let (_, g) = problem.eval(&theta, true);
        let numeric = central_difference(|t| Ok(problem.eval(t, false).0), &theta, 1e-6).unwrap();
        for (a, n) in g.iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6);
        }
    }

    #[test]
    fn trace_is_non_increasing_and_optimum_is_stationary() {
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let x = rng.normal_matrix(10, 8, 2.0);
            let y: Vec<usize> = (0..10).map(|i| i % 5).collect();
            let p = LogRegProbe::fit(&x, &y, 5, &ProbeConfig::default()).unwrap();
            assert!(p.converged, "{} iterations", p.iterations);
            for w in p.objective_trace.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn clustered_episodes_are_solved() {
        let mut rng = Rng::new(12);
        let mut correct = 0;
        let mut total = 0;
        for _ in 0..100 {
            let d = 8;
            // unit-separated centres: scaled basis vectors
            let centres: Vec<Vec<f64>> = (0..5)
                .map(|k| {
                    (0..d)
                        .map(|j| {
                            if j == k {
                                core::f64::consts::FRAC_1_SQRT_2
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect();
            let draw = |rng: &mut Rng, k: usize| -> Vec<f64> {
                centres[k].iter().map(|c| c + 0.1 * rng.normal()).collect()
            };
            let mut sx = Vec::new();
            let mut sy = Vec::new();
            for k in 0..5 {
                for _ in 0..10 {
                    sx.push(draw(&mut rng, k));
                    sy.push(k);
                }
            }
            let p =
                LogRegProbe::fit(&Matrix::from_rows(&sx), &sy, 5, &ProbeConfig::default()).unwrap();
            for k in 0..5 {
                for _ in 0..5 {
                    let q = Matrix::from_rows(&[draw(&mut rng, k)]);
                    correct += usize::from(p.predict(&q).unwrap()[0] == k);
                    total += 1;
                }
            }
        }
        assert!(correct as f64 / total as f64 >= 0.99, "{correct}/{total}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Matrix::zeros(2, 2);
        assert!(LogRegProbe::fit(&x, &[0], 2, &ProbeConfig::default()).is_err());
        assert!(LogRegProbe::fit(&x, &[0, 0], 1, &ProbeConfig::default()).is_err());
        assert!(LogRegProbe::fit(&x, &[0, 2], 2, &ProbeConfig::default()).is_err());
    }
}
