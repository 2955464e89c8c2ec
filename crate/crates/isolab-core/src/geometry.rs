//! Embedding-space diagnostics and transforms.
//!
//! The isotropy score of a set of embeddings `V` (rows `v_i`, mean-centred) is
//!
//! ```text
//! I(V) = min_c Z(c, V) / max_c Z(c, V),     Z(c, V) = Σ_i exp(cᵀ v_i)
//! ```
//!
//! where `c` ranges over the unit eigenvectors of `VᵀV`. Because `Z(c)` and
//! `Z(−c)` differ in general and an eigensolver may return either sign, the
//! direction set used here is `{+c_k, −c_k}` for every eigenvector. `Z` is
//! accumulated in log space so large projections cannot overflow.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numcore::{dot, Matrix};
use crate::{Error, Result};

/// Variance floor in the Pearson denominator.
pub const CORRELATION_EPS: f64 = 1e-8;
/// Eigenvalue floor of the whitening transform.
pub const WHITENING_EPS: f64 = 1e-10;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// `n × d` embeddings, with a record of whether they were mean-centred.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Matrix,
    centered: bool,
}

impl EmbeddingMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        values.ensure_finite("embedding matrix")?;
        Ok(EmbeddingMatrix {
            values,
            centered: false,
        })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_inner(self) -> Matrix {
        self.values
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn d(&self) -> usize {
        self.values.cols()
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
///
/// `eigenvectors` holds the unit eigenvectors as columns. For positive
/// semi-definite input the eigenvalues are non-negative up to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
    pub sweeps: usize,
}

impl EigenBasis {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.eigenvectors.column(k)
    }

    /// `Q · diag(λ) · Qᵀ`
    pub fn reconstruct(&self) -> Matrix {
        let q = &self.eigenvectors;
        let scaled = Matrix::from_fn(q.rows(), q.cols(), |r, c| q[(r, c)] * self.eigenvalues[c]);
        scaled.matmul_nt(q).expect("square basis")
    }
}

pub fn center(v: &Matrix) -> EmbeddingMatrix {
    let means = v.col_means();
    let values = v
        .broadcast_row(&means, |x, m| x - m)
        .expect("column means have matching width");
    EmbeddingMatrix {
        values,
        centered: true,
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Sweeps over all off-diagonal pairs until every off-diagonal entry is at
/// most `1e-12` in magnitude or 100 sweeps have run.
pub fn symmetric_eigen(s: &Matrix) -> Result<EigenBasis> {
    if s.rows() != s.cols() {
        return Err(Error::DimensionMismatch {
            op: "symmetric_eigen",
            left: s.shape(),
            right: (s.cols(), s.rows()),
        });
    }
    if !s.is_symmetric(1e-10) {
        return Err(Error::contract("symmetric_eigen: input is not symmetric"));
    }
    s.ensure_finite("symmetric_eigen input")?;
    let n = s.rows();
    let mut a = s.clone();
    // symmetrize exactly so rounding asymmetry cannot accumulate
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
    let mut q = Matrix::identity(n);
    let mut sweeps = 0;
    while sweeps < JACOBI_MAX_SWEEPS {
        let off = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .fold(0.0_f64, |m, (i, j)| m.max(a[(i, j)].abs()));
        if off <= JACOBI_TOL {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = a[(p, r)];
                if apr == 0.0 {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let sn = t * c;
                rotate(&mut a, &mut q, p, r, c, sn);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[(y, y)].total_cmp(&a[(x, x)]));
    let eigenvalues = order.iter().map(|&k| a[(k, k)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        // sign convention: largest-magnitude component positive
        let col = q.column(src);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (row, v) in col.into_iter().enumerate() {
            eigenvectors[(row, dst)] = sign * v;
        }
    }
    Ok(EigenBasis {
        eigenvalues,
        eigenvectors,
        sweeps,
    })
}

/// Applies the Jacobi rotation `J(p, r, θ)` as `A ← JᵀAJ`, `Q ← QJ`.
fn rotate(a: &mut Matrix, q: &mut Matrix, p: usize, r: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akr = a[(k, r)];
        a[(k, p)] = c * akp - s * akr;
        a[(k, r)] = s * akp + c * akr;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let ark = a[(r, k)];
        a[(p, k)] = c * apk - s * ark;
        a[(r, k)] = s * apk + c * ark;
    }
    for k in 0..n {
        let qkp = q[(k, p)];
        let qkr = q[(k, r)];
        q[(k, p)] = c * qkp - s * qkr;
        q[(k, r)] = s * qkp + c * qkr;
    }
}

/// `log Z(c, V)`, computed with max-subtraction.
pub fn log_partition_function(c: &[f64], v: &Matrix) -> Result<f64> {
    if c.len() != v.cols() {
        return Err(Error::DimensionMismatch {
            op: "partition_function",
            left: (1, c.len()),
            right: v.shape(),
        });
    }
    let norm = libm::sqrt(dot(c, c));
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::contract(alloc::format!(
            "partition function direction must be unit length, |c| = {norm}"
        )));
    }
    if v.rows() == 0 {
        return Err(Error::Degenerate("partition function of zero rows".into()));
    }
    let proj: Vec<f64> = (0..v.rows()).map(|i| dot(c, v.row(i))).collect();
    Ok(crate::numcore::log_sum_exp(&proj))
}

/// `Z(c, V) = Σ_i exp(cᵀ v_i)`.
pub fn partition_function(c: &[f64], v: &Matrix) -> Result<f64> {
    log_partition_function(c, v).map(libm::exp)
}

/// Isotropy score in `[0, 1]`; 1 means perfectly isotropic.
pub fn isotropy(v: &Matrix) -> Result<f64> {
    if v.rows() < 2 || v.cols() < 2 {
        return Err(Error::Degenerate(alloc::format!(
            "isotropy needs n >= 2 and d >= 2, got {}x{}",
            v.rows(),
            v.cols()
        )));
    }
    v.ensure_finite("isotropy input")?;
    let centered = center(v).into_inner();
    let gram = centered.matmul_tn(&centered)?;
    let basis = symmetric_eigen(&gram)?;
    if basis.eigenvalues.first().copied().unwrap_or(0.0) <= 0.0 {
        return Err(Error::Degenerate(
            "all embeddings coincide; VᵀV has no non-zero eigen-direction".into(),
        ));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for k in 0..basis.eigenvalues.len() {
        let c = basis.vector(k);
        let neg: Vec<f64> = c.iter().map(|x| -x).collect();
        for dir in [&c, &neg] {
            let lz = log_partition_function(dir, &centered)?;
            lo = lo.min(lz);
            hi = hi.max(lz);
        }
    }
    Ok(libm::exp(lo - hi).clamp(0.0, 1.0))
}

/// Sample covariance with `1/(n−1)` normalization.
pub fn covariance(v: &Matrix) -> Result<Matrix> {
    if v.rows() < 2 {
        return Err(Error::Degenerate(alloc::format!(
            "covariance needs at least 2 rows, got {}",
            v.rows()
        )));
    }
    let c = center(v).into_inner();
    Ok(c.matmul_tn(&c)?.scale(1.0 / (v.rows() - 1) as f64))
}

/// Pearson correlation `cov_ij / sqrt((var_i + ε)(var_j + ε))`, `ε = 1e-8`.
pub fn correlation(v: &Matrix) -> Result<Matrix> {
    let cov = covariance(v)?;
    Ok(correlation_from_covariance(&cov))
}

pub(crate) fn correlation_from_covariance(cov: &Matrix) -> Matrix {
    let inv: Vec<f64> = cov
        .diagonal()
        .iter()
        .map(|&var| 1.0 / libm::sqrt(var + CORRELATION_EPS))
        .collect();
    Matrix::from_fn(cov.rows(), cov.cols(), |i, j| cov[(i, j)] * inv[i] * inv[j])
}

/// Affine map `v ↦ (v − mean) · transform` that whitens its fitting data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningMap {
    /// `1 × d`
    pub mean: Matrix,
    /// `d × d`
    pub transform: Matrix,
}

impl WhiteningMap {
    pub fn identity(d: usize) -> Self {
        WhiteningMap {
            mean: Matrix::zeros(1, d),
            transform: Matrix::identity(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.transform.rows()
    }
}

/// PCA whitening: with `cov = Q diag(λ) Qᵀ`, `transform = Q diag((λ + ε)^(−1/2))`.
pub fn fit_whitening(v: &Matrix) -> Result<WhiteningMap> {
    let cov = covariance(v)?;
    let basis = symmetric_eigen(&cov)?;
    let q = &basis.eigenvectors;
    let transform = Matrix::from_fn(q.rows(), q.cols(), |r, c| {
        let lambda = basis.eigenvalues[c].max(0.0);
        q[(r, c)] / libm::sqrt(lambda + WHITENING_EPS)
    });
    Ok(WhiteningMap {
        mean: v.col_means(),
        transform,
    })
}

pub fn apply_whitening(map: &WhiteningMap, v: &Matrix) -> Result<Matrix> {
    if v.cols() != map.dim() || map.mean.cols() != map.dim() {
        return Err(Error::DimensionMismatch {
            op: "apply_whitening",
            left: v.shape(),
            right: map.transform.shape(),
        });
    }
    let shifted = v.broadcast_row(&map.mean, |x, m| x - m)?;
    shifted.matmul(&map.transform)
}


#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    fn matrix() -> impl Strategy<Value = Matrix> {
        (2usize..6)
            .prop_flat_map(|d| (Just(d), d + 2..24))
            .prop_flat_map(|(d, n)| {
                proptest::collection::vec(-5.0f64..5.0, n * d)
                    .prop_map(move |xs| Matrix::from_fn(n, d, |r, c| xs[r * d + c]))
            })
    }

    proptest! {
        #[test]
        fn isotropy_is_a_translation_invariant_ratio(v in matrix(), shift in -50.0f64..50.0) {
            let i = isotropy(&v).unwrap();
            prop_assert!((0.0..=1.0).contains(&i));
            let moved = v.map(|x| x + shift);
            prop_assert!((isotropy(&moved).unwrap() - i).abs() < 1e-8);
        }

        #[test]
        fn whitened_covariance_is_identity(v in matrix()) {
            let basis = symmetric_eigen(&covariance(&v).unwrap()).unwrap();
            prop_assume!(basis.eigenvalues.iter().all(|&l| l > 1e-3));
            let w = apply_whitening(&fit_whitening(&v).unwrap(), &v).unwrap();
            let cov = covariance(&w).unwrap();
            prop_assert!(cov.sub(&Matrix::identity(v.cols())).unwrap().max_abs() < 1e-6);
        }
    }
}
