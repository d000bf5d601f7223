//! Dense linear algebra helpers backed by `faer`.
//!
//! All factorizations run with sequential parallelism so that results are
//! bit-for-bit reproducible; concurrency belongs at the replicate level.

use faer::linalg::solvers::{Llt, PartialPivLu, Solve};
use faer::{Mat, Side};
use ndarray::{Array1, Array2};
use std::sync::Once;

use crate::error::{Error, Result};

fn init_faer() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        faer::set_global_parallelism(faer::Par::Seq);
    });
}

pub(crate) fn to_faer(a: &Array2<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn col_to_faer(b: &[f64]) -> Mat<f64> {
    Mat::from_fn(b.len(), 1, |i, _| b[i])
}

fn mat_to_ndarray(m: &Mat<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Cholesky factorization of a symmetric positive definite matrix.
pub(crate) struct SpdFactor {
    llt: Llt<f64>,
    n: usize,
}

impl SpdFactor {
    pub fn new(a: &Array2<f64>) -> Result<Self> {
        init_faer();
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Config(format!(
                "expected square matrix, got {}x{}",
                n,
                a.ncols()
            )));
        }
        let llt = Llt::new(to_faer(a).as_ref(), Side::Lower).map_err(|_| {
            Error::Numeric(
                "system matrix is singular or indefinite; consider more data, fewer knots, \
                 or a positive ODE-compliance parameter"
                    .to_string(),
            )
        })?;
        Ok(Self { llt, n })
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let x = self.llt.solve(col_to_faer(b).as_ref());
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    pub fn solve_mat(&self, b: &Array2<f64>) -> Array2<f64> {
        let x = self.llt.solve(to_faer(b).as_ref());
        mat_to_ndarray(&x)
    }
}

/// Solves `a x = b` (SPD `a`) with one step of iterative refinement, which
/// keeps the residual near machine precision even for the ill-conditioned
/// systems produced by large compliance parameters.
pub(crate) fn solve_spd_refined(a: &Array2<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let factor = SpdFactor::new(a)?;
    let mut x = factor.solve_vec(b);
    let resid = residual(a, &x, b);
    let corr = factor.solve_vec(&resid);
    for (xi, ci) in x.iter_mut().zip(corr.iter()) {
        *xi += ci;
    }
    Ok(x)
}

/// Solves `a x = b` by partial-pivot LU with one refinement step. Used for
/// the indefinite bordered systems arising from Lagrange constraints.
pub(crate) fn solve_lu_refined(a: &Array2<f64>, b: &[f64]) -> Result<Vec<f64>> {
    init_faer();
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::Config(format!(
            "inconsistent linear system dimensions {}x{} vs rhs {}",
            n,
            a.ncols(),
            b.len()
        )));
    }
    let lu = PartialPivLu::new(to_faer(a).as_ref());
    let solve_one = |rhs: &[f64]| -> Vec<f64> {
        let x = lu.solve(col_to_faer(rhs).as_ref());
        (0..n).map(|i| x[(i, 0)]).collect()
    };
    let mut x = solve_one(b);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "bordered constraint system is singular; check that the state conditions are \
             independent and lie inside the domain"
                .to_string(),
        ));
    }
    let resid = residual(a, &x, b);
    let corr = solve_one(&resid);
    for (xi, ci) in x.iter_mut().zip(corr.iter()) {
        *xi += ci;
    }
    Ok(x)
}

fn residual(a: &Array2<f64>, x: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.nrows();
    let mut r = b.to_vec();
    for i in 0..n {
        let row = a.row(i);
        let mut acc = 0.0;
        for j in 0..n {
            acc += row[j] * x[j];
        }
        r[i] -= acc;
    }
    r
}

/// Minimum-norm least squares solution of `a x ~= b` via normal equations
/// with a small ridge fallback. Adequate for the well-conditioned design
/// matrices used in initialization and tests.
pub(crate) fn lstsq(a: &Array2<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let at = a.t();
    let ata = at.dot(a);
    let atb: Vec<f64> = at.dot(&ndarray::ArrayView1::from(b)).to_vec();
    match solve_spd_refined(&ata, &atb) {
        Ok(x) => Ok(x),
        Err(_) => {
            let n = ata.nrows();
            let scale = ata.diag().iter().cloned().fold(0.0f64, f64::max).max(1.0);
            let mut ridged = ata.clone();
            for i in 0..n {
                ridged[[i, i]] += 1e-10 * scale;
            }
            solve_spd_refined(&ridged, &atb)
        }
    }
}

/// Inverse of a symmetric matrix via LU; returns `None` if singular.
pub(crate) fn inverse(a: &Array2<f64>) -> Option<Array2<f64>> {
    init_faer();
    let n = a.nrows();
    let lu = PartialPivLu::new(to_faer(a).as_ref());
    let x = lu.solve(Mat::<f64>::identity(n, n).as_ref());
    let out = mat_to_ndarray(&x);
    if out.iter().all(|v| v.is_finite()) {
        Some(out)
    } else {
        None
    }
}

/// Eigenvalues of a symmetric matrix (ascending). Used by tests and
/// diagnostics only.
pub fn symmetric_eigenvalues(a: &Array2<f64>) -> Result<Array1<f64>> {
    init_faer();
    let eig = faer::linalg::solvers::SelfAdjointEigen::new(to_faer(a).as_ref(), Side::Lower)
        .map_err(|_| Error::Numeric("eigendecomposition failed".into()))?;
    let s = eig.S();
    let mut vals: Vec<f64> = (0..a.nrows()).map(|i| s[i]).collect();
    vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(Array1::from_vec(vals))
}
