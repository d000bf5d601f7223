//! B-spline bases on equidistant internal knots.
//!
//! A basis of order `m` (= polynomial degree + 1) is built on an open knot
//! vector: the boundary knots are replicated `m` times and the internal knots
//! are equally spaced. Evaluation uses the Cox–de Boor recursion; first
//! derivatives come from the standard order-lowering difference formula.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Relative slack allowed when checking that a time lies inside the domain.
/// Times within this tolerance of an endpoint are clamped onto it.
const DOMAIN_EPS: f64 = 1e-10;

/// B-spline basis over a closed interval with equidistant internal knots.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    order: usize,
    t_min: f64,
    t_max: f64,
    n_internal: usize,
    /// Full clamped knot vector of length `len() + order`.
    knots: Vec<f64>,
}

impl BSplineBasis {
    /// Builds a basis of the given order on `[domain.0, domain.1]` with
    /// `n_internal` equidistant internal knots. The basis size is
    /// `n_internal + order`.
    pub fn new(domain: (f64, f64), n_internal: usize, order: usize) -> Result<Self> {
        let (t_min, t_max) = domain;
        if !(t_max - t_min).is_finite() || t_max <= t_min {
            return Err(Error::Config(format!(
                "basis domain must have positive length, got [{t_min}, {t_max}]"
            )));
        }
        if order < 2 {
            return Err(Error::Config(format!("spline order must be >= 2, got {order}")));
        }
        if n_internal < 1 {
            return Err(Error::Config(format!(
                "need at least one internal knot, got {n_internal}"
            )));
        }
        let k = n_internal + order;
        let mut knots = Vec::with_capacity(k + order);
        knots.extend(std::iter::repeat(t_min).take(order));
        let h = (t_max - t_min) / (n_internal + 1) as f64;
        for i in 1..=n_internal {
            knots.push(t_min + h * i as f64);
        }
        knots.extend(std::iter::repeat(t_max).take(order));
        Ok(Self { order, t_min, t_max, n_internal, knots })
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        self.n_internal + self.order
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_internal(&self) -> usize {
        self.n_internal
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t_min, self.t_max)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn check_domain(&self, t: f64) -> Result<f64> {
        let span = self.t_max - self.t_min;
        if t < self.t_min - DOMAIN_EPS * span || t > self.t_max + DOMAIN_EPS * span {
            return Err(Error::Domain(format!(
                "time {t} outside basis domain [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(t.clamp(self.t_min, self.t_max))
    }

    /// Index of the knot span containing `t`: the largest `i` with
    /// `knots[i] <= t < knots[i+1]`, clamped so that `t == t_max` falls in the
    /// last nonempty span (left-limit convention).
    fn span_index(&self, t: f64) -> usize {
        let k = self.len();
        if t >= self.t_max {
            return k - 1;
        }
        // partition_point returns the first index with knots[i] > t.
        let idx = self.knots.partition_point(|&u| u <= t);
        idx.saturating_sub(1).clamp(self.order - 1, k - 1)
    }

    /// Evaluates the `order` (at most) nonzero basis functions at `t`.
    ///
    /// Writes values into `values[..order]` and, when requested, first
    /// derivatives into `derivs[..order]`. Returns the index of the first
    /// active basis function, i.e. entry `j` corresponds to basis function
    /// `first + j`.
    pub fn eval_local(
        &self,
        t: f64,
        values: &mut [f64],
        mut derivs: Option<&mut [f64]>,
    ) -> Result<usize> {
        let t = self.check_domain(t)?;
        let m = self.order;
        debug_assert!(values.len() >= m);
        let span = self.span_index(t);
        let knots = &self.knots;

        // Cox–de Boor triangle: after pass r, values[0..=r] hold the nonzero
        // basis functions of order r+1 on this span.
        let mut left = [0.0f64; 32];
        let mut right = [0.0f64; 32];
        values[0] = 1.0;
        let mut lower = [0.0f64; 32]; // order m-1 values, saved for derivatives
        for r in 1..m {
            if r == m - 1 {
                lower[..r].copy_from_slice(&values[..r]);
            }
            left[r] = t - knots[span + 1 - r];
            right[r] = knots[span + r] - t;
            let mut saved = 0.0;
            for j in 0..r {
                let denom = right[j + 1] + left[r - j];
                let tmp = if denom != 0.0 { values[j] / denom } else { 0.0 };
                values[j] = saved + right[j + 1] * tmp;
                saved = left[r - j] * tmp;
            }
            values[r] = saved;
        }

        if let Some(d) = derivs.as_deref_mut() {
            debug_assert!(d.len() >= m);
            let p = (m - 1) as f64;
            // d/dt N_{k,m} = (m-1) [ N_{k,m-1}/(u_{k+m-1}-u_k)
            //                        - N_{k+1,m-1}/(u_{k+m}-u_{k+1}) ]
            // where the order-(m-1) functions nonzero here are
            // N_{span-m+2+j, m-1} = lower[j], j = 0..m-2.
            for j in 0..m {
                let k = span + 1 - m + j;
                let a = if j >= 1 {
                    let den = knots[k + m - 1] - knots[k];
                    if den != 0.0 { lower[j - 1] / den } else { 0.0 }
                } else {
                    0.0
                };
                let b = if j <= m - 2 {
                    let den = knots[k + m] - knots[k + 1];
                    if den != 0.0 { lower[j] / den } else { 0.0 }
                } else {
                    0.0
                };
                d[j] = p * (a - b);
            }
        }

        Ok(span + 1 - m)
    }

    /// Dense evaluation of all basis functions (deriv 0) or their first
    /// derivatives (deriv 1) at `t`.
    pub fn eval(&self, t: f64, deriv: usize) -> Result<Array1<f64>> {
        if deriv > 1 {
            return Err(Error::Config(format!(
                "derivative order must be 0 or 1, got {deriv}"
            )));
        }
        let m = self.order;
        let mut vals = vec![0.0; m];
        let mut ders = vec![0.0; m];
        let first = if deriv == 1 {
            self.eval_local(t, &mut vals, Some(&mut ders))?
        } else {
            self.eval_local(t, &mut vals, None)?
        };
        let mut out = Array1::zeros(self.len());
        let src = if deriv == 1 { &ders } else { &vals };
        for j in 0..m {
            out[first + j] = src[j];
        }
        Ok(out)
    }

    /// Design matrix with row `i` equal to `eval(times[i], deriv)`.
    pub fn design_matrix(&self, times: &[f64], deriv: usize) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((times.len(), self.len()));
        let m = self.order;
        let mut vals = vec![0.0; m];
        let mut ders = vec![0.0; m];
        for (i, &t) in times.iter().enumerate() {
            let first = if deriv == 1 {
                self.eval_local(t, &mut vals, Some(&mut ders))?
            } else {
                self.eval_local(t, &mut vals, None)?
            };
            let src = if deriv == 1 { &ders } else { &vals };
            for j in 0..m {
                out[[i, first + j]] = src[j];
            }
        }
        Ok(out)
    }

    /// Value of the spline with coefficients `alpha` at `t`.
    pub fn value(&self, alpha: &[f64], t: f64, deriv: usize) -> Result<f64> {
        if alpha.len() != self.len() {
            return Err(Error::Config(format!(
                "coefficient vector length {} does not match basis size {}",
                alpha.len(),
                self.len()
            )));
        }
        let m = self.order;
        let mut vals = vec![0.0; m];
        let mut ders = vec![0.0; m];
        let first = if deriv == 1 {
            self.eval_local(t, &mut vals, Some(&mut ders))?
        } else {
            self.eval_local(t, &mut vals, None)?
        };
        let src = if deriv == 1 { &ders } else { &vals };
        Ok((0..m).map(|j| src[j] * alpha[first + j]).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn basis_sizes_match_knot_counts() {
        let b = BSplineBasis::new((0.0, 2.0), 20, 4).unwrap();
        assert_eq!(b.len(), 24);
        let b = BSplineBasis::new((0.0, 10.0), 150, 4).unwrap();
        assert_eq!(b.len(), 154);
    }

    #[test]
    fn single_internal_knot_is_midpoint() {
        let b = BSplineBasis::new((0.0, 1.0), 1, 2).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.knots(), &[0.0, 0.0, 0.5, 1.0, 1.0]);
        // Hand evaluation on knots (0,0,0.5,1,1) at t = 0.25.
        let v = b.eval(0.25, 0).unwrap();
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(v[1], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(v[2], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn rejects_invalid_configurations() {
        assert!(BSplineBasis::new((0.0, 0.0), 5, 4).is_err());
        assert!(BSplineBasis::new((1.0, 0.0), 5, 4).is_err());
        assert!(BSplineBasis::new((0.0, 1.0), 5, 1).is_err());
        assert!(BSplineBasis::new((0.0, 1.0), 0, 4).is_err());
    }

    #[test]
    fn rejects_out_of_domain_times() {
        let b = BSplineBasis::new((0.0, 2.0), 5, 4).unwrap();
        assert!(b.eval(-0.1, 0).is_err());
        assert!(b.eval(2.1, 0).is_err());
        assert!(b.design_matrix(&[0.5, 2.5], 0).is_err());
    }

    #[test]
    fn partition_of_unity_and_local_support() {
        let b = BSplineBasis::new((0.0, 2.0), 20, 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let t = rng.random::<f64>() * 2.0;
            let v = b.eval(t, 0).unwrap();
            let sum: f64 = v.sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum} at t {t}");
            let nonzero = v.iter().filter(|x| **x != 0.0).count();
            assert!(nonzero <= 4);
        }
        // Endpoints: first/last basis function attains 1.
        let v0 = b.eval(0.0, 0).unwrap();
        assert_abs_diff_eq!(v0[0], 1.0, epsilon = 1e-14);
        let v1 = b.eval(2.0, 0).unwrap();
        assert_abs_diff_eq!(v1[b.len() - 1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn derivative_sums_to_zero_inside_domain() {
        let b = BSplineBasis::new((0.0, 2.0), 13, 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let t = 0.01 + rng.random::<f64>() * 1.98;
            let d = b.eval(t, 1).unwrap();
            assert!(d.sum().abs() < 1e-10);
        }
    }

    #[test]
    fn derivative_matches_central_differences() {
        for order in [2usize, 3, 4, 5] {
            let b = BSplineBasis::new((0.0, 2.0), 9, order).unwrap();
            let mut rng = ChaCha12Rng::seed_from_u64(order as u64);
            let h = 1e-6;
            for _ in 0..100 {
                let t = h + rng.random::<f64>() * (2.0 - 2.0 * h);
                let d = b.eval(t, 1).unwrap();
                let lo = b.eval(t - h, 0).unwrap();
                let hi = b.eval(t + h, 0).unwrap();
                for k in 0..b.len() {
                    let fd = (hi[k] - lo[k]) / (2.0 * h);
                    assert!(
                        (d[k] - fd).abs() < 1e-5,
                        "order {order} t {t} k {k}: {} vs {}",
                        d[k],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn empty_times_give_empty_design_matrix() {
        let b = BSplineBasis::new((0.0, 1.0), 4, 3).unwrap();
        let m = b.design_matrix(&[], 0).unwrap();
        assert_eq!(m.shape(), &[0, 7]);
    }

    #[test]
    fn design_matrix_rows_sum_to_one() {
        let b = BSplineBasis::new((0.0, 2.0), 12, 4).unwrap();
        let times: Vec<f64> = (0..40).map(|i| 2.0 * i as f64 / 39.0).collect();
        let m = b.design_matrix(&times, 0).unwrap();
        for row in m.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    /// Least-squares fit of monomials up to degree order-1; the spline space
    /// must reproduce them exactly.
    #[test]
    fn polynomial_reproduction() {
        for order in [2usize, 3, 4] {
            let b = BSplineBasis::new((0.0, 2.0), 11, order).unwrap();
            let grid: Vec<f64> = (0..200).map(|i| 2.0 * i as f64 / 199.0).collect();
            let design = b.design_matrix(&grid, 0).unwrap();
            for deg in 0..order {
                let y: Vec<f64> = grid.iter().map(|t| t.powi(deg as i32)).collect();
                let coef = crate::linalg::lstsq(&design, &y).unwrap();
                for (i, &t) in grid.iter().enumerate() {
                    let fitted: f64 = design.row(i).dot(&ndarray::ArrayView1::from(&coef));
                    assert!(
                        (fitted - y[i]).abs() < 1e-9,
                        "order {order} degree {deg} t {t}"
                    );
                }
            }
        }
    }
}
