//! Composite Gauss–Legendre quadrature on the inter-knot spans of a basis.
//!
//! Placing a Gauss panel on every span keeps the piecewise-polynomial
//! breakpoints of the splines on panel boundaries, so products of splines are
//! integrated exactly whenever the panel degree allows.

use crate::bspline::BSplineBasis;
use crate::error::{Error, Result};

/// Quadrature nodes and weights over `[0, T]`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    per_span: usize,
}

impl QuadratureRule {
    /// Composite rule with `per_span` Gauss–Legendre points on every
    /// inter-knot span of `basis`.
    pub fn for_basis(basis: &BSplineBasis, per_span: usize) -> Result<Self> {
        Self::for_breakpoints(&distinct_knots(std::slice::from_ref(basis)), per_span)
    }

    /// Composite rule on the union of all bases' knots, so that integrals
    /// coupling different state bases are computed consistently.
    pub fn for_bases(bases: &[BSplineBasis], per_span: usize) -> Result<Self> {
        if bases.is_empty() {
            return Err(Error::Config("need at least one basis".into()));
        }
        Self::for_breakpoints(&distinct_knots(bases), per_span)
    }

    fn for_breakpoints(breaks: &[f64], per_span: usize) -> Result<Self> {
        if per_span < 2 {
            return Err(Error::Config(format!(
                "need at least 2 quadrature points per span, got {per_span}"
            )));
        }
        let (ref_nodes, ref_weights) = gauss_legendre(per_span);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for i in 0..per_span {
                nodes.push(mid + half * ref_nodes[i]);
                weights.push(half * ref_weights[i]);
            }
        }
        Ok(Self { nodes, weights, per_span })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn per_span(&self) -> usize {
        self.per_span
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrates `f` over the rule's interval.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> Result<f64> {
        let mut acc = 0.0;
        for (&t, &w) in self.nodes.iter().zip(&self.weights) {
            let v = f(t);
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "integrand evaluated to a non-finite value at node t = {t}"
                )));
            }
            acc += w * v;
        }
        Ok(acc)
    }
}

fn distinct_knots(bases: &[BSplineBasis]) -> Vec<f64> {
    let mut all: Vec<f64> = bases.iter().flat_map(|b| b.knots().iter().copied()).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let span = all.last().unwrap() - all.first().unwrap();
    let tol = 1e-12 * span.max(1.0);
    let mut out: Vec<f64> = Vec::with_capacity(all.len());
    for v in all {
        if out.last().map_or(true, |&last| v - last > tol) {
            out.push(v);
        }
    }
    out
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P'_n(x) via the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = 0.0;
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j as f64 + 1.0) * x * p1 - j as f64 * p2) / (j as f64 + 1.0);
            }
            pp = n as f64 * (x * p0 - p1) / (x * x - 1.0);
            let dx = p0 / pp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * pp * pp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn node_count_and_weight_sum() {
        let b = BSplineBasis::new((0.0, 2.0), 20, 4).unwrap();
        let rule = QuadratureRule::for_basis(&b, 5).unwrap();
        assert_eq!(rule.len(), 105); // 21 spans x 5 points
        let total: f64 = rule.weights().iter().sum();
        assert_abs_diff_eq!(total, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_too_few_points() {
        let b = BSplineBasis::new((0.0, 1.0), 3, 3).unwrap();
        assert!(QuadratureRule::for_basis(&b, 1).is_err());
    }

    #[test]
    fn integrates_constants_exactly() {
        let b = BSplineBasis::new((0.0, 3.0), 7, 4).unwrap();
        let rule = QuadratureRule::for_basis(&b, 3).unwrap();
        assert_abs_diff_eq!(rule.integrate(|_| 1.0).unwrap(), 3.0, epsilon = 1e-13);
        assert_abs_diff_eq!(rule.integrate(|_| 0.0).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn two_point_rule_is_exact_to_degree_three() {
        let b = BSplineBasis::new((0.0, 1.0), 1, 2).unwrap();
        let rule = QuadratureRule::for_basis(&b, 2).unwrap();
        let v = rule.integrate(|t| t * t).unwrap();
        assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-14);
        let v3 = rule.integrate(|t| t * t * t).unwrap();
        assert_abs_diff_eq!(v3, 0.25, epsilon = 1e-14);
    }

    #[test]
    fn sine_integral_matches_antiderivative() {
        let b = BSplineBasis::new((0.0, 10.0), 150, 4).unwrap();
        let rule = QuadratureRule::for_basis(&b, 5).unwrap();
        let v = rule.integrate(f64::sin).unwrap();
        assert_abs_diff_eq!(v, 1.0 - 10.0f64.cos(), epsilon = 1e-9);
    }

    #[test]
    fn polynomial_exactness_per_span() {
        for per_span in [2usize, 3, 5] {
            let b = BSplineBasis::new((0.0, 1.0), 4, 3).unwrap();
            let rule = QuadratureRule::for_basis(&b, per_span).unwrap();
            let deg = 2 * per_span - 1;
            let exact = 1.0 / (deg as f64 + 1.0);
            let v = rule.integrate(|t| t.powi(deg as i32)).unwrap();
            assert!(
                (v - exact).abs() <= 1e-12 * exact.abs().max(1.0),
                "per_span {per_span}: {v} vs {exact}"
            );
        }
    }

    #[test]
    fn spline_product_integral_matches_refinement_oracle() {
        let b = BSplineBasis::new((0.0, 2.0), 6, 4).unwrap();
        let alpha1: Vec<f64> = (0..b.len()).map(|i| ((i * 7 + 3) % 5) as f64 - 2.0).collect();
        let alpha2: Vec<f64> = (0..b.len()).map(|i| ((i * 3 + 1) % 4) as f64 - 1.5).collect();
        let product = |t: f64| {
            b.value(&alpha1, t, 0).unwrap() * b.value(&alpha2, t, 0).unwrap()
        };
        let base = QuadratureRule::for_basis(&b, 5).unwrap().integrate(product).unwrap();
        // Refinement oracle: double per_span until stable.
        let mut per = 8;
        let mut prev = QuadratureRule::for_basis(&b, per).unwrap().integrate(product).unwrap();
        loop {
            per *= 2;
            let next = QuadratureRule::for_basis(&b, per).unwrap().integrate(product).unwrap();
            if (next - prev).abs() < 1e-12 || per > 128 {
                prev = next;
                break;
            }
            prev = next;
        }
        assert!((base - prev).abs() < 1e-10, "{base} vs oracle {prev}");
    }

    #[test]
    fn non_finite_integrand_is_reported() {
        let b = BSplineBasis::new((0.0, 1.0), 2, 3).unwrap();
        let rule = QuadratureRule::for_basis(&b, 2).unwrap();
        let err = rule.integrate(|t| 1.0 / (t - rule.nodes()[1])).err().unwrap();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn refinement_changes_smooth_integrals_little() {
        let b = BSplineBasis::new((0.0, 2.0), 20, 4).unwrap();
        let f = |t: f64| (1.5 * t).sin() * (0.3 * t).exp();
        let v5 = QuadratureRule::for_basis(&b, 5).unwrap().integrate(f).unwrap();
        let v10 = QuadratureRule::for_basis(&b, 10).unwrap().integrate(f).unwrap();
        assert!((v5 - v10).abs() < 1e-8);
    }
}
