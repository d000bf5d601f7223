//! Assembly of the quasilinearized ODE penalty as a quadratic form.
//!
//! Around a linearization point `x~` the squared ODE residual of equation `j`
//! becomes linear in the spline coefficients:
//!
//! ```text
//! res_j(t) = alpha_j' b1_j(t) - sum_k (df_j/dx_k)(t) alpha_k' b0_k(t) - v_j(t)
//! v_j(t)   = f_j(t, x~, theta) - sum_k x~_k(t) (df_j/dx_k)(t, x~, theta)
//! ```
//!
//! so the weighted penalty `sum_j gamma_j int res_j^2 dt` is
//! `alpha' R alpha + 2 alpha' r + l`. Writing `res_j = u_j' alpha - v_j`
//! with a sparse coefficient functional `u_j(t)`, the assembly accumulates
//! `R += w gamma_j u_j u_j'`, `r -= w gamma_j v_j u_j`, `l += w gamma_j v_j^2`
//! per quadrature node, which makes `R` symmetric positive semidefinite by
//! construction. Only the `order`-sized support windows of each basis are
//! touched, so a node costs `O((d * order)^2)` regardless of basis size.

use ndarray::{Array1, Array2};

use crate::bspline::BSplineBasis;
use crate::error::{Error, Result};
use crate::model::OdeModel;
use crate::quadrature::QuadratureRule;

/// Spline coefficients of the previous iterate together with the bases that
/// interpret them; the expansion point of the quasilinearization.
#[derive(Debug, Clone)]
pub struct LinearizationPoint {
    alpha: Array1<f64>,
    bases: Vec<BSplineBasis>,
    offsets: Vec<usize>,
}

impl LinearizationPoint {
    pub fn new(bases: Vec<BSplineBasis>, alpha: Array1<f64>) -> Result<Self> {
        let offsets = block_offsets(&bases);
        let total = *offsets.last().unwrap();
        if alpha.len() != total {
            return Err(Error::Config(format!(
                "coefficient vector length {} does not match total basis size {}",
                alpha.len(),
                total
            )));
        }
        Ok(Self { alpha, bases, offsets })
    }

    pub fn bases(&self) -> &[BSplineBasis] {
        &self.bases
    }

    pub fn alpha(&self) -> &Array1<f64> {
        &self.alpha
    }

    pub fn dim(&self) -> usize {
        self.bases.len()
    }

    pub fn k_total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    fn alpha_block(&self, j: usize) -> &[f64] {
        let s = self.alpha.as_slice().expect("alpha is contiguous");
        &s[self.offsets[j]..self.offsets[j + 1]]
    }

    /// State values `x~(t)` induced by the stored coefficients.
    pub fn state_values(&self, t: f64) -> Result<Vec<f64>> {
        (0..self.dim())
            .map(|j| self.bases[j].value(self.alpha_block(j), t, 0))
            .collect()
    }
}

/// Cumulative coefficient offsets per state; last entry is the total size.
pub fn block_offsets(bases: &[BSplineBasis]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(bases.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for b in bases {
        acc += b.len();
        offsets.push(acc);
    }
    offsets
}

/// Quadratic form `(R, r, l)` of the quasilinearized penalty at one
/// iteration, with the compliance weights baked in.
#[derive(Debug, Clone)]
pub struct PenaltyAssembly {
    pub r_mat: Array2<f64>,
    pub r_vec: Array1<f64>,
    pub l: f64,
    pub gamma: Vec<f64>,
    offsets: Vec<usize>,
}

impl PenaltyAssembly {
    /// Penalty value `alpha' R alpha + 2 alpha' r + l`.
    pub fn value(&self, alpha: &Array1<f64>) -> f64 {
        let ra = self.r_mat.dot(alpha);
        alpha.dot(&ra) + 2.0 * alpha.dot(&self.r_vec) + self.l
    }

    pub fn k_total(&self) -> usize {
        self.r_vec.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

/// State Jacobian and quasilinearization remainder `v(t)` at one time point:
/// `v_j = f_j(t, x~, theta) - sum_k x~_k (df_j/dx_k)(t, x~, theta)`.
pub fn residual_weight(
    model: &OdeModel,
    theta: &[f64],
    point: &LinearizationPoint,
    t: f64,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let d = model.dim();
    if point.dim() != d {
        return Err(Error::Config("linearization point dimension mismatch".into()));
    }
    let x = point.state_values(t)?;
    let f = model.f(t, &x, theta)?;
    let jac = model.jac_x(t, &x, theta)?;
    let jmat = Array2::from_shape_vec((d, d), jac).expect("row-major jacobian");
    let mut v = Array1::zeros(d);
    for j in 0..d {
        let mut acc = f[j];
        for k in 0..d {
            acc -= x[k] * jmat[[j, k]];
        }
        v[j] = acc;
    }
    Ok((jmat, v))
}

/// Scratch buffers for one assembly pass.
struct Scratch {
    /// Per state: first active coefficient index at the current node.
    first: Vec<usize>,
    /// Per state: values of the active basis functions.
    b0: Vec<Vec<f64>>,
    /// Per state: derivatives of the active basis functions.
    b1: Vec<Vec<f64>>,
    /// Per state: window of the residual functional `u_j` at this node.
    u: Vec<Vec<f64>>,
    x: Vec<f64>,
    f: Vec<f64>,
    jac: Vec<f64>,
}

impl Scratch {
    fn new(bases: &[BSplineBasis]) -> Self {
        let d = bases.len();
        Self {
            first: vec![0; d],
            b0: bases.iter().map(|b| vec![0.0; b.order()]).collect(),
            b1: bases.iter().map(|b| vec![0.0; b.order()]).collect(),
            u: bases.iter().map(|b| vec![0.0; b.order()]).collect(),
            x: vec![0.0; d],
            f: vec![0.0; d],
            jac: vec![0.0; d * d],
        }
    }

    /// Evaluates bases, states, f and the Jacobian at node `t`.
    fn load(
        &mut self,
        model: &OdeModel,
        theta: &[f64],
        point: &LinearizationPoint,
        t: f64,
    ) -> Result<()> {
        let d = model.dim();
        for j in 0..d {
            let basis = &point.bases()[j];
            self.first[j] = basis.eval_local(t, &mut self.b0[j], Some(&mut self.b1[j]))?;
            let block = point.alpha_block(j);
            let mut acc = 0.0;
            for (idx, &b) in self.b0[j].iter().enumerate() {
                acc += b * block[self.first[j] + idx];
            }
            self.x[j] = acc;
        }
        model.f_into(t, &self.x, theta, &mut self.f)?;
        model.jac_into(t, &self.x, theta, &mut self.jac)?;
        for v in self.f.iter().chain(self.jac.iter()) {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "model evaluation produced a non-finite value at t = {t}"
                )));
            }
        }
        Ok(())
    }

    /// Remainder `v_j` for equation `j` at the loaded node.
    fn v(&self, j: usize, d: usize) -> f64 {
        let mut acc = self.f[j];
        for k in 0..d {
            acc -= self.x[k] * self.jac[j * d + k];
        }
        acc
    }
}

/// Assembles the penalty quadratic form for the given parameters, compliance
/// weights and linearization point, integrating with `rule`.
pub fn assemble(
    model: &OdeModel,
    theta: &[f64],
    gamma: &[f64],
    point: &LinearizationPoint,
    rule: &QuadratureRule,
) -> Result<PenaltyAssembly> {
    let d = model.dim();
    if point.dim() != d {
        return Err(Error::Config(format!(
            "linearization point has {} states, model has {d}",
            point.dim()
        )));
    }
    if gamma.len() != d {
        return Err(Error::Config(format!(
            "compliance vector length {} does not match dimension {d}",
            gamma.len()
        )));
    }
    if gamma.iter().any(|&g| g < 0.0 || !g.is_finite()) {
        return Err(Error::Config("compliance parameters must be finite and >= 0".into()));
    }
    let offsets = point.offsets().to_vec();
    let k_total = point.k_total();
    let mut r_mat = Array2::<f64>::zeros((k_total, k_total));
    let mut r_vec = Array1::<f64>::zeros(k_total);
    let mut l = 0.0;
    let mut scratch = Scratch::new(point.bases());

    for (&t, &w) in rule.nodes().iter().zip(rule.weights()) {
        scratch.load(model, theta, point, t)?;
        for j in 0..d {
            let gj = gamma[j];
            if gj == 0.0 {
                continue;
            }
            // Window of u_j per state block: -J[j,k] b0_k, plus b1_j in block j.
            for k in 0..d {
                let jk = scratch.jac[j * d + k];
                let m = scratch.b0[k].len();
                for idx in 0..m {
                    let mut val = -jk * scratch.b0[k][idx];
                    if k == j {
                        val += scratch.b1[j][idx];
                    }
                    scratch.u[k][idx] = val;
                }
            }
            let vj = scratch.v(j, d);
            let wg = w * gj;
            for k1 in 0..d {
                let base1 = offsets[k1] + scratch.first[k1];
                let u1 = &scratch.u[k1];
                for (i1, &a) in u1.iter().enumerate() {
                    let row = base1 + i1;
                    r_vec[row] -= wg * vj * a;
                    let wa = wg * a;
                    for k2 in 0..d {
                        let base2 = offsets[k2] + scratch.first[k2];
                        let u2 = &scratch.u[k2];
                        for (i2, &b) in u2.iter().enumerate() {
                            r_mat[[row, base2 + i2]] += wa * b;
                        }
                    }
                }
            }
            l += wg * vj * vj;
        }
    }

    Ok(PenaltyAssembly { r_mat, r_vec, l, gamma: gamma.to_vec(), offsets })
}

/// Per-equation penalty components at unit compliance, evaluated for given
/// coefficients `alpha` against the same linearization point:
/// `PEN_j = int res_j(t)^2 dt`. Feeds the compliance (Schall) update.
pub fn linearized_penalty_components(
    model: &OdeModel,
    theta: &[f64],
    point: &LinearizationPoint,
    rule: &QuadratureRule,
    alpha: &Array1<f64>,
) -> Result<Vec<f64>> {
    let d = model.dim();
    if alpha.len() != point.k_total() {
        return Err(Error::Config("coefficient vector length mismatch".into()));
    }
    let offsets = point.offsets();
    let alpha_s = alpha.as_slice().expect("alpha is contiguous");
    let mut out = vec![0.0; d];
    let mut scratch = Scratch::new(point.bases());
    for (&t, &w) in rule.nodes().iter().zip(rule.weights()) {
        scratch.load(model, theta, point, t)?;
        // Spline values/derivatives of the *evaluation* coefficients.
        let mut xs = vec![0.0; d];
        let mut dxs = vec![0.0; d];
        for k in 0..d {
            let block = &alpha_s[offsets[k]..offsets[k + 1]];
            let mut s0 = 0.0;
            let mut s1 = 0.0;
            for (idx, (&b0, &b1)) in scratch.b0[k].iter().zip(&scratch.b1[k]).enumerate() {
                s0 += b0 * block[scratch.first[k] + idx];
                s1 += b1 * block[scratch.first[k] + idx];
            }
            xs[k] = s0;
            dxs[k] = s1;
        }
        for j in 0..d {
            let mut res = dxs[j] - scratch.v(j, d);
            for k in 0..d {
                res -= scratch.jac[j * d + k] * xs[k];
            }
            out[j] += w * res * res;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_point(
        bases: &[BSplineBasis],
        rng: &mut ChaCha12Rng,
        scale: f64,
    ) -> LinearizationPoint {
        let total: usize = bases.iter().map(|b| b.len()).sum();
        let alpha = Array1::from_iter((0..total).map(|_| (rng.random::<f64>() - 0.5) * scale));
        LinearizationPoint::new(bases.to_vec(), alpha).unwrap()
    }

    /// Direct quadrature of the squared linearized residual; independent of
    /// the assembly path (dense basis evaluations, no quadratic form).
    fn direct_penalty(
        model: &OdeModel,
        theta: &[f64],
        gamma: &[f64],
        point: &LinearizationPoint,
        rule: &QuadratureRule,
        alpha: &Array1<f64>,
    ) -> f64 {
        let d = model.dim();
        let offsets = point.offsets();
        let mut total = 0.0;
        for (&t, &w) in rule.nodes().iter().zip(rule.weights()) {
            let x_prev = point.state_values(t).unwrap();
            let f = model.f(t, &x_prev, theta).unwrap();
            let jac = model.jac_x(t, &x_prev, theta).unwrap();
            for j in 0..d {
                let bj = &point.bases()[j];
                let b1 = bj.eval(t, 1).unwrap();
                let aj = alpha.slice(ndarray::s![offsets[j]..offsets[j + 1]]);
                let mut res = b1.dot(&aj) - f[j];
                for k in 0..d {
                    let bk = &point.bases()[k];
                    let b0 = bk.eval(t, 0).unwrap();
                    let ak = alpha.slice(ndarray::s![offsets[k]..offsets[k + 1]]);
                    res -= jac[j * d + k] * (b0.dot(&ak) - x_prev[k]);
                }
                total += w * gamma[j] * res * res;
            }
        }
        total
    }

    #[test]
    fn zero_gamma_gives_zero_assembly() {
        let m = model::van_der_pol();
        let bases = vec![
            BSplineBasis::new((0.0, 2.0), 5, 4).unwrap(),
            BSplineBasis::new((0.0, 2.0), 5, 4).unwrap(),
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let point = random_point(&bases, &mut rng, 2.0);
        let rule = QuadratureRule::for_bases(&bases, 5).unwrap();
        let asm = assemble(&m, &[1.0], &[0.0, 0.0], &point, &rule).unwrap();
        assert_eq!(asm.r_mat.iter().filter(|v| **v != 0.0).count(), 0);
        assert_eq!(asm.r_vec.iter().filter(|v| **v != 0.0).count(), 0);
        assert_eq!(asm.l, 0.0);
    }

    #[test]
    fn pure_roughness_for_zero_rhs() {
        // d = 1 model with f == 0: R must equal the derivative Gram matrix.
        let m = OdeModel::from_fns(
            "zero",
            1,
            vec!["unused".into()],
            vec![0],
            vec![1.0],
            |_t, _x, _th, out| {
                out[0] = 0.0;
                Ok(())
            },
            |_t, _x, _th, out| {
                out[0] = 0.0;
                Ok(())
            },
        )
        .unwrap();
        let basis = BSplineBasis::new((0.0, 1.0), 6, 3).unwrap();
        let rule = QuadratureRule::for_basis(&basis, 4).unwrap();
        let point =
            LinearizationPoint::new(vec![basis.clone()], Array1::zeros(basis.len())).unwrap();
        let asm = assemble(&m, &[0.5], &[1.0], &point, &rule).unwrap();
        assert!(asm.r_vec.iter().all(|v| *v == 0.0));
        assert_eq!(asm.l, 0.0);
        for k in 0..basis.len() {
            for l in 0..basis.len() {
                let gram = rule
                    .integrate(|t| {
                        let d = basis.eval(t, 1).unwrap();
                        d[k] * d[l]
                    })
                    .unwrap();
                assert_abs_diff_eq!(asm.r_mat[[k, l]], gram, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn first_order_remainder_value() {
        // x~ == 1, theta = (1,1), t = 0: J = 2, v = f - J x~ = 1 - 2 = -1.
        let m = model::first_order();
        let basis = BSplineBasis::new((0.0, 2.0), 5, 4).unwrap();
        let alpha = Array1::ones(basis.len()); // partition of unity => x~ == 1
        let point = LinearizationPoint::new(vec![basis], alpha).unwrap();
        let (j, v) = residual_weight(&m, &[1.0, 1.0], &point, 0.0).unwrap();
        assert_abs_diff_eq!(j[[0, 0]], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[0], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_model_has_zero_remainder() {
        // f = A x with constant A: v(t) = A x~ - A x~ = 0.
        let a = [[0.3, -1.2], [0.7, 0.1]];
        let m = OdeModel::from_fns(
            "linear",
            2,
            vec!["unused".into()],
            vec![0, 1],
            vec![1.0],
            move |_t, x, _th, out| {
                out[0] = a[0][0] * x[0] + a[0][1] * x[1];
                out[1] = a[1][0] * x[0] + a[1][1] * x[1];
                Ok(())
            },
            move |_t, _x, _th, out| {
                out[0] = a[0][0];
                out[1] = a[0][1];
                out[2] = a[1][0];
                out[3] = a[1][1];
                Ok(())
            },
        )
        .unwrap();
        let bases = vec![
            BSplineBasis::new((0.0, 1.0), 4, 4).unwrap(),
            BSplineBasis::new((0.0, 1.0), 4, 4).unwrap(),
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let point = random_point(&bases, &mut rng, 3.0);
        for &t in &[0.0, 0.33, 0.8, 1.0] {
            let (_, v) = residual_weight(&m, &[1.0], &point, t).unwrap();
            assert!(v.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn van_der_pol_remainder_matches_cubic_term() {
        let m = model::van_der_pol();
        let bases = vec![
            BSplineBasis::new((0.0, 2.0), 6, 4).unwrap(),
            BSplineBasis::new((0.0, 2.0), 6, 4).unwrap(),
        ];
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let point = random_point(&bases, &mut rng, 2.0);
        let theta = [1.4];
        for &t in &[0.1, 0.9, 1.7] {
            let x = point.state_values(t).unwrap();
            let (_, v) = residual_weight(&m, &theta, &point, t).unwrap();
            // v1 = (2 theta / 3) x1^3, v2 = 0 (second equation is linear).
            assert_abs_diff_eq!(v[0], 2.0 * theta[0] / 3.0 * x[0].powi(3), epsilon = 1e-12);
            assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn assembly_matches_direct_quadrature_oracle() {
        let m = model::van_der_pol();
        let bases = vec![
            BSplineBasis::new((0.0, 2.0), 7, 4).unwrap(),
            BSplineBasis::new((0.0, 2.0), 5, 3).unwrap(),
        ];
        let rule = QuadratureRule::for_bases(&bases, 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for trial in 0..20 {
            let point = random_point(&bases, &mut rng, 2.0);
            let theta = [0.5 + rng.random::<f64>()];
            let gamma = [rng.random::<f64>() * 3.0, rng.random::<f64>() * 3.0];
            let asm = assemble(&m, &theta, &gamma, &point, &rule).unwrap();
            let total: usize = bases.iter().map(|b| b.len()).sum();
            let alpha =
                Array1::from_iter((0..total).map(|_| (rng.random::<f64>() - 0.5) * 4.0));
            let via_form = asm.value(&alpha);
            let via_quad = direct_penalty(&m, &theta, &gamma, &point, &rule, &alpha);
            let denom = via_quad.abs().max(1e-12);
            assert!(
                ((via_form - via_quad) / denom).abs() < 1e-8,
                "trial {trial}: {via_form} vs {via_quad}"
            );
        }
    }

    #[test]
    fn gamma_linearity() {
        let m = model::lotka_volterra();
        let bases = vec![
            BSplineBasis::new((0.0, 2.0), 5, 4).unwrap(),
            BSplineBasis::new((0.0, 2.0), 5, 4).unwrap(),
        ];
        let rule = QuadratureRule::for_bases(&bases, 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let point = random_point(&bases, &mut rng, 1.0);
        let theta = [0.5, 0.02, 0.9, 0.03];
        let g1 = [0.7, 1.3];
        let g2 = [1.4, 2.6];
        let a1 = assemble(&m, &theta, &g1, &point, &rule).unwrap();
        let a2 = assemble(&m, &theta, &g2, &point, &rule).unwrap();
        for (x, y) in a1.r_mat.iter().zip(a2.r_mat.iter()) {
            assert_abs_diff_eq!(2.0 * x, *y, epsilon = 1e-9 * x.abs().max(1.0));
        }
        for (x, y) in a1.r_vec.iter().zip(a2.r_vec.iter()) {
            assert_abs_diff_eq!(2.0 * x, *y, epsilon = 1e-9 * x.abs().max(1.0));
        }
        assert_abs_diff_eq!(2.0 * a1.l, a2.l, epsilon = 1e-9 * a1.l.abs().max(1.0));
    }

    #[test]
    fn linear_system_assembly_is_point_independent() {
        let a = [[0.0, 1.0], [-1.3, -0.4]];
        let m = OdeModel::from_fns(
            "linear",
            2,
            vec!["unused".into()],
            vec![0, 1],
            vec![1.0],
            move |_t, x, _th, out| {
                out[0] = a[0][0] * x[0] + a[0][1] * x[1];
                out[1] = a[1][0] * x[0] + a[1][1] * x[1];
                Ok(())
            },
            move |_t, _x, _th, out| {
                out[0] = a[0][0];
                out[1] = a[0][1];
                out[2] = a[1][0];
                out[3] = a[1][1];
                Ok(())
            },
        )
        .unwrap();
        let bases = vec![
            BSplineBasis::new((0.0, 1.0), 6, 4).unwrap(),
            BSplineBasis::new((0.0, 1.0), 6, 4).unwrap(),
        ];
        let rule = QuadratureRule::for_bases(&bases, 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let p1 = random_point(&bases, &mut rng, 2.0);
        let p2 = random_point(&bases, &mut rng, 5.0);
        let asm1 = assemble(&m, &[1.0], &[1.0, 1.0], &p1, &rule).unwrap();
        let asm2 = assemble(&m, &[1.0], &[1.0, 1.0], &p2, &rule).unwrap();
        let total = p1.k_total();
        for _ in 0..50 {
            let alpha = Array1::from_iter((0..total).map(|_| (rng.random::<f64>() - 0.5) * 4.0));
            let v1 = asm1.value(&alpha);
            let v2 = asm2.value(&alpha);
            assert!((v1 - v2).abs() <= 1e-9 * v1.abs().max(1.0), "{v1} vs {v2}");
        }
    }

    #[test]
    fn symmetry_and_positive_semidefiniteness() {
        let m = model::van_der_pol();
        let bases = vec![
            BSplineBasis::new((0.0, 2.0), 8, 4).unwrap(),
            BSplineBasis::new((0.0, 2.0), 8, 4).unwrap(),
        ];
        let rule = QuadratureRule::for_bases(&bases, 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let point = random_point(&bases, &mut rng, 2.0);
        let asm = assemble(&m, &[1.0], &[2.0, 0.5], &point, &rule).unwrap();
        let max_abs = asm.r_mat.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..asm.k_total() {
            for j in 0..i {
                let diff = (asm.r_mat[[i, j]] - asm.r_mat[[j, i]]).abs();
                assert!(diff <= 1e-10 * max_abs);
            }
        }
        let eigs = crate::linalg::symmetric_eigenvalues(&asm.r_mat).unwrap();
        let max_eig = eigs[eigs.len() - 1];
        assert!(eigs[0] >= -1e-8 * max_eig, "min eig {} max {}", eigs[0], max_eig);
    }

    #[test]
    fn penalty_value_basics() {
        let m = model::first_order();
        let basis = BSplineBasis::new((0.0, 2.0), 6, 4).unwrap();
        let rule = QuadratureRule::for_basis(&basis, 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let point = random_point(std::slice::from_ref(&basis), &mut rng, 1.0);
        let asm = assemble(&m, &[1.0, 1.0], &[2.5], &point, &rule).unwrap();
        // alpha = 0 => value = l.
        let zero = Array1::zeros(basis.len());
        assert_abs_diff_eq!(asm.value(&zero), asm.l, epsilon = 1e-12);
        // Integral of a square stays nonnegative.
        for _ in 0..20 {
            let alpha =
                Array1::from_iter((0..basis.len()).map(|_| (rng.random::<f64>() - 0.5) * 6.0));
            assert!(asm.value(&alpha) >= -1e-9);
        }
    }

    #[test]
    fn components_sum_to_assembled_value() {
        let m = model::lotka_volterra();
        let bases = vec![
            BSplineBasis::new((0.0, 3.0), 6, 4).unwrap(),
            BSplineBasis::new((0.0, 3.0), 6, 4).unwrap(),
        ];
        let rule = QuadratureRule::for_bases(&bases, 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let point = random_point(&bases, &mut rng, 1.0);
        let theta = [0.5, 0.02, 0.9, 0.03];
        let gamma = [0.8, 1.7];
        let asm = assemble(&m, &theta, &gamma, &point, &rule).unwrap();
        let total = point.k_total();
        let alpha = Array1::from_iter((0..total).map(|_| rng.random::<f64>()));
        let comps =
            linearized_penalty_components(&m, &theta, &point, &rule, &alpha).unwrap();
        let weighted: f64 = comps.iter().zip(&gamma).map(|(p, g)| p * g).sum();
        let form = asm.value(&alpha);
        assert_abs_diff_eq!(weighted, form, epsilon = 1e-8 * form.abs().max(1.0));
    }
}
