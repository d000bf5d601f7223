//! Derivative-free Nelder-Mead simplex minimization.
//!
//! Standard coefficients (reflection 1, expansion 2, contraction 0.5,
//! shrink 0.5); termination on simplex diameter or an evaluation budget.
//! Objectives may return non-finite values to reject a candidate.

/// Options controlling one simplex run.
#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Stop when the maximum vertex distance falls below this.
    pub diameter_tol: f64,
    pub max_evals: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            diameter_tol: 1e-6,
            max_evals: 400,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub evals: usize,
    /// True when the diameter criterion was met within the budget.
    pub converged: bool,
}

fn sanitize(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

fn diameter(simplex: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..simplex.len() {
        for j in (i + 1)..simplex.len() {
            let d = simplex[i]
                .iter()
                .zip(&simplex[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(d);
        }
    }
    worst
}

/// Minimizes `f` starting from `x0` with an axis-aligned initial simplex of
/// per-coordinate steps `init_step`.
pub fn minimize<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    init_step: &[f64],
    opts: &SimplexOptions,
) -> SimplexResult {
    let dim = x0.len();
    assert!(dim > 0 && init_step.len() == dim);
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        sanitize(f(x))
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(x0.to_vec());
    for i in 0..dim {
        let mut p = x0.to_vec();
        p[i] += init_step[i];
        simplex.push(p);
    }
    let mut scores: Vec<f64> = simplex.iter().map(|p| eval(p, &mut evals)).collect();

    let mut converged = false;
    while evals < opts.max_evals {
        // Order the vertices: best first.
        let mut idx: Vec<usize> = (0..=dim).collect();
        idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        let best = idx[0];
        let worst = idx[dim];
        let second_worst = idx[dim - 1];

        if diameter(&simplex) < opts.diameter_tol {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; dim];
        for &i in &idx[..dim] {
            for (c, v) in centroid.iter_mut().zip(&simplex[i]) {
                *c += v;
            }
        }
        for c in centroid.iter_mut() {
            *c /= dim as f64;
        }

        let mix = |a: &[f64], b: &[f64], coef: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(c, w)| c + coef * (c - w)).collect()
        };

        let reflected = mix(&centroid, &simplex[worst], opts.reflection);
        let fr = eval(&reflected, &mut evals);
        if fr < scores[best] {
            let expanded = mix(&centroid, &simplex[worst], opts.expansion);
            let fe = eval(&expanded, &mut evals);
            if fe < fr {
                simplex[worst] = expanded;
                scores[worst] = fe;
            } else {
                simplex[worst] = reflected;
                scores[worst] = fr;
            }
            continue;
        }
        if fr < scores[second_worst] {
            simplex[worst] = reflected;
            scores[worst] = fr;
            continue;
        }
        // Contraction toward the centroid.
        let contracted = mix(&centroid, &simplex[worst], -opts.contraction);
        let fc = eval(&contracted, &mut evals);
        if fc < scores[worst] {
            simplex[worst] = contracted;
            scores[worst] = fc;
            continue;
        }
        // Shrink toward the best vertex.
        let best_point = simplex[best].clone();
        for &i in idx[1..].iter() {
            let p: Vec<f64> = best_point
                .iter()
                .zip(&simplex[i])
                .map(|(b, v)| b + opts.shrink * (v - b))
                .collect();
            simplex[i] = p;
            scores[i] = eval(&simplex[i], &mut evals);
        }
    }

    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    SimplexResult { x: simplex[best].clone(), fx: scores[best], evals, converged }
}
