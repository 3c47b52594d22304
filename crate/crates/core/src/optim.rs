//! Derivative-free simplex warm start and a BFGS refinement with
//! backtracking line search.
//!
//! Both minimize. Infeasible points are signalled by an infinite or NaN
//! objective and the line search backs away from them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimOptions {
    /// Objective evaluations spent in the simplex warm start (0 disables it).
    pub simplex_evals: usize,
    /// Initial simplex edge length.
    pub simplex_step: f64,
    pub max_iter: usize,
    /// Converged when `max |g| <= gtol (1 + |f|)`.
    pub gtol: f64,
    /// Step-size criterion on `max |dx|`.
    pub xtol: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            simplex_evals: 120,
            simplex_step: 0.1,
            max_iter: 300,
            gtol: 1e-8,
            xtol: 1e-11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    GradientNorm,
    StepSize,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimReport {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub converged: bool,
}

/// Nelder-Mead with standard coefficients, stopped after `max_evals`.
pub fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    max_evals: usize,
) -> (Vec<f64>, f64, usize) {
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += step * (1.0 + x0[i].abs());
        simplex.push(x);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x, &mut evals)).collect();
    while evals < max_evals {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        values = idx.iter().map(|&i| values[i]).collect();
        if (values[n] - values[0]).abs() <= 1e-12 * (1.0 + values[0].abs()) {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|x| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect()
        };
        let xr = along(-1.0);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
        } else {
            let (xc, fc) = if fr < values[n] {
                let x = along(-0.5);
                let v = eval(&x, &mut evals);
                (x, v)
            } else {
                let x = along(0.5);
                let v = eval(&x, &mut evals);
                (x, v)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
            } else {
                for i in 1..=n {
                    for j in 0..n {
                        simplex[i][j] = simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j]);
                    }
                    values[i] = eval(&simplex[i], &mut evals);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    (simplex[best].clone(), values[best], evals)
}

/// Make a symmetric matrix positive definite by eigenvalue flooring.
pub fn make_positive_definite(h: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (h + h.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (max_ev * 1e-8).max(1e-12);
    let vals = eig.eigenvalues.map(|v| v.abs().max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// BFGS minimization. `fg` returns the objective and its gradient (objective
/// `+inf` for infeasible points). `hess0`, when supplied, is an initial
/// Hessian approximation that must be positive definite.
pub fn bfgs(
    fg: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    x0: &[f64],
    hess0: Option<&DMatrix<f64>>,
    opts: &OptimOptions,
) -> OptimReport {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut f, g) = fg(x.as_slice());
    let mut evaluations = 1;
    let mut g = DVector::from_vec(g);
    let gnorm = |g: &DVector<f64>| g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !f.is_finite() {
        return OptimReport {
            x: x0.to_vec(),
            f,
            grad_norm: f64::INFINITY,
            iterations: 0,
            evaluations,
            termination: Termination::LineSearchFailed,
            converged: false,
        };
    }
    let mut hinv = match hess0.and_then(|h| h.clone().cholesky()) {
        Some(ch) => ch.inverse(),
        None => DMatrix::identity(n, n) / (1.0 + gnorm(&g)),
    };
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    for iter in 0..opts.max_iter {
        iterations = iter;
        if gnorm(&g) <= opts.gtol * (1.0 + f.abs()) {
            termination = Termination::GradientNorm;
            break;
        }
        let mut dir = -(&hinv * &g);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            hinv = DMatrix::identity(n, n) / (1.0 + gnorm(&g));
            dir = -(&hinv * &g);
            slope = g.dot(&dir);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = &x + &dir * t;
            let (fn_, gn) = fg(xn.as_slice());
            evaluations += 1;
            if fn_.is_finite() && fn_ <= f + 1e-4 * t * slope {
                accepted = Some((xn, fn_, DVector::from_vec(gn)));
                break;
            }
            t *= if fn_.is_finite() { 0.5 } else { 0.2 };
        }
        let Some((xn, fn_, gn)) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let step = gnorm(&s);
        x = xn;
        f = fn_;
        g = gn;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 yHy + rho) s s'
            hinv -= (&s * hy.transpose() + &hy * s.transpose()) * rho;
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        if step <= opts.xtol * (1.0 + gnorm(&x)) {
            iterations = iter + 1;
            termination = if gnorm(&g) <= opts.gtol * (1.0 + f.abs()) {
                Termination::GradientNorm
            } else {
                Termination::StepSize
            };
            break;
        }
        iterations = iter + 1;
    }
    let grad_norm = gnorm(&g);
    let converged = match termination {
        Termination::GradientNorm => true,
        // A stalled step only counts as convergence when the gradient is
        // within two orders of magnitude of the target.
        Termination::StepSize | Termination::LineSearchFailed => {
            grad_norm <= 100.0 * opts.gtol * (1.0 + f.abs())
        }
        Termination::MaxIterations => grad_norm <= opts.gtol * (1.0 + f.abs()),
    };
    OptimReport {
        x: x.as_slice().to_vec(),
        f,
        grad_norm,
        iterations,
        evaluations,
        termination,
        converged,
    }
}
