//! Censored pairwise composite likelihood of one block: value, score,
//! per-replicate score kernels, sensitivity matrix and the block fit.
//!
//! Every pair term depends on eight local quantities
//! `(omega, zeta, mu1, log sigma1, xi1, mu2, log sigma2, xi2)`. Terms are
//! differentiated in these with forward-mode dual numbers and mapped to the
//! regression coefficients through the linear predictors.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::gamma;

use crate::ad::{Grad, Hess, Scalar};
use crate::error::{Error, Result};
use crate::extremes::{
    dependence_scalar, pair_log_g, SiteState, ThetaStationary, XI_LOWER, XI_UPPER,
};
use crate::model::{BlockData, BlockPair, MarginalDesign};
use crate::optim::{bfgs, make_positive_definite, nelder_mead, OptimOptions, OptimReport};
use crate::stats::{normal_quantile, ranks};

/// Scalar type carrying derivatives in the eight local quantities.
pub(crate) trait LocalScalar: Scalar {
    type Site: Scalar;
    fn site_var(v: f64, slot: usize) -> Self::Site;
    fn lift(s: Self::Site, offset: usize) -> Self;
    fn dep(omega: f64, zeta: f64) -> (Self, Self);
}

impl LocalScalar for f64 {
    type Site = f64;
    fn site_var(v: f64, _: usize) -> f64 {
        v
    }
    fn lift(s: f64, _: usize) -> f64 {
        s
    }
    fn dep(omega: f64, zeta: f64) -> (f64, f64) {
        (omega, zeta)
    }
}

impl LocalScalar for Grad<8> {
    type Site = Grad<3>;
    fn site_var(v: f64, slot: usize) -> Grad<3> {
        Grad::var(v, slot)
    }
    fn lift(s: Grad<3>, offset: usize) -> Self {
        Grad::lift(s, offset)
    }
    fn dep(omega: f64, zeta: f64) -> (Self, Self) {
        (Grad::var(omega, 0), Grad::var(zeta, 1))
    }
}

impl LocalScalar for Hess<8> {
    type Site = Hess<3>;
    fn site_var(v: f64, slot: usize) -> Hess<3> {
        Hess::var(v, slot)
    }
    fn lift(s: Hess<3>, offset: usize) -> Self {
        Hess::lift(s, offset)
    }
    fn dep(omega: f64, zeta: f64) -> (Self, Self) {
        (Hess::var(omega, 0), Hess::var(zeta, 1))
    }
}

/// Replicates a pair term stands for.
#[derive(Clone, Copy)]
enum Term<'a> {
    /// Identical both-censored contributions for these replicates.
    Group(&'a [u32]),
    Single(usize),
}

impl Term<'_> {
    fn weight(&self) -> f64 {
        match self {
            Term::Group(r) => r.len() as f64,
            Term::Single(_) => 1.0,
        }
    }

    fn rep(&self) -> usize {
        match self {
            Term::Group(r) => r[0] as usize,
            Term::Single(i) => *i,
        }
    }
}

/// Where a site support or shape violation occurred.
#[derive(Debug, Clone, Copy)]
struct Violation {
    rep: usize,
    site: usize,
}

fn site_states<S: LocalScalar>(
    data: &BlockData,
    theta: &[f64],
) -> std::result::Result<Vec<SiteState<S::Site>>, Violation> {
    let (n, d) = (data.n(), data.d());
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            let (mu, ls, xi) = data.design.linear_predictors(theta, i, j);
            let bad = Violation { rep: i, site: j };
            if !(xi > XI_LOWER && xi <= XI_UPPER) || !mu.is_finite() || !ls.is_finite() {
                return Err(bad);
            }
            let (m, l, x) = (S::site_var(mu, 0), S::site_var(ls, 1), S::site_var(xi, 2));
            let state = if data.exceeds[i * d + j] {
                SiteState::exceed(data.obs[(i, j)], m, l, x)
            } else {
                SiteState::censored(data.thresholds[j], m, l, x)
            };
            out.push(state.ok_or(bad)?);
        }
    }
    Ok(out)
}

/// Calls `f` for every distinct pair term. Returns the violation if a site
/// leaves the support or a term is not finite.
fn for_each_term<S: LocalScalar>(
    data: &BlockData,
    theta: &[f64],
    mut f: impl FnMut(&BlockPair, Term, S),
) -> std::result::Result<(), Violation> {
    let states = site_states::<S>(data, theta)?;
    let d = data.d();
    let (omega, zeta) = S::dep(theta[0], theta[1]);
    for pair in &data.pairs {
        let a = dependence_scalar(pair.h, omega, zeta);
        let eval = |i: usize| -> std::result::Result<S, Violation> {
            let s1 = states[i * d + pair.j1].map(|v| S::lift(v, 2));
            let s2 = states[i * d + pair.j2].map(|v| S::lift(v, 5));
            let v = pair_log_g(a, &s1, &s2);
            if v.value().is_finite() {
                Ok(v)
            } else {
                Err(Violation { rep: i, site: pair.j1 })
            }
        };
        if !pair.both_censored.is_empty() {
            let v = eval(pair.both_censored[0] as usize)?;
            f(pair, Term::Group(&pair.both_censored), v);
        }
        for &i in &pair.other {
            let v = eval(i as usize)?;
            f(pair, Term::Single(i as usize), v);
        }
    }
    Ok(())
}

/// Parameter offsets of the three coefficient vectors.
fn offsets(design: &MarginalDesign) -> [usize; 3] {
    let (q1, q2, _) = design.dims();
    [2, 2 + q1, 2 + q1 + q2]
}

/// Sparse Jacobian of the eight local quantities with respect to theta.
fn local_jacobian(
    design: &MarginalDesign,
    rep: usize,
    j1: usize,
    j2: usize,
) -> [Vec<(usize, f64)>; 8] {
    let off = offsets(design);
    let covs = [&design.location, &design.log_scale, &design.shape];
    let mut jac: [Vec<(usize, f64)>; 8] = Default::default();
    jac[0].push((0, 1.0));
    jac[1].push((1, 1.0));
    for (base, site) in [(2, j1), (5, j2)] {
        for c in 0..3 {
            for (t, &z) in covs[c].row(rep, site).iter().enumerate() {
                if z != 0.0 {
                    jac[base + c].push((off[c] + t, z));
                }
            }
        }
    }
    jac
}

fn scatter_grad(jac: &[Vec<(usize, f64)>; 8], g: &[f64; 8], w: f64, out: &mut [f64]) {
    for (k, entries) in jac.iter().enumerate() {
        let gk = w * g[k];
        for &(idx, c) in entries {
            out[idx] += gk * c;
        }
    }
}

fn support_error(data: &BlockData, theta: &[f64], v: Violation) -> Error {
    let y = data.obs[(v.rep, v.site)];
    let g = data.design.gev_at(theta, v.rep, v.site);
    Error::Support {
        site: Some(data.sites[v.site]),
        value: y,
        margin: g.support_margin(y.max(data.thresholds[v.site])),
    }
}

/// Log CCL of the block divided by `n`; `-inf` outside the support or the
/// admissible shape interval.
pub fn block_ccl(theta: &[f64], data: &BlockData) -> f64 {
    let mut sum = 0.0;
    match for_each_term::<f64>(data, theta, |_, t, v| sum += t.weight() * v) {
        Ok(()) => sum / data.n() as f64,
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Block CCL and its gradient. The gradient is empty when the value is
/// `-inf`.
pub fn block_ccl_and_score(theta: &[f64], data: &BlockData) -> (f64, Vec<f64>) {
    let p = data.num_params();
    let mut grad = vec![0.0; p];
    let mut sum = 0.0;
    let static_design = data.design.is_static();
    let mut cached: Option<(usize, usize, [Vec<(usize, f64)>; 8])> = None;
    let res = for_each_term::<Grad<8>>(data, theta, |pair, t, v| {
        sum += t.weight() * v.v;
        let rep = if static_design { 0 } else { t.rep() };
        let fresh = !matches!(&cached, Some((a, b, _)) if *a == pair.j1 && *b == pair.j2)
            || !static_design;
        if fresh {
            cached = Some((pair.j1, pair.j2, local_jacobian(&data.design, rep, pair.j1, pair.j2)));
        }
        scatter_grad(&cached.as_ref().unwrap().2, &v.g, t.weight(), &mut grad);
    });
    match res {
        Ok(()) => {
            let n = data.n() as f64;
            grad.iter_mut().for_each(|g| *g /= n);
            (sum / n, grad)
        }
        Err(_) => (f64::NEG_INFINITY, Vec::new()),
    }
}

/// Gradient of [`block_ccl`].
pub fn block_score(theta: &[f64], data: &BlockData) -> Result<Vec<f64>> {
    let (v, g) = block_ccl_and_score(theta, data);
    if v.is_finite() {
        Ok(g)
    } else {
        Err(support_violation(theta, data))
    }
}

fn support_violation(theta: &[f64], data: &BlockData) -> Error {
    match for_each_term::<f64>(data, theta, |_, _, _| {}) {
        Err(v) => support_error(data, theta, v),
        Ok(()) => Error::Numerical("non-finite block likelihood".into()),
    }
}

/// Per-replicate score kernels: row `i` is the gradient of replicate `i`'s
/// pairwise log-likelihood, so the column means equal [`block_score`].
pub fn block_kernels(theta: &[f64], data: &BlockData) -> Result<DMatrix<f64>> {
    let (n, p) = (data.n(), data.num_params());
    let mut psi = DMatrix::zeros(n, p);
    let mut row = vec![0.0; p];
    let res = for_each_term::<Grad<8>>(data, theta, |pair, t, v| {
        let jac = local_jacobian(&data.design, t.rep(), pair.j1, pair.j2);
        row.iter_mut().for_each(|r| *r = 0.0);
        scatter_grad(&jac, &v.g, 1.0, &mut row);
        match t {
            Term::Single(i) => {
                for (c, r) in row.iter().enumerate() {
                    psi[(i, c)] += r;
                }
            }
            Term::Group(reps) => {
                for &i in reps {
                    for (c, r) in row.iter().enumerate() {
                        psi[(i as usize, c)] += r;
                    }
                }
            }
        }
    });
    res.map_err(|v| support_error(data, theta, v))?;
    Ok(psi)
}

/// Sample sensitivity matrix: the Hessian of [`block_ccl`].
pub fn block_sensitivity(theta: &[f64], data: &BlockData) -> Result<DMatrix<f64>> {
    let p = data.num_params();
    let mut hess = DMatrix::zeros(p, p);
    let static_design = data.design.is_static();
    let mut local = [[0.0; 8]; 8];
    let mut current: Option<(usize, usize)> = None;
    let flush = |hess: &mut DMatrix<f64>, local: &mut [[f64; 8]; 8], jac: &[Vec<(usize, f64)>; 8]| {
        for k in 0..8 {
            for l in 0..8 {
                let h = local[k][l];
                if h == 0.0 {
                    continue;
                }
                for &(a, ca) in &jac[k] {
                    for &(b, cb) in &jac[l] {
                        hess[(a, b)] += h * ca * cb;
                    }
                }
            }
        }
        *local = [[0.0; 8]; 8];
    };
    let res = for_each_term::<Hess<8>>(data, theta, |pair, t, v| {
        if static_design {
            // Accumulate the local Hessian over replicates of one pair and
            // map it once.
            if current != Some((pair.j1, pair.j2)) {
                if let Some((a, b)) = current {
                    flush(&mut hess, &mut local, &local_jacobian(&data.design, 0, a, b));
                }
                current = Some((pair.j1, pair.j2));
            }
            let w = t.weight();
            for k in 0..8 {
                for l in 0..8 {
                    local[k][l] += w * v.h[k][l];
                }
            }
        } else {
            local = v.h;
            flush(&mut hess, &mut local, &local_jacobian(&data.design, t.rep(), pair.j1, pair.j2));
        }
    });
    res.map_err(|v| support_error(data, theta, v))?;
    if let Some((a, b)) = current {
        flush(&mut hess, &mut local, &local_jacobian(&data.design, 0, a, b));
    }
    hess /= data.n() as f64;
    Ok((&hess + hess.transpose()) * 0.5)
}

/// GEV parameters of one sample by probability-weighted moments.
/// Returns `(mu, sigma, xi)`, or `None` for a degenerate sample.
pub fn pwm_gev(sample: &[f64]) -> Option<(f64, f64, f64)> {
    let n = sample.len();
    if n < 3 {
        return None;
    }
    let mut x = sample.to_vec();
    x.sort_by(|a, b| a.total_cmp(b));
    let nf = n as f64;
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let i = i as f64;
        b0 += v;
        b1 += v * i / (nf - 1.0);
        b2 += v * i * (i - 1.0) / ((nf - 1.0) * (nf - 2.0));
    }
    b0 /= nf;
    b1 /= nf;
    b2 /= nf;
    let l2 = 2.0 * b1 - b0;
    if !(l2 > 0.0) {
        return None;
    }
    let c = l2 / (3.0 * b2 - b0) - 2f64.ln() / 3f64.ln();
    let k = 7.8590 * c + 2.9554 * c * c;
    let (mu, sigma) = if k.abs() < 1e-6 {
        let sigma = l2 / 2f64.ln();
        (b0 - 0.577_215_664_901_532_9 * sigma, sigma)
    } else {
        let g = gamma(1.0 + k);
        let sigma = l2 * k / (g * (1.0 - 2f64.powf(-k)));
        (b0 + sigma * (g - 1.0) / k, sigma)
    };
    (sigma > 0.0 && mu.is_finite()).then_some((mu, sigma, -k))
}

/// Least-squares coefficients of `targets` on the rows of `rows`.
fn pooled_ls(rows: &[Vec<f64>], targets: &[f64]) -> Option<Vec<f64>> {
    let q = rows.first()?.len();
    let a = DMatrix::from_fn(rows.len(), q, |i, j| rows[i][j]);
    let b = DVector::from_column_slice(targets);
    let sol = a.svd(true, true).solve(&b, 1e-10).ok()?;
    sol.iter().all(|v| v.is_finite()).then(|| sol.as_slice().to_vec())
}

/// Starting dependence parameters `(omega, zeta)` from F-madogram extremal
/// coefficients regressed on log distance.
pub fn initial_dependence(data: &BlockData) -> (f64, f64) {
    let (n, d) = (data.n(), data.d());
    let nf = n as f64;
    let f: Vec<Vec<f64>> = (0..d)
        .map(|j| {
            let col: Vec<f64> = data.obs.column(j).iter().copied().collect();
            ranks(&col).into_iter().map(|r| r / (nf + 1.0)).collect()
        })
        .collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for pair in &data.pairs {
        let nu: f64 = f[pair.j1]
            .iter()
            .zip(&f[pair.j2])
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / (2.0 * nf);
        let ext = ((1.0 + 2.0 * nu) / (1.0 - 2.0 * nu)).clamp(1.02, 1.98);
        let a = 2.0 * normal_quantile(ext / 2.0);
        xs.push(pair.h.ln());
        ys.push((a * a / 2.0).ln());
    }
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let alpha = if sxx > 1e-12 { (sxy / sxx).clamp(0.2, 1.8) } else { 1.0 };
    let log_phi = mx - my / alpha;
    let (hmin, hmax) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let zeta = log_phi.clamp(hmin - 5.0, hmax + 5.0);
    ((alpha / (2.0 - alpha)).ln(), zeta)
}

/// Starting parameter vector: per-site PWM fits pooled by least squares for
/// the marginal coefficients, madogram regression for the dependence.
pub fn initial_theta(data: &BlockData) -> Vec<f64> {
    let design = &data.design;
    let (q1, q2, q3) = design.dims();
    let mut rows = [Vec::new(), Vec::new(), Vec::new()];
    let mut targets = [Vec::new(), Vec::new(), Vec::new()];
    for j in 0..data.d() {
        let col: Vec<f64> = data.obs.column(j).iter().copied().collect();
        if let Some((mu, sigma, xi)) = pwm_gev(&col) {
            rows[0].push(design.location.site_mean(j));
            rows[1].push(design.log_scale.site_mean(j));
            rows[2].push(design.shape.site_mean(j));
            targets[0].push(mu);
            targets[1].push(sigma.ln());
            targets[2].push(xi.clamp(XI_LOWER + 0.05, 0.9));
        }
    }
    let fit = |c: usize, q: usize| pooled_ls(&rows[c], &targets[c]).unwrap_or_else(|| vec![0.0; q]);
    let (omega, zeta) = initial_dependence(data);
    let mut theta = vec![omega, zeta];
    theta.extend(fit(0, q1));
    theta.extend(fit(1, q2));
    theta.extend(fit(2, q3));
    theta
}

/// Result of fitting one block.
#[derive(Debug, Clone)]
pub struct BlockFitResult {
    pub block_id: usize,
    pub theta: Vec<f64>,
    pub ccl: f64,
    pub converged: bool,
    pub report: OptimReport,
    /// `n x p` score kernels at `theta`.
    pub psi: DMatrix<f64>,
    /// Sensitivity matrix at `theta`.
    pub sensitivity: DMatrix<f64>,
}

/// Maximize the block CCL from `init`.
pub fn fit_block(data: &BlockData, init: &ThetaStationary, opts: &OptimOptions) -> Result<BlockFitResult> {
    fit_block_from(data, &init.to_vec(), opts)
}

/// Maximize the block CCL starting from the data-driven initial value.
pub fn fit_block_auto(data: &BlockData, opts: &OptimOptions) -> Result<BlockFitResult> {
    let mut init = initial_theta(data);
    if !block_ccl(&init, data).is_finite() {
        // Zero shape coefficients give the Gumbel margin, whose support is
        // the whole line.
        let off = offsets(&data.design)[2];
        init[off..].iter_mut().for_each(|b| *b = 0.0);
    }
    fit_block_from(data, &init, opts)
}

/// Maximize the block CCL from a raw parameter vector.
pub fn fit_block_from(data: &BlockData, init: &[f64], opts: &OptimOptions) -> Result<BlockFitResult> {
    if init.len() != data.num_params() {
        return Err(Error::Config(format!(
            "block {}: initial vector has length {}, expected {}",
            data.block_id,
            init.len(),
            data.num_params()
        )));
    }
    if !block_ccl(init, data).is_finite() {
        return Err(support_violation(init, data));
    }
    let mut x0 = init.to_vec();
    if opts.simplex_evals > 0 {
        let mut neg = |t: &[f64]| -block_ccl(t, data);
        let (x, _, _) = nelder_mead(&mut neg, &x0, opts.simplex_step, opts.simplex_evals);
        x0 = x;
    }
    let h0 = block_sensitivity(&x0, data)
        .ok()
        .filter(|h| h.iter().all(|v| v.is_finite()))
        .map(|h| make_positive_definite(&(-h)));
    let mut fg = |t: &[f64]| {
        let (v, g) = block_ccl_and_score(t, data);
        if v.is_finite() {
            (-v, g.iter().map(|x| -x).collect())
        } else {
            (f64::INFINITY, vec![0.0; t.len()])
        }
    };
    let report = bfgs(&mut fg, &x0, h0.as_ref(), opts);
    if !report.converged {
        log::warn!(
            "block {} did not converge: {:?}, gradient norm {:.3e}",
            data.block_id,
            report.termination,
            report.grad_norm
        );
    }
    let theta = report.x.clone();
    let psi = block_kernels(&theta, data)?;
    let sensitivity = block_sensitivity(&theta, data)?;
    Ok(BlockFitResult {
        block_id: data.block_id,
        ccl: -report.f,
        converged: report.converged,
        theta,
        report,
        psi,
        sensitivity,
    })
}
