//! Simulation of Brown-Resnick fields with unit-Fréchet margins and their
//! transformation to GEV margins.
//!
//! The exact sampler uses extremal functions: for site `j`, the extremal
//! function is `exp{W(s) - W(s_j) - gamma(s - s_j)}` for an intrinsically
//! stationary Gaussian process `W` with variogram `2 gamma`. Increments of `W`
//! do not depend on where it is pinned, so a single Cholesky factor of the
//! covariance of `W` pinned to zero at the first site serves every `j`.
//!
//! Every replicate draws from its own ChaCha stream keyed by
//! `(seed, replicate index)`, so output is identical for any worker count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::extremes::{frechet_to_gev, semivariogram, DependenceParams, GevParams};

/// Spectral functions used by the approximate sampler.
pub const APPROX_SPECTRAL_COUNT: usize = 1000;

/// Marginal model applied on top of the unit-Fréchet field.
#[derive(Debug, Clone)]
pub enum Margins {
    UnitFrechet,
    PerSite(Vec<GevParams>),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub sites: Vec<[f64; 2]>,
    pub n: usize,
    pub dep: DependenceParams,
    pub margins: Margins,
    pub seed: u64,
    /// Exact extremal-function sampler; otherwise the truncated spectral
    /// approximation with [`APPROX_SPECTRAL_COUNT`] functions.
    pub exact: bool,
}

impl SimConfig {
    pub fn new(sites: Vec<[f64; 2]>, n: usize, dep: DependenceParams, seed: u64) -> Self {
        Self {
            sites,
            n,
            dep,
            margins: Margins::UnitFrechet,
            seed,
            exact: true,
        }
    }

    pub fn with_margins(mut self, margins: Margins) -> Self {
        self.margins = margins;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("replicate count must be at least 1".into()));
        }
        if self.sites.is_empty() {
            return Err(Error::Config("no sites".into()));
        }
        for i in 0..self.sites.len() {
            for j in 0..i {
                if self.sites[i] == self.sites[j] {
                    return Err(Error::Config(format!("sites {j} and {i} coincide")));
                }
            }
        }
        if let Margins::PerSite(g) = &self.margins {
            if g.len() != self.sites.len() {
                return Err(Error::Config(format!(
                    "{} marginal parameter sets for {} sites",
                    g.len(),
                    self.sites.len()
                )));
            }
        }
        Ok(())
    }
}

/// Regular `nx x ny` grid with unit spacing starting at (1, 1), row-major in y.
pub fn grid_sites(nx: usize, ny: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            out.push([(ix + 1) as f64, (iy + 1) as f64]);
        }
    }
    out
}

pub fn distance(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Lower Cholesky factor of `cov + jitter I`, escalating the relative jitter
/// from 1e-10 to 1e-6 of the mean diagonal before giving up.
pub fn cholesky_with_jitter(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = cov.nrows();
    if m == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let scale = cov.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    loop {
        let mut a = cov.clone();
        for i in 0..m {
            a[(i, i)] += jitter * scale;
        }
        if let Some(ch) = a.cholesky() {
            return Ok(ch.l());
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > 1e-6 * 1.000_001 {
            return Err(Error::DegenerateGeometry(
                "covariance not positive definite after jitter 1e-6".into(),
            ));
        }
    }
}

/// Gaussian process with variogram `2 gamma`, pinned to zero at site 0.
struct PinnedField {
    /// Factor for sites `1..d`.
    chol: DMatrix<f64>,
    /// `gamma(s_l - s_j)` for all site pairs.
    semivar: DMatrix<f64>,
}

impl PinnedField {
    fn new(sites: &[[f64; 2]], dep: &DependenceParams) -> Result<Self> {
        let d = sites.len();
        let (alpha, phi) = dep.natural_scale();
        let mut semivar = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..i {
                let g = semivariogram(distance(&sites[i], &sites[j]), alpha, phi)?;
                semivar[(i, j)] = g;
                semivar[(j, i)] = g;
            }
        }
        let m = d - 1;
        let cov = DMatrix::from_fn(m, m, |a, b| {
            semivar[(a + 1, 0)] + semivar[(b + 1, 0)] - semivar[(a + 1, b + 1)]
        });
        let chol = cholesky_with_jitter(&cov)?;
        Ok(Self { chol, semivar })
    }

    fn d(&self) -> usize {
        self.semivar.nrows()
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let m = self.chol.nrows();
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = &self.chol * z;
        out[0] = 0.0;
        out[1..].copy_from_slice(w.as_slice());
    }
}

fn replicate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn exact_replicate(field: &PinnedField, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = field.d();
    let mut z = vec![0.0; d];
    let mut w = vec![0.0; d];
    let mut y = vec![0.0; d];
    for j in 0..d {
        let mut arrival: f64 = rng.sample(Exp1);
        while 1.0 / arrival > z[j] {
            let zeta = 1.0 / arrival;
            field.draw(rng, &mut w);
            for l in 0..d {
                y[l] = zeta * (w[l] - w[j] - field.semivar[(l, j)]).exp();
            }
            if (0..j).all(|l| y[l] < z[l]) {
                for l in 0..d {
                    z[l] = z[l].max(y[l]);
                }
            }
            arrival += rng.sample::<f64, _>(Exp1);
        }
    }
    z
}

fn approx_replicate(field: &PinnedField, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = field.d();
    let mut z = vec![0.0f64; d];
    let mut w = vec![0.0; d];
    let mut arrival = 0.0;
    for _ in 0..APPROX_SPECTRAL_COUNT {
        arrival += rng.sample::<f64, _>(Exp1);
        let zeta = 1.0 / arrival;
        field.draw(rng, &mut w);
        for l in 0..d {
            z[l] = z[l].max(zeta * (w[l] - field.semivar[(l, 0)]).exp());
        }
    }
    z
}

/// `n x d` matrix of independent Brown-Resnick replicates with unit-Fréchet
/// margins.
pub fn simulate_frechet_field(cfg: &SimConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let d = cfg.sites.len();
    if d == 1 {
        let rows: Vec<f64> = (0..cfg.n)
            .map(|i| 1.0 / replicate_rng(cfg.seed, i).sample::<f64, _>(Exp1))
            .collect();
        return Ok(DMatrix::from_row_slice(cfg.n, 1, &rows));
    }
    let field = PinnedField::new(&cfg.sites, &cfg.dep)?;
    let rows: Vec<Vec<f64>> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = replicate_rng(cfg.seed, i);
            if cfg.exact {
                exact_replicate(&field, &mut rng)
            } else {
                approx_replicate(&field, &mut rng)
            }
        })
        .collect();
    Ok(DMatrix::from_fn(cfg.n, d, |i, j| rows[i][j]))
}

/// Apply `y = mu + sigma/xi (x^xi - 1)` per site.
pub fn frechet_to_gev_field(x: &DMatrix<f64>, margins: &[GevParams]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| frechet_to_gev(x[(i, j)], &margins[j]))
}

/// Simulated field on the GEV scale defined by `cfg.margins`.
pub fn simulate_gev_field(cfg: &SimConfig) -> Result<DMatrix<f64>> {
    let x = simulate_frechet_field(cfg)?;
    Ok(match &cfg.margins {
        Margins::UnitFrechet => x,
        Margins::PerSite(g) => frechet_to_gev_field(&x, g),
    })
}

/// Per-site GEV parameters with `mu = s' beta1`, `log sigma = beta2`,
/// `xi = beta3`.
pub fn linear_location_margins(
    sites: &[[f64; 2]],
    beta1: [f64; 2],
    log_sigma: f64,
    xi: f64,
) -> Vec<GevParams> {
    sites
        .iter()
        .map(|s| GevParams {
            mu: s[0] * beta1[0] + s[1] * beta1[1],
            sigma: log_sigma.exp(),
            xi,
        })
        .collect()
}

/// Smooth location and log-scale surfaces over a grid of `d` sites:
/// `mu = (s1^4 + s2^4 + s1 s2) / d^2`, `log sigma = |s| / 10`, constant `xi`.
pub fn smooth_surface_margins(sites: &[[f64; 2]], xi: f64) -> Vec<GevParams> {
    let d2 = (sites.len() * sites.len()) as f64;
    sites
        .iter()
        .map(|s| GevParams {
            mu: (s[0].powi(4) + s[1].powi(4) + s[0] * s[1]) / d2,
            sigma: (s[0].hypot(s[1]) / 10.0).exp(),
            xi,
        })
        .collect()
}

/// Modified Bessel function of the second kind, `K_nu(t)`, for `t > 0`, from
/// `int_0^inf exp(-t cosh u) cosh(nu u) du` by the trapezoid rule.
pub fn bessel_k(nu: f64, t: f64) -> f64 {
    let step = 1e-3;
    let mut sum = 0.5 * (-t).exp();
    let mut u: f64 = step;
    loop {
        let term = (-t * u.cosh() + nu * u).exp() * 0.5 * (1.0 + (-2.0 * nu * u).exp());
        sum += term;
        if term < 1e-18 * sum && u > 1.0 {
            break;
        }
        u += step;
    }
    sum * step
}

/// Matérn covariance with smoothness `nu` and unit range, unit variance:
/// `t^nu K_nu(t) / (2^{nu-1} Gamma(nu))`.
pub fn matern_covariance(t: f64, nu: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    t.powf(nu) * bessel_k(nu, t) / (2f64.powf(nu - 1.0) * statrs::function::gamma::gamma(nu))
}

/// One draw of a zero-mean Gaussian random field with Matérn covariance.
pub fn simulate_matern_field(sites: &[[f64; 2]], nu: f64, seed: u64) -> Result<Vec<f64>> {
    let d = sites.len();
    let cov = DMatrix::from_fn(d, d, |i, j| matern_covariance(distance(&sites[i], &sites[j]), nu));
    let l = cholesky_with_jitter(&cov)?;
    let mut rng = replicate_rng(seed, usize::MAX >> 1);
    let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((l * z).iter().copied().collect())
}
