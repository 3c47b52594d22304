//! Closed-form model mathematics: GEV and unit-Fréchet transforms, the
//! Brown-Resnick (Hüsler-Reiss) bivariate exponential measure, its partial
//! derivatives and density, and the four-case censored pair likelihood.
//!
//! The kernels are written once, generically over [`Scalar`], so that the
//! same code produces values, exact gradients and exact Hessians.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::ad::Scalar;
use crate::error::{Error, Result};

/// Below this magnitude of `xi` the GEV transform uses its exponential limit.
pub const XI_BRANCH_TOL: f64 = 1e-8;
/// Lower end of the admissible shape interval used while fitting.
pub const XI_LOWER: f64 = -0.5 + 1e-3;
/// Upper end of the admissible shape interval used while fitting.
pub const XI_UPPER: f64 = 1.0;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal distribution function, `0.5 erfc(-x / sqrt 2)`.
///
/// Every evaluation of the exponential measure goes through this function.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Marginal GEV parameters at one site (and replicate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl GevParams {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("GEV scale must be positive, got {sigma}")));
        }
        if !mu.is_finite() || !xi.is_finite() {
            return Err(Error::Domain(format!("non-finite GEV parameters mu={mu} xi={xi}")));
        }
        Ok(Self { mu, sigma, xi })
    }

    /// Whether `xi` lies in the interval the optimizer admits.
    pub fn is_admissible(&self) -> bool {
        self.xi > XI_LOWER && self.xi <= XI_UPPER
    }

    /// `1 + xi (y - mu) / sigma`, which must be positive inside the support.
    pub fn support_margin(&self, y: f64) -> f64 {
        1.0 + self.xi * (y - self.mu) / self.sigma
    }

    /// Distribution function `exp(-x)^{-1}` in terms of the Fréchet value;
    /// 0 below the lower endpoint and 1 above the upper endpoint.
    pub fn cdf(&self, y: f64) -> f64 {
        match gev_to_frechet(y, self) {
            Ok(x) => (-1.0 / x).exp(),
            Err(_) => {
                if self.xi > 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Quantile function `mu + sigma/xi ((-log p)^{-xi} - 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        let x = -1.0 / p.ln();
        frechet_to_gev(x, self)
    }

    /// Lower endpoint of the support (`-inf` when `xi <= 0`).
    pub fn lower_endpoint(&self) -> f64 {
        if self.xi > 0.0 {
            self.mu - self.sigma / self.xi
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Dependence parameters on the unconstrained scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependenceParams {
    pub omega: f64,
    pub zeta: f64,
}

impl DependenceParams {
    pub fn new(omega: f64, zeta: f64) -> Self {
        Self { omega, zeta }
    }

    /// Smoothness `alpha = 2 exp(omega) / (1 + exp(omega))`.
    pub fn alpha(&self) -> f64 {
        2.0 / (1.0 + (-self.omega).exp())
    }

    /// Range `phi = exp(zeta)`.
    pub fn phi(&self) -> f64 {
        self.zeta.exp()
    }

    /// `(alpha, phi)`.
    pub fn natural_scale(&self) -> (f64, f64) {
        (self.alpha(), self.phi())
    }

    /// Inverse of [`DependenceParams::natural_scale`].
    pub fn from_natural(alpha: f64, phi: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::Domain(format!("alpha must lie in (0, 2), got {alpha}")));
        }
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(Error::Domain(format!("phi must be positive, got {phi}")));
        }
        Ok(Self {
            omega: (alpha / (2.0 - alpha)).ln(),
            zeta: phi.ln(),
        })
    }
}

/// Full stationary parameter vector `(omega, zeta, beta1, beta2, beta3)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaStationary {
    pub omega: f64,
    pub zeta: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub beta3: Vec<f64>,
}

impl ThetaStationary {
    pub fn len(&self) -> usize {
        2 + self.beta1.len() + self.beta2.len() + self.beta3.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dependence(&self) -> DependenceParams {
        DependenceParams::new(self.omega, self.zeta)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.push(self.omega);
        v.push(self.zeta);
        v.extend_from_slice(&self.beta1);
        v.extend_from_slice(&self.beta2);
        v.extend_from_slice(&self.beta3);
        v
    }

    pub fn from_slice(v: &[f64], q1: usize, q2: usize, q3: usize) -> Result<Self> {
        if v.len() != 2 + q1 + q2 + q3 {
            return Err(Error::Config(format!(
                "parameter vector has length {}, expected {}",
                v.len(),
                2 + q1 + q2 + q3
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("non-finite parameter entry".into()));
        }
        Ok(Self {
            omega: v[0],
            zeta: v[1],
            beta1: v[2..2 + q1].to_vec(),
            beta2: v[2 + q1..2 + q1 + q2].to_vec(),
            beta3: v[2 + q1 + q2..].to_vec(),
        })
    }
}

/// Per-pair quantities entering the censored likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLikContext {
    /// `a = sqrt(2 gamma(h))`.
    pub a12: f64,
    /// Thresholds on the unit-Fréchet scale.
    pub u1f: f64,
    pub u2f: f64,
}

impl PairLikContext {
    pub fn new(a12: f64, u1f: f64, u2f: f64) -> Result<Self> {
        if !(a12 > 0.0 && a12.is_finite()) {
            return Err(Error::Domain(format!("a12 must be positive, got {a12}")));
        }
        if !(u1f > 0.0 && u2f > 0.0) {
            return Err(Error::Domain(format!(
                "Fréchet thresholds must be positive, got {u1f}, {u2f}"
            )));
        }
        Ok(Self { a12, u1f, u2f })
    }

    pub fn from_distance(h: f64, dep: &DependenceParams, u1f: f64, u2f: f64) -> Result<Self> {
        let (alpha, phi) = dep.natural_scale();
        let a = (2.0 * semivariogram(h, alpha, phi)?).sqrt();
        Self::new(a, u1f, u2f)
    }
}

/// Isotropic semivariogram `(h / phi)^alpha`.
pub fn semivariogram(h: f64, alpha: f64, phi: f64) -> Result<f64> {
    if !(phi > 0.0) {
        return Err(Error::Domain(format!("phi must be positive, got {phi}")));
    }
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 2], got {alpha}")));
    }
    if !(h >= 0.0) {
        return Err(Error::Domain(format!("distance must be nonnegative, got {h}")));
    }
    Ok((h / phi).powf(alpha))
}

/// Generic `log x` where `x = {1 + xi (y - mu)/sigma}^{1/xi}`, with
/// `sigma = exp(log_sigma)`. Returns `None` outside the support.
///
/// For `|xi| < XI_BRANCH_TOL` the series `z - xi z^2/2 + xi^2 z^3/3` is used;
/// its value is `z` to within `1e-8 z^2` and its first two derivatives in
/// `xi` match the exact expression at zero.
#[inline]
pub fn log_frechet<S: Scalar>(y: f64, mu: S, log_sigma: S, xi: S) -> Option<S> {
    let z = (-mu + y) / log_sigma.exp();
    if xi.value().abs() < XI_BRANCH_TOL {
        let z2 = z * z;
        Some(z - xi * z2 * 0.5 + xi * xi * z2 * z / 3.0)
    } else {
        let t = xi * z;
        if !(t.value() > -1.0) {
            return None;
        }
        Some(t.ln_1p() / xi)
    }
}

/// State of one site within a pair: exceeding (with its Jacobian) or censored
/// at its threshold. `log_x` holds `log x` or `log u_f` respectively.
#[derive(Debug, Clone, Copy)]
pub struct SiteState<S> {
    pub log_x: S,
    pub log_jac: S,
    pub exceeds: bool,
}

impl<S: Scalar> SiteState<S> {
    /// Exceedance at `y`. `None` on a support violation.
    pub fn exceed(y: f64, mu: S, log_sigma: S, xi: S) -> Option<Self> {
        let log_x = log_frechet(y, mu, log_sigma, xi)?;
        let log_jac = (-xi + 1.0) * log_x - log_sigma;
        Some(Self {
            log_x,
            log_jac,
            exceeds: true,
        })
    }

    /// Censored at threshold `u`. `None` on a support violation.
    pub fn censored(u: f64, mu: S, log_sigma: S, xi: S) -> Option<Self> {
        let log_x = log_frechet(u, mu, log_sigma, xi)?;
        Some(Self {
            log_x,
            log_jac: S::constant(0.0),
            exceeds: false,
        })
    }

    pub fn map<T>(&self, f: impl Fn(S) -> T) -> SiteState<T> {
        SiteState {
            log_x: f(self.log_x),
            log_jac: f(self.log_jac),
            exceeds: self.exceeds,
        }
    }
}

/// `a = sqrt(2 (h/phi)^alpha)` from `(omega, zeta)`; `h > 0`.
#[inline]
pub fn dependence_scalar<S: Scalar>(h: f64, omega: S, zeta: S) -> S {
    let alpha = ((-omega).exp() + 1.0).recip() * 2.0;
    ((-zeta + h.ln()) * alpha).exp().sqrt() * std::f64::consts::SQRT_2
}

/// Log of the four-case censored pair contribution `g`.
#[inline]
pub fn pair_log_g<S: Scalar>(a: S, s1: &SiteState<S>, s2: &SiteState<S>) -> S {
    let lr = s1.log_x - s2.log_x;
    let w1 = a * 0.5 - lr / a;
    let w2 = a - w1;
    let c1 = w1.norm_cdf();
    let c2 = w2.norm_cdf();
    let inv_x1 = (-s1.log_x).exp();
    let inv_x2 = (-s2.log_x).exp();
    let v = c1 * inv_x1 + c2 * inv_x2;
    match (s1.exceeds, s2.exceeds) {
        (true, true) => {
            // -V + log(V1 V2 - V12) + log J1 + log J2, with
            // V1 V2 - V12 = x1^-2 x2^-1 {Phi(w1)Phi(w2)/x2 + phi(w1)/a}.
            let inner = c1 * c2 * inv_x2 + w1.norm_pdf() / a;
            -v + inner.ln() - s1.log_x * 2.0 - s2.log_x + s1.log_jac + s2.log_jac
        }
        (true, false) => -v + c1.ln() - s1.log_x * 2.0 + s1.log_jac,
        (false, true) => -v + c2.ln() - s2.log_x * 2.0 + s2.log_jac,
        (false, false) => -v,
    }
}

fn check_support(y: f64, g: &GevParams) -> Result<()> {
    let m = g.support_margin(y);
    if !(m > 0.0) && g.xi.abs() >= XI_BRANCH_TOL {
        return Err(Error::Support {
            site: None,
            value: y,
            margin: m,
        });
    }
    Ok(())
}

/// Map a GEV observation to the unit-Fréchet scale.
pub fn gev_to_frechet(y: f64, g: &GevParams) -> Result<f64> {
    check_support(y, g)?;
    let lx = log_frechet(y, g.mu, g.sigma.ln(), g.xi).ok_or(Error::Support {
        site: None,
        value: y,
        margin: g.support_margin(y),
    })?;
    Ok(lx.exp())
}

/// Inverse of [`gev_to_frechet`]: `mu + sigma/xi (x^xi - 1)`.
pub fn frechet_to_gev(x: f64, g: &GevParams) -> f64 {
    if g.xi.abs() < XI_BRANCH_TOL {
        g.mu + g.sigma * x.ln()
    } else {
        g.mu + g.sigma / g.xi * (x.powf(g.xi) - 1.0)
    }
}

/// `dx/dy = x^{1 - xi} / sigma`.
pub fn frechet_jacobian(y: f64, g: &GevParams) -> Result<f64> {
    let x = gev_to_frechet(y, g)?;
    Ok(x.powf(1.0 - g.xi) / g.sigma)
}

fn check_positive(x1: f64, x2: f64) -> Result<()> {
    if !(x1 > 0.0 && x2 > 0.0) {
        return Err(Error::Domain(format!(
            "exponential measure needs positive arguments, got ({x1}, {x2})"
        )));
    }
    Ok(())
}

/// Brown-Resnick bivariate exponential measure `V(x1, x2)`.
pub fn exponential_measure(x1: f64, x2: f64, ctx: &PairLikContext) -> Result<f64> {
    check_positive(x1, x2)?;
    let a = ctx.a12;
    let w1 = a / 2.0 - (x1 / x2).ln() / a;
    let w2 = a / 2.0 - (x2 / x1).ln() / a;
    Ok(normal_cdf(w1) / x1 + normal_cdf(w2) / x2)
}

/// `(dV/dx1, dV/dx2, d2V/dx1dx2)`.
pub fn exponential_measure_partials(
    x1: f64,
    x2: f64,
    ctx: &PairLikContext,
) -> Result<(f64, f64, f64)> {
    check_positive(x1, x2)?;
    let a = ctx.a12;
    let w1 = a / 2.0 - (x1 / x2).ln() / a;
    let w2 = a - w1;
    let v1 = -normal_cdf(w1) / (x1 * x1);
    let v2 = -normal_cdf(w2) / (x2 * x2);
    let v12 = -normal_pdf(w1) / (a * x1 * x1 * x2);
    Ok((v1, v2, v12))
}

/// Bivariate density `exp(-V) (V1 V2 - V12)` on the unit-Fréchet scale.
pub fn bivariate_density(x1: f64, x2: f64, ctx: &PairLikContext) -> Result<f64> {
    let v = exponential_measure(x1, x2, ctx)?;
    let (v1, v2, v12) = exponential_measure_partials(x1, x2, ctx)?;
    Ok((-v).exp() * (v1 * v2 - v12))
}

/// Log censored pair likelihood for data-scale observations `y1, y2`,
/// data-scale thresholds `u1, u2` and sites separated by `h`.
///
/// An observation equal to its threshold counts as censored.
#[allow(clippy::too_many_arguments)]
pub fn censored_pair_loglik(
    y1: f64,
    y2: f64,
    g1: &GevParams,
    g2: &GevParams,
    u1: f64,
    u2: f64,
    dep: &DependenceParams,
    h: f64,
) -> Result<f64> {
    let state = |y: f64, u: f64, g: &GevParams, site: usize| -> Result<SiteState<f64>> {
        let with_site = |e: Error| match e {
            Error::Support { value, margin, .. } => Error::Support {
                site: Some(site),
                value,
                margin,
            },
            other => other,
        };
        check_support(u, g).map_err(with_site)?;
        if y > u {
            check_support(y, g).map_err(with_site)?;
            SiteState::exceed(y, g.mu, g.sigma.ln(), g.xi)
        } else {
            SiteState::censored(u, g.mu, g.sigma.ln(), g.xi)
        }
        .ok_or(Error::Support {
            site: Some(site),
            value: y,
            margin: g.support_margin(y),
        })
    };
    let s1 = state(y1, u1, g1, 0)?;
    let s2 = state(y2, u2, g2, 1)?;
    let (alpha, phi) = dep.natural_scale();
    let a = (2.0 * semivariogram(h, alpha, phi)?).sqrt();
    if !(a > 0.0) {
        return Err(Error::Domain("coincident sites: pair distance must be positive".into()));
    }
    Ok(pair_log_g(a, &s1, &s2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn semivariogram_examples() {
        assert_eq!(semivariogram(10.0, 1.0, 10.0).unwrap(), 1.0);
        assert_eq!(semivariogram(0.0, 1.5, 3.0).unwrap(), 0.0);
        assert!((semivariogram(5.0, 2.0, 10.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(semivariogram(1.0, 1.0, 0.0).is_err());
        assert!(semivariogram(1.0, 2.5, 1.0).is_err());
        assert!(semivariogram(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn frechet_transform_examples() {
        let g = GevParams::new(1.0, 2.0, 0.5).unwrap();
        assert!((gev_to_frechet(1.0, &g).unwrap() - 1.0).abs() < 1e-15);
        assert!((gev_to_frechet(3.0, &g).unwrap() - 2.25).abs() < 1e-14);
        let g0 = GevParams::new(1.0, 2.0, 1e-10).unwrap();
        assert!((gev_to_frechet(2.0, &g0).unwrap() - 0.5f64.exp()).abs() < 1e-9);
        assert!((frechet_jacobian(3.0, &g).unwrap() - 0.75).abs() < 1e-14);
        assert!((frechet_jacobian(1.0, &g).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn support_violation_is_reported() {
        let g = GevParams::new(0.0, 1.0, 0.5).unwrap();
        // Lower endpoint is -2.
        match gev_to_frechet(-3.0, &g) {
            Err(Error::Support { value, .. }) => assert_eq!(value, -3.0),
            other => panic!("expected support error, got {other:?}"),
        }
        let dep = DependenceParams::new(0.0, 0.0);
        let r = censored_pair_loglik(1.0, 1.0, &g, &g, -2.5, 0.5, &dep, 1.0);
        assert!(matches!(r, Err(Error::Support { site: Some(0), .. })));
    }

    #[test]
    fn natural_scale_examples() {
        assert!((DependenceParams::new(0.0, 0.0).alpha() - 1.0).abs() < 1e-15);
        assert!((DependenceParams::new(0.0, 10f64.ln()).phi() - 10.0).abs() < 1e-12);
        let d = DependenceParams::from_natural(0.8, 10.0).unwrap();
        assert!((d.omega - (0.8f64 / 1.2).ln()).abs() < 1e-15);
        assert!((d.omega + 0.405_465_108_108_164_4).abs() < 1e-12);
        assert!(DependenceParams::from_natural(2.0, 1.0).is_err());
        assert!(DependenceParams::from_natural(1.0, 0.0).is_err());
    }

    #[test]
    fn exponential_measure_examples() {
        let ctx = PairLikContext::new(1.0, 1.0, 1.0).unwrap();
        // 2 Phi(0.5), Phi(0.5) = 0.691462461274013103637704610608...
        let v11 = exponential_measure(1.0, 1.0, &ctx).unwrap();
        assert!((v11 - 1.382_924_922_548_026_2).abs() < 1e-13);
        let v22 = exponential_measure(2.0, 2.0, &ctx).unwrap();
        assert!((v22 - v11 / 2.0).abs() < 1e-15);
        assert!((exponential_measure(1.0, 1e12, &ctx).unwrap() - 1.0).abs() < 1e-6);
        assert!(exponential_measure(0.0, 1.0, &ctx).is_err());
    }

    #[test]
    fn partials_limits_and_symmetry() {
        let ctx = PairLikContext::new(0.7, 1.0, 1.0).unwrap();
        let (v1, v2, _) = exponential_measure_partials(1.3, 1.3, &ctx).unwrap();
        assert!((v1 - v2).abs() < 1e-15);
        let (v1, _, _) = exponential_measure_partials(1.0, 1e12, &ctx).unwrap();
        assert!((v1 + 1.0).abs() < 1e-6);
    }

    #[test]
    fn both_censored_equals_minus_v() {
        // u = mu gives u_f = 1.
        let g = GevParams::new(0.0, 1.0, 0.2).unwrap();
        let dep = DependenceParams::new(0.0, 0.0);
        // alpha = 1, phi = 1, h = 0.5 -> a = 1.
        let l = censored_pair_loglik(-1.0, -0.5, &g, &g, 0.0, 0.0, &dep, 0.5).unwrap();
        assert!((l + 1.382_924_922_548_026_2).abs() < 1e-13);
    }

    #[test]
    fn tie_at_threshold_is_censored() {
        let g = GevParams::new(0.0, 1.0, 0.2).unwrap();
        let dep = DependenceParams::new(0.0, 0.0);
        let tie = censored_pair_loglik(0.0, 0.0, &g, &g, 0.0, 0.0, &dep, 0.5).unwrap();
        let below = censored_pair_loglik(-3.0, -1.0, &g, &g, 0.0, 0.0, &dep, 0.5).unwrap();
        assert_eq!(tie, below);
    }
}
