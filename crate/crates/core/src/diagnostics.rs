//! Goodness-of-fit and return-level summaries of fitted GEV margins.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ad::{Grad, Scalar};
use crate::error::{Error, Result};
use crate::extremes::{log_frechet, GevParams};
use crate::gmm::ParamLayout;
use crate::model::MarginalDesign;
use crate::stats::{ks_test, KsResult};

/// Bisection stops once the bracket is this small relative to its midpoint.
const ROOT_RTOL: f64 = 1e-14;
const MAX_BISECTIONS: usize = 300;
const MAX_EXPANSIONS: usize = 60;

/// Sparse gradient of one linear predictor in the parameter vector.
type Row = Vec<(usize, f64)>;

/// Marginal GEV parameters at every replicate and site together with their
/// linear dependence on the parameter vector and its covariance.
#[derive(Debug, Clone)]
pub struct FittedMargins {
    reps: usize,
    sites: usize,
    /// `(mu, log sigma, xi)` replicate-major.
    params: Vec<[f64; 3]>,
    rows: Vec<[Row; 3]>,
    covariance: DMatrix<f64>,
}

fn predictor(z: &[f64], idx: &[usize], theta: &[f64]) -> (f64, Row) {
    let row: Row = idx.iter().copied().zip(z.iter().copied()).collect();
    (row.iter().map(|&(g, a)| a * theta[g]).sum(), row)
}

impl FittedMargins {
    /// One design over all sites with the stationary parameter vector.
    pub fn stationary(theta: &[f64], covariance: DMatrix<f64>, design: &MarginalDesign) -> Result<Self> {
        let d = design.sites();
        let layout = ParamLayout::shared(1, theta.len());
        Self::blockwise(theta, covariance, &[design], &[(0..d).collect()], &layout)
    }

    /// Block designs whose parameters sit at `layout`'s positions.
    /// `sites[k]` lists block `k`'s global site ids; together they must cover
    /// `0..d` exactly once.
    pub fn blockwise(
        theta: &[f64],
        covariance: DMatrix<f64>,
        designs: &[&MarginalDesign],
        sites: &[Vec<usize>],
        layout: &ParamLayout,
    ) -> Result<Self> {
        let d: usize = sites.iter().map(Vec::len).sum();
        if covariance.nrows() != theta.len() || covariance.ncols() != theta.len() {
            return Err(Error::Config("covariance does not match the parameter vector".into()));
        }
        if theta.len() != layout.full_dim() || designs.len() != layout.num_blocks() || sites.len() != designs.len() {
            return Err(Error::Config("designs, sites and layout disagree".into()));
        }
        let reps = designs.iter().map(|g| g.reps()).max().unwrap_or(1);
        let mut owner = vec![None; d];
        for (k, s) in sites.iter().enumerate() {
            if designs[k].sites() != s.len() || (designs[k].reps() != 1 && designs[k].reps() != reps) {
                return Err(Error::Config(format!("block {k}: design shape disagrees")));
            }
            for (j, &g) in s.iter().enumerate() {
                match owner.get_mut(g) {
                    Some(o @ None) => *o = Some((k, j)),
                    _ => return Err(Error::Config(format!("site {g} missing or assigned twice"))),
                }
            }
        }
        let mut params = Vec::with_capacity(reps * d);
        let mut rows = Vec::with_capacity(reps * d);
        for rep in 0..reps {
            for o in &owner {
                let (k, j) = o.expect("every site owned");
                let map = layout.map(k);
                let design = designs[k];
                let (q1, q2, _) = design.dims();
                let (mu, r1) = predictor(design.location.row(rep, j), &map[2..2 + q1], theta);
                let (ls, r2) = predictor(design.log_scale.row(rep, j), &map[2 + q1..2 + q1 + q2], theta);
                let (xi, r3) = predictor(design.shape.row(rep, j), &map[2 + q1 + q2..], theta);
                params.push([mu, ls, xi]);
                rows.push([r1, r2, r3]);
            }
        }
        Ok(Self {
            reps,
            sites: d,
            params,
            rows,
            covariance,
        })
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    /// Number of distinct replicate slices (1 for static covariates).
    pub fn reps(&self) -> usize {
        self.reps
    }

    fn index(&self, rep: usize, site: usize) -> usize {
        let r = if self.reps == 1 { 0 } else { rep };
        r * self.sites + site
    }

    pub fn gev(&self, rep: usize, site: usize) -> GevParams {
        let [mu, ls, xi] = self.params[self.index(rep, site)];
        GevParams {
            mu,
            sigma: ls.exp(),
            xi,
        }
    }
}

/// Observation outside the fitted support.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportFlag {
    BelowLower,
    AboveUpper,
}

#[derive(Debug, Clone)]
pub struct PitValues {
    /// `n x d` fitted distribution function values.
    pub values: DMatrix<f64>,
    /// `(replicate, site, flag)` for observations outside the support.
    pub flags: Vec<(usize, usize, SupportFlag)>,
}

impl PitValues {
    /// Kolmogorov-Smirnov test of all values against Uniform(0, 1).
    pub fn uniformity(&self) -> KsResult {
        ks_test(self.values.as_slice(), |u| u.clamp(0.0, 1.0))
    }
}

/// `U = F(y)` for every observation under the fitted margins.
pub fn pit_values(margins: &FittedMargins, obs: &DMatrix<f64>) -> Result<PitValues> {
    if obs.ncols() != margins.sites() || (margins.reps() != 1 && margins.reps() != obs.nrows()) {
        return Err(Error::Config("observations do not match the fitted margins".into()));
    }
    let mut flags = Vec::new();
    let values = DMatrix::from_fn(obs.nrows(), obs.ncols(), |i, j| {
        let g = margins.gev(i, j);
        let y = obs[(i, j)];
        if g.support_margin(y) <= 0.0 {
            let flag = if g.xi > 0.0 {
                SupportFlag::BelowLower
            } else {
                SupportFlag::AboveUpper
            };
            flags.push((i, j, flag));
        }
        g.cdf(y)
    });
    if !flags.is_empty() {
        log::warn!("{} observations lie outside the fitted support", flags.len());
    }
    Ok(PitValues { values, flags })
}

/// Return level with its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnLevel {
    pub years: f64,
    pub level: f64,
    pub se: f64,
}

/// `log F(y)` and its derivatives in `y` and `(mu, log sigma, xi)`.
fn log_cdf_parts(y: f64, p: [f64; 3]) -> (f64, f64, [f64; 3]) {
    let mu = Grad::<3>::var(p[0], 0);
    let ls = Grad::<3>::var(p[1], 1);
    let xi = Grad::<3>::var(p[2], 2);
    match log_frechet(y, mu, ls, xi) {
        Some(lx) => {
            let lf = -(-lx).exp();
            let log_jac = (1.0 - p[2]) * lx.value() - p[1];
            (lf.v, (log_jac - 2.0 * lx.value()).exp(), lf.g)
        }
        None if p[2] > 0.0 => (f64::NEG_INFINITY, 0.0, [0.0; 3]),
        None => (0.0, 0.0, [0.0; 3]),
    }
}

/// Level exceeded once every `years` years on average, where a year
/// consists of replicates `first..first + per_year` and the annual maximum
/// has distribution `prod_i F_i`. Values are on the fitted scale.
pub fn return_level(
    margins: &FittedMargins,
    site: usize,
    years: f64,
    first: usize,
    per_year: usize,
) -> Result<ReturnLevel> {
    if !(years > 1.0) || !years.is_finite() {
        return Err(Error::Config(format!("return period must exceed one year, got {years}")));
    }
    if per_year == 0 || site >= margins.sites() {
        return Err(Error::Config("invalid site or replicates per year".into()));
    }
    if margins.reps() != 1 && first + per_year > margins.reps() {
        return Err(Error::Config(format!(
            "replicates {first}..{} exceed the {} available",
            first + per_year,
            margins.reps()
        )));
    }
    let months: Vec<usize> = (first..first + per_year).map(|r| margins.index(r, site)).collect();
    let target = (1.0 - 1.0 / years).ln();
    let excess = |y: f64| months.iter().map(|&m| log_cdf_parts(y, margins.params[m]).0).sum::<f64>() - target;

    let per_month = (target / per_year as f64).exp();
    let qs: Vec<f64> = months
        .iter()
        .map(|&m| {
            let [mu, ls, xi] = margins.params[m];
            GevParams { mu, sigma: ls.exp(), xi }.quantile(per_month)
        })
        .collect();
    let mut lo = qs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = if lo == hi && lo.is_finite() {
        lo
    } else {
        let center = qs.iter().copied().filter(|q| q.is_finite()).sum::<f64>() / qs.len() as f64;
        let mut step = center.abs().max(1.0);
        if !lo.is_finite() || excess(lo) > 0.0 {
            lo = if hi.is_finite() { hi } else { center };
            let mut k = 0;
            while !(excess(lo) <= 0.0) {
                lo -= step;
                step *= 2.0;
                k += 1;
                if k > MAX_EXPANSIONS {
                    return Err(Error::Numerical(format!("no lower bracket for the {years}-year level")));
                }
            }
        }
        step = center.abs().max(1.0);
        if !hi.is_finite() || excess(hi) < 0.0 {
            hi = lo;
            let mut k = 0;
            while !(excess(hi) >= 0.0) {
                hi += step;
                step *= 2.0;
                k += 1;
                if k > MAX_EXPANSIONS {
                    return Err(Error::Numerical(format!("no upper bracket for the {years}-year level")));
                }
            }
        }
        for _ in 0..MAX_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= ROOT_RTOL * mid.abs().max(1e-300) || mid == lo || mid == hi {
                break;
            }
            if excess(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };

    let p = margins.covariance.nrows();
    let mut grad = vec![0.0; p];
    let mut slope = 0.0;
    for &m in &months {
        let (_, dy, dpar) = log_cdf_parts(level, margins.params[m]);
        slope += dy;
        for (c, row) in margins.rows[m].iter().enumerate() {
            for &(g, a) in row {
                grad[g] += dpar[c] * a;
            }
        }
    }
    let var = if slope > 0.0 {
        let mut v = 0.0;
        for a in 0..p {
            for b in 0..p {
                v += grad[a] * grad[b] * margins.covariance[(a, b)];
            }
        }
        v.max(0.0) / (slope * slope)
    } else {
        f64::NAN
    };
    Ok(ReturnLevel {
        years,
        level,
        se: var.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Covariates;

    fn unit_frechet(sites: usize) -> FittedMargins {
        FittedMargins::stationary(&[0.0, 0.0, 1.0, 0.0, 1.0], DMatrix::zeros(5, 5), &MarginalDesign::intercepts(sites))
            .unwrap()
    }

    #[test]
    fn closed_form_unit_frechet_level() {
        let m = unit_frechet(2);
        let r = return_level(&m, 1, 50.0, 0, 12).unwrap();
        let expected = -12.0 / (0.98f64).ln();
        assert!((r.level - expected).abs() < 1e-6, "{} vs {expected}", r.level);
        assert!((expected - 593.98).abs() < 5e-3);
    }

    #[test]
    fn identical_months_match_power_identity() {
        let theta = [0.0, 0.0, 3.0, 0.4, -0.2];
        let m = FittedMargins::stationary(&theta, DMatrix::zeros(5, 5), &MarginalDesign::intercepts(1)).unwrap();
        let g = GevParams::new(3.0, 0.4f64.exp(), -0.2).unwrap();
        for r in [2.0f64, 10.0, 100.0] {
            let want = g.quantile((1.0 - 1.0 / r).powf(1.0 / 12.0));
            let got = return_level(&m, 0, r, 0, 12).unwrap().level;
            assert!((got - want).abs() < 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn varying_months_solve_product_equation() {
        let d = 1;
        let vals: Vec<f64> = (0..12).map(|i| (i as f64 * 0.5).sin()).collect();
        let loc = Covariates::time_varying(12, d, 2, vals.iter().flat_map(|v| [1.0, *v]).collect()).unwrap();
        let design = MarginalDesign::new(loc, Covariates::intercept(d), Covariates::intercept(d)).unwrap();
        let theta = [0.0, 0.0, 2.0, 1.5, 0.1, 0.15];
        let m = FittedMargins::stationary(&theta, DMatrix::identity(6, 6) * 0.01, &design).unwrap();
        let r = return_level(&m, 0, 20.0, 0, 12).unwrap();
        let prod: f64 = (0..12).map(|i| m.gev(i, 0).cdf(r.level)).product();
        assert!((prod - 0.95).abs() < 1e-10);
        assert!(r.se > 0.0 && r.se.is_finite());
        let longer = return_level(&m, 0, 40.0, 0, 12).unwrap();
        assert!(longer.level > r.level);
    }

    #[test]
    fn delta_method_matches_finite_differences() {
        let theta = [0.0, 0.0, 2.0, 0.3, 0.1];
        let cov = DMatrix::from_fn(5, 5, |i, j| if i == j { 0.02 * (i + 1) as f64 } else { 0.003 });
        let design = MarginalDesign::intercepts(1);
        let m = FittedMargins::stationary(&theta, cov.clone(), &design).unwrap();
        let r = return_level(&m, 0, 25.0, 0, 12).unwrap();
        let h = 1e-6;
        let mut g = vec![0.0; 5];
        for k in 2..5 {
            let mut tp = theta;
            let mut tm = theta;
            tp[k] += h;
            tm[k] -= h;
            let fp = FittedMargins::stationary(&tp, cov.clone(), &design).unwrap();
            let fm = FittedMargins::stationary(&tm, cov.clone(), &design).unwrap();
            g[k] = (return_level(&fp, 0, 25.0, 0, 12).unwrap().level - return_level(&fm, 0, 25.0, 0, 12).unwrap().level)
                / (2.0 * h);
        }
        let mut v = 0.0;
        for a in 0..5 {
            for b in 0..5 {
                v += g[a] * g[b] * cov[(a, b)];
            }
        }
        assert!((v.sqrt() - r.se).abs() < 1e-5 * r.se, "{} vs {}", v.sqrt(), r.se);
    }

    #[test]
    fn near_one_year_tends_to_lower_endpoint() {
        let m = unit_frechet(1);
        let r = return_level(&m, 0, 1.0 + 1e-9, 0, 12).unwrap();
        assert!(r.level < 0.7 && r.level > 0.0, "{}", r.level);
        assert!(return_level(&m, 0, 1.0, 0, 12).is_err());
    }

    #[test]
    fn pit_at_median_and_below_support() {
        let m = FittedMargins::stationary(&[0.0, 0.0, 1.0, 0.0, 0.5], DMatrix::zeros(5, 5), &MarginalDesign::intercepts(2))
            .unwrap();
        let g = m.gev(0, 0);
        let obs = DMatrix::from_row_slice(1, 2, &[g.quantile(0.5), -5.0]);
        let pit = pit_values(&m, &obs).unwrap();
        assert!((pit.values[(0, 0)] - 0.5).abs() < 1e-12);
        assert_eq!(pit.values[(0, 1)], 0.0);
        assert_eq!(pit.flags, vec![(0, 1, SupportFlag::BelowLower)]);
    }
}
