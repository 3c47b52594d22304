//! Spatially varying coefficients: per-block radial basis expansions of the
//! location and log-scale, the penalized meta-estimator, GCV selection of
//! the penalties and reconstruction of the fitted fields.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{ParamLayout, Penalty};
use crate::local_fit::{fit_block_auto, fit_block_from, BlockFitResult};
use crate::model::{BlockData, MarginalDesign};
use crate::optim::OptimOptions;
use crate::simulate::distance;

/// Default kernel scale `c` in `C(d) = exp(-c d^2)`.
pub const DEFAULT_KERNEL_SCALE: f64 = 0.05;
/// Upper bound on the default number of knots per block.
pub const MAX_DEFAULT_KNOTS: usize = 10;
/// Singular-value ratio below which a basis is declared rank deficient.
const RANK_TOL: f64 = 1e-10;

/// Default knot count: `ceil(d_k / 2.5)`, at most 10.
pub fn default_knot_count(block_size: usize) -> usize {
    ((block_size as f64 / 2.5).ceil() as usize).min(MAX_DEFAULT_KNOTS)
}

/// Greedy farthest-point knot selection seeded at the site nearest the
/// centroid. Returns indices into `sites`.
pub fn select_knots(sites: &[[f64; 2]], count: usize) -> Result<Vec<usize>> {
    if count > sites.len() {
        return Err(Error::Config(format!(
            "{count} knots requested for a block of {} sites",
            sites.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let n = sites.len() as f64;
    let centroid = [
        sites.iter().map(|s| s[0]).sum::<f64>() / n,
        sites.iter().map(|s| s[1]).sum::<f64>() / n,
    ];
    let argbest = |score: &dyn Fn(usize) -> f64| -> usize {
        let mut best = 0;
        for i in 1..sites.len() {
            if score(i) > score(best) {
                best = i;
            }
        }
        best
    };
    let seed = argbest(&|i| -distance(&sites[i], &centroid));
    let mut chosen = vec![seed];
    let mut mind: Vec<f64> = sites.iter().map(|s| distance(s, &sites[seed])).collect();
    while chosen.len() < count {
        let next = argbest(&|i| mind[i]);
        chosen.push(next);
        for (i, s) in sites.iter().enumerate() {
            mind[i] = mind[i].min(distance(s, &sites[next]));
        }
    }
    Ok(chosen)
}

/// Basis of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    /// Include the `s1, s2` columns after the intercept.
    pub linear: bool,
    pub knots: Vec<[f64; 2]>,
    pub kernel_scale: f64,
}

impl BasisSpec {
    /// Intercept column only.
    pub fn intercept_only() -> Self {
        Self {
            linear: false,
            knots: Vec::new(),
            kernel_scale: DEFAULT_KERNEL_SCALE,
        }
    }

    /// `[1, s1, s2, C(|s - k_1|), ...]` with knots chosen from `sites`.
    pub fn for_block(sites: &[[f64; 2]], knots: Option<usize>) -> Result<Self> {
        let count = knots.unwrap_or_else(|| default_knot_count(sites.len()));
        let idx = select_knots(sites, count)?;
        Ok(Self {
            linear: true,
            knots: idx.iter().map(|&i| sites[i]).collect(),
            kernel_scale: DEFAULT_KERNEL_SCALE,
        })
    }

    pub fn num_columns(&self) -> usize {
        1 + if self.linear { 2 } else { 0 } + self.knots.len()
    }

    pub fn row(&self, s: &[f64; 2]) -> Vec<f64> {
        let mut r = Vec::with_capacity(self.num_columns());
        r.push(1.0);
        if self.linear {
            r.push(s[0]);
            r.push(s[1]);
        }
        for k in &self.knots {
            let d = distance(s, k);
            r.push((-self.kernel_scale * d * d).exp());
        }
        r
    }
}

/// Basis evaluated at the block's sites, one row per site.
pub fn basis_matrix(sites: &[[f64; 2]], spec: &BasisSpec) -> Result<DMatrix<f64>> {
    let j = spec.num_columns();
    let rows: Vec<Vec<f64>> = sites.iter().map(|s| spec.row(s)).collect();
    let b = DMatrix::from_fn(sites.len(), j, |r, c| rows[r][c]);
    if sites.len() < j {
        return Err(Error::Config(format!(
            "basis has {j} columns but the block has only {} sites; use fewer knots",
            sites.len()
        )));
    }
    let sv = b.clone().svd(false, false).singular_values;
    let (max, min) = (sv.max(), sv.min());
    if !(min > RANK_TOL * max) {
        return Err(Error::Config(format!(
            "basis with {} knots is rank deficient on its block; use fewer knots",
            spec.knots.len()
        )));
    }
    Ok(b)
}

/// Expand a block's location and log-scale covariates by its basis.
pub fn svc_design(base: &MarginalDesign, basis: &DMatrix<f64>) -> MarginalDesign {
    MarginalDesign {
        location: base.location.expand(basis),
        log_scale: base.log_scale.expand(basis),
        shape: base.shape.clone(),
    }
}

/// Same observations with the expanded varying-coefficient design.
pub fn svc_block_data(data: &BlockData, spec: &BasisSpec) -> Result<BlockData> {
    let b = basis_matrix(&data.coords, spec)?;
    BlockData::new(
        data.block_id,
        data.sites.clone(),
        data.coords.clone(),
        data.obs.clone(),
        svc_design(&data.design, &b),
        data.thresholds.clone(),
    )
}

/// Fit one block with `(omega, zeta, eta1_k, eta2_k, beta3)`. `data` holds
/// the unexpanded covariates.
pub fn fit_block_svc(
    data: &BlockData,
    spec: &BasisSpec,
    init: Option<&[f64]>,
    opts: &OptimOptions,
) -> Result<BlockFitResult> {
    let expanded = svc_block_data(data, spec)?;
    match init {
        Some(t) => fit_block_from(&expanded, t, opts),
        None => fit_block_auto(&expanded, opts),
    }
}

/// Layout of the varying-coefficient parameter vector
/// `(omega, zeta, eta_1, ..., eta_K, beta3)` for blocks with the given
/// expanded designs.
pub fn svc_layout(designs: &[&MarginalDesign]) -> ParamLayout {
    let eta: Vec<usize> = designs
        .iter()
        .map(|d| {
            let (a, b, _) = d.dims();
            a + b
        })
        .collect();
    let q3 = designs.first().map_or(0, |d| d.dims().2);
    ParamLayout::varying(&eta, q3)
}

/// Full-vector positions of each block's `eta1` and `eta2` coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EtaPositions {
    pub eta1: Vec<Vec<usize>>,
    pub eta2: Vec<Vec<usize>>,
}

pub fn eta_positions(designs: &[&MarginalDesign], layout: &ParamLayout) -> EtaPositions {
    let mut eta1 = Vec::new();
    let mut eta2 = Vec::new();
    for (k, d) in designs.iter().enumerate() {
        let (a, b, _) = d.dims();
        let map = layout.map(k);
        eta1.push(map[2..2 + a].to_vec());
        eta2.push(map[2 + a..2 + a + b].to_vec());
    }
    EtaPositions { eta1, eta2 }
}

/// Ridge penalties on `eta1` and `eta2` with the grid searched by GCV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub grid1: Vec<f64>,
    pub grid2: Vec<f64>,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            grid1: vec![0.0, 0.05, 0.1],
            grid2: vec![0.0, 0.05, 0.1],
        }
    }
}

impl PenaltyConfig {
    pub fn fixed(lambda1: f64, lambda2: f64) -> Self {
        Self {
            lambda1,
            lambda2,
            grid1: vec![lambda1],
            grid2: vec![lambda2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2]
            .into_iter()
            .chain(self.grid1.iter().copied())
            .chain(self.grid2.iter().copied());
        for v in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("penalty {v} must be nonnegative")));
            }
        }
        if self.grid1.is_empty() || self.grid2.is_empty() {
            return Err(Error::Config("penalty grid must be nonempty".into()));
        }
        Ok(())
    }

    /// Grid points in row-major order over `(grid1, grid2)`.
    pub fn grid(&self) -> Vec<(f64, f64)> {
        let mut g = Vec::new();
        for &a in &self.grid1 {
            for &b in &self.grid2 {
                g.push((a, b));
            }
        }
        g
    }
}

/// Diagonal penalty with `lambda1` at every `eta1` position and `lambda2`
/// at every `eta2` position.
pub fn penalty_vector(full_dim: usize, pos: &EtaPositions, lambda1: f64, lambda2: f64) -> Penalty {
    let mut v = DVector::zeros(full_dim);
    for p in pos.eta1.iter().flatten() {
        v[*p] = lambda1;
    }
    for p in pos.eta2.iter().flatten() {
        v[*p] = lambda2;
    }
    v
}

/// Generalized cross-validation statistic
/// `[n^{-1} sum Psi_k' W_k Psi_k] / (1 - n^{-1} tr[H^{-1} sum Pi_k])^2`.
pub fn gcv(
    psi_bars: &[DVector<f64>],
    sens: &[DMatrix<f64>],
    weights: &[DMatrix<f64>],
    layout: &ParamLayout,
    penalty: &Penalty,
    n: usize,
) -> Result<f64> {
    let nf = n as f64;
    let numer: f64 = psi_bars
        .iter()
        .zip(weights)
        .map(|(p, w)| (p.transpose() * w * p)[(0, 0)])
        .sum::<f64>()
        / nf;
    let trace = gcv_trace(sens, weights, layout, penalty)?;
    let denom = 1.0 - trace / nf;
    if !(denom > 0.0) {
        return Err(Error::Numerical(format!(
            "effective degrees of freedom {trace:.2} reach the sample size {n}"
        )));
    }
    Ok(numer / (denom * denom))
}

/// `tr[{sum Pi_k + Lambda}^{-1} sum Pi_k]`, the effective number of
/// parameters.
pub fn gcv_trace(
    sens: &[DMatrix<f64>],
    weights: &[DMatrix<f64>],
    layout: &ParamLayout,
    penalty: &Penalty,
) -> Result<f64> {
    let pdim = layout.full_dim();
    let mut pi = DMatrix::zeros(pdim, pdim);
    for (k, (i_k, w_k)) in sens.iter().zip(weights).enumerate() {
        let padded = layout.pad(k, i_k)?;
        pi += padded.transpose() * w_k * &padded;
    }
    let mut h = pi.clone();
    for i in 0..pdim {
        h[(i, i)] += penalty[i];
    }
    let sol = h
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&pi))
        .or_else(|| h.lu().solve(&pi))
        .ok_or_else(|| Error::Numerical("penalized normal matrix is singular; increase the penalty".into()))?;
    Ok(sol.trace())
}

/// Fitted location and log-scale with standard errors at each site.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldEstimates {
    pub site: Vec<usize>,
    pub mu: Vec<f64>,
    pub mu_se: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub log_sigma_se: Vec<f64>,
}

/// Reconstruct `mu(s)` and `log sigma(s)` for replicate `rep` from the
/// integrated estimate and covariance. `designs[k]` is block `k`'s expanded
/// design; `sites[k]` its global site ids.
pub fn reconstruct_fields(
    theta: &[f64],
    cov: &DMatrix<f64>,
    designs: &[&MarginalDesign],
    sites: &[Vec<usize>],
    layout: &ParamLayout,
    rep: usize,
) -> Result<FieldEstimates> {
    let pos = eta_positions(designs, layout);
    let total: usize = sites.iter().map(Vec::len).sum();
    let mut out = FieldEstimates {
        site: Vec::with_capacity(total),
        mu: Vec::with_capacity(total),
        mu_se: Vec::with_capacity(total),
        log_sigma: Vec::with_capacity(total),
        log_sigma_se: Vec::with_capacity(total),
    };
    let linear = |z: &[f64], idx: &[usize]| -> (f64, f64) {
        let est: f64 = z.iter().zip(idx).map(|(a, &g)| a * theta[g]).sum();
        let mut var = 0.0;
        for (a, &ga) in z.iter().zip(idx) {
            for (b, &gb) in z.iter().zip(idx) {
                var += a * b * cov[(ga, gb)];
            }
        }
        (est, var.max(0.0).sqrt())
    };
    for (k, d) in designs.iter().enumerate() {
        if d.sites() != sites[k].len() {
            return Err(Error::Config(format!("block {k}: design and site list disagree")));
        }
        for (j, &s) in sites[k].iter().enumerate() {
            let (m, mse) = linear(d.location.row(rep, j), &pos.eta1[k]);
            let (l, lse) = linear(d.log_scale.row(rep, j), &pos.eta2[k]);
            out.site.push(s);
            out.mu.push(m);
            out.mu_se.push(mse);
            out.log_sigma.push(l);
            out.log_sigma_se.push(lse);
        }
    }
    Ok(out)
}

/// `|b_hat(s) - b(s)| / (max b - min b)` at every site.
pub fn aed(estimate: &[f64], truth: &[f64]) -> Vec<f64> {
    let max = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = truth.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    estimate
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t).abs() / range)
        .collect()
}

/// Average and maximum of the AED values.
pub fn aed_summary(estimate: &[f64], truth: &[f64]) -> (f64, f64) {
    let a = aed(estimate, truth);
    let mean = a.iter().sum::<f64>() / a.len() as f64;
    let max = a.iter().copied().fold(0.0, f64::max);
    (mean, max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::grid_sites;
    use rand::{Rng, SeedableRng};

    fn min_pairwise(sites: &[[f64; 2]], idx: &[usize]) -> f64 {
        let mut m = f64::INFINITY;
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                m = m.min(distance(&sites[idx[a]], &sites[idx[b]]));
            }
        }
        m
    }

    #[test]
    fn knot_rules() {
        let sites = grid_sites(5, 5);
        assert_eq!(select_knots(&sites, 1).unwrap(), vec![12]);
        let mut all = select_knots(&sites, 25).unwrap();
        all.sort();
        assert_eq!(all, (0..25).collect::<Vec<_>>());
        assert!(matches!(select_knots(&sites, 26), Err(Error::Config(_))));
        assert_eq!(default_knot_count(25), 10);
        assert_eq!(default_knot_count(10), 4);
    }

    #[test]
    fn greedy_beats_random_subsets() {
        let sites = grid_sites(5, 5);
        let greedy = min_pairwise(&sites, &select_knots(&sites, 10).unwrap());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut idx: Vec<usize> = (0..25).collect();
            for i in 0..10 {
                let j = rng.gen_range(i..25);
                idx.swap(i, j);
            }
            assert!(greedy >= min_pairwise(&sites, &idx[..10]));
        }
    }

    #[test]
    fn basis_values() {
        let sites = grid_sites(5, 5);
        let spec = BasisSpec::for_block(&sites, None).unwrap();
        assert_eq!(spec.num_columns(), 13);
        let b = basis_matrix(&sites, &spec).unwrap();
        assert_eq!(b.ncols(), 13);
        let knot = spec.knots[0];
        let r = spec.row(&knot);
        assert_eq!(r[3], 1.0);
        let s = [knot[0] + 4.0, knot[1] + 2.0];
        assert!((spec.row(&s)[3] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn too_many_knots_rejected() {
        let sites = grid_sites(3, 3);
        let spec = BasisSpec {
            linear: true,
            knots: sites.clone(),
            kernel_scale: 0.05,
        };
        assert!(matches!(basis_matrix(&sites, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn trace_equals_dimension_without_penalty() {
        let layout = ParamLayout::varying(&[2, 3], 1);
        let mk = |p: usize, s: f64| DMatrix::from_fn(p, p, |i, j| if i == j { -2.0 - s * i as f64 } else { 0.1 * s });
        let sens = vec![mk(5, 1.0), mk(6, 0.5)];
        let weights = vec![DMatrix::identity(5, 5), DMatrix::identity(6, 6) * 2.0];
        let zero = DVector::zeros(8);
        let t = gcv_trace(&sens, &weights, &layout, &zero).unwrap();
        assert!((t - 8.0).abs() < 1e-10);
        let pen = DVector::from_element(8, 0.5);
        assert!(gcv_trace(&sens, &weights, &layout, &pen).unwrap() < 8.0);
    }

    #[test]
    fn aed_definition() {
        let (a, m) = aed_summary(&[1.0, 2.5, 3.0], &[1.0, 2.0, 3.0]);
        assert!((a - 0.25 / 3.0).abs() < 1e-15);
        assert_eq!(m, 0.25);
    }
}
