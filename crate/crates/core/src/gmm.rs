//! Closed-form GMM meta-estimator combining block estimates, its sandwich
//! covariance and the natural-scale transformation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge fractions of the mean diagonal tried when inverting `C`.
const RIDGE_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];
/// Largest condition number accepted for `C` after ridging.
const MAX_CONDITION: f64 = 1e12;

/// Positions of each block's parameters in the full parameter vector.
///
/// In the stationary model every block carries the full vector. In the
/// varying-coefficient model blocks share `(omega, zeta, beta3)` and own
/// their basis coefficients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    full_dim: usize,
    maps: Vec<Vec<usize>>,
}

impl ParamLayout {
    /// `k` blocks all estimating the same `p` parameters.
    pub fn shared(k: usize, p: usize) -> Self {
        Self {
            full_dim: p,
            maps: vec![(0..p).collect(); k],
        }
    }

    /// Blocks with own coefficient vectors of lengths `eta_dims` between the
    /// shared `(omega, zeta)` and the shared `q3` shape coefficients.
    pub fn varying(eta_dims: &[usize], q3: usize) -> Self {
        let p: usize = eta_dims.iter().sum();
        let mut maps = Vec::with_capacity(eta_dims.len());
        let mut offset = 2;
        for &pk in eta_dims {
            let mut m = vec![0, 1];
            m.extend(offset..offset + pk);
            m.extend(2 + p..2 + p + q3);
            offset += pk;
            maps.push(m);
        }
        Self {
            full_dim: 2 + p + q3,
            maps,
        }
    }

    pub fn from_maps(full_dim: usize, maps: Vec<Vec<usize>>) -> Result<Self> {
        for (k, m) in maps.iter().enumerate() {
            if m.iter().any(|&g| g >= full_dim) {
                return Err(Error::Config(format!("layout of block {k} exceeds dimension {full_dim}")));
            }
        }
        Ok(Self { full_dim, maps })
    }

    pub fn full_dim(&self) -> usize {
        self.full_dim
    }

    pub fn num_blocks(&self) -> usize {
        self.maps.len()
    }

    pub fn block_dim(&self, k: usize) -> usize {
        self.maps[k].len()
    }

    pub fn map(&self, k: usize) -> &[usize] {
        &self.maps[k]
    }

    /// Block `k`'s slice of a full vector.
    pub fn restrict(&self, k: usize, full: &[f64]) -> Vec<f64> {
        self.maps[k].iter().map(|&g| full[g]).collect()
    }

    /// Layout keeping only the listed blocks.
    pub fn select_blocks(&self, keep: &[usize]) -> Self {
        Self {
            full_dim: self.full_dim,
            maps: keep.iter().map(|&k| self.maps[k].clone()).collect(),
        }
    }

    /// Zero-pad a `p_k x p_k` block matrix along the parameter axis to
    /// `p_k x P`, placing column `j` at the block's global position.
    pub fn pad(&self, k: usize, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let map = &self.maps[k];
        if m.ncols() != map.len() {
            return Err(Error::Config(format!(
                "block {k}: matrix has {} columns, layout expects {}",
                m.ncols(),
                map.len()
            )));
        }
        let mut out = DMatrix::zeros(m.nrows(), self.full_dim);
        for (j, &g) in map.iter().enumerate() {
            out.column_mut(g).copy_from(&m.column(j));
        }
        Ok(out)
    }
}

/// Padded sensitivity matrix of block `k`.
pub fn pad_sensitivity(i_k: &DMatrix<f64>, k: usize, layout: &ParamLayout) -> Result<DMatrix<f64>> {
    layout.pad(k, i_k)
}

/// Mean of the block estimates. Entries owned by a single block keep that
/// block's value.
pub fn average_mcles(thetas: &[Vec<f64>], layout: &ParamLayout) -> Result<Vec<f64>> {
    if thetas.is_empty() || thetas.len() != layout.num_blocks() {
        return Err(Error::Config(format!(
            "{} block estimates for {} blocks",
            thetas.len(),
            layout.num_blocks()
        )));
    }
    let mut sum = vec![0.0; layout.full_dim()];
    let mut count = vec![0usize; layout.full_dim()];
    for (k, t) in thetas.iter().enumerate() {
        if t.len() != layout.block_dim(k) {
            return Err(Error::Config(format!("block {k} estimate has wrong length")));
        }
        for (&g, v) in layout.map(k).iter().zip(t) {
            sum[g] += v;
            count[g] += 1;
        }
    }
    if let Some(g) = count.iter().position(|&c| c == 0) {
        return Err(Error::Config(format!("parameter {g} is not estimated by any block")));
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect())
}

/// Per-replicate kernels of all blocks side by side.
#[derive(Debug, Clone)]
pub struct StackedScores {
    /// `n x sum(p_k)`.
    pub psi_all: DMatrix<f64>,
    /// First column of each block.
    pub offsets: Vec<usize>,
    pub dims: Vec<usize>,
}

impl StackedScores {
    pub fn new(kernels: &[DMatrix<f64>]) -> Result<Self> {
        let n = kernels.first().map_or(0, |m| m.nrows());
        if n == 0 {
            return Err(Error::Protocol("no kernels to stack".into()));
        }
        if let Some(k) = kernels.iter().position(|m| m.nrows() != n) {
            return Err(Error::Protocol(format!(
                "block {k} kernels have {} rows, expected {n}",
                kernels[k].nrows()
            )));
        }
        let dims: Vec<usize> = kernels.iter().map(|m| m.ncols()).collect();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut total = 0;
        for &p in &dims {
            offsets.push(total);
            total += p;
        }
        let mut psi_all = DMatrix::zeros(n, total);
        for (k, m) in kernels.iter().enumerate() {
            psi_all.columns_mut(offsets[k], dims[k]).copy_from(m);
        }
        Ok(Self {
            psi_all,
            offsets,
            dims,
        })
    }

    pub fn n(&self) -> usize {
        self.psi_all.nrows()
    }

    pub fn num_blocks(&self) -> usize {
        self.dims.len()
    }

    /// Block `k`'s column means, `Psi_k`.
    pub fn block_mean(&self, k: usize) -> DVector<f64> {
        let cols = self.psi_all.columns(self.offsets[k], self.dims[k]);
        DVector::from_iterator(self.dims[k], cols.column_iter().map(|c| c.mean()))
    }
}

/// `C = (1/n) sum_i psi_i psi_i'` (uncentered).
pub fn sample_covariance(stacked: &StackedScores) -> Result<DMatrix<f64>> {
    let n = stacked.n();
    for k in 0..stacked.num_blocks() {
        let cols = stacked.psi_all.columns(stacked.offsets[k], stacked.dims[k]);
        for i in 0..n {
            if cols.row(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite score kernel at replicate {i}, block {k}"
                )));
            }
        }
    }
    let dim = stacked.psi_all.ncols();
    if n < 2 * dim {
        log::warn!(
            "sample size {n} is small relative to the {dim} stacked moment conditions; \
             GMM variances may be underestimated"
        );
    }
    let c = stacked.psi_all.tr_mul(&stacked.psi_all) / n as f64;
    Ok((&c + c.transpose()) * 0.5)
}

/// Extract `p x p` diagonal blocks of a matrix.
fn diagonal_blocks(m: &DMatrix<f64>, offsets: &[usize], dims: &[usize]) -> Vec<DMatrix<f64>> {
    offsets
        .iter()
        .zip(dims)
        .map(|(&o, &p)| m.view((o, o), (p, p)).into_owned())
        .collect()
}

/// Inverse of a symmetric positive (semi)definite matrix with escalating
/// ridge. Fails when the ridged matrix is still too ill conditioned.
pub fn ridge_inverse(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = c.nrows();
    let mean_diag = c.diagonal().mean();
    if !(mean_diag > 0.0 && mean_diag.is_finite()) {
        return Err(Error::Numerical("moment covariance has a nonpositive diagonal".into()));
    }
    let mut last_cond = f64::INFINITY;
    for &r in &RIDGE_LADDER {
        let mut m = c.clone();
        for i in 0..dim {
            m[(i, i)] += r * mean_diag;
        }
        let eig = m.clone().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        last_cond = if min > 0.0 { max / min } else { f64::INFINITY };
        if last_cond <= MAX_CONDITION {
            if r > 0.0 {
                log::warn!("moment covariance ridged by {r:e} of its mean diagonal");
            }
            if let Some(ch) = m.cholesky() {
                let inv = ch.inverse();
                return Ok((&inv + inv.transpose()) * 0.5);
            }
        }
    }
    Err(Error::Numerical(format!(
        "moment covariance is numerically rank deficient (condition number {last_cond:.3e} after ridging)"
    )))
}

/// `W_k = {C^{-1}}_{kk}` for every block.
pub fn block_weights(c: &DMatrix<f64>, dims: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    let total: usize = dims.iter().sum();
    if c.nrows() != total || c.ncols() != total {
        return Err(Error::Config(format!(
            "covariance is {}x{}, block dimensions sum to {total}",
            c.nrows(),
            c.ncols()
        )));
    }
    let inv = ridge_inverse(c)?;
    let mut offsets = Vec::with_capacity(dims.len());
    let mut o = 0;
    for &p in dims {
        offsets.push(o);
        o += p;
    }
    Ok(diagonal_blocks(&inv, &offsets, dims))
}

/// Diagonal penalty added to the normal matrix, one entry per full parameter.
pub type Penalty = DVector<f64>;

fn normal_matrix(
    sens: &[DMatrix<f64>],
    weights: &[DMatrix<f64>],
    layout: &ParamLayout,
    penalty: Option<&Penalty>,
) -> Result<DMatrix<f64>> {
    let pdim = layout.full_dim();
    let mut h = DMatrix::zeros(pdim, pdim);
    for (k, (i_k, w_k)) in sens.iter().zip(weights).enumerate() {
        let m = i_k.transpose() * w_k * i_k;
        let map = layout.map(k);
        if map.len() != m.nrows() {
            return Err(Error::Config(format!("block {k}: sensitivity does not match layout")));
        }
        for (a, &ga) in map.iter().enumerate() {
            for (b, &gb) in map.iter().enumerate() {
                h[(ga, gb)] += m[(a, b)];
            }
        }
    }
    if let Some(pen) = penalty {
        for i in 0..pdim {
            h[(i, i)] += pen[i];
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

fn solve_normal(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    let eig = h.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    if min.abs() <= 1e-14 * max.abs() {
        return Err(Error::Numerical(format!(
            "normal matrix is singular: eigenvalues range from {min:.3e} to {max:.3e}"
        )));
    }
    h.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Numerical("normal matrix is singular".into()))
}

fn inverse_normal(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = h.nrows();
    let mut inv = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut e = DVector::zeros(p);
        e[j] = 1.0;
        inv.set_column(j, &solve_normal(h, &e)?);
    }
    Ok(inv)
}

/// `{sum I_k' W_k I_k + Lambda}^{-1} sum I_k' W_k I_k theta_k`, with every
/// block term embedded at the block's global positions.
pub fn meta_estimate(
    thetas: &[Vec<f64>],
    sens: &[DMatrix<f64>],
    weights: &[DMatrix<f64>],
    layout: &ParamLayout,
    penalty: Option<&Penalty>,
) -> Result<Vec<f64>> {
    let k = layout.num_blocks();
    if thetas.len() != k || sens.len() != k || weights.len() != k {
        return Err(Error::Config("block counts disagree in meta-estimation".into()));
    }
    let h = normal_matrix(sens, weights, layout, penalty)?;
    let mut rhs = DVector::zeros(layout.full_dim());
    for (b, ((t, i_k), w_k)) in thetas.iter().zip(sens).zip(weights).enumerate() {
        let v = i_k.transpose() * (w_k * (i_k * DVector::from_column_slice(t)));
        for (a, &g) in layout.map(b).iter().enumerate() {
            rhs[g] += v[a];
        }
    }
    Ok(solve_normal(&h, &rhs)?.as_slice().to_vec())
}

/// `n^{-1} H^{-1} G H^{-T}` with `H = sum I_k' W_k I_k + Lambda` and
/// `G = sum_{k,k'} I_k' W_k C_{kk'} W_k' I_k'`.
pub fn sandwich_covariance(
    sens: &[DMatrix<f64>],
    weights: &[DMatrix<f64>],
    c: &DMatrix<f64>,
    n: usize,
    layout: &ParamLayout,
    penalty: Option<&Penalty>,
) -> Result<DMatrix<f64>> {
    let h = normal_matrix(sens, weights, layout, penalty)?;
    let total: usize = (0..layout.num_blocks()).map(|k| layout.block_dim(k)).sum();
    if c.nrows() != total {
        return Err(Error::Config("covariance does not match block dimensions".into()));
    }
    // A stacks the padded W_k I_k; G = A' C A.
    let mut a = DMatrix::zeros(total, layout.full_dim());
    let mut row = 0;
    for (k, (i_k, w_k)) in sens.iter().zip(weights).enumerate() {
        let padded = layout.pad(k, &(w_k * i_k))?;
        a.rows_mut(row, padded.nrows()).copy_from(&padded);
        row += padded.nrows();
    }
    let g = a.transpose() * c * &a;
    let hinv = inverse_normal(&h)?;
    let cov = &hinv * g * hinv.transpose() / n as f64;
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Estimates on the natural scale `(alpha, phi, rest)` with covariance
/// `D' Sigma D`, `D = diag(alpha/(1+e^omega), phi, 1, ..., 1)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NaturalEstimates {
    pub values: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub se: Vec<f64>,
}

pub fn delta_jacobian(theta: &[f64]) -> DVector<f64> {
    let alpha = 2.0 / (1.0 + (-theta[0]).exp());
    let mut d = DVector::from_element(theta.len(), 1.0);
    d[0] = alpha / (1.0 + theta[0].exp());
    d[1] = theta[1].exp();
    d
}

pub fn delta_transform(theta: &[f64], cov: &DMatrix<f64>) -> NaturalEstimates {
    let d = delta_jacobian(theta);
    let mut values = theta.to_vec();
    values[0] = 2.0 / (1.0 + (-theta[0]).exp());
    values[1] = theta[1].exp();
    let dm = DMatrix::from_diagonal(&d);
    let nc = &dm * cov * &dm;
    NaturalEstimates {
        se: nc.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        covariance: to_rows(&nc),
        values,
    }
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(nr, nc, |i, j| rows[i][j])
}

/// `n sum_k Psi_k' W_k Psi_k`, the GMM quadratic form.
pub fn gmm_objective_oracle(psi_bars: &[DVector<f64>], weights: &[DMatrix<f64>], n: usize) -> f64 {
    n as f64
        * psi_bars
            .iter()
            .zip(weights)
            .map(|(p, w)| (p.transpose() * w * p)[(0, 0)])
            .sum::<f64>()
}

/// Integrated estimate with its uncertainty and audit trail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaResult {
    pub theta_m: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub se: Vec<f64>,
    pub natural: NaturalEstimates,
    pub theta_c: Vec<f64>,
    pub block_ids: Vec<usize>,
    pub block_thetas: Vec<Vec<f64>>,
    /// Blocks removed by the drop policy.
    pub dropped_blocks: Vec<usize>,
    pub n: usize,
}

impl MetaResult {
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.covariance)
    }
}
