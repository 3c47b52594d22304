//! Marginal regression design and per-block data.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extremes::GevParams;
use crate::simulate::distance;

/// Covariate values indexed by `(replicate, site, column)`. A single
/// replicate slice means the covariates do not vary over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    reps: usize,
    sites: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Covariates {
    /// A single column of ones.
    pub fn intercept(sites: usize) -> Self {
        Self {
            reps: 1,
            sites,
            cols: 1,
            values: vec![1.0; sites],
        }
    }

    /// Static covariates from one row per site.
    pub fn from_site_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if cols == 0 {
            return Err(Error::Config("covariate rows must be nonempty".into()));
        }
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged covariate rows".into()));
        }
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite covariate value".into()));
        }
        Ok(Self {
            reps: 1,
            sites: rows.len(),
            cols,
            values,
        })
    }

    pub fn from_site_fn(sites: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(sites * cols);
        for s in 0..sites {
            for c in 0..cols {
                values.push(f(s, c));
            }
        }
        Self {
            reps: 1,
            sites,
            cols,
            values,
        }
    }

    /// Replicate-varying covariates, laid out replicate-major then site.
    pub fn time_varying(reps: usize, sites: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != reps * sites * cols || cols == 0 {
            return Err(Error::Config(format!(
                "expected {} covariate values, got {}",
                reps * sites * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite covariate value".into()));
        }
        Ok(Self {
            reps,
            sites,
            cols,
            values,
        })
    }

    pub fn is_static(&self) -> bool {
        self.reps == 1
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn reps(&self) -> usize {
        self.reps
    }

    #[inline]
    pub fn row(&self, rep: usize, site: usize) -> &[f64] {
        let r = if self.reps == 1 { 0 } else { rep };
        let start = (r * self.sites + site) * self.cols;
        &self.values[start..start + self.cols]
    }

    /// Average over replicates of the row at `site`.
    pub fn site_mean(&self, site: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for r in 0..self.reps {
            for (a, b) in m.iter_mut().zip(self.row(r, site)) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.reps as f64);
        m
    }

    pub fn select_sites(&self, idx: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.reps * idx.len() * self.cols);
        for r in 0..self.reps {
            for &s in idx {
                values.extend_from_slice(self.row(r, s));
            }
        }
        Self {
            reps: self.reps,
            sites: idx.len(),
            cols: self.cols,
            values,
        }
    }

    /// Elementwise product of every column with every basis column:
    /// column `t * J + j` holds `z_t(s) b_j(s)`.
    pub fn expand(&self, basis: &DMatrix<f64>) -> Self {
        let nb = basis.ncols();
        let cols = self.cols * nb;
        let mut values = Vec::with_capacity(self.reps * self.sites * cols);
        for r in 0..self.reps {
            for s in 0..self.sites {
                let z = self.row(r, s);
                for zt in z {
                    for j in 0..nb {
                        values.push(zt * basis[(s, j)]);
                    }
                }
            }
        }
        Self {
            reps: self.reps,
            sites: self.sites,
            cols,
            values,
        }
    }
}

/// Linear predictors for `mu`, `log sigma` and `xi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalDesign {
    pub location: Covariates,
    pub log_scale: Covariates,
    pub shape: Covariates,
}

impl MarginalDesign {
    pub fn new(location: Covariates, log_scale: Covariates, shape: Covariates) -> Result<Self> {
        let d = location.sites();
        if log_scale.sites() != d || shape.sites() != d {
            return Err(Error::Config("covariate site counts disagree".into()));
        }
        let reps: Vec<usize> = [&location, &log_scale, &shape]
            .iter()
            .map(|c| c.reps())
            .filter(|&r| r > 1)
            .collect();
        if reps.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Config("covariate replicate counts disagree".into()));
        }
        Ok(Self {
            location,
            log_scale,
            shape,
        })
    }

    /// Intercept-only model for all three GEV parameters.
    pub fn intercepts(sites: usize) -> Self {
        Self {
            location: Covariates::intercept(sites),
            log_scale: Covariates::intercept(sites),
            shape: Covariates::intercept(sites),
        }
    }

    /// `mu = s' beta1` (no intercept), constant scale and shape.
    pub fn linear_location(coords: &[[f64; 2]]) -> Self {
        let d = coords.len();
        Self {
            location: Covariates::from_site_fn(d, 2, |s, c| coords[s][c]),
            log_scale: Covariates::intercept(d),
            shape: Covariates::intercept(d),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.location.cols(), self.log_scale.cols(), self.shape.cols())
    }

    /// Length of the full parameter vector `(omega, zeta, beta1, beta2, beta3)`.
    pub fn num_params(&self) -> usize {
        let (a, b, c) = self.dims();
        2 + a + b + c
    }

    pub fn is_static(&self) -> bool {
        self.location.is_static() && self.log_scale.is_static() && self.shape.is_static()
    }

    pub fn sites(&self) -> usize {
        self.location.sites()
    }

    pub fn reps(&self) -> usize {
        self.location.reps().max(self.log_scale.reps()).max(self.shape.reps())
    }

    pub fn select_sites(&self, idx: &[usize]) -> Self {
        Self {
            location: self.location.select_sites(idx),
            log_scale: self.log_scale.select_sites(idx),
            shape: self.shape.select_sites(idx),
        }
    }

    /// `(mu, log sigma, xi)` at a replicate and site.
    #[inline]
    pub fn linear_predictors(&self, theta: &[f64], rep: usize, site: usize) -> (f64, f64, f64) {
        let (q1, q2, _) = self.dims();
        let dot = |z: &[f64], b: &[f64]| z.iter().zip(b).map(|(a, b)| a * b).sum::<f64>();
        let b1 = &theta[2..2 + q1];
        let b2 = &theta[2 + q1..2 + q1 + q2];
        let b3 = &theta[2 + q1 + q2..];
        (
            dot(self.location.row(rep, site), b1),
            dot(self.log_scale.row(rep, site), b2),
            dot(self.shape.row(rep, site), b3),
        )
    }

    pub fn gev_at(&self, theta: &[f64], rep: usize, site: usize) -> GevParams {
        let (mu, ls, xi) = self.linear_predictors(theta, rep, site);
        GevParams {
            mu,
            sigma: ls.exp(),
            xi,
        }
    }
}

/// Unordered site pair inside a block with its separation and the
/// replicates in which both sites are censored.
#[derive(Debug, Clone)]
pub(crate) struct BlockPair {
    pub j1: usize,
    pub j2: usize,
    pub h: f64,
    /// Replicates with both observations censored; only grouped when the
    /// design is static, otherwise empty.
    pub both_censored: Vec<u32>,
    /// All other replicates.
    pub other: Vec<u32>,
}

/// Observations, covariates and thresholds of one block.
#[derive(Debug, Clone)]
pub struct BlockData {
    pub block_id: usize,
    /// Global indices of the block's sites.
    pub sites: Vec<usize>,
    pub coords: Vec<[f64; 2]>,
    /// `n x d_k` observations.
    pub obs: DMatrix<f64>,
    pub design: MarginalDesign,
    /// Data-scale thresholds per site.
    pub thresholds: Vec<f64>,
    pub(crate) pairs: Vec<BlockPair>,
    pub(crate) exceeds: Vec<bool>,
}

impl BlockData {
    pub fn new(
        block_id: usize,
        sites: Vec<usize>,
        coords: Vec<[f64; 2]>,
        obs: DMatrix<f64>,
        design: MarginalDesign,
        thresholds: Vec<f64>,
    ) -> Result<Self> {
        let (n, d) = obs.shape();
        if d < 2 {
            return Err(Error::Config(format!("block {block_id} has fewer than two sites")));
        }
        if n == 0 {
            return Err(Error::Data(format!("block {block_id} has no replicates")));
        }
        if coords.len() != d || thresholds.len() != d || sites.len() != d || design.sites() != d {
            return Err(Error::Config(format!("block {block_id}: inconsistent site counts")));
        }
        if design.reps() > 1 && design.reps() != n {
            return Err(Error::Config(format!(
                "block {block_id}: covariates have {} replicates, data {n}",
                design.reps()
            )));
        }
        if let Some(idx) = obs.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "block {block_id}: non-finite observation at replicate {}, site {}",
                idx % n,
                idx / n
            )));
        }
        if thresholds.iter().any(|u| !u.is_finite()) {
            return Err(Error::Data(format!("block {block_id}: non-finite threshold")));
        }
        let mut exceeds = vec![false; n * d];
        for i in 0..n {
            for j in 0..d {
                exceeds[i * d + j] = obs[(i, j)] > thresholds[j];
            }
        }
        let grouped = design.is_static();
        let mut pairs = Vec::with_capacity(d * (d - 1) / 2);
        for j1 in 0..d {
            for j2 in j1 + 1..d {
                let h = distance(&coords[j1], &coords[j2]);
                if !(h > 0.0) {
                    return Err(Error::Config(format!(
                        "block {block_id}: sites {} and {} coincide",
                        sites[j1], sites[j2]
                    )));
                }
                let mut both_censored = Vec::new();
                let mut other = Vec::new();
                for i in 0..n {
                    if grouped && !exceeds[i * d + j1] && !exceeds[i * d + j2] {
                        both_censored.push(i as u32);
                    } else {
                        other.push(i as u32);
                    }
                }
                pairs.push(BlockPair {
                    j1,
                    j2,
                    h,
                    both_censored,
                    other,
                });
            }
        }
        Ok(Self {
            block_id,
            sites,
            coords,
            obs,
            design,
            thresholds,
            pairs,
            exceeds,
        })
    }

    pub fn n(&self) -> usize {
        self.obs.nrows()
    }

    pub fn d(&self) -> usize {
        self.obs.ncols()
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_params(&self) -> usize {
        self.design.num_params()
    }

    /// Same block with replicates reordered by `perm` (`new[i] = old[perm[i]]`).
    pub fn permute_replicates(&self, perm: &[usize]) -> Result<Self> {
        let obs = DMatrix::from_fn(self.n(), self.d(), |i, j| self.obs[(perm[i], j)]);
        let design = if self.design.is_static() {
            self.design.clone()
        } else {
            let permute = |c: &Covariates| -> Result<Covariates> {
                if c.is_static() {
                    return Ok(c.clone());
                }
                let mut v = Vec::new();
                for &p in perm {
                    for s in 0..c.sites() {
                        v.extend_from_slice(c.row(p, s));
                    }
                }
                Covariates::time_varying(c.reps(), c.sites(), c.cols(), v)
            };
            MarginalDesign::new(
                permute(&self.design.location)?,
                permute(&self.design.log_scale)?,
                permute(&self.design.shape)?,
            )?
        };
        Self::new(
            self.block_id,
            self.sites.clone(),
            self.coords.clone(),
            obs,
            design,
            self.thresholds.clone(),
        )
    }

    /// Block restricted to the sites `perm`, in that order.
    pub fn select_sites(&self, perm: &[usize]) -> Result<Self> {
        let obs = DMatrix::from_fn(self.n(), perm.len(), |i, j| self.obs[(i, perm[j])]);
        Self::new(
            self.block_id,
            perm.iter().map(|&p| self.sites[p]).collect(),
            perm.iter().map(|&p| self.coords[p]).collect(),
            obs,
            self.design.select_sites(perm),
            perm.iter().map(|&p| self.thresholds[p]).collect(),
        )
    }
}
