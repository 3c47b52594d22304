//! Two-round distributed procedure: block fits, averaging, kernel and
//! sensitivity evaluation at the average, and the meta-estimate.
//!
//! Workers exchange byte-encoded messages with the reducer. The encoding is
//! versioned, little-endian and field-ordered so that runs can be compared
//! across machines.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{
    average_mcles, block_weights, delta_transform, meta_estimate, sample_covariance,
    sandwich_covariance, to_rows, MetaResult, ParamLayout, StackedScores,
};
use crate::local_fit::{block_kernels, block_sensitivity, fit_block_auto, fit_block_from};
use crate::model::{BlockData, MarginalDesign};
use crate::optim::{OptimOptions, Termination};
use crate::partition::Partition;
use crate::svc::{
    basis_matrix, default_knot_count, eta_positions, gcv, penalty_vector, reconstruct_fields,
    select_knots, svc_design, svc_layout, BasisSpec, FieldEstimates, PenaltyConfig,
    DEFAULT_KERNEL_SCALE,
};

const MAGIC: &[u8; 4] = b"BRMB";
pub const SCHEMA_VERSION: u16 = 1;
const KIND_ROUND_ONE: u8 = 1;
const KIND_ROUND_TWO: u8 = 2;

/// Block estimate returned by the first round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOneMsg {
    pub block_id: usize,
    pub theta: Vec<f64>,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub evaluations: usize,
    pub grad_norm: f64,
    pub ccl: f64,
}

/// Kernels and sensitivity at the averaged estimate, returned by the
/// second round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTwoMsg {
    pub block_id: usize,
    /// `n x p` kernels.
    pub psi: DMatrix<f64>,
    /// `p x p` sensitivity.
    pub sensitivity: DMatrix<f64>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn header(kind: u8) -> Self {
        let mut v = MAGIC.to_vec();
        v.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        v.push(kind);
        Self(v)
    }
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u64(&mut self, x: usize) {
        self.0.extend_from_slice(&(x as u64).to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    /// Row-major matrix entries.
    fn matrix(&mut self, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], kind: u8) -> Result<Self> {
        if buf.len() < 7 || &buf[..4] != MAGIC {
            return Err(Error::Protocol("message lacks the schema header".into()));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != SCHEMA_VERSION {
            return Err(Error::Protocol(format!(
                "message schema version {version}, expected {SCHEMA_VERSION}"
            )));
        }
        if buf[6] != kind {
            return Err(Error::Protocol(format!("message kind {}, expected {kind}", buf[6])));
        }
        Ok(Self { buf, pos: 7 })
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Protocol("truncated message".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<usize> {
        let b: [u8; 8] = self.take(8)?.try_into().unwrap();
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Protocol("size overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        let b: [u8; 8] = self.take(8)?.try_into().unwrap();
        Ok(f64::from_le_bytes(b))
    }
    fn matrix(&mut self, r: usize, c: usize) -> Result<DMatrix<f64>> {
        let len = r.checked_mul(c).and_then(|x| x.checked_mul(8));
        if len.map_or(true, |l| l > self.buf.len() - self.pos) {
            return Err(Error::Protocol("truncated matrix".into()));
        }
        let mut v = Vec::with_capacity(r * c);
        for _ in 0..r * c {
            v.push(self.f64()?);
        }
        Ok(DMatrix::from_row_slice(r, c, &v))
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol("trailing bytes after message".into()));
        }
        Ok(())
    }
}

fn termination_code(t: &Termination) -> u8 {
    match t {
        Termination::GradientNorm => 0,
        Termination::StepSize => 1,
        Termination::MaxIterations => 2,
        Termination::LineSearchFailed => 3,
    }
}

fn termination_from(code: u8) -> Result<Termination> {
    Ok(match code {
        0 => Termination::GradientNorm,
        1 => Termination::StepSize,
        2 => Termination::MaxIterations,
        3 => Termination::LineSearchFailed,
        c => return Err(Error::Protocol(format!("unknown termination code {c}"))),
    })
}

impl RoundOneMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::header(KIND_ROUND_ONE);
        w.u64(self.block_id);
        w.u8(u8::from(self.converged));
        w.u8(termination_code(&self.termination));
        w.u64(self.iterations);
        w.u64(self.evaluations);
        w.f64(self.grad_norm);
        w.f64(self.ccl);
        w.u64(self.theta.len());
        for &t in &self.theta {
            w.f64(t);
        }
        w.0
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, KIND_ROUND_ONE)?;
        let block_id = r.u64()?;
        let converged = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Protocol(format!("invalid convergence flag {v}"))),
        };
        let termination = termination_from(r.u8()?)?;
        let iterations = r.u64()?;
        let evaluations = r.u64()?;
        let grad_norm = r.f64()?;
        let ccl = r.f64()?;
        let p = r.u64()?;
        let theta = r.matrix(1, p)?.as_slice().to_vec();
        r.finish()?;
        Ok(Self {
            block_id,
            theta,
            converged,
            termination,
            iterations,
            evaluations,
            grad_norm,
            ccl,
        })
    }
}

impl RoundTwoMsg {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::header(KIND_ROUND_TWO);
        w.u64(self.block_id);
        w.u64(self.psi.nrows());
        w.u64(self.psi.ncols());
        w.matrix(&self.psi);
        w.matrix(&self.sensitivity);
        w.0
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, KIND_ROUND_TWO)?;
        let block_id = r.u64()?;
        let n = r.u64()?;
        let p = r.u64()?;
        let psi = r.matrix(n, p)?;
        let sensitivity = r.matrix(p, p)?;
        r.finish()?;
        if psi.iter().chain(sensitivity.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Protocol(format!("block {block_id} sent non-finite entries")));
        }
        Ok(Self {
            block_id,
            psi,
            sensitivity,
        })
    }
}

/// Observations and covariates over all sites.
#[derive(Debug, Clone)]
pub struct SpatialProblem {
    pub coords: Vec<[f64; 2]>,
    /// `n x d` observations.
    pub obs: DMatrix<f64>,
    pub design: MarginalDesign,
    pub thresholds: Vec<f64>,
}

impl SpatialProblem {
    pub fn new(
        coords: Vec<[f64; 2]>,
        obs: DMatrix<f64>,
        design: MarginalDesign,
        thresholds: Vec<f64>,
    ) -> Result<Self> {
        let d = coords.len();
        if obs.ncols() != d || design.sites() != d || thresholds.len() != d {
            return Err(Error::Config("site counts of data, covariates and thresholds disagree".into()));
        }
        Ok(Self {
            coords,
            obs,
            design,
            thresholds,
        })
    }

    pub fn n(&self) -> usize {
        self.obs.nrows()
    }

    pub fn d(&self) -> usize {
        self.obs.ncols()
    }

    /// Data of block `k` of `partition`.
    pub fn block_data(&self, partition: &Partition, k: usize) -> Result<BlockData> {
        if partition.num_sites() != self.d() {
            return Err(Error::Config(format!(
                "partition covers {} sites, data has {}",
                partition.num_sites(),
                self.d()
            )));
        }
        let idx = partition.block(k);
        BlockData::new(
            k,
            idx.to_vec(),
            idx.iter().map(|&s| self.coords[s]).collect(),
            DMatrix::from_fn(self.n(), idx.len(), |i, j| self.obs[(i, idx[j])]),
            self.design.select_sites(idx),
            idx.iter().map(|&s| self.thresholds[s]).collect(),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub workers: usize,
    pub optim: OptimOptions,
    /// Drop non-converged or failed blocks with a warning instead of
    /// aborting.
    pub drop_failed: bool,
    /// Common starting value for every block; data-driven when absent.
    pub init: Option<Vec<f64>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            optim: OptimOptions::default(),
            drop_failed: false,
            init: None,
        }
    }
}

/// Wall-clock durations of the phases.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub round_one: Duration,
    pub round_two: Duration,
    pub reduce: Duration,
    pub slowest_block: Duration,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub meta: MetaResult,
    pub round_one: Vec<RoundOneMsg>,
    pub timings: Timings,
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::Config("worker count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Round one over `blocks`: encoded messages, or the error of each failed
/// block, plus the per-block fit durations.
fn scatter_fits(
    pool: &rayon::ThreadPool,
    blocks: &[BlockData],
    cfg: &PipelineConfig,
) -> Vec<(Result<Vec<u8>>, Duration)> {
    pool.install(|| {
        blocks
            .par_iter()
            .map(|b| {
                let start = Instant::now();
                let fit = match &cfg.init {
                    Some(init) => fit_block_from(b, init, &cfg.optim),
                    None => fit_block_auto(b, &cfg.optim),
                };
                let msg = fit.map(|r| {
                    RoundOneMsg {
                        block_id: b.block_id,
                        theta: r.theta,
                        converged: r.converged,
                        termination: r.report.termination,
                        iterations: r.report.iterations,
                        evaluations: r.report.evaluations,
                        grad_norm: r.report.grad_norm,
                        ccl: r.ccl,
                    }
                    .encode()
                });
                (msg, start.elapsed())
            })
            .collect()
    })
}

/// Kernel and sensitivity round at the block slices of `theta`.
fn scatter_kernels(
    pool: &rayon::ThreadPool,
    blocks: &[&BlockData],
    layout: &ParamLayout,
    theta: &[f64],
) -> Result<Vec<RoundTwoMsg>> {
    let encoded: Vec<Result<Vec<u8>>> = pool.install(|| {
        blocks
            .par_iter()
            .enumerate()
            .map(|(k, b)| {
                let t = layout.restrict(k, theta);
                Ok(RoundTwoMsg {
                    block_id: b.block_id,
                    psi: block_kernels(&t, b)?,
                    sensitivity: block_sensitivity(&t, b)?,
                }
                .encode())
            })
            .collect()
    });
    let msgs = encoded
        .into_iter()
        .map(|m| m.and_then(|bytes| RoundTwoMsg::decode(&bytes)))
        .collect::<Result<Vec<_>>>()?;
    let n = msgs.first().map_or(0, |m| m.psi.nrows());
    for (m, b) in msgs.iter().zip(blocks) {
        if m.block_id != b.block_id {
            return Err(Error::Protocol(format!(
                "expected block {}, received block {}",
                b.block_id, m.block_id
            )));
        }
        if m.psi.nrows() != n {
            return Err(Error::Protocol(format!(
                "block {} returned {} kernel rows, expected {n}",
                m.block_id,
                m.psi.nrows()
            )));
        }
    }
    Ok(msgs)
}

/// Gather round one, applying the failure policy. Returns the kept block
/// positions, their messages and the dropped block ids.
fn gather_round_one(
    results: Vec<(Result<Vec<u8>>, Duration)>,
    blocks: &[BlockData],
    drop_failed: bool,
) -> Result<(Vec<usize>, Vec<RoundOneMsg>, Vec<usize>, Duration)> {
    let mut kept = Vec::new();
    let mut msgs = Vec::new();
    let mut failed = Vec::new();
    let mut first_error = None;
    let mut slowest = Duration::ZERO;
    for (pos, (res, dt)) in results.into_iter().enumerate() {
        slowest = slowest.max(dt);
        let id = blocks[pos].block_id;
        match res.and_then(|b| RoundOneMsg::decode(&b)) {
            Ok(m) if m.converged => {
                kept.push(pos);
                msgs.push(m);
            }
            Ok(m) => {
                log::warn!("block {id} did not converge ({:?})", m.termination);
                failed.push(id);
                msgs.push(m);
            }
            Err(e) => {
                log::warn!("block {id} failed: {e}");
                failed.push(id);
                first_error.get_or_insert(e);
            }
        }
    }
    if !failed.is_empty() && !drop_failed {
        return Err(match first_error {
            Some(e) if failed.len() == 1 => e,
            _ => Error::NonConverged(failed),
        });
    }
    if kept.is_empty() {
        return Err(Error::NonConverged(failed));
    }
    if !failed.is_empty() {
        log::warn!("dropping blocks {failed:?}; integrating {} blocks", kept.len());
    }
    let kept_msgs = msgs.iter().filter(|m| m.converged).cloned().collect();
    Ok((kept, kept_msgs, failed, slowest))
}

/// Integrated quantities at a common averaged estimate.
struct Reduced {
    sens: Vec<DMatrix<f64>>,
    weights: Vec<DMatrix<f64>>,
    c: DMatrix<f64>,
    stacked: StackedScores,
}

fn reduce(msgs: &[RoundTwoMsg]) -> Result<Reduced> {
    let kernels: Vec<DMatrix<f64>> = msgs.iter().map(|m| m.psi.clone()).collect();
    let stacked = StackedScores::new(&kernels)?;
    let c = sample_covariance(&stacked)?;
    let weights = block_weights(&c, &stacked.dims)?;
    Ok(Reduced {
        sens: msgs.iter().map(|m| m.sensitivity.clone()).collect(),
        weights,
        c,
        stacked,
    })
}

fn meta_result(
    theta_m: Vec<f64>,
    cov: DMatrix<f64>,
    theta_c: Vec<f64>,
    round_one: &[RoundOneMsg],
    dropped: Vec<usize>,
    n: usize,
) -> MetaResult {
    MetaResult {
        se: cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        natural: delta_transform(&theta_m, &cov),
        covariance: to_rows(&cov),
        theta_m,
        theta_c,
        block_ids: round_one.iter().map(|m| m.block_id).collect(),
        block_thetas: round_one.iter().map(|m| m.theta.clone()).collect(),
        dropped_blocks: dropped,
        n,
    }
}

/// Stationary model: fit every block, average, evaluate kernels at the
/// average and combine.
pub fn run_pipeline(
    problem: &SpatialProblem,
    partition: &Partition,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let blocks = (0..partition.num_blocks())
        .map(|k| problem.block_data(partition, k))
        .collect::<Result<Vec<_>>>()?;
    run_blocks(&blocks, cfg)
}

/// [`run_pipeline`] over prepared block data sharing one parameter vector.
pub fn run_blocks(blocks: &[BlockData], cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let pool = worker_pool(cfg.workers)?;
    let p = blocks.first().map(BlockData::num_params).unwrap_or(0);
    if blocks.is_empty() || blocks.iter().any(|b| b.num_params() != p) {
        return Err(Error::Config("blocks must share the parameter vector".into()));
    }
    let t0 = Instant::now();
    let results = scatter_fits(&pool, blocks, cfg);
    let (kept, round_one, dropped, slowest) = gather_round_one(results, blocks, cfg.drop_failed)?;
    let round_one_time = t0.elapsed();

    let layout = ParamLayout::shared(kept.len(), p);
    let thetas: Vec<Vec<f64>> = round_one.iter().map(|m| m.theta.clone()).collect();
    let theta_c = average_mcles(&thetas, &layout)?;

    let t1 = Instant::now();
    let kept_blocks: Vec<&BlockData> = kept.iter().map(|&i| &blocks[i]).collect();
    let msgs = scatter_kernels(&pool, &kept_blocks, &layout, &theta_c)?;
    let round_two_time = t1.elapsed();

    let t2 = Instant::now();
    let red = reduce(&msgs)?;
    let theta_m = meta_estimate(&thetas, &red.sens, &red.weights, &layout, None)?;
    let cov = sandwich_covariance(&red.sens, &red.weights, &red.c, red.stacked.n(), &layout, None)?;
    let meta = meta_result(theta_m, cov, theta_c, &round_one, dropped, red.stacked.n());
    Ok(PipelineOutput {
        meta,
        round_one,
        timings: Timings {
            round_one: round_one_time,
            round_two: round_two_time,
            reduce: t2.elapsed(),
            slowest_block: slowest,
        },
    })
}

/// Basis configuration of the varying-coefficient model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvcConfig {
    /// Knots per block; `ceil(d_k / 2.5)` capped at 10 when absent.
    pub knots: Option<usize>,
    /// Include `s1, s2` columns.
    pub linear: bool,
    pub kernel_scale: f64,
    pub penalty: PenaltyConfig,
}

impl Default for SvcConfig {
    fn default() -> Self {
        Self {
            knots: None,
            linear: true,
            kernel_scale: DEFAULT_KERNEL_SCALE,
            penalty: PenaltyConfig::default(),
        }
    }
}

impl SvcConfig {
    /// Intercept-only bases, which nest the stationary model within blocks.
    pub fn intercept_only() -> Self {
        Self {
            knots: Some(0),
            linear: false,
            kernel_scale: DEFAULT_KERNEL_SCALE,
            penalty: PenaltyConfig::fixed(0.0, 0.0),
        }
    }

    pub fn basis_for(&self, sites: &[[f64; 2]]) -> Result<BasisSpec> {
        let count = self.knots.unwrap_or_else(|| default_knot_count(sites.len()));
        let idx = select_knots(sites, count)?;
        Ok(BasisSpec {
            linear: self.linear,
            knots: idx.iter().map(|&i| sites[i]).collect(),
            kernel_scale: self.kernel_scale,
        })
    }
}

/// One GCV grid evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GcvPoint {
    pub lambda1: f64,
    pub lambda2: f64,
    /// `None` when the point was rejected.
    pub gcv: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SvcOutput {
    pub meta: MetaResult,
    pub fields: FieldEstimates,
    pub lambda: (f64, f64),
    pub gcv: Vec<GcvPoint>,
    pub bases: Vec<BasisSpec>,
    pub layout: ParamLayout,
    pub round_one: Vec<RoundOneMsg>,
    pub timings: Timings,
}

/// Varying-coefficient model with GCV over the penalty grid.
pub fn run_pipeline_svc(
    problem: &SpatialProblem,
    partition: &Partition,
    svc: &SvcConfig,
    cfg: &PipelineConfig,
) -> Result<SvcOutput> {
    svc.penalty.validate()?;
    let pool = worker_pool(cfg.workers)?;
    let mut blocks = Vec::with_capacity(partition.num_blocks());
    let mut bases = Vec::with_capacity(partition.num_blocks());
    for k in 0..partition.num_blocks() {
        let base = problem.block_data(partition, k)?;
        let spec = svc.basis_for(&base.coords)?;
        let b = basis_matrix(&base.coords, &spec)?;
        blocks.push(BlockData::new(
            base.block_id,
            base.sites,
            base.coords,
            base.obs,
            svc_design(&base.design, &b),
            base.thresholds,
        )?);
        bases.push(spec);
    }
    let t0 = Instant::now();
    let mut fit_cfg = cfg.clone();
    fit_cfg.init = None;
    let results = scatter_fits(&pool, &blocks, &fit_cfg);
    let (kept, round_one, dropped, slowest) = gather_round_one(results, &blocks, cfg.drop_failed)?;
    let round_one_time = t0.elapsed();

    let kept_blocks: Vec<&BlockData> = kept.iter().map(|&i| &blocks[i]).collect();
    let designs: Vec<&MarginalDesign> = kept_blocks.iter().map(|b| &b.design).collect();
    let layout = svc_layout(&designs);
    let pos = eta_positions(&designs, &layout);
    let thetas: Vec<Vec<f64>> = round_one.iter().map(|m| m.theta.clone()).collect();
    let theta_c = average_mcles(&thetas, &layout)?;

    let t1 = Instant::now();
    let msgs = scatter_kernels(&pool, &kept_blocks, &layout, &theta_c)?;
    let round_two_time = t1.elapsed();

    let t2 = Instant::now();
    let red = reduce(&msgs)?;
    let n = red.stacked.n();
    let pdim = layout.full_dim();
    let grid = svc.penalty.grid();
    let mut table = Vec::with_capacity(grid.len());
    let chosen = if grid.len() == 1 {
        table.push(GcvPoint {
            lambda1: grid[0].0,
            lambda2: grid[0].1,
            gcv: None,
        });
        grid[0]
    } else {
        let mut best: Option<((f64, f64), f64)> = None;
        for &(l1, l2) in &grid {
            let pen = penalty_vector(pdim, &pos, l1, l2);
            let value = meta_estimate(&thetas, &red.sens, &red.weights, &layout, Some(&pen))
                .and_then(|theta_vm| {
                    let at = scatter_kernels(&pool, &kept_blocks, &layout, &theta_vm)?;
                    let r = reduce(&at)?;
                    let bars: Vec<DVector<f64>> =
                        (0..r.stacked.num_blocks()).map(|k| r.stacked.block_mean(k)).collect();
                    gcv(&bars, &r.sens, &r.weights, &layout, &pen, n)
                });
            let value = match value {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) => None,
                Err(e) => {
                    log::warn!("penalty ({l1}, {l2}) rejected: {e}");
                    None
                }
            };
            if let Some(v) = value {
                if best.map_or(true, |(_, b)| v < b) {
                    best = Some(((l1, l2), v));
                }
            }
            table.push(GcvPoint {
                lambda1: l1,
                lambda2: l2,
                gcv: value,
            });
        }
        best.ok_or_else(|| Error::Numerical("every penalty on the grid was rejected".into()))?.0
    };
    let pen = penalty_vector(pdim, &pos, chosen.0, chosen.1);
    let theta_m = meta_estimate(&thetas, &red.sens, &red.weights, &layout, Some(&pen))?;
    let cov = sandwich_covariance(&red.sens, &red.weights, &red.c, n, &layout, Some(&pen))?;
    let sites: Vec<Vec<usize>> = kept_blocks.iter().map(|b| b.sites.clone()).collect();
    let fields = reconstruct_fields(&theta_m, &cov, &designs, &sites, &layout, 0)?;
    let meta = meta_result(theta_m, cov, theta_c, &round_one, dropped, n);
    let kept_bases = kept.iter().map(|&i| bases[i].clone()).collect();
    Ok(SvcOutput {
        meta,
        fields,
        lambda: chosen,
        gcv: table,
        bases: kept_bases,
        layout,
        round_one,
        timings: Timings {
            round_one: round_one_time,
            round_two: round_two_time,
            reduce: t2.elapsed(),
            slowest_block: slowest,
        },
    })
}

/// Canonical byte encoding of a [`MetaResult`]: every float as
/// little-endian bits, in field order.
pub fn meta_result_bytes(m: &MetaResult) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    let vec = |w: &mut Writer, v: &[f64]| {
        w.u64(v.len());
        v.iter().for_each(|&x| w.f64(x));
    };
    vec(&mut w, &m.theta_m);
    for r in &m.covariance {
        vec(&mut w, r);
    }
    vec(&mut w, &m.se);
    vec(&mut w, &m.natural.values);
    vec(&mut w, &m.natural.se);
    vec(&mut w, &m.theta_c);
    for t in &m.block_thetas {
        vec(&mut w, t);
    }
    for &b in m.block_ids.iter().chain(&m.dropped_blocks) {
        w.u64(b);
    }
    w.u64(m.n);
    w.0
}
