//! End-to-end runs over an ingested dataset: configuration, fitting, the
//! persisted fitted model, and the emitted tables and reports.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{thresholds, write_json, Dataset, PartitionMode, Standardization};
use crate::diagnostics::{pit_values, return_level, FittedMargins, PitValues, ReturnLevel, SupportFlag};
use crate::error::{Error, Result};
use crate::gmm::{from_rows, MetaResult, ParamLayout};
use crate::model::MarginalDesign;
use crate::optim::OptimOptions;
use crate::partition::{Partition, DEFAULT_BLOCK_SIZE};
use crate::pipeline::{run_pipeline, run_pipeline_svc, GcvPoint, PipelineConfig, SpatialProblem, SvcConfig, Timings};
use crate::svc::{basis_matrix, svc_design, BasisSpec, FieldEstimates};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Stationary,
    Svc,
}

/// Covariate formulas for the three GEV linear predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formulas {
    pub location: String,
    pub log_scale: String,
    pub shape: String,
}

impl Default for Formulas {
    fn default() -> Self {
        Self {
            location: "1".into(),
            log_scale: "1".into(),
            shape: "1".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub threshold_quantile: f64,
    pub partition: PartitionMode,
    pub model: ModelMode,
    pub formulas: Formulas,
    pub svc: SvcConfig,
    pub optim: OptimOptions,
    pub workers: usize,
    pub drop_failed: bool,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            threshold_quantile: 0.9,
            partition: PartitionMode::Grid {
                block_size: DEFAULT_BLOCK_SIZE,
            },
            model: ModelMode::Stationary,
            formulas: Formulas::default(),
            svc: SvcConfig::default(),
            optim: OptimOptions::default(),
            workers: 1,
            drop_failed: false,
            standardize: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile < 1.0) {
            return Err(Error::Config(format!(
                "threshold quantile {} outside (0, 1)",
                self.threshold_quantile
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("worker count must be positive".into()));
        }
        if self.model == ModelMode::Svc {
            self.svc.penalty.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// One block of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedBlock {
    pub label: String,
    pub site_ids: Vec<String>,
    /// Positions of the block parameters in the full vector.
    pub map: Vec<usize>,
    pub basis: Option<BasisSpec>,
}

/// Everything needed to rebuild the fitted margins from the data files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub version: u32,
    pub mode: ModelMode,
    pub formulas: Formulas,
    pub param_names: Vec<String>,
    pub theta: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub standardization: Option<Standardization>,
    pub site_ids: Vec<String>,
    pub thresholds: Vec<f64>,
    pub blocks: Vec<FittedBlock>,
}

fn site_positions(data: &Dataset, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            data.site_ids
                .iter()
                .position(|s| s == id)
                .ok_or_else(|| Error::Data(format!("fitted site '{id}' is not in the sites file")))
        })
        .collect()
}

impl FittedModel {
    /// Fitted margins at the dataset's sites and replicates.
    pub fn margins(&self, data: &Dataset) -> Result<FittedMargins> {
        if data.site_ids != self.site_ids {
            return Err(Error::Data("sites differ from those of the fitted model".into()));
        }
        let base = data.design(&self.formulas.location, &self.formulas.log_scale, &self.formulas.shape)?;
        let cov = from_rows(&self.covariance);
        let layout = ParamLayout::from_maps(self.theta.len(), self.blocks.iter().map(|b| b.map.clone()).collect())?;
        let mut designs = Vec::with_capacity(self.blocks.len());
        let mut sites = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let idx = site_positions(data, &b.site_ids)?;
            let local = base.select_sites(&idx);
            let design = match &b.basis {
                Some(spec) => {
                    let coords: Vec<[f64; 2]> = idx.iter().map(|&s| data.coords[s]).collect();
                    svc_design(&local, &basis_matrix(&coords, spec)?)
                }
                None => local,
            };
            if design.num_params() != b.map.len() {
                return Err(Error::Config(format!("block '{}': design does not match the stored map", b.label)));
            }
            designs.push(design);
            sites.push(idx);
        }
        let covered: usize = sites.iter().map(Vec::len).sum();
        if covered != data.d() {
            return Err(Error::Data(format!(
                "{} sites have no fitted margins (their blocks were dropped)",
                data.d() - covered
            )));
        }
        let refs: Vec<&MarginalDesign> = designs.iter().collect();
        FittedMargins::blockwise(&self.theta, cov, &refs, &sites, &layout)
    }
}

/// Estimate with standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueSe {
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedEstimate {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: usize,
    pub label: String,
    pub sites: usize,
    pub converged: bool,
    pub termination: String,
    pub iterations: usize,
    pub ccl: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvcSummary {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gcv: Vec<GcvPoint>,
}

/// Deterministic run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub mode: ModelMode,
    pub note: String,
    pub replicates: usize,
    pub sites: usize,
    pub blocks: usize,
    pub dropped_blocks: Vec<String>,
    pub alpha: ValueSe,
    pub phi: ValueSe,
    pub parameters: Vec<NamedEstimate>,
    pub block_fits: Vec<BlockSummary>,
    pub svc: Option<SvcSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub mode: PartitionMode,
    pub labels: Vec<String>,
    pub sizes: Vec<usize>,
}

/// Reproducibility record of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tool_version: String,
    pub threshold_quantile: f64,
    pub seed: u64,
    pub config_hash: String,
    pub partition: PartitionSummary,
    pub inputs: Vec<InputHash>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

pub fn hash_file(path: &Path) -> Result<InputHash> {
    let bytes = std::fs::read(path)?;
    Ok(InputHash {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(bytes)),
    })
}

/// Result of [`fit_dataset`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: FittedModel,
    pub report: Report,
    pub partition: Partition,
    pub meta: MetaResult,
    pub fields: Option<FieldEstimates>,
    pub timings: Timings,
}

fn term_names(formula: &str) -> Vec<String> {
    formula.split(',').map(|t| t.trim().to_string()).collect()
}

fn stationary_names(f: &Formulas) -> Vec<String> {
    let mut names = vec!["omega".to_string(), "zeta".to_string()];
    for (part, formula) in [("location", &f.location), ("log_scale", &f.log_scale), ("shape", &f.shape)] {
        names.extend(term_names(formula).into_iter().map(|t| format!("{part}:{t}")));
    }
    names
}

fn basis_names(spec: &BasisSpec) -> Vec<String> {
    let mut b = vec!["1".to_string()];
    if spec.linear {
        b.extend(["s1".to_string(), "s2".to_string()]);
    }
    b.extend((1..=spec.knots.len()).map(|j| format!("knot{j}")));
    b
}

fn svc_names(f: &Formulas, labels: &[String], bases: &[BasisSpec], q3: usize) -> Vec<String> {
    let mut names = vec!["omega".to_string(), "zeta".to_string()];
    for (label, spec) in labels.iter().zip(bases) {
        let b = basis_names(spec);
        for (part, formula) in [("location", &f.location), ("log_scale", &f.log_scale)] {
            for t in term_names(formula) {
                names.extend(b.iter().map(|bj| format!("block {label}:{part}:{t}*{bj}")));
            }
        }
    }
    let shape = term_names(&f.shape);
    names.extend(shape.iter().take(q3).map(|t| format!("shape:{t}")));
    names
}

/// Fit the configured model to a dataset, standardizing first if asked.
pub fn fit_dataset(data: &mut Dataset, cfg: &RunConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    if cfg.standardize {
        data.standardize()?;
    }
    let partition = data.partition(&cfg.partition)?;
    let u = thresholds(&data.obs, cfg.threshold_quantile)?;
    let f = &cfg.formulas;
    let design = data.design(&f.location, &f.log_scale, &f.shape)?;
    let problem = SpatialProblem::new(data.coords.clone(), data.obs.clone(), design, u.clone())?;
    let pcfg = PipelineConfig {
        workers: cfg.workers,
        optim: cfg.optim.clone(),
        drop_failed: cfg.drop_failed,
        init: None,
    };
    let labels = partition.labels();
    let (meta, fields, round_one, timings, blocks, names, svc) = match cfg.model {
        ModelMode::Stationary => {
            let out = run_pipeline(&problem, &partition, &pcfg)?;
            let p = out.meta.theta_m.len();
            // Stationary margins hold at every site, including those of
            // dropped blocks.
            let all: Vec<FittedBlock> = (0..partition.num_blocks())
                .map(|k| FittedBlock {
                    label: labels[k].clone(),
                    site_ids: partition.block(k).iter().map(|&s| data.site_ids[s].clone()).collect(),
                    map: (0..p).collect(),
                    basis: None,
                })
                .collect();
            (out.meta, None, out.round_one, out.timings, all, stationary_names(f), None)
        }
        ModelMode::Svc => {
            let out = run_pipeline_svc(&problem, &partition, &cfg.svc, &pcfg)?;
            let kept_labels: Vec<String> = out.meta.block_ids.iter().map(|&k| labels[k].clone()).collect();
            let blocks = out
                .meta
                .block_ids
                .iter()
                .enumerate()
                .map(|(i, &k)| FittedBlock {
                    label: labels[k].clone(),
                    site_ids: partition.block(k).iter().map(|&s| data.site_ids[s].clone()).collect(),
                    map: out.layout.map(i).to_vec(),
                    basis: Some(out.bases[i].clone()),
                })
                .collect();
            let q3 = problem.design.dims().2;
            let names = svc_names(f, &kept_labels, &out.bases, q3);
            let svc = SvcSummary {
                lambda1: out.lambda.0,
                lambda2: out.lambda.1,
                gcv: out.gcv,
            };
            (out.meta, Some(out.fields), out.round_one, out.timings, blocks, names, Some(svc))
        }
    };
    let model = FittedModel {
        version: REPORT_VERSION,
        mode: cfg.model,
        formulas: f.clone(),
        param_names: names.clone(),
        theta: meta.theta_m.clone(),
        covariance: meta.covariance.clone(),
        standardization: data.standardization.clone(),
        site_ids: data.site_ids.clone(),
        thresholds: u,
        blocks,
    };
    let report = Report {
        version: REPORT_VERSION,
        mode: cfg.model,
        note: match cfg.model {
            ModelMode::Stationary => "stationary mode: no fitted-field table".into(),
            ModelMode::Svc => "spatially varying coefficient mode".into(),
        },
        replicates: data.n(),
        sites: data.d(),
        blocks: partition.num_blocks(),
        dropped_blocks: meta.dropped_blocks.iter().map(|&k| labels[k].clone()).collect(),
        alpha: ValueSe {
            estimate: meta.natural.values[0],
            se: meta.natural.se[0],
        },
        phi: ValueSe {
            estimate: meta.natural.values[1],
            se: meta.natural.se[1],
        },
        parameters: names
            .iter()
            .zip(meta.theta_m.iter().zip(&meta.se))
            .map(|(n, (&e, &s))| NamedEstimate {
                name: n.clone(),
                estimate: e,
                se: s,
            })
            .collect(),
        block_fits: round_one
            .iter()
            .map(|m| BlockSummary {
                block: m.block_id,
                label: labels[m.block_id].clone(),
                sites: partition.block(m.block_id).len(),
                converged: m.converged,
                termination: format!("{:?}", m.termination),
                iterations: m.iterations,
                ccl: m.ccl,
                theta: m.theta.clone(),
            })
            .collect(),
        svc,
    };
    Ok(FitOutcome {
        model,
        report,
        partition,
        meta,
        fields,
        timings,
    })
}

pub fn manifest(cfg: &RunConfig, partition: &Partition, inputs: &[&Path]) -> Result<Manifest> {
    Ok(Manifest {
        version: REPORT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        threshold_quantile: cfg.threshold_quantile,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        partition: PartitionSummary {
            mode: cfg.partition.clone(),
            labels: partition.labels().to_vec(),
            sizes: partition.block_sizes(),
        },
        inputs: inputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
    })
}

/// Per-site fitted location and scale on the original data scale.
pub fn write_fields(path: &Path, data: &Dataset, partition: &Partition, fields: &FieldEstimates) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["site_id", "x", "y", "block", "mu", "mu_se", "log_sigma", "log_sigma_se", "sigma"])?;
    for (i, &s) in fields.site.iter().enumerate() {
        let (c, sc) = match &data.standardization {
            Some(st) => (st.center[s], st.scale[s]),
            None => (0.0, 1.0),
        };
        let log_sigma = fields.log_sigma[i] + sc.ln();
        let block = partition.block_of(s).map(|k| partition.labels()[k].clone()).unwrap_or_default();
        w.write_record([
            data.site_ids[s].clone(),
            data.coords[s][0].to_string(),
            data.coords[s][1].to_string(),
            block,
            (c + sc * fields.mu[i]).to_string(),
            (sc * fields.mu_se[i]).to_string(),
            log_sigma.to_string(),
            fields.log_sigma_se[i].to_string(),
            log_sigma.exp().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Summary of the probability integral transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PitSummary {
    pub count: usize,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub outside_support: usize,
}

pub fn pit_summary(pit: &PitValues) -> PitSummary {
    let ks = pit.uniformity();
    PitSummary {
        count: pit.values.len(),
        ks_statistic: ks.statistic,
        ks_p_value: ks.p_value,
        outside_support: pit.flags.len(),
    }
}

/// PIT values of every observation; values written on the original scale.
pub fn write_pit(path: &Path, data: &Dataset, pit: &PitValues) -> Result<()> {
    let original = data.original_obs();
    let mut flag = DMatrix::from_element(pit.values.nrows(), pit.values.ncols(), "");
    for &(i, j, f) in &pit.flags {
        flag[(i, j)] = match f {
            SupportFlag::BelowLower => "below_lower",
            SupportFlag::AboveUpper => "above_upper",
        };
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["replicate_id", "site_id", "value", "pit", "flag"])?;
    for i in 0..pit.values.nrows() {
        for j in 0..pit.values.ncols() {
            w.write_record([
                data.replicate_ids[i].clone(),
                data.site_ids[j].clone(),
                original[(i, j)].to_string(),
                pit.values[(i, j)].to_string(),
                flag[(i, j)].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// PIT values under a fitted model.
pub fn diagnose(model: &FittedModel, data: &Dataset) -> Result<PitValues> {
    let obs = match &model.standardization {
        Some(s) => s.apply_matrix(&data.original_obs()),
        None => data.original_obs(),
    };
    pit_values(&model.margins(data)?, &obs)
}

/// Return level at one site on the original data scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteReturnLevel {
    pub site_id: String,
    pub level: ReturnLevel,
}

pub fn return_levels(
    model: &FittedModel,
    data: &Dataset,
    periods: &[f64],
    first: usize,
    per_year: usize,
) -> Result<Vec<SiteReturnLevel>> {
    let margins = model.margins(data)?;
    let mut out = Vec::with_capacity(data.d() * periods.len());
    for s in 0..data.d() {
        for &r in periods {
            let mut level = return_level(&margins, s, r, first, per_year)?;
            if let Some(st) = &model.standardization {
                level.level = st.invert(s, level.level);
                level.se *= st.scale[s];
            }
            out.push(SiteReturnLevel {
                site_id: data.site_ids[s].clone(),
                level,
            });
        }
    }
    Ok(out)
}

pub fn write_return_levels(path: &Path, levels: &[SiteReturnLevel]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["site_id", "years", "level", "se"])?;
    for l in levels {
        w.write_record([
            l.site_id.clone(),
            l.level.years.to_string(),
            l.level.level.to_string(),
            l.level.se.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write the fitted model, report, manifest, timings and, in the varying
/// coefficient mode, the field table into `dir`.
pub fn emit_fit(dir: &Path, data: &Dataset, cfg: &RunConfig, fit: &FitOutcome, inputs: &[&Path]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("model.json"), &fit.model)?;
    write_json(&dir.join("report.json"), &fit.report)?;
    write_json(&dir.join("manifest.json"), &manifest(cfg, &fit.partition, inputs)?)?;
    write_json(&dir.join("timings.json"), &fit.timings)?;
    if let Some(fields) = &fit.fields {
        write_fields(&dir.join("fields.csv"), data, &fit.partition, fields)?;
    }
    Ok(())
}

pub fn read_model(path: &Path) -> Result<FittedModel> {
    let f = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let m: FittedModel = serde_json::from_reader(std::io::BufReader::new(f))?;
    if m.version != REPORT_VERSION {
        return Err(Error::Data(format!("model file version {} is not supported", m.version)));
    }
    Ok(m)
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let f = std::fs::File::open(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
