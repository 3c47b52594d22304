//! Tabular data ingestion, per-site standardization, thresholds and
//! covariate formulas.
//!
//! Sites file: `site_id,x,y` plus an optional `block` label column and any
//! number of numeric covariate columns. Observations file:
//! `replicate_id,site_id,value`, one row per replicate and site. Optional
//! replicate covariates file: `replicate_id` plus numeric columns.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Covariates, MarginalDesign};
use crate::partition::{partition_custom, partition_grid, Partition};
use crate::stats::quantile;

/// Sites with fewer observations trigger a warning when thresholding.
const FEW_OBSERVATIONS: usize = 20;
/// Largest number of offending keys listed in an error message.
const MAX_LISTED: usize = 10;

#[derive(Debug, Clone)]
pub struct DataPaths {
    pub sites: PathBuf,
    pub observations: PathBuf,
    pub replicate_covariates: Option<PathBuf>,
}

/// Per-site affine standardization `(y - center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    /// Median and 95% minus 5% quantile range of each column.
    pub fn fit(obs: &DMatrix<f64>) -> Result<Self> {
        let mut center = Vec::with_capacity(obs.ncols());
        let mut scale = Vec::with_capacity(obs.ncols());
        for j in 0..obs.ncols() {
            let col: Vec<f64> = obs.column(j).iter().copied().collect();
            let range = quantile(&col, 0.95) - quantile(&col, 0.05);
            if !(range > 0.0) {
                return Err(Error::Data(format!(
                    "site {j}: 5% and 95% quantiles coincide, cannot standardize"
                )));
            }
            center.push(quantile(&col, 0.5));
            scale.push(range);
        }
        Ok(Self { center, scale })
    }

    pub fn apply(&self, site: usize, y: f64) -> f64 {
        (y - self.center[site]) / self.scale[site]
    }

    pub fn invert(&self, site: usize, z: f64) -> f64 {
        z * self.scale[site] + self.center[site]
    }

    pub fn apply_matrix(&self, obs: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(obs.nrows(), obs.ncols(), |i, j| self.apply(j, obs[(i, j)]))
    }

    pub fn invert_matrix(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| self.invert(j, z[(i, j)]))
    }
}

/// Validated observations with site and replicate metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub site_ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    pub block_labels: Option<Vec<String>>,
    pub site_covariate_names: Vec<String>,
    /// One row per site.
    pub site_covariates: Vec<Vec<f64>>,
    /// In order of first appearance in the observations file.
    pub replicate_ids: Vec<String>,
    pub replicate_covariate_names: Vec<String>,
    /// One row per replicate; empty when no covariates were supplied.
    pub replicate_covariates: Vec<Vec<f64>>,
    /// `n x d` values, standardized when `standardization` is set.
    pub obs: DMatrix<f64>,
    pub standardization: Option<Standardization>,
}

#[derive(Debug)]
struct SiteTable {
    ids: Vec<String>,
    coords: Vec<[f64; 2]>,
    labels: Option<Vec<String>>,
    cov_names: Vec<String>,
    covs: Vec<Vec<f64>>,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn row_error(file: &str, line: u64, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{file}: row {line}: {msg}"))
}

fn parse_number(file: &str, line: u64, column: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| row_error(file, line, format!("column '{column}': '{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(row_error(file, line, format!("column '{column}': non-finite value")));
    }
    Ok(v)
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input)
}

fn headers<R: Read>(rdr: &mut csv::Reader<R>, file: &str) -> Result<Vec<String>> {
    let h = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{file}: cannot read header: {e}")))?;
    Ok(h.iter().map(str::to_string).collect())
}

fn require(file: &str, headers: &[String], name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Data(format!("{file}: missing required column '{name}'")))
}

fn listed(keys: &[String]) -> String {
    let mut s = keys.iter().take(MAX_LISTED).cloned().collect::<Vec<_>>().join(", ");
    if keys.len() > MAX_LISTED {
        s.push_str(&format!(" and {} more", keys.len() - MAX_LISTED));
    }
    s
}

fn read_sites<R: Read>(input: R, file: &str) -> Result<SiteTable> {
    let mut rdr = reader(input);
    let hdr = headers(&mut rdr, file)?;
    let (ci, cx, cy) = (require(file, &hdr, "site_id")?, require(file, &hdr, "x")?, require(file, &hdr, "y")?);
    let cb = hdr.iter().position(|h| h == "block");
    let cov_cols: Vec<usize> = (0..hdr.len()).filter(|&c| ![Some(ci), Some(cx), Some(cy), cb].contains(&Some(c))).collect();
    let mut t = SiteTable {
        ids: Vec::new(),
        coords: Vec::new(),
        labels: cb.map(|_| Vec::new()),
        cov_names: cov_cols.iter().map(|&c| hdr[c].clone()).collect(),
        covs: Vec::new(),
    };
    let mut seen = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[ci].to_string();
        if id.is_empty() {
            return Err(row_error(file, line, "empty site_id"));
        }
        if let Some(prev) = seen.insert(id.clone(), line) {
            return Err(row_error(file, line, format!("site '{id}' already defined at row {prev}")));
        }
        t.coords.push([parse_number(file, line, "x", &rec[cx])?, parse_number(file, line, "y", &rec[cy])?]);
        if let (Some(c), Some(l)) = (cb, t.labels.as_mut()) {
            l.push(rec[c].to_string());
        }
        t.covs.push(
            cov_cols
                .iter()
                .map(|&c| parse_number(file, line, &hdr[c], &rec[c]))
                .collect::<Result<_>>()?,
        );
        t.ids.push(id);
    }
    if t.ids.len() < 2 {
        return Err(Error::Data(format!("{file}: need at least two sites, found {}", t.ids.len())));
    }
    Ok(t)
}

fn read_observations<R: Read>(
    input: R,
    file: &str,
    sites: &[String],
) -> Result<(Vec<String>, DMatrix<f64>)> {
    let site_index: HashMap<&str, usize> = sites.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut rdr = reader(input);
    let hdr = headers(&mut rdr, file)?;
    let (cr, cs, cv) = (
        require(file, &hdr, "replicate_id")?,
        require(file, &hdr, "site_id")?,
        require(file, &hdr, "value")?,
    );
    let mut reps: Vec<String> = Vec::new();
    let mut rep_index: HashMap<String, usize> = HashMap::new();
    let mut cells: HashMap<(usize, usize), (f64, u64)> = HashMap::new();
    let mut unknown: Vec<String> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let site = match site_index.get(&rec[cs]) {
            Some(&s) => s,
            None => {
                if !unknown.iter().any(|u| u == &rec[cs]) {
                    unknown.push(rec[cs].to_string());
                }
                continue;
            }
        };
        let value = parse_number(file, line, "value", &rec[cv])?;
        let next = reps.len();
        let rep = *rep_index.entry(rec[cr].to_string()).or_insert_with(|| {
            reps.push(rec[cr].to_string());
            next
        });
        if let Some((_, prev)) = cells.insert((rep, site), (value, line)) {
            return Err(row_error(
                file,
                line,
                format!("duplicate observation for replicate '{}' and site '{}' (first at row {prev})", &rec[cr], &rec[cs]),
            ));
        }
    }
    if !unknown.is_empty() {
        return Err(Error::Data(format!("{file}: unknown site_id values: {}", listed(&unknown))));
    }
    if reps.is_empty() {
        return Err(Error::Data(format!("{file}: no observations")));
    }
    let (n, d) = (reps.len(), sites.len());
    let mut obs = DMatrix::zeros(n, d);
    let mut missing = Vec::new();
    for i in 0..n {
        for j in 0..d {
            match cells.get(&(i, j)) {
                Some(&(v, _)) => obs[(i, j)] = v,
                None => missing.push(format!("({}, {})", reps[i], sites[j])),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{file}: {} (replicate, site) pairs have no observation: {}",
            missing.len(),
            listed(&missing)
        )));
    }
    Ok((reps, obs))
}

fn read_replicate_covariates<R: Read>(
    input: R,
    file: &str,
    reps: &[String],
) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = reader(input);
    let hdr = headers(&mut rdr, file)?;
    let cr = require(file, &hdr, "replicate_id")?;
    let cols: Vec<usize> = (0..hdr.len()).filter(|&c| c != cr).collect();
    if cols.is_empty() {
        return Err(Error::Data(format!("{file}: no covariate columns")));
    }
    let mut rows: HashMap<String, Vec<f64>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = cols
            .iter()
            .map(|&c| parse_number(file, line, &hdr[c], &rec[c]))
            .collect::<Result<Vec<_>>>()?;
        if rows.insert(rec[cr].to_string(), row).is_some() {
            return Err(row_error(file, line, format!("replicate '{}' listed twice", &rec[cr])));
        }
    }
    let missing: Vec<String> = reps.iter().filter(|r| !rows.contains_key(*r)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("{file}: no covariates for replicates {}", listed(&missing))));
    }
    let names = cols.iter().map(|&c| hdr[c].clone()).collect();
    Ok((names, reps.iter().map(|r| rows.remove(r).unwrap()).collect()))
}

fn file_name(p: &Path) -> String {
    p.display().to_string()
}

/// Read and validate the data files.
pub fn ingest(paths: &DataPaths) -> Result<Dataset> {
    let sf = file_name(&paths.sites);
    let of = file_name(&paths.observations);
    let sites = read_sites(open(&paths.sites)?, &sf)?;
    let (reps, obs) = read_observations(open(&paths.observations)?, &of, &sites.ids)?;
    let (rc_names, rc) = match &paths.replicate_covariates {
        Some(p) => read_replicate_covariates(open(p)?, &file_name(p), &reps)?,
        None => (Vec::new(), Vec::new()),
    };
    Ok(Dataset {
        site_ids: sites.ids,
        coords: sites.coords,
        block_labels: sites.labels,
        site_covariate_names: sites.cov_names,
        site_covariates: sites.covs,
        replicate_ids: reps,
        replicate_covariate_names: rc_names,
        replicate_covariates: rc,
        obs,
        standardization: None,
    })
}

/// Per-site level-`q` empirical quantiles, linearly interpolating between
/// order statistics at position `(n - 1) q`.
pub fn thresholds(obs: &DMatrix<f64>, q: f64) -> Result<Vec<f64>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("threshold quantile {q} outside (0, 1)")));
    }
    let n = obs.nrows();
    if n < 2 {
        return Err(Error::Data(format!("{n} observations per site; thresholds need at least 2")));
    }
    if n < FEW_OBSERVATIONS {
        log::warn!("only {n} observations per site; thresholds are unreliable");
    }
    Ok((0..obs.ncols())
        .map(|j| quantile(&obs.column(j).iter().copied().collect::<Vec<_>>(), q))
        .collect())
}

/// One term of a covariate formula.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    Intercept,
    X,
    Y,
    Site(usize),
    Replicate(usize),
}

/// How blocks are formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Near-square blocks of about this many sites.
    Grid { block_size: usize },
    /// Blocks from the sites file's `block` column.
    Label,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.obs.nrows()
    }

    pub fn d(&self) -> usize {
        self.obs.ncols()
    }

    /// Standardize every site in place, keeping the factors.
    pub fn standardize(&mut self) -> Result<()> {
        if self.standardization.is_some() {
            return Ok(());
        }
        let s = Standardization::fit(&self.obs)?;
        self.obs = s.apply_matrix(&self.obs);
        self.standardization = Some(s);
        Ok(())
    }

    /// Values on the original data scale.
    pub fn original_obs(&self) -> DMatrix<f64> {
        match &self.standardization {
            Some(s) => s.invert_matrix(&self.obs),
            None => self.obs.clone(),
        }
    }

    /// Parse a comma-separated formula such as `1,x,y,elevation`.
    pub fn parse_formula(&self, formula: &str) -> Result<Vec<Term>> {
        let mut terms = Vec::new();
        for raw in formula.split(',') {
            let name = raw.trim();
            let term = match name {
                "1" => Term::Intercept,
                "x" => Term::X,
                "y" => Term::Y,
                _ => {
                    if let Some(c) = self.site_covariate_names.iter().position(|h| h == name) {
                        Term::Site(c)
                    } else if let Some(c) = self.replicate_covariate_names.iter().position(|h| h == name) {
                        Term::Replicate(c)
                    } else {
                        return Err(Error::Config(format!("unknown covariate '{name}' in formula '{formula}'")));
                    }
                }
            };
            if terms.contains(&term) {
                return Err(Error::Config(format!("term '{name}' repeated in formula '{formula}'")));
            }
            terms.push(term);
        }
        Ok(terms)
    }

    fn term_value(&self, t: &Term, rep: usize, site: usize) -> f64 {
        match *t {
            Term::Intercept => 1.0,
            Term::X => self.coords[site][0],
            Term::Y => self.coords[site][1],
            Term::Site(c) => self.site_covariates[site][c],
            Term::Replicate(c) => self.replicate_covariates[rep][c],
        }
    }

    pub fn covariates(&self, formula: &str) -> Result<Covariates> {
        let terms = self.parse_formula(formula)?;
        let d = self.d();
        if terms.iter().any(|t| matches!(t, Term::Replicate(_))) {
            let n = self.n();
            let mut values = Vec::with_capacity(n * d * terms.len());
            for i in 0..n {
                for j in 0..d {
                    values.extend(terms.iter().map(|t| self.term_value(t, i, j)));
                }
            }
            Covariates::time_varying(n, d, terms.len(), values)
        } else {
            Ok(Covariates::from_site_fn(d, terms.len(), |j, c| self.term_value(&terms[c], 0, j)))
        }
    }

    pub fn design(&self, location: &str, log_scale: &str, shape: &str) -> Result<MarginalDesign> {
        MarginalDesign::new(self.covariates(location)?, self.covariates(log_scale)?, self.covariates(shape)?)
    }

    pub fn partition(&self, mode: &PartitionMode) -> Result<Partition> {
        match mode {
            PartitionMode::Grid { block_size } => partition_grid(&self.coords, *block_size),
            PartitionMode::Label => match &self.block_labels {
                Some(l) => partition_custom(l),
                None => Err(Error::Config("label partition requested but the sites file has no 'block' column".into())),
            },
        }
    }
}

/// Write `sites.csv` and `observations.csv` for the given values.
pub fn write_dataset(dir: &Path, site_ids: &[String], coords: &[[f64; 2]], obs: &DMatrix<f64>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("sites.csv"))?;
    w.write_record(["site_id", "x", "y"])?;
    for (id, c) in site_ids.iter().zip(coords) {
        w.write_record([id.clone(), c[0].to_string(), c[1].to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("observations.csv"))?;
    w.write_record(["replicate_id", "site_id", "value"])?;
    for i in 0..obs.nrows() {
        for (j, id) in site_ids.iter().enumerate() {
            w.write_record([(i + 1).to_string(), id.clone(), obs[(i, j)].to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write a value as pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sites_csv() -> &'static str {
        "site_id,x,y,block,elev\na,0,0,n,1.5\nb,1,0,n,2\nc,0,1,s,3\nd,1,1,s,4\n"
    }

    #[test]
    fn reads_sites_with_labels_and_covariates() {
        let t = read_sites(sites_csv().as_bytes(), "sites").unwrap();
        assert_eq!(t.ids, ["a", "b", "c", "d"]);
        assert_eq!(t.labels.unwrap(), ["n", "n", "s", "s"]);
        assert_eq!(t.cov_names, ["elev"]);
        assert_eq!(t.covs[1], [2.0]);
    }

    #[test]
    fn duplicate_site_names_row() {
        let e = read_sites("site_id,x,y\na,0,0\na,1,1\n".as_bytes(), "sites").unwrap_err();
        assert!(e.to_string().contains("row 3"), "{e}");
    }

    #[test]
    fn bad_number_names_row_and_column() {
        let e = read_sites("site_id,x,y\na,0,0\nb,zz,1\n".as_bytes(), "sites").unwrap_err();
        let s = e.to_string();
        assert!(s.contains("row 3") && s.contains("'x'"), "{s}");
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn observations_are_validated() {
        let ids: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let ok = "replicate_id,site_id,value\n1,a,1\n1,b,2\n2,b,4\n2,a,3\n";
        let (reps, obs) = read_observations(ok.as_bytes(), "obs", &ids).unwrap();
        assert_eq!(reps, ["1", "2"]);
        assert_eq!(obs, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));

        let empty = "replicate_id,site_id,value\n";
        assert!(read_observations(empty.as_bytes(), "obs", &ids).is_err());
        let dup = "replicate_id,site_id,value\n1,a,1\n1,a,2\n";
        assert!(read_observations(dup.as_bytes(), "obs", &ids).unwrap_err().to_string().contains("row 3"));
        let unknown = "replicate_id,site_id,value\n1,a,1\n1,zz,2\n1,b,2\n";
        assert!(read_observations(unknown.as_bytes(), "obs", &ids).unwrap_err().to_string().contains("zz"));
        let missing = "replicate_id,site_id,value\n1,a,1\n1,b,2\n2,a,3\n";
        assert!(read_observations(missing.as_bytes(), "obs", &ids).is_err());
        let no_header = "rep,site_id,value\n1,a,1\n";
        assert!(read_observations(no_header.as_bytes(), "obs", &ids).unwrap_err().to_string().contains("replicate_id"));
    }

    #[test]
    fn threshold_convention() {
        let obs = DMatrix::from_fn(100, 2, |i, j| if j == 0 { (i + 1) as f64 } else { 7.0 });
        let u = thresholds(&obs, 0.9).unwrap();
        assert!((u[0] - 90.1).abs() < 1e-12);
        assert_eq!(u[1], 7.0);
        for q in [0.85, 0.9, 0.95] {
            assert!(thresholds(&obs, q).is_ok());
        }
        assert_eq!(thresholds(&obs, 1.0).unwrap_err().exit_code(), 2);
        assert_eq!(thresholds(&DMatrix::zeros(1, 2), 0.5).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn standardization_round_trip() {
        let obs = DMatrix::from_fn(50, 3, |i, j| ((i * 7 + j * 3) % 11) as f64 * 1.7 + j as f64);
        let s = Standardization::fit(&obs).unwrap();
        let back = s.invert_matrix(&s.apply_matrix(&obs));
        assert!((back - &obs).abs().max() < 1e-12);
        assert!(Standardization::fit(&DMatrix::from_element(10, 1, 2.0)).is_err());
    }
}
