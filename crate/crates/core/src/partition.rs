//! Disjoint block structure over the observation sites.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of sites per block.
pub const DEFAULT_BLOCK_SIZE: usize = 25;

/// Blocks smaller than this trigger a warning.
const SMALL_BLOCK_WARNING: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// Block index (0-based) of every site.
    assignment: Vec<usize>,
    /// Sites of every block, ascending by site index.
    blocks: Vec<Vec<usize>>,
    /// Human-readable block labels.
    labels: Vec<String>,
}

impl Partition {
    /// Validate an assignment vector. Block indices must be dense `0..K`.
    pub fn from_assignment(assignment: Vec<usize>, labels: Option<Vec<String>>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(Error::Config("partition over zero sites".into()));
        }
        let k = assignment.iter().max().unwrap() + 1;
        let mut blocks = vec![Vec::new(); k];
        for (site, &b) in assignment.iter().enumerate() {
            blocks[b].push(site);
        }
        let labels = labels.unwrap_or_else(|| (1..=k).map(|b| b.to_string()).collect());
        if labels.len() != k {
            return Err(Error::Config(format!("{} labels for {k} blocks", labels.len())));
        }
        for (b, sites) in blocks.iter().enumerate() {
            match sites.len() {
                0 => return Err(Error::Config(format!("block '{}' is empty", labels[b]))),
                1 => {
                    return Err(Error::Config(format!(
                        "block '{}' has a single site; at least two are needed for a pair",
                        labels[b]
                    )))
                }
                n if n < SMALL_BLOCK_WARNING => {
                    log::warn!("block '{}' has only {n} sites", labels[b]);
                }
                _ => {}
            }
        }
        Ok(Self {
            assignment,
            blocks,
            labels,
        })
    }

    pub fn single_block(d: usize) -> Result<Self> {
        Self::from_assignment(vec![0; d], None)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_sites(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn block(&self, k: usize) -> &[usize] {
        &self.blocks[k]
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    pub fn block_of(&self, site: usize) -> Option<usize> {
        self.assignment.get(site).copied()
    }
}

fn chunk_sizes(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

/// Near-square blocks of roughly `target_block_size` sites.
///
/// The number of blocks is `K = max(1, floor(d / target))`. Sites are split
/// into `ceil(sqrt K)` strips along x holding `K` cells between them, with
/// strip sizes proportional to their cell counts; each strip is then cut
/// into cells of equal count along y.
pub fn partition_grid(sites: &[[f64; 2]], target_block_size: usize) -> Result<Partition> {
    let d = sites.len();
    if d < 2 {
        return Err(Error::Config(format!("need at least two sites, got {d}")));
    }
    if target_block_size < 2 {
        return Err(Error::Config("target block size must be at least 2".into()));
    }
    let k = (d / target_block_size).max(1);
    let cols = (k as f64).sqrt().ceil() as usize;
    let cells = chunk_sizes(k, cols);

    let by_xy = |a: &usize, b: &usize| {
        let (sa, sb) = (sites[*a], sites[*b]);
        sa[0].total_cmp(&sb[0]).then(sa[1].total_cmp(&sb[1]))
    };
    let by_yx = |a: &usize, b: &usize| {
        let (sa, sb) = (sites[*a], sites[*b]);
        sa[1].total_cmp(&sb[1]).then(sa[0].total_cmp(&sb[0]))
    };

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(by_xy);
    let mut assignment = vec![0; d];
    let mut block = 0;
    let mut cum = 0;
    for &c in &cells {
        let start = d * cum / k;
        cum += c;
        let end = d * cum / k;
        let mut strip = order[start..end].to_vec();
        strip.sort_by(by_yx);
        let mut s = 0;
        for cell_len in chunk_sizes(strip.len(), c) {
            for &site in &strip[s..s + cell_len] {
                assignment[site] = block;
            }
            s += cell_len;
            block += 1;
        }
    }
    Partition::from_assignment(assignment, None)
}

/// Blocks given by user labels, ordered by label.
pub fn partition_custom(labels: &[String]) -> Result<Partition> {
    if labels.is_empty() {
        return Err(Error::Config("no site labels".into()));
    }
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        let next = ids.len();
        ids.entry(l.as_str()).or_insert(next);
    }
    // Re-number in sorted label order.
    let names: Vec<String> = ids.keys().map(|s| s.to_string()).collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let assignment = labels.iter().map(|l| index[l.as_str()]).collect();
    Partition::from_assignment(assignment, Some(names))
}
