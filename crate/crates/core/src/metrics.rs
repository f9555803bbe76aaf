//! External partition metrics: normalized mutual information and Rand index.
//!
//! Both are computed from the contingency table, so cost is `O(n + R·C)`.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Co-occurrence counts of two labelings. Rows follow the sorted distinct
/// labels of the first argument, columns those of the second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contingency {
    pub table: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

fn dense_ids<T: Ord + Hash + Clone>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut distinct: Vec<&T> = labels.iter().collect();
    distinct.sort();
    distinct.dedup();
    let index: HashMap<&T, usize> = distinct.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    (labels.iter().map(|l| index[l]).collect(), distinct.len())
}

pub fn contingency<A, B>(pred: &[A], truth: &[B]) -> Result<Contingency>
where
    A: Ord + Hash + Clone,
    B: Ord + Hash + Clone,
{
    if pred.len() != truth.len() {
        return Err(Error::shape("label vectors", pred.len(), truth.len()));
    }
    let (rows, r) = dense_ids(pred);
    let (cols, c) = dense_ids(truth);
    let mut table = vec![vec![0u64; c]; r];
    for (&i, &j) in rows.iter().zip(&cols) {
        table[i][j] += 1;
    }
    let row_sums = table.iter().map(|row| row.iter().sum()).collect();
    let col_sums = (0..c)
        .map(|j| table.iter().map(|row| row[j]).sum())
        .collect();
    Ok(Contingency {
        table,
        row_sums,
        col_sums,
        n: pred.len() as u64,
    })
}

impl Contingency {
    fn entropy(counts: &[u64], n: f64) -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }

    pub fn row_entropy(&self) -> f64 {
        Self::entropy(&self.row_sums, self.n as f64)
    }

    pub fn col_entropy(&self) -> f64 {
        Self::entropy(&self.col_sums, self.n as f64)
    }

    pub fn mutual_information(&self) -> f64 {
        let n = self.n as f64;
        let mut mi = 0.0;
        for (i, row) in self.table.iter().enumerate() {
            for (j, &nij) in row.iter().enumerate() {
                if nij == 0 {
                    continue;
                }
                let nij = nij as f64;
                let expected = self.row_sums[i] as f64 * self.col_sums[j] as f64;
                mi += nij / n * (n * nij / expected).ln();
            }
        }
        mi.max(0.0)
    }

    /// Every row and every column has exactly one nonzero cell.
    fn is_bijection(&self) -> bool {
        self.table.len() == self.col_sums.len()
            && self
                .table
                .iter()
                .all(|r| r.iter().filter(|&&c| c > 0).count() == 1)
            && (0..self.col_sums.len()).all(|j| self.table.iter().filter(|r| r[j] > 0).count() == 1)
    }
}

/// Which mean of the two entropies divides the mutual information.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmiNormalization {
    #[default]
    Arithmetic,
    Geometric,
    Max,
}

impl std::str::FromStr for NmiNormalization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "arithmetic" => Ok(Self::Arithmetic),
            "geometric" => Ok(Self::Geometric),
            "max" => Ok(Self::Max),
            other => Err(format!(
                "unknown NMI normalization `{other}` (arithmetic, geometric, max)"
            )),
        }
    }
}

impl std::fmt::Display for NmiNormalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Arithmetic => "arithmetic",
            Self::Geometric => "geometric",
            Self::Max => "max",
        })
    }
}

pub fn nmi_from_contingency(table: &Contingency, norm: NmiNormalization) -> f64 {
    let hu = table.row_entropy();
    let hv = table.col_entropy();
    match (hu == 0.0, hv == 0.0) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    if table.is_bijection() {
        return 1.0;
    }
    let denom = match norm {
        NmiNormalization::Arithmetic => 0.5 * (hu + hv),
        NmiNormalization::Geometric => (hu * hv).sqrt(),
        NmiNormalization::Max => hu.max(hv),
    };
    (table.mutual_information() / denom).clamp(0.0, 1.0)
}

/// NMI with arithmetic-mean normalization and natural logs.
pub fn nmi<A, B>(pred: &[A], truth: &[B]) -> Result<f64>
where
    A: Ord + Hash + Clone,
    B: Ord + Hash + Clone,
{
    nmi_with(pred, truth, NmiNormalization::Arithmetic)
}

pub fn nmi_with<A, B>(pred: &[A], truth: &[B], norm: NmiNormalization) -> Result<f64>
where
    A: Ord + Hash + Clone,
    B: Ord + Hash + Clone,
{
    if pred.is_empty() {
        return Err(Error::param("labels", "need at least one label"));
    }
    Ok(nmi_from_contingency(&contingency(pred, truth)?, norm))
}

fn pairs(c: u64) -> u128 {
    let c = c as u128;
    c * c.saturating_sub(1) / 2
}

pub fn rand_index_from_contingency(table: &Contingency) -> Result<f64> {
    if table.n < 2 {
        return Err(Error::param(
            "labels",
            "the Rand index needs at least 2 items",
        ));
    }
    let total = pairs(table.n);
    let together_both: u128 = table.table.iter().flatten().map(|&c| pairs(c)).sum();
    let together_pred: u128 = table.row_sums.iter().map(|&c| pairs(c)).sum();
    let together_truth: u128 = table.col_sums.iter().map(|&c| pairs(c)).sum();
    let apart_both = total + together_both - together_pred - together_truth;
    Ok((together_both + apart_both) as f64 / total as f64)
}

/// Fraction of item pairs on which the two partitions agree.
pub fn rand_index<A, B>(pred: &[A], truth: &[B]) -> Result<f64>
where
    A: Ord + Hash + Clone,
    B: Ord + Hash + Clone,
{
    rand_index_from_contingency(&contingency(pred, truth)?)
}

/// Run settings echoed into an evaluation report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunEcho {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skip_head: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub criterion: String,
    pub nmi: f64,
    pub nmi_normalization: NmiNormalization,
    pub rand_index: f64,
    pub n: usize,
    pub predicted_cluster_sizes: BTreeMap<String, usize>,
    pub truth_cluster_sizes: BTreeMap<String, usize>,
    pub config: RunEcho,
}

fn sizes<T: ToString>(labels: &[T]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for l in labels {
        *out.entry(l.to_string()).or_insert(0) += 1;
    }
    out
}

pub fn evaluate<A, B>(
    criterion: &str,
    pred: &[A],
    truth: &[B],
    norm: NmiNormalization,
    config: RunEcho,
) -> Result<EvalReport>
where
    A: Ord + Hash + Clone + ToString,
    B: Ord + Hash + Clone + ToString,
{
    let table = contingency(pred, truth)?;
    Ok(EvalReport {
        criterion: criterion.to_string(),
        nmi: nmi_from_contingency(&table, norm),
        nmi_normalization: norm,
        rand_index: rand_index_from_contingency(&table)?,
        n: pred.len(),
        predicted_cluster_sizes: sizes(pred),
        truth_cluster_sizes: sizes(truth),
        config,
    })
}
