//! Logit lens: read an intermediate hidden state as a vocabulary distribution
//! by pushing it through the unembedding matrix, `E_l(k) = W_u · A_l(k)`.
//!
//! Dot products accumulate in `f64` regardless of the `f32` storage.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_store::{HiddenStateDump, UnembeddingMatrix};

/// A `(layer, position)` cell of a hidden-state dump. Orders by layer first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub layer: usize,
    pub position: usize,
}

impl Cell {
    pub const fn new(layer: usize, position: usize) -> Self {
        Self { layer, position }
    }
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "E_{}({})", self.layer, self.position)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabDistribution {
    pub values: Vec<f64>,
    pub normalized: bool,
}

pub(crate) fn dot(row: &[f32], state: &[f32]) -> f64 {
    row.iter()
        .zip(state)
        .map(|(&w, &s)| w as f64 * s as f64)
        .sum()
}

/// Raw logits for one hidden state.
pub fn project(state: &[f32], w: &UnembeddingMatrix) -> Result<VocabDistribution> {
    if state.len() != w.d_model {
        return Err(Error::shape(
            "logit-lens projection",
            w.d_model,
            state.len(),
        ));
    }
    let values = (0..w.vocab_size).map(|v| dot(w.row(v), state)).collect();
    Ok(VocabDistribution {
        values,
        normalized: false,
    })
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_values(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Normalizes raw logits. An already-normalized distribution is returned unchanged.
pub fn softmax(dist: &VocabDistribution) -> VocabDistribution {
    if dist.normalized {
        return dist.clone();
    }
    VocabDistribution {
        values: softmax_values(&dist.values),
        normalized: true,
    }
}

/// Projects the requested cells of a dump; `None` means every layer (or every
/// position). The result holds exactly the requested cells.
pub fn project_dump(
    dump: &HiddenStateDump,
    w: &UnembeddingMatrix,
    layers: Option<&[usize]>,
    positions: Option<&[usize]>,
    normalize: bool,
) -> Result<BTreeMap<Cell, VocabDistribution>> {
    if dump.d_model != w.d_model {
        return Err(Error::shape(
            "dump d_model vs unembedding",
            w.d_model,
            dump.d_model,
        ));
    }
    let layers: Vec<usize> = match layers {
        Some(ls) => ls.to_vec(),
        None => (0..dump.num_layers).collect(),
    };
    let positions: Vec<usize> = match positions {
        Some(ps) => ps.to_vec(),
        None => (0..dump.num_tokens).collect(),
    };
    if let Some(&l) = layers.iter().find(|&&l| l >= dump.num_layers) {
        return Err(Error::param(
            "layers",
            format!("layer {l} out of range (dump has {})", dump.num_layers),
        ));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= dump.num_tokens) {
        return Err(Error::param(
            "positions",
            format!("position {p} out of range (dump has {})", dump.num_tokens),
        ));
    }
    let cells: Vec<Cell> = layers
        .iter()
        .flat_map(|&l| positions.iter().map(move |&p| Cell::new(l, p)))
        .collect();
    cells
        .into_par_iter()
        .map(|cell| {
            let raw = project(dump.state(cell.layer, cell.position), w)?;
            let dist = if normalize { softmax(&raw) } else { raw };
            Ok((cell, dist))
        })
        .collect()
}

/// The target embedding of one image: its state at `cell`, projected and
/// (when `normalize`) softmaxed.
pub fn target_embedding(
    dump: &HiddenStateDump,
    w: &UnembeddingMatrix,
    cell: Cell,
    normalize: bool,
) -> Result<VocabDistribution> {
    if cell.layer >= dump.num_layers || cell.position >= dump.num_tokens {
        return Err(Error::Validation(format!(
            "dump `{}` has no cell {cell} ({} layers, {} tokens)",
            dump.image_id, dump.num_layers, dump.num_tokens
        )));
    }
    if dump.d_model != w.d_model {
        return Err(Error::shape(
            "dump d_model vs unembedding",
            w.d_model,
            dump.d_model,
        ));
    }
    let raw = project(dump.state(cell.layer, cell.position), w)?;
    Ok(if normalize { softmax(&raw) } else { raw })
}

/// The `k` largest entries, descending, ties broken toward the lower token id.
pub fn top_k(dist: &VocabDistribution, k: usize) -> Result<Vec<(usize, f64)>> {
    let v = dist.values.len();
    if k == 0 || k > v {
        return Err(Error::param("k", format!("must be in 1..={v}, got {k}")));
    }
    let mut order: Vec<usize> = (0..v).collect();
    let by_rank = |a: &usize, b: &usize| -> Ordering {
        dist.values[*b]
            .total_cmp(&dist.values[*a])
            .then_with(|| a.cmp(b))
    };
    if k < v {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_unstable_by(by_rank);
    Ok(order.into_iter().map(|i| (i, dist.values[i])).collect())
}

/// Whether `token` would appear in [`top_k`] of `values` without sorting.
pub(crate) fn in_top_k(values: &[f64], token: usize, k: usize) -> bool {
    let x = values[token];
    let ahead = values
        .iter()
        .enumerate()
        .filter(|&(i, &y)| y > x || (y == x && i < token))
        .count();
    ahead < k
}
