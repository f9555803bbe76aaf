//! Seeded Lloyd K-means with k-means++ initialization.
//!
//! Runs in `f64` throughout. Each iteration recomputes centroids as member
//! means, then reassigns every row to its nearest centroid (ties to the lower
//! cluster id). A cluster left empty by reassignment takes the point farthest
//! from its own centroid among clusters that can spare one. Iteration stops at
//! an assignment fixpoint, when no centroid moves by `tol` or more, or after
//! `max_iters` centroid updates. The returned centroids are always the means of
//! the returned assignments.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const DEFAULT_MAX_ITERS: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    /// `[k][dim]`
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances of each row to its own centroid.
    pub inertia: f64,
    pub iterations_run: usize,
    pub seed: u64,
    /// Inertia after every centroid update, in order.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

pub(crate) fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(x: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Result<()> {
    if x.ncols() != centroids.ncols() {
        return Err(Error::shape(
            "centroid dimension",
            x.ncols(),
            centroids.ncols(),
        ));
    }
    Ok(())
}

/// `[n][k]` squared Euclidean distances.
pub fn sq_distances(x: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_dims(x, centroids)?;
    Ok(Array2::from_shape_fn(
        (x.nrows(), centroids.nrows()),
        |(i, j)| sq_dist(x.row(i), centroids.row(j)),
    ))
}

fn nearest(row: ArrayView1<f64>, centroids: ArrayView2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Nearest-centroid labels; ties go to the lowest cluster id.
pub fn assign(x: ArrayView2<f64>, centroids: ArrayView2<f64>) -> Result<Vec<usize>> {
    check_dims(x, centroids)?;
    if centroids.nrows() == 0 {
        return Err(Error::param("centroids", "need at least one centroid"));
    }
    Ok(x.rows()
        .into_iter()
        .map(|r| nearest(r, centroids).0)
        .collect())
}

fn kmeans_plus_plus(x: ArrayView2<f64>, k: usize, rng: &mut SplitMix64) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    let first = rng.below(n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut min_d: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| sq_dist(r, x.row(first)))
        .collect();
    for j in 1..k {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in min_d.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `target` just past the final partial sum.
            pick.unwrap_or_else(|| min_d.iter().rposition(|&d| d > 0.0).unwrap_or(0))
        } else {
            rng.below(n)
        };
        centroids.row_mut(j).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(r, x.row(pick)));
        }
    }
    centroids
}

/// Assigns rows to nearest centroids, then refills any empty cluster with the
/// point farthest from its current centroid, taken from a cluster of size >= 2.
fn assign_and_repair(x: ArrayView2<f64>, centroids: &mut Array2<f64>) -> Vec<usize> {
    let k = centroids.nrows();
    let mut assignments = Vec::with_capacity(x.nrows());
    let mut own_d = Vec::with_capacity(x.nrows());
    for r in x.rows() {
        let (j, d) = nearest(r, centroids.view());
        assignments.push(j);
        own_d.push(d);
    }
    let mut sizes = vec![0usize; k];
    for &a in &assignments {
        sizes[a] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let mut donor: Option<usize> = None;
        for i in 0..x.nrows() {
            if sizes[assignments[i]] < 2 {
                continue;
            }
            if donor.map_or(true, |d| own_d[i] > own_d[d]) {
                donor = Some(i);
            }
        }
        let Some(i) = donor else { break };
        sizes[assignments[i]] -= 1;
        sizes[empty] += 1;
        assignments[i] = empty;
        own_d[i] = 0.0;
        centroids.row_mut(empty).assign(&x.row(i));
    }
    assignments
}

fn member_means(x: ArrayView2<f64>, assignments: &[usize], previous: &Array2<f64>) -> Array2<f64> {
    let k = previous.nrows();
    let mut sums = Array2::<f64>::zeros((k, x.ncols()));
    let mut sizes = vec![0usize; k];
    for (r, &a) in x.rows().into_iter().zip(assignments) {
        let mut s = sums.row_mut(a);
        s += &r;
        sizes[a] += 1;
    }
    for (j, mut row) in sums.axis_iter_mut(Axis(0)).enumerate() {
        if sizes[j] == 0 {
            row.assign(&previous.row(j));
        } else {
            row /= sizes[j] as f64;
        }
    }
    sums
}

pub(crate) fn objective(
    x: ArrayView2<f64>,
    centroids: ArrayView2<f64>,
    assignments: &[usize],
) -> f64 {
    x.rows()
        .into_iter()
        .zip(assignments)
        .map(|(r, &a)| sq_dist(r, centroids.row(a)))
        .sum()
}

pub fn kmeans_fit(x: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<ClusterModel> {
    let n = x.nrows();
    if cfg.k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    if n < cfg.k {
        return Err(Error::param(
            "k",
            format!("cannot form {} clusters from {n} rows", cfg.k),
        ));
    }
    if cfg.max_iters == 0 {
        return Err(Error::param("max_iters", "must be at least 1"));
    }
    if let Some(i) = x
        .rows()
        .into_iter()
        .position(|r| r.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Validation(format!("row {i} has a non-finite entry")));
    }

    let mut rng = SplitMix64::new(cfg.seed);
    let mut centroids = kmeans_plus_plus(x, cfg.k, &mut rng);
    let mut assignments = assign_and_repair(x, &mut centroids);
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let updated = member_means(x, &assignments, &centroids);
        iterations += 1;
        history.push(objective(x, updated.view(), &assignments));
        let shift = updated
            .rows()
            .into_iter()
            .zip(centroids.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if iterations >= cfg.max_iters || shift < cfg.tol {
            break;
        }
        let mut trial = centroids.clone();
        let next = assign_and_repair(x, &mut trial);
        if next == assignments {
            break;
        }
        centroids = trial;
        assignments = next;
    }

    let inertia = *history.last().expect("at least one iteration");
    Ok(ClusterModel {
        k: cfg.k,
        centroids,
        assignments,
        inertia,
        iterations_run: iterations,
        seed: cfg.seed,
        inertia_history: history,
    })
}
