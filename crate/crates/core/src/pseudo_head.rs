//! Pseudo-label clustering head.
//!
//! K-means provides initial clusters. Within each cluster the `alpha` fraction
//! of members closest to the centroid (at least one) become pseudo-labeled
//! training rows. A two-layer rectifier MLP, `|V| -> hidden -> K`, is fit to
//! them with mean cross-entropy and full-batch momentum descent, and its
//! argmax over every row is the final partition.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kmeans::{kmeans_fit, sq_dist, ClusterModel, KMeansConfig};
use crate::rng::SplitMix64;
use crate::tensor_store::{
    encode_f32_le, ensure_dir, read_f32_blob, read_json, write_bytes, write_json,
};

pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

const HEAD_INIT_STREAM: u64 = 0x4845_4144; // "HEAD"

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    /// Row indices into the embedding matrix, grouped by cluster, closest first.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub alpha: f64,
}

impl PseudoLabelSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// How many of `size` members an `alpha` fraction keeps: `max(1, ceil(alpha * size))`.
///
/// The product is nudged down by 1e-9 before rounding up so that, e.g.,
/// `0.3 * 10` (which is `3.0000000000000004` in binary) keeps 3 rather than 4.
pub fn pseudo_count(alpha: f64, size: usize) -> usize {
    if size == 0 {
        return 0;
    }
    let raw = (alpha * size as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(size)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::param(
            "alpha",
            format!("must lie in (0, 1], got {alpha}"),
        ));
    }
    Ok(())
}

pub fn select_pseudo_labels(
    x: ArrayView2<f64>,
    model: &ClusterModel,
    alpha: f64,
) -> Result<PseudoLabelSet> {
    check_alpha(alpha)?;
    if model.assignments.len() != x.nrows() {
        return Err(Error::shape(
            "cluster assignments vs rows",
            x.nrows(),
            model.assignments.len(),
        ));
    }
    if model.centroids.ncols() != x.ncols() {
        return Err(Error::shape(
            "centroid dimension",
            x.ncols(),
            model.centroids.ncols(),
        ));
    }
    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); model.k];
    for (i, (row, &c)) in x.rows().into_iter().zip(&model.assignments).enumerate() {
        if c >= model.k {
            return Err(Error::Validation(format!(
                "row {i} assigned to cluster {c} >= k"
            )));
        }
        members[c].push((sq_dist(row, model.centroids.row(c)), i));
    }
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    for (cluster, mut m) in members.into_iter().enumerate() {
        m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let keep = pseudo_count(alpha, m.len());
        for &(_, i) in &m[..keep] {
            indices.push(i);
            labels.push(cluster);
        }
    }
    Ok(PseudoLabelSet {
        indices,
        labels,
        alpha,
    })
}

/// Weights of the clustering head. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `[hidden][input]`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `[classes][hidden]`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl HeadParams {
    pub fn zeros(input: usize, hidden: usize, classes: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((classes, hidden)),
            b2: Array1::zeros(classes),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases of each layer.
    pub fn init(input: usize, hidden: usize, classes: usize, rng: &mut SplitMix64) -> Self {
        let mut p = Self::zeros(input, hidden, classes);
        let b = 1.0 / (input as f64).sqrt();
        p.w1.mapv_inplace(|_| rng.random_range(-b..b));
        p.b1.mapv_inplace(|_| rng.random_range(-b..b));
        let b = 1.0 / (hidden as f64).sqrt();
        p.w2.mapv_inplace(|_| rng.random_range(-b..b));
        p.b2.mapv_inplace(|_| rng.random_range(-b..b));
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|v| v.is_finite())
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden_dim();
        if self.b1.len() != h {
            return Err(Error::shape("head b1", h, self.b1.len()));
        }
        if self.w2.ncols() != h {
            return Err(Error::shape("head w2 columns", h, self.w2.ncols()));
        }
        if self.b2.len() != self.num_classes() {
            return Err(Error::shape("head b2", self.num_classes(), self.b2.len()));
        }
        Ok(())
    }

    fn axpy(&mut self, scale: f64, other: &HeadParams) {
        self.w1.scaled_add(scale, &other.w1);
        self.b1.scaled_add(scale, &other.b1);
        self.w2.scaled_add(scale, &other.w2);
        self.b2.scaled_add(scale, &other.b2);
    }

    fn scale(&mut self, factor: f64) {
        self.w1 *= factor;
        self.b1 *= factor;
        self.w2 *= factor;
        self.b2 *= factor;
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadManifest {
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    activation: String,
    layout: String,
}

/// Persists the head as `manifest.json` plus `w1.bin`, `b1.bin`, `w2.bin`,
/// `b2.bin` (row-major little-endian `f32`). Weights are narrowed from `f64`.
pub fn write_head(params: &HeadParams, dir: &Path) -> Result<()> {
    params.validate()?;
    ensure_dir(dir)?;
    let manifest = HeadManifest {
        input_dim: params.input_dim(),
        hidden_dim: params.hidden_dim(),
        num_classes: params.num_classes(),
        activation: "relu".into(),
        layout: "row_major_f32_le".into(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    let blob = |values: &mut dyn Iterator<Item = &f64>| -> Vec<u8> {
        encode_f32_le(&values.map(|&v| v as f32).collect::<Vec<_>>())
    };
    write_bytes(&dir.join("w1.bin"), &blob(&mut params.w1.iter()))?;
    write_bytes(&dir.join("b1.bin"), &blob(&mut params.b1.iter()))?;
    write_bytes(&dir.join("w2.bin"), &blob(&mut params.w2.iter()))?;
    write_bytes(&dir.join("b2.bin"), &blob(&mut params.b2.iter()))
}

pub fn read_head(dir: &Path) -> Result<HeadParams> {
    let m: HeadManifest = read_json(&dir.join("manifest.json"))?;
    let widen = |v: Vec<f32>| -> Vec<f64> { v.into_iter().map(f64::from).collect() };
    let w1 = widen(read_f32_blob(
        &dir.join("w1.bin"),
        m.hidden_dim * m.input_dim,
    )?);
    let b1 = widen(read_f32_blob(&dir.join("b1.bin"), m.hidden_dim)?);
    let w2 = widen(read_f32_blob(
        &dir.join("w2.bin"),
        m.num_classes * m.hidden_dim,
    )?);
    let b2 = widen(read_f32_blob(&dir.join("b2.bin"), m.num_classes)?);
    let shape_err = |e: ndarray::ShapeError| Error::format(dir, e.to_string());
    Ok(HeadParams {
        w1: Array2::from_shape_vec((m.hidden_dim, m.input_dim), w1).map_err(shape_err)?,
        b1: Array1::from(b1),
        w2: Array2::from_shape_vec((m.num_classes, m.hidden_dim), w2).map_err(shape_err)?,
        b2: Array1::from(b2),
    })
}

struct Forward {
    pre: Array2<f64>,
    hidden: Array2<f64>,
    scores: Array2<f64>,
}

fn forward_batch(p: &HeadParams, x: ArrayView2<f64>) -> Forward {
    let pre = x.dot(&p.w1.t()) + &p.b1;
    let hidden = pre.mapv(|v| v.max(0.0));
    let scores = hidden.dot(&p.w2.t()) + &p.b2;
    Forward {
        pre,
        hidden,
        scores,
    }
}

/// Class scores `W2 · relu(W1 · x + b1) + b2` for a batch of rows.
pub fn head_scores(params: &HeadParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    params.validate()?;
    if x.ncols() != params.input_dim() {
        return Err(Error::shape("head input", params.input_dim(), x.ncols()));
    }
    Ok(forward_batch(params, x).scores)
}

/// Class scores for a single row.
pub fn head_forward(params: &HeadParams, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    let batch = x.insert_axis(Axis(0));
    Ok(head_scores(params, batch)?.row(0).to_owned())
}

fn gather(x: ArrayView2<f64>, pseudo: &PseudoLabelSet, classes: usize) -> Result<Array2<f64>> {
    if pseudo.is_empty() {
        return Err(Error::param("pseudo", "pseudo-label set is empty"));
    }
    if pseudo.labels.len() != pseudo.indices.len() {
        return Err(Error::shape(
            "pseudo labels",
            pseudo.indices.len(),
            pseudo.labels.len(),
        ));
    }
    if let Some(&i) = pseudo.indices.iter().find(|&&i| i >= x.nrows()) {
        return Err(Error::param("pseudo", format!("row {i} out of range")));
    }
    if let Some(&c) = pseudo.labels.iter().find(|&&c| c >= classes) {
        return Err(Error::param(
            "pseudo",
            format!("label {c} >= {classes} classes"),
        ));
    }
    Ok(x.select(Axis(0), &pseudo.indices))
}

fn row_log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&s| (s - max).exp()).sum::<f64>().ln()
}

fn mean_cross_entropy(scores: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = scores
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| row_log_sum_exp(row) - row[y])
        .sum();
    total / labels.len() as f64
}

/// Mean of `-log softmax(scores)[label]` over the pseudo-labeled rows.
pub fn head_loss(params: &HeadParams, x: ArrayView2<f64>, pseudo: &PseudoLabelSet) -> Result<f64> {
    params.validate()?;
    let batch = gather(x, pseudo, params.num_classes())?;
    let scores = head_scores(params, batch.view())?;
    Ok(mean_cross_entropy(&scores, &pseudo.labels))
}

fn loss_and_grad(
    params: &HeadParams,
    batch: ArrayView2<f64>,
    labels: &[usize],
) -> (f64, HeadParams) {
    let fwd = forward_batch(params, batch);
    let m = labels.len() as f64;
    let loss = mean_cross_entropy(&fwd.scores, labels);

    // d loss / d scores = (softmax - onehot) / m
    let mut d_scores = fwd.scores;
    for (mut row, &y) in d_scores.rows_mut().into_iter().zip(labels) {
        let lse = row_log_sum_exp(row.view());
        row.mapv_inplace(|s| (s - lse).exp());
        row[y] -= 1.0;
        row /= m;
    }
    let w2 = d_scores.t().dot(&fwd.hidden);
    let b2 = d_scores.sum_axis(Axis(0));
    let mut d_pre = d_scores.dot(&params.w2);
    Zip::from(&mut d_pre).and(&fwd.pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    let w1 = d_pre.t().dot(&batch);
    let b1 = d_pre.sum_axis(Axis(0));
    (loss, HeadParams { w1, b1, w2, b2 })
}

/// Analytic gradient of [`head_loss`]; the rectifier's derivative at 0 is taken as 0.
pub fn head_grad(
    params: &HeadParams,
    x: ArrayView2<f64>,
    pseudo: &PseudoLabelSet,
) -> Result<HeadParams> {
    params.validate()?;
    let batch = gather(x, pseudo, params.num_classes())?;
    if batch.ncols() != params.input_dim() {
        return Err(Error::shape(
            "head input",
            params.input_dim(),
            batch.ncols(),
        ));
    }
    Ok(loss_and_grad(params, batch.view(), &pseudo.labels).1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum: DEFAULT_MOMENTUM,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", "must lie in [0, 1)"));
        }
        if self.hidden == 0 {
            return Err(Error::param("hidden", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedHead {
    pub params: HeadParams,
    /// Full-batch loss before each epoch's update.
    pub loss_history: Vec<f64>,
}

/// Heavy-ball descent: `v <- momentum * v + grad; theta <- theta - lr * v`.
pub fn train_head(
    x: ArrayView2<f64>,
    pseudo: &PseudoLabelSet,
    k: usize,
    cfg: &TrainConfig,
) -> Result<TrainedHead> {
    cfg.validate()?;
    if k < 2 {
        return Err(Error::param("k", "the head needs at least 2 clusters"));
    }
    let batch = gather(x, pseudo, k)?;
    let mut rng = SplitMix64::fork(cfg.seed, HEAD_INIT_STREAM);
    let mut params = HeadParams::init(x.ncols(), cfg.hidden, k, &mut rng);
    let mut velocity = HeadParams::zeros(x.ncols(), cfg.hidden, k);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = loss_and_grad(&params, batch.view(), &pseudo.labels);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        history.push(loss);
        velocity.scale(cfg.momentum);
        velocity.axpy(1.0, &grad);
        params.axpy(-cfg.learning_rate, &velocity);
    }
    if !params.is_finite() {
        return Err(Error::Diverged { epoch: cfg.epochs });
    }
    Ok(TrainedHead {
        params,
        loss_history: history,
    })
}

/// Row-wise argmax with ties to the lower class.
pub fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub train: TrainConfig,
    /// Report the K-means assignments without training the head.
    pub skip_head: bool,
}

impl PipelineConfig {
    /// Defaults for everything but `k`, `alpha`, and `seed`.
    pub fn new(k: usize, alpha: f64, seed: u64) -> Self {
        Self {
            k,
            alpha,
            seed,
            max_iters: crate::kmeans::DEFAULT_MAX_ITERS,
            tol: crate::kmeans::DEFAULT_TOL,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            skip_head: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub labels: Vec<usize>,
    pub kmeans: ClusterModel,
    pub pseudo: Option<PseudoLabelSet>,
    pub head: Option<HeadParams>,
    pub loss_history: Vec<f64>,
}

/// K-means, pseudo-label harvest, head training, and prediction on every row.
pub fn cluster_pipeline(x: ArrayView2<f64>, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    check_alpha(cfg.alpha)?;
    let kmeans = kmeans_fit(
        x,
        &KMeansConfig {
            k: cfg.k,
            seed: cfg.seed,
            max_iters: cfg.max_iters,
            tol: cfg.tol,
        },
    )?;
    if cfg.k == 1 || cfg.skip_head {
        return Ok(PipelineOutput {
            labels: kmeans.assignments.clone(),
            kmeans,
            pseudo: None,
            head: None,
            loss_history: Vec::new(),
        });
    }
    let pseudo = select_pseudo_labels(x, &kmeans, cfg.alpha)?;
    let trained = train_head(x, &pseudo, cfg.k, &cfg.train)?;
    let labels = argmax_rows(&head_scores(&trained.params, x)?);
    Ok(PipelineOutput {
        labels,
        kmeans,
        pseudo: Some(pseudo),
        head: Some(trained.params),
        loss_history: trained.loss_history,
    })
}
