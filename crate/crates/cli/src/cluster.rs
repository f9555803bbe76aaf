use std::collections::BTreeMap;

use anyhow::Result;
use serde::Serialize;

use esmc_core::pseudo_head::{
    write_head, DEFAULT_EPOCHS, DEFAULT_HIDDEN, DEFAULT_LEARNING_RATE, DEFAULT_MOMENTUM,
};
use esmc_core::tensor_store::{read_embeddings, EmbeddingSet};
use esmc_core::{cluster_pipeline, PipelineConfig};

use crate::config::{input, required, FileConfig};
use crate::output::{write_json, Outputs};
use crate::{ClusterArgs, TrainArgs};

pub const DEFAULT_ALPHA: f64 = 0.1;

/// Everything but alpha and seed, which sweeps vary.
pub fn pipeline_config(k: usize, train: &TrainArgs, file: &FileConfig) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(k, DEFAULT_ALPHA, 0);
    cfg.train.epochs = train.epochs.or(file.epochs).unwrap_or(DEFAULT_EPOCHS);
    cfg.train.learning_rate = train
        .learning_rate
        .or(file.learning_rate)
        .unwrap_or(DEFAULT_LEARNING_RATE);
    cfg.train.momentum = train.momentum.or(file.momentum).unwrap_or(DEFAULT_MOMENTUM);
    cfg.train.hidden = train.hidden.or(file.hidden).unwrap_or(DEFAULT_HIDDEN);
    cfg.max_iters = train.max_iters.or(file.max_iters).unwrap_or(cfg.max_iters);
    cfg.tol = train.tol.or(file.tol).unwrap_or(cfg.tol);
    cfg
}

pub fn with_alpha_seed(mut cfg: PipelineConfig, alpha: f64, seed: u64) -> PipelineConfig {
    cfg.alpha = alpha;
    cfg.seed = seed;
    cfg.train.seed = seed;
    cfg
}

pub fn check(cfg: &PipelineConfig, set: &EmbeddingSet) -> Result<()> {
    anyhow::ensure!(cfg.k >= 1, "--k must be at least 1");
    anyhow::ensure!(
        cfg.k <= set.len(),
        "--k {} exceeds the number of embeddings ({})",
        cfg.k,
        set.len()
    );
    anyhow::ensure!(
        cfg.alpha > 0.0 && cfg.alpha <= 1.0,
        "--alpha must lie in (0, 1], got {}",
        cfg.alpha
    );
    cfg.train.validate()?;
    Ok(())
}

#[derive(Serialize)]
pub struct RunRecord {
    pub embeddings: String,
    pub feature: String,
    pub layer: usize,
    pub position: usize,
    pub normalized: bool,
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    pub skip_head: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub max_iters: usize,
    pub tol: f64,
}

#[derive(Serialize)]
struct History {
    kmeans_iterations: usize,
    kmeans_inertia: Vec<f64>,
    head_loss: Vec<f64>,
}

#[derive(Serialize)]
struct PseudoEntry<'a> {
    row: usize,
    image_id: &'a str,
    cluster: usize,
}

#[derive(Serialize)]
struct PseudoManifest<'a> {
    alpha: f64,
    count: usize,
    per_cluster: BTreeMap<usize, usize>,
    entries: Vec<PseudoEntry<'a>>,
}

pub fn run(args: ClusterArgs, file: FileConfig) -> Result<()> {
    let emb_dir = input(args.embeddings, file.embeddings.clone(), "embeddings")?;
    let out = required(args.out, file.out.clone(), "out")?;
    let k = required(args.k, file.k, "k")?;
    let alpha = args.train.alpha.or(file.alpha).unwrap_or(DEFAULT_ALPHA);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let mut cfg = with_alpha_seed(pipeline_config(k, &args.train, &file), alpha, seed);
    cfg.skip_head = args.skip_head || file.skip_head == Some(true);

    let set = read_embeddings(&emb_dir)?;
    check(&cfg, &set)?;
    let x = set.to_matrix();
    let result = cluster_pipeline(x.view(), &cfg)?;

    let mut outputs = Outputs::new(&out)?;
    let path = outputs.artifact("assignments.csv");
    let mut csv = csv::Writer::from_path(&path)?;
    csv.write_record(["image_id", "cluster"])?;
    for (id, label) in set.image_ids.iter().zip(&result.labels) {
        csv.write_record([id.as_str(), &label.to_string()])?;
    }
    csv.flush()?;

    write_json(
        &outputs.artifact("history.json"),
        &History {
            kmeans_iterations: result.kmeans.iterations_run,
            kmeans_inertia: result.kmeans.inertia_history.clone(),
            head_loss: result.loss_history.clone(),
        },
    )?;
    if let Some(pseudo) = &result.pseudo {
        let mut per_cluster = BTreeMap::new();
        for &c in &pseudo.labels {
            *per_cluster.entry(c).or_insert(0) += 1;
        }
        let entries = pseudo
            .indices
            .iter()
            .zip(&pseudo.labels)
            .map(|(&row, &cluster)| PseudoEntry {
                row,
                image_id: &set.image_ids[row],
                cluster,
            })
            .collect();
        write_json(
            &outputs.artifact("pseudo_labels.json"),
            &PseudoManifest {
                alpha: pseudo.alpha,
                count: pseudo.len(),
                per_cluster,
                entries,
            },
        )?;
    }
    if let Some(head) = &result.head {
        write_head(head, &outputs.artifact("head"))?;
    }
    write_json(
        &outputs.artifact("run.json"),
        &RunRecord {
            embeddings: emb_dir.display().to_string(),
            feature: set.source.feature.clone(),
            layer: set.source.layer,
            position: set.source.position,
            normalized: set.normalized,
            n: set.len(),
            k,
            alpha,
            seed,
            skip_head: cfg.skip_head,
            epochs: cfg.train.epochs,
            learning_rate: cfg.train.learning_rate,
            momentum: cfg.train.momentum,
            hidden: cfg.train.hidden,
            max_iters: cfg.max_iters,
            tol: cfg.tol,
        },
    )?;
    outputs.commit();

    let mut sizes = vec![0usize; k];
    for &l in &result.labels {
        sizes[l] += 1;
    }
    println!(
        "{} rows into {k} clusters (sizes {:?}); K-means {} iterations, inertia {:.6}",
        set.len(),
        sizes,
        result.kmeans.iterations_run,
        result.kmeans.inertia
    );
    if let (Some(first), Some(last)) = (result.loss_history.first(), result.loss_history.last()) {
        println!(
            "head loss {first:.6} -> {last:.6} over {} epochs",
            result.loss_history.len()
        );
    }
    Ok(())
}
