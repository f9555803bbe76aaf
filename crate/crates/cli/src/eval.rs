use std::path::Path;

use anyhow::{Context, Result};

use esmc_core::metrics::{evaluate, EvalReport, NmiNormalization, RunEcho};
use esmc_core::tensor_store::read_labels;

use crate::config::{input, required, FileConfig};
use crate::output::{write_json, Outputs};
use crate::EvalArgs;

pub fn nmi_norm(flag: Option<String>, file: Option<String>) -> Result<NmiNormalization> {
    match flag.or(file) {
        Some(s) => s.parse().map_err(|e| anyhow::anyhow!("--nmi-norm: {e}")),
        None => Ok(NmiNormalization::default()),
    }
}

/// Ground-truth label of every id under `criterion`, in the order given.
pub fn truth_for(labels: &Path, criterion: &str, ids: &[String]) -> Result<Vec<String>> {
    let table = read_labels(labels)?;
    let map = table.for_criterion(criterion);
    if map.is_empty() {
        anyhow::bail!(
            "criterion `{criterion}` not in {}; available: {}",
            labels.display(),
            table.criteria().join(", ")
        );
    }
    let missing: Vec<&str> = ids
        .iter()
        .filter(|id| !map.contains_key(*id))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        anyhow::bail!(
            "{} image ids have no `{criterion}` label in {}: {}",
            missing.len(),
            labels.display(),
            missing.join(", ")
        );
    }
    if map.len() > ids.len() {
        log::warn!(
            "{} labeled images are not among the predictions",
            map.len() - ids.len()
        );
    }
    Ok(ids.iter().map(|id| map[id].clone()).collect())
}

fn read_predictions(path: &Path) -> Result<(Vec<String>, Vec<usize>)> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading predictions {}", path.display()))?;
    let headers = reader.headers()?.clone();
    anyhow::ensure!(
        headers.iter().eq(["image_id", "cluster"]),
        "{}: expected header `image_id,cluster`",
        path.display()
    );
    let (mut ids, mut clusters) = (Vec::new(), Vec::new());
    for (i, row) in reader.records().enumerate() {
        let row = row.with_context(|| format!("{}: row {}", path.display(), i + 2))?;
        ids.push(row[0].to_string());
        clusters.push(
            row[1]
                .parse()
                .with_context(|| format!("{}: row {}: bad cluster id", path.display(), i + 2))?,
        );
    }
    anyhow::ensure!(!ids.is_empty(), "{}: no predictions", path.display());
    Ok((ids, clusters))
}

fn read_echo(path: &Path) -> Result<RunEcho> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let uint = |key: &str| v.get(key).and_then(serde_json::Value::as_u64);
    Ok(RunEcho {
        alpha: v.get("alpha").and_then(serde_json::Value::as_f64),
        seed: uint("seed"),
        k: uint("k").map(|x| x as usize),
        layer: uint("layer").map(|x| x as usize),
        position: uint("position").map(|x| x as usize),
        skip_head: v.get("skip_head").and_then(serde_json::Value::as_bool),
    })
}

pub fn print_report(r: &EvalReport) {
    println!("criterion  {}", r.criterion);
    println!("n          {}", r.n);
    println!("nmi        {:.6} ({})", r.nmi, r.nmi_normalization);
    println!("rand_index {:.6}", r.rand_index);
    println!("predicted  {:?}", r.predicted_cluster_sizes);
    println!("truth      {:?}", r.truth_cluster_sizes);
}

pub fn run(args: EvalArgs, file: FileConfig) -> Result<()> {
    let predictions = input(args.predictions, file.predictions, "predictions")?;
    let labels = input(args.labels, file.labels, "labels")?;
    let criterion = required(args.criterion, file.criterion, "criterion")?;
    let out = required(args.out, file.out, "out")?;
    let norm = nmi_norm(args.nmi_norm, file.nmi_norm)?;
    let run_path = args.run.or(file.run).or_else(|| {
        predictions
            .parent()
            .map(|p| p.join("run.json"))
            .filter(|p| p.is_file())
    });

    let (ids, pred) = read_predictions(&predictions)?;
    let truth = truth_for(&labels, &criterion, &ids)?;
    let echo = run_path
        .map(|p| read_echo(&p))
        .transpose()?
        .unwrap_or_default();
    let report = evaluate(&criterion, &pred, &truth, norm, echo)?;

    let mut outputs = Outputs::new(&out)?;
    write_json(&outputs.artifact("report.json"), &report)?;
    outputs.commit();
    print_report(&report);
    Ok(())
}
