use std::str::FromStr;

use anyhow::{Context, Result};
use rayon::prelude::*;

use esmc_core::cluster_pipeline;
use esmc_core::metrics::{nmi_with, rand_index};
use esmc_core::tensor_store::read_embeddings;

use crate::cluster::{check, pipeline_config, with_alpha_seed};
use crate::config::{input, required, FileConfig};
use crate::eval::{nmi_norm, truth_for};
use crate::output::Outputs;
use crate::SweepArgs;

const DEFAULT_ALPHAS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn parse_list<T: FromStr>(text: &str, flag: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .with_context(|| format!("--{flag}: bad value `{s}`"))
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn run(args: SweepArgs, file: FileConfig) -> Result<()> {
    let emb_dir = input(
        args.embeddings.clone(),
        file.embeddings.clone(),
        "embeddings",
    )?;
    let labels = input(args.labels.clone(), file.labels.clone(), "labels")?;
    let criterion = required(args.criterion.clone(), file.criterion.clone(), "criterion")?;
    let out = required(args.out.clone(), file.out.clone(), "out")?;
    let k = required(args.k, file.k, "k")?;
    let norm = nmi_norm(args.nmi_norm.clone(), file.nmi_norm.clone())?;
    let mut alphas = match &args.alphas {
        Some(text) => parse_list::<f64>(text, "alphas")?,
        None => file
            .alphas
            .clone()
            .unwrap_or_else(|| DEFAULT_ALPHAS.to_vec()),
    };
    let mut seeds = match &args.seeds {
        Some(text) => parse_list::<u64>(text, "seeds")?,
        None => file.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec()),
    };
    anyhow::ensure!(!alphas.is_empty(), "--alphas: no alpha values given");
    anyhow::ensure!(!seeds.is_empty(), "--seeds: no seeds given");
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    seeds.sort_unstable();
    seeds.dedup();

    let set = read_embeddings(&emb_dir)?;
    let truth = truth_for(&labels, &criterion, &set.image_ids)?;
    let base = pipeline_config(k, &args.train, &file);
    for &alpha in &alphas {
        check(&with_alpha_seed(base.clone(), alpha, 0), &set)?;
    }
    let x = set.to_matrix();

    let cells: Vec<(f64, u64)> = alphas
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let scores = cells
        .par_iter()
        .map(|&(alpha, seed)| -> Result<(f64, f64)> {
            let out = cluster_pipeline(x.view(), &with_alpha_seed(base.clone(), alpha, seed))?;
            Ok((
                nmi_with(&out.labels, &truth, norm)?,
                rand_index(&out.labels, &truth)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut outputs = Outputs::new(&out)?;
    let path = outputs.artifact("sweep.csv");
    let mut csv = csv::Writer::from_path(&path)?;
    csv.write_record(["kind", "alpha", "seed", "nmi", "ri", "nmi_std", "ri_std"])?;
    for (&(alpha, seed), &(n, r)) in cells.iter().zip(&scores) {
        csv.write_record([
            "run".to_string(),
            alpha.to_string(),
            seed.to_string(),
            n.to_string(),
            r.to_string(),
            String::new(),
            String::new(),
        ])?;
    }
    println!(
        "{:>6} {:>10} {:>10} {:>10} {:>10}",
        "alpha", "nmi", "nmi_std", "ri", "ri_std"
    );
    for (i, &alpha) in alphas.iter().enumerate() {
        let block = &scores[i * seeds.len()..(i + 1) * seeds.len()];
        let (nm, ns) = mean_std(&block.iter().map(|s| s.0).collect::<Vec<_>>());
        let (rm, rs) = mean_std(&block.iter().map(|s| s.1).collect::<Vec<_>>());
        csv.write_record([
            "mean".to_string(),
            alpha.to_string(),
            String::new(),
            nm.to_string(),
            rm.to_string(),
            ns.to_string(),
            rs.to_string(),
        ])?;
        println!("{alpha:>6} {nm:>10.6} {ns:>10.6} {rm:>10.6} {rs:>10.6}");
    }
    csv.flush()?;
    outputs.commit();
    Ok(())
}
