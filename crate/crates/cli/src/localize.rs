use anyhow::{Context, Result};
use rand::seq::SliceRandom;

use esmc_core::localization::{
    parse_keywords, read_sidecar, write_target, CountOptions, Threshold,
};
use esmc_core::tensor_store::{list_dump_dirs, read_dump, read_unembedding, read_vocab};
use esmc_core::{localize, SplitMix64};

use crate::config::{input, required, FileConfig};
use crate::output::Outputs;
use crate::LocalizeArgs;

pub fn run(args: LocalizeArgs, file: FileConfig) -> Result<()> {
    let opts = CountOptions {
        tau: args
            .tau
            .or(file.tau)
            .unwrap_or(esmc_core::localization::DEFAULT_TAU),
        threshold: if args.raw_logits || file.raw_logits == Some(true) {
            Threshold::RawLogit
        } else {
            Threshold::Probability
        },
        restrict_to_text: args.restrict_to_text || file.restrict_to_text == Some(true),
        top_k_filter: args.top_k_filter.or(file.top_k_filter),
    };
    opts.validate()?;
    let dumps_dir = input(args.dumps, file.dumps, "dumps")?;
    let unembed = input(args.unembed, file.unembed, "unembed")?;
    let vocab_path = input(args.vocab, file.vocab, "vocab")?;
    let keywords_path = input(args.keywords, file.keywords, "keywords")?;
    let sidecar_path = args.sidecar.or(file.sidecar);
    let feature = required(args.feature, file.feature, "feature")?;
    let out = required(args.out, file.out, "out")?;
    let sample = args.sample.or(file.sample);
    let seed = args.seed.or(file.seed).unwrap_or(0);

    let text = std::fs::read_to_string(&keywords_path)
        .with_context(|| format!("reading keywords {}", keywords_path.display()))?;
    let keywords = parse_keywords(&text);
    anyhow::ensure!(
        !keywords.is_empty(),
        "{}: no keywords",
        keywords_path.display()
    );
    let sidecar = sidecar_path.map(|p| read_sidecar(&p)).transpose()?;
    let vocab = read_vocab(&vocab_path)?;

    let mut dirs = list_dump_dirs(&dumps_dir)?;
    if let Some(n) = sample {
        anyhow::ensure!(n > 0, "--sample must be at least 1");
        anyhow::ensure!(
            n <= dirs.len(),
            "--sample {n} exceeds the {} dumps in {}",
            dirs.len(),
            dumps_dir.display()
        );
        dirs.shuffle(&mut SplitMix64::new(seed));
        dirs.truncate(n);
        dirs.sort();
    }
    let dumps = dirs
        .iter()
        .map(|d| read_dump(d))
        .collect::<esmc_core::Result<Vec<_>>>()?;
    log::info!("localizing `{feature}` over {} dumps", dumps.len());
    let w = read_unembedding(&unembed, vocab.len(), dumps[0].d_model)?;

    let loc = localize(
        &dumps,
        &feature,
        &keywords,
        &vocab,
        sidecar.as_ref(),
        &w,
        &opts,
    )?;
    for kw in &loc.keywords.unresolved {
        log::warn!("keyword `{kw}` not in the vocabulary; skipped");
    }

    let mut outputs = Outputs::new(&out)?;
    write_target(&loc.target, &outputs.artifact("target.json"))?;
    outputs.commit();

    println!(
        "{} images x {} keywords, tau {}, max count {}",
        loc.counts.num_images,
        loc.counts.num_keywords,
        opts.tau,
        loc.counts.max_count().unwrap_or(0)
    );
    println!(
        "{:>6} {:>9} {:>7} {:>12}",
        "layer", "position", "count", "mean value"
    );
    for c in &loc.target.candidates {
        println!(
            "{:>6} {:>9} {:>7} {:>12.6}",
            c.layer, c.position, c.count, c.mean_keyword_logit
        );
    }
    println!("chosen {}", loc.target.chosen);
    Ok(())
}
