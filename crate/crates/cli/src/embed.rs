use anyhow::{Context, Result};

use esmc_core::localization::read_target;
use esmc_core::target_embedding;
use esmc_core::tensor_store::{
    list_dump_dirs, read_dump, read_unembedding, read_vocab, write_embeddings, EmbeddingSet,
    EmbeddingSource, UnembeddingMatrix,
};

use crate::config::{input, required, FileConfig};
use crate::output::Outputs;
use crate::EmbedArgs;

pub fn run(args: EmbedArgs, file: FileConfig) -> Result<()> {
    let target = read_target(&input(args.target, file.target, "target")?)?;
    let dumps_dir = input(args.dumps, file.dumps, "dumps")?;
    let unembed = input(args.unembed, file.unembed, "unembed")?;
    let vocab = read_vocab(&input(args.vocab, file.vocab, "vocab")?)?;
    let out = required(args.out, file.out, "out")?;
    let normalize = !(args.raw_logits || file.raw_logits == Some(true));

    // Dumps are read one at a time; a full dataset does not fit in memory.
    let mut w: Option<UnembeddingMatrix> = None;
    let mut image_ids = Vec::new();
    let mut matrix = Vec::new();
    for dir in list_dump_dirs(&dumps_dir)? {
        let dump = read_dump(&dir)?;
        let w = match &mut w {
            Some(w) => w,
            None => w.insert(read_unembedding(&unembed, vocab.len(), dump.d_model)?),
        };
        let row = target_embedding(&dump, w, target.chosen, normalize)
            .with_context(|| format!("embedding image `{}`", dump.image_id))?;
        matrix.extend(row.values.iter().map(|&v| v as f32));
        image_ids.push(dump.image_id);
    }
    let set = EmbeddingSet {
        image_ids,
        vocab_size: vocab.len(),
        source: EmbeddingSource {
            feature: target.feature.clone(),
            layer: target.chosen.layer,
            position: target.chosen.position,
        },
        normalized: normalize,
        matrix,
    };

    let mut outputs = Outputs::new(&out)?;
    outputs.artifact(esmc_core::tensor_store::MANIFEST_FILE);
    outputs.artifact(esmc_core::tensor_store::EMBEDS_FILE);
    write_embeddings(&set, outputs.dir())?;
    outputs.commit();
    println!(
        "{} embeddings of `{}` at {} ({} x {}, {})",
        set.len(),
        target.feature,
        target.chosen,
        set.len(),
        set.vocab_size,
        if normalize { "softmax" } else { "raw logits" }
    );
    Ok(())
}
