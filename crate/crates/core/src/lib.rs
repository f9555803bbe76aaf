//! Embedding-selective multiple clustering.
//!
//! A multimodal language model's hidden states, read through the logit lens,
//! carry feature-specific signal at particular `(layer, position)` cells. This
//! crate finds those cells from a handful of sampled images and a keyword list
//! ([`localization`]), turns the chosen cell of every image into a
//! vocabulary-space embedding ([`logit_lens`]), clusters the embeddings with
//! K-means followed by a pseudo-label-trained MLP head ([`kmeans`],
//! [`pseudo_head`]), and scores partitions against ground truth ([`metrics`]).
//!
//! All interchange with the model runtime goes through the formats in
//! [`tensor_store`].

pub mod error;
pub mod kmeans;
pub mod localization;
pub mod logit_lens;
pub mod metrics;
pub mod pseudo_head;
pub mod rng;
pub mod synth;
pub mod tensor_store;

pub use error::{Error, Result};
pub use kmeans::{assign, kmeans_fit, sq_distances, ClusterModel, KMeansConfig};
pub use localization::{
    count_high_logits, localize, resolve_keywords, select_targets, CountMap, CountOptions,
    KeywordSet, TargetSpec, Threshold, TokenizeSidecar,
};
pub use logit_lens::{
    project, project_dump, softmax, target_embedding, top_k, Cell, VocabDistribution,
};
pub use metrics::{
    contingency, nmi, nmi_with, rand_index, Contingency, EvalReport, NmiNormalization,
};
pub use pseudo_head::{
    cluster_pipeline, head_forward, head_grad, head_loss, select_pseudo_labels, train_head,
    HeadParams, PipelineConfig, PipelineOutput, PseudoLabelSet, TrainConfig,
};
pub use rng::SplitMix64;
pub use tensor_store::{
    EmbeddingSet, EmbeddingSource, HiddenStateDump, LabelTable, UnembeddingMatrix, Vocab,
};
