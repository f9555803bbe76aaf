//! Deterministic synthetic fixtures.
//!
//! * [`gaussian_blobs`]: labeled Gaussian clusters, optionally with a fraction
//!   of heavy-tailed (multivariate Student-t) outliers.
//! * [`planted_corpus`]: hidden-state dumps in which keyword tokens rise above
//!   the noise floor only at a known set of cells.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::logit_lens::Cell;
use crate::rng::SplitMix64;
use crate::tensor_store::{HiddenStateDump, UnembeddingMatrix, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub n: usize,
    pub dim: usize,
    pub k: usize,
    pub sigma: f64,
    /// Distance between any two centers, in units of `sigma`.
    pub separation: f64,
    /// Fraction of rows drawn from the heavy-tailed distribution instead.
    pub outlier_fraction: f64,
    /// Degrees of freedom of the outlier Student-t; smaller is heavier.
    pub outlier_df: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn new(n: usize, dim: usize, k: usize, seed: u64) -> Self {
        Self {
            n,
            dim,
            k,
            sigma: 1.0,
            separation: 10.0,
            outlier_fraction: 0.0,
            outlier_df: 1.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blobs {
    pub data: Array2<f64>,
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    pub outliers: Vec<bool>,
}

/// Centers sit on scaled coordinate axes, so every pair is exactly
/// `separation * sigma` apart. Row `i` belongs to cluster `i % k`.
pub fn gaussian_blobs(spec: &BlobSpec) -> Blobs {
    assert!(spec.dim >= spec.k, "need dim >= k for axis-aligned centers");
    let mut rng = SplitMix64::new(spec.seed);
    let scale = spec.separation * spec.sigma / std::f64::consts::SQRT_2;
    let mut centers = Array2::zeros((spec.k, spec.dim));
    for j in 0..spec.k {
        centers[[j, j]] = scale;
    }

    let n_out = (spec.outlier_fraction * spec.n as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    let mut outliers = vec![false; spec.n];
    for &i in &order[..n_out] {
        outliers[i] = true;
    }

    let chi = ChiSquared::new(spec.outlier_df).expect("positive degrees of freedom");
    let mut data = Array2::zeros((spec.n, spec.dim));
    let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.k).collect();
    for i in 0..spec.n {
        // Multivariate t: a Gaussian direction stretched by sqrt(df / chi2).
        let stretch = if outliers[i] {
            (spec.outlier_df / chi.sample(&mut rng)).sqrt()
        } else {
            1.0
        };
        for d in 0..spec.dim {
            let z: f64 = rng.sample(StandardNormal);
            data[[i, d]] = centers[[labels[i], d]] + spec.sigma * stretch * z;
        }
    }
    Blobs {
        data,
        labels,
        centers,
        outliers,
    }
}

pub const PLANTED_KEYWORDS: [&str; 4] = ["white", "black", "blue", "red"];

const FILLER_TOKENS: [&str; 12] = [
    "<s>", "<image>", "▁The", "▁color", "▁of", "▁the", "▁car", "▁is", "▁sky", "▁road", "▁wheel",
    "▁a",
];

const PROMPT_TOKENS: [&str; 12] = [
    "▁USER",
    ":",
    "▁Describe",
    "▁the",
    "▁car",
    "▁color",
    "▁The",
    "▁color",
    "▁of",
    "▁the",
    "▁car",
    "▁is",
];

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub num_images: usize,
    pub num_layers: usize,
    pub num_tokens: usize,
    pub d_model: usize,
    /// Cells carrying the keyword signal, with the logit each one adds.
    pub plants: Vec<(Cell, f32)>,
    /// Cell where only the first image shows a keyword above threshold.
    pub distractor: Option<Cell>,
    /// Per-dimension standard deviation of the background states.
    pub noise: f32,
    pub seed: u64,
}

impl Default for PlantedSpec {
    /// 32 layers and 270 tokens with the signal at position 263 in layers
    /// 27-30, strongest at layer 27.
    fn default() -> Self {
        Self {
            num_images: 10,
            num_layers: 32,
            num_tokens: 270,
            d_model: 8,
            plants: vec![
                (Cell::new(27, 263), 6.0),
                (Cell::new(28, 263), 5.0),
                (Cell::new(29, 263), 4.5),
                (Cell::new(30, 263), 4.0),
            ],
            distractor: Some(Cell::new(5, 100)),
            noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub dumps: Vec<HiddenStateDump>,
    pub unembedding: UnembeddingMatrix,
    pub vocab: Vocab,
    pub keywords: Vec<String>,
    /// Ground-truth keyword of each image.
    pub truth: Vec<String>,
}

/// Vocabulary is the four keywords (ids 0-3) followed by twelve filler tokens.
/// Keyword `j` reads hidden dimension `j`; filler rows are small random
/// vectors, so background cells sit near the uniform 1/16. Image `i` shows
/// keyword `i % 4` at each planted cell.
pub fn planted_corpus(spec: &PlantedSpec) -> PlantedCorpus {
    assert!(spec.d_model >= PLANTED_KEYWORDS.len());
    assert!(spec.num_tokens >= PROMPT_TOKENS.len());
    let mut rng = SplitMix64::new(spec.seed);
    let vocab_size = PLANTED_KEYWORDS.len() + FILLER_TOKENS.len();
    let mut weights = vec![0f32; vocab_size * spec.d_model];
    for j in 0..PLANTED_KEYWORDS.len() {
        weights[j * spec.d_model + j] = 1.0;
    }
    for w in &mut weights[PLANTED_KEYWORDS.len() * spec.d_model..] {
        *w = rng.random_range(-0.05..0.05);
    }
    let unembedding = UnembeddingMatrix::new(vocab_size, spec.d_model, weights)
        .expect("generated weights are finite");
    let vocab = Vocab::new(
        PLANTED_KEYWORDS
            .iter()
            .chain(FILLER_TOKENS.iter())
            .map(|s| s.to_string())
            .collect(),
    );

    let text_start = spec.num_tokens - PROMPT_TOKENS.len();
    let token_strings: Vec<String> = (0..spec.num_tokens)
        .map(|p| match p {
            0 => "<s>".to_string(),
            p if p >= text_start => PROMPT_TOKENS[p - text_start].to_string(),
            _ => "<image>".to_string(),
        })
        .collect();

    let mut dumps = Vec::with_capacity(spec.num_images);
    let mut truth = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let len = spec.num_layers * spec.num_tokens * spec.d_model;
        let states: Vec<f32> = (0..len)
            .map(|_| spec.noise * rng.sample::<f32, _>(StandardNormal))
            .collect();
        let keyword = i % PLANTED_KEYWORDS.len();
        let mut dump = HiddenStateDump {
            image_id: format!("img{i:03}"),
            prompt: "The color of the car is".into(),
            num_layers: spec.num_layers,
            num_tokens: spec.num_tokens,
            d_model: spec.d_model,
            token_strings: token_strings.clone(),
            text_token_range: text_start..spec.num_tokens,
            states,
            model_id: Some("synthetic-planted".into()),
            state_kind: Some("post_norm".into()),
        };
        for &(cell, strength) in &spec.plants {
            dump.state_mut(cell.layer, cell.position)[keyword] += strength;
        }
        if let (0, Some(cell)) = (i, spec.distractor) {
            dump.state_mut(cell.layer, cell.position)[2] += 4.0;
        }
        dumps.push(dump);
        truth.push(PLANTED_KEYWORDS[keyword].to_string());
    }
    PlantedCorpus {
        dumps,
        unembedding,
        vocab,
        keywords: PLANTED_KEYWORDS.iter().map(|s| s.to_string()).collect(),
        truth,
    }
}
