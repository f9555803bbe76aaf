//! Target-embedding localization.
//!
//! For every sampled dump, keyword, and `(layer, position)` cell, the keyword's
//! value under the logit lens is compared against `tau`; each exceedance bumps
//! that cell's count. The cells with the maximal count are the candidate target
//! embeddings, and a single one is chosen for clustering: the highest mean
//! keyword value over all `(image, keyword)` pairs, then the lower layer, then
//! the lower position.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logit_lens::{self, in_top_k, Cell};
use crate::tensor_store::{read_json, HiddenStateDump, UnembeddingMatrix, Vocab};

/// High-logit threshold on softmax-normalized keyword probabilities.
pub const DEFAULT_TAU: f64 = 0.2;

/// Keyword-string to token-id map exported next to the vocabulary by the
/// extractor. Values are the tokenizer's pieces for the keyword; only the
/// first piece is used.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenizeSidecar(pub BTreeMap<String, SidecarIds>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SidecarIds {
    One(usize),
    Pieces(Vec<usize>),
}

impl TokenizeSidecar {
    pub fn first_piece(&self, keyword: &str) -> Option<usize> {
        match self.0.get(keyword)? {
            SidecarIds::One(id) => Some(*id),
            SidecarIds::Pieces(ids) => ids.first().copied(),
        }
    }
}

pub fn read_sidecar(path: &Path) -> Result<TokenizeSidecar> {
    read_json(path)
}

/// Keywords for one feature after vocabulary lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordSet {
    pub feature: String,
    pub keywords: Vec<String>,
    /// Deduplicated ids in first-seen order; these drive the counting.
    pub token_ids: Vec<usize>,
    /// `(keyword, id)` for every keyword that resolved, duplicates included.
    pub resolved: Vec<(String, usize)>,
    pub unresolved: Vec<String>,
}

/// Exact vocabulary match first, then the sidecar's first subword piece.
pub fn resolve_keywords(
    feature: &str,
    keywords: &[String],
    vocab: &Vocab,
    sidecar: Option<&TokenizeSidecar>,
) -> Result<KeywordSet> {
    let mut resolved = Vec::new();
    let mut unresolved = Vec::new();
    let mut token_ids: Vec<usize> = Vec::new();
    for kw in keywords {
        let id = vocab
            .id(kw)
            .or_else(|| sidecar.and_then(|s| s.first_piece(kw)))
            .filter(|&id| id < vocab.len());
        match id {
            Some(id) => {
                if let Some((other, _)) = resolved.iter().find(|(_, i)| *i == id) {
                    warn!("keyword `{kw}` resolves to token {id}, already used by `{other}`; counting it once");
                } else {
                    token_ids.push(id);
                }
                resolved.push((kw.clone(), id));
            }
            None => {
                warn!("keyword `{kw}` does not resolve to a vocabulary token");
                unresolved.push(kw.clone());
            }
        }
    }
    if token_ids.is_empty() {
        return Err(Error::NoKeywords(unresolved));
    }
    Ok(KeywordSet {
        feature: feature.to_string(),
        keywords: keywords.to_vec(),
        token_ids,
        resolved,
        unresolved,
    })
}

/// What `tau` is compared against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// Softmax-normalized keyword probability.
    #[default]
    Probability,
    /// Raw logit, for ablations.
    RawLogit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountOptions {
    pub tau: f64,
    pub threshold: Threshold,
    /// Only scan positions inside each dump's `text_token_range`.
    pub restrict_to_text: bool,
    /// Additionally require the keyword to rank among the cell's top-k tokens.
    pub top_k_filter: Option<usize>,
}

impl Default for CountOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            threshold: Threshold::Probability,
            restrict_to_text: false,
            top_k_filter: None,
        }
    }
}

impl CountOptions {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(Error::param("tau", "must be finite"));
        }
        if self.threshold == Threshold::Probability && !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::param(
                "tau",
                format!(
                    "must lie in (0, 1] for probability thresholds, got {}",
                    self.tau
                ),
            ));
        }
        if self.top_k_filter == Some(0) {
            return Err(Error::param("top_k_filter", "must be at least 1"));
        }
        Ok(())
    }
}

/// High-logit counts per cell. Only cells with a nonzero count are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMap {
    pub counts: BTreeMap<Cell, u64>,
    /// Sum of the keyword value over every `(image, keyword)` pair, for counted cells.
    pub value_sums: BTreeMap<Cell, f64>,
    pub num_images: usize,
    pub num_keywords: usize,
    pub tau: f64,
    pub threshold: Threshold,
}

impl CountMap {
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn get(&self, cell: Cell) -> u64 {
        self.counts.get(&cell).copied().unwrap_or(0)
    }

    pub fn max_count(&self) -> Option<u64> {
        self.counts.values().copied().max()
    }

    /// Mean keyword value per counted cell; the tie-break ranking for selection.
    pub fn mean_keyword_value(&self) -> BTreeMap<Cell, f64> {
        let pairs = (self.num_images * self.num_keywords) as f64;
        self.value_sums
            .iter()
            .map(|(&cell, &sum)| (cell, sum / pairs))
            .collect()
    }
}

struct DumpTally {
    counts: Vec<u32>,
    sums: Vec<f64>,
}

fn tally_dump(
    dump: &HiddenStateDump,
    w: &UnembeddingMatrix,
    keyword_ids: &[usize],
    opts: &CountOptions,
    num_layers: usize,
    num_positions: usize,
) -> DumpTally {
    let positions = if opts.restrict_to_text {
        dump.text_token_range.clone()
    } else {
        0..dump.num_tokens
    };
    let mut counts = vec![0u32; num_layers * num_positions];
    let mut sums = vec![0.0f64; num_layers * num_positions];
    let mut logits = vec![0.0f64; w.vocab_size];
    for layer in 0..num_layers {
        for position in positions.clone() {
            let state = dump.state(layer, position);
            for (v, slot) in logits.iter_mut().enumerate() {
                *slot = logit_lens::dot(w.row(v), state);
            }
            let lse = match opts.threshold {
                Threshold::Probability => logit_lens::log_sum_exp(&logits),
                Threshold::RawLogit => 0.0,
            };
            let slot = layer * num_positions + position;
            for &kw in keyword_ids {
                let value = match opts.threshold {
                    Threshold::Probability => (logits[kw] - lse).exp(),
                    Threshold::RawLogit => logits[kw],
                };
                sums[slot] += value;
                let ranked = opts.top_k_filter.map_or(true, |k| in_top_k(&logits, kw, k));
                if value > opts.tau && ranked {
                    counts[slot] += 1;
                }
            }
        }
    }
    DumpTally { counts, sums }
}

/// Counts high-logit cells over every `(dump, keyword)` pair.
///
/// Dumps are scanned in parallel; the per-dump tallies are merged in input
/// order, so the result is identical to a sequential scan.
pub fn count_high_logits(
    dumps: &[HiddenStateDump],
    w: &UnembeddingMatrix,
    keyword_ids: &[usize],
    opts: &CountOptions,
) -> Result<CountMap> {
    opts.validate()?;
    let first = dumps
        .first()
        .ok_or_else(|| Error::param("dumps", "at least one dump is required"))?;
    if keyword_ids.is_empty() {
        return Err(Error::param(
            "keyword_ids",
            "at least one keyword is required",
        ));
    }
    if let Some(&bad) = keyword_ids.iter().find(|&&id| id >= w.vocab_size) {
        return Err(Error::param(
            "keyword_ids",
            format!("token {bad} outside vocabulary of {}", w.vocab_size),
        ));
    }
    let num_layers = first.num_layers;
    for d in dumps {
        if d.d_model != w.d_model {
            return Err(Error::Validation(format!(
                "dump `{}` has d_model {} but the unembedding expects {}",
                d.image_id, d.d_model, w.d_model
            )));
        }
        if d.num_layers != num_layers {
            return Err(Error::Validation(format!(
                "dump `{}` has {} layers, `{}` has {num_layers}",
                d.image_id, d.num_layers, first.image_id
            )));
        }
    }
    let num_positions = dumps.iter().map(|d| d.num_tokens).max().unwrap_or(0);

    let tallies: Vec<DumpTally> = dumps
        .par_iter()
        .map(|d| tally_dump(d, w, keyword_ids, opts, num_layers, num_positions))
        .collect();

    let mut counts = vec![0u64; num_layers * num_positions];
    let mut sums = vec![0.0f64; num_layers * num_positions];
    for t in &tallies {
        for (acc, &c) in counts.iter_mut().zip(&t.counts) {
            *acc += c as u64;
        }
        for (acc, &s) in sums.iter_mut().zip(&t.sums) {
            *acc += s;
        }
    }

    let mut map = CountMap {
        counts: BTreeMap::new(),
        value_sums: BTreeMap::new(),
        num_images: dumps.len(),
        num_keywords: keyword_ids.len(),
        tau: opts.tau,
        threshold: opts.threshold,
    };
    for (slot, &c) in counts.iter().enumerate() {
        if c > 0 {
            let cell = Cell::new(slot / num_positions, slot % num_positions);
            map.counts.insert(cell, c);
            map.value_sums.insert(cell, sums[slot]);
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub layer: usize,
    pub position: usize,
    pub count: u64,
    pub mean_keyword_logit: f64,
}

impl Candidate {
    pub fn cell(&self) -> Cell {
        Cell::new(self.layer, self.position)
    }
}

/// The max-count cells for one feature and the one chosen for clustering.
/// Serialized as `target.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub feature: String,
    pub tau: f64,
    /// Ranked: the first entry is `chosen`.
    pub candidates: Vec<Candidate>,
    pub chosen: Cell,
}

impl TargetSpec {
    pub fn validate(&self) -> Result<()> {
        let Some(top) = self.candidates.first() else {
            return Err(Error::Validation("target spec has no candidates".into()));
        };
        if self.candidates.iter().any(|c| c.count != top.count) {
            return Err(Error::Validation(
                "target candidates must share the maximal count".into(),
            ));
        }
        if !self.candidates.iter().any(|c| c.cell() == self.chosen) {
            return Err(Error::Validation(format!(
                "chosen cell {} is not among the candidates",
                self.chosen
            )));
        }
        Ok(())
    }
}

pub fn write_target(spec: &TargetSpec, path: &Path) -> Result<()> {
    spec.validate()?;
    crate::tensor_store::write_json(path, spec)
}

pub fn read_target(path: &Path) -> Result<TargetSpec> {
    let spec: TargetSpec = read_json(path)?;
    spec.validate()?;
    Ok(spec)
}

/// Picks the max-count cells and ranks them by `tie_rank` (descending), then
/// by lower layer, then lower position.
pub fn select_targets(
    feature: &str,
    counts: &CountMap,
    tie_rank: &BTreeMap<Cell, f64>,
) -> Result<TargetSpec> {
    let max = counts.max_count().ok_or(Error::NoCandidates)?;
    let mut candidates = counts
        .counts
        .iter()
        .filter(|&(_, &c)| c == max)
        .map(|(&cell, &count)| {
            let mean = tie_rank.get(&cell).copied().ok_or_else(|| {
                Error::Validation(format!("no tie-break value for candidate {cell}"))
            })?;
            Ok(Candidate {
                layer: cell.layer,
                position: cell.position,
                count,
                mean_keyword_logit: mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    candidates.sort_by(|a, b| {
        b.mean_keyword_logit
            .total_cmp(&a.mean_keyword_logit)
            .then_with(|| a.cell().cmp(&b.cell()))
    });
    let chosen = candidates[0].cell();
    Ok(TargetSpec {
        feature: feature.to_string(),
        tau: counts.tau,
        candidates,
        chosen,
    })
}

/// Everything produced along the way, for reporting.
#[derive(Debug, Clone)]
pub struct Localization {
    pub keywords: KeywordSet,
    pub counts: CountMap,
    pub target: TargetSpec,
}

/// Resolve, count, select.
pub fn localize(
    dumps: &[HiddenStateDump],
    feature: &str,
    keywords: &[String],
    vocab: &Vocab,
    sidecar: Option<&TokenizeSidecar>,
    w: &UnembeddingMatrix,
    opts: &CountOptions,
) -> Result<Localization> {
    if vocab.len() != w.vocab_size {
        return Err(Error::shape(
            "vocabulary vs unembedding rows",
            w.vocab_size,
            vocab.len(),
        ));
    }
    let keywords = resolve_keywords(feature, keywords, vocab, sidecar)?;
    let counts = count_high_logits(dumps, w, &keywords.token_ids, opts)?;
    let target = select_targets(feature, &counts, &counts.mean_keyword_value())?;
    Ok(Localization {
        keywords,
        counts,
        target,
    })
}

/// Parses a keywords file: one keyword per line, blank lines and `#` comments skipped.
pub fn parse_keywords(text: &str) -> Vec<String> {
    let mut seen = HashMap::new();
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter(|l| seen.insert(l.to_string(), ()).is_none())
        .map(str::to_owned)
        .collect()
}
