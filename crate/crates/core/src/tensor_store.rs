//! On-disk formats shared with the model runtime.
//!
//! Everything numeric is raw little-endian IEEE-754 `f32`, row-major, with no
//! header, padding, or compression; the accompanying `manifest.json` fully
//! determines the payload size.
//!
//! | artifact        | layout                                                  |
//! |-----------------|---------------------------------------------------------|
//! | hidden states   | `<dir>/manifest.json` + `<dir>/states.bin`, `[L][T][D]`  |
//! | unembedding     | single file, `[V][D]`                                    |
//! | vocabulary      | newline-delimited UTF-8, token id = line index           |
//! | labels          | CSV with header `image_id,criterion,label`              |
//! | embedding set   | `<dir>/manifest.json` + `<dir>/embeds.bin`, `[n][V]`     |

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DUMP_LAYOUT: &str = "layer_token_dim_f32_le";
pub const EMBEDDINGS_LAYOUT: &str = "row_vocab_f32_le";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATES_FILE: &str = "states.bin";
pub const EMBEDS_FILE: &str = "embeds.bin";

/// Row-sum tolerance for softmax-normalized embedding rows.
pub const NORMALIZED_ROW_TOLERANCE: f64 = 1e-4;

pub fn encode_f32_le(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a raw payload; the caller has already checked `bytes.len() % 4 == 0`.
pub fn decode_f32_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::format(path, format!("cannot serialize: {e}")))?;
    text.push(b'\n');
    write_bytes(path, &text)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Reads `expected` f32 values from a raw blob, rejecting any size mismatch.
pub(crate) fn read_f32_blob(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    let want = expected
        .checked_mul(4)
        .ok_or_else(|| Error::format(path, "declared dimensions overflow"))?;
    if bytes.len() != want {
        return Err(Error::format(
            path,
            format!(
                "size mismatch: manifest declares {want} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    Ok(decode_f32_le(&bytes))
}

fn first_non_finite(values: &[f32]) -> Option<usize> {
    values.iter().position(|v| !v.is_finite())
}

/// Per-image hidden states `A_l(k)` for every layer and token position.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateDump {
    pub image_id: String,
    pub prompt: String,
    pub num_layers: usize,
    pub num_tokens: usize,
    pub d_model: usize,
    pub token_strings: Vec<String>,
    /// Half-open span of prompt-token positions (absolute sequence indices).
    pub text_token_range: Range<usize>,
    /// Flat `[layer][token][dim]` storage.
    pub states: Vec<f32>,
    pub model_id: Option<String>,
    pub state_kind: Option<String>,
}

impl HiddenStateDump {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_tokens == 0 || self.d_model == 0 {
            return Err(Error::Validation(format!(
                "dump `{}`: dimensions must be positive (L={}, T={}, D={})",
                self.image_id, self.num_layers, self.num_tokens, self.d_model
            )));
        }
        if self.token_strings.len() != self.num_tokens {
            return Err(Error::Validation(format!(
                "dump `{}`: {} token strings for {} tokens",
                self.image_id,
                self.token_strings.len(),
                self.num_tokens
            )));
        }
        let Range { start, end } = self.text_token_range;
        if start > end || end > self.num_tokens {
            return Err(Error::Validation(format!(
                "dump `{}`: text_token_range [{start}, {end}) not within [0, {}]",
                self.image_id, self.num_tokens
            )));
        }
        let expected = self.num_layers * self.num_tokens * self.d_model;
        if self.states.len() != expected {
            return Err(Error::Validation(format!(
                "dump `{}`: {} state values, expected L*T*D = {expected}",
                self.image_id,
                self.states.len()
            )));
        }
        if let Some(i) = first_non_finite(&self.states) {
            let (l, rest) = (
                i / (self.num_tokens * self.d_model),
                i % (self.num_tokens * self.d_model),
            );
            return Err(Error::Validation(format!(
                "dump `{}`: non-finite state at layer {l}, token {}, dim {}",
                self.image_id,
                rest / self.d_model,
                rest % self.d_model
            )));
        }
        Ok(())
    }

    /// Hidden state of token `position` at `layer`.
    pub fn state(&self, layer: usize, position: usize) -> &[f32] {
        let start = (layer * self.num_tokens + position) * self.d_model;
        &self.states[start..start + self.d_model]
    }

    pub fn state_mut(&mut self, layer: usize, position: usize) -> &mut [f32] {
        let start = (layer * self.num_tokens + position) * self.d_model;
        &mut self.states[start..start + self.d_model]
    }

    pub fn text_positions(&self) -> Vec<usize> {
        self.text_token_range.clone().collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DumpManifest {
    image_id: String,
    prompt: String,
    num_layers: usize,
    num_tokens: usize,
    d_model: usize,
    token_strings: Vec<String>,
    text_token_range: [usize; 2],
    layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_kind: Option<String>,
}

pub fn write_dump(dump: &HiddenStateDump, dir: &Path) -> Result<()> {
    dump.validate()?;
    ensure_dir(dir)?;
    let manifest = DumpManifest {
        image_id: dump.image_id.clone(),
        prompt: dump.prompt.clone(),
        num_layers: dump.num_layers,
        num_tokens: dump.num_tokens,
        d_model: dump.d_model,
        token_strings: dump.token_strings.clone(),
        text_token_range: [dump.text_token_range.start, dump.text_token_range.end],
        layout: DUMP_LAYOUT.to_string(),
        model_id: dump.model_id.clone(),
        state_kind: dump.state_kind.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    write_bytes(&dir.join(STATES_FILE), &encode_f32_le(&dump.states))
}

pub fn read_dump(dir: &Path) -> Result<HiddenStateDump> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DumpManifest = read_json(&manifest_path)?;
    if manifest.layout != DUMP_LAYOUT {
        return Err(Error::format(
            &manifest_path,
            format!(
                "unknown layout `{}` (expected `{DUMP_LAYOUT}`)",
                manifest.layout
            ),
        ));
    }
    let count = manifest
        .num_layers
        .checked_mul(manifest.num_tokens)
        .and_then(|x| x.checked_mul(manifest.d_model))
        .ok_or_else(|| Error::format(&manifest_path, "declared dimensions overflow"))?;
    let states = read_f32_blob(&dir.join(STATES_FILE), count)?;
    let [start, end] = manifest.text_token_range;
    let dump = HiddenStateDump {
        image_id: manifest.image_id,
        prompt: manifest.prompt,
        num_layers: manifest.num_layers,
        num_tokens: manifest.num_tokens,
        d_model: manifest.d_model,
        token_strings: manifest.token_strings,
        text_token_range: start..end,
        states,
        model_id: manifest.model_id,
        state_kind: manifest.state_kind,
    };
    dump.validate()?;
    Ok(dump)
}

/// Dump directories (those holding a manifest) directly under `root`, sorted by name.
pub fn list_dump_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.join(MANIFEST_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::format(
            root,
            "no dump directories (manifest.json + states.bin) found",
        ));
    }
    Ok(dirs)
}

/// Reads every dump directory directly under `root`, sorted by directory name.
pub fn read_dump_dir(root: &Path) -> Result<Vec<HiddenStateDump>> {
    list_dump_dirs(root)?.iter().map(|d| read_dump(d)).collect()
}

/// `W_u`: maps a `d_model` hidden state to `vocab_size` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct UnembeddingMatrix {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Flat `[vocab][dim]` storage.
    pub weights: Vec<f32>,
}

impl UnembeddingMatrix {
    pub fn new(vocab_size: usize, d_model: usize, weights: Vec<f32>) -> Result<Self> {
        let w = Self {
            vocab_size,
            d_model,
            weights,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 {
            return Err(Error::Validation(
                "unembedding dimensions must be positive".into(),
            ));
        }
        if self.weights.len() != self.vocab_size * self.d_model {
            return Err(Error::shape(
                "unembedding weights",
                self.vocab_size * self.d_model,
                self.weights.len(),
            ));
        }
        if let Some(i) = first_non_finite(&self.weights) {
            return Err(Error::Validation(format!(
                "unembedding: non-finite weight at row {}, column {}",
                i / self.d_model,
                i % self.d_model
            )));
        }
        Ok(())
    }

    pub fn row(&self, token: usize) -> &[f32] {
        &self.weights[token * self.d_model..(token + 1) * self.d_model]
    }
}

pub fn read_unembedding(
    path: &Path,
    vocab_size: usize,
    d_model: usize,
) -> Result<UnembeddingMatrix> {
    let weights = read_f32_blob(path, vocab_size * d_model)?;
    UnembeddingMatrix::new(vocab_size, d_model, weights)
}

pub fn write_unembedding(w: &UnembeddingMatrix, path: &Path) -> Result<()> {
    w.validate()?;
    write_bytes(path, &encode_f32_le(&w.weights))
}

/// Token strings indexed by token id. Duplicate strings are allowed; lookups
/// return the lowest id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Self {
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            index.entry(t.clone()).or_insert(id);
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    let body = text.strip_suffix('\n').unwrap_or(&text);
    if text.is_empty() {
        return Err(Error::format(path, "empty vocabulary"));
    }
    Ok(Vocab::new(body.split('\n').map(str::to_owned).collect()))
}

pub fn write_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (id, t) in vocab.tokens().iter().enumerate() {
        if t.contains('\n') {
            return Err(Error::Validation(format!(
                "vocab token {id} contains a newline"
            )));
        }
        out.push_str(t);
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub image_id: String,
    pub criterion: String,
    pub label: String,
}

/// Ground-truth labels keyed by `(image_id, criterion)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelTable {
    rows: Vec<LabelRow>,
}

impl LabelTable {
    pub fn new(rows: Vec<LabelRow>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !seen.insert((r.image_id.as_str(), r.criterion.as_str())) {
                return Err(Error::Validation(format!(
                    "duplicate label for ({}, {})",
                    r.image_id, r.criterion
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[LabelRow] {
        &self.rows
    }

    pub fn criteria(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.rows.iter().map(|r| r.criterion.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// `image_id -> label` for one criterion.
    pub fn for_criterion(&self, criterion: &str) -> BTreeMap<String, String> {
        self.rows
            .iter()
            .filter(|r| r.criterion == criterion)
            .map(|r| (r.image_id.clone(), r.label.clone()))
            .collect()
    }
}

pub(crate) fn csv_error(path: &Path, err: &csv::Error) -> Error {
    let line = err.position().map(|p| p.line()).unwrap_or(0);
    Error::Csv {
        path: path.to_path_buf(),
        line,
        message: err.to_string(),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelTable> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, &e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, &e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "criterion", "label"] {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            line: 1,
            message: "header must be `image_id,criterion,label`".into(),
        });
    }
    let mut rows = Vec::new();
    let mut seen: HashMap<(String, String), u64> = HashMap::new();
    for record in reader.deserialize::<LabelRow>() {
        let row = record.map_err(|e| csv_error(path, &e))?;
        let line = rows.len() as u64 + 2;
        if let Some(first) = seen.insert((row.image_id.clone(), row.criterion.clone()), line) {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                line,
                message: format!(
                    "duplicate label for ({}, {}), first given on line {first}",
                    row.image_id, row.criterion
                ),
            });
        }
        rows.push(row);
    }
    LabelTable::new(rows)
}

pub fn write_labels(table: &LabelTable, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, &e))?;
    for r in table.rows() {
        writer.serialize(r).map_err(|e| csv_error(path, &e))?;
    }
    if table.rows().is_empty() {
        writer
            .write_record(["image_id", "criterion", "label"])
            .map_err(|e| csv_error(path, &e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Which hidden state an embedding set was read from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSource {
    pub feature: String,
    pub layer: usize,
    pub position: usize,
}

/// Vocabulary-space target embeddings, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub image_ids: Vec<String>,
    pub vocab_size: usize,
    pub source: EmbeddingSource,
    /// Rows are softmax distributions rather than raw logits.
    pub normalized: bool,
    /// Flat `[n][vocab]` storage.
    pub matrix: Vec<f32>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.vocab_size..(i + 1) * self.vocab_size]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 || self.vocab_size == 0 {
            return Err(Error::Validation(
                "embedding set must have at least one row and one column".into(),
            ));
        }
        if self.matrix.len() != n * self.vocab_size {
            return Err(Error::shape(
                "embedding matrix",
                n * self.vocab_size,
                self.matrix.len(),
            ));
        }
        if let Some(i) = first_non_finite(&self.matrix) {
            return Err(Error::Validation(format!(
                "embedding row {} (`{}`) has a non-finite entry",
                i / self.vocab_size,
                self.image_ids[i / self.vocab_size]
            )));
        }
        if self.normalized {
            for i in 0..n {
                let row = self.row(i);
                let sum: f64 = row.iter().map(|&v| v as f64).sum();
                if (sum - 1.0).abs() > NORMALIZED_ROW_TOLERANCE
                    || row.iter().any(|&v| !(0.0..=1.0).contains(&v))
                {
                    return Err(Error::Validation(format!(
                        "normalized embedding row {i} (`{}`) sums to {sum}",
                        self.image_ids[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Widens to `f64` for the clustering arithmetic.
    pub fn to_matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.vocab_size), |(i, j)| {
            self.matrix[i * self.vocab_size + j] as f64
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingManifest {
    n: usize,
    vocab_size: usize,
    image_ids: Vec<String>,
    source: EmbeddingSource,
    normalized: bool,
    layout: String,
}

pub fn write_embeddings(set: &EmbeddingSet, dir: &Path) -> Result<()> {
    set.validate()?;
    ensure_dir(dir)?;
    let manifest = EmbeddingManifest {
        n: set.len(),
        vocab_size: set.vocab_size,
        image_ids: set.image_ids.clone(),
        source: set.source.clone(),
        normalized: set.normalized,
        layout: EMBEDDINGS_LAYOUT.to_string(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    write_bytes(&dir.join(EMBEDS_FILE), &encode_f32_le(&set.matrix))
}

pub fn read_embeddings(dir: &Path) -> Result<EmbeddingSet> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: EmbeddingManifest = read_json(&manifest_path)?;
    if manifest.layout != EMBEDDINGS_LAYOUT {
        return Err(Error::format(
            &manifest_path,
            format!(
                "unknown layout `{}` (expected `{EMBEDDINGS_LAYOUT}`)",
                manifest.layout
            ),
        ));
    }
    if manifest.image_ids.len() != manifest.n {
        return Err(Error::format(
            &manifest_path,
            format!(
                "n = {} but {} image ids",
                manifest.n,
                manifest.image_ids.len()
            ),
        ));
    }
    let matrix = read_f32_blob(&dir.join(EMBEDS_FILE), manifest.n * manifest.vocab_size)?;
    let set = EmbeddingSet {
        image_ids: manifest.image_ids,
        vocab_size: manifest.vocab_size,
        source: manifest.source,
        normalized: manifest.normalized,
        matrix,
    };
    set.validate()?;
    Ok(set)
}
