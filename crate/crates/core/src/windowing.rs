//! Arbitration-id vocabulary and fixed-length sliding windows.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canio::{AddressWidth, CanFrame};
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("cannot build a vocabulary from an empty stream")]
    EmptyStream,
    #[error("stream of {len} tokens is shorter than window size {window}")]
    TooShort { len: usize, window: usize },
    #[error("window size must be at least 2, got {0}")]
    BadWindowSize(usize),
    #[error("stride must be at least 1")]
    BadStride,
    #[error("validation fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("training pool window {0} contains attack frames")]
    AbnormalWindow(usize),
    #[error("{0} windows cannot be split into non-empty train and validation sets")]
    TooFewWindows(usize),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("shard: {0}")]
    Shard(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Bijection between observed CAN ids and token indices `0..M`, followed by
/// the MASK (`M`) and UNK (`M + 1`) tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdVocabulary {
    ids: Vec<u32>,
    index: HashMap<u32, u32>,
}

impl IdVocabulary {
    /// Vocabulary over the distinct ids of `frames`, in ascending id order.
    pub fn build(frames: &[CanFrame]) -> Result<Self, WindowError> {
        if frames.is_empty() {
            return Err(WindowError::EmptyStream);
        }
        Self::from_ids(frames.iter().map(|f| f.can_id()))
    }

    pub fn from_ids(ids: impl IntoIterator<Item = u32>) -> Result<Self, WindowError> {
        let mut ids: Vec<u32> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(WindowError::EmptyStream);
        }
        let index = ids.iter().enumerate().map(|(t, &id)| (id, t as u32)).collect();
        Ok(Self { ids, index })
    }

    /// Number of real ids, M.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn mask_token(&self) -> u32 {
        self.ids.len() as u32
    }

    pub fn unk_token(&self) -> u32 {
        self.ids.len() as u32 + 1
    }

    /// M + 2.
    pub fn total_tokens(&self) -> usize {
        self.ids.len() + 2
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn token(&self, can_id: u32) -> Option<u32> {
        self.index.get(&can_id).copied()
    }

    pub fn token_or_unk(&self, can_id: u32) -> u32 {
        self.token(can_id).unwrap_or_else(|| self.unk_token())
    }

    /// The id behind a real token; `None` for MASK, UNK or out of range.
    pub fn can_id(&self, token: u32) -> Option<u32> {
        self.ids.get(token as usize).copied()
    }

    fn key_digits(&self) -> usize {
        if self.ids.iter().any(|&id| id > AddressWidth::Standard.max_id()) {
            8
        } else {
            3
        }
    }

    /// `{"0x100": 0, ...}` with fixed-width keys so key order is id order.
    pub fn to_json(&self) -> String {
        let digits = self.key_digits();
        let map: BTreeMap<String, u32> = self
            .ids
            .iter()
            .enumerate()
            .map(|(t, id)| (format!("0x{id:0digits$X}"), t as u32))
            .collect();
        serde_json::to_string_pretty(&map).expect("string map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, WindowError> {
        let map: BTreeMap<String, u32> = serde_json::from_str(text)?;
        let mut pairs = Vec::with_capacity(map.len());
        for (key, token) in map {
            let hex = key
                .strip_prefix("0x")
                .or_else(|| key.strip_prefix("0X"))
                .unwrap_or(&key);
            let id = u32::from_str_radix(hex, 16).map_err(|_| WindowError::Vocab(format!("bad id key `{key}`")))?;
            pairs.push((id, token));
        }
        let vocab = Self::from_ids(pairs.iter().map(|p| p.0))?;
        if vocab.len() != pairs.len() {
            return Err(WindowError::Vocab("duplicate ids".into()));
        }
        for (id, token) in pairs {
            if vocab.token(id) != Some(token) {
                return Err(WindowError::Vocab(format!(
                    "token {token} for {id:#x} breaks ascending-id order"
                )));
            }
        }
        Ok(vocab)
    }

    /// SHA-256 of the canonical JSON form; chains windows and checkpoints to
    /// the vocabulary they were built with.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), WindowError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, WindowError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A token stream with per-position attack labels (1 = injected frame).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<u32>,
    pub labels: Vec<u8>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Maps frames to tokens; ids outside the vocabulary become UNK.
pub fn tokenize(frames: &[CanFrame], vocab: &IdVocabulary) -> TokenStream {
    TokenStream {
        tokens: frames.iter().map(|f| vocab.token_or_unk(f.can_id())).collect(),
        labels: frames.iter().map(|f| f.label.is_attack() as u8).collect(),
    }
}

/// Inverse of [`tokenize`] for real tokens.
pub fn detokenize(tokens: &[u32], vocab: &IdVocabulary) -> Vec<Option<u32>> {
    tokens.iter().map(|&t| vocab.can_id(t)).collect()
}

/// What to do with windows containing ids unseen during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    /// Feed UNK to the model like any other token.
    #[default]
    Unk,
    /// Flag the window abnormal without consulting the model.
    Flag,
}

impl std::str::FromStr for OovPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unk" => Ok(Self::Unk),
            "flag" => Ok(Self::Flag),
            other => Err(format!("unknown oov policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub tokens: Vec<u32>,
    pub position_labels: Vec<u8>,
    /// 1 iff any position label is 1.
    pub sequence_label: u8,
    /// Index of the first frame in the source stream.
    pub origin: usize,
}

impl Window {
    pub fn new(tokens: Vec<u32>, position_labels: Vec<u8>, origin: usize) -> Self {
        assert_eq!(tokens.len(), position_labels.len(), "tokens and labels differ in length");
        let sequence_label = position_labels.iter().any(|&y| y != 0) as u8;
        Self {
            tokens,
            position_labels,
            sequence_label,
            origin,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_abnormal(&self) -> bool {
        self.sequence_label == 1
    }

    pub fn contains_token(&self, token: u32) -> bool {
        self.tokens.contains(&token)
    }
}

/// Number of windows `slide_windows` produces.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if len < window || stride == 0 {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Feature-based sliding window: length-`window` slices at offsets
/// `0, stride, 2 * stride, ...`.
pub fn slide_windows(stream: &TokenStream, window: usize, stride: usize) -> Result<Vec<Window>, WindowError> {
    if window < 2 {
        return Err(WindowError::BadWindowSize(window));
    }
    if stride == 0 {
        return Err(WindowError::BadStride);
    }
    if stream.len() < window {
        return Err(WindowError::TooShort {
            len: stream.len(),
            window,
        });
    }
    Ok((0..window_count(stream.len(), window, stride))
        .map(|i| {
            let s = i * stride;
            Window::new(
                stream.tokens[s..s + window].to_vec(),
                stream.labels[s..s + window].to_vec(),
                s,
            )
        })
        .collect())
}

/// Splits an attack-free pool into a leading train part and a trailing
/// validation part holding `ceil(n * valid_fraction)` windows.
pub fn split_train_valid(
    mut windows: Vec<Window>,
    valid_fraction: f64,
) -> Result<(Vec<Window>, Vec<Window>), WindowError> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(WindowError::BadFraction(valid_fraction));
    }
    if let Some(i) = windows.iter().position(Window::is_abnormal) {
        return Err(WindowError::AbnormalWindow(i));
    }
    let n = windows.len();
    let n_valid = ((n as f64 * valid_fraction) - 1e-9).ceil().max(0.0) as usize;
    if n_valid == 0 || n_valid >= n {
        return Err(WindowError::TooFewWindows(n));
    }
    let valid = windows.split_off(n - n_valid);
    Ok((windows, valid))
}

/// JSON sidecar of a window shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub format_version: u32,
    #[serde(rename = "T")]
    pub window: usize,
    pub stride: usize,
    pub count: usize,
    pub vocab_hash: String,
    /// Origin of the first window; later ones follow at `stride` spacing.
    pub first_origin: usize,
    pub blob_sha256: String,
}

pub const SHARD_FORMAT_VERSION: u32 = 1;

fn shard_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("bin"), base.with_extension("json"))
}

/// Writes `<base>.bin` (per window: T little-endian u32 tokens then T u8
/// labels) and `<base>.json`. Windows must be evenly strided and share T.
pub fn write_shard(
    base: &Path,
    windows: &[Window],
    stride: usize,
    vocab: &IdVocabulary,
) -> Result<ShardManifest, WindowError> {
    let window = windows.first().map_or(0, Window::len);
    let first_origin = windows.first().map_or(0, |w| w.origin);
    for (i, w) in windows.iter().enumerate() {
        if w.len() != window || w.origin != first_origin + i * stride {
            return Err(WindowError::Shard(format!("window {i} breaks the shard layout")));
        }
    }
    let mut blob = Vec::with_capacity(windows.len() * window * 5);
    for w in windows {
        for t in &w.tokens {
            blob.extend_from_slice(&t.to_le_bytes());
        }
        blob.extend_from_slice(&w.position_labels);
    }
    let manifest = ShardManifest {
        format_version: SHARD_FORMAT_VERSION,
        window,
        stride,
        count: windows.len(),
        vocab_hash: vocab.hash(),
        first_origin,
        blob_sha256: sha256_hex(&blob),
    };
    let (bin, json) = shard_paths(base);
    let mut out = BufWriter::new(File::create(bin)?);
    out.write_all(&blob)?;
    out.flush()?;
    std::fs::write(json, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_shard(base: &Path) -> Result<(ShardManifest, Vec<Window>), WindowError> {
    let (bin, json) = shard_paths(base);
    let manifest: ShardManifest = serde_json::from_str(&std::fs::read_to_string(json)?)?;
    if manifest.format_version != SHARD_FORMAT_VERSION {
        return Err(WindowError::Shard(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut blob = Vec::new();
    BufReader::new(File::open(bin)?).read_to_end(&mut blob)?;
    let record = manifest.window * 5;
    if blob.len() != record * manifest.count {
        return Err(WindowError::Shard(format!(
            "expected {} bytes, found {}",
            record * manifest.count,
            blob.len()
        )));
    }
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(WindowError::Shard("blob hash mismatch".into()));
    }
    let t = manifest.window;
    let windows = blob
        .chunks_exact(record.max(1))
        .take(manifest.count)
        .enumerate()
        .map(|(i, rec)| {
            let tokens = rec[..4 * t]
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Window::new(tokens, rec[4 * t..].to_vec(), manifest.first_origin + i * manifest.stride)
        })
        .collect();
    Ok((manifest, windows))
}
