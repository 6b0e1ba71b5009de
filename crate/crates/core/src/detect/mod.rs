//! Window scoring with the top-k masked-prediction rule, detection metrics,
//! the PCA baseline, and sweep tables.

mod metrics;
mod pca;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CanBertModel, ModelError};
use crate::numerics::Tensor2;
use crate::training::{mask_sequence, MaskedBatch, MaskedSequence};
use crate::util::rng_for;
use crate::windowing::{IdVocabulary, OovPolicy, Window, WindowError};

pub use metrics::{best_f1_threshold, Confusion};
pub use pca::{pca_fit, pca_fit_windows, pca_score, symmetric_eigen, token_histogram, PcaDetector};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("invalid detection config: {0}")]
    Config(String),
    #[error("nothing to score")]
    Empty,
    #[error("window {index} has length {len}, model expects {window}")]
    WindowLength { index: usize, len: usize, window: usize },
    #[error("vocabulary does not match the model ({vocab} vs {model} tokens)")]
    VocabMismatch { vocab: usize, model: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// How per-position misses become a window verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    /// Abnormal if any masked position misses.
    #[default]
    AnyMiss,
    /// Abnormal only if every masked position misses.
    AllMiss,
}

impl std::str::FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "any-miss" => Ok(Self::AnyMiss),
            "all-miss" => Ok(Self::AllMiss),
            other => Err(format!("unknown decision rule `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    /// Candidate-set size.
    pub k: usize,
    pub mask_ratio: f64,
    /// Independent maskings per window.
    pub passes: usize,
    pub decision: Decision,
    pub seed: u64,
    pub oov_policy: OovPolicy,
    /// Windows per forward pass.
    pub batch_size: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            k: 5,
            mask_ratio: 0.45,
            passes: 1,
            decision: Decision::AnyMiss,
            seed: 0,
            oov_policy: OovPolicy::Unk,
            batch_size: 64,
        }
    }
}

impl DetectConfig {
    fn validate(&self, vocab_len: usize) -> Result<(), DetectError> {
        if self.k == 0 || self.k > vocab_len {
            return Err(DetectError::Config(format!("k must lie in [1, {vocab_len}], got {}", self.k)));
        }
        if self.passes == 0 || self.batch_size == 0 {
            return Err(DetectError::Config("passes and batch_size must be at least 1".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(DetectError::Config("mask_ratio must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub abnormal: bool,
    /// Missed masked predictions over all passes, divided by their number.
    pub miss_fraction: f64,
    pub misses: usize,
    pub masked: usize,
    /// Flagged for containing unseen ids without consulting the model.
    pub oov_flagged: bool,
}

/// Whether `target` is among the `k` highest-scoring real-id tokens of
/// `logits` (the first `vocab_len` entries). Ties rank the lower token
/// first. MASK and UNK are never candidates, so an UNK target always misses.
pub fn in_top_k(logits: &[f64], target: usize, k: usize, vocab_len: usize) -> bool {
    if target >= vocab_len {
        return false;
    }
    let lt = logits[target];
    let ahead = logits[..vocab_len]
        .iter()
        .enumerate()
        .filter(|&(j, &l)| l > lt || (l == lt && j < target))
        .count();
    ahead < k
}

/// Masks drawn for `window` in pass `pass`; depends only on the seed and
/// the window's origin.
pub fn window_masks(window: &Window, cfg: &DetectConfig, mask_token: u32) -> Vec<MaskedSequence> {
    (0..cfg.passes)
        .map(|pass| {
            let mut rng = rng_for(cfg.seed, &[7, window.origin as u64, pass as u64]);
            mask_sequence(&window.tokens, cfg.mask_ratio, mask_token, &mut rng)
        })
        .collect()
}

fn check_inputs(model: &CanBertModel, vocab: &IdVocabulary, windows: &[Window]) -> Result<(), DetectError> {
    if vocab.total_tokens() != model.config().total_tokens {
        return Err(DetectError::VocabMismatch {
            vocab: vocab.total_tokens(),
            model: model.config().total_tokens,
        });
    }
    let t = model.config().window;
    if let Some((index, w)) = windows.iter().enumerate().find(|(_, w)| w.len() != t) {
        return Err(DetectError::WindowLength {
            index,
            len: w.len(),
            window: t,
        });
    }
    Ok(())
}

/// Per-window verdicts and scoring time (seconds per window, one entry per
/// window, each equal to its batch's time divided by the batch size).
pub fn score_windows(
    model: &CanBertModel,
    vocab: &IdVocabulary,
    windows: &[Window],
    cfg: &DetectConfig,
) -> Result<(Vec<WindowScore>, Vec<f64>), DetectError> {
    cfg.validate(vocab.len())?;
    check_inputs(model, vocab, windows)?;
    let mask_token = vocab.mask_token();
    let unk = vocab.unk_token();
    let mut scores = Vec::with_capacity(windows.len());
    let mut seconds = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(cfg.batch_size) {
        let t0 = Instant::now();
        let mut sequences = Vec::with_capacity(chunk.len() * cfg.passes);
        let mut owners = Vec::new();
        let mut flagged = vec![false; chunk.len()];
        for (i, w) in chunk.iter().enumerate() {
            if cfg.oov_policy == OovPolicy::Flag && w.contains_token(unk) {
                flagged[i] = true;
                continue;
            }
            for m in window_masks(w, cfg, mask_token) {
                owners.push(i);
                sequences.push(m);
            }
        }
        let mut tallies = vec![(0usize, 0usize); chunk.len()];
        if !sequences.is_empty() {
            let batch = MaskedBatch::new(&sequences);
            let logits: Tensor2 = model.forward_rows(&batch.inputs, &batch.rows)?;
            for (r, (&row, &target)) in batch.rows.iter().zip(&batch.targets).enumerate() {
                let owner = owners[row / batch.window];
                let hit = in_top_k(logits.row(r), target, cfg.k, vocab.len());
                tallies[owner].0 += (!hit) as usize;
                tallies[owner].1 += 1;
            }
        }
        let per_window = t0.elapsed().as_secs_f64() / chunk.len() as f64;
        for (i, (misses, masked)) in tallies.into_iter().enumerate() {
            let score = if flagged[i] {
                WindowScore {
                    abnormal: true,
                    miss_fraction: 1.0,
                    misses: 0,
                    masked: 0,
                    oov_flagged: true,
                }
            } else {
                let abnormal = match cfg.decision {
                    Decision::AnyMiss => misses > 0,
                    Decision::AllMiss => misses == masked,
                };
                WindowScore {
                    abnormal,
                    miss_fraction: misses as f64 / masked as f64,
                    misses,
                    masked,
                    oov_flagged: false,
                }
            };
            scores.push(score);
            seconds.push(per_window);
        }
    }
    Ok((scores, seconds))
}

/// Scores one window.
pub fn score_window(
    model: &CanBertModel,
    vocab: &IdVocabulary,
    window: &Window,
    cfg: &DetectConfig,
) -> Result<WindowScore, DetectError> {
    let (scores, _) = score_windows(model, vocab, std::slice::from_ref(window), cfg)?;
    Ok(scores[0])
}

/// Fraction of masked positions whose true token is in the model's top-k,
/// with masks drawn as in detection.
pub fn masked_top_k_accuracy(
    model: &CanBertModel,
    vocab: &IdVocabulary,
    windows: &[Window],
    cfg: &DetectConfig,
) -> Result<f64, DetectError> {
    let (scores, _) = score_windows(
        model,
        vocab,
        windows,
        &DetectConfig {
            oov_policy: OovPolicy::Unk,
            ..cfg.clone()
        },
    )?;
    let masked: usize = scores.iter().map(|s| s.masked).sum();
    let misses: usize = scores.iter().map(|s| s.misses).sum();
    if masked == 0 {
        return Err(DetectError::Empty);
    }
    Ok(1.0 - misses as f64 / masked as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub p95_ms: f64,
}

impl Timing {
    pub fn from_seconds(seconds: &[f64]) -> Self {
        if seconds.is_empty() {
            return Self {
                mean_ms: 0.0,
                p95_ms: 0.0,
            };
        }
        let mut ms: Vec<f64> = seconds.iter().map(|s| s * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let idx = ((0.95 * ms.len() as f64).ceil() as usize).clamp(1, ms.len()) - 1;
        Self {
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p95_ms: ms[idx],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredWindow {
    pub origin: usize,
    pub label: u8,
    pub predicted: u8,
    pub miss_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub config: DetectConfig,
    pub window: usize,
    pub windows: usize,
    #[serde(flatten)]
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oov_flagged: usize,
    pub timing: Timing,
    pub scores: Vec<ScoredWindow>,
}

impl DetectionReport {
    /// Equality ignoring wall-clock timing.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.config == other.config
            && self.confusion == other.confusion
            && self.scores == other.scores
            && self.oov_flagged == other.oov_flagged
    }

    pub fn write_json(&self, path: &Path) -> Result<(), DetectError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// One row per window: origin, label, predicted, miss_fraction.
    pub fn write_scores_csv<W: Write>(&self, out: W) -> Result<(), DetectError> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.scores {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores every window and tallies the confusion matrix against the
/// sequence labels.
pub fn evaluate(
    model: &CanBertModel,
    vocab: &IdVocabulary,
    windows: &[Window],
    cfg: &DetectConfig,
) -> Result<DetectionReport, DetectError> {
    if windows.is_empty() {
        return Err(DetectError::Empty);
    }
    let (scores, seconds) = score_windows(model, vocab, windows, cfg)?;
    let mut confusion = Confusion::default();
    let mut scored = Vec::with_capacity(windows.len());
    for (w, s) in windows.iter().zip(&scores) {
        confusion.add(w.is_abnormal(), s.abnormal);
        scored.push(ScoredWindow {
            origin: w.origin,
            label: w.sequence_label,
            predicted: s.abnormal as u8,
            miss_fraction: s.miss_fraction,
        });
    }
    Ok(DetectionReport {
        config: cfg.clone(),
        window: model.config().window,
        windows: windows.len(),
        precision: confusion.precision(),
        recall: confusion.recall(),
        f1: confusion.f1(),
        confusion,
        oov_flagged: scores.iter().filter(|s| s.oov_flagged).count(),
        timing: Timing::from_seconds(&seconds),
        scores: scored,
    })
}

/// Which axis a sweep varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepSetting {
    Window(usize),
    MaskHeads { mask_ratio: f64, heads: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub attack: String,
    pub setting: SweepSetting,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_latency_ms: f64,
}

pub struct SweepEntry<'a> {
    pub setting: SweepSetting,
    pub model: &'a CanBertModel,
    pub vocab: &'a IdVocabulary,
    pub detect: DetectConfig,
}

/// Evaluates every entry on every labeled dataset. `windows_for` builds the
/// windows of a dataset for a vocabulary and window size.
pub fn sweep<F>(entries: &[SweepEntry<'_>], datasets: &[&str], mut windows_for: F) -> Result<Vec<SweepRow>, DetectError>
where
    F: FnMut(&str, &IdVocabulary, usize) -> Result<Vec<Window>, DetectError>,
{
    let mut rows = Vec::new();
    for entry in entries {
        for &name in datasets {
            let windows = windows_for(name, entry.vocab, entry.model.config().window)?;
            let report = evaluate(entry.model, entry.vocab, &windows, &entry.detect)?;
            rows.push(SweepRow {
                attack: name.to_string(),
                setting: entry.setting.clone(),
                precision: report.precision,
                recall: report.recall,
                f1: report.f1,
                mean_latency_ms: report.timing.mean_ms,
            });
        }
    }
    Ok(rows)
}

/// CSV with header `attack,T,...` or `attack,m,h,...` depending on the
/// setting of the first row.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), DetectError> {
    let mut w = csv::Writer::from_writer(out);
    let by_window = matches!(rows.first().map(|r| &r.setting), Some(SweepSetting::Window(_)) | None);
    if by_window {
        w.write_record(["attack", "T", "precision", "recall", "f1", "mean_latency_ms"])?;
    } else {
        w.write_record(["attack", "m", "h", "precision", "recall", "f1", "mean_latency_ms"])?;
    }
    for r in rows {
        let mut rec = vec![r.attack.clone()];
        match r.setting {
            SweepSetting::Window(t) => rec.push(t.to_string()),
            SweepSetting::MaskHeads { mask_ratio, heads } => {
                rec.push(mask_ratio.to_string());
                rec.push(heads.to_string());
            }
        }
        for v in [r.precision, r.recall, r.f1, r.mean_latency_ms] {
            rec.push(format!("{v:.6}"));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
