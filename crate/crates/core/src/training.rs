//! Masked-id pretraining: random masking, Adam over shuffled batches, and
//! early stopping on a fixed-mask validation loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CanBertModel, ModelConfig, ModelError, Mode};
use crate::numerics::{adam_step, AdamConfig, NumericError, Tensor2};
use crate::util::rng_for;
use crate::windowing::Window;

pub use crate::model::{load_checkpoint, parameter_hash, save_checkpoint, Checkpoint, CheckpointManifest};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training windows")]
    EmptyTrainingSet,
    #[error("no validation windows")]
    EmptyValidationSet,
    #[error("training window {0} contains attack frames")]
    AbnormalWindow(usize),
    #[error("loss diverged (non-finite) in epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mask_ratio: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub valid_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            mask_ratio: 0.45,
            batch_size: 32,
            lr: adam.lr,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            valid_fraction: 0.1,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return bad("batch_size, patience and max_epochs must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be non-negative");
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return bad("valid_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Masked positions per sequence: `max(1, round_half_up(m * T))`.
pub fn mask_count(window: usize, mask_ratio: f64) -> usize {
    // The small nudge keeps products like 0.3 * 5 = 1.4999999999999998
    // rounding up as intended.
    ((mask_ratio * window as f64 + 0.5 + 1e-9).floor() as usize).clamp(1, window)
}

/// One sequence after masking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub inputs: Vec<u32>,
    /// Original tokens at `positions`.
    pub targets: Vec<u32>,
    /// Sorted, distinct masked positions.
    pub positions: Vec<usize>,
}

impl MaskedSequence {
    /// Writes the targets back; yields the unmasked sequence.
    pub fn restore(&self) -> Vec<u32> {
        let mut out = self.inputs.clone();
        for (&p, &t) in self.positions.iter().zip(&self.targets) {
            out[p] = t;
        }
        out
    }
}

/// Replaces `mask_count(T, m)` uniformly chosen positions with `mask_token`.
pub fn mask_sequence<R: Rng + ?Sized>(tokens: &[u32], mask_ratio: f64, mask_token: u32, rng: &mut R) -> MaskedSequence {
    let r = mask_count(tokens.len(), mask_ratio);
    let mut positions = rand::seq::index::sample(rng, tokens.len(), r).into_vec();
    positions.sort_unstable();
    let mut inputs = tokens.to_vec();
    let targets = positions
        .iter()
        .map(|&p| std::mem::replace(&mut inputs[p], mask_token))
        .collect();
    MaskedSequence {
        inputs,
        targets,
        positions,
    }
}

/// Several masked sequences stacked for one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub window: usize,
    /// `batch * window` input tokens.
    pub inputs: Vec<u32>,
    /// Stacked row index of every masked position.
    pub rows: Vec<usize>,
    pub targets: Vec<usize>,
}

impl MaskedBatch {
    pub fn new(sequences: &[MaskedSequence]) -> Self {
        let window = sequences.first().map_or(0, |s| s.inputs.len());
        let mut batch = Self {
            window,
            inputs: Vec::with_capacity(window * sequences.len()),
            rows: Vec::new(),
            targets: Vec::new(),
        };
        for (b, s) in sequences.iter().enumerate() {
            assert_eq!(s.inputs.len(), window, "ragged batch");
            batch.inputs.extend_from_slice(&s.inputs);
            batch.rows.extend(s.positions.iter().map(|p| b * window + p));
            batch.targets.extend(s.targets.iter().map(|&t| t as usize));
        }
        batch
    }

    pub fn len(&self) -> usize {
        if self.window == 0 {
            0
        } else {
            self.inputs.len() / self.window
        }
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn masked_positions(&self) -> usize {
        self.rows.len()
    }
}

/// Window indices of each batch in `epoch`: a seeded shuffle cut into
/// `batch_size` chunks. With `batch_size > 1`, a trailing batch of one is
/// dropped unless it is the only batch.
pub fn plan_epoch(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[3, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batch_size > 1 && batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        batches.pop();
    }
    batches
}

/// The masked batches `train_epoch` will see for `epoch`.
pub fn epoch_batches(windows: &[Window], cfg: &TrainConfig, mask_token: u32, epoch: usize) -> Vec<MaskedBatch> {
    plan_epoch(windows.len(), cfg.batch_size, cfg.seed, epoch)
        .iter()
        .enumerate()
        .map(|(b, idx)| batch_for(windows, idx, cfg, mask_token, epoch, b))
        .collect()
}

fn batch_for(
    windows: &[Window],
    idx: &[usize],
    cfg: &TrainConfig,
    mask_token: u32,
    epoch: usize,
    b: usize,
) -> MaskedBatch {
    let mut rng = rng_for(cfg.seed, &[4, epoch as u64, b as u64]);
    let seqs: Vec<MaskedSequence> = idx
        .iter()
        .map(|&i| mask_sequence(&windows[i].tokens, cfg.mask_ratio, mask_token, &mut rng))
        .collect();
    MaskedBatch::new(&seqs)
}

fn check_pool(model: &CanBertModel, windows: &[Window]) -> Result<(), TrainError> {
    let t = model.config().window;
    for (i, w) in windows.iter().enumerate() {
        if w.is_abnormal() {
            return Err(TrainError::AbnormalWindow(i));
        }
        if w.len() != t {
            return Err(ModelError::Length { window: t, got: w.len() }.into());
        }
    }
    Ok(())
}

fn is_divergence(e: &ModelError) -> bool {
    matches!(e, ModelError::Numeric(NumericError::NonFinite(_)))
}

/// One pass over shuffled batches with an Adam step after each. Returns the
/// mean loss over all masked positions of the epoch.
pub fn train_epoch(
    model: &mut CanBertModel,
    windows: &[Window],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mask_token = (model.config().total_tokens - 2) as u32;
    let adam = cfg.adam();
    let (mut total, mut count) = (0.0, 0usize);
    for (b, idx) in plan_epoch(windows.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
        let batch = batch_for(windows, idx, cfg, mask_token, epoch, b);
        let mut rng = rng_for(cfg.seed, &[5, epoch as u64, b as u64]);
        let loss = model
            .loss_and_backward(&batch.inputs, &batch.rows, &batch.targets, Mode::Train, &mut rng)
            .map_err(|e| if is_divergence(&e) { TrainError::Divergence { epoch, batch: b } } else { e.into() })?;
        if !loss.is_finite() || model.params().iter().any(|p| !p.grad.is_finite()) {
            return Err(TrainError::Divergence { epoch, batch: b });
        }
        adam_step(model.params_mut(), &adam);
        total += loss * batch.masked_positions() as f64;
        count += batch.masked_positions();
    }
    Ok(total / count as f64)
}

/// Validation windows with masks drawn once, so every epoch is scored on the
/// same prediction tasks.
#[derive(Debug, Clone)]
pub struct ValidationSet {
    batches: Vec<MaskedBatch>,
}

impl ValidationSet {
    const BATCH: usize = 64;

    pub fn new(windows: &[Window], mask_ratio: f64, mask_token: u32, seed: u64) -> Self {
        let batches = windows
            .chunks(Self::BATCH)
            .enumerate()
            .map(|(b, chunk)| {
                let mut rng = rng_for(seed, &[6, b as u64]);
                let seqs: Vec<_> = chunk
                    .iter()
                    .map(|w| mask_sequence(&w.tokens, mask_ratio, mask_token, &mut rng))
                    .collect();
                MaskedBatch::new(&seqs)
            })
            .collect();
        Self { batches }
    }

    pub fn batches(&self) -> &[MaskedBatch] {
        &self.batches
    }

    /// Mean eval-mode cross-entropy over every masked position.
    pub fn loss(&self, model: &CanBertModel) -> Result<f64, TrainError> {
        let (mut total, mut count) = (0.0, 0usize);
        for batch in &self.batches {
            let loss = model.masked_loss(&batch.inputs, &batch.rows, &batch.targets)?;
            total += loss * batch.masked_positions() as f64;
            count += batch.masked_positions();
        }
        if count == 0 {
            return Err(TrainError::EmptyValidationSet);
        }
        Ok(total / count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    Callback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub parameter_count: usize,
    pub train_windows: usize,
    pub valid_windows: usize,
    pub masked_per_window: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stopped_epoch: usize,
    pub stop_reason: StopReason,
    pub seconds: f64,
}

/// Patience bookkeeping on validation loss. Strict improvement resets the
/// counter; anything else, including a tie, counts against it.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records one epoch; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if self.best.is_none_or(|(_, b)| loss < b) {
            self.best = Some((epoch, loss));
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }

    /// `(epoch, loss)` of the best epoch so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// [`fit_with`] without a callback.
pub fn fit(
    model: &mut CanBertModel,
    train: &[Window],
    valid: &[Window],
    cfg: &TrainConfig,
) -> Result<TrainingReport, TrainError> {
    fit_with(model, train, valid, cfg, |_, _| true)
}

/// Trains until patience runs out, `max_epochs` is reached, or `on_epoch`
/// returns false. On return `model` holds the weights of the epoch with the
/// lowest validation loss.
pub fn fit_with<F>(
    model: &mut CanBertModel,
    train: &[Window],
    valid: &[Window],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainingReport, TrainError>
where
    F: FnMut(&EpochRecord, &CanBertModel) -> bool,
{
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if valid.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    check_pool(model, train)?;
    check_pool(model, valid)?;
    let started = Instant::now();
    let mask_token = (model.config().total_tokens - 2) as u32;
    let validation = ValidationSet::new(valid, cfg.mask_ratio, mask_token, cfg.seed);

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut snapshot: Vec<Tensor2> = Vec::new();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let train_loss = train_epoch(model, train, cfg, epoch)?;
        let valid_loss = validation.loss(model)?;
        if !valid_loss.is_finite() {
            return Err(TrainError::Divergence { epoch, batch: 0 });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.4} valid {valid_loss:.4} ({:.1}s)",
            record.seconds
        );
        if stopper.observe(epoch, valid_loss) {
            snapshot = model.params().iter().map(|p| p.value.clone()).collect();
        }
        let keep_going = on_epoch(&record, model);
        epochs.push(record);
        if !keep_going {
            stop_reason = StopReason::Callback;
            break;
        }
        if stopper.should_stop() {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, best_valid_loss) = stopper.best().expect("at least one epoch ran");
    for (p, v) in model.params_mut().iter_mut().zip(snapshot) {
        p.value = v;
    }
    Ok(TrainingReport {
        train_config: cfg.clone(),
        model_config: model.config().clone(),
        parameter_count: model.parameter_count(),
        train_windows: train.len(),
        valid_windows: valid.len(),
        masked_per_window: mask_count(model.config().window, cfg.mask_ratio),
        stopped_epoch: epochs.len(),
        epochs,
        best_epoch,
        best_valid_loss,
        stop_reason,
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_counts() {
        assert_eq!(mask_count(32, 0.45), 14);
        assert_eq!(mask_count(32, 0.001), 1);
        assert_eq!(mask_count(5, 0.3), 2);
        assert_eq!(mask_count(10, 0.25), 3);
        for m in [0.15, 0.3, 0.45, 0.6] {
            for t in [16, 32, 64, 128, 256] {
                let r = mask_count(t, m);
                assert_eq!(r, ((m * t as f64) + 0.5 + 1e-9).floor() as usize);
                assert!((1..=t).contains(&r));
            }
        }
    }

    #[test]
    fn masking_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens: Vec<u32> = (0..32).map(|i| i % 7).collect();
        let m = mask_sequence(&tokens, 0.45, 99, &mut rng);
        assert_eq!(m.positions.len(), 14);
        assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
        assert!(m.positions.iter().all(|&p| m.inputs[p] == 99));
        assert_eq!(m.inputs.iter().filter(|&&t| t == 99).count(), 14);
        assert_eq!(m.restore(), tokens);
    }

    #[test]
    fn epoch_plan_rules() {
        let plan = plan_epoch(65, 32, 0, 1);
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32]);
        let plan = plan_epoch(66, 32, 0, 1);
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 2]);
        assert_eq!(plan_epoch(1, 32, 0, 1), vec![vec![0]]);
        assert_ne!(plan_epoch(100, 10, 0, 1), plan_epoch(100, 10, 0, 2));
        let mut all: Vec<usize> = plan_epoch(100, 7, 3, 4).concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn batch_rows_index_stacked_positions() {
        let seqs = vec![
            MaskedSequence {
                inputs: vec![9, 1, 2],
                targets: vec![0],
                positions: vec![0],
            },
            MaskedSequence {
                inputs: vec![3, 9, 9],
                targets: vec![4, 5],
                positions: vec![1, 2],
            },
        ];
        let b = MaskedBatch::new(&seqs);
        assert_eq!(b.rows, vec![0, 4, 5]);
        assert_eq!(b.targets, vec![0, 4, 5]);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { mask_ratio: 0.0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { valid_fraction: 1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
