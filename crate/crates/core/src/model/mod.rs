//! The masked-id transformer: token embedding plus fixed sinusoidal
//! positions, `L` post-norm encoder layers, and a linear head over all
//! `M + 2` tokens.
//!
//! Batches are processed as one stacked `(B*T) x d` matrix so the dense
//! projections run as single large GEMMs; only attention works per sequence.

mod attention;
pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    accumulate_bias_grad, accumulate_tn, add_row_bias, cross_entropy_from_logits, dropout, dropout_backward, gemm,
    layernorm_rows, layernorm_rows_backward, matmul, matmul_nt, relu, relu_backward, DropoutMask, LayerNormCache,
    NumericError, Parameter, Tensor2,
};

pub use checkpoint::{load_checkpoint, parameter_hash, save_checkpoint, Checkpoint, CheckpointManifest};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} at position {position} outside vocabulary of {total}")]
    TokenOutOfRange { position: usize, token: u32, total: usize },
    #[error("expected a multiple of {window} tokens, got {got}")]
    Length { window: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn default_ln_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Sequence length T.
    #[serde(rename = "T")]
    pub window: usize,
    /// M + 2: every real id plus MASK and UNK.
    pub total_tokens: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Default architecture (4 layers, d = 256, d_ff = 512, one head,
    /// dropout 0.1) for `vocab_len` real ids.
    pub fn new(window: usize, vocab_len: usize) -> Self {
        Self {
            layers: 4,
            d_model: 256,
            d_ff: 512,
            heads: 1,
            dropout: 0.1,
            window,
            total_tokens: vocab_len + 2,
            ln_eps: default_ln_eps(),
        }
    }

    /// Per-head width F = d / h.
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn vocab_len(&self) -> usize {
        self.total_tokens.saturating_sub(2)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.layers == 0 || self.d_ff == 0 || self.heads == 0 {
            return bad("layers, d_ff and heads must be at least 1".into());
        }
        if self.d_model < 2 || self.d_model % 2 != 0 {
            return bad(format!("d_model must be even and at least 2, got {}", self.d_model));
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.window < 2 {
            return bad(format!("T must be at least 2, got {}", self.window));
        }
        if self.total_tokens < 3 {
            return bad("vocabulary needs at least one real id".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Parameters of one encoder layer.
    pub fn layer_parameter_count(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        3 * d * d + d * d + 2 * 2 * d + d * f + f + f * d + d
    }

    /// `V*d + L*layer + d*V + V` with `V = M + 2`.
    pub fn closed_form_parameter_count(&self) -> usize {
        let v = self.total_tokens;
        v * self.d_model + self.layers * self.layer_parameter_count() + self.d_model * v + v
    }
}

/// Sinusoidal position table: `PE[p, 2i] = sin(p / 10000^(2i/d))`,
/// `PE[p, 2i+1] = cos(...)`.
pub fn positional_encoding(window: usize, d: usize) -> Result<Tensor2, ModelError> {
    if d % 2 != 0 {
        return Err(ModelError::Config(format!("positional encoding needs even d, got {d}")));
    }
    let mut pe = Tensor2::zeros(window, d);
    for p in 0..window {
        let row = pe.row_mut(p);
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

// Registry layout: embedding, then 12 tensors per layer, then the head.
const EMBED: usize = 0;
const PER_LAYER: usize = 12;
const WQ: usize = 0;
const WK: usize = 1;
const WV: usize = 2;
const WO: usize = 3;
const LN1_G: usize = 4;
const LN1_B: usize = 5;
const W1: usize = 6;
const B1: usize = 7;
const W2: usize = 8;
const B2: usize = 9;
const LN2_G: usize = 10;
const LN2_B: usize = 11;

fn layer_slot(layer: usize, slot: usize) -> usize {
    1 + layer * PER_LAYER + slot
}

const SLOT_NAMES: [&str; PER_LAYER] = [
    "attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "ln1.gain", "ln1.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
    "ln2.gain", "ln2.bias",
];

/// Per-layer intermediates kept for the backward pass.
struct LayerCache {
    x: Tensor2,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    probs: Vec<f64>,
    ctx: Tensor2,
    drop_attn: DropoutMask,
    ln1: LayerNormCache,
    e: Tensor2,
    h_pre: Tensor2,
    h_act: Tensor2,
    drop_ffn: DropoutMask,
    ln2: LayerNormCache,
}

/// Everything the backward pass needs from one batched forward pass.
pub struct EncoderCache {
    tokens: Vec<u32>,
    batch: usize,
    drop_embed: DropoutMask,
    layers: Vec<LayerCache>,
}

impl EncoderCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Attention weights (`T x T`, rows are queries) for one layer, sequence
    /// and head.
    pub fn attention(&self, layer: usize, seq: usize, head: usize) -> Tensor2 {
        let lc = &self.layers[layer];
        let t = lc.x.rows() / self.batch;
        let heads = lc.probs.len() / (self.batch * t * t);
        let start = (seq * heads + head) * t * t;
        Tensor2::from_vec(t, t, lc.probs[start..start + t * t].to_vec()).expect("t*t slice")
    }
}

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct CanBertModel {
    config: ModelConfig,
    params: Vec<Parameter>,
    pe: Tensor2,
}

impl CanBertModel {
    /// Fresh model: embedding rows ~ N(0, 1), projection weights
    /// ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, layer-norm gains 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = |rows: usize, cols: usize, dist: &dyn Fn(&mut ChaCha8Rng) -> f64| {
            Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| dist(&mut rng)).collect())
                .expect("sized data")
        };
        let unit = Normal::new(0.0, 1.0).expect("valid std");
        let (v, d, f) = (config.total_tokens, config.d_model, config.d_ff);
        let embed = sample(v, d, &|r| unit.sample(r));
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            sample(rows, cols, &|r| r.random_range(-bound..bound))
        };
        let mut params = vec![Parameter::new("embed", embed)];
        for l in 0..config.layers {
            let tensors = [
                uniform(d, d),
                uniform(d, d),
                uniform(d, d),
                uniform(d, d),
                Tensor2::full(1, d, 1.0),
                Tensor2::zeros(1, d),
                uniform(d, f),
                Tensor2::zeros(1, f),
                uniform(f, d),
                Tensor2::zeros(1, d),
                Tensor2::full(1, d, 1.0),
                Tensor2::zeros(1, d),
            ];
            for (slot, t) in tensors.into_iter().enumerate() {
                params.push(Parameter::new(format!("layers.{l}.{}", SLOT_NAMES[slot]), t));
            }
        }
        params.push(Parameter::new("head.w", uniform(d, v)));
        params.push(Parameter::new("head.b", Tensor2::zeros(1, v)));
        Self::from_parameters(config, params)
    }

    /// Assembles a model from a registry in canonical order, checking every
    /// shape against the config.
    pub fn from_parameters(config: ModelConfig, params: Vec<Parameter>) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = Self::registry(&config);
        if params.len() != expected.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (p, (name, shape)) in params.iter().zip(&expected) {
            if &p.name != name || p.shape() != *shape {
                return Err(ModelError::Config(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.shape(),
                    name,
                    shape
                )));
            }
        }
        let pe = positional_encoding(config.window, config.d_model)?;
        let model = Self { config, params, pe };
        assert_eq!(model.parameter_count(), model.config.closed_form_parameter_count());
        Ok(model)
    }

    /// Names and shapes of every parameter tensor, in registry order.
    pub fn registry(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let (v, d, f) = (config.total_tokens, config.d_model, config.d_ff);
        let shapes = [(d, d), (d, d), (d, d), (d, d), (1, d), (1, d), (d, f), (1, f), (f, d), (1, d), (1, d), (1, d)];
        let mut out = vec![("embed".to_string(), (v, d))];
        for l in 0..config.layers {
            for (slot, shape) in shapes.iter().enumerate() {
                out.push((format!("layers.{l}.{}", SLOT_NAMES[slot]), *shape));
            }
        }
        out.push(("head.w".into(), (d, v)));
        out.push(("head.b".into(), (1, v)));
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Sum of all parameter tensor sizes.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }

    fn w(&self, idx: usize) -> &Tensor2 {
        &self.params[idx].value
    }

    fn head_w(&self) -> usize {
        1 + self.config.layers * PER_LAYER
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<usize, ModelError> {
        let t = self.config.window;
        if tokens.is_empty() || tokens.len() % t != 0 {
            return Err(ModelError::Length {
                window: t,
                got: tokens.len(),
            });
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &tok)| tok as usize >= self.config.total_tokens)
        {
            return Err(ModelError::TokenOutOfRange {
                position,
                token,
                total: self.config.total_tokens,
            });
        }
        Ok(tokens.len() / t)
    }

    /// `X[t] = embed[token_t] + PE[t]` for every stacked position, before
    /// dropout.
    pub fn embed_sequence(&self, tokens: &[u32]) -> Result<Tensor2, ModelError> {
        self.check_tokens(tokens)?;
        let (t, d) = (self.config.window, self.config.d_model);
        let emb = self.w(EMBED);
        let mut x = Tensor2::zeros(tokens.len(), d);
        for (i, &tok) in tokens.iter().enumerate() {
            let pe = self.pe.row(i % t);
            for ((o, e), p) in x.row_mut(i).iter_mut().zip(emb.row(tok as usize)).zip(pe) {
                *o = e + p;
            }
        }
        Ok(x)
    }

    fn layer_forward<R: Rng + ?Sized>(
        &self,
        l: usize,
        x: Tensor2,
        batch: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor2, LayerCache), ModelError> {
        let cfg = &self.config;
        let p = |slot| self.w(layer_slot(l, slot));
        let training = mode == Mode::Train;
        let q = matmul(&x, p(WQ))?;
        let k = matmul(&x, p(WK))?;
        let v = matmul(&x, p(WV))?;
        debug_assert_eq!(x.rows(), batch * cfg.window);
        let (ctx, probs) = attention::forward(&q, &k, &v, cfg.window, cfg.heads);
        let a = matmul(&ctx, p(WO))?;
        let (a, drop_attn) = dropout(&a, cfg.dropout, training, rng)?;
        let (e, ln1) = layernorm_rows(&x.add(&a)?, p(LN1_G), p(LN1_B), cfg.ln_eps)?;
        let mut h_pre = matmul(&e, p(W1))?;
        add_row_bias(&mut h_pre, p(B1))?;
        let h_act = relu(&h_pre);
        let mut f = matmul(&h_act, p(W2))?;
        add_row_bias(&mut f, p(B2))?;
        let (f, drop_ffn) = dropout(&f, cfg.dropout, training, rng)?;
        let (out, ln2) = layernorm_rows(&e.add(&f)?, p(LN2_G), p(LN2_B), cfg.ln_eps)?;
        let cache = LayerCache {
            x,
            q,
            k,
            v,
            probs,
            ctx,
            drop_attn,
            ln1,
            e,
            h_pre,
            h_act,
            drop_ffn,
            ln2,
        };
        Ok((out, cache))
    }

    /// Runs the encoder over `tokens` (a multiple of T, sequences stacked)
    /// and returns the final hidden states `(B*T) x d`.
    ///
    /// The cache is only populated when `keep_cache` is set; eval-only callers
    /// skip it to save memory.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tokens: &[u32],
        mode: Mode,
        keep_cache: bool,
        rng: &mut R,
    ) -> Result<(Tensor2, Option<EncoderCache>), ModelError> {
        let batch = self.check_tokens(tokens)?;
        let x = self.embed_sequence(tokens)?;
        let (mut x, drop_embed) = dropout(&x, self.config.dropout, mode == Mode::Train, rng)?;
        let mut layers = Vec::new();
        for l in 0..self.config.layers {
            let (out, cache) = self.layer_forward(l, x, batch, mode, rng)?;
            if keep_cache {
                layers.push(cache);
            }
            x = out;
        }
        let cache = keep_cache.then(|| EncoderCache {
            tokens: tokens.to_vec(),
            batch,
            drop_embed,
            layers,
        });
        Ok((x, cache))
    }

    /// Output head `H W^m + b^m` for arbitrary hidden rows.
    pub fn head(&self, hidden: &Tensor2) -> Result<Tensor2, ModelError> {
        let hw = self.head_w();
        let mut logits = matmul(hidden, self.w(hw))?;
        add_row_bias(&mut logits, self.w(hw + 1))?;
        Ok(logits)
    }

    /// Eval-mode logits (`(B*T) x (M+2)`) for stacked windows.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor2, ModelError> {
        let mut rng = NoRng;
        let (hidden, _) = self.encode(tokens, Mode::Eval, false, &mut rng)?;
        self.head(&hidden)
    }

    /// Eval-mode logits at selected stacked rows only.
    pub fn forward_rows(&self, tokens: &[u32], rows: &[usize]) -> Result<Tensor2, ModelError> {
        let mut rng = NoRng;
        let (hidden, _) = self.encode(tokens, Mode::Eval, false, &mut rng)?;
        self.head(&gather_rows(&hidden, rows))
    }

    /// Mean cross-entropy of `targets` at stacked rows `rows`, without
    /// gradients.
    pub fn masked_loss(&self, tokens: &[u32], rows: &[usize], targets: &[usize]) -> Result<f64, ModelError> {
        let logits = self.forward_rows(tokens, rows)?;
        Ok(cross_entropy_from_logits(&logits, targets)?.0)
    }

    /// Forward pass in `mode`, masked cross-entropy at `rows`, and backward
    /// pass. Gradients are added into each parameter's `grad`; the loss is
    /// returned.
    pub fn loss_and_backward<R: Rng + ?Sized>(
        &mut self,
        tokens: &[u32],
        rows: &[usize],
        targets: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<f64, ModelError> {
        let (hidden, cache) = self.encode(tokens, mode, true, rng)?;
        let cache = cache.expect("cache requested");
        let hm = gather_rows(&hidden, rows);
        let logits = self.head(&hm)?;
        let (loss, dlogits) = cross_entropy_from_logits(&logits, targets)?;
        if !loss.is_finite() {
            return Err(NumericError::NonFinite("masked loss").into());
        }

        let mut grads: Vec<Tensor2> = self
            .params
            .iter_mut()
            .map(|p| std::mem::replace(&mut p.grad, Tensor2::zeros(0, 0)))
            .collect();
        let result = self.backward(&cache, &hm, rows, &dlogits, hidden.rows(), &mut grads);
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad = g;
        }
        result.map(|_| loss)
    }

    fn backward(
        &self,
        cache: &EncoderCache,
        hm: &Tensor2,
        rows: &[usize],
        dlogits: &Tensor2,
        total_rows: usize,
        grads: &mut [Tensor2],
    ) -> Result<(), ModelError> {
        let cfg = &self.config;
        let hw = self.head_w();
        accumulate_tn(&mut grads[hw], hm, dlogits)?;
        accumulate_bias_grad(&mut grads[hw + 1], dlogits)?;
        let dhm = matmul_nt(dlogits, self.w(hw))?;
        let mut dx = Tensor2::zeros(total_rows, cfg.d_model);
        for (i, &r) in rows.iter().enumerate() {
            for (o, g) in dx.row_mut(r).iter_mut().zip(dhm.row(i)) {
                *o += g;
            }
        }

        for l in (0..cfg.layers).rev() {
            let lc = &cache.layers[l];
            let idx = |slot| layer_slot(l, slot);
            let p = |slot| self.w(idx(slot));

            // out = LN2(E + Dropout(FFN(E)))
            let (g2, rest) = grads[idx(LN2_G)..].split_at_mut(1);
            let dr2 = layernorm_rows_backward(&lc.ln2, p(LN2_G), &dx, &mut g2[0], &mut rest[0])?;
            let df = dropout_backward(&lc.drop_ffn, &dr2)?;
            let mut de = dr2;
            accumulate_bias_grad(&mut grads[idx(B2)], &df)?;
            accumulate_tn(&mut grads[idx(W2)], &lc.h_act, &df)?;
            let dh_act = matmul_nt(&df, p(W2))?;
            let dh_pre = relu_backward(&lc.h_pre, &dh_act)?;
            accumulate_bias_grad(&mut grads[idx(B1)], &dh_pre)?;
            accumulate_tn(&mut grads[idx(W1)], &lc.e, &dh_pre)?;
            gemm(&dh_pre, false, p(W1), true, &mut de, true);

            // E = LN1(X + Dropout(MHA(X)))
            let (g1, rest) = grads[idx(LN1_G)..].split_at_mut(1);
            let dr1 = layernorm_rows_backward(&lc.ln1, p(LN1_G), &de, &mut g1[0], &mut rest[0])?;
            let da = dropout_backward(&lc.drop_attn, &dr1)?;
            let mut dxl = dr1;
            accumulate_tn(&mut grads[idx(WO)], &lc.ctx, &da)?;
            let dctx = matmul_nt(&da, p(WO))?;
            let (dq, dk, dv) = attention::backward(&lc.q, &lc.k, &lc.v, &lc.probs, &dctx, cfg.window, cfg.heads);
            for (slot, g) in [(WQ, &dq), (WK, &dk), (WV, &dv)] {
                accumulate_tn(&mut grads[idx(slot)], &lc.x, g)?;
                gemm(g, false, p(slot), true, &mut dxl, true);
            }
            dx = dxl;
        }

        let dx = dropout_backward(&cache.drop_embed, &dx)?;
        let demb = &mut grads[EMBED];
        for (i, &tok) in cache.tokens.iter().enumerate() {
            for (o, g) in demb.row_mut(tok as usize).iter_mut().zip(dx.row(i)) {
                *o += g;
            }
        }
        Ok(())
    }
}

fn gather_rows(x: &Tensor2, rows: &[usize]) -> Tensor2 {
    let mut out = Tensor2::zeros(rows.len(), x.cols());
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(x.row(r));
    }
    out
}

/// RNG handed to eval-mode passes, which never draw from it.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval mode draws no random numbers")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("eval mode draws no random numbers")
    }

    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("eval mode draws no random numbers")
    }
}

#[cfg(test)]
mod tests;
