//! Small decoder-only causal transformer.
//!
//! Pre-RMSNorm blocks with rotary positions, grouped KV heads and a gated
//! MLP. The embedding table carries `n_soft` extra rows after the real
//! vocabulary; those rows are the trainable probes and are never scored by
//! the tied output head.

mod checkpoint;
mod forward;
#[cfg(test)]
pub(crate) mod reference;
mod tape;
mod tokenizer;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{
    argmax, decode_step, greedy_generate, logits_at, prefill, AttentionRecord, HeadCache, KVCache,
    Prefill,
};
pub use tape::{tape_backward, tape_forward, LayerTape, Tape, TapeGrad};
pub use tokenizer::{byte_detokenize, byte_tokenize, BOS, EOS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::{Matrix, Real};

pub type TokenId = u32;

pub const NORM_EPS: f64 = 1e-5;

/// Standard deviation of the noise added to copied soft-token rows.
pub const SOFT_INIT_NOISE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_soft: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub max_seq: usize,
    pub rope_theta: f64,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            n_soft: 32,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 32,
            max_seq: 1024,
            rope_theta: 10000.0,
            mlp_hidden: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.n_layers == 0 || self.d_model == 0 || self.mlp_hidden == 0 {
            return fail("vocab_size, n_layers, d_model and mlp_hidden must be positive".into());
        }
        if self.n_heads == 0 || self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_heads ({}) must be a positive multiple of n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return fail(format!(
                "d_model ({}) must equal n_heads × head_dim ({} × {})",
                self.d_model, self.n_heads, self.head_dim
            ));
        }
        if !self.head_dim.is_multiple_of(2) {
            return fail(format!("head_dim must be even, got {}", self.head_dim));
        }
        if self.n_soft == 0 {
            return fail("n_soft must be at least 1".into());
        }
        if self.max_seq == 0 {
            return fail("max_seq must be at least 1".into());
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return fail(format!(
                "rope_theta must be positive, got {}",
                self.rope_theta
            ));
        }
        Ok(())
    }

    /// Query heads per KV head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn soft_id(&self, i: usize) -> TokenId {
        (self.vocab_size + i) as TokenId
    }

    pub fn total_rows(&self) -> usize {
        self.vocab_size + self.n_soft
    }
}

/// Precomputed rotary cos/sin table, `max_seq × head_dim/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable<T> {
    half: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let inv = crate::math::rope_inv_freq(cfg.head_dim, cfg.rope_theta);
        let half = cfg.head_dim / 2;
        let mut cos = Vec::with_capacity(cfg.max_seq * half);
        let mut sin = Vec::with_capacity(cfg.max_seq * half);
        for p in 0..cfg.max_seq {
            for &f in &inv {
                let (s, c) = (p as f64 * f).sin_cos();
                cos.push(T::lit(c));
                sin.push(T::lit(s));
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates `x` (one head) to `position`; `inverse` applies the transpose.
    #[inline]
    pub fn apply(&self, x: &mut [T], position: usize, inverse: bool) {
        let base = position * self.half;
        let cos = &self.cos[base..base + self.half];
        let sin = &self.sin[base..base + self.half];
        for ((pair, &c), &s) in x.chunks_exact_mut(2).zip(cos).zip(sin) {
            let s = if inverse { -s } else { s };
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T = f32> {
    pub attn_norm: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub mlp_norm: Matrix<T>,
    pub w_gate: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

impl<T: Real> LayerWeights<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let kv = cfg.n_kv_heads * cfg.head_dim;
        Self {
            attn_norm: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, kv),
            wv: Matrix::zeros(d, kv),
            wo: Matrix::zeros(d, d),
            mlp_norm: Matrix::zeros(1, d),
            w_gate: Matrix::zeros(d, cfg.mlp_hidden),
            w_up: Matrix::zeros(d, cfg.mlp_hidden),
            w_down: Matrix::zeros(cfg.mlp_hidden, d),
        }
    }

    fn named(&self) -> [(&'static str, &Matrix<T>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Matrix<T>); 9] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("mlp_norm", &mut self.mlp_norm),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

/// All model parameters. `embedding` has `vocab_size + n_soft` rows; the
/// output head reuses rows `[0, vocab_size)`.
#[derive(Debug, Clone)]
pub struct Weights<T = f32> {
    pub config: ModelConfig,
    pub embedding: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Matrix<T>,
    pub(crate) rope: RopeTable<T>,
}

impl<T: Real> PartialEq for Weights<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.embedding == other.embedding
            && self.layers == other.layers
            && self.final_norm == other.final_norm
    }
}

impl<T: Real> Weights<T> {
    /// All-zero parameters with the right shapes (used as gradient buffers).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            embedding: Matrix::zeros(config.total_rows(), config.d_model),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights::zeros(config))
                .collect(),
            final_norm: Matrix::zeros(1, config.d_model),
            rope: RopeTable::new(config),
        })
    }

    /// Named tensors in canonical order. The embedding is listed whole.
    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, m) in layer.named() {
                out.push((format!("layers.{l}.{name}"), m));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, m) in layer.named_mut() {
                out.push((format!("layers.{l}.{name}"), m));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out
    }

    pub fn cast<U: Real>(&self) -> Weights<U> {
        let cast_layer = |l: &LayerWeights<T>| LayerWeights {
            attn_norm: l.attn_norm.cast(),
            wq: l.wq.cast(),
            wk: l.wk.cast(),
            wv: l.wv.cast(),
            wo: l.wo.cast(),
            mlp_norm: l.mlp_norm.cast(),
            w_gate: l.w_gate.cast(),
            w_up: l.w_up.cast(),
            w_down: l.w_down.cast(),
        };
        Weights {
            config: self.config.clone(),
            embedding: self.embedding.cast(),
            layers: self.layers.iter().map(cast_layer).collect(),
            final_norm: self.final_norm.cast(),
            rope: RopeTable::new(&self.config),
        }
    }

    /// Row `i` of the soft-token block.
    pub fn soft_row(&self, i: usize) -> &[T] {
        self.embedding.row(self.config.vocab_size + i)
    }

    /// Copy of the soft-token block as an `n_soft × d_model` matrix.
    pub fn soft_bank(&self) -> Matrix<T> {
        let start = self.config.vocab_size * self.config.d_model;
        Matrix {
            rows: self.config.n_soft,
            cols: self.config.d_model,
            data: self.embedding.data[start..].to_vec(),
        }
    }

    pub fn soft_bank_mut(&mut self) -> &mut [T] {
        let start = self.config.vocab_size * self.config.d_model;
        &mut self.embedding.data[start..]
    }

    pub fn set_soft_bank(&mut self, bank: &Matrix<T>) -> Result<()> {
        if bank.rows != self.config.n_soft || bank.cols != self.config.d_model {
            return Err(Error::Shape(format!(
                "soft bank is {}x{}, model expects {}x{}",
                bank.rows, bank.cols, self.config.n_soft, self.config.d_model
            )));
        }
        self.soft_bank_mut().copy_from_slice(&bank.data);
        Ok(())
    }
}

impl Weights<f32> {
    /// SHA-256 over every tensor except the soft-token rows.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        let vocab_len = self.config.vocab_size * self.config.d_model;
        for (name, m) in self.tensors() {
            h.update(name.as_bytes());
            let data = if name == "embedding" {
                &m.data[..vocab_len]
            } else {
                &m.data[..]
            };
            for x in data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Same base weights with a bank of `n_soft` rows; existing rows are
    /// kept up to the new count and new rows are zero.
    pub fn with_soft_count(&self, n_soft: usize) -> Result<Self> {
        let config = ModelConfig {
            n_soft,
            ..self.config.clone()
        };
        let mut out = Weights::<f32>::zeros(&config)?;
        let keep = (self.config.vocab_size + n_soft.min(self.config.n_soft)) * config.d_model;
        out.embedding.data[..keep].copy_from_slice(&self.embedding.data[..keep]);
        out.layers = self.layers.clone();
        out.final_norm = self.final_norm.clone();
        Ok(out)
    }

    /// Re-initialises the soft rows as copies of `source` plus N(0, σ²) noise.
    pub fn init_soft_rows(&mut self, source: TokenId, sigma: f64, seed: u64) -> Result<()> {
        let cfg = &self.config;
        if source as usize >= cfg.vocab_size {
            return Err(Error::UnknownToken {
                id: source,
                vocab: cfg.vocab_size,
            });
        }
        let d = cfg.d_model;
        let src = self.embedding.row(source as usize).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let bank = self.soft_bank_mut();
        for row in bank.chunks_exact_mut(d) {
            for (x, &s) in row.iter_mut().zip(&src) {
                *x = s + noise.sample(&mut rng) as f32;
            }
        }
        Ok(())
    }
}

/// Half-width of the uniform init for the embedding table; rows have unit expected norm.
pub fn embedding_init_bound(d_model: usize) -> f64 {
    (3.0 / d_model as f64).sqrt()
}

/// Token whose embedding seeds the soft rows at init when no corpus is known.
pub fn default_soft_source(cfg: &ModelConfig) -> TokenId {
    if cfg.vocab_size > BOS as usize {
        BOS
    } else {
        0
    }
}

/// Samples base weights from a scaled uniform init; deterministic in `seed`.
///
/// Linear maps use `U(-1/√fan_in, 1/√fan_in)`, the embedding `U(-√(3/d), √(3/d))`
/// and norm gains start at one.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<Weights<f32>> {
    let mut w = Weights::<f32>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |m: &mut Matrix<f32>, bound: f64| {
        for x in m.data.iter_mut() {
            *x = rng.random_range(-bound..bound) as f32;
        }
    };
    let vocab_len = config.vocab_size * config.d_model;
    let eb = embedding_init_bound(config.d_model);
    {
        let mut emb = Matrix::zeros(config.vocab_size, config.d_model);
        fill(&mut emb, eb);
        w.embedding.data[..vocab_len].copy_from_slice(&emb.data);
    }
    for layer in w.layers.iter_mut() {
        for (name, m) in layer.named_mut() {
            if name.ends_with("norm") {
                m.data.iter_mut().for_each(|x| *x = 1.0);
            } else {
                let bound = 1.0 / (m.rows as f64).sqrt();
                fill(m, bound);
            }
        }
    }
    w.final_norm.data.iter_mut().for_each(|x| *x = 1.0);
    w.init_soft_rows(
        default_soft_source(config),
        SOFT_INIT_NOISE,
        seed ^ 0x5f5f_5f5f,
    )?;
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Prompt,
    Soft,
    Response,
}

/// Token ids with per-token roles: a prompt block optionally followed by
/// one soft or response block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn prompt(ids: Vec<TokenId>) -> Self {
        let roles = vec![Role::Prompt; ids.len()];
        Self { ids, roles }
    }

    /// Prompt followed by the `n_soft` soft-token ids of `cfg`.
    pub fn with_soft(prompt: &[TokenId], cfg: &ModelConfig) -> Self {
        let mut ids = prompt.to_vec();
        let mut roles = vec![Role::Prompt; prompt.len()];
        for i in 0..cfg.n_soft {
            ids.push(cfg.soft_id(i));
            roles.push(Role::Soft);
        }
        Self { ids, roles }
    }

    pub fn with_response(prompt: &[TokenId], response: &[TokenId]) -> Self {
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(response);
        let mut roles = vec![Role::Prompt; prompt.len()];
        roles.extend(std::iter::repeat_n(Role::Response, response.len()));
        Self { ids, roles }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.roles.len() {
            return Err(Error::Sequence("ids and roles differ in length".into()));
        }
        let p = self.prompt_len();
        if let Some(&tail) = self.roles.get(p) {
            if tail == Role::Prompt || self.roles[p..].iter().any(|&r| r != tail) {
                return Err(Error::Sequence(
                    "roles must be a prompt block followed by one soft or response block".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.roles
            .iter()
            .take_while(|&&r| r == Role::Prompt)
            .count()
    }

    /// Index range of the block with `role`, if present.
    pub fn block(&self, role: Role) -> Option<std::ops::Range<usize>> {
        let start = self.roles.iter().position(|&r| r == role)?;
        let len = self.roles[start..]
            .iter()
            .take_while(|&&r| r == role)
            .count();
        Some(start..start + len)
    }
}
