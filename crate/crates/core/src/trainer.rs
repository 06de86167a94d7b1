//! Soft-token probe training.
//!
//! The soft rows of the embedding table are trained so that their mean
//! attention over the prompt matches the mean attention of the model's own
//! response rows. The loss for one (layer, head) map is
//! `(1/P)·Σ_j (A_soft[j] − A_resp[j])²` over the `P` prompt columns, and the
//! sample loss is the uniform mean over layers and heads. Every other weight
//! is frozen, so the response side and the prompt cache are constants that
//! are computed once per sample.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Matrix, Real};
use crate::model::{
    greedy_generate, prefill, tape_backward, tape_forward, HeadCache, KVCache, ModelConfig,
    TapeGrad, TokenId, TokenSequence, Weights, EOS, SOFT_INIT_NOISE,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub prompt_ids: Vec<TokenId>,
    pub response_ids: Vec<TokenId>,
}

impl TrainingSample {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.prompt_ids.is_empty() {
            return Err(Error::Sequence("empty prompt".into()));
        }
        if self.response_ids.is_empty() {
            return Err(Error::Sequence("empty response".into()));
        }
        let len = self.prompt_ids.len() + self.response_ids.len() + cfg.n_soft;
        if len > cfg.max_seq {
            return Err(Error::SequenceOverflow {
                len,
                max: cfg.max_seq,
            });
        }
        Ok(())
    }
}

/// Query-averaged attention over prompt columns, `[layer][head][column]`.
pub type AttentionMaps = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub loss: f64,
    /// Mean over heads of each layer's map loss.
    pub per_layer: Vec<f64>,
    pub grad_norm: f64,
}

fn block_maps<T: Real>(w: &Weights<T>, seq: &TokenSequence) -> Result<AttentionMaps> {
    let p = seq.prompt_len();
    let rows = p..seq.len();
    let out = prefill(w, seq, true)?;
    let record = out.record.expect("prefill captured attention");
    Ok(record
        .maps
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|m| {
                    let mut acc = vec![0.0f64; p];
                    for i in rows.clone() {
                        for (a, x) in acc.iter_mut().zip(&m.row(i)[..p]) {
                            *a += x.as_f64();
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
                    acc
                })
                .collect()
        })
        .collect())
}

/// `(A_soft, A_resp)` from two prefills: prompt + soft block and prompt + response.
pub fn attention_maps_pair<T: Real>(
    w: &Weights<T>,
    sample: &TrainingSample,
) -> Result<(AttentionMaps, AttentionMaps)> {
    sample.validate(&w.config)?;
    let soft = block_maps(w, &TokenSequence::with_soft(&sample.prompt_ids, &w.config))?;
    let resp = block_maps(
        w,
        &TokenSequence::with_response(&sample.prompt_ids, &sample.response_ids),
    )?;
    Ok((soft, resp))
}

pub fn loss_mse(a_soft: &AttentionMaps, a_resp: &AttentionMaps) -> Result<LossReport> {
    let shape = |a: &AttentionMaps| {
        a.iter()
            .map(|l| l.iter().map(Vec::len).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    if shape(a_soft) != shape(a_resp) || a_soft.is_empty() || a_soft[0].is_empty() {
        return Err(Error::Shape("attention maps differ in shape".into()));
    }
    let mut per_layer = Vec::with_capacity(a_soft.len());
    for (ls, lr) in a_soft.iter().zip(a_resp) {
        let mut layer_sum = 0.0;
        for (s, r) in ls.iter().zip(lr) {
            let sq: f64 = s.iter().zip(r).map(|(x, y)| (x - y) * (x - y)).sum();
            layer_sum += sq / s.len() as f64;
        }
        per_layer.push(layer_sum / ls.len() as f64);
    }
    let loss = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    Ok(LossReport {
        step: 0,
        loss,
        per_layer,
        grad_norm: 0.0,
    })
}

/// Frozen per-sample quantities: the prompt's cache and the response map.
#[derive(Debug, Clone)]
struct Prepared {
    prefix: KVCache<f64>,
    a_resp: AttentionMaps,
}

fn prepare(w: &Weights<f64>, sample: &TrainingSample) -> Result<Prepared> {
    sample.validate(&w.config)?;
    let p = sample.prompt_ids.len();
    let seq = TokenSequence::with_response(&sample.prompt_ids, &sample.response_ids);
    let out = prefill(w, &seq, true)?;
    let record = out.record.expect("prefill captured attention");
    let m = sample.response_ids.len() as f64;
    let a_resp = record
        .maps
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|map| {
                    let mut acc = vec![0.0f64; p];
                    for i in p..seq.len() {
                        for (a, &x) in acc.iter_mut().zip(&map.row(i)[..p]) {
                            *a += x;
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= m);
                    acc
                })
                .collect()
        })
        .collect();
    let prefix = KVCache {
        heads: out
            .cache
            .heads
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|h| HeadCache {
                        keys: Matrix::from_vec(
                            p,
                            h.keys.cols,
                            h.keys.data[..p * h.keys.cols].to_vec(),
                        )
                        .expect("prefix keys"),
                        values: Matrix::from_vec(
                            p,
                            h.values.cols,
                            h.values.data[..p * h.values.cols].to_vec(),
                        )
                        .expect("prefix values"),
                        positions: h.positions[..p].to_vec(),
                    })
                    .collect()
            })
            .collect(),
    };
    Ok(Prepared { prefix, a_resp })
}

/// Loss and its gradient with respect to the soft rows, `n_soft × d_model`.
fn soft_loss_grad(w: &Weights<f64>, prep: &Prepared) -> Result<(LossReport, Matrix<f64>)> {
    let cfg = &w.config;
    let p = prep.prefix.heads[0][0].len();
    let n = cfg.n_soft;
    let tape = tape_forward(w, Some(&prep.prefix), &w.soft_bank())?;
    let a_soft: AttentionMaps = (0..cfg.n_layers)
        .map(|l| {
            (0..cfg.n_heads)
                .map(|h| {
                    let mut acc = vec![0.0f64; p];
                    for i in 0..n {
                        for (a, &x) in acc.iter_mut().zip(&tape.probs(l, h, i)[..p]) {
                            *a += x;
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= n as f64);
                    acc
                })
                .collect()
        })
        .collect();
    let mut report = loss_mse(&a_soft, &prep.a_resp)?;
    let coef = 2.0 / (p * cfg.n_layers * cfg.n_heads * n) as f64;
    let dprobs: Vec<Vec<Matrix<f64>>> = a_soft
        .iter()
        .zip(&prep.a_resp)
        .map(|(ls, lr)| {
            ls.iter()
                .zip(lr)
                .map(|(s, r)| {
                    let mut m = Matrix::zeros(n, p + n);
                    for i in 0..n {
                        let row = m.row_mut(i);
                        for j in 0..p {
                            row[j] = coef * (s[j] - r[j]);
                        }
                    }
                    m
                })
                .collect()
        })
        .collect();
    let upstream = TapeGrad {
        logits: &[],
        probs: Some(&dprobs),
    };
    let grad = tape_backward(w, &tape, &upstream, None);
    report.grad_norm = grad.data.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok((report, grad))
}

/// Exact gradient of the sample loss with respect to the soft rows.
pub fn backward_soft(
    w: &Weights<f64>,
    sample: &TrainingSample,
) -> Result<(LossReport, Matrix<f64>)> {
    let prep = prepare(w, sample)?;
    soft_loss_grad(w, &prep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Matrix<f64>,
    pub v: Matrix<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(rows: usize, cols: usize, cfg: &TrainConfig) -> Self {
        Self {
            step: 0,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// One AdamW update with decoupled weight decay.
pub fn adam_step(
    bank: &mut Matrix<f64>,
    grad: &Matrix<f64>,
    state: &mut OptimizerState,
) -> Result<()> {
    if bank.rows != grad.rows || bank.cols != grad.cols || state.m.data.len() != bank.data.len() {
        return Err(Error::Shape(
            "bank, gradient and moments differ in shape".into(),
        ));
    }
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((x, &g), m), v) in bank
        .data
        .iter_mut()
        .zip(&grad.data)
        .zip(&mut state.m.data)
        .zip(&mut state.v.data)
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let update = (*m / c1) / ((*v / c2).sqrt() + state.eps);
        *x -= state.lr * (update + state.weight_decay * *x);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Seeds the per-epoch sample order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub curve: Vec<LossReport>,
    /// Dataset mean loss before the first step and after the last.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub skipped: usize,
    pub steps: usize,
}

impl TrainOutcome {
    /// CSV with header `step,loss,grad_norm`.
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm\n");
        for r in &self.curve {
            let _ = writeln!(out, "{},{:.8},{:.8}", r.step, r.loss, r.grad_norm);
        }
        out
    }
}

fn mean_loss(w: &Weights<f64>, prepared: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for prep in prepared {
        total += soft_loss_grad(w, prep)?.0.loss;
    }
    Ok(total / prepared.len() as f64)
}

/// Mean probe loss of `w`'s current soft bank over `samples`.
pub fn evaluate_loss(w: &Weights<f32>, samples: &[TrainingSample]) -> Result<f64> {
    let w64: Weights<f64> = w.cast();
    let prepared = samples
        .iter()
        .map(|s| prepare(&w64, s))
        .collect::<Result<Vec<_>>>()?;
    if prepared.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    mean_loss(&w64, &prepared)
}

/// Trains the soft rows of `w` in place. Samples that do not fit the
/// context are skipped and counted; every other tensor is left untouched.
pub fn train(
    w: &mut Weights<f32>,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let frozen = w.frozen_checksum();
    let mut w64: Weights<f64> = w.cast();
    let mut prepared = Vec::with_capacity(dataset.len());
    let mut skipped = 0;
    for s in dataset {
        match s.validate(&w.config) {
            Ok(()) => prepared.push(prepare(&w64, s)?),
            Err(Error::SequenceOverflow { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if prepared.is_empty() {
        return Err(Error::Config("no usable training samples".into()));
    }
    let initial_loss = mean_loss(&w64, &prepared)?;
    let mut bank = w64.soft_bank();
    let mut state = OptimizerState::new(bank.rows, bank.cols, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut curve = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = Matrix::zeros(bank.rows, bank.cols);
            let mut loss = 0.0;
            let mut per_layer = vec![0.0; w.config.n_layers];
            for &i in batch {
                let (r, g) = soft_loss_grad(&w64, &prepared[i])?;
                loss += r.loss;
                per_layer
                    .iter_mut()
                    .zip(&r.per_layer)
                    .for_each(|(a, b)| *a += b);
                grad.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b);
            }
            let k = batch.len() as f64;
            grad.data.iter_mut().for_each(|g| *g /= k);
            per_layer.iter_mut().for_each(|x| *x /= k);
            let grad_norm = grad.data.iter().map(|g| g * g).sum::<f64>().sqrt();
            adam_step(&mut bank, &grad, &mut state)?;
            w64.set_soft_bank(&bank)?;
            curve.push(LossReport {
                step: state.step as usize,
                loss: loss / k,
                per_layer,
                grad_norm,
            });
        }
    }
    let final_loss = mean_loss(&w64, &prepared)?;
    w.set_soft_bank(&bank.cast())?;
    if w.frozen_checksum() != frozen {
        return Err(Error::Checkpoint(
            "frozen weights changed during soft-token training".into(),
        ));
    }
    Ok(TrainOutcome {
        steps: curve.len(),
        curve,
        initial_loss,
        final_loss,
        skipped,
    })
}

/// Most common id across the corpus; ties go to the smallest id.
pub fn most_frequent_token(corpus: &[Vec<TokenId>]) -> Option<TokenId> {
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    for &t in corpus.iter().flatten() {
        *counts.entry(t).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(t, _)| t)
}

/// Re-initialises the soft rows from the corpus's most frequent token plus noise.
pub fn init_soft_from_corpus(
    w: &mut Weights<f32>,
    corpus: &[Vec<TokenId>],
    seed: u64,
) -> Result<()> {
    let source = most_frequent_token(corpus).ok_or_else(|| Error::Config("empty corpus".into()))?;
    w.init_soft_rows(source, SOFT_INIT_NOISE, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub mean_prompt_len: f64,
    pub mean_response_len: f64,
    /// Mean greedy continuation length before truncation.
    pub mean_generated_len: f64,
}

/// Builds probe-training samples: the first 90% of a corpus sequence is the
/// prompt, the response is the base model's greedy continuation (up to
/// `max_new` tokens, stopping after EOS) cut to a uniform random length.
pub fn make_dataset(
    base: &Weights<f32>,
    corpus: &[Vec<TokenId>],
    count: usize,
    seed: u64,
    max_new: usize,
) -> Result<(Vec<TrainingSample>, DatasetStats)> {
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    if let Some(short) = corpus.iter().find(|s| s.len() < 10) {
        return Err(Error::Sequence(format!(
            "corpus sequence of length {} is below 10",
            short.len()
        )));
    }
    let cfg = &base.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    let mut generated_total = 0usize;
    let mut attempts = 0usize;
    while samples.len() < count {
        attempts += 1;
        if attempts > 10 * count.max(1) {
            return Err(Error::Task(
                "greedy generation keeps coming back empty".into(),
            ));
        }
        let seq = &corpus[rng.random_range(0..corpus.len())];
        let p = seq.len() * 9 / 10;
        let room = cfg.max_seq.saturating_sub(p + cfg.n_soft);
        let limit = max_new.min(room);
        if limit == 0 {
            continue;
        }
        let prompt = seq[..p].to_vec();
        let mut pre = prefill(base, &TokenSequence::prompt(prompt.clone()), false)?;
        let generated = greedy_generate(base, &mut pre.cache, &pre.logits, p, limit, EOS)?;
        if generated.is_empty() {
            continue;
        }
        generated_total += generated.len();
        let keep = rng.random_range(1..=generated.len());
        samples.push(TrainingSample {
            prompt_ids: prompt,
            response_ids: generated[..keep].to_vec(),
        });
    }
    let n = samples.len().max(1) as f64;
    let stats = DatasetStats {
        count: samples.len(),
        mean_prompt_len: samples.iter().map(|s| s.prompt_ids.len()).sum::<usize>() as f64 / n,
        mean_response_len: samples.iter().map(|s| s.response_ids.len()).sum::<usize>() as f64 / n,
        mean_generated_len: generated_total as f64 / n,
    };
    Ok((samples, stats))
}
