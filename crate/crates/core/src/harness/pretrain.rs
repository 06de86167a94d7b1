//! Base-model pre-training on task-format data.
//!
//! Next-token cross-entropy on the answer tokens only, AdamW over every
//! tensor except the soft-token rows, warmup then cosine decay.

use serde::{Deserialize, Serialize};

use super::tasks::{TaskInstance, TaskMix};
use crate::error::{Error, Result};
use crate::math::{softmax_in_place, Matrix, Real};
use crate::model::{
    greedy_generate, prefill, tape_backward, tape_forward, TapeGrad, TokenSequence, Weights, EOS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub mix: TaskMix,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 8,
            lr: 3e-3,
            warmup: 100,
            min_lr_frac: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            mix: TaskMix::default(),
        }
    }
}

impl PretrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1);
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.min_lr_frac + (1.0 - self.min_lr_frac) * cos)
    }
}

/// Cross-entropy of the answer tokens given the prompt; accumulates the
/// gradient of the per-token mean into `grads`.
pub fn answer_loss_grad<T: Real>(
    w: &Weights<T>,
    task: &TaskInstance,
    grads: Option<&mut Weights<T>>,
) -> Result<f64> {
    let cfg = &w.config;
    let mut ids = task.prompt.clone();
    ids.extend_from_slice(&task.answer);
    if ids.len() > cfg.max_seq {
        return Err(Error::SequenceOverflow {
            len: ids.len(),
            max: cfg.max_seq,
        });
    }
    let n = ids.len() - 1;
    let mut inputs = Matrix::zeros(0, cfg.d_model);
    for &id in &ids[..n] {
        if id as usize >= cfg.vocab_size {
            return Err(Error::UnknownToken {
                id,
                vocab: cfg.vocab_size,
            });
        }
        inputs.push_row(w.embedding.row(id as usize));
    }
    let tape = tape_forward(w, None, &inputs)?;
    let p = task.prompt.len();
    let count = T::lit((n + 1 - p) as f64);
    let mut loss = 0.0f64;
    let mut upstream = Vec::with_capacity(n + 1 - p);
    for row in p - 1..n {
        let target = ids[row + 1] as usize;
        let mut probs = tape.logits(w, row);
        softmax_in_place(&mut probs);
        loss -= probs[target].as_f64().max(f64::MIN_POSITIVE).ln();
        probs[target] -= T::one();
        probs.iter_mut().for_each(|g| *g /= count);
        upstream.push((row, probs));
    }
    if let Some(grads) = grads {
        let dx = tape_backward(
            w,
            &tape,
            &TapeGrad {
                logits: &upstream,
                probs: None,
            },
            Some(&mut *grads),
        );
        for (r, &id) in ids[..n].iter().enumerate() {
            let dst = grads.embedding.row_mut(id as usize);
            for (g, &d) in dst.iter_mut().zip(dx.row(r)) {
                *g += d;
            }
        }
    }
    Ok(loss / count.as_f64())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// AdamW over all tensors of `w` except the soft-token rows, which are
/// left as they are.
pub fn pretrain(
    w: &mut Weights<f32>,
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<PretrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if cfg.mix.max_prompt_len() + super::tasks::VALUE_LEN + 1 > w.config.max_seq {
        return Err(Error::Config(format!(
            "task mix needs {} positions, model has {}",
            cfg.mix.max_prompt_len() + super::tasks::VALUE_LEN + 1,
            w.config.max_seq
        )));
    }
    let soft_start = w.config.vocab_size * w.config.d_model;
    let mut m = Weights::<f32>::zeros(&w.config)?;
    let mut v = Weights::<f32>::zeros(&w.config)?;
    let mut grads = Weights::<f32>::zeros(&w.config)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        grads
            .tensors_mut()
            .into_iter()
            .for_each(|(_, g)| g.fill_zero());
        let tasks = cfg.mix.batch(
            cfg.batch_size,
            cfg.seed.wrapping_add(step as u64).wrapping_mul(0x2545_f491),
        )?;
        let mut loss = 0.0;
        for task in &tasks {
            loss += answer_loss_grad(w, task, Some(&mut grads))?;
        }
        let k = tasks.len() as f32;
        let mut norm_sq = 0.0f64;
        for (_, g) in grads.tensors_mut() {
            for x in &mut g.data {
                *x /= k;
                norm_sq += f64::from(*x) * f64::from(*x);
            }
        }
        if !norm_sq.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        let clip = if norm_sq.sqrt() > cfg.grad_clip {
            (cfg.grad_clip / norm_sq.sqrt()) as f32
        } else {
            1.0
        };
        let t = (step + 1) as i32;
        let c1 = (1.0 - cfg.beta1.powi(t)) as f32;
        let c2 = (1.0 - cfg.beta2.powi(t)) as f32;
        let lr = cfg.lr_at(step) as f32;
        let (b1, b2, eps) = (cfg.beta1 as f32, cfg.beta2 as f32, cfg.eps as f32);
        let wd = cfg.weight_decay as f32;
        let params = w.tensors_mut();
        let ms = m.tensors_mut();
        let vs = v.tensors_mut();
        let gs = grads.tensors();
        for ((((name, p), (_, mt)), (_, vt)), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(gs)
        {
            let decay = if name.ends_with("norm") { 0.0 } else { wd };
            let end = if name == "embedding" {
                soft_start
            } else {
                p.data.len()
            };
            for i in 0..end {
                let gi = g.data[i] * clip;
                mt.data[i] = b1 * mt.data[i] + (1.0 - b1) * gi;
                vt.data[i] = b2 * vt.data[i] + (1.0 - b2) * gi * gi;
                let update = (mt.data[i] / c1) / ((vt.data[i] / c2).sqrt() + eps);
                p.data[i] -= lr * (update + decay * p.data[i]);
            }
        }
        let mean = loss / tasks.len() as f64;
        losses.push(mean);
        on_step(step, mean);
    }
    Ok(PretrainReport { losses })
}

/// Greedy answer with the full cache.
pub fn fullkv_answer(w: &Weights<f32>, task: &TaskInstance) -> Result<Vec<crate::model::TokenId>> {
    let mut pre = prefill(w, &TokenSequence::prompt(task.prompt.clone()), false)?;
    greedy_generate(
        w,
        &mut pre.cache,
        &pre.logits,
        task.prompt.len(),
        task.answer.len(),
        EOS,
    )
}

/// Exact-match accuracy with the full cache.
pub fn fullkv_accuracy(w: &Weights<f32>, tasks: &[TaskInstance]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Task("no tasks".into()));
    }
    let mut total = 0.0;
    for t in tasks {
        total += t.score(&fullkv_answer(w, t)?);
    }
    Ok(total / tasks.len() as f64)
}
