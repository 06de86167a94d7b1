//! Importance scores over prompt positions, one vector per (layer, kv head).

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Real;
use crate::model::{AttentionRecord, Role, TokenSequence};

/// How the query heads of one KV group are folded into a single score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupReduce {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub prompt_len: usize,
    /// `[layer][kv_head][position]`.
    pub scores: Vec<Vec<Vec<f64>>>,
}

impl ImportanceScores {
    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn n_kv_heads(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn get(&self, layer: usize, kv_head: usize) -> &[f64] {
        &self.scores[layer][kv_head]
    }

    /// Every vector spans the prompt and holds finite, non-negative values.
    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.scores.iter().enumerate() {
            for (g, s) in layer.iter().enumerate() {
                if s.len() != self.prompt_len {
                    return Err(Error::Eviction(format!(
                        "scores for layer {l} kv head {g} have length {}, prompt has {}",
                        s.len(),
                        self.prompt_len
                    )));
                }
                if s.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(Error::Eviction(format!(
                        "invalid score at layer {l} kv head {g}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same ranking, every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let scores = self
            .scores
            .iter()
            .map(|l| {
                l.iter()
                    .map(|s| s.iter().map(|x| x * c).collect())
                    .collect()
            })
            .collect();
        Self {
            prompt_len: self.prompt_len,
            scores,
        }
    }

    /// CSV with header `layer,kv_head,position,score`, six decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kv_head,position,score\n");
        for (l, layer) in self.scores.iter().enumerate() {
            for (g, s) in layer.iter().enumerate() {
                for (p, x) in s.iter().enumerate() {
                    let _ = writeln!(out, "{l},{g},{p},{x:.6}");
                }
            }
        }
        out
    }
}

fn check_record<T: Real>(
    attn: &AttentionRecord<T>,
    prompt_len: usize,
    rows: &Range<usize>,
) -> Result<()> {
    let n_heads = attn.n_heads();
    if attn.n_layers() == 0 || n_heads == 0 {
        return Err(Error::Eviction("empty attention record".into()));
    }
    if attn.n_kv_heads == 0 || !n_heads.is_multiple_of(attn.n_kv_heads) {
        return Err(Error::Eviction(format!(
            "{n_heads} heads cannot be grouped onto {} kv heads",
            attn.n_kv_heads
        )));
    }
    for layer in &attn.maps {
        if layer.len() != n_heads {
            return Err(Error::Eviction("ragged attention record".into()));
        }
        for m in layer {
            if m.rows < rows.end || m.cols < prompt_len {
                return Err(Error::Eviction(format!(
                    "attention map {}x{} does not cover rows {rows:?} and {prompt_len} prompt columns",
                    m.rows, m.cols
                )));
            }
        }
    }
    Ok(())
}

/// Folds `[layer][head]` vectors into `[layer][kv_head]`.
fn reduce_groups(
    per_head: Vec<Vec<Vec<f64>>>,
    n_kv_heads: usize,
    reduce: GroupReduce,
) -> Vec<Vec<Vec<f64>>> {
    per_head
        .into_iter()
        .map(|heads| {
            let group = heads.len() / n_kv_heads;
            heads
                .chunks(group)
                .map(|members| {
                    let mut out = members[0].clone();
                    for m in &members[1..] {
                        for (o, &x) in out.iter_mut().zip(m) {
                            *o = match reduce {
                                GroupReduce::Mean => *o + x,
                                GroupReduce::Max => o.max(x),
                            };
                        }
                    }
                    if reduce == GroupReduce::Mean {
                        out.iter_mut().for_each(|o| *o /= group as f64);
                    }
                    out
                })
                .collect()
        })
        .collect()
}

/// Mean over `rows` of each head's attention at prompt columns.
fn block_mean<T: Real>(
    attn: &AttentionRecord<T>,
    rows: Range<usize>,
    prompt_len: usize,
    reduce: GroupReduce,
) -> Result<ImportanceScores> {
    check_record(attn, prompt_len, &rows)?;
    let n = rows.len() as f64;
    let per_head = attn
        .maps
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|m| {
                    let mut acc = vec![0.0f64; prompt_len];
                    for i in rows.clone() {
                        for (a, x) in acc.iter_mut().zip(&m.row(i)[..prompt_len]) {
                            *a += x.as_f64();
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= n);
                    acc
                })
                .collect()
        })
        .collect();
    Ok(ImportanceScores {
        prompt_len,
        scores: reduce_groups(per_head, attn.n_kv_heads, reduce),
    })
}

fn scored_block<T: Real>(
    attn: &AttentionRecord<T>,
    seq: &TokenSequence,
    role: Role,
    reduce: GroupReduce,
) -> Result<ImportanceScores> {
    seq.validate()?;
    let rows = seq
        .block(role)
        .filter(|r| !r.is_empty())
        .ok_or_else(|| Error::Eviction(format!("sequence has no {role:?} block")))?;
    block_mean(attn, rows, seq.prompt_len(), reduce)
}

/// Probe scores: the soft-token rows' mean attention over the prompt.
pub fn score_soft<T: Real>(
    attn: &AttentionRecord<T>,
    seq: &TokenSequence,
    reduce: GroupReduce,
) -> Result<ImportanceScores> {
    scored_block(attn, seq, Role::Soft, reduce)
}

/// Oracle scores: the response rows' mean attention over the prompt.
pub fn score_response<T: Real>(
    attn: &AttentionRecord<T>,
    seq: &TokenSequence,
    reduce: GroupReduce,
) -> Result<ImportanceScores> {
    scored_block(attn, seq, Role::Response, reduce)
}

/// Windowed attention sum over the last `window` prompt rows, then a
/// same-padded 1-D max-pool of width `pool`.
pub fn score_snapkv<T: Real>(
    attn: &AttentionRecord<T>,
    prompt_len: usize,
    window: usize,
    pool: usize,
    reduce: GroupReduce,
) -> Result<ImportanceScores> {
    if window == 0 {
        return Err(Error::Eviction(
            "observation window must be at least 1".into(),
        ));
    }
    if pool == 0 || pool.is_multiple_of(2) {
        return Err(Error::Eviction(format!(
            "pool width must be odd, got {pool}"
        )));
    }
    if prompt_len == 0 {
        return Err(Error::Eviction("empty prompt".into()));
    }
    let window = window.min(prompt_len);
    let rows = prompt_len - window..prompt_len;
    check_record(attn, prompt_len, &rows)?;
    let half = pool / 2;
    let per_head = attn
        .maps
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|m| {
                    let mut sum = vec![0.0f64; prompt_len];
                    for i in rows.clone() {
                        for (a, x) in sum.iter_mut().zip(&m.row(i)[..prompt_len]) {
                            *a += x.as_f64();
                        }
                    }
                    if half == 0 {
                        return sum;
                    }
                    (0..prompt_len)
                        .map(|j| {
                            let lo = j.saturating_sub(half);
                            let hi = (j + half + 1).min(prompt_len);
                            sum[lo..hi]
                                .iter()
                                .copied()
                                .fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(ImportanceScores {
        prompt_len,
        scores: reduce_groups(per_head, attn.n_kv_heads, reduce),
    })
}

/// Cumulative attention of the last `window` prompt rows, unpooled.
pub fn score_h2o<T: Real>(
    attn: &AttentionRecord<T>,
    prompt_len: usize,
    window: usize,
    reduce: GroupReduce,
) -> Result<ImportanceScores> {
    score_snapkv(attn, prompt_len, window, 1, reduce)
}
