//! Experiment drivers: budget sweeps, hit-rate studies, question-position
//! degradation, needle grids and soft-token-count sweeps.
//!
//! Every instance is prefetched once with the soft block appended (probe
//! scores, window-baseline scores and the prompt cache all come from that
//! pass) and once with the FullKV response appended (oracle scores). Prompt
//! rows are causal, so both passes hold bit-identical prompt K/V.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::tasks::{gen_kv_recall, gen_needle_at, QueryPosition, TaskInstance, TaskMix};
use crate::error::{Error, Result};
use crate::eviction::{
    compact_cache, hit_rate, plan_for_policy, EvictionConfig, EvictionPlan, Policy,
};
use crate::model::{
    greedy_generate, prefill, AttentionRecord, KVCache, TokenId, TokenSequence, Weights, EOS,
};
use crate::trainer::{evaluate_loss, init_soft_from_corpus, make_dataset, train, TrainConfig};

/// A KV budget, absolute or relative to each prompt's length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Budget {
    Tokens(usize),
    /// `ceil(f · prompt_len)`.
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, prompt_len: usize) -> usize {
        match self {
            Budget::Tokens(n) => n,
            Budget::Fraction(f) => ((f * prompt_len as f64).ceil() as usize).max(1),
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Tokens(n) => write!(f, "{n}"),
            Budget::Fraction(x) => write!(f, "{x}"),
        }
    }
}

impl std::str::FromStr for Budget {
    type Err = Error;

    /// `64` is a token count, `0.25` or `25%` a fraction of the prompt.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad budget {s:?}"));
        if let Some(pct) = s.strip_suffix('%') {
            let x: f64 = pct.parse().map_err(|_| bad())?;
            return Ok(Budget::Fraction(x / 100.0));
        }
        if s.contains('.') {
            let x: f64 = s.parse().map_err(|_| bad())?;
            if !(x > 0.0 && x <= 1.0) {
                return Err(bad());
            }
            return Ok(Budget::Fraction(x));
        }
        s.parse().map(Budget::Tokens).map_err(|_| bad())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub policy: Policy,
    pub budget: String,
    pub task: String,
    pub score: f64,
    /// Mean hit rate against the oracle plan; absent for FullKV.
    pub hit_rate: Option<f64>,
    pub n: usize,
}

pub const RESULTS_HEADER: &str = "policy,budget,task,score,hit_rate,n";

pub fn results_csv(results: &[EvalResult]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in results {
        let hit = r.hit_rate.map_or(String::new(), |h| format!("{h:.6}"));
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{},{}",
            r.policy, r.budget, r.task, r.score, hit, r.n
        );
    }
    out
}

/// One decoded instance under one policy and budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub policy: Policy,
    pub budget: usize,
    pub generated: Vec<TokenId>,
    pub score: f64,
    pub hit_rate: Option<f64>,
    pub kept_rows: usize,
}

/// Prefill products shared by every policy for one prompt.
pub struct PreparedPrompt {
    pub prompt_len: usize,
    /// Prompt + soft block.
    pub soft_seq: TokenSequence,
    pub soft_record: AttentionRecord,
    /// Prompt rows only.
    pub cache: KVCache,
    /// Logits at the last prompt position.
    pub logits: Vec<f32>,
    pub fullkv: Vec<TokenId>,
    /// Prompt + FullKV response.
    pub resp_seq: TokenSequence,
    pub resp_record: AttentionRecord,
}

/// Runs the two capturing prefills and the FullKV greedy decode.
pub fn prepare_prompt(
    w: &Weights<f32>,
    prompt: &[TokenId],
    max_new: usize,
) -> Result<PreparedPrompt> {
    let cfg = &w.config;
    let p = prompt.len();
    let soft_seq = TokenSequence::with_soft(prompt, cfg);
    let soft = prefill(w, &soft_seq, true)?;
    let full_plan = EvictionPlan::full(p, cfg.n_layers, cfg.n_kv_heads);
    let cache = compact_cache(&soft.cache, &full_plan)?;
    let mut full_cache = cache.clone();
    let fullkv = greedy_generate(w, &mut full_cache, &soft.logits, p, max_new, EOS)?;
    let resp_seq = TokenSequence::with_response(prompt, &fullkv);
    let resp = prefill(w, &resp_seq, true)?;
    Ok(PreparedPrompt {
        prompt_len: p,
        soft_seq,
        soft_record: soft.record.expect("captured"),
        cache,
        logits: soft.logits,
        fullkv,
        resp_seq,
        resp_record: resp.record.expect("captured"),
    })
}

impl PreparedPrompt {
    pub fn plan(
        &self,
        w: &Weights<f32>,
        policy: Policy,
        ecfg: &EvictionConfig,
        budget: usize,
    ) -> Result<EvictionPlan> {
        let (record, seq) = if policy == Policy::Oracle {
            (&self.resp_record, &self.resp_seq)
        } else {
            (&self.soft_record, &self.soft_seq)
        };
        plan_for_policy(policy, ecfg, &w.config, Some(record), seq, budget)
    }

    /// Greedy decode after compacting the prompt cache to `plan`.
    pub fn decode(
        &self,
        w: &Weights<f32>,
        plan: &EvictionPlan,
        max_new: usize,
    ) -> Result<Vec<TokenId>> {
        let mut cache = compact_cache(&self.cache, plan)?;
        greedy_generate(w, &mut cache, &self.logits, self.prompt_len, max_new, EOS)
    }
}

/// Every (policy, budget) outcome for one task.
pub fn evaluate_instance(
    w: &Weights<f32>,
    task: &TaskInstance,
    policies: &[Policy],
    budgets: &[Budget],
    ecfg: &EvictionConfig,
) -> Result<Vec<InstanceOutcome>> {
    let max_new = task.answer.len();
    let prep = prepare_prompt(w, &task.prompt, max_new)?;
    let p = prep.prompt_len;
    let mut out = Vec::with_capacity(policies.len() * budgets.len());
    for &b in budgets {
        let budget = b.resolve(p);
        let oracle = prep.plan(w, Policy::Oracle, ecfg, budget)?;
        for &policy in policies {
            if policy == Policy::Full {
                out.push(InstanceOutcome {
                    policy,
                    budget: p,
                    score: task.score(&prep.fullkv),
                    generated: prep.fullkv.clone(),
                    hit_rate: None,
                    kept_rows: prep.cache.total_rows(),
                });
                continue;
            }
            let plan = if policy == Policy::Oracle {
                oracle.clone()
            } else {
                prep.plan(w, policy, ecfg, budget)?
            };
            let generated = prep.decode(w, &plan, max_new)?;
            out.push(InstanceOutcome {
                policy,
                budget,
                score: task.score(&generated),
                generated,
                hit_rate: Some(hit_rate(&plan, &oracle)?),
                kept_rows: plan.kept_rows(),
            });
        }
    }
    Ok(out)
}

#[derive(Default)]
struct Tally {
    score: f64,
    hit: f64,
    hits: usize,
    n: usize,
}

/// Mean exact-match score and hit rate per (policy, budget, task kind),
/// plus an `all` row per (policy, budget). A FullKV row is always included.
pub fn run_budget_sweep(
    w: &Weights<f32>,
    tasks: &[TaskInstance],
    policies: &[Policy],
    budgets: &[Budget],
    ecfg: &EvictionConfig,
) -> Result<Vec<EvalResult>> {
    if tasks.is_empty() {
        return Err(Error::Task("no tasks".into()));
    }
    for pair in budgets.windows(2) {
        let ascending = match (pair[0], pair[1]) {
            (Budget::Tokens(a), Budget::Tokens(b)) => a < b,
            (Budget::Fraction(a), Budget::Fraction(b)) => a < b,
            _ => true,
        };
        if !ascending {
            return Err(Error::Config(format!(
                "budgets must ascend: {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    let mut policies = policies.to_vec();
    if !policies.contains(&Policy::Full) {
        policies.insert(0, Policy::Full);
    }
    for t in tasks {
        for &b in budgets {
            let budget = b.resolve(t.prompt.len());
            for &policy in &policies {
                if budget < t.prompt.len() && budget < crate::eviction::min_budget(policy, ecfg) {
                    return Err(Error::Eviction(format!(
                        "budget {budget} is below the protected window of {policy}"
                    )));
                }
            }
        }
    }
    // (policy index, budget index, task label) -> tally
    let mut tallies: BTreeMap<(usize, usize, String), Tally> = BTreeMap::new();
    for t in tasks {
        let outcomes = evaluate_instance(w, t, &policies, budgets, ecfg)?;
        for (i, o) in outcomes.iter().enumerate() {
            let (bi, pi) = (i / policies.len(), i % policies.len());
            for label in [t.kind.name().to_string(), "all".to_string()] {
                let e = tallies.entry((pi, bi, label)).or_default();
                e.score += o.score;
                e.n += 1;
                if let Some(h) = o.hit_rate {
                    e.hit += h;
                    e.hits += 1;
                }
            }
        }
    }
    Ok(tallies
        .into_iter()
        .map(|((pi, bi, task), t)| EvalResult {
            policy: policies[pi],
            budget: budgets[bi].to_string(),
            task,
            score: t.score / t.n as f64,
            hit_rate: (t.hits > 0).then(|| t.hit / t.hits as f64),
            n: t.n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateRow {
    pub policy: Policy,
    pub budget: String,
    pub hit_rate: f64,
    pub n: usize,
}

/// Mean hit rate against the response oracle per (policy, budget).
pub fn run_hit_rate_study(
    w: &Weights<f32>,
    tasks: &[TaskInstance],
    policies: &[Policy],
    budgets: &[Budget],
    ecfg: &EvictionConfig,
) -> Result<Vec<HitRateRow>> {
    let policies: Vec<Policy> = policies
        .iter()
        .copied()
        .filter(|&p| p != Policy::Full)
        .collect();
    Ok(run_budget_sweep(w, tasks, &policies, budgets, ecfg)?
        .into_iter()
        .filter(|r| r.task == "all")
        .filter_map(|r| {
            r.hit_rate.map(|h| HitRateRow {
                policy: r.policy,
                budget: r.budget,
                hit_rate: h,
                n: r.n,
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRow {
    pub policy: Policy,
    pub tail_score: f64,
    pub head_score: f64,
    /// `(tail − head) / tail`; absent when the tail score is zero.
    pub drop: Option<f64>,
    pub n: usize,
}

/// Tail-query and head-query variants of the same task: identical context,
/// only the query block moves.
pub fn paired_tasks(
    mix: &TaskMix,
    count: usize,
    seed: u64,
) -> Result<Vec<(TaskInstance, TaskInstance)>> {
    let tails = TaskMix {
        head_fraction: 0.0,
        ..mix.clone()
    }
    .batch(count, seed)?;
    tails
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let inner = seed.wrapping_mul(0x51_7cc1).wrapping_add(i as u64);
            let (tail, head) = match t.depth_frac {
                Some(depth) => (
                    gen_needle_at(t.ctx_len, depth, QueryPosition::Tail, inner)?,
                    gen_needle_at(t.ctx_len, depth, QueryPosition::Head, inner)?,
                ),
                None => {
                    let pairs = t.ctx_len / super::tasks::BINDING_LEN;
                    (
                        gen_kv_recall(pairs, QueryPosition::Tail, inner)?,
                        gen_kv_recall(pairs, QueryPosition::Head, inner)?,
                    )
                }
            };
            Ok((tail, head))
        })
        .collect()
}

/// Relative score drop when the query moves from the tail to the head.
pub fn run_degradation(
    w: &Weights<f32>,
    pairs: &[(TaskInstance, TaskInstance)],
    policies: &[Policy],
    budget: Budget,
    ecfg: &EvictionConfig,
) -> Result<Vec<DegradationRow>> {
    if pairs.is_empty() {
        return Err(Error::Task("no task pairs".into()));
    }
    let mut tail = vec![0.0; policies.len()];
    let mut head = vec![0.0; policies.len()];
    for (t, h) in pairs {
        for (acc, task) in [(&mut tail, t), (&mut head, h)] {
            let outcomes = evaluate_instance(w, task, policies, &[budget], ecfg)?;
            for (a, o) in acc.iter_mut().zip(&outcomes) {
                *a += o.score;
            }
        }
    }
    let n = pairs.len() as f64;
    Ok(policies
        .iter()
        .enumerate()
        .map(|(i, &policy)| {
            let (ts, hs) = (tail[i] / n, head[i] / n);
            DegradationRow {
                policy,
                tail_score: ts,
                head_score: hs,
                drop: (ts > 0.0).then(|| (ts - hs) / ts),
                n: pairs.len(),
            }
        })
        .collect())
}

pub fn degradation_csv(rows: &[DegradationRow]) -> String {
    let mut out = String::from("policy,tail_score,head_score,drop,n\n");
    for r in rows {
        let drop = r.drop.map_or(String::new(), |d| format!("{d:.6}"));
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            r.policy, r.tail_score, r.head_score, drop, r.n
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleCell {
    pub ctx_len: usize,
    pub depth_frac: f64,
    pub score: f64,
}

/// Needle accuracy over a (context length × depth) grid under one policy.
#[allow(clippy::too_many_arguments)]
pub fn run_needle_grid(
    w: &Weights<f32>,
    ctx_lens: &[usize],
    depths: &[f64],
    per_cell: usize,
    policy: Policy,
    budget: Budget,
    ecfg: &EvictionConfig,
    seed: u64,
) -> Result<Vec<NeedleCell>> {
    let mut cells = Vec::with_capacity(ctx_lens.len() * depths.len());
    for &ctx in ctx_lens {
        for (di, &depth) in depths.iter().enumerate() {
            let mut total = 0.0;
            for i in 0..per_cell {
                let s = seed ^ ((ctx as u64) << 32) ^ ((di as u64) << 16) ^ i as u64;
                let task = gen_needle_at(ctx, depth, QueryPosition::Tail, s)?;
                let outcomes = evaluate_instance(w, &task, &[policy], &[budget], ecfg)?;
                total += outcomes[0].score;
            }
            cells.push(NeedleCell {
                ctx_len: ctx,
                depth_frac: depth,
                score: total / per_cell.max(1) as f64,
            });
        }
    }
    Ok(cells)
}

pub fn needle_csv(cells: &[NeedleCell]) -> String {
    let mut out = String::from("ctx_len,depth_frac,score\n");
    for c in cells {
        let _ = writeln!(out, "{},{},{:.6}", c.ctx_len, c.depth_frac, c.score);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftCountRow {
    pub count: usize,
    pub trainable_params: usize,
    pub initial_val_loss: f64,
    pub val_loss: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftSweepConfig {
    pub train: TrainConfig,
    pub train_samples: usize,
    pub val_samples: usize,
    pub max_new: usize,
    pub budget: Budget,
    pub seed: u64,
}

/// Trains one bank per soft-token count on the same data and reports
/// held-out probe loss and probe-policy task score.
pub fn run_soft_count_sweep(
    base: &Weights<f32>,
    corpus: &[Vec<TokenId>],
    eval_tasks: &[TaskInstance],
    counts: &[usize],
    cfg: &SoftSweepConfig,
    ecfg: &EvictionConfig,
) -> Result<Vec<SoftCountRow>> {
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        let mut w = base.with_soft_count(count)?;
        init_soft_from_corpus(&mut w, corpus, cfg.seed)?;
        let (train_set, _) = make_dataset(&w, corpus, cfg.train_samples, cfg.seed, cfg.max_new)?;
        let (val_set, _) =
            make_dataset(&w, corpus, cfg.val_samples, cfg.seed ^ 0xa5a5, cfg.max_new)?;
        let initial_val_loss = evaluate_loss(&w, &val_set)?;
        train(&mut w, &train_set, &cfg.train)?;
        let val_loss = evaluate_loss(&w, &val_set)?;
        let mut score = 0.0;
        for t in eval_tasks {
            score += evaluate_instance(&w, t, &[Policy::JudgeQ], &[cfg.budget], ecfg)?[0].score;
        }
        rows.push(SoftCountRow {
            count,
            trainable_params: count * w.config.d_model,
            initial_val_loss,
            val_loss,
            score: score / eval_tasks.len().max(1) as f64,
        });
    }
    Ok(rows)
}

pub fn soft_count_csv(rows: &[SoftCountRow]) -> String {
    let mut out = String::from("count,trainable_params,initial_val_loss,val_loss,score\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.8},{:.8},{:.6}",
            r.count, r.trainable_params, r.initial_val_loss, r.val_loss, r.score
        );
    }
    out
}
