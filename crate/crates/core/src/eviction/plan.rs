//! Budget schedules, kept-position plans, cache compaction and hit rate.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ImportanceScores, Policy};
use crate::error::{Error, Result};
use crate::math::Real;
use crate::model::{HeadCache, KVCache};

/// Per-layer budgets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub nominal: usize,
    pub budgets: Vec<usize>,
}

impl BudgetSchedule {
    pub fn uniform(nominal: usize, n_layers: usize) -> Self {
        Self {
            nominal,
            budgets: vec![nominal; n_layers],
        }
    }

    pub fn total(&self) -> usize {
        self.budgets.iter().sum()
    }
}

/// Linearly decreasing budgets from `2·nominal − floor` down to `floor`,
/// rounded up and then trimmed so the total is exactly `nominal · n_layers`.
pub fn allocate_pyramid(nominal: usize, n_layers: usize, floor: usize) -> Result<BudgetSchedule> {
    if n_layers == 0 {
        return Err(Error::Eviction("pyramid needs at least one layer".into()));
    }
    if floor > nominal {
        return Err(Error::Eviction(format!(
            "pyramid floor {floor} exceeds nominal budget {nominal}"
        )));
    }
    if n_layers == 1 {
        return Ok(BudgetSchedule::uniform(nominal, 1));
    }
    let top = 2 * nominal - floor;
    let span = top - floor;
    let denom = n_layers - 1;
    // ceil(top - l*span/denom) = top - floor_div(l*span, denom)
    let mut budgets: Vec<usize> = (0..n_layers).map(|l| top - l * span / denom).collect();
    let fractional: Vec<bool> = (0..n_layers).map(|l| !(l * span).is_multiple_of(denom)).collect();
    let mut excess = budgets.iter().sum::<usize>() - nominal * n_layers;
    for l in (0..n_layers).rev() {
        if excess == 0 {
            break;
        }
        if fractional[l] {
            budgets[l] -= 1;
            excess -= 1;
        }
    }
    debug_assert_eq!(excess, 0);
    Ok(BudgetSchedule { nominal, budgets })
}

/// Kept prompt positions per (layer, kv head).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionPlan {
    pub policy: Policy,
    /// Nominal per-layer budget.
    pub budget: usize,
    pub prompt_len: usize,
    pub layer_budgets: Vec<usize>,
    /// `[layer][kv_head]`, ascending.
    pub kept: Vec<Vec<Vec<usize>>>,
}

impl EvictionPlan {
    /// Keeps every prompt position.
    pub fn full(prompt_len: usize, n_layers: usize, n_kv_heads: usize) -> Self {
        let all: Vec<usize> = (0..prompt_len).collect();
        Self {
            policy: Policy::Full,
            budget: prompt_len,
            prompt_len,
            layer_budgets: vec![prompt_len; n_layers],
            kept: vec![vec![all; n_kv_heads]; n_layers],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.kept.len()
    }

    pub fn n_kv_heads(&self) -> usize {
        self.kept.first().map_or(0, Vec::len)
    }

    pub fn kept_rows(&self) -> usize {
        self.kept.iter().flatten().map(Vec::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_budgets.len() != self.kept.len() {
            return Err(Error::Eviction(
                "layer budget count differs from layer count".into(),
            ));
        }
        for (l, (layer, &b)) in self.kept.iter().zip(&self.layer_budgets).enumerate() {
            for (g, kept) in layer.iter().enumerate() {
                if kept.len() != b.min(self.prompt_len) {
                    return Err(Error::Eviction(format!(
                        "layer {l} kv head {g} keeps {} positions, budget allows {}",
                        kept.len(),
                        b.min(self.prompt_len)
                    )));
                }
                if kept.windows(2).any(|w| w[0] >= w[1])
                    || kept.last().is_some_and(|&p| p >= self.prompt_len)
                {
                    return Err(Error::Eviction(format!(
                        "layer {l} kv head {g} positions are not ascending within the prompt"
                    )));
                }
            }
        }
        Ok(())
    }

    /// CSV with header `layer,kv_head,kept_position`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kv_head,kept_position\n");
        for (l, layer) in self.kept.iter().enumerate() {
            for (g, kept) in layer.iter().enumerate() {
                for p in kept {
                    let _ = writeln!(out, "{l},{g},{p}");
                }
            }
        }
        out
    }
}

/// Attention sinks plus the most recent prompt positions, in every head.
pub fn plan_streaming(
    prompt_len: usize,
    budget: usize,
    sinks: usize,
    n_layers: usize,
    n_kv_heads: usize,
) -> Result<EvictionPlan> {
    if budget < sinks + 1 {
        return Err(Error::Eviction(format!(
            "streaming budget {budget} must exceed sink count {sinks}"
        )));
    }
    let kept: Vec<usize> = if budget >= prompt_len {
        (0..prompt_len).collect()
    } else {
        (0..sinks)
            .chain(prompt_len - (budget - sinks)..prompt_len)
            .collect()
    };
    Ok(EvictionPlan {
        policy: Policy::Stream,
        budget,
        prompt_len,
        layer_budgets: vec![budget; n_layers],
        kept: vec![vec![kept; n_kv_heads]; n_layers],
    })
}

/// Keeps the last `protect_last` positions, then the highest scores,
/// earlier positions winning ties.
pub fn select_topk(
    scores: &ImportanceScores,
    schedule: &BudgetSchedule,
    protect_last: usize,
    policy: Policy,
) -> Result<EvictionPlan> {
    scores.validate()?;
    if schedule.budgets.len() != scores.n_layers() {
        return Err(Error::Eviction(format!(
            "schedule has {} layers, scores have {}",
            schedule.budgets.len(),
            scores.n_layers()
        )));
    }
    let p = scores.prompt_len;
    let mut kept = Vec::with_capacity(scores.n_layers());
    for (l, &b) in schedule.budgets.iter().enumerate() {
        if b < p && b < protect_last {
            return Err(Error::Eviction(format!(
                "layer {l} budget {b} is smaller than the protected window {protect_last}"
            )));
        }
        let layer = scores.scores[l]
            .iter()
            .map(|s| {
                if b >= p {
                    return (0..p).collect();
                }
                let tail = p - protect_last;
                let mut order: Vec<usize> = (0..tail).collect();
                order.sort_by(|&a, &c| s[c].total_cmp(&s[a]).then(a.cmp(&c)));
                let mut chosen: Vec<usize> = order[..b - protect_last].to_vec();
                chosen.extend(tail..p);
                chosen.sort_unstable();
                chosen
            })
            .collect();
        kept.push(layer);
    }
    Ok(EvictionPlan {
        policy,
        budget: schedule.nominal,
        prompt_len: p,
        layer_budgets: schedule.budgets.clone(),
        kept,
    })
}

/// Rebuilds the cache with only the planned rows. Surviving keys keep their
/// rotary encoding and absolute positions; soft and response rows are
/// never in a plan and so are always dropped.
pub fn compact_cache<T: Real>(cache: &KVCache<T>, plan: &EvictionPlan) -> Result<KVCache<T>> {
    if cache.heads.len() != plan.n_layers()
        || cache.heads.iter().any(|l| l.len() != plan.n_kv_heads())
    {
        return Err(Error::Eviction(
            "plan and cache differ in layer or kv-head structure".into(),
        ));
    }
    let mut heads = Vec::with_capacity(cache.heads.len());
    for (l, (layer, kept_layer)) in cache.heads.iter().zip(&plan.kept).enumerate() {
        let mut out_layer = Vec::with_capacity(layer.len());
        for (g, (head, kept)) in layer.iter().zip(kept_layer).enumerate() {
            let mut out = HeadCache::new(head.keys.cols);
            for &pos in kept {
                let row = head.positions.binary_search(&pos).map_err(|_| {
                    Error::Eviction(format!(
                        "plan keeps position {pos} absent from layer {l} kv head {g}"
                    ))
                })?;
                out.keys.push_row(head.keys.row(row));
                out.values.push_row(head.values.row(row));
                out.positions.push(pos);
            }
            out_layer.push(out);
        }
        heads.push(out_layer);
    }
    Ok(KVCache { heads })
}

/// `|cur ∩ resp| / |resp|` per (layer, kv head), averaged uniformly.
pub fn hit_rate(plan_cur: &EvictionPlan, plan_resp: &EvictionPlan) -> Result<f64> {
    if plan_cur.budget != plan_resp.budget {
        return Err(Error::Eviction(format!(
            "budgets differ: {} vs {}",
            plan_cur.budget, plan_resp.budget
        )));
    }
    if plan_cur.n_layers() != plan_resp.n_layers()
        || plan_cur
            .kept
            .iter()
            .zip(&plan_resp.kept)
            .any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::Eviction(
            "plans differ in layer or kv-head structure".into(),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (la, lb) in plan_cur.kept.iter().zip(&plan_resp.kept) {
        for (cur, resp) in la.iter().zip(lb) {
            if resp.is_empty() {
                return Err(Error::Eviction("reference plan keeps nothing".into()));
            }
            let hits = resp.iter().filter(|p| cur.binary_search(p).is_ok()).count();
            total += hits as f64 / resp.len() as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Eviction("empty plans".into()));
    }
    Ok(total / count as f64)
}
