//! KV-cache eviction: importance scoring, budget schedules, top-k plans and
//! cache compaction.
//!
//! Plans are made per (layer, kv head) over prompt positions only. Soft-token
//! and response rows are used for scoring and never survive compaction.

mod plan;
mod scoring;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use plan::{
    allocate_pyramid, compact_cache, hit_rate, plan_streaming, select_topk, BudgetSchedule,
    EvictionPlan,
};
pub use scoring::{
    score_h2o, score_response, score_snapkv, score_soft, GroupReduce, ImportanceScores,
};

use crate::error::{Error, Result};
use crate::math::Real;
use crate::model::{AttentionRecord, ModelConfig, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Full,
    Stream,
    H2o,
    SnapKv,
    Pyramid,
    JudgeQ,
    Oracle,
}

impl Policy {
    pub const ALL: [Policy; 7] = [
        Policy::Full,
        Policy::Stream,
        Policy::H2o,
        Policy::SnapKv,
        Policy::Pyramid,
        Policy::JudgeQ,
        Policy::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Full => "full",
            Policy::Stream => "stream",
            Policy::H2o => "h2o",
            Policy::SnapKv => "snapkv",
            Policy::Pyramid => "pyramid",
            Policy::JudgeQ => "judgeq",
            Policy::Oracle => "oracle",
        }
    }

    /// Whether the policy reads a soft block appended to the prompt.
    pub fn needs_soft(self) -> bool {
        self == Policy::JudgeQ
    }

    /// Whether the policy reads the FullKV response appended to the prompt.
    pub fn needs_response(self) -> bool {
        self == Policy::Oracle
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionConfig {
    /// Observation window of SnapKV, H2O and PyramidKV.
    pub window: usize,
    pub pool: usize,
    pub sinks: usize,
    /// Protected tail for the window-based baselines; `None` means `window`.
    pub baseline_protect: Option<usize>,
    /// Protected tail for the probe policy and the oracle.
    pub probe_protect: usize,
    /// Smallest pyramid layer budget; `None` means the baseline protected tail.
    pub pyramid_floor: Option<usize>,
    pub reduce: GroupReduce,
}

impl Default for EvictionConfig {
    fn default() -> Self {
        Self {
            window: 32,
            pool: 7,
            sinks: 4,
            baseline_protect: None,
            probe_protect: 0,
            pyramid_floor: None,
            reduce: GroupReduce::Mean,
        }
    }
}

impl EvictionConfig {
    pub fn baseline_protect(&self) -> usize {
        self.baseline_protect.unwrap_or(self.window)
    }
}

/// Builds the plan `policy` makes for a prompt under `budget`.
///
/// `seq` is the sequence that produced `record`: prompt plus soft block for
/// the probe policy, prompt plus response for the oracle. The window baselines only
/// read prompt rows, so either sequence serves them. A budget at or above
/// the prompt length keeps everything for every policy.
pub fn plan_for_policy<T: Real>(
    policy: Policy,
    cfg: &EvictionConfig,
    model: &ModelConfig,
    record: Option<&AttentionRecord<T>>,
    seq: &TokenSequence,
    budget: usize,
) -> Result<EvictionPlan> {
    let p = seq.prompt_len();
    let (layers, kv) = (model.n_layers, model.n_kv_heads);
    if budget == 0 {
        return Err(Error::Eviction("budget must be at least 1".into()));
    }
    if policy == Policy::Full || budget >= p {
        let mut plan = EvictionPlan::full(p, layers, kv);
        plan.policy = policy;
        plan.budget = budget;
        plan.layer_budgets = vec![budget; layers];
        return Ok(plan);
    }
    if policy == Policy::Stream {
        return plan_streaming(p, budget, cfg.sinks, layers, kv);
    }
    let record =
        record.ok_or_else(|| Error::Eviction(format!("{policy} needs an attention record")))?;
    let uniform = BudgetSchedule::uniform(budget, layers);
    let protect = cfg.baseline_protect();
    match policy {
        Policy::H2o => select_topk(
            &score_h2o(record, p, cfg.window, cfg.reduce)?,
            &uniform,
            protect,
            policy,
        ),
        Policy::SnapKv => select_topk(
            &score_snapkv(record, p, cfg.window, cfg.pool, cfg.reduce)?,
            &uniform,
            protect,
            policy,
        ),
        Policy::Pyramid => {
            let floor = cfg.pyramid_floor.unwrap_or(protect);
            if floor < protect {
                return Err(Error::Eviction(format!(
                    "pyramid floor {floor} is below the protected window {protect}"
                )));
            }
            let schedule = allocate_pyramid(budget, layers, floor)?;
            select_topk(
                &score_snapkv(record, p, cfg.window, cfg.pool, cfg.reduce)?,
                &schedule,
                protect,
                policy,
            )
        }
        Policy::JudgeQ => select_topk(
            &score_soft(record, seq, cfg.reduce)?,
            &uniform,
            cfg.probe_protect,
            policy,
        ),
        Policy::Oracle => select_topk(
            &score_response(record, seq, cfg.reduce)?,
            &uniform,
            cfg.probe_protect,
            policy,
        ),
        Policy::Full | Policy::Stream => unreachable!(),
    }
}

/// Smallest budget below the prompt length that `policy` accepts.
pub fn min_budget(policy: Policy, cfg: &EvictionConfig) -> usize {
    match policy {
        Policy::Full => 1,
        Policy::Stream => cfg.sinks + 1,
        Policy::H2o | Policy::SnapKv => cfg.baseline_protect().max(1),
        Policy::Pyramid => cfg.pyramid_floor.unwrap_or(cfg.baseline_protect()).max(1),
        Policy::JudgeQ | Policy::Oracle => cfg.probe_protect.max(1),
    }
}
