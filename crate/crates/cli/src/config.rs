//! Flat key-value run configuration.
//!
//! The file is TOML restricted to top-level keys. Every key is optional and
//! falls back to the default below; unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use kvprobe::eviction::{EvictionConfig, GroupReduce, Policy};
use kvprobe::harness::experiments::{Budget, SoftSweepConfig};
use kvprobe::harness::{PretrainConfig, TaskMix, VALUE_LEN};
use kvprobe::model::ModelConfig;
use kvprobe::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage seed is derived from it.
    pub seed: u64,

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

    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_warmup: usize,
    pub pretrain_min_lr_frac: f64,
    pub pretrain_weight_decay: f64,
    pub pretrain_grad_clip: f64,

    pub needle_ctx_min: usize,
    pub needle_ctx_max: usize,
    pub kv_pairs_min: usize,
    pub kv_pairs_max: usize,
    pub needle_weight: f64,
    pub head_fraction: f64,

    pub train_samples: usize,
    pub train_epochs: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub train_beta1: f64,
    pub train_beta2: f64,
    pub train_eps: f64,
    pub train_weight_decay: f64,
    /// Longest greedy continuation used as a training response.
    pub max_new: usize,

    pub window: usize,
    pub pool: usize,
    pub sinks: usize,
    /// Protected tail of the window baselines; defaults to `window`.
    pub baseline_protect: Option<usize>,
    /// Protected tail of the probe policy and the oracle.
    pub protect_last: usize,
    pub pyramid_floor: Option<usize>,
    pub group_reduce: GroupReduce,

    pub policies: Vec<String>,
    /// Token counts (`"64"`) or prompt fractions (`"0.25"`, `"25%"`).
    pub budgets: Vec<String>,
    pub eval_tasks: usize,
    pub degradation_pairs: usize,
    pub degradation_budget: String,
    pub needle_grid_ctx: Vec<usize>,
    pub needle_grid_depths: Vec<f64>,
    pub needle_grid_per_cell: usize,
    pub soft_counts: Vec<usize>,
    pub soft_sweep_samples: usize,
    pub soft_sweep_val: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let pre = PretrainConfig::default();
        let mix = TaskMix::default();
        let train = TrainConfig::default();
        let ev = EvictionConfig::default();
        Self {
            seed: 0,
            vocab_size: model.vocab_size,
            n_soft: model.n_soft,
            d_model: model.d_model,
            n_layers: model.n_layers,
            n_heads: model.n_heads,
            n_kv_heads: model.n_kv_heads,
            head_dim: model.head_dim,
            max_seq: model.max_seq,
            rope_theta: model.rope_theta,
            mlp_hidden: model.mlp_hidden,
            pretrain_steps: pre.steps,
            pretrain_batch: pre.batch_size,
            pretrain_lr: pre.lr,
            pretrain_warmup: pre.warmup,
            pretrain_min_lr_frac: pre.min_lr_frac,
            pretrain_weight_decay: pre.weight_decay,
            pretrain_grad_clip: pre.grad_clip,
            needle_ctx_min: mix.needle_ctx.0,
            needle_ctx_max: mix.needle_ctx.1,
            kv_pairs_min: mix.kv_pairs.0,
            kv_pairs_max: mix.kv_pairs.1,
            needle_weight: mix.needle_weight,
            head_fraction: mix.head_fraction,
            train_samples: 400,
            train_epochs: train.epochs,
            train_batch: train.batch_size,
            train_lr: train.lr,
            train_beta1: train.beta1,
            train_beta2: train.beta2,
            train_eps: train.eps,
            train_weight_decay: train.weight_decay,
            max_new: 8,
            window: ev.window,
            pool: ev.pool,
            sinks: ev.sinks,
            baseline_protect: ev.baseline_protect,
            protect_last: ev.probe_protect,
            pyramid_floor: ev.pyramid_floor,
            group_reduce: ev.reduce,
            policies: Policy::ALL.iter().map(|p| p.name().to_string()).collect(),
            budgets: vec!["0.25".into(), "0.5".into()],
            eval_tasks: 200,
            degradation_pairs: 200,
            degradation_budget: "0.5".into(),
            needle_grid_ctx: vec![64, 96],
            needle_grid_depths: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            needle_grid_per_cell: 10,
            soft_counts: vec![4, 8, 16, 32],
            soft_sweep_samples: 200,
            soft_sweep_val: 50,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("parsing config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if self.pool.is_multiple_of(2) {
            bail!("pool must be odd, got {}", self.pool);
        }
        if self.window == 0 {
            bail!("window must be at least 1");
        }
        if let Some(floor) = self.pyramid_floor {
            if floor < self.eviction().baseline_protect() {
                bail!("pyramid_floor {floor} is below the baseline protected window");
            }
        }
        if self.needle_ctx_min > self.needle_ctx_max || self.kv_pairs_min > self.kv_pairs_max {
            bail!("task ranges must have min <= max");
        }
        for (name, p) in [
            ("needle_weight", self.needle_weight),
            ("head_fraction", self.head_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bail!("{name} must lie in [0, 1], got {p}");
            }
        }
        let longest = self.mix().max_prompt_len() + VALUE_LEN + 1;
        if longest > self.max_seq {
            bail!(
                "tasks need {longest} positions but max_seq is {}",
                self.max_seq
            );
        }
        if self.mix().max_prompt_len() + self.n_soft > self.max_seq {
            bail!(
                "longest prompt plus {} soft tokens exceeds max_seq {}",
                self.n_soft,
                self.max_seq
            );
        }
        for (name, v) in [
            ("pretrain_batch", self.pretrain_batch),
            ("train_batch", self.train_batch),
            ("train_samples", self.train_samples),
            ("eval_tasks", self.eval_tasks),
            ("max_new", self.max_new),
        ] {
            if v == 0 {
                bail!("{name} must be at least 1");
            }
        }
        self.policy_list()?;
        self.budget_list()?;
        self.degradation_budget()?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab_size,
            n_soft: self.n_soft,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            max_seq: self.max_seq,
            rope_theta: self.rope_theta,
            mlp_hidden: self.mlp_hidden,
        }
    }

    pub fn mix(&self) -> TaskMix {
        TaskMix {
            needle_ctx: (self.needle_ctx_min, self.needle_ctx_max),
            kv_pairs: (self.kv_pairs_min, self.kv_pairs_max),
            needle_weight: self.needle_weight,
            head_fraction: self.head_fraction,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            lr: self.pretrain_lr,
            warmup: self.pretrain_warmup,
            min_lr_frac: self.pretrain_min_lr_frac,
            weight_decay: self.pretrain_weight_decay,
            grad_clip: self.pretrain_grad_clip,
            seed: self.stage_seed("pretrain"),
            mix: self.mix(),
            ..PretrainConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.train_batch,
            lr: self.train_lr,
            beta1: self.train_beta1,
            beta2: self.train_beta2,
            eps: self.train_eps,
            weight_decay: self.train_weight_decay,
            seed: self.stage_seed("train"),
        }
    }

    pub fn eviction(&self) -> EvictionConfig {
        EvictionConfig {
            window: self.window,
            pool: self.pool,
            sinks: self.sinks,
            baseline_protect: self.baseline_protect,
            probe_protect: self.protect_last,
            pyramid_floor: self.pyramid_floor,
            reduce: self.group_reduce,
        }
    }

    pub fn soft_sweep(&self) -> Result<SoftSweepConfig> {
        Ok(SoftSweepConfig {
            train: self.train(),
            train_samples: self.soft_sweep_samples,
            val_samples: self.soft_sweep_val,
            max_new: self.max_new,
            budget: self.budget_list()?[0],
            seed: self.stage_seed("soft_sweep"),
        })
    }

    pub fn policy_list(&self) -> Result<Vec<Policy>> {
        self.policies
            .iter()
            .map(|p| Ok(p.parse::<Policy>()?))
            .collect()
    }

    pub fn budget_list(&self) -> Result<Vec<Budget>> {
        if self.budgets.is_empty() {
            bail!("budgets must not be empty");
        }
        self.budgets
            .iter()
            .map(|b| Ok(b.parse::<Budget>()?))
            .collect()
    }

    pub fn degradation_budget(&self) -> Result<Budget> {
        Ok(self.degradation_budget.parse()?)
    }

    /// Seed of one pipeline stage: the first eight bytes of
    /// `SHA-256(root seed LE ‖ stage)`.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(stage.as_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
    }
}

pub const STAGES: [&str; 9] = [
    "model",
    "pretrain",
    "corpus",
    "soft_init",
    "dataset",
    "train",
    "eval",
    "degradation",
    "needle_grid",
];
