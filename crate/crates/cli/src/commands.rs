//! Command implementations. Each writes its outputs plus a manifest and
//! returns an error instead of exiting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kvprobe::eviction::{compact_cache, EvictionPlan, Policy};
use kvprobe::harness::experiments::{prepare_prompt, Budget};
use kvprobe::model::{
    byte_detokenize, byte_tokenize, load_checkpoint, save_checkpoint, TokenId, Weights,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::Manifest;
use crate::pipeline::{
    build_base, fullkv_needle_accuracy, init_soft, pretrain_csv, read_text_corpus, run_pipeline,
    run_suite, task_training_corpus, train_soft, write_eval, PipelineRun, Suite,
};

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn check_model(w: &Weights, cfg: &RunConfig) -> Result<()> {
    if w.config != cfg.model() {
        bail!("checkpoint model config differs from the run config");
    }
    Ok(())
}

/// Builds (and pre-trains, if configured) a base model at `out`.
pub fn cmd_init(cfg: &RunConfig, out: &Path, log: impl Fn(&str)) -> Result<Weights> {
    cfg.validate()?;
    let (w, report) = build_base(cfg, |step, loss| {
        if (step + 1) % 250 == 0 {
            log(&format!("pretrain step {} loss {loss:.4}", step + 1));
        }
    })?;
    save_checkpoint(&w, out).with_context(|| format!("writing {}", out.display()))?;
    let mut manifest = Manifest::new("init", cfg);
    manifest.add_output(out)?;
    if let Some(r) = report {
        let csv = sidecar(out, "pretrain.csv");
        std::fs::write(&csv, pretrain_csv(cfg, &r))?;
        manifest.add_output(&csv)?;
        log(&format!(
            "FullKV needle accuracy {:.3}",
            fullkv_needle_accuracy(&w, cfg, 100)?
        ));
    }
    manifest.write(&sidecar(out, "manifest.json"))?;
    Ok(w)
}

/// Trains the soft bank of `checkpoint` and writes it to `out` with a loss
/// CSV. Without `corpus`, the configured task mix provides the text.
pub fn cmd_train_soft(
    cfg: &RunConfig,
    checkpoint: &Path,
    corpus: Option<&Path>,
    out: &Path,
    log: impl Fn(&str),
) -> Result<Weights> {
    cfg.validate()?;
    let base =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    check_model(&base, cfg)?;
    let corpus_ids = match corpus {
        Some(p) => read_text_corpus(p, cfg)?,
        None => task_training_corpus(cfg)?,
    };
    let init = init_soft(&base, &corpus_ids, cfg)?;
    let run = train_soft(&init, &corpus_ids, cfg)?;
    log(&format!(
        "{} samples, loss {:.6} -> {:.6} over {} steps",
        run.stats.count, run.outcome.initial_loss, run.outcome.final_loss, run.outcome.steps
    ));
    if run.weights.frozen_checksum() != base.frozen_checksum() {
        bail!("frozen tensors changed during training");
    }
    save_checkpoint(&run.weights, out).with_context(|| format!("writing {}", out.display()))?;
    let csv = sidecar(out, "loss.csv");
    std::fs::write(&csv, run.outcome.curve_csv())?;
    let mut manifest = Manifest::new("train-soft", cfg);
    manifest.add_input(checkpoint)?;
    if let Some(p) = corpus {
        manifest.add_input(p)?;
    }
    manifest.add_output(out)?;
    manifest.add_output(&csv)?;
    manifest.write(&sidecar(out, "manifest.json"))?;
    Ok(run.weights)
}

/// Runs `suite` against `checkpoint` and writes CSVs, `summary.json` and a
/// manifest into `out_dir`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    suite: Suite,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let w =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    check_model(&w, cfg)?;
    let art = run_suite(&w, cfg, suite, None)?;
    let files = write_eval(
        out_dir,
        &art,
        serde_json::json!({ "checkpoint": checkpoint.display().to_string() }),
    )?;
    let mut manifest = Manifest::new("eval", cfg);
    manifest.add_input(checkpoint)?;
    for f in &files {
        manifest.add_output(f)?;
    }
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateReport {
    pub policy: Policy,
    pub budget: usize,
    pub prompt_len: usize,
    pub generated: Vec<TokenId>,
    pub text: String,
    pub fullkv: Vec<TokenId>,
    /// Kept prompt rows per layer, summed over KV heads.
    pub kept_per_layer: Vec<usize>,
    pub total_per_layer: Vec<usize>,
    /// Largest position left in the compacted cache.
    pub max_cached_position: Option<usize>,
    pub plan: EvictionPlan,
}

impl GenerateReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "policy {} budget {} prompt_len {}",
            self.policy, self.budget, self.prompt_len
        );
        let _ = writeln!(s, "tokens {:?}", self.generated);
        let _ = writeln!(s, "text {:?}", self.text);
        for (l, (k, t)) in self
            .kept_per_layer
            .iter()
            .zip(&self.total_per_layer)
            .enumerate()
        {
            let _ = writeln!(s, "layer {l}: kept {k}/{t}");
        }
        s
    }
}

/// Prefill, evict under `policy`, then greedy decode.
pub fn generate(
    w: &Weights,
    cfg: &RunConfig,
    prompt: &[u8],
    policy: Policy,
    budget: Budget,
    max_new: usize,
) -> Result<GenerateReport> {
    let ids = byte_tokenize(&w.config, prompt)?.ids;
    let prep = prepare_prompt(w, &ids, max_new)?;
    let b = budget.resolve(prep.prompt_len);
    let plan = if policy == Policy::Full {
        EvictionPlan::full(prep.prompt_len, w.config.n_layers, w.config.n_kv_heads)
    } else {
        prep.plan(w, policy, &cfg.eviction(), b)?
    };
    let generated = prep.decode(w, &plan, max_new)?;
    let cache = compact_cache(&prep.cache, &plan)?;
    let kv = w.config.n_kv_heads;
    Ok(GenerateReport {
        policy,
        budget: b,
        prompt_len: prep.prompt_len,
        text: String::from_utf8_lossy(&byte_detokenize(&w.config, &generated)?).into_owned(),
        generated,
        fullkv: prep.fullkv.clone(),
        kept_per_layer: cache.rows_per_layer(),
        total_per_layer: vec![prep.prompt_len * kv; w.config.n_layers],
        max_cached_position: cache.max_position(),
        plan,
    })
}

pub fn cmd_generate(
    cfg: &RunConfig,
    checkpoint: &Path,
    prompt_file: &Path,
    policy: Policy,
    budget: Budget,
    max_new: usize,
    plan_out: Option<&Path>,
) -> Result<GenerateReport> {
    let w =
        load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut prompt =
        std::fs::read(prompt_file).with_context(|| format!("reading {}", prompt_file.display()))?;
    if prompt.last() == Some(&b'\n') {
        prompt.pop();
    }
    let report = generate(&w, cfg, &prompt, policy, budget, max_new)?;
    if let Some(p) = plan_out {
        std::fs::write(p, report.plan.to_csv())
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(report)
}

/// `init`, `train-soft` and `eval` in one go, into `out_dir`.
pub fn cmd_pipeline(cfg: &RunConfig, out_dir: &Path, log: impl FnMut(&str)) -> Result<PipelineRun> {
    run_pipeline(cfg, out_dir, log)
}
