//! The stages behind the CLI commands: base model, soft-token training and
//! evaluation suites, plus their file outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kvprobe::eviction::Policy;
use kvprobe::harness::experiments::{
    degradation_csv, needle_csv, paired_tasks, results_csv, run_budget_sweep, run_degradation,
    run_needle_grid, run_soft_count_sweep, soft_count_csv, DegradationRow, EvalResult, NeedleCell,
    SoftCountRow,
};
use kvprobe::harness::{
    fullkv_accuracy, pretrain, task_corpus, PretrainReport, TaskInstance, TaskMix,
};
use kvprobe::model::{byte_tokenize, init_model, save_checkpoint, TokenId, Weights, EOS};
use kvprobe::trainer::{init_soft_from_corpus, make_dataset, train, DatasetStats, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::{sha256_file, Manifest};

/// Fresh base model, pre-trained when `pretrain_steps > 0`.
pub fn build_base(
    cfg: &RunConfig,
    on_step: impl FnMut(usize, f64),
) -> Result<(Weights, Option<PretrainReport>)> {
    let mut w = init_model(&cfg.model(), cfg.stage_seed("model"))?;
    if cfg.pretrain_steps == 0 {
        return Ok((w, None));
    }
    let report = pretrain(&mut w, &cfg.pretrain(), on_step)?;
    Ok((w, Some(report)))
}

pub fn pretrain_csv(cfg: &RunConfig, report: &PretrainReport) -> String {
    let pc = cfg.pretrain();
    let mut out = String::from("step,loss,lr\n");
    for (i, l) in report.losses.iter().enumerate() {
        let _ = writeln!(out, "{},{:.8},{:.8e}", i + 1, l, pc.lr_at(i));
    }
    out
}

/// Held-out needle tasks, half with the query at the head.
pub fn needle_check_tasks(cfg: &RunConfig, count: usize) -> Result<Vec<TaskInstance>> {
    let mix = TaskMix {
        needle_weight: 1.0,
        head_fraction: 0.5,
        ..cfg.mix()
    };
    Ok(mix.batch(count, cfg.stage_seed("needle_check"))?)
}

pub fn fullkv_needle_accuracy(w: &Weights, cfg: &RunConfig, count: usize) -> Result<f64> {
    Ok(fullkv_accuracy(w, &needle_check_tasks(cfg, count)?)?)
}

/// Task-format corpus for probe training.
pub fn task_training_corpus(cfg: &RunConfig) -> Result<Vec<Vec<TokenId>>> {
    let tasks = cfg
        .mix()
        .batch(cfg.train_samples, cfg.stage_seed("corpus"))?;
    Ok(task_corpus(&tasks)?)
}

/// One sequence per non-empty line: BOS, the line's bytes, EOS.
pub fn read_text_corpus(path: &Path, cfg: &RunConfig) -> Result<Vec<Vec<TokenId>>> {
    let text = std::fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let model = cfg.model();
    let mut corpus = Vec::new();
    for line in text.split(|&b| b == b'\n') {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        let mut ids = byte_tokenize(&model, line)?.ids;
        ids.push(EOS);
        corpus.push(ids);
    }
    if corpus.is_empty() {
        bail!("corpus {} has no lines", path.display());
    }
    Ok(corpus)
}

/// `base` with its soft bank re-initialised from `corpus`.
pub fn init_soft(base: &Weights, corpus: &[Vec<TokenId>], cfg: &RunConfig) -> Result<Weights> {
    let mut w = base.clone();
    init_soft_from_corpus(&mut w, corpus, cfg.stage_seed("soft_init"))?;
    Ok(w)
}

pub struct SoftRun {
    pub weights: Weights,
    pub outcome: TrainOutcome,
    pub stats: DatasetStats,
}

/// Builds the probe dataset from `init` and trains its soft bank.
pub fn train_soft(init: &Weights, corpus: &[Vec<TokenId>], cfg: &RunConfig) -> Result<SoftRun> {
    let (dataset, stats) = make_dataset(
        init,
        corpus,
        cfg.train_samples,
        cfg.stage_seed("dataset"),
        cfg.max_new,
    )?;
    let mut weights = init.clone();
    let outcome = train(&mut weights, &dataset, &cfg.train())?;
    if weights.frozen_checksum() != init.frozen_checksum() {
        bail!("frozen tensors changed during soft-token training");
    }
    Ok(SoftRun {
        weights,
        outcome,
        stats,
    })
}

pub fn eval_tasks(cfg: &RunConfig) -> Result<Vec<TaskInstance>> {
    Ok(cfg.mix().batch(cfg.eval_tasks, cfg.stage_seed("eval"))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Budget,
    Degradation,
    Needle,
    SoftCount,
    All,
}

impl std::str::FromStr for Suite {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "budget" => Suite::Budget,
            "degradation" => Suite::Degradation,
            "needle" => Suite::Needle,
            "softcount" => Suite::SoftCount,
            "all" => Suite::All,
            _ => bail!("unknown suite {s:?} (budget, degradation, needle, softcount, all)"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleGrid {
    pub policy: Policy,
    pub budget: String,
    pub cells: Vec<NeedleCell>,
}

/// Everything an evaluation run produced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifacts {
    pub results: Vec<EvalResult>,
    /// The same sweep with the untrained soft bank, probe and oracle policies only.
    pub untrained: Vec<EvalResult>,
    pub degradation: Vec<DegradationRow>,
    pub needle: Vec<NeedleGrid>,
    pub soft_counts: Vec<SoftCountRow>,
}

impl EvalArtifacts {
    /// Mean over budgets of the `all` rows of `policy`.
    pub fn mean(
        rows: &[EvalResult],
        policy: Policy,
        f: impl Fn(&EvalResult) -> Option<f64>,
    ) -> Option<f64> {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.policy == policy && r.task == "all")
            .filter_map(f)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn row<'a>(rows: &'a [EvalResult], policy: Policy, budget: &str) -> Option<&'a EvalResult> {
        rows.iter()
            .find(|r| r.policy == policy && r.budget == budget && r.task == "all")
    }
}

/// Runs `suite` on `w`. `untrained` adds the probe comparison against a
/// bank that never saw training.
pub fn run_suite(
    w: &Weights,
    cfg: &RunConfig,
    suite: Suite,
    untrained: Option<&Weights>,
) -> Result<EvalArtifacts> {
    let ev = cfg.eviction();
    let policies = cfg.policy_list()?;
    let budgets = cfg.budget_list()?;
    let mut out = EvalArtifacts::default();
    if matches!(suite, Suite::Budget | Suite::All) {
        let tasks = eval_tasks(cfg)?;
        out.results = run_budget_sweep(w, &tasks, &policies, &budgets, &ev)?;
        if let Some(u) = untrained {
            out.untrained =
                run_budget_sweep(u, &tasks, &[Policy::JudgeQ, Policy::Oracle], &budgets, &ev)?
                    .into_iter()
                    .filter(|r| r.policy != Policy::Full)
                    .collect();
        }
    }
    if matches!(suite, Suite::Degradation | Suite::All) && cfg.degradation_pairs > 0 {
        let pairs = paired_tasks(
            &cfg.mix(),
            cfg.degradation_pairs,
            cfg.stage_seed("degradation"),
        )?;
        let policies: Vec<Policy> = policies
            .iter()
            .copied()
            .filter(|&p| p != Policy::Full)
            .collect();
        out.degradation = run_degradation(w, &pairs, &policies, cfg.degradation_budget()?, &ev)?;
    }
    if matches!(suite, Suite::Needle | Suite::All) && cfg.needle_grid_per_cell > 0 {
        for &policy in &policies {
            for &b in &budgets {
                let cells = run_needle_grid(
                    w,
                    &cfg.needle_grid_ctx,
                    &cfg.needle_grid_depths,
                    cfg.needle_grid_per_cell,
                    policy,
                    b,
                    &ev,
                    cfg.stage_seed("needle_grid"),
                )?;
                out.needle.push(NeedleGrid {
                    policy,
                    budget: b.to_string(),
                    cells,
                });
            }
        }
    }
    if matches!(suite, Suite::SoftCount) {
        let corpus = task_training_corpus(cfg)?;
        let tasks: Vec<TaskInstance> = eval_tasks(cfg)?;
        out.soft_counts = run_soft_count_sweep(
            w,
            &corpus,
            &tasks,
            &cfg.soft_counts,
            &cfg.soft_sweep()?,
            &ev,
        )?;
    }
    Ok(out)
}

fn write(dir: &Path, name: &str, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    files.push(path);
    Ok(())
}

/// Writes the CSVs and `summary.json` for `art` into `dir`.
pub fn write_eval(
    dir: &Path,
    art: &EvalArtifacts,
    extra: serde_json::Value,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    if !art.results.is_empty() {
        write(dir, "results.csv", &results_csv(&art.results), &mut files)?;
    }
    if !art.untrained.is_empty() {
        write(
            dir,
            "results_untrained.csv",
            &results_csv(&art.untrained),
            &mut files,
        )?;
    }
    if !art.degradation.is_empty() {
        write(
            dir,
            "degradation.csv",
            &degradation_csv(&art.degradation),
            &mut files,
        )?;
    }
    for g in &art.needle {
        write(
            dir,
            &format!("needle_{}_{}.csv", g.policy, g.budget.replace('%', "pct")),
            &needle_csv(&g.cells),
            &mut files,
        )?;
    }
    if !art.soft_counts.is_empty() {
        write(
            dir,
            "soft_counts.csv",
            &soft_count_csv(&art.soft_counts),
            &mut files,
        )?;
    }
    let summary = serde_json::json!({ "artifacts": art, "extra": extra });
    write(
        dir,
        "summary.json",
        &(serde_json::to_string_pretty(&summary)? + "\n"),
        &mut files,
    )?;
    Ok(files)
}

/// Result of [`run_pipeline`].
pub struct PipelineRun {
    pub base: Weights,
    pub untrained: Weights,
    pub trained: Weights,
    pub base_needle_accuracy: f64,
    pub soft: TrainOutcome,
    pub eval: EvalArtifacts,
    pub manifest: Manifest,
}

/// Base model, probe training and the budget and degradation suites, with
/// every artifact written to `dir`.
pub fn run_pipeline(cfg: &RunConfig, dir: &Path, mut log: impl FnMut(&str)) -> Result<PipelineRun> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut files = Vec::new();
    let (base, report) = build_base(cfg, |step, loss| {
        if (step + 1) % 250 == 0 {
            log(&format!("pretrain step {} loss {loss:.4}", step + 1));
        }
    })?;
    if let Some(r) = &report {
        write(dir, "pretrain.csv", &pretrain_csv(cfg, r), &mut files)?;
    }
    let base_path = dir.join("base.jqck");
    save_checkpoint(&base, &base_path)?;
    files.push(base_path);
    let base_needle_accuracy = fullkv_needle_accuracy(&base, cfg, 100)?;
    log(&format!(
        "base FullKV needle accuracy {base_needle_accuracy:.3}"
    ));

    let corpus = task_training_corpus(cfg)?;
    let untrained = init_soft(&base, &corpus, cfg)?;
    let run = train_soft(&untrained, &corpus, cfg)?;
    log(&format!(
        "soft training loss {:.6} -> {:.6}",
        run.outcome.initial_loss, run.outcome.final_loss
    ));
    write(dir, "train_loss.csv", &run.outcome.curve_csv(), &mut files)?;
    let soft_path = dir.join("soft.jqck");
    save_checkpoint(&run.weights, &soft_path)?;
    files.push(soft_path);

    let eval = run_suite(&run.weights, cfg, Suite::Budget, Some(&untrained))?;
    let degr = run_suite(&run.weights, cfg, Suite::Degradation, None)?;
    let eval = EvalArtifacts {
        degradation: degr.degradation,
        ..eval
    };
    let extra = serde_json::json!({
        "base_fullkv_needle_accuracy": base_needle_accuracy,
        "soft_initial_loss": run.outcome.initial_loss,
        "soft_final_loss": run.outcome.final_loss,
        "dataset": run.stats,
    });
    files.extend(write_eval(dir, &eval, extra)?);

    let mut manifest = Manifest::new("pipeline", cfg);
    for f in &files {
        let name = f.file_name().expect("file").to_string_lossy().into_owned();
        manifest.outputs.insert(name, sha256_file(f)?);
    }
    manifest.write(&dir.join("manifest.json"))?;
    Ok(PipelineRun {
        base,
        untrained,
        trained: run.weights,
        base_needle_accuracy,
        soft: run.outcome,
        eval,
        manifest,
    })
}
