//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use kvprobe::eviction::{
    allocate_pyramid, hit_rate, score_h2o, score_response, score_snapkv, score_soft, select_topk,
    BudgetSchedule, EvictionConfig, EvictionPlan, GroupReduce, ImportanceScores, Policy,
};
use kvprobe::harness::experiments::prepare_prompt;
use kvprobe::harness::{task_corpus, TaskMix};
use kvprobe::math::Matrix;
use kvprobe::model::{
    init_model, AttentionRecord, ModelConfig, Role, TokenId, TokenSequence, Weights,
};
use kvprobe::trainer::{
    attention_maps_pair, backward_soft, init_soft_from_corpus, loss_mse, make_dataset, train,
    TrainConfig, TrainingSample,
};
use kvprobe_cli::config::RunConfig;
use kvprobe_cli::manifest::load_config;
use kvprobe_cli::pipeline::{run_pipeline, EvalArtifacts};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn toy(n_layers: usize, n_soft: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        n_soft,
        d_model: 16,
        n_layers,
        n_heads: 4,
        n_kv_heads: 2,
        head_dim: 4,
        max_seq: 64,
        rope_theta: 10000.0,
        mlp_hidden: 24,
    }
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<TokenId> {
    (0..n)
        .map(|_| rng.random_range(0..vocab as TokenId))
        .collect()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// 1

fn fd_loss(w: &Weights<f64>, s: &TrainingSample) -> f64 {
    let (a, b) = attention_maps_pair(w, s).unwrap();
    loss_mse(&a, &b).unwrap().loss
}

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    let cfg = toy(2, 4);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for seed in [1u64, 2, 3] {
        let mut w32 = init_model(&cfg, seed).unwrap();
        for layer in &mut w32.layers {
            layer.wq.data.iter_mut().for_each(|x| *x *= 3.0);
            layer.wk.data.iter_mut().for_each(|x| *x *= 3.0);
        }
        w32.embedding.data.iter_mut().for_each(|x| *x *= 4.0);
        let mut w: Weights<f64> = w32.cast();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let s = TrainingSample {
            prompt_ids: random_ids(&mut rng, 12, 24),
            response_ids: random_ids(&mut rng, 3, 24),
        };
        let (_, grad) = backward_soft(&w, &s).unwrap();
        let h = 1e-3;
        let base = cfg.vocab_size * cfg.d_model;
        for _ in 0..10 {
            let k = rng.random_range(0..cfg.n_soft * cfg.d_model);
            let orig = w.embedding.data[base + k];
            w.embedding.data[base + k] = orig + h;
            let up = fd_loss(&w, &s);
            w.embedding.data[base + k] = orig - h;
            let down = fd_loss(&w, &s);
            w.embedding.data[base + k] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = grad.data[k];
            worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-7));
            coords += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && coords >= 20 && secs < 60.0,
        format!("max relative error {worst:.2e} over {coords} coordinates in {secs:.1}s"),
    )
}

// 2

fn non_soft_bytes(w: &Weights) -> Vec<f32> {
    let n = w.config.vocab_size * w.config.d_model;
    let mut out = w.embedding.data[..n].to_vec();
    for (name, m) in w.tensors() {
        if name != "embedding" {
            out.extend_from_slice(&m.data);
        }
    }
    out
}

fn frozen_base() -> Outcome {
    let cfg = toy(2, 3);
    let mut w = init_model(&cfg, 5).unwrap();
    let before = (w.frozen_checksum(), non_soft_bytes(&w), w.soft_bank());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data: Vec<TrainingSample> = (0..16)
        .map(|_| {
            let p = rng.random_range(6..20);
            let m = rng.random_range(1..5);
            TrainingSample {
                prompt_ids: random_ids(&mut rng, p, 24),
                response_ids: random_ids(&mut rng, m, 24),
            }
        })
        .collect();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    train(&mut w, &data, &tc).map_err(|e| e.to_string())?;
    let same_sum = w.frozen_checksum() == before.0;
    let same_bits = non_soft_bytes(&w)
        .iter()
        .zip(&before.1)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let moved = w.soft_bank() != before.2;
    check(
        same_sum && same_bits && moved,
        format!(
            "checksum equal {same_sum}, tensors bit-equal {same_bits}, soft bank moved {moved}"
        ),
    )
}

// 3

fn identity_eviction() -> Outcome {
    let cfg = ModelConfig {
        vocab_size: 40,
        max_seq: 96,
        ..toy(2, 4)
    };
    let w = init_model(&cfg, 11).unwrap();
    let ecfg = EvictionConfig {
        window: 4,
        pool: 3,
        sinks: 2,
        ..EvictionConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut mismatches = Vec::new();
    for i in 0..50 {
        let p = rng.random_range(8..40);
        let prompt = random_ids(&mut rng, p, 40);
        let prep = prepare_prompt(&w, &prompt, 8).map_err(|e| e.to_string())?;
        for policy in Policy::ALL {
            for budget in [p, p + 5] {
                let plan = prep
                    .plan(&w, policy, &ecfg, budget)
                    .map_err(|e| e.to_string())?;
                if prep.decode(&w, &plan, 8).map_err(|e| e.to_string())? != prep.fullkv {
                    mismatches.push(format!("prompt {i} {policy} budget {budget}"));
                }
            }
        }
    }
    check(
        mismatches.is_empty(),
        format!("50 prompts x 7 policies, mismatches {mismatches:?}"),
    )
}

// 4

fn random_record(
    rng: &mut ChaCha8Rng,
    layers: usize,
    heads: usize,
    kv: usize,
    n: usize,
) -> AttentionRecord<f64> {
    let maps = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| {
                    let mut m = Matrix::zeros(n, n);
                    for i in 0..n {
                        let raw: Vec<f64> = (0..=i).map(|_| rng.random::<f64>().powi(3)).collect();
                        let z: f64 = raw.iter().sum();
                        for (j, x) in raw.iter().enumerate() {
                            m.data[i * n + j] = x / z;
                        }
                    }
                    m
                })
                .collect()
        })
        .collect();
    AttentionRecord {
        maps,
        n_kv_heads: kv,
        query_positions: (0..n).collect(),
        key_positions: (0..n).collect(),
    }
}

fn group(per_head: &[Vec<f64>], kv: usize, reduce: GroupReduce) -> Vec<Vec<f64>> {
    let g = per_head.len() / kv;
    (0..kv)
        .map(|k| {
            let members = &per_head[k * g..(k + 1) * g];
            (0..members[0].len())
                .map(|j| match reduce {
                    GroupReduce::Mean => members.iter().map(|m| m[j]).sum::<f64>() / g as f64,
                    GroupReduce::Max => members
                        .iter()
                        .map(|m| m[j])
                        .fold(f64::NEG_INFINITY, f64::max),
                })
                .collect()
        })
        .collect()
}

/// Row mean over `rows` at prompt columns, per head, then grouped.
fn brute_block(
    rec: &AttentionRecord<f64>,
    rows: std::ops::Range<usize>,
    p: usize,
    reduce: GroupReduce,
) -> Vec<Vec<Vec<f64>>> {
    rec.maps
        .iter()
        .map(|layer| {
            let per_head: Vec<Vec<f64>> = layer
                .iter()
                .map(|m| {
                    (0..p)
                        .map(|j| rows.clone().map(|i| m.get(i, j)).sum::<f64>() / rows.len() as f64)
                        .collect()
                })
                .collect();
            group(&per_head, rec.n_kv_heads, reduce)
        })
        .collect()
}

/// Window sum over the last `window` prompt rows, then a centred max over
/// `pool` columns clipped at the prompt edges, per head, then grouped.
fn brute_snapkv(
    rec: &AttentionRecord<f64>,
    p: usize,
    window: usize,
    pool: usize,
    reduce: GroupReduce,
) -> Vec<Vec<Vec<f64>>> {
    let w = window.min(p);
    let half = pool / 2;
    rec.maps
        .iter()
        .map(|layer| {
            let per_head: Vec<Vec<f64>> = layer
                .iter()
                .map(|m| {
                    let sum: Vec<f64> = (0..p)
                        .map(|j| (p - w..p).map(|i| m.get(i, j)).sum())
                        .collect();
                    (0..p)
                        .map(|j| {
                            let mut best = f64::NEG_INFINITY;
                            for (k, &x) in sum.iter().enumerate() {
                                if k + half >= j && k <= j + half {
                                    best = best.max(x);
                                }
                            }
                            best
                        })
                        .collect()
                })
                .collect();
            group(&per_head, rec.n_kv_heads, reduce)
        })
        .collect()
}

fn max_diff(a: &ImportanceScores, b: &[Vec<Vec<f64>>]) -> f64 {
    let flat: Vec<f64> = b.iter().flatten().flatten().copied().collect();
    let got: Vec<f64> = a.scores.iter().flatten().flatten().copied().collect();
    if flat.len() != got.len() {
        return f64::INFINITY;
    }
    got.iter()
        .zip(&flat)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn topk_reference(s: &[f64], b: usize, protect: usize) -> Vec<usize> {
    let p = s.len();
    if b >= p {
        return (0..p).collect();
    }
    let mut idx: Vec<usize> = (0..p - protect).collect();
    idx.sort_by(|&x, &y| s[y].partial_cmp(&s[x]).unwrap().then(x.cmp(&y)));
    let mut out: Vec<usize> = idx
        .into_iter()
        .take(b - protect)
        .chain(p - protect..p)
        .collect();
    out.sort();
    out
}

fn policy_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let layers = rng.random_range(1..4);
        let kv = rng.random_range(1..3);
        let heads = kv * rng.random_range(1..4);
        let p = rng.random_range(1..24);
        let extra = rng.random_range(1..6);
        let n = p + extra;
        let rec = random_record(&mut rng, layers, heads, kv, n);
        let reduce = if rng.random_bool(0.5) {
            GroupReduce::Mean
        } else {
            GroupReduce::Max
        };
        let ids: Vec<TokenId> = vec![0; n];
        let with = |role| TokenSequence {
            ids: ids.clone(),
            roles: (0..n)
                .map(|i| if i < p { Role::Prompt } else { role })
                .collect(),
        };
        let soft = score_soft(&rec, &with(Role::Soft), reduce).map_err(|e| e.to_string())?;
        worst = worst.max(max_diff(&soft, &brute_block(&rec, p..n, p, reduce)));
        let resp =
            score_response(&rec, &with(Role::Response), reduce).map_err(|e| e.to_string())?;
        worst = worst.max(max_diff(&resp, &brute_block(&rec, p..n, p, reduce)));
        let window = rng.random_range(1..12);
        let pool = 2 * rng.random_range(0..4) + 1;
        let snap = score_snapkv(&rec, p, window, pool, reduce).map_err(|e| e.to_string())?;
        worst = worst.max(max_diff(
            &snap,
            &brute_snapkv(&rec, p, window, pool, reduce),
        ));
        let h2o = score_h2o(&rec, p, window, reduce).map_err(|e| e.to_string())?;
        worst = worst.max(max_diff(&h2o, &brute_snapkv(&rec, p, window, 1, reduce)));
    }
    let mut topk_bad = 0;
    for _ in 0..1000 {
        let p = rng.random_range(1..40);
        // coarse values force ties
        let s: Vec<f64> = (0..p)
            .map(|_| rng.random_range(0..6) as f64 / 5.0)
            .collect();
        let b = rng.random_range(1..p + 3);
        let protect = if b < p { rng.random_range(0..=b) } else { 0 };
        let scores = ImportanceScores {
            prompt_len: p,
            scores: vec![vec![s.clone()]],
        };
        let plan = select_topk(
            &scores,
            &BudgetSchedule::uniform(b, 1),
            protect,
            Policy::JudgeQ,
        )
        .map_err(|e| e.to_string())?;
        if plan.kept[0][0] != topk_reference(&s, b, protect) {
            topk_bad += 1;
        }
    }
    check(
        worst < 1e-6 && topk_bad == 0,
        format!("100 records max score error {worst:.2e}, top-k mismatches {topk_bad}/1000"),
    )
}

// 5

fn single_plan(kept: Vec<usize>, p: usize) -> EvictionPlan {
    EvictionPlan {
        policy: Policy::Oracle,
        budget: kept.len(),
        prompt_len: p,
        layer_budgets: vec![kept.len()],
        kept: vec![vec![kept]],
    }
}

fn hit_rate_semantics() -> Outcome {
    let cfg = ModelConfig {
        vocab_size: 40,
        max_seq: 96,
        ..toy(2, 4)
    };
    let w = init_model(&cfg, 31).unwrap();
    let ecfg = EvictionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut oracle_min = 1.0f64;
    for _ in 0..20 {
        let prompt = random_ids(&mut rng, 30, 40);
        let prep = prepare_prompt(&w, &prompt, 6).map_err(|e| e.to_string())?;
        for b in [3, 8, 15] {
            let a = prep
                .plan(&w, Policy::Oracle, &ecfg, b)
                .map_err(|e| e.to_string())?;
            let c = prep
                .plan(&w, Policy::Oracle, &ecfg, b)
                .map_err(|e| e.to_string())?;
            oracle_min = oracle_min.min(hit_rate(&a, &c).map_err(|e| e.to_string())?);
        }
    }
    let disjoint = hit_rate(
        &single_plan(vec![0, 1, 2], 10),
        &single_plan(vec![5, 6, 7], 10),
    )
    .unwrap();
    let half = hit_rate(
        &single_plan(vec![1, 2, 3, 4], 10),
        &single_plan(vec![3, 4, 5, 6], 10),
    )
    .unwrap();
    check(
        oracle_min == 1.0 && disjoint == 0.0 && half == 0.5,
        format!("oracle {oracle_min}, disjoint {disjoint}, overlap {half}"),
    )
}

// 6 and 7

fn desk_pipeline(dir: &Path) -> Result<(Outcome, Outcome), String> {
    let t0 = Instant::now();
    let cfg = RunConfig::load(configs_dir().join("desk.toml")).map_err(|e| e.to_string())?;
    let run = run_pipeline(&cfg, dir, |_| {}).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let art = &run.eval;
    let mut ok = run.base_needle_accuracy >= 0.95 && secs < 1800.0;
    let mut parts = vec![format!(
        "base needle accuracy {:.3}",
        run.base_needle_accuracy
    )];
    for b in ["0.25", "0.5"] {
        let find = EvalArtifacts::row;
        let (Some(jq), Some(untr), Some(snap)) = (
            find(&art.results, Policy::JudgeQ, b),
            find(&art.untrained, Policy::JudgeQ, b),
            find(&art.results, Policy::SnapKv, b),
        ) else {
            return Ok((
                Err(format!("missing rows at budget {b}")),
                Err("not run".into()),
            ));
        };
        let gain = jq.hit_rate.unwrap_or(0.0) - untr.hit_rate.unwrap_or(0.0);
        ok &= gain >= 0.05 && jq.score >= snap.score && jq.n >= 100;
        parts.push(format!(
            "{b}: hit gain {:+.3}, judgeq {:.3} vs snapkv {:.3}, n {}",
            gain, jq.score, snap.score, jq.n
        ));
    }
    parts.push(format!("{secs:.0}s"));
    let c6 = check(ok, parts.join("; "));
    let drop = |p: Policy| art.degradation.iter().find(|r| r.policy == p);
    let c7 = match (drop(Policy::JudgeQ), drop(Policy::SnapKv)) {
        (Some(j), Some(s)) => match (j.drop, s.drop) {
            (Some(dj), Some(ds)) => check(
                dj <= ds && j.n >= 100 && s.n >= 100,
                format!(
                    "judgeq drop {dj:.3} vs snapkv drop {ds:.3} over {} pairs",
                    j.n
                ),
            ),
            _ => Err("undefined drop (zero tail score)".into()),
        },
        _ => Err("missing degradation rows".into()),
    };
    Ok((c6, c7))
}

// 8

fn training_smoke() -> Outcome {
    let cfg = ModelConfig {
        vocab_size: 258,
        n_soft: 8,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        n_kv_heads: 1,
        head_dim: 8,
        max_seq: 160,
        rope_theta: 10000.0,
        mlp_hidden: 32,
    };
    let mut w = init_model(&cfg, 1).unwrap();
    let n = cfg.vocab_size * cfg.d_model;
    w.embedding.data[..n].iter_mut().for_each(|x| *x *= 0.08);
    let mix = TaskMix {
        needle_weight: 1.0,
        needle_ctx: (32, 48),
        ..TaskMix::default()
    };
    let corpus =
        task_corpus(&mix.batch(200, 4).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    init_soft_from_corpus(&mut w, &corpus, 5).map_err(|e| e.to_string())?;
    let (data, _) = make_dataset(&w, &corpus, 200, 3, 8).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 1,
        lr: 5e-5,
        ..TrainConfig::default()
    };
    let out = train(&mut w, &data, &tc).map_err(|e| e.to_string())?;
    let ratio = out.final_loss / out.initial_loss;
    check(
        ratio < 0.5 && data.len() == 200,
        format!(
            "{} samples, loss {:.3e} -> {:.3e}, ratio {ratio:.3}",
            data.len(),
            out.initial_loss,
            out.final_loss
        ),
    )
}

// 9

fn pyramid_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut bad = 0;
    for _ in 0..100 {
        let nominal = rng.random_range(1..500);
        let layers = rng.random_range(1..64);
        let floor = rng.random_range(0..=nominal);
        let s = allocate_pyramid(nominal, layers, floor).map_err(|e| e.to_string())?;
        if s.budgets.iter().sum::<usize>() != nominal * layers || s.budgets.len() != layers {
            bad += 1;
        }
    }
    check(bad == 0, format!("{bad}/100 triples off"))
}

// 10

fn small_config() -> RunConfig {
    RunConfig {
        seed: 7,
        vocab_size: 258,
        n_soft: 4,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        n_kv_heads: 1,
        head_dim: 8,
        max_seq: 112,
        mlp_hidden: 32,
        pretrain_steps: 20,
        pretrain_batch: 2,
        pretrain_lr: 3e-3,
        pretrain_warmup: 5,
        needle_ctx_min: 32,
        needle_ctx_max: 48,
        train_samples: 12,
        train_epochs: 1,
        train_batch: 4,
        train_lr: 1e-3,
        max_new: 4,
        window: 4,
        pool: 3,
        sinks: 2,
        eval_tasks: 6,
        degradation_pairs: 4,
        ..RunConfig::default()
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn determinism(root: &Path) -> Outcome {
    let cfg = small_config();
    let a = root.join("a");
    let b = root.join("b");
    run_pipeline(&cfg, &a, |_| {}).map_err(|e| e.to_string())?;
    let replay = load_config(&a.join("manifest.json")).map_err(|e| e.to_string())?;
    run_pipeline(&replay, &b, |_| {}).map_err(|e| e.to_string())?;
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let has_ckpt = names.contains(&"base.jqck") && names.contains(&"soft.jqck");
    check(
        fa.len() == fb.len() && differing.is_empty() && has_ckpt,
        format!(
            "{} files compared {names:?}, differing {differing:?}",
            fa.len()
        ),
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut results: Vec<(u32, Outcome)> = vec![
        (1, gradient_check()),
        (2, frozen_base()),
        (3, identity_eviction()),
        (4, policy_oracles()),
        (5, hit_rate_semantics()),
    ];
    match desk_pipeline(&tmp.path().join("desk")) {
        Ok((c6, c7)) => {
            results.push((6, c6));
            results.push((7, c7));
        }
        Err(e) => {
            results.push((6, Err(format!("pipeline error: {e}"))));
            results.push((7, Err("pipeline did not run".into())));
        }
    }
    results.push((8, training_smoke()));
    results.push((9, pyramid_conservation()));
    results.push((10, determinism(&tmp.path().join("det"))));
    let mut failed = 0;
    for (n, r) in &results {
        match r {
            Ok(d) => println!("criterion {n}: PASS {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n}: FAIL {d}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
