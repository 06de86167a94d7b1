//! Synthetic retrieval tasks over byte tokens.
//!
//! A binding is `KK=vvv;` with an upper-case key and a digit value. A
//! needle task hides one binding in lower-case filler; a recall task lists
//! several bindings back to back. The query block `?KK>` sits after the
//! context (tail) or right after BOS (head), and the answer is the value
//! followed by EOS.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, BOS, EOS};

pub const KEY_LEN: usize = 2;
pub const VALUE_LEN: usize = 3;
/// Tokens in one binding: key, `=`, value, `;`.
pub const BINDING_LEN: usize = KEY_LEN + VALUE_LEN + 2;
pub const MIN_NEEDLE_CTX: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Needle,
    KvRecall,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Needle => "needle",
            TaskKind::KvRecall => "kv_recall",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryPosition {
    Head,
    Tail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub prompt: Vec<TokenId>,
    /// Value tokens followed by EOS.
    pub answer: Vec<TokenId>,
    pub query_position: QueryPosition,
    /// Needle start as a fraction of the context, for needle tasks.
    pub depth_frac: Option<f64>,
    pub ctx_len: usize,
}

impl TaskInstance {
    /// Exact match of the first `answer.len()` generated tokens.
    pub fn score(&self, generated: &[TokenId]) -> f64 {
        f64::from(u8::from(
            generated.len() >= self.answer.len()
                && generated[..self.answer.len()] == self.answer[..],
        ))
    }
}

fn tok(b: u8) -> TokenId {
    TokenId::from(b)
}

fn random_key(rng: &mut impl Rng) -> Vec<TokenId> {
    (0..KEY_LEN)
        .map(|_| tok(rng.random_range(b'A'..=b'Z')))
        .collect()
}

fn random_value(rng: &mut impl Rng) -> Vec<TokenId> {
    (0..VALUE_LEN)
        .map(|_| tok(rng.random_range(b'0'..=b'9')))
        .collect()
}

fn binding(key: &[TokenId], value: &[TokenId]) -> Vec<TokenId> {
    let mut out = key.to_vec();
    out.push(tok(b'='));
    out.extend_from_slice(value);
    out.push(tok(b';'));
    out
}

fn query(key: &[TokenId]) -> Vec<TokenId> {
    let mut out = vec![tok(b'?')];
    out.extend_from_slice(key);
    out.push(tok(b'>'));
    out
}

fn assemble(context: Vec<TokenId>, key: &[TokenId], at: QueryPosition) -> Vec<TokenId> {
    let mut prompt = vec![BOS];
    match at {
        QueryPosition::Head => {
            prompt.extend(query(key));
            prompt.extend(context);
        }
        QueryPosition::Tail => {
            prompt.extend(context);
            prompt.extend(query(key));
        }
    }
    prompt
}

fn answer(value: &[TokenId]) -> Vec<TokenId> {
    let mut out = value.to_vec();
    out.push(EOS);
    out
}

/// One binding planted in `ctx_len` context tokens of filler, queried at the tail.
pub fn gen_needle(ctx_len: usize, depth_frac: f64, seed: u64) -> Result<TaskInstance> {
    gen_needle_at(ctx_len, depth_frac, QueryPosition::Tail, seed)
}

/// [`gen_needle`] with a chosen query position.
pub fn gen_needle_at(
    ctx_len: usize,
    depth_frac: f64,
    at: QueryPosition,
    seed: u64,
) -> Result<TaskInstance> {
    if ctx_len < MIN_NEEDLE_CTX {
        return Err(Error::Task(format!(
            "needle context {ctx_len} is below {MIN_NEEDLE_CTX}"
        )));
    }
    if !(0.0..=1.0).contains(&depth_frac) {
        return Err(Error::Task(format!(
            "depth fraction {depth_frac} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = random_key(&mut rng);
    let value = random_value(&mut rng);
    let mut context: Vec<TokenId> = (0..ctx_len - BINDING_LEN)
        .map(|_| tok(rng.random_range(b'a'..=b'z')))
        .collect();
    let start = ((depth_frac * ctx_len as f64).floor() as usize).min(ctx_len - BINDING_LEN);
    context.splice(start..start, binding(&key, &value));
    Ok(TaskInstance {
        kind: TaskKind::Needle,
        prompt: assemble(context, &key, at),
        answer: answer(&value),
        query_position: at,
        depth_frac: Some(depth_frac),
        ctx_len,
    })
}

/// `n_pairs` distinct-key bindings and a query for one of them.
pub fn gen_kv_recall(n_pairs: usize, at: QueryPosition, seed: u64) -> Result<TaskInstance> {
    if n_pairs < 2 {
        return Err(Error::Task(format!(
            "recall needs at least 2 pairs, got {n_pairs}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<Vec<TokenId>> = Vec::with_capacity(n_pairs);
    while keys.len() < n_pairs {
        let k = random_key(&mut rng);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let values: Vec<Vec<TokenId>> = (0..n_pairs).map(|_| random_value(&mut rng)).collect();
    let target = rng.random_range(0..n_pairs);
    let context: Vec<TokenId> = keys
        .iter()
        .zip(&values)
        .flat_map(|(k, v)| binding(k, v))
        .collect();
    Ok(TaskInstance {
        kind: TaskKind::KvRecall,
        ctx_len: context.len(),
        prompt: assemble(context, &keys[target], at),
        answer: answer(&values[target]),
        query_position: at,
        depth_frac: None,
    })
}

/// Distribution over task shapes used for pre-training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMix {
    /// Inclusive range of needle context lengths.
    pub needle_ctx: (usize, usize),
    /// Inclusive range of recall pair counts.
    pub kv_pairs: (usize, usize),
    /// Probability of drawing a needle task.
    pub needle_weight: f64,
    /// Probability of placing the query at the head.
    pub head_fraction: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self {
            needle_ctx: (64, 96),
            kv_pairs: (8, 13),
            needle_weight: 0.5,
            head_fraction: 0.5,
        }
    }
}

impl TaskMix {
    /// Longest prompt the mix can produce.
    pub fn max_prompt_len(&self) -> usize {
        let query = KEY_LEN + 2;
        1 + query + self.needle_ctx.1.max(self.kv_pairs.1 * BINDING_LEN)
    }

    pub fn sample(&self, seed: u64) -> Result<TaskInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let at = if rng.random_bool(self.head_fraction) {
            QueryPosition::Head
        } else {
            QueryPosition::Tail
        };
        let inner = rng.random();
        if rng.random_bool(self.needle_weight) {
            let ctx = rng.random_range(self.needle_ctx.0..=self.needle_ctx.1);
            let depth = rng.random_range(0..=10) as f64 / 10.0;
            gen_needle_at(ctx, depth, at, inner)
        } else {
            gen_kv_recall(
                rng.random_range(self.kv_pairs.0..=self.kv_pairs.1),
                at,
                inner,
            )
        }
    }

    /// `count` instances, the i-th from a sub-seed derived from `seed` and i.
    pub fn batch(&self, count: usize, seed: u64) -> Result<Vec<TaskInstance>> {
        (0..count as u64)
            .map(|i| self.sample(seed.wrapping_mul(0x9e37_79b9).wrapping_add(i)))
            .collect()
    }
}

/// Prompt, answer and EOS padding sized so that the first 90% of each
/// sequence is exactly the prompt.
pub fn task_corpus(tasks: &[TaskInstance]) -> Result<Vec<Vec<TokenId>>> {
    tasks
        .iter()
        .map(|t| {
            let p = t.prompt.len();
            let len = (10 * p).div_ceil(9);
            if len < p + t.answer.len() {
                return Err(Error::Task(format!(
                    "prompt of {p} tokens is too short to hold the answer in its last 10%"
                )));
            }
            let mut seq = t.prompt.clone();
            seq.extend_from_slice(&t.answer);
            seq.resize(len, EOS);
            Ok(seq)
        })
        .collect()
}

/// Shuffled copy of `tasks` under `seed`.
pub fn shuffled(tasks: &[TaskInstance], seed: u64) -> Vec<TaskInstance> {
    let mut out = tasks.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&t| if t < 256 { char::from(t as u8) } else { '|' })
            .collect()
    }

    #[test]
    fn needle_depth_zero_is_first() {
        let t = gen_needle(40, 0.0, 3).unwrap();
        assert_eq!(t.prompt.len(), 1 + 40 + 4);
        assert_eq!(t.prompt[0], BOS);
        assert!((tok(b'A')..=tok(b'Z')).contains(&t.prompt[1]));
        assert_eq!(t.prompt[3], tok(b'='));
        let value = &t.prompt[4..4 + VALUE_LEN];
        assert_eq!(&t.answer[..VALUE_LEN], value);
        assert_eq!(t.answer.last(), Some(&EOS));
        assert_eq!(t.prompt[t.prompt.len() - 4], tok(b'?'));
        assert_eq!(
            &t.prompt[t.prompt.len() - 3..t.prompt.len() - 1],
            &t.prompt[1..3]
        );
        assert!(gen_needle(31, 0.5, 0).is_err());
    }

    #[test]
    fn needle_full_depth_ends_the_context() {
        let t = gen_needle(50, 1.0, 9).unwrap();
        let ctx = &t.prompt[1..51];
        assert_eq!(ctx[ctx.len() - 1], tok(b';'));
        assert_eq!(ctx[ctx.len() - BINDING_LEN + KEY_LEN], tok(b'='));
    }

    #[test]
    fn seeds_change_filler_not_structure() {
        let a = gen_needle(64, 0.5, 1).unwrap();
        let b = gen_needle(64, 0.5, 2).unwrap();
        assert_ne!(a.prompt, b.prompt);
        assert_eq!(a.prompt.len(), b.prompt.len());
        let eq_pos = |t: &TaskInstance| t.prompt.iter().position(|&x| x == tok(b'=')).unwrap();
        assert_eq!(eq_pos(&a), eq_pos(&b));
        assert_eq!(gen_needle(64, 0.5, 1).unwrap(), a);
    }

    #[test]
    fn head_and_tail_share_bindings() {
        let h = gen_kv_recall(6, QueryPosition::Head, 5).unwrap();
        let t = gen_kv_recall(6, QueryPosition::Tail, 5).unwrap();
        assert_eq!(h.answer, t.answer);
        assert_eq!(&h.prompt[5..], &t.prompt[1..t.prompt.len() - 4]);
        assert_eq!(&h.prompt[1..5], &t.prompt[t.prompt.len() - 4..]);
        assert_eq!(gen_kv_recall(6, QueryPosition::Head, 5).unwrap(), h);
        assert!(gen_kv_recall(1, QueryPosition::Tail, 0).is_err());
    }

    #[test]
    fn two_pair_answers_match_brute_force_lookup() {
        for seed in 0..200 {
            let t = gen_kv_recall(2, QueryPosition::Tail, seed).unwrap();
            let s = text(&t.prompt[1..]);
            let (bindings, q) = s.split_once('?').unwrap();
            let key = &q[..KEY_LEN];
            let found: Vec<&str> = bindings
                .split(';')
                .filter_map(|b| b.split_once('='))
                .filter(|(k, _)| *k == key)
                .map(|(_, v)| v)
                .collect();
            assert_eq!(found.len(), 1);
            assert_eq!(found[0], text(&t.answer[..VALUE_LEN]));
        }
    }

    #[test]
    fn scoring_is_exact_prefix_match() {
        let t = gen_kv_recall(3, QueryPosition::Tail, 1).unwrap();
        assert_eq!(t.score(&t.answer), 1.0);
        let mut long = t.answer.clone();
        long.push(tok(b'x'));
        assert_eq!(t.score(&long), 1.0);
        assert_eq!(t.score(&t.answer[..2]), 0.0);
        let mut wrong = t.answer.clone();
        wrong[0] = tok(b'x');
        assert_eq!(t.score(&wrong), 0.0);
    }

    #[test]
    fn corpus_cut_lands_on_prompt_boundary() {
        let mix = TaskMix::default();
        let tasks = mix.batch(50, 7).unwrap();
        for (t, seq) in tasks.iter().zip(task_corpus(&tasks).unwrap()) {
            assert_eq!(seq.len() * 9 / 10, t.prompt.len());
            assert_eq!(&seq[..t.prompt.len()], &t.prompt[..]);
            assert!(seq.len() <= mix.max_prompt_len() * 10 / 9 + 2);
        }
    }
}
