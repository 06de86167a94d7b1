//! Inference: prefill, single-step decode and greedy generation.
//!
//! Prefill runs the same per-token kernel as decode, so a prompt prefilled
//! in one call and the same prompt fed token by token produce identical
//! caches and logits.

use super::{TokenId, TokenSequence, Weights, NORM_EPS};
use crate::error::{Error, Result};
use crate::math::{dot, rms_norm_into, silu, softmax_in_place, vec_mat, Matrix, Real};

/// Keys and values for one (layer, kv_head), with the absolute position of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache<T = f32> {
    /// Rotary-encoded at `positions`; never re-encoded after compaction.
    pub keys: Matrix<T>,
    pub values: Matrix<T>,
    pub positions: Vec<usize>,
}

impl<T: Real> HeadCache<T> {
    pub fn new(head_dim: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, head_dim),
            values: Matrix::zeros(0, head_dim),
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVCache<T = f32> {
    /// Indexed `[layer][kv_head]`.
    pub heads: Vec<Vec<HeadCache<T>>>,
}

impl<T: Real> KVCache<T> {
    pub fn new(n_layers: usize, n_kv_heads: usize, head_dim: usize) -> Self {
        Self {
            heads: (0..n_layers)
                .map(|_| (0..n_kv_heads).map(|_| HeadCache::new(head_dim)).collect())
                .collect(),
        }
    }

    pub fn head(&self, layer: usize, kv_head: usize) -> &HeadCache<T> {
        &self.heads[layer][kv_head]
    }

    /// Total stored rows over all (layer, kv_head).
    pub fn total_rows(&self) -> usize {
        self.heads.iter().flatten().map(HeadCache::len).sum()
    }

    /// Stored rows per layer, summed over kv heads.
    pub fn rows_per_layer(&self) -> Vec<usize> {
        self.heads
            .iter()
            .map(|l| l.iter().map(HeadCache::len).sum())
            .collect()
    }

    pub fn max_position(&self) -> Option<usize> {
        self.heads
            .iter()
            .flatten()
            .filter_map(|h| h.positions.last().copied())
            .max()
    }
}

/// Post-softmax attention weights captured during prefill.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<T = f32> {
    /// `[layer][head]`, each `n_queries × n_keys`.
    pub maps: Vec<Vec<Matrix<T>>>,
    /// Query heads are grouped onto this many KV heads.
    pub n_kv_heads: usize,
    pub query_positions: Vec<usize>,
    pub key_positions: Vec<usize>,
}

impl<T: Real> AttentionRecord<T> {
    pub fn n_layers(&self) -> usize {
        self.maps.len()
    }

    pub fn n_heads(&self) -> usize {
        self.maps.first().map_or(0, Vec::len)
    }

    pub fn map(&self, layer: usize, head: usize) -> &Matrix<T> {
        &self.maps[layer][head]
    }
}

#[derive(Debug, Clone)]
pub struct Prefill<T = f32> {
    pub cache: KVCache<T>,
    pub record: Option<AttentionRecord<T>>,
    /// Logits over the real vocabulary at the final prompt position.
    pub logits: Vec<T>,
}

fn embed<T: Real>(w: &Weights<T>, id: TokenId) -> Result<Vec<T>> {
    let cfg = &w.config;
    if id as usize >= cfg.total_rows() {
        return Err(Error::UnknownToken {
            id,
            vocab: cfg.total_rows(),
        });
    }
    Ok(w.embedding.row(id as usize).to_vec())
}

/// Runs one token through every layer, appending its K/V to `cache`.
///
/// When `capture` is given, the attention row of every (layer, head) is
/// pushed onto it, over the rows the head's cache holds at that point.
fn forward_token<T: Real>(
    w: &Weights<T>,
    cache: &mut KVCache<T>,
    id: TokenId,
    position: usize,
    mut capture: Option<&mut Vec<Vec<T>>>,
) -> Result<Vec<T>> {
    let cfg = &w.config;
    let (d, hd) = (cfg.d_model, cfg.head_dim);
    let group = cfg.group_size();
    let scale = T::lit(1.0 / (hd as f64).sqrt());

    let mut x = embed(w, id)?;
    let mut a = vec![T::zero(); d];
    let mut q = vec![T::zero(); d];
    let mut k = vec![T::zero(); cfg.n_kv_heads * hd];
    let mut v = vec![T::zero(); cfg.n_kv_heads * hd];
    let mut o = vec![T::zero(); d];
    let mut proj = vec![T::zero(); d];
    let mut gate = vec![T::zero(); cfg.mlp_hidden];
    let mut up = vec![T::zero(); cfg.mlp_hidden];

    for (l, layer) in w.layers.iter().enumerate() {
        rms_norm_into(&x, &layer.attn_norm.data, NORM_EPS, &mut a);
        vec_mat(&a, &layer.wq, &mut q);
        vec_mat(&a, &layer.wk, &mut k);
        vec_mat(&a, &layer.wv, &mut v);
        for h in q.chunks_exact_mut(hd) {
            w.rope.apply(h, position, false);
        }
        for (g, (kh, vh)) in k.chunks_exact_mut(hd).zip(v.chunks_exact(hd)).enumerate() {
            w.rope.apply(kh, position, false);
            let hc = &mut cache.heads[l][g];
            hc.keys.push_row(kh);
            hc.values.push_row(vh);
            hc.positions.push(position);
        }
        for (h, (qh, oh)) in q.chunks_exact(hd).zip(o.chunks_exact_mut(hd)).enumerate() {
            let hc = &cache.heads[l][h / group];
            let mut p: Vec<T> = (0..hc.len())
                .map(|j| dot(qh, hc.keys.row(j)) * scale)
                .collect();
            softmax_in_place(&mut p);
            oh.iter_mut().for_each(|x| *x = T::zero());
            for (j, &pj) in p.iter().enumerate() {
                crate::math::axpy(pj, hc.values.row(j), oh);
            }
            if let Some(rows) = capture.as_deref_mut() {
                rows.push(p);
            }
        }
        vec_mat(&o, &layer.wo, &mut proj);
        for (xi, &pi) in x.iter_mut().zip(&proj) {
            *xi += pi;
        }

        rms_norm_into(&x, &layer.mlp_norm.data, NORM_EPS, &mut a);
        vec_mat(&a, &layer.w_gate, &mut gate);
        vec_mat(&a, &layer.w_up, &mut up);
        for (g, &u) in gate.iter_mut().zip(&up) {
            *g = silu(*g) * u;
        }
        vec_mat(&gate, &layer.w_down, &mut proj);
        for (xi, &pi) in x.iter_mut().zip(&proj) {
            *xi += pi;
        }
    }
    Ok(x)
}

/// Final norm plus tied output head over the real vocabulary.
pub fn logits_at<T: Real>(w: &Weights<T>, hidden: &[T]) -> Vec<T> {
    let mut f = vec![T::zero(); hidden.len()];
    rms_norm_into(hidden, &w.final_norm.data, NORM_EPS, &mut f);
    (0..w.config.vocab_size)
        .map(|v| dot(&f, w.embedding.row(v)))
        .collect()
}

/// Processes `seq` from position 0, returning its cache, optionally the full
/// causal attention record, and the logits at the last prompt position.
pub fn prefill<T: Real>(
    w: &Weights<T>,
    seq: &TokenSequence,
    capture_attn: bool,
) -> Result<Prefill<T>> {
    seq.validate()?;
    let cfg = &w.config;
    let n = seq.len();
    if n == 0 {
        return Err(Error::Sequence("empty sequence".into()));
    }
    if n > cfg.max_seq {
        return Err(Error::SequenceOverflow {
            len: n,
            max: cfg.max_seq,
        });
    }
    let p = seq.prompt_len();
    if p == 0 {
        return Err(Error::Sequence("sequence has no prompt".into()));
    }
    let mut cache = KVCache::new(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim);
    let mut maps: Vec<Vec<Matrix<T>>> = if capture_attn {
        (0..cfg.n_layers)
            .map(|_| (0..cfg.n_heads).map(|_| Matrix::zeros(n, n)).collect())
            .collect()
    } else {
        Vec::new()
    };
    let mut rows = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
    let mut logits = Vec::new();
    for (i, &id) in seq.ids.iter().enumerate() {
        rows.clear();
        let capture = if capture_attn { Some(&mut rows) } else { None };
        let hidden = forward_token(w, &mut cache, id, i, capture)?;
        if capture_attn {
            for (lh, row) in rows.iter().enumerate() {
                let m = &mut maps[lh / cfg.n_heads][lh % cfg.n_heads];
                m.row_mut(i)[..row.len()].copy_from_slice(row);
            }
        }
        if i + 1 == p {
            logits = logits_at(w, &hidden);
        }
    }
    let record = capture_attn.then(|| AttentionRecord {
        maps,
        n_kv_heads: cfg.n_kv_heads,
        query_positions: (0..n).collect(),
        key_positions: (0..n).collect(),
    });
    Ok(Prefill {
        cache,
        record,
        logits,
    })
}

/// Decodes one token at `position`, attending over the surviving cache
/// entries plus itself, and appends its K/V.
pub fn decode_step<T: Real>(
    w: &Weights<T>,
    cache: &mut KVCache<T>,
    token: TokenId,
    position: usize,
) -> Result<Vec<T>> {
    if let Some(last) = cache.max_position() {
        if position <= last {
            return Err(Error::PositionConflict { position, last });
        }
    }
    if position >= w.config.max_seq {
        return Err(Error::SequenceOverflow {
            len: position + 1,
            max: w.config.max_seq,
        });
    }
    let hidden = forward_token(w, cache, token, position, None)?;
    Ok(logits_at(w, &hidden))
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax<T: Real>(logits: &[T]) -> TokenId {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy decoding from `start_logits`; the first emitted token is placed at
/// `next_position`. Output includes `stop_id` when it is emitted.
pub fn greedy_generate<T: Real>(
    w: &Weights<T>,
    cache: &mut KVCache<T>,
    start_logits: &[T],
    next_position: usize,
    max_new: usize,
    stop_id: TokenId,
) -> Result<Vec<TokenId>> {
    if max_new == 0 {
        return Err(Error::Sequence("max_new must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(max_new);
    let mut tok = argmax(start_logits);
    let mut pos = next_position;
    loop {
        out.push(tok);
        if tok == stop_id || out.len() == max_new {
            return Ok(out);
        }
        let logits = decode_step(w, cache, tok, pos)?;
        pos += 1;
        tok = argmax(&logits);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use rand::{Rng, SeedableRng};

    fn tiny(n_kv_heads: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            n_soft: 3,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads,
            head_dim: 4,
            max_seq: 48,
            rope_theta: 10000.0,
            mlp_hidden: 20,
        }
    }

    fn random_ids(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<TokenId> {
        (0..n)
            .map(|_| rng.random_range(0..vocab as TokenId))
            .collect()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let w = init_model(&tiny(2), 1).unwrap();
        let out = prefill(&w, &TokenSequence::prompt(vec![5]), true).unwrap();
        let rec = out.record.unwrap();
        for l in 0..2 {
            for h in 0..4 {
                assert_eq!(rec.map(l, h).data, vec![1.0]);
            }
        }
    }

    #[test]
    fn cache_positions_cover_input() {
        let w = init_model(&tiny(2), 1).unwrap();
        let out = prefill(&w, &TokenSequence::prompt(vec![1, 2, 3, 4, 5]), false).unwrap();
        for h in out.cache.heads.iter().flatten() {
            assert_eq!(h.positions, vec![0, 1, 2, 3, 4]);
            assert_eq!(h.keys.rows, 5);
        }
        assert_eq!(out.logits.len(), 40);
    }

    #[test]
    fn record_is_causal_and_row_stochastic() {
        let w = init_model(&tiny(2), 4).unwrap();
        let seq = TokenSequence::with_soft(&[1, 7, 3, 9, 2, 2, 8], &w.config);
        let rec = prefill(&w, &seq, true).unwrap().record.unwrap();
        for m in rec.maps.iter().flatten() {
            for q in 0..m.rows {
                let s: f64 = m.row(q).iter().map(|&x| x as f64).sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!(m.row(q)[q + 1..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn prefill_matches_incremental_decode() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for case in 0..10 {
            let w = init_model(&tiny(2), case).unwrap();
            let n = rng.random_range(2..20);
            let ids = random_ids(&mut rng, n, 40);
            let full = prefill(&w, &TokenSequence::prompt(ids.clone()), false).unwrap();
            let first = prefill(&w, &TokenSequence::prompt(ids[..1].to_vec()), false).unwrap();
            let mut cache = first.cache;
            let mut logits = first.logits;
            for (i, &id) in ids.iter().enumerate().skip(1) {
                logits = decode_step(&w, &mut cache, id, i).unwrap();
            }
            for (a, b) in full.logits.iter().zip(&logits) {
                assert!((a - b).abs() < 1e-4);
            }
            assert_eq!(cache, full.cache);
        }
    }

    #[test]
    fn mha_equals_gqa_with_duplicated_kv_heads() {
        // With one query head per kv head the grouped path must reduce to plain MHA.
        let mut gqa_cfg = tiny(2);
        gqa_cfg.n_kv_heads = 4;
        let w = init_model(&gqa_cfg, 9).unwrap();
        let ids = vec![3, 1, 4, 1, 5, 9, 2, 6];
        let out = prefill(&w, &TokenSequence::prompt(ids.clone()), true).unwrap();
        // Reference: per-head attention written out without grouping.
        let w64 = w.cast::<f64>();
        let reference = crate::model::reference::naive_logits(&w64, &ids);
        for (a, b) in out.logits.iter().zip(&reference) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }

    #[test]
    fn decode_rejects_position_conflicts() {
        let w = init_model(&tiny(2), 1).unwrap();
        let mut out = prefill(&w, &TokenSequence::prompt(vec![1, 2, 3]), false).unwrap();
        assert!(matches!(
            decode_step(&w, &mut out.cache, 4, 2),
            Err(Error::PositionConflict { .. })
        ));
        assert!(decode_step(&w, &mut out.cache, 4, 3).is_ok());
    }

    #[test]
    fn prefill_errors() {
        let w = init_model(&tiny(2), 1).unwrap();
        let long = TokenSequence::prompt(vec![1; 49]);
        assert!(matches!(
            prefill(&w, &long, false),
            Err(Error::SequenceOverflow { .. })
        ));
        let bad = TokenSequence::prompt(vec![1, 99]);
        assert!(matches!(
            prefill(&w, &bad, false),
            Err(Error::UnknownToken { .. })
        ));
    }

    #[test]
    fn greedy_generate_basics() {
        let w = init_model(&tiny(2), 2).unwrap();
        let out = prefill(&w, &TokenSequence::prompt(vec![1, 2, 3]), false).unwrap();
        let first = argmax(&out.logits);
        let mut c = out.cache.clone();
        assert_eq!(
            greedy_generate(&w, &mut c, &out.logits, 3, 1, 0).unwrap(),
            vec![first]
        );
        let mut c = out.cache.clone();
        assert_eq!(
            greedy_generate(&w, &mut c, &out.logits, 3, 10, first).unwrap(),
            vec![first]
        );
        let mut c1 = out.cache.clone();
        let mut c2 = out.cache.clone();
        let a = greedy_generate(&w, &mut c1, &out.logits, 3, 20, 9999).unwrap();
        let b = greedy_generate(&w, &mut c2, &out.logits, 3, 20, 9999).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn greedy_matches_straight_line_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for case in 0..5 {
            let w = init_model(&tiny(2), 100 + case).unwrap();
            let ids = random_ids(&mut rng, 6, 40);
            let out = prefill(&w, &TokenSequence::prompt(ids.clone()), false).unwrap();
            let mut cache = out.cache;
            let got = greedy_generate(&w, &mut cache, &out.logits, ids.len(), 8, 9999).unwrap();

            let w64 = w.cast::<f64>();
            let mut seq = ids.clone();
            let mut want = Vec::new();
            for _ in 0..8 {
                let logits = crate::model::reference::naive_logits(&w64, &seq);
                let next = argmax(&logits);
                want.push(next);
                seq.push(next);
            }
            assert_eq!(got, want, "case {case}");
        }
    }
}
