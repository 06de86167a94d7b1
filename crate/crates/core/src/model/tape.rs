//! Forward pass that keeps its activations, and the matching hand-written
//! backward pass.
//!
//! The forward runs a chunk of `c` new rows at positions `start..start+c`
//! on top of an optional prefix cache holding positions `0..start`. Prefix
//! keys and values are constants: no gradient flows into them. With an
//! empty prefix this is an ordinary full-sequence training forward; with
//! a prompt prefix and a soft block as the chunk it is exactly what the
//! probe trainer differentiates.

use super::{KVCache, Weights, NORM_EPS};
use crate::error::{Error, Result};
use crate::math::{
    axpy, dot, mat_vec, outer_acc, rms_norm_into, silu, softmax_in_place, vec_mat, Matrix, Real,
};

#[derive(Debug, Clone)]
pub struct LayerTape<T> {
    x_in: Matrix<T>,
    r_attn: Vec<T>,
    a: Matrix<T>,
    /// Rotary-encoded queries, `c × (n_heads·head_dim)`.
    q: Matrix<T>,
    /// Per kv head, prefix rows followed by chunk rows.
    keys: Vec<Matrix<T>>,
    values: Vec<Matrix<T>>,
    /// Per head, `c × (start + c)`; entries right of the causal edge are zero.
    pub probs: Vec<Matrix<T>>,
    o: Matrix<T>,
    x_mid: Matrix<T>,
    r_mlp: Vec<T>,
    b: Matrix<T>,
    gate: Matrix<T>,
    up: Matrix<T>,
    hmid: Matrix<T>,
}

#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub start: usize,
    pub rows: usize,
    pub layers: Vec<LayerTape<T>>,
    x_out: Matrix<T>,
    r_final: Vec<T>,
    f: Matrix<T>,
}

impl<T: Real> Tape<T> {
    /// Logits over the real vocabulary for chunk row `row`.
    pub fn logits(&self, w: &Weights<T>, row: usize) -> Vec<T> {
        let f = self.f.row(row);
        (0..w.config.vocab_size)
            .map(|v| dot(f, w.embedding.row(v)))
            .collect()
    }

    /// Attention probabilities of chunk row `row` for (layer, head), over all keys.
    pub fn probs(&self, layer: usize, head: usize, row: usize) -> &[T] {
        let m = &self.layers[layer].probs[head];
        &m.row(row)[..self.start + row + 1]
    }
}

fn check_prefix<T: Real>(w: &Weights<T>, prefix: &KVCache<T>) -> Result<usize> {
    let cfg = &w.config;
    if prefix.heads.len() != cfg.n_layers || prefix.heads.iter().any(|l| l.len() != cfg.n_kv_heads)
    {
        return Err(Error::Shape("prefix cache does not match model".into()));
    }
    let start = prefix.heads[0][0].len();
    for h in prefix.heads.iter().flatten() {
        if h.len() != start || h.positions.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::Shape(
                "prefix cache must hold contiguous positions 0..start".into(),
            ));
        }
    }
    Ok(start)
}

/// Runs `inputs` (chunk embeddings, `c × d_model`) through the model after `prefix`.
#[allow(clippy::needless_range_loop)]
pub fn tape_forward<T: Real>(
    w: &Weights<T>,
    prefix: Option<&KVCache<T>>,
    inputs: &Matrix<T>,
) -> Result<Tape<T>> {
    let cfg = &w.config;
    let (d, hd, hidden) = (cfg.d_model, cfg.head_dim, cfg.mlp_hidden);
    if inputs.cols != d {
        return Err(Error::Shape(format!(
            "chunk width {} vs d_model {d}",
            inputs.cols
        )));
    }
    let start = match prefix {
        Some(p) => check_prefix(w, p)?,
        None => 0,
    };
    let c = inputs.rows;
    if start + c > cfg.max_seq {
        return Err(Error::SequenceOverflow {
            len: start + c,
            max: cfg.max_seq,
        });
    }
    let n_keys = start + c;
    let group = cfg.group_size();
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let kvd = cfg.n_kv_heads * hd;

    let mut x = inputs.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut kbuf = vec![T::zero(); kvd];
    let mut vbuf = vec![T::zero(); kvd];
    let mut proj = vec![T::zero(); d];

    for (l, lw) in w.layers.iter().enumerate() {
        let x_in = x.clone();
        let mut a = Matrix::zeros(c, d);
        let mut r_attn = Vec::with_capacity(c);
        let mut q = Matrix::zeros(c, d);
        let mut keys: Vec<Matrix<T>> = Vec::with_capacity(cfg.n_kv_heads);
        let mut values: Vec<Matrix<T>> = Vec::with_capacity(cfg.n_kv_heads);
        for g in 0..cfg.n_kv_heads {
            let (mut km, mut vm) = match prefix {
                Some(p) => (p.heads[l][g].keys.clone(), p.heads[l][g].values.clone()),
                None => (Matrix::zeros(0, hd), Matrix::zeros(0, hd)),
            };
            km.data.reserve(c * hd);
            vm.data.reserve(c * hd);
            keys.push(km);
            values.push(vm);
        }
        for i in 0..c {
            let pos = start + i;
            r_attn.push(rms_norm_into(
                x.row(i),
                &lw.attn_norm.data,
                NORM_EPS,
                a.row_mut(i),
            ));
            vec_mat(a.row(i), &lw.wq, q.row_mut(i));
            for qh in q.row_mut(i).chunks_exact_mut(hd) {
                w.rope.apply(qh, pos, false);
            }
            vec_mat(a.row(i), &lw.wk, &mut kbuf);
            vec_mat(a.row(i), &lw.wv, &mut vbuf);
            for g in 0..cfg.n_kv_heads {
                let kh = &mut kbuf[g * hd..(g + 1) * hd];
                w.rope.apply(kh, pos, false);
                keys[g].push_row(kh);
                values[g].push_row(&vbuf[g * hd..(g + 1) * hd]);
            }
        }

        let mut probs: Vec<Matrix<T>> =
            (0..cfg.n_heads).map(|_| Matrix::zeros(c, n_keys)).collect();
        let mut o = Matrix::zeros(c, d);
        for i in 0..c {
            let visible = start + i + 1;
            for h in 0..cfg.n_heads {
                let g = h / group;
                let qh = &q.row(i)[h * hd..(h + 1) * hd];
                let p = &mut probs[h].row_mut(i)[..visible];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qh, keys[g].row(j)) * scale;
                }
                softmax_in_place(p);
                let oh = &mut o.row_mut(i)[h * hd..(h + 1) * hd];
                for (j, &pj) in probs[h].row(i)[..visible].iter().enumerate() {
                    axpy(pj, values[g].row(j), oh);
                }
            }
        }

        let mut x_mid = x_in.clone();
        let mut b = Matrix::zeros(c, d);
        let mut r_mlp = Vec::with_capacity(c);
        let mut gate = Matrix::zeros(c, hidden);
        let mut up = Matrix::zeros(c, hidden);
        let mut hmid = Matrix::zeros(c, hidden);
        for i in 0..c {
            vec_mat(o.row(i), &lw.wo, &mut proj);
            for (xv, &pv) in x_mid.row_mut(i).iter_mut().zip(&proj) {
                *xv += pv;
            }
            r_mlp.push(rms_norm_into(
                x_mid.row(i),
                &lw.mlp_norm.data,
                NORM_EPS,
                b.row_mut(i),
            ));
            vec_mat(b.row(i), &lw.w_gate, gate.row_mut(i));
            vec_mat(b.row(i), &lw.w_up, up.row_mut(i));
            for ((hv, &gv), &uv) in hmid.row_mut(i).iter_mut().zip(gate.row(i)).zip(up.row(i)) {
                *hv = silu(gv) * uv;
            }
            vec_mat(hmid.row(i), &lw.w_down, &mut proj);
            let xr = x.row_mut(i);
            xr.copy_from_slice(x_mid.row(i));
            for (xv, &pv) in xr.iter_mut().zip(&proj) {
                *xv += pv;
            }
        }
        layers.push(LayerTape {
            x_in,
            r_attn,
            a,
            q,
            keys,
            values,
            probs,
            o,
            x_mid,
            r_mlp,
            b,
            gate,
            up,
            hmid,
        });
    }

    let mut f = Matrix::zeros(c, d);
    let mut r_final = Vec::with_capacity(c);
    for i in 0..c {
        r_final.push(rms_norm_into(
            x.row(i),
            &w.final_norm.data,
            NORM_EPS,
            f.row_mut(i),
        ));
    }
    Ok(Tape {
        start,
        rows: c,
        layers,
        x_out: x,
        r_final,
        f,
    })
}

/// Accumulates the RMSNorm input gradient into `dx` and the gain gradient into `dg`.
fn rms_norm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    r: T,
    dy: &[T],
    dx: &mut [T],
    dg: Option<&mut [T]>,
) {
    let n = T::lit(x.len() as f64);
    let inv = T::one() / r;
    let mut s = T::zero();
    for ((&dyk, &gk), &xk) in dy.iter().zip(gain).zip(x) {
        s += dyk * gk * xk;
    }
    let coef = s * inv * inv * inv / n;
    for (((dxk, &dyk), &gk), &xk) in dx.iter_mut().zip(dy).zip(gain).zip(x) {
        *dxk += gk * dyk * inv - xk * coef;
    }
    if let Some(dg) = dg {
        for ((dgk, &dyk), &xk) in dg.iter_mut().zip(dy).zip(x) {
            *dgk += dyk * xk * inv;
        }
    }
}

/// Upstream gradient for [`tape_backward`].
#[derive(Debug, Default)]
pub struct TapeGrad<'a, T> {
    /// `(chunk row, dL/dlogits)` pairs.
    pub logits: &'a [(usize, Vec<T>)],
    /// dL/dprobs indexed `[layer][head]`, each `c × (start + c)`.
    pub probs: Option<&'a [Vec<Matrix<T>>]>,
}

/// Backpropagates through `tape`. Returns dL/dinputs (`c × d_model`) and,
/// when `grads` is given, accumulates parameter gradients into it. The
/// embedding gradient there covers only the tied output head; input rows
/// are the caller's to scatter.
pub fn tape_backward<T: Real>(
    w: &Weights<T>,
    tape: &Tape<T>,
    upstream: &TapeGrad<'_, T>,
    mut grads: Option<&mut Weights<T>>,
) -> Matrix<T> {
    let cfg = &w.config;
    let (d, hd) = (cfg.d_model, cfg.head_dim);
    let c = tape.rows;
    let start = tape.start;
    let group = cfg.group_size();
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let kvd = cfg.n_kv_heads * hd;

    let mut dx = Matrix::zeros(c, d);
    let mut df = vec![T::zero(); d];
    for (row, dl) in upstream.logits {
        df.iter_mut().for_each(|v| *v = T::zero());
        for (v, &g) in dl.iter().enumerate() {
            if g != T::zero() {
                axpy(g, w.embedding.row(v), &mut df);
                if let Some(gr) = grads.as_deref_mut() {
                    axpy(g, tape.f.row(*row), gr.embedding.row_mut(v));
                }
            }
        }
        let dg = grads.as_deref_mut().map(|g| &mut g.final_norm.data[..]);
        rms_norm_backward(
            tape.x_out.row(*row),
            &w.final_norm.data,
            tape.r_final[*row],
            &df,
            dx.row_mut(*row),
            dg,
        );
    }

    let mut dh = vec![T::zero(); cfg.mlp_hidden];
    let mut dgate = vec![T::zero(); cfg.mlp_hidden];
    let mut dup = vec![T::zero(); cfg.mlp_hidden];
    let mut db = vec![T::zero(); d];
    let mut tmp = vec![T::zero(); d];
    let mut dy = vec![T::zero(); d];

    for l in (0..cfg.n_layers).rev() {
        let lw = &w.layers[l];
        let lt = &tape.layers[l];

        // Gated MLP, residual kept in dx.
        for i in 0..c {
            dy.copy_from_slice(dx.row(i));
            mat_vec(&lw.w_down, &dy, &mut dh);
            for k in 0..cfg.mlp_hidden {
                let gk = lt.gate.get(i, k);
                let s = T::one() / (T::one() + (-gk).exp());
                let silu_k = gk * s;
                dgate[k] = dh[k] * lt.up.get(i, k) * s * (T::one() + gk * (T::one() - s));
                dup[k] = dh[k] * silu_k;
            }
            mat_vec(&lw.w_gate, &dgate, &mut db);
            mat_vec(&lw.w_up, &dup, &mut tmp);
            for (a, &t) in db.iter_mut().zip(&tmp) {
                *a += t;
            }
            let dg = match grads.as_deref_mut() {
                Some(g) => {
                    let gl = &mut g.layers[l];
                    outer_acc(lt.hmid.row(i), &dy, &mut gl.w_down);
                    outer_acc(lt.b.row(i), &dgate, &mut gl.w_gate);
                    outer_acc(lt.b.row(i), &dup, &mut gl.w_up);
                    Some(&mut gl.mlp_norm.data[..])
                }
                None => None,
            };
            rms_norm_backward(
                lt.x_mid.row(i),
                &lw.mlp_norm.data,
                lt.r_mlp[i],
                &db,
                dx.row_mut(i),
                dg,
            );
        }

        // Attention.
        let mut dq = Matrix::zeros(c, d);
        let mut dk = Matrix::zeros(c, kvd);
        let mut dv = Matrix::zeros(c, kvd);
        let mut d_o = vec![T::zero(); d];
        let mut dp: Vec<T> = Vec::with_capacity(start + c);
        for i in 0..c {
            let dattn = dx.row(i);
            mat_vec(&lw.wo, dattn, &mut d_o);
            if let Some(g) = grads.as_deref_mut() {
                outer_acc(lt.o.row(i), dattn, &mut g.layers[l].wo);
            }
            let visible = start + i + 1;
            for h in 0..cfg.n_heads {
                let g = h / group;
                let doh = &d_o[h * hd..(h + 1) * hd];
                let p = &lt.probs[h].row(i)[..visible];
                dp.clear();
                for j in 0..visible {
                    dp.push(dot(doh, lt.values[g].row(j)));
                }
                if let Some(ext) = upstream.probs {
                    for (dpj, &e) in dp.iter_mut().zip(&ext[l][h].row(i)[..visible]) {
                        *dpj += e;
                    }
                }
                let mut inner = T::zero();
                for (&pj, &dpj) in p.iter().zip(&dp) {
                    inner += pj * dpj;
                }
                let qh = &lt.q.row(i)[h * hd..(h + 1) * hd];
                for j in 0..visible {
                    let ds = p[j] * (dp[j] - inner) * scale;
                    if ds != T::zero() {
                        axpy(
                            ds,
                            lt.keys[g].row(j),
                            &mut dq.row_mut(i)[h * hd..(h + 1) * hd],
                        );
                        if j >= start {
                            axpy(ds, qh, &mut dk.row_mut(j - start)[g * hd..(g + 1) * hd]);
                        }
                    }
                    if j >= start && p[j] != T::zero() {
                        axpy(p[j], doh, &mut dv.row_mut(j - start)[g * hd..(g + 1) * hd]);
                    }
                }
            }
        }

        for i in 0..c {
            let pos = start + i;
            for qh in dq.row_mut(i).chunks_exact_mut(hd) {
                w.rope.apply(qh, pos, true);
            }
            for kh in dk.row_mut(i).chunks_exact_mut(hd) {
                w.rope.apply(kh, pos, true);
            }
            mat_vec(&lw.wq, dq.row(i), &mut db);
            let mut kv_tmp = vec![T::zero(); d];
            mat_vec(&lw.wk, dk.row(i), &mut kv_tmp);
            for (a, &t) in db.iter_mut().zip(&kv_tmp) {
                *a += t;
            }
            mat_vec(&lw.wv, dv.row(i), &mut kv_tmp);
            for (a, &t) in db.iter_mut().zip(&kv_tmp) {
                *a += t;
            }
            let dg = match grads.as_deref_mut() {
                Some(g) => {
                    let gl = &mut g.layers[l];
                    outer_acc(lt.a.row(i), dq.row(i), &mut gl.wq);
                    outer_acc(lt.a.row(i), dk.row(i), &mut gl.wk);
                    outer_acc(lt.a.row(i), dv.row(i), &mut gl.wv);
                    Some(&mut gl.attn_norm.data[..])
                }
                None => None,
            };
            rms_norm_backward(
                lt.x_in.row(i),
                &lw.attn_norm.data,
                lt.r_attn[i],
                &db,
                dx.row_mut(i),
                dg,
            );
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, prefill, ModelConfig, TokenSequence};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 30,
            n_soft: 3,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            max_seq: 32,
            rope_theta: 10000.0,
            mlp_hidden: 12,
        }
    }

    fn embed_rows(w: &Weights<f64>, ids: &[u32]) -> Matrix<f64> {
        let mut m = Matrix::zeros(0, w.config.d_model);
        for &id in ids {
            m.push_row(w.embedding.row(id as usize));
        }
        m
    }

    #[test]
    fn tape_forward_matches_prefill() {
        let w = init_model(&tiny(), 3).unwrap().cast::<f64>();
        let ids = [1u32, 5, 9, 2, 7, 7, 3];
        let full = prefill(&w, &TokenSequence::prompt(ids.to_vec()), true).unwrap();
        let rec = full.record.unwrap();

        let tape = tape_forward(&w, None, &embed_rows(&w, &ids)).unwrap();
        let logits = tape.logits(&w, ids.len() - 1);
        for (a, b) in logits.iter().zip(&full.logits) {
            assert!((a - b).abs() < 1e-12);
        }
        // Chunked: prefix of 4 from prefill, then 3 rows on tape.
        let pre = prefill(&w, &TokenSequence::prompt(ids[..4].to_vec()), false).unwrap();
        let tape = tape_forward(&w, Some(&pre.cache), &embed_rows(&w, &ids[4..])).unwrap();
        for l in 0..2 {
            for h in 0..4 {
                for i in 0..3 {
                    let want = &rec.map(l, h).row(4 + i)[..5 + i];
                    for (a, b) in tape.probs(l, h, i).iter().zip(want) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    /// Scalar objective mixing logits and attention probabilities so every
    /// parameter path is exercised.
    fn objective(w: &Weights<f64>, ids: &[u32], coef: &[f64]) -> f64 {
        let tape = tape_forward(w, None, &embed_rows(w, ids)).unwrap();
        let mut s = 0.0;
        for (k, v) in tape.logits(w, ids.len() - 1).iter().enumerate() {
            s += coef[k % coef.len()] * v;
        }
        for l in 0..w.config.n_layers {
            for h in 0..w.config.n_heads {
                for i in 0..ids.len() {
                    for (j, p) in tape.probs(l, h, i).iter().enumerate() {
                        s += coef[(l * 7 + h * 5 + i * 3 + j) % coef.len()] * p * p;
                    }
                }
            }
        }
        s
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let w = init_model(&tiny(), 8).unwrap().cast::<f64>();
        let cfg = w.config.clone();
        let ids = [3u32, 1, 4, 1, 5, 9];
        let coef: Vec<f64> = (0..13)
            .map(|k| ((k * 37 % 11) as f64 - 5.0) / 5.0)
            .collect();

        let tape = tape_forward(&w, None, &embed_rows(&w, &ids)).unwrap();
        let dlogits = vec![(
            ids.len() - 1,
            (0..cfg.vocab_size)
                .map(|k| coef[k % coef.len()])
                .collect::<Vec<_>>(),
        )];
        let mut dprobs: Vec<Vec<Matrix<f64>>> = Vec::new();
        for l in 0..cfg.n_layers {
            let mut per_head = Vec::new();
            for h in 0..cfg.n_heads {
                let mut m = Matrix::zeros(ids.len(), ids.len());
                for i in 0..ids.len() {
                    for (j, p) in tape.probs(l, h, i).iter().enumerate() {
                        m.row_mut(i)[j] = 2.0 * coef[(l * 7 + h * 5 + i * 3 + j) % coef.len()] * p;
                    }
                }
                per_head.push(m);
            }
            dprobs.push(per_head);
        }
        let mut grads = Weights::<f64>::zeros(&cfg).unwrap();
        let upstream = TapeGrad {
            logits: &dlogits,
            probs: Some(&dprobs),
        };
        let dinputs = tape_backward(&w, &tape, &upstream, Some(&mut grads));
        for (i, &id) in ids.iter().enumerate() {
            axpy(1.0, dinputs.row(i), grads.embedding.row_mut(id as usize));
        }

        let h = 1e-5;
        let names: Vec<String> = w.tensors().into_iter().map(|(n, _)| n).collect();
        for (t, name) in names.iter().enumerate() {
            let len = w.tensors()[t].1.data.len();
            for probe in 0..4 {
                let idx = (probe * 7919 + t * 31) % len;
                let mut wp = w.clone();
                wp.tensors_mut()[t].1.data[idx] += h;
                let mut wm = w.clone();
                wm.tensors_mut()[t].1.data[idx] -= h;
                let fd = (objective(&wp, &ids, &coef) - objective(&wm, &ids, &coef)) / (2.0 * h);
                let an = grads.tensors()[t].1.data[idx];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "{name}[{idx}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}
