//! Straight-line reference forward used only by tests: recomputes the whole
//! sequence from scratch, no cache, explicit loops.

use super::{TokenId, Weights, NORM_EPS};
use crate::math::{rms_norm, rope_rotate};

fn matvec(x: &[f64], w: &crate::math::Matrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; w.cols];
    for j in 0..w.cols {
        for i in 0..w.rows {
            out[j] += x[i] * w.data[i * w.cols + j];
        }
    }
    out
}

/// Logits at the last position of `ids`.
pub fn naive_logits(w: &Weights<f64>, ids: &[TokenId]) -> Vec<f64> {
    let cfg = &w.config;
    let hd = cfg.head_dim;
    let n = ids.len();
    let mut xs: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| w.embedding.row(id as usize).to_vec())
        .collect();
    for layer in &w.layers {
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (pos, x) in xs.iter().enumerate() {
            let a = rms_norm(x, &layer.attn_norm.data, NORM_EPS).unwrap();
            let q = matvec(&a, &layer.wq);
            let k = matvec(&a, &layer.wk);
            qs.push(
                q.chunks(hd)
                    .map(|c| rope_rotate(c, pos, cfg.rope_theta).unwrap())
                    .collect::<Vec<_>>(),
            );
            ks.push(
                k.chunks(hd)
                    .map(|c| rope_rotate(c, pos, cfg.rope_theta).unwrap())
                    .collect::<Vec<_>>(),
            );
            vs.push(
                matvec(&a, &layer.wv)
                    .chunks(hd)
                    .map(|c| c.to_vec())
                    .collect::<Vec<_>>(),
            );
        }
        let mut next = Vec::new();
        for i in 0..n {
            let mut o = Vec::new();
            for h in 0..cfg.n_heads {
                let g = h * cfg.n_kv_heads / cfg.n_heads;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        qs[i][h]
                            .iter()
                            .zip(&ks[j][g])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut oh = vec![0.0; hd];
                for j in 0..=i {
                    for t in 0..hd {
                        oh[t] += e[j] / z * vs[j][g][t];
                    }
                }
                o.extend(oh);
            }
            let attn = matvec(&o, &layer.wo);
            let x: Vec<f64> = xs[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let b = rms_norm(&x, &layer.mlp_norm.data, NORM_EPS).unwrap();
            let gate = matvec(&b, &layer.w_gate);
            let up = matvec(&b, &layer.w_up);
            let hmid: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let y = matvec(&hmid, &layer.w_down);
            next.push(x.iter().zip(&y).map(|(a, b)| a + b).collect());
        }
        xs = next;
    }
    let f = rms_norm(&xs[n - 1], &w.final_norm.data, NORM_EPS).unwrap();
    (0..cfg.vocab_size)
        .map(|v| f.iter().zip(w.embedding.row(v)).map(|(a, b)| a * b).sum())
        .collect()
}
