//! Shared helpers for integration tests, including a plain-loop ViT forward
//! pass written independently of the graph code.

#![allow(dead_code)]

pub mod ops;

use histovit::rng::SplitMix64;
use histovit::vit::{Linear, ViTParams};
use histovit::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn random_tensor(shape: &[usize], rng: &mut SplitMix64, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * (2.0 * rng.next_f64() - 1.0))
}

fn to_mat(t: &Tensor) -> Mat {
    let s = t.shape();
    let cols = *s.last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn dense(x: &Mat, l: &Linear) -> Mat {
    let mut y = matmul(x, &to_mat(&l.weight));
    for row in &mut y {
        for (v, b) in row.iter_mut().zip(l.bias.data()) {
            *v += b;
        }
    }
    y
}

fn norm(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * w.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn softmax_row(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub struct RefOutput {
    pub logits: Vec<f64>,
    /// `[block][head][query][key]`
    pub attention: Vec<Vec<Mat>>,
}

/// Eval-mode forward. When `replace` is `Some((b, a))`, block `b` uses the
/// given per-head attention matrices instead of its own softmax output.
pub fn reference_forward(p: &ViTParams, image: &Tensor, replace: Option<(usize, &[Mat])>) -> RefOutput {
    let cfg = &p.config;
    let (c, s, ps) = (cfg.channels, cfg.image_size, cfg.patch_size);
    let grid = s / ps;
    let px = image.data();
    let mut patches = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let mut row = Vec::new();
            for ch in 0..c {
                for y in 0..ps {
                    for x in 0..ps {
                        row.push(px[ch * s * s + (gy * ps + y) * s + gx * ps + x]);
                    }
                }
            }
            patches.push(row);
        }
    }
    let mut x = vec![p.cls_token.data().to_vec()];
    x.extend(dense(&patches, &p.patch_embed));
    let pos = to_mat(&p.pos_embed);
    for (row, pr) in x.iter_mut().zip(&pos) {
        for (v, q) in row.iter_mut().zip(pr) {
            *v += q;
        }
    }

    let d = cfg.embed_dim;
    let dh = d / cfg.heads;
    let t = x.len();
    let mut attention = Vec::new();
    for (bi, b) in p.blocks.iter().enumerate() {
        let h = norm(&x, &b.norm1.weight, &b.norm1.bias);
        let qkv = dense(&h, &b.qkv);
        let mut concat = vec![vec![0.0; d]; t];
        let mut block_att = Vec::new();
        for head in 0..cfg.heads {
            let col = |i: usize, off: usize, j: usize| qkv[i][off + head * dh + j];
            let mut a = vec![vec![0.0; t]; t];
            for i in 0..t {
                let mut scores = vec![0.0; t];
                for (k, sc) in scores.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for j in 0..dh {
                        dot += col(i, 0, j) * col(k, d, j);
                    }
                    *sc = dot / (dh as f64).sqrt();
                }
                a[i] = softmax_row(&scores);
            }
            if let Some((rb, ra)) = replace {
                if rb == bi {
                    a = ra[head].clone();
                }
            }
            for i in 0..t {
                for j in 0..dh {
                    let mut acc = 0.0;
                    for k in 0..t {
                        acc += a[i][k] * col(k, 2 * d, j);
                    }
                    concat[i][head * dh + j] = acc;
                }
            }
            block_att.push(a);
        }
        attention.push(block_att);
        let proj = dense(&concat, &b.proj);
        for (r, pr) in x.iter_mut().zip(&proj) {
            r.iter_mut().zip(pr).for_each(|(v, q)| *v += q);
        }
        let h = norm(&x, &b.norm2.weight, &b.norm2.bias);
        let mut m = dense(&h, &b.fc1);
        m.iter_mut().flatten().for_each(|v| *v = gelu(*v));
        let m = dense(&m, &b.fc2);
        for (r, pr) in x.iter_mut().zip(&m) {
            r.iter_mut().zip(pr).for_each(|(v, q)| *v += q);
        }
    }
    let x = norm(&x, &p.norm.weight, &p.norm.bias);
    let mut h = vec![x[0].clone()];
    if let Some(hidden) = &p.head.hidden {
        h = dense(&h, hidden);
        h[0].iter_mut().for_each(|v| *v = gelu(*v));
    }
    let logits = dense(&h, &p.head.out).remove(0);
    RefOutput { logits, attention }
}

/// Head-averaged clamped `A ⊙ ∂logit/∂A` for `block`, with the gradient
/// taken by a five-point central stencil on the reference forward.
pub fn reference_weighted_attention(p: &ViTParams, image: &Tensor, block: usize, class: usize, step: f64) -> Mat {
    let base = reference_forward(p, image, None).attention;
    let a0 = &base[block];
    let t = a0[0].len();
    let heads = a0.len();
    let logit_at = |h: usize, i: usize, j: usize, delta: f64| {
        let mut a = a0.clone();
        a[h][i][j] += delta;
        reference_forward(p, image, Some((block, &a))).logits[class]
    };
    let mut out = vec![vec![0.0; t]; t];
    for h in 0..heads {
        for i in 0..t {
            for j in 0..t {
                let g = (-logit_at(h, i, j, 2.0 * step) + 8.0 * logit_at(h, i, j, step)
                    - 8.0 * logit_at(h, i, j, -step)
                    + logit_at(h, i, j, -2.0 * step))
                    / (12.0 * step);
                out[i][j] += (a0[h][i][j] * g).max(0.0) / heads as f64;
            }
        }
    }
    out
}

/// Tiny-model input image in the normalized `[-1, 1]` range.
pub fn random_image(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    random_tensor(shape, &mut rng, 1.0)
}

/// Params with entries of order 0.3 (layer-norm gains near 1), so the
/// network is well away from its nearly linear initial regime.
pub fn lively_params(cfg: &histovit::ViTConfig, seed: u64) -> ViTParams {
    let mut p = histovit::vit::init_params(cfg, seed).unwrap();
    let mut rng = SplitMix64::new(seed ^ 0x5EED);
    let names = p.names();
    for (name, t) in names.iter().zip(p.tensors_mut()) {
        let gain = name.contains("norm") && name.ends_with("weight");
        for v in t.data_mut() {
            let r = 0.3 * (2.0 * rng.next_f64() - 1.0);
            *v = if gain { 1.0 + r } else { r };
        }
    }
    p
}
