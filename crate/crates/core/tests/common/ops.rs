//! Per-op gradient-check cases shared by the autodiff and acceptance suites.

use histovit::rng::SplitMix64;
use histovit::tensor::Result;
use histovit::{Graph, Tensor, Var};

use super::random_tensor;

/// `sum(y ⊙ w)` for a fixed random `w`, so every output entry matters.
pub fn weighted(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::new(seed ^ 0xABCD);
    let w = random_tensor(g.shape(y), &mut rng, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub type Case = (&'static str, Vec<usize>, Box<dyn Fn(&mut Graph, Var, u64) -> Result<Var>>);

pub fn cases(rng: &mut SplitMix64) -> Vec<Case> {
    let r = 1 + rng.below(4);
    let c = 2 + rng.below(5);
    let k = 1 + rng.below(4);
    let aux = random_tensor(&[c, k], rng, 1.0);
    let aux_left = random_tensor(&[k, r], rng, 1.0);
    let other = random_tensor(&[r, c], rng, 1.0);
    let bias = random_tensor(&[c], rng, 1.0);
    let mask: Vec<f64> = (0..r * c).map(|_| if rng.next_f64() < 0.5 { 0.0 } else { 2.0 }).collect();
    let labels: Vec<usize> = (0..r).map(|_| rng.below(c)).collect();
    let sel = rng.below(r * c);
    let row = rng.below(r);
    let start = rng.below(c - 1);
    let perm: Vec<usize> = {
        let mut p: Vec<usize> = (0..r * c).collect();
        rng.shuffle(&mut p);
        p.into_iter().chain([0, 0]).collect()
    };
    let gamma = random_tensor(&[c], rng, 1.0);
    vec![
        ("matmul_lhs", vec![r, c], Box::new(move |g, x, s| {
            let b = g.constant(aux.clone());
            let y = g.matmul(x, b)?;
            weighted(g, y, s)
        })),
        ("matmul_rhs", vec![r, c], Box::new(move |g, x, s| {
            let a = g.constant(aux_left.clone());
            let y = g.matmul(a, x)?;
            weighted(g, y, s)
        })),
        ("matmul_self", vec![r, c], Box::new(|g, x, s| {
            let t = g.transpose(x)?;
            let y = g.matmul(x, t)?;
            weighted(g, y, s)
        })),
        ("transpose", vec![r, c], Box::new(|g, x, s| {
            let y = g.transpose(x)?;
            weighted(g, y, s)
        })),
        ("add", vec![r, c], Box::new(move |g, x, s| {
            let o = g.constant(other.clone());
            let y = g.add(x, o)?;
            weighted(g, y, s)
        })),
        ("add_shared_leaf", vec![r, c], Box::new(|g, x, s| {
            let y = g.add(x, x)?;
            let y = g.mul(y, x)?;
            weighted(g, y, s)
        })),
        ("add_row_matrix", vec![r, c], Box::new(move |g, x, s| {
            let b = g.constant(bias.clone());
            let y = g.add_row(x, b)?;
            weighted(g, y, s)
        })),
        ("add_row_bias", vec![c], Box::new(move |g, x, s| {
            let m = g.constant(Tensor::from_fn(&[r, c], |i| i as f64 * 0.1));
            let y = g.add_row(m, x)?;
            weighted(g, y, s)
        })),
        ("mul", vec![r, c], Box::new(|g, x, s| {
            let y = g.mul(x, x)?;
            weighted(g, y, s)
        })),
        ("scale", vec![r, c], Box::new(|g, x, s| {
            let y = g.scale(x, -1.75);
            weighted(g, y, s)
        })),
        ("mul_const", vec![r, c], Box::new(move |g, x, s| {
            let y = g.mul_const(x, mask.clone())?;
            weighted(g, y, s)
        })),
        ("softmax", vec![r, c], Box::new(|g, x, s| {
            let y = g.softmax(x)?;
            weighted(g, y, s)
        })),
        ("layer_norm_x", vec![r, c], Box::new(move |g, x, s| {
            let gm = g.constant(gamma.clone());
            let bt = g.constant(Tensor::full(&[c], 0.3));
            let y = g.layer_norm(x, gm, bt, 1e-6)?;
            weighted(g, y, s)
        })),
        ("layer_norm_affine", vec![c], Box::new(move |g, p, s| {
            let m = g.constant(Tensor::from_fn(&[r, c], |i| ((i * 7) % 5) as f64 - 2.0));
            let y = g.layer_norm(m, p, p, 1e-6)?;
            weighted(g, y, s)
        })),
        ("gelu", vec![r, c], Box::new(|g, x, s| {
            let y = g.gelu(x);
            weighted(g, y, s)
        })),
        ("cross_entropy", vec![r, c], Box::new(move |g, x, _| g.cross_entropy(x, &labels))),
        ("sum", vec![r, c], Box::new(|g, x, _| Ok(g.sum(x)))),
        ("select", vec![r, c], Box::new(move |g, x, _| g.select(x, sel))),
        ("row", vec![r, c], Box::new(move |g, x, s| {
            let y = g.row(x, row)?;
            weighted(g, y, s)
        })),
        ("slice_cols", vec![r, c], Box::new(move |g, x, s| {
            let y = g.slice_cols(x, start, c - start)?;
            weighted(g, y, s)
        })),
        ("concat_cols", vec![r, c], Box::new(|g, x, s| {
            let y = g.concat_cols(&[x, x])?;
            weighted(g, y, s)
        })),
        ("concat_rows", vec![r, c], Box::new(|g, x, s| {
            let y = g.concat_rows(&[x, x])?;
            weighted(g, y, s)
        })),
        ("reshape", vec![r, c], Box::new(move |g, x, s| {
            let y = g.reshape(x, &[c * r])?;
            weighted(g, y, s)
        })),
        ("gather", vec![r, c], Box::new(move |g, x, s| {
            let n = perm.len();
            let y = g.gather(x, perm.clone(), &[n])?;
            weighted(g, y, s)
        })),
    ]
}
