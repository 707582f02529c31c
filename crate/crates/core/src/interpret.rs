//! Gradient-weighted attention relevancy for the ViT.
//!
//! Starting from `R = I` over tokens, each encoder block contributes
//! `Ā = mean_heads( max(0, A ⊙ ∂y_c/∂A) )` and updates `R ← R + Ā·R`.
//! The class-token row of `R`, restricted to patch tokens, is the map.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::LabeledImage;
use crate::graph::{matmul_into, Graph};
use crate::image::{self, ImageError};
use crate::tensor::{Tensor, TensorError};
use crate::vit::{forward_graph, ForwardOptions, ModelError, ViTParams};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("no attention tensors recorded (model has no encoder blocks)")]
    MissingAttention,
    #[error("class {class} is invalid for a {classes}-class model")]
    InvalidClass { class: usize, classes: usize },
    #[error("map is {map}x{map} but image needs a {expected}x{expected} grid")]
    Geometry { map: usize, expected: usize },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevancyMap {
    /// `P×P`, nonnegative.
    pub grid: Tensor,
    pub target_class: usize,
    pub source_id: String,
}

impl RelevancyMap {
    pub fn side(&self) -> usize {
        self.grid.shape()[0]
    }

    /// Flat index of the largest entry (first one on ties).
    pub fn argmax(&self) -> usize {
        argmax(self.grid.data())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One block's attention probabilities and the target logit's gradient with
/// respect to them, both `heads×tokens×tokens`.
#[derive(Debug, Clone)]
pub struct AttentionGrad {
    pub attention: Tensor,
    pub grad: Tensor,
}

/// Head-averaged, positive-clamped `A ⊙ ∂y/∂A` for one block (`T×T`).
pub fn weighted_attention(block: &AttentionGrad) -> Vec<f64> {
    let shape = block.attention.shape();
    let (heads, t) = (shape[0], shape[1]);
    let mut out = vec![0.0; t * t];
    for h in 0..heads {
        let a = &block.attention.data()[h * t * t..(h + 1) * t * t];
        let g = &block.grad.data()[h * t * t..(h + 1) * t * t];
        for ((o, a), g) in out.iter_mut().zip(a).zip(g) {
            *o += (a * g).max(0.0);
        }
    }
    out.iter_mut().for_each(|v| *v /= heads as f64);
    out
}

/// Composes blocks in order into the `T×T` relevancy matrix.
pub fn propagate(blocks: &[AttentionGrad]) -> Result<Tensor, InterpretError> {
    let first = blocks.first().ok_or(InterpretError::MissingAttention)?;
    let t = first.attention.shape()[1];
    let mut r: Vec<f64> = (0..t * t).map(|i| if i / t == i % t { 1.0 } else { 0.0 }).collect();
    for b in blocks {
        let a_bar = weighted_attention(b);
        let mut next = r.clone();
        matmul_into(&a_bar, &r, &mut next, t, t, t);
        r = next;
    }
    Ok(Tensor::new(vec![t, t], r)?)
}

/// Attention tensors and their gradients for `target_class`, one per block.
/// `image` is the normalized model input.
pub fn attention_grads(
    params: &ViTParams,
    image: &Tensor,
    target_class: usize,
) -> Result<Vec<AttentionGrad>, InterpretError> {
    let cfg = &params.config;
    if target_class >= cfg.num_classes {
        return Err(InterpretError::InvalidClass {
            class: target_class,
            classes: cfg.num_classes,
        });
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, |g, _, t| g.variable(t));
    let x = g.constant(image.clone());
    let out = forward_graph(&mut g, cfg, &vars, x, &ForwardOptions::default())?;
    let target = g.select(out.logits, target_class)?;
    g.backward(target)?;
    let t = cfg.num_tokens();
    let stack = |g: &Graph, vals: &mut dyn FnMut(&Graph, crate::graph::Var) -> Vec<f64>, heads: &[crate::graph::Var]| {
        let data: Vec<f64> = heads.iter().flat_map(|&v| vals(g, v)).collect();
        Tensor::new(vec![heads.len(), t, t], data)
    };
    out.attention
        .iter()
        .map(|heads| {
            let attention = stack(&g, &mut |g, v| g.data(v).to_vec(), heads)?;
            let grad = stack(
                &g,
                &mut |g, v| g.grad(v).map_or_else(|| vec![0.0; t * t], <[f64]>::to_vec),
                heads,
            )?;
            Ok(AttentionGrad { attention, grad })
        })
        .collect()
}

/// Full `T×T` relevancy matrix for `target_class`.
pub fn relevancy_matrix(params: &ViTParams, image: &Tensor, target_class: usize) -> Result<Tensor, InterpretError> {
    propagate(&attention_grads(params, image, target_class)?)
}

/// Patch relevancy map for `target_class`; `image` is the normalized input.
pub fn relevancy(
    params: &ViTParams,
    image: &Tensor,
    target_class: usize,
    source_id: &str,
) -> Result<RelevancyMap, InterpretError> {
    let r = relevancy_matrix(params, image, target_class)?;
    let side = params.config.grid();
    let t = params.config.num_tokens();
    let row = r.data()[1..t].to_vec();
    Ok(RelevancyMap {
        grid: Tensor::new(vec![side, side], row)?,
        target_class,
        source_id: source_id.to_string(),
    })
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Entry `i` of the 256-step blue→red ramp: `(i/255, 0, 1 − i/255)`.
pub fn colormap(i: u8) -> [f64; 3] {
    let t = i as f64 / 255.0;
    [t, 0.0, 1.0 - t]
}

fn colormap_value(v: f64) -> [f64; 3] {
    colormap((v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// `0.5·image + 0.5·colormap(upsampled map)` as a `3×S×S` tensor.
pub fn render_overlay(map: &RelevancyMap, image: &LabeledImage) -> Result<Tensor, InterpretError> {
    let size = image.size();
    let side = map.side();
    if side == 0 || !size.is_multiple_of(side) {
        return Err(InterpretError::Geometry { map: side, expected: size });
    }
    let scaled = Tensor::new(vec![1, side, side], min_max(map.grid.data()))?;
    let up = image::resize_bilinear(&scaled, size, size)?;
    let plane = size * size;
    let px = image.pixels.data();
    let mut out = vec![0.0; 3 * plane];
    for (i, &v) in up.data().iter().enumerate() {
        let rgb = colormap_value(v);
        for c in 0..3 {
            out[c * plane + i] = 0.5 * px[c * plane + i] + 0.5 * rgb[c];
        }
    }
    Ok(Tensor::new(vec![3, size, size], out)?)
}

/// `P` lines of `P` comma-separated values with 17 significant digits.
pub fn map_csv(map: &RelevancyMap) -> String {
    let side = map.side();
    let mut out = String::new();
    for row in map.grid.data().chunks(side) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Writes the overlay as binary PPM at `out` and the raw map as CSV next to
/// it (same stem, `.csv`). Returns the CSV path.
pub fn render_heatmap(map: &RelevancyMap, image: &LabeledImage, out: &Path) -> Result<PathBuf, InterpretError> {
    let overlay = render_overlay(map, image)?;
    let write = |path: &Path, bytes: &[u8]| {
        std::fs::write(path, bytes).map_err(|source| InterpretError::Write {
            path: path.to_path_buf(),
            source,
        })
    };
    write(out, &image::encode_ppm(&overlay)?)?;
    let csv_path = out.with_extension("csv");
    write(&csv_path, map_csv(map).as_bytes())?;
    Ok(csv_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::vit::{init_params, ViTConfig};

    fn random_image(cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(&cfg.image_shape(), |_| rng.next_f64() * 2.0 - 1.0)
    }

    #[test]
    fn zeroed_head_gives_identity_and_zero_map() {
        let cfg = ViTConfig::tiny();
        let mut p = init_params(&cfg, 1).unwrap();
        p.head.out.weight = Tensor::zeros(p.head.out.weight.shape());
        let img = random_image(&cfg, 2);
        let r = relevancy_matrix(&p, &img, 1).unwrap();
        let t = cfg.num_tokens();
        for i in 0..t {
            for j in 0..t {
                assert_eq!(r.at2(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let m = relevancy(&p, &img, 1, "x").unwrap();
        assert_eq!(m.grid.shape(), &[4, 4]);
        assert!(m.grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn map_is_nonnegative() {
        let cfg = ViTConfig::tiny();
        for seed in 0..5 {
            let p = init_params(&cfg, seed).unwrap();
            let m = relevancy(&p, &random_image(&cfg, seed + 100), (seed % 3) as usize, "x").unwrap();
            assert!(m.grid.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn invalid_class_and_missing_attention() {
        let cfg = ViTConfig::tiny();
        let p = init_params(&cfg, 1).unwrap();
        let img = random_image(&cfg, 2);
        assert!(matches!(
            relevancy(&p, &img, 7, "x"),
            Err(InterpretError::InvalidClass { class: 7, classes: 3 })
        ));
        let mut shallow = cfg.clone();
        shallow.depth = 0;
        let p = init_params(&shallow, 1).unwrap();
        assert!(matches!(relevancy(&p, &img, 0, "x"), Err(InterpretError::MissingAttention)));
    }

    fn map_with(values: Vec<f64>) -> RelevancyMap {
        let side = (values.len() as f64).sqrt() as usize;
        RelevancyMap {
            grid: Tensor::new(vec![side, side], values).unwrap(),
            target_class: 0,
            source_id: "x".into(),
        }
    }

    fn gray_image(size: usize) -> LabeledImage {
        LabeledImage::new(Tensor::full(&[3, size, size], 0.4), 0, "g.ppm")
    }

    #[test]
    fn zero_map_renders_uniform_tint() {
        let img = gray_image(32);
        let o = render_overlay(&map_with(vec![0.0; 16]), &img).unwrap();
        let cm = colormap(0);
        let plane = 32 * 32;
        for c in 0..3 {
            for v in &o.data()[c * plane..(c + 1) * plane] {
                assert_eq!(*v, 0.5 * 0.4 + 0.5 * cm[c]);
            }
        }
    }

    #[test]
    fn hot_patch_is_reddest_inside_its_footprint() {
        let img = gray_image(32);
        let mut v = vec![0.1; 16];
        v[6] = 3.0; // row 1, col 2
        let o = render_overlay(&map_with(v), &img).unwrap();
        let red = &o.data()[..32 * 32];
        let best = argmax(red);
        let (y, x) = (best / 32, best % 32);
        assert!((8..16).contains(&y) && (16..24).contains(&x), "argmax at {y},{x}");
    }

    #[test]
    fn min_max_keeps_argmax() {
        let mut rng = SplitMix64::new(4);
        for _ in 0..50 {
            let v: Vec<f64> = (0..16).map(|_| rng.next_f64()).collect();
            assert_eq!(argmax(&v), argmax(&min_max(&v)));
        }
        assert_eq!(min_max(&[2.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn csv_has_17_significant_digits() {
        let m = map_with(vec![0.1, 0.2, 0.3, 1.0 / 3.0]);
        let csv = map_csv(&m);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "2.9999999999999999e-1,3.3333333333333331e-1");
        for field in csv.lines().flat_map(|l| l.split(',')) {
            let back: f64 = field.parse().unwrap();
            assert!(m.grid.data().contains(&back));
        }
    }
}
