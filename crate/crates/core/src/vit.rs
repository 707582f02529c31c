//! Vision Transformer backbone with an MLP projector head.
//!
//! The forward pass is
//! `patchify → linear embed → prepend class token → add position embedding →
//! depth × (LN → MHSA → residual → LN → MLP → residual) → LN → head(class token)`.

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::kv::{self, KvError, KvMap};
use crate::rng::SplitMix64;
use crate::tensor::{Tensor, TensorError};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("image of size {got} is not divisible into {patch}-pixel patches")]
    NotDivisible { got: usize, patch: usize },
    #[error("image shape {got:?} does not match model geometry {expected:?}")]
    Geometry { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the projector head; 0 means a single linear layer.
    pub head_hidden: usize,
    pub num_classes: usize,
    pub drop_rate: f64,
}

pub const CONFIG_KEYS: [&str; 10] = [
    "image_size",
    "patch_size",
    "channels",
    "embed_dim",
    "depth",
    "heads",
    "mlp_ratio",
    "head_hidden",
    "num_classes",
    "drop_rate",
];

impl ViTConfig {
    /// ViT-B/16 geometry: 224 px input, 196 patches.
    pub fn base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            head_hidden: 768,
            num_classes: 3,
            drop_rate: 0.0,
        }
    }

    /// Desk-scale geometry used for tests and synthetic experiments.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            head_hidden: 32,
            num_classes: 3,
            drop_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return bad("image_size, patch_size and channels must be positive");
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(ModelError::NotDivisible {
                got: self.image_size,
                patch: self.patch_size,
            });
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad("embed_dim must be a positive multiple of heads");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return bad("drop_rate must be in [0, 1)");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    /// Fixed-order `key=value` block.
    pub fn to_text(&self) -> String {
        kv::render(&[
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("channels", self.channels.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("drop_rate", format!("{:?}", self.drop_rate)),
        ])
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let map = KvMap::parse(text)?;
        map.check_known(&CONFIG_KEYS)?;
        let cfg = Self {
            image_size: map.require("image_size")?,
            patch_size: map.require("patch_size")?,
            channels: map.require("channels")?,
            embed_dim: map.require("embed_dim")?,
            depth: map.require("depth")?,
            heads: map.require("heads")?,
            mlp_ratio: map.require("mlp_ratio")?,
            head_hidden: map.require("head_hidden")?,
            num_classes: map.require("num_classes")?,
            drop_rate: map.require("drop_rate")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Flat source index for every entry of the patch matrix.
///
/// Patches run left→right, top→bottom; each row is the patch's pixels in
/// channel, row, column order.
pub fn patch_indices(channels: usize, size: usize, patch: usize) -> Vec<usize> {
    let grid = size / patch;
    let mut idx = Vec::with_capacity(channels * size * size);
    for gy in 0..grid {
        for gx in 0..grid {
            for c in 0..channels {
                for py in 0..patch {
                    for px in 0..patch {
                        let y = gy * patch + py;
                        let x = gx * patch + px;
                        idx.push(c * size * size + y * size + x);
                    }
                }
            }
        }
    }
    idx
}

/// Splits a `C×H×W` image into a `num_patches × patch²·C` matrix.
pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor, ModelError> {
    let &[c, h, w] = image.shape() else {
        return Err(ModelError::Tensor(TensorError::Rank {
            op: "patchify",
            expected: 3,
            shape: image.shape().to_vec(),
        }));
    };
    if h != w {
        return Err(ModelError::Geometry {
            expected: vec![c, h, h],
            got: image.shape().to_vec(),
        });
    }
    if patch_size == 0 || h % patch_size != 0 {
        return Err(ModelError::NotDivisible {
            got: h,
            patch: patch_size,
        });
    }
    let idx = patch_indices(c, h, patch_size);
    let grid = h / patch_size;
    let data = idx.iter().map(|&i| image.data()[i]).collect();
    Ok(Tensor::new(vec![grid * grid, patch_size * patch_size * c], data)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hidden: Option<Linear>,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams {
    pub config: ViTConfig,
    pub patch_embed: Linear,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm: Norm,
    pub head: HeadParams,
}

/// Expected `(name, shape)` of every tensor, in canonical order.
pub fn param_layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![d]),
        ("pos_embed".to_string(), vec![cfg.num_tokens(), d]),
    ];
    for i in 0..cfg.depth {
        let p = format!("blocks.{i}");
        let h = cfg.mlp_hidden();
        out.extend([
            (format!("{p}.norm1.weight"), vec![d]),
            (format!("{p}.norm1.bias"), vec![d]),
            (format!("{p}.attn.qkv.weight"), vec![d, 3 * d]),
            (format!("{p}.attn.qkv.bias"), vec![3 * d]),
            (format!("{p}.attn.proj.weight"), vec![d, d]),
            (format!("{p}.attn.proj.bias"), vec![d]),
            (format!("{p}.norm2.weight"), vec![d]),
            (format!("{p}.norm2.bias"), vec![d]),
            (format!("{p}.mlp.fc1.weight"), vec![d, h]),
            (format!("{p}.mlp.fc1.bias"), vec![h]),
            (format!("{p}.mlp.fc2.weight"), vec![h, d]),
            (format!("{p}.mlp.fc2.bias"), vec![d]),
        ]);
    }
    out.push(("norm.weight".to_string(), vec![d]));
    out.push(("norm.bias".to_string(), vec![d]));
    let mut head_in = d;
    if cfg.head_hidden > 0 {
        out.push(("head.hidden.weight".to_string(), vec![d, cfg.head_hidden]));
        out.push(("head.hidden.bias".to_string(), vec![cfg.head_hidden]));
        head_in = cfg.head_hidden;
    }
    out.push(("head.out.weight".to_string(), vec![head_in, cfg.num_classes]));
    out.push(("head.out.bias".to_string(), vec![cfg.num_classes]));
    out
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

fn init_kind(name: &str) -> Init {
    if name.contains("norm") {
        if name.ends_with(".weight") {
            Init::Ones
        } else {
            Init::Zeros
        }
    } else if name.ends_with(".bias") {
        Init::Zeros
    } else {
        Init::Normal
    }
}

/// Samples from N(0, std²) truncated to ±2·std by rejection.
fn truncated_normal(rng: &mut SplitMix64, dist: &Normal<f64>, std: f64) -> f64 {
    loop {
        let v = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Deterministic initialization: weights, `cls_token` and `pos_embed` from a
/// truncated normal (std 0.02), biases zero, layer-norm scales one.
pub fn init_params(config: &ViTConfig, seed: u64) -> Result<ViTParams, ModelError> {
    config.validate()?;
    let mut rng = SplitMix64::new(seed);
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let tensors = param_layout(config)
        .into_iter()
        .map(|(name, shape)| {
            let t = match init_kind(&name) {
                Init::Normal => {
                    Tensor::from_fn(&shape, |_| truncated_normal(&mut rng, &dist, INIT_STD))
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
            };
            (name, t.with_grad())
        })
        .collect();
    ViTParams::from_named(config.clone(), tensors)
}

impl ViTParams {
    /// Assembles params from tensors in canonical order; names and shapes
    /// must match [`param_layout`].
    pub fn from_named(config: ViTConfig, tensors: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let layout = param_layout(&config);
        if layout.len() != tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::Config(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let mut next = || it.next().expect("length checked");
        let patch_embed = Linear {
            weight: next(),
            bias: next(),
        };
        let cls_token = next();
        let pos_embed = next();
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            blocks.push(BlockParams {
                norm1: Norm {
                    weight: next(),
                    bias: next(),
                },
                qkv: Linear {
                    weight: next(),
                    bias: next(),
                },
                proj: Linear {
                    weight: next(),
                    bias: next(),
                },
                norm2: Norm {
                    weight: next(),
                    bias: next(),
                },
                fc1: Linear {
                    weight: next(),
                    bias: next(),
                },
                fc2: Linear {
                    weight: next(),
                    bias: next(),
                },
            });
        }
        let norm = Norm {
            weight: next(),
            bias: next(),
        };
        let hidden = (config.head_hidden > 0).then(|| Linear {
            weight: next(),
            bias: next(),
        });
        let out = Linear {
            weight: next(),
            bias: next(),
        };
        Ok(Self {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head: HeadParams { hidden, out },
        })
    }

    /// All tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.patch_embed.weight,
            &self.patch_embed.bias,
            &self.cls_token,
            &self.pos_embed,
        ];
        for b in &self.blocks {
            v.extend([
                &b.norm1.weight,
                &b.norm1.bias,
                &b.qkv.weight,
                &b.qkv.bias,
                &b.proj.weight,
                &b.proj.bias,
                &b.norm2.weight,
                &b.norm2.bias,
                &b.fc1.weight,
                &b.fc1.bias,
                &b.fc2.weight,
                &b.fc2.bias,
            ]);
        }
        v.extend([&self.norm.weight, &self.norm.bias]);
        if let Some(h) = &self.head.hidden {
            v.extend([&h.weight, &h.bias]);
        }
        v.extend([&self.head.out.weight, &self.head.out.bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.patch_embed.weight,
            &mut self.patch_embed.bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            v.extend([
                &mut b.norm1.weight,
                &mut b.norm1.bias,
                &mut b.qkv.weight,
                &mut b.qkv.bias,
                &mut b.proj.weight,
                &mut b.proj.bias,
                &mut b.norm2.weight,
                &mut b.norm2.bias,
                &mut b.fc1.weight,
                &mut b.fc1.bias,
                &mut b.fc2.weight,
                &mut b.fc2.bias,
            ]);
        }
        v.extend([&mut self.norm.weight, &mut self.norm.bias]);
        if let Some(h) = &mut self.head.hidden {
            v.extend([&mut h.weight, &mut h.bias]);
        }
        v.extend([&mut self.head.out.weight, &mut self.head.out.bias]);
        v
    }

    pub fn names(&self) -> Vec<String> {
        param_layout(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.names().into_iter().zip(self.tensors()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    fn digest(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            if !keep(&name) {
                continue;
            }
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// SHA-256 over every parameter's name and little-endian bytes.
    pub fn checksum(&self) -> String {
        self.digest(|_| true)
    }

    /// Checksum over everything except the projector head.
    pub fn backbone_checksum(&self) -> String {
        self.digest(|n| !is_head_param(n))
    }

    pub fn head_checksum(&self) -> String {
        self.digest(is_head_param)
    }

    /// Registers every tensor in the graph through `bind`, in canonical order.
    pub fn bind(&self, g: &mut Graph, mut bind: impl FnMut(&mut Graph, &str, &Tensor) -> Var) -> ParamVars {
        let leaves: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(name, t)| bind(g, &name, t))
            .collect();
        ParamVars::from_leaves(&self.config, leaves)
    }

    /// Registers every tensor as a graph leaf honoring its `requires_grad`.
    pub fn leaves(&self, g: &mut Graph) -> ParamVars {
        self.bind(g, |g, _, t| g.leaf(t))
    }

    /// Adds the graph's gradients into each tensor's grad slot.
    pub fn accumulate_grads(&mut self, g: &Graph, vars: &ParamVars) {
        for (t, &v) in self.tensors_mut().into_iter().zip(&vars.leaves) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub norm1: LinearVars,
    pub qkv: LinearVars,
    pub proj: LinearVars,
    pub norm2: LinearVars,
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

/// Graph handles for every parameter, mirroring [`ViTParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub leaves: Vec<Var>,
    pub patch_embed: LinearVars,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<BlockVars>,
    pub norm: LinearVars,
    pub head_hidden: Option<LinearVars>,
    pub head_out: LinearVars,
}

impl ParamVars {
    fn from_leaves(cfg: &ViTConfig, leaves: Vec<Var>) -> Self {
        let mut it = leaves.iter().copied();
        let mut lin = || LinearVars {
            weight: it.next().expect("layout"),
            bias: it.next().expect("layout"),
        };
        let patch_embed = lin();
        let LinearVars {
            weight: cls_token,
            bias: pos_embed,
        } = lin();
        let blocks = (0..cfg.depth)
            .map(|_| BlockVars {
                norm1: lin(),
                qkv: lin(),
                proj: lin(),
                norm2: lin(),
                fc1: lin(),
                fc2: lin(),
            })
            .collect();
        let norm = lin();
        let head_hidden = (cfg.head_hidden > 0).then(&mut lin);
        let head_out = lin();
        Self {
            leaves,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head_hidden,
            head_out,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Enables dropout.
    pub train_mode: bool,
    /// Keeps per-block attention tensors in the trace.
    pub retain_attention: bool,
    /// Seed for dropout masks; unused outside train mode.
    pub dropout_seed: u64,
}

/// Graph-level result of a forward pass.
#[derive(Debug, Clone)]
pub struct GraphForward {
    /// `1×num_classes`
    pub logits: Var,
    /// Attention probabilities per block, per head (`tokens×tokens` each).
    pub attention: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Tensor,
    /// One `heads×tokens×tokens` tensor per block, when requested.
    pub attention: Option<Vec<Tensor>>,
}

struct Dropout {
    rate: f64,
    rng: Option<SplitMix64>,
}

impl Dropout {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var, TensorError> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - self.rate;
        let n = g.data(x).len();
        let mask = (0..n)
            .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        g.mul_const(x, mask)
    }
}

fn linear(g: &mut Graph, x: Var, l: LinearVars) -> Result<Var, TensorError> {
    let y = g.matmul(x, l.weight)?;
    g.add_row(y, l.bias)
}

/// Builds the forward pass on `g`. `image` must be a `C×H×W` node.
pub fn forward_graph(
    g: &mut Graph,
    cfg: &ViTConfig,
    p: &ParamVars,
    image: Var,
    opts: &ForwardOptions,
) -> Result<GraphForward, ModelError> {
    let expected = cfg.image_shape().to_vec();
    if g.shape(image) != expected.as_slice() {
        return Err(ModelError::Geometry {
            expected,
            got: g.shape(image).to_vec(),
        });
    }
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let mut drop = Dropout {
        rate: cfg.drop_rate,
        rng: (opts.train_mode && cfg.drop_rate > 0.0).then(|| SplitMix64::new(opts.dropout_seed)),
    };

    let idx = patch_indices(cfg.channels, cfg.image_size, cfg.patch_size);
    let patches = g.gather(image, idx, &[cfg.num_patches(), cfg.patch_dim()])?;
    let tokens = linear(g, patches, p.patch_embed)?;
    let cls = g.reshape(p.cls_token, &[1, d])?;
    let x = g.concat_rows(&[cls, tokens])?;
    let x = g.add(x, p.pos_embed)?;
    let mut x = drop.apply(g, x)?;

    let scale = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let h = g.layer_norm(x, b.norm1.weight, b.norm1.bias, LN_EPS)?;
        let qkv = linear(g, h, b.qkv)?;
        let mut outs = Vec::with_capacity(cfg.heads);
        let mut probs = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let q = g.slice_cols(qkv, head * dh, dh)?;
            let k = g.slice_cols(qkv, d + head * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + head * dh, dh)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let a = g.softmax(scores)?;
            outs.push(g.matmul(a, v)?);
            probs.push(a);
        }
        attention.push(probs);
        let cat = g.concat_cols(&outs)?;
        let proj = linear(g, cat, b.proj)?;
        let proj = drop.apply(g, proj)?;
        x = g.add(x, proj)?;

        let h = g.layer_norm(x, b.norm2.weight, b.norm2.bias, LN_EPS)?;
        let m = linear(g, h, b.fc1)?;
        let m = g.gelu(m);
        let m = linear(g, m, b.fc2)?;
        let m = drop.apply(g, m)?;
        x = g.add(x, m)?;
    }
    let x = g.layer_norm(x, p.norm.weight, p.norm.bias, LN_EPS)?;
    let mut h = g.row(x, 0)?;
    if let Some(hidden) = p.head_hidden {
        let z = linear(g, h, hidden)?;
        h = g.gelu(z);
    }
    let logits = linear(g, h, p.head_out)?;
    Ok(GraphForward { logits, attention })
}

fn collect_attention(g: &Graph, cfg: &ViTConfig, att: &[Vec<Var>]) -> Vec<Tensor> {
    let t = cfg.num_tokens();
    att.iter()
        .map(|heads| {
            let data = heads.iter().flat_map(|&a| g.data(a).iter().copied()).collect();
            Tensor::new(vec![cfg.heads, t, t], data).expect("attention shape")
        })
        .collect()
}

/// Forward pass on a normalized `C×H×W` image, without gradient tracking.
pub fn forward(params: &ViTParams, image: &Tensor, opts: &ForwardOptions) -> Result<ForwardTrace, ModelError> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, |g, _, t| g.constant(t.clone()));
    let x = g.constant(image.clone());
    let out = forward_graph(&mut g, &params.config, &vars, x, opts)?;
    let logits = g.value(out.logits).reshape(&[params.config.num_classes])?;
    let attention = opts
        .retain_attention
        .then(|| collect_attention(&g, &params.config, &out.attention));
    Ok(ForwardTrace { logits, attention })
}

/// Class probabilities for one image (eval mode).
pub fn predict_proba(params: &ViTParams, image: &Tensor) -> Result<Vec<f64>, ModelError> {
    let trace = forward(params, image, &ForwardOptions::default())?;
    let mut p = trace.logits.into_data();
    crate::graph::softmax_in_place(&mut p);
    Ok(p)
}
