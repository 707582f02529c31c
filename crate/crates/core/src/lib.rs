//! Vision-transformer transfer learning for three-class lung histology.
//!
//! The crate carries its own small autodiff engine ([`graph`]), a ViT with an
//! MLP projector head ([`vit`]), dataset handling ([`data`]), zero-shot and
//! fine-tuning protocols ([`pipeline`]), classifier metrics ([`metrics`]) and
//! gradient-weighted attention relevancy maps ([`interpret`]).

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod interpret;
pub mod kv;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod settings;
pub mod tensor;
pub mod vit;

pub use graph::{Graph, Var};
pub use tensor::{Tensor, TensorError};
pub use vit::{ViTConfig, ViTParams};
