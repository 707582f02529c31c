//! Binary checkpoint format.
//!
//! ```text
//! "VITCKPT1"
//! u32 config_len, config_len bytes of key=value text (fixed key order)
//! u32 tensor_count
//! per tensor:
//!   u32 name_len, name bytes, u32 rank, rank × u64 dims,
//!   product(dims) × f64 payload
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;
use crate::vit::{param_layout, ModelError, ViTConfig, ViTParams};

pub const MAGIC: &[u8; 8] = b"VITCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a VITCKPT1 checkpoint")]
    BadMagic,
    #[error("truncated payload in {0}")]
    Truncated(String),
    #[error("tensor {name}: dims {got:?} do not match expected {expected:?}")]
    DimMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor #{index}: expected {expected}, found {got}")]
    NameMismatch {
        index: usize,
        expected: String,
        got: String,
    },
    #[error("expected {expected} tensors, header says {got}")]
    TensorCount { expected: usize, got: usize },
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("bad config block: {0}")]
    Config(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode(params: &ViTParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    let cfg = params.config.to_text();
    out.extend((cfg.len() as u32).to_le_bytes());
    out.extend(cfg.as_bytes());
    let named = params.named();
    out.extend((named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend((d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(ctx.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, ctx: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, ctx: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, ctx)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ViTParams, ViTConfig), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let cfg_len = r.u32("config block")? as usize;
    let cfg_bytes = r.take(cfg_len, "config block")?;
    let cfg_text = std::str::from_utf8(cfg_bytes)
        .map_err(|_| ModelError::Config("config block is not UTF-8".into()))?;
    let config = ViTConfig::from_text(cfg_text)?;
    let layout = param_layout(&config);
    let count = r.u32("tensor count")? as usize;
    if count != layout.len() {
        return Err(CheckpointError::TensorCount {
            expected: layout.len(),
            got: count,
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for (index, (expected_name, expected_shape)) in layout.into_iter().enumerate() {
        let ctx = format!("tensor #{index} ({expected_name})");
        let name_len = r.u32(&ctx)? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, &ctx)?).into_owned();
        if name != expected_name {
            return Err(CheckpointError::NameMismatch {
                index,
                expected: expected_name,
                got: name,
            });
        }
        let rank = r.u32(&name)? as usize;
        if rank > 8 {
            return Err(CheckpointError::DimMismatch {
                name,
                expected: expected_shape,
                got: vec![],
            });
        }
        let dims = (0..rank)
            .map(|_| r.u64(&name).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if dims != expected_shape {
            return Err(CheckpointError::DimMismatch {
                name,
                expected: expected_shape,
                got: dims,
            });
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n * 8, &name)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(ModelError::from)?.with_grad();
        tensors.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    let params = ViTParams::from_named(config.clone(), tensors)?;
    Ok((params, config))
}

pub fn save_checkpoint(params: &ViTParams, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ViTParams, ViTConfig), CheckpointError> {
    decode(&std::fs::read(path)?)
}
