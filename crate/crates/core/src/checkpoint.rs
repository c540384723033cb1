//! Named-tensor checkpoints and the frozen teacher.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "MALN"            4 bytes magic
//! version: u32      currently 1
//! count: u32        number of tensors
//! per tensor:
//!   name_len: u16, name: UTF-8 bytes
//!   ndim: u8, dims: ndim × u32
//!   data: prod(dims) × f32
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::tensor::{Parameters, Tensor};
use crate::vit::{EncoderOutput, Linear, ViTConfig, VisionTransformer};

pub const MAGIC: &[u8; 4] = b"MALN";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered collection of uniquely named `f32` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Contract(format!("tensor name of {} bytes is too long", name.len())));
        }
        if tensor.shape().len() > u8::MAX as usize || tensor.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Contract(format!("shape {:?} not representable", tensor.shape())));
        }
        if self.get(&name).is_some() {
            return Err(Error::Contract(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Equality on raw bit patterns, so NaN payloads compare too.
    pub fn bit_identical(&self, other: &Checkpoint) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits())
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self
            .tensors
            .iter()
            .map(|(n, t)| 2 + n.len() + 1 + 4 * t.shape().len() + 4 * t.numel())
            .sum();
        let mut out = Vec::with_capacity(12 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < 4 {
            return Err(Error::Format("file shorter than the magic bytes".into()));
        }
        if r.take(4)? != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(version));
        }
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::new();
        let mut names = HashSet::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            if !names.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            let ndim = r.take(1)?[0] as usize;
            if ndim == 0 {
                return Err(Error::Format(format!("tensor `{name}` has no dimensions")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Corruption(format!("tensor `{name}` shape {shape:?} overflows")))?;
            let byte_len = numel
                .checked_mul(4)
                .ok_or_else(|| Error::Corruption(format!("tensor `{name}` too large")))?;
            let raw = r.take(byte_len)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            ckpt.tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(ckpt)
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corruption(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

const CONFIG_FIELDS: usize = 9;

fn config_tensor(c: &ViTConfig) -> Tensor<f32> {
    let v = [
        c.image_h as f32,
        c.image_w as f32,
        c.channels as f32,
        c.patch_size as f32,
        c.embed_dim as f32,
        c.depth as f32,
        c.num_heads as f32,
        c.mlp_ratio as f32,
        c.drop_path_rate as f32,
    ];
    Tensor::new(vec![CONFIG_FIELDS], v.to_vec()).unwrap()
}

/// Shortest decimal of the stored `f32`, so `0.1` reads back as `0.1f64`.
fn widen(x: f32) -> f64 {
    x.to_string().parse().unwrap_or(x as f64)
}

fn config_from_tensor(t: &Tensor<f32>) -> Result<ViTConfig> {
    if t.shape() != [CONFIG_FIELDS] {
        return Err(Error::Format(format!("config tensor has shape {:?}", t.shape())));
    }
    let d = t.data();
    let u = |x: f32| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::Format(format!("config field {x} is not a count")))
        }
    };
    let cfg = ViTConfig {
        image_h: u(d[0])?,
        image_w: u(d[1])?,
        channels: u(d[2])?,
        patch_size: u(d[3])?,
        embed_dim: u(d[4])?,
        depth: u(d[5])?,
        num_heads: u(d[6])?,
        mlp_ratio: widen(d[7]),
        drop_path_rate: widen(d[8]),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Write every parameter of `params` under `prefix`.
pub fn store_params<P: Parameters<f32>>(ckpt: &mut Checkpoint, prefix: &str, params: &P) -> Result<()> {
    for (name, p) in params.params() {
        ckpt.insert(format!("{prefix}{name}"), p.value.clone())?;
    }
    Ok(())
}

/// Overwrite every parameter of `params` from `prefix`, checking shapes.
pub fn restore_params<P: Parameters<f32>>(ckpt: &Checkpoint, prefix: &str, params: &mut P) -> Result<()> {
    for (name, p) in params.params_mut() {
        let key = format!("{prefix}{name}");
        let t = ckpt.require(&key)?;
        if t.shape() != p.value.shape() {
            return Err(Error::Format(format!(
                "`{key}` has shape {:?}, model expects {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}

/// Encoder weights plus a config echo under `prefix`.
pub fn store_vit(ckpt: &mut Checkpoint, prefix: &str, vit: &VisionTransformer<f32>) -> Result<()> {
    ckpt.insert(format!("{prefix}config"), config_tensor(&vit.config))?;
    store_params(ckpt, prefix, vit)
}

pub fn restore_vit(ckpt: &Checkpoint, prefix: &str) -> Result<VisionTransformer<f32>> {
    let config = config_from_tensor(ckpt.require(&format!("{prefix}config"))?)?;
    let mut rng = <crate::Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut vit = VisionTransformer::new(config, &mut rng)?;
    restore_params(ckpt, prefix, &mut vit)?;
    Ok(vit)
}

pub fn restore_linear(ckpt: &Checkpoint, prefix: &str) -> Result<Linear<f32>> {
    let w = ckpt.require(&format!("{prefix}weight"))?;
    if w.shape().len() != 2 {
        return Err(Error::Format(format!("`{prefix}weight` is not a matrix")));
    }
    let mut lin = Linear::zeros(w.shape()[0], w.shape()[1]);
    restore_params(ckpt, prefix, &mut lin)?;
    Ok(lin)
}

/// A teacher encoder whose parameters never take gradients, always run in
/// eval mode.
#[derive(Clone, Debug)]
pub struct FrozenTeacher {
    vit: VisionTransformer<f32>,
}

impl FrozenTeacher {
    pub fn new(mut vit: VisionTransformer<f32>) -> Self {
        vit.set_trainable(false);
        FrozenTeacher { vit }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self::new(restore_vit(ckpt, "encoder.")?))
    }

    pub fn encoder(&self) -> &VisionTransformer<f32> {
        &self.vit
    }

    pub fn config(&self) -> &ViTConfig {
        &self.vit.config
    }

    /// Eval-mode features of intact images, detached from any tape.
    pub fn forward(&self, images: &[Tensor<f32>], mode: ExecMode) -> Result<Vec<EncoderOutput<f32>>> {
        par::map(mode, images, |_, img| self.vit.infer(img, None))
            .into_iter()
            .collect()
    }
}
