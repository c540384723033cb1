//! Vision transformer encoder that runs on an arbitrary subset of patches.
//!
//! The encoder prepends a learnable `[CLS]` token to whichever patch tokens it
//! is given and never touches the dropped positions: attention is computed
//! over exactly `n_visible + 1` tokens.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, Parameters, Scalar, Tensor, Var};
use crate::Rng;

/// Normalisation epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ViTConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub drop_path_rate: f64,
}

impl Default for ViTConfig {
    /// Desk-scale default: 32×32 RGB, 4×4 patches, 6 blocks of width 96.
    fn default() -> Self {
        ViTConfig {
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 96,
            depth: 6,
            num_heads: 3,
            mlp_ratio: 4.0,
            drop_path_rate: 0.1,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_h.is_multiple_of(p) || !self.image_w.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, p
            )));
        }
        if self.channels == 0 || self.depth == 0 || self.num_heads == 0 {
            return Err(Error::Config("channels, depth and num_heads must be positive".into()));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a multiple of 4 for 2-d sin-cos positions",
                self.embed_dim
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_path_rate) {
            return Err(Error::Config(format!(
                "drop_path_rate {} outside [0, 1]",
                self.drop_path_rate
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    /// N = HW / P².
    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }

    /// Stochastic-depth rate of each block, rising linearly from 0 to
    /// `drop_path_rate` at the last block.
    pub fn drop_path_schedule(&self) -> Vec<f64> {
        if self.depth == 1 {
            return vec![self.drop_path_rate];
        }
        (0..self.depth)
            .map(|i| self.drop_path_rate * i as f64 / (self.depth - 1) as f64)
            .collect()
    }
}

/// Split a `C×H×W` image into `N` rows of flattened `P×P×C` patches in
/// raster order. Each row is laid out channel-major.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Contract(format!(
            "patchify expects C×H×W, got {:?}",
            image.shape()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let row = (ch * h + py * patch + dy) * w + px * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, patch * patch * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(
    patches: &Tensor<T>,
    patch: usize,
    channels: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (gh, gw) = (h / patch, w / patch);
    if patches.shape() != [gh * gw, patch * patch * channels] || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::Contract(format!(
            "patches {:?} do not tile a {channels}x{h}x{w} image with patch {patch}",
            patches.shape()
        )));
    }
    let mut out = vec![T::zero(); channels * h * w];
    let src = patches.data();
    let mut k = 0;
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..channels {
                for dy in 0..patch {
                    let row = (ch * h + py * patch + dy) * w + px * patch;
                    out[row..row + patch].copy_from_slice(&src[k..k + patch]);
                    k += patch;
                }
            }
        }
    }
    Tensor::new(vec![channels, h, w], out)
}

/// Fixed 2-d sine-cosine table with a zero row for `[CLS]` first:
/// `(gh·gw + 1) × dim`. The first half of each row encodes the patch row,
/// the second half the patch column.
pub fn sincos_position_table<T: Scalar>(gh: usize, gw: usize, dim: usize) -> Tensor<T> {
    let quarter = dim / 4;
    let mut data = vec![T::zero(); dim];
    for r in 0..gh {
        for c in 0..gw {
            for pos in [r, c] {
                let mut half = vec![0.0f64; dim / 2];
                for k in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    half[k] = (pos as f64 * omega).sin();
                    half[quarter + k] = (pos as f64 * omega).cos();
                }
                data.extend(half.into_iter().map(T::lit));
            }
        }
    }
    Tensor::new(vec![gh * gw + 1, dim], data).expect("table shape")
}

fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::lit(v);
        }
    })
}

/// Affine map `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(input: usize, output: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: Param::new(trunc_normal(&[input, output], 0.02, rng), true),
            bias: Param::new(Tensor::zeros(&[output]), false),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Param::new(Tensor::zeros(&[input, output]), true),
            bias: Param::new(Tensor::zeros(&[output]), false),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T> Parameters<T> for Linear<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// LayerNorm over the feature axis with learnable scale and bias.
#[derive(Clone, Debug)]
pub struct Norm<T> {
    pub scale: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Norm<T> {
    pub fn new(dim: usize) -> Self {
        Norm {
            scale: Param::new(Tensor::full(&[dim], T::one()), false),
            bias: Param::new(Tensor::zeros(&[dim]), false),
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        let s = g.param(&self.scale);
        let b = g.param(&self.bias);
        let axis = g.value(x).shape().len() - 1;
        g.layernorm(x, axis, LN_EPS, Some((s, b)))
    }

    pub fn cast<U: Scalar>(&self) -> Norm<U> {
        Norm {
            scale: self.scale.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<T> Parameters<T> for Norm<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("scale".into(), &self.scale), ("bias".into(), &self.bias)]
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("scale".into(), &mut self.scale), ("bias".into(), &mut self.bias)]
    }
}

fn prefixed<P>(prefix: &str, items: Vec<(String, P)>) -> Vec<(String, P)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub num_heads: usize,
}

impl<T: Scalar> Block<T> {
    pub fn new(dim: usize, num_heads: usize, hidden: usize, rng: &mut Rng) -> Self {
        Block {
            norm1: Norm::new(dim),
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            norm2: Norm::new(dim),
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
            num_heads,
        }
    }

    /// Multi-head self-attention on `x: n×D`. Returns the projected output
    /// and the attention weights as an `h×n×n` tensor.
    pub fn attention<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<(Var, Tensor<T>)> {
        let (n, d) = g.value(x).dims2();
        let h = self.num_heads;
        let dh = d / h;
        let qkv = self.qkv.forward(g, x)?;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut heads = Vec::with_capacity(h);
        let mut weights = Vec::with_capacity(h * n * n);
        for head in 0..h {
            let q = g.slice_cols(qkv, head * dh, dh)?;
            let k = g.slice_cols(qkv, d + head * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + head * dh, dh)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1)?;
            weights.extend_from_slice(g.value(attn).data());
            heads.push(g.matmul(attn, v)?);
        }
        let merged = if h == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let out = self.proj.forward(g, merged)?;
        Ok((out, Tensor::new(vec![h, n, n], weights)?))
    }

    pub fn mlp<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> Result<Var> {
        let hdn = self.fc1.forward(g, x)?;
        let act = g.gelu(hdn);
        self.fc2.forward(g, act)
    }

    /// `x + DropPath(MHSA(LN(x)))`, then `x + DropPath(MLP(LN(x)))`.
    ///
    /// With `rng` present (train mode) each residual branch is dropped with
    /// probability `drop_rate` and survivors are scaled by `1/(1 − drop_rate)`.
    /// Without `rng` (eval mode) both branches always run unscaled. The
    /// attention map is `None` only when the attention branch was dropped.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        x: Var,
        drop_rate: f64,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Var, Option<Tensor<T>>)> {
        let keep = |rng: &mut Option<&mut Rng>| -> Option<T> {
            match rng {
                Some(r) if drop_rate > 0.0 => {
                    if drop_rate >= 1.0 || r.random::<f64>() < drop_rate {
                        None
                    } else {
                        Some(T::lit(1.0 / (1.0 - drop_rate)))
                    }
                }
                _ => Some(T::one()),
            }
        };

        let mut attn_map = None;
        let mut x = x;
        if let Some(s) = keep(&mut rng) {
            let hn = self.norm1.forward(g, x)?;
            let (a, w) = self.attention(g, hn)?;
            attn_map = Some(w);
            let a = if s == T::one() { a } else { g.scale(a, s) };
            x = g.add(x, a)?;
        }
        if let Some(s) = keep(&mut rng) {
            let hn = self.norm2.forward(g, x)?;
            let m = self.mlp(g, hn)?;
            let m = if s == T::one() { m } else { g.scale(m, s) };
            x = g.add(x, m)?;
        }
        Ok((x, attn_map))
    }

    pub fn cast<U: Scalar>(&self) -> Block<U> {
        Block {
            norm1: self.norm1.cast(),
            qkv: self.qkv.cast(),
            proj: self.proj.cast(),
            norm2: self.norm2.cast(),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
            num_heads: self.num_heads,
        }
    }
}

impl<T> Parameters<T> for Block<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        out.extend(prefixed("norm1", self.norm1.params()));
        out.extend(prefixed("qkv", self.qkv.params()));
        out.extend(prefixed("proj", self.proj.params()));
        out.extend(prefixed("norm2", self.norm2.params()));
        out.extend(prefixed("fc1", self.fc1.params()));
        out.extend(prefixed("fc2", self.fc2.params()));
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        out.extend(prefixed("norm1", self.norm1.params_mut()));
        out.extend(prefixed("qkv", self.qkv.params_mut()));
        out.extend(prefixed("proj", self.proj.params_mut()));
        out.extend(prefixed("norm2", self.norm2.params_mut()));
        out.extend(prefixed("fc1", self.fc1.params_mut()));
        out.extend(prefixed("fc2", self.fc2.params_mut()));
        out
    }
}

/// Detached encoder result.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    /// Output of every block (before the final norm), each `(n+1)×D`.
    pub per_block: Vec<Tensor<T>>,
    /// Attention weights of the final block, `h×(n+1)×(n+1)`.
    pub last_attention: Tensor<T>,
    /// Final LayerNorm applied to the last block output.
    pub output: Tensor<T>,
}

/// Encoder result still attached to a graph.
pub struct EncoderVars<T> {
    pub per_block: Vec<Var>,
    pub last_attention: Option<Tensor<T>>,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct VisionTransformer<T> {
    pub config: ViTConfig,
    pub patch_embed: Linear<T>,
    pub cls_token: Param<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: Norm<T>,
}

impl<T: Scalar> VisionTransformer<T> {
    pub fn new(config: ViTConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let (gh, gw) = config.grid();
        let patch_embed = Linear::new(config.patch_dim(), d, rng);
        let cls_token = Param::new(trunc_normal(&[1, d], 0.02, rng), false);
        let blocks = (0..config.depth)
            .map(|_| Block::new(d, config.num_heads, config.mlp_hidden(), rng))
            .collect();
        Ok(VisionTransformer {
            pos_embed: sincos_position_table(gh, gw, d),
            patch_embed,
            cls_token,
            blocks,
            norm: Norm::new(d),
            config,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Patch tokens at `visible` (projected, with positions added), preceded
    /// by `[CLS]`: `(|visible| + 1)×D`.
    pub fn embed<'a>(&'a self, g: &mut Graph<'a, T>, patches: &Tensor<T>, visible: &[usize]) -> Result<Var> {
        let n = self.config.num_patches();
        if patches.shape() != [n, self.config.patch_dim()] {
            return Err(Error::Dimension {
                op: "embed",
                lhs: patches.shape().to_vec(),
                rhs: vec![n, self.config.patch_dim()],
            });
        }
        let rows = g.constant(patches.gather_rows(visible)?);
        let tokens = self.patch_embed.forward(g, rows)?;
        let pos_rows: Vec<usize> = visible.iter().map(|&i| i + 1).collect();
        let pos = g.constant(self.pos_embed.gather_rows(&pos_rows)?);
        let tokens = g.add(tokens, pos)?;
        let cls = g.param(&self.cls_token);
        let cls_pos = g.constant(self.pos_embed.gather_rows(&[0])?);
        let cls = g.add(cls, cls_pos)?;
        g.concat_rows(&[cls, tokens])
    }

    /// Run every block on `tokens`. `rng` selects train mode (stochastic
    /// depth active); `None` is eval mode.
    pub fn encode<'a>(&'a self, g: &mut Graph<'a, T>, tokens: Var, mut rng: Option<&mut Rng>) -> Result<EncoderVars<T>> {
        let d = g.value(tokens).dims2().1;
        if d != self.config.embed_dim {
            return Err(Error::Dimension {
                op: "encode",
                lhs: g.value(tokens).shape().to_vec(),
                rhs: vec![self.config.embed_dim],
            });
        }
        let rates = self.config.drop_path_schedule();
        let mut x = tokens;
        let mut per_block = Vec::with_capacity(self.blocks.len());
        let mut last_attention = None;
        for (block, &rate) in self.blocks.iter().zip(&rates) {
            let (y, attn) = block.forward(g, x, rate, rng.as_deref_mut())?;
            x = y;
            per_block.push(x);
            last_attention = attn;
        }
        let output = self.norm.forward(g, x)?;
        Ok(EncoderVars {
            per_block,
            last_attention,
            output,
        })
    }

    /// Patchify, embed the given visible set (all patches when `None`) and
    /// run the encoder.
    pub fn forward_image<'a>(
        &'a self,
        g: &mut Graph<'a, T>,
        image: &Tensor<T>,
        visible: Option<&[usize]>,
        rng: Option<&mut Rng>,
    ) -> Result<EncoderVars<T>> {
        let patches = patchify(image, self.config.patch_size)?;
        let all: Vec<usize>;
        let idx = match visible {
            Some(v) => v,
            None => {
                all = (0..self.config.num_patches()).collect();
                &all
            }
        };
        let tokens = self.embed(g, &patches, idx)?;
        self.encode(g, tokens, rng)
    }

    /// Eval-mode forward with every intermediate detached.
    pub fn infer(&self, image: &Tensor<T>, visible: Option<&[usize]>) -> Result<EncoderOutput<T>> {
        let mut g = Graph::new();
        let vars = self.forward_image(&mut g, image, visible, None)?;
        Ok(EncoderOutput {
            per_block: vars.per_block.iter().map(|&v| g.value(v).clone()).collect(),
            last_attention: vars.last_attention.expect("eval mode keeps every branch"),
            output: g.value(vars.output).clone(),
        })
    }

    /// Freeze or unfreeze every parameter.
    pub fn set_trainable(&mut self, on: bool) {
        for (_, p) in self.params_mut() {
            p.set_requires_grad(on);
        }
    }

    pub fn cast<U: Scalar>(&self) -> VisionTransformer<U> {
        VisionTransformer {
            config: self.config.clone(),
            patch_embed: self.patch_embed.cast(),
            cls_token: self.cls_token.cast(),
            pos_embed: self.pos_embed.cast(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            norm: self.norm.cast(),
        }
    }
}

impl<T> Parameters<T> for VisionTransformer<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        out.extend(prefixed("patch_embed", self.patch_embed.params()));
        out.push(("cls_token".into(), &self.cls_token));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("blocks.{i}"), b.params()));
        }
        out.extend(prefixed("norm", self.norm.params()));
        out
    }
    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        out.extend(prefixed("patch_embed", self.patch_embed.params_mut()));
        out.push(("cls_token".into(), &mut self.cls_token));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(prefixed(&format!("blocks.{i}"), b.params_mut()));
        }
        out.extend(prefixed("norm", self.norm.params_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny(depth: usize) -> ViTConfig {
        ViTConfig {
            image_h: 8,
            image_w: 8,
            channels: 3,
            patch_size: 2,
            embed_dim: 8,
            depth,
            num_heads: 2,
            mlp_ratio: 2.0,
            drop_path_rate: 0.0,
        }
    }

    fn image(cfg: &ViTConfig, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::seed_from_u64(seed);
        Tensor::from_fn(&[cfg.channels, cfg.image_h, cfg.image_w], |_| rng.random::<f32>() * 2.0 - 1.0)
    }

    #[test]
    fn patch_counts() {
        let img = Tensor::<f32>::zeros(&[3, 224, 224]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[196, 768]);
        let img = Tensor::<f32>::zeros(&[3, 32, 32]);
        assert_eq!(patchify(&img, 4).unwrap().shape(), &[64, 48]);
        let img = Tensor::<f32>::zeros(&[3, 30, 30]);
        assert!(matches!(patchify(&img, 4), Err(Error::Config(_))));
    }

    #[test]
    fn patchify_round_trip() {
        let cfg = tiny(1);
        let img = image(&cfg, 1);
        let p = patchify(&img, 2).unwrap();
        let back = unpatchify(&p, 2, 3, 8, 8).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn config_validation() {
        let mut c = ViTConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.num_patches(), 64);
        c.num_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ViTConfig::default();
        c.image_h = 30;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embed_token_counts() {
        let cfg = ViTConfig {
            image_h: 224,
            image_w: 224,
            patch_size: 16,
            depth: 1,
            ..ViTConfig::default()
        };
        let mut rng = Rng::seed_from_u64(0);
        let vit = VisionTransformer::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let patches = Tensor::zeros(&[196, 768]);
        let mut g = Graph::new();
        let all: Vec<usize> = (0..196).collect();
        let t = vit.embed(&mut g, &patches, &all).unwrap();
        assert_eq!(g.value(t).shape(), &[197, 96]);
        let vis: Vec<usize> = (0..59).map(|i| i * 3).collect();
        let t = vit.embed(&mut g, &patches, &vis).unwrap();
        assert_eq!(g.value(t).shape(), &[60, 96]);
    }

    #[test]
    fn per_block_shapes_and_attention_rows() {
        let mut cfg = ViTConfig::default();
        cfg.depth = 6;
        let mut rng = Rng::seed_from_u64(3);
        let vit = VisionTransformer::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let img = image(&cfg, 2);
        let vis: Vec<usize> = (0..19).map(|i| i * 3).collect();
        let out = vit.infer(&img, Some(&vis)).unwrap();
        assert_eq!(out.per_block.len(), 6);
        for m in &out.per_block {
            assert_eq!(m.shape(), &[20, 96]);
        }
        assert_eq!(out.last_attention.shape(), &[3, 20, 20]);
        for row in out.last_attention.data().chunks(20) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        let full = vit.infer(&img, None).unwrap();
        assert_eq!(full.per_block[0].shape(), &[65, 96]);
    }

    #[test]
    fn drop_path_degenerate_and_eval_paths() {
        let cfg = tiny(1);
        let mut rng = Rng::seed_from_u64(4);
        let vit = VisionTransformer::<f32>::new(cfg.clone(), &mut rng).unwrap();
        let patches = patchify(&image(&cfg, 5), 2).unwrap();
        let all: Vec<usize> = (0..16).collect();
        let block = &vit.blocks[0];

        let mut g = Graph::new();
        let x = vit.embed(&mut g, &patches, &all).unwrap();
        let mut r = Rng::seed_from_u64(9);
        let (y, attn) = block.forward(&mut g, x, 1.0, Some(&mut r)).unwrap();
        assert!(attn.is_none());
        assert_eq!(g.value(y), g.value(x));

        let (eval, _) = block.forward(&mut g, x, 0.0, None).unwrap();
        let (train0, _) = block.forward(&mut g, x, 0.0, Some(&mut r)).unwrap();
        let (eval2, _) = block.forward(&mut g, x, 0.3, None).unwrap();
        assert_eq!(g.value(eval), g.value(train0));
        assert_eq!(g.value(eval), g.value(eval2));
    }

    #[test]
    fn permuted_visible_set_permutes_rows() {
        let cfg = tiny(2);
        let mut rng = Rng::seed_from_u64(6);
        let vit = VisionTransformer::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let img = image(&cfg, 7).cast::<f64>();
        let v = [1usize, 4, 9, 12, 15];
        let perm = [12usize, 1, 15, 9, 4];
        let a = vit.infer(&img, Some(&v)).unwrap();
        let b = vit.infer(&img, Some(&perm)).unwrap();
        for (ma, mb) in a.per_block.iter().zip(&b.per_block) {
            assert!(ma.row(0).iter().zip(mb.row(0)).all(|(x, y)| (x - y).abs() < 1e-12));
            for (k, &idx) in perm.iter().enumerate() {
                let src = v.iter().position(|&x| x == idx).unwrap();
                let (ra, rb) = (ma.row(src + 1), mb.row(k + 1));
                assert!(ra.iter().zip(rb).all(|(x, y)| (x - y).abs() < 1e-12));
            }
        }
    }
}
