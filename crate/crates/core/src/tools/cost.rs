//! Analytic and measured encoder cost for three pretraining styles.
//!
//! FLOPs count multiply-adds as two. Per block, attention costs
//! `4·n²·D` (scores and weighted sum) and the linear layers cost
//! `2·n·D²·(4 + 2·mlp_ratio)` (qkv, projection and the MLP), where `n`
//! includes the `[CLS]` token.

use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::masking::visible_count;
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, VisionTransformer};
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Paradigm {
    /// Mask tokens are fed to the encoder: every position is processed.
    Inpainting,
    /// Encoder on visible tokens, light decoder on all positions.
    Decoder,
    /// Encoder on visible tokens plus feature adaptors.
    Alignment,
}

impl Paradigm {
    pub const ALL: [Paradigm; 3] = [Paradigm::Inpainting, Paradigm::Decoder, Paradigm::Alignment];
}

impl FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inpainting" => Ok(Paradigm::Inpainting),
            "decoder" => Ok(Paradigm::Decoder),
            "alignment" => Ok(Paradigm::Alignment),
            _ => Err(Error::Config(format!(
                "unknown paradigm '{s}' (expected inpainting, decoder or alignment)"
            ))),
        }
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Paradigm::Inpainting => "inpainting",
            Paradigm::Decoder => "decoder",
            Paradigm::Alignment => "alignment",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub num_patches: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    /// Teacher width targeted by the adaptors.
    pub teacher_dim: usize,
    pub top_k: usize,
}

impl ModelDims {
    /// Dimensions of `config`, with a half-width two-block decoder and a
    /// teacher of the same width.
    pub fn from_vit(config: &ViTConfig, top_k: usize) -> Self {
        ModelDims {
            num_patches: config.num_patches(),
            embed_dim: config.embed_dim,
            depth: config.depth,
            mlp_ratio: config.mlp_ratio,
            decoder_dim: (config.embed_dim / 2).max(1),
            decoder_depth: 2,
            teacher_dim: config.embed_dim,
            top_k,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_patches == 0 || self.embed_dim == 0 || self.depth == 0 || self.mlp_ratio <= 0.0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// `(attention, linear)` FLOPs of `depth` blocks over `n` tokens.
pub fn encoder_flops(n: usize, dim: usize, depth: usize, mlp_ratio: f64) -> (f64, f64) {
    let (n, d, l) = (n as f64, dim as f64, depth as f64);
    let attention = 4.0 * n * n * d * l;
    let linear = 2.0 * n * d * d * (4.0 + 2.0 * mlp_ratio) * l;
    (attention, linear)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub paradigm: Paradigm,
    pub mask_ratio: f64,
    /// Patch tokens the encoder processes.
    pub encoder_patch_tokens: usize,
    /// Encoder sequence length including `[CLS]`.
    pub encoder_sequence: usize,
    pub decoder_sequence: usize,
    pub forward_ratio: f64,
    pub attention_flops: f64,
    pub linear_flops: f64,
    /// Decoder blocks or adaptor projections.
    pub extra_flops: f64,
    pub total_flops: f64,
    /// `attention_flops` over the full-input encoder's attention FLOPs.
    pub attention_ratio: f64,
    pub total_ratio: f64,
}

pub fn cost_report(dims: &ModelDims, mask_ratio: f64, paradigm: Paradigm) -> Result<CostReport> {
    dims.validate()?;
    let n = dims.num_patches;
    let visible = visible_count(n, mask_ratio)?;
    let patch_tokens = match paradigm {
        Paradigm::Inpainting => n,
        Paradigm::Decoder | Paradigm::Alignment => visible,
    };
    let seq = patch_tokens + 1;
    let (attn, lin) = encoder_flops(seq, dims.embed_dim, dims.depth, dims.mlp_ratio);
    let (full_attn, full_lin) = encoder_flops(n + 1, dims.embed_dim, dims.depth, dims.mlp_ratio);
    let (decoder_sequence, extra) = match paradigm {
        Paradigm::Inpainting => (0, 0.0),
        Paradigm::Decoder => {
            let (a, l) = encoder_flops(n + 1, dims.decoder_dim, dims.decoder_depth, dims.mlp_ratio);
            let embed = 2.0 * seq as f64 * dims.embed_dim as f64 * dims.decoder_dim as f64;
            (n + 1, a + l + embed)
        }
        Paradigm::Alignment => {
            let per = 2.0 * patch_tokens as f64 * dims.embed_dim as f64 * dims.teacher_dim as f64;
            (0, per * dims.top_k as f64)
        }
    };
    let total = attn + lin + extra;
    Ok(CostReport {
        paradigm,
        mask_ratio,
        encoder_patch_tokens: patch_tokens,
        encoder_sequence: seq,
        decoder_sequence,
        forward_ratio: patch_tokens as f64 / n as f64,
        attention_flops: attn,
        linear_flops: lin,
        extra_flops: extra,
        total_flops: total,
        attention_ratio: attn / full_attn,
        total_ratio: total / (full_attn + full_lin),
    })
}

pub const CSV_HEADER: &str = "paradigm,mask_ratio,patch_tokens,sequence,decoder_sequence,forward_ratio,attention_flops,linear_flops,extra_flops,total_flops,attention_ratio,total_ratio";

impl CostReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.0},{:.0},{:.0},{:.0},{:.6},{:.6}",
            self.paradigm,
            self.mask_ratio,
            self.encoder_patch_tokens,
            self.encoder_sequence,
            self.decoder_sequence,
            self.forward_ratio,
            self.attention_flops,
            self.linear_flops,
            self.extra_flops,
            self.total_flops,
            self.attention_ratio,
            self.total_ratio
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredForward {
    pub full_tokens: usize,
    pub visible_tokens: usize,
    pub full_secs: f64,
    pub visible_secs: f64,
}

impl MeasuredForward {
    pub fn ratio(&self) -> f64 {
        self.visible_secs / self.full_secs
    }
}

/// Median eval-forward time of a randomly initialised encoder on every
/// patch versus the first `visible` patches, on the calling thread.
pub fn measure_forward(config: &ViTConfig, visible: usize, reps: usize, seed: u64) -> Result<MeasuredForward> {
    let mut rng = Rng::seed_from_u64(seed);
    let vit: VisionTransformer<f32> = VisionTransformer::new(config.clone(), &mut rng)?;
    let n = config.num_patches();
    if visible == 0 || visible > n {
        return Err(Error::Config(format!("visible count {visible} outside 1..={n}")));
    }
    let image = Tensor::from_fn(&[config.channels, config.image_h, config.image_w], |i| ((i % 17) as f32 - 8.0) / 8.0);
    let subset: Vec<usize> = (0..visible).collect();
    let time = |idx: Option<&[usize]>| -> Result<f64> {
        vit.infer(&image, idx)?;
        let mut runs = Vec::with_capacity(reps.max(1));
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            std::hint::black_box(vit.infer(&image, idx)?);
            runs.push(t.elapsed().as_secs_f64());
        }
        runs.sort_by(f64::total_cmp);
        Ok(runs[runs.len() / 2])
    };
    Ok(MeasuredForward {
        full_tokens: n + 1,
        visible_tokens: visible + 1,
        full_secs: time(None)?,
        visible_secs: time(Some(&subset))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims196() -> ModelDims {
        ModelDims {
            num_patches: 196,
            embed_dim: 768,
            depth: 12,
            mlp_ratio: 4.0,
            decoder_dim: 512,
            decoder_depth: 8,
            teacher_dim: 768,
            top_k: 5,
        }
    }

    #[test]
    fn forward_ratios() {
        let r = cost_report(&dims196(), 0.7, Paradigm::Alignment).unwrap();
        assert_eq!(r.encoder_patch_tokens, 59);
        assert!((r.forward_ratio - 59.0 / 196.0).abs() < 1e-12);
        assert!((r.attention_ratio - (60.0f64 / 197.0).powi(2)).abs() < 1e-12);
        for p in Paradigm::ALL {
            let r = cost_report(&dims196(), 0.0, p).unwrap();
            assert_eq!(r.forward_ratio, 1.0);
        }
        let inp = cost_report(&dims196(), 0.7, Paradigm::Inpainting).unwrap();
        assert_eq!(inp.total_ratio, 1.0);
        let dec = cost_report(&dims196(), 0.7, Paradigm::Decoder).unwrap();
        assert!(dec.total_ratio > r.total_ratio && dec.total_ratio < 1.0);
    }

    #[test]
    fn paradigm_parse() {
        assert_eq!("decoder".parse::<Paradigm>().unwrap(), Paradigm::Decoder);
        assert!("reconstruct".parse::<Paradigm>().is_err());
    }
}
