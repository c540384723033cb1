//! `[CLS]` attention maps as binary PGM images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::masking::cls_attention_scores;
use crate::tensor::Tensor;
use crate::vit::VisionTransformer;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub width: usize,
    pub height: usize,
    /// Head-averaged `[CLS]`→patch attention, row-major over the patch grid.
    pub scores: Vec<f64>,
    pub bytes: Vec<u8>,
    /// Every score was equal, so the bytes are all zero.
    pub degenerate: bool,
}

/// Last-layer `[CLS]` attention of an intact image in eval mode.
pub fn attention_map(encoder: &VisionTransformer<f32>, image: &Tensor<f32>) -> Result<AttentionMap> {
    let out = encoder.infer(image, None)?;
    let scores = cls_attention_scores(&out.last_attention)?;
    let (height, width) = encoder.config.grid();
    let (bytes, degenerate) = scale_to_bytes(&scores);
    Ok(AttentionMap {
        width,
        height,
        scores,
        bytes,
        degenerate,
    })
}

/// Linear map of `[min, max]` onto `[0, 255]`. A constant input maps to all
/// zeros and reports `true`.
pub fn scale_to_bytes(values: &[f64]) -> (Vec<u8>, bool) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if !(span > 0.0) || !span.is_finite() {
        return (vec![0; values.len()], true);
    }
    let bytes = values
        .iter()
        .map(|&v| ((v - min) / span * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    (bytes, false)
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Contract(format!(
            "{} pixels for a {width}×{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Parse a binary PGM with maxval 255. Comments are not supported.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("PGM header is not ASCII".into()))?);
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("PGM magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval {maxval}")));
    }
    if bytes.len() < pos || bytes.len() - pos != w * h {
        return Err(Error::Format(format!("PGM raster size differs from {w}×{h}")));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

/// Write the map of `image` to `path`.
pub fn export_attention(encoder: &VisionTransformer<f32>, image: &Tensor<f32>, path: &Path) -> Result<AttentionMap> {
    let map = attention_map(encoder, image)?;
    if map.degenerate {
        log::warn!("attention map is constant; writing an all-zero image");
    }
    let pgm = encode_pgm(map.width, map.height, &map.bytes)?;
    std::fs::write(path, pgm).map_err(|e| Error::io(path, e))?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_round_trip() {
        let px: Vec<u8> = (0..64).collect();
        let pgm = encode_pgm(8, 8, &px).unwrap();
        assert_eq!(&pgm[..11], b"P5\n8 8\n255\n");
        assert_eq!(pgm.len(), 11 + 64);
        assert_eq!(parse_pgm(&pgm).unwrap(), (8, 8, px));
        assert!(parse_pgm(&pgm[..40]).is_err());
    }

    #[test]
    fn scaling_rule() {
        let (b, deg) = scale_to_bytes(&[0.1, 0.3, 0.2]);
        assert_eq!(b, vec![0, 255, 128]);
        assert!(!deg);
        let (b, deg) = scale_to_bytes(&[0.5; 4]);
        assert_eq!(b, vec![0; 4]);
        assert!(deg);
    }
}
