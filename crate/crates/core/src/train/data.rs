//! CIFAR-10 binary batches and augmentation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_BYTES: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
/// One label byte followed by the R, G and B planes.
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

/// Map a pixel byte to `[-1, 1]`: scale to `[0, 1]`, then mean 0.5, std 0.5.
pub fn normalize_pixel(byte: u8) -> f32 {
    (byte as f32 / 255.0 - 0.5) / 0.5
}

/// Labelled images, each `3×32×32`.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` examples (all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn extend(&mut self, other: Dataset) {
        self.images.extend(other.images);
        self.labels.extend(other.labels);
    }

    /// Shuffled index batches; the final short batch is kept.
    pub fn batches(&self, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    pub fn batch(&self, idx: &[usize]) -> ImageBatch {
        ImageBatch {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: Some(idx.iter().map(|&i| self.labels[i]).collect()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub images: Vec<Tensor<f32>>,
    pub labels: Option<Vec<usize>>,
}

/// Decode concatenated CIFAR-10 records.
pub fn parse_cifar_records(bytes: &[u8], source: &str) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Format(format!(
            "{source}: {} bytes is not a multiple of the {RECORD_BYTES}-byte record size",
            bytes.len()
        )));
    }
    let mut out = Dataset::default();
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= NUM_CLASSES {
            return Err(Error::Format(format!("{source}: record {i} has label {label}")));
        }
        let data = rec[1..].iter().map(|&b| normalize_pixel(b)).collect();
        out.images.push(Tensor::new(vec![3, IMAGE_SIDE, IMAGE_SIDE], data)?);
        out.labels.push(label);
    }
    Ok(out)
}

/// Encode raw images (`3072` bytes each, planar RGB) with labels as records.
pub fn encode_cifar_records(images: &[Vec<u8>], labels: &[u8]) -> Result<Vec<u8>> {
    if images.len() != labels.len() {
        return Err(Error::Contract("image and label counts differ".into()));
    }
    let mut out = Vec::with_capacity(images.len() * RECORD_BYTES);
    for (img, &label) in images.iter().zip(labels) {
        if img.len() != IMAGE_BYTES {
            return Err(Error::Contract(format!("image of {} bytes", img.len())));
        }
        out.push(label);
        out.extend_from_slice(img);
    }
    Ok(out)
}

pub fn read_cifar_file(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar_records(&bytes, &path.display().to_string())
}

#[derive(Debug, Clone)]
pub struct Cifar10 {
    pub train: Dataset,
    pub test: Dataset,
}

/// Directory holding the batch files: `dir` itself or its
/// `cifar-10-batches-bin` child.
pub fn resolve_cifar_dir(dir: &Path) -> Result<PathBuf> {
    for cand in [dir.to_path_buf(), dir.join("cifar-10-batches-bin")] {
        if cand.join(TEST_FILE).is_file() {
            return Ok(cand);
        }
    }
    Err(Error::io(
        dir.join(TEST_FILE),
        std::io::Error::new(std::io::ErrorKind::NotFound, "CIFAR-10 binary batches not found"),
    ))
}

/// Load the training batches (stopping once `train_limit` images are read)
/// and the test batch.
pub fn load_cifar10(dir: &Path, train_limit: Option<usize>) -> Result<Cifar10> {
    let dir = resolve_cifar_dir(dir)?;
    let limit = train_limit.unwrap_or(usize::MAX);
    let mut train = Dataset::default();
    for f in TRAIN_FILES {
        if train.len() >= limit {
            break;
        }
        train.extend(read_cifar_file(&dir.join(f))?);
    }
    let train = train.take(limit);
    let test = read_cifar_file(&dir.join(TEST_FILE))?;
    Ok(Cifar10 { train, test })
}

/// Reflect-pad by `pad`, crop `H×W` at `(top, left)` in padded coordinates,
/// then optionally mirror horizontally.
pub fn augment_with(image: &Tensor<f32>, pad: usize, top: usize, left: usize, flip: bool) -> Tensor<f32> {
    let &[c, h, w] = image.shape() else {
        panic!("augment expects C×H×W");
    };
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut j = i;
        if j < 0 {
            j = -j;
        }
        if j >= n {
            j = 2 * (n - 1) - j;
        }
        j.clamp(0, n - 1) as usize
    };
    let src = image.data();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = reflect((y + top) as isize - pad as isize, h);
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = reflect((x + left) as isize - pad as isize, w);
                out[(ch * h + y) * w + ox] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

/// Random 4-pixel reflect-pad crop plus a horizontal flip with probability ½.
pub fn augment(image: &Tensor<f32>, rng: &mut Rng) -> Tensor<f32> {
    const PAD: usize = 4;
    let top = rng.random_range(0..=2 * PAD);
    let left = rng.random_range(0..=2 * PAD);
    let flip = rng.random_bool(0.5);
    augment_with(image, PAD, top, left, flip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn raw_image(seed: u8) -> Vec<u8> {
        (0..IMAGE_BYTES).map(|i| (i as u8).wrapping_mul(seed)).collect()
    }

    #[test]
    fn record_accounting() {
        assert_eq!(10_000 * RECORD_BYTES, 30_730_000);
        assert_eq!(normalize_pixel(255), 1.0);
        assert_eq!(normalize_pixel(0), -1.0);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let imgs = vec![raw_image(3), raw_image(7)];
        let bytes = encode_cifar_records(&imgs, &[4, 9]).unwrap();
        let ds = parse_cifar_records(&bytes, "mem").unwrap();
        assert_eq!(ds.labels, vec![4, 9]);
        assert_eq!(ds.images[1].data()[5], normalize_pixel(imgs[1][5]));

        assert!(matches!(parse_cifar_records(&bytes[..100], "mem"), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = 10;
        assert!(matches!(parse_cifar_records(&bad, "mem"), Err(Error::Format(_))));
    }

    #[test]
    fn flip_is_involution_and_crop_geometry() {
        let ds = parse_cifar_records(&encode_cifar_records(&[raw_image(5)], &[0]).unwrap(), "m").unwrap();
        let img = &ds.images[0];
        let once = augment_with(img, 4, 4, 4, true);
        let twice = augment_with(&once, 4, 4, 4, true);
        assert_eq!(&twice, img);
        assert_eq!(&augment_with(img, 4, 4, 4, false), img);

        let shifted = augment_with(img, 4, 0, 0, false);
        // offset (0, 0) in padded coordinates moves content by 4; the inner
        // 24×24 window is copied unchanged
        for ch in 0..3 {
            for y in 4..32 {
                for x in 4..32 {
                    let a = shifted.data()[(ch * 32 + y) * 32 + x];
                    let b = img.data()[(ch * 32 + y - 4) * 32 + x - 4];
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn seeded_augmentation_repeats() {
        let ds = parse_cifar_records(&encode_cifar_records(&[raw_image(9)], &[1]).unwrap(), "m").unwrap();
        let a = augment(&ds.images[0], &mut Rng::seed_from_u64(3));
        let b = augment(&ds.images[0], &mut Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn missing_directory_names_path() {
        let err = load_cifar10(Path::new("/nonexistent/cifar"), None).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/cifar"));
    }
}
