use std::path::Path;

use super::{read_maybe_gz, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn fmt_err<T>(offset: u64, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset,
        msg: msg.into(),
    })
}

fn be_u32(b: &[u8], at: usize) -> Result<u32> {
    match b.get(at..at + 4) {
        Some(s) => Ok(u32::from_be_bytes(s.try_into().unwrap())),
        None => fmt_err(at as u64, "truncated IDX header"),
    }
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGES_MAGIC {
        return fmt_err(
            0,
            format!("image file magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        );
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let need = n.checked_mul(h).and_then(|v| v.checked_mul(w));
    match need {
        Some(need) if bytes.len() - 16 == need => Ok((n, h, w, &bytes[16..])),
        _ => fmt_err(
            16,
            format!(
                "header promises {n}x{h}x{w} pixels, file holds {}",
                bytes.len() - 16
            ),
        ),
    }
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABELS_MAGIC {
        return fmt_err(
            0,
            format!("label file magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        );
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() - 8 != n {
        return fmt_err(
            8,
            format!("header promises {n} labels, file holds {}", bytes.len() - 8),
        );
    }
    Ok(&bytes[8..])
}

fn load_pair(dir: &Path, images: &str, labels: &str, split: &str) -> Result<Option<Dataset>> {
    let (img, lab) = match (read_maybe_gz(dir, images)?, read_maybe_gz(dir, labels)?) {
        (Some(i), Some(l)) => (i, l),
        (None, None) => return Ok(None),
        (Some(_), None) | (None, Some(_)) => {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!(
                    "{split}: found only one of {images} / {labels} in {}",
                    dir.display()
                ),
            )))
        }
    };
    let (n, h, w, pixels) = parse_idx_images(&img.1)?;
    let labels = parse_idx_labels(&lab.1)?;
    if labels.len() != n {
        return fmt_err(
            4,
            format!(
                "{} has {n} images but {} has {} labels",
                img.0.display(),
                lab.0.display(),
                labels.len()
            ),
        );
    }
    if let Some(pos) = labels.iter().position(|&y| y >= 10) {
        return fmt_err(
            8 + pos as u64,
            format!("label {} out of range", labels[pos]),
        );
    }
    let data = pixels
        .iter()
        .map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    let images = Tensor::new(vec![n, 1, h, w], data)?;
    Ok(Some(Dataset::new(
        images,
        labels.iter().map(|&y| y as usize).collect(),
        10,
        split,
    )?))
}

/// Loads `train-*` and `t10k-*` IDX files (optionally gzipped) from `dir`.
///
/// A missing test pair yields an empty test set so callers can carve a
/// holdout split from the training data.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_pair(
        dir,
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "train",
    )?
    .ok_or_else(|| {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no MNIST training files in {}", dir.display()),
        ))
    })?;
    let test = load_pair(
        dir,
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
        "test",
    )?
    .unwrap_or_else(|| Dataset::empty(train.sample_shape(), 10, "test"));
    Ok((train, test))
}
