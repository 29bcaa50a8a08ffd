use std::path::Path;

use super::{read_maybe_gz, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One label byte followed by 32×32 R, G and B planes.
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    /// Planar `[3, 32, 32]`.
    pub pixels: Vec<u8>,
}

pub fn parse_cifar_batch(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format {
            offset: (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
            msg: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, r)| {
            if r[0] >= 10 {
                return Err(Error::Format {
                    offset: (i * CIFAR_RECORD) as u64,
                    msg: format!("label byte {} in record {i}", r[0]),
                });
            }
            Ok(CifarRecord {
                label: r[0],
                pixels: r[1..].to_vec(),
            })
        })
        .collect()
}

fn to_dataset(records: &[CifarRecord], split: &str) -> Result<Dataset> {
    let plane = 32 * 32;
    let mut data = Vec::with_capacity(records.len() * 3 * plane);
    for r in records {
        for (i, &p) in r.pixels.iter().enumerate() {
            let c = i / plane;
            data.push((p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
        }
    }
    let images = Tensor::new(vec![records.len(), 3, 32, 32], data)?;
    Dataset::new(
        images,
        records.iter().map(|r| r.label as usize).collect(),
        10,
        split,
    )
}

fn read_batches(dir: &Path, names: &[&str]) -> Result<Vec<CifarRecord>> {
    let mut all = Vec::new();
    for name in names {
        let (_, bytes) = read_maybe_gz(dir, name)?.ok_or_else(|| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("missing {name} in {}", dir.display()),
            ))
        })?;
        all.extend(parse_cifar_batch(&bytes)?);
    }
    Ok(all)
}

/// Loads the five training batches and the test batch from `dir`
/// (or its `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let mut dir = dir.as_ref().to_path_buf();
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        dir = nested;
    }
    let train = to_dataset(&read_batches(&dir, &TRAIN_FILES)?, "train")?;
    let test = to_dataset(&read_batches(&dir, &[TEST_FILE])?, "test")?;
    Ok((train, test))
}

/// Binary PPM (P6) of a planar RGB image.
pub fn ppm_encode(planes: &[u8], height: usize, width: usize) -> Vec<u8> {
    let plane = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for i in 0..plane {
        out.extend_from_slice(&[planes[i], planes[plane + i], planes[2 * plane + i]]);
    }
    out
}

/// Parses a P6 PPM with maxval 255 into `(height, width, planar RGB)`.
pub fn ppm_decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                msg: "truncated PPM header".into(),
            });
        }
        fields.push((
            start,
            String::from_utf8_lossy(&bytes[start..pos]).into_owned(),
        ));
    }
    pos += 1;
    let bad = |i: usize, msg: &str| Error::Format {
        offset: fields[i].0 as u64,
        msg: msg.into(),
    };
    if fields[0].1 != "P6" {
        return Err(bad(0, "not a binary PPM (P6)"));
    }
    let width: usize = fields[1].1.parse().map_err(|_| bad(1, "bad width"))?;
    let height: usize = fields[2].1.parse().map_err(|_| bad(2, "bad height"))?;
    if fields[3].1 != "255" {
        return Err(bad(3, "only maxval 255 is supported"));
    }
    let plane = width * height;
    if bytes.len() < pos || bytes.len() - pos != 3 * plane {
        return Err(Error::Format {
            offset: pos.min(bytes.len()) as u64,
            msg: format!("expected {} pixel bytes", 3 * plane),
        });
    }
    let mut planes = vec![0u8; 3 * plane];
    for (i, px) in bytes[pos..].chunks_exact(3).enumerate() {
        for c in 0..3 {
            planes[c * plane + i] = px[c];
        }
    }
    Ok((height, width, planes))
}
