//! Datasets: MNIST (IDX) and CIFAR-10 (binary batches), augmentation and
//! stratified sampling.

mod augment;
mod cifar;
mod mnist;
mod sample;

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

pub use augment::{augment, crop_flip, Augment, CIFAR_PAD};
pub use cifar::{
    load_cifar10, parse_cifar_batch, ppm_decode, ppm_encode, CifarRecord, CIFAR_MEAN, CIFAR_RECORD,
    CIFAR_STD,
};
pub use mnist::{load_mnist, parse_idx_images, parse_idx_labels, MNIST_MEAN, MNIST_STD};
pub use sample::{split, subset, subset_indices};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Normalized images with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        classes: usize,
        split: &str,
    ) -> Result<Self> {
        let [n, ..] = images.dims4("Dataset")?;
        if n != labels.len() {
            return dim_err("Dataset", format!("{n} images but {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index {
                what: "label",
                index: bad,
                limit: classes,
            });
        }
        Ok(Self {
            images,
            labels,
            classes,
            split: split.to_string(),
        })
    }

    /// Zero-sample dataset with the given per-sample shape.
    pub fn empty(sample: [usize; 3], classes: usize, split: &str) -> Self {
        Self {
            images: Tensor::zeros(&[0, sample[0], sample[1], sample[2]]),
            labels: Vec::new(),
            classes,
            split: split.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split.clone(),
        })
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let d = self.select(indices)?;
        Ok((d.images, d.labels))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }
}

/// Reads `dir/name`, or `dir/name.gz` decompressed, whichever exists.
pub(crate) fn read_maybe_gz(dir: &Path, name: &str) -> Result<Option<(PathBuf, Vec<u8>)>> {
    let plain = dir.join(name);
    if plain.is_file() {
        return Ok(Some((plain.clone(), std::fs::read(&plain)?)));
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        let mut out = Vec::new();
        GzDecoder::new(File::open(&gz)?).read_to_end(&mut out)?;
        return Ok(Some((gz, out)));
    }
    Ok(None)
}
