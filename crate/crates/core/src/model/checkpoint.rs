//! Checkpoint file: `"BONN"`, `u32` version, then tagged length-prefixed
//! sections `ARCH` (JSON), `META` (JSON), `PARM`, `CENT`, `OPTM`.
//! All floats are 32-bit little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use super::io::{payload, Reader, Writer};
use super::params::Params;
use crate::bayes::{BayesHyper, FeatureCenters, SIGMA_FLOOR};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BONN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    /// Epochs completed.
    pub epoch: u64,
    /// Optimizer steps completed.
    pub step: u64,
    pub seed: u64,
    pub hyper: BayesHyper,
    pub phase: String,
    pub best_test_acc: Option<f64>,
    /// Free-form training configuration.
    pub config: serde_json::Value,
}

impl TrainMeta {
    pub fn fresh(seed: u64, hyper: BayesHyper) -> Self {
        Self {
            epoch: 0,
            step: 0,
            seed,
            hyper,
            phase: "main".into(),
            best_test_acc: None,
            config: serde_json::Value::Null,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub params: Params<f32>,
    pub meta: TrainMeta,
    /// Optimizer state (momentum buffers), opaque to this module.
    pub optimizer: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.section(b"ARCH", &to_json(&self.arch)?);
        w.section(b"META", &to_json(&self.meta)?);
        let bufs = self.params.buffers();
        let flags: Vec<u8> = self
            .params
            .bns
            .iter()
            .map(|b| b.state.initialized as u8)
            .collect();
        w.section(
            b"PARM",
            &payload(|p| {
                p.u32(bufs.len() as u32);
                for b in &bufs {
                    p.array(b);
                }
                p.u32(flags.len() as u32);
                for f in &flags {
                    p.u8(*f);
                }
            }),
        );
        let c = &self.params.centers;
        w.section(
            b"CENT",
            &payload(|p| {
                p.u32(c.classes() as u32);
                p.u32(c.dim() as u32);
                p.f32s(&[c.center_lr]);
                p.f32s(c.centers_flat());
                p.f32s(c.sigmas_flat());
            }),
        );
        w.section(
            b"OPTM",
            &payload(|p| {
                p.u32(self.optimizer.len() as u32);
                for b in &self.optimizer {
                    p.array(b);
                }
            }),
        );
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;

        let mut s = r.section(b"ARCH")?;
        let arch: Architecture = parse_json(&mut s)?;
        let at = s.offset();
        arch.validate().map_err(|e| Error::Format {
            offset: at,
            msg: format!("stored architecture is invalid: {e}"),
        })?;

        let mut s = r.section(b"META")?;
        let meta: TrainMeta = parse_json(&mut s)?;

        let mut params = Params::<f32>::zeros(&arch)?;
        let mut s = r.section(b"PARM")?;
        {
            let mut bufs = params.buffers_mut();
            let n = s.u32()? as usize;
            if n != bufs.len() {
                return s.fail(format!(
                    "{n} parameter buffers stored, architecture has {}",
                    bufs.len()
                ));
            }
            for (i, b) in bufs.iter_mut().enumerate() {
                let v = s.array(b.len(), &format!("buffer {i}"))?;
                b.copy_from_slice(&v);
            }
        }
        let n = s.u32()? as usize;
        if n != params.bns.len() {
            return s.fail(format!(
                "{n} batch-norm flags for {} layers",
                params.bns.len()
            ));
        }
        for b in &mut params.bns {
            b.state.initialized = match s.u8()? {
                0 => false,
                1 => true,
                v => return s.fail(format!("batch-norm flag {v} is not 0/1")),
            };
        }
        s.finish()?;
        let floor = SIGMA_FLOOR as f32;
        for (i, c) in params.convs.iter().enumerate() {
            if let Some(b) = &c.binary {
                if b.prior.sigma.iter().any(|&v| !(v >= floor)) {
                    return Err(Error::Format {
                        offset: s.offset(),
                        msg: format!("conv {i} has a spread below the floor"),
                    });
                }
            }
        }

        let mut s = r.section(b"CENT")?;
        let classes = s.u32()? as usize;
        let dim = s.u32()? as usize;
        if classes != arch.classes || dim != arch.feature_dim {
            return s.fail(format!(
                "centers are {classes}x{dim}, architecture needs {}x{}",
                arch.classes, arch.feature_dim
            ));
        }
        let lr = s.f32s(1)?[0];
        let centers = s.f32s(classes * dim)?;
        let sigmas = s.f32s(classes * dim)?;
        let at = s.offset();
        s.finish()?;
        params.centers =
            FeatureCenters::from_parts(classes, dim, centers, sigmas, lr).map_err(|e| {
                Error::Format {
                    offset: at,
                    msg: e.to_string(),
                }
            })?;

        let mut s = r.section(b"OPTM")?;
        let n = s.u32()? as usize;
        let mut optimizer = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let at = s.offset();
            let len = s.u32()? as usize;
            if len > s.remaining() / 4 {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("optimizer buffer of {len} values exceeds the section"),
                });
            }
            optimizer.push(s.f32s(len)?);
        }
        s.finish()?;
        r.finish()?;
        Ok(Self {
            arch,
            params,
            meta,
            optimizer,
        })
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| Error::Config(e.to_string()))
}

fn parse_json<T: serde::de::DeserializeOwned>(s: &mut Reader<'_>) -> Result<T> {
    let at = s.offset();
    let n = s.remaining();
    let bytes = s.take(n)?;
    serde_json::from_slice(bytes).map_err(|e| Error::Format {
        offset: at,
        msg: format!("malformed JSON: {e}"),
    })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
