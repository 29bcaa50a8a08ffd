//! Deployable form: binary kernels as sign bits plus a per-output-channel
//! scale, everything else as 32-bit floats.
//!
//! Layout: `"BONP"`, `u32` version, then sections `ARCH` (JSON), `PLCY`
//! (one byte per conv, 1 = binary), `CONV`, `NORM`, `LINR`. A binary conv
//! occupies `ceil(O·C·k·k / 64)·8` bytes of sign words followed by `4·O`
//! bytes of scales.

use super::arch::{Architecture, ConvSpec};
use super::checkpoint::Checkpoint;
use super::io::{payload, Reader, Writer};
use super::params::{BnParams, LinearParams, Params};
use super::program::{Op, Program};
use crate::binarize::{binary_conv2d, pack_bits, pack_input, sign, BitPackedTensor, PackedRows};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{batch_norm, conv2d, linear, pool2d, BnMode, BnState, Tensor};

pub const PACKED_MAGIC: &[u8; 4] = b"BONP";
pub const PACKED_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum PackedConv {
    Binary {
        bits: BitPackedTensor,
        rows: PackedRows,
        alphas: Vec<f32>,
    },
    Float {
        kernels: Tensor<f32>,
    },
}

/// Bytes a binary conv occupies in the packed format.
pub fn packed_binary_bytes(spec: &ConvSpec) -> usize {
    spec.weight_count().div_ceil(64) * 8 + 4 * spec.out_channels
}

#[derive(Clone, Debug)]
pub struct PackedModel {
    pub arch: Architecture,
    program: Program,
    pub convs: Vec<PackedConv>,
    pub bns: Vec<BnParams<f32>>,
    pub linears: Vec<LinearParams<f32>>,
}

impl PackedModel {
    pub fn from_params(arch: &Architecture, params: &Params<f32>) -> Result<Self> {
        params.check(arch)?;
        let convs = params
            .convs
            .iter()
            .map(|c| match &c.binary {
                Some(b) => {
                    let bits = pack_bits(&c.kernels);
                    let rows = PackedRows::from_flat(&bits)?;
                    let alphas = vec![b.modulation.alpha(); c.kernels.shape()[0]];
                    Ok(PackedConv::Binary { bits, rows, alphas })
                }
                None => Ok(PackedConv::Float {
                    kernels: c.kernels.clone(),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch: arch.clone(),
            program: Program::compile(arch)?,
            convs,
            bns: params.bns.clone(),
            linears: params.linears.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(PACKED_MAGIC, PACKED_VERSION);
        let arch = serde_json::to_vec(&self.arch).map_err(|e| Error::Config(e.to_string()))?;
        w.section(b"ARCH", &arch);
        w.section(
            b"PLCY",
            &payload(|p| {
                p.u32(self.convs.len() as u32);
                for c in &self.convs {
                    p.u8(matches!(c, PackedConv::Binary { .. }) as u8);
                }
            }),
        );
        w.section(
            b"CONV",
            &payload(|p| {
                for c in &self.convs {
                    match c {
                        PackedConv::Binary { bits, alphas, .. } => {
                            for word in bits.words() {
                                p.u64(*word);
                            }
                            p.f32s(alphas);
                        }
                        PackedConv::Float { kernels } => p.f32s(kernels.data()),
                    }
                }
            }),
        );
        w.section(
            b"NORM",
            &payload(|p| {
                for b in &self.bns {
                    p.u8(b.state.initialized as u8);
                    for v in [
                        &b.gamma,
                        &b.beta,
                        &b.state.running_mean,
                        &b.state.running_var,
                    ] {
                        p.f32s(v);
                    }
                }
            }),
        );
        w.section(
            b"LINR",
            &payload(|p| {
                for l in &self.linears {
                    p.f32s(l.weight.data());
                    p.f32s(&l.bias);
                }
            }),
        );
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(PACKED_MAGIC, PACKED_VERSION)?;
        let mut s = r.section(b"ARCH")?;
        let at = s.offset();
        let raw = s.take(s.remaining())?;
        let arch: Architecture = serde_json::from_slice(raw).map_err(|e| Error::Format {
            offset: at,
            msg: format!("malformed JSON: {e}"),
        })?;
        let program = Program::compile(&arch).map_err(|e| Error::Format {
            offset: at,
            msg: format!("stored architecture is invalid: {e}"),
        })?;
        let specs = arch.convs();

        let mut s = r.section(b"PLCY")?;
        let n = s.u32()? as usize;
        if n != specs.len() {
            return s.fail(format!(
                "policy lists {n} convs, architecture has {}",
                specs.len()
            ));
        }
        for spec in &specs {
            let flag = s.u8()?;
            if flag != spec.binary as u8 {
                return s.fail("layer policy disagrees with the architecture");
            }
        }
        s.finish()?;

        let mut s = r.section(b"CONV")?;
        let mut convs = Vec::with_capacity(specs.len());
        for spec in &specs {
            let shape = vec![
                spec.out_channels,
                spec.in_channels,
                spec.kernel,
                spec.kernel,
            ];
            if spec.binary {
                let at = s.offset();
                let words = (0..spec.weight_count().div_ceil(64))
                    .map(|_| s.u64())
                    .collect::<Result<Vec<_>>>()?;
                let bits =
                    BitPackedTensor::from_words(shape, words).map_err(|e| Error::Format {
                        offset: at,
                        msg: e.to_string(),
                    })?;
                let rows = PackedRows::from_flat(&bits)?;
                let alphas = s.f32s(spec.out_channels)?;
                convs.push(PackedConv::Binary { bits, rows, alphas });
            } else {
                let data = s.f32s(spec.weight_count())?;
                convs.push(PackedConv::Float {
                    kernels: Tensor::new(shape, data)?,
                });
            }
        }
        s.finish()?;

        let mut s = r.section(b"NORM")?;
        let mut bns = Vec::new();
        for c in arch.batch_norms() {
            let initialized = match s.u8()? {
                0 => false,
                1 => true,
                v => return s.fail(format!("batch-norm flag {v} is not 0/1")),
            };
            let gamma = s.f32s(c)?;
            let beta = s.f32s(c)?;
            let running_mean = s.f32s(c)?;
            let running_var = s.f32s(c)?;
            bns.push(BnParams {
                gamma,
                beta,
                state: BnState {
                    running_mean,
                    running_var,
                    initialized,
                },
            });
        }
        s.finish()?;

        let mut s = r.section(b"LINR")?;
        let mut linears = Vec::new();
        for (i, o) in arch.linears() {
            let weight = Tensor::new(vec![o, i], s.f32s(i * o)?)?;
            let bias = s.f32s(o)?;
            linears.push(LinearParams { weight, bias });
        }
        s.finish()?;
        r.finish()?;
        Ok(Self {
            arch,
            program,
            convs,
            bns,
            linears,
        })
    }

    /// Inference with XNOR/popcount binary convolutions and eval-mode BN.
    pub fn forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let prog = &self.program;
        let n = input.shape().first().copied().unwrap_or(0);
        if input.shape() != prog.shapes[0].batched(n).as_slice() {
            return dim_err(
                "packed forward",
                format!(
                    "input {:?} does not match network input {:?}",
                    input.shape(),
                    self.arch.input
                ),
            );
        }
        let mut values = vec![input.clone()];
        for node in &prog.nodes {
            let x = &values[node.input];
            let out = match &node.op {
                Op::Conv { slot, spec } => match &self.convs[*slot] {
                    PackedConv::Binary { rows, alphas, .. } => {
                        binary_conv2d(&pack_input(x, spec.geometry())?, rows, alphas)?
                    }
                    PackedConv::Float { kernels } => conv2d(x, kernels, spec.geometry())?,
                },
                Op::Bn { slot } => {
                    let b = &self.bns[*slot];
                    let mut state = b.state.clone();
                    batch_norm(x, &b.gamma, &b.beta, &mut state, BnMode::Eval)?.0
                }
                Op::BinAct => x.map(sign),
                Op::Pool {
                    kind,
                    window,
                    stride,
                } => pool2d(x, *kind, *window, *stride)?.0,
                Op::Linear { slot } => {
                    let l = &self.linears[*slot];
                    let d = x.len() / n.max(1);
                    linear(&x.clone().reshape(&[n, d])?, &l.weight, &l.bias)?
                }
                Op::Add { other } => x.add(&values[*other])?,
            };
            values.push(out);
        }
        Ok(values.pop().expect("program has an output"))
    }

    /// Serialized bytes of each conv's weight payload, in slot order.
    pub fn conv_payload_bytes(&self) -> Vec<usize> {
        self.convs
            .iter()
            .map(|c| match c {
                PackedConv::Binary { bits, alphas, .. } => {
                    bits.words().len() * 8 + alphas.len() * 4
                }
                PackedConv::Float { kernels } => kernels.len() * 4,
            })
            .collect()
    }
}

pub fn export_packed(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    PackedModel::from_params(&ckpt.arch, &ckpt.params)?.to_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_layer_size_formula() {
        let s = ConvSpec::binary(16, 32, 1);
        assert_eq!(packed_binary_bytes(&s), (4608usize).div_ceil(64) * 8 + 128);
        let s = ConvSpec::binary(3, 5, 1);
        assert_eq!(packed_binary_bytes(&s), 135usize.div_ceil(64) * 8 + 20);
    }
}
