use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use super::params::Params;
use super::program::{Op, Program};
use crate::binarize::{
    activation_ste_grad, kernel_ste_grad, modulation_ste_grad, sign, sign_binarize,
};
use crate::error::{dim_err, Result};
use crate::tensor::{
    batch_norm, batch_norm_vjp, conv2d, conv2d_vjp, linear, linear_vjp, pad2d, pad2d_vjp, pool2d,
    pool2d_vjp, BnCache, BnMode, ConvGeometry, PoolCache, Real, Tensor,
};

/// Execution mode. The float modes skip every binarization and serve as the
/// full-precision reference network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    BinaryTrain,
    BinaryEval,
    FloatTrain,
    FloatEval,
}

impl Mode {
    pub fn is_binary(self) -> bool {
        matches!(self, Mode::BinaryTrain | Mode::BinaryEval)
    }

    pub fn bn_mode(self) -> BnMode {
        match self {
            Mode::BinaryTrain | Mode::FloatTrain => BnMode::Train,
            Mode::BinaryEval | Mode::FloatEval => BnMode::Eval,
        }
    }
}

enum OpCache<T> {
    None,
    FloatConv,
    /// `padded` is the ±1 input padded with +1, `signs` is `sign(X)`.
    BinaryConv {
        padded: Tensor<T>,
        signs: Tensor<T>,
        alpha: T,
    },
    Bn(BnCache<T>),
    Pool(PoolCache),
}

/// Everything [`backward`] needs from one forward pass.
pub struct Cache<T = f32> {
    program: Program,
    mode: Mode,
    values: Vec<Tensor<T>>,
    ops: Vec<OpCache<T>>,
}

impl<T: Real> Cache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Activation tensors in execution order; index 0 is the input.
    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }
}

pub struct ForwardOutput<T = f32> {
    pub logits: Tensor<T>,
    /// Input of the final linear layer, `[N, K]`.
    pub features: Tensor<T>,
    pub cache: Cache<T>,
}

fn flatten<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let n = t.shape()[0];
    let d = if n == 0 { 0 } else { t.len() / n };
    t.clone().reshape(&[n, d])
}

/// Runs the network. Training modes update the BN running statistics.
pub fn forward<T: Real>(
    arch: &Architecture,
    params: &mut Params<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<ForwardOutput<T>> {
    let program = Program::compile(arch)?;
    let n = input.shape().first().copied().unwrap_or(0);
    if input.shape() != program.shapes[0].batched(n).as_slice() {
        return dim_err(
            "forward",
            format!(
                "input {:?} does not match network input {:?}",
                input.shape(),
                arch.input
            ),
        );
    }
    let mut values = vec![input.clone()];
    let mut ops = Vec::with_capacity(program.nodes.len());
    for node in &program.nodes {
        let x = &values[node.input];
        let (out, cache) = match &node.op {
            Op::Conv { slot, spec } => {
                let p = &params.convs[*slot];
                match (&p.binary, mode.is_binary()) {
                    (Some(b), true) => {
                        // α·conv(sign a, sign X): the ±1 products sum exactly, so
                        // this agrees bit-for-bit with the XNOR path.
                        let padded = pad2d(x, spec.padding, T::one())?;
                        let signs = sign_binarize(&p.kernels);
                        let alpha = b.modulation.alpha();
                        let raw = conv2d(
                            &padded,
                            &signs,
                            ConvGeometry::new(spec.kernel, spec.stride, 0),
                        )?;
                        (
                            raw.scale(alpha),
                            OpCache::BinaryConv {
                                padded,
                                signs,
                                alpha,
                            },
                        )
                    }
                    _ => (conv2d(x, &p.kernels, spec.geometry())?, OpCache::FloatConv),
                }
            }
            Op::Bn { slot } => {
                let p = &mut params.bns[*slot];
                let (y, c) = batch_norm(x, &p.gamma, &p.beta, &mut p.state, mode.bn_mode())?;
                (y, OpCache::Bn(c))
            }
            Op::BinAct => {
                if mode.is_binary() {
                    (x.map(sign), OpCache::None)
                } else {
                    (x.clone(), OpCache::None)
                }
            }
            Op::Pool {
                kind,
                window,
                stride,
            } => {
                let (y, c) = pool2d(x, *kind, *window, *stride)?;
                (y, OpCache::Pool(c))
            }
            Op::Linear { slot } => {
                let p = &params.linears[*slot];
                (linear(&flatten(x)?, &p.weight, &p.bias)?, OpCache::None)
            }
            Op::Add { other } => (x.add(&values[*other])?, OpCache::None),
        };
        values.push(out);
        ops.push(cache);
    }
    let logits = values[program.output_value()].clone();
    let features = flatten(&values[program.feature_value])?;
    Ok(ForwardOutput {
        logits,
        features,
        cache: Cache {
            program,
            mode,
            values,
            ops,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad<T = f32> {
    /// Gradient w.r.t. the full-precision kernels (straight-through for binary layers).
    pub kernels: Tensor<T>,
    pub modulation: Option<Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnGrad<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrad<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T = f32> {
    pub convs: Vec<ConvGrad<T>>,
    pub bns: Vec<BnGrad<T>>,
    pub linears: Vec<LinearGrad<T>>,
    pub input: Tensor<T>,
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Reverse pass of the cross-entropy (and optionally feature-loss) gradient.
///
/// `grad_features`, shaped like [`ForwardOutput::features`], is added at the
/// final linear layer's input. Binary layers return straight-through
/// gradients for `X` and `w`.
pub fn backward<T: Real>(
    params: &Params<T>,
    cache: &Cache<T>,
    grad_logits: &Tensor<T>,
    grad_features: Option<&Tensor<T>>,
) -> Result<Grads<T>> {
    let prog = &cache.program;
    let out = prog.output_value();
    cache.values[out].ensure_same_shape(grad_logits, "backward")?;
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; cache.values.len()];
    grads[out] = Some(grad_logits.clone());
    if let Some(gf) = grad_features {
        let target = cache.values[prog.feature_value].shape().to_vec();
        accumulate(&mut grads[prog.feature_value], gf.clone().reshape(&target)?)?;
    }
    let mut g_convs: Vec<ConvGrad<T>> = params
        .convs
        .iter()
        .map(|c| ConvGrad {
            kernels: Tensor::zeros(c.kernels.shape()),
            modulation: c
                .binary
                .as_ref()
                .map(|b| vec![T::zero(); b.modulation.len()]),
        })
        .collect();
    let mut g_bns: Vec<BnGrad<T>> = params
        .bns
        .iter()
        .map(|b| BnGrad {
            gamma: vec![T::zero(); b.gamma.len()],
            beta: vec![T::zero(); b.beta.len()],
        })
        .collect();
    let mut g_lins: Vec<LinearGrad<T>> = params
        .linears
        .iter()
        .map(|l| LinearGrad {
            weight: Tensor::zeros(l.weight.shape()),
            bias: vec![T::zero(); l.bias.len()],
        })
        .collect();

    for (k, node) in prog.nodes.iter().enumerate().rev() {
        let g = match grads[k + 1].take() {
            Some(g) => g,
            None => continue,
        };
        let x = &cache.values[node.input];
        let gi = match (&node.op, &cache.ops[k]) {
            (
                Op::Conv { slot, spec },
                OpCache::BinaryConv {
                    padded,
                    signs,
                    alpha,
                },
            ) => {
                let p = &params.convs[*slot];
                let b = p
                    .binary
                    .as_ref()
                    .expect("binary cache implies binary params");
                let geom = ConvGeometry::new(spec.kernel, spec.stride, 0);
                let (g_pad, g_xhat) = conv2d_vjp(padded, signs, geom, &g)?;
                g_convs[*slot] = ConvGrad {
                    kernels: kernel_ste_grad(&g_xhat, &p.kernels, &b.modulation)?,
                    modulation: Some(modulation_ste_grad(&g_xhat, &p.kernels, &b.modulation)?),
                };
                pad2d_vjp(&g_pad, spec.padding)?.scale(*alpha)
            }
            (Op::Conv { slot, spec }, _) => {
                let (gi, gk) = conv2d_vjp(x, &params.convs[*slot].kernels, spec.geometry(), &g)?;
                g_convs[*slot].kernels = gk;
                gi
            }
            (Op::Bn { slot }, OpCache::Bn(c)) => {
                let (gi, gg, gb) = batch_norm_vjp(&params.bns[*slot].gamma, c, &g)?;
                g_bns[*slot] = BnGrad {
                    gamma: gg,
                    beta: gb,
                };
                gi
            }
            (Op::BinAct, _) => {
                if cache.mode.is_binary() {
                    activation_ste_grad(&g, x)?
                } else {
                    g
                }
            }
            (Op::Pool { .. }, OpCache::Pool(c)) => pool2d_vjp(c, &g)?,
            (Op::Linear { slot }, _) => {
                let p = &params.linears[*slot];
                let (gi, gw, gb) = linear_vjp(&flatten(x)?, &p.weight, &g)?;
                g_lins[*slot] = LinearGrad {
                    weight: gw,
                    bias: gb,
                };
                gi.reshape(x.shape())?
            }
            (Op::Add { other }, _) => {
                accumulate(&mut grads[*other], g.clone())?;
                g
            }
            _ => unreachable!("cache variant always matches its op"),
        };
        accumulate(&mut grads[node.input], gi)?;
    }
    let input = grads[0]
        .take()
        .unwrap_or_else(|| Tensor::zeros(cache.values[0].shape()));
    Ok(Grads {
        convs: g_convs,
        bns: g_bns,
        linears: g_lins,
        input,
    })
}
