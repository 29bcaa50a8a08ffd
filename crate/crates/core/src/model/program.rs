//! Flattened execution plan of an [`Architecture`], produced by shape-checking
//! the layer tree once.

use super::arch::{Architecture, ConvSpec, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::PoolKind;

/// Per-sample shape of a value flowing between ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Map([usize; 3]),
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match self {
            Shape::Map([c, h, w]) => c * h * w,
            Shape::Flat(d) => *d,
        }
    }

    pub fn batched(&self, n: usize) -> Vec<usize> {
        match self {
            Shape::Map([c, h, w]) => vec![n, *c, *h, *w],
            Shape::Flat(d) => vec![n, *d],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Conv {
        slot: usize,
        spec: ConvSpec,
    },
    Bn {
        slot: usize,
    },
    BinAct,
    Pool {
        kind: PoolKind,
        window: usize,
        stride: usize,
    },
    Linear {
        slot: usize,
    },
    /// Adds value `other` to the op's input.
    Add {
        other: usize,
    },
}

/// Op `k` reads value `input` and writes value `k + 1`; value 0 is the
/// network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub op: Op,
    pub input: usize,
    /// Depth-first index of the originating layer spec.
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    pub nodes: Vec<Node>,
    pub shapes: Vec<Shape>,
    pub feature_value: usize,
    pub convs: usize,
    pub bns: usize,
    pub linears: usize,
}

impl Program {
    pub fn compile(arch: &Architecture) -> Result<Self> {
        if arch.input.contains(&0) {
            return Err(Error::Architecture {
                index: 0,
                msg: format!("input shape {:?} has an empty axis", arch.input),
            });
        }
        let mut c = Compiler {
            nodes: Vec::new(),
            shapes: vec![Shape::Map(arch.input)],
            index: 0,
            convs: 0,
            bns: 0,
            linears: 0,
        };
        let out = c.list(&arch.layers, 0)?;
        let last = arch.layers.len().saturating_sub(1);
        let fail = |msg: String| Err(Error::Architecture { index: last, msg });
        let node = match c.nodes.last() {
            Some(n) if out == c.nodes.len() => n,
            _ => return fail("network has no layers".into()),
        };
        if !matches!(node.op, Op::Linear { .. })
            || !matches!(arch.layers.last(), Some(LayerSpec::Linear { .. }))
        {
            return fail("the final layer must be a linear classifier".into());
        }
        if c.shapes[out] != Shape::Flat(arch.classes) {
            return fail(format!(
                "classifier produces {:?} but the network has {} classes",
                c.shapes[out], arch.classes
            ));
        }
        let feature_value = node.input;
        Ok(Program {
            nodes: c.nodes,
            shapes: c.shapes,
            feature_value,
            convs: c.convs,
            bns: c.bns,
            linears: c.linears,
        })
    }

    pub fn output_value(&self) -> usize {
        self.nodes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.shapes[self.feature_value].numel()
    }
}

struct Compiler {
    nodes: Vec<Node>,
    shapes: Vec<Shape>,
    index: usize,
    convs: usize,
    bns: usize,
    linears: usize,
}

impl Compiler {
    fn push(&mut self, op: Op, input: usize, layer: usize, shape: Shape) -> usize {
        self.nodes.push(Node { op, input, layer });
        self.shapes.push(shape);
        self.shapes.len() - 1
    }

    fn list(&mut self, layers: &[LayerSpec], mut cur: usize) -> Result<usize> {
        let mut after_bin_act = false;
        for layer in layers {
            let index = self.index;
            self.index += 1;
            let err = |msg: String| Error::Architecture { index, msg };
            let shape = self.shapes[cur];
            cur = match layer {
                LayerSpec::Conv(spec) => {
                    let [c, h, w] = match shape {
                        Shape::Map(d) => d,
                        Shape::Flat(d) => {
                            return Err(err(format!(
                                "convolution after flattening to {d} features"
                            )))
                        }
                    };
                    if spec.in_channels != c {
                        return Err(err(format!(
                            "conv expects {} input channels, got {c}",
                            spec.in_channels
                        )));
                    }
                    if spec.out_channels == 0 {
                        return Err(err("conv has no output channels".into()));
                    }
                    if spec.binary {
                        if self.convs == 0 {
                            return Err(err("the first convolution must be full precision".into()));
                        }
                        if spec.kernel == 1 {
                            return Err(err("1x1 convolutions must be full precision".into()));
                        }
                        if !after_bin_act {
                            return Err(err(
                                "a binary convolution must directly follow bin_act".into()
                            ));
                        }
                    }
                    let g = spec.geometry();
                    let oh = g.output_size(h).map_err(|e| err(e.to_string()))?;
                    let ow = g.output_size(w).map_err(|e| err(e.to_string()))?;
                    let slot = self.convs;
                    self.convs += 1;
                    self.push(
                        Op::Conv { slot, spec: *spec },
                        cur,
                        index,
                        Shape::Map([spec.out_channels, oh, ow]),
                    )
                }
                LayerSpec::BatchNorm { channels } => {
                    match shape {
                        Shape::Map([c, ..]) if c == *channels => {}
                        other => {
                            return Err(err(format!(
                                "batch norm over {channels} channels, got {other:?}"
                            )))
                        }
                    }
                    let slot = self.bns;
                    self.bns += 1;
                    self.push(Op::Bn { slot }, cur, index, shape)
                }
                LayerSpec::BinAct => self.push(Op::BinAct, cur, index, shape),
                LayerSpec::Pool {
                    pool,
                    window,
                    stride,
                } => {
                    let [c, h, w] = match shape {
                        Shape::Map(d) => d,
                        Shape::Flat(_) => return Err(err("pooling needs a feature map".into())),
                    };
                    let out = if *pool == PoolKind::GlobalAvg {
                        [c, 1, 1]
                    } else {
                        if *window == 0 || *stride == 0 || *window > h || *window > w {
                            return Err(err(format!(
                                "pool window {window}/{stride} does not fit {h}x{w}"
                            )));
                        }
                        [c, (h - window) / stride + 1, (w - window) / stride + 1]
                    };
                    self.push(
                        Op::Pool {
                            kind: *pool,
                            window: *window,
                            stride: *stride,
                        },
                        cur,
                        index,
                        Shape::Map(out),
                    )
                }
                LayerSpec::Linear {
                    in_features,
                    out_features,
                } => {
                    if shape.numel() != *in_features {
                        return Err(err(format!(
                            "linear expects {in_features} features, got {}",
                            shape.numel()
                        )));
                    }
                    if *out_features == 0 {
                        return Err(err("linear has no outputs".into()));
                    }
                    let slot = self.linears;
                    self.linears += 1;
                    self.push(Op::Linear { slot }, cur, index, Shape::Flat(*out_features))
                }
                LayerSpec::Residual { body, shortcut } => {
                    let b = self.list(body, cur)?;
                    let s = self.list(shortcut, cur)?;
                    if self.shapes[b] != self.shapes[s] {
                        return Err(err(format!(
                            "residual body gives {:?} but shortcut gives {:?}",
                            self.shapes[b], self.shapes[s]
                        )));
                    }
                    let out = self.shapes[b];
                    self.push(Op::Add { other: s }, b, index, out)
                }
            };
            after_bin_act = matches!(layer, LayerSpec::BinAct);
        }
        Ok(cur)
    }
}
