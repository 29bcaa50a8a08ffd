use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, PoolKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Sign-binarized kernels scaled by the layer's modulation mean.
    pub binary: bool,
}

impl ConvSpec {
    pub fn full(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            binary: false,
        }
    }

    pub fn binary(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
            binary: true,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.kernel, self.stride, self.padding)
    }

    /// Elements per output-channel kernel, `C·k·k`.
    pub fn kernel_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.kernel_len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv(ConvSpec),
    BatchNorm {
        channels: usize,
    },
    /// Sign of the activations (identity in the float modes).
    BinAct,
    Pool {
        pool: PoolKind,
        window: usize,
        stride: usize,
    },
    /// Flattens its input; always full precision.
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<LayerSpec>,
        shortcut: Vec<LayerSpec>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    /// Per-sample input `[C, H, W]`.
    pub input: [usize; 3],
    pub classes: usize,
    /// Width of the final linear layer's input.
    pub feature_dim: usize,
    pub layers: Vec<LayerSpec>,
}

pub const BUILTIN: [&str; 4] = [
    "cnn-small",
    "cnn-small-all-fp",
    "mini-wrn-16",
    "resnet18-table",
];

impl Architecture {
    /// Validates a hand-written layer list and fills in `feature_dim`.
    pub fn custom(
        name: &str,
        input: [usize; 3],
        classes: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let mut arch = Self {
            name: name.to_string(),
            input,
            classes,
            feature_dim: 0,
            layers,
        };
        let program = super::program::Program::compile(&arch)?;
        arch.feature_dim = program.feature_dim();
        Ok(arch)
    }

    pub fn build(name: &str, input: [usize; 3], classes: usize) -> Result<Self> {
        let c = input[0];
        let layers = match name {
            "cnn-small" => cnn_small(c, classes, true),
            "cnn-small-all-fp" => cnn_small(c, classes, false),
            "mini-wrn-16" => mini_wrn(c, classes),
            "resnet18-table" => resnet18(c, classes),
            other => {
                return Err(Error::Config(format!(
                    "unknown architecture {other:?}; expected one of {BUILTIN:?}"
                )))
            }
        };
        Self::custom(name, input, classes, layers)
    }

    /// The built-in's conventional input and class count.
    pub fn build_default(name: &str) -> Result<Self> {
        match name {
            "cnn-small" | "cnn-small-all-fp" => Self::build(name, [1, 28, 28], 10),
            "mini-wrn-16" => Self::build(name, [3, 32, 32], 10),
            "resnet18-table" => Self::build(name, [3, 224, 224], 1000),
            _ => Self::build(name, [1, 28, 28], 10),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = super::program::Program::compile(self)?;
        if p.feature_dim() != self.feature_dim {
            return Err(Error::Architecture {
                index: self.layers.len().saturating_sub(1),
                msg: format!(
                    "declared feature_dim {} but the final linear layer sees {}",
                    self.feature_dim,
                    p.feature_dim()
                ),
            });
        }
        Ok(())
    }

    /// Conv specs in depth-first order (body before shortcut).
    pub fn convs(&self) -> Vec<ConvSpec> {
        let mut out = Vec::new();
        walk(&self.layers, &mut |l| {
            if let LayerSpec::Conv(c) = l {
                out.push(*c);
            }
        });
        out
    }

    pub fn batch_norms(&self) -> Vec<usize> {
        let mut out = Vec::new();
        walk(&self.layers, &mut |l| {
            if let LayerSpec::BatchNorm { channels } = l {
                out.push(*channels);
            }
        });
        out
    }

    /// `(in_features, out_features)` of every linear layer.
    pub fn linears(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        walk(&self.layers, &mut |l| {
            if let LayerSpec::Linear {
                in_features,
                out_features,
            } = l
            {
                out.push((*in_features, *out_features));
            }
        });
        out
    }

    /// Number of layers carrying weights (convs, batch norms, linears).
    pub fn weight_layer_count(&self) -> usize {
        self.convs().len() + self.batch_norms().len() + self.linears().len()
    }

    pub fn binary_conv_count(&self) -> usize {
        self.convs().iter().filter(|c| c.binary).count()
    }
}

pub(crate) fn walk<'a>(layers: &'a [LayerSpec], f: &mut impl FnMut(&'a LayerSpec)) {
    for l in layers {
        f(l);
        if let LayerSpec::Residual { body, shortcut } = l {
            walk(body, f);
            walk(shortcut, f);
        }
    }
}

fn bn(channels: usize) -> LayerSpec {
    LayerSpec::BatchNorm { channels }
}

fn cnn_small(c: usize, classes: usize, binary: bool) -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::Conv(ConvSpec::full(c, 16, 3, 1, 1)), bn(16)];
    for (i, o) in [(16, 32), (32, 64)] {
        if binary {
            layers.push(LayerSpec::BinAct);
            layers.push(LayerSpec::Conv(ConvSpec::binary(i, o, 1)));
        } else {
            layers.push(LayerSpec::Conv(ConvSpec::full(i, o, 3, 1, 1)));
        }
        layers.push(bn(o));
        layers.push(LayerSpec::Pool {
            pool: PoolKind::Max,
            window: 2,
            stride: 2,
        });
    }
    layers.push(LayerSpec::Pool {
        pool: PoolKind::GlobalAvg,
        window: 1,
        stride: 1,
    });
    layers.push(LayerSpec::Linear {
        in_features: 64,
        out_features: classes,
    });
    layers
}

fn downsample(i: usize, o: usize, stride: usize) -> Vec<LayerSpec> {
    if i == o && stride == 1 {
        Vec::new()
    } else {
        vec![LayerSpec::Conv(ConvSpec::full(i, o, 1, stride, 0)), bn(o)]
    }
}

/// One binary conv per residual unit, so every binary conv has its own
/// full-precision shortcut.
fn binary_unit(i: usize, o: usize, stride: usize) -> LayerSpec {
    LayerSpec::Residual {
        body: vec![
            LayerSpec::BinAct,
            LayerSpec::Conv(ConvSpec::binary(i, o, stride)),
            bn(o),
        ],
        shortcut: downsample(i, o, stride),
    }
}

fn mini_wrn(c: usize, classes: usize) -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::Conv(ConvSpec::full(c, 16, 3, 1, 1)), bn(16)];
    let mut width = 16;
    for (stage, out) in [16, 32, 64].into_iter().enumerate() {
        let stride = if stage == 0 { 1 } else { 2 };
        layers.push(binary_unit(width, out, stride));
        layers.push(binary_unit(out, out, 1));
        width = out;
    }
    layers.push(LayerSpec::Pool {
        pool: PoolKind::GlobalAvg,
        window: 1,
        stride: 1,
    });
    layers.push(LayerSpec::Linear {
        in_features: width,
        out_features: classes,
    });
    layers
}

fn resnet18(c: usize, classes: usize) -> Vec<LayerSpec> {
    let mut layers = vec![
        LayerSpec::Conv(ConvSpec::full(c, 64, 7, 2, 3)),
        bn(64),
        LayerSpec::Pool {
            pool: PoolKind::Max,
            window: 3,
            stride: 2,
        },
    ];
    let mut width = 64;
    for (stage, out) in [64, 128, 256, 512].into_iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            layers.push(LayerSpec::Residual {
                body: vec![
                    LayerSpec::BinAct,
                    LayerSpec::Conv(ConvSpec::binary(width, out, stride)),
                    bn(out),
                    LayerSpec::BinAct,
                    LayerSpec::Conv(ConvSpec::binary(out, out, 1)),
                    bn(out),
                ],
                shortcut: downsample(width, out, stride),
            });
            width = out;
        }
    }
    layers.push(LayerSpec::Pool {
        pool: PoolKind::GlobalAvg,
        window: 1,
        stride: 1,
    });
    layers.push(LayerSpec::Linear {
        in_features: width,
        out_features: classes,
    });
    layers
}
