use serde::{Deserialize, Serialize};

use super::arch::Architecture;
use super::program::Program;
use crate::bayes::{quantization_error, FeatureCenters, KernelPrior};
use crate::binarize::ModulationVector;
use crate::error::{dim_err, Result};
use crate::tensor::{BnState, Real, Tensor};

/// Default step size of the feature-center update.
pub const CENTER_LR: f64 = 0.5;

/// Modulation vector and per-kernel mixture parameters of a binary conv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryKernel<T = f32> {
    pub modulation: ModulationVector<T>,
    pub prior: KernelPrior<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams<T = f32> {
    /// Full-precision kernels `[O, C, k, k]`.
    pub kernels: Tensor<T>,
    pub binary: Option<BinaryKernel<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub state: BnState<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams<T = f32> {
    /// `[out, in]`.
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// All learnable state of a network, slot-ordered depth-first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params<T = f32> {
    pub convs: Vec<ConvParams<T>>,
    pub bns: Vec<BnParams<T>>,
    pub linears: Vec<LinearParams<T>>,
    pub centers: FeatureCenters<T>,
}

impl<T: Real> Params<T> {
    /// Zero weights, unit modulation, unit BN scale, zero centers.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        Program::compile(arch)?;
        let convs = arch
            .convs()
            .into_iter()
            .map(|c| {
                let kernels = Tensor::zeros(&[c.out_channels, c.in_channels, c.kernel, c.kernel]);
                let binary = if c.binary {
                    Some(BinaryKernel {
                        modulation: ModulationVector::new(vec![T::one(); c.kernel_len()])?,
                        prior: KernelPrior::new(
                            vec![T::zero(); c.out_channels],
                            vec![T::one(); c.out_channels],
                        )?,
                    })
                } else {
                    None
                };
                Ok(ConvParams { kernels, binary })
            })
            .collect::<Result<Vec<_>>>()?;
        let bns = arch
            .batch_norms()
            .into_iter()
            .map(|c| BnParams {
                gamma: vec![T::one(); c],
                beta: vec![T::zero(); c],
                state: BnState::new(c),
            })
            .collect();
        let linears = arch
            .linears()
            .into_iter()
            .map(|(i, o)| LinearParams {
                weight: Tensor::zeros(&[o, i]),
                bias: vec![T::zero(); o],
            })
            .collect();
        Ok(Self {
            convs,
            bns,
            linears,
            centers: FeatureCenters::new(arch.classes, arch.feature_dim, T::lit(CENTER_LR)),
        })
    }

    /// Checks every buffer against the shapes the architecture implies.
    pub fn check(&self, arch: &Architecture) -> Result<()> {
        let reference = Self::zeros(arch)?;
        if self.convs.len() != reference.convs.len()
            || self.bns.len() != reference.bns.len()
            || self.linears.len() != reference.linears.len()
        {
            return dim_err("Params", "layer counts disagree with the architecture");
        }
        for (i, (a, b)) in self.convs.iter().zip(&reference.convs).enumerate() {
            let same_binary = match (&a.binary, &b.binary) {
                (Some(x), Some(y)) => {
                    x.modulation.len() == y.modulation.len()
                        && x.prior.mu.len() == y.prior.mu.len()
                        && x.prior.sigma.len() == y.prior.sigma.len()
                }
                (None, None) => true,
                _ => false,
            };
            if a.kernels.shape() != b.kernels.shape() || !same_binary {
                return dim_err("Params", format!("conv slot {i} does not match its spec"));
            }
        }
        for (i, (a, b)) in self.bns.iter().zip(&reference.bns).enumerate() {
            let c = b.gamma.len();
            if a.gamma.len() != c
                || a.beta.len() != c
                || a.state.running_mean.len() != c
                || a.state.running_var.len() != c
            {
                return dim_err(
                    "Params",
                    format!("batch-norm slot {i} does not match its spec"),
                );
            }
        }
        for (i, (a, b)) in self.linears.iter().zip(&reference.linears).enumerate() {
            if a.weight.shape() != b.weight.shape() || a.bias.len() != b.bias.len() {
                return dim_err("Params", format!("linear slot {i} does not match its spec"));
            }
        }
        if self.centers.classes() != arch.classes || self.centers.dim() != arch.feature_dim {
            return dim_err(
                "Params",
                "feature centers do not match the classifier input",
            );
        }
        Ok(())
    }

    /// Total `Σ_l Σ_i ‖X̂_i − w∘X_i‖²` over binary layers.
    pub fn quantization_error(&self) -> T {
        let mut total = T::zero();
        for c in &self.convs {
            if let Some(b) = &c.binary {
                let k = b.modulation.len();
                for xs in c.kernels.data().chunks_exact(k) {
                    total = total + quantization_error(xs, b.modulation.values());
                }
            }
        }
        total
    }

    /// `α_l = mean(w^l)` for each binary layer, in slot order.
    pub fn alphas(&self) -> Vec<T> {
        self.convs
            .iter()
            .filter_map(|c| c.binary.as_ref().map(|b| b.modulation.alpha()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_slice(|_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }

    /// Layer buffers (everything except the feature centers) in storage order.
    pub fn buffers(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for c in &self.convs {
            out.push(c.kernels.data());
            if let Some(b) = &c.binary {
                out.extend([b.modulation.values(), &b.prior.mu[..], &b.prior.sigma[..]]);
            }
        }
        for b in &self.bns {
            out.extend([
                &b.gamma[..],
                &b.beta[..],
                &b.state.running_mean[..],
                &b.state.running_var[..],
            ]);
        }
        for l in &self.linears {
            out.extend([l.weight.data(), &l.bias[..]]);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for c in &mut self.convs {
            out.push(c.kernels.data_mut());
            if let Some(b) = &mut c.binary {
                out.push(b.modulation.values_mut());
                out.push(&mut b.prior.mu);
                out.push(&mut b.prior.sigma);
            }
        }
        for b in &mut self.bns {
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
            out.push(&mut b.state.running_mean);
            out.push(&mut b.state.running_var);
        }
        for l in &mut self.linears {
            out.push(l.weight.data_mut());
            out.push(&mut l.bias);
        }
        out
    }

    /// Visits every float buffer with a short label, in a fixed order.
    pub fn for_each_slice(&self, mut f: impl FnMut(String, &[T])) {
        for (i, c) in self.convs.iter().enumerate() {
            f(format!("conv{i}.kernels"), c.kernels.data());
            if let Some(b) = &c.binary {
                f(format!("conv{i}.modulation"), b.modulation.values());
                f(format!("conv{i}.mu"), &b.prior.mu);
                f(format!("conv{i}.sigma"), &b.prior.sigma);
            }
        }
        for (i, b) in self.bns.iter().enumerate() {
            f(format!("bn{i}.gamma"), &b.gamma);
            f(format!("bn{i}.beta"), &b.beta);
            f(format!("bn{i}.running_mean"), &b.state.running_mean);
            f(format!("bn{i}.running_var"), &b.state.running_var);
        }
        for (i, l) in self.linears.iter().enumerate() {
            f(format!("linear{i}.weight"), l.weight.data());
            f(format!("linear{i}.bias"), &l.bias);
        }
        f("centers".into(), self.centers.centers_flat());
        f("center_sigmas".into(), self.centers.sigmas_flat());
    }

    /// Element-type conversion, e.g. into 64-bit shadow parameters.
    pub fn cast<U: Real>(&self) -> Params<U> {
        let v = |s: &[T]| -> Vec<U> {
            s.iter()
                .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect()
        };
        Params {
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    kernels: c.kernels.cast(),
                    binary: c.binary.as_ref().map(|b| BinaryKernel {
                        modulation: ModulationVector::new(v(b.modulation.values()))
                            .expect("cast keeps length"),
                        prior: KernelPrior {
                            mu: v(&b.prior.mu),
                            sigma: v(&b.prior.sigma),
                        },
                    }),
                })
                .collect(),
            bns: self
                .bns
                .iter()
                .map(|b| BnParams {
                    gamma: v(&b.gamma),
                    beta: v(&b.beta),
                    state: BnState {
                        running_mean: v(&b.state.running_mean),
                        running_var: v(&b.state.running_var),
                        initialized: b.state.initialized,
                    },
                })
                .collect(),
            linears: self
                .linears
                .iter()
                .map(|l| LinearParams {
                    weight: l.weight.cast(),
                    bias: v(&l.bias),
                })
                .collect(),
            centers: FeatureCenters::from_parts_unchecked(
                self.centers.classes(),
                self.centers.dim(),
                v(self.centers.centers_flat()),
                v(self.centers.sigmas_flat()),
                U::from_f64(self.centers.center_lr.to_f64().unwrap()).unwrap(),
            ),
        }
    }
}
