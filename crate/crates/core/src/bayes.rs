//! Gaussian-mixture kernel loss, Gaussian feature loss, and their gradients.
//!
//! For a kernel `X` (K elements) with modulation vector `w`, mode `μ` and
//! spread `σ`, the kernel loss is
//!
//! ```text
//! (λ/2)·[ ‖X̂ − w∘X‖² + ν·σ⁻²·Σ_{X_k≥0}(X_k − μ)² + ν·σ⁻²·Σ_{X_k<0}(X_k + μ)² + ν·K·log σ² ]
//! ```
//!
//! where `X̂ = mean(w)·sign(X)` is held constant when differentiating. The μ
//! and σ gradients carry an extra `1/K` factor relative to the exact
//! derivative of this loss.

use serde::{Deserialize, Serialize};

use crate::binarize::{mean, sign, ModulationVector};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Lower bound applied to every learned spread.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Weights of the kernel loss (λ), feature loss (θ) and the quantization-error
/// variance (ν).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesHyper {
    pub lambda: f64,
    pub theta: f64,
    pub nu: f64,
}

impl Default for BayesHyper {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            theta: 1e-3,
            nu: 1e-4,
        }
    }
}

impl BayesHyper {
    pub fn new(lambda: f64, theta: f64, nu: f64) -> Result<Self> {
        let h = Self { lambda, theta, nu };
        h.validate()?;
        Ok(h)
    }

    /// λ = θ = 0: plain straight-through training.
    pub fn baseline(nu: f64) -> Self {
        Self {
            lambda: 0.0,
            theta: 0.0,
            nu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda", self.lambda),
            ("theta", self.theta),
            ("nu", self.nu),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-kernel mixture parameters of one binarized layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelPrior<T = f32> {
    pub mu: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Real> KernelPrior<T> {
    pub fn new(mu: Vec<T>, sigma: Vec<T>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return dim_err(
                "KernelPrior",
                format!("{} modes vs {} spreads", mu.len(), sigma.len()),
            );
        }
        let floor = T::lit(SIGMA_FLOOR);
        if let Some(s) = sigma.iter().find(|&&s| !(s >= floor)) {
            return Err(Error::Domain(format!(
                "sigma {s:?} below floor {SIGMA_FLOOR}"
            )));
        }
        Ok(Self { mu, sigma })
    }

    /// `μ_i = mean|X_i|` and `σ_i = std(X_i)` (floored) for each kernel of
    /// `kernel_len` consecutive elements.
    pub fn estimate(kernels: &[T], kernel_len: usize) -> Result<Self> {
        if kernel_len == 0 || !kernels.len().is_multiple_of(kernel_len) {
            return dim_err(
                "KernelPrior::estimate",
                format!("{} weights in kernels of {kernel_len}", kernels.len()),
            );
        }
        let n = T::from_usize(kernel_len).unwrap();
        let (mut mu, mut sigma) = (Vec::new(), Vec::new());
        for xs in kernels.chunks_exact(kernel_len) {
            mu.push(xs.iter().fold(T::zero(), |a, x| a + x.abs()) / n);
            let m = xs.iter().fold(T::zero(), |a, &x| a + x) / n;
            sigma.push((xs.iter().fold(T::zero(), |a, &x| a + (x - m) * (x - m)) / n).sqrt());
        }
        let mut p = Self { mu, sigma };
        p.floor_sigma();
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn floor_sigma(&mut self) {
        let floor = T::lit(SIGMA_FLOOR);
        for s in &mut self.sigma {
            if !(*s >= floor) {
                *s = floor;
            }
        }
    }
}

fn check_kernel<T: Real>(x: &[T], w: &[T], sigma: T) -> Result<()> {
    if x.len() != w.len() {
        return dim_err(
            "kernel loss",
            format!(
                "kernel has {} elements, modulation vector {}",
                x.len(),
                w.len()
            ),
        );
    }
    if !(sigma > T::zero()) {
        return Err(Error::Domain(format!(
            "sigma must be positive, got {sigma:?}"
        )));
    }
    Ok(())
}

/// Sign-folded deviation from the nearer mode: `X − μ` if `X ≥ 0`, else `X + μ`.
#[inline]
fn mode_residual<T: Real>(x: T, mu: T) -> T {
    if x >= T::zero() {
        x - mu
    } else {
        x + mu
    }
}

/// `‖X̂ − w∘X‖²` with `X̂ = mean(w)·sign(X)`.
pub fn quantization_error<T: Real>(x: &[T], w: &[T]) -> T {
    let alpha = mean(w);
    x.iter()
        .zip(w)
        .map(|(&xk, &wk)| {
            let r = alpha * sign(xk) - wk * xk;
            r * r
        })
        .fold(T::zero(), |a, b| a + b)
}

/// Kernel loss of one kernel (see module docs).
pub fn kernel_bayes_loss<T: Real>(
    x: &[T],
    w: &[T],
    mu: T,
    sigma: T,
    hyper: &BayesHyper,
) -> Result<T> {
    check_kernel(x, w, sigma)?;
    let lambda = T::lit(hyper.lambda);
    if lambda == T::zero() {
        return Ok(T::zero());
    }
    let nu = T::lit(hyper.nu);
    let recon = quantization_error(x, w);
    let inv_var = T::one() / (sigma * sigma);
    let prior = x
        .iter()
        .map(|&xk| {
            let r = mode_residual(xk, mu);
            r * r
        })
        .fold(T::zero(), |a, b| a + b);
    let k = T::from_usize(x.len()).unwrap();
    let log_det = k * (sigma * sigma).ln();
    Ok(lambda / T::lit(2.0) * (recon + nu * inv_var * prior + nu * log_det))
}

/// `λ·( w∘(w∘X − X̂) + ν·σ⁻²·(X_± ∓ μ) )`, the kernel-loss gradient w.r.t. `X`.
pub fn kernel_bayes_grad_x<T: Real>(
    x: &[T],
    w: &[T],
    mu: T,
    sigma: T,
    hyper: &BayesHyper,
) -> Result<Vec<T>> {
    check_kernel(x, w, sigma)?;
    let lambda = T::lit(hyper.lambda);
    let nu = T::lit(hyper.nu);
    let alpha = mean(w);
    let inv_var = T::one() / (sigma * sigma);
    Ok(x.iter()
        .zip(w)
        .map(|(&xk, &wk)| {
            let xhat = alpha * sign(xk);
            lambda * (wk * (wk * xk - xhat) + nu * inv_var * mode_residual(xk, mu))
        })
        .collect())
}

/// `λ·Σ_i (w∘X_i − X̂_i)∘X_i` over all kernels (rows) of a layer.
pub fn kernel_bayes_grad_w<T: Real>(
    kernels: &Tensor<T>,
    w: &ModulationVector<T>,
    hyper: &BayesHyper,
) -> Result<Vec<T>> {
    let k = w.len();
    if !kernels.len().is_multiple_of(k) {
        return dim_err(
            "kernel_bayes_grad_w",
            format!(
                "{:?} not divisible into {k}-element kernels",
                kernels.shape()
            ),
        );
    }
    let lambda = T::lit(hyper.lambda);
    let wv = w.values();
    let alpha = w.alpha();
    let mut acc = vec![T::zero(); k];
    for xs in kernels.data().chunks_exact(k) {
        for j in 0..k {
            let xhat = alpha * sign(xs[j]);
            acc[j] = acc[j] + (wv[j] * xs[j] - xhat) * xs[j];
        }
    }
    Ok(acc.into_iter().map(|v| lambda * v).collect())
}

/// `(λν/K)·Σ_k σ⁻²·(μ ∓ X_k)` (sign partition on `X_k`).
pub fn prior_grad_mu<T: Real>(x: &[T], mu: T, sigma: T, hyper: &BayesHyper) -> Result<T> {
    if x.is_empty() || !(sigma > T::zero()) {
        return Err(Error::Domain("empty kernel or non-positive sigma".into()));
    }
    let inv_var = T::one() / (sigma * sigma);
    let s = x
        .iter()
        .map(|&xk| {
            if xk >= T::zero() {
                inv_var * (mu - xk)
            } else {
                inv_var * (mu + xk)
            }
        })
        .fold(T::zero(), |a, b| a + b);
    let k = T::from_usize(x.len()).unwrap();
    Ok(T::lit(hyper.lambda * hyper.nu) / k * s)
}

/// `(λν/K)·Σ_k [ −σ⁻³(X_k ∓ μ)² + σ⁻¹ ]`.
pub fn prior_grad_sigma<T: Real>(x: &[T], mu: T, sigma: T, hyper: &BayesHyper) -> Result<T> {
    if x.is_empty() || !(sigma > T::zero()) {
        return Err(Error::Domain("empty kernel or non-positive sigma".into()));
    }
    let inv = T::one() / sigma;
    let inv3 = inv * inv * inv;
    let s = x
        .iter()
        .map(|&xk| {
            let r = mode_residual(xk, mu);
            -inv3 * r * r + inv
        })
        .fold(T::zero(), |a, b| a + b);
    let k = T::from_usize(x.len()).unwrap();
    Ok(T::lit(hyper.lambda * hyper.nu) / k * s)
}

/// Loss value and every gradient of the kernel loss for one layer.
#[derive(Clone, Debug)]
pub struct LayerKernelTerms<T = f32> {
    pub loss: T,
    pub grad_x: Tensor<T>,
    pub grad_w: Vec<T>,
    pub grad_mu: Vec<T>,
    pub grad_sigma: Vec<T>,
}

/// Evaluates the kernel loss and its gradients for all kernels of a layer.
pub fn layer_kernel_terms<T: Real>(
    kernels: &Tensor<T>,
    w: &ModulationVector<T>,
    prior: &KernelPrior<T>,
    hyper: &BayesHyper,
) -> Result<LayerKernelTerms<T>> {
    let k = w.len();
    if kernels.len() != prior.len() * k {
        return dim_err(
            "layer_kernel_terms",
            format!(
                "{:?} kernels vs {} priors of {k} elements",
                kernels.shape(),
                prior.len()
            ),
        );
    }
    let mut loss = T::zero();
    let mut grad_x = Vec::with_capacity(kernels.len());
    let mut grad_mu = Vec::with_capacity(prior.len());
    let mut grad_sigma = Vec::with_capacity(prior.len());
    for (i, xs) in kernels.data().chunks_exact(k).enumerate() {
        let (mu, sigma) = (prior.mu[i], prior.sigma[i]);
        loss = loss + kernel_bayes_loss(xs, w.values(), mu, sigma, hyper)?;
        grad_x.extend(kernel_bayes_grad_x(xs, w.values(), mu, sigma, hyper)?);
        grad_mu.push(prior_grad_mu(xs, mu, sigma, hyper)?);
        grad_sigma.push(prior_grad_sigma(xs, mu, sigma, hyper)?);
    }
    Ok(LayerKernelTerms {
        loss,
        grad_x: Tensor::new(kernels.shape().to_vec(), grad_x)?,
        grad_w: kernel_bayes_grad_w(kernels, w, hyper)?,
        grad_mu,
        grad_sigma,
    })
}

/// Per-class feature means `c_m` and per-dimension spreads `σ_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCenters<T = f32> {
    classes: usize,
    dim: usize,
    /// Row-major `[classes, dim]`.
    centers: Vec<T>,
    sigmas: Vec<T>,
    pub center_lr: T,
}

impl<T: Real> FeatureCenters<T> {
    /// Zero centers, unit spreads.
    pub fn new(classes: usize, dim: usize, center_lr: T) -> Self {
        Self {
            classes,
            dim,
            centers: vec![T::zero(); classes * dim],
            sigmas: vec![T::one(); classes * dim],
            center_lr,
        }
    }

    pub fn from_parts(
        classes: usize,
        dim: usize,
        centers: Vec<T>,
        sigmas: Vec<T>,
        center_lr: T,
    ) -> Result<Self> {
        if centers.len() != classes * dim || sigmas.len() != classes * dim {
            return dim_err("FeatureCenters", "buffer sizes disagree with classes x dim");
        }
        let floor = T::lit(SIGMA_FLOOR);
        if sigmas.iter().any(|&s| !(s >= floor)) {
            return Err(Error::Domain("feature sigma below floor".into()));
        }
        Ok(Self {
            classes,
            dim,
            centers,
            sigmas,
            center_lr,
        })
    }

    /// Skips the floor check; used when converting between float widths,
    /// where the floor itself does not round-trip.
    pub(crate) fn from_parts_unchecked(
        classes: usize,
        dim: usize,
        centers: Vec<T>,
        sigmas: Vec<T>,
        center_lr: T,
    ) -> Self {
        Self {
            classes,
            dim,
            centers,
            sigmas,
            center_lr,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, m: usize) -> &[T] {
        &self.centers[m * self.dim..(m + 1) * self.dim]
    }

    pub fn sigma(&self, m: usize) -> &[T] {
        &self.sigmas[m * self.dim..(m + 1) * self.dim]
    }

    pub fn centers_flat(&self) -> &[T] {
        &self.centers
    }

    pub fn sigmas_flat(&self) -> &[T] {
        &self.sigmas
    }

    fn check(&self, features: &Tensor<T>, labels: &[usize]) -> Result<usize> {
        let [n, k] = features.dims2("feature loss")?;
        if k != self.dim {
            return dim_err(
                "feature loss",
                format!("feature dim {k} != center dim {}", self.dim),
            );
        }
        if labels.len() != n {
            return dim_err(
                "feature loss",
                format!("{} labels for {n} samples", labels.len()),
            );
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Index {
                what: "label",
                index: bad,
                limit: self.classes,
            });
        }
        Ok(n)
    }
}

/// Per-sample feature loss terms, summed over the batch (unscaled by θ/2).
fn feature_terms_sum<T: Real>(
    features: &Tensor<T>,
    labels: &[usize],
    fc: &FeatureCenters<T>,
) -> Result<T> {
    let n = fc.check(features, labels)?;
    let k = fc.dim;
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate().take(n) {
        let f = &features.data()[i * k..(i + 1) * k];
        let (c, s) = (fc.center(y), fc.sigma(y));
        for j in 0..k {
            let d = f[j] - c[j];
            let var = s[j] * s[j];
            total = total + d * d + d * d / var + var.ln();
        }
    }
    Ok(total)
}

/// `(θ/2)·mean_i[ ‖f_i − c_y‖² + Σ_k( σ_{y,k}⁻²(f_{i,k} − c_{y,k})² + log σ_{y,k}² ) ]`.
pub fn feature_bayes_loss<T: Real>(
    features: &Tensor<T>,
    labels: &[usize],
    fc: &FeatureCenters<T>,
    hyper: &BayesHyper,
) -> Result<T> {
    let n = fc.check(features, labels)?;
    if n == 0 {
        return Ok(T::zero());
    }
    let s = feature_terms_sum(features, labels, fc)?;
    Ok(T::lit(hyper.theta / 2.0) * s / T::from_usize(n).unwrap())
}

/// Same loss summed over samples instead of averaged (the class-sum form).
pub fn feature_bayes_loss_sum<T: Real>(
    features: &Tensor<T>,
    labels: &[usize],
    fc: &FeatureCenters<T>,
    hyper: &BayesHyper,
) -> Result<T> {
    Ok(T::lit(hyper.theta / 2.0) * feature_terms_sum(features, labels, fc)?)
}

/// Gradient of [`feature_bayes_loss`] w.r.t. the features:
/// `(θ/N)·[(f − c_y) + σ_y⁻²∘(f − c_y)]` per row.
pub fn feature_bayes_grad_f<T: Real>(
    features: &Tensor<T>,
    labels: &[usize],
    fc: &FeatureCenters<T>,
    hyper: &BayesHyper,
) -> Result<Tensor<T>> {
    let n = fc.check(features, labels)?;
    let k = fc.dim;
    let mut g = Tensor::zeros(features.shape());
    if n == 0 {
        return Ok(g);
    }
    let scale = T::lit(hyper.theta) / T::from_usize(n).unwrap();
    for (i, &y) in labels.iter().enumerate() {
        let f = &features.data()[i * k..(i + 1) * k];
        let (c, s) = (fc.center(y), fc.sigma(y));
        let row = &mut g.data_mut()[i * k..(i + 1) * k];
        for j in 0..k {
            let d = f[j] - c[j];
            row[j] = scale * (d + d / (s[j] * s[j]));
        }
    }
    Ok(g)
}

/// Center-loss style update of `c_m` plus a gradient step on `σ_m`.
///
/// `c_m ← c_m − α_c·Σ_{i:y_i=m}(c_m − f_i)/(1 + n_m)` and
/// `σ_m ← σ_m − α_c·∂L/∂σ_m` with `∂L/∂σ_m = (θ/N)·Σ_{i:y_i=m}(σ⁻¹ − σ⁻³(f_i − c_m)²)`,
/// the gradient of [`feature_bayes_loss`]; floored at [`SIGMA_FLOOR`].
/// Classes absent from the batch are untouched.
pub fn update_centers<T: Real>(
    features: &Tensor<T>,
    labels: &[usize],
    fc: &mut FeatureCenters<T>,
    hyper: &BayesHyper,
) -> Result<()> {
    let n = fc.check(features, labels)?;
    let k = fc.dim;
    let mut counts = vec![0usize; fc.classes];
    let mut dc = vec![T::zero(); fc.classes * k];
    let mut ds = vec![T::zero(); fc.classes * k];
    for (i, &y) in labels.iter().enumerate().take(n) {
        counts[y] += 1;
        let f = &features.data()[i * k..(i + 1) * k];
        for j in 0..k {
            let c = fc.centers[y * k + j];
            let s = fc.sigmas[y * k + j];
            let d = f[j] - c;
            dc[y * k + j] = dc[y * k + j] + (c - f[j]);
            ds[y * k + j] = ds[y * k + j] + (T::one() / s - d * d / (s * s * s));
        }
    }
    let sigma_scale = if n == 0 {
        T::zero()
    } else {
        T::lit(hyper.theta) / T::from_usize(n).unwrap()
    };
    let floor = T::lit(SIGMA_FLOOR);
    for m in 0..fc.classes {
        if counts[m] == 0 {
            continue;
        }
        let denom = T::from_usize(1 + counts[m]).unwrap();
        for j in 0..k {
            let idx = m * k + j;
            fc.centers[idx] = fc.centers[idx] - fc.center_lr * dc[idx] / denom;
            let s = fc.sigmas[idx] - fc.center_lr * sigma_scale * ds[idx];
            fc.sigmas[idx] = if s >= floor { s } else { floor };
        }
    }
    Ok(())
}

/// `L = L_S + L_B(kernel) + L_B(feature)`, keeping the parts for logging.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub kernel: f64,
    pub feature: f64,
    pub total: f64,
}

pub fn total_loss(cross_entropy: f64, kernel: f64, feature: f64) -> LossBreakdown {
    LossBreakdown {
        cross_entropy,
        kernel,
        feature,
        total: cross_entropy + kernel + feature,
    }
}
