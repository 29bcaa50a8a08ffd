use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LearningRates, TrainConfig};
use crate::bayes::{
    feature_bayes_grad_f, feature_bayes_loss, layer_kernel_terms, total_loss, KernelPrior,
    LossBreakdown, SIGMA_FLOOR,
};
use crate::error::{Error, Result};
use crate::model::{backward, forward, Architecture, Grads, Mode, Params};
use crate::tensor::{softmax_cross_entropy, Tensor};

fn mean_abs(v: &[f32]) -> f32 {
    v.iter().map(|x| x.abs()).sum::<f32>() / v.len() as f32
}

/// Seeded initialization.
///
/// Kernels and classifier weights are fan-in normal (`std = √(2/fan_in)`);
/// each modulation element is `mean|X^l|` jittered by a uniform ±10%;
/// `μ_i = mean|X_i|` and `σ_i = std(X_i)` floored.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<Params<f32>> {
    let mut p = Params::<f32>::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in &mut p.convs {
        let [_, ci, kh, kw] = c.kernels.dims4("init_params")?;
        let std = (2.0 / (ci * kh * kw) as f64).sqrt();
        let normal = Normal::new(0.0f32, std as f32).map_err(|e| Error::Config(e.to_string()))?;
        for v in c.kernels.data_mut() {
            *v = normal.sample(&mut rng);
        }
        if let Some(b) = &mut c.binary {
            let k = b.modulation.len();
            let scale = mean_abs(c.kernels.data());
            for w in b.modulation.values_mut() {
                *w = scale * (1.0 + rng.gen_range(-0.1f32..0.1));
            }
            b.prior = KernelPrior::estimate(c.kernels.data(), k)?;
        }
    }
    for l in &mut p.linears {
        let [_, fan_in] = l.weight.dims2("init_params")?;
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f64).sqrt() as f32)
            .map_err(|e| Error::Config(e.to_string()))?;
        for v in l.weight.data_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(p)
}

/// Momentum buffers aligned with [`Params::buffers`]; buffers without
/// momentum (μ, σ, BN running statistics) stay empty.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f32>>,
}

/// Which update rule applies to each entry of [`Params::buffers`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rule {
    /// Momentum, with or without weight decay, at the main rate.
    Main { decay: bool },
    /// Momentum at the modulation rate.
    Modulation,
    /// Plain SGD at the μ rate.
    Mu,
    /// Plain SGD at the modulation rate, then floored.
    Sigma,
    /// Not a learnable buffer.
    Frozen,
}

fn rules(params: &Params<f32>) -> Vec<Rule> {
    let mut r = Vec::new();
    for c in &params.convs {
        r.push(Rule::Main { decay: true });
        if c.binary.is_some() {
            r.extend([Rule::Modulation, Rule::Mu, Rule::Sigma]);
        }
    }
    for _ in &params.bns {
        r.extend([
            Rule::Main { decay: false },
            Rule::Main { decay: false },
            Rule::Frozen,
            Rule::Frozen,
        ]);
    }
    for _ in &params.linears {
        r.extend([Rule::Main { decay: true }, Rule::Main { decay: false }]);
    }
    r
}

impl OptimizerState {
    pub fn new(params: &Params<f32>) -> Self {
        let velocity = params
            .buffers()
            .iter()
            .zip(rules(params))
            .map(|(b, r)| match r {
                Rule::Main { .. } | Rule::Modulation => vec![0.0; b.len()],
                _ => Vec::new(),
            })
            .collect();
        Self { velocity }
    }

    pub fn from_buffers(params: &Params<f32>, velocity: Vec<Vec<f32>>) -> Result<Self> {
        let fresh = Self::new(params);
        if velocity.len() != fresh.velocity.len()
            || velocity
                .iter()
                .zip(&fresh.velocity)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Config(
                "optimizer state does not match the parameters".into(),
            ));
        }
        Ok(Self { velocity })
    }
}

/// Losses and accuracy of one step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: LossBreakdown,
    pub correct: usize,
    pub samples: usize,
}

/// Row-wise argmax, ties to the lowest index.
pub fn predictions(logits: &Tensor<f32>) -> Vec<usize> {
    let m = logits.shape()[1];
    logits
        .data()
        .chunks_exact(m)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Gradients of every buffer in [`Params::buffers`] order (empty where no
/// gradient exists).
fn flatten_grads(
    params: &Params<f32>,
    g: Grads<f32>,
    mu: Vec<Vec<f32>>,
    sigma: Vec<Vec<f32>>,
) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    let (mut mu, mut sigma) = (mu.into_iter(), sigma.into_iter());
    for (c, gc) in params.convs.iter().zip(g.convs) {
        out.push(gc.kernels.into_data());
        if let Some(b) = &c.binary {
            out.push(
                gc.modulation
                    .expect("binary conv has a modulation gradient"),
            );
            out.push(mu.next().unwrap_or_else(|| vec![0.0; b.prior.len()]));
            out.push(sigma.next().unwrap_or_else(|| vec![0.0; b.prior.len()]));
        }
    }
    for gb in g.bns {
        out.extend([gb.gamma, gb.beta, Vec::new(), Vec::new()]);
    }
    for gl in g.linears {
        out.extend([gl.weight.into_data(), gl.bias]);
    }
    out
}

fn buffer_names(params: &Params<f32>) -> Vec<String> {
    let mut names = Vec::new();
    params.for_each_slice(|n, _| names.push(n));
    names
}

/// One optimization step on a batch.
///
/// Forward in binary-train mode, cross-entropy and (fine-tune phase) feature
/// loss gradients through the network with straight-through estimates, plus
/// the analytic kernel-loss gradients; then momentum SGD with weight decay on
/// kernels and classifier weights, plain SGD on `μ`, `σ`, floor on `σ`, and
/// the center update when the feature loss is active.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    arch: &Architecture,
    params: &mut Params<f32>,
    opt: &mut OptimizerState,
    images: &Tensor<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
    lr: LearningRates,
    step: u64,
) -> Result<StepStats> {
    let out = forward(arch, params, images, Mode::BinaryTrain)?;
    let (ce, g_logits) = softmax_cross_entropy(&out.logits, labels)?;
    let correct = predictions(&out.logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();

    let (feature, g_features) = if cfg.feature_loss_active() {
        (
            feature_bayes_loss(&out.features, labels, &params.centers, &cfg.hyper)?,
            Some(feature_bayes_grad_f(
                &out.features,
                labels,
                &params.centers,
                &cfg.hyper,
            )?),
        )
    } else {
        (0.0, None)
    };
    let mut grads = backward(params, &out.cache, &g_logits, g_features.as_ref())?;

    let mut kernel = 0.0f64;
    let (mut g_mu, mut g_sigma) = (Vec::new(), Vec::new());
    if cfg.kernel_loss_active() {
        for (c, gc) in params.convs.iter().zip(grads.convs.iter_mut()) {
            if let Some(b) = &c.binary {
                let t = layer_kernel_terms(&c.kernels, &b.modulation, &b.prior, &cfg.hyper)?;
                kernel += t.loss as f64;
                gc.kernels.add_assign(&t.grad_x)?;
                let gm = gc
                    .modulation
                    .as_mut()
                    .expect("binary conv has a modulation gradient");
                for (a, d) in gm.iter_mut().zip(&t.grad_w) {
                    *a += d;
                }
                g_mu.push(t.grad_mu);
                g_sigma.push(t.grad_sigma);
            }
        }
    }

    let rules = rules(params);
    let flat = flatten_grads(params, grads, g_mu, g_sigma);
    if let Some(i) = flat.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Training {
            layer: buffer_names(params)[i].clone(),
            step,
        });
    }

    let m = cfg.momentum as f32;
    let wd = cfg.weight_decay as f32;
    let floor = SIGMA_FLOOR as f32;
    for (((buf, g), v), rule) in params
        .buffers_mut()
        .into_iter()
        .zip(&flat)
        .zip(opt.velocity.iter_mut())
        .zip(rules)
    {
        match rule {
            Rule::Main { decay } => {
                let lr = lr.main as f32;
                for ((x, &g), v) in buf.iter_mut().zip(g).zip(v.iter_mut()) {
                    let d = if decay { g + wd * *x } else { g };
                    *v = m * *v + d;
                    *x -= lr * *v;
                }
            }
            Rule::Modulation => {
                let lr = lr.modulation as f32;
                for ((x, &g), v) in buf.iter_mut().zip(g).zip(v.iter_mut()) {
                    *v = m * *v + g;
                    *x -= lr * *v;
                }
            }
            Rule::Mu => {
                let lr = lr.mu as f32;
                for (x, &g) in buf.iter_mut().zip(g) {
                    *x -= lr * g;
                }
            }
            Rule::Sigma => {
                let lr = lr.modulation as f32;
                for (x, &g) in buf.iter_mut().zip(g) {
                    *x -= lr * g;
                    if !(*x >= floor) {
                        *x = floor;
                    }
                }
            }
            Rule::Frozen => {}
        }
    }

    if cfg.feature_loss_active() {
        crate::bayes::update_centers(&out.features, labels, &mut params.centers, &cfg.hyper)?;
    }
    if !params.is_finite() {
        let mut bad = String::from("parameters");
        params.for_each_slice(|n, s| {
            if bad == "parameters" && s.iter().any(|v| !v.is_finite()) {
                bad = n;
            }
        });
        return Err(Error::Training { layer: bad, step });
    }
    Ok(StepStats {
        loss: total_loss(ce as f64, kernel, feature as f64),
        correct,
        samples: labels.len(),
    })
}
