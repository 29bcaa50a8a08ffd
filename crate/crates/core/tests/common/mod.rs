//! Oracles shared by the integration tests: finite differences, naive loops,
//! and small random generators.

#![allow(dead_code)]

use bonn::tensor::{
    batch_norm, batch_norm_vjp, conv2d, conv2d_vjp, linear, linear_vjp, pad2d, pad2d_vjp, pool2d,
    pool2d_vjp, softmax_cross_entropy, BnMode, BnState, ConvGeometry, PoolKind, Real, Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Distinct values at least 0.05 apart, shuffled: no max-pool ties within a
/// finite-difference step.
pub fn spread<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v.into_iter().map(T::lit).collect()).unwrap()
}

pub fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap()).collect()
}

/// `Σ g·y` accumulated in f64.
pub fn weighted_sum<T: Real>(g: &Tensor<T>, y: &Tensor<T>) -> f64 {
    g.data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
        .sum()
}

/// Central differences of `f` w.r.t. every element of `x`.
pub fn central_diff<T: Real>(
    x: &Tensor<T>,
    h: f64,
    mut f: impl FnMut(&Tensor<T>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let x0 = probe.data()[i];
            let (hi, lo) = (x0 + T::lit(h), x0 - T::lit(h));
            probe.data_mut()[i] = hi;
            let up = f(&probe);
            probe.data_mut()[i] = lo;
            let down = f(&probe);
            probe.data_mut()[i] = x0;
            // Divide by the step actually taken after rounding.
            (up - down) / (hi - lo).to_f64().unwrap()
        })
        .collect()
}

/// `‖a − b‖₂ / ‖b‖₂` (absolute when `b` vanishes).
pub fn rel_err_norm(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if n < 1e-12 {
        d
    } else {
        d / n
    }
}

/// `|a − b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// Finite-difference step and the matching tolerance for each precision.
pub fn step_and_tol<T: Real>() -> (f64, f64) {
    if std::mem::size_of::<T>() == 4 {
        (1e-3, 1e-3)
    } else {
        (1e-5, 1e-6)
    }
}

/// Direct six-loop cross-correlation.
pub fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (s, kd) = (x.shape(), k.shape());
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (o, ks) = (kd[0], kd[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ch) * h + iy as usize) * w + ix as usize]
                                    * k.data()[((oc * c + ch) * ks + ky) * ks + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Worst relative error of each VJP over `seeds` random cases.
pub struct VjpReport {
    pub name: &'static str,
    pub worst: f64,
}

pub fn check_conv_vjp<T: Real>(seeds: u64) -> VjpReport {
    let (h, _) = step_and_tol::<T>();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(1000 + seed);
        let stride = r.gen_range(1..=2);
        let pad = r.gen_range(0..=1);
        let ks = if r.gen_bool(0.3) { 1 } else { 3 };
        let (n, c, o) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let hw = r.gen_range(ks.max(3)..=6);
        let geom = ConvGeometry::new(ks, stride, pad);
        let x = randn::<T>(&[n, c, hw, hw], &mut r);
        let k = randn::<T>(&[o, c, ks, ks], &mut r);
        let y = conv2d(&x, &k, geom).unwrap();
        let g = randn::<T>(y.shape(), &mut r);
        let (gx, gk) = conv2d_vjp(&x, &k, geom, &g).unwrap();
        let fx = central_diff(&x, h, |p| weighted_sum(&g, &conv2d(p, &k, geom).unwrap()));
        let fk = central_diff(&k, h, |p| weighted_sum(&g, &conv2d(&x, p, geom).unwrap()));
        worst = worst.max(rel_err_norm(&to_f64(gx.data()), &fx));
        worst = worst.max(rel_err_norm(&to_f64(gk.data()), &fk));
    }
    VjpReport {
        name: "conv2d_vjp",
        worst,
    }
}

pub fn check_pad_vjp<T: Real>(seeds: u64) -> VjpReport {
    let (h, _) = step_and_tol::<T>();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(2000 + seed);
        let pad = r.gen_range(0..=2);
        let x = randn::<T>(&[2, 2, 3, 4], &mut r);
        let y = pad2d(&x, pad, T::one()).unwrap();
        let g = randn::<T>(y.shape(), &mut r);
        let gx = pad2d_vjp(&g, pad).unwrap();
        let fx = central_diff(&x, h, |p| {
            weighted_sum(&g, &pad2d(p, pad, T::one()).unwrap())
        });
        worst = worst.max(rel_err_norm(&to_f64(gx.data()), &fx));
    }
    VjpReport {
        name: "pad2d_vjp",
        worst,
    }
}

pub fn check_linear_vjp<T: Real>(seeds: u64) -> VjpReport {
    let (h, _) = step_and_tol::<T>();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(3000 + seed);
        let (n, d, m) = (r.gen_range(1..=4), r.gen_range(1..=6), r.gen_range(1..=5));
        let x = randn::<T>(&[n, d], &mut r);
        let w = randn::<T>(&[m, d], &mut r);
        let b = randn::<T>(&[m], &mut r);
        let g = randn::<T>(&[n, m], &mut r);
        let (gx, gw, gb) = linear_vjp(&x, &w, &g).unwrap();
        let fx = central_diff(&x, h, |p| {
            weighted_sum(&g, &linear(p, &w, b.data()).unwrap())
        });
        let fw = central_diff(&w, h, |p| {
            weighted_sum(&g, &linear(&x, p, b.data()).unwrap())
        });
        let fb = central_diff(&b, h, |p| {
            weighted_sum(&g, &linear(&x, &w, p.data()).unwrap())
        });
        worst = worst.max(rel_err_norm(&to_f64(gx.data()), &fx));
        worst = worst.max(rel_err_norm(&to_f64(gw.data()), &fw));
        worst = worst.max(rel_err_norm(&to_f64(&gb), &fb));
    }
    VjpReport {
        name: "linear_vjp",
        worst,
    }
}

pub fn check_bn_vjp<T: Real>(seeds: u64) -> VjpReport {
    let (h, _) = step_and_tol::<T>();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(4000 + seed);
        let (n, c, s) = (r.gen_range(2..=3), r.gen_range(1..=3), r.gen_range(2..=3));
        let x = randn::<T>(&[n, c, s, s], &mut r);
        let gamma = randn::<T>(&[c], &mut r);
        let beta = randn::<T>(&[c], &mut r);
        let g = randn::<T>(x.shape(), &mut r);
        let run = |x: &Tensor<T>, gm: &Tensor<T>, bt: &Tensor<T>| {
            let mut st = BnState::new(c);
            batch_norm(x, gm.data(), bt.data(), &mut st, BnMode::Train).unwrap()
        };
        let (_, cache) = run(&x, &gamma, &beta);
        let (gx, gg, gb) = batch_norm_vjp(gamma.data(), &cache, &g).unwrap();
        let fx = central_diff(&x, h, |p| weighted_sum(&g, &run(p, &gamma, &beta).0));
        let fg = central_diff(&gamma, h, |p| weighted_sum(&g, &run(&x, p, &beta).0));
        let fb = central_diff(&beta, h, |p| weighted_sum(&g, &run(&x, &gamma, p).0));
        worst = worst.max(rel_err_norm(&to_f64(gx.data()), &fx));
        worst = worst.max(rel_err_norm(&to_f64(&gg), &fg));
        worst = worst.max(rel_err_norm(&to_f64(&gb), &fb));
    }
    VjpReport {
        name: "batch_norm_vjp",
        worst,
    }
}

pub fn check_pool_vjp<T: Real>(seeds: u64) -> VjpReport {
    let (h, _) = step_and_tol::<T>();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(5000 + seed);
        let kind = [PoolKind::Max, PoolKind::Avg, PoolKind::GlobalAvg][seed as usize % 3];
        let (window, stride) = if r.gen_bool(0.5) { (2, 2) } else { (3, 2) };
        let x = spread::<T>(&[2, 2, 5, 5], &mut r);
        let (y, cache) = pool2d(&x, kind, window, stride).unwrap();
        let g = randn::<T>(y.shape(), &mut r);
        let gx = pool2d_vjp(&cache, &g).unwrap();
        let fx = central_diff(&x, h, |p| {
            weighted_sum(&g, &pool2d(p, kind, window, stride).unwrap().0)
        });
        worst = worst.max(rel_err_norm(&to_f64(gx.data()), &fx));
    }
    VjpReport {
        name: "pool2d_vjp",
        worst,
    }
}

pub fn check_softmax_ce_grad<T: Real>(seeds: u64) -> VjpReport {
    let (h, _) = step_and_tol::<T>();
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut r = rng(6000 + seed);
        let logits = randn::<T>(&[4, 10], &mut r);
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..10)).collect();
        let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
        let f = central_diff(&logits, h, |p| {
            softmax_cross_entropy(p, &labels)
                .unwrap()
                .0
                .to_f64()
                .unwrap()
        });
        worst = worst.max(rel_err_norm(&to_f64(g.data()), &f));
    }
    VjpReport {
        name: "softmax_cross_entropy",
        worst,
    }
}

pub fn all_vjp_reports<T: Real>(seeds: u64) -> Vec<VjpReport> {
    vec![
        check_conv_vjp::<T>(seeds),
        check_pad_vjp::<T>(seeds),
        check_linear_vjp::<T>(seeds),
        check_bn_vjp::<T>(seeds),
        check_pool_vjp::<T>(seeds),
        check_softmax_ce_grad::<T>(seeds),
    ]
}

/// Kernel loss with an externally supplied, frozen `X̂`, written out term by
/// term from the loss definition.
#[allow(clippy::too_many_arguments)]
pub fn kernel_loss_frozen(
    x: &[f64],
    w: &[f64],
    xhat: &[f64],
    mu: f64,
    sigma: f64,
    lambda: f64,
    nu: f64,
) -> f64 {
    let mut recon = 0.0;
    let mut pos = 0.0;
    let mut neg = 0.0;
    for k in 0..x.len() {
        recon += (xhat[k] - w[k] * x[k]).powi(2);
        if x[k] >= 0.0 {
            pos += (x[k] - mu).powi(2);
        } else {
            neg += (x[k] + mu).powi(2);
        }
    }
    let kk = x.len() as f64;
    lambda / 2.0 * (recon + nu / (sigma * sigma) * (pos + neg) + nu * kk * (sigma * sigma).ln())
}

/// Random kernel whose elements all satisfy `|X_k| > 1e-2`.
pub fn kernel_away_from_zero(k: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..k)
        .map(|_| loop {
            let v: f64 = r.sample::<f64, _>(StandardNormal) * 0.5;
            if v.abs() > 1e-2 {
                break v;
            }
        })
        .collect()
}

/// Worst elementwise relative errors of the four kernel-loss gradients
/// against finite differences, over `kernels` random kernels.
#[derive(Debug, Default)]
pub struct KernelGradReport {
    pub kernels: usize,
    pub grad_x: f64,
    pub grad_x_frozen_oracle: f64,
    pub grad_w: f64,
    pub grad_mu: f64,
    pub grad_sigma: f64,
}

impl KernelGradReport {
    pub fn worst(&self) -> f64 {
        self.grad_x
            .max(self.grad_x_frozen_oracle)
            .max(self.grad_w)
            .max(self.grad_mu)
            .max(self.grad_sigma)
    }
}

pub fn check_kernel_gradients(kernels: usize) -> KernelGradReport {
    use bonn::bayes::{
        kernel_bayes_grad_w, kernel_bayes_grad_x, kernel_bayes_loss, prior_grad_mu,
        prior_grad_sigma, BayesHyper,
    };
    use bonn::binarize::ModulationVector;

    // The loss is quadratic in X and w on a fixed sign partition, so central
    // differences are exact up to rounding and a wide step is safe (< 1e-2).
    let h = 1e-3;
    let mut rep = KernelGradReport {
        kernels,
        ..Default::default()
    };
    for case in 0..kernels {
        let mut r = rng(7000 + case as u64);
        let k = [9usize, 27, 144][case % 3];
        let hyper =
            BayesHyper::new([1e-4, 1.0, 2.0][case % 3], 0.0, r.gen_range(0.1..1.0)).unwrap();
        let x = kernel_away_from_zero(k, &mut r);
        let w: Vec<f64> = (0..k).map(|_| r.gen_range(0.2..1.5)).collect();
        let mu = r.gen_range(0.05..1.0);
        let sigma = r.gen_range(0.1..2.0);
        let alpha = w.iter().sum::<f64>() / k as f64;
        let xhat: Vec<f64> = x
            .iter()
            .map(|&v| if v >= 0.0 { alpha } else { -alpha })
            .collect();

        let gx = kernel_bayes_grad_x(&x, &w, mu, sigma, &hyper).unwrap();
        let xt = Tensor::new(vec![k], x.clone()).unwrap();
        let fd_lib = central_diff(&xt, h, |p| {
            kernel_bayes_loss(p.data(), &w, mu, sigma, &hyper).unwrap()
        });
        let fd_oracle = central_diff(&xt, h, |p| {
            kernel_loss_frozen(p.data(), &w, &xhat, mu, sigma, hyper.lambda, hyper.nu)
        });
        for j in 0..k {
            rep.grad_x = rep.grad_x.max(rel_err(gx[j], fd_lib[j]));
            rep.grad_x_frozen_oracle = rep.grad_x_frozen_oracle.max(rel_err(gx[j], fd_oracle[j]));
        }

        // A layer of several kernels sharing w, with α frozen.
        let rows = 1 + case % 4;
        let mut layer = x.clone();
        for _ in 1..rows {
            layer.extend(kernel_away_from_zero(k, &mut r));
        }
        let lt = Tensor::new(vec![rows, k], layer.clone()).unwrap();
        let gw =
            kernel_bayes_grad_w(&lt, &ModulationVector::new(w.clone()).unwrap(), &hyper).unwrap();
        let wt = Tensor::new(vec![k], w.clone()).unwrap();
        let fd_w = central_diff(&wt, h, |p| {
            layer
                .chunks_exact(k)
                .map(|xi| {
                    let xh: Vec<f64> = xi
                        .iter()
                        .map(|&v| if v >= 0.0 { alpha } else { -alpha })
                        .collect();
                    kernel_loss_frozen(xi, p.data(), &xh, mu, sigma, hyper.lambda, hyper.nu)
                })
                .sum()
        });
        for j in 0..k {
            rep.grad_w = rep.grad_w.max(rel_err(gw[j], fd_w[j]));
        }

        let kk = k as f64;
        let gmu = prior_grad_mu(&x, mu, sigma, &hyper).unwrap();
        let hm = 1e-5 * mu;
        let fd_mu = (kernel_bayes_loss(&x, &w, mu + hm, sigma, &hyper).unwrap()
            - kernel_bayes_loss(&x, &w, mu - hm, sigma, &hyper).unwrap())
            / (2.0 * hm);
        rep.grad_mu = rep.grad_mu.max(rel_err(gmu, fd_mu / kk));

        let gs = prior_grad_sigma(&x, mu, sigma, &hyper).unwrap();
        let hs = 1e-5 * sigma;
        let fd_s = (kernel_bayes_loss(&x, &w, mu, sigma + hs, &hyper).unwrap()
            - kernel_bayes_loss(&x, &w, mu, sigma - hs, &hyper).unwrap())
            / (2.0 * hs);
        rep.grad_sigma = rep.grad_sigma.max(rel_err(gs, fd_s / kk));
    }
    rep
}

pub fn mnist_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k")
}

/// The bundled MNIST sample split into `(train, holdout)`.
pub fn mnist(holdout: usize) -> (bonn::data::Dataset, bonn::data::Dataset) {
    let (train, _) = bonn::data::load_mnist(mnist_dir()).expect("bundled MNIST sample");
    bonn::data::split(&train, holdout, 0).unwrap()
}
