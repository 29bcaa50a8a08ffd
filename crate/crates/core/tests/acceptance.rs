//! Acceptance gate. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (uncaptured) and then asserts.

mod common;

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use bonn::bayes::{
    feature_bayes_grad_f, feature_bayes_loss, kernel_bayes_loss, prior_grad_mu, prior_grad_sigma,
    BayesHyper, FeatureCenters,
};
use bonn::binarize::{binary_conv2d, pack_input, pack_kernel_rows, sign_binarize};
use bonn::data::{subset, Dataset};
use bonn::diagnostics::{layer_summaries, LayerSummary};
use bonn::model::{
    compression_report, forward, load_checkpoint, save_checkpoint, Architecture, Checkpoint, Mode,
    PackedModel, Params,
};
use bonn::tensor::{
    batch_norm, batch_norm_vjp, conv2d, conv2d_vjp, linear, linear_vjp, pad2d, pad2d_vjp, pool2d,
    pool2d_vjp, softmax_cross_entropy, BnCache, BnMode, BnState, ConvGeometry, PoolCache, PoolKind,
    Tensor,
};
use bonn::trainer::{
    fit, init_params, metrics_csv, train_step, MetricsRow, OptimizerState, Phase, Schedule, Start,
    TrainConfig,
};
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One criterion at a time, so wall-clock budgets measure that criterion alone.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(n: u32, pass: bool, elapsed: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "\ncriterion {n}: {verdict} ({:.1}s) {detail}\n",
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

#[test]
fn criterion_1_gradient_oracles() {
    let _g = serial();
    let t = Instant::now();
    let kernels = check_kernel_gradients(60);
    let vjps = all_vjp_reports::<f32>(20);
    let vjp_worst = vjps.iter().map(|r| r.worst).fold(0.0, f64::max);
    let elapsed = t.elapsed();
    let pass = kernels.kernels >= 50
        && kernels.worst() <= 1e-5
        && vjp_worst <= 1e-3
        && elapsed < Duration::from_secs(120);
    let names: Vec<String> = vjps
        .iter()
        .map(|r| format!("{}={:.1e}", r.name, r.worst))
        .collect();
    report(
        1,
        pass,
        elapsed,
        &format!(
            "{} kernels, worst kernel-loss rel err {:.2e} (X {:.1e}, w {:.1e}, mu {:.1e}, sigma {:.1e}); f32 VJPs {}",
            kernels.kernels,
            kernels.worst(),
            kernels.grad_x.max(kernels.grad_x_frozen_oracle),
            kernels.grad_w,
            kernels.grad_mu,
            kernels.grad_sigma,
            names.join(" ")
        ),
    );
    assert!(pass);
}

fn warmed_params(arch: &Architecture, seed: u64) -> Params<f32> {
    let mut p = init_params(arch, seed).unwrap();
    let mut r = rng(seed + 1000);
    let [c, h, w] = arch.input;
    for _ in 0..3 {
        forward(
            arch,
            &mut p,
            &randn::<f32>(&[8, c, h, w], &mut r),
            Mode::BinaryTrain,
        )
        .unwrap();
    }
    p
}

#[test]
fn criterion_2_xnor_exactness() {
    let _g = serial();
    let t = Instant::now();
    let mut r = rng(2024);
    let mut mismatches = 0usize;
    let geometries = 120;
    for _ in 0..geometries {
        let n = r.gen_range(1..3);
        let c = r.gen_range(1..40);
        let o = r.gen_range(1..9);
        let k = *[1usize, 3, 5].choose(&mut r).unwrap();
        let pad = r.gen_range(0..=k / 2 + 1);
        let stride = r.gen_range(1..3);
        let h = r.gen_range(k.max(2)..12);
        let w = r.gen_range(k.max(2)..12);
        let x = randn::<f32>(&[n, c, h, w], &mut r);
        let kern = randn::<f32>(&[o, c, k, k], &mut r);
        let packed = binary_conv2d(
            &pack_input(&x, ConvGeometry::new(k, stride, pad)).unwrap(),
            &pack_kernel_rows(&kern).unwrap(),
            &vec![1.0; o],
        )
        .unwrap();
        let float = conv2d(
            &pad2d(&sign_binarize(&x), pad, 1.0).unwrap(),
            &sign_binarize(&kern),
            ConvGeometry::new(k, stride, 0),
        )
        .unwrap();
        if packed != float {
            mismatches += 1;
        }
    }

    let mut worst = 0.0f32;
    for (name, input) in [("cnn-small", [1, 28, 28]), ("mini-wrn-16", [3, 32, 32])] {
        let arch = Architecture::build(name, input, 10).unwrap();
        for seed in 0..3 {
            let mut p = warmed_params(&arch, seed);
            let x = randn::<f32>(&[4, input[0], input[1], input[2]], &mut rng(seed + 7));
            let want = forward(&arch, &mut p, &x, Mode::BinaryEval).unwrap().logits;
            let got = PackedModel::from_params(&arch, &p)
                .unwrap()
                .forward(&x)
                .unwrap();
            for (a, b) in got.data().iter().zip(want.data()) {
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = mismatches == 0 && worst <= 1e-5 && elapsed < Duration::from_secs(60);
    report(
        2,
        pass,
        elapsed,
        &format!("{geometries} geometries, {mismatches} mismatched; packed vs binary_eval logits max err {worst:.2e}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_compression() {
    let _g = serial();
    let t = Instant::now();
    let r = compression_report(&Architecture::build_default("resnet18-table").unwrap()).unwrap();
    let (w, wb) = (r.weights_only.ratio(), r.with_bias_and_bn.ratio());
    let elapsed = t.elapsed();
    let pass =
        (w - 11.10).abs() <= 0.5 && (wb - 11.10).abs() <= 0.5 && elapsed < Duration::from_secs(1);
    report(
        3,
        pass,
        elapsed,
        &format!(
            "resnet18 ratio {w:.4} (conv+linear weights), {wb:.4} (with biases and BN affine)"
        ),
    );
    assert!(pass);
}

fn layer_line(s: &[LayerSummary]) -> String {
    s.iter()
        .map(|l| {
            format!(
                "conv{}: qe {:.2} bimodality {:.4}",
                l.conv, l.quant_error, l.bimodality
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

#[test]
fn criterion_4_distribution_evolution() {
    let _g = serial();
    let t = Instant::now();
    let arch = Architecture::build_default("cnn-small").unwrap();
    let (all, _) = bonn::data::load_mnist(mnist_dir()).unwrap();
    let train = subset(&all, 10_000, 0).unwrap();
    let empty = Dataset::empty(train.sample_shape(), 10, "test");
    let cfg = TrainConfig {
        epochs: 20,
        hyper: BayesHyper::new(1e-4, 0.0, 1e-4).unwrap(),
        schedule: Schedule::resnet(20),
        ..TrainConfig::default()
    };
    let before = layer_summaries(&init_params(&arch, cfg.seed).unwrap()).unwrap();
    let out = fit(&arch, &train, &empty, &cfg, Start::Fresh, |_, _| Ok(())).unwrap();
    let after = layer_summaries(&out.last.params).unwrap();
    let qe = |s: &[LayerSummary]| s.iter().map(|l| l.quant_error).sum::<f64>();
    let (q0, q20) = (qe(&before), qe(&after));
    let quant_ok = q20 < q0;
    let bimodal_ok = before
        .iter()
        .zip(&after)
        .all(|(a, b)| b.bimodality > a.bimodality);
    let elapsed = t.elapsed();
    let pass = quant_ok && bimodal_ok && elapsed <= Duration::from_secs(20 * 60);
    report(
        4,
        pass,
        elapsed,
        &format!(
            "(a) quantization error {q0:.2} -> {q20:.2} [{}]; (b) bimodality [{}]; epoch 0: {}; epoch 20: {}",
            if quant_ok { "ok" } else { "not lower" },
            if bimodal_ok { "ok" } else { "not increased in every layer" },
            layer_line(&before),
            layer_line(&after)
        ),
    );
    assert!(pass);
}

/// Highest holdout accuracy over a main phase of 8 epochs followed by 2
/// fine-tuning epochs.
fn dominance_run(
    arch: &Architecture,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
    hyper: BayesHyper,
) -> f64 {
    let main = TrainConfig {
        epochs: 8,
        seed,
        hyper,
        schedule: Schedule::resnet(8),
        ..TrainConfig::default()
    };
    let first = fit(arch, train, test, &main, Start::Fresh, |_, _| Ok(())).unwrap();
    let finetune = TrainConfig {
        epochs: 2,
        phase: Phase::Finetune,
        lr: main.lr.scaled(0.01),
        schedule: Schedule::constant(),
        ..main.clone()
    };
    let second = fit(
        arch,
        train,
        test,
        &finetune,
        Start::Warm(first.last),
        |_, _| Ok(()),
    )
    .unwrap();
    first
        .metrics
        .iter()
        .chain(&second.metrics)
        .filter_map(|r| r.test_acc)
        .fold(0.0, f64::max)
}

#[test]
fn criterion_5_baseline_dominance() {
    let _g = serial();
    let t = Instant::now();
    let arch = Architecture::build_default("cnn-small").unwrap();
    let (train, test) = mnist(1000);
    let mut wins = 0;
    let (mut sum_b, mut sum_s) = (0.0, 0.0);
    let mut rows = Vec::new();
    for seed in 0..5 {
        let b = dominance_run(&arch, &train, &test, seed, BayesHyper::default());
        let s = dominance_run(&arch, &train, &test, seed, BayesHyper::baseline(1e-4));
        if b > s {
            wins += 1;
        }
        sum_b += b;
        sum_s += s;
        rows.push(format!("seed {seed}: {:.1}/{:.1}", 100.0 * b, 100.0 * s));
    }
    let (mb, ms) = (100.0 * sum_b / 5.0, 100.0 * sum_s / 5.0);
    let elapsed = t.elapsed();
    let pass = mb >= ms - 0.5 && wins >= 3 && elapsed <= Duration::from_secs(2 * 3600);
    report(
        5,
        pass,
        elapsed,
        &format!(
            "mean accuracy BONN {mb:.2}% vs baseline {ms:.2}%, BONN wins {wins}/5 ({})",
            rows.join(", ")
        ),
    );
    assert!(pass);
}

/// cnn-small written out layer by layer, trained with plain clipped
/// straight-through estimates and momentum SGD.
struct Stepper {
    k: [Tensor<f32>; 3],
    w: [Vec<f32>; 2],
    gamma: [Vec<f32>; 3],
    beta: [Vec<f32>; 3],
    stats: [BnState<f32>; 3],
    fc_w: Tensor<f32>,
    fc_b: Vec<f32>,
    /// Momentum buffers: k0 k1 k2 w1 w2 gamma0..2 beta0..2 fc_w fc_b.
    vel: Vec<Vec<f32>>,
    lr: f32,
    lr_w: f32,
    momentum: f32,
    decay: f32,
}

fn sgn(v: f32) -> f32 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn clip_ste(g: &Tensor<f32>, a: &Tensor<f32>) -> Tensor<f32> {
    let data = g
        .data()
        .iter()
        .zip(a.data())
        .map(|(&g, &a)| if (-1.0..=1.0).contains(&a) { g } else { 0.0 })
        .collect();
    Tensor::new(g.shape().to_vec(), data).unwrap()
}

struct BinConvTape {
    padded: Tensor<f32>,
    signs: Tensor<f32>,
    alpha: f32,
}

impl Stepper {
    fn from_params(p: &Params<f32>, cfg: &TrainConfig) -> Self {
        let bin = |i: usize| {
            p.convs[i]
                .binary
                .as_ref()
                .unwrap()
                .modulation
                .values()
                .to_vec()
        };
        let mut s = Self {
            k: [
                p.convs[0].kernels.clone(),
                p.convs[1].kernels.clone(),
                p.convs[2].kernels.clone(),
            ],
            w: [bin(1), bin(2)],
            gamma: [
                p.bns[0].gamma.clone(),
                p.bns[1].gamma.clone(),
                p.bns[2].gamma.clone(),
            ],
            beta: [
                p.bns[0].beta.clone(),
                p.bns[1].beta.clone(),
                p.bns[2].beta.clone(),
            ],
            stats: [
                p.bns[0].state.clone(),
                p.bns[1].state.clone(),
                p.bns[2].state.clone(),
            ],
            fc_w: p.linears[0].weight.clone(),
            fc_b: p.linears[0].bias.clone(),
            vel: Vec::new(),
            lr: cfg.lr.main as f32,
            lr_w: cfg.lr.modulation as f32,
            momentum: cfg.momentum as f32,
            decay: cfg.weight_decay as f32,
        };
        s.vel = s.slots().iter().map(|b| vec![0.0; b.len()]).collect();
        s
    }

    fn slots(&self) -> Vec<&[f32]> {
        let mut v: Vec<&[f32]> = vec![
            self.k[0].data(),
            self.k[1].data(),
            self.k[2].data(),
            &self.w[0],
            &self.w[1],
        ];
        v.extend(self.gamma.iter().map(|g| g.as_slice()));
        v.extend(self.beta.iter().map(|b| b.as_slice()));
        v.extend([self.fc_w.data(), self.fc_b.as_slice()]);
        v
    }

    fn bin_forward(&self, a: &Tensor<f32>, layer: usize) -> (Tensor<f32>, BinConvTape) {
        let w = &self.w[layer - 1];
        let mut alpha = 0.0f32;
        for &v in w {
            alpha += v;
        }
        alpha /= w.len() as f32;
        let padded = pad2d(a, 1, 1.0).unwrap();
        let signs = self.k[layer].map(sgn);
        let out = conv2d(&padded, &signs, ConvGeometry::new(3, 1, 0))
            .unwrap()
            .map(|v| v * alpha);
        (
            out,
            BinConvTape {
                padded,
                signs,
                alpha,
            },
        )
    }

    /// Returns the input gradient, the kernel gradient and the modulation gradient.
    fn bin_backward(
        &self,
        tape: &BinConvTape,
        g: &Tensor<f32>,
        layer: usize,
    ) -> (Tensor<f32>, Vec<f32>, Vec<f32>) {
        let (g_pad, g_xhat) =
            conv2d_vjp(&tape.padded, &tape.signs, ConvGeometry::new(3, 1, 0), g).unwrap();
        let w = &self.w[layer - 1];
        let k = w.len();
        let x = self.k[layer].data();
        let mut g_k = vec![0.0f32; x.len()];
        let mut g_w = vec![0.0f32; k];
        for (i, (&gx, &xv)) in g_xhat.data().iter().zip(x).enumerate() {
            let j = i % k;
            let wx = w[j] * xv;
            if (-1.0..=1.0).contains(&wx) {
                g_k[i] = gx * w[j];
                g_w[j] += gx * xv;
            }
        }
        let g_in = pad2d_vjp(&g_pad, 1).unwrap().map(|v| v * tape.alpha);
        (g_in, g_k, g_w)
    }

    fn bn(&mut self, x: &Tensor<f32>, i: usize) -> (Tensor<f32>, BnCache<f32>) {
        batch_norm(
            x,
            &self.gamma[i],
            &self.beta[i],
            &mut self.stats[i],
            BnMode::Train,
        )
        .unwrap()
    }

    fn step(&mut self, x: &Tensor<f32>, labels: &[usize]) -> f32 {
        let n = x.shape()[0];
        let a1 = conv2d(x, &self.k[0], ConvGeometry::new(3, 1, 1)).unwrap();
        let (a2, bn0) = self.bn(&a1, 0);
        let a3 = a2.map(sgn);
        let (a4, t1) = self.bin_forward(&a3, 1);
        let (a5, bn1) = self.bn(&a4, 1);
        let (a6, mp1) = pool2d(&a5, PoolKind::Max, 2, 2).unwrap();
        let a7 = a6.map(sgn);
        let (a8, t2) = self.bin_forward(&a7, 2);
        let (a9, bn2) = self.bn(&a8, 2);
        let (a10, mp2) = pool2d(&a9, PoolKind::Max, 2, 2).unwrap();
        let (a11, gap): (Tensor<f32>, PoolCache) = pool2d(&a10, PoolKind::GlobalAvg, 1, 1).unwrap();
        let feats = a11.clone().reshape(&[n, 64]).unwrap();
        let logits = linear(&feats, &self.fc_w, &self.fc_b).unwrap();
        let (loss, g_logits) = softmax_cross_entropy(&logits, labels).unwrap();

        let (g_feats, g_fc_w, g_fc_b) = linear_vjp(&feats, &self.fc_w, &g_logits).unwrap();
        let g11 = g_feats.reshape(a11.shape()).unwrap();
        let g10 = pool2d_vjp(&gap, &g11).unwrap();
        let g9 = pool2d_vjp(&mp2, &g10).unwrap();
        let (g8, g_gamma2, g_beta2) = batch_norm_vjp(&self.gamma[2], &bn2, &g9).unwrap();
        let (g7, g_k2, g_w2) = self.bin_backward(&t2, &g8, 2);
        let g6 = clip_ste(&g7, &a6);
        let g5 = pool2d_vjp(&mp1, &g6).unwrap();
        let (g4, g_gamma1, g_beta1) = batch_norm_vjp(&self.gamma[1], &bn1, &g5).unwrap();
        let (g3, g_k1, g_w1) = self.bin_backward(&t1, &g4, 1);
        let g2 = clip_ste(&g3, &a2);
        let (g1, g_gamma0, g_beta0) = batch_norm_vjp(&self.gamma[0], &bn0, &g2).unwrap();
        let (_, g_k0) = conv2d_vjp(x, &self.k[0], ConvGeometry::new(3, 1, 1), &g1).unwrap();

        let (m, wd, lr, lr_w) = (self.momentum, self.decay, self.lr, self.lr_w);
        let sgd = |x: &mut [f32], g: &[f32], v: &mut [f32], lr: f32, decay: bool| {
            for i in 0..x.len() {
                let d = if decay { g[i] + wd * x[i] } else { g[i] };
                v[i] = m * v[i] + d;
                x[i] -= lr * v[i];
            }
        };
        let mut vel = std::mem::take(&mut self.vel);
        sgd(self.k[0].data_mut(), g_k0.data(), &mut vel[0], lr, true);
        sgd(self.k[1].data_mut(), &g_k1, &mut vel[1], lr, true);
        sgd(self.k[2].data_mut(), &g_k2, &mut vel[2], lr, true);
        sgd(&mut self.w[0], &g_w1, &mut vel[3], lr_w, false);
        sgd(&mut self.w[1], &g_w2, &mut vel[4], lr_w, false);
        for (i, (gg, gb)) in [
            (g_gamma0, g_beta0),
            (g_gamma1, g_beta1),
            (g_gamma2, g_beta2),
        ]
        .iter()
        .enumerate()
        {
            sgd(&mut self.gamma[i], gg, &mut vel[5 + i], lr, false);
            sgd(&mut self.beta[i], gb, &mut vel[8 + i], lr, false);
        }
        sgd(self.fc_w.data_mut(), g_fc_w.data(), &mut vel[11], lr, true);
        sgd(&mut self.fc_b, &g_fc_b, &mut vel[12], lr, false);
        self.vel = vel;
        loss
    }

    /// Every value the trainer's parameters hold, in a fixed order, as bits.
    fn bits(&self) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .slots()
            .iter()
            .flat_map(|s| s.iter().map(|v| v.to_bits()))
            .collect();
        for s in &self.stats {
            out.extend(
                s.running_mean
                    .iter()
                    .chain(&s.running_var)
                    .map(|v| v.to_bits()),
            );
        }
        out
    }
}

fn trainer_bits(p: &Params<f32>) -> Vec<u32> {
    let bin = |i: usize| {
        p.convs[i]
            .binary
            .as_ref()
            .unwrap()
            .modulation
            .values()
            .to_vec()
    };
    let mut slots: Vec<Vec<f32>> = vec![
        p.convs[0].kernels.data().to_vec(),
        p.convs[1].kernels.data().to_vec(),
        p.convs[2].kernels.data().to_vec(),
        bin(1),
        bin(2),
    ];
    slots.extend(p.bns.iter().map(|b| b.gamma.clone()));
    slots.extend(p.bns.iter().map(|b| b.beta.clone()));
    slots.extend([
        p.linears[0].weight.data().to_vec(),
        p.linears[0].bias.clone(),
    ]);
    for b in &p.bns {
        slots.push(
            b.state
                .running_mean
                .iter()
                .chain(&b.state.running_var)
                .copied()
                .collect(),
        );
    }
    slots.iter().flatten().map(|v| v.to_bits()).collect()
}

#[test]
fn criterion_6_baseline_equivalence() {
    let _g = serial();
    let t = Instant::now();
    let arch = Architecture::build_default("cnn-small").unwrap();
    let (all, _) = bonn::data::load_mnist(mnist_dir()).unwrap();
    let data = subset(&all, 3200, 6).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 32,
        seed: 6,
        hyper: BayesHyper::baseline(1e-4),
        schedule: Schedule::resnet(1),
        deterministic: true,
        ..TrainConfig::default()
    };

    let init = init_params(&arch, cfg.seed).unwrap();
    let mut params = init.clone();
    let mut opt = OptimizerState::new(&params);
    let mut oracle = Stepper::from_params(&init, &cfg);
    let frozen: Vec<Vec<f32>> = params
        .convs
        .iter()
        .filter_map(|c| c.binary.as_ref())
        .flat_map(|b| [b.prior.mu.clone(), b.prior.sigma.clone()])
        .collect();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle.set_stream(1);
    order.shuffle(&mut shuffle);

    let mut first_diff = None;
    let mut steps = 0;
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let (x, y) = data.batch(chunk).unwrap();
        let st = train_step(
            &arch,
            &mut params,
            &mut opt,
            &x,
            &y,
            &cfg,
            cfg.lr,
            step as u64,
        )
        .unwrap();
        let loss = oracle.step(&x, &y);
        steps += 1;
        if first_diff.is_none()
            && (trainer_bits(&params) != oracle.bits() || st.loss.cross_entropy != loss as f64)
        {
            first_diff = Some(step);
        }
    }
    let priors_untouched = frozen
        == params
            .convs
            .iter()
            .filter_map(|c| c.binary.as_ref())
            .flat_map(|b| [b.prior.mu.clone(), b.prior.sigma.clone()])
            .collect::<Vec<_>>();

    let empty = Dataset::empty(data.sample_shape(), 10, "test");
    let fitted = fit(&arch, &data, &empty, &cfg, Start::Fresh, |_, _| Ok(())).unwrap();
    let fit_matches = trainer_bits(&fitted.last.params) == oracle.bits();

    let elapsed = t.elapsed();
    let pass = steps >= 100 && first_diff.is_none() && fit_matches && priors_untouched;
    report(
        6,
        pass,
        elapsed,
        &format!(
            "{steps} steps, first differing step {first_diff:?}; fit() after one epoch bit-identical: {fit_matches}; mu/sigma untouched: {priors_untouched}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_accounting_and_reproducibility() {
    let _g = serial();
    let t = Instant::now();
    let arch = Architecture::build_default("cnn-small").unwrap();
    let (train, test) = mnist(1000);
    let train = subset(&train, 1000, 7).unwrap();
    let test = subset(&test, 200, 7).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        seed: 7,
        phase: Phase::Finetune,
        schedule: Schedule::resnet(4),
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let ck_path = dir.path().join("epoch2.bin");
    let run = |save: bool| {
        fit(&arch, &train, &test, &cfg, Start::Fresh, |row, ck| {
            if save && row.epoch == 2 {
                save_checkpoint(&ck_path, ck)?;
            }
            Ok(())
        })
        .unwrap()
    };
    let a = run(true);
    let b = run(false);
    let rows: &[MetricsRow] = &a.metrics;
    let worst_identity = rows
        .iter()
        .map(|r| (r.total - (r.l_s + r.l_b_kernel + r.l_b_feature)).abs())
        .fold(0.0, f64::max);
    let all_terms = rows
        .iter()
        .all(|r| r.l_b_kernel > 0.0 && r.l_b_feature > 0.0);
    let csv_a = metrics_csv(&a.metrics);
    let csv_same = csv_a.as_bytes() == metrics_csv(&b.metrics).as_bytes();

    let disk = std::fs::read(&ck_path).unwrap();
    let loaded: Checkpoint = load_checkpoint(&ck_path).unwrap();
    let round_trip =
        loaded.to_bytes().unwrap() == disk && Checkpoint::from_bytes(&disk).unwrap() == loaded;
    let resumed = fit(&arch, &train, &test, &cfg, Start::Resume(loaded), |_, _| {
        Ok(())
    })
    .unwrap();
    let mut stitched = a.metrics[..2].to_vec();
    stitched.extend(resumed.metrics.clone());
    let resume_same = metrics_csv(&stitched).as_bytes() == csv_a.as_bytes()
        && resumed.last.to_bytes().unwrap() == a.last.to_bytes().unwrap();

    let elapsed = t.elapsed();
    let pass = worst_identity <= 1e-6 && all_terms && csv_same && round_trip && resume_same;
    report(
        7,
        pass,
        elapsed,
        &format!(
            "{} rows, max |total - sum| {worst_identity:.1e}, all loss terms active {all_terms}; metrics.csv byte-identical {csv_same}; checkpoint round trip {round_trip}; resume identical {resume_same}",
            rows.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_loss_unit_examples() {
    let _g = serial();
    let t = Instant::now();
    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64, tol: f64| {
        if !((got - want).abs() <= tol) {
            failures.push(format!("{name}: got {got}, want {want}"));
        }
    };
    let h = |lambda, theta, nu| BayesHyper::new(lambda, theta, nu).unwrap();

    check(
        "kernel loss direct",
        kernel_bayes_loss(&[0.5, -0.5], &[1.0, 1.0], 0.5, 1.0, &h(2.0, 0.0, 1.0)).unwrap(),
        0.5,
        1e-12,
    );
    check(
        "kernel loss lambda 0",
        kernel_bayes_loss(
            &[0.3, -2.0, 0.9],
            &[0.2, 1.5, -0.4],
            0.7,
            0.3,
            &h(0.0, 0.0, 1.0),
        )
        .unwrap(),
        0.0,
        0.0,
    );
    check(
        "kernel loss at the modes",
        kernel_bayes_loss(&[1.0, -1.0], &[1.0, 1.0], 1.0, 1.0, &h(1.0, 0.0, 1.0)).unwrap(),
        0.0,
        1e-15,
    );
    check(
        "kernel loss sigma 0 rejected",
        kernel_bayes_loss(&[1.0], &[1.0], 1.0, 0.0, &h(1.0, 0.0, 1.0)).is_err() as u8 as f64,
        1.0,
        0.0,
    );

    check(
        "prior_grad_mu direct",
        prior_grad_mu(&[0.6, -0.4], 0.5, 1.0, &h(1.0, 0.0, 1.0)).unwrap(),
        0.0,
        1e-15,
    );
    check(
        "prior_grad_mu at the modes",
        prior_grad_mu(&[0.8, -0.8, 0.8], 0.8, 0.6, &h(1.0, 0.0, 1.0)).unwrap(),
        0.0,
        1e-15,
    );
    check(
        "prior_grad_sigma at the modes",
        prior_grad_sigma(&[0.7, -0.7, 0.7, -0.7], 0.7, 1.0, &h(0.5, 0.0, 0.2)).unwrap(),
        0.5 * 0.2,
        1e-15,
    );
    let x = [0.9, -0.2, 0.4, -1.3, 0.75];
    let mu = 0.6;
    let rms =
        (x.iter().map(|&v: &f64| (v.abs() - mu).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    check(
        "prior_grad_sigma at the folded RMS",
        prior_grad_sigma(&x, mu, rms, &h(1.0, 0.0, 1.0)).unwrap(),
        0.0,
        1e-12,
    );

    let one = |f: [f64; 2], c: [f64; 2], theta| {
        let feats = Tensor::new(vec![1, 2], f.to_vec()).unwrap();
        let fc = FeatureCenters::from_parts(1, 2, c.to_vec(), vec![1.0, 1.0], 0.5).unwrap();
        let hyper = h(1e-4, theta, 1e-4);
        (
            feature_bayes_loss(&feats, &[0], &fc, &hyper).unwrap(),
            feature_bayes_grad_f(&feats, &[0], &fc, &hyper).unwrap(),
        )
    };
    check(
        "feature loss at the center",
        one([0.3, -0.2], [0.3, -0.2], 1.0).0,
        0.0,
        0.0,
    );
    check(
        "feature loss theta 0",
        one([1.0, 2.0], [0.0, 0.0], 0.0).0,
        0.0,
        0.0,
    );
    let (loss, grad) = one([1.0, 0.0], [0.0, 0.0], 2.0);
    check("feature loss direct", loss, 2.0, 1e-12);
    check("feature grad direct", grad.data()[0], 4.0, 1e-12);
    check("feature grad direct, zero axis", grad.data()[1], 0.0, 0.0);

    let uniform = Tensor::<f64>::zeros(&[3, 10]);
    let (ce, _) = softmax_cross_entropy(&uniform, &[0, 4, 9]).unwrap();
    check("softmax uniform M=10", ce, 10f64.ln(), 1e-12);
    let (ce32, _) = softmax_cross_entropy(&Tensor::<f32>::zeros(&[2, 10]), &[1, 2]).unwrap();
    check(
        "softmax uniform M=10 (f32)",
        ce32 as f64,
        std::f64::consts::LN_10,
        1e-6,
    );
    let margin = Tensor::new(vec![1, 2], vec![20.0f64, 0.0]).unwrap();
    check(
        "softmax margin 20, M=2",
        softmax_cross_entropy(&margin, &[0]).unwrap().0,
        0.0,
        1e-8,
    );

    let elapsed = t.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(10);
    report(
        8,
        pass,
        elapsed,
        &if failures.is_empty() {
            "kernel, prior, feature and softmax examples all hold".to_string()
        } else {
            failures.join("; ")
        },
    );
    assert!(pass, "{failures:?}");
}
