use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bonn::bayes::BayesHyper;
use bonn::binarize::{binary_conv2d, pack_input, pack_kernel_rows, sign_binarize};
use bonn::data::{load_cifar10, load_mnist, split, subset, Augment, Dataset};
use bonn::diagnostics::{histogram, histogram_csv, layer_summaries};
use bonn::model::{
    compression_report, export_packed, load_checkpoint, save_checkpoint, Architecture,
    CompressionReport,
};
use bonn::tensor::{conv2d, pad2d, ConvGeometry, Tensor};
use bonn::trainer::{
    evaluate, fit, EvalMode, LearningRates, Phase, Schedule, Start, TrainConfig, METRICS_HEADER,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::fail::{data_failure, CliResult, Failure};
use crate::manifest::{hash_dir, hash_file, RunManifest};
use crate::{
    BenchArgs, DataArgs, DatasetKind, EvalArgs, HistArgs, PackArgs, PhaseArg, RatioArgs,
    ScheduleKind, TrainArgs,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const BEST_FILE: &str = "best.bin";
pub const METRICS_FILE: &str = "metrics.csv";

fn data_dir(args: &DataArgs) -> PathBuf {
    args.data_dir.clone().unwrap_or_else(|| match args.dataset {
        DatasetKind::Mnist => PathBuf::from("data/mnist10k"),
        DatasetKind::Cifar10 => PathBuf::from("data/cifar-10-batches-bin"),
    })
}

/// Train and test splits; a missing test set is carved from the training
/// files as a stratified holdout.
fn load_data(args: &DataArgs) -> CliResult<(Dataset, Dataset, PathBuf)> {
    let dir = data_dir(args);
    if !dir.is_dir() {
        return Err(Failure::usage(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let (train, test) = match args.dataset {
        DatasetKind::Mnist => load_mnist(&dir),
        DatasetKind::Cifar10 => load_cifar10(&dir),
    }
    .map_err(data_failure)?;
    if !test.is_empty() || args.holdout == 0 {
        return Ok((train, test, dir));
    }
    if args.holdout >= train.len() {
        return Err(Failure::usage(format!(
            "holdout {} leaves no training data out of {}",
            args.holdout,
            train.len()
        )));
    }
    let (train, test) = split(&train, args.holdout, args.split_seed)?;
    Ok((train, test, dir))
}

fn data_config(args: &DataArgs, dir: &Path) -> serde_json::Value {
    serde_json::json!({
        "dataset": format!("{:?}", args.dataset).to_lowercase(),
        "data_dir": dir.display().to_string(),
        "holdout": args.holdout,
        "split_seed": args.split_seed,
    })
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let hyper =
        BayesHyper::new(a.lambda, a.theta, a.nu).map_err(|e| Failure::usage(e.to_string()))?;
    let schedule = match a.schedule {
        ScheduleKind::Resnet => Schedule::resnet(a.epochs),
        ScheduleKind::Wrn => Schedule::wrn(a.epochs),
        ScheduleKind::Constant => Schedule::constant(),
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        hyper,
        lr: LearningRates {
            main: a.lr,
            modulation: a.lr_modulation,
            mu: a.lr_mu,
        },
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        schedule,
        phase: match a.phase {
            PhaseArg::Main => Phase::Main,
            PhaseArg::Finetune => Phase::Finetune,
        },
        kernel_loss_in_finetune: !a.no_kernel_loss_in_finetune,
        augment: if a.augment {
            Augment::Cifar
        } else {
            Augment::None
        },
        deterministic: a.deterministic,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

/// Rows of an existing metrics file up to and including `epoch`.
fn earlier_rows(path: &Path, epoch: u64) -> CliResult<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|e| e.parse::<u64>().ok())
                .is_some_and(|e| e <= epoch)
        })
        .map(str::to_owned)
        .collect())
}

fn write_metrics(path: &Path, rows: &[String]) -> CliResult<()> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn load_ckpt(path: &Path) -> CliResult<bonn::model::Checkpoint> {
    load_checkpoint(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = train_config(&a)?;
    let (mut train, test, dir) = load_data(&a.data)?;
    if let Some(n) = a.subset {
        if n == 0 || n > train.len() {
            return Err(Failure::usage(format!(
                "--subset {n} outside 1..={}",
                train.len()
            )));
        }
        train = subset(&train, n, a.data.split_seed)?;
    }
    let arch = Architecture::build(&a.arch, train.sample_shape(), train.classes)
        .map_err(|e| Failure::usage(e.to_string()))?;

    fs::create_dir_all(&a.out)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let metrics_path = a.out.join(METRICS_FILE);
    let (start, mut rows) = match (&a.resume, &a.init) {
        (Some(p), _) => {
            let ck = load_ckpt(p)?;
            let rows = earlier_rows(&metrics_path, ck.meta.epoch)?;
            (Start::Resume(ck), rows)
        }
        (None, Some(p)) => (Start::Warm(load_ckpt(p)?), Vec::new()),
        (None, None) => (Start::Fresh, Vec::new()),
    };
    if let Start::Resume(ck) | Start::Warm(ck) = &start {
        if ck.arch != arch {
            return Err(Failure::usage(
                "checkpoint architecture does not match --arch and dataset",
            ));
        }
    }

    let outcome = fit(&arch, &train, &test, &cfg, start, |row, ck| {
        println!("{}", row.csv_line());
        rows.push(row.csv_line());
        save_checkpoint(&ckpt_path, ck)?;
        write_metrics(&metrics_path, &rows)
            .map_err(|f| bonn::Error::Io(std::io::Error::other(f.msg)))
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ bonn::Error::Training { .. }) => {
            write_metrics(&metrics_path, &rows)?;
            return Err(Failure::from(e));
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&ckpt_path, &outcome.last)?;
    write_metrics(&metrics_path, &rows)?;

    let mut m = RunManifest::new("train");
    m.seed = Some(cfg.seed);
    m.config = serde_json::json!({
        "arch": arch.name,
        "data": data_config(&a.data, &dir),
        "subset": a.subset,
        "train_samples": train.len(),
        "test_samples": test.len(),
        "resume": a.resume.as_ref().map(|p| p.display().to_string()),
        "init": a.init.as_ref().map(|p| p.display().to_string()),
        "train": cfg,
    });
    m.inputs = hash_dir(&dir)?;
    m.artifact("checkpoint", &ckpt_path);
    m.artifact("metrics", &metrics_path);
    if !test.is_empty() && cfg.epochs > 0 {
        let best = a.out.join(BEST_FILE);
        save_checkpoint(&best, &outcome.best)?;
        m.artifact("best_checkpoint", &best);
    }
    m.write(&a.out, started)?;
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let started = Instant::now();
    let ck = load_ckpt(&a.ckpt)?;
    let (_, test, dir) = load_data(&a.data)?;
    if test.is_empty() {
        return Err(Failure::usage(
            "no test data (holdout is 0 and no test files)",
        ));
    }
    if test.sample_shape() != ck.arch.input || test.classes != ck.arch.classes {
        return Err(Failure::usage(format!(
            "checkpoint expects {:?} inputs with {} classes, data has {:?} with {}",
            ck.arch.input,
            ck.arch.classes,
            test.sample_shape(),
            test.classes
        )));
    }
    let mode = if a.packed {
        EvalMode::Packed
    } else {
        EvalMode::Binary
    };
    let acc = evaluate(&ck.arch, &ck.params, &test, mode, a.batch)?;
    println!(
        "accuracy {acc:.6} ({} samples, {})",
        test.len(),
        if a.packed { "packed" } else { "binary" }
    );
    if let Some(out) = &a.out {
        let mut m = RunManifest::new("eval");
        m.seed = Some(ck.meta.seed);
        m.config = serde_json::json!({
            "data": data_config(&a.data, &dir),
            "packed": a.packed,
            "batch": a.batch,
            "accuracy": acc,
        });
        m.inputs = hash_dir(&dir)?;
        m.inputs.push(hash_file(&a.ckpt)?);
        m.write(out, started)?;
    }
    Ok(())
}

pub fn export_hist(a: HistArgs) -> CliResult<()> {
    let started = Instant::now();
    let ck = load_ckpt(&a.ckpt)?;
    let summaries = layer_summaries(&ck.params)?;
    let Some(s) = summaries.get(a.layer) else {
        return Err(Failure::usage(format!(
            "--layer {} out of range: network has {} binary layers",
            a.layer,
            summaries.len()
        )));
    };
    let kernels = ck.params.convs[s.conv].kernels.data();
    let bins = histogram(kernels, a.bins).map_err(|e| Failure::usage(e.to_string()))?;
    fs::create_dir_all(&a.out)?;
    let csv_path = a.out.join(format!("hist_layer{}.csv", a.layer));
    let json_path = a.out.join(format!("summary_layer{}.json", a.layer));
    fs::write(&csv_path, histogram_csv(&bins))?;
    fs::write(&json_path, serde_json::to_string_pretty(s)? + "\n")?;
    println!(
        "layer {} (conv {}): {} weights, alpha {}, quant_error {}, bimodality {:.4}",
        a.layer, s.conv, s.params, s.alpha, s.quant_error, s.bimodality
    );
    let mut m = RunManifest::new("export-hist");
    m.seed = Some(ck.meta.seed);
    m.config = serde_json::json!({ "layer": a.layer, "bins": a.bins });
    m.inputs.push(hash_file(&a.ckpt)?);
    m.artifact("histogram", &csv_path);
    m.artifact("summary", &json_path);
    m.write(&a.out, started)?;
    Ok(())
}

pub fn pack(a: PackArgs) -> CliResult<()> {
    let started = Instant::now();
    let ck = load_ckpt(&a.ckpt)?;
    let bytes = export_packed(&ck)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("model.bonp");
    fs::write(&path, &bytes)?;
    println!("wrote {} ({} bytes)", path.display(), bytes.len());
    let mut m = RunManifest::new("pack");
    m.seed = Some(ck.meta.seed);
    m.inputs.push(hash_file(&a.ckpt)?);
    m.artifact("packed_model", &path);
    m.write(&a.out, started)?;
    Ok(())
}

fn report_table(name: &str, r: &CompressionReport) -> String {
    let mut s = format!("architecture {name}\n");
    s.push_str("convention        full_precision   binarized       total     ratio\n");
    for (label, c) in [
        ("weights_only", r.weights_only),
        ("with_bias_and_bn", r.with_bias_and_bn),
    ] {
        s.push_str(&format!(
            "{label:<16} {:>15} {:>11} {:>11} {:>9.4}\n",
            c.full_precision,
            c.binarized,
            c.total(),
            c.ratio()
        ));
    }
    s.push_str(&format!("ratio {:.4}\n", r.ratio()));
    s
}

pub fn compress_ratio(a: RatioArgs) -> CliResult<()> {
    let started = Instant::now();
    let arch = match (&a.source.arch, &a.source.ckpt) {
        (Some(name), _) => {
            Architecture::build_default(name).map_err(|e| Failure::usage(e.to_string()))?
        }
        (None, Some(p)) => load_ckpt(p)?.arch,
        (None, None) => return Err(Failure::usage("one of --arch or --ckpt is required")),
    };
    let report = compression_report(&arch)?;
    print!("{}", report_table(&arch.name, &report));
    if let Some(out) = &a.out {
        let mut m = RunManifest::new("compress-ratio");
        m.config = serde_json::to_value(report)?;
        if let Some(p) = &a.source.ckpt {
            m.inputs.push(hash_file(p)?);
        }
        m.write(out, started)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchRow {
    channels: usize,
    height: usize,
    width: usize,
    float_ms: f64,
    packed_ms: f64,
    speedup: f64,
}

fn parse_sizes(s: &str) -> CliResult<Vec<[usize; 3]>> {
    s.split(',')
        .map(|t| {
            let d: Vec<usize> = t
                .trim()
                .split('x')
                .map(|v| v.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| Failure::usage(format!("bad size {t:?}, expected CxHxW")))?;
            match d.as_slice() {
                &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
                _ => Err(Failure::usage(format!("bad size {t:?}, expected CxHxW"))),
            }
        })
        .collect()
}

fn best_ms(repeats: usize, mut f: impl FnMut() -> bonn::Result<Tensor<f32>>) -> CliResult<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        std::hint::black_box(f()?);
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}

pub fn bench(a: BenchArgs) -> CliResult<()> {
    let started = Instant::now();
    let sizes = parse_sizes(&a.sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut normal =
        |n: usize| -> Vec<f32> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let geom = ConvGeometry::new(3, 1, 1);
    let mut rows = Vec::new();
    println!("shape            float_ms   packed_ms   speedup");
    for [c, h, w] in sizes {
        let x = Tensor::new(vec![a.batch, c, h, w], normal(a.batch * c * h * w))?;
        let k = Tensor::new(vec![c, c, 3, 3], normal(c * c * 9))?;
        let (xs, ks) = (sign_binarize(&x), sign_binarize(&k));
        let alphas = vec![1.0f32; c];
        let rows_k = pack_kernel_rows(&k)?;
        let float_path = || conv2d(&pad2d(&xs, 1, 1.0)?, &ks, ConvGeometry::new(3, 1, 0));
        let packed_path = || binary_conv2d(&pack_input(&x, geom)?, &rows_k, &alphas);
        if float_path()? != packed_path()? {
            return Err(Failure {
                code: crate::fail::EXIT_NUMERIC,
                msg: format!("packed and float outputs differ for {c}x{h}x{w}"),
            });
        }
        let float_ms = best_ms(a.repeats, float_path)?;
        let packed_ms = best_ms(a.repeats, packed_path)?;
        let row = BenchRow {
            channels: c,
            height: h,
            width: w,
            float_ms,
            packed_ms,
            speedup: float_ms / packed_ms,
        };
        println!(
            "{:<16} {:>9.3} {:>11.3} {:>9.2}",
            format!("{c}x{h}x{w}"),
            row.float_ms,
            row.packed_ms,
            row.speedup
        );
        rows.push(row);
    }
    if let Some(out) = &a.out {
        let mut m = RunManifest::new("bench");
        m.seed = Some(a.seed);
        m.config = serde_json::json!({ "batch": a.batch, "repeats": a.repeats, "rows": rows });
        m.write(out, started)?;
    }
    Ok(())
}
