use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{lr_at, TrainConfig};
use super::step::{init_params, predictions, train_step, OptimizerState};
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::model::{forward, Architecture, Checkpoint, Mode, PackedModel, Params, TrainMeta};

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub lr: f64,
    /// Batch means over the epoch.
    pub l_s: f64,
    pub l_b_kernel: f64,
    pub l_b_feature: f64,
    pub total: f64,
    /// `Σ‖X̂ − w∘X‖²` after the epoch.
    pub quant_error: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub alphas: Vec<f64>,
}

pub const METRICS_HEADER: &str =
    "epoch,lr,l_s,l_b_kernel,l_b_feature,total,quant_error,train_acc,test_acc,alphas";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let alphas: Vec<String> = self.alphas.iter().map(|a| a.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.l_s,
            self.l_b_kernel,
            self.l_b_feature,
            self.total,
            self.quant_error,
            self.train_acc,
            self.test_acc.map(|a| a.to_string()).unwrap_or_default(),
            alphas.join(";")
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Float simulation of the binary network.
    Binary,
    /// Bit-packed XNOR/popcount network.
    Packed,
    /// Full-precision network, no binarization.
    Float,
}

/// Classification accuracy in `[0, 1]`.
pub fn evaluate(
    arch: &Architecture,
    params: &Params<f32>,
    data: &Dataset,
    mode: EvalMode,
    batch: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let packed = match mode {
        EvalMode::Packed => Some(PackedModel::from_params(arch, params)?),
        _ => None,
    };
    let mut scratch = params.clone();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let logits = match (&packed, mode) {
            (Some(p), _) => p.forward(&x)?,
            (None, EvalMode::Float) => forward(arch, &mut scratch, &x, Mode::FloatEval)?.logits,
            (None, _) => forward(arch, &mut scratch, &x, Mode::BinaryEval)?.logits,
        };
        correct += predictions(&logits)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// How [`fit`] obtains its starting point.
#[derive(Clone, Debug)]
pub enum Start {
    /// Seeded initialization.
    Fresh,
    /// Continue a run: parameters, optimizer state and epoch counter.
    Resume(Checkpoint),
    /// Parameters only; epochs and optimizer restart (e.g. fine-tuning).
    Warm(Checkpoint),
}

pub struct FitOutcome {
    pub last: Checkpoint,
    /// Highest test accuracy seen (the last checkpoint when there is no test set).
    pub best: Checkpoint,
    /// Rows for the epochs run by this call.
    pub metrics: Vec<MetricsRow>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Runs `cfg.epochs` epochs in total (counting those already in a resumed
/// checkpoint), evaluating on `test` after each one.
///
/// `on_epoch` sees each finished epoch's row and checkpoint.
pub fn fit(
    arch: &Architecture,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    start: Start,
    mut on_epoch: impl FnMut(&MetricsRow, &Checkpoint) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let config = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let (mut params, mut opt, mut meta) = match start {
        Start::Fresh => {
            let p = init_params(arch, cfg.seed)?;
            let o = OptimizerState::new(&p);
            (p, o, TrainMeta::fresh(cfg.seed, cfg.hyper))
        }
        Start::Resume(ck) => {
            if &ck.arch != arch {
                return Err(Error::Config(
                    "checkpoint architecture differs from the requested one".into(),
                ));
            }
            let o = OptimizerState::from_buffers(&ck.params, ck.optimizer)?;
            (ck.params, o, ck.meta)
        }
        Start::Warm(ck) => {
            if &ck.arch != arch {
                return Err(Error::Config(
                    "checkpoint architecture differs from the requested one".into(),
                ));
            }
            let o = OptimizerState::new(&ck.params);
            (ck.params, o, TrainMeta::fresh(cfg.seed, cfg.hyper))
        }
    };
    params.centers.center_lr = cfg.center_lr as f32;
    meta.seed = cfg.seed;
    meta.hyper = cfg.hyper;
    meta.phase = cfg.phase.as_str().into();
    meta.config = config;

    let snapshot = |params: &Params<f32>, opt: &OptimizerState, meta: &TrainMeta| Checkpoint {
        arch: arch.clone(),
        params: params.clone(),
        meta: meta.clone(),
        optimizer: opt.velocity.clone(),
    };
    let mut best: Option<Checkpoint> = None;
    let mut rows = Vec::new();
    for epoch in meta.epoch as usize..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut s, mut kb, mut fb) = (0.0f64, 0.0f64, 0.0f64);
        let (mut correct, mut seen, mut batches) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            let x = augment(&x, cfg.augment, &mut rng)?;
            let st = train_step(arch, &mut params, &mut opt, &x, &y, cfg, lr, meta.step)?;
            meta.step += 1;
            s += st.loss.cross_entropy;
            kb += st.loss.kernel;
            fb += st.loss.feature;
            correct += st.correct;
            seen += st.samples;
            batches += 1;
        }
        meta.epoch = epoch as u64 + 1;
        let nb = batches.max(1) as f64;
        let (l_s, l_b_kernel, l_b_feature) = (s / nb, kb / nb, fb / nb);
        let test_acc = if test.is_empty() {
            None
        } else {
            Some(evaluate(
                arch,
                &params,
                test,
                EvalMode::Binary,
                cfg.eval_batch,
            )?)
        };
        let row = MetricsRow {
            epoch: epoch + 1,
            lr: lr.main,
            l_s,
            l_b_kernel,
            l_b_feature,
            total: l_s + l_b_kernel + l_b_feature,
            quant_error: params.quantization_error() as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc,
            alphas: params.alphas().iter().map(|&a| a as f64).collect(),
        };
        let improved = match (test_acc, meta.best_test_acc) {
            (Some(a), Some(b)) => a > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            meta.best_test_acc = test_acc;
        }
        let ck = snapshot(&params, &opt, &meta);
        if improved {
            best = Some(ck.clone());
        }
        on_epoch(&row, &ck)?;
        rows.push(row);
    }
    let last = snapshot(&params, &opt, &meta);
    Ok(FitOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        metrics: rows,
    })
}
