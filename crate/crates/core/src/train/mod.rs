//! Training, evaluation and ablation sweeps for the toy classifier.

mod optim;
mod sweep;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled, Dataset};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, MergeSchedule, Model, ModelParams};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use sweep::{sweep, SweepAxis, SweepOptions, SweepReport, SweepRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// SGD only.
    pub momentum: f64,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 3e-3,
            weight_decay: 0.01,
            warmup_epochs: 1,
            batch_size: 16,
            seed: 0,
            optimizer: OptimizerKind::Adamw,
            momentum: 0.9,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl TrainConfig {
    /// A zero rate is accepted and leaves the parameters untouched.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// The extra merged-training run: 20% of `epochs`, at least one.
    pub fn finetune(&self) -> Self {
        Self {
            epochs: self.epochs.div_ceil(5),
            warmup_epochs: 0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,acc\n");
        for m in &self.metrics {
            let _ = writeln!(s, "{},{},{:.6},{:.6}", m.epoch, m.split.tag(), m.loss, m.acc);
        }
        s
    }

    pub fn last(&self, split: Split) -> Option<&EpochMetrics> {
        self.metrics.iter().rev().find(|m| m.split == split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub loss: f64,
    pub n: usize,
}

/// Samples per unit of parallel work. Fixed so that the summation order, and
/// therefore every bit of the result, is independent of the thread count.
const CHUNK: usize = 4;

/// Seed for the random-score baseline of one sample.
fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

fn check_compatible<S: Scalar>(model: &Model<S>, data: &Dataset) -> Result<()> {
    let c = &model.config;
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    if data.grid_side != c.grid_side || data.raw_dim != c.raw_dim || data.n_classes != c.n_classes {
        return Err(Error::Config(format!(
            "dataset is {}² × {} with {} classes, model expects {}² × {} with {}",
            data.grid_side, data.raw_dim, data.n_classes, c.grid_side, c.raw_dim, c.n_classes
        )));
    }
    Ok(())
}

struct BatchGrad<S> {
    grads: ModelParams<Tensor<S>>,
    loss: f64,
    correct: usize,
}

fn batch_grad<S: Scalar>(
    model: &Model<S>,
    data: &Dataset,
    batch: &[usize],
    schedule: &MergeSchedule,
    seed: u64,
    epoch: usize,
) -> Result<BatchGrad<S>> {
    let parts: Vec<Result<BatchGrad<S>>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = BatchGrad {
                grads: model.params.zeros_like(),
                loss: 0.0,
                correct: 0,
            };
            for &i in chunk {
                let label = data.label(i);
                let g = model.loss_and_grad(&data.grid(i), label, schedule, sample_seed(seed, epoch, i))?;
                acc.grads.add_assign(&g.grads);
                acc.loss += g.loss.to_f64_lossy();
                acc.correct += usize::from(g.predicted == label);
            }
            Ok(acc)
        })
        .collect();
    let mut total: Option<BatchGrad<S>> = None;
    for p in parts {
        let p = p?;
        match total.as_mut() {
            None => total = Some(p),
            Some(t) => {
                t.grads.add_assign(&p.grads);
                t.loss += p.loss;
                t.correct += p.correct;
            }
        }
    }
    let mut total = total.expect("nonempty batch");
    total.grads.scale_assign(S::of(1.0 / batch.len() as f64));
    Ok(total)
}

/// Trains `model` in place with merging per `schedule` active in every
/// forward pass. Validation metrics are logged after each epoch when `val`
/// is given.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    schedule: &MergeSchedule,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(model, data)?;
    if let Some(v) = val {
        check_compatible(model, v)?;
    }
    schedule.validate(model.config.depth, model.config.n_tokens())?;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let mut opt = Optimizer::new(cfg.optimizer, &model.params, cfg.momentum, cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let order = shuffled(data.len(), &mut rng);
        let (mut loss, mut correct) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let g = batch_grad(model, data, batch, schedule, cfg.seed, epoch)?;
            if !g.loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let lr = cfg.schedule.at(cfg.lr, step, total, warmup);
            opt.step(&mut model.params, &g.grads, lr);
            loss += g.loss;
            correct += g.correct;
            step += 1;
        }
        let train_m = EpochMetrics {
            epoch,
            split: Split::Train,
            loss: loss / data.len() as f64,
            acc: correct as f64 / data.len() as f64,
        };
        log::info!("epoch {epoch}: train loss {:.4} acc {:.4}", train_m.loss, train_m.acc);
        report.metrics.push(train_m);
        if let Some(v) = val {
            let e = evaluate(model, v, schedule, cfg.seed)?;
            log::info!("epoch {epoch}: val loss {:.4} acc {:.4}", e.loss, e.accuracy);
            report.metrics.push(EpochMetrics {
                epoch,
                split: Split::Val,
                loss: e.loss,
                acc: e.accuracy,
            });
        }
    }
    Ok(report)
}

/// Continues training with `schedule` active for 20% of `cfg.epochs`.
pub fn finetune<S: Scalar>(
    model: &mut Model<S>,
    data: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    schedule: &MergeSchedule,
) -> Result<TrainReport> {
    train(model, data, val, &cfg.finetune(), schedule)
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Top-1 accuracy and mean loss of `model` on `data` with `schedule`.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    data: &Dataset,
    schedule: &MergeSchedule,
    seed: u64,
) -> Result<EvalResult> {
    check_compatible(model, data)?;
    let per: Vec<Result<(f64, bool)>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let opts = ForwardOptions {
                collect_trace: false,
                seed: sample_seed(seed, usize::MAX, i),
            };
            let out = model.forward(&data.grid(i), schedule, opts)?;
            let logits: Vec<f64> = out.logits.data().iter().map(|v| v.to_f64_lossy()).collect();
            let label = data.label(i);
            Ok((cross_entropy(&logits, label), crate::model::argmax(&logits) == label))
        })
        .collect();
    let (mut loss, mut correct) = (0.0, 0);
    for p in per {
        let (l, c) = p?;
        loss += l;
        correct += usize::from(c);
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        loss: loss / data.len() as f64,
        n: data.len(),
    })
}
