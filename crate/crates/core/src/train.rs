//! Momentum SGD, the epoch loop and multi-seed aggregation.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::fpenv::FlushToZero;
use crate::metrics::{MetricValue, MetricsReport};
use crate::model::Network;
use crate::rng::{SeededRng, STREAM_SHUFFLE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mini_batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub validation_frequency_iters: usize,
    pub shuffle_each_epoch: bool,
    pub momentum: f64,
    pub seed: u64,
    pub num_runs: usize,
    /// Layers up to and including this one are not updated.
    pub freeze_up_to: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mini_batch_size: 10,
            epochs: 20,
            learning_rate: 3e-4,
            validation_frequency_iters: 3,
            shuffle_each_epoch: true,
            momentum: 0.9,
            seed: 0,
            num_runs: 10,
            freeze_up_to: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mini_batch_size", self.mini_batch_size),
            ("epochs", self.epochs),
            (
                "validation_frequency_iters",
                self.validation_frequency_iters,
            ),
            ("num_runs", self.num_runs),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{field} must be positive")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.mini_batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub records: Vec<CurveRecord>,
}

impl TrainingCurve {
    pub fn final_val_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_accuracy)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "iteration,train_loss,val_accuracy")?;
        for r in &self.records {
            match r.val_accuracy {
                Some(a) => writeln!(out, "{},{},{}", r.iteration, r.train_loss, a)?,
                None => writeln!(out, "{},{},", r.iteration, r.train_loss)?,
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }
}

/// `v <- momentum * v - lr * g; p <- p + v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::invalid(format!(
            "sgd shapes disagree: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    let (lr, m) = (lr as f32, momentum as f32);
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = m * *v - lr * g;
        *p += *v;
    }
    Ok(())
}

/// Predicted class per image; ties go to the higher class index.
pub fn predict_classes(net: &Network, images: &[Tensor], batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let logits = net.infer(&Tensor::stack(&refs)?)?;
        let k = logits.shape()[1];
        for row in logits.data().chunks_exact(k) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v >= row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

pub fn accuracy(net: &Network, samples: &Samples, batch: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("accuracy on an empty set".into()));
    }
    let pred = predict_classes(net, &samples.images, batch)?;
    let hits = pred
        .iter()
        .zip(&samples.labels)
        .filter(|(p, l)| **p == l.index())
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

fn check_set(net: &Network, set: &Samples, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Data(format!("{what} set is empty")));
    }
    let expected = net.spec().input_shape;
    if let Some(t) = set.images.iter().find(|t| t.shape() != expected) {
        return Err(Error::invalid(format!(
            "{what} image of shape {:?} does not match model input {expected:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Trains `net` in place and returns the curve.
pub fn train(
    net: &mut Network,
    train_set: &Samples,
    val_set: &Samples,
    cfg: &TrainConfig,
) -> Result<TrainingCurve> {
    train_with(net, train_set, val_set, cfg, |_| {})
}

/// As [`train`], calling `on_record` after every iteration.
pub fn train_with(
    net: &mut Network,
    train_set: &Samples,
    val_set: &Samples,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&CurveRecord),
) -> Result<TrainingCurve> {
    cfg.validate()?;
    let _ftz = FlushToZero::new();
    check_set(net, train_set, "training")?;
    check_set(net, val_set, "validation")?;
    if let Some(name) = &cfg.freeze_up_to {
        net.freeze_up_to(name)?;
    }
    let mut velocity: Vec<Vec<Tensor>> = net
        .layers()
        .iter()
        .map(|l| {
            l.params()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect()
        })
        .collect();
    let mut rng = SeededRng::with_stream(cfg.seed, STREAM_SHUFFLE);
    let n = train_set.len();
    let mut curve = TrainingCurve::default();
    let mut iteration = 0;
    for _ in 0..cfg.epochs {
        let order = if cfg.shuffle_each_epoch {
            rng.permutation(n)
        } else {
            (0..n).collect()
        };
        for idx in order.chunks(cfg.mini_batch_size) {
            let refs: Vec<&Tensor> = idx.iter().map(|&i| &train_set.images[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i].index()).collect();
            let batch = Tensor::stack(&refs)?;
            iteration += 1;
            let loss = net.train_batch(&batch, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { iteration, loss });
            }
            for (layer, vel) in net.layers_mut().iter_mut().zip(&mut velocity) {
                if !layer.is_trainable() {
                    continue;
                }
                for ((p, g), v) in layer.params_and_grads().into_iter().zip(vel.iter_mut()) {
                    sgd_step(p, g, v, cfg.learning_rate, cfg.momentum)?;
                }
            }
            let val_accuracy = if iteration % cfg.validation_frequency_iters == 0 {
                Some(accuracy(net, val_set, cfg.mini_batch_size)?)
            } else {
                None
            };
            let record = CurveRecord {
                iteration,
                train_loss: loss,
                val_accuracy,
            };
            on_record(&record);
            curve.records.push(record);
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: MetricValue,
    pub std: MetricValue,
    /// Runs for which the metric was defined.
    pub defined_runs: usize,
}

impl Stat {
    /// Mean and population standard deviation over the defined values.
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let vals: Vec<f64> = values.into_iter().flatten().collect();
        if vals.is_empty() {
            return Self {
                mean: None.into(),
                std: None.into(),
                defined_runs: 0,
            };
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean: Some(mean).into(),
            std: Some(var.sqrt()).into(),
            defined_runs: vals.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub accuracy: Stat,
    pub sensitivity: Stat,
    pub specificity: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultirunReport {
    pub runs: Vec<RunResult>,
    pub aggregate: Aggregate,
}

impl MultirunReport {
    pub fn from_runs(runs: Vec<RunResult>) -> Self {
        let stat = |f: fn(&MetricsReport) -> MetricValue| {
            Stat::of(runs.iter().map(|r| f(&r.report).value()))
        };
        let aggregate = Aggregate {
            runs: runs.len(),
            accuracy: stat(|r| r.accuracy),
            sensitivity: stat(|r| r.sensitivity),
            specificity: stat(|r| r.specificity),
        };
        Self { runs, aggregate }
    }
}

pub fn run_seeds(cfg: &TrainConfig) -> Vec<u64> {
    (0..cfg.num_runs as u64)
        .map(|i| cfg.seed.wrapping_add(i))
        .collect()
}

/// Calls `run` once per seed (`seed`, `seed + 1`, ...) on up to `threads`
/// workers. Results are ordered by seed whatever the schedule; the first
/// error in seed order is returned.
pub fn multirun<F>(cfg: &TrainConfig, threads: usize, run: F) -> Result<MultirunReport>
where
    F: Fn(u64) -> Result<MetricsReport> + Sync,
{
    cfg.validate()?;
    let seeds = run_seeds(cfg);
    let slots: Vec<Mutex<Option<Result<MetricsReport>>>> =
        seeds.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, seeds.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let r = run(seeds[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    let mut runs = Vec::with_capacity(seeds.len());
    for (seed, slot) in seeds.into_iter().zip(slots) {
        let report = slot.into_inner().unwrap().expect("every seed ran")?;
        runs.push(RunResult { seed, report });
    }
    Ok(MultirunReport::from_runs(runs))
}
