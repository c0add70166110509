//! Optimizer, learning-rate schedule, training loop and dataset evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{undersample_majority, Dataset, Label, SignalRecord};
use crate::error::{config_err, contract_err, Error, Result};
use crate::gsl::DynamicGraphSet;
use crate::metrics::{argmax, evaluate, select_thresholds, MetricsReport};
use crate::model::{GraphS4mer, Task};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is on.
/// Output order always follows the index.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub undersample: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 5,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            patience: 20,
            undersample: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "desk" => Self { epochs: 30, warmup_epochs: 2, lr: 1e-2, batch_size: 8, ..base },
            "tusz-like" => Self { lr: 8e-4, undersample: true, ..base },
            "dodh-like" => Self { undersample: true, ..base },
            "icbeb-like" => Self { batch_size: 8, ..base },
            other => return Err(config_err!("unknown preset {other:?}")),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be positive"));
        }
        if self.warmup_epochs >= self.epochs && self.warmup_epochs > 0 {
            return Err(config_err!("warmup_epochs must be below epochs"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!("lr and weight_decay must be finite and >= 0"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(config_err!("betas must be in [0, 1) and adam_eps positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule { base: self.lr, warmup: self.warmup_epochs, total: self.epochs }
    }
}

/// Linear warmup then cosine decay to 0, indexed by 1-based epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch < self.warmup {
            return self.base * epoch as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup) as f64;
        let progress = if span == 0.0 { 1.0 } else { ((epoch - self.warmup) as f64 / span).min(1.0) };
        self.base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { beta1, beta2, eps, weight_decay, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update at learning rate `lr`. Non-finite gradients abort the step
    /// with parameters and moments untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.iter().zip(&self.m).any(|(g, m)| g.len() != m.len()) {
            return Err(contract_err!("gradient layout does not match the parameters"));
        }
        for ((name, _), g) in store.iter().zip(grads) {
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {name}[{bad}], step aborted")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in store.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p = *p * decay - lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss,val_metric\n");
    for r in history {
        let _ = writeln!(out, "{},{:e},{:.9},{:.9},{:.9}", r.epoch, r.lr, r.train_loss, r.val_loss, r.val_metric);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
    /// Decision thresholds picked on the validation set with the best parameters.
    pub thresholds: Vec<f64>,
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mini-batch AdamW training with per-epoch shuffling, optional majority
/// undersampling, early stopping on validation loss and best-model
/// selection by the task metric. On return `model` holds the best parameters.
pub fn train_loop(
    model: &mut GraphS4mer,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(contract_err!("training and validation sets must be non-empty"));
    }
    let schedule = cfg.schedule();
    let mut opt = AdamW::new(&model.store, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut best_val_loss = f64::INFINITY;
    let mut stale = 0usize;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut order = if cfg.undersample {
            undersample_majority(&train.records, &mut rng)
        } else {
            (0..train.len()).collect()
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let m: &GraphS4mer = model;
            let results = map_indexed(batch.len(), |k| {
                let rec = &train.records[batch[k]];
                m.loss_and_grads(rec, true, mix_seed(cfg.seed, epoch as u64, (b * cfg.batch_size + k) as u64))
            });
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for r in results {
                let (loss, grads) = r.map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("training diverged at epoch {epoch}: {msg}")),
                    other => other,
                })?;
                loss_sum += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.iter_mut().zip(g).for_each(|(a, g)| *a += g)),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            opt.update(&mut model.store, &grads, lr)?;
        }
        let eval = evaluate_dataset(model, val, &[])?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / order.len().max(1) as f64,
            val_loss: eval.mean_loss,
            val_metric: eval.report.primary,
        };
        on_epoch(&rec);
        if best.as_ref().map_or(true, |(m, _, _)| rec.val_metric > *m) {
            best = Some((rec.val_metric, epoch, model.store.clone()));
        }
        if rec.val_loss < best_val_loss {
            best_val_loss = rec.val_loss;
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(rec);
        if stale >= cfg.patience {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    let (best_metric, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    let eval = evaluate_dataset(model, val, &[])?;
    let thresholds = select_thresholds(model.cfg.task, &eval.scores, &eval.labels)?;
    Ok(TrainOutcome { history, best_epoch, best_metric, stopped_early, thresholds })
}

/// Per-record predictions with the learned graphs.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub mean_loss: f64,
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub predictions: Vec<Label>,
    pub correct: Vec<bool>,
    pub graphs: Vec<DynamicGraphSet>,
}

struct RecordEval {
    loss: f64,
    logits: Tensor,
    graphs: DynamicGraphSet,
}

fn eval_record(model: &GraphS4mer, rec: &SignalRecord) -> Result<RecordEval> {
    let mut ctx = Ctx::new(&model.store, false, false, 0);
    let fwd = model.forward(&mut ctx, rec)?;
    let loss = model.total_loss(&mut ctx.tape, &fwd, &rec.label)?;
    let loss = ctx.tape.value(loss).data()[0];
    let logits = ctx.tape.value(fwd.logits).clone();
    if !loss.is_finite() || !logits.is_finite() {
        return Err(Error::Numeric(format!("non-finite output for record {}", rec.id)));
    }
    let adjacency = fwd.graphs.iter().map(|&w| ctx.tape.value(w).clone()).collect();
    Ok(RecordEval { loss, logits, graphs: DynamicGraphSet { adjacency } })
}

pub fn predict_label(task: Task, scores: &[f64], thresholds: &[f64]) -> Label {
    let cut = |k: usize| thresholds.get(k).copied().unwrap_or(0.5);
    match task {
        Task::Binary => Label::Class(usize::from(scores[0] >= cut(0))),
        Task::Multiclass => Label::Class(argmax(scores)),
        Task::Multilabel => Label::Multi(scores.iter().enumerate().map(|(k, &s)| s >= cut(k)).collect()),
    }
}

/// Evaluation-mode pass over `ds`; decisions use `thresholds` (0.5 when empty).
pub fn evaluate_dataset(model: &GraphS4mer, ds: &Dataset, thresholds: &[f64]) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(contract_err!("cannot evaluate an empty dataset"));
    }
    let per = map_indexed(ds.len(), |i| eval_record(model, &ds.records[i]));
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let scores: Vec<Vec<f64>> = per.iter().map(|r| model.scores(&r.logits)).collect();
    let labels: Vec<Label> = ds.records.iter().map(|r| r.label.clone()).collect();
    let predictions: Vec<Label> = scores.iter().map(|s| predict_label(model.cfg.task, s, thresholds)).collect();
    let correct = predictions.iter().zip(&labels).map(|(p, l)| p == l).collect();
    let report = evaluate(model.cfg.task, &scores, &labels, thresholds)?;
    let mean_loss = per.iter().map(|r| r.loss).sum::<f64>() / per.len() as f64;
    let graphs = per.into_iter().map(|r| r.graphs).collect();
    Ok(Evaluation { report, mean_loss, scores, labels, predictions, correct, graphs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GraphS4merConfig;
    use crate::params::init;

    #[test]
    fn decay_only_step() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.01);
        opt.update(&mut store, &[vec![0.0; 3]], 0.1).unwrap();
        let expect = [0.999, -1.998, 0.4995];
        for (a, b) in store.get(store.find("p").unwrap()).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::vector(vec![1.0]));
        let before = store.clone();
        let mut opt = AdamW::new(&store, 0.9, 0.999, 1e-8, 0.01);
        assert!(matches!(opt.update(&mut store, &[vec![f64::NAN]], 0.1), Err(Error::Numeric(_))));
        assert_eq!(store, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule { base: 0.1, warmup: 5, total: 100 };
        assert_eq!(s.lr(5), 0.1);
        assert_eq!(s.lr(100), 0.0);
        assert!((s.lr(1) - 0.02).abs() < 1e-15);
        assert!((s.lr(0)).abs() < 1e-15);
        for e in 5..100 {
            assert!(s.lr(e + 1) <= s.lr(e));
        }
        let no_warm = CosineSchedule { base: 1.0, warmup: 0, total: 4 };
        assert_eq!(no_warm.lr(0), 1.0);
        assert_eq!(no_warm.lr(4), 0.0);
    }

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|i| {
                let y = i % 2;
                let mut x = init::normal(&mut rng, 0.3, &[3, 16, 1]);
                x.data_mut().iter_mut().for_each(|v| *v += if y == 1 { 1.0 } else { -1.0 });
                SignalRecord::new(format!("t{i}"), x, Label::Class(y), 16).unwrap()
            })
            .collect();
        Dataset { records }
    }

    fn desk_model(seed: u64) -> GraphS4mer {
        GraphS4mer::new(GraphS4merConfig::preset("desk").unwrap(), seed).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut model = desk_model(0);
        let before = model.store.clone();
        let cfg = TrainConfig { epochs: 3, warmup_epochs: 0, lr: 0.0, ..TrainConfig::preset("desk").unwrap() };
        train_loop(&mut model, &toy(8, 1), &toy(4, 2), &cfg, |_| {}).unwrap();
        assert_eq!(model.store, before);
    }

    #[test]
    fn separable_loss_decreases() {
        let mut model = desk_model(1);
        let cfg = TrainConfig { epochs: 6, warmup_epochs: 0, lr: 5e-3, batch_size: 4, ..TrainConfig::default() };
        let out = train_loop(&mut model, &toy(16, 3), &toy(8, 4), &cfg, |_| {}).unwrap();
        for w in out.history[..5].windows(2) {
            assert!(w[1].train_loss < w[0].train_loss, "{:?}", out.history);
        }
    }

    #[test]
    fn patience_and_best_selection() {
        let mut model = desk_model(2);
        let cfg = TrainConfig { epochs: 40, warmup_epochs: 0, lr: 0.0, patience: 3, ..TrainConfig::default() };
        let out = train_loop(&mut model, &toy(4, 5), &toy(4, 6), &cfg, |_| {}).unwrap();
        // Constant parameters: epoch 1 sets the best loss, then 3 stale epochs.
        assert_eq!(out.history.len(), 4);
        assert!(out.stopped_early);
        assert_eq!(out.best_epoch, 1);
        for r in &out.history[..out.best_epoch] {
            assert!(out.best_metric >= r.val_metric);
        }
        let csv = history_csv(&out.history);
        assert!(csv.starts_with("epoch,lr,train_loss,val_loss,val_metric\n1,0e0,"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut model = desk_model(3);
            let cfg = TrainConfig { epochs: 2, warmup_epochs: 0, lr: 1e-2, ..TrainConfig::default() };
            let cfg = TrainConfig { undersample: true, ..cfg };
            let out = train_loop(&mut model, &toy(10, 7), &toy(6, 8), &cfg, |_| {}).unwrap();
            (model.store, out.history)
        };
        assert_eq!(run(), run());
    }
}
