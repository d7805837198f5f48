//! Multi-task training: proportional task sampling, one task per batch,
//! linear warmup/decay, Adam, per-epoch evaluation and best-checkpoint
//! selection.

use std::collections::HashMap;
use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Gradients, Graph, ParamId, ParamStore};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::metrics::compute_metric;
use crate::model::MtopModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 20,
            peak_lr: 1e-5,
            warmup_fraction: 0.1,
            seed: 0,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup fraction {} must lie strictly between 0 and 1",
                self.warmup_fraction
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!(
                "peak lr {} must be positive",
                self.peak_lr
            )));
        }
        Ok(())
    }
}

/// One task's training and evaluation examples.
#[derive(Clone, Debug, Default)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Draws a task index with probability proportional to its size.
pub fn sample_task<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(sizes).map_err(|e| {
        Error::InvalidArgument(format!("cannot sample from task sizes {sizes:?}: {e}"))
    })?;
    Ok(dist.sample(rng))
}

fn warmup_steps(total_steps: usize, fraction: f64) -> usize {
    // guard against 0.1 * 100 landing a hair above 10
    ((fraction * total_steps as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Linear rise from 0 to `peak` over `ceil(fraction * total)` steps, then a
/// linear fall back to 0 at `total`.
pub fn lr_at_step(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule of {total_steps} steps"
        )));
    }
    let warm = warmup_steps(total_steps, warmup_fraction);
    if step <= warm {
        if warm == 0 {
            return Ok(if total_steps == 0 { 0.0 } else { peak });
        }
        return Ok(peak * step as f64 / warm as f64);
    }
    Ok(peak * (total_steps - step) as f64 / (total_steps - warm) as f64)
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    steps: u64,
}

/// Adam without weight decay. State is created lazily for a parameter the
/// first time it receives a gradient, and a parameter absent from a step's
/// graph is neither moved nor has its moments decayed.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<ParamId, Moments>,
    steps: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: HashMap::new(),
            steps: 0,
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.state.contains_key(&id)
    }

    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let n = g.len();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
                steps: 0,
            });
            st.steps += 1;
            let t = st.steps as i32;
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            // lr * sqrt(c2) / c1 folds both bias corrections into the step size
            let step = (lr * c2.sqrt() / c1) as f32;
            let eps = (self.eps * c2.sqrt()) as f32;
            let w = store.tensor_mut(id).data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

fn check_batch(batch: &[Example], task: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if let Some(bad) = batch.iter().find(|e| e.task != task) {
        return Err(Error::InvalidArgument(format!(
            "mixed-task batch: example from task {} in a task {task} batch",
            bad.task
        )));
    }
    Ok(())
}

/// Loss and parameter gradients of one single-task batch.
pub fn compute_gradients(
    model: &MtopModel,
    batch: &[Example],
    task: usize,
    rng: Option<&mut dyn RngCore>,
) -> Result<(f64, Gradients)> {
    check_batch(batch, task)?;
    let tokens: Vec<Vec<usize>> = batch.iter().map(|e| e.tokens.clone()).collect();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let mut g = Graph::new(model.params());
    let loss = model.loss(&mut g, &tokens, &labels, task, rng)?;
    let value = f64::from(g.value(loss).item());
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

/// One optimizer update on a batch drawn entirely from `task`.
pub fn train_step(
    model: &mut MtopModel,
    batch: &[Example],
    task: usize,
    optimizer: &mut Adam,
    lr: f64,
    rng: Option<&mut dyn RngCore>,
) -> Result<f64> {
    let (loss, grads) = compute_gradients(model, batch, task, rng)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: optimizer.steps() as usize + 1,
        });
    }
    optimizer.apply(model.params_mut(), &grads, lr);
    Ok(loss)
}

/// Evaluation-set metric for every task, predicting each task from its own
/// examples.
pub fn evaluate_tasks(model: &MtopModel, data: &[TaskData], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for (task, d) in data.iter().enumerate() {
        if d.eval.is_empty() {
            return Err(Error::Data(format!(
                "task '{}' has no evaluation examples",
                model.tasks()[task].name
            )));
        }
        let mut preds = Vec::with_capacity(d.eval.len());
        for chunk in d.eval.chunks(batch_size) {
            let tokens: Vec<Vec<usize>> = chunk.iter().map(|e| e.tokens.clone()).collect();
            preds.extend(model.predict_task_batch(&tokens, task)?);
        }
        let labels: Vec<f64> = d.eval.iter().map(|e| e.label as f64).collect();
        let preds: Vec<f64> = preds.into_iter().map(|p| p as f64).collect();
        out.push(compute_metric(model.tasks()[task].metric, &preds, &labels)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub per_task: Vec<f64>,
    pub average: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch of the selected checkpoint.
    pub best_epoch: usize,
    pub best_params: ParamStore,
    pub total_steps: usize,
}

impl TrainOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

#[derive(Serialize)]
struct MetricRecord<'a> {
    epoch: usize,
    task: &'a str,
    metric: String,
    value: f64,
}

/// Index of the highest average; ties go to the earliest.
pub fn select_best(averages: &[f64]) -> Result<usize> {
    if averages.is_empty() {
        return Err(Error::InvalidArgument("no epochs to select from".into()));
    }
    let mut best = 0;
    for (i, &a) in averages.iter().enumerate() {
        if a > averages[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Round-robin supply of shuffled batches for one task.
struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
}

impl BatchCursor {
    fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos = (start + size).min(self.order.len());
        &self.order[start..self.pos]
    }
}

/// Steps in one epoch: `sum_i ceil(size_i / batch_size)`.
pub fn steps_per_epoch(sizes: &[usize], batch_size: usize) -> usize {
    sizes.iter().map(|&n| n.div_ceil(batch_size)).sum()
}

/// Trains every trainable parameter of `model` on `data` (indexed like the
/// model's tasks), evaluating all tasks after each epoch. On return the model
/// holds the best checkpoint's weights.
pub fn run_training(
    model: &mut MtopModel,
    data: &[TaskData],
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("no tasks to train".into()));
    }
    if data.len() != model.num_tasks() {
        return Err(Error::InvalidArgument(format!(
            "{} task datasets for a model with {} tasks",
            data.len(),
            model.num_tasks()
        )));
    }
    let sizes: Vec<usize> = data.iter().map(|d| d.train.len()).collect();
    let per_epoch = steps_per_epoch(&sizes, config.batch_size);
    let total = per_epoch * config.epochs;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut cursors: Vec<BatchCursor> = sizes
        .iter()
        .map(|&n| BatchCursor::new(n, &mut rng))
        .collect();
    let mut optimizer = Adam::new();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..per_epoch {
            let task = sample_task(&sizes, &mut rng)?;
            let batch: Vec<Example> = cursors[task]
                .next(config.batch_size, &mut rng)
                .iter()
                .map(|&i| data[task].train[i].clone())
                .collect();
            let lr = lr_at_step(step + 1, total, config.peak_lr, config.warmup_fraction)?;
            loss_sum += train_step(
                model,
                &batch,
                task,
                &mut optimizer,
                lr,
                Some(&mut dropout_rng),
            )?;
            step += 1;
        }
        let per_task = evaluate_tasks(model, data, config.eval_batch_size)?;
        let average = per_task.iter().sum::<f64>() / per_task.len() as f64;
        if let Some(w) = log.as_deref_mut() {
            for (t, &value) in model.tasks().iter().zip(&per_task) {
                let rec = MetricRecord {
                    epoch,
                    task: &t.name,
                    metric: t.metric.to_string(),
                    value,
                };
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")
                    .map_err(|e| Error::io("<metrics log>", e))?;
            }
        }
        if best.as_ref().map_or(true, |(_, a, _)| average > *a) {
            best = Some((epoch, average, model.params().clone()));
        }
        history.push(EpochRecord {
            epoch,
            per_task,
            average,
            mean_loss: loss_sum / per_epoch.max(1) as f64,
        });
    }

    let (best_epoch, _, best_params) =
        best.ok_or_else(|| Error::Config("epochs must be at least 1".into()))?;
    *model.params_mut() = best_params.clone();
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_params,
        total_steps: total,
    })
}

/// Per-task metric vector of one run, keyed by task name.
pub type RunMetrics = Vec<(String, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct MedianSummary {
    pub per_task: Vec<(String, f64)>,
    /// Median over runs of each run's task average.
    pub average: f64,
}

/// Lower median: the `(n - 1) / 2`-th order statistic.
pub fn lower_median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("median of nothing".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v[(v.len() - 1) / 2])
}

pub fn aggregate_runs_median(runs: &[RunMetrics]) -> Result<MedianSummary> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no runs to aggregate".into()))?;
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    for (i, r) in runs.iter().enumerate() {
        if r.len() != names.len() || r.iter().zip(&names).any(|((n, _), m)| n != m) {
            return Err(Error::InvalidArgument(format!(
                "run {i} covers a different task set than run 0"
            )));
        }
    }
    let mut per_task = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let col: Vec<f64> = runs.iter().map(|r| r[k].1).collect();
        per_task.push((name.to_string(), lower_median(&col)?));
    }
    let averages: Vec<f64> = runs
        .iter()
        .map(|r| r.iter().map(|(_, v)| v).sum::<f64>() / r.len().max(1) as f64)
        .collect();
    Ok(MedianSummary {
        per_task,
        average: lower_median(&averages)?,
    })
}

/// Copies of `store`'s values for every parameter in `ids`.
pub fn snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<Tensor> {
    ids.iter().map(|&id| store.tensor(id).clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_points() {
        assert_eq!(lr_at_step(10, 100, 1e-5, 0.1).unwrap(), 1e-5);
        assert!((lr_at_step(5, 100, 1e-5, 0.1).unwrap() - 5e-6).abs() < 1e-18);
        assert_eq!(lr_at_step(100, 100, 1e-5, 0.1).unwrap(), 0.0);
        assert_eq!(lr_at_step(0, 100, 1e-5, 0.1).unwrap(), 0.0);
        assert!(lr_at_step(101, 100, 1e-5, 0.1).is_err());
    }

    #[test]
    fn schedule_peaks_once() {
        let lrs: Vec<f64> = (0..=57)
            .map(|s| lr_at_step(s, 57, 1.0, 0.1).unwrap())
            .collect();
        let peaks = lrs.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(peaks, 1);
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= 1.0 / 6.0 + 1e-12);
        }
    }

    #[test]
    fn sampling_rejects_zero_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_task(&[0, 0], &mut rng).is_err());
        assert_eq!(sample_task(&[7], &mut rng).unwrap(), 0);
    }

    #[test]
    fn best_epoch_ties_go_early() {
        assert_eq!(select_best(&[0.845, 0.85, 0.84]).unwrap(), 1);
        assert_eq!(select_best(&[0.5, 0.5, 0.5]).unwrap(), 0);
    }

    #[test]
    fn medians() {
        let runs: Vec<RunMetrics> = [[0.8, 0.9], [0.7, 0.95], [0.85, 0.85]]
            .iter()
            .map(|r| vec![("a".to_string(), r[0]), ("b".to_string(), r[1])])
            .collect();
        let m = aggregate_runs_median(&runs).unwrap();
        assert_eq!(m.per_task, vec![("a".into(), 0.8), ("b".into(), 0.9)]);
        assert_eq!(lower_median(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 3.0);
        assert_eq!(lower_median(&[4.0, 1.0]).unwrap(), 1.0);
        let bad = vec![runs[0].clone(), vec![("a".into(), 0.1)]];
        assert!(aggregate_runs_median(&bad).is_err());
    }

    #[test]
    fn epoch_step_count() {
        assert_eq!(steps_per_epoch(&[3200, 3200, 33], 16), 200 + 200 + 3);
    }
}
