//! Whole-model evaluation through the serving path and the forward-pass /
//! latency benchmark.

use std::fmt::Write as _;
use std::io::Write;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{compute_metric, MetricKind};
use crate::model::{AllTaskPredictions, ModelVariant, MtopModel};
use crate::trainer::TaskData;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: String,
    pub metric: MetricKind,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tasks: Vec<TaskScore>,
    pub average: f64,
    /// Encoder passes performed during the evaluation.
    pub forward_passes: u64,
    pub batches: usize,
    pub wall_clock: Duration,
}

impl EvalReport {
    /// Aligned text table, one row per task plus the average. Timing is
    /// left out so the table is reproducible.
    pub fn table(&self) -> String {
        let width = self
            .tasks
            .iter()
            .map(|t| t.task.len())
            .chain(["average".len()])
            .max()
            .unwrap_or(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:<9}  {:>7}", "task", "metric", "value");
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "{:<width$}  {:<9}  {:>7.4}",
                t.task,
                t.metric.to_string(),
                t.value
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:<9}  {:>7.4}",
            "average", "", self.average
        );
        let _ = writeln!(
            out,
            "forward passes: {} over {} batches",
            self.forward_passes, self.batches
        );
        out
    }

    /// One JSON record per task, then a summary record.
    pub fn write_ndjson(&self, w: &mut dyn Write) -> Result<()> {
        #[derive(Serialize)]
        struct Summary {
            average: f64,
            forward_passes: u64,
            batches: usize,
            wall_clock_secs: f64,
        }
        for t in &self.tasks {
            serde_json::to_writer(&mut *w, t)?;
            w.write_all(b"\n")
                .map_err(|e| Error::io("<eval report>", e))?;
        }
        serde_json::to_writer(
            &mut *w,
            &Summary {
                average: self.average,
                forward_passes: self.forward_passes,
                batches: self.batches,
                wall_clock_secs: self.wall_clock.as_secs_f64(),
            },
        )?;
        w.write_all(b"\n")
            .map_err(|e| Error::io("<eval report>", e))
    }
}

/// Runs the all-task predictor over each batch; returns the predictions and
/// the encoder passes the model's counter recorded.
pub fn serve(
    model: &MtopModel,
    batches: &[Vec<Vec<usize>>],
) -> Result<(Vec<AllTaskPredictions>, u64)> {
    let start = model.forward_passes();
    let preds = batches
        .iter()
        .map(|b| model.predict_all_tasks(b))
        .collect::<Result<Vec<_>>>()?;
    Ok((preds, model.forward_passes() - start))
}

/// Scores every task on its evaluation split through the all-task serving
/// path: each batch yields every task's prediction, of which the batch's own
/// task is scored.
pub fn evaluate(model: &MtopModel, data: &[TaskData], batch_size: usize) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    if data.len() != model.num_tasks() {
        return Err(Error::InvalidArgument(format!(
            "{} evaluation splits for {} tasks",
            data.len(),
            model.num_tasks()
        )));
    }
    let clock = Instant::now();
    let start = model.forward_passes();
    let mut tasks = Vec::with_capacity(data.len());
    let mut batches = 0;
    for (task, d) in data.iter().enumerate() {
        let spec = &model.tasks()[task];
        if d.eval.is_empty() {
            return Err(Error::Data(format!(
                "task '{}' has no evaluation split",
                spec.name
            )));
        }
        let mut preds = Vec::with_capacity(d.eval.len());
        for chunk in d.eval.chunks(batch_size) {
            let tokens: Vec<Vec<usize>> = chunk.iter().map(|e| e.tokens.clone()).collect();
            preds.extend(model.predict_all_tasks(&tokens)?.argmax(task));
            batches += 1;
        }
        let labels: Vec<f64> = d.eval.iter().map(|e| e.label as f64).collect();
        let preds: Vec<f64> = preds.into_iter().map(|p| p as f64).collect();
        tasks.push(TaskScore {
            task: spec.name.clone(),
            metric: spec.metric,
            value: compute_metric(spec.metric, &preds, &labels)?,
        });
    }
    let average = tasks.iter().map(|t| t.value).sum::<f64>() / tasks.len().max(1) as f64;
    Ok(EvalReport {
        tasks,
        average,
        forward_passes: model.forward_passes() - start,
        batches,
        wall_clock: clock.elapsed(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub variant: ModelVariant,
    pub num_tasks: usize,
    /// Encoder passes per sweep over all batches.
    pub forward_passes: u64,
    /// Padded sequence length of one pass over the longest input.
    pub seq_len: usize,
    /// Padded positions encoded per sweep.
    pub tokens_processed: usize,
    pub median: Duration,
    pub samples: Vec<Duration>,
}

pub fn median_duration(samples: &[Duration]) -> Duration {
    let mut v = samples.to_vec();
    v.sort();
    v[(v.len() - 1) / 2]
}

/// Times full sweeps of all-task prediction over `batches` for each model:
/// one warmup sweep, then `repetitions` timed sweeps.
pub fn bench(
    models: &[&MtopModel],
    batches: &[Vec<Vec<usize>>],
    repetitions: usize,
) -> Result<Vec<BenchRow>> {
    if repetitions == 0 {
        return Err(Error::InvalidArgument(
            "benchmark needs at least one repetition".into(),
        ));
    }
    if models.is_empty() {
        return Err(Error::InvalidArgument(
            "benchmark needs at least one model".into(),
        ));
    }
    let mut rows = Vec::with_capacity(models.len());
    for model in models {
        serve(model, batches)?;
        let mut samples = Vec::with_capacity(repetitions);
        let mut passes = 0;
        for _ in 0..repetitions {
            let t = Instant::now();
            let (_, p) = serve(model, batches)?;
            samples.push(t.elapsed());
            passes = p;
        }
        let per_batch = model.variant().passes_per_batch(model.num_tasks());
        let longest = batches.iter().flatten().map(Vec::len).max().unwrap_or(0);
        let tokens_processed = batches
            .iter()
            .map(|b| {
                let l = b.iter().map(Vec::len).max().unwrap_or(0);
                per_batch * b.len() * model.pass_sequence_len(l)
            })
            .sum();
        rows.push(BenchRow {
            variant: model.variant(),
            num_tasks: model.num_tasks(),
            forward_passes: passes,
            seq_len: model.pass_sequence_len(longest),
            tokens_processed,
            median: median_duration(&samples),
            samples,
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>5} {:>8} {:>7} {:>10} {:>12}",
        "variant", "tasks", "passes", "seqlen", "tokens", "median_ms"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>8} {:>7} {:>10} {:>12.3}",
            r.variant.to_string(),
            r.num_tasks,
            r.forward_passes,
            r.seq_len,
            r.tokens_processed,
            r.median.as_secs_f64() * 1e3
        );
    }
    out
}
