//! Classification and correlation metrics.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Accuracy,
    /// F1 on the positive class (label 1).
    F1,
    Matthews,
    Spearman,
    Pearson,
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "accuracy" | "acc" => Ok(Self::Accuracy),
            "f1" => Ok(Self::F1),
            "matthews" | "mcc" => Ok(Self::Matthews),
            "spearman" => Ok(Self::Spearman),
            "pearson" => Ok(Self::Pearson),
            other => Err(format!("unknown metric '{other}'")),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Accuracy => "accuracy",
            Self::F1 => "f1",
            Self::Matthews => "matthews",
            Self::Spearman => "spearman",
            Self::Pearson => "pearson",
        })
    }
}

impl serde::Serialize for MetricKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Binary confusion counts with label 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_labels(predictions: &[usize], labels: &[usize]) -> Self {
        let mut c = Self::default();
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p == 1, y == 1) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// `2TP / (2TP + FP + FN)`, 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    /// Matthews correlation, 0 when any marginal is 0.
    pub fn matthews(&self) -> f64 {
        let (tp, tn, fp, fn_) = (
            self.tp as f64,
            self.tn as f64,
            self.fp as f64,
            self.fn_ as f64,
        );
        let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
        if factors.iter().any(|&f| f == 0.0) {
            return 0.0;
        }
        (tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt()
    }
}

fn check_lengths(n_pred: usize, n_true: usize) -> Result<()> {
    if n_pred != n_true {
        return Err(Error::InvalidArgument(format!(
            "predictions ({n_pred}) and labels ({n_true}) differ in length"
        )));
    }
    if n_pred == 0 {
        return Err(Error::InvalidArgument("metric over empty input".into()));
    }
    Ok(())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn f1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    Ok(Confusion::from_labels(predictions, labels).f1())
}

pub fn matthews(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    Ok(Confusion::from_labels(predictions, labels).matthews())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x.len(), y.len())?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; ties share the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths(x.len(), y.len())?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Dispatches on `kind`. Classification kinds read values as class ids.
pub fn compute_metric(kind: MetricKind, predictions: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let as_classes = |v: &[f64]| -> Result<Vec<usize>> {
        v.iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(Error::InvalidArgument(format!("{x} is not a class id")))
                }
            })
            .collect()
    };
    match kind {
        MetricKind::Accuracy => accuracy(&as_classes(predictions)?, &as_classes(labels)?),
        MetricKind::F1 => f1(&as_classes(predictions)?, &as_classes(labels)?),
        MetricKind::Matthews => matthews(&as_classes(predictions)?, &as_classes(labels)?),
        MetricKind::Spearman => spearman(predictions, labels),
        MetricKind::Pearson => pearson(predictions, labels),
    }
}
