//! Exact-match span F1, accuracy / macro-F1, and multi-seed summaries.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::TokenSpan;
use crate::error::{Error, Result};

/// An aspect span within a numbered sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub sentence: usize,
    pub span: TokenSpan,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 under exact span matching.
///
/// With no predictions, precision is 0 if there was anything to find and 1
/// otherwise; recall with no gold spans is symmetric. F1 is 0 whenever
/// `P + R = 0`.
pub fn ae_span_f1(predicted: &[SentenceSpan], gold: &[SentenceSpan]) -> Prf {
    let pred: HashSet<_> = predicted.iter().collect();
    let gold: HashSet<_> = gold.iter().collect();
    let tp = pred.intersection(&gold).count() as f64;
    let fp = pred.len() as f64 - tp;
    let fn_ = gold.len() as f64 - tp;
    let precision = if tp + fp == 0.0 {
        if fn_ > 0.0 { 0.0 } else { 1.0 }
    } else {
        tp / (tp + fp)
    };
    let recall = if tp + fn_ == 0.0 {
        if fp > 0.0 { 0.0 } else { 1.0 }
    } else {
        tp / (tp + fn_)
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf { precision, recall, f1 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscScores {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and the unweighted mean of per-class F1 over `num_classes`
/// classes. A class absent from both predictions and gold scores F1 = 0.
pub fn asc_scores(predicted: &[usize], gold: &[usize], num_classes: usize) -> Result<AscScores> {
    if predicted.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} gold labels",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Contract("cannot score an empty set".into()));
    }
    if let Some(&bad) = predicted.iter().chain(gold).find(|&&c| c >= num_classes) {
        return Err(Error::Label {
            label: bad,
            num_labels: num_classes,
        });
    }
    let correct = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    let mut f1_sum = 0.0;
    for c in 0..num_classes {
        let tp = predicted.iter().zip(gold).filter(|(p, g)| **p == c && **g == c).count() as f64;
        let fp = predicted.iter().zip(gold).filter(|(p, g)| **p == c && **g != c).count() as f64;
        let fn_ = predicted.iter().zip(gold).filter(|(p, g)| **p != c && **g == c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }
    Ok(AscScores {
        accuracy: correct as f64 / gold.len() as f64,
        macro_f1: f1_sum / num_classes as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub seed: u64,
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetric {
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub sd: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub dataset: String,
    pub seeds: Vec<u64>,
    pub epoch_losses: Vec<EpochLoss>,
    pub seed_metrics: Vec<SeedMetric>,
    pub summary: Vec<MetricSummary>,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation of every metric across seeds, in
/// metric-name order.
pub fn aggregate_seeds(seed_metrics: &[SeedMetric]) -> Vec<MetricSummary> {
    let mut by_metric: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for m in seed_metrics {
        by_metric.entry(&m.metric).or_default().push(m.value);
    }
    by_metric
        .into_iter()
        .map(|(metric, values)| {
            let (mean, sd) = mean_sd(&values);
            MetricSummary {
                metric: metric.to_string(),
                mean,
                sd,
                runs: values.len(),
            }
        })
        .collect()
}

impl RunReport {
    pub fn summarize(&mut self) {
        self.summary = aggregate_seeds(&self.seed_metrics);
    }

    pub fn summary_for(&self, metric: &str) -> Option<&MetricSummary> {
        self.summary.iter().find(|s| s.metric == metric)
    }

    /// Rows `seed,task,dataset,metric,value`, per seed then `mean` and `sd`.
    pub fn write_metrics_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["seed", "task", "dataset", "metric", "value"])?;
        for m in &self.seed_metrics {
            out.write_record([&m.seed.to_string(), &self.task, &self.dataset, &m.metric, &m.value.to_string()])?;
        }
        for s in &self.summary {
            out.write_record(["mean", &self.task, &self.dataset, &s.metric, &s.mean.to_string()])?;
            out.write_record(["sd", &self.task, &self.dataset, &s.metric, &s.sd.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Rows `seed,epoch,split,loss` with one train and one validation row
    /// per seed and epoch.
    pub fn write_curves_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["seed", "epoch", "split", "loss"])?;
        for e in &self.epoch_losses {
            for (split, loss) in [("train", e.train), ("validation", e.validation)] {
                out.write_record([&e.seed.to_string(), &e.epoch.to_string(), split, &loss.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}
