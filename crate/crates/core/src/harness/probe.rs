//! Per-layer linear probes on a frozen encoder.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::train::example_task;
use crate::crf::NUM_BIO_TAGS;
use crate::data::{encode_example, tag_spans, Example, Polarity};
use crate::error::{Error, Result};
use crate::heads::{Target, Task};
use crate::metrics::{ae_span_f1, asc_scores, SentenceSpan};
use crate::tensor::{argmax, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Full-batch Adam steps per layer.
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.05 }
    }
}

/// Validation score of the probe on encoder state `layer` (0 is the
/// embedding output). Span F1 for AE, accuracy for ASC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    pub score: f64,
}

/// Rows of one layer's features with their labels and source example.
struct Features {
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    example: Vec<usize>,
}

fn collect_features(checkpoint: &Checkpoint, examples: &[Example]) -> Result<Vec<Features>> {
    let model = &checkpoint.model;
    let layers = model.config.encoder.num_layers + 1;
    let mut out: Vec<Features> = (0..layers)
        .map(|_| Features {
            rows: Vec::new(),
            labels: Vec::new(),
            example: Vec::new(),
        })
        .collect();
    for (i, ex) in examples.iter().enumerate() {
        let enc = encode_example(ex, &checkpoint.vocab, &model.config.encoder, checkpoint.run_config.single_segment);
        let states = model.hidden_states(&enc.seq)?;
        let picks: Vec<(usize, usize)> = match &enc.target {
            Target::Tags(tags) => enc.seq.word_positions().into_iter().zip(tags.iter().copied()).collect(),
            Target::Class(c) => vec![(0, *c)],
        };
        for (state, f) in states.iter().zip(out.iter_mut()) {
            for &(row, label) in &picks {
                f.rows.push(state.row(row).to_vec());
                f.labels.push(label);
                f.example.push(i);
            }
        }
    }
    Ok(out)
}

/// Softmax regression fitted by full-batch Adam from a zero start, so the
/// result depends only on the data.
struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weight: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

impl LinearProbe {
    fn fit(f: &Features, classes: usize, config: &ProbeConfig) -> Self {
        let n = f.rows.len();
        let dim = f.rows.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; dim];
        for r in &f.rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n as f64);
        }
        let mut scale = vec![0.0; dim];
        for r in &f.rows {
            scale.iter_mut().zip(r).zip(&mean).for_each(|((s, x), m)| *s += (x - m).powi(2) / n as f64);
        }
        scale.iter_mut().for_each(|s| *s = if *s > 1e-12 { 1.0 / s.sqrt() } else { 0.0 });
        let mut probe = Self {
            mean,
            scale,
            weight: vec![0.0; dim * classes],
            bias: vec![0.0; classes],
            classes,
        };
        let xs: Vec<Vec<f64>> = f.rows.iter().map(|r| probe.standardize(r)).collect();

        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        let np = dim * classes + classes;
        let (mut m, mut v) = (vec![0.0; np], vec![0.0; np]);
        for t in 1..=config.steps {
            let mut grad = vec![0.0; np];
            for (x, &y) in xs.iter().zip(&f.labels) {
                let p = softmax(&probe.logits_std(x));
                for k in 0..classes {
                    let d = (p[k] - f64::from(u8::from(k == y))) / n as f64;
                    for (j, xj) in x.iter().enumerate() {
                        grad[j * classes + k] += d * xj;
                    }
                    grad[dim * classes + k] += d;
                }
            }
            let bc1 = 1.0 - adam.beta1.powi(t as i32);
            let bc2 = 1.0 - adam.beta2.powi(t as i32);
            for (i, g) in grad.iter().enumerate() {
                m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * g;
                v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * g * g;
                let step = adam.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + adam.epsilon);
                if i < dim * classes {
                    probe.weight[i] -= step;
                } else {
                    probe.bias[i - dim * classes] -= step;
                }
            }
        }
        probe
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) * s).collect()
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (j, xj) in x.iter().enumerate() {
            for (k, o) in out.iter_mut().enumerate() {
                *o += xj * self.weight[j * self.classes + k];
            }
        }
        out
    }

    fn predict(&self, row: &[f64]) -> usize {
        argmax(&self.logits_std(&self.standardize(row)))
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn score(task: Task, probe: &LinearProbe, f: &Features, num_examples: usize) -> Result<f64> {
    let predicted: Vec<usize> = f.rows.iter().map(|r| probe.predict(r)).collect();
    match task {
        Task::Asc => Ok(asc_scores(&predicted, &f.labels, Polarity::ALL.len())?.accuracy),
        Task::Ae => {
            let (mut pred, mut gold) = (Vec::new(), Vec::new());
            let mut start = 0;
            for ex in 0..num_examples {
                let end = start + f.example[start..].iter().take_while(|&&e| e == ex).count();
                let spans = |tags: &[usize]| {
                    tag_spans(tags)
                        .into_iter()
                        .map(|span| SentenceSpan { sentence: ex, span })
                        .collect::<Vec<_>>()
                };
                pred.extend(spans(&predicted[start..end]));
                gold.extend(spans(&f.labels[start..end]));
                start = end;
            }
            Ok(ae_span_f1(&pred, &gold).f1)
        }
    }
}

/// Fits a fresh probe on every encoder state using `train` and scores it on
/// `validation`. Returns `L + 1` rows. The checkpoint is only read.
pub fn probe_layers(
    checkpoint: &Checkpoint,
    train: &[Example],
    validation: &[Example],
    config: &ProbeConfig,
) -> Result<Vec<LayerScore>> {
    let task = checkpoint.model.config.task;
    if let Some(e) = train.iter().chain(validation).find(|e| example_task(e) != task) {
        return Err(Error::Config(format!("{task} checkpoint given {} data", example_task(e))));
    }
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Data("probing needs training and validation examples".into()));
    }
    let classes = match task {
        Task::Ae => NUM_BIO_TAGS,
        Task::Asc => Polarity::ALL.len(),
    };
    let fit_features = collect_features(checkpoint, train)?;
    let eval_features = collect_features(checkpoint, validation)?;
    fit_features
        .par_iter()
        .zip(eval_features.par_iter())
        .enumerate()
        .map(|(layer, (fit, eval))| {
            let probe = LinearProbe::fit(fit, classes, config);
            Ok(LayerScore {
                layer,
                score: score(task, &probe, eval, validation.len())?,
            })
        })
        .collect()
}

pub fn write_probe_csv<W: std::io::Write>(scores: &[LayerScore], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "score"])?;
    for s in scores {
        out.write_record([s.layer.to_string(), s.score.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
