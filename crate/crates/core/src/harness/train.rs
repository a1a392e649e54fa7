//! Multi-seed training and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::config::RunConfig;
use crate::data::{encode_example, make_batches, split_validation, tag_spans, EncodedExample, Example, Polarity};
use crate::crf::Tag;
use crate::encoder::{Vocab, PAD_ID};
use crate::error::{Error, Result};
use crate::heads::{Prediction, Task};
use crate::metrics::{ae_span_f1, asc_scores, AscScores, EpochLoss, Prf, RunReport, SeedMetric, SentenceSpan};
use crate::model::AbsaModel;
use crate::tensor::{AdamState, Graph};

/// Dropout draws come from this stream of the seed's generator, so they
/// never overlap the streams used for initialization and shuffling.
const DROPOUT_STREAM: u64 = u64::MAX - 1;

pub fn example_task(ex: &Example) -> Task {
    match ex {
        Example::Ae(_) => Task::Ae,
        Example::Asc(_) => Task::Asc,
    }
}

fn check_task(task: Task, examples: &[Example]) -> Result<()> {
    match examples.iter().find(|e| example_task(e) != task) {
        Some(e) => Err(Error::Config(format!(
            "{task} model given {} data",
            example_task(e)
        ))),
        None => Ok(()),
    }
}

pub fn build_vocab(examples: &[Example], min_freq: usize) -> Result<Vocab> {
    Vocab::build(examples.iter().map(|e| e.all_token_texts()), min_freq)
}

/// Mean total loss over `examples` without dropout.
pub fn mean_loss(model: &AbsaModel, examples: &[EncodedExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for ex in examples {
        sum += model.eval_loss(&ex.seq, &ex.target)?;
    }
    Ok(sum / examples.len() as f64)
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<EpochLoss>,
    pub metrics: Vec<SeedMetric>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub runs: Vec<SeedRun>,
    pub report: RunReport,
}

/// Trains one seed: split off the validation set, build the vocabulary on
/// the rest, then run `epochs` passes of minibatch Adam on the mean total
/// loss of each batch.
pub fn train_seed(config: &RunConfig, seed: u64, examples: &[Example], test: Option<&[Example]>) -> Result<SeedRun> {
    config.validate()?;
    check_task(config.task, examples)?;
    if let Some(test) = test {
        check_task(config.task, test)?;
    }
    let (train_raw, val_raw) = split_validation(examples, config.validation_n, seed)?;
    let vocab = build_vocab(&train_raw, config.min_freq)?;
    let mut model = AbsaModel::new(config.model_config(vocab.len()), seed)?;
    let enc_cfg = model.config.encoder.clone();
    let encode = |xs: &[Example]| -> Vec<EncodedExample> {
        xs.iter()
            .map(|e| encode_example(e, &vocab, &enc_cfg, config.single_segment))
            .collect()
    };
    let train_set = encode(&train_raw);
    let val_set = encode(&val_raw);

    let mut optimizer = AdamState::new(config.adam(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(DROPOUT_STREAM);
    let use_dropout = config.dropout > 0.0;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let batches = make_batches(&train_set, config.batch_size, seed, epoch as u64, PAD_ID)?;
        for (b, batch) in batches.iter().enumerate() {
            model.params.zero_grads();
            for ex in &batch.examples {
                let mut g = Graph::new();
                let r = use_dropout.then_some(&mut rng);
                let diagnose = |what: String| {
                    Error::Numeric(format!(
                        "seed {seed}: {what} at epoch {epoch}, batch {}; parameter norm {:.6e}",
                        b + 1,
                        model.params.global_norm()
                    ))
                };
                let (_, total) = model.loss(&mut g, &ex.seq, &ex.target, r).map_err(|e| match e {
                    Error::Numeric(m) => diagnose(m),
                    other => other,
                })?;
                let value = g.item(total)?;
                if !value.is_finite() {
                    return Err(diagnose(format!("loss {value}")));
                }
                g.backward(total)?;
                model.params.accumulate_grads(&g);
            }
            model.params.scale_grads(1.0 / batch.examples.len() as f64);
            optimizer.step(&mut model.params)?;
        }
        let norm = model.params.global_norm();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "seed {seed}: parameters became non-finite during epoch {epoch}"
            )));
        }
        let train_loss = mean_loss(&model, &train_set)?;
        let val_loss = mean_loss(&model, &val_set)?;
        log::info!("seed {seed} epoch {epoch}: train loss {train_loss:.6}, validation loss {val_loss:.6}");
        epoch_losses.push(EpochLoss {
            seed,
            epoch,
            train: train_loss,
            validation: val_loss,
        });
    }
    model.params.zero_grads();

    let checkpoint = Checkpoint {
        run_config: config.clone(),
        seed,
        epoch: config.epochs,
        vocab,
        model,
        optimizer,
        rng: RngState::capture(&rng),
    };
    let mut metrics = Vec::new();
    let mut push = |split: &str, scores: &Scores| {
        for (name, value) in scores.named() {
            metrics.push(SeedMetric {
                seed,
                metric: format!("{split}_{name}"),
                value,
            });
        }
    };
    push("validation", &evaluate(&checkpoint, &val_raw)?.scores);
    if let Some(test) = test {
        push("test", &evaluate(&checkpoint, test)?.scores);
    }
    Ok(SeedRun {
        checkpoint,
        epoch_losses,
        metrics,
    })
}

/// Trains every seed in `config.seeds` in parallel. Results are kept in seed
/// order, and each seed is itself single-threaded, so the output does not
/// depend on scheduling.
pub fn train(config: &RunConfig, examples: &[Example], test: Option<&[Example]>, dataset: &str) -> Result<TrainOutput> {
    config.validate()?;
    let runs = config
        .seeds
        .par_iter()
        .map(|&seed| train_seed(config, seed, examples, test))
        .collect::<Result<Vec<_>>>()?;
    let mut report = RunReport {
        task: config.task.to_string(),
        dataset: dataset.to_string(),
        seeds: config.seeds.clone(),
        epoch_losses: runs.iter().flat_map(|r| r.epoch_losses.iter().copied()).collect(),
        seed_metrics: runs.iter().flat_map(|r| r.metrics.iter().cloned()).collect(),
        summary: Vec::new(),
    };
    report.summarize();
    Ok(TrainOutput { runs, report })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scores {
    Ae(Prf),
    Asc(AscScores),
}

impl Scores {
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        match self {
            Scores::Ae(p) => vec![("precision", p.precision), ("recall", p.recall), ("f1", p.f1)],
            Scores::Asc(s) => vec![("accuracy", s.accuracy), ("macro_f1", s.macro_f1)],
        }
    }

    /// Span F1 for AE, accuracy for ASC.
    pub fn headline(&self) -> f64 {
        match self {
            Scores::Ae(p) => p.f1,
            Scores::Asc(s) => s.accuracy,
        }
    }
}

/// One row of the prediction file. AE rows hold space-separated tags; ASC
/// rows hold a polarity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predicted: String,
    pub gold: String,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub scores: Scores,
    pub predictions: Vec<PredictionRecord>,
}

fn tag_string(tags: &[usize]) -> String {
    tags.iter()
        .map(|&t| Tag::from_index(t).map(Tag::as_str).unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Scores `examples` with the checkpoint's model. AE decoding is BIO
/// constrained; gold spans come from the untruncated sentence.
pub fn evaluate(checkpoint: &Checkpoint, examples: &[Example]) -> Result<Evaluation> {
    let model = &checkpoint.model;
    let task = model.config.task;
    check_task(task, examples)?;
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let single = checkpoint.run_config.single_segment;
    let mut predictions = Vec::with_capacity(examples.len());
    let (mut pred_spans, mut gold_spans) = (Vec::new(), Vec::new());
    let (mut pred_classes, mut gold_classes) = (Vec::new(), Vec::new());
    for (i, ex) in examples.iter().enumerate() {
        let enc = encode_example(ex, &checkpoint.vocab, &model.config.encoder, single);
        let prediction = model.predict(&enc.seq)?;
        match (ex, prediction) {
            (Example::Ae(e), Prediction::Tags(tags)) => {
                let gold = e.tags.indices();
                pred_spans.extend(tag_spans(&tags).into_iter().map(|span| SentenceSpan { sentence: i, span }));
                gold_spans.extend(tag_spans(&gold).into_iter().map(|span| SentenceSpan { sentence: i, span }));
                predictions.push(PredictionRecord {
                    id: e.id.clone(),
                    predicted: tag_string(&tags),
                    gold: tag_string(&gold),
                });
            }
            (Example::Asc(e), Prediction::Class(c)) => {
                pred_classes.push(c);
                gold_classes.push(e.polarity.index());
                predictions.push(PredictionRecord {
                    id: e.id.clone(),
                    predicted: Polarity::from_index(c)?.to_string(),
                    gold: e.polarity.to_string(),
                });
            }
            _ => return Err(Error::Contract("prediction kind does not match the example".into())),
        }
    }
    let scores = match task {
        Task::Ae => Scores::Ae(ae_span_f1(&pred_spans, &gold_spans)),
        Task::Asc => Scores::Asc(asc_scores(&pred_classes, &gold_classes, Polarity::ALL.len())?),
    };
    Ok(Evaluation { scores, predictions })
}

/// The validation examples a checkpoint was selected against, recovered by
/// repeating its seeded split.
pub fn validation_split(checkpoint: &Checkpoint, examples: &[Example]) -> Result<(Vec<Example>, Vec<Example>)> {
    split_validation(examples, checkpoint.run_config.validation_n, checkpoint.seed)
}
