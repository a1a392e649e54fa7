//! Configuration, training, checkpoints and the analysis experiments.

mod checkpoint;
mod config;
mod ingest;
mod probe;
mod train;

pub use checkpoint::{param_digest, Checkpoint, RngState, FORMAT_VERSION, MAGIC};
pub use config::{RunConfig, CONFIG_KEYS};
pub use ingest::{ingest, DatasetSpec, Expected, IngestReport, IngestRow, DATASETS};
pub use probe::{probe_layers, write_probe_csv, LayerScore, ProbeConfig};
pub use train::{
    build_vocab, evaluate, example_task, mean_loss, train, train_seed, validation_split, Evaluation,
    PredictionRecord, Scores, SeedRun, TrainOutput,
};

use std::path::Path;

use crate::data::{parse_semeval_ae, parse_semeval_asc, synthetic_corpus, to_semeval_xml, parse_ae_str, parse_asc_str, Example};
use crate::error::Result;
use crate::heads::Task;

/// Reads a SemEval XML file as examples for `task`.
pub fn load_examples(task: Task, path: &Path) -> Result<Vec<Example>> {
    Ok(match task {
        Task::Ae => parse_semeval_ae(path)?.into_iter().map(Example::Ae).collect(),
        Task::Asc => parse_semeval_asc(path)?.into_iter().map(Example::Asc).collect(),
    })
}

/// The synthetic corpus for `task`, read back through the XML parser so it
/// takes the same path as real data.
pub fn synthetic_examples(task: Task, n: usize, seed: u64) -> Result<Vec<Example>> {
    let xml = to_semeval_xml(&synthetic_corpus(n, seed));
    Ok(match task {
        Task::Ae => parse_ae_str(&xml)?.into_iter().map(Example::Ae).collect(),
        Task::Asc => parse_asc_str(&xml)?.into_iter().map(Example::Asc).collect(),
    })
}
