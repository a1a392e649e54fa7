//! Checks SemEval files against the published dataset statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ae_stats, asc_stats, parse_semeval_ae, parse_semeval_asc};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    /// Sentences and aspect terms.
    Ae { sentences: usize, aspects: usize },
    /// Positive, negative and neutral aspect counts.
    Asc { positive: usize, negative: usize, neutral: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub dataset: &'static str,
    pub split: &'static str,
    pub file: &'static str,
    pub expected: Expected,
}

const fn ae(dataset: &'static str, split: &'static str, file: &'static str, sentences: usize, aspects: usize) -> DatasetSpec {
    DatasetSpec {
        dataset,
        split,
        file,
        expected: Expected::Ae { sentences, aspects },
    }
}

const fn asc(
    dataset: &'static str,
    split: &'static str,
    file: &'static str,
    positive: usize,
    negative: usize,
    neutral: usize,
) -> DatasetSpec {
    DatasetSpec {
        dataset,
        split,
        file,
        expected: Expected::Asc {
            positive,
            negative,
            neutral,
        },
    }
}

/// AE statistics for laptops 2014 and restaurants 2016, ASC statistics for
/// laptops and restaurants 2014.
pub const DATASETS: &[DatasetSpec] = &[
    ae("LPT14", "train", "Laptop_Train_v2.xml", 3045, 2358),
    ae("LPT14", "test", "Laptops_Test_Gold.xml", 800, 654),
    ae("RST16", "train", "ABSA16_Restaurants_Train_SB1_v2.xml", 2000, 1743),
    ae("RST16", "test", "EN_REST_SB1_TEST.xml.gold", 676, 622),
    asc("LPT14", "train", "Laptop_Train_v2.xml", 987, 866, 460),
    asc("LPT14", "test", "Laptops_Test_Gold.xml", 341, 128, 169),
    asc("RST14", "train", "Restaurants_Train_v2.xml", 2164, 805, 633),
    asc("RST14", "test", "Restaurants_Test_Gold.xml", 728, 196, 196),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestRow {
    pub task: String,
    pub dataset: String,
    pub split: String,
    pub file: String,
    pub statistic: String,
    pub expected: usize,
    /// `None` when the file is absent.
    pub found: Option<usize>,
}

impl IngestRow {
    pub fn matches(&self) -> bool {
        self.found == Some(self.expected)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: Vec<IngestRow>,
}

impl IngestReport {
    /// Files that were present.
    pub fn checked(&self) -> impl Iterator<Item = &IngestRow> {
        self.rows.iter().filter(|r| r.found.is_some())
    }

    pub fn all_present(&self) -> bool {
        self.rows.iter().all(|r| r.found.is_some())
    }

    /// Every present file matched exactly.
    pub fn ok(&self) -> bool {
        self.checked().all(IngestRow::matches)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["task", "dataset", "split", "file", "statistic", "expected", "found", "status"])?;
        for r in &self.rows {
            let (found, status) = match r.found {
                None => (String::new(), "missing"),
                Some(f) => (f.to_string(), if r.matches() { "ok" } else { "MISMATCH" }),
            };
            out.write_record([
                r.task.as_str(),
                &r.dataset,
                &r.split,
                &r.file,
                &r.statistic,
                &r.expected.to_string(),
                &found,
                status,
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Parses whichever of the known files exist under `dir` and compares
/// their counts with [`DATASETS`]. Absent files are reported, not errors;
/// a present file that fails to parse is an error.
pub fn ingest(dir: &Path) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    for spec in DATASETS {
        let path = dir.join(spec.file);
        let present = path.is_file();
        let mut push = |task: &str, statistic: &str, expected: usize, found: Option<usize>| {
            report.rows.push(IngestRow {
                task: task.into(),
                dataset: spec.dataset.into(),
                split: spec.split.into(),
                file: spec.file.into(),
                statistic: statistic.into(),
                expected,
                found,
            })
        };
        match spec.expected {
            Expected::Ae { sentences, aspects } => {
                let stats = if present { Some(ae_stats(&parse_semeval_ae(&path)?)) } else { None };
                push("ae", "sentences", sentences, stats.map(|s| s.sentences));
                push("ae", "aspects", aspects, stats.map(|s| s.aspects));
            }
            Expected::Asc {
                positive,
                negative,
                neutral,
            } => {
                let stats = if present { Some(asc_stats(&parse_semeval_asc(&path)?)) } else { None };
                push("asc", "positive", positive, stats.map(|s| s.positive));
                push("asc", "negative", negative, stats.map(|s| s.negative));
                push("asc", "neutral", neutral, stats.map(|s| s.neutral));
            }
        }
    }
    Ok(report)
}
