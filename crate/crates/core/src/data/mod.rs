//! Dataset ingestion, alignment, validation splits and batching.

mod bio;
mod semeval;
mod synth;

pub use bio::{bio_decode, bio_encode, tag_spans, CharSpan, TokenSpan};
pub use semeval::{parse_ae_str, parse_asc_str, parse_semeval_ae, parse_semeval_asc};
pub use synth::{synthetic_corpus, to_semeval_xml, SynthAspect, SynthSentence, SYNTHETIC_SIZE};

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::crf::TagSequence;
use crate::encoder::{encode_pair, encode_sequence, EncoderConfig, Token, TokenizedSequence, Vocab};
use crate::error::{Error, Result};
use crate::heads::Target;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive = 0,
    Negative = 1,
    Neutral = 2,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::Label { label: i, num_labels: 3 })
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeExample {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub aspects: Vec<CharSpan>,
    pub tags: TagSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscExample {
    pub id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub aspect: String,
    pub aspect_tokens: Vec<Token>,
    pub aspect_span: CharSpan,
    pub polarity: Polarity,
}

/// Either kind of example, for code that is generic over the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Example {
    Ae(AeExample),
    Asc(AscExample),
}

impl Example {
    pub fn tokens(&self) -> &[Token] {
        match self {
            Example::Ae(e) => &e.tokens,
            Example::Asc(e) => &e.tokens,
        }
    }

    /// Every token the model reads, including the aspect segment.
    pub fn all_token_texts(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.tokens().iter().map(|t| t.text.as_str()).collect();
        if let Example::Asc(e) = self {
            v.extend(e.aspect_tokens.iter().map(|t| t.text.as_str()));
        }
        v
    }
}

/// Model-ready example.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub seq: TokenizedSequence,
    pub target: Target,
}

/// `[CLS] tokens [SEP]` with tags cut to the kept tokens.
pub fn encode_ae(ex: &AeExample, vocab: &Vocab, config: &EncoderConfig) -> EncodedExample {
    let seq = encode_sequence(&ex.tokens, vocab, config);
    if seq.truncated {
        log::warn!("sentence {:?} truncated to {} tokens", ex.id, seq.tokens.len());
    }
    let tags = ex.tags.indices()[..seq.tokens.len()].to_vec();
    EncodedExample {
        seq,
        target: Target::Tags(tags),
    }
}

/// `[CLS] sentence [SEP] aspect [SEP]`, or `[CLS] sentence [SEP]` when
/// `single_segment` is set.
pub fn encode_asc(ex: &AscExample, vocab: &Vocab, config: &EncoderConfig, single_segment: bool) -> EncodedExample {
    let seq = if single_segment {
        encode_sequence(&ex.tokens, vocab, config)
    } else {
        encode_pair(&ex.tokens, &ex.aspect_tokens, vocab, config)
    };
    EncodedExample {
        seq,
        target: Target::Class(ex.polarity.index()),
    }
}

pub fn encode_example(ex: &Example, vocab: &Vocab, config: &EncoderConfig, single_segment: bool) -> EncodedExample {
    match ex {
        Example::Ae(e) => encode_ae(e, vocab, config),
        Example::Asc(e) => encode_asc(e, vocab, config, single_segment),
    }
}

const SPLIT_STREAM: u64 = u64::MAX;

/// Seeded shuffle, then the first `n` items become the validation set.
pub fn split_validation<T: Clone>(examples: &[T], n: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if n >= examples.len() {
        return Err(Error::Config(format!(
            "validation size {n} must be smaller than the {} training examples",
            examples.len()
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    order.shuffle(&mut rng);
    let validation = order[..n].iter().map(|&i| examples[i].clone()).collect();
    let mut rest = order[n..].to_vec();
    rest.sort_unstable();
    let train = rest.into_iter().map(|i| examples[i].clone()).collect();
    Ok((train, validation))
}

/// A padded minibatch. `indices` point into the slice given to
/// [`make_batches`].
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub examples: Vec<EncodedExample>,
}

/// Reshuffles per `(seed, epoch)` and pads each batch to its longest
/// sequence. The final batch may be short.
pub fn make_batches(examples: &[EncodedExample], batch_size: usize, seed: u64, epoch: u64, pad_id: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let max_len = chunk.iter().map(|&i| examples[i].seq.len()).max().unwrap_or(0);
            let examples = chunk
                .iter()
                .map(|&i| {
                    let mut ex = examples[i].clone();
                    ex.seq.pad_to(max_len, pad_id);
                    ex
                })
                .collect();
            Batch {
                indices: chunk.to_vec(),
                examples,
            }
        })
        .collect())
}

/// One JSON object per line.
pub fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            line: Some(i as u32 + 1),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeStats {
    pub sentences: usize,
    pub aspects: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AscStats {
    pub positive: usize,
    pub negative: usize,
    pub neutral: usize,
}

pub fn ae_stats(examples: &[AeExample]) -> AeStats {
    AeStats {
        sentences: examples.len(),
        aspects: examples.iter().map(|e| e.aspects.len()).sum(),
    }
}

pub fn asc_stats(examples: &[AscExample]) -> AscStats {
    let count = |p| examples.iter().filter(|e| e.polarity == p).count();
    AscStats {
        positive: count(Polarity::Positive),
        negative: count(Polarity::Negative),
        neutral: count(Polarity::Neutral),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::tokenize;

    fn encoded(n: usize) -> Vec<EncodedExample> {
        let vocab = Vocab::build([vec!["a", "b"]], 1).unwrap();
        let cfg = EncoderConfig::default();
        (0..n)
            .map(|i| {
                let text = "a ".repeat(i % 5 + 1);
                let toks = tokenize(&text);
                let tags = vec![2; toks.len()];
                EncodedExample {
                    seq: encode_sequence(&toks, &vocab, &cfg),
                    target: Target::Tags(tags),
                }
            })
            .collect()
    }

    #[test]
    fn batch_sizes_and_padding() {
        let ex = encoded(33);
        let batches = make_batches(&ex, 16, 7, 0, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.examples.len()).collect();
        assert_eq!(sizes, vec![16, 16, 1]);
        for b in &batches {
            let len = b.examples[0].seq.len();
            for (e, &i) in b.examples.iter().zip(&b.indices) {
                assert_eq!(e.seq.len(), len);
                assert_eq!(e.seq.num_real(), ex[i].seq.len());
                assert!(e.seq.mask[ex[i].seq.len()..].iter().all(|m| !m));
            }
        }
    }

    #[test]
    fn batches_reshuffle_per_epoch() {
        let ex = encoded(20);
        let a = make_batches(&ex, 4, 1, 0, 0).unwrap();
        let b = make_batches(&ex, 4, 1, 1, 0).unwrap();
        let a2 = make_batches(&ex, 4, 1, 0, 0).unwrap();
        let order = |bs: &[Batch]| bs.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>();
        assert_eq!(order(&a), order(&a2));
        assert_ne!(order(&a), order(&b));
        assert!(make_batches(&ex, 0, 1, 0, 0).is_err());
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let items: Vec<usize> = (0..100).collect();
        let (train, val) = split_validation(&items, 15, 3).unwrap();
        assert_eq!((train.len(), val.len()), (85, 15));
        let (train2, val2) = split_validation(&items, 15, 3).unwrap();
        assert_eq!((train.clone(), val.clone()), (train2, val2));
        let mut all: Vec<usize> = train.into_iter().chain(val).collect();
        all.sort();
        assert_eq!(all, items);
        assert!(matches!(split_validation(&items, 100, 3), Err(Error::Config(_))));
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.jsonl");
        let ex = parse_ae_str(
            r#"<sentences><sentence id="1"><text>good screen</text><aspectTerms>
            <aspectTerm term="screen" polarity="positive" from="5" to="11"/></aspectTerms></sentence></sentences>"#,
        )
        .unwrap();
        write_records(&path, &ex).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(read_records::<AeExample>(&path).unwrap(), ex);
    }
}
