//! SemEval 2014 (`aspectTerms`) and 2016 (`Opinions`) XML readers.

use std::path::Path;

use roxmltree::{Document, Node};

use super::bio::{bio_encode, CharSpan};
use super::{AeExample, AscExample, Polarity};
use crate::encoder::tokenize;
use crate::error::{Error, Result};

struct RawAspect {
    span: CharSpan,
    term: String,
    polarity: Option<String>,
    line: u32,
}

struct RawSentence {
    id: String,
    text: String,
    aspects: Vec<RawAspect>,
}

fn line_of(doc: &Document<'_>, node: Node<'_, '_>) -> u32 {
    doc.text_pos_at(node.range().start).row
}

fn ingestion(line: u32, message: impl Into<String>) -> Error {
    Error::Ingestion {
        line: Some(line),
        message: message.into(),
    }
}

fn offset(doc: &Document<'_>, node: Node<'_, '_>, attr: &str) -> Result<usize> {
    let line = line_of(doc, node);
    node.attribute(attr)
        .ok_or_else(|| ingestion(line, format!("<{}> lacks `{attr}`", node.tag_name().name())))?
        .trim()
        .parse()
        .map_err(|_| ingestion(line, format!("`{attr}` is not an offset")))
}

fn read_sentences(xml: &str) -> Result<Vec<RawSentence>> {
    let doc = Document::parse(xml).map_err(|e| Error::Ingestion {
        line: Some(e.pos().row),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for sent in doc.descendants().filter(|n| n.has_tag_name("sentence")) {
        let line = line_of(&doc, sent);
        let id = sent.attribute("id").unwrap_or_default().to_string();
        let text = sent
            .children()
            .find(|n| n.has_tag_name("text"))
            .ok_or_else(|| ingestion(line, format!("sentence {id:?} has no <text>")))?
            .text()
            .unwrap_or_default()
            .to_string();
        let len = text.chars().count();
        let mut aspects = Vec::new();
        let terms = sent
            .descendants()
            .filter(|n| n.has_tag_name("aspectTerm") || n.has_tag_name("Opinion"));
        for node in terms {
            let term = node
                .attribute("term")
                .or_else(|| node.attribute("target"))
                .unwrap_or_default()
                .to_string();
            if node.has_tag_name("Opinion") && (term == "NULL" || node.attribute("target").is_none()) {
                continue;
            }
            let span = CharSpan::new(offset(&doc, node, "from")?, offset(&doc, node, "to")?);
            if span.start > span.end || span.end > len {
                return Err(Error::Alignment {
                    start: span.start,
                    end: span.end,
                    len,
                    text,
                });
            }
            aspects.push(RawAspect {
                span,
                term,
                polarity: node.attribute("polarity").map(str::to_string),
                line: line_of(&doc, node),
            });
        }
        out.push(RawSentence { id, text, aspects });
    }
    Ok(out)
}

/// One example per sentence; sentences without aspects are kept (all `O`).
/// Repeated spans within a sentence (several opinions on one target) are
/// counted once.
pub fn parse_ae_str(xml: &str) -> Result<Vec<AeExample>> {
    read_sentences(xml)?
        .into_iter()
        .map(|s| {
            let tokens = tokenize(&s.text);
            let mut spans: Vec<CharSpan> = s.aspects.iter().map(|a| a.span).filter(|sp| sp.start < sp.end).collect();
            spans.sort();
            spans.dedup();
            let tags = bio_encode(&tokens, &spans).map_err(|e| match e {
                Error::Data(m) => Error::Data(format!("sentence {:?}: {m}", s.id)),
                other => other,
            })?;
            Ok(AeExample {
                id: s.id,
                text: s.text,
                tokens,
                aspects: spans,
                tags,
            })
        })
        .collect()
}

/// One example per (sentence, aspect) pair; `conflict` pairs are dropped.
pub fn parse_asc_str(xml: &str) -> Result<Vec<AscExample>> {
    let mut out = Vec::new();
    for s in read_sentences(xml)? {
        let tokens = tokenize(&s.text);
        for a in s.aspects {
            let raw = a
                .polarity
                .ok_or_else(|| ingestion(a.line, "aspect without polarity"))?;
            let polarity = match raw.to_ascii_lowercase().as_str() {
                "positive" => Polarity::Positive,
                "negative" => Polarity::Negative,
                "neutral" => Polarity::Neutral,
                "conflict" => continue,
                other => return Err(ingestion(a.line, format!("unknown polarity {other:?}"))),
            };
            out.push(AscExample {
                id: s.id.clone(),
                text: s.text.clone(),
                tokens: tokens.clone(),
                aspect_tokens: tokenize(&a.term),
                aspect: a.term,
                aspect_span: a.span,
                polarity,
            });
        }
    }
    Ok(out)
}

pub fn parse_semeval_ae(path: &Path) -> Result<Vec<AeExample>> {
    parse_ae_str(&std::fs::read_to_string(path)?)
}

pub fn parse_semeval_asc(path: &Path) -> Result<Vec<AscExample>> {
    parse_asc_str(&std::fs::read_to_string(path)?)
}
