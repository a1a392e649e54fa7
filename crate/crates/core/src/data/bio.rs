//! Character-span ↔ BIO tag alignment.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::crf::{Tag, TagSequence};
use crate::encoder::Token;
use crate::error::{Error, Result};

/// Half-open character range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    fn overlaps_token(&self, t: &Token) -> bool {
        t.start < self.end && self.start < t.end
    }
}

/// Inclusive token range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

/// Tags every token overlapping an aspect: `B` for the first, `I` for the
/// rest. Spans that cut through a token are widened to whole tokens.
pub fn bio_encode(tokens: &[Token], aspects: &[CharSpan]) -> Result<TagSequence> {
    let mut sorted = aspects.to_vec();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(Error::Data(format!(
                "overlapping aspect spans {}..{} and {}..{}",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    let mut tags = vec![Tag::O; tokens.len()];
    for span in &sorted {
        let covered: Vec<usize> = (0..tokens.len()).filter(|&i| span.overlaps_token(&tokens[i])).collect();
        let (Some(&first), Some(&last)) = (covered.first(), covered.last()) else {
            return Err(Error::Data(format!(
                "aspect span {}..{} covers no token",
                span.start, span.end
            )));
        };
        if tokens[first].start != span.start || tokens[last].end != span.end {
            warn!(
                "aspect span {}..{} snapped to token boundaries {}..{}",
                span.start, span.end, tokens[first].start, tokens[last].end
            );
        }
        if tags[first] != Tag::O {
            return Err(Error::Data(format!(
                "aspect span {}..{} shares a token with another aspect",
                span.start, span.end
            )));
        }
        tags[first] = Tag::B;
        for t in &mut tags[first + 1..=last] {
            *t = Tag::I;
        }
    }
    Ok(TagSequence(tags))
}

/// Token runs of the form `B I*`. A stray `I` opens a new run.
pub fn tag_spans(tags: &[usize]) -> Vec<TokenSpan> {
    let (b, i) = (Tag::B.index(), Tag::I.index());
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (pos, &t) in tags.iter().enumerate() {
        if t == b || (t == i && open.is_none()) {
            if let Some(s) = open.take() {
                spans.push(TokenSpan { start: s, end: pos - 1 });
            }
            open = Some(pos);
        } else if t != i {
            if let Some(s) = open.take() {
                spans.push(TokenSpan { start: s, end: pos - 1 });
            }
        }
    }
    if let Some(s) = open {
        spans.push(TokenSpan { start: s, end: tags.len() - 1 });
    }
    spans
}

/// Character spans of the aspects encoded in `tags`.
pub fn bio_decode(tags: &TagSequence, tokens: &[Token]) -> Vec<CharSpan> {
    tag_spans(&tags.indices())
        .into_iter()
        .map(|s| CharSpan::new(tokens[s.start].start, tokens[s.end].end))
        .collect()
}
