//! Templated review sentences with known aspects and polarities.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Polarity;

pub const SYNTHETIC_SIZE: usize = 50;

const ASPECTS: &[&str] = &[
    "battery",
    "screen",
    "keyboard",
    "battery life",
    "price",
    "touch pad",
    "hard drive",
    "speakers",
    "customer service",
    "design",
    "graphics card",
    "fan",
];

const POSITIVE: &[&str] = &["great", "excellent", "amazing", "fantastic"];
const NEGATIVE: &[&str] = &["terrible", "awful", "disappointing", "horrible"];
const NEUTRAL: &[&str] = &["average", "okay", "standard", "ordinary"];
const FILLER: &[&str] = &[
    "We bought it last week.",
    "My brother recommended this one.",
    "It arrived on a Tuesday.",
    "I use it every day at work.",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthAspect {
    pub term: String,
    pub from: usize,
    pub to: usize,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSentence {
    pub id: String,
    pub text: String,
    pub aspects: Vec<SynthAspect>,
}

/// Builds text piece by piece, recording character offsets of aspects.
struct Builder {
    text: String,
    aspects: Vec<SynthAspect>,
}

impl Builder {
    fn new() -> Self {
        Self {
            text: String::new(),
            aspects: Vec::new(),
        }
    }

    fn lit(&mut self, s: &str) -> &mut Self {
        self.text.push_str(s);
        self
    }

    fn aspect(&mut self, term: &str, polarity: Polarity) -> &mut Self {
        let from = self.text.chars().count();
        self.text.push_str(term);
        self.aspects.push(SynthAspect {
            term: term.to_string(),
            from,
            to: from + term.chars().count(),
            polarity,
        });
        self
    }
}

fn adjective<R: Rng>(rng: &mut R) -> (&'static str, Polarity) {
    let polarity = *Polarity::ALL.choose(rng).expect("non-empty");
    let pool = match polarity {
        Polarity::Positive => POSITIVE,
        Polarity::Negative => NEGATIVE,
        Polarity::Neutral => NEUTRAL,
    };
    (pool.choose(rng).expect("non-empty"), polarity)
}

fn two_aspects<R: Rng>(rng: &mut R) -> (&'static str, &'static str) {
    let picked: Vec<&&str> = ASPECTS.choose_multiple(rng, 2).collect();
    (picked[0], picked[1])
}

/// `n` sentences from a fixed template set, deterministic in `seed`.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<SynthSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut b = Builder::new();
            match rng.random_range(0..6) {
                0 => {
                    let a = ASPECTS.choose(&mut rng).expect("non-empty");
                    let (adj, pol) = adjective(&mut rng);
                    b.lit("The ").aspect(a, pol).lit(" is ").lit(adj).lit(".");
                }
                1 => {
                    let a = ASPECTS.choose(&mut rng).expect("non-empty");
                    let (adj, pol) = adjective(&mut rng);
                    b.lit("I think the ").aspect(a, pol).lit(" is really ").lit(adj).lit(".");
                }
                2 => {
                    let (a1, a2) = two_aspects(&mut rng);
                    let (adj1, p1) = adjective(&mut rng);
                    let (adj2, p2) = adjective(&mut rng);
                    b.lit("The ")
                        .aspect(a1, p1)
                        .lit(" is ")
                        .lit(adj1)
                        .lit(" but the ")
                        .aspect(a2, p2)
                        .lit(" is ")
                        .lit(adj2)
                        .lit(".");
                }
                3 => {
                    let (a1, a2) = two_aspects(&mut rng);
                    let (adj1, p1) = adjective(&mut rng);
                    let (adj2, p2) = adjective(&mut rng);
                    b.lit("Really ")
                        .lit(adj1)
                        .lit(" ")
                        .aspect(a1, p1)
                        .lit(" and a ")
                        .lit(adj2)
                        .lit(" ")
                        .aspect(a2, p2)
                        .lit(".");
                }
                4 => {
                    let a = ASPECTS.choose(&mut rng).expect("non-empty");
                    let (adj, pol) = adjective(&mut rng);
                    b.lit("Overall an ").lit(adj).lit(" laptop, especially the ").aspect(a, pol).lit("!");
                }
                _ => {
                    b.lit(FILLER.choose(&mut rng).expect("non-empty"));
                }
            }
            SynthSentence {
                id: format!("synth-{seed}-{i}"),
                text: b.text,
                aspects: b.aspects,
            }
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// SemEval-2014 style XML for the given sentences.
pub fn to_semeval_xml(sentences: &[SynthSentence]) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\" standalone=\"yes\"?>\n<sentences>\n");
    for s in sentences {
        out.push_str(&format!("    <sentence id=\"{}\">\n        <text>{}</text>\n", escape(&s.id), escape(&s.text)));
        if !s.aspects.is_empty() {
            out.push_str("        <aspectTerms>\n");
            for a in &s.aspects {
                out.push_str(&format!(
                    "            <aspectTerm term=\"{}\" polarity=\"{}\" from=\"{}\" to=\"{}\"/>\n",
                    escape(&a.term),
                    a.polarity,
                    a.from,
                    a.to
                ));
            }
            out.push_str("        </aspectTerms>\n");
        }
        out.push_str("    </sentence>\n");
    }
    out.push_str("</sentences>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_ae_str, parse_asc_str};

    #[test]
    fn deterministic_and_parseable() {
        let a = synthetic_corpus(SYNTHETIC_SIZE, 1);
        assert_eq!(a, synthetic_corpus(SYNTHETIC_SIZE, 1));
        assert_ne!(a, synthetic_corpus(SYNTHETIC_SIZE, 2));
        let xml = to_semeval_xml(&a);
        let ae = parse_ae_str(&xml).unwrap();
        assert_eq!(ae.len(), SYNTHETIC_SIZE);
        let n_aspects: usize = a.iter().map(|s| s.aspects.len()).sum();
        assert_eq!(ae.iter().map(|e| e.aspects.len()).sum::<usize>(), n_aspects);
        assert_eq!(parse_asc_str(&xml).unwrap().len(), n_aspects);
        for s in &a {
            let chars: Vec<char> = s.text.chars().collect();
            for asp in &s.aspects {
                assert_eq!(chars[asp.from..asp.to].iter().collect::<String>(), asp.term);
            }
        }
    }
}
