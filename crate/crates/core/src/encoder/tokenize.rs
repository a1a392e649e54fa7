use serde::{Deserialize, Serialize};

/// A surface token with its character (not byte) offsets in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace; every punctuation or symbol character becomes its
/// own token and alphanumeric runs stay together.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut current_start = 0;
    let flush = |tokens: &mut Vec<Token>, current: &mut String, start: usize, end: usize| {
        if !current.is_empty() {
            tokens.push(Token {
                text: std::mem::take(current),
                start,
                end,
            });
        }
    };
    for (i, ch) in text.chars().enumerate() {
        if ch.is_alphanumeric() {
            if current.is_empty() {
                current_start = i;
            }
            current.push(ch);
        } else {
            flush(&mut tokens, &mut current, current_start, i);
            if !ch.is_whitespace() {
                tokens.push(Token {
                    text: ch.to_string(),
                    start: i,
                    end: i + 1,
                });
            }
        }
    }
    let len = text.chars().count();
    flush(&mut tokens, &mut current, current_start, len);
    tokens
}

/// Vocabulary key of a surface token.
pub fn normalize(token: &str) -> String {
    token.to_lowercase()
}
