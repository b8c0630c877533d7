//! Word-level segmentation and reverse-chronological sequence assembly.

use serde::{Deserialize, Serialize};

use crate::conversation::{Conversation, Turn};

pub const TOKEN_MASK: &str = "[token_mask]";
pub const TURN_MASK: &str = "[turn_mask]";
pub const BEGIN: &str = "[CLS]";
pub const END: &str = "[SEP]";

const ATOMIC: [&str; 4] = [TOKEN_MASK, TURN_MASK, BEGIN, END];

/// Splits text into runs of alphanumeric characters and single punctuation
/// characters. Whitespace separates tokens and is dropped. Mask and sentinel
/// literals are kept whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c.is_whitespace() {
            rest = &rest[c.len_utf8()..];
            continue;
        }
        if let Some(lit) = ATOMIC.iter().find(|lit| rest.starts_with(**lit)) {
            tokens.push((*lit).to_string());
            rest = &rest[lit.len()..];
            continue;
        }
        if c.is_alphanumeric() {
            let end = rest
                .char_indices()
                .find(|(_, ch)| !ch.is_alphanumeric())
                .map_or(rest.len(), |(i, _)| i);
            tokens.push(rest[..end].to_string());
            rest = &rest[end..];
        } else {
            tokens.push(c.to_string());
            rest = &rest[c.len_utf8()..];
        }
    }
    tokens
}

/// Joins tokens with single spaces; `tokenize(detokenize(t)) == t` for any
/// output of `tokenize`.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn is_sentinel(token: &str) -> bool {
    token == BEGIN || token == END
}

/// `[CLS] q_n r_{n-1} q_{n-1} ... r_1 q_1 [SEP]`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    /// Number of non-sentinel tokens.
    pub token_count: usize,
    #[serde(default)]
    pub truncated: bool,
}

impl TokenSequence {
    pub fn body(&self) -> &[String] {
        &self.tokens[1..self.tokens.len() - 1]
    }
}

pub fn concat_sequence(conv: &Conversation, max_tokens: usize) -> TokenSequence {
    concat_turns(conv.turns(), max_tokens)
}

/// Sequence assembly over a raw turn list whose last element is the current
/// turn. The current turn's response never participates. Oldest content is
/// dropped first once `max_tokens` (sentinels included) is reached.
pub fn concat_turns(turns: &[Turn], max_tokens: usize) -> TokenSequence {
    assert!(max_tokens >= 3, "max_tokens must leave room for content");
    let budget = max_tokens - 2;
    let mut body: Vec<String> = Vec::new();
    let mut truncated = false;

    let mut push = |text: &str, body: &mut Vec<String>| {
        for tok in tokenize(text) {
            if body.len() == budget {
                truncated = true;
                return;
            }
            body.push(tok);
        }
    };

    if let Some((current, history)) = turns.split_last() {
        push(&current.query, &mut body);
        for turn in history.iter().rev() {
            if let Some(response) = &turn.response {
                push(response, &mut body);
            }
            push(&turn.query, &mut body);
        }
    }

    let token_count = body.len();
    let mut tokens = Vec::with_capacity(token_count + 2);
    tokens.push(BEGIN.to_string());
    tokens.extend(body);
    tokens.push(END.to_string());
    TokenSequence {
        tokens,
        token_count,
        truncated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversation::parse_conversation;

    fn seq(tokens: &[&str]) -> Vec<String> {
        tokens.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn segmentation() {
        assert_eq!(
            tokenize("What's the 1.7 miles?"),
            seq(&["What", "'", "s", "the", "1", ".", "7", "miles", "?"])
        );
        assert_eq!(
            tokenize("a [token_mask] b[turn_mask]"),
            seq(&["a", TOKEN_MASK, "b", TURN_MASK])
        );
        assert_eq!(tokenize("Bagsværd  Church"), seq(&["Bagsværd", "Church"]));
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn single_turn_sequence() {
        let conv = parse_conversation(r#"{"id":"x","turns":[{"query":"a b"}]}"#).unwrap();
        let s = concat_sequence(&conv, usize::MAX);
        assert_eq!(s.tokens, seq(&[BEGIN, "a", "b", END]));
        assert_eq!(s.token_count, 2);
        assert!(!s.truncated);
    }

    #[test]
    fn reverse_chronological_interleaving() {
        let conv = parse_conversation(
            r#"{"id":"x","turns":[{"query":"x","response":"y"},{"query":"z"}]}"#,
        )
        .unwrap();
        assert_eq!(
            concat_sequence(&conv, usize::MAX).tokens,
            seq(&[BEGIN, "z", "y", "x", END])
        );
        let cut = concat_sequence(&conv, 4);
        assert_eq!(cut.tokens, seq(&[BEGIN, "z", "y", END]));
        assert!(cut.truncated);
        assert_eq!(cut.token_count, 2);
    }

    #[test]
    fn current_answer_is_excluded() {
        let conv = parse_conversation(
            r#"{"id":"x","turns":[{"query":"q1","response":"r1"},{"query":"q2","response":"r2"}]}"#,
        )
        .unwrap();
        assert_eq!(
            concat_sequence(&conv, usize::MAX).tokens,
            seq(&[BEGIN, "q2", "r1", "q1", END])
        );
    }
}
