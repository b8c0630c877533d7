//! Conversation data model and the line-delimited corpus record format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One query with its (optional) response. `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

impl Turn {
    pub fn new(index: usize, query: impl Into<String>, response: Option<String>) -> Self {
        Turn {
            index,
            query: query.into(),
            response,
        }
    }

    fn check(&self) -> Result<()> {
        if self.index == 0 {
            return Err(Error::MalformedRecord("turn index must be >= 1".into()));
        }
        if self.query.trim().is_empty() {
            return Err(Error::MalformedRecord(format!(
                "turn {} has an empty query",
                self.index
            )));
        }
        Ok(())
    }
}

/// A conversation `C_n`: historical turns `1..n-1` followed by the current turn `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    id: String,
    turns: Vec<Turn>,
    gold_passage_id: Option<String>,
}

impl Conversation {
    pub fn new(
        id: impl Into<String>,
        turns: Vec<Turn>,
        gold_passage_id: Option<String>,
    ) -> Result<Self> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(Error::MalformedRecord("missing conversation id".into()));
        }
        if turns.is_empty() {
            return Err(Error::MalformedRecord(format!("{id}: empty turn list")));
        }
        let n = turns.len();
        for (pos, turn) in turns.iter().enumerate() {
            turn.check()?;
            if turn.index != pos + 1 {
                return Err(Error::MalformedRecord(format!(
                    "{id}: expected turn index {}, found {}",
                    pos + 1,
                    turn.index
                )));
            }
            if turn.index < n && turn.response.is_none() {
                return Err(Error::MalformedRecord(format!(
                    "{id}: historical turn {} has no response",
                    turn.index
                )));
            }
        }
        Ok(Conversation {
            id,
            turns,
            gold_passage_id,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn gold_passage_id(&self) -> Option<&str> {
        self.gold_passage_id.as_deref()
    }

    /// Total number of turns, including the current one.
    pub fn n(&self) -> usize {
        self.turns.len()
    }

    /// Historical turns `T_h`.
    pub fn history(&self) -> &[Turn] {
        &self.turns[..self.turns.len() - 1]
    }

    pub fn current(&self) -> &Turn {
        self.turns.last().expect("conversation has at least one turn")
    }

    pub fn turn(&self, index: usize) -> Option<&Turn> {
        index.checked_sub(1).and_then(|i| self.turns.get(i))
    }

    pub fn to_record(&self) -> ConversationRecord {
        ConversationRecord {
            id: self.id.clone(),
            turns: self
                .turns
                .iter()
                .map(|t| TurnRecord {
                    index: Some(t.index),
                    query: t.query.clone(),
                    response: t.response.clone(),
                })
                .collect(),
            gold_passage_id: self.gold_passage_id.clone(),
        }
    }

    /// One JSON line in the corpus format.
    pub fn serialize(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("record serialization is infallible")
    }
}

/// On-disk turn shape. `index` is optional; when present it must match the position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub id: String,
    pub turns: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_passage_id: Option<String>,
}

impl TryFrom<ConversationRecord> for Conversation {
    type Error = Error;

    fn try_from(record: ConversationRecord) -> Result<Self> {
        let turns = record
            .turns
            .into_iter()
            .enumerate()
            .map(|(pos, t)| Turn {
                index: t.index.unwrap_or(pos + 1),
                query: t.query,
                response: t.response,
            })
            .collect();
        Conversation::new(record.id, turns, record.gold_passage_id)
    }
}

/// Parses one corpus line into a validated conversation.
pub fn parse_conversation(line: &str) -> Result<Conversation> {
    let record: ConversationRecord = serde_json::from_str(line.trim())
        .map_err(|e| Error::MalformedRecord(e.to_string()))?;
    Conversation::try_from(record)
}

/// Augmentation strategy tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Tom,
    Tum,
    Reo,
    Noi,
    Para,
    Ent,
    Int,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Tom,
        Strategy::Tum,
        Strategy::Reo,
        Strategy::Noi,
        Strategy::Para,
        Strategy::Ent,
        Strategy::Int,
    ];
    pub const POSITIVE: [Strategy; 5] = [
        Strategy::Tom,
        Strategy::Tum,
        Strategy::Reo,
        Strategy::Noi,
        Strategy::Para,
    ];
    pub const NEGATIVE: [Strategy; 2] = [Strategy::Ent, Strategy::Int];

    pub fn polarity(self) -> Polarity {
        match self {
            Strategy::Ent | Strategy::Int => Polarity::Negative,
            _ => Polarity::Positive,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Tom => "tom",
            Strategy::Tum => "tum",
            Strategy::Reo => "reo",
            Strategy::Noi => "noi",
            Strategy::Para => "para",
            Strategy::Ent => "ent",
            Strategy::Int => "int",
        }
    }

    /// Whether producing this strategy needs a completion backend.
    pub fn needs_llm(self) -> bool {
        matches!(
            self,
            Strategy::Noi | Strategy::Para | Strategy::Ent | Strategy::Int
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::UnsupportedStrategy(s.to_string()))
    }
}

/// A strategy-tagged variant of a source conversation.
///
/// `source_positions[k]` is the source turn index that output turn `k + 1` came
/// from, or `None` for a turn that has no source counterpart (the inserted noisy
/// turn, or LLM rewrites that do not track turn identity).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedConversation {
    pub source_id: String,
    pub strategy: Strategy,
    pub polarity: Polarity,
    pub turns: Vec<Turn>,
    pub source_positions: Vec<Option<usize>>,
    #[serde(default)]
    pub degenerate_flags: Vec<String>,
}

impl AugmentedConversation {
    pub fn new(
        source_id: impl Into<String>,
        strategy: Strategy,
        turns: Vec<Turn>,
        source_positions: Vec<Option<usize>>,
    ) -> Self {
        debug_assert_eq!(turns.len(), source_positions.len());
        AugmentedConversation {
            source_id: source_id.into(),
            strategy,
            polarity: strategy.polarity(),
            turns,
            source_positions,
            degenerate_flags: Vec::new(),
        }
    }

    /// Variant that keeps turn identity one-to-one with the source.
    pub fn aligned(conv: &Conversation, strategy: Strategy, turns: Vec<Turn>) -> Self {
        let positions = (1..=turns.len()).map(Some).collect();
        AugmentedConversation::new(conv.id(), strategy, turns, positions)
    }

    pub fn flag(&mut self, flag: impl Into<String>) {
        self.degenerate_flags.push(flag.into());
    }

    pub fn is_degenerate(&self) -> bool {
        !self.degenerate_flags.is_empty()
    }

    pub fn history_len(&self) -> usize {
        self.turns.len().saturating_sub(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_record() {
        let conv = parse_conversation(
            r#"{"id":"c1","turns":[{"query":"a","response":"b"},{"query":"c","response":"d"},{"query":"e"}]}"#,
        )
        .unwrap();
        assert_eq!(conv.n(), 3);
        assert_eq!(conv.history().len(), 2);
        assert_eq!(conv.current().query, "e");
    }

    #[test]
    fn index_gap_is_malformed() {
        let err = parse_conversation(
            r#"{"id":"c1","turns":[{"index":1,"query":"a","response":"b"},{"index":3,"query":"c"}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MalformedRecord(_)));
    }

    #[test]
    fn rejects_missing_pieces() {
        for line in [
            r#"{"turns":[{"query":"a"}]}"#,
            r#"{"id":"x","turns":[]}"#,
            r#"{"id":"x","turns":[{"query":"   "}]}"#,
            r#"{"id":"x","turns":[{"query":"a"},{"query":"b"}]}"#,
            r#"{"id":"","turns":[{"query":"a"}]}"#,
            "not json",
        ] {
            assert!(
                matches!(parse_conversation(line), Err(Error::MalformedRecord(_))),
                "{line}"
            );
        }
    }

    #[test]
    fn current_turn_may_carry_answer() {
        let conv =
            parse_conversation(r#"{"id":"x","turns":[{"query":"a","response":"b"}]}"#).unwrap();
        assert_eq!(conv.current().response.as_deref(), Some("b"));
    }

    #[test]
    fn polarity_follows_strategy() {
        for s in Strategy::ALL {
            let expected = if Strategy::NEGATIVE.contains(&s) {
                Polarity::Negative
            } else {
                Polarity::Positive
            };
            assert_eq!(s.polarity(), expected);
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("deps".parse::<Strategy>().is_err());
    }
}
