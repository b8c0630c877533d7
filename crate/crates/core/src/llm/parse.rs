//! Splits three-step completions at the step markers and extracts the Step 3
//! payload.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::prompt::PromptKind;
use crate::conversation::Turn;
use crate::error::{Error, Result};

/// Marker prefixes. Completions often echo the demonstration style
/// (`Step 1: Comprehension Synthesis (…)`) rather than the trailing-colon form,
/// so only the stem is matched.
const STEP_STEMS: [&str; 3] = [
    "Step 1: Comprehension Synthesis",
    "Step 2: Associative Expansion",
    "Step 3: Conclusion",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Conversation { turns: Vec<Turn> },
    Dependencies { turns: BTreeSet<usize> },
    NoisyTurn { turn: Turn },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyOutput {
    pub kind: PromptKind,
    pub step1_text: String,
    pub step2_text: String,
    pub step3_text: String,
    pub payload: Payload,
}

impl StrategyOutput {
    pub fn conversation_turns(&self) -> Option<&[Turn]> {
        match &self.payload {
            Payload::Conversation { turns } => Some(turns),
            _ => None,
        }
    }
}

fn failure(msg: impl Into<String>) -> Error {
    Error::ParseFailure(msg.into())
}

/// Strips the remainder of a marker line: an optional parenthetical and colon.
fn section_body(raw: &str) -> &str {
    let mut s = raw.trim_start_matches([' ', '\t']);
    if s.starts_with('(') {
        if let Some(close) = s.find(')') {
            s = &s[close + 1..];
        }
    }
    s.trim_start_matches([' ', '\t', ':']).trim()
}

fn split_steps(text: &str) -> Result<[String; 3]> {
    let mut starts = [0usize; 3];
    let mut from = 0;
    for (k, stem) in STEP_STEMS.iter().enumerate() {
        let at = text[from..]
            .find(stem)
            .ok_or_else(|| failure(format!("missing marker `{stem}`")))?;
        starts[k] = from + at;
        from = from + at + stem.len();
    }
    let body = |k: usize| {
        let begin = starts[k] + STEP_STEMS[k].len();
        let end = if k + 1 < 3 { starts[k + 1] } else { text.len() };
        section_body(&text[begin..end]).to_string()
    };
    Ok([body(0), body(1), body(2)])
}

fn labelled_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(Query|Response)(\d+)?\s*:\s*(.*?)\s*$").unwrap())
}

fn turn_ref() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bturn\s*(\d+)").unwrap())
}

fn unquote(s: &str) -> String {
    let s = s.trim();
    let s = s
        .strip_prefix(['"', '“', '”'])
        .map(|inner| inner.strip_suffix(['"', '“', '”']).unwrap_or(inner))
        .unwrap_or(s);
    s.trim().to_string()
}

/// Parses `Query<i>:` / `Response<i>:` lines into consecutive turns `1..m`.
/// Only the final turn may lack a response.
pub fn parse_conversation_lines(region: &str) -> Result<Vec<Turn>> {
    let mut turns: Vec<Turn> = Vec::new();
    for line in region.lines() {
        let Some(caps) = labelled_line().captures(line) else {
            continue;
        };
        let Some(num) = caps.get(2) else { continue };
        let index: usize = num
            .as_str()
            .parse()
            .map_err(|_| failure(format!("bad turn number in `{line}`")))?;
        let text = unquote(&caps[3]);
        match &caps[1] {
            "Query" => {
                if index != turns.len() + 1 {
                    return Err(failure(format!(
                        "expected Query{}, found Query{index}",
                        turns.len() + 1
                    )));
                }
                if let Some(prev) = turns.last() {
                    if prev.response.is_none() {
                        return Err(failure(format!("turn {} has no response", prev.index)));
                    }
                }
                if text.is_empty() {
                    return Err(failure(format!("Query{index} is empty")));
                }
                turns.push(Turn::new(index, text, None));
            }
            _ => {
                let last = turns
                    .last_mut()
                    .filter(|t| t.index == index && t.response.is_none())
                    .ok_or_else(|| failure(format!("unexpected Response{index}")))?;
                last.response = Some(text);
            }
        }
    }
    if turns.is_empty() {
        return Err(failure("no conversation turns found"));
    }
    Ok(turns)
}

/// Turn numbers mentioned after `Necessary Turns`. `None` yields the empty set.
pub fn parse_dependency_list(region: &str) -> Result<BTreeSet<usize>> {
    let at = region
        .find("Necessary Turns")
        .ok_or_else(|| failure("missing `Necessary Turns`"))?;
    let tail = &region[at + "Necessary Turns".len()..];
    Ok(turn_ref()
        .captures_iter(tail)
        .filter_map(|c| c[1].parse().ok())
        .collect())
}

fn parse_noisy_turn(region: &str) -> Result<Turn> {
    let mut query = Vec::new();
    let mut response = Vec::new();
    for line in region.lines() {
        if let Some(caps) = labelled_line().captures(line) {
            if caps.get(2).is_some() {
                continue;
            }
            let text = unquote(&caps[3]);
            match &caps[1] {
                "Query" => query.push(text),
                _ => response.push(text),
            }
        }
    }
    match (query.as_slice(), response.as_slice()) {
        ([q], [r]) if !q.is_empty() && !r.is_empty() => {
            Ok(Turn::new(1, q.clone(), Some(r.clone())))
        }
        _ => Err(failure(format!(
            "expected one Query/Response pair, found {} queries and {} responses",
            query.len(),
            response.len()
        ))),
    }
}

pub fn parse_three_step_response(kind: PromptKind, text: &str) -> Result<StrategyOutput> {
    if text.trim().is_empty() {
        return Err(failure("empty completion"));
    }
    if !kind.is_three_step() {
        return Err(Error::UnsupportedStrategy(kind.name().to_string()));
    }
    let [step1_text, step2_text, step3_text] = split_steps(text)?;
    let payload = match kind {
        PromptKind::Deps => Payload::Dependencies {
            turns: parse_dependency_list(&step3_text)?,
        },
        PromptKind::Noi => Payload::NoisyTurn {
            turn: parse_noisy_turn(&step3_text)?,
        },
        _ => Payload::Conversation {
            turns: parse_conversation_lines(&step3_text)?,
        },
    };
    Ok(StrategyOutput {
        kind,
        step1_text,
        step2_text,
        step3_text,
        payload,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const PARA_DEMO: &str = r#"Step 1: Comprehension Synthesis (Identify key themes and intents)

Output: Theme - Travel logistics; Intent - Acquiring information about train schedules, ticketing, and station arrival time.


Step 2: Associative Expansion (Generate alternative expressions based on existing ones)

Output: Train schedule -> Queries about departure times
Ticketing -> Questions about ticket purchase requirements

Step 3: Conclusion (Paraphrase the conversation based on outputs of last two steps)

Paraphrased Conversation:

Query1: "What hour is the train scheduled to depart?"

Response1: "The train's departure is set for 18:00."

Query2: "Should I purchase a ticket beforehand?"

Response2: "It‘s recommended to get ticket in advance."

Query3: "What‘s the suggested arrival time at station?"
"#;

    const DEPS_DEMO: &str = r#"Step 1: Comprehension Synthesis (Identify key themes and intents)

Output: Theme - Paris attractions; Intent - Acquiring information about attractions and related logistics.

Step 2: Associative Expansion (Evaluate the importance of each turn in relation to the current intent)

Output: Turn1: General information about attractions; not directly relevant to ticket acquisition. Turn2: Specific information about the Louvre; more relevant to planning a visit, potentially linked to ticketing information.

Step 3: Conclusion (Select turns crucial for the current intent)

Necessary Turns:

Turn2.
"#;

    #[test]
    fn paraphrase_demonstration() {
        let out = parse_three_step_response(PromptKind::Para, PARA_DEMO).unwrap();
        let turns = out.conversation_turns().unwrap();
        assert_eq!(turns.len(), 3);
        assert_eq!(turns[0].query, "What hour is the train scheduled to depart?");
        assert_eq!(turns[1].response.as_deref(), Some("It‘s recommended to get ticket in advance."));
        assert!(turns[2].response.is_none());
        assert!(out.step1_text.starts_with("Output: Theme - Travel logistics"));
        assert!(out.step2_text.contains("Ticketing ->"));
    }

    #[test]
    fn dependency_demonstration() {
        let out = parse_three_step_response(PromptKind::Deps, DEPS_DEMO).unwrap();
        assert_eq!(
            out.payload,
            Payload::Dependencies {
                turns: BTreeSet::from([2])
            }
        );
        // Step 2 mentions Turn1 too; only the Step 3 region counts.
        assert_eq!(
            parse_dependency_list("Necessary Turns: Turn2.").unwrap(),
            BTreeSet::from([2])
        );
        assert!(parse_dependency_list("Necessary Turns: None.").unwrap().is_empty());
        assert_eq!(
            parse_dependency_list("Necessary Turns:\nTurn 1, Turn3").unwrap(),
            BTreeSet::from([1, 3])
        );
    }

    #[test]
    fn missing_marker() {
        let text = PARA_DEMO.replace("Step 2: Associative Expansion", "Later");
        assert!(matches!(
            parse_three_step_response(PromptKind::Para, &text),
            Err(Error::ParseFailure(_))
        ));
        assert!(parse_three_step_response(PromptKind::Para, "  ").is_err());
    }

    #[test]
    fn colon_form_markers() {
        let text = "Step 1: Comprehension Synthesis:\nthemes\nStep 2: Associative Expansion:\nideas\nStep 3: Conclusion:\nNecessary Turns: Turn1";
        let out = parse_three_step_response(PromptKind::Deps, text).unwrap();
        assert_eq!(out.step1_text, "themes");
        assert_eq!(out.step2_text, "ideas");
    }

    #[test]
    fn noisy_turn() {
        let text = "Step 1: Comprehension Synthesis\nx\nStep 2: Associative Expansion\ny\nStep 3: Conclusion (Introduce the new turn)\n\nNoisy Turn:\n\nQuery: \"Apart from the Sydney Opera House, did Utzon design other notable buildings?\"\n\nResponse: \"Yes, he also designed the Bagsværd Church in Denmark, known for its unique roof structure.\"\n";
        let out = parse_three_step_response(PromptKind::Noi, text).unwrap();
        let Payload::NoisyTurn { turn } = out.payload else {
            panic!()
        };
        assert!(turn.response.unwrap().contains("Bagsværd Church"));

        let two = format!("{text}\nQuery: \"again?\"\nResponse: \"yes\"");
        assert!(parse_three_step_response(PromptKind::Noi, &two).is_err());
    }

    #[test]
    fn malformed_conversations() {
        for region in [
            "Query1: a\nQuery2: b",
            "Query2: a\nResponse2: b",
            "Response1: a",
            "nothing here",
            "Query1: \"\"\nResponse1: x",
        ] {
            assert!(parse_conversation_lines(region).is_err(), "{region}");
        }
    }
}
