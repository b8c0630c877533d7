//! Deterministic offline completion backend.
//!
//! [`SyntheticBackend`] recognizes every prompt family from its task line,
//! reads the conversation back out of the prompt, and writes a well-formed
//! three-step answer with simple lexical transformations. Identical prompts
//! always produce identical bytes, which is what end-to-end reproducibility
//! tests rely on. [`MockBackend`] layers scripted replies on top.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::{Captures, Regex};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::backend::{CompletionBackend, CompletionRequest, CompletionResponse};
use super::parse::parse_conversation_lines;
use super::prompt::{extract_input_section, PromptKind};
use crate::conversation::Turn;
use crate::error::{BackendError, Error, Result};
use crate::hashing::{fnv1a64_str, salted};

const STOPWORDS: &[&str] = &[
    "about", "after", "also", "been", "before", "being", "could", "does", "from", "have",
    "into", "just", "know", "like", "many", "more", "most", "much", "only", "other", "over",
    "some", "such", "tell", "than", "that", "their", "them", "then", "there", "these", "they",
    "this", "those", "very", "want", "were", "what", "when", "where", "which", "while", "with",
    "would", "your", "please", "should",
];

const NAMES: &[&str] = &[
    "Avalon", "Brixton", "Calder", "Dorian", "Everest", "Fenwick", "Galloway", "Halden",
    "Ingram", "Juniper", "Kestrel", "Lorimer", "Marlowe", "Norwood", "Orwell", "Prescott",
];

const NOUNS: &[&str] = &[
    "harbor", "orchard", "glacier", "festival", "library", "volcano", "market", "canyon",
    "museum", "lighthouse", "vineyard", "stadium", "monastery", "railway", "observatory",
    "aquarium",
];

const SYNONYMS: &[(&str, &str)] = &[
    ("what", "which"),
    ("tell", "explain"),
    ("about", "regarding"),
    ("big", "large"),
    ("find", "locate"),
    ("show", "display"),
    ("many", "numerous"),
    ("good", "fine"),
    ("buy", "purchase"),
    ("start", "begin"),
    ("help", "assist"),
    ("need", "require"),
];

fn word_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[\p{L}\p{N}]+").unwrap())
}

fn piece_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\s*\S+|\s+").unwrap())
}

pub fn content_words(text: &str) -> BTreeSet<String> {
    word_re()
        .find_iter(text)
        .map(|m| m.as_str().to_lowercase())
        .filter(|w| w.chars().count() >= 4 && w.chars().all(char::is_alphabetic))
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

fn pick<'a>(list: &[&'a str], salt: &str, key: &str) -> &'a str {
    list[(salted(salt, key) % list.len() as u64) as usize]
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn is_entity(word: &str) -> bool {
    word.chars().all(|c| c.is_ascii_digit())
        || (word.chars().next().is_some_and(char::is_uppercase) && word.chars().count() >= 3)
}

fn replace_entities_in(text: &str, salt: &str) -> String {
    let mut first = true;
    word_re()
        .replace_all(text, |c: &Captures| {
            let w = &c[0];
            let at_start = std::mem::replace(&mut first, false);
            if w.chars().all(|ch| ch.is_ascii_digit()) {
                let n: u64 = w.parse().unwrap_or(0);
                (n + 1 + salted(salt, w) % 7).to_string()
            } else if !at_start && is_entity(w) {
                pick(NAMES, salt, w).to_string()
            } else {
                w.to_string()
            }
        })
        .into_owned()
}

fn replace_content_words(text: &str, salt: &str, limit: usize) -> String {
    let mut done = 0;
    word_re()
        .replace_all(text, |c: &Captures| {
            let w = &c[0];
            if done < limit && !content_words(w).is_empty() {
                done += 1;
                let alt = pick(NOUNS, salt, &w.to_lowercase());
                if w.chars().next().is_some_and(char::is_uppercase) {
                    capitalize(alt)
                } else {
                    alt.to_string()
                }
            } else {
                w.to_string()
            }
        })
        .into_owned()
}

fn substitute_synonyms(text: &str) -> String {
    word_re()
        .replace_all(text, |c: &Captures| {
            let w = &c[0];
            let lower = w.to_lowercase();
            match SYNONYMS.iter().find(|(from, _)| *from == lower) {
                Some((_, to)) if w.chars().next().is_some_and(char::is_uppercase) => capitalize(to),
                Some((_, to)) => to.to_string(),
                None => w.to_string(),
            }
        })
        .into_owned()
}

fn render(heading: &str, turns: &[Turn]) -> String {
    let mut out = format!("{heading}\n\n");
    for t in turns {
        out.push_str(&format!("Query{}: \"{}\"\n\n", t.index, t.query));
        if let Some(r) = &t.response {
            out.push_str(&format!("Response{}: \"{}\"\n\n", t.index, r));
        }
    }
    out
}

fn three_step(step1: &str, step2: &str, step3: &str) -> String {
    format!(
        "Step 1: Comprehension Synthesis:\n\nOutput: {step1}\n\nStep 2: Associative Expansion:\n\nOutput: {step2}\n\nStep 3: Conclusion:\n\n{step3}"
    )
}

fn theme(turns: &[Turn]) -> String {
    let words: BTreeSet<String> = turns
        .iter()
        .flat_map(|t| content_words(&t.query))
        .take(3)
        .collect();
    if words.is_empty() {
        "general inquiry".to_string()
    } else {
        words.into_iter().collect::<Vec<_>>().join(", ")
    }
}

/// Offline backend producing deterministic, parseable answers for every
/// prompt family and synthetic echo log-probabilities for scoring prompts.
#[derive(Debug, Clone, Default)]
pub struct SyntheticBackend;

impl SyntheticBackend {
    fn kind_of(prompt: &str) -> Option<PromptKind> {
        PromptKind::ALL
            .into_iter()
            .find(|k| prompt.contains(k.task_line()))
    }

    fn input_turns(prompt: &str) -> Result<Vec<Turn>> {
        let section = extract_input_section(prompt)
            .ok_or_else(|| Error::ParseFailure("no conversation in prompt".into()))?;
        parse_conversation_lines(section)
    }

    fn dependencies(turns: &[Turn]) -> String {
        let (current, history) = turns.split_last().expect("non-empty");
        let wanted = content_words(&current.query);
        let necessary: Vec<usize> = history
            .iter()
            .filter(|t| {
                let mut words = content_words(&t.query);
                words.extend(t.response.as_deref().map(content_words).unwrap_or_default());
                !words.is_disjoint(&wanted)
            })
            .map(|t| t.index)
            .collect();
        let notes: Vec<String> = history
            .iter()
            .map(|t| {
                let rel = if necessary.contains(&t.index) { "shares key terms" } else { "unrelated" };
                format!("Turn{}: {rel}.", t.index)
            })
            .collect();
        let list = if necessary.is_empty() {
            "None.".to_string()
        } else {
            let names: Vec<String> = necessary.iter().map(|i| format!("Turn{i}")).collect();
            format!("{}.", names.join(", "))
        };
        three_step(
            &format!("Theme - {}", theme(turns)),
            &if notes.is_empty() { "No earlier turns.".to_string() } else { notes.join(" ") },
            &format!("Necessary Turns:\n\n{list}"),
        )
    }

    fn entities(turns: &[Turn]) -> String {
        let has_entities = turns.iter().any(|t| {
            std::iter::once(&t.query)
                .chain(t.response.as_ref())
                .any(|s| word_re().find_iter(s).skip(1).any(|m| is_entity(m.as_str())))
        });
        let swap = |s: &str| {
            let replaced = replace_entities_in(s, "ent");
            if has_entities && replaced != s {
                replaced
            } else {
                replace_content_words(&replaced, "ent", 1)
            }
        };
        let out: Vec<Turn> = turns
            .iter()
            .map(|t| Turn::new(t.index, swap(&t.query), t.response.as_deref().map(swap)))
            .collect();
        three_step(
            &format!("Key Entities - {}", theme(turns)),
            "Replacements chosen from a fixed gazetteer.",
            &render("Entity-replaced Conversation:", &out),
        )
    }

    fn paraphrase(turns: &[Turn]) -> String {
        let out: Vec<Turn> = turns
            .iter()
            .map(|t| {
                let q = substitute_synonyms(&t.query);
                let q = if q == t.query { format!("Could you clarify: {q}") } else { q };
                let r = t.response.as_deref().map(|r| {
                    let s = substitute_synonyms(r);
                    if s == r { format!("In short, {s}") } else { s }
                });
                Turn::new(t.index, q, r)
            })
            .collect();
        three_step(
            &format!("Theme - {}", theme(turns)),
            "Alternative wording for each turn.",
            &render("Paraphrased Conversation:", &out),
        )
    }

    fn shift_intent(turns: &[Turn]) -> String {
        let last = turns.len();
        let out: Vec<Turn> = turns
            .iter()
            .map(|t| {
                if t.index == last || t.index == 1 {
                    let q = replace_content_words(&t.query, "int", usize::MAX);
                    let q = if q == t.query { format!("{q} for beginners") } else { q };
                    let r = t
                        .response
                        .as_deref()
                        .map(|r| replace_content_words(r, "int", usize::MAX));
                    Turn::new(t.index, q, r)
                } else {
                    t.clone()
                }
            })
            .collect();
        three_step(
            &format!("Theme - {}", theme(turns)),
            "New Intent - a neighbouring subject.",
            &render("Intent-Shifted Conversation:", &out),
        )
    }

    fn noisy_turn(turns: &[Turn]) -> String {
        let words: Vec<String> = turns
            .iter()
            .flat_map(|t| content_words(&t.query))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let anchor = if words.is_empty() {
            "this topic".to_string()
        } else {
            let key: String = words.join(" ");
            words[(fnv1a64_str(&key) % words.len() as u64) as usize].clone()
        };
        let alt = pick(NOUNS, "noi", &anchor);
        three_step(
            &format!("Theme - {}", theme(turns)),
            &format!("A side question about {anchor}."),
            &format!(
                "Noisy Turn:\n\nQuery: \"Apart from this, what else is known about {anchor}?\"\n\nResponse: \"Beyond that, {anchor} is also linked to the {alt} in a related context.\""
            ),
        )
    }

    /// Echo scoring: one log-probability per whitespace-led piece of the
    /// prompt; the pieces concatenate back to the prompt exactly.
    pub fn echo_logprobs(prompt: &str) -> Vec<(String, f64)> {
        piece_re()
            .find_iter(prompt)
            .map(|m| {
                let tok = m.as_str();
                let lp = -(0.1 + (fnv1a64_str(tok.trim()) % 400) as f64 / 100.0);
                (tok.to_string(), lp)
            })
            .collect()
    }
}

impl CompletionBackend for SyntheticBackend {
    fn id(&self) -> String {
        "synthetic-v1".to_string()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let prompt = &request.prompt;
        let kind = Self::kind_of(prompt)
            .ok_or_else(|| BackendError::Rejected("unrecognized prompt".into()))?;
        let logprobs = request.want_logprobs.then(|| Self::echo_logprobs(prompt));
        if kind == PromptKind::PplQa {
            let text = if request.max_tokens == 0 { String::new() } else { "I am not sure.".into() };
            return Ok(CompletionResponse { text, logprobs });
        }
        let turns = Self::input_turns(prompt).map_err(|e| BackendError::Rejected(e.to_string()))?;
        let text = match kind {
            PromptKind::Deps => Self::dependencies(&turns),
            PromptKind::Ent => Self::entities(&turns),
            PromptKind::Para => Self::paraphrase(&turns),
            PromptKind::Int => Self::shift_intent(&turns),
            PromptKind::Noi => Self::noisy_turn(&turns),
            PromptKind::PplQa => unreachable!(),
        };
        Ok(CompletionResponse { text, logprobs })
    }
}

#[derive(Debug, Deserialize)]
struct ScriptEntry {
    #[serde(default)]
    prompt: Option<String>,
    #[serde(default)]
    prompt_sha256: Option<String>,
    text: String,
    #[serde(default)]
    logprobs: Option<Vec<(String, f64)>>,
}

/// Scripted replies keyed by prompt digest, falling back to
/// [`SyntheticBackend`] for anything unscripted.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    scripted: HashMap<String, CompletionResponse>,
    fallback: SyntheticBackend,
}

pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn script(&mut self, prompt: &str, response: CompletionResponse) {
        self.scripted.insert(prompt_digest(prompt), response);
    }

    /// Loads `completions.jsonl` from `dir` when present. Each line carries
    /// `text`, optional `logprobs`, and either `prompt` or `prompt_sha256`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut mock = MockBackend::new();
        let path = dir.join("completions.jsonl");
        if !path.exists() {
            return Ok(mock);
        }
        for (n, line) in fs::read_to_string(&path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| Error::ConfigInvalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
            let key = match (entry.prompt, entry.prompt_sha256) {
                (Some(p), _) => prompt_digest(&p),
                (None, Some(h)) => h.to_lowercase(),
                (None, None) => {
                    return Err(Error::ConfigInvalid(format!(
                        "{}:{}: entry needs `prompt` or `prompt_sha256`",
                        path.display(),
                        n + 1
                    )))
                }
            };
            mock.scripted.insert(
                key,
                CompletionResponse {
                    text: entry.text,
                    logprobs: entry.logprobs,
                },
            );
        }
        Ok(mock)
    }

    pub fn scripted_len(&self) -> usize {
        self.scripted.len()
    }
}

impl CompletionBackend for MockBackend {
    fn id(&self) -> String {
        // Scripted replies change answers, so they are part of the identity.
        let mut keys: Vec<&String> = self.scripted.keys().collect();
        keys.sort();
        let mut h = Sha256::new();
        for k in keys {
            h.update(k.as_bytes());
            h.update(self.scripted[k].text.as_bytes());
        }
        format!("mock-{}", &hex::encode(h.finalize())[..16])
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        match self.scripted.get(&prompt_digest(&request.prompt)) {
            Some(r) => Ok(r.clone()),
            None => self.fallback.complete(request),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::parse::{parse_three_step_response, Payload};
    use crate::llm::prompt::build_prompt;

    fn turns() -> Vec<Turn> {
        vec![
            Turn::new(1, "How long is the Golden Gate Bridge?", Some("It is about 1.7 miles long.".into())),
            Turn::new(2, "When was the bridge opened?", Some("It opened in May 1937.".into())),
            Turn::new(3, "Who designed the bridge?", None),
        ]
    }

    fn ask(kind: PromptKind, t: &[Turn]) -> String {
        let prompt = build_prompt(kind, t).unwrap();
        SyntheticBackend
            .complete(&CompletionRequest {
                prompt,
                max_tokens: 512,
                temperature: 0.0,
                want_logprobs: false,
            })
            .unwrap()
            .text
    }

    #[test]
    fn every_family_parses() {
        for kind in [PromptKind::Ent, PromptKind::Para, PromptKind::Int] {
            let text = ask(kind, &turns());
            let out = parse_three_step_response(kind, &text).unwrap();
            let got = out.conversation_turns().unwrap();
            assert_eq!(got.len(), 3, "{kind}");
            assert_ne!(got, &turns()[..], "{kind} changed nothing");
        }
        let out = parse_three_step_response(PromptKind::Noi, &ask(PromptKind::Noi, &turns())).unwrap();
        assert!(matches!(out.payload, Payload::NoisyTurn { .. }));
    }

    #[test]
    fn dependencies_follow_shared_words() {
        let text = ask(PromptKind::Deps, &turns());
        let out = parse_three_step_response(PromptKind::Deps, &text).unwrap();
        assert_eq!(out.payload, Payload::Dependencies { turns: BTreeSet::from([1, 2]) });

        let text = ask(PromptKind::Deps, &turns()[..1]);
        let out = parse_three_step_response(PromptKind::Deps, &text).unwrap();
        assert_eq!(out.payload, Payload::Dependencies { turns: BTreeSet::new() });
    }

    #[test]
    fn entity_swap_is_consistent() {
        let text = ask(PromptKind::Ent, &turns());
        assert!(!text.contains("Golden Gate"));
        assert!(!text.contains("1937"));
    }

    #[test]
    fn echo_pieces_rebuild_prompt() {
        let prompt = build_prompt(PromptKind::PplQa, &turns()).unwrap() + "It was Joseph Strauss.";
        let lps = SyntheticBackend::echo_logprobs(&prompt);
        let joined: String = lps.iter().map(|(t, _)| t.as_str()).collect();
        assert_eq!(joined, prompt);
        assert!(lps.iter().all(|(_, lp)| (-4.1..=-0.1).contains(lp)));
    }

    #[test]
    fn scripted_overrides_win() {
        let prompt = build_prompt(PromptKind::Para, &turns()).unwrap();
        let mut mock = MockBackend::new();
        let plain_id = mock.id();
        mock.script(&prompt, CompletionResponse { text: "scripted".into(), logprobs: None });
        assert_ne!(mock.id(), plain_id);
        let req = CompletionRequest { prompt, max_tokens: 1, temperature: 0.0, want_logprobs: false };
        assert_eq!(mock.complete(&req).unwrap().text, "scripted");
    }

    #[test]
    fn script_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("completions.jsonl"),
            "{\"prompt\":\"hi\",\"text\":\"a\"}\n\n{\"prompt_sha256\":\"ABC\",\"text\":\"b\"}\n",
        )
        .unwrap();
        let mock = MockBackend::from_dir(dir.path()).unwrap();
        assert_eq!(mock.scripted_len(), 2);
        fs::write(dir.path().join("completions.jsonl"), "{\"text\":\"a\"}\n").unwrap();
        assert!(MockBackend::from_dir(dir.path()).is_err());
    }
}
