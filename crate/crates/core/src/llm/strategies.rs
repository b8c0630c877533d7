//! LLM-backed augmentation strategies and dependency identification.

use serde::{Deserialize, Serialize};

use super::client::LlmClient;
use super::parse::{parse_three_step_response, Payload};
use super::prompt::{build_prompt, PromptKind};
use crate::conversation::{AugmentedConversation, Conversation, Strategy, Turn};
use crate::error::{Error, Result};
use crate::graph::DependencyGraph;

pub const FLAG_ZERO_DIVERSITY: &str = "zero_diversity";

/// Dependency graph plus the turns whose answer could not be parsed and were
/// given full-prefix dependencies instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyOutcome {
    pub graph: DependencyGraph,
    pub fallback_turns: Vec<usize>,
}

/// Asks once per turn `i = 2..n` which earlier turns `q_i` needs and records
/// `(j, i)` for each. Mentions of `j >= i` or `j == 0` are dropped.
pub fn identify_dependencies(conv: &Conversation, client: &LlmClient) -> Result<DependencyOutcome> {
    let mut graph = DependencyGraph::for_conversation(conv);
    let mut fallback_turns = Vec::new();
    for i in 2..=conv.n() {
        let prompt = build_prompt(PromptKind::Deps, &conv.turns()[..i])?;
        let reply = client.complete(&prompt, false)?;
        let needed: Vec<usize> = match parse_three_step_response(PromptKind::Deps, &reply.text) {
            Ok(out) => match out.payload {
                Payload::Dependencies { turns } => turns.into_iter().filter(|&j| j >= 1 && j < i).collect(),
                _ => unreachable!("deps prompt yields a dependency payload"),
            },
            Err(Error::ParseFailure(reason)) => {
                log::debug!("{}: turn {i} dependency parse failed: {reason}", conv.id());
                fallback_turns.push(i);
                (1..i).collect()
            }
            Err(e) => return Err(e),
        };
        for j in needed {
            graph.add_edge(j, i)?;
        }
    }
    Ok(DependencyOutcome { graph, fallback_turns })
}

fn rewrite(conv: &Conversation, client: &LlmClient, strategy: Strategy) -> Result<AugmentedConversation> {
    let kind = PromptKind::for_strategy(strategy)?;
    let prompt = build_prompt(kind, conv.turns())?;
    let reply = client.complete(&prompt, false)?;
    let parsed = parse_three_step_response(kind, &reply.text)?;
    let turns = parsed
        .conversation_turns()
        .ok_or_else(|| Error::ParseFailure("expected a conversation".into()))?
        .to_vec();
    if turns.len() != conv.n() {
        return Err(Error::ParseFailure(format!(
            "{strategy}: expected {} turns, got {}",
            conv.n(),
            turns.len()
        )));
    }
    let mut out = AugmentedConversation::aligned(conv, strategy, turns);
    if out.turns == conv.turns() {
        out.flag(FLAG_ZERO_DIVERSITY);
    }
    Ok(out)
}

pub fn replace_entities(conv: &Conversation, client: &LlmClient) -> Result<AugmentedConversation> {
    rewrite(conv, client, Strategy::Ent)
}

pub fn paraphrase(conv: &Conversation, client: &LlmClient) -> Result<AugmentedConversation> {
    rewrite(conv, client, Strategy::Para)
}

pub fn shift_intent(conv: &Conversation, client: &LlmClient) -> Result<AugmentedConversation> {
    rewrite(conv, client, Strategy::Int)
}

pub fn generate_noisy_turn(conv: &Conversation, client: &LlmClient) -> Result<Turn> {
    let prompt = build_prompt(PromptKind::Noi, conv.turns())?;
    let reply = client.complete(&prompt, false)?;
    match parse_three_step_response(PromptKind::Noi, &reply.text)?.payload {
        Payload::NoisyTurn { turn } => Ok(turn),
        _ => Err(Error::ParseFailure("expected a noisy turn".into())),
    }
}
