//! Seeded rule-based augmentations: token masking, dependency-safe turn masking,
//! dependency-safe turn reordering, and noisy-turn insertion.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conversation::{AugmentedConversation, Conversation, Strategy, Turn};
use crate::error::{Error, Result};
use crate::graph::DependencyGraph;
use crate::tokens::{detokenize, tokenize, TOKEN_MASK, TURN_MASK};

pub const FLAG_EMPTY_MASKABLE: &str = "empty_maskable_set";
pub const FLAG_ZERO_MASKED: &str = "zero_turns_masked";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleConfig {
    pub token_mask_ratio: f64,
    pub turn_mask_ratio: f64,
    pub global_seed: u64,
}

impl Default for RuleConfig {
    fn default() -> Self {
        RuleConfig {
            token_mask_ratio: 0.5,
            turn_mask_ratio: 0.5,
            global_seed: 0,
        }
    }
}

impl RuleConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("token_mask_ratio", self.token_mask_ratio),
            ("turn_mask_ratio", self.turn_mask_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::ConfigInvalid(format!("{name} = {r} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Generator for one (seed, conversation, strategy) triple. Independent of the
/// worker that happens to run it.
pub fn seeded_rng(global_seed: u64, conversation_id: &str, strategy: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update((conversation_id.len() as u64).to_le_bytes());
    hasher.update(conversation_id.as_bytes());
    hasher.update(strategy.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// `round(ratio * count)` with halves rounded up. The tiny offset absorbs
/// binary representation error in products like `0.3 * 5`.
pub fn round_half_up(ratio: f64, count: usize) -> usize {
    let exact = ratio * count as f64;
    ((exact + 0.5 + 1e-9).floor() as usize).min(count)
}

fn text_fields(turns: &[Turn]) -> Vec<&str> {
    turns
        .iter()
        .flat_map(|t| std::iter::once(t.query.as_str()).chain(t.response.as_deref()))
        .collect()
}

/// Replaces `round(r_w * M)` uniformly chosen tokens with `[token_mask]`, where
/// `M` counts tokens over every query and response, the current turn included.
pub fn mask_tokens<R: Rng>(conv: &Conversation, cfg: &RuleConfig, rng: &mut R) -> AugmentedConversation {
    let fields: Vec<Vec<String>> = text_fields(conv.turns()).into_iter().map(tokenize).collect();
    let total: usize = fields.iter().map(Vec::len).sum();
    let count = round_half_up(cfg.token_mask_ratio, total);

    let mut masked: Vec<Vec<bool>> = fields.iter().map(|f| vec![false; f.len()]).collect();
    let mut offsets = Vec::with_capacity(fields.len());
    let mut acc = 0;
    for f in &fields {
        offsets.push(acc);
        acc += f.len();
    }
    for flat in index::sample(rng, total, count).into_iter() {
        let field = offsets.partition_point(|&o| o <= flat) - 1;
        masked[field][flat - offsets[field]] = true;
    }

    let mut field_iter = fields.into_iter().zip(masked);
    let mut render = |original: &str| -> String {
        let (toks, mask) = field_iter.next().expect("one entry per text field");
        if !mask.iter().any(|&m| m) {
            return original.to_string();
        }
        let out: Vec<&str> = toks
            .iter()
            .zip(&mask)
            .map(|(t, &m)| if m { TOKEN_MASK } else { t.as_str() })
            .collect();
        detokenize(&out)
    };
    let turns = conv
        .turns()
        .iter()
        .map(|t| Turn {
            index: t.index,
            query: render(&t.query),
            response: t.response.as_deref().map(&mut render),
        })
        .collect();
    AugmentedConversation::aligned(conv, Strategy::Tom, turns)
}

/// Historical turns that are not ancestors of the current turn.
pub fn maskable_turns(conv: &Conversation, graph: &DependencyGraph) -> Result<BTreeSet<usize>> {
    graph.check_matches(conv)?;
    let ancestors = graph.ancestors(conv.n())?;
    Ok((1..conv.n()).filter(|i| !ancestors.contains(i)).collect())
}

/// Masks `min(round(r_t * |T_h|), |maskable|)` turns drawn from the maskable set.
pub fn mask_turns<R: Rng>(
    conv: &Conversation,
    graph: &DependencyGraph,
    cfg: &RuleConfig,
    rng: &mut R,
) -> Result<AugmentedConversation> {
    let maskable: Vec<usize> = maskable_turns(conv, graph)?.into_iter().collect();
    let wanted = round_half_up(cfg.turn_mask_ratio, conv.history().len());
    let count = wanted.min(maskable.len());
    let chosen: BTreeSet<usize> = index::sample(rng, maskable.len(), count)
        .into_iter()
        .map(|i| maskable[i])
        .collect();

    let turns = conv
        .turns()
        .iter()
        .map(|t| {
            if chosen.contains(&t.index) {
                Turn::new(t.index, TURN_MASK, Some(TURN_MASK.to_string()))
            } else {
                t.clone()
            }
        })
        .collect();
    let mut out = AugmentedConversation::aligned(conv, Strategy::Tum, turns);
    if maskable.is_empty() {
        out.flag(FLAG_EMPTY_MASKABLE);
    } else if count == 0 && cfg.turn_mask_ratio > 0.0 {
        out.flag(FLAG_ZERO_MASKED);
    }
    Ok(out)
}

/// Position pairs `(i, j)`, `i < j <= n-1`, whose swap keeps the chronological
/// order a linear extension of the graph. Sorted lexicographically.
pub fn valid_swaps(conv: &Conversation, graph: &DependencyGraph) -> Result<Vec<(usize, usize)>> {
    graph.check_matches(conv)?;
    let history = conv.history().len();
    let mut order = graph.chronological_order();
    let mut swaps = Vec::new();
    for i in 1..=history {
        for j in i + 1..=history {
            order.swap(i - 1, j - 1);
            if graph.is_linear_extension(&order)? {
                swaps.push((i, j));
            }
            order.swap(i - 1, j - 1);
        }
    }
    Ok(swaps)
}

pub fn reorder_turns<R: Rng>(
    conv: &Conversation,
    graph: &DependencyGraph,
    rng: &mut R,
) -> Result<AugmentedConversation> {
    let swaps = valid_swaps(conv, graph)?;
    if swaps.is_empty() {
        return Err(Error::NoValidSwap);
    }
    let (i, j) = swaps[rng.gen_range(0..swaps.len())];
    let mut order: Vec<usize> = (1..=conv.n()).collect();
    order.swap(i - 1, j - 1);

    let turns = order
        .iter()
        .enumerate()
        .map(|(pos, &src)| {
            let t = &conv.turns()[src - 1];
            Turn::new(pos + 1, t.query.clone(), t.response.clone())
        })
        .collect();
    Ok(AugmentedConversation::new(
        conv.id(),
        Strategy::Reo,
        turns,
        order.into_iter().map(Some).collect(),
    ))
}

/// Inserts `noisy` at one of the `|T_h| + 1` slots before the current query.
pub fn insert_noisy_turn<R: Rng>(
    conv: &Conversation,
    noisy: &Turn,
    rng: &mut R,
) -> AugmentedConversation {
    let slot = rng.gen_range(0..=conv.history().len());
    let mut sources: Vec<Option<usize>> = (1..=conv.n()).map(Some).collect();
    sources.insert(slot, None);

    let turns = sources
        .iter()
        .enumerate()
        .map(|(pos, src)| match src {
            Some(idx) => {
                let t = &conv.turns()[idx - 1];
                Turn::new(pos + 1, t.query.clone(), t.response.clone())
            }
            None => Turn::new(pos + 1, noisy.query.clone(), noisy.response.clone()),
        })
        .collect();
    AugmentedConversation::new(conv.id(), Strategy::Noi, turns, sources)
}
