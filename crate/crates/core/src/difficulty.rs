//! Conversation difficulty, augmented-pair difficulty, corpus bucketing and
//! per-conversation sample selection.

use serde::{Deserialize, Serialize};

use crate::conversation::{Conversation, Strategy, Turn};
use crate::error::{BackendError, Error, Result};
use crate::hashing::{fnv1a64_str, salted};
use crate::llm::mock::content_words;
use crate::llm::{build_prompt, EmbeddingBackend, LlmClient, PromptKind, TopicBackend};
use crate::tokens::tokenize;

/// Topic counts per prefix `t_1..t_i`, the topic newly counted at each turn
/// (if any), and the confidence stored after the last turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicTrace {
    pub counts: Vec<usize>,
    pub topics: Vec<Option<String>>,
    pub final_confidence: f64,
}

impl TopicTrace {
    pub fn topic_count(&self) -> usize {
        self.counts.last().copied().unwrap_or(0)
    }
}

/// Text handed to the topic model for the prefix `turns`.
pub fn prefix_text(turns: &[Turn]) -> String {
    let mut parts = Vec::new();
    for t in turns {
        parts.push(t.query.as_str());
        if let Some(r) = &t.response {
            parts.push(r.as_str());
        }
    }
    parts.join("\n")
}

/// Topic counting with confidence over per-prefix distributions.
///
/// For each prefix, topics already counted are removed and the rest sorted by
/// descending probability. The margin `P[0] - P[1]` is the confidence; a
/// missing runner-up counts as probability 0. The first turn always counts one
/// topic. A later turn adds one topic iff its margin is at least the stored
/// confidence, which it then replaces. A prefix with no remaining topics
/// cannot add one.
pub fn count_topics_from_distributions(distributions: &[Vec<(String, f64)>]) -> TopicTrace {
    let mut counts: Vec<usize> = Vec::with_capacity(distributions.len());
    let mut topics: Vec<Option<String>> = Vec::with_capacity(distributions.len());
    let mut counted: Vec<String> = Vec::new();
    let mut confidence = 0.0;

    for (i, dist) in distributions.iter().enumerate() {
        let mut remaining: Vec<&(String, f64)> =
            dist.iter().filter(|(id, _)| !counted.contains(id)).collect();
        remaining.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let top = remaining.first().map(|(id, p)| (id.clone(), *p));
        let margin = top.as_ref().map_or(0.0, |t| t.1) - remaining.get(1).map_or(0.0, |t| t.1);

        if i == 0 {
            counts.push(1);
            topics.push(top.as_ref().map(|t| t.0.clone()));
            if let Some((id, _)) = top {
                counted.push(id);
            }
            confidence = margin;
            continue;
        }
        let prev = counts[i - 1];
        match top {
            Some((id, _)) if margin >= confidence => {
                counts.push(prev + 1);
                topics.push(Some(id.clone()));
                counted.push(id);
                confidence = margin;
            }
            _ => {
                counts.push(prev);
                topics.push(None);
            }
        }
    }
    TopicTrace {
        counts,
        topics,
        final_confidence: confidence,
    }
}

pub fn count_topics(conv: &Conversation, backend: &dyn TopicBackend) -> Result<TopicTrace> {
    let mut dists = Vec::with_capacity(conv.n());
    for i in 1..=conv.n() {
        dists.push(backend.topic_distribution(&prefix_text(&conv.turns()[..i]))?);
    }
    Ok(count_topics_from_distributions(&dists))
}

/// `exp(-mean(logprobs))`.
pub fn perplexity(logprobs: &[f64]) -> f64 {
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    (-mean).exp()
}

/// Log-probabilities of the tokens that overlap `prompt[response_start..]`.
///
/// When the returned tokens concatenate to the prompt (echo scoring), only
/// the overlapping tokens are kept; otherwise the backend is taken to have
/// scored the response alone and every value is used.
pub fn response_logprobs(prompt: &str, response_start: usize, tokens: &[(String, f64)]) -> Vec<f64> {
    let total: usize = tokens.iter().map(|(t, _)| t.len()).sum();
    let echoed = total == prompt.len()
        && tokens.iter().map(|(t, _)| t.as_str()).collect::<String>() == prompt;
    if !echoed {
        return tokens.iter().map(|(_, lp)| *lp).collect();
    }
    let mut offset = 0;
    let mut out = Vec::new();
    for (tok, lp) in tokens {
        let end = offset + tok.len();
        if end > response_start && !tok.trim().is_empty() {
            out.push(*lp);
        }
        offset = end;
    }
    out
}

/// Per-turn perplexities of every turn that has a response.
pub fn turn_perplexities(conv: &Conversation, client: &LlmClient) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for i in 1..=conv.n() {
        let turn = &conv.turns()[i - 1];
        let Some(response) = &turn.response else { continue };
        let mut prompt = build_prompt(PromptKind::PplQa, &conv.turns()[..i])?;
        let start = prompt.len();
        prompt.push_str(response);
        let result = client.complete(&prompt, true)?;
        let tokens = result.token_logprobs.unwrap_or_default();
        let lps = response_logprobs(&prompt, start, &tokens);
        if lps.is_empty() {
            return Err(BackendError::Rejected(format!("no log-probabilities for turn {i} response")).into());
        }
        out.push((i, perplexity(&lps)));
    }
    Ok(out)
}

pub fn avg_perplexity(conv: &Conversation, client: &LlmClient) -> Result<f64> {
    mean_perplexity(&turn_perplexities(conv, client)?)
}

pub fn mean_perplexity(per_turn: &[(usize, f64)]) -> Result<f64> {
    if per_turn.is_empty() {
        return Err(Error::NoScorableTurn);
    }
    Ok(per_turn.iter().map(|(_, p)| p).sum::<f64>() / per_turn.len() as f64)
}

/// `|T_h| + |Topic(C)| * mean PPL`
pub fn conversation_difficulty(history_turns: usize, topic_count: usize, avg_ppl: f64) -> f64 {
    history_turns as f64 + topic_count as f64 * avg_ppl
}

/// Non-zero real vector with its cached Euclidean norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    components: Vec<f64>,
    norm: f64,
}

impl EmbeddingVector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        let norm = components.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::ZeroVector);
        }
        Ok(EmbeddingVector { components, norm })
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        let dot: f64 = self.components.iter().zip(&other.components).map(|(a, b)| a * b).sum();
        Ok((dot / (self.norm * other.norm)).clamp(-1.0, 1.0))
    }
}

/// `1 - cos(e_i, e_j)`, in `[0, 2]`.
pub fn pair_difficulty(e_i: &EmbeddingVector, e_j: &EmbeddingVector) -> Result<f64> {
    Ok(1.0 - e_i.cosine(e_j)?)
}

/// Mean cosine of a negative to both members of the selected positive pair.
pub fn negative_difficulty(e_i: &EmbeddingVector, e_j: &EmbeddingVector, e_h: &EmbeddingVector) -> Result<f64> {
    Ok((e_i.cosine(e_h)? + e_j.cosine(e_h)?) / 2.0)
}

/// Signed feature-hashing sentence embedder over lowercased word unigrams and
/// bigrams. Stands in for a neural sentence encoder in offline runs.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: 256 }
    }
}

impl HashEmbedder {
    fn add(&self, v: &mut [f64], feature: &str, weight: f64) {
        let h = fnv1a64_str(feature);
        let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
        v[(h % self.dim as u64) as usize] += sign * weight;
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let words: Vec<String> = tokenize(text).into_iter().map(|t| t.to_lowercase()).collect();
        let mut v = vec![0.0; self.dim];
        for w in &words {
            self.add(&mut v, w, 1.0);
        }
        for pair in words.windows(2) {
            self.add(&mut v, &format!("{} {}", pair[0], pair[1]), 0.5);
        }
        Ok(v)
    }
}

/// Offline topic model: each content word votes for the topic its hash lands
/// on; the distribution is the normalized vote count with add-one smoothing.
#[derive(Debug, Clone)]
pub struct HashTopicModel {
    pub topics: usize,
}

impl Default for HashTopicModel {
    fn default() -> Self {
        HashTopicModel { topics: 12 }
    }
}

impl TopicBackend for HashTopicModel {
    fn topic_distribution(&self, text: &str) -> Result<Vec<(String, f64)>, BackendError> {
        let mut votes = vec![1.0; self.topics];
        for w in content_words(text) {
            votes[(salted("topic", &w) % self.topics as u64) as usize] += 3.0;
        }
        let total: f64 = votes.iter().sum();
        Ok(votes
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("topic_{i:02}"), v / total))
            .collect())
    }
}

/// Equal-frequency buckets over `(id, diff)` entries; returns one bucket per
/// entry in input order. Entries are ranked by difficulty, ties by id, and
/// rank `r` of `len` lands in bucket `floor(r * B / len)`.
pub fn assign_buckets(entries: &[(String, f64)], bucket_count: usize) -> Result<Vec<usize>> {
    if entries.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if bucket_count == 0 {
        return Err(Error::ConfigInvalid("bucket count must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        entries[a]
            .1
            .total_cmp(&entries[b].1)
            .then_with(|| entries[a].0.cmp(&entries[b].0))
    });
    let mut buckets = vec![0; entries.len()];
    for (rank, &idx) in order.iter().enumerate() {
        buckets[idx] = rank * bucket_count / entries.len();
    }
    Ok(buckets)
}

/// Buckets at or above `ceil(B / 2)` count as difficult.
pub fn is_difficult_bucket(bucket: usize, bucket_count: usize) -> bool {
    bucket >= bucket_count.div_ceil(2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedNegative {
    pub strategy: Strategy,
    pub difficulty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub pair: (Strategy, Strategy),
    pub pair_rank: usize,
    pub pair_difficulty: f64,
    pub negatives: Vec<SelectedNegative>,
}

/// Chooses the positive pair whose ascending-difficulty rank matches the
/// bucket (clamped to the available pairs), then the `k` negatives with the
/// highest mean similarity to that pair for difficult buckets, or the lowest
/// otherwise. Ties keep input order.
pub fn select_samples(
    positives: &[(Strategy, EmbeddingVector)],
    negatives: &[(Strategy, EmbeddingVector)],
    bucket: usize,
    bucket_count: usize,
    k: usize,
) -> Result<Selection> {
    if positives.len() < 2 {
        return Err(Error::InsufficientPositives(positives.len()));
    }
    if negatives.len() < k {
        return Err(Error::InsufficientNegatives {
            required: k,
            available: negatives.len(),
        });
    }
    let mut pairs = Vec::new();
    for a in 0..positives.len() {
        for b in a + 1..positives.len() {
            pairs.push((a, b, pair_difficulty(&positives[a].1, &positives[b].1)?));
        }
    }
    pairs.sort_by(|x, y| x.2.total_cmp(&y.2));
    let pair_rank = bucket.min(pairs.len() - 1);
    let (a, b, pair_diff) = pairs[pair_rank];
    let (ea, eb) = (&positives[a].1, &positives[b].1);

    let mut scored = Vec::with_capacity(negatives.len());
    for (strategy, e) in negatives {
        scored.push(SelectedNegative {
            strategy: *strategy,
            difficulty: negative_difficulty(ea, eb, e)?,
        });
    }
    if is_difficult_bucket(bucket, bucket_count) {
        scored.sort_by(|x, y| y.difficulty.total_cmp(&x.difficulty));
    } else {
        scored.sort_by(|x, y| x.difficulty.total_cmp(&y.difficulty));
    }
    scored.truncate(k);

    Ok(Selection {
        pair: (positives[a].0, positives[b].0),
        pair_rank,
        pair_difficulty: pair_diff,
        negatives: scored,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRecord {
    pub conversation_id: String,
    pub history_turns: usize,
    pub topic_count: usize,
    pub avg_ppl: f64,
    pub diff_c: f64,
    pub topic_trace: TopicTrace,
    pub turn_perplexities: Vec<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusion: Option<String>,
}

impl DifficultyRecord {
    pub fn score(conv: &Conversation, topics: &dyn TopicBackend, lm: &LlmClient) -> Result<Self> {
        let topic_trace = count_topics(conv, topics)?;
        let turn_perplexities = turn_perplexities(conv, lm)?;
        let avg_ppl = mean_perplexity(&turn_perplexities)?;
        let history_turns = conv.history().len();
        let topic_count = topic_trace.topic_count();
        Ok(DifficultyRecord {
            conversation_id: conv.id().to_string(),
            history_turns,
            topic_count,
            avg_ppl,
            diff_c: conversation_difficulty(history_turns, topic_count, avg_ppl),
            topic_trace,
            turn_perplexities,
            bucket: None,
            selection: None,
            exclusion: None,
        })
    }
}
