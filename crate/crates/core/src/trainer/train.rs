//! Plain gradient descent over fixed batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::batch::{assemble_batch, evaluate, PreparedBatch, TrainingExample};
use super::encoder::EncoderParams;
use super::loss::dot;
use super::TrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_rank: f64,
    pub l_cl: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    /// Mean cosine between the two members of each selected pair.
    pub positive_cosine: f64,
    /// Mean cosine from each pair member to its own hard negatives.
    pub hard_negative_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub steps: Vec<StepMetrics>,
    pub batch_count: usize,
    /// Combined loss averaged over all batches, before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_ratio: f64,
    pub initial_similarity: SimilarityStats,
    pub final_similarity: SimilarityStats,
}

impl TrainingReport {
    /// One `{step, l_rank, l_cl, l_total}` object per line.
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.steps {
            out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
            out.push('\n');
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn similarity_stats(params: &EncoderParams, corpus: &[TrainingExample]) -> SimilarityStats {
    let (mut pos, mut neg, mut neg_count) = (0.0, 0.0, 0usize);
    for ex in corpus {
        let i = params.encode(&ex.pair[0]);
        let j = params.encode(&ex.pair[1]);
        pos += cosine(&i, &j);
        for h in &ex.hard_negatives {
            let h = params.encode(h);
            neg += cosine(&i, &h) + cosine(&j, &h);
            neg_count += 2;
        }
    }
    SimilarityStats {
        positive_cosine: pos / corpus.len().max(1) as f64,
        hard_negative_cosine: neg / neg_count.max(1) as f64,
    }
}

fn mean_loss(params: &EncoderParams, batches: &[PreparedBatch], config: &TrainConfig) -> f64 {
    let losses: Vec<f64> = batches
        .par_iter()
        .map(|pb| evaluate(params, pb, config.temperature, config.alpha, false).l_total)
        .collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Splits the corpus into seeded, fixed batches of `N` (the remainder is
/// left out) and cycles through them, one update per step. With a zero
/// learning rate every visit to a batch reports the same loss.
pub fn train(
    corpus: &[TrainingExample],
    config: &TrainConfig,
    mut params: EncoderParams,
) -> Result<(EncoderParams, TrainingReport)> {
    config.validate()?;
    params.check()?;
    let n = config.batch_size;
    if corpus.len() < 2 * n {
        return Err(Error::ConfigInvalid(format!(
            "corpus has {} conversations, need at least {}",
            corpus.len(),
            2 * n
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut batches = Vec::new();
    for chunk in order.chunks_exact(n) {
        let examples: Vec<TrainingExample> = chunk.iter().map(|&i| corpus[i].clone()).collect();
        batches.push(PreparedBatch::new(assemble_batch(&examples, config.hard_negatives)?, &params));
    }

    let initial_loss = mean_loss(&params, &batches, config);
    let initial_similarity = similarity_stats(&params, corpus);
    let mut steps = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let pb = &batches[step % batches.len()];
        let eval = evaluate(&params, pb, config.temperature, config.alpha, true);
        let grad = eval.grad.expect("requested gradient");
        if !eval.l_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        steps.push(StepMetrics {
            step,
            l_rank: eval.l_rank,
            l_cl: eval.l_cl,
            l_total: eval.l_total,
        });
        for (w, g) in params.weights.iter_mut().zip(&grad) {
            *w -= config.learning_rate * g;
        }
    }
    let final_loss = mean_loss(&params, &batches, config);
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: config.steps });
    }
    let report = TrainingReport {
        steps,
        batch_count: batches.len(),
        initial_loss,
        final_loss,
        loss_ratio: final_loss / initial_loss,
        initial_similarity,
        final_similarity: similarity_stats(&params, corpus),
    };
    Ok((params, report))
}

pub fn train_toy(corpus: &[TrainingExample], config: &TrainConfig) -> Result<TrainingReport> {
    config.validate()?;
    train(corpus, config, config.initial_params()).map(|(_, report)| report)
}
