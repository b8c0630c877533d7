//! Batch assembly and the batch objective with its analytic gradient.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{featurize, passage_vector, EncoderParams, Features};
use super::loss::{dot, log_sum_exp};
use super::TrainConfig;
use crate::error::{Error, Result};

/// One conversation's training material: its own sequence (the ranking
/// anchor), the selected positive pair, its hard negatives and its passage.
/// This is also the line format of exported batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub conversation_id: String,
    pub passage_id: String,
    pub original: Vec<String>,
    pub pair: [Vec<String>; 2],
    pub hard_negatives: Vec<Vec<String>>,
}

/// Index into the contrastive candidate pool of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Member {
    Anchor(usize),
    Hard(usize),
}

/// `2N` pair sequences (conversation `c` owns anchors `2c` and `2c + 1`),
/// `kN` hard negatives (conversation `c` owns `kc .. kc + k`), and one
/// ranking query and passage per conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub conversation_ids: Vec<String>,
    pub passage_ids: Vec<String>,
    pub originals: Vec<Vec<String>>,
    pub anchors: Vec<Vec<String>>,
    pub hard_negatives: Vec<Vec<String>>,
    pub k: usize,
}

impl Batch {
    pub fn n(&self) -> usize {
        self.conversation_ids.len()
    }

    pub fn partner(anchor: usize) -> usize {
        anchor ^ 1
    }

    /// Every other pair member plus every hard negative in the batch.
    pub fn contrastive_negatives(&self, anchor: usize) -> Vec<Member> {
        let partner = Self::partner(anchor);
        (0..self.anchors.len())
            .filter(|&a| a != anchor && a != partner)
            .map(Member::Anchor)
            .chain((0..self.hard_negatives.len()).map(Member::Hard))
            .collect()
    }

    /// Relevant passages of the other conversations.
    pub fn passage_negatives(&self, conversation: usize) -> Vec<usize> {
        (0..self.n()).filter(|&c| c != conversation).collect()
    }
}

pub fn assemble_batch(examples: &[TrainingExample], k: usize) -> Result<Batch> {
    if examples.len() < 2 {
        return Err(Error::IncompleteSelection(format!(
            "a batch needs at least 2 conversations, got {}",
            examples.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let mut batch = Batch {
        conversation_ids: Vec::with_capacity(examples.len()),
        passage_ids: Vec::with_capacity(examples.len()),
        originals: Vec::with_capacity(examples.len()),
        anchors: Vec::with_capacity(2 * examples.len()),
        hard_negatives: Vec::with_capacity(k * examples.len()),
        k,
    };
    for ex in examples {
        if !seen.insert(ex.conversation_id.as_str()) {
            return Err(Error::IncompleteSelection(format!("{} appears twice", ex.conversation_id)));
        }
        if ex.hard_negatives.len() < k {
            return Err(Error::IncompleteSelection(format!(
                "{} has {} hard negatives, need {k}",
                ex.conversation_id,
                ex.hard_negatives.len()
            )));
        }
        batch.conversation_ids.push(ex.conversation_id.clone());
        batch.passage_ids.push(ex.passage_id.clone());
        batch.originals.push(ex.original.clone());
        batch.anchors.extend(ex.pair.iter().cloned());
        batch.hard_negatives.extend(ex.hard_negatives[..k].iter().cloned());
    }
    Ok(batch)
}

/// A batch with its features and passage vectors computed once.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub batch: Batch,
    originals: Vec<Features>,
    anchors: Vec<Features>,
    hard: Vec<Features>,
    passages: Vec<Vec<f64>>,
}

impl PreparedBatch {
    pub fn new(batch: Batch, params: &EncoderParams) -> Self {
        let f = |seqs: &[Vec<String>]| seqs.iter().map(|s| featurize(s, params.input_dim)).collect();
        PreparedBatch {
            originals: f(&batch.originals),
            anchors: f(&batch.anchors),
            hard: f(&batch.hard_negatives),
            passages: batch.passage_ids.iter().map(|p| passage_vector(p, params.output_dim)).collect(),
            batch,
        }
    }

    /// Feature columns touched by any sequence in the batch.
    pub fn active_features(&self) -> BTreeSet<usize> {
        self.originals
            .iter()
            .chain(&self.anchors)
            .chain(&self.hard)
            .flat_map(|f| f.0.iter().map(|&(i, _)| i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub l_rank: f64,
    pub l_cl: f64,
    pub l_total: f64,
    pub grad: Option<Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine that is 0 with zero gradient when either side is the zero vector.
fn safe_cos(u: &[f64], nu: f64, w: &[f64], nw: f64) -> f64 {
    if nu == 0.0 || nw == 0.0 {
        0.0
    } else {
        dot(u, w) / (nu * nw)
    }
}

/// Adds `scale * d cos(u, w) / du` into `out`.
fn add_cos_grad(out: &mut [f64], scale: f64, u: &[f64], nu: f64, w: &[f64], nw: f64, cos: f64) {
    if nu == 0.0 || nw == 0.0 {
        return;
    }
    for ((o, ui), wi) in out.iter_mut().zip(u).zip(w) {
        *o += scale * (wi / (nu * nw) - cos * ui / (nu * nu));
    }
}

/// Mean ranking loss over conversations plus `alpha` times the symmetrized
/// contrastive loss averaged over all `2N` anchors.
pub fn evaluate(params: &EncoderParams, pb: &PreparedBatch, tau: f64, alpha: f64, with_grad: bool) -> Evaluation {
    let n = pb.batch.n();
    let q: Vec<Vec<f64>> = pb.originals.iter().map(|x| params.project(x)).collect();
    let x: Vec<Vec<f64>> = pb.anchors.iter().map(|f| params.project(f)).collect();
    let h: Vec<Vec<f64>> = pb.hard.iter().map(|f| params.project(f)).collect();
    let dim = params.output_dim;

    let mut dq = vec![vec![0.0; dim]; n];
    let mut dx = vec![vec![0.0; dim]; x.len()];
    let mut dh = vec![vec![0.0; dim]; h.len()];

    let mut l_rank = 0.0;
    for c in 0..n {
        let mut logits = vec![dot(&q[c], &pb.passages[c])];
        let negs = pb.batch.passage_negatives(c);
        logits.extend(negs.iter().map(|&m| dot(&q[c], &pb.passages[m])));
        let lse = log_sum_exp(&logits);
        l_rank += (lse - logits[0]) / n as f64;
        if with_grad {
            let targets = std::iter::once(c).chain(negs.iter().copied());
            for (t, (m, z)) in targets.zip(&logits).enumerate() {
                let g = ((z - lse).exp() - if t == 0 { 1.0 } else { 0.0 }) / n as f64;
                for (d, p) in dq[c].iter_mut().zip(&pb.passages[m]) {
                    *d += g * p;
                }
            }
        }
    }

    let xn: Vec<f64> = x.iter().map(|v| norm(v)).collect();
    let hn: Vec<f64> = h.iter().map(|v| norm(v)).collect();
    let mut l_cl = 0.0;
    let anchors = x.len() as f64;
    for a in 0..x.len() {
        let mut cands = vec![Member::Anchor(Batch::partner(a))];
        cands.extend(pb.batch.contrastive_negatives(a));
        let vec_of = |m: Member| match m {
            Member::Anchor(i) => (&x[i], xn[i]),
            Member::Hard(i) => (&h[i], hn[i]),
        };
        let cosines: Vec<f64> = cands
            .iter()
            .map(|&m| {
                let (w, nw) = vec_of(m);
                safe_cos(&x[a], xn[a], w, nw)
            })
            .collect();
        let logits: Vec<f64> = cosines.iter().map(|c| c / tau).collect();
        let lse = log_sum_exp(&logits);
        l_cl += (lse - logits[0]) / anchors;
        if with_grad {
            let mut da = vec![0.0; dim];
            for (t, &m) in cands.iter().enumerate() {
                let g = ((logits[t] - lse).exp() - if t == 0 { 1.0 } else { 0.0 }) / (tau * anchors) * alpha;
                if g == 0.0 {
                    continue;
                }
                let (w, nw) = vec_of(m);
                add_cos_grad(&mut da, g, &x[a], xn[a], w, nw, cosines[t]);
                let target = match m {
                    Member::Anchor(i) => &mut dx[i],
                    Member::Hard(i) => &mut dh[i],
                };
                add_cos_grad(target, g, w, nw, &x[a], xn[a], cosines[t]);
            }
            for (d, v) in dx[a].iter_mut().zip(&da) {
                *d += v;
            }
        }
    }

    let grad = with_grad.then(|| {
        let mut g = vec![0.0; params.weights.len()];
        for (dv, f) in dq.iter().zip(&pb.originals) {
            params.accumulate(&mut g, dv, f);
        }
        for (dv, f) in dx.iter().zip(&pb.anchors) {
            params.accumulate(&mut g, dv, f);
        }
        for (dv, f) in dh.iter().zip(&pb.hard) {
            params.accumulate(&mut g, dv, f);
        }
        g
    });

    Evaluation {
        l_rank,
        l_cl,
        l_total: l_rank + alpha * l_cl,
        grad,
    }
}

/// Number of parameters compared by [`grad_check`] when enough are active.
pub const GRAD_CHECK_SAMPLES: usize = 128;

/// Gradient magnitudes below this are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Largest relative disagreement between the analytic gradient and central
/// differences, over a seeded sample of parameters in feature columns the
/// batch actually uses.
pub fn grad_check(params: &EncoderParams, batch: &Batch, config: &TrainConfig, epsilon: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::ConfigInvalid(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    params.check()?;
    let pb = PreparedBatch::new(batch.clone(), params);
    let (tau, alpha) = (config.temperature, config.alpha);
    let eval = evaluate(params, &pb, tau, alpha, true);
    let grad = eval.grad.expect("requested gradient");
    if !eval.l_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss { step: 0 });
    }

    let mut candidates: Vec<usize> = pb
        .active_features()
        .into_iter()
        .flat_map(|col| (0..params.output_dim).map(move |r| r * params.input_dim + col))
        .collect();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    candidates.truncate(GRAD_CHECK_SAMPLES);

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for idx in candidates {
        let w = params.weights[idx];
        probe.weights[idx] = w + epsilon;
        let up = evaluate(&probe, &pb, tau, alpha, false).l_total;
        probe.weights[idx] = w - epsilon;
        let down = evaluate(&probe, &pb, tau, alpha, false).l_total;
        probe.weights[idx] = w;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFiniteLoss { step: 0 });
        }
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = grad[idx];
        let scale = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    Ok(worst)
}
