//! Generators and reference implementations shared by the property and
//! acceptance suites. Nothing here calls into the library's own checkers.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;

use ctxaug::{Conversation, DependencyGraph, Turn};

pub fn conversation(id: &str, n: usize) -> Conversation {
    let turns = (1..=n)
        .map(|i| {
            let response = (i < n).then(|| format!("answer {i} about item{i}"));
            Turn::new(i, format!("question {i} about item{i} and more"), response)
        })
        .collect();
    Conversation::new(id, turns, Some(format!("p-{id}"))).unwrap()
}

/// Random earlier-to-later edges, each present with probability `density`.
pub fn random_edges<R: Rng>(rng: &mut R, n: usize, density: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for v in 2..=n {
        for u in 1..v {
            if rng.gen_bool(density) {
                edges.push((u, v));
            }
        }
    }
    edges
}

pub fn graph(id: &str, n: usize, edges: &[(usize, usize)]) -> DependencyGraph {
    let mut g = DependencyGraph::empty(id, n);
    for &(u, v) in edges {
        g.add_edge(u, v).unwrap();
    }
    g
}

/// Turns from which `target` is reachable, by repeated relaxation over the
/// edge list.
pub fn reaching(edges: &[(usize, usize)], target: usize) -> BTreeSet<usize> {
    let mut found: BTreeSet<usize> = BTreeSet::new();
    loop {
        let before = found.len();
        for &(u, v) in edges {
            if v == target || found.contains(&v) {
                found.insert(u);
            }
        }
        if found.len() == before {
            return found;
        }
    }
}

/// Whether `order` lists every historical turn once and puts each edge's
/// source before its target. Edges into turn `n` are ignored.
pub fn respects(edges: &[(usize, usize)], n: usize, order: &[usize]) -> bool {
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (1..n).collect::<Vec<_>>() {
        return false;
    }
    edges
        .iter()
        .filter(|&&(_, v)| v < n)
        .all(|&(u, v)| order.iter().position(|&x| x == u) < order.iter().position(|&x| x == v))
}

/// `-ln(e^{x_0} / sum_i e^{x_i})`, folding one logit at a time into a
/// running log-sum.
pub fn softmax_xent(logits: &[f64]) -> f64 {
    let mut acc = logits[0];
    for &x in &logits[1..] {
        let (hi, lo) = if acc >= x { (acc, x) } else { (x, acc) };
        acc = hi + (lo - hi).exp().ln_1p();
    }
    acc - logits[0]
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())).clamp(-1.0, 1.0)
}

pub fn rank_loss_oracle(q: &[f64], pos: &[f64], negs: &[Vec<f64>]) -> f64 {
    let mut logits = vec![dot(q, pos)];
    logits.extend(negs.iter().map(|d| dot(q, d)));
    softmax_xent(&logits)
}

pub fn cl_loss_oracle(vi: &[f64], vj: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let mut logits = vec![cosine(vi, vj) / tau];
    logits.extend(negs.iter().map(|h| cosine(vi, h) / tau));
    softmax_xent(&logits)
}

pub fn random_vector<R: Rng>(rng: &mut R, dim: usize, scale: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-scale..scale)).collect();
        if dot(&v, &v) > 1e-12 {
            return v;
        }
    }
}
