//! Corpus-wide invariant replay over persisted artifacts.
//!
//! These checkers deliberately avoid the production code paths (graph
//! queries, rounding, bucketing) and recompute everything from the raw
//! records.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::manifest::read_jsonl;
use super::stages::{AugmentRecord, Corpus, DepsRecord, ExportRecord, Pipeline};
use crate::conversation::{AugmentedConversation, Conversation};
use crate::difficulty::DifficultyRecord;
use crate::error::Result;
use crate::tokens::{tokenize, BEGIN, END, TOKEN_MASK, TURN_MASK};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Number of items each check looked at.
    pub checked: BTreeMap<String, usize>,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn tick(&mut self, check: &str) {
        *self.checked.entry(check.to_string()).or_default() += 1;
    }

    fn expect(&mut self, check: &str, ok: bool, what: impl FnOnce() -> String) {
        self.tick(check);
        if !ok {
            self.violations.push(format!("{check}: {}", what()));
        }
    }
}

/// Turns reachable backwards from `turn` along `edges`.
fn reachable_from(turn: usize, edges: &[(usize, usize)]) -> BTreeSet<usize> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![turn];
    while let Some(v) = stack.pop() {
        for &(u, w) in edges {
            if w == v && seen.insert(u) {
                stack.push(u);
            }
        }
    }
    seen
}

/// Every edge's prerequisite appears before its dependent in `order`.
fn respects(order: &[usize], edges: &[(usize, usize)]) -> bool {
    let pos: HashMap<usize, usize> = order.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    edges.iter().all(|(u, v)| match (pos.get(u), pos.get(v)) {
        (Some(a), Some(b)) => a < b,
        _ => true,
    })
}

fn half_up(ratio: f64, count: usize) -> usize {
    let x = ratio * count as f64;
    let lower = x.floor();
    let n = if x - lower >= 0.5 - 1e-9 { lower + 1.0 } else { lower };
    (n as usize).min(count)
}

fn is_positive(strategy: &str) -> Option<bool> {
    match strategy {
        "tom" | "tum" | "reo" | "noi" | "para" => Some(true),
        "ent" | "int" => Some(false),
        _ => None,
    }
}

fn fields(turns: &[crate::conversation::Turn]) -> Vec<&str> {
    turns
        .iter()
        .flat_map(|t| std::iter::once(t.query.as_str()).chain(t.response.as_deref()))
        .collect()
}

fn check_variant(
    rep: &mut ValidationReport,
    pipeline: &Pipeline,
    conv: &Conversation,
    edges: Option<&[(usize, usize)]>,
    v: &AugmentedConversation,
) {
    let id = conv.id();
    let name = v.strategy.to_string();
    let n = conv.n();
    let positive = is_positive(&name);
    rep.expect("polarity", positive == Some(v.polarity == crate::Polarity::Positive), || {
        format!("{id}/{name} has polarity {:?}", v.polarity)
    });
    rep.expect("source_id", v.source_id == id, || format!("{id}/{name} names source {}", v.source_id));

    match name.as_str() {
        "tom" => {
            let count = |turns: &[crate::conversation::Turn]| -> usize {
                fields(turns).iter().map(|f| tokenize(f).iter().filter(|t| *t == TOKEN_MASK).count()).sum()
            };
            let total: usize = fields(conv.turns()).iter().map(|f| tokenize(f).len()).sum();
            let masked = count(&v.turns) - count(conv.turns()).min(count(&v.turns));
            let want = half_up(pipeline.config.rules.token_mask_ratio, total);
            rep.expect("tom_count", v.turns.len() == n && masked == want, || {
                format!("{id}: {masked} tokens masked, expected {want} of {total}")
            });
        }
        "tum" => {
            let Some(edges) = edges else {
                rep.expect("tum_graph", false, || format!("{id}: turn masking without a graph"));
                return;
            };
            let ancestors = reachable_from(n, edges);
            let masked: Vec<usize> = v
                .turns
                .iter()
                .zip(conv.turns())
                .filter(|(a, o)| a.query == TURN_MASK && o.query != TURN_MASK)
                .map(|(a, _)| a.index)
                .collect();
            for m in &masked {
                rep.expect("tum_ancestor", !ancestors.contains(m) && *m < n, || {
                    format!("{id}: masked turn {m} is needed by the current turn")
                });
            }
            let maskable = (1..n).filter(|i| !ancestors.contains(i)).count();
            let want = half_up(pipeline.config.rules.turn_mask_ratio, n - 1).min(maskable);
            rep.expect("tum_count", masked.len() == want, || {
                format!("{id}: {} turns masked, expected {want}", masked.len())
            });
        }
        "reo" => {
            let order: Vec<usize> = v.source_positions.iter().map(|p| p.unwrap_or(0)).collect();
            let sorted: Vec<usize> = {
                let mut s = order.clone();
                s.sort_unstable();
                s
            };
            let moved = order.iter().enumerate().filter(|(i, &t)| t != i + 1).count();
            rep.expect("reo_permutation", sorted == (1..=n).collect::<Vec<_>>() && order.last() == Some(&n) && moved == 2, || {
                format!("{id}: reorder {order:?} is not a single swap of the history")
            });
            if let Some(edges) = edges {
                rep.expect("reo_linear_extension", respects(&order, edges), || {
                    format!("{id}: order {order:?} breaks a dependency")
                });
            }
        }
        "noi" => {
            let inserted = v.source_positions.iter().filter(|p| p.is_none()).count();
            let kept: Vec<usize> = v.source_positions.iter().flatten().copied().collect();
            rep.expect(
                "noi_shape",
                v.turns.len() == n + 1 && inserted == 1 && kept == (1..=n).collect::<Vec<_>>() && v.source_positions.last() == Some(&Some(n)),
                || format!("{id}: noisy insertion has sources {:?}", v.source_positions),
            );
        }
        _ => rep.expect("rewrite_length", v.turns.len() == n, || {
            format!("{id}/{name}: {} turns for a {n}-turn conversation", v.turns.len())
        }),
    }
}

fn check_scores(rep: &mut ValidationReport, conv: &Conversation, r: &DifficultyRecord) {
    let id = conv.id();
    let c = &r.topic_trace.counts;
    let steps_ok = c.windows(2).all(|w| w[1] >= w[0] && w[1] - w[0] <= 1);
    rep.expect("topic_trace", c.len() == conv.n() && c.first() == Some(&1) && steps_ok, || {
        format!("{id}: topic counts {c:?}")
    });
    rep.expect("topic_count", c.last() == Some(&r.topic_count), || format!("{id}: topic count mismatch"));
    let mean = r.turn_perplexities.iter().map(|p| p.1).sum::<f64>() / r.turn_perplexities.len().max(1) as f64;
    rep.expect("avg_ppl", (mean - r.avg_ppl).abs() <= 1e-9 * mean.abs().max(1.0), || {
        format!("{id}: avg ppl {} but turns average {mean}", r.avg_ppl)
    });
    let diff = (conv.n() - 1) as f64 + r.topic_count as f64 * r.avg_ppl;
    rep.expect("diff_c", r.history_turns == conv.n() - 1 && (diff - r.diff_c).abs() <= 1e-9 * diff.abs().max(1.0), || {
        format!("{id}: Diff(C) {} expected {diff}", r.diff_c)
    });
}

fn check_buckets(rep: &mut ValidationReport, records: &[DifficultyRecord], b: usize) {
    let mut sorted: Vec<&DifficultyRecord> = records.iter().collect();
    sorted.sort_by(|x, y| x.diff_c.total_cmp(&y.diff_c).then_with(|| x.conversation_id.cmp(&y.conversation_id)));
    let buckets: Vec<Option<usize>> = sorted.iter().map(|r| r.bucket).collect();
    rep.expect("bucket_present", buckets.iter().all(|x| x.is_some_and(|x| x < b)), || {
        "bucket missing or out of range".into()
    });
    let flat: Vec<usize> = buckets.into_iter().flatten().collect();
    rep.expect("bucket_monotone", flat.windows(2).all(|w| w[0] <= w[1]), || format!("buckets {flat:?}"));
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for x in &flat {
        *sizes.entry(*x).or_default() += 1;
    }
    if flat.len() >= b {
        let (lo, hi) = (sizes.values().min(), sizes.values().max());
        rep.expect("bucket_balance", sizes.len() == b && hi.zip(lo).is_some_and(|(h, l)| h - l <= 1), || {
            format!("bucket sizes {sizes:?}")
        });
    }
}

fn check_selection(rep: &mut ValidationReport, pipeline: &Pipeline, r: &DifficultyRecord, aug: Option<&AugmentRecord>) {
    let id = &r.conversation_id;
    let (b, k) = (pipeline.config.filter.bucket_count, pipeline.config.train.hard_negatives);
    rep.expect("selection_xor_exclusion", r.selection.is_some() != r.exclusion.is_some(), || {
        format!("{id}: needs exactly one of selection or exclusion")
    });
    let (Some(sel), Some(aug)) = (&r.selection, aug) else { return };
    let present: BTreeSet<String> = aug.variants.iter().map(|v| v.strategy.to_string()).collect();
    let positives = present.iter().filter(|s| is_positive(s) == Some(true)).count();
    let (a, c) = (sel.pair.0.to_string(), sel.pair.1.to_string());
    rep.expect(
        "pair_members",
        a != c && [&a, &c].iter().all(|s| present.contains(*s) && is_positive(s) == Some(true)),
        || format!("{id}: pair ({a}, {c})"),
    );
    let pairs = positives * positives.saturating_sub(1) / 2;
    let bucket = r.bucket.unwrap_or(0);
    rep.expect("pair_rank", pairs > 0 && sel.pair_rank == bucket.min(pairs - 1), || {
        format!("{id}: pair rank {} for bucket {bucket} with {pairs} pairs", sel.pair_rank)
    });
    rep.expect(
        "negatives",
        sel.negatives.len() == k
            && sel.negatives.iter().all(|n| {
                let s = n.strategy.to_string();
                present.contains(&s) && is_positive(&s) == Some(false)
            }),
        || format!("{id}: {} negatives selected", sel.negatives.len()),
    );
    let hard = 2 * bucket >= b;
    let d: Vec<f64> = sel.negatives.iter().map(|n| n.difficulty).collect();
    rep.expect("negative_order", d.windows(2).all(|w| if hard { w[0] >= w[1] } else { w[0] <= w[1] }), || {
        format!("{id}: negative difficulties {d:?} in the wrong order for bucket {bucket}")
    });
}

fn check_export(rep: &mut ValidationReport, pipeline: &Pipeline, export: &[ExportRecord], selected: &BTreeSet<String>) {
    let k = pipeline.config.train.hard_negatives;
    let max = pipeline.config.max_tokens;
    let mut ids = BTreeSet::new();
    let mut batches: BTreeMap<usize, Vec<&ExportRecord>> = BTreeMap::new();
    for r in export {
        let ex = &r.example;
        rep.expect("export_unique", ids.insert(ex.conversation_id.clone()), || {
            format!("{} exported twice", ex.conversation_id)
        });
        rep.expect("export_hard_negatives", ex.hard_negatives.len() == k, || {
            format!("{}: {} hard negatives", ex.conversation_id, ex.hard_negatives.len())
        });
        let seqs = std::iter::once(&ex.original).chain(&ex.pair).chain(&ex.hard_negatives);
        for s in seqs {
            rep.expect(
                "export_sequence",
                s.len() >= 2 && s.len() <= max && s[0] == BEGIN && s[s.len() - 1] == END,
                || format!("{}: malformed sequence of {} tokens", ex.conversation_id, s.len()),
            );
        }
        batches.entry(r.batch).or_default().push(r);
    }
    rep.expect("export_coverage", &ids == selected, || {
        format!("exported {} conversations, {} were selected", ids.len(), selected.len())
    });
    for (b, members) in &batches {
        let n = members.len();
        let anchors: Vec<(usize, usize)> = members.iter().enumerate().flat_map(|(c, _)| [(c, 0), (c, 1)]).collect();
        let hard: usize = members.iter().map(|m| m.example.hard_negatives.len()).sum();
        rep.expect("batch_anchor_count", anchors.len() == 2 * n && hard == k * n, || {
            format!("batch {b}: {} anchors and {hard} hard negatives for {n} conversations", anchors.len())
        });
        for &(c, side) in &anchors {
            let others = anchors.iter().filter(|&&(c2, _)| c2 != c).count();
            rep.expect("batch_negatives", others + hard == 2 * (n - 1) + k * n, || {
                format!("batch {b}: anchor ({c},{side}) sees {} negatives", others + hard)
            });
        }
    }
}

pub fn validate(pipeline: &Pipeline) -> Result<ValidationReport> {
    let mut rep = ValidationReport::default();
    let corpus = Corpus::load(&pipeline.config)?;
    let by_id = corpus.by_id();

    let deps_dir = pipeline.stage_dir("deps");
    deps_dir.require()?;
    let deps: Vec<DepsRecord> = read_jsonl(&deps_dir.output())?;
    let mut graphs: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
    for d in &deps {
        let Some(conv) = by_id.get(d.conversation_id.as_str()) else {
            rep.expect("deps_known", false, || format!("graph for unknown conversation {}", d.conversation_id));
            continue;
        };
        let Some(g) = &d.graph else { continue };
        let n = conv.n();
        let edges: Vec<(usize, usize)> = g.edges.iter().copied().collect();
        rep.expect("dag_edges", g.turn_count == n && edges.iter().all(|&(u, v)| 1 <= u && u < v && v <= n), || {
            format!("{}: edges {edges:?} for {n} turns", d.conversation_id)
        });
        let chronological: Vec<usize> = (1..n).collect();
        rep.expect("dag_chronological", respects(&chronological, &edges), || {
            format!("{}: chronological order is not a linear extension", d.conversation_id)
        });
        graphs.insert(d.conversation_id.clone(), edges);
    }

    let augment_dir = pipeline.stage_dir("augment");
    let augmented: Vec<AugmentRecord> = if augment_dir.output().exists() { read_jsonl(&augment_dir.output())? } else { Vec::new() };
    for r in &augmented {
        let Some(conv) = by_id.get(r.conversation_id.as_str()) else { continue };
        let positives = r.variants.iter().filter(|v| v.polarity == crate::Polarity::Positive).count();
        let negatives = r.variants.len() - positives;
        rep.expect("variant_counts", positives <= 5 && negatives <= 2, || {
            format!("{}: {positives} positives, {negatives} negatives", r.conversation_id)
        });
        for v in &r.variants {
            check_variant(&mut rep, pipeline, conv, graphs.get(&r.conversation_id).map(Vec::as_slice), v);
        }
    }
    let aug_by_id: HashMap<&str, &AugmentRecord> = augmented.iter().map(|r| (r.conversation_id.as_str(), r)).collect();

    let filter_dir = pipeline.stage_dir("filter");
    let score_dir = pipeline.stage_dir("score");
    let scored_path = if filter_dir.output().exists() { filter_dir.output() } else { score_dir.output() };
    let records: Vec<DifficultyRecord> = if scored_path.exists() { read_jsonl(&scored_path)? } else { Vec::new() };
    for r in &records {
        if let Some(conv) = by_id.get(r.conversation_id.as_str()) {
            check_scores(&mut rep, conv, r);
        }
    }
    if filter_dir.output().exists() && !records.is_empty() {
        check_buckets(&mut rep, &records, pipeline.config.filter.bucket_count);
        for r in &records {
            check_selection(&mut rep, pipeline, r, aug_by_id.get(r.conversation_id.as_str()).copied());
        }
    }

    let export_dir = pipeline.stage_dir("export");
    if export_dir.output().exists() {
        let export: Vec<ExportRecord> = read_jsonl(&export_dir.output())?;
        let selected: BTreeSet<String> = records
            .iter()
            .filter(|r| r.selection.is_some())
            .map(|r| r.conversation_id.clone())
            .collect();
        check_export(&mut rep, pipeline, &export, &selected);
    }

    let dir = pipeline.stage_dir("validate");
    let mut bytes = serde_json::to_vec_pretty(&rep)?;
    bytes.push(b'\n');
    super::manifest::write_atomic(&dir.output(), &bytes)?;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reachability_and_order() {
        let edges = [(1, 3), (3, 5), (2, 4)];
        assert_eq!(reachable_from(5, &edges), BTreeSet::from([1, 3]));
        assert!(respects(&[2, 1, 3, 4], &edges));
        assert!(!respects(&[3, 1, 2, 4], &edges));
    }

    #[test]
    fn rounding() {
        assert_eq!(half_up(0.5, 3), 2);
        assert_eq!(half_up(0.5, 4), 2);
        assert_eq!(half_up(0.3, 5), 2);
        assert_eq!(half_up(0.0, 9), 0);
        assert_eq!(half_up(1.0, 9), 9);
    }
}
