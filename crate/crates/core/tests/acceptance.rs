//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctxaug::difficulty::{assign_buckets, count_topics, select_samples, EmbeddingVector, HashTopicModel};
use ctxaug::llm::parse::parse_dependency_list;
use ctxaug::llm::{build_prompt, parse_three_step_response, Payload, PromptKind, TopicBackend, STEP_MARKERS};
use ctxaug::pipeline::{read_jsonl, BackendSpec, Pipeline, PipelineConfig};
use ctxaug::rules::{self, RuleConfig};
use ctxaug::trainer::{
    assemble_batch, cl_loss, grad_check, rank_loss, synthetic_corpus, train_toy, EncoderParams, Member, TrainConfig,
};
use ctxaug::tokens::TURN_MASK;
use ctxaug::{parse_conversation, BackendError, Conversation, Error, Strategy};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn fixture_corpus() -> Vec<Conversation> {
    fs::read_to_string(fixture_dir().join("corpus20.jsonl"))
        .unwrap()
        .lines()
        .map(|l| parse_conversation(l).unwrap())
        .collect()
}

fn dag_constraints() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut reorders, mut no_swap, mut masked_total) = (0, 0, 0);
    for i in 0..1000 {
        let n = rng.gen_range(3..=12);
        let id = format!("dag{i}");
        let density = rng.gen_range(0.0..0.7);
        let edges = random_edges(&mut rng, n, density);
        let conv = conversation(&id, n);
        let g = graph(&id, n, &edges);
        let seed = rng.gen();

        match rules::reorder_turns(&conv, &g, &mut rules::seeded_rng(seed, &id, "reo")) {
            Ok(aug) => {
                let order: Vec<usize> = aug.source_positions.iter().map(|p| p.unwrap()).collect();
                ensure!(order[n - 1] == n, "{id}: current turn moved");
                ensure!(respects(&edges, n, &order[..n - 1]), "{id}: order {order:?} violates {edges:?}");
                reorders += 1;
            }
            Err(Error::NoValidSwap) => no_swap += 1,
            Err(e) => return Err(format!("{id}: {e}")),
        }

        let cfg = RuleConfig {
            turn_mask_ratio: rng.gen_range(0.0..=1.0),
            ..RuleConfig::default()
        };
        let aug = rules::mask_turns(&conv, &g, &cfg, &mut rules::seeded_rng(seed, &id, "tum")).map_err(|e| e.to_string())?;
        let protected = reaching(&edges, n);
        for t in aug.turns.iter().filter(|t| t.query == TURN_MASK) {
            ensure!(!protected.contains(&t.index), "{id}: masked ancestor {}", t.index);
            masked_total += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!(
        "1000 conversations, {reorders} reorders valid, {no_swap} without a valid swap, {masked_total} masked turns, 0 ancestors masked, {elapsed:.2?}"
    ))
}

/// Topic distributions keyed by how many queries the prefix holds.
struct Scripted(Vec<Vec<(String, f64)>>);

impl TopicBackend for Scripted {
    fn topic_distribution(&self, text: &str) -> Result<Vec<(String, f64)>, BackendError> {
        Ok(self.0[text.matches("question").count() - 1].clone())
    }
}

fn d(pairs: &[(&str, f64)]) -> Vec<(String, f64)> {
    pairs.iter().map(|&(t, p)| (t.to_string(), p)).collect()
}

#[allow(clippy::type_complexity)]
fn topic_scenarios() -> Vec<(&'static str, Vec<Vec<(String, f64)>>, Vec<usize>)> {
    vec![
        ("single turn", vec![d(&[("a", 0.75), ("b", 0.25)])], vec![1]),
        ("lone topic then exhausted", vec![d(&[("a", 1.0)]), d(&[("a", 1.0)])], vec![1, 1]),
        ("runner-up missing after removal", vec![d(&[("a", 0.625), ("b", 0.375)]), d(&[("a", 0.5), ("b", 0.5)])], vec![1, 2]),
        ("margin drops", vec![d(&[("a", 0.875), ("b", 0.125)]), d(&[("a", 0.5), ("b", 0.25), ("c", 0.25)])], vec![1, 1]),
        (
            "equal margin counts",
            vec![d(&[("a", 0.625), ("b", 0.375)]), d(&[("a", 0.125), ("b", 0.5), ("c", 0.25), ("d", 0.125)])],
            vec![1, 2],
        ),
        (
            "growing chain",
            vec![d(&[("a", 0.5), ("b", 0.5)]), d(&[("a", 0.5), ("b", 0.5)]), d(&[("a", 0.25), ("b", 0.25), ("c", 0.5)])],
            vec![1, 2, 3],
        ),
        (
            "confidence ratchets",
            vec![d(&[("a", 0.5), ("b", 0.25), ("c", 0.25)]), d(&[("a", 0.25), ("b", 0.75)]), d(&[("a", 0.25), ("b", 0.25), ("c", 0.5)])],
            vec![1, 2, 2],
        ),
        ("empty first distribution", vec![d(&[]), d(&[("a", 0.5), ("b", 0.5)])], vec![1, 2]),
        ("always empty", vec![d(&[]), d(&[])], vec![1, 1]),
        ("tie broken by id", vec![d(&[("b", 0.5), ("a", 0.5)]), d(&[("a", 0.75), ("b", 0.25)])], vec![1, 2]),
        (
            "vocabulary exhausted",
            vec![d(&[("a", 0.75), ("b", 0.25)]), d(&[("a", 0.25), ("b", 0.75)]), d(&[("a", 0.5), ("b", 0.5)])],
            vec![1, 2, 2],
        ),
        ("zero probabilities", vec![d(&[("a", 0.0), ("b", 0.0)]), d(&[("a", 0.0), ("b", 0.0)])], vec![1, 2]),
        (
            "flat four topics",
            vec![d(&[("a", 0.25), ("b", 0.25), ("c", 0.25), ("d", 0.25)]); 4],
            vec![1, 2, 3, 4],
        ),
        ("single topic vocabulary", vec![d(&[("a", 1.0)]); 3], vec![1, 1, 1]),
        (
            "late strong topic",
            vec![d(&[("a", 0.75), ("b", 0.25)]), d(&[("a", 0.25), ("b", 0.5), ("c", 0.25)]), d(&[("a", 0.125), ("b", 0.125), ("c", 0.75)])],
            vec![1, 1, 2],
        ),
        (
            "topic absent from later distribution",
            vec![d(&[("a", 0.5), ("b", 0.25), ("c", 0.25)]), d(&[("a", 0.5), ("b", 0.5)]), d(&[("a", 0.5), ("b", 0.5)])],
            vec![1, 2, 2],
        ),
        ("counted topic missing, new ones tied", vec![d(&[("a", 0.75), ("b", 0.25)]), d(&[("b", 0.5), ("c", 0.5)])], vec![1, 1]),
        (
            "five turns alternating",
            vec![
                d(&[("a", 0.5), ("b", 0.5)]),
                d(&[("a", 0.75), ("b", 0.25)]),
                d(&[("a", 0.5), ("c", 0.25), ("d", 0.25)]),
                d(&[("c", 0.75), ("d", 0.25)]),
                d(&[("d", 0.5), ("e", 0.5)]),
            ],
            vec![1, 2, 2, 3, 3],
        ),
        ("repeated three-way split", vec![d(&[("a", 0.375), ("b", 0.375), ("c", 0.25)]); 3], vec![1, 2, 3]),
        ("certain first turn", vec![d(&[("a", 1.0)]), d(&[("a", 0.5), ("b", 0.5)]), d(&[("b", 1.0)])], vec![1, 1, 2]),
        ("disjoint topics", vec![d(&[("a", 0.5), ("b", 0.5)]), d(&[("c", 0.5), ("d", 0.5)]), d(&[("d", 1.0)])], vec![1, 2, 3]),
        ("same distribution thrice", vec![d(&[("a", 0.625), ("b", 0.375)]); 3], vec![1, 2, 2]),
    ]
}

fn topic_oracles() -> Outcome {
    let scenarios = topic_scenarios();
    for (name, dists, expected) in &scenarios {
        let conv = conversation("t", dists.len());
        let trace = count_topics(&conv, &Scripted(dists.clone())).map_err(|e| e.to_string())?;
        ensure!(&trace.counts == expected, "{name}: got {:?}, expected {expected:?}", trace.counts);
    }
    let tie = count_topics(&conversation("t", 2), &Scripted(scenarios[9].1.clone())).unwrap();
    ensure!(tie.topics == [Some("a".into()), Some("b".into())], "tie order {:?}", tie.topics);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut corpus = fixture_corpus();
    for i in 0..200 {
        corpus.push(conversation(&format!("r{i}"), rng.gen_range(1..=12)));
    }
    let model = HashTopicModel::default();
    for conv in &corpus {
        let trace = count_topics(conv, &model).map_err(|e| e.to_string())?;
        ensure!(trace.counts[0] == 1, "{}: first count {}", conv.id(), trace.counts[0]);
        ensure!(
            trace.counts.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1),
            "{}: counts {:?}",
            conv.id(),
            trace.counts
        );
    }
    Ok(format!(
        "{} scripted scenarios exact, monotone with unit steps on {} conversations",
        scenarios.len(),
        corpus.len()
    ))
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut sharp) = (0.0f64, 0);
    for i in 0..1000 {
        let dim = rng.gen_range(2..=16);
        let count = rng.gen_range(1..=40);
        let scale = [0.1, 1.0, 10.0][i % 3];
        let tau = if i % 4 == 0 { 0.0012 } else { rng.gen_range(0.01..2.0) };
        sharp += usize::from(tau == 0.0012);
        let q = random_vector(&mut rng, dim, scale);
        let p = random_vector(&mut rng, dim, scale);
        let negs: Vec<Vec<f64>> = (0..count).map(|_| random_vector(&mut rng, dim, scale)).collect();

        let rank = rank_loss(&q, &p, &negs).map_err(|e| e.to_string())?;
        let ev = |v: &Vec<f64>| EmbeddingVector::new(v.clone()).unwrap();
        let evs: Vec<EmbeddingVector> = negs.iter().map(ev).collect();
        let cl = cl_loss(&ev(&q), &ev(&p), &evs, tau).map_err(|e| e.to_string())?;
        ensure!(rank.is_finite() && cl.is_finite(), "instance {i}: non-finite loss");
        let e1 = (rank - rank_loss_oracle(&q, &p, &negs)).abs();
        let e2 = (cl - cl_loss_oracle(&q, &p, &negs, tau)).abs();
        worst = worst.max(e1).max(e2);
        ensure!(e1 <= 1e-9 && e2 <= 1e-9, "instance {i}: errors {e1:e} {e2:e} (tau {tau})");
    }
    Ok(format!("1000 instances ({sharp} at tau 0.0012), max abs error {worst:.1e} <= 1e-9"))
}

fn gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    let taus = [0.05, 0.1, 0.2, 0.5, 1.0];
    for i in 0..12u64 {
        let n = 2 + (i as usize % 11);
        let k = 1 + (i as usize % 2);
        let corpus = synthetic_corpus(n, k, 100 + i);
        let batch = assemble_batch(&corpus, k).map_err(|e| e.to_string())?;
        let config = TrainConfig {
            batch_size: n,
            hard_negatives: k,
            temperature: taus[i as usize % taus.len()],
            alpha: [0.5, 1.0, 2.0][i as usize % 3],
            seed: i,
            ..TrainConfig::default()
        };
        let params = EncoderParams::random(256, 16, 0.1, 200 + i);
        let err = grad_check(&params, &batch, &config, 1e-5).map_err(|e| e.to_string())?;
        worst = worst.max(err);
        ensure!(err < 1e-5, "batch {i} (N={n}, k={k}, tau={}): relative error {err:e}", config.temperature);
    }
    Ok(format!("12 random batches, max relative error {worst:.2e} < 1e-5"))
}

fn toy_training() -> Outcome {
    let start = Instant::now();
    let corpus = synthetic_corpus(100, 1, 5);
    let config = TrainConfig {
        batch_size: 12,
        hard_negatives: 1,
        temperature: 0.1,
        learning_rate: 0.5,
        steps: 200,
        ..TrainConfig::default()
    };
    let r = train_toy(&corpus, &config).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let sim = &r.final_similarity;
    let detail = format!(
        "loss {:.4} -> {:.4} (ratio {:.3}), positive cos {:.3} vs hard-negative cos {:.3}, {elapsed:.2?}",
        r.initial_loss, r.final_loss, r.loss_ratio, sim.positive_cosine, sim.hard_negative_cosine
    );
    ensure!(r.loss_ratio <= 0.5, "{detail}");
    ensure!(sim.positive_cosine > sim.hard_negative_cosine, "{detail}");
    ensure!(elapsed < Duration::from_secs(60), "{detail}");
    Ok(detail)
}

const POSITIVES: [Strategy; 4] = [Strategy::Tom, Strategy::Tum, Strategy::Reo, Strategy::Para];
/// Angular offsets of the four positives; pairwise gaps are all distinct.
const OFFSETS: [f64; 4] = [0.0, 0.3, 0.7, 1.2];
/// Pairs by increasing angular gap: 0.3, 0.4, 0.5, 0.7, 0.9, 1.2.
const PAIRS_BY_DIFFICULTY: [(Strategy, Strategy); 6] = [
    (Strategy::Tom, Strategy::Tum),
    (Strategy::Tum, Strategy::Reo),
    (Strategy::Reo, Strategy::Para),
    (Strategy::Tom, Strategy::Reo),
    (Strategy::Tum, Strategy::Para),
    (Strategy::Tom, Strategy::Para),
];

fn unit(angle: f64) -> EmbeddingVector {
    EmbeddingVector::new(vec![angle.cos(), angle.sin()]).unwrap()
}

fn difficulty_filter() -> Outcome {
    const B: usize = 10;
    let entries: Vec<(String, f64)> =
        (0..30).map(|i| (format!("f{i:02}"), ((i * 7) % 30) as f64 * 1.5 + 2.0)).collect();
    let buckets = assign_buckets(&entries, B).map_err(|e| e.to_string())?;
    for (i, (_, di)) in entries.iter().enumerate() {
        let rank = entries.iter().filter(|(_, dj)| dj < di).count();
        ensure!(buckets[i] == rank * B / 30, "{}: bucket {} for rank {rank}", entries[i].0, buckets[i]);
    }

    let mut checked = 0;
    for (i, (id, _)) in entries.iter().enumerate() {
        let base = 0.2 * i as f64;
        let positives: Vec<(Strategy, EmbeddingVector)> =
            POSITIVES.iter().zip(OFFSETS).map(|(&s, o)| (s, unit(base + o))).collect();
        // The near negative sits between the positives; which strategy gets it alternates.
        let (near, far) = (unit(base + 0.5), unit(base + 2.8));
        let negatives = if i % 2 == 0 {
            vec![(Strategy::Ent, near), (Strategy::Int, far)]
        } else {
            vec![(Strategy::Ent, far), (Strategy::Int, near)]
        };
        let near_strategy = if i % 2 == 0 { Strategy::Ent } else { Strategy::Int };

        let bucket = buckets[i];
        let sel = select_samples(&positives, &negatives, bucket, B, 1).map_err(|e| e.to_string())?;
        let rank = bucket.min(PAIRS_BY_DIFFICULTY.len() - 1);
        ensure!(sel.pair_rank == rank, "{id}: pair rank {} for bucket {bucket}", sel.pair_rank);
        ensure!(sel.pair == PAIRS_BY_DIFFICULTY[rank], "{id}: pair {:?}, expected {:?}", sel.pair, PAIRS_BY_DIFFICULTY[rank]);
        ensure!(sel.negatives.len() == 1, "{id}: {} negatives", sel.negatives.len());
        let wants_near = bucket >= B / 2;
        ensure!(
            (sel.negatives[0].strategy == near_strategy) == wants_near,
            "{id}: bucket {bucket} picked {}",
            sel.negatives[0].strategy
        );
        checked += 1;
    }
    Ok(format!("{checked} conversations: buckets monotone, pair rank = clamped bucket, top half takes the harder negative"))
}

fn prompt_fidelity() -> Outcome {
    let kinds: Vec<PromptKind> = PromptKind::ALL.into_iter().filter(|k| k.is_three_step()).collect();
    let mut rendered = 0;
    for conv in fixture_corpus() {
        for &kind in &kinds {
            let p = build_prompt(kind, conv.turns()).map_err(|e| e.to_string())?;
            for m in STEP_MARKERS {
                let count = p.matches(m).count();
                ensure!(count == 1, "{kind} prompt for {}: `{m}` appears {count} times", conv.id());
            }
            rendered += 1;
        }
    }
    let deps = parse_dependency_list("Necessary Turns: Turn2.").map_err(|e| e.to_string())?;
    ensure!(deps == BTreeSet::from([2]), "parsed {deps:?}");

    let completion = format!(
        "{}\nOutput: Theme - Paris attractions.\n{}\nOutput: Turn2 is relevant.\n{}\nNecessary Turns:\nTurn2.",
        STEP_MARKERS[0], STEP_MARKERS[1], STEP_MARKERS[2]
    );
    let out = parse_three_step_response(PromptKind::Deps, &completion).map_err(|e| e.to_string())?;
    ensure!(
        matches!(&out.payload, Payload::Dependencies { turns } if *turns == BTreeSet::from([2])),
        "three-step parse gave {:?}",
        out.payload
    );
    Ok(format!("{rendered} prompts carry each step marker exactly once; `Necessary Turns: Turn2.` parses to {{2}}"))
}

fn pipeline_config(out: &Path, mock: &Path, workers: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        corpus: fixture_dir().join("corpus20.jsonl"),
        output_dir: out.to_path_buf(),
        workers,
        ..PipelineConfig::default()
    };
    cfg.backend.completion = Some(BackendSpec::Mock(mock.to_path_buf()));
    cfg.train.batch_size = 4;
    cfg.train.steps = 20;
    cfg.train.temperature = 0.1;
    cfg.train.learning_rate = 0.5;
    cfg.train.feature_dim = 256;
    cfg.train.embedding_dim = 16;
    cfg
}

fn artifacts(out: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(out).unwrap() {
        let dir = entry.unwrap().path();
        if !dir.is_dir() || dir.ends_with("cache") {
            continue;
        }
        for f in fs::read_dir(&dir).unwrap() {
            let f = f.unwrap().path();
            files.insert(f.strip_prefix(out).unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap());
        }
    }
    files
}

fn timed_run(out: &Path, mock: &Path, workers: usize) -> Result<(BTreeMap<String, Vec<u8>>, Duration), String> {
    let start = Instant::now();
    let p = Pipeline::new(pipeline_config(out, mock, workers)).map_err(|e| e.to_string())?;
    p.run_all().map_err(|e| e.to_string())?;
    let report = ctxaug::pipeline::validate(&p).map_err(|e| e.to_string())?;
    ensure!(report.is_clean(), "validation: {:?}", report.violations);
    Ok((artifacts(out), start.elapsed()))
}

fn determinism_and_resume() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mock = tmp.path();
    let (a, ta) = timed_run(&tmp.path().join("a"), mock, 1)?;
    let (b, tb) = timed_run(&tmp.path().join("b"), mock, 4)?;
    ensure!(a == b, "two full runs differ");
    let mut slowest = ta.max(tb);

    for stop in 1..=5 {
        let out = tmp.path().join(format!("stop{stop}"));
        {
            let p = Pipeline::new(pipeline_config(&out, mock, 2)).map_err(|e| e.to_string())?;
            let stages: [&dyn Fn() -> ctxaug::Result<()>; 5] = [
                &|| p.deps().map(drop),
                &|| p.augment().map(drop),
                &|| p.score().map(drop),
                &|| p.filter().map(drop),
                &|| p.export().map(drop),
            ];
            for stage in &stages[..stop] {
                stage().map_err(|e| e.to_string())?;
            }
        }
        let (resumed, t) = timed_run(&out, mock, 2)?;
        ensure!(resumed == a, "resume after stage {stop} differs");
        slowest = slowest.max(t);
    }
    let exported: Vec<serde_json::Value> =
        read_jsonl(&tmp.path().join("a/export/batches.jsonl")).map_err(|e| e.to_string())?;
    ensure!(slowest < Duration::from_secs(30), "slowest run {slowest:?}");
    Ok(format!(
        "{} files byte-identical across workers 1/4 and 5 resume points, {} exported, slowest run {slowest:.2?}",
        a.len(),
        exported.len()
    ))
}

fn batch_cardinalities() -> Outcome {
    let corpus = synthetic_corpus(12, 1, 9);
    let batch = assemble_batch(&corpus, 1).map_err(|e| e.to_string())?;
    ensure!(batch.anchors.len() == 24, "{} anchors", batch.anchors.len());
    for a in 0..batch.anchors.len() {
        let negs = batch.contrastive_negatives(a);
        let in_batch = negs.iter().filter(|m| matches!(m, Member::Anchor(_))).count();
        let hard = negs.len() - in_batch;
        ensure!(
            negs.len() == 34 && in_batch == 22 && hard == 12,
            "anchor {a}: {in_batch} in-batch + {hard} hard"
        );
        ensure!(!negs.contains(&Member::Anchor(a)), "anchor {a} is its own negative");
    }
    Ok("24 anchors, each with 22 in-batch + 12 hard = 34 negatives".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("dag-constraints", dag_constraints),
        ("topic-count-oracles", topic_oracles),
        ("loss-oracles", loss_oracles),
        ("gradient-check", gradient_check),
        ("toy-training", toy_training),
        ("difficulty-filter", difficulty_filter),
        ("prompt-fidelity", prompt_fidelity),
        ("determinism-resume", determinism_and_resume),
        ("batch-cardinalities", batch_cardinalities),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match result {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

