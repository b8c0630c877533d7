//! The resumable stages. Each reads its prerequisites' artifacts, fans
//! per-conversation work out to the worker pool, and commits one JSONL file
//! plus a manifest.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::manifest::{digest_of, read_jsonl, sha256_hex, to_jsonl, StageDir, StageManifest, Status};
use crate::conversation::{parse_conversation, AugmentedConversation, Conversation, Polarity, Strategy};
use crate::difficulty::{assign_buckets, select_samples, DifficultyRecord, EmbeddingVector};
use crate::error::{Error, Result};
use crate::graph::DependencyGraph;
use crate::llm::{generate_noisy_turn, identify_dependencies, paraphrase, replace_entities, shift_intent, LlmClient};
use crate::rules::{insert_noisy_turn, mask_tokens, mask_turns, reorder_turns, seeded_rng};
use crate::tokens::{concat_sequence, concat_turns, detokenize};
use crate::trainer::{train_toy, TrainingExample, TrainingReport};

pub const STAGES: [&str; 7] = ["deps", "augment", "score", "filter", "export", "train-toy", "validate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepsRecord {
    pub conversation_id: String,
    pub graph: Option<DependencyGraph>,
    #[serde(default)]
    pub fallback_turns: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyFailure {
    pub strategy: Strategy,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub conversation_id: String,
    pub variants: Vec<AugmentedConversation>,
    pub failures: Vec<StrategyFailure>,
}

impl AugmentRecord {
    pub fn of_polarity(&self, polarity: Polarity) -> impl Iterator<Item = &AugmentedConversation> {
        self.variants.iter().filter(move |v| v.polarity == polarity)
    }

    pub fn variant(&self, strategy: Strategy) -> Option<&AugmentedConversation> {
        self.variants.iter().find(|v| v.strategy == strategy)
    }
}

/// One exported conversation and the batch it was assigned to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub batch: usize,
    #[serde(flatten)]
    pub example: TrainingExample,
}

pub struct Corpus {
    pub conversations: Vec<Conversation>,
    /// `(line label, reason)` for records that failed to parse.
    pub rejected: Vec<(String, String)>,
    pub digest: String,
}

impl Corpus {
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        let bytes = fs::read(&config.corpus)
            .map_err(|e| Error::ConfigInvalid(format!("corpus {}: {e}", config.corpus.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|e| Error::MalformedRecord(format!("{}: {e}", config.corpus.display())))?;
        let mut conversations = Vec::new();
        let mut rejected = Vec::new();
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match parse_conversation(line) {
                Ok(c) if !seen.insert(c.id().to_string()) => {
                    rejected.push((format!("line:{}", n + 1), format!("duplicate id {}", c.id())));
                }
                Ok(c) => conversations.push(c),
                Err(e) => rejected.push((format!("line:{}", n + 1), e.to_string())),
            }
        }
        Ok(Corpus {
            conversations,
            rejected,
            digest: sha256_hex(&bytes),
        })
    }

    pub fn by_id(&self) -> HashMap<&str, &Conversation> {
        self.conversations.iter().map(|c| (c.id(), c)).collect()
    }
}

/// Runs stages against one configuration on a bounded worker pool.
pub struct Pipeline {
    pub config: PipelineConfig,
    pool: rayon::ThreadPool,
}

pub struct StageOutcome {
    pub manifest: StageManifest,
    pub reused: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.worker_count())
            .build()
            .map_err(|e| Error::ConfigInvalid(format!("worker pool: {e}")))?;
        Ok(Pipeline { config, pool })
    }

    pub fn stage_dir(&self, stage: &'static str) -> StageDir {
        let file = match stage {
            "deps" => "graphs.jsonl",
            "augment" => "augmented.jsonl",
            "score" => "scores.jsonl",
            "filter" => "difficulty.jsonl",
            "export" => "batches.jsonl",
            "train-toy" => "metrics.jsonl",
            "validate" => "report.json",
            other => panic!("unknown stage {other}"),
        };
        StageDir::new(&self.config.output_dir, stage, file)
    }

    /// Results come back in input order regardless of scheduling.
    fn par_map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
        self.pool.install(|| items.par_iter().map(f).collect())
    }

    fn client(&self) -> Result<LlmClient> {
        self.config.completion_client()
    }

    fn run_stage(
        &self,
        stage: &'static str,
        input_digest: String,
        compute: impl FnOnce() -> Result<(Vec<u8>, BTreeMap<String, Status>)>,
    ) -> Result<StageOutcome> {
        let dir = self.stage_dir(stage);
        if let Some(manifest) = dir.reusable(&input_digest)? {
            log::info!("{stage}: inputs unchanged, reusing {}", dir.output().display());
            return Ok(StageOutcome { manifest, reused: true });
        }
        let (bytes, statuses) = compute()?;
        let manifest = dir.commit(input_digest, &bytes, statuses)?;
        log::info!(
            "{stage}: {} ok, {} degenerate, {} failed",
            manifest.count(|s| *s == Status::Ok),
            manifest.count(|s| matches!(s, Status::Degenerate(_))),
            manifest.count(Status::is_failed)
        );
        Ok(StageOutcome { manifest, reused: false })
    }

    pub fn deps(&self) -> Result<StageOutcome> {
        let corpus = Corpus::load(&self.config)?;
        let client = self.client()?;
        let input = digest_of(&("deps", &corpus.digest, client.backend_id()));
        self.run_stage("deps", input, || {
            let records = self.par_map(&corpus.conversations, |conv| match identify_dependencies(conv, &client) {
                Ok(out) => DepsRecord {
                    conversation_id: conv.id().to_string(),
                    graph: Some(out.graph),
                    fallback_turns: out.fallback_turns,
                    error: None,
                },
                Err(e) => DepsRecord {
                    conversation_id: conv.id().to_string(),
                    graph: None,
                    fallback_turns: Vec::new(),
                    error: Some(e.to_string()),
                },
            });
            let mut statuses = rejected_statuses(&corpus);
            for r in &records {
                let status = match (&r.error, r.fallback_turns.is_empty()) {
                    (Some(e), _) => Status::Failed(e.clone()),
                    (None, true) => Status::Ok,
                    (None, false) => Status::Degenerate(format!("full-prefix fallback for turns {:?}", r.fallback_turns)),
                };
                statuses.insert(r.conversation_id.clone(), status);
            }
            Ok((to_jsonl(&records), statuses))
        })
    }

    fn augment_one(&self, conv: &Conversation, graph: Option<&DependencyGraph>, client: Option<&LlmClient>) -> AugmentRecord {
        let rules = &self.config.rules;
        let mut variants = Vec::new();
        let mut failures = Vec::new();
        for &strategy in Strategy::ALL.iter().filter(|s| self.config.strategies.contains(s)) {
            let mut rng = seeded_rng(rules.global_seed, conv.id(), strategy.name());
            let need_graph = || graph.ok_or_else(|| Error::MissingPrerequisiteStage("deps".into()));
            let need_client = || client.ok_or_else(|| Error::ConfigInvalid("no completion backend".into()));
            let result = match strategy {
                Strategy::Tom => Ok(mask_tokens(conv, rules, &mut rng)),
                Strategy::Tum => need_graph().and_then(|g| mask_turns(conv, g, rules, &mut rng)),
                Strategy::Reo => need_graph().and_then(|g| reorder_turns(conv, g, &mut rng)),
                Strategy::Noi => need_client()
                    .and_then(|c| generate_noisy_turn(conv, c))
                    .map(|noisy| insert_noisy_turn(conv, &noisy, &mut rng)),
                Strategy::Para => need_client().and_then(|c| paraphrase(conv, c)),
                Strategy::Ent => need_client().and_then(|c| replace_entities(conv, c)),
                Strategy::Int => need_client().and_then(|c| shift_intent(conv, c)),
            };
            match result {
                Ok(v) => variants.push(v),
                Err(e) => failures.push(StrategyFailure {
                    strategy,
                    reason: e.to_string(),
                }),
            }
        }
        AugmentRecord {
            conversation_id: conv.id().to_string(),
            variants,
            failures,
        }
    }

    pub fn augment(&self) -> Result<StageOutcome> {
        let corpus = Corpus::load(&self.config)?;
        let deps_dir = self.stage_dir("deps");
        let deps = deps_dir.require()?;
        let client = match self.config.backend.completion {
            Some(_) => Some(self.client()?),
            None => None,
        };
        let input = digest_of(&(
            "augment",
            &corpus.digest,
            &deps.output_digest,
            &self.config.rules,
            &self.config.strategies,
            client.as_ref().map(LlmClient::backend_id),
        ));
        self.run_stage("augment", input, || {
            let graphs: HashMap<String, DependencyGraph> = read_jsonl::<DepsRecord>(&deps_dir.output())?
                .into_iter()
                .filter_map(|r| r.graph.map(|g| (r.conversation_id, g)))
                .collect();
            let records = self.par_map(&corpus.conversations, |conv| {
                self.augment_one(conv, graphs.get(conv.id()), client.as_ref())
            });
            let mut statuses = rejected_statuses(&corpus);
            for r in &records {
                let mut notes: Vec<String> = r.failures.iter().map(|f| format!("{}: {}", f.strategy, f.reason)).collect();
                for v in &r.variants {
                    notes.extend(v.degenerate_flags.iter().map(|f| format!("{}: {f}", v.strategy)));
                }
                let status = if r.variants.is_empty() {
                    Status::Failed(notes.join("; "))
                } else if notes.is_empty() {
                    Status::Ok
                } else {
                    Status::Degenerate(notes.join("; "))
                };
                statuses.insert(r.conversation_id.clone(), status);
            }
            Ok((to_jsonl(&records), statuses))
        })
    }

    pub fn score(&self) -> Result<StageOutcome> {
        let corpus = Corpus::load(&self.config)?;
        self.stage_dir("augment").require()?;
        let client = self.client()?;
        let input = digest_of(&(
            "score",
            &corpus.digest,
            client.backend_id(),
            self.config.backend.topic.to_string(),
        ));
        self.run_stage("score", input, || {
            let topics = self.config.topic_backend();
            let results = self.par_map(&corpus.conversations, |conv| DifficultyRecord::score(conv, &*topics, &client));
            let mut statuses = rejected_statuses(&corpus);
            let mut records = Vec::new();
            for (conv, r) in corpus.conversations.iter().zip(results) {
                match r {
                    Ok(rec) => {
                        statuses.insert(conv.id().to_string(), Status::Ok);
                        records.push(rec);
                    }
                    Err(e) => {
                        statuses.insert(conv.id().to_string(), Status::Failed(e.to_string()));
                    }
                }
            }
            Ok((to_jsonl(&records), statuses))
        })
    }

    fn variant_text(&self, v: &AugmentedConversation) -> String {
        detokenize(concat_turns(&v.turns, self.config.max_tokens).body())
    }

    pub fn filter(&self) -> Result<StageOutcome> {
        let score_dir = self.stage_dir("score");
        let augment_dir = self.stage_dir("augment");
        let score = score_dir.require()?;
        let augment = augment_dir.require()?;
        let k = self.config.train.hard_negatives;
        let buckets = self.config.filter.bucket_count;
        let input = digest_of(&(
            "filter",
            &score.output_digest,
            &augment.output_digest,
            self.config.backend.embedding.to_string(),
            buckets,
            k,
            self.config.max_tokens,
        ));
        self.run_stage("filter", input, || {
            let mut records: Vec<DifficultyRecord> = read_jsonl(&score_dir.output())?;
            let augmented: HashMap<String, AugmentRecord> = read_jsonl::<AugmentRecord>(&augment_dir.output())?
                .into_iter()
                .map(|r| (r.conversation_id.clone(), r))
                .collect();
            if records.is_empty() {
                return Ok((Vec::new(), BTreeMap::new()));
            }
            let entries: Vec<(String, f64)> = records.iter().map(|r| (r.conversation_id.clone(), r.diff_c)).collect();
            let assigned = assign_buckets(&entries, buckets)?;

            let embedder = self.config.embedding_backend();
            let embed = |strategies: &mut dyn Iterator<Item = &AugmentedConversation>| -> Result<Vec<(Strategy, EmbeddingVector)>> {
                let mut out = Vec::new();
                for v in strategies {
                    match EmbeddingVector::new(embedder.embed(&self.variant_text(v))?) {
                        Ok(e) => out.push((v.strategy, e)),
                        Err(Error::ZeroVector) => log::warn!("{}: {} embeds to zero, skipped", v.source_id, v.strategy),
                        Err(e) => return Err(e),
                    }
                }
                Ok(out)
            };
            let jobs: Vec<(&DifficultyRecord, usize)> = records.iter().zip(assigned.iter().copied()).collect();
            let selections = self.par_map(&jobs, |(rec, bucket)| {
                let aug = augmented
                    .get(&rec.conversation_id)
                    .ok_or_else(|| Error::IncompleteSelection("no augmentation record".into()))?;
                let pos = embed(&mut aug.of_polarity(Polarity::Positive))?;
                let neg = embed(&mut aug.of_polarity(Polarity::Negative))?;
                select_samples(&pos, &neg, *bucket, buckets, k)
            });

            let mut statuses = BTreeMap::new();
            for ((rec, bucket), sel) in records.iter_mut().zip(assigned).zip(selections) {
                rec.bucket = Some(bucket);
                let status = match sel {
                    Ok(s) => {
                        rec.selection = Some(s);
                        Status::Ok
                    }
                    Err(e) => {
                        rec.exclusion = Some(e.to_string());
                        Status::Degenerate(format!("excluded from contrastive training: {e}"))
                    }
                };
                statuses.insert(rec.conversation_id.clone(), status);
            }
            Ok((to_jsonl(&records), statuses))
        })
    }

    pub fn export(&self) -> Result<StageOutcome> {
        let corpus = Corpus::load(&self.config)?;
        let filter_dir = self.stage_dir("filter");
        let augment_dir = self.stage_dir("augment");
        let filter = filter_dir.require()?;
        let augment = augment_dir.require()?;
        let train = &self.config.train;
        let input = digest_of(&(
            "export",
            &corpus.digest,
            &filter.output_digest,
            &augment.output_digest,
            train.batch_size,
            train.hard_negatives,
            train.seed,
            self.config.max_tokens,
        ));
        self.run_stage("export", input, || {
            let by_id = corpus.by_id();
            let augmented: HashMap<String, AugmentRecord> = read_jsonl::<AugmentRecord>(&augment_dir.output())?
                .into_iter()
                .map(|r| (r.conversation_id.clone(), r))
                .collect();
            let records: Vec<DifficultyRecord> = read_jsonl(&filter_dir.output())?;
            let max = self.config.max_tokens;
            let mut statuses = BTreeMap::new();
            let mut examples = Vec::new();
            for rec in &records {
                let id = rec.conversation_id.as_str();
                let built = (|| {
                    let sel = rec
                        .selection
                        .as_ref()
                        .ok_or_else(|| Error::IncompleteSelection(rec.exclusion.clone().unwrap_or_default()))?;
                    let conv = by_id.get(id).ok_or_else(|| Error::IncompleteSelection("not in corpus".into()))?;
                    let aug = augmented
                        .get(id)
                        .ok_or_else(|| Error::IncompleteSelection("no augmentation record".into()))?;
                    let seq = |s: Strategy| {
                        aug.variant(s)
                            .map(|v| concat_turns(&v.turns, max).tokens)
                            .ok_or_else(|| Error::IncompleteSelection(format!("variant {s} missing")))
                    };
                    Ok::<_, Error>(TrainingExample {
                        conversation_id: id.to_string(),
                        passage_id: conv.gold_passage_id().unwrap_or(id).to_string(),
                        original: concat_sequence(conv, max).tokens,
                        pair: [seq(sel.pair.0)?, seq(sel.pair.1)?],
                        hard_negatives: sel.negatives.iter().map(|n| seq(n.strategy)).collect::<Result<_>>()?,
                    })
                })();
                match built {
                    Ok(ex) => examples.push(ex),
                    Err(e) => {
                        statuses.insert(id.to_string(), Status::Degenerate(format!("not exported: {e}")));
                    }
                }
            }

            let mut order: Vec<usize> = (0..examples.len()).collect();
            order.shuffle(&mut seeded_rng(train.seed, "", "export"));
            let n = train.batch_size;
            let mut batch_of = vec![0; examples.len()];
            let full = examples.len() / n;
            for (pos, &i) in order.iter().enumerate() {
                let b = pos / n;
                // a lone leftover joins the previous batch
                batch_of[i] = if b == full && examples.len() % n == 1 && full > 0 { full - 1 } else { b };
            }
            let mut out: Vec<ExportRecord> = order
                .iter()
                .map(|&i| ExportRecord {
                    batch: batch_of[i],
                    example: examples[i].clone(),
                })
                .collect();
            out.sort_by_key(|r| r.batch);
            for r in &out {
                statuses.insert(r.example.conversation_id.clone(), Status::Ok);
            }
            Ok((to_jsonl(&out), statuses))
        })
    }

    pub fn train_toy(&self) -> Result<(StageOutcome, TrainingReport)> {
        let export_dir = self.stage_dir("export");
        let export = export_dir.require()?;
        let input = digest_of(&("train-toy", &export.output_digest, &self.config.train));
        let dir = self.stage_dir("train-toy");
        let report_path = dir.dir.join("report.json");
        let mut report = None;
        let outcome = self.run_stage("train-toy", input, || {
            let examples: Vec<TrainingExample> = read_jsonl::<ExportRecord>(&export_dir.output())?
                .into_iter()
                .map(|r| r.example)
                .collect();
            let r = train_toy(&examples, &self.config.train)?;
            let mut bytes = serde_json::to_vec_pretty(&r)?;
            bytes.push(b'\n');
            super::manifest::write_atomic(&report_path, &bytes)?;
            let metrics = r.metrics_jsonl().into_bytes();
            report = Some(r);
            Ok((metrics, BTreeMap::new()))
        })?;
        let report = match report {
            Some(r) => r,
            None => serde_json::from_slice(&fs::read(&report_path)?)?,
        };
        Ok((outcome, report))
    }

    /// Every stage in order, reusing whatever is still valid.
    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Ok(vec![
            self.deps()?,
            self.augment()?,
            self.score()?,
            self.filter()?,
            self.export()?,
            self.train_toy()?.0,
        ])
    }
}

fn rejected_statuses(corpus: &Corpus) -> BTreeMap<String, Status> {
    corpus
        .rejected
        .iter()
        .map(|(label, reason)| (label.clone(), Status::Failed(reason.clone())))
        .collect()
}
