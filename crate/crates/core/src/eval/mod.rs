//! Hits@1, the symbolic oracle, the held-out relation protocol and the
//! relation-embedding margin diagnostic.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{preprocess_question, EntityId, PreprocessedExample, Question, SymbolicKB, TopicMode};
use crate::encoder::{example_relation_embedding, ModelParams};
use crate::error::{Result, VkbError};
use crate::follow::answer_question;
use crate::lm::{answer_lm, LmAnswerConfig};
use crate::memory::{KeyValueMemory, MemoryConfig};
use crate::tensor::dot;
use crate::training::{finetune_follow, FollowExample, FollowTrainConfig, TrainConfig, TrainObserver};

/// Fraction of questions whose top prediction is in the gold set. An empty
/// ranking is a miss; no questions at all scores 0.
pub fn hits_at_1(predictions: &[Vec<EntityId>], gold: &[BTreeSet<EntityId>]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(VkbError::LengthMismatch(predictions.len(), gold.len()));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.first().is_some_and(|e| g.contains(e)))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Exact relational composition by breadth-wise joins over the facts.
pub fn symbolic_follow(kb: &SymbolicKB, x: &BTreeSet<EntityId>, relations: &[u32]) -> Result<BTreeSet<EntityId>> {
    let known = kb.relation_set();
    let n = kb.relation_names.len() as u32;
    if let Some(r) = relations.iter().find(|&&r| r >= n && !known.contains(&r)) {
        return Err(VkbError::UnknownRelation(r.to_string()));
    }
    let mut current = x.clone();
    for &r in relations {
        let mut next = BTreeSet::new();
        for f in kb.facts.iter().filter(|f| f.relation == r) {
            if current.contains(&f.subject) {
                next.insert(f.object);
            }
        }
        current = next;
    }
    Ok(current)
}

/// Entities reachable from `topics` in exactly `hops` steps over the pairs
/// stored in memory, ignoring keys.
pub fn memory_reachable(memory: &KeyValueMemory, topics: &BTreeSet<EntityId>, hops: usize) -> BTreeSet<EntityId> {
    let mut current = topics.clone();
    for _ in 0..hops {
        current = current
            .iter()
            .flat_map(|&t| memory.entries_with_topic(t).iter().map(|&i| memory.entries()[i].value_entity))
            .collect();
    }
    current
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub predicted: Option<EntityId>,
    pub gold: Vec<EntityId>,
    /// 1-based rank of the best-ranked gold entity, if any was ranked.
    pub rank: Option<usize>,
    pub correct: bool,
    /// Some answer is reachable through pairs stored in the memory.
    pub covered: bool,
    pub hops: usize,
    pub relations: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub hits_at_1: f64,
    pub coverage: f64,
    pub questions: usize,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn from_records(split: impl Into<String>, records: Vec<EvalRecord>) -> Self {
        let n = records.len();
        let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
        Self {
            split: split.into(),
            hits_at_1: frac(records.iter().filter(|r| r.correct).count()),
            coverage: frac(records.iter().filter(|r| r.covered).count()),
            questions: n,
            records,
        }
    }

    /// The report restricted to records satisfying `keep`.
    pub fn subset(&self, split: impl Into<String>, keep: impl Fn(&EvalRecord) -> bool) -> Self {
        Self::from_records(split, self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    /// Hits@1 over questions the memory covers.
    pub fn covered(&self) -> Self {
        self.subset(format!("{}/covered", self.split), |r| r.covered)
    }
}

fn record(
    index: usize,
    ranking: &[EntityId],
    gold: &BTreeSet<EntityId>,
    covered: bool,
    q: &Question,
) -> EvalRecord {
    let predicted = ranking.first().copied();
    EvalRecord {
        index,
        predicted,
        gold: gold.iter().copied().collect(),
        rank: ranking.iter().position(|e| gold.contains(e)).map(|i| i + 1),
        correct: predicted.is_some_and(|e| gold.contains(&e)),
        covered,
        hops: q.hops,
        relations: q.relations.clone(),
    }
}

/// Oracle answers of a question: the symbolic composition of its labeled
/// path, or its stored answers when unlabeled.
pub fn gold_answers(kb: &SymbolicKB, q: &Question) -> Result<BTreeSet<EntityId>> {
    if q.relations.is_empty() {
        return Ok(q.answers.iter().copied().collect());
    }
    symbolic_follow(kb, &q.topic_entities().into_iter().collect(), &q.relations)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 8 }
    }
}

/// Relation following on masked questions, scored against the oracle.
pub fn evaluate_follow(
    memory: &KeyValueMemory,
    params: &ModelParams,
    kb: &SymbolicKB,
    questions: &[Question],
    split: &str,
    cfg: EvalConfig,
) -> Result<EvalReport> {
    let records = questions
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let gold = gold_answers(kb, q)?;
            let ex = preprocess_question(&q.tokens, &q.mentions, TopicMode::Masked)?;
            let ranking: Vec<EntityId> = match answer_question(memory, params, &ex, q.hops, cfg.k) {
                Ok(set) => set.ranked().into_iter().map(|(e, _)| e).collect(),
                // A chain that dies out predicts nothing.
                Err(VkbError::EmptyIntermediate(_)) => Vec::new(),
                Err(e) => return Err(e),
            };
            let topics: BTreeSet<EntityId> = ex.topics.iter().copied().collect();
            let covered = !memory_reachable(memory, &topics, q.hops).is_disjoint(&gold);
            Ok(record(i, &ranking, &gold, covered, q))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(split, records))
}

/// Masked-entity prediction on questions with surface-form topics, with or
/// without memory mixing.
pub fn evaluate_lm(
    memory: &KeyValueMemory,
    params: &ModelParams,
    kb: &SymbolicKB,
    questions: &[Question],
    split: &str,
    cfg: LmAnswerConfig,
) -> Result<EvalReport> {
    let records = questions
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let gold = gold_answers(kb, q)?;
            let ex = crate::corpus::preprocess_conjunction(&q.tokens, &q.mentions, TopicMode::Surface)?;
            let lm_cfg = LmAnswerConfig { hops: q.hops, ..cfg };
            let (ranked, _) = answer_lm(memory, params, &ex, lm_cfg)?;
            let ranking: Vec<EntityId> = ranked.into_iter().map(|(e, _)| e).collect();
            let topics: BTreeSet<EntityId> = ex.topics.iter().copied().collect();
            let covered = !memory_reachable(memory, &topics, q.hops).is_disjoint(&gold);
            Ok(record(i, &ranking, &gold, covered, q))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(split, records))
}

/// Masked follow-training examples with oracle answers.
pub fn follow_examples(kb: &SymbolicKB, questions: &[Question]) -> Result<Vec<FollowExample>> {
    questions
        .iter()
        .map(|q| {
            Ok(FollowExample {
                example: preprocess_question(&q.tokens, &q.mentions, TopicMode::Masked)?,
                answers: gold_answers(kb, q)?,
                hops: q.hops,
                relations: q.relations.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HoldoutConfig {
    pub memory: MemoryConfig,
    pub finetune: TrainConfig,
    pub follow: FollowTrainConfig,
    pub eval: EvalConfig,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        Self {
            memory: MemoryConfig::default(),
            finetune: TrainConfig {
                stage: crate::training::Stage::FollowFinetune,
                ..Default::default()
            },
            follow: FollowTrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HoldoutOutcome {
    pub seen: EvalReport,
    pub novel: EvalReport,
    /// Relations of every question the finetuner consumed.
    pub audit: BTreeSet<u32>,
    pub params: ModelParams,
    pub memory: KeyValueMemory,
}

pub fn check_holdout(kb: &SymbolicKB, holdout: &BTreeSet<u32>) -> Result<()> {
    if holdout.is_empty() {
        return Err(VkbError::InvalidConfig("holdout set is empty".into()));
    }
    let all = kb.relation_set();
    if let Some(r) = holdout.iter().find(|r| !all.contains(r)) {
        return Err(VkbError::UnknownRelation(r.to_string()));
    }
    let remaining = all.difference(holdout).count();
    if remaining < 2 {
        return Err(VkbError::InvalidConfig(format!(
            "holdout leaves {remaining} training relation(s); need at least 2"
        )));
    }
    Ok(())
}

fn uses_holdout(q: &Question, holdout: &BTreeSet<u32>) -> bool {
    q.relations.iter().any(|r| holdout.contains(r))
}

/// Builds the memory over the whole corpus with `pretrained`, finetunes on
/// training questions that avoid every held-out relation, and scores test
/// questions split by whether they need a held-out relation.
#[allow(clippy::too_many_arguments)]
pub fn holdout_relation_eval(
    corpus: &[crate::corpus::AnnotatedPassage],
    kb: &SymbolicKB,
    train: &[Question],
    test: &[Question],
    holdout: &BTreeSet<u32>,
    pretrained: &ModelParams,
    cfg: &HoldoutConfig,
    observer: &mut dyn TrainObserver,
) -> Result<HoldoutOutcome> {
    check_holdout(kb, holdout)?;
    let mut params = pretrained.clone();
    let memory = cfg.memory.build(corpus, &params)?;
    let seen_train: Vec<Question> = train.iter().filter(|q| !uses_holdout(q, holdout)).cloned().collect();
    let examples = follow_examples(kb, &seen_train)?;
    let outcome = finetune_follow(&mut params, &memory, &examples, &cfg.finetune, cfg.follow, observer)?;
    let memory = memory.rekeyed(&params)?;
    let report = evaluate_follow(&memory, &params, kb, test, "test", cfg.eval)?;
    let seen = report.subset("seen", |r| !r.relations.iter().any(|x| holdout.contains(x)));
    let novel = report.subset("novel", |r| r.relations.iter().any(|x| holdout.contains(x)));
    Ok(HoldoutOutcome {
        seen,
        novel,
        audit: outcome.audit,
        params,
        memory,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub within: f64,
    pub between: f64,
    pub margin: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Mean cosine over all within-group pairs and over all cross-group pairs.
pub fn embedding_margin(groups: &[Vec<Vec<f64>>]) -> Result<Margin> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        return Err(VkbError::InsufficientExamples(
            "need at least 2 relations with 2 examples each".into(),
        ));
    }
    let (mut ws, mut wn, mut bs, mut bn) = (0.0, 0usize, 0.0, 0usize);
    for (gi, g) in groups.iter().enumerate() {
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                ws += cosine(&g[i], &g[j]);
                wn += 1;
            }
        }
        for h in &groups[gi + 1..] {
            for a in g {
                for b in h {
                    bs += cosine(a, b);
                    bn += 1;
                }
            }
        }
    }
    let within = ws / wn as f64;
    let between = bs / bn as f64;
    Ok(Margin {
        within,
        between,
        margin: within - between,
    })
}

/// [`embedding_margin`] of relation embeddings of examples grouped by their
/// true relation id.
pub fn relation_embedding_margin(
    groups: &BTreeMap<u32, Vec<PreprocessedExample>>,
    params: &ModelParams,
) -> Result<Margin> {
    let embedded = groups
        .values()
        .map(|exs| {
            exs.par_iter()
                .map(|ex| example_relation_embedding(params, ex))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    embedding_margin(&embedded)
}

#[cfg(test)]
mod tests;
