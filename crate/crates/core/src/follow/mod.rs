//! Relation following: `Y = X.follow(R)` over the key-value memory.

mod graph;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityId, PreprocessedExample};
use crate::encoder::{encode_example, entity_lookup, relation_embedding, ModelParams};
use crate::error::{Result, VkbError};
use crate::memory::{retrieve_topk, KeyValueMemory, RetrievalResult};
use crate::tensor::vec_matmul;

pub use graph::{follow_loss_graph, question_relation_graph, FollowGraphConfig};

/// Probability floor for set-valued retrieval losses.
pub const LOSS_FLOOR: f64 = 1e-9;

/// A weighted set of entities. Entities are unique; weights are nonnegative.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightedEntitySet {
    pub entities: Vec<EntityId>,
    pub weights: Vec<f64>,
}

impl WeightedEntitySet {
    /// Merges duplicate entities by summing their weights, keeping first-seen order.
    pub fn new(items: impl IntoIterator<Item = (EntityId, f64)>) -> Result<Self> {
        let mut pos: BTreeMap<EntityId, usize> = BTreeMap::new();
        let mut out = Self::default();
        for (e, w) in items {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(VkbError::InvalidConfig(format!("weight {w} for entity {e}")));
            }
            match pos.get(&e) {
                Some(&i) => out.weights[i] += w,
                None => {
                    pos.insert(e, out.entities.len());
                    out.entities.push(e);
                    out.weights.push(w);
                }
            }
        }
        Ok(out)
    }

    pub fn singleton(e: EntityId) -> Self {
        Self {
            entities: vec![e],
            weights: vec![1.0],
        }
    }

    /// Equal weights over the distinct entities of `entities`.
    pub fn uniform(entities: &[EntityId]) -> Self {
        let set = Self::new(entities.iter().map(|&e| (e, 1.0))).expect("unit weights are valid");
        set.normalized()
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn support(&self) -> BTreeSet<EntityId> {
        self.entities.iter().copied().collect()
    }

    pub fn weight_of(&self, e: EntityId) -> f64 {
        self.entities
            .iter()
            .position(|&x| x == e)
            .map_or(0.0, |i| self.weights[i])
    }

    /// Weights divided by their sum; unchanged when the sum is zero.
    pub fn normalized(&self) -> Self {
        let s: f64 = self.weights.iter().sum();
        if s <= 0.0 {
            return self.clone();
        }
        Self {
            entities: self.entities.clone(),
            weights: self.weights.iter().map(|w| w / s).collect(),
        }
    }

    /// Entities by descending weight, ties by ascending id.
    pub fn ranked(&self) -> Vec<(EntityId, f64)> {
        let mut v: Vec<(EntityId, f64)> = self.entities.iter().copied().zip(self.weights.iter().copied()).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    /// The `k` heaviest entities, renormalized, in ranked order.
    pub fn top_k(&self, k: usize) -> Self {
        let mut r = self.ranked();
        r.truncate(k);
        Self {
            entities: r.iter().map(|x| x.0).collect(),
            weights: r.iter().map(|x| x.1).collect(),
        }
        .normalized()
    }

    pub fn argmax(&self) -> Option<EntityId> {
        self.ranked().first().map(|x| x.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FollowQuery {
    pub vector: Vec<f64>,
    pub hop_index: usize,
    pub relation_emb: Vec<f64>,
}

/// `Σ α_i E[x_i]` with α normalized to sum 1.
pub fn centroid(params: &ModelParams, x: &WeightedEntitySet) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(VkbError::EmptySet);
    }
    let x = x.normalized();
    let mut acc = vec![0.0; params.config.entity_dim];
    for (&e, &w) in x.entities.iter().zip(&x.weights) {
        for (a, v) in acc.iter_mut().zip(entity_lookup(params, e)?) {
            *a += w * v;
        }
    }
    Ok(acc)
}

fn check_hop(params: &ModelParams, hop: usize) -> Result<()> {
    let max = params.config.max_hops;
    if hop == 0 || hop > max {
        return Err(VkbError::HopOutOfRange { hop, max });
    }
    Ok(())
}

/// `W_qᵀ [topic; W_t^(hop)ᵀ r]`, shared by set-based and mention-based queries.
pub fn query_from_topic(
    params: &ModelParams,
    topic: &[f64],
    relation_emb: &[f64],
    hop: usize,
) -> Result<FollowQuery> {
    check_hop(params, hop)?;
    let l = &params.layout;
    let mut cat = topic.to_vec();
    cat.extend(vec_matmul(relation_emb, params.get(l.w_t[hop - 1])));
    Ok(FollowQuery {
        vector: vec_matmul(&cat, params.get(l.w_q)),
        hop_index: hop,
        relation_emb: relation_emb.to_vec(),
    })
}

pub fn follow_query(
    params: &ModelParams,
    x: &WeightedEntitySet,
    relation_emb: &[f64],
    hop: usize,
) -> Result<FollowQuery> {
    check_hop(params, hop)?;
    query_from_topic(params, &centroid(params, x)?, relation_emb, hop)
}

/// Value entities of a retrieval with their weights summed.
pub fn aggregate(result: &RetrievalResult) -> WeightedEntitySet {
    WeightedEntitySet::new(result.hits.iter().map(|h| (h.value_entity, h.weight)))
        .expect("softmax weights are valid")
}

/// One hop, also returning the raw retrieval.
pub fn follow_with_retrieval(
    memory: &KeyValueMemory,
    params: &ModelParams,
    x: &WeightedEntitySet,
    relation_emb: &[f64],
    k: usize,
    hop: usize,
) -> Result<(WeightedEntitySet, RetrievalResult)> {
    let q = follow_query(params, x, relation_emb, hop)?;
    let result = retrieve_topk(memory, &q.vector, k, Some(&x.support()))?;
    let y = aggregate(&result);
    Ok((
        WeightedEntitySet::new(y.ranked()).expect("valid weights"),
        result,
    ))
}

/// One hop; the output is in ranked order.
pub fn follow(
    memory: &KeyValueMemory,
    params: &ModelParams,
    x: &WeightedEntitySet,
    relation_emb: &[f64],
    k: usize,
    hop: usize,
) -> Result<WeightedEntitySet> {
    Ok(follow_with_retrieval(memory, params, x, relation_emb, k, hop)?.0)
}

/// Chains `hops` follows, truncating each intermediate set to its top `k`
/// entities. Returns the final set and the final-hop retrieval.
pub fn multi_hop_follow_with_retrieval(
    memory: &KeyValueMemory,
    params: &ModelParams,
    x: &WeightedEntitySet,
    relation_emb: &[f64],
    hops: usize,
    k: usize,
) -> Result<(WeightedEntitySet, RetrievalResult)> {
    check_hop(params, hops)?;
    let mut current = x.clone();
    for hop in 1..=hops {
        let (y, result) = follow_with_retrieval(memory, params, &current, relation_emb, k, hop)?;
        if hop == hops {
            return Ok((y, result));
        }
        if y.is_empty() {
            return Err(VkbError::EmptyIntermediate(hop));
        }
        current = y.top_k(k);
    }
    unreachable!("hops >= 1")
}

pub fn multi_hop_follow(
    memory: &KeyValueMemory,
    params: &ModelParams,
    x: &WeightedEntitySet,
    relation_emb: &[f64],
    hops: usize,
    k: usize,
) -> Result<WeightedEntitySet> {
    Ok(multi_hop_follow_with_retrieval(memory, params, x, relation_emb, hops, k)?.0)
}

/// `-log Σ β` over hits whose value is an answer; `-log LOSS_FLOOR` when no
/// hit is one.
pub fn follow_loss(result: &RetrievalResult, answers: &BTreeSet<EntityId>) -> f64 {
    let correct: Vec<f64> = result
        .hits
        .iter()
        .filter(|h| answers.contains(&h.value_entity))
        .map(|h| h.weight)
        .collect();
    if correct.is_empty() {
        return -LOSS_FLOOR.ln();
    }
    (-correct.iter().sum::<f64>().max(f64::MIN_POSITIVE).ln()).max(0.0)
}

/// Relation embedding of a preprocessed question (first `[R1]`, `[R2]`).
pub fn question_relation(params: &ModelParams, ex: &PreprocessedExample) -> Result<Vec<f64>> {
    let ctx = encode_example(params, ex)?;
    relation_embedding(params, &ctx, ex.r1_pos, ex.r2_pos)
}

/// Answers a masked question end to end.
pub fn answer_question(
    memory: &KeyValueMemory,
    params: &ModelParams,
    ex: &PreprocessedExample,
    hops: usize,
    k: usize,
) -> Result<WeightedEntitySet> {
    let r = question_relation(params, ex)?;
    multi_hop_follow(memory, params, &WeightedEntitySet::uniform(&ex.topics), &r, hops, k)
}
