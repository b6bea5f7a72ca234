//! Memory-mixed masked-entity prediction. Queries come from contextual
//! mention embeddings instead of linked entities, and a null pseudo-entry
//! with a zero value competes with the retrieved hits.

mod graph;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityId, PreprocessedExample};
use crate::encoder::{encode_example, mention_embedding, relation_embedding, ModelParams};
use crate::error::{Result, VkbError};
use crate::follow::{query_from_topic, FollowQuery};
use crate::memory::{memory_key, top_k_indices, Hit, KeyValueMemory, RetrievalResult};
use crate::tensor::{dot, softmax};

pub use graph::{lm_loss_graph, LmGraphConfig, LmLossNodes};

/// One retrieve-and-mix step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HopTrace {
    pub query: Vec<f64>,
    /// Real hits; their weights come from the joint softmax with the null entry.
    pub hits: Vec<(usize, EntityId, f64, f64)>,
    pub null_score: f64,
    pub null_weight: f64,
    pub lambda: f64,
    /// `e_Y = Σ β E[value]` over real hits.
    pub aggregated: Vec<f64>,
    /// The vector the contribution was added to.
    pub base: Vec<f64>,
    pub mixed: Vec<f64>,
}

impl HopTrace {
    /// `base + λ·e_Y`, recomputed.
    pub fn replay(&self) -> Vec<f64> {
        if self.hits.is_empty() {
            return self.base.clone();
        }
        add_scaled(&self.base, self.lambda, &self.aggregated)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixResult {
    pub mixed: Vec<f64>,
    /// Mixing mass of the final hop; the mean over topics for conjunctions.
    pub lambda: f64,
    pub retrieval: RetrievalResult,
    pub null_weight: f64,
    pub aggregated: Vec<f64>,
    pub trace: Vec<HopTrace>,
}

fn add_scaled(base: &[f64], c: f64, v: &[f64]) -> Vec<f64> {
    base.iter().zip(v).map(|(b, x)| b + c * x).collect()
}

/// `W_kᵀ [m_e1; r_null]`.
pub fn null_key(params: &ModelParams, m_e1: &[f64]) -> Vec<f64> {
    memory_key(params, m_e1, params.get(params.layout.r_null).row(0))
}

/// Same projection stack as a follow query with the centroid replaced by `m_e1`.
pub fn lm_query(params: &ModelParams, m_e1: &[f64], relation_emb: &[f64], hop: usize) -> Result<FollowQuery> {
    query_from_topic(params, m_e1, relation_emb, hop)
}

/// Unfiltered top-k plus the null entry under one softmax; returns the trace
/// of mixing into `m_e2`.
fn mix_step(
    memory: &KeyValueMemory,
    params: &ModelParams,
    m_e1: &[f64],
    relation_emb: &[f64],
    base: &[f64],
    k: usize,
    hop: usize,
) -> Result<HopTrace> {
    if k == 0 {
        return Err(VkbError::InvalidConfig("k must be at least 1".into()));
    }
    let q = lm_query(params, m_e1, relation_emb, hop)?.vector;
    let entries = memory.entries();
    let scores: Vec<f64> = entries.iter().map(|e| dot(&q, &e.key)).collect();
    let top = top_k_indices(&scores, k);
    let null_score = dot(&q, &null_key(params, m_e1));
    let mut joint: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
    joint.push(null_score);
    let beta = softmax(&joint);
    let null_weight = beta[top.len()];
    let table = params.get(params.layout.entity_table);
    let mut aggregated = vec![0.0; params.config.entity_dim];
    let mut lambda = 0.0;
    for (j, &i) in top.iter().enumerate() {
        let v = entries[i].value_entity as usize;
        for (a, x) in aggregated.iter_mut().zip(table.row(v)) {
            *a += beta[j] * x;
        }
        lambda += beta[j];
    }
    let mixed = if top.is_empty() {
        base.to_vec()
    } else {
        add_scaled(base, lambda, &aggregated)
    };
    Ok(HopTrace {
        query: q,
        hits: top
            .iter()
            .enumerate()
            .map(|(j, &i)| (i, entries[i].value_entity, scores[i], beta[j]))
            .collect(),
        null_score,
        null_weight,
        lambda,
        aggregated,
        base: base.to_vec(),
        mixed,
    })
}

fn retrieval_of(memory: &KeyValueMemory, t: &HopTrace, k: usize) -> RetrievalResult {
    RetrievalResult {
        hits: t
            .hits
            .iter()
            .map(|&(entry, value, score, weight)| Hit {
                entry,
                pair: memory.entries()[entry].pair,
                value_entity: value,
                score,
                weight,
            })
            .collect(),
        k_requested: k,
    }
}

fn result_of(memory: &KeyValueMemory, trace: Vec<HopTrace>, k: usize) -> MixResult {
    let last = trace.last().expect("at least one hop");
    MixResult {
        mixed: last.mixed.clone(),
        lambda: last.lambda,
        retrieval: retrieval_of(memory, last, k),
        null_weight: last.null_weight,
        aggregated: last.aggregated.clone(),
        trace,
    }
}

/// `m′ = m_e2 + λ e_Y` with `λ` the non-null mass of the joint softmax.
pub fn retrieve_and_mix(
    memory: &KeyValueMemory,
    params: &ModelParams,
    m_e1: &[f64],
    relation_emb: &[f64],
    m_e2: &[f64],
    k: usize,
    hop: usize,
) -> Result<MixResult> {
    let t = mix_step(memory, params, m_e1, relation_emb, m_e2, k, hop)?;
    Ok(result_of(memory, vec![t], k))
}

/// Hop `t+1` uses hop `t`'s mixed vector as its topic embedding. `m_e2s` holds
/// one masked-mention embedding per hop, or a single one reused at every hop.
pub fn multi_hop_mix(
    memory: &KeyValueMemory,
    params: &ModelParams,
    m_e1: &[f64],
    relation_emb: &[f64],
    m_e2s: &[Vec<f64>],
    hops: usize,
    k: usize,
) -> Result<MixResult> {
    let max = params.config.max_hops;
    if hops == 0 || hops > max {
        return Err(VkbError::HopOutOfRange { hop: hops, max });
    }
    if m_e2s.is_empty() {
        return Err(VkbError::EmptySet);
    }
    let mut trace = Vec::with_capacity(hops);
    let mut topic = m_e1.to_vec();
    for hop in 1..=hops {
        let base = &m_e2s[(hop - 1).min(m_e2s.len() - 1)];
        let t = mix_step(memory, params, &topic, relation_emb, base, k, hop)?;
        topic = t.mixed.clone();
        trace.push(t);
    }
    Ok(result_of(memory, trace, k))
}

/// Independent first-hop retrievals per topic, `m′ = m_e2 + Σ λ_i e_Y,i`.
/// Each topic is `(m_e1, relation embedding)`.
pub fn conjunction_mix(
    memory: &KeyValueMemory,
    params: &ModelParams,
    topics: &[(Vec<f64>, Vec<f64>)],
    m_e2: &[f64],
    k: usize,
) -> Result<MixResult> {
    if topics.is_empty() {
        return Err(VkbError::MissingMention("conjunction needs a topic mention".into()));
    }
    let mut mixed = m_e2.to_vec();
    let mut trace = Vec::with_capacity(topics.len());
    let mut lambda = 0.0;
    for (m_e1, r) in topics {
        let t = mix_step(memory, params, m_e1, r, m_e2, k, 1)?;
        if !t.hits.is_empty() {
            mixed = add_scaled(&mixed, t.lambda, &t.aggregated);
        }
        lambda += t.lambda;
        trace.push(t);
    }
    let mut out = result_of(memory, trace, k);
    out.mixed = mixed;
    out.lambda = lambda / topics.len() as f64;
    Ok(out)
}

/// Entities by descending `⟨mixed, E_i⟩`, ties by lower id.
pub fn predict_entity(params: &ModelParams, mixed: &[f64]) -> Vec<(EntityId, f64)> {
    let table = params.get(params.layout.entity_table);
    let scores: Vec<f64> = (0..table.rows()).map(|i| dot(mixed, table.row(i))).collect();
    top_k_indices(&scores, scores.len())
        .into_iter()
        .map(|i| (i as EntityId, scores[i]))
        .collect()
}

/// Per-topic `(m_e1, r)` and the masked-mention embedding of an LM-form example.
pub struct LmInputs {
    pub topics: Vec<(Vec<f64>, Vec<f64>)>,
    pub m_e2: Vec<f64>,
}

pub fn lm_inputs(params: &ModelParams, ex: &PreprocessedExample) -> Result<LmInputs> {
    let ctx = encode_example(params, ex)?;
    let topics = ex
        .topic_spans
        .iter()
        .zip(&ex.r1_positions)
        .map(|(span, &r1)| {
            Ok((
                mention_embedding(params, &ctx, span.0)?,
                relation_embedding(params, &ctx, r1, ex.r2_pos)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LmInputs {
        topics,
        m_e2: mention_embedding(params, &ctx, ex.target_span.0)?,
    })
}

/// How to answer an LM-form example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmAnswerConfig {
    pub k: usize,
    pub hops: usize,
    /// Forces `λ = 0`, predicting from `m_e2` alone.
    pub no_memory: bool,
}

/// Ranked entity predictions and per-hop `λ` for an example. One topic with
/// `hops > 1` chains hops; several topics form a conjunction.
pub fn answer_lm(
    memory: &KeyValueMemory,
    params: &ModelParams,
    ex: &PreprocessedExample,
    cfg: LmAnswerConfig,
) -> Result<(Vec<(EntityId, f64)>, Option<MixResult>)> {
    let inputs = lm_inputs(params, ex)?;
    if cfg.no_memory {
        return Ok((predict_entity(params, &inputs.m_e2), None));
    }
    let mix = if inputs.topics.len() == 1 {
        let (m_e1, r) = &inputs.topics[0];
        multi_hop_mix(memory, params, m_e1, r, std::slice::from_ref(&inputs.m_e2), cfg.hops, cfg.k)?
    } else {
        conjunction_mix(memory, params, &inputs.topics, &inputs.m_e2, cfg.k)?
    };
    Ok((predict_entity(params, &mix.mixed), Some(mix)))
}
