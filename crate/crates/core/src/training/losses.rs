//! Loss builders on the autograd tape, plus plain-value versions used by
//! tests and diagnostics.

use std::collections::BTreeSet;

use crate::autograd::{Graph, NodeId};
use crate::corpus::EntityId;
use crate::encoder::ModelParams;
use crate::error::{Result, VkbError};
use crate::follow::follow_loss;
use crate::memory::RetrievalResult;
use crate::tensor::{dot, log_sum_exp};

/// `L_rel`: marginal softmax cross-entropy of the anchor against the stacked
/// candidate rows, with `positives` indexing the candidates sharing its pair.
pub fn relation_contrastive_loss_graph(
    g: &mut Graph<'_>,
    anchor: NodeId,
    candidates: &[NodeId],
    positives: &[usize],
) -> Result<NodeId> {
    if positives.is_empty() {
        return Err(VkbError::NoPositive);
    }
    let stacked = g.concat_rows(candidates);
    let scores = g.matmul_t(anchor, stacked);
    Ok(g.neg_log_marginal(scores, positives, None))
}

/// Full-softmax cross-entropy of one `1 x d_e` mention embedding over the
/// entity table, marginalized over `gold`.
pub fn entity_softmax_loss_graph(
    g: &mut Graph<'_>,
    params: &ModelParams,
    mention: NodeId,
    gold: &[EntityId],
) -> Result<NodeId> {
    let n = params.config.entity_vocab_size;
    if let Some(&e) = gold.iter().find(|&&e| e as usize >= n) {
        return Err(VkbError::UnknownEntity(e.to_string()));
    }
    if gold.is_empty() {
        return Err(VkbError::NoPositive);
    }
    let table = g.param(params.layout.entity_table);
    let logits = g.matmul_t(mention, table);
    let targets: Vec<usize> = gold.iter().map(|&e| e as usize).collect();
    Ok(g.neg_log_marginal(logits, &targets, None))
}

/// `L_el` averaged over mention rows `mentions[i]` with gold `gold[i]`.
pub fn entity_linking_loss_graph(
    g: &mut Graph<'_>,
    params: &ModelParams,
    mentions: &[NodeId],
    gold: &[EntityId],
) -> Result<NodeId> {
    if mentions.len() != gold.len() {
        return Err(VkbError::LengthMismatch(mentions.len(), gold.len()));
    }
    if mentions.is_empty() {
        return Err(VkbError::EmptySet);
    }
    let terms = mentions
        .iter()
        .zip(gold)
        .map(|(&m, &e)| entity_softmax_loss_graph(g, params, m, &[e]))
        .collect::<Result<Vec<_>>>()?;
    let s = g.add_all(&terms);
    Ok(g.scale(s, 1.0 / terms.len() as f64))
}

/// `L_mel` on a mixed vector: marginal over the answer set.
pub fn masked_entity_loss_graph(
    g: &mut Graph<'_>,
    params: &ModelParams,
    mixed: NodeId,
    answers: &[EntityId],
) -> Result<NodeId> {
    entity_softmax_loss_graph(g, params, mixed, answers)
}

pub fn relation_contrastive_loss(anchor: &[f64], candidates: &[Vec<f64>], positives: &[usize]) -> Result<f64> {
    if positives.is_empty() {
        return Err(VkbError::NoPositive);
    }
    let scores: Vec<f64> = candidates.iter().map(|c| dot(anchor, c)).collect();
    let picked: Vec<f64> = positives.iter().map(|&i| scores[i]).collect();
    Ok((log_sum_exp(&scores) - log_sum_exp(&picked)).max(0.0))
}

fn entity_softmax_loss(params: &ModelParams, v: &[f64], gold: &[EntityId]) -> Result<f64> {
    let table = params.get(params.layout.entity_table);
    if let Some(&e) = gold.iter().find(|&&e| e as usize >= table.rows()) {
        return Err(VkbError::UnknownEntity(e.to_string()));
    }
    if gold.is_empty() {
        return Err(VkbError::NoPositive);
    }
    let logits: Vec<f64> = (0..table.rows()).map(|i| dot(v, table.row(i))).collect();
    let picked: Vec<f64> = gold.iter().map(|&e| logits[e as usize]).collect();
    Ok((log_sum_exp(&logits) - log_sum_exp(&picked)).max(0.0))
}

/// Mean `L_el` over mention embeddings.
pub fn entity_linking_loss(params: &ModelParams, mentions: &[Vec<f64>], gold: &[EntityId]) -> Result<f64> {
    if mentions.len() != gold.len() {
        return Err(VkbError::LengthMismatch(mentions.len(), gold.len()));
    }
    if mentions.is_empty() {
        return Err(VkbError::EmptySet);
    }
    let mut s = 0.0;
    for (m, &e) in mentions.iter().zip(gold) {
        s += entity_softmax_loss(params, m, &[e])?;
    }
    Ok(s / mentions.len() as f64)
}

pub fn masked_entity_loss(params: &ModelParams, mixed: &[f64], answers: &[EntityId]) -> Result<f64> {
    entity_softmax_loss(params, mixed, answers)
}

/// `L_re` on an LM-mode retrieval. Hit weights already share their softmax
/// with the null entry, which is never an answer.
pub fn retrieval_loss(result: &RetrievalResult, answers: &BTreeSet<EntityId>) -> f64 {
    follow_loss(result, answers)
}
