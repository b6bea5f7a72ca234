//! Differentiable memory-mixed LM loss: `L_el` on topic mentions, `L_re` on
//! each topic's retrieval and `L_mel` on the mixed masked-mention embedding.
//!
//! Hits are selected with the memory's stored keys, and every entry linking
//! the topic to an answer is added when retrieval missed it, so `L_re` always
//! sees the positives the memory holds. Their keys are then recomputed live
//! from the stored (frozen) relation embeddings so `W_k` and the entity table
//! train. The null key is always live.

use crate::autograd::{Graph, NodeId};
use crate::corpus::{EntityId, PreprocessedExample};
use crate::encoder::{encode_graph, mention_embedding_graph, relation_embedding_graph, ModelParams};
use crate::error::{Result, VkbError};
use crate::follow::LOSS_FLOOR;
use crate::memory::{top_k_indices, KeyValueMemory};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LmGraphConfig {
    pub k: usize,
    /// When false the memory is ignored and `L_mel` is computed on `m_e2`.
    pub mixing: bool,
}

pub struct LmLossNodes {
    pub l_el: NodeId,
    /// Absent when no topic retrieval could contain the answer.
    pub l_re: Option<NodeId>,
    pub l_mel: NodeId,
    pub total: NodeId,
}

pub fn lm_loss_graph(
    g: &mut Graph<'_>,
    params: &ModelParams,
    memory: &KeyValueMemory,
    ex: &PreprocessedExample,
    cfg: LmGraphConfig,
) -> Result<LmLossNodes> {
    let answers: Vec<EntityId> = ex
        .answer_set
        .clone()
        .or_else(|| ex.target.map(|t| vec![t]))
        .ok_or(VkbError::NoPositive)?;
    let num_entities = params.config.entity_vocab_size;
    if let Some(&a) = answers.iter().find(|&&a| a as usize >= num_entities) {
        return Err(VkbError::UnknownEntity(a.to_string()));
    }
    let l = &params.layout;
    let h = encode_graph(g, params, &ex.tokens)?;
    let table = g.param(l.entity_table);
    let m_e2 = mention_embedding_graph(g, params, h, ex.target_span.0)?;

    let mut el_terms = Vec::new();
    let mut re_terms = Vec::new();
    let mut contributions = vec![m_e2];
    for (i, (&topic, span)) in ex.topics.iter().zip(&ex.topic_spans).enumerate() {
        let m_e1 = mention_embedding_graph(g, params, h, span.0)?;
        let logits = g.matmul_t(m_e1, table);
        el_terms.push(g.neg_log_marginal(logits, &[topic as usize], None));
        if !cfg.mixing {
            continue;
        }
        let r = relation_embedding_graph(g, params, h, ex.r1_positions[i], ex.r2_pos)?;
        let w_t = g.param(l.w_t[0]);
        let rt = g.matmul(r, w_t);
        let cat = g.concat_cols(&[m_e1, rt]);
        let w_q = g.param(l.w_q);
        let q = g.matmul(cat, w_q);

        let entries = memory.entries();
        let qv = g.value(q).row(0).to_vec();
        let stored: Vec<f64> = entries.iter().map(|e| dot(&qv, &e.key)).collect();
        let mut top = top_k_indices(&stored, cfg.k);
        for &j in memory.entries_with_topic(topic) {
            if answers.contains(&entries[j].value_entity) && !top.contains(&j) {
                top.push(j);
            }
        }

        let w_k = g.param(l.w_k);
        let r_null = g.param(l.r_null);
        let null_cat = g.concat_cols(&[m_e1, r_null]);
        let null_key = g.matmul(null_cat, w_k);
        let keys = if top.is_empty() {
            null_key
        } else {
            let topics: Vec<usize> = top.iter().map(|&j| entries[j].pair.topic as usize).collect();
            let rels: Vec<&[f64]> = top.iter().map(|&j| entries[j].relation.as_slice()).collect();
            let trows = g.rows(table, &topics);
            let rrows = g.constant(Tensor::from_rows(&rels));
            let kcat = g.concat_cols(&[trows, rrows]);
            let hit_keys = g.matmul(kcat, w_k);
            g.concat_rows(&[hit_keys, null_key])
        };
        let scores = g.matmul_t(q, keys);

        let correct: Vec<usize> = (0..top.len())
            .filter(|&j| answers.contains(&entries[top[j]].value_entity))
            .collect();
        if !correct.is_empty() {
            re_terms.push(g.neg_log_marginal(scores, &correct, Some(LOSS_FLOOR)));
        }
        if top.is_empty() {
            continue;
        }
        let beta = g.softmax(scores);
        let hit_idx: Vec<usize> = (0..top.len()).collect();
        let hit_beta = g.pick_cols(beta, &hit_idx);
        let lambda = g.sum(hit_beta);
        let values: Vec<usize> = top.iter().map(|&j| entries[j].value_entity as usize).collect();
        let vrows = g.rows(table, &values);
        let e_y = g.matmul(hit_beta, vrows);
        contributions.push(g.scale_by(e_y, lambda));
    }

    let mixed = g.add_all(&contributions);
    let logits = g.matmul_t(mixed, table);
    let targets: Vec<usize> = answers.iter().map(|&a| a as usize).collect();
    let l_mel = g.neg_log_marginal(logits, &targets, None);
    let l_el = mean(g, &el_terms);
    let l_re = (!re_terms.is_empty()).then(|| mean(g, &re_terms));
    let mut parts = vec![l_el];
    parts.extend(l_re);
    parts.push(l_mel);
    let total = g.add_all(&parts);
    Ok(LmLossNodes {
        l_el,
        l_re,
        l_mel,
        total,
    })
}

fn mean(g: &mut Graph<'_>, terms: &[NodeId]) -> NodeId {
    let s = g.add_all(terms);
    g.scale(s, 1.0 / terms.len() as f64)
}
