//! Differentiable follow for finetuning. Keys are recomputed live from the
//! stored relation embeddings so `W_k` (and the entity table, if trainable)
//! receive gradients; top-k selection is made on the live scores.

use std::collections::BTreeSet;

use crate::autograd::{Graph, NodeId};
use crate::corpus::{EntityId, PreprocessedExample};
use crate::encoder::{encode_graph, relation_embedding_graph, ModelParams};
use crate::error::Result;
use crate::memory::{top_k_indices, KeyValueMemory};
use crate::tensor::Tensor;

use super::{check_hop, LOSS_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FollowGraphConfig {
    pub hops: usize,
    pub k: usize,
}

/// `W_rᵀ [h_R1; h_R2]` for a question, recorded on `g`.
pub fn question_relation_graph(
    g: &mut Graph<'_>,
    params: &ModelParams,
    ex: &PreprocessedExample,
) -> Result<NodeId> {
    let h = encode_graph(g, params, &ex.tokens)?;
    relation_embedding_graph(g, params, h, ex.r1_pos, ex.r2_pos)
}

/// Final-hop `L_follow` for one question given its relation embedding node.
pub fn follow_loss_graph(
    g: &mut Graph<'_>,
    params: &ModelParams,
    memory: &KeyValueMemory,
    relation: NodeId,
    topics: &[EntityId],
    answers: &BTreeSet<EntityId>,
    cfg: FollowGraphConfig,
) -> Result<NodeId> {
    check_hop(params, cfg.hops)?;
    let l = &params.layout;
    let cap = -LOSS_FLOOR.ln();
    let mut ents: Vec<EntityId> = Vec::new();
    for &t in topics {
        if !ents.contains(&t) {
            ents.push(t);
        }
    }
    let n = ents.len() as f64;
    let mut weights = g.constant(Tensor::filled(1, ents.len(), 1.0 / n));
    let table = g.param(l.entity_table);
    let w_q = g.param(l.w_q);
    let w_k = g.param(l.w_k);
    for hop in 1..=cfg.hops {
        let idx: Vec<usize> = ents.iter().map(|&e| e as usize).collect();
        let rows = g.rows(table, &idx);
        let e_x = g.matmul(weights, rows);
        let w_t = g.param(l.w_t[hop - 1]);
        let rt = g.matmul(relation, w_t);
        let cat = g.concat_cols(&[e_x, rt]);
        let q = g.matmul(cat, w_q);

        let support: BTreeSet<EntityId> = ents.iter().copied().collect();
        let cands = memory.candidates(&support);
        if cands.is_empty() {
            return Ok(g.constant(Tensor::filled(1, 1, cap)));
        }
        let entries = memory.entries();
        let topic_idx: Vec<usize> = cands.iter().map(|&c| entries[c].pair.topic as usize).collect();
        let rels: Vec<&[f64]> = cands.iter().map(|&c| entries[c].relation.as_slice()).collect();
        let topic_rows = g.rows(table, &topic_idx);
        let rel_rows = g.constant(Tensor::from_rows(&rels));
        let kcat = g.concat_cols(&[topic_rows, rel_rows]);
        let keys = g.matmul(kcat, w_k);
        let scores = g.matmul_t(q, keys);
        let top = top_k_indices(g.value(scores).row(0), cfg.k);
        let picked = g.pick_cols(scores, &top);
        let values: Vec<EntityId> = top.iter().map(|&j| entries[cands[j]].value_entity).collect();

        if hop == cfg.hops {
            let targets: Vec<usize> = (0..values.len()).filter(|&j| answers.contains(&values[j])).collect();
            return Ok(g.neg_log_marginal(picked, &targets, Some(LOSS_FLOOR)));
        }

        // Sum weights per value entity, then keep the k heaviest.
        let p = g.softmax(picked);
        let mut distinct: Vec<EntityId> = Vec::new();
        for &v in &values {
            if !distinct.contains(&v) {
                distinct.push(v);
            }
        }
        let mut assign = Tensor::zeros(values.len(), distinct.len());
        for (j, v) in values.iter().enumerate() {
            let c = distinct.iter().position(|d| d == v).expect("present");
            assign.set(j, c, 1.0);
        }
        let assign = g.constant(assign);
        let agg = g.matmul(p, assign);
        let w = g.value(agg).row(0).to_vec();
        let mut order: Vec<usize> = (0..distinct.len()).collect();
        order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(distinct[a].cmp(&distinct[b])));
        order.truncate(cfg.k);
        let kept = g.pick_cols(agg, &order);
        weights = g.normalize(kept);
        ents = order.iter().map(|&i| distinct[i]).collect();
    }
    unreachable!("hops >= 1")
}
