use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::losses::{entity_softmax_loss_graph, relation_contrastive_loss_graph};
use super::{accumulate, compute_gradients, optimize, LossComponents, LossReport, Sampler, TrainConfig, TrainObserver};
use crate::autograd::{Graph, NodeId, ParamId};
use crate::corpus::{
    preprocess_masked_entity, AnnotatedPassage, BatchConfig, EntityId, PairVocabulary, PreprocessedExample,
    RelationBatchStream,
};
use crate::encoder::{encode_graph, mention_embedding_graph, relation_embedding_graph, ModelParams};
use crate::error::{Result, VkbError};
use crate::follow::{follow_loss_graph, question_relation_graph, FollowGraphConfig};
use crate::lm::{lm_loss_graph, LmGraphConfig};
use crate::memory::KeyValueMemory;
use crate::tensor::Tensor;

type Grads = Vec<Option<Tensor>>;

/// Builds one graph per item, backpropagates `total / n` and sums the
/// gradients in item order. Returns the per-item component values.
fn per_item_grads<T, F>(params: &ModelParams, trainable: &[bool], items: &[T], f: F) -> Result<(Grads, Vec<Vec<f64>>)>
where
    T: Sync,
    F: Fn(&mut Graph<'_>, &T) -> Result<(NodeId, Vec<f64>)> + Sync,
{
    let scale = 1.0 / items.len() as f64;
    let results: Vec<(Grads, Vec<f64>)> = items
        .par_iter()
        .map(|item| {
            let mut g = Graph::new(&params.tensors, trainable);
            let (total, parts) = f(&mut g, item)?;
            let scaled = g.scale(total, scale);
            Ok((compute_gradients(&g, scaled, &params.names)?, parts))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = Vec::new();
    let mut parts = Vec::with_capacity(results.len());
    for (grads, p) in results {
        accumulate(&mut acc, grads);
        parts.push(p);
    }
    Ok((acc, parts))
}

fn mean_of(parts: &[Vec<f64>], i: usize) -> f64 {
    parts.iter().map(|p| p[i]).sum::<f64>() / parts.len() as f64
}

/// Stage 0: masked-entity prediction over every mention of the corpus.
pub fn train_entity(
    params: &mut ModelParams,
    corpus: &[AnnotatedPassage],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<LossReport>> {
    let mut examples = Vec::new();
    for p in corpus {
        for i in 0..p.mentions.len() {
            examples.push(preprocess_masked_entity(p, i)?);
        }
    }
    if examples.is_empty() {
        return Err(VkbError::InsufficientExamples("corpus has no mentions".into()));
    }
    let trainable = params.trainable_mask(&cfg.frozen)?;
    let mut sampler = Sampler::new(examples.len(), cfg.batch_size, ChaCha8Rng::seed_from_u64(cfg.seed));
    optimize(params, &trainable, cfg, observer, |params, trainable, _| {
        let batch: Vec<&PreprocessedExample> = sampler.next_batch().into_iter().map(|i| &examples[i]).collect();
        let (grads, parts) = per_item_grads(params, trainable, &batch, |g, ex| {
            let h = encode_graph(g, params, &ex.tokens)?;
            let m = mention_embedding_graph(g, params, h, ex.target_span.0)?;
            let gold = ex.target.expect("masked-entity target");
            let l = entity_softmax_loss_graph(g, params, m, &[gold])?;
            Ok((l, vec![g.scalar(l)]))
        })?;
        Ok((
            grads,
            LossComponents {
                l_el: Some(mean_of(&parts, 0)),
                ..Default::default()
            },
        ))
    })
}

/// Stage 1: contrastive `L_rel` over relation batches plus `L_el` on the
/// context mentions of every batch example.
pub fn train_relation(
    params: &mut ModelParams,
    corpus: &[AnnotatedPassage],
    pairs: &PairVocabulary,
    batch_cfg: BatchConfig,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<LossReport>> {
    let trainable = params.trainable_mask(&cfg.frozen)?;
    let mut stream = RelationBatchStream::new(corpus, pairs, batch_cfg, ChaCha8Rng::seed_from_u64(cfg.seed))?;
    optimize(params, &trainable, cfg, observer, |params, trainable, _| {
        let batch = stream.next_batch()?;
        let items = batch.flatten();
        let mut anchors = Vec::with_capacity(batch.groups.len());
        let mut offset = 0;
        for grp in &batch.groups {
            anchors.push(offset);
            offset += 1 + grp.positives.len() + grp.negatives.len();
        }
        relation_step(params, trainable, &items, &anchors)
    })
}

/// One stage-1 step. Each sequence is encoded in its own graph; the coupled
/// contrastive loss is differentiated with respect to the relation embeddings
/// and that gradient is pushed back through each sequence graph.
fn relation_step(
    params: &ModelParams,
    trainable: &[bool],
    items: &[(crate::corpus::EntityPair, &PreprocessedExample)],
    anchors: &[usize],
) -> Result<(Grads, LossComponents)> {
    let n_context: usize = items.iter().map(|(_, ex)| ex.context_mentions.len()).sum();
    let el_scale = if n_context > 0 { 1.0 / n_context as f64 } else { 0.0 };

    struct Encoded<'a> {
        g: Graph<'a>,
        r: NodeId,
        el: Option<NodeId>,
    }
    let encoded: Vec<Encoded<'_>> = items
        .par_iter()
        .map(|(_, ex)| {
            let mut g = Graph::new(&params.tensors, trainable);
            let h = encode_graph(&mut g, params, &ex.tokens)?;
            let r = relation_embedding_graph(&mut g, params, h, ex.r1_pos, ex.r2_pos)?;
            let mut terms = Vec::new();
            for m in &ex.context_mentions {
                let me = mention_embedding_graph(&mut g, params, h, m.start)?;
                terms.push(entity_softmax_loss_graph(&mut g, params, me, &[m.entity])?);
            }
            let el = (!terms.is_empty()).then(|| {
                let s = g.add_all(&terms);
                g.scale(s, el_scale)
            });
            Ok(Encoded { g, r, el })
        })
        .collect::<Result<Vec<_>>>()?;

    // Contrastive loss over free copies of the relation embeddings.
    let empty: [Tensor; 0] = [];
    let mut cg = Graph::new(&empty, &[]);
    let vars: Vec<NodeId> = encoded.iter().map(|e| cg.variable(e.g.value(e.r).clone())).collect();
    let mut terms = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let pair = items[a].0;
        let others: Vec<usize> = (0..items.len()).filter(|&j| j != a).collect();
        let candidates: Vec<NodeId> = others.iter().map(|&j| vars[j]).collect();
        let positives: Vec<usize> = others
            .iter()
            .enumerate()
            .filter(|(_, &j)| items[j].0 == pair)
            .map(|(i, _)| i)
            .collect();
        terms.push(relation_contrastive_loss_graph(&mut cg, vars[a], &candidates, &positives)?);
    }
    let sum = cg.add_all(&terms);
    let l_rel = cg.scale(sum, 1.0 / anchors.len() as f64);
    let rel_value = cg.scalar(l_rel);
    let upstream = cg.backward(l_rel);

    let results: Vec<(Grads, f64)> = encoded
        .into_par_iter()
        .zip(vars.par_iter())
        .map(|(mut e, v)| {
            let gr = upstream.node(*v).cloned().unwrap_or_else(|| Tensor::zeros(1, params.config.relation_dim));
            let gn = e.g.constant(gr);
            let surrogate = e.g.matmul_t(e.r, gn);
            let el_value = e.el.map_or(0.0, |n| e.g.scalar(n));
            let total = match e.el {
                Some(el) => e.g.add(surrogate, el),
                None => surrogate,
            };
            Ok((compute_gradients(&e.g, total, &params.names)?, el_value))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = Vec::new();
    let mut el_total = 0.0;
    for (grads, el) in results {
        accumulate(&mut acc, grads);
        el_total += el;
    }
    Ok((
        acc,
        LossComponents {
            l_rel: Some(rel_value),
            l_el: (n_context > 0).then_some(el_total),
            ..Default::default()
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub k: usize,
    pub mixing: bool,
    /// Recompute stored memory keys every this many steps; 0 never does.
    pub key_refresh_every: usize,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            k: 8,
            mixing: true,
            key_refresh_every: 25,
        }
    }
}

/// Stage 2: `L_el + L_re + L_mel` on memory-mixed LM examples. Memory
/// relation embeddings stay fixed.
pub fn train_lm(
    params: &mut ModelParams,
    memory: &KeyValueMemory,
    examples: &[PreprocessedExample],
    cfg: &TrainConfig,
    lm: LmTrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<LossReport>> {
    if lm.mixing && memory.is_empty() {
        return Err(VkbError::EmptyMemory);
    }
    if examples.is_empty() {
        return Err(VkbError::InsufficientExamples("no LM examples".into()));
    }
    let trainable = params.trainable_mask(&cfg.frozen)?;
    let mut sampler = Sampler::new(examples.len(), cfg.batch_size, ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut mem = memory.clone();
    let gcfg = LmGraphConfig {
        k: lm.k,
        mixing: lm.mixing,
    };
    optimize(params, &trainable, cfg, observer, |params, trainable, step| {
        if lm.key_refresh_every > 0 && step > 0 && step % lm.key_refresh_every == 0 {
            mem = mem.rekeyed(params)?;
        }
        let batch: Vec<&PreprocessedExample> = sampler.next_batch().into_iter().map(|i| &examples[i]).collect();
        let mem = &mem;
        let (grads, parts) = per_item_grads(params, trainable, &batch, |g, ex| {
            let n = lm_loss_graph(g, params, mem, ex, gcfg)?;
            let re = n.l_re.map_or(0.0, |x| g.scalar(x));
            Ok((n.total, vec![g.scalar(n.l_el), re, g.scalar(n.l_mel)]))
        })?;
        Ok((
            grads,
            LossComponents {
                l_el: Some(mean_of(&parts, 0)),
                l_re: lm.mixing.then(|| mean_of(&parts, 1)),
                l_mel: Some(mean_of(&parts, 2)),
                ..Default::default()
            },
        ))
    })
}

/// A masked question with its oracle answers. `relations` is kept only for
/// auditing which relations the trainer saw.
#[derive(Clone, Debug, PartialEq)]
pub struct FollowExample {
    pub example: PreprocessedExample,
    pub answers: BTreeSet<EntityId>,
    pub hops: usize,
    pub relations: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FollowTrainConfig {
    /// Retrieval width while training. Wider than at inference so the answer
    /// of a badly ranked intermediate hop still reaches the loss.
    pub k: usize,
}

impl Default for FollowTrainConfig {
    fn default() -> Self {
        Self { k: 32 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub reports: Vec<LossReport>,
    /// Every relation id carried by a question the trainer consumed.
    pub audit: BTreeSet<u32>,
}

/// Task finetuning of `L_follow` on the final hop. Memory keys are computed
/// live, so callers should rekey the memory afterwards.
pub fn finetune_follow(
    params: &mut ModelParams,
    memory: &KeyValueMemory,
    examples: &[FollowExample],
    cfg: &TrainConfig,
    fcfg: FollowTrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<FinetuneOutcome> {
    if memory.is_empty() {
        return Err(VkbError::EmptyMemory);
    }
    if examples.is_empty() {
        return Err(VkbError::InsufficientExamples("no follow questions".into()));
    }
    let trainable = params.trainable_mask(&cfg.frozen)?;
    let mut sampler = Sampler::new(examples.len(), cfg.batch_size, ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut audit = BTreeSet::new();
    let reports = optimize(params, &trainable, cfg, observer, |params, trainable, _| {
        let batch: Vec<&FollowExample> = sampler.next_batch().into_iter().map(|i| &examples[i]).collect();
        audit.extend(batch.iter().flat_map(|q| q.relations.iter().copied()));
        let (grads, parts) = per_item_grads(params, trainable, &batch, |g, q| {
            let r = question_relation_graph(g, params, &q.example)?;
            let cfg = FollowGraphConfig { hops: q.hops, k: fcfg.k };
            let l = follow_loss_graph(g, params, memory, r, &q.example.topics, &q.answers, cfg)?;
            Ok((l, vec![g.scalar(l)]))
        })?;
        Ok((
            grads,
            LossComponents {
                l_follow: Some(mean_of(&parts, 0)),
                ..Default::default()
            },
        ))
    })?;
    Ok(FinetuneOutcome { reports, audit })
}

/// A relation-marked passage with its relation label.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierExample {
    pub example: PreprocessedExample,
    pub label: usize,
}

/// Supervised baseline pretraining: softmax over `r·W_cls` against relation
/// labels. Returns the reports and the trained classifier weights.
pub fn train_relation_classifier(
    params: &mut ModelParams,
    examples: &[ClassifierExample],
    num_classes: usize,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Vec<LossReport>, Tensor)> {
    if examples.is_empty() || num_classes < 2 {
        return Err(VkbError::InsufficientExamples("classifier needs examples and two classes".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.label >= num_classes) {
        return Err(VkbError::IndexOutOfRange {
            index: e.label,
            len: num_classes,
        });
    }
    let mut trainable = params.trainable_mask(&cfg.frozen)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1A5);
    let w_cls = ParamId(params.len());
    params
        .tensors
        .push(Tensor::randn(params.config.relation_dim, num_classes, 0.02, &mut rng));
    params.names.push("w_cls".into());
    trainable.push(true);
    let mut sampler = Sampler::new(examples.len(), cfg.batch_size, ChaCha8Rng::seed_from_u64(cfg.seed));
    let result = optimize(params, &trainable, cfg, observer, |params, trainable, _| {
        let batch: Vec<&ClassifierExample> = sampler.next_batch().into_iter().map(|i| &examples[i]).collect();
        let (grads, parts) = per_item_grads(params, trainable, &batch, |g, c| {
            let h = encode_graph(g, params, &c.example.tokens)?;
            let r = relation_embedding_graph(g, params, h, c.example.r1_pos, c.example.r2_pos)?;
            let w = g.param(w_cls);
            let logits = g.matmul(r, w);
            let l = g.neg_log_marginal(logits, &[c.label], None);
            Ok((l, vec![g.scalar(l)]))
        })?;
        Ok((
            grads,
            LossComponents {
                l_cls: Some(mean_of(&parts, 0)),
                ..Default::default()
            },
        ))
    });
    let w = params.tensors.pop().expect("classifier weights");
    params.names.pop();
    Ok((result?, w))
}

/// Repeats stage-1 steps on one fixed batch; the overfitting smoke test.
pub fn overfit_relation_batch(
    params: &mut ModelParams,
    batch: &crate::corpus::RelationBatch,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<LossReport>> {
    let trainable = params.trainable_mask(&cfg.frozen)?;
    let items = batch.flatten();
    let mut anchors = Vec::with_capacity(batch.groups.len());
    let mut offset = 0;
    for grp in &batch.groups {
        anchors.push(offset);
        offset += 1 + grp.positives.len() + grp.negatives.len();
    }
    optimize(params, &trainable, cfg, observer, |params, trainable, _| {
        relation_step(params, trainable, &items, &anchors)
    })
}
