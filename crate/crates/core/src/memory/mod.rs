//! The key-value memory: one entry per directional entity-pair mention (or per
//! pair, averaged), keyed by `W_kᵀ[e_topic; r]` and valued by the target entity.

mod snapshot;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    preprocess_relation_example, AnnotatedPassage, EntityId, EntityPair, PairOccurrences,
    PairVocabulary,
};
use crate::encoder::{entity_lookup, example_relation_embedding, ModelParams};
use crate::error::{Result, VkbError};
use crate::tensor::{dot, softmax, vec_matmul};

pub use snapshot::{load_memory, memory_from_bytes, memory_to_bytes, save_memory, MEMORY_MAGIC, MEMORY_VERSION};

/// Default cap on averaged mentions per pair.
pub const DEFAULT_MAX_MENTIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DedupMode {
    /// One entry per pair occurrence.
    AllMentions,
    /// One entry per pair holding the mean key of up to `max_mentions` sampled occurrences.
    Averaged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub pair: EntityPair,
    pub value_entity: EntityId,
    pub key: Vec<f64>,
    /// Relation embedding the key was built from (the mean in averaged mode).
    pub relation: Vec<f64>,
    pub mention_count: u32,
    pub provenance: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyValueMemory {
    entries: Vec<MemoryEntry>,
    topic_index: BTreeMap<EntityId, Vec<usize>>,
    pub dedup: DedupMode,
    pub key_dim: usize,
    pub relation_dim: usize,
    pub build_seed: u64,
    pub max_mentions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub entry: usize,
    pub pair: EntityPair,
    pub value_entity: EntityId,
    pub score: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    pub k_requested: usize,
}

impl RetrievalResult {
    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub entries: usize,
    pub distinct_pairs: usize,
    pub topics: usize,
    pub dedup: DedupMode,
    pub key_dim: usize,
    pub relation_dim: usize,
    pub build_seed: u64,
    pub max_mentions: usize,
}

/// `W_kᵀ [e_topic; r]`.
pub fn memory_key(params: &ModelParams, topic_embedding: &[f64], relation_emb: &[f64]) -> Vec<f64> {
    let mut cat = Vec::with_capacity(topic_embedding.len() + relation_emb.len());
    cat.extend_from_slice(topic_embedding);
    cat.extend_from_slice(relation_emb);
    vec_matmul(&cat, params.get(params.layout.w_k))
}

/// Indices of the `k` largest scores, best first; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn pair_rng(seed: u64, pair: EntityPair) -> ChaCha8Rng {
    let mixed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (((pair.topic as u64) << 32) | pair.target as u64);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Occurrences (passage indices, ascending) used for a pair's entry.
fn sampled(occ: &[usize], dedup: DedupMode, max_mentions: usize, seed: u64, pair: EntityPair) -> Vec<usize> {
    match dedup {
        DedupMode::AllMentions => occ.to_vec(),
        DedupMode::Averaged if occ.len() <= max_mentions => occ.to_vec(),
        DedupMode::Averaged => {
            let mut rng = pair_rng(seed, pair);
            let mut pick: Vec<usize> = rand::seq::index::sample(&mut rng, occ.len(), max_mentions)
                .into_iter()
                .map(|i| occ[i])
                .collect();
            pick.sort_unstable();
            pick
        }
    }
}

struct Mention {
    relation: Vec<f64>,
    key: Vec<f64>,
    passage: String,
}

/// Encodes every `(pair, passage)` job with both endpoints masked.
fn encode_mentions(
    params: &ModelParams,
    corpus: &[AnnotatedPassage],
    jobs: &[(EntityPair, usize)],
) -> Result<Vec<Mention>> {
    jobs.par_iter()
        .map(|&(pair, pi)| {
            let ex = preprocess_relation_example(&corpus[pi], pair, true, true)?;
            let relation = example_relation_embedding(params, &ex)?;
            let key = memory_key(params, entity_lookup(params, pair.topic)?, &relation);
            Ok(Mention {
                relation,
                key,
                passage: corpus[pi].id.clone(),
            })
        })
        .collect()
}

fn mean(rows: &[&[f64]], weights: &[f64]) -> Vec<f64> {
    let n: f64 = weights.iter().sum();
    let mut acc = vec![0.0; rows[0].len()];
    for (r, w) in rows.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(r.iter()) {
            *a += w * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

fn build_entries(
    corpus: &[AnnotatedPassage],
    pairs: &PairVocabulary,
    params: &ModelParams,
    dedup: DedupMode,
    max_mentions: usize,
    seed: u64,
) -> Result<Vec<(EntityPair, Vec<Mention>)>> {
    let occurrences = PairOccurrences::index(corpus);
    let mut jobs = Vec::new();
    let mut spans = Vec::new();
    for &pair in &pairs.pairs {
        let picked = sampled(occurrences.get(pair), dedup, max_mentions, seed, pair);
        if picked.is_empty() {
            continue;
        }
        spans.push((pair, jobs.len(), picked.len()));
        jobs.extend(picked.into_iter().map(|pi| (pair, pi)));
    }
    let mut encoded = encode_mentions(params, corpus, &jobs)?.into_iter();
    Ok(spans
        .into_iter()
        .map(|(pair, _, n)| (pair, encoded.by_ref().take(n).collect()))
        .collect())
}

impl KeyValueMemory {
    pub fn empty(dedup: DedupMode, key_dim: usize, relation_dim: usize, build_seed: u64, max_mentions: usize) -> Self {
        Self {
            entries: Vec::new(),
            topic_index: BTreeMap::new(),
            dedup,
            key_dim,
            relation_dim,
            build_seed,
            max_mentions,
        }
    }

    /// Replaces the entries (keys must have `key_dim` columns) and rebuilds the topic index.
    pub fn with_entries(mut self, entries: Vec<MemoryEntry>) -> Self {
        self.entries = entries;
        self.reindex();
        self
    }

    fn reindex(&mut self) {
        self.topic_index.clear();
        for (i, e) in self.entries.iter().enumerate() {
            self.topic_index.entry(e.pair.topic).or_default().push(i);
        }
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry indices whose topic is `e`, ascending.
    pub fn entries_with_topic(&self, e: EntityId) -> &[usize] {
        self.topic_index.get(&e).map_or(&[], Vec::as_slice)
    }

    /// Entry indices whose topic lies in `filter`, ascending.
    pub fn candidates(&self, filter: &BTreeSet<EntityId>) -> Vec<usize> {
        let mut out: Vec<usize> = filter
            .iter()
            .flat_map(|e| self.entries_with_topic(*e).iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    pub fn contains_pair(&self, pair: EntityPair) -> bool {
        self.entries_with_topic(pair.topic)
            .iter()
            .any(|&i| self.entries[i].pair == pair)
    }

    pub fn stats(&self) -> MemoryStats {
        let pairs: BTreeSet<EntityPair> = self.entries.iter().map(|e| e.pair).collect();
        MemoryStats {
            entries: self.entries.len(),
            distinct_pairs: pairs.len(),
            topics: self.topic_index.len(),
            dedup: self.dedup,
            key_dim: self.key_dim,
            relation_dim: self.relation_dim,
            build_seed: self.build_seed,
            max_mentions: self.max_mentions,
        }
    }

    /// Recomputes every key from the stored relation embedding with the given
    /// parameters (current `W_k` and entity table).
    pub fn rekeyed(&self, params: &ModelParams) -> Result<Self> {
        let entries = self
            .entries
            .par_iter()
            .map(|e| {
                let mut e = e.clone();
                e.key = memory_key(params, entity_lookup(params, e.pair.topic)?, &e.relation);
                Ok(e)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            entries,
            key_dim: params.config.key_dim,
            ..self.clone()
        })
    }
}

/// Builds the memory over every supported pair of `pairs`. In averaged mode
/// the sample of at most `max_mentions` occurrences per pair is drawn from `seed`.
/// Pair extraction plus build settings, as one serializable unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub dedup: DedupMode,
    pub max_mentions: usize,
    pub min_pair_count: u64,
    /// 0 keeps every pair.
    pub max_pairs: usize,
    pub seed: u64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            dedup: DedupMode::AllMentions,
            max_mentions: DEFAULT_MAX_MENTIONS,
            min_pair_count: 1,
            max_pairs: 0,
            seed: 0,
        }
    }
}

impl MemoryConfig {
    pub fn pairs(&self, corpus: &[AnnotatedPassage]) -> PairVocabulary {
        let cap = if self.max_pairs == 0 { usize::MAX } else { self.max_pairs };
        crate::corpus::extract_entity_pairs(corpus, self.min_pair_count, cap)
    }

    pub fn build(&self, corpus: &[AnnotatedPassage], params: &ModelParams) -> Result<KeyValueMemory> {
        build_memory(corpus, &self.pairs(corpus), params, self.dedup, self.max_mentions, self.seed)
    }
}

pub fn build_memory(
    corpus: &[AnnotatedPassage],
    pairs: &PairVocabulary,
    params: &ModelParams,
    dedup: DedupMode,
    max_mentions: usize,
    seed: u64,
) -> Result<KeyValueMemory> {
    if max_mentions == 0 {
        return Err(VkbError::InvalidConfig("max_mentions must be positive".into()));
    }
    let groups = build_entries(corpus, pairs, params, dedup, max_mentions, seed)?;
    let mut entries = Vec::new();
    for (pair, mentions) in groups {
        push_group(&mut entries, pair, mentions, dedup);
    }
    if entries.is_empty() {
        return Err(VkbError::EmptyMemory);
    }
    let c = &params.config;
    Ok(KeyValueMemory::empty(dedup, c.key_dim, c.relation_dim, seed, max_mentions).with_entries(entries))
}

fn push_group(entries: &mut Vec<MemoryEntry>, pair: EntityPair, mentions: Vec<Mention>, dedup: DedupMode) {
    match dedup {
        DedupMode::AllMentions => {
            for m in mentions {
                entries.push(MemoryEntry {
                    pair,
                    value_entity: pair.target,
                    key: m.key,
                    relation: m.relation,
                    mention_count: 1,
                    provenance: vec![m.passage],
                });
            }
        }
        DedupMode::Averaged => {
            let ones = vec![1.0; mentions.len()];
            let keys: Vec<&[f64]> = mentions.iter().map(|m| m.key.as_slice()).collect();
            let rels: Vec<&[f64]> = mentions.iter().map(|m| m.relation.as_slice()).collect();
            entries.push(MemoryEntry {
                pair,
                value_entity: pair.target,
                key: mean(&keys, &ones),
                relation: mean(&rels, &ones),
                mention_count: mentions.len() as u32,
                provenance: mentions.into_iter().map(|m| m.passage).collect(),
            });
        }
    }
}

/// Returns a new memory with entries for `new_pairs` built from `new_passages`
/// exactly as [`build_memory`] would. In averaged mode a pair already present
/// is re-averaged over the union of its old and new mentions.
pub fn inject_pairs(
    memory: &KeyValueMemory,
    new_passages: &[AnnotatedPassage],
    new_pairs: &PairVocabulary,
    params: &ModelParams,
) -> Result<KeyValueMemory> {
    let groups = build_entries(
        new_passages,
        new_pairs,
        params,
        memory.dedup,
        memory.max_mentions,
        memory.build_seed,
    )?;
    let mut entries = memory.entries.clone();
    let mut by_pair: BTreeMap<EntityPair, usize> = BTreeMap::new();
    if memory.dedup == DedupMode::Averaged {
        for (i, e) in entries.iter().enumerate() {
            by_pair.insert(e.pair, i);
        }
    }
    for (pair, mentions) in groups {
        match by_pair.get(&pair) {
            Some(&i) => {
                let old = entries[i].clone();
                let mut keys: Vec<&[f64]> = vec![&old.key];
                let mut rels: Vec<&[f64]> = vec![&old.relation];
                let mut weights = vec![old.mention_count as f64];
                for m in &mentions {
                    keys.push(&m.key);
                    rels.push(&m.relation);
                    weights.push(1.0);
                }
                let key = mean(&keys, &weights);
                let relation = mean(&rels, &weights);
                let e = &mut entries[i];
                e.key = key;
                e.relation = relation;
                e.mention_count += mentions.len() as u32;
                e.provenance.extend(mentions.into_iter().map(|m| m.passage));
            }
            None => {
                push_group(&mut entries, pair, mentions, memory.dedup);
                if memory.dedup == DedupMode::Averaged {
                    by_pair.insert(pair, entries.len() - 1);
                }
            }
        }
    }
    Ok(memory.clone().with_entries(entries))
}

/// Exact maximum-inner-product search. With a filter only entries whose topic
/// is in it are candidates; weights are the softmax over the returned scores.
pub fn retrieve_topk(
    memory: &KeyValueMemory,
    query: &[f64],
    k: usize,
    filter: Option<&BTreeSet<EntityId>>,
) -> Result<RetrievalResult> {
    if k == 0 {
        return Err(VkbError::InvalidConfig("k must be at least 1".into()));
    }
    if query.len() != memory.key_dim {
        return Err(VkbError::LengthMismatch(query.len(), memory.key_dim));
    }
    let candidates: Vec<usize> = match filter {
        Some(f) => memory.candidates(f),
        None => (0..memory.len()).collect(),
    };
    let scores: Vec<f64> = candidates
        .iter()
        .map(|&i| dot(query, &memory.entries[i].key))
        .collect();
    let top = top_k_indices(&scores, k);
    let top_scores: Vec<f64> = top.iter().map(|&j| scores[j]).collect();
    let weights = softmax(&top_scores);
    let hits = top
        .iter()
        .zip(weights)
        .map(|(&j, w)| {
            let e = &memory.entries[candidates[j]];
            Hit {
                entry: candidates[j],
                pair: e.pair,
                value_entity: e.value_entity,
                score: scores[j],
                weight: w,
            }
        })
        .collect();
    Ok(RetrievalResult {
        hits,
        k_requested: k,
    })
}

#[cfg(test)]
mod tests;
