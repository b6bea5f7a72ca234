use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    preprocess_relation_example, AnnotatedPassage, EntityPair, PairOccurrences, PairVocabulary,
    PreprocessedExample,
};
use crate::error::{Result, VkbError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub groups_per_batch: usize,
    pub positives: usize,
    pub hard_negatives: usize,
    /// Fill a hard-negative shortfall with random vocabulary pairs instead of failing.
    pub pad_negatives: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            groups_per_batch: 8,
            positives: 2,
            hard_negatives: 8,
            pad_negatives: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveGroup {
    pub anchor_pair: EntityPair,
    pub anchor: PreprocessedExample,
    pub positives: Vec<PreprocessedExample>,
    pub negatives: Vec<(EntityPair, PreprocessedExample)>,
    /// Trailing entries of `negatives` that are random padding rather than hard negatives.
    pub padded: usize,
}

impl ContrastiveGroup {
    pub fn hard_negatives(&self) -> &[(EntityPair, PreprocessedExample)] {
        &self.negatives[..self.negatives.len() - self.padded]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationBatch {
    pub groups: Vec<ContrastiveGroup>,
}

impl RelationBatch {
    /// Every example of the batch with its pair, in group order
    /// (anchor, positives, negatives).
    pub fn flatten(&self) -> Vec<(EntityPair, &PreprocessedExample)> {
        let mut out = Vec::new();
        for g in &self.groups {
            out.push((g.anchor_pair, &g.anchor));
            out.extend(g.positives.iter().map(|p| (g.anchor_pair, p)));
            out.extend(g.negatives.iter().map(|(p, e)| (*p, e)));
        }
        out
    }
}

/// Seeded, endless stream of contrastive batches over the pairs of a vocabulary.
pub struct RelationBatchStream<'c> {
    corpus: &'c [AnnotatedPassage],
    occurrences: PairOccurrences,
    anchors: Vec<EntityPair>,
    supported: Vec<EntityPair>,
    by_topic: BTreeMap<u32, Vec<EntityPair>>,
    by_target: BTreeMap<u32, Vec<EntityPair>>,
    config: BatchConfig,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl<'c> RelationBatchStream<'c> {
    pub fn new(
        corpus: &'c [AnnotatedPassage],
        pairs: &PairVocabulary,
        config: BatchConfig,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if config.groups_per_batch == 0 {
            return Err(VkbError::InvalidConfig("groups_per_batch must be positive".into()));
        }
        let occurrences = PairOccurrences::index(corpus);
        let mut anchors = Vec::new();
        let mut supported = Vec::new();
        for &p in &pairs.pairs {
            let n = occurrences.get(p).len();
            if n >= 1 {
                supported.push(p);
            }
            if n >= 2 {
                anchors.push(p);
            } else {
                log::warn!(
                    "dropping pair ({}, {}): {} supporting passage(s)",
                    p.topic,
                    p.target,
                    n
                );
            }
        }
        if anchors.is_empty() {
            return Err(VkbError::InsufficientExamples(
                "no pair has two supporting passages".into(),
            ));
        }
        let mut by_topic: BTreeMap<u32, Vec<EntityPair>> = BTreeMap::new();
        let mut by_target: BTreeMap<u32, Vec<EntityPair>> = BTreeMap::new();
        for &p in &supported {
            by_topic.entry(p.topic).or_default().push(p);
            by_target.entry(p.target).or_default().push(p);
        }
        Ok(Self {
            corpus,
            occurrences,
            order: (0..anchors.len()).collect(),
            cursor: usize::MAX,
            anchors,
            supported,
            by_topic,
            by_target,
            config,
            rng,
        })
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    fn next_anchor(&mut self) -> EntityPair {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let p = self.anchors[self.order[self.cursor]];
        self.cursor += 1;
        p
    }

    fn example(&mut self, pair: EntityPair, exclude: Option<usize>) -> Result<(usize, PreprocessedExample)> {
        let occ = self.occurrences.get(pair);
        let choices: Vec<usize> = occ.iter().copied().filter(|&i| Some(i) != exclude).collect();
        let pool = if choices.is_empty() { occ.to_vec() } else { choices };
        let idx = *pool.choose(&mut self.rng).expect("supported pair");
        let ex = preprocess_relation_example(&self.corpus[idx], pair, true, true)?;
        Ok((idx, ex))
    }

    fn group(&mut self, anchor: EntityPair) -> Result<ContrastiveGroup> {
        let (anchor_idx, anchor_ex) = self.example(anchor, None)?;
        let mut positives = Vec::with_capacity(self.config.positives);
        for _ in 0..self.config.positives {
            positives.push(self.example(anchor, Some(anchor_idx))?.1);
        }
        // Exactly one shared endpoint.
        let mut candidates: Vec<EntityPair> = self
            .by_topic
            .get(&anchor.topic)
            .into_iter()
            .flatten()
            .chain(self.by_target.get(&anchor.target).into_iter().flatten())
            .copied()
            .filter(|&p| (p.topic == anchor.topic) != (p.target == anchor.target))
            .collect();
        candidates.sort();
        candidates.dedup();
        let need = self.config.hard_negatives;
        let mut chosen: Vec<EntityPair> = candidates
            .choose_multiple(&mut self.rng, need.min(candidates.len()))
            .copied()
            .collect();
        let mut padded = 0;
        if chosen.len() < need {
            if !self.config.pad_negatives {
                return Err(VkbError::InsufficientNegatives {
                    topic: anchor.topic,
                    target: anchor.target,
                    needed: need,
                    found: chosen.len(),
                });
            }
            while chosen.len() < need {
                let p = self.supported[self.rng.random_range(0..self.supported.len())];
                if p != anchor {
                    chosen.push(p);
                    padded += 1;
                } else if self.supported.len() == 1 {
                    break;
                }
            }
        }
        let mut negatives = Vec::with_capacity(chosen.len());
        for p in chosen {
            negatives.push((p, self.example(p, None)?.1));
        }
        Ok(ContrastiveGroup {
            anchor_pair: anchor,
            anchor: anchor_ex,
            positives,
            negatives,
            padded,
        })
    }

    pub fn next_batch(&mut self) -> Result<RelationBatch> {
        let mut groups = Vec::with_capacity(self.config.groups_per_batch);
        for _ in 0..self.config.groups_per_batch {
            let a = self.next_anchor();
            groups.push(self.group(a)?);
        }
        Ok(RelationBatch { groups })
    }
}

impl Iterator for RelationBatchStream<'_> {
    type Item = Result<RelationBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{extract_entity_pairs, generate_synthetic_corpus, SynthConfig};
    use rand::SeedableRng;

    fn world() -> crate::corpus::SyntheticWorld {
        generate_synthetic_corpus(
            &SynthConfig {
                num_entities: 12,
                num_relations: 4,
                facts_per_relation: 10,
                ..Default::default()
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn cardinality_and_hard_negative_definition() {
        let w = world();
        let pairs = extract_entity_pairs(&w.passages, 2, 1000);
        assert!(pairs.len() >= 20);
        let mut s = RelationBatchStream::new(
            &w.passages,
            &pairs,
            BatchConfig::default(),
            ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        for _ in 0..5 {
            let b = s.next_batch().unwrap();
            assert_eq!(b.groups.len(), 8);
            for g in &b.groups {
                assert_eq!(g.positives.len(), 2);
                assert_eq!(g.negatives.len(), 8);
                for (p, ex) in g.hard_negatives() {
                    assert!((p.topic == g.anchor_pair.topic) ^ (p.target == g.anchor_pair.target));
                    assert_eq!(ex.pair(), Some(*p));
                }
                for p in &g.positives {
                    assert_eq!(p.pair(), Some(g.anchor_pair));
                }
            }
        }
    }

    #[test]
    fn deterministic_stream() {
        let w = world();
        let pairs = extract_entity_pairs(&w.passages, 2, 1000);
        let run = || {
            let s = RelationBatchStream::new(
                &w.passages,
                &pairs,
                BatchConfig::default(),
                ChaCha8Rng::seed_from_u64(9),
            )
            .unwrap();
            s.take(3).map(|b| b.unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shortfall_errors_without_padding() {
        let w = world();
        let pairs = extract_entity_pairs(&w.passages, 2, 1000);
        let cfg = BatchConfig {
            hard_negatives: 500,
            pad_negatives: false,
            ..Default::default()
        };
        let mut s =
            RelationBatchStream::new(&w.passages, &pairs, cfg, ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            s.next_batch(),
            Err(VkbError::InsufficientNegatives { .. })
        ));
    }
}
