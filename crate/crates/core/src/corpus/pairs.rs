use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AnnotatedPassage, EntityId, EntityPair};

/// Entity pairs ranked by point-wise mutual information.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairVocabulary {
    pub pairs: Vec<EntityPair>,
    pub counts: Vec<u64>,
    pub pmi: Vec<f64>,
}

impl PairVocabulary {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, pair: EntityPair) -> bool {
        self.pairs.contains(&pair)
    }

    /// A vocabulary over explicit pairs (no statistics), e.g. for injection.
    pub fn from_pairs(pairs: Vec<EntityPair>) -> Self {
        let n = pairs.len();
        Self {
            pairs,
            counts: vec![0; n],
            pmi: vec![0.0; n],
        }
    }
}

/// Counts directional co-occurrence of distinct entities within each passage,
/// drops pairs seen fewer than `min_count` times and ranks the rest by
/// `log(count(e1,e2) · N / (count(e1, ·) · count(·, e2)))`, `N` being the total
/// number of pair occurrences. Ties go to the smaller `(topic, target)`.
pub fn extract_entity_pairs(
    corpus: &[AnnotatedPassage],
    min_count: u64,
    max_pairs: usize,
) -> PairVocabulary {
    let mut joint: BTreeMap<EntityPair, u64> = BTreeMap::new();
    for p in corpus {
        let ents = p.entities();
        for &a in &ents {
            for &b in &ents {
                if a != b {
                    *joint.entry(EntityPair::new(a, b)).or_default() += 1;
                }
            }
        }
    }
    let mut as_topic: BTreeMap<EntityId, u64> = BTreeMap::new();
    let mut as_target: BTreeMap<EntityId, u64> = BTreeMap::new();
    let mut total = 0u64;
    for (pair, &c) in &joint {
        *as_topic.entry(pair.topic).or_default() += c;
        *as_target.entry(pair.target).or_default() += c;
        total += c;
    }
    let mut ranked: Vec<(EntityPair, u64, f64)> = joint
        .iter()
        .filter(|(_, &c)| c >= min_count)
        .map(|(&pair, &c)| {
            let pmi = ((c as f64) * (total as f64)
                / (as_topic[&pair.topic] as f64 * as_target[&pair.target] as f64))
                .ln();
            (pair, c, pmi)
        })
        .collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    ranked.truncate(max_pairs);
    PairVocabulary {
        pairs: ranked.iter().map(|r| r.0).collect(),
        counts: ranked.iter().map(|r| r.1).collect(),
        pmi: ranked.iter().map(|r| r.2).collect(),
    }
}

/// Passages supporting each pair, in corpus order.
#[derive(Clone, Debug, Default)]
pub struct PairOccurrences {
    map: BTreeMap<EntityPair, Vec<usize>>,
}

impl PairOccurrences {
    pub fn index(corpus: &[AnnotatedPassage]) -> Self {
        let mut map: BTreeMap<EntityPair, Vec<usize>> = BTreeMap::new();
        for (i, p) in corpus.iter().enumerate() {
            let ents = p.entities();
            for &a in &ents {
                for &b in &ents {
                    if a != b {
                        map.entry(EntityPair::new(a, b)).or_default().push(i);
                    }
                }
            }
        }
        Self { map }
    }

    pub fn get(&self, pair: EntityPair) -> &[usize] {
        self.map.get(&pair).map_or(&[], Vec::as_slice)
    }

    /// Pairs with `topic` as their first endpoint.
    pub fn with_topic(&self, topic: EntityId) -> impl Iterator<Item = EntityPair> + '_ {
        self.map
            .range(EntityPair::new_unchecked(topic, 0)..)
            .take_while(move |(p, _)| p.topic == topic)
            .map(|(p, _)| *p)
    }

    pub fn pairs(&self) -> impl Iterator<Item = EntityPair> + '_ {
        self.map.keys().copied()
    }
}

impl EntityPair {
    pub(crate) fn new_unchecked(topic: EntityId, target: EntityId) -> Self {
        Self { topic, target }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Mention;

    fn passage(id: usize, ents: &[EntityId]) -> AnnotatedPassage {
        AnnotatedPassage {
            id: format!("p{id}"),
            tokens: vec![10; ents.len() * 2],
            mentions: ents
                .iter()
                .enumerate()
                .map(|(i, &e)| Mention::new(2 * i, 2 * i, e))
                .collect(),
        }
    }

    fn corpus_ab6() -> Vec<AnnotatedPassage> {
        let mut c: Vec<AnnotatedPassage> = (0..6).map(|i| passage(i, &[0, 1])).collect();
        c.push(passage(6, &[0, 2]));
        c.push(passage(7, &[2, 3]));
        c
    }

    #[test]
    fn threshold_boundary() {
        let c = corpus_ab6();
        let v = extract_entity_pairs(&c, 5, 100);
        assert!(v.contains(EntityPair::new(0, 1)));
        assert!(v.contains(EntityPair::new(1, 0)));
        assert_eq!(v.len(), 2);
        let v = extract_entity_pairs(&c, 7, 100);
        assert!(v.is_empty());
    }

    #[test]
    fn directional_counts() {
        let mut c = corpus_ab6();
        // Counting is per passage and direction-symmetric within a passage.
        c.push(passage(8, &[1, 0]));
        let v = extract_entity_pairs(&c, 1, 100);
        let i = v.pairs.iter().position(|&p| p == EntityPair::new(0, 1)).unwrap();
        let j = v.pairs.iter().position(|&p| p == EntityPair::new(1, 0)).unwrap();
        assert_eq!(v.counts[i], 7);
        assert_eq!(v.counts[j], 7);
    }

    #[test]
    fn pmi_matches_exact_rational_order() {
        // (0,1) and (2,3) both co-occur 3 times but entity 0 also appears elsewhere.
        let mut c = Vec::new();
        for i in 0..3 {
            c.push(passage(i, &[0, 1]));
            c.push(passage(10 + i, &[2, 3]));
        }
        c.push(passage(20, &[0, 4]));
        c.push(passage(21, &[0, 5]));
        let v = extract_entity_pairs(&c, 3, 100);
        let pos = |p: EntityPair| v.pairs.iter().position(|&q| q == p).unwrap();
        // Exact integer oracle: count·N/(a·b). N = 16 (3·2 + 3·2 + 2 + 2).
        let n: u128 = 16;
        let ratio = |c: u128, a: u128, b: u128| (c * n, a * b);
        let (num01, den01) = ratio(3, 5, 3); // count(0,·)=5, count(·,1)=3
        let (num23, den23) = ratio(3, 3, 3);
        // num01/den01 < num23/den23  <=>  num01·den23 < num23·den01
        assert!(num01 * den23 < num23 * den01);
        assert!(pos(EntityPair::new(2, 3)) < pos(EntityPair::new(0, 1)));
        let expected = ((3.0 * 16.0) / (5.0 * 3.0f64)).ln();
        assert!((v.pmi[pos(EntityPair::new(0, 1))] - expected).abs() < 1e-12);
    }

    #[test]
    fn pmi_ties_break_by_pair_id() {
        let c: Vec<AnnotatedPassage> = (0..2)
            .flat_map(|i| [passage(i, &[4, 5]), passage(10 + i, &[2, 3])])
            .collect();
        let v = extract_entity_pairs(&c, 1, 100);
        assert_eq!(
            v.pairs,
            vec![
                EntityPair::new(2, 3),
                EntityPair::new(3, 2),
                EntityPair::new(4, 5),
                EntityPair::new(5, 4)
            ]
        );
        let v = extract_entity_pairs(&c, 1, 2);
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn ranking_ignores_passage_order() {
        let mut c = corpus_ab6();
        c.push(passage(9, &[3, 0, 2]));
        let a = extract_entity_pairs(&c, 1, 100);
        c.reverse();
        let b = extract_entity_pairs(&c, 1, 100);
        assert_eq!(a, b);
    }

    #[test]
    fn occurrences_index() {
        let c = corpus_ab6();
        let occ = PairOccurrences::index(&c);
        assert_eq!(occ.get(EntityPair::new(0, 1)).len(), 6);
        assert_eq!(occ.get(EntityPair::new(0, 2)), &[6]);
        let t: Vec<EntityPair> = occ.with_topic(0).collect();
        assert_eq!(t, vec![EntityPair::new(0, 1), EntityPair::new(0, 2)]);
    }
}
