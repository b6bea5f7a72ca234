use proptest::prelude::*;
use rand::SeedableRng;

use super::*;
use crate::corpus::{extract_entity_pairs, generate_synthetic_corpus, Mention as Span, SynthConfig};
use crate::encoder::{init_params, EncoderConfig};
use crate::tensor::Tensor;

fn world() -> crate::corpus::SyntheticWorld {
    generate_synthetic_corpus(
        &SynthConfig {
            num_entities: 10,
            num_relations: 2,
            facts_per_relation: 4,
            passages_per_fact: 3,
            ..Default::default()
        },
        0,
    )
    .unwrap()
}

fn params(w: &crate::corpus::SyntheticWorld) -> ModelParams {
    init_params(&EncoderConfig {
        token_vocab_size: w.tokens.len(),
        entity_vocab_size: w.entities.len(),
        model_dim: 8,
        entity_dim: 4,
        relation_dim: 4,
        key_dim: 4,
        layers: 1,
        heads: 2,
        ff_dim: 8,
        max_seq_len: 32,
        max_hops: 2,
        seed: 1,
    })
    .unwrap()
}

pub(crate) fn synthetic_memory(keys: &[Vec<f64>], topics: &[EntityId]) -> KeyValueMemory {
    let entries = keys
        .iter()
        .zip(topics)
        .enumerate()
        .map(|(i, (k, &t))| MemoryEntry {
            pair: EntityPair::new(t, 1000 + i as u32),
            value_entity: 1000 + i as u32,
            key: k.clone(),
            relation: vec![0.0; 2],
            mention_count: 1,
            provenance: vec![format!("p{i}")],
        })
        .collect();
    KeyValueMemory::empty(DedupMode::AllMentions, keys[0].len(), 2, 0, 5).with_entries(entries)
}

#[test]
fn key_projection() {
    let w = world();
    let mut p = params(&w);
    let wk = p.layout.w_k;
    *p.get_mut(wk) = Tensor::zeros(8, 4);
    assert_eq!(memory_key(&p, &[1.0; 4], &[2.0; 4]), vec![0.0; 4]);

    let cfg = EncoderConfig {
        key_dim: 8,
        ..p.config.clone()
    };
    let mut p = init_params(&cfg).unwrap();
    let wk = p.layout.w_k;
    *p.get_mut(wk) = Tensor::identity(8);
    let (e, r) = ([1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]);
    assert_eq!(memory_key(&p, &e, &r), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    *p.get_mut(wk) = Tensor::randn(8, 8, 1.0, &mut rng);
    let key = memory_key(&p, &e, &r);
    let cat: Vec<f64> = e.iter().chain(&r).copied().collect();
    for j in 0..8 {
        let oracle: f64 = (0..8).map(|i| cat[i] * p.get(wk).get(i, j)).sum();
        assert!((key[j] - oracle).abs() <= 1e-12 * oracle.abs().max(1e-12));
    }
}

#[test]
fn build_modes() {
    let w = world();
    let p = params(&w);
    let pairs = extract_entity_pairs(&w.passages, 2, 1000);
    let all = build_memory(&w.passages, &pairs, &p, DedupMode::AllMentions, 5, 0).unwrap();
    let occ = PairOccurrences::index(&w.passages);
    let total: usize = pairs.pairs.iter().map(|&q| occ.get(q).len()).sum();
    assert_eq!(all.len(), total);

    let avg = build_memory(&w.passages, &pairs, &p, DedupMode::Averaged, 5, 0).unwrap();
    assert_eq!(avg.len(), pairs.len());
    for e in avg.entries() {
        assert_eq!(e.value_entity, e.pair.target);
        let mention_keys: Vec<&MemoryEntry> =
            all.entries().iter().filter(|m| m.pair == e.pair).collect();
        assert_eq!(mention_keys.len(), e.mention_count as usize);
        for j in 0..4 {
            let m: f64 = mention_keys.iter().map(|m| m.key[j]).sum::<f64>() / mention_keys.len() as f64;
            assert!((e.key[j] - m).abs() < 1e-9);
        }
    }
}

#[test]
fn single_mention_average_is_that_key() {
    let w = world();
    let p = params(&w);
    let one = vec![w.passages[0].clone()];
    let pairs = extract_entity_pairs(&one, 1, 10);
    let all = build_memory(&one, &pairs, &p, DedupMode::AllMentions, 5, 0).unwrap();
    let avg = build_memory(&one, &pairs, &p, DedupMode::Averaged, 5, 0).unwrap();
    for (a, b) in all.entries().iter().zip(avg.entries()) {
        assert_eq!(a.key, b.key);
    }
}

#[test]
fn averaged_sampling_caps_mentions() {
    let w = world();
    let p = params(&w);
    let pairs = extract_entity_pairs(&w.passages, 2, 1000);
    let a = build_memory(&w.passages, &pairs, &p, DedupMode::Averaged, 2, 7).unwrap();
    let b = build_memory(&w.passages, &pairs, &p, DedupMode::Averaged, 2, 7).unwrap();
    assert_eq!(a, b);
    assert!(a.entries().iter().all(|e| e.mention_count <= 2 && e.provenance.len() == e.mention_count as usize));
}

#[test]
fn empty_memory_is_an_error() {
    let w = world();
    let p = params(&w);
    let pairs = PairVocabulary::from_pairs(vec![EntityPair::new(0, 9)]);
    let corpus = vec![AnnotatedPassage {
        id: "x".into(),
        tokens: vec![5, 6],
        mentions: vec![Span::new(0, 0, 1)],
    }];
    assert!(matches!(
        build_memory(&corpus, &pairs, &p, DedupMode::AllMentions, 5, 0),
        Err(VkbError::EmptyMemory)
    ));
}

#[test]
fn retrieval_hand_cases() {
    let m = synthetic_memory(&[vec![1.0]], &[0]);
    let r = retrieve_topk(&m, &[3.0], 5, None).unwrap();
    assert_eq!(r.hits.len(), 1);
    assert_eq!(r.hits[0].weight, 1.0);

    let m = synthetic_memory(&[vec![-1.0], vec![1.0], vec![0.0]], &[0, 0, 0]);
    let r = retrieve_topk(&m, &[1.0], 2, None).unwrap();
    assert_eq!(r.hits.iter().map(|h| h.entry).collect::<Vec<_>>(), vec![1, 2]);
    assert!((r.hits[0].weight - 0.7311).abs() < 1e-4);
    assert!((r.hits[1].weight - 0.2689).abs() < 1e-4);

    let f: BTreeSet<EntityId> = [7].into();
    assert!(retrieve_topk(&m, &[1.0], 2, Some(&f)).unwrap().is_empty());
    assert!(retrieve_topk(&m, &[1.0], 0, None).is_err());
}

#[test]
fn ties_prefer_lower_index() {
    let m = synthetic_memory(&[vec![1.0], vec![2.0], vec![2.0], vec![1.0]], &[0, 1, 2, 3]);
    let r = retrieve_topk(&m, &[1.0], 3, None).unwrap();
    assert_eq!(r.hits.iter().map(|h| h.entry).collect::<Vec<_>>(), vec![1, 2, 0]);
}

#[test]
fn injection() {
    let w = world();
    let p = params(&w);
    let (old, new): (Vec<_>, Vec<_>) = w
        .passages
        .iter()
        .cloned()
        .zip(&w.passage_facts)
        .partition(|(_, &f)| f < 4);
    let old: Vec<AnnotatedPassage> = old.into_iter().map(|x| x.0).collect();
    let new: Vec<AnnotatedPassage> = new.into_iter().map(|x| x.0).collect();
    let old_pairs = extract_entity_pairs(&old, 2, 1000);
    let mem = build_memory(&old, &old_pairs, &p, DedupMode::AllMentions, 5, 0).unwrap();

    let same = inject_pairs(&mem, &[], &PairVocabulary::default(), &p).unwrap();
    assert_eq!(memory_to_bytes(&same), memory_to_bytes(&mem));

    let new_pairs = extract_entity_pairs(&new, 2, 1000);
    let fresh: Vec<EntityPair> = new_pairs
        .pairs
        .iter()
        .copied()
        .filter(|&q| !mem.contains_pair(q))
        .collect();
    let disjoint = PairVocabulary::from_pairs(fresh.clone());
    let grown = inject_pairs(&mem, &new, &disjoint, &p).unwrap();
    let occ = PairOccurrences::index(&new);
    let added: usize = fresh.iter().map(|&q| occ.get(q).len()).sum();
    assert_eq!(grown.len(), mem.len() + added);

    // An injected pair is retrievable only after injection.
    let target = grown.entries().last().unwrap().clone();
    let filter: BTreeSet<EntityId> = [target.pair.topic].into();
    let before = retrieve_topk(&mem, &target.key, grown.len(), Some(&filter)).unwrap();
    assert!(before.hits.iter().all(|h| h.pair != target.pair));
    let after = retrieve_topk(&grown, &target.key, grown.len(), Some(&filter)).unwrap();
    assert!(after.hits.iter().any(|h| h.pair == target.pair));
    let e = target.pair.topic;
    assert!(grown.entries_with_topic(e).iter().all(|&i| grown.entries()[i].pair.topic == e));
}

#[test]
fn averaged_injection_reaverages_duplicates() {
    let w = world();
    let p = params(&w);
    let pairs = extract_entity_pairs(&w.passages, 2, 1000);
    let (first, second) = w.passages.split_at(w.passages.len() / 2);
    let full = build_memory(&w.passages, &pairs, &p, DedupMode::Averaged, 100, 0).unwrap();
    let half = build_memory(first, &pairs, &p, DedupMode::Averaged, 100, 0).unwrap();
    let merged = inject_pairs(&half, second, &pairs, &p).unwrap();
    assert_eq!(merged.stats().distinct_pairs, merged.len());
    for e in full.entries() {
        let i = merged
            .entries()
            .iter()
            .position(|m| m.pair == e.pair)
            .unwrap();
        let m = &merged.entries()[i];
        assert_eq!(m.mention_count, e.mention_count);
        for (a, b) in m.key.iter().zip(&e.key) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn snapshot_round_trip() {
    let w = world();
    let p = params(&w);
    let pairs = extract_entity_pairs(&w.passages, 2, 1000);
    for mode in [DedupMode::AllMentions, DedupMode::Averaged] {
        let m = build_memory(&w.passages, &pairs, &p, mode, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_memory(&m, &path).unwrap();
        let loaded = load_memory(&path).unwrap();
        assert_eq!(loaded, m);
        let path2 = dir.path().join("m2.bin");
        save_memory(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // Scores on probe queries are unchanged after the byte round trip.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let q = Tensor::randn(1, 4, 1.0, &mut rng).into_vec();
            assert_eq!(
                retrieve_topk(&m, &q, 5, None).unwrap(),
                retrieve_topk(&loaded, &q, 5, None).unwrap()
            );
        }

        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(memory_from_bytes(&bytes[..cut]), Err(VkbError::Corrupt(_))));
        }
    }
}

fn arb_memory() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<EntityId>, Vec<f64>)> {
    (1usize..30, 1usize..4).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec((-3i32..4).prop_map(|x| x as f64 * 0.5), d), n),
            prop::collection::vec(0u32..6, n),
            prop::collection::vec(-2.0f64..2.0, d),
        )
    })
}

proptest! {
    #[test]
    fn full_k_matches_sort((keys, topics, q) in arb_memory()) {
        let m = synthetic_memory(&keys, &topics);
        let r = retrieve_topk(&m, &q, keys.len() + 3, None).unwrap();
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by(|&a, &b| dot(&q, &keys[b]).total_cmp(&dot(&q, &keys[a])).then(a.cmp(&b)));
        prop_assert_eq!(r.hits.iter().map(|h| h.entry).collect::<Vec<_>>(), order);
        let s: f64 = r.hits.iter().map(|h| h.weight).sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn filtered_is_ordered_subset((keys, topics, q) in arb_memory(), f in prop::collection::btree_set(0u32..6, 0..4), k in 1usize..8) {
        let m = synthetic_memory(&keys, &topics);
        let all = retrieve_topk(&m, &q, keys.len(), None).unwrap();
        let filtered = retrieve_topk(&m, &q, k, Some(&f)).unwrap();
        let expected: Vec<usize> = all
            .hits
            .iter()
            .filter(|h| f.contains(&h.pair.topic))
            .map(|h| h.entry)
            .take(k)
            .collect();
        prop_assert_eq!(filtered.hits.iter().map(|h| h.entry).collect::<Vec<_>>(), expected);
        prop_assert!(filtered.hits.iter().all(|h| f.contains(&h.pair.topic)));
    }

    #[test]
    fn positive_scaling_keeps_ranking((keys, topics, q) in arb_memory(), c in 0.1f64..10.0) {
        let m = synthetic_memory(&keys, &topics);
        let a = retrieve_topk(&m, &q, 4, None).unwrap();
        let scaled: Vec<f64> = q.iter().map(|x| x * c).collect();
        let b = retrieve_topk(&m, &scaled, 4, None).unwrap();
        let ea: Vec<usize> = a.hits.iter().map(|h| h.entry).collect();
        let eb: Vec<usize> = b.hits.iter().map(|h| h.entry).collect();
        // Products can reorder only through exact ties; compare score order instead.
        let sa: Vec<f64> = ea.iter().map(|&i| dot(&q, &keys[i])).collect();
        let sb: Vec<f64> = eb.iter().map(|&i| dot(&q, &keys[i])).collect();
        prop_assert_eq!(sa, sb);
    }

    #[test]
    fn topic_index_is_exact((keys, topics, _q) in arb_memory()) {
        let m = synthetic_memory(&keys, &topics);
        for e in 0u32..6 {
            let expect: Vec<usize> = (0..topics.len()).filter(|&i| topics[i] == e).collect();
            prop_assert_eq!(m.entries_with_topic(e), expect.as_slice());
        }
    }
}
