use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{generate_synthetic_corpus, Fact, SynthConfig};
use crate::encoder::{init_params, EncoderConfig};
use crate::training::Quiet;

fn kb_of(facts: &[(u32, u32, u32)], relations: usize) -> SymbolicKB {
    SymbolicKB {
        facts: facts
            .iter()
            .map(|&(subject, relation, object)| Fact {
                subject,
                relation,
                object,
            })
            .collect(),
        relation_names: (0..relations).map(|r| format!("r{r}")).collect(),
    }
}

fn random_kb(seed: u64, n_facts: usize, n_ent: u32, n_rel: u32) -> SymbolicKB {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let facts: Vec<(u32, u32, u32)> = (0..n_facts)
        .map(|_| (rng.random_range(0..n_ent), rng.random_range(0..n_rel), rng.random_range(0..n_ent)))
        .collect();
    kb_of(&facts, n_rel as usize)
}

fn set(xs: &[u32]) -> BTreeSet<u32> {
    xs.iter().copied().collect()
}

#[test]
fn hits_hand_cases() {
    let g = vec![set(&[1]), set(&[2, 3]), set(&[4])];
    assert_eq!(hits_at_1(&[vec![1], vec![3, 2], vec![4]], &g).unwrap(), 1.0);
    assert_eq!(hits_at_1(&[vec![0], vec![1], vec![]], &g).unwrap(), 0.0);
    let two_of_three = hits_at_1(&[vec![1, 0], vec![2], vec![0, 4]], &g).unwrap();
    assert!((two_of_three - 2.0 / 3.0).abs() < 1e-9);
    assert!(matches!(
        hits_at_1(&[vec![1]], &g),
        Err(VkbError::LengthMismatch(1, 3))
    ));
}

#[test]
fn symbolic_hand_cases() {
    let kb = kb_of(&[(0, 0, 1)], 1);
    assert!(symbolic_follow(&kb, &BTreeSet::new(), &[0]).unwrap().is_empty());
    assert_eq!(symbolic_follow(&kb, &set(&[0]), &[0]).unwrap(), set(&[1]));
    assert!(matches!(
        symbolic_follow(&kb, &set(&[0]), &[3]),
        Err(VkbError::UnknownRelation(_))
    ));
}

#[test]
fn two_hop_matches_pairwise_enumeration() {
    let kb = random_kb(11, 50, 12, 3);
    for x in 0..12u32 {
        for r1 in 0..3 {
            for r2 in 0..3 {
                let mut naive = BTreeSet::new();
                for a in &kb.facts {
                    for b in &kb.facts {
                        if a.subject == x && a.relation == r1 && b.relation == r2 && b.subject == a.object {
                            naive.insert(b.object);
                        }
                    }
                }
                assert_eq!(symbolic_follow(&kb, &set(&[x]), &[r1, r2]).unwrap(), naive);
            }
        }
    }
}

#[test]
fn margin_constructed_cases() {
    let same = vec![vec![vec![1.0, 2.0]; 3], vec![vec![1.0, 2.0]; 2]];
    let m = embedding_margin(&same).unwrap();
    assert!(m.margin.abs() < 1e-12);
    let orth = vec![vec![vec![1.0, 0.0]; 3], vec![vec![0.0, 2.0]; 3]];
    let m = embedding_margin(&orth).unwrap();
    assert!((m.within - 1.0).abs() < 1e-12);
    assert!(m.between.abs() < 1e-12);
    assert!((m.margin - 1.0).abs() < 1e-12);
    assert!(matches!(
        embedding_margin(&[vec![vec![1.0]; 3]]),
        Err(VkbError::InsufficientExamples(_))
    ));
    assert!(matches!(
        embedding_margin(&[vec![vec![1.0]; 3], vec![vec![1.0]]]),
        Err(VkbError::InsufficientExamples(_))
    ));
}

#[test]
fn report_fractions() {
    let rec = |correct, covered| EvalRecord {
        index: 0,
        predicted: None,
        gold: vec![],
        rank: None,
        correct,
        covered,
        hops: 1,
        relations: vec![0],
    };
    let r = EvalReport::from_records("t", vec![rec(true, true), rec(false, true), rec(false, false), rec(true, false)]);
    assert_eq!(r.hits_at_1, 0.5);
    assert_eq!(r.coverage, 0.5);
    assert_eq!(r.covered().hits_at_1, 0.5);
    assert_eq!(r.covered().questions, 2);
    assert_eq!(EvalReport::from_records("e", vec![]).hits_at_1, 0.0);
}

fn small_world() -> crate::corpus::SyntheticWorld {
    generate_synthetic_corpus(
        &SynthConfig {
            num_entities: 12,
            num_relations: 4,
            facts_per_relation: 5,
            passages_per_fact: 2,
            ..Default::default()
        },
        2,
    )
    .unwrap()
}

fn small_params(w: &crate::corpus::SyntheticWorld) -> ModelParams {
    init_params(&EncoderConfig {
        token_vocab_size: w.tokens.len(),
        entity_vocab_size: w.entities.len(),
        model_dim: 16,
        entity_dim: 8,
        relation_dim: 8,
        key_dim: 8,
        layers: 1,
        heads: 2,
        ff_dim: 16,
        max_seq_len: 40,
        max_hops: 2,
        seed: 5,
    })
    .unwrap()
}

#[test]
fn holdout_preconditions() {
    let w = small_world();
    assert!(matches!(check_holdout(&w.kb, &BTreeSet::new()), Err(VkbError::InvalidConfig(_))));
    assert!(matches!(check_holdout(&w.kb, &set(&[0, 1, 2])), Err(VkbError::InvalidConfig(_))));
    assert!(matches!(check_holdout(&w.kb, &set(&[9])), Err(VkbError::UnknownRelation(_))));
    check_holdout(&w.kb, &set(&[0, 1])).unwrap();
}

#[test]
fn holdout_never_trains_on_held_out_relations() {
    let w = small_world();
    let qs = w.one_hop_questions(0.3, 0);
    let p = small_params(&w);
    let holdout = set(&[1]);
    let cfg = HoldoutConfig {
        finetune: TrainConfig {
            steps: 3,
            batch_size: 4,
            ..HoldoutConfig::default().finetune
        },
        eval: EvalConfig { k: 4 },
        follow: FollowTrainConfig { k: 4 },
        ..Default::default()
    };
    let out = holdout_relation_eval(&w.passages, &w.kb, &qs.train, &qs.test, &holdout, &p, &cfg, &mut Quiet).unwrap();
    assert!(!out.audit.is_empty());
    assert!(out.audit.is_disjoint(&holdout));
    assert!(out.novel.questions > 0 && out.seen.questions > 0);
    assert_eq!(out.seen.questions + out.novel.questions, qs.test.len());
    // The seen split agrees with a plain evaluation of the same questions.
    let seen_qs: Vec<Question> = qs.test.iter().filter(|q| !q.relations.contains(&1)).cloned().collect();
    let plain = evaluate_follow(&out.memory, &out.params, &w.kb, &seen_qs, "seen", cfg.eval).unwrap();
    assert_eq!(plain.hits_at_1, out.seen.hits_at_1);
    let preds = |r: &EvalReport| r.records.iter().map(|x| x.predicted).collect::<Vec<_>>();
    assert_eq!(preds(&plain), preds(&out.seen));
}

#[test]
fn coverage_follows_memory_contents() {
    let w = small_world();
    let p = small_params(&w);
    let mem = MemoryConfig::default().build(&w.passages, &p).unwrap();
    let qs = w.one_hop_questions(0.0, 0);
    let r = evaluate_follow(&mem, &p, &w.kb, &qs.train, "all", EvalConfig { k: 4 }).unwrap();
    // Every fact is rendered, so every 1-hop answer pair is stored.
    assert_eq!(r.coverage, 1.0);
    for rec in &r.records {
        if let Some(rank) = rec.rank {
            assert!(rank >= 1);
            assert_eq!(rec.correct, rank == 1);
        }
    }
}

#[test]
fn margin_from_params_runs() {
    let w = small_world();
    let p = small_params(&w);
    let mut groups: BTreeMap<u32, Vec<PreprocessedExample>> = BTreeMap::new();
    for (passage, &fi) in w.passages.iter().zip(&w.passage_facts) {
        let f = w.kb.facts[fi];
        let ex = crate::corpus::preprocess_relation_example(passage, crate::corpus::EntityPair::new(f.subject, f.object), true, true).unwrap();
        groups.entry(f.relation).or_default().push(ex);
    }
    let m = relation_embedding_margin(&groups, &p).unwrap();
    assert!(m.within.is_finite() && m.between.is_finite());
}

fn arb_kb() -> impl Strategy<Value = SymbolicKB> {
    prop::collection::vec((0u32..8, 0u32..3, 0u32..8), 0..30).prop_map(|f| kb_of(&f, 3))
}

proptest! {
    #[test]
    fn symbolic_follow_is_monotone(kb in arb_kb(), x in prop::collection::btree_set(0u32..8, 0..4),
                                   extra in prop::collection::btree_set(0u32..8, 0..4),
                                   rels in prop::collection::vec(0u32..3, 1..4)) {
        let bigger: BTreeSet<u32> = x.union(&extra).copied().collect();
        let a = symbolic_follow(&kb, &x, &rels).unwrap();
        let b = symbolic_follow(&kb, &bigger, &rels).unwrap();
        prop_assert!(a.is_subset(&b));
    }

    #[test]
    fn symbolic_follow_composes(kb in arb_kb(), x in prop::collection::btree_set(0u32..8, 0..4),
                                rels in prop::collection::vec(0u32..3, 0..5), cut in 0usize..5) {
        let cut = cut.min(rels.len());
        let whole = symbolic_follow(&kb, &x, &rels).unwrap();
        let mid = symbolic_follow(&kb, &x, &rels[..cut]).unwrap();
        prop_assert_eq!(whole, symbolic_follow(&kb, &mid, &rels[cut..]).unwrap());
    }

    #[test]
    fn hits_ignores_question_order(rows in prop::collection::vec((prop::collection::vec(0u32..5, 0..3),
                                                                  prop::collection::btree_set(0u32..5, 0..3)), 1..20),
                                   seed in any::<u64>()) {
        let (p, g): (Vec<_>, Vec<_>) = rows.iter().cloned().unzip();
        let base = hits_at_1(&p, &g).unwrap();
        let mut idx: Vec<usize> = (0..rows.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let p2: Vec<_> = idx.iter().map(|&i| p[i].clone()).collect();
        let g2: Vec<_> = idx.iter().map(|&i| g[i].clone()).collect();
        prop_assert!((hits_at_1(&p2, &g2).unwrap() - base).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }
}
