//! Templated synthetic world: a symbolic KB of functional-ish relations over
//! made-up entities, rendered into entity-linked passages and questions.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedPassage, EntityId, Mention, TokenId, Vocab};
use crate::error::{Result, VkbError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_entities: usize,
    pub num_relations: usize,
    pub facts_per_relation: usize,
    pub templates_per_relation: usize,
    pub passages_per_fact: usize,
    /// Probability that a passage carries an extra context mention.
    pub distractor_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_entities: 50,
            num_relations: 8,
            facts_per_relation: 50,
            templates_per_relation: 3,
            passages_per_fact: 3,
            distractor_rate: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_entities < 2 {
            return Err(VkbError::InvalidConfig(
                "synthetic corpus needs at least 2 entities".into(),
            ));
        }
        if self.num_relations < 1 {
            return Err(VkbError::InvalidConfig(
                "synthetic corpus needs at least 1 relation".into(),
            ));
        }
        if self.templates_per_relation < 1 || self.passages_per_fact < 1 {
            return Err(VkbError::InvalidConfig(
                "templates_per_relation and passages_per_fact must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(VkbError::InvalidConfig(
                "distractor_rate must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fact {
    pub subject: EntityId,
    pub relation: u32,
    pub object: EntityId,
}

/// Relation-labelled ground truth. Labels exist for evaluation and splits only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SymbolicKB {
    pub facts: Vec<Fact>,
    pub relation_names: Vec<String>,
}

impl SymbolicKB {
    pub fn relation_id(&self, name: &str) -> Option<u32> {
        self.relation_names
            .iter()
            .position(|n| n == name)
            .map(|i| i as u32)
    }

    pub fn objects(&self, subject: EntityId, relation: u32) -> BTreeSet<EntityId> {
        self.facts
            .iter()
            .filter(|f| f.subject == subject && f.relation == relation)
            .map(|f| f.object)
            .collect()
    }

    pub fn relation_set(&self) -> BTreeSet<u32> {
        self.facts.iter().map(|f| f.relation).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationInfo {
    pub name: String,
    pub phrases: Vec<Vec<String>>,
    /// `(phrase index, frame index)` per corpus template.
    pub templates: Vec<(usize, usize)>,
}

/// A question with its annotated topic mention(s) and oracle answers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub tokens: Vec<TokenId>,
    pub mentions: Vec<Mention>,
    pub answers: Vec<EntityId>,
    pub hops: usize,
    /// Relation labels of the path, for evaluation splits only.
    pub relations: Vec<u32>,
}

impl Question {
    pub fn topic_entities(&self) -> Vec<EntityId> {
        self.mentions.iter().map(|m| m.entity).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuestionSet {
    pub train: Vec<Question>,
    pub test: Vec<Question>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: SynthConfig,
    pub seed: u64,
    pub tokens: Vocab,
    pub entities: Vocab,
    pub relations: Vec<RelationInfo>,
    pub kb: SymbolicKB,
    pub passages: Vec<AnnotatedPassage>,
    /// Index into `kb.facts` of the fact each passage renders.
    pub passage_facts: Vec<usize>,
}

const LEXICON: &[(&str, &[&str])] = &[
    (
        "directed_by",
        &["was directed by", "had direction from", "got its director in"],
    ),
    (
        "written_by",
        &["was written by", "came from the pen of", "had its script by"],
    ),
    (
        "starred",
        &["starred", "cast as lead", "featured in a leading role"],
    ),
    (
        "born_in",
        &["was born in", "came into the world in", "had a birthplace of"],
    ),
    (
        "located_in",
        &["is located in", "sits within", "lies inside"],
    ),
    (
        "member_of",
        &["is a member of", "belongs to", "holds membership in"],
    ),
    ("married_to", &["is married to", "wed", "took as spouse"]),
    (
        "employed_by",
        &["works for", "is employed by", "earns a salary from"],
    ),
];

const FIRST: &[&str] = &[
    "alba", "boren", "cadis", "dorin", "evra", "falk", "garon", "hesta", "ivor", "jussa",
];
const SECOND: &[&str] = &[
    "kor", "lin", "mont", "nard", "orr", "pell", "quin", "rask", "sorn", "tull",
];

// {S} topic, {P} relation phrase, {O} target.
const FRAMES: &[&str] = &[
    "{S} {P} {O} .",
    "it is recorded that {S} {P} {O} .",
    "{S} {P} {O} , as the archive notes .",
    "according to the files {S} {P} {O} .",
    "{O} is what {S} {P} .",
];

const QUESTION_FRAMES: &[&str] = &["which entity {S} {P} ?", "{S} {P} what ?", "tell me what {S} {P} ?"];

const TWO_HOP_FRAMES: &[&str] = &[
    "which entity {S} {P} something that {Q} ?",
    "{S} {P} an entity which {Q} what ?",
];

const DISTRACTOR_FRAME: &str = "in the time of {Z} ,";

fn entity_surface(i: usize) -> Vec<String> {
    let mut s = vec![
        FIRST[i % FIRST.len()].to_string(),
        SECOND[(i / FIRST.len() + i) % SECOND.len()].to_string(),
    ];
    let block = i / (FIRST.len() * SECOND.len());
    if block > 0 {
        s.push(format!("mk{block}"));
    }
    s
}

fn relation_info(r: usize, templates: usize) -> RelationInfo {
    let (name, phrases): (String, Vec<Vec<String>>) = match LEXICON.get(r) {
        Some((n, ps)) => (
            n.to_string(),
            ps.iter()
                .map(|p| p.split(' ').map(str::to_string).collect())
                .collect(),
        ),
        None => (
            format!("rel{r}"),
            (0..3)
                .map(|k| vec![format!("relates{r}"), format!("via{k}")])
                .collect(),
        ),
    };
    let templates = (0..templates)
        .map(|j| (j % phrases.len(), (j + r) % FRAMES.len()))
        .collect();
    RelationInfo {
        name,
        phrases,
        templates,
    }
}

/// Builds the token list of a frame and records the spans of its slots.
fn fill(frame: &str, slots: &BTreeMap<&str, (&[String], Option<EntityId>)>, vocab: &Vocab) -> (Vec<TokenId>, Vec<Mention>) {
    let mut tokens = Vec::new();
    let mut mentions = Vec::new();
    for w in frame.split(' ') {
        if let Some((words, ent)) = slots.get(w) {
            let start = tokens.len();
            tokens.extend(words.iter().map(|x| vocab.id(x).expect("closed vocabulary")));
            if let Some(e) = ent {
                mentions.push(Mention::new(start, tokens.len() - 1, *e));
            }
        } else {
            tokens.push(vocab.id(w).expect("closed vocabulary"));
        }
    }
    (tokens, mentions)
}

fn build_vocab(relations: &[RelationInfo], num_entities: usize) -> Vocab {
    let mut words: Vec<String> = Vec::new();
    let frames = FRAMES
        .iter()
        .chain(QUESTION_FRAMES)
        .chain(TWO_HOP_FRAMES)
        .chain(std::iter::once(&DISTRACTOR_FRAME));
    for f in frames {
        words.extend(
            f.split(' ')
                .filter(|w| !w.starts_with('{'))
                .map(str::to_string),
        );
    }
    for r in relations {
        for p in &r.phrases {
            words.extend(p.iter().cloned());
        }
    }
    for i in 0..num_entities {
        words.extend(entity_surface(i));
    }
    Vocab::tokens(words)
}

/// Generates a world deterministically from `seed`.
pub fn generate_synthetic_corpus(config: &SynthConfig, seed: u64) -> Result<SyntheticWorld> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relations: Vec<RelationInfo> = (0..config.num_relations)
        .map(|r| relation_info(r, config.templates_per_relation))
        .collect();
    let tokens = build_vocab(&relations, config.num_entities);
    let entities = Vocab::from_items((0..config.num_entities).map(|i| entity_surface(i).join("_")));

    let n = config.num_entities;
    let mut used: BTreeSet<(EntityId, EntityId)> = BTreeSet::new();
    let mut facts = Vec::new();
    for r in 0..config.num_relations {
        let mut subjects: Vec<EntityId> = (0..n as EntityId).collect();
        subjects.shuffle(&mut rng);
        for f in 0..config.facts_per_relation {
            let s = subjects[f % n];
            let mut object = None;
            for _ in 0..200 {
                let o = rng.random_range(0..n as EntityId);
                if o != s && !used.contains(&(s, o)) && !used.contains(&(o, s)) {
                    object = Some(o);
                    break;
                }
            }
            let o = match object {
                Some(o) => o,
                None => {
                    // Dense configs: fall back to any unused direction.
                    let free: Vec<EntityId> = (0..n as EntityId)
                        .filter(|&o| o != s && !used.contains(&(s, o)))
                        .collect();
                    match free.choose(&mut rng) {
                        Some(&o) => o,
                        None => continue,
                    }
                }
            };
            used.insert((s, o));
            facts.push(Fact {
                subject: s,
                relation: r as u32,
                object: o,
            });
        }
    }
    let kb = SymbolicKB {
        facts,
        relation_names: relations.iter().map(|r| r.name.clone()).collect(),
    };
    let mut world = SyntheticWorld {
        config: config.clone(),
        seed,
        tokens,
        entities,
        relations,
        kb,
        passages: Vec::new(),
        passage_facts: Vec::new(),
    };
    let all: Vec<usize> = (0..world.kb.facts.len()).collect();
    let (passages, pf) = world.render_passages(&all, config.passages_per_fact, &mut rng, "");
    world.passages = passages;
    world.passage_facts = pf;
    Ok(world)
}

impl SyntheticWorld {
    pub fn surface(&self, e: EntityId) -> Vec<String> {
        entity_surface(e as usize)
    }

    /// Renders `per_fact` passages for each listed fact. Ids are `{prefix}f{fact}-{k}`.
    pub fn render_passages<R: Rng>(
        &self,
        facts: &[usize],
        per_fact: usize,
        rng: &mut R,
        prefix: &str,
    ) -> (Vec<AnnotatedPassage>, Vec<usize>) {
        let n = self.config.num_entities as EntityId;
        let mut out = Vec::new();
        let mut owners = Vec::new();
        for &fi in facts {
            let fact = self.kb.facts[fi];
            let rel = &self.relations[fact.relation as usize];
            for k in 0..per_fact {
                let (pi, fi_frame) = rel.templates[rng.random_range(0..rel.templates.len())];
                let s = self.surface(fact.subject);
                let o = self.surface(fact.object);
                let p = &rel.phrases[pi];
                let mut slots: BTreeMap<&str, (&[String], Option<EntityId>)> = BTreeMap::new();
                slots.insert("{S}", (&s, Some(fact.subject)));
                slots.insert("{O}", (&o, Some(fact.object)));
                slots.insert("{P}", (p, None));
                let (mut tokens, mut mentions) = fill(FRAMES[fi_frame], &slots, &self.tokens);
                if rng.random_bool(self.config.distractor_rate) && n > 2 {
                    let z = loop {
                        let z = rng.random_range(0..n);
                        if z != fact.subject && z != fact.object {
                            break z;
                        }
                    };
                    let zs = self.surface(z);
                    let mut zslots: BTreeMap<&str, (&[String], Option<EntityId>)> = BTreeMap::new();
                    zslots.insert("{Z}", (&zs, Some(z)));
                    let (pre, pre_m) = fill(DISTRACTOR_FRAME, &zslots, &self.tokens);
                    let shift = pre.len();
                    for m in &mut mentions {
                        m.start += shift;
                        m.end += shift;
                    }
                    let mut all_m = pre_m;
                    all_m.extend(mentions);
                    mentions = all_m;
                    let mut t = pre;
                    t.extend(tokens);
                    tokens = t;
                }
                out.push(AnnotatedPassage {
                    id: format!("{prefix}f{fi}-{k}"),
                    tokens,
                    mentions,
                });
                owners.push(fi);
            }
        }
        (out, owners)
    }

    fn question_tokens(&self, frame: &str, subject: EntityId, phrases: &[&[String]]) -> (Vec<TokenId>, Vec<Mention>) {
        let s = self.surface(subject);
        let mut slots: BTreeMap<&str, (&[String], Option<EntityId>)> = BTreeMap::new();
        slots.insert("{S}", (&s, Some(subject)));
        slots.insert("{P}", (phrases[0], None));
        if let Some(q) = phrases.get(1) {
            slots.insert("{Q}", (q, None));
        }
        fill(frame, &slots, &self.tokens)
    }

    /// One question per (fact, question frame); facts are split train/test by
    /// `test_fraction` with a seeded shuffle.
    pub fn one_hop_questions(&self, test_fraction: f64, seed: u64) -> QuestionSet {
        self.one_hop_questions_for(&(0..self.kb.facts.len()).collect::<Vec<_>>(), test_fraction, seed)
    }

    pub fn one_hop_questions_for(&self, facts: &[usize], test_fraction: f64, seed: u64) -> QuestionSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = facts.to_vec();
        order.shuffle(&mut rng);
        let n_test = (order.len() as f64 * test_fraction).round() as usize;
        let test_facts: BTreeSet<usize> = order[..n_test].iter().copied().collect();
        let mut set = QuestionSet::default();
        for &fi in facts {
            let fact = self.kb.facts[fi];
            let rel = &self.relations[fact.relation as usize];
            let answers: Vec<EntityId> = self.kb.objects(fact.subject, fact.relation).into_iter().collect();
            for (qi, frame) in QUESTION_FRAMES.iter().enumerate() {
                let phrase = &rel.phrases[(fi + qi) % rel.phrases.len()];
                let (tokens, mentions) = self.question_tokens(frame, fact.subject, &[phrase]);
                let q = Question {
                    tokens,
                    mentions,
                    answers: answers.clone(),
                    hops: 1,
                    relations: vec![fact.relation],
                };
                if test_facts.contains(&fi) {
                    set.test.push(q);
                } else {
                    set.train.push(q);
                }
            }
        }
        set
    }

    /// Up to `count` compositional questions `r2(r1(subject))` with non-empty answers.
    pub fn two_hop_questions(&self, count: usize, test_fraction: f64, seed: u64) -> QuestionSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut combos = Vec::new();
        let rels = self.config.num_relations as u32;
        for s in 0..self.config.num_entities as EntityId {
            for r1 in 0..rels {
                for r2 in 0..rels {
                    combos.push((s, r1, r2));
                }
            }
        }
        combos.shuffle(&mut rng);
        let mut picked = Vec::new();
        for (s, r1, r2) in combos {
            if picked.len() == count {
                break;
            }
            let mids = self.kb.objects(s, r1);
            let answers: BTreeSet<EntityId> = mids
                .iter()
                .flat_map(|&m| self.kb.objects(m, r2))
                .collect();
            if !answers.is_empty() {
                picked.push((s, r1, r2, answers));
            }
        }
        let n_test = (picked.len() as f64 * test_fraction).round() as usize;
        let mut set = QuestionSet::default();
        for (i, (s, r1, r2, answers)) in picked.into_iter().enumerate() {
            let frame = TWO_HOP_FRAMES[i % TWO_HOP_FRAMES.len()];
            let rel1 = &self.relations[r1 as usize];
            let rel2 = &self.relations[r2 as usize];
            let p1 = &rel1.phrases[i % rel1.phrases.len()];
            let p2 = &rel2.phrases[(i / 2) % rel2.phrases.len()];
            let (tokens, mentions) = self.question_tokens(frame, s, &[p1, p2]);
            let q = Question {
                tokens,
                mentions,
                answers: answers.into_iter().collect(),
                hops: 2,
                relations: vec![r1, r2],
            };
            if i < n_test {
                set.test.push(q);
            } else {
                set.train.push(q);
            }
        }
        set
    }
}
