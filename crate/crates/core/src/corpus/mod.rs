//! Entity-linked text: passages, vocabularies, the synthetic generator,
//! entity-pair mining and the marker-token preprocessing shared by every
//! downstream model.

mod batches;
pub mod io;
mod pairs;
mod preprocess;
mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VkbError};

pub use batches::{BatchConfig, ContrastiveGroup, RelationBatch, RelationBatchStream};
pub use pairs::{extract_entity_pairs, PairOccurrences, PairVocabulary};
pub use preprocess::{
    preprocess_conjunction, preprocess_lm_example, preprocess_masked_entity,
    preprocess_question, preprocess_relation_example, PreprocessedExample, TopicMode,
};
pub use synth::{
    generate_synthetic_corpus, Fact, Question, QuestionSet, RelationInfo, SymbolicKB, SynthConfig,
    SyntheticWorld,
};

pub type TokenId = u32;
pub type EntityId = u32;

pub const PAD: &str = "[PAD]";
pub const ENT: &str = "[ENT]";
pub const R1: &str = "[R1]";
pub const R2: &str = "[R2]";
pub const UNK: &str = "[UNK]";

/// Reserved ids: every [`Vocab`] starts with these five tokens in this order.
pub const PAD_ID: TokenId = 0;
pub const ENT_ID: TokenId = 1;
pub const R1_ID: TokenId = 2;
pub const R2_ID: TokenId = 3;
pub const UNK_ID: TokenId = 4;

pub fn is_special(t: TokenId) -> bool {
    t <= UNK_ID
}

/// A linked entity mention spanning tokens `start..=end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    pub entity: EntityId,
}

impl Mention {
    pub fn new(start: usize, end: usize, entity: EntityId) -> Self {
        Self { start, end, entity }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Directional entity pair: `(topic, target)` and `(target, topic)` are different keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityPair {
    pub topic: EntityId,
    pub target: EntityId,
}

impl EntityPair {
    pub fn new(topic: EntityId, target: EntityId) -> Self {
        debug_assert_ne!(topic, target, "pair endpoints must differ");
        Self { topic, target }
    }

    pub fn reversed(self) -> Self {
        Self::new(self.target, self.topic)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedPassage {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub mentions: Vec<Mention>,
}

impl AnnotatedPassage {
    /// Checks span bounds, overlap and entity range.
    pub fn validate(&self, num_entities: usize) -> Result<()> {
        let mut spans: Vec<&Mention> = self.mentions.iter().collect();
        spans.sort_by_key(|m| m.start);
        let mut last_end: Option<usize> = None;
        for m in spans {
            if m.start > m.end || m.end >= self.tokens.len() {
                return Err(VkbError::IndexOutOfRange {
                    index: m.end,
                    len: self.tokens.len(),
                });
            }
            if last_end.is_some_and(|e| m.start <= e) {
                return Err(VkbError::Parse(format!(
                    "overlapping mentions in passage {}",
                    self.id
                )));
            }
            if m.entity as usize >= num_entities {
                return Err(VkbError::UnknownEntity(m.entity.to_string()));
            }
            last_end = Some(m.end);
        }
        Ok(())
    }

    pub fn first_mention_of(&self, entity: EntityId) -> Option<&Mention> {
        self.mentions
            .iter()
            .filter(|m| m.entity == entity)
            .min_by_key(|m| m.start)
    }

    /// Distinct entities in order of first appearance.
    pub fn entities(&self) -> Vec<EntityId> {
        let mut sorted: Vec<&Mention> = self.mentions.iter().collect();
        sorted.sort_by_key(|m| m.start);
        let mut out: Vec<EntityId> = Vec::new();
        for m in sorted {
            if !out.contains(&m.entity) {
                out.push(m.entity);
            }
        }
        out
    }
}

/// Closed string vocabulary; line index is the id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_items<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            items: Vec::new(),
            index: HashMap::new(),
        };
        for s in items {
            v.insert(s.into());
        }
        v
    }

    /// A token vocabulary: the reserved specials first, then `words` in order.
    pub fn tokens<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::from_items([PAD, ENT, R1, R2, UNK]);
        for w in words {
            v.insert(w.into());
        }
        v
    }

    /// Adds `item` if absent and returns its id.
    pub fn insert(&mut self, item: String) -> u32 {
        if let Some(&id) = self.index.get(&item) {
            return id;
        }
        let id = self.items.len() as u32;
        self.index.insert(item.clone(), id);
        self.items.push(item);
        id
    }

    pub fn id(&self, item: &str) -> Option<u32> {
        self.index.get(item).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.items.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// True when the five reserved tokens sit at their fixed ids.
    pub fn has_specials(&self) -> bool {
        [PAD, ENT, R1, R2, UNK]
            .iter()
            .enumerate()
            .all(|(i, s)| self.id(s) == Some(i as u32))
    }
}

/// Whitespace tokenisation with lowercasing; unknown words map to `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    text.split_whitespace()
        .map(|w| {
            let lw = w.to_lowercase();
            vocab.id(&lw).or_else(|| vocab.id(w)).unwrap_or(UNK_ID)
        })
        .collect()
}

pub fn detokenize(tokens: &[TokenId], vocab: &Vocab) -> String {
    tokens
        .iter()
        .map(|&t| vocab.name(t).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::tokens(["darwin", "wrote", "origin"])
    }

    #[test]
    fn tokenize_empty() {
        assert!(tokenize("", &vocab()).is_empty());
    }

    #[test]
    fn tokenize_full_coverage() {
        let ids = tokenize("Darwin wrote Origin", &vocab());
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&t| t != UNK_ID));
    }

    #[test]
    fn tokenize_oov() {
        let v = vocab();
        assert_eq!(
            tokenize("Darwin zzzz", &v),
            vec![v.id("darwin").unwrap(), UNK_ID]
        );
    }

    #[test]
    fn specials_are_reserved() {
        let v = vocab();
        assert!(v.has_specials());
        assert_eq!(v.id(R2), Some(R2_ID));
        assert_eq!(tokenize("[R1] darwin", &v)[0], R1_ID);
    }

    #[test]
    fn validate_rejects_overlap_and_bounds() {
        let p = AnnotatedPassage {
            id: "p".into(),
            tokens: vec![5, 6, 7],
            mentions: vec![Mention::new(0, 1, 0), Mention::new(1, 2, 1)],
        };
        assert!(p.validate(2).is_err());
        let p = AnnotatedPassage {
            id: "p".into(),
            tokens: vec![5, 6, 7],
            mentions: vec![Mention::new(2, 3, 0)],
        };
        assert!(p.validate(2).is_err());
        let p = AnnotatedPassage {
            id: "p".into(),
            tokens: vec![5, 6, 7],
            mentions: vec![Mention::new(0, 0, 3)],
        };
        assert!(p.validate(2).is_err());
    }
}
