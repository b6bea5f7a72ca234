//! On-disk dataset directory written by `gen-synth` and read by every other
//! command.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use vkb_core::corpus::io::{read_kb, read_passages, read_questions, read_vocab};
use vkb_core::corpus::{AnnotatedPassage, Question, SymbolicKB, Vocab};

pub const TOKENS: &str = "tokens.txt";
pub const ENTITIES: &str = "entities.txt";
pub const PASSAGES: &str = "passages.jsonl";
pub const LATE_PASSAGES: &str = "late_passages.jsonl";
pub const KB: &str = "kb.jsonl";
pub const ONE_HOP_TRAIN: &str = "one_hop_train.jsonl";
pub const ONE_HOP_TEST: &str = "one_hop_test.jsonl";
pub const TWO_HOP_TRAIN: &str = "two_hop_train.jsonl";
pub const TWO_HOP_TEST: &str = "two_hop_test.jsonl";
pub const LATE_QUESTIONS: &str = "late_questions.jsonl";

pub struct Dataset {
    pub dir: PathBuf,
    pub tokens: Vocab,
    pub entities: Vocab,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let tokens = read_vocab(&dir.join(TOKENS)).with_context(|| format!("reading {}", dir.join(TOKENS).display()))?;
        let entities =
            read_vocab(&dir.join(ENTITIES)).with_context(|| format!("reading {}", dir.join(ENTITIES).display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            tokens,
            entities,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn passages_at(&self, path: &Path) -> Result<Vec<AnnotatedPassage>> {
        Ok(read_passages(path, &self.tokens, &self.entities)?)
    }

    pub fn passages(&self) -> Result<Vec<AnnotatedPassage>> {
        self.passages_at(&self.path(PASSAGES))
    }

    pub fn kb_at(&self, path: &Path) -> Result<SymbolicKB> {
        Ok(read_kb(path, &self.entities)?)
    }

    pub fn questions_at(&self, path: &Path, kb: Option<&SymbolicKB>) -> Result<Vec<Question>> {
        Ok(read_questions(path, &self.tokens, &self.entities, kb)?)
    }

    pub fn entity_name(&self, id: u32) -> String {
        self.entities.name(id).map_or_else(|| format!("#{id}"), str::to_string)
    }
}
