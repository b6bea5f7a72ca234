//! Line-oriented file formats: JSONL passages, KB triples and questions, and
//! newline-delimited vocabularies.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{Fact, Question, SymbolicKB};
use super::{AnnotatedPassage, EntityId, Mention, Vocab, UNK_ID};
use crate::error::{Result, VkbError};

#[derive(Serialize, Deserialize)]
struct MentionRecord {
    start: usize,
    end: usize,
    entity: String,
}

#[derive(Serialize, Deserialize)]
struct PassageRecord {
    id: String,
    tokens: Vec<String>,
    mentions: Vec<MentionRecord>,
}

#[derive(Serialize, Deserialize)]
struct FactRecord {
    s: String,
    r: String,
    o: String,
}

#[derive(Serialize, Deserialize)]
struct QuestionRecord {
    question: Vec<String>,
    topic_entities: Vec<String>,
    answers: Vec<String>,
    hops: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mentions: Option<Vec<MentionRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relations: Option<Vec<String>>,
}

fn entity_id(entities: &Vocab, name: &str) -> Result<EntityId> {
    entities
        .id(name)
        .ok_or_else(|| VkbError::UnknownEntity(name.to_string()))
}

fn entity_name(entities: &Vocab, id: EntityId) -> Result<String> {
    entities
        .name(id)
        .map(str::to_string)
        .ok_or_else(|| VkbError::UnknownEntity(id.to_string()))
}

fn token_ids(words: &[String], tokens: &Vocab) -> Vec<u32> {
    words
        .iter()
        .map(|w| tokens.id(&w.to_lowercase()).or_else(|| tokens.id(w)).unwrap_or(UNK_ID))
        .collect()
}

fn token_names(ids: &[u32], tokens: &Vocab) -> Result<Vec<String>> {
    ids.iter()
        .map(|&t| {
            tokens.name(t).map(str::to_string).ok_or(VkbError::IndexOutOfRange {
                index: t as usize,
                len: tokens.len(),
            })
        })
        .collect()
}

fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out.into_iter())
}

fn parse_line<T: for<'de> Deserialize<'de>>(path: &Path, lineno: usize, line: &str) -> Result<T> {
    serde_json::from_str(line)
        .map_err(|e| VkbError::Parse(format!("{}:{}: {}", path.display(), lineno, e)))
}

/// Writes `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(contents)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn jsonl<T: Serialize>(records: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path)?;
    Ok(Vocab::from_items(text.lines()))
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut s = String::new();
    for item in vocab.items() {
        s.push_str(item);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_passages(path: &Path, tokens: &Vocab, entities: &Vocab) -> Result<Vec<AnnotatedPassage>> {
    let mut out = Vec::new();
    for (n, line) in lines(path)? {
        let r: PassageRecord = parse_line(path, n, &line)?;
        let mentions = r
            .mentions
            .iter()
            .map(|m| Ok(Mention::new(m.start, m.end, entity_id(entities, &m.entity)?)))
            .collect::<Result<Vec<_>>>()?;
        let p = AnnotatedPassage {
            id: r.id,
            tokens: token_ids(&r.tokens, tokens),
            mentions,
        };
        p.validate(entities.len())?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_passages(
    path: &Path,
    passages: &[AnnotatedPassage],
    tokens: &Vocab,
    entities: &Vocab,
) -> Result<()> {
    let records = passages
        .iter()
        .map(|p| {
            Ok(PassageRecord {
                id: p.id.clone(),
                tokens: token_names(&p.tokens, tokens)?,
                mentions: p
                    .mentions
                    .iter()
                    .map(|m| {
                        Ok(MentionRecord {
                            start: m.start,
                            end: m.end,
                            entity: entity_name(entities, m.entity)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_atomic(path, &jsonl(records)?)
}

/// Reads KB triples; relation ids are assigned in order of first appearance.
pub fn read_kb(path: &Path, entities: &Vocab) -> Result<SymbolicKB> {
    let mut relations = Vocab::from_items(Vec::<String>::new());
    let mut facts = Vec::new();
    for (n, line) in lines(path)? {
        let r: FactRecord = parse_line(path, n, &line)?;
        facts.push(Fact {
            subject: entity_id(entities, &r.s)?,
            relation: relations.insert(r.r),
            object: entity_id(entities, &r.o)?,
        });
    }
    Ok(SymbolicKB {
        facts,
        relation_names: relations.items().to_vec(),
    })
}

pub fn write_kb(path: &Path, kb: &SymbolicKB, entities: &Vocab) -> Result<()> {
    let records = kb
        .facts
        .iter()
        .map(|f| {
            Ok(FactRecord {
                s: entity_name(entities, f.subject)?,
                r: kb
                    .relation_names
                    .get(f.relation as usize)
                    .cloned()
                    .ok_or_else(|| VkbError::UnknownRelation(f.relation.to_string()))?,
                o: entity_name(entities, f.object)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_atomic(path, &jsonl(records)?)
}

/// Finds the first span of `question` spelling out `name` with `_` as the word separator.
fn locate(question: &[u32], name: &str, tokens: &Vocab) -> Option<(usize, usize)> {
    let words: Vec<String> = name.split('_').map(str::to_string).collect();
    let needle = token_ids(&words, tokens);
    if needle.is_empty() || needle.contains(&UNK_ID) || needle.len() > question.len() {
        return None;
    }
    (0..=question.len() - needle.len())
        .find(|&i| question[i..i + needle.len()] == needle[..])
        .map(|i| (i, i + needle.len() - 1))
}

/// Reads questions. Without an explicit `mentions` field each topic entity is
/// located by its surface form (entity name split on `_`).
pub fn read_questions(
    path: &Path,
    tokens: &Vocab,
    entities: &Vocab,
    kb: Option<&SymbolicKB>,
) -> Result<Vec<Question>> {
    parse_questions(&std::fs::read_to_string(path)?, path, tokens, entities, kb)
}

/// [`read_questions`] over in-memory JSON Lines; `origin` only labels errors.
pub fn parse_questions(
    text: &str,
    origin: &Path,
    tokens: &Vocab,
    entities: &Vocab,
    kb: Option<&SymbolicKB>,
) -> Result<Vec<Question>> {
    let mut out = Vec::new();
    let numbered = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    for (i, line) in numbered {
        let n = i + 1;
        let r: QuestionRecord = parse_line(origin, n, line)?;
        let q_tokens = token_ids(&r.question, tokens);
        let mentions = match &r.mentions {
            Some(ms) => ms
                .iter()
                .map(|m| Ok(Mention::new(m.start, m.end, entity_id(entities, &m.entity)?)))
                .collect::<Result<Vec<_>>>()?,
            None => r
                .topic_entities
                .iter()
                .map(|e| {
                    let id = entity_id(entities, e)?;
                    let (s, t) = locate(&q_tokens, e, tokens).ok_or_else(|| {
                        VkbError::MissingMention(format!("{e} not found in question on line {n}"))
                    })?;
                    Ok(Mention::new(s, t, id))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if mentions.is_empty() {
            return Err(VkbError::MissingMention(format!(
                "question on line {n} has no topic entity"
            )));
        }
        let answers = r
            .answers
            .iter()
            .map(|a| entity_id(entities, a))
            .collect::<Result<Vec<_>>>()?;
        let relations = match (&r.relations, kb) {
            (Some(rs), Some(kb)) => rs
                .iter()
                .map(|name| kb.relation_id(name).ok_or_else(|| VkbError::UnknownRelation(name.clone())))
                .collect::<Result<Vec<_>>>()?,
            _ => Vec::new(),
        };
        let passage = AnnotatedPassage {
            id: format!("q{n}"),
            tokens: q_tokens,
            mentions,
        };
        passage.validate(entities.len())?;
        out.push(Question {
            tokens: passage.tokens,
            mentions: passage.mentions,
            answers,
            hops: r.hops,
            relations,
        });
    }
    Ok(out)
}

pub fn write_questions(
    path: &Path,
    questions: &[Question],
    tokens: &Vocab,
    entities: &Vocab,
    kb: Option<&SymbolicKB>,
) -> Result<()> {
    let records = questions
        .iter()
        .map(|q| {
            Ok(QuestionRecord {
                question: token_names(&q.tokens, tokens)?,
                topic_entities: q
                    .mentions
                    .iter()
                    .map(|m| entity_name(entities, m.entity))
                    .collect::<Result<_>>()?,
                answers: q
                    .answers
                    .iter()
                    .map(|&a| entity_name(entities, a))
                    .collect::<Result<_>>()?,
                hops: q.hops,
                mentions: Some(
                    q.mentions
                        .iter()
                        .map(|m| {
                            Ok(MentionRecord {
                                start: m.start,
                                end: m.end,
                                entity: entity_name(entities, m.entity)?,
                            })
                        })
                        .collect::<Result<_>>()?,
                ),
                relations: match kb {
                    Some(kb) if !q.relations.is_empty() => Some(
                        q.relations
                            .iter()
                            .map(|&r| {
                                kb.relation_names
                                    .get(r as usize)
                                    .cloned()
                                    .ok_or_else(|| VkbError::UnknownRelation(r.to_string()))
                            })
                            .collect::<Result<_>>()?,
                    ),
                    _ => None,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_atomic(path, &jsonl(records)?)
}
