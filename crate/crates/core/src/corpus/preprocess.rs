use serde::{Deserialize, Serialize};

use super::{AnnotatedPassage, EntityId, EntityPair, Mention, TokenId, ENT_ID, R1_ID, R2_ID};
use crate::error::{Result, VkbError};

/// How the topic mention of a question is presented to the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TopicMode {
    /// Topic span replaced by `[ENT]` (relation following).
    Masked,
    /// Topic surface form kept (memory-mixed entity prediction).
    Surface,
}

/// A token sequence with `[R1]`/`[R2]` markers inserted and spans remapped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessedExample {
    pub tokens: Vec<TokenId>,
    /// Position of the first (usually only) `[R1]`.
    pub r1_pos: usize,
    pub r2_pos: usize,
    /// One `[R1]` per topic mention, aligned with `topics`.
    pub r1_positions: Vec<usize>,
    pub topics: Vec<EntityId>,
    /// Post-insertion `(start, end)` of each topic mention.
    pub topic_spans: Vec<(usize, usize)>,
    pub target: Option<EntityId>,
    pub target_span: (usize, usize),
    pub context_mentions: Vec<Mention>,
    pub answer_set: Option<Vec<EntityId>>,
}

impl PreprocessedExample {
    pub fn pair(&self) -> Option<EntityPair> {
        self.target.map(|t| EntityPair::new(self.topics[0], t))
    }

    pub fn topic_start(&self) -> usize {
        self.topic_spans[0].0
    }
}

struct Edit {
    mention: Mention,
    mask: bool,
    marker: Option<TokenId>,
}

struct Rewritten {
    tokens: Vec<TokenId>,
    spans: Vec<(usize, usize)>,
    markers: Vec<Option<usize>>,
    context: Vec<Mention>,
}

/// Applies masks and markers to the given mentions and remaps every other mention.
fn rewrite(tokens: &[TokenId], mentions: &[Mention], edits: &[Edit]) -> Rewritten {
    let mut order: Vec<usize> = (0..edits.len()).collect();
    order.sort_by_key(|&i| edits[i].mention.start);
    let mut out = Vec::with_capacity(tokens.len() + 2 * edits.len());
    let mut new_index = vec![usize::MAX; tokens.len()];
    let mut spans = vec![(0, 0); edits.len()];
    let mut markers = vec![None; edits.len()];
    let mut next = order.iter().peekable();
    let mut i = 0;
    while i < tokens.len() {
        if let Some(&&e) = next.peek() {
            let edit = &edits[e];
            if edit.mention.start == i {
                next.next();
                let start = out.len();
                if edit.mask {
                    out.push(ENT_ID);
                } else {
                    out.extend_from_slice(&tokens[edit.mention.start..=edit.mention.end]);
                }
                spans[e] = (start, out.len() - 1);
                if let Some(m) = edit.marker {
                    markers[e] = Some(out.len());
                    out.push(m);
                }
                i = edit.mention.end + 1;
                continue;
            }
        }
        new_index[i] = out.len();
        out.push(tokens[i]);
        i += 1;
    }
    let context = mentions
        .iter()
        .filter(|m| !edits.iter().any(|e| e.mention == **m))
        .map(|m| Mention::new(new_index[m.start], new_index[m.end], m.entity))
        .collect();
    Rewritten {
        tokens: out,
        spans,
        markers,
        context,
    }
}

/// Marks a pair inside a passage: `[R1]` after the topic mention, `[R2]` after the
/// target mention, each optionally masked to a single `[ENT]`. The first mention of
/// each entity is used.
pub fn preprocess_relation_example(
    passage: &AnnotatedPassage,
    pair: EntityPair,
    mask_topic: bool,
    mask_target: bool,
) -> Result<PreprocessedExample> {
    let topic = *passage.first_mention_of(pair.topic).ok_or_else(|| {
        VkbError::MissingMention(format!("entity {} in passage {}", pair.topic, passage.id))
    })?;
    let target = *passage.first_mention_of(pair.target).ok_or_else(|| {
        VkbError::MissingMention(format!("entity {} in passage {}", pair.target, passage.id))
    })?;
    let edits = [
        Edit {
            mention: topic,
            mask: mask_topic,
            marker: Some(R1_ID),
        },
        Edit {
            mention: target,
            mask: mask_target,
            marker: Some(R2_ID),
        },
    ];
    let rw = rewrite(&passage.tokens, &passage.mentions, &edits);
    let r1 = rw.markers[0].expect("topic marker");
    Ok(PreprocessedExample {
        tokens: rw.tokens,
        r1_pos: r1,
        r2_pos: rw.markers[1].expect("target marker"),
        r1_positions: vec![r1],
        topics: vec![pair.topic],
        topic_spans: vec![rw.spans[0]],
        target: Some(pair.target),
        target_span: rw.spans[1],
        context_mentions: rw.context,
        answer_set: None,
    })
}

/// Question preprocessing: `[R1]` after the topic mention and the answer slot
/// `[ENT] [R2]` appended at the end.
pub fn preprocess_question(
    question: &[TokenId],
    mentions: &[Mention],
    mode: TopicMode,
) -> Result<PreprocessedExample> {
    let topic = mentions
        .first()
        .ok_or_else(|| VkbError::MissingMention("question has no topic mention".into()))?;
    preprocess_conjunction(question, std::slice::from_ref(topic), mode)
}

/// Conjunction form of [`preprocess_question`]: one `[R1]` per topic mention.
pub fn preprocess_conjunction(
    question: &[TokenId],
    topics: &[Mention],
    mode: TopicMode,
) -> Result<PreprocessedExample> {
    if topics.is_empty() {
        return Err(VkbError::MissingMention(
            "question has no topic mention".into(),
        ));
    }
    let edits: Vec<Edit> = topics
        .iter()
        .map(|&m| Edit {
            mention: m,
            mask: mode == TopicMode::Masked,
            marker: Some(R1_ID),
        })
        .collect();
    let mut rw = rewrite(question, topics, &edits);
    let target_pos = rw.tokens.len();
    rw.tokens.push(ENT_ID);
    rw.tokens.push(R2_ID);
    let r1_positions: Vec<usize> = rw.markers.iter().map(|m| m.expect("marker")).collect();
    Ok(PreprocessedExample {
        tokens: rw.tokens,
        r1_pos: r1_positions[0],
        r2_pos: target_pos + 1,
        r1_positions,
        topics: topics.iter().map(|m| m.entity).collect(),
        topic_spans: rw.spans,
        target: None,
        target_span: (target_pos, target_pos),
        context_mentions: Vec::new(),
        answer_set: None,
    })
}

/// Memory-mixed LM form of a passage: mention `target_index` is masked and
/// followed by `[R2]`; every other mention keeps its surface form and gets an `[R1]`.
pub fn preprocess_lm_example(
    passage: &AnnotatedPassage,
    target_index: usize,
) -> Result<PreprocessedExample> {
    let target = *passage
        .mentions
        .get(target_index)
        .ok_or(VkbError::IndexOutOfRange {
            index: target_index,
            len: passage.mentions.len(),
        })?;
    let topics: Vec<Mention> = passage
        .mentions
        .iter()
        .enumerate()
        .filter(|(i, m)| *i != target_index && m.entity != target.entity)
        .map(|(_, m)| *m)
        .collect();
    if topics.is_empty() {
        return Err(VkbError::MissingMention(format!(
            "passage {} has no topic mention besides the target",
            passage.id
        )));
    }
    let mut edits: Vec<Edit> = topics
        .iter()
        .map(|&m| Edit {
            mention: m,
            mask: false,
            marker: Some(R1_ID),
        })
        .collect();
    edits.push(Edit {
        mention: target,
        mask: true,
        marker: Some(R2_ID),
    });
    let rw = rewrite(&passage.tokens, &passage.mentions, &edits);
    let n = topics.len();
    let r1_positions: Vec<usize> = rw.markers[..n].iter().map(|m| m.expect("marker")).collect();
    Ok(PreprocessedExample {
        tokens: rw.tokens,
        r1_pos: r1_positions[0],
        r2_pos: rw.markers[n].expect("target marker"),
        r1_positions,
        topics: topics.iter().map(|m| m.entity).collect(),
        topic_spans: rw.spans[..n].to_vec(),
        target: Some(target.entity),
        target_span: rw.spans[n],
        context_mentions: Vec::new(),
        answer_set: Some(vec![target.entity]),
    })
}

/// Masked-entity form used to pretrain the entity table: mention `index` becomes
/// one `[ENT]`, no markers. The returned target span points at that `[ENT]`.
pub fn preprocess_masked_entity(
    passage: &AnnotatedPassage,
    index: usize,
) -> Result<PreprocessedExample> {
    let m = *passage.mentions.get(index).ok_or(VkbError::IndexOutOfRange {
        index,
        len: passage.mentions.len(),
    })?;
    let rw = rewrite(
        &passage.tokens,
        &passage.mentions,
        &[Edit {
            mention: m,
            mask: true,
            marker: None,
        }],
    );
    Ok(PreprocessedExample {
        tokens: rw.tokens,
        r1_pos: rw.spans[0].0,
        r2_pos: rw.spans[0].0,
        r1_positions: Vec::new(),
        topics: Vec::new(),
        topic_spans: Vec::new(),
        target: Some(m.entity),
        target_span: rw.spans[0],
        context_mentions: rw.context,
        answer_set: Some(vec![m.entity]),
    })
}
