//! One serializable config for the whole pipeline plus the glue between
//! stages shared by the CLI and the end-to-end tests.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    preprocess_lm_example, preprocess_relation_example, AnnotatedPassage, BatchConfig, EntityPair, PreprocessedExample,
    SynthConfig, SyntheticWorld,
};
use crate::encoder::{init_params, EncoderConfig, ModelParams};
use crate::error::{Result, VkbError};
use crate::eval::EvalConfig;
use crate::memory::MemoryConfig;
use crate::training::{
    train_entity, train_relation, FollowTrainConfig, LmTrainConfig, LossReport, Stage, TrainConfig, TrainObserver,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuestionConfig {
    pub test_fraction: f64,
    /// Number of compositional questions generated; 0 skips them.
    pub two_hop: usize,
    /// Fraction of facts withheld from pretraining and memory, to be injected later.
    pub late_fraction: f64,
}

impl Default for QuestionConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            two_hop: 600,
            late_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    /// Vocabulary sizes are filled in from the corpus.
    pub encoder: EncoderConfig,
    pub batch: BatchConfig,
    pub entity: TrainConfig,
    pub relation: TrainConfig,
    pub memory: MemoryConfig,
    pub finetune: TrainConfig,
    pub follow: FollowTrainConfig,
    pub lm: TrainConfig,
    pub lm_mix: LmTrainConfig,
    pub questions: QuestionConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let stage = |stage, steps, lr| TrainConfig {
            stage,
            steps,
            learning_rate: lr,
            ..Default::default()
        };
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            encoder: EncoderConfig::default(),
            batch: BatchConfig::default(),
            entity: stage(Stage::Entity, 0, 1e-3),
            relation: stage(Stage::Relation, 600, 3e-3),
            memory: MemoryConfig::default(),
            finetune: stage(Stage::FollowFinetune, 6000, 2e-3),
            follow: FollowTrainConfig::default(),
            lm: stage(Stage::Lm, 1200, 3e-3),
            lm_mix: LmTrainConfig::default(),
            questions: QuestionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Derives every stage seed from the single run seed so one number
    /// reproduces a run.
    pub fn reseeded(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.encoder.seed = seed.wrapping_add(1);
        self.entity.seed = seed.wrapping_add(2);
        self.relation.seed = seed.wrapping_add(3);
        self.memory.seed = seed.wrapping_add(4);
        self.finetune.seed = seed.wrapping_add(5);
        self.lm.seed = seed.wrapping_add(6);
        self
    }

    pub fn encoder_for(&self, token_vocab: usize, entity_vocab: usize) -> EncoderConfig {
        EncoderConfig {
            token_vocab_size: token_vocab,
            entity_vocab_size: entity_vocab,
            ..self.encoder.clone()
        }
    }

    pub fn init_model(&self, world: &SyntheticWorld) -> Result<ModelParams> {
        init_params(&self.encoder_for(world.tokens.len(), world.entities.len()))
    }
}

/// Stage 0 (when it has steps) followed by stage 1.
pub fn pretrain(
    params: &mut ModelParams,
    corpus: &[AnnotatedPassage],
    cfg: &PipelineConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<LossReport>> {
    let mut reports = Vec::new();
    if cfg.entity.steps > 0 {
        reports.extend(train_entity(params, corpus, &cfg.entity, observer)?);
    }
    if cfg.relation.steps > 0 {
        let pairs = cfg.memory.pairs(corpus);
        reports.extend(train_relation(params, corpus, &pairs, cfg.batch.clone(), &cfg.relation, observer)?);
    }
    Ok(reports)
}

/// Facts split into those present from the start and those withheld for
/// later injection.
#[derive(Clone, Debug, PartialEq)]
pub struct FactSplit {
    pub base: Vec<usize>,
    pub late: Vec<usize>,
}

impl FactSplit {
    pub fn new(num_facts: usize, late_fraction: f64, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..num_facts).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_late = (num_facts as f64 * late_fraction).round() as usize;
        let mut late = order[..n_late].to_vec();
        let mut base = order[n_late..].to_vec();
        late.sort_unstable();
        base.sort_unstable();
        Self { base, late }
    }

    /// Passages of `world` rendering the selected facts.
    pub fn passages(world: &SyntheticWorld, facts: &[usize]) -> Vec<AnnotatedPassage> {
        let keep: BTreeSet<usize> = facts.iter().copied().collect();
        world
            .passages
            .iter()
            .zip(&world.passage_facts)
            .filter(|(_, f)| keep.contains(f))
            .map(|(p, _)| p.clone())
            .collect()
    }
}

/// Every (passage, mention) LM example with at least one other topic mention.
pub fn lm_examples(corpus: &[AnnotatedPassage]) -> Vec<PreprocessedExample> {
    corpus
        .iter()
        .flat_map(|p| (0..p.mentions.len()).filter_map(move |i| preprocess_lm_example(p, i).ok()))
        .collect()
}

/// Fact passages grouped by the relation label of the fact they render, as
/// masked relation examples.
pub fn relation_groups(
    world: &SyntheticWorld,
    passages: &[(AnnotatedPassage, usize)],
) -> Result<BTreeMap<u32, Vec<PreprocessedExample>>> {
    let mut groups: BTreeMap<u32, Vec<PreprocessedExample>> = BTreeMap::new();
    for (p, fi) in passages {
        let f = world
            .kb
            .facts
            .get(*fi)
            .ok_or(VkbError::IndexOutOfRange {
                index: *fi,
                len: world.kb.facts.len(),
            })?;
        let ex = preprocess_relation_example(p, EntityPair::new(f.subject, f.object), true, true)?;
        groups.entry(f.relation).or_default().push(ex);
    }
    Ok(groups)
}
