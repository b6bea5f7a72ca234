//! Losses, optimizers and the staged training schedules.

pub mod gradcheck;
mod losses;
mod optim;
mod stages;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::encoder::ModelParams;
use crate::error::{Result, VkbError};
use crate::tensor::Tensor;

pub use losses::{
    entity_linking_loss, entity_linking_loss_graph, entity_softmax_loss_graph, masked_entity_loss,
    masked_entity_loss_graph, relation_contrastive_loss, relation_contrastive_loss_graph, retrieval_loss,
};
pub use optim::{check_finite, global_norm, Optimizer, OptimizerState};
pub use stages::{
    finetune_follow, overfit_relation_batch, train_entity, train_lm, train_relation, train_relation_classifier, ClassifierExample,
    FinetuneOutcome, FollowExample, FollowTrainConfig, LmTrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Entity,
    Relation,
    Lm,
    FollowFinetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    pub stage: Stage,
    /// Parameter names or groups (`encoder`, `w_t`, `layerN`) held fixed.
    pub frozen: Vec<String>,
    /// Calls [`TrainObserver::on_checkpoint`] every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            batch_size: 16,
            steps: 100,
            clip_norm: 1.0,
            seed: 0,
            stage: Stage::Relation,
            frozen: Vec::new(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(VkbError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(VkbError::InvalidConfig("clip_norm must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(VkbError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean loss components of one step. Absent components are not part of the stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_rel: Option<f64>,
    pub l_el: Option<f64>,
    pub l_re: Option<f64>,
    pub l_mel: Option<f64>,
    pub l_follow: Option<f64>,
    pub l_cls: Option<f64>,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        [self.l_rel, self.l_el, self.l_re, self.l_mel, self.l_follow, self.l_cls]
            .iter()
            .flatten()
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    #[serde(flatten)]
    pub components: LossComponents,
    pub total: f64,
    pub grad_norm: f64,
}

/// Hooks called by the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _report: &LossReport, _params: &ModelParams) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _step: usize, _params: &ModelParams) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Quiet;

impl TrainObserver for Quiet {}

/// Reverse pass from `loss`; fails on any non-finite parameter gradient.
pub fn compute_gradients(g: &Graph<'_>, loss: NodeId, names: &[String]) -> Result<Vec<Option<Tensor>>> {
    let grads = g.backward(loss).into_params();
    check_finite(&grads, names)?;
    Ok(grads)
}

pub(crate) fn accumulate(acc: &mut Vec<Option<Tensor>>, grads: Vec<Option<Tensor>>) {
    if acc.len() < grads.len() {
        acc.resize(grads.len(), None);
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Epoch-wise shuffled batches of indices. When the batch covers the whole
/// set every step sees all examples in their original order.
pub(crate) struct Sampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub(crate) fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch,
            rng,
        }
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        let n = self.order.len();
        if self.batch >= n {
            return (0..n).collect();
        }
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// The shared optimization loop: `step_fn` returns summed gradients and mean
/// components for step `i`.
pub(crate) fn optimize<F>(
    params: &mut ModelParams,
    trainable: &[bool],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
    mut step_fn: F,
) -> Result<Vec<LossReport>>
where
    F: FnMut(&ModelParams, &[bool], usize) -> Result<(Vec<Option<Tensor>>, LossComponents)>,
{
    cfg.validate()?;
    let mut state = OptimizerState::new(params.len());
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (grads, components) = step_fn(params, trainable, step)?;
        check_finite(&grads, &params.names)?;
        let total = components.total();
        if !total.is_finite() {
            return Err(VkbError::NonFiniteGradient(format!("loss at step {step}")));
        }
        let grad_norm = state.step(
            cfg.optimizer,
            &mut params.tensors,
            trainable,
            &grads,
            cfg.learning_rate,
            cfg.clip_norm,
        );
        let report = LossReport {
            step,
            components,
            total,
            grad_norm,
        };
        log::debug!("step {step} loss {total:.6} |g| {grad_norm:.4}");
        observer.on_step(&report, params)?;
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(step + 1, params)?;
        }
        reports.push(report);
    }
    Ok(reports)
}
