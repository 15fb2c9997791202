//! Defender strategies.
//!
//! Plain (no-defense) training, agent indexing, the agent subspace
//! (see [`subspace`]), and the reimplemented baselines (deep ensembles,
//! agent augmentation / backdoor adversarial training, spectral signature
//! filtering; see [`baselines`]).
//!
//! All strategies share one deterministic minibatch-SGD loop,
//! [`train_single`]; every batch order and initialization is derived from
//! explicit seeds.

pub mod baselines;
pub mod subspace;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{JointDataset, LabeledExample};
use crate::error::{Error, Result};
use crate::nn::{
    init_params, loss_and_grad, sgd_step, Batch, InitMode, ModelSpec, OptimState, ParamVector,
};
use crate::rng::{self, stream};

pub use baselines::{
    agent_augment, backdoor_adversarial_training_augment, spectral_signature_filter,
    train_deep_ensemble,
};
pub use subspace::{
    eval_subspace, subspace_ensemble_predict, train_subspace, train_subspace_with_workers,
    DataMode, DistanceObjective, Schedule, SubspaceConfig, SubspaceModel, TraceRow,
};

/// Shared SGD hyperparameters for plain and baseline training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Early stopping: stop after this many epochs without validation-loss
    /// improvement. `None` always runs the full epoch budget.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
}

fn default_epochs() -> usize {
    300
}
fn default_batch_size() -> usize {
    128
}
fn default_learning_rate() -> f64 {
    0.001
}
fn default_momentum() -> f64 {
    0.9
}
fn default_patience() -> Option<usize> {
    Some(10)
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
            patience: default_patience(),
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("invalid learning rate or momentum"));
        }
        Ok(())
    }
}

/// A training example as (pixels, target label).
pub type TrainItem<'a> = (&'a [f64], usize);

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: ParamVector,
    pub epochs_run: usize,
    pub final_val_loss: Option<f64>,
}

/// Independently trained networks whose softmax outputs are averaged.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub spec: ModelSpec,
    pub members: Vec<ParamVector>,
}

/// One model per attacker, trained on everyone else's data and routed by
/// the requesting agent's index at inference.
#[derive(Debug, Clone)]
pub struct IndexedModels {
    pub spec: ModelSpec,
    pub per_agent: BTreeMap<usize, ParamVector>,
}

pub(crate) fn assemble_batch(items: &[TrainItem<'_>], indices: &[usize]) -> Batch {
    let input_len = items[indices[0]].0.len();
    let mut inputs = Vec::with_capacity(indices.len() * input_len);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        inputs.extend_from_slice(items[i].0);
        labels.push(items[i].1);
    }
    Batch {
        inputs,
        labels,
        input_len,
    }
}

/// Mean loss of `params` over a labeled set, batched.
pub(crate) fn eval_mean_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    items: &[TrainItem<'_>],
    batch_size: usize,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::config("cannot evaluate loss on an empty set"));
    }
    let indices: Vec<usize> = (0..items.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size) {
        let batch = assemble_batch(items, chunk);
        let (loss, _) = loss_and_grad(spec, params, &batch)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

/// The deterministic minibatch-SGD loop every defense builds on.
///
/// Batch order for epoch `e` is a seeded shuffle derived from
/// `(seed, BATCH_SHUFFLE, e)`. With a validation set and a patience value,
/// training stops once validation loss has not improved for that many
/// epochs and the best-validation parameters are returned.
pub fn train_single(
    spec: &ModelSpec,
    train: &[TrainItem<'_>],
    val: Option<&[TrainItem<'_>]>,
    opts: &TrainOptions,
    init: ParamVector,
    seed: u64,
) -> Result<TrainRun> {
    spec.validate()?;
    opts.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut params = init;
    let mut opt = OptimState::new(opts.learning_rate, opts.momentum, params.len())?;

    let mut best: Option<(f64, ParamVector)> = None;
    let mut stale_epochs = 0usize;
    let mut epochs_run = 0;
    let mut final_val_loss = None;

    for epoch in 0..opts.epochs {
        // epoch order is a seeded shuffle of the identity, so it depends
        // only on (seed, epoch), never on history
        let mut indices: Vec<usize> = (0..train.len()).collect();
        let mut gen = rng::rng(rng::derive2(seed, stream::BATCH_SHUFFLE, epoch as u64));
        indices.shuffle(&mut gen);
        for chunk in indices.chunks(opts.batch_size) {
            let batch = assemble_batch(train, chunk);
            let (loss, grad) = loss_and_grad(spec, &params, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    endpoint: None,
                });
            }
            sgd_step(&mut params, &grad, &mut opt)?;
        }
        epochs_run = epoch + 1;

        if let (Some(val_items), Some(patience)) = (val, opts.patience) {
            let vloss = eval_mean_loss(spec, &params, val_items, opts.batch_size)?;
            if !vloss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    endpoint: None,
                });
            }
            final_val_loss = Some(vloss);
            let improved = best.as_ref().map_or(true, |(b, _)| vloss < b - 1e-12);
            if improved {
                best = Some((vloss, params.clone()));
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= patience {
                    break;
                }
            }
        }
    }

    if let Some((vloss, best_params)) = best {
        params = best_params;
        final_val_loss = Some(vloss);
    }
    Ok(TrainRun {
        params,
        epochs_run,
        final_val_loss,
    })
}

/// All agents' train examples with their effective training labels
/// (poison labels where present).
pub fn joint_train_items(joint: &JointDataset) -> Vec<TrainItem<'_>> {
    joint
        .agents
        .iter()
        .flat_map(|a| a.train_examples.iter())
        .map(|e| (e.image.as_slice(), e.training_label()))
        .collect()
}

/// The defender's validation items (clean labels).
pub fn defender_val_items(joint: &JointDataset) -> Vec<TrainItem<'_>> {
    joint
        .defender()
        .test_examples
        .iter()
        .map(|e| (e.image.as_slice(), e.training_label()))
        .collect()
}

/// No-defense baseline: trains one model on the union of all contributed
/// train data, early-stopped on the defender's validation split.
pub fn train_plain(
    spec: &ModelSpec,
    joint: &JointDataset,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainRun> {
    let train = joint_train_items(joint);
    let val = defender_val_items(joint);
    let init = init_params(spec, seed, InitMode::PerPointRandom)?;
    train_single(
        spec,
        &train,
        (!val.is_empty()).then_some(val.as_slice()),
        opts,
        init,
        seed,
    )
}

/// Agent-indexed sets: `S_i` is the union of train examples of every agent
/// except attacker `i` (the defender's contribution always included).
pub fn agent_indexed_sets(joint: &JointDataset) -> Result<BTreeMap<usize, Vec<&LabeledExample>>> {
    let n = joint.num_attackers();
    if n < 2 {
        return Err(Error::config(
            "agent-indexed sets need at least two attackers",
        ));
    }
    let mut sets = BTreeMap::new();
    for i in 1..=n {
        let set: Vec<&LabeledExample> = joint
            .agents
            .iter()
            .filter(|a| a.agent_id != i)
            .flat_map(|a| a.train_examples.iter())
            .collect();
        sets.insert(i, set);
    }
    Ok(sets)
}

pub(crate) fn as_train_items<'a>(examples: &[&'a LabeledExample]) -> Vec<TrainItem<'a>> {
    examples
        .iter()
        .map(|e| (e.image.as_slice(), e.training_label()))
        .collect()
}

/// Agent indexing: one model per attacker, trained on `S_i`, selected by the
/// requesting agent's index at inference.
pub fn train_agent_indexing(
    spec: &ModelSpec,
    joint: &JointDataset,
    opts: &TrainOptions,
    seed: u64,
) -> Result<IndexedModels> {
    let sets = agent_indexed_sets(joint)?;
    let val = defender_val_items(joint);
    let mut per_agent = BTreeMap::new();
    for (i, set) in sets {
        let items = as_train_items(&set);
        let child = rng::derive2(seed, stream::ENDPOINT, i as u64);
        let init = init_params(spec, child, InitMode::PerPointRandom)?;
        let run = train_single(
            spec,
            &items,
            (!val.is_empty()).then_some(val.as_slice()),
            opts,
            init,
            child,
        )?;
        per_agent.insert(i, run.params);
    }
    Ok(IndexedModels {
        spec: spec.clone(),
        per_agent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{generate_trigger, poison_dataset, AttackerConfig};
    use crate::data::{generate_synthetic, partition, SplitConfig};

    pub(crate) fn poisoned_joint(
        num_attackers: usize,
        per_class: usize,
        p: f64,
        epsilon: f64,
    ) -> JointDataset {
        let dims = (8, 8, 1);
        let pool = generate_synthetic(10, per_class, dims, 3407).unwrap();
        let mut joint = partition(pool, dims, 10, num_attackers, 0.1, &SplitConfig::default())
            .unwrap();
        for i in 1..=num_attackers {
            let cfg = AttackerConfig::seeded(i, epsilon, p, 10).unwrap();
            let trigger = generate_trigger(&cfg, dims);
            poison_dataset(joint.attacker_mut(i).unwrap(), &cfg, &trigger).unwrap();
        }
        joint
    }

    #[test]
    fn indexed_sets_exclude_own_triggers() {
        let joint = poisoned_joint(2, 40, 0.4, 0.4);
        let sets = agent_indexed_sets(&joint).unwrap();
        for (&i, set) in &sets {
            assert!(set.iter().all(|e| e.trigger_id != Some(i)));
            let joint_train: usize = joint.agents.iter().map(|a| a.train_examples.len()).sum();
            let own = joint.attacker(i).unwrap().train_examples.len();
            assert_eq!(set.len(), joint_train - own);
        }
        // N=2: S_1 holds exactly agent 2's and the defender's examples
        let s1 = &sets[&1];
        let expected = joint.defender().train_examples.len()
            + joint.attacker(2).unwrap().train_examples.len();
        assert_eq!(s1.len(), expected);
    }

    #[test]
    fn indexed_sets_require_two_attackers() {
        let joint = poisoned_joint(1, 40, 0.0, 0.0);
        assert!(matches!(agent_indexed_sets(&joint), Err(Error::Config(_))));
    }

    #[test]
    fn train_single_is_deterministic() {
        let joint = poisoned_joint(2, 20, 0.0, 0.0);
        let spec = ModelSpec::dense((8, 8, 1), vec![8], 10);
        let opts = TrainOptions {
            epochs: 5,
            patience: None,
            ..TrainOptions::default()
        };
        let items = joint_train_items(&joint);
        let init = init_params(&spec, 7, InitMode::ConstantShared).unwrap();
        let a = train_single(&spec, &items, None, &opts, init.clone(), 7).unwrap();
        let b = train_single(&spec, &items, None, &opts, init, 7).unwrap();
        assert!(a.params.bits_eq(&b.params));
    }

    #[test]
    fn train_plain_stops_early_with_patience() {
        let joint = poisoned_joint(2, 20, 0.0, 0.0);
        let spec = ModelSpec::dense((8, 8, 1), vec![8], 10);
        let opts = TrainOptions {
            epochs: 200,
            patience: Some(3),
            ..TrainOptions::default()
        };
        let run = train_plain(&spec, &joint, &opts, 3407).unwrap();
        assert!(run.epochs_run <= 200);
        assert!(run.final_val_loss.is_some());
    }

    #[test]
    fn indexing_models_never_see_own_trigger() {
        let joint = poisoned_joint(2, 30, 0.5, 0.4);
        let sets = agent_indexed_sets(&joint).unwrap();
        for (&i, set) in &sets {
            assert_eq!(
                set.iter().filter(|e| e.trigger_id == Some(i)).count(),
                0,
                "S_{i} contains its own trigger"
            );
        }
    }
}
