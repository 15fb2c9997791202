//! Random-BadNet trigger generation and dataset poisoning.
//!
//! Each attacker carries a seeded random trigger: a binary mask `z` drawn
//! i.i.d. Bernoulli(epsilon) per pixel index and replacement values `m`
//! drawn i.i.d. uniform on [0, 1]. Poisoning replaces masked pixels,
//! `out = x * (1 - z) + m * z`, and relabels the example to the attacker's
//! target class. Per the experiment protocol, attacker-specific randomness
//! is seeded by the attacker's index.

use rand::Rng;

use crate::data::{AgentDataset, LabeledExample};
use crate::error::{Error, Result};
use crate::nn::Dims;
use crate::rng::{self, stream};

/// A per-attacker backdoor mask pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerPattern {
    /// Replacement pixel values in [0, 1], length l*w*c.
    pub mask_values: Vec<f64>,
    /// Binary mask, exactly 0.0 or 1.0 per pixel.
    pub binary_mask: Vec<f64>,
    pub epsilon: f64,
    pub attacker_seed: u64,
}

impl TriggerPattern {
    /// Fraction of pixels the mask perturbs.
    pub fn density(&self) -> f64 {
        self.binary_mask.iter().sum::<f64>() / self.binary_mask.len() as f64
    }
}

/// One attacker's strategy knobs. The seed equals the attacker index.
#[derive(Debug, Clone)]
pub struct AttackerConfig {
    pub attacker_id: usize,
    pub epsilon: f64,
    pub poison_rate: f64,
    pub target_label: usize,
    pub seed: u64,
}

impl AttackerConfig {
    /// Builds the attacker's config with the target label sampled uniformly
    /// over the k classes, seeded by the attacker index.
    pub fn seeded(attacker_id: usize, epsilon: f64, poison_rate: f64, num_classes: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) || !(0.0..=1.0).contains(&poison_rate) {
            return Err(Error::config("epsilon and poison rate must lie in [0, 1]"));
        }
        let seed = attacker_id as u64;
        let mut gen = rng::rng(rng::derive2(seed, stream::TARGET_LABEL, attacker_id as u64));
        let target_label = gen.gen_range(0..num_classes);
        Ok(AttackerConfig {
            attacker_id,
            epsilon,
            poison_rate,
            target_label,
            seed,
        })
    }
}

/// Samples an attacker's trigger: `z ~ Bernoulli(epsilon)` and `m ~ U[0,1]`
/// per pixel, both from the attacker-seeded stream.
pub fn generate_trigger(cfg: &AttackerConfig, dims: Dims) -> TriggerPattern {
    let (l, w, c) = dims;
    let n = l * w * c;
    let mut gen = rng::rng(rng::derive2(cfg.seed, stream::TRIGGER, cfg.attacker_id as u64));
    let mut binary_mask = Vec::with_capacity(n);
    let mut mask_values = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = gen.gen_range(0.0..1.0);
        binary_mask.push(if u < cfg.epsilon { 1.0 } else { 0.0 });
    }
    for _ in 0..n {
        mask_values.push(gen.gen_range(0.0..1.0));
    }
    TriggerPattern {
        mask_values,
        binary_mask,
        epsilon: cfg.epsilon,
        attacker_seed: cfg.seed,
    }
}

/// Applies a trigger to one image: masked pixels are replaced by the mask
/// values, unmasked pixels pass through bit-exactly.
pub fn apply_trigger(image: &[f64], trigger: &TriggerPattern) -> Result<Vec<f64>> {
    if image.len() != trigger.binary_mask.len() {
        return Err(Error::config(format!(
            "image has {} pixels but trigger covers {}",
            image.len(),
            trigger.binary_mask.len()
        )));
    }
    Ok(image
        .iter()
        .zip(&trigger.binary_mask)
        .zip(&trigger.mask_values)
        .map(|((&x, &z), &m)| if z == 1.0 { m } else { x })
        .collect())
}

/// Poisons an attacker's dataset in place: a seeded uniform sample of
/// `floor(p * n)` train examples (and likewise test examples) receives the
/// trigger, the attacker's target label, and the attacker's trigger id.
pub fn poison_dataset(
    dataset: &mut AgentDataset,
    cfg: &AttackerConfig,
    trigger: &TriggerPattern,
) -> Result<()> {
    if dataset.agent_id != cfg.attacker_id {
        return Err(Error::config(format!(
            "dataset belongs to agent {} but config is for attacker {}",
            dataset.agent_id, cfg.attacker_id
        )));
    }
    let mut gen = rng::rng(rng::derive2(cfg.seed, stream::POISON_SELECT, cfg.attacker_id as u64));
    for split in [&mut dataset.train_examples, &mut dataset.test_examples] {
        let count = (cfg.poison_rate * split.len() as f64).floor() as usize;
        let chosen = sample_indices(&mut gen, split.len(), count);
        for idx in chosen {
            let ex: &mut LabeledExample = &mut split[idx];
            ex.image = apply_trigger(&ex.image, trigger)?;
            ex.poison_label = Some(cfg.target_label);
            ex.trigger_id = Some(cfg.attacker_id);
        }
    }
    Ok(())
}

/// Seeded uniform sample of `count` distinct indices from `0..n`
/// (partial Fisher-Yates).
fn sample_indices<R: Rng>(gen: &mut R, n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = gen.gen_range(i..n);
        indices.swap(i, j);
    }
    indices.truncate(count);
    indices
}

/// The real poison rate: the fraction of the whole joint dataset backdoored
/// by one attacker, `rho = (1 - V_d) * (1 / N) * p`.
pub fn real_poison_rate(num_attackers: usize, defender_fraction: f64, poison_rate: f64) -> f64 {
    (1.0 - defender_fraction) * poison_rate / num_attackers as f64
}
