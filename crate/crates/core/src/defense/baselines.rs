//! Reimplemented baseline defenses: deep ensembles, agent augmentation
//! (which also covers backdoor adversarial training), and spectral
//! signature filtering.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::attack::{apply_trigger, generate_trigger, AttackerConfig, TriggerPattern};
use crate::data::{JointDataset, LabeledExample};
use crate::defense::{
    defender_val_items, joint_train_items, train_single, EnsembleModel, TrainOptions,
};
use crate::error::{Error, Result};
use crate::nn::{forward_features, init_params, Batch, Dims, InitMode, ModelSpec, ParamVector};
use crate::rng::{self, stream};

/// Trains `members` networks independently (distinct derived seeds, random
/// initializations); prediction averages their softmax outputs.
pub fn train_deep_ensemble(
    spec: &ModelSpec,
    joint: &JointDataset,
    members: usize,
    opts: &TrainOptions,
    seed: u64,
) -> Result<EnsembleModel> {
    if members == 0 {
        return Err(Error::config("ensemble needs at least one member"));
    }
    let train = joint_train_items(joint);
    let val = defender_val_items(joint);
    let mut trained = Vec::with_capacity(members);
    for m in 0..members {
        let child = rng::derive2(seed, stream::MEMBER, m as u64);
        let init = init_params(spec, child, InitMode::PerPointRandom)?;
        let run = train_single(
            spec,
            &train,
            (!val.is_empty()).then_some(val.as_slice()),
            opts,
            init,
            child,
        )?;
        trained.push(run.params);
    }
    Ok(EnsembleModel {
        spec: spec.clone(),
        members: trained,
    })
}

/// Simulates fake backdoor attackers inside the defender's own data: 40% of
/// the examples stay clean, the rest are split equally among `n_simulated`
/// simulated attackers, and within each share a fraction `p_sim` receives a
/// fresh seeded trigger (density `eps_sim`) and a random target label.
///
/// Simulated trigger ids start at `id_offset` so they never collide with
/// real attacker indices. Returns a modified copy; examples keep their
/// original positions.
pub fn agent_augment(
    defender_train: &[LabeledExample],
    dims: Dims,
    num_classes: usize,
    n_simulated: usize,
    p_sim: f64,
    eps_sim: f64,
    seed: u64,
    id_offset: usize,
) -> Result<Vec<LabeledExample>> {
    if defender_train.is_empty() {
        return Err(Error::config("defender dataset is empty"));
    }
    if n_simulated == 0 {
        return Err(Error::config("n_simulated must be at least 1"));
    }
    if !(0.0..=1.0).contains(&p_sim) || !(0.0..=1.0).contains(&eps_sim) {
        return Err(Error::config("p_sim and eps_sim must lie in [0, 1]"));
    }
    let mut out = defender_train.to_vec();
    let n = out.len();
    let clean_count = (0.4 * n as f64).floor() as usize;
    let pool = n - clean_count;
    let share = pool / n_simulated;
    if share == 0 {
        log::warn!(
            "agent augmentation: {pool} poisonable examples cannot fill {n_simulated} shares; all simulated attackers skipped"
        );
        return Ok(out);
    }

    let mut gen = rng::rng(rng::derive(seed, stream::AUGMENT));
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut gen);
    // indices[0..clean_count] stay clean; shares are consecutive slices after
    for s in 0..n_simulated {
        let share_indices = &indices[clean_count + s * share..clean_count + (s + 1) * share];
        let sim_seed = rng::derive2(seed, stream::AUGMENT, s as u64);
        let mut sim_gen = rng::rng(sim_seed);
        let target_label = sim_gen.gen_range(0..num_classes);
        let trigger = simulated_trigger(sim_seed, eps_sim, dims);
        let poison_count = (p_sim * share as f64).floor() as usize;
        for &idx in share_indices.iter().take(poison_count) {
            let ex = &mut out[idx];
            ex.image = apply_trigger(&ex.image, &trigger)?;
            ex.poison_label = Some(target_label);
            ex.trigger_id = Some(id_offset + s);
        }
    }
    Ok(out)
}

fn simulated_trigger(sim_seed: u64, eps: f64, dims: Dims) -> TriggerPattern {
    let cfg = AttackerConfig {
        attacker_id: 0,
        epsilon: eps,
        poison_rate: 0.0,
        target_label: 0,
        seed: sim_seed,
    };
    generate_trigger(&cfg, dims)
}

/// Backdoor adversarial training: agent augmentation with 20 simulated
/// attackers at p = eps = 0.4.
pub fn backdoor_adversarial_training_augment(
    defender_train: &[LabeledExample],
    dims: Dims,
    num_classes: usize,
    seed: u64,
    id_offset: usize,
) -> Result<Vec<LabeledExample>> {
    agent_augment(defender_train, dims, num_classes, 20, 0.4, 0.4, seed, id_offset)
}

/// Spectral signature filtering: per (possibly poisoned) training label,
/// scores every example by its squared projection onto the top right
/// singular vector of the centered penultimate-layer representations of a
/// plain-trained model, then removes the `top_k_per_attacker * N` highest
/// scores in the class. Returns the reduced dataset for retraining.
pub fn spectral_signature_filter(
    spec: &ModelSpec,
    joint: &JointDataset,
    opts: &TrainOptions,
    seed: u64,
    top_k_per_attacker: usize,
) -> Result<JointDataset> {
    let mut filtered = joint.clone();
    if top_k_per_attacker == 0 {
        return Ok(filtered);
    }
    let probe = crate::defense::train_plain(
        spec,
        joint,
        opts,
        rng::derive(seed, stream::SPECTRAL),
    )?;
    let removals_per_class = top_k_per_attacker * joint.num_attackers();

    // (agent, index) of every train example, grouped by training label
    let mut by_label: Vec<Vec<(usize, usize)>> = vec![Vec::new(); joint.num_classes];
    for agent in &joint.agents {
        for (ei, ex) in agent.train_examples.iter().enumerate() {
            by_label[ex.training_label()].push((agent.agent_id, ei));
        }
    }

    let mut to_remove: Vec<(usize, usize)> = Vec::new();
    for (label, members) in by_label.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let images: Vec<&[f64]> = members
            .iter()
            .map(|&(a, e)| joint.agents[a].train_examples[e].image.as_slice())
            .collect();
        let feats = batched_features(spec, &probe.params, &images)?;
        let d = spec.feature_dim();
        let n = members.len();
        // center
        let mut mean = vec![0.0; d];
        for row in feats.chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let centered: Vec<f64> = feats
            .chunks(d)
            .flat_map(|row| row.iter().zip(&mean).map(|(&v, &m)| v - m))
            .collect();
        let v = top_right_singular_vector(&centered, n, d);
        let mut scored: Vec<(f64, (usize, usize))> = centered
            .chunks(d)
            .zip(members)
            .map(|(row, &loc)| {
                let proj: f64 = row.iter().zip(&v).map(|(&r, &vi)| r * vi).sum();
                (proj * proj, loc)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let take = if removals_per_class >= n {
            log::warn!(
                "spectral signatures: class {label} has {n} examples but {removals_per_class} removals requested; keeping one"
            );
            n - 1
        } else {
            removals_per_class
        };
        to_remove.extend(scored.into_iter().take(take).map(|(_, loc)| loc));
    }

    // drop marked examples, preserving order of the survivors
    for agent in &mut filtered.agents {
        let drop: Vec<usize> = to_remove
            .iter()
            .filter(|&&(a, _)| a == agent.agent_id)
            .map(|&(_, e)| e)
            .collect();
        if drop.is_empty() {
            continue;
        }
        agent.train_examples = agent
            .train_examples
            .drain(..)
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, e)| e)
            .collect();
    }
    Ok(filtered)
}

fn batched_features(
    spec: &ModelSpec,
    params: &ParamVector,
    images: &[&[f64]],
) -> Result<Vec<f64>> {
    let mut feats = Vec::with_capacity(images.len() * spec.feature_dim());
    for chunk in images.chunks(256) {
        let batch = Batch::from_images(chunk, &vec![0; chunk.len()])?;
        feats.extend(forward_features(spec, params, &batch)?);
    }
    Ok(feats)
}

/// Top right singular vector of an n x d matrix via power iteration on the
/// d x d Gram matrix. Deterministic: fixed start vector, fixed iteration cap.
fn top_right_singular_vector(matrix: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut gram = vec![0.0; d * d];
    for row in matrix.chunks(d) {
        for i in 0..d {
            if row[i] == 0.0 {
                continue;
            }
            for j in 0..d {
                gram[i * d + j] += row[i] * row[j];
            }
        }
    }
    let _ = n;
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    for _ in 0..200 {
        let mut next = vec![0.0; d];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += gram[i * d + j] * v[j];
            }
            next[i] = acc;
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return v; // degenerate representations: keep the start vector
        }
        for x in next.iter_mut() {
            *x /= norm;
        }
        let delta: f64 = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if delta < 1e-12 {
            break;
        }
    }
    v
}
