//! The agent subspace defense.
//!
//! Training holds one parameter end-point per attacker, all started from a
//! shared constant initialization, each taking minibatch steps on its
//! agent-indexed set while a cosine-distance regularizer pulls the
//! end-points together (or apart, for the max-distance ablation). The
//! regularizer reads co-end-points as snapshotted at the start of the
//! epoch, which makes multi-threaded end-point training bit-identical to
//! the single-threaded order.
//!
//! Inference interpolates the end-points: the uniform convex combination is
//! the subspace centre, and the ensemble predictor averages softmax outputs
//! over coefficient vectors sampled uniformly from the simplex.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::JointDataset;
use crate::defense::{as_train_items, assemble_batch, TrainItem};
use crate::error::{Error, Result};
use crate::nn::{
    cosine_similarity_with_grad, init_params, interpolate, loss_and_grad, sgd_step, uniform_alphas,
    validate_alphas, Batch, InitMode, LayerShape, ModelSpec, OptimState, ParamVector,
};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// End-point i trains on S_i, the union of everyone else's data.
    AgentIndexed,
    /// End-point i trains on attacker i's own contribution.
    Respective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// All end-points advance each epoch against epoch-start snapshots.
    Parallel,
    /// The first end-point trains alone, then the rest train against it.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceObjective {
    /// Compress the subspace: penalize cosine distance.
    Minimize,
    /// Ablation: reward cosine distance instead.
    Maximize,
}

/// Hyperparameters for subspace construction and evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubspaceConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_init_mode")]
    pub init_mode: InitMode,
    #[serde(default = "default_data_mode")]
    pub data_mode: DataMode,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default = "default_objective")]
    pub distance_objective: DistanceObjective,
    /// Point-estimates sampled for the ensemble predictor.
    #[serde(default = "default_ensemble_samples")]
    pub ensemble_samples: usize,
    /// Samples used when tracing accuracy at checkpoints.
    #[serde(default = "default_checkpoint_samples")]
    pub checkpoint_ensemble_samples: usize,
    /// Checkpoint interval in epochs; 0 picks roughly ten checkpoints.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Average per-layer cosines instead of one flat-vector cosine.
    #[serde(default)]
    pub per_layer_cosine: bool,
    /// Sample ensemble coefficients from the full cone (each in [0,1])
    /// instead of the simplex.
    #[serde(default)]
    pub cone_sampling: bool,
}

fn default_beta() -> f64 {
    0.05
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
fn default_init_mode() -> InitMode {
    InitMode::ConstantShared
}
fn default_data_mode() -> DataMode {
    DataMode::AgentIndexed
}
fn default_schedule() -> Schedule {
    Schedule::Parallel
}
fn default_objective() -> DistanceObjective {
    DistanceObjective::Minimize
}
fn default_ensemble_samples() -> usize {
    1000
}
fn default_checkpoint_samples() -> usize {
    200
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SubspaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::config("beta must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.ensemble_samples == 0 {
            return Err(Error::config(
                "epochs, batch_size, and ensemble_samples must be positive",
            ));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("invalid learning rate or momentum"));
        }
        Ok(())
    }

    fn checkpoint_interval(&self) -> usize {
        if self.checkpoint_every > 0 {
            self.checkpoint_every
        } else {
            (self.epochs / 10).max(1)
        }
    }
}

/// One trace record: per-end-point task loss for the epoch and the mean
/// pairwise cosine distance measured at the epoch start.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub endpoint: usize,
    pub task_loss: f64,
    pub mean_pairwise_cos_distance: f64,
}

/// N trained end-points plus interpolation/ensembling semantics.
#[derive(Debug, Clone)]
pub struct SubspaceModel {
    pub spec: ModelSpec,
    pub config: SubspaceConfig,
    pub endpoints: Vec<ParamVector>,
    pub trace: Vec<TraceRow>,
    /// (epoch, end-point snapshot) pairs recorded during training.
    pub checkpoints: Vec<(usize, Vec<ParamVector>)>,
}

impl SubspaceModel {
    pub fn num_endpoints(&self) -> usize {
        self.endpoints.len()
    }

    /// The subspace centre: the uniform convex combination of end-points.
    pub fn centre(&self) -> Result<ParamVector> {
        interpolate(&self.endpoints, &uniform_alphas(self.endpoints.len()))
    }
}

/// Cosine similarity and gradient w.r.t. `a`, either over the flat vectors
/// or averaged per layer.
fn cosine_with_grad(
    a: &ParamVector,
    b: &ParamVector,
    layout: Option<&[LayerShape]>,
) -> Result<(f64, Vec<f64>)> {
    match layout {
        None => cosine_similarity_with_grad(a, b),
        Some(shapes) => {
            let mut value = 0.0;
            let mut grad = vec![0.0; a.len()];
            let scale = 1.0 / shapes.len() as f64;
            for s in shapes {
                let range = s.weight_offset..s.bias_offset + s.bias_len;
                let av = ParamVector::new(a.values()[range.clone()].to_vec());
                let bv = ParamVector::new(b.values()[range.clone()].to_vec());
                let (c, g) = cosine_similarity_with_grad(&av, &bv)?;
                value += c * scale;
                for (dst, src) in grad[range].iter_mut().zip(g) {
                    *dst = src * scale;
                }
            }
            Ok((value, grad))
        }
    }
}

fn cosine_value(a: &ParamVector, b: &ParamVector, layout: Option<&[LayerShape]>) -> Result<f64> {
    match layout {
        None => crate::nn::cosine_similarity(a, b),
        Some(shapes) => {
            let mut value = 0.0;
            for s in shapes {
                let range = s.weight_offset..s.bias_offset + s.bias_len;
                let av = ParamVector::new(a.values()[range.clone()].to_vec());
                let bv = ParamVector::new(b.values()[range].to_vec());
                value += crate::nn::cosine_similarity(&av, &bv)?;
            }
            Ok(value / shapes.len() as f64)
        }
    }
}

/// Mean pairwise cosine distance 1 - cos over all end-point pairs.
pub fn mean_pairwise_cos_distance(
    endpoints: &[ParamVector],
    layout: Option<&[LayerShape]>,
) -> Result<f64> {
    let n = endpoints.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += 1.0 - cosine_value(&endpoints[i], &endpoints[j], layout)?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

struct EndpointState {
    params: ParamVector,
    opt: OptimState,
}

/// One end-point's epoch: minibatch task steps plus the distance term
/// against the given snapshots. Returns the mean task loss.
#[allow(clippy::too_many_arguments)]
fn endpoint_epoch(
    spec: &ModelSpec,
    items: &[TrainItem<'_>],
    state: &mut EndpointState,
    reg_targets: &[&ParamVector],
    reg_coefficient: f64,
    objective: DistanceObjective,
    layout: Option<&[LayerShape]>,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
    endpoint: usize,
) -> Result<f64> {
    let mut indices: Vec<usize> = (0..items.len()).collect();
    let mut gen = rng::rng(rng::derive2(shuffle_seed, stream::BATCH_SHUFFLE, epoch as u64));
    indices.shuffle(&mut gen);
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(batch_size) {
        let batch: Batch = assemble_batch(items, chunk);
        let (task_loss, mut grad) = loss_and_grad(spec, &state.params, &batch)?;
        if !task_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                endpoint: Some(endpoint),
            });
        }
        if reg_coefficient != 0.0 {
            for target in reg_targets {
                let (_, dcos) = cosine_with_grad(&state.params, target, layout)?;
                // minimize: d = 1 - cos, so d(d)/dtheta = -dcos
                let sign = match objective {
                    DistanceObjective::Minimize => -1.0,
                    DistanceObjective::Maximize => 1.0,
                };
                for (g, dc) in grad.iter_mut().zip(dcos) {
                    *g += reg_coefficient * sign * dc;
                }
            }
        }
        sgd_step(&mut state.params, &grad, &mut state.opt)?;
        loss_sum += task_loss * chunk.len() as f64;
    }
    Ok(loss_sum / items.len() as f64)
}

/// Trains the agent subspace single-threaded (the reference order).
pub fn train_subspace(
    spec: &ModelSpec,
    joint: &JointDataset,
    cfg: &SubspaceConfig,
    seed: u64,
) -> Result<SubspaceModel> {
    train_subspace_with_workers(spec, joint, cfg, seed, 1)
}

/// Trains the agent subspace with up to `workers` threads, one end-point per
/// worker, synchronizing at epoch boundaries. Results are bit-identical to
/// the single-threaded reference order because the regularizer only ever
/// reads epoch-start snapshots.
pub fn train_subspace_with_workers(
    spec: &ModelSpec,
    joint: &JointDataset,
    cfg: &SubspaceConfig,
    seed: u64,
    workers: usize,
) -> Result<SubspaceModel> {
    spec.validate()?;
    cfg.validate()?;
    let n = joint.num_attackers();
    if n < 2 {
        return Err(Error::config("the agent subspace needs at least two attackers"));
    }

    // assigned training sets per end-point
    let assigned: Vec<Vec<TrainItem<'_>>> = match cfg.data_mode {
        DataMode::AgentIndexed => {
            let sets = crate::defense::agent_indexed_sets(joint)?;
            (1..=n).map(|i| as_train_items(&sets[&i])).collect()
        }
        DataMode::Respective => (1..=n)
            .map(|i| {
                joint.agents[i]
                    .train_examples
                    .iter()
                    .map(|e| (e.image.as_slice(), e.training_label()))
                    .collect()
            })
            .collect(),
    };
    if assigned.iter().any(|s| s.is_empty()) {
        return Err(Error::config("an end-point received an empty training set"));
    }

    let owned_layout;
    let layout: Option<&[LayerShape]> = if cfg.per_layer_cosine {
        owned_layout = spec.layout();
        Some(&owned_layout)
    } else {
        None
    };

    let mut states: Vec<EndpointState> = (0..n)
        .map(|i| -> Result<EndpointState> {
            let params = match cfg.init_mode {
                InitMode::ConstantShared => init_params(spec, seed, InitMode::ConstantShared)?,
                InitMode::PerPointRandom => init_params(
                    spec,
                    rng::derive2(seed, stream::ENDPOINT, i as u64),
                    InitMode::PerPointRandom,
                )?,
            };
            let opt = OptimState::new(cfg.learning_rate, cfg.momentum, params.len())?;
            Ok(EndpointState { params, opt })
        })
        .collect::<Result<_>>()?;
    let endpoint_seeds: Vec<u64> = (0..n)
        .map(|i| rng::derive2(seed, stream::ENDPOINT, i as u64))
        .collect();

    let reg_coefficient = cfg.beta / (n - 1) as f64;
    let interval = cfg.checkpoint_interval();
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut checkpoints: Vec<(usize, Vec<ParamVector>)> = Vec::new();
    let workers = workers.max(1).min(n);

    // phases: (epoch range, active end-points, regularizer targets per end-point)
    enum Phase {
        Parallel { epochs: usize },
        Anchor { epochs: usize },
        Followers { epochs: usize },
    }
    let phases: Vec<Phase> = match cfg.schedule {
        Schedule::Parallel => vec![Phase::Parallel { epochs: cfg.epochs }],
        Schedule::Sequential => vec![
            Phase::Anchor { epochs: cfg.epochs },
            Phase::Followers { epochs: cfg.epochs },
        ],
    };

    let mut global_epoch = 0usize;
    for phase in phases {
        let (epochs, active, regularized): (usize, Vec<usize>, bool) = match phase {
            Phase::Parallel { epochs } => (epochs, (0..n).collect(), true),
            Phase::Anchor { epochs } => (epochs, vec![0], false),
            Phase::Followers { epochs } => (epochs, (1..n).collect(), true),
        };
        let anchor_only = matches!(cfg.schedule, Schedule::Sequential);
        for _ in 0..epochs {
            let snapshot: Vec<ParamVector> =
                states.iter().map(|s| s.params.clone()).collect();
            let distance = mean_pairwise_cos_distance(&snapshot, layout).unwrap_or(0.0);

            // run the active end-points' epochs, possibly on worker threads
            let mut results: Vec<Option<Result<f64>>> = (0..n).map(|_| None).collect();
            {
                let mut work: Vec<(usize, &mut EndpointState, Option<Result<f64>>)> = Vec::new();
                let mut iter = states.iter_mut().enumerate();
                for (i, st) in &mut iter {
                    if active.contains(&i) {
                        work.push((i, st, None));
                    }
                }
                let spec_ref = spec;
                let assigned_ref = &assigned;
                let snapshot_ref = &snapshot;
                let seeds_ref = &endpoint_seeds;
                std::thread::scope(|scope| {
                    for chunk in work.chunks_mut(active.len().div_ceil(workers)) {
                        scope.spawn(move || {
                            for (i, st, out) in chunk.iter_mut() {
                                let targets: Vec<&ParamVector> = if !regularized {
                                    Vec::new()
                                } else if anchor_only {
                                    vec![&snapshot_ref[0]]
                                } else {
                                    (0..snapshot_ref.len())
                                        .filter(|j| j != i)
                                        .map(|j| &snapshot_ref[j])
                                        .collect()
                                };
                                *out = Some(endpoint_epoch(
                                    spec_ref,
                                    &assigned_ref[*i],
                                    st,
                                    &targets,
                                    if regularized { reg_coefficient } else { 0.0 },
                                    cfg.distance_objective,
                                    layout,
                                    cfg.batch_size,
                                    seeds_ref[*i],
                                    global_epoch,
                                    *i,
                                ));
                            }
                        });
                    }
                });
                for (i, _, out) in work {
                    results[i] = out;
                }
            }

            for (i, res) in results.into_iter().enumerate() {
                if let Some(res) = res {
                    let task_loss = res?;
                    trace.push(TraceRow {
                        epoch: global_epoch,
                        endpoint: i,
                        task_loss,
                        mean_pairwise_cos_distance: distance,
                    });
                }
            }

            global_epoch += 1;
            if global_epoch % interval == 0 {
                checkpoints.push((
                    global_epoch,
                    states.iter().map(|s| s.params.clone()).collect(),
                ));
            }
        }
    }
    if checkpoints.last().map(|(e, _)| *e) != Some(global_epoch) {
        checkpoints.push((
            global_epoch,
            states.iter().map(|s| s.params.clone()).collect(),
        ));
    }

    Ok(SubspaceModel {
        spec: spec.clone(),
        config: cfg.clone(),
        endpoints: states.into_iter().map(|s| s.params).collect(),
        trace,
        checkpoints,
    })
}

/// Forward pass at the interpolated parameter `sum alpha_i theta_i`.
pub fn eval_subspace(
    model: &SubspaceModel,
    images: &[&[f64]],
    alphas: &[f64],
) -> Result<Vec<f64>> {
    validate_alphas(alphas, model.endpoints.len())?;
    let params = interpolate(&model.endpoints, alphas)?;
    let batch = Batch::from_images(images, &vec![0; images.len()])?;
    crate::nn::forward(&model.spec, &params, &batch)
}

/// Draws coefficient vectors for ensembling: uniform on the simplex by
/// default (normalized unit exponentials), or i.i.d. uniform on [0,1]^N in
/// cone mode.
pub fn sample_alphas(n: usize, num_samples: usize, seed: u64, cone: bool) -> Vec<Vec<f64>> {
    let mut gen = rng::rng(rng::derive(seed, stream::ALPHA_SAMPLE));
    (0..num_samples)
        .map(|_| {
            if cone {
                (0..n).map(|_| gen.gen_range(0.0..1.0)).collect()
            } else {
                let exps: Vec<f64> = (0..n)
                    .map(|_| {
                        let u: f64 = gen.gen_range(0.0..1.0);
                        -(1.0 - u).ln()
                    })
                    .collect();
                let total: f64 = exps.iter().sum();
                exps.iter().map(|e| e / total).collect()
            }
        })
        .collect()
}

/// Averages softmax outputs over explicit coefficient vectors, renormalized.
pub fn ensemble_predict_with_alphas(
    model: &SubspaceModel,
    images: &[&[f64]],
    alphas: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if alphas.is_empty() {
        return Err(Error::config("ensemble needs at least one sample"));
    }
    let k = model.spec.num_classes;
    let mut acc = vec![0.0; images.len() * k];
    for a in alphas {
        let probs = eval_subspace(model, images, a)?;
        for (dst, p) in acc.iter_mut().zip(probs) {
            *dst += p;
        }
    }
    let inv = 1.0 / alphas.len() as f64;
    for v in acc.iter_mut() {
        *v *= inv;
    }
    for row in acc.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(acc)
}

/// Samples `num_samples` points from the subspace and ensembles their
/// softmax outputs.
pub fn subspace_ensemble_predict(
    model: &SubspaceModel,
    images: &[&[f64]],
    num_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if num_samples == 0 {
        return Err(Error::config("num_samples must be at least 1"));
    }
    let alphas = sample_alphas(
        model.endpoints.len(),
        num_samples,
        seed,
        model.config.cone_sampling,
    );
    ensemble_predict_with_alphas(model, images, &alphas)
}
