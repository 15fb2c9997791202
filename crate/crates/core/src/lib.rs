//! Deterministic simulation engine for the multi-agent backdoor game.
//!
//! Seeded attackers poison a joint image-classification dataset with
//! Random-BadNet triggers, a defender trains small classifiers under a
//! configurable defense, and the engine reports attack/defense payoffs
//! together with the three accuracy metrics (poison-label accuracy on
//! backdoored inputs, clean-label accuracy on clean inputs, clean-label
//! accuracy on backdoored inputs).
//!
//! The central defense is the agent subspace: one parameter end-point per
//! attacker, trained jointly on agent-indexed data with a cosine-distance
//! regularizer, evaluated by interpolating or ensembling points sampled
//! from the compressed subspace.
//!
//! Everything is driven by explicit seeds; identical configurations
//! reproduce byte-identical outputs.

pub mod attack;
pub mod data;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod predict;
pub mod rng;

pub use attack::{AttackerConfig, TriggerPattern};
pub use data::{AgentDataset, JointDataset, LabeledExample, SplitConfig};
pub use defense::{EnsembleModel, IndexedModels, SubspaceConfig, SubspaceModel, TrainOptions};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, RunRecord};
pub use metrics::{EvalSet, MetricsReport};
pub use nn::{Batch, Dims, ModelSpec, OptimState, ParamVector};
pub use predict::Predictor;
