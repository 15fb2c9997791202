//! End-to-end experiment orchestration.
//!
//! A JSON [`ExperimentConfig`] drives the full pipeline: build or load the
//! dataset, partition it, run the seeded attackers, train the chosen
//! defense, evaluate the three metrics, and write machine-readable outputs
//! (metrics.json, a metrics.csv row, and subspace trace CSVs). Identical
//! configs produce byte-identical metrics.json files; the `SB_THREADS`
//! environment variable caps subspace worker threads (absent means the
//! single-threaded reference mode, which parallel mode matches bit-exactly).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{generate_trigger, poison_dataset, AttackerConfig, TriggerPattern};
use crate::data::{self, JointDataset, SplitConfig};
use crate::defense::{
    self, subspace::SubspaceModel, train_plain, SubspaceConfig, TrainOptions,
};
use crate::error::{Error, Result};
use crate::metrics::{EvalSet, MetricsReport};
use crate::nn::{Dims, ModelSpec};
use crate::predict::{
    DeepEnsemblePredictor, IndexedPredictor, PlainPredictor, Predictor,
    SubspaceEnsemblePredictor,
};
use crate::rng::{self, stream};

/// Where the data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        per_class: usize,
        dims: Dims,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Cifar10 {
        path: PathBuf,
    },
}

/// Which defense the defender deploys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    None,
    AgentSubspace(SubspaceConfig),
    AgentIndexing,
    AgentAugmentation {
        #[serde(default = "default_n_simulated")]
        n_simulated: usize,
        #[serde(default = "default_p_sim")]
        p_sim: f64,
        #[serde(default = "default_p_sim")]
        eps_sim: f64,
    },
    BackdoorAdvTraining,
    SpectralSignatures {
        #[serde(default = "default_top_k")]
        top_k: usize,
    },
    DeepEnsembles {
        /// Defaults to the number of attackers.
        members: Option<usize>,
    },
}

fn default_n_simulated() -> usize {
    200
}
fn default_p_sim() -> f64 {
    0.2
}
fn default_top_k() -> usize {
    5
}

impl DefenseConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseConfig::None => "none",
            DefenseConfig::AgentSubspace(_) => "agent_subspace",
            DefenseConfig::AgentIndexing => "agent_indexing",
            DefenseConfig::AgentAugmentation { .. } => "agent_augmentation",
            DefenseConfig::BackdoorAdvTraining => "backdoor_adv_training",
            DefenseConfig::SpectralSignatures { .. } => "spectral_signatures",
            DefenseConfig::DeepEnsembles { .. } => "deep_ensembles",
        }
    }
}

/// The experiment-level knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub num_attackers: usize,
    /// Fraction of the pool allocated to the defender.
    #[serde(rename = "v_d", default = "default_v_d")]
    pub defender_fraction: f64,
    /// Per-attacker poison rate.
    #[serde(rename = "p", default = "default_rate")]
    pub poison_rate: f64,
    /// Trigger perturbation rate.
    #[serde(default = "default_rate")]
    pub epsilon: f64,
    #[serde(default = "default_defense")]
    pub defense: DefenseConfig,
    pub model: ModelSpec,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainOptions,
    /// Count clean==poison label collisions in ASR denominators.
    #[serde(default)]
    pub asr_include_collisions: bool,
}

fn default_v_d() -> f64 {
    0.1
}
fn default_rate() -> f64 {
    0.4
}
fn default_defense() -> DefenseConfig {
    DefenseConfig::None
}
fn default_seed() -> u64 {
    3407
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.num_attackers == 0 {
            return Err(Error::config("num_attackers must be at least 1"));
        }
        let needs_two = matches!(
            self.defense,
            DefenseConfig::AgentSubspace(_) | DefenseConfig::AgentIndexing
        );
        if needs_two && self.num_attackers < 2 {
            return Err(Error::config(format!(
                "defense {} needs at least 2 attackers",
                self.defense.name()
            )));
        }
        if !(self.defender_fraction > 0.0 && self.defender_fraction < 1.0) {
            return Err(Error::config("v_d must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.poison_rate) || !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config("p and epsilon must lie in [0, 1]"));
        }
        if let DefenseConfig::AgentSubspace(sub) = &self.defense {
            sub.validate()?;
        }
        if let DatasetConfig::Synthetic { classes, dims, .. } = &self.dataset {
            if *classes != self.model.num_classes {
                return Err(Error::config(
                    "synthetic classes must match the model's num_classes",
                ));
            }
            if *dims != self.model.input_dims {
                return Err(Error::config(
                    "synthetic dims must match the model's input_dims",
                ));
            }
        }
        Ok(())
    }

    /// Stable hash of the canonical serialization: independent of JSON key
    /// order and platform.
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        // serde_json maps are ordered, so to_string is canonical
        let canonical = serde_json::to_string(&value).expect("canonical json");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-run output record.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub defense: String,
    pub num_attackers: usize,
    pub metrics: MetricsReport,
    pub wall_time_secs: f64,
    pub trace_paths: Vec<PathBuf>,
}

/// Everything a caller may want to inspect after a run.
pub struct RunArtifacts {
    pub record: RunRecord,
    pub subspace: Option<SubspaceModel>,
    pub eval: EvalSet,
}

/// Worker-thread cap from SB_THREADS; absent means single-threaded
/// reference mode.
pub fn worker_count() -> usize {
    std::env::var("SB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map(|v| v.max(1))
        .unwrap_or(1)
}

fn build_pool(cfg: &ExperimentConfig) -> Result<(Vec<crate::data::LabeledExample>, Dims, usize)> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            per_class,
            dims,
        } => {
            let examples = data::generate_synthetic(*classes, *per_class, *dims, cfg.seed)?;
            Ok((examples, *dims, *classes))
        }
        DatasetConfig::Idx { images, labels } => {
            let loaded = data::load_idx_images(images, labels)?;
            Ok((loaded.examples, loaded.dims, loaded.num_classes))
        }
        DatasetConfig::Cifar10 { path } => {
            let loaded = data::load_cifar10_binary(path)?;
            Ok((loaded.examples, loaded.dims, loaded.num_classes))
        }
    }
}

/// Runs the full pipeline in memory, returning the artifacts.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    execute_with_workers(cfg, worker_count())
}

/// [`execute`] with an explicit worker cap for subspace training.
pub fn execute_with_workers(cfg: &ExperimentConfig, workers: usize) -> Result<RunArtifacts> {
    cfg.validate()?;
    let start = Instant::now();

    // data stage
    let (pool, dims, num_classes) = build_pool(cfg).map_err(|e| e.in_stage("data"))?;
    if dims != cfg.model.input_dims || num_classes != cfg.model.num_classes {
        return Err(Error::config(format!(
            "dataset geometry {dims:?}/{num_classes} does not match model {:?}/{}",
            cfg.model.input_dims, cfg.model.num_classes
        ))
        .in_stage("data"));
    }
    let split = SplitConfig {
        seed: cfg.seed,
        ..SplitConfig::default()
    };
    let mut joint = data::partition(
        pool,
        dims,
        num_classes,
        cfg.num_attackers,
        cfg.defender_fraction,
        &split,
    )
    .map_err(|e| e.in_stage("data"))?;

    // attack stage: per-attacker seeded triggers, eval sets snapshotted
    // before poisoning so clean inputs stay trigger-free
    let attacks: Vec<(AttackerConfig, TriggerPattern)> = (1..=cfg.num_attackers)
        .map(|i| -> Result<_> {
            let acfg = AttackerConfig::seeded(i, cfg.epsilon, cfg.poison_rate, num_classes)?;
            let trigger = generate_trigger(&acfg, dims);
            Ok((acfg, trigger))
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| e.in_stage("attack"))?;
    let eval = EvalSet::build(&joint, &attacks).map_err(|e| e.in_stage("attack"))?;
    for (acfg, trigger) in &attacks {
        poison_dataset(joint.attacker_mut(acfg.attacker_id)?, acfg, trigger)
            .map_err(|e| e.in_stage("attack"))?;
    }

    // train stage
    let (predictor, subspace) =
        train_defense(cfg, &joint, workers).map_err(|e| e.in_stage("train"))?;

    // eval stage
    let metrics = MetricsReport::compute(
        predictor.as_ref(),
        &eval,
        !cfg.asr_include_collisions,
    )
    .map_err(|e| e.in_stage("eval"))?;

    let record = RunRecord {
        config_hash: cfg.config_hash(),
        defense: cfg.defense.name().to_string(),
        num_attackers: cfg.num_attackers,
        metrics,
        wall_time_secs: start.elapsed().as_secs_f64(),
        trace_paths: Vec::new(),
    };
    Ok(RunArtifacts {
        record,
        subspace,
        eval,
    })
}

fn train_defense(
    cfg: &ExperimentConfig,
    joint: &JointDataset,
    workers: usize,
) -> Result<(Box<dyn Predictor>, Option<SubspaceModel>)> {
    let spec = &cfg.model;
    match &cfg.defense {
        DefenseConfig::None => {
            let run = train_plain(spec, joint, &cfg.train, cfg.seed)?;
            Ok((
                Box::new(PlainPredictor {
                    spec: spec.clone(),
                    params: run.params,
                }),
                None,
            ))
        }
        DefenseConfig::AgentSubspace(sub) => {
            let model =
                defense::train_subspace_with_workers(spec, joint, sub, cfg.seed, workers)?;
            let predictor = SubspaceEnsemblePredictor::new(
                model.clone(),
                sub.ensemble_samples,
                rng::derive(cfg.seed, stream::ALPHA_SAMPLE),
            );
            Ok((Box::new(predictor), Some(model)))
        }
        DefenseConfig::AgentIndexing => {
            let models = defense::train_agent_indexing(spec, joint, &cfg.train, cfg.seed)?;
            Ok((Box::new(IndexedPredictor::new(models)), None))
        }
        DefenseConfig::AgentAugmentation {
            n_simulated,
            p_sim,
            eps_sim,
        } => {
            let augmented = defense::agent_augment(
                &joint.defender().train_examples,
                joint.dims,
                joint.num_classes,
                *n_simulated,
                *p_sim,
                *eps_sim,
                cfg.seed,
                cfg.num_attackers + 1,
            )?;
            let mut modified = joint.clone();
            modified.agents[0].train_examples = augmented;
            let run = train_plain(spec, &modified, &cfg.train, cfg.seed)?;
            Ok((
                Box::new(PlainPredictor {
                    spec: spec.clone(),
                    params: run.params,
                }),
                None,
            ))
        }
        DefenseConfig::BackdoorAdvTraining => {
            let augmented = defense::backdoor_adversarial_training_augment(
                &joint.defender().train_examples,
                joint.dims,
                joint.num_classes,
                cfg.seed,
                cfg.num_attackers + 1,
            )?;
            let mut modified = joint.clone();
            modified.agents[0].train_examples = augmented;
            let run = train_plain(spec, &modified, &cfg.train, cfg.seed)?;
            Ok((
                Box::new(PlainPredictor {
                    spec: spec.clone(),
                    params: run.params,
                }),
                None,
            ))
        }
        DefenseConfig::SpectralSignatures { top_k } => {
            let filtered =
                defense::spectral_signature_filter(spec, joint, &cfg.train, cfg.seed, *top_k)?;
            let run = train_plain(spec, &filtered, &cfg.train, cfg.seed)?;
            Ok((
                Box::new(PlainPredictor {
                    spec: spec.clone(),
                    params: run.params,
                }),
                None,
            ))
        }
        DefenseConfig::DeepEnsembles { members } => {
            let m = members.unwrap_or(cfg.num_attackers).max(1);
            let model = defense::train_deep_ensemble(spec, joint, m, &cfg.train, cfg.seed)?;
            Ok((Box::new(DeepEnsemblePredictor { model }), None))
        }
    }
}

/// Writes content to `path` atomically (write-temp-then-rename).
pub fn write_atomic(path: &Path, content: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs the pipeline and writes metrics.json, metrics.csv, run_record.json,
/// and (for trace-producing defenses) the trace CSVs into `output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let mut artifacts = execute(cfg)?;
    if let Some(dir) = &cfg.output_dir {
        artifacts.record.trace_paths = emit_outputs(cfg, &mut artifacts, dir)?;
    }
    Ok(artifacts.record)
}

fn emit_outputs(
    cfg: &ExperimentConfig,
    artifacts: &mut RunArtifacts,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let metrics_json = serde_json::to_string_pretty(&artifacts.record.metrics)?;
    write_atomic(&dir.join("metrics.json"), metrics_json.as_bytes())?;

    let run_id = &artifacts.record.config_hash[..12];
    let csv = format!(
        "{}\n{}\n",
        MetricsReport::csv_header(),
        artifacts.record.metrics.to_csv_row(
            run_id,
            cfg.defense.name(),
            cfg.num_attackers,
            cfg.poison_rate,
            cfg.epsilon,
            cfg.seed,
        )
    );
    write_atomic(&dir.join("metrics.csv"), csv.as_bytes())?;

    let mut trace_paths = Vec::new();
    if let Some(model) = &artifacts.subspace {
        trace_paths = emit_traces(model, &artifacts.eval, dir)?;
    }

    let record_json = serde_json::to_string_pretty(&artifacts.record)?;
    write_atomic(&dir.join("run_record.json"), record_json.as_bytes())?;
    Ok(trace_paths)
}

/// Writes the subspace training trace (per epoch and end-point) and the
/// per-checkpoint centre/ensemble accuracy curves. No-op with a notice when
/// the run produced no trace.
pub fn emit_traces(model: &SubspaceModel, eval: &EvalSet, dir: &Path) -> Result<Vec<PathBuf>> {
    if model.trace.is_empty() {
        log::info!("no trace to emit: the run's defense produced none");
        return Ok(Vec::new());
    }
    fs::create_dir_all(dir)?;
    let mut out = String::from("epoch,endpoint,task_loss,mean_pairwise_cos_distance\n");
    for row in &model.trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.endpoint, row.task_loss, row.mean_pairwise_cos_distance
        ));
    }
    let trace_path = dir.join("subspace_trace.csv");
    write_atomic(&trace_path, out.as_bytes())?;

    let mut acc = String::from("epoch,centre_clean_acc_backdoored,ensemble_clean_acc_backdoored\n");
    for (epoch, endpoints) in &model.checkpoints {
        let snapshot = SubspaceModel {
            spec: model.spec.clone(),
            config: model.config.clone(),
            endpoints: endpoints.clone(),
            trace: Vec::new(),
            checkpoints: Vec::new(),
        };
        let centre = checkpoint_accuracy(&snapshot, eval, None)?;
        let ensemble = checkpoint_accuracy(
            &snapshot,
            eval,
            Some(model.config.checkpoint_ensemble_samples),
        )?;
        acc.push_str(&format!("{epoch},{centre},{ensemble}\n"));
    }
    let acc_path = dir.join("subspace_accuracy.csv");
    write_atomic(&acc_path, acc.as_bytes())?;
    Ok(vec![trace_path, acc_path])
}

/// Mean clean-label accuracy over all attackers' backdoored sets, at the
/// centre (samples = None) or ensembled.
fn checkpoint_accuracy(
    model: &SubspaceModel,
    eval: &EvalSet,
    samples: Option<usize>,
) -> Result<f64> {
    let mut accs = Vec::new();
    for items in eval.backdoored.values() {
        let images: Vec<&[f64]> = items.iter().map(|it| it.image.as_slice()).collect();
        let probs = match samples {
            None => defense::eval_subspace(
                model,
                &images,
                &crate::nn::uniform_alphas(model.endpoints.len()),
            )?,
            Some(s) => defense::subspace_ensemble_predict(model, &images, s, 17)?,
        };
        let k = model.spec.num_classes;
        let correct = probs
            .chunks(k)
            .zip(items)
            .filter(|(row, it)| crate::predict::argmax(row) == it.clean_label)
            .count();
        accs.push(correct as f64 / items.len() as f64);
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// The sweep axes mirroring the result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Vary the number of attackers.
    N,
    /// Vary p = epsilon jointly.
    PEpsilon,
    /// Vary the defense (values are defense names).
    Defense,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" | "n" => Ok(SweepAxis::N),
            "p_epsilon" => Ok(SweepAxis::PEpsilon),
            "defense" => Ok(SweepAxis::Defense),
            other => Err(Error::config(format!("unknown sweep axis {other}"))),
        }
    }
}

/// One sweep entry: the axis value and the run outcome (errors recorded,
/// sweep continues).
#[derive(Debug, Serialize)]
pub struct SweepEntry {
    pub value: String,
    pub ok: bool,
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<RunRecord>,
}

fn defense_from_name(name: &str) -> Result<DefenseConfig> {
    Ok(match name {
        "none" => DefenseConfig::None,
        "agent_subspace" => DefenseConfig::AgentSubspace(SubspaceConfig::default()),
        "agent_indexing" => DefenseConfig::AgentIndexing,
        "agent_augmentation" => DefenseConfig::AgentAugmentation {
            n_simulated: default_n_simulated(),
            p_sim: default_p_sim(),
            eps_sim: default_p_sim(),
        },
        "backdoor_adv_training" => DefenseConfig::BackdoorAdvTraining,
        "spectral_signatures" => DefenseConfig::SpectralSignatures {
            top_k: default_top_k(),
        },
        "deep_ensembles" => DefenseConfig::DeepEnsembles { members: None },
        other => return Err(Error::config(format!("unknown defense {other}"))),
    })
}

/// Runs one configuration per axis value (derived seeds base + index) and
/// writes a combined CSV table. Per-run errors are recorded and the sweep
/// continues.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepEntry>> {
    let mut entries = Vec::new();
    for (index, value) in values.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.seed = base.seed + index as u64;
        let applied: Result<()> = (|| {
            match axis {
                SweepAxis::N => {
                    cfg.num_attackers = value
                        .parse::<usize>()
                        .map_err(|_| Error::config(format!("bad attacker count {value}")))?;
                }
                SweepAxis::PEpsilon => {
                    let v = value
                        .parse::<f64>()
                        .map_err(|_| Error::config(format!("bad rate {value}")))?;
                    cfg.poison_rate = v;
                    cfg.epsilon = v;
                }
                SweepAxis::Defense => {
                    cfg.defense = defense_from_name(value)?;
                }
            }
            Ok(())
        })();
        if let Some(dir) = &base.output_dir {
            cfg.output_dir = Some(dir.join(format!("sweep_{index}_{value}")));
        }
        let outcome = applied.and_then(|_| run(&cfg));
        entries.push(match outcome {
            Ok(record) => SweepEntry {
                value: value.clone(),
                ok: true,
                error: None,
                record: Some(record),
            },
            Err(err) => SweepEntry {
                value: value.clone(),
                ok: false,
                error: Some(err.to_string()),
                record: None,
            },
        });
    }
    if let Some(dir) = &base.output_dir {
        let mut csv = format!("axis_value,{}\n", MetricsReport::csv_header());
        for entry in &entries {
            if let Some(record) = &entry.record {
                csv.push_str(&format!(
                    "{},{}\n",
                    entry.value,
                    record.metrics.to_csv_row(
                        &record.config_hash[..12],
                        &record.defense,
                        record.num_attackers,
                        base.poison_rate,
                        base.epsilon,
                        base.seed,
                    )
                ));
            }
        }
        write_atomic(&dir.join("sweep.csv"), csv.as_bytes())?;
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(defense: DefenseConfig) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                classes: 10,
                per_class: 30,
                dims: (8, 8, 1),
            },
            num_attackers: 2,
            defender_fraction: 0.1,
            poison_rate: 0.4,
            epsilon: 0.4,
            defense,
            model: ModelSpec::dense((8, 8, 1), vec![8], 10),
            seed: 3407,
            output_dir: None,
            train: TrainOptions {
                epochs: 5,
                patience: None,
                ..TrainOptions::default()
            },
            asr_include_collisions: false,
        }
    }

    #[test]
    fn config_hash_is_key_order_independent() {
        let a = r#"{
            "dataset": {"kind": "synthetic", "classes": 10, "per_class": 30, "dims": [8, 8, 1]},
            "num_attackers": 2,
            "model": {"input_dims": [8, 8, 1], "hidden_layers": [8], "num_classes": 10},
            "seed": 7
        }"#;
        let b = r#"{
            "seed": 7,
            "model": {"num_classes": 10, "hidden_layers": [8], "input_dims": [8, 8, 1]},
            "num_attackers": 2,
            "dataset": {"per_class": 30, "dims": [8, 8, 1], "classes": 10, "kind": "synthetic"}
        }"#;
        let ca = ExperimentConfig::from_json(a).unwrap().config_hash();
        let cb = ExperimentConfig::from_json(b).unwrap().config_hash();
        assert_eq!(ca, cb);
        assert_eq!(ca.len(), 64);
    }

    #[test]
    fn config_defaults_follow_protocol() {
        let json = r#"{
            "dataset": {"kind": "synthetic", "classes": 10, "per_class": 30, "dims": [8, 8, 1]},
            "num_attackers": 2,
            "model": {"input_dims": [8, 8, 1], "hidden_layers": [8], "num_classes": 10}
        }"#;
        let cfg = ExperimentConfig::from_json(json).unwrap();
        assert_eq!(cfg.seed, 3407);
        assert_eq!(cfg.defender_fraction, 0.1);
        assert_eq!(cfg.poison_rate, 0.4);
        assert_eq!(cfg.epsilon, 0.4);
        assert!(matches!(cfg.defense, DefenseConfig::None));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config(DefenseConfig::None);
        cfg.num_attackers = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(DefenseConfig::AgentIndexing);
        cfg.num_attackers = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config(DefenseConfig::None);
        cfg.defender_fraction = 1.2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn run_outputs_are_byte_identical_across_reruns() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(DefenseConfig::None);
        cfg.output_dir = Some(dir.path().join("a"));
        run(&cfg).unwrap();
        cfg.output_dir = Some(dir.path().join("b"));
        run(&cfg).unwrap();
        let a = std::fs::read(dir.path().join("a/metrics.json")).unwrap();
        let b = std::fs::read(dir.path().join("b/metrics.json")).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b);
    }

    #[test]
    fn subspace_run_emits_traces() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(DefenseConfig::AgentSubspace(SubspaceConfig {
            epochs: 10,
            ensemble_samples: 20,
            checkpoint_ensemble_samples: 10,
            ..SubspaceConfig::default()
        }));
        cfg.output_dir = Some(dir.path().to_path_buf());
        let record = run(&cfg).unwrap();
        assert_eq!(record.trace_paths.len(), 2);
        let trace = std::fs::read_to_string(dir.path().join("subspace_trace.csv")).unwrap();
        // header + epochs * endpoints rows
        assert_eq!(trace.lines().count(), 1 + 10 * 2);
        let first_data = trace.lines().nth(1).unwrap();
        let dist: f64 = first_data.split(',').nth(3).unwrap().parse().unwrap();
        assert!(dist.abs() < 1e-12, "epoch-0 distance {dist}");
        let acc = std::fs::read_to_string(dir.path().join("subspace_accuracy.csv")).unwrap();
        assert!(acc.lines().count() > 1);
    }

    #[test]
    fn sweep_with_empty_values_is_vacuous() {
        let cfg = tiny_config(DefenseConfig::None);
        let entries = sweep(&cfg, SweepAxis::N, &[]).unwrap();
        assert!(entries.is_empty());
    }

    #[test]
    fn sweep_records_errors_and_continues() {
        let cfg = tiny_config(DefenseConfig::None);
        let entries = sweep(
            &cfg,
            SweepAxis::N,
            &["2".to_string(), "bogus".to_string(), "3".to_string()],
        )
        .unwrap();
        assert_eq!(entries.len(), 3);
        assert!(entries[0].ok);
        assert!(!entries[1].ok);
        assert!(entries[2].ok);
    }

    #[test]
    fn every_defense_kind_runs_end_to_end() {
        for defense in [
            DefenseConfig::AgentIndexing,
            DefenseConfig::AgentAugmentation {
                n_simulated: 4,
                p_sim: 0.5,
                eps_sim: 0.4,
            },
            DefenseConfig::BackdoorAdvTraining,
            DefenseConfig::SpectralSignatures { top_k: 1 },
            DefenseConfig::DeepEnsembles { members: Some(2) },
        ] {
            let cfg = tiny_config(defense);
            let artifacts = execute(&cfg).unwrap();
            let m = &artifacts.record.metrics;
            assert!(m.per_attacker_asr.len() == 2);
            assert!(
                (m.attacker_payoff.mean + m.defender_payoff.mean - 1.0).abs() < 1e-12,
                "complementarity violated for {}",
                artifacts.record.defense
            );
        }
    }
}
