//! Defense-agnostic prediction.
//!
//! Metrics see every defense through the [`Predictor`] trait: a plain
//! model, the indexed-model router, the subspace centre or ensemble, a deep
//! ensemble, or the uniform-random reference predictor used to calibrate
//! the measurement harness.

use std::collections::BTreeMap;

use crate::defense::subspace::{eval_subspace, sample_alphas, SubspaceModel};
use crate::defense::{EnsembleModel, IndexedModels};
use crate::error::{Error, Result};
use crate::nn::{forward, uniform_alphas, Batch, ModelSpec, ParamVector};

/// Class-probability prediction over a batch of images. `agent` carries the
/// index of the agent the query is attributed to, for defenses that route
/// by identity.
pub trait Predictor {
    fn predict_probs(&self, images: &[&[f64]], agent: Option<usize>) -> Result<Vec<f64>>;
    fn num_classes(&self) -> usize;

    /// Argmax labels (first maximum wins, deterministically).
    fn predict_labels(&self, images: &[&[f64]], agent: Option<usize>) -> Result<Vec<usize>> {
        let k = self.num_classes();
        let probs = self.predict_probs(images, agent)?;
        Ok(probs.chunks(k).map(argmax).collect())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn batch_of(images: &[&[f64]]) -> Result<Batch> {
    Batch::from_images(images, &vec![0; images.len()])
}

/// A single trained model.
pub struct PlainPredictor {
    pub spec: ModelSpec,
    pub params: ParamVector,
}

impl Predictor for PlainPredictor {
    fn predict_probs(&self, images: &[&[f64]], _agent: Option<usize>) -> Result<Vec<f64>> {
        forward(&self.spec, &self.params, &batch_of(images)?)
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }
}

/// Routes each query to the model indexed by the requesting agent.
pub struct IndexedPredictor {
    pub spec: ModelSpec,
    pub per_agent: BTreeMap<usize, ParamVector>,
}

impl IndexedPredictor {
    pub fn new(models: IndexedModels) -> Self {
        IndexedPredictor {
            spec: models.spec,
            per_agent: models.per_agent,
        }
    }
}

impl Predictor for IndexedPredictor {
    fn predict_probs(&self, images: &[&[f64]], agent: Option<usize>) -> Result<Vec<f64>> {
        let agent = agent.ok_or_else(|| {
            Error::config("indexed-model inference requires the requesting agent's index")
        })?;
        let params = self
            .per_agent
            .get(&agent)
            .ok_or_else(|| Error::config(format!("no indexed model for agent {agent}")))?;
        forward(&self.spec, params, &batch_of(images)?)
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }
}

/// The subspace centre point-estimate.
pub struct SubspaceCentrePredictor {
    spec: ModelSpec,
    centre: ParamVector,
}

impl SubspaceCentrePredictor {
    pub fn new(model: &SubspaceModel) -> Result<Self> {
        Ok(SubspaceCentrePredictor {
            spec: model.spec.clone(),
            centre: model.centre()?,
        })
    }
}

impl Predictor for SubspaceCentrePredictor {
    fn predict_probs(&self, images: &[&[f64]], _agent: Option<usize>) -> Result<Vec<f64>> {
        forward(&self.spec, &self.centre, &batch_of(images)?)
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }
}

/// Ensembles softmax outputs over coefficient vectors sampled once at
/// construction, so repeated queries are deterministic and consistent.
pub struct SubspaceEnsemblePredictor {
    model: SubspaceModel,
    alphas: Vec<Vec<f64>>,
}

impl SubspaceEnsemblePredictor {
    pub fn new(model: SubspaceModel, num_samples: usize, seed: u64) -> Self {
        let alphas = sample_alphas(
            model.endpoints.len(),
            num_samples.max(1),
            seed,
            model.config.cone_sampling,
        );
        SubspaceEnsemblePredictor { model, alphas }
    }
}

impl Predictor for SubspaceEnsemblePredictor {
    fn predict_probs(&self, images: &[&[f64]], _agent: Option<usize>) -> Result<Vec<f64>> {
        crate::defense::subspace::ensemble_predict_with_alphas(&self.model, images, &self.alphas)
    }

    fn num_classes(&self) -> usize {
        self.model.spec.num_classes
    }
}

/// Mean softmax over independently trained members.
pub struct DeepEnsemblePredictor {
    pub model: EnsembleModel,
}

impl Predictor for DeepEnsemblePredictor {
    fn predict_probs(&self, images: &[&[f64]], _agent: Option<usize>) -> Result<Vec<f64>> {
        let batch = batch_of(images)?;
        let k = self.model.spec.num_classes;
        let mut acc = vec![0.0; images.len() * k];
        for member in &self.model.members {
            let probs = forward(&self.model.spec, member, &batch)?;
            for (a, p) in acc.iter_mut().zip(probs) {
                *a += p;
            }
        }
        let inv = 1.0 / self.model.members.len() as f64;
        for a in acc.iter_mut() {
            *a *= inv;
        }
        Ok(acc)
    }

    fn num_classes(&self) -> usize {
        self.model.spec.num_classes
    }
}

/// Evaluate a subspace at fixed coefficients through the predictor interface.
pub struct SubspacePointPredictor {
    pub model: SubspaceModel,
    pub alphas: Vec<f64>,
}

impl Predictor for SubspacePointPredictor {
    fn predict_probs(&self, images: &[&[f64]], _agent: Option<usize>) -> Result<Vec<f64>> {
        eval_subspace(&self.model, images, &self.alphas)
    }

    fn num_classes(&self) -> usize {
        self.model.spec.num_classes
    }
}

impl SubspacePointPredictor {
    pub fn centre(model: SubspaceModel) -> Self {
        let n = model.endpoints.len();
        SubspacePointPredictor {
            model,
            alphas: uniform_alphas(n),
        }
    }
}

/// splitmix64-style avalanche.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// The backfire limit object: predicts a label sampled uniformly per input,
/// deterministically derived from the image bits and the seed. Calibrates
/// the measurement harness.
pub struct UniformRandomPredictor {
    pub num_classes: usize,
    pub seed: u64,
}

impl Predictor for UniformRandomPredictor {
    fn predict_probs(&self, images: &[&[f64]], _agent: Option<usize>) -> Result<Vec<f64>> {
        let k = self.num_classes;
        let mut probs = vec![0.0; images.len() * k];
        for (i, img) in images.iter().enumerate() {
            let mut h = self.seed ^ 0x9E3779B97F4A7C15;
            for &px in img.iter() {
                h = mix(h ^ px.to_bits());
            }
            probs[i * k + (mix(h) % k as u64) as usize] = 1.0;
        }
        Ok(probs)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Always predicts one fixed label.
pub struct ConstantPredictor {
    pub num_classes: usize,
    pub label: usize,
}

impl Predictor for ConstantPredictor {
    fn predict_probs(&self, images: &[&[f64]], _agent: Option<usize>) -> Result<Vec<f64>> {
        let mut probs = vec![0.0; images.len() * self.num_classes];
        for row in probs.chunks_mut(self.num_classes) {
            row[self.label] = 1.0;
        }
        Ok(probs)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}
