//! The three accuracy metrics and the game payoffs.
//!
//! Metric 1 is the attack success rate: poison-label accuracy on backdoored
//! inputs, measured per attacker against its own trigger. Metric 2 is
//! clean-label accuracy on clean inputs. Metric 3 is clean-label accuracy
//! on backdoored inputs, the quantity the defenses here maximize. The
//! attacker payoff is mean +/- std of the ASRs and the defender payoff is
//! its complement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::{apply_trigger, AttackerConfig, TriggerPattern};
use crate::data::JointDataset;
use crate::error::{Error, Result};
use crate::predict::Predictor;

/// A clean evaluation item, tagged with the agent that contributed it.
#[derive(Debug, Clone)]
pub struct CleanEvalItem {
    pub image: Vec<f64>,
    pub clean_label: usize,
    pub agent_id: usize,
}

/// A backdoored evaluation item: the originating attacker's trigger applied
/// to one of its reserved test inputs.
#[derive(Debug, Clone)]
pub struct BackdooredEvalItem {
    pub image: Vec<f64>,
    pub clean_label: usize,
    pub poison_label: usize,
}

/// Test-time evaluation sets.
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub clean: Vec<CleanEvalItem>,
    pub backdoored: BTreeMap<usize, Vec<BackdooredEvalItem>>,
}

impl EvalSet {
    /// Builds the evaluation sets from the attackers' reserved test splits:
    /// the clean set keeps the stored images and clean labels; each
    /// attacker's backdoored set applies that attacker's trigger to every
    /// one of its test inputs, recording the poison label.
    ///
    /// Build this before poisoning mutates the joint dataset so the clean
    /// set stays trigger-free.
    pub fn build(
        joint: &JointDataset,
        attacks: &[(AttackerConfig, TriggerPattern)],
    ) -> Result<EvalSet> {
        let mut clean = Vec::new();
        for agent in joint.agents.iter().skip(1) {
            for ex in &agent.test_examples {
                clean.push(CleanEvalItem {
                    image: ex.image.clone(),
                    clean_label: ex.clean_label,
                    agent_id: agent.agent_id,
                });
            }
        }
        let mut backdoored = BTreeMap::new();
        for (cfg, trigger) in attacks {
            let agent = joint.attacker(cfg.attacker_id)?;
            let items = agent
                .test_examples
                .iter()
                .map(|ex| {
                    Ok(BackdooredEvalItem {
                        image: apply_trigger(&ex.image, trigger)?,
                        clean_label: ex.clean_label,
                        poison_label: cfg.target_label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            backdoored.insert(cfg.attacker_id, items);
        }
        Ok(EvalSet { clean, backdoored })
    }

    pub fn attacker_ids(&self) -> Vec<usize> {
        self.backdoored.keys().copied().collect()
    }
}

/// Fraction of correct predictions against clean labels.
pub fn clean_accuracy(
    predictor: &dyn Predictor,
    images: &[&[f64]],
    clean_labels: &[usize],
    agent: Option<usize>,
) -> Result<f64> {
    if images.is_empty() || images.len() != clean_labels.len() {
        return Err(Error::UndefinedMetric(
            "clean accuracy needs a non-empty, consistent evaluation set".into(),
        ));
    }
    let predicted = predictor.predict_labels(images, agent)?;
    let correct = predicted
        .iter()
        .zip(clean_labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / images.len() as f64)
}

/// Attack success rate for one attacker: the fraction of its backdoored
/// test inputs classified as its poison label. With `exclude_collisions`
/// (the default elsewhere), examples whose clean label already equals the
/// poison label leave the denominator, so only genuine misclassification
/// counts.
pub fn attack_success_rate_with(
    predictor: &dyn Predictor,
    eval: &EvalSet,
    attacker_id: usize,
    exclude_collisions: bool,
) -> Result<f64> {
    let items = eval
        .backdoored
        .get(&attacker_id)
        .ok_or_else(|| Error::UndefinedMetric(format!("no eval set for attacker {attacker_id}")))?;
    let kept: Vec<&BackdooredEvalItem> = items
        .iter()
        .filter(|it| !exclude_collisions || it.clean_label != it.poison_label)
        .collect();
    if kept.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "attacker {attacker_id} has an empty backdoored evaluation set"
        )));
    }
    let images: Vec<&[f64]> = kept.iter().map(|it| it.image.as_slice()).collect();
    let predicted = predictor.predict_labels(&images, Some(attacker_id))?;
    let hits = predicted
        .iter()
        .zip(&kept)
        .filter(|(p, it)| **p == it.poison_label)
        .count();
    Ok(hits as f64 / kept.len() as f64)
}

/// [`attack_success_rate_with`] under the collision-exclusion rule.
pub fn attack_success_rate(
    predictor: &dyn Predictor,
    eval: &EvalSet,
    attacker_id: usize,
) -> Result<f64> {
    attack_success_rate_with(predictor, eval, attacker_id, true)
}

/// Mean, population standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PayoffStat {
    pub mean: f64,
    pub std: f64,
}

/// Attacker payoff (mean +/- std over ASRs) and the complementary defender
/// payoff.
pub fn payoffs(per_attacker_asr: &BTreeMap<usize, f64>) -> Result<(PayoffStat, PayoffStat)> {
    if per_attacker_asr.is_empty() {
        return Err(Error::UndefinedMetric("payoffs need at least one attacker".into()));
    }
    let values: Vec<f64> = per_attacker_asr.values().copied().collect();
    let (mean, std) = mean_std(&values);
    Ok((
        PayoffStat { mean, std },
        PayoffStat {
            mean: 1.0 - mean,
            std,
        },
    ))
}

/// The full per-run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Metric 1 per attacker.
    pub per_attacker_asr: BTreeMap<usize, f64>,
    /// Metric 2.
    pub clean_acc_clean_inputs: f64,
    /// Metric 3 per attacker.
    pub per_attacker_clean_acc_backdoored: BTreeMap<usize, f64>,
    pub clean_acc_backdoored: PayoffStat,
    pub attacker_payoff: PayoffStat,
    pub defender_payoff: PayoffStat,
}

impl MetricsReport {
    /// Evaluates all three metrics and the payoffs for one predictor.
    pub fn compute(
        predictor: &dyn Predictor,
        eval: &EvalSet,
        exclude_collisions: bool,
    ) -> Result<MetricsReport> {
        let mut per_attacker_asr = BTreeMap::new();
        let mut per_attacker_clean = BTreeMap::new();
        for &attacker in eval.backdoored.keys() {
            per_attacker_asr.insert(
                attacker,
                attack_success_rate_with(predictor, eval, attacker, exclude_collisions)?,
            );
            let items = &eval.backdoored[&attacker];
            let images: Vec<&[f64]> = items.iter().map(|it| it.image.as_slice()).collect();
            let labels: Vec<usize> = items.iter().map(|it| it.clean_label).collect();
            per_attacker_clean.insert(
                attacker,
                clean_accuracy(predictor, &images, &labels, Some(attacker))?,
            );
        }

        // metric 2: clean inputs, routed per contributing agent
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut by_agent: BTreeMap<usize, Vec<&CleanEvalItem>> = BTreeMap::new();
        for item in &eval.clean {
            by_agent.entry(item.agent_id).or_default().push(item);
        }
        for (agent, items) in by_agent {
            let images: Vec<&[f64]> = items.iter().map(|it| it.image.as_slice()).collect();
            let predicted = predictor.predict_labels(&images, Some(agent))?;
            correct += predicted
                .iter()
                .zip(&items)
                .filter(|(p, it)| **p == it.clean_label)
                .count();
            total += items.len();
        }
        if total == 0 {
            return Err(Error::UndefinedMetric("empty clean evaluation set".into()));
        }

        let (attacker_payoff, defender_payoff) = payoffs(&per_attacker_asr)?;
        let clean_values: Vec<f64> = per_attacker_clean.values().copied().collect();
        let (cb_mean, cb_std) = mean_std(&clean_values);
        Ok(MetricsReport {
            per_attacker_asr,
            clean_acc_clean_inputs: correct as f64 / total as f64,
            per_attacker_clean_acc_backdoored: per_attacker_clean,
            clean_acc_backdoored: PayoffStat {
                mean: cb_mean,
                std: cb_std,
            },
            attacker_payoff,
            defender_payoff,
        })
    }

    pub fn asr_mean(&self) -> f64 {
        self.attacker_payoff.mean
    }

    /// CSV header matching [`MetricsReport::to_csv_row`].
    pub fn csv_header() -> &'static str {
        "run_id,defense,n,p,epsilon,seed,asr_mean,asr_std,clean_acc_clean,clean_acc_backdoored_mean,clean_acc_backdoored_std"
    }

    /// One flat CSV row for result tables.
    pub fn to_csv_row(
        &self,
        run_id: &str,
        defense: &str,
        n: usize,
        p: f64,
        epsilon: f64,
        seed: u64,
    ) -> String {
        format!(
            "{run_id},{defense},{n},{p},{epsilon},{seed},{},{},{},{},{}",
            self.attacker_payoff.mean,
            self.attacker_payoff.std,
            self.clean_acc_clean_inputs,
            self.clean_acc_backdoored.mean,
            self.clean_acc_backdoored.std,
        )
    }
}

/// Per-attacker gap between metric 3 and the uniform-random limit 1/k.
/// Near-zero gaps diagnose full backfire; large positive gaps diagnose
/// clean-label recovery.
pub fn backfire_gap(report: &MetricsReport, num_classes: usize) -> BTreeMap<usize, f64> {
    report
        .per_attacker_clean_acc_backdoored
        .iter()
        .map(|(&a, &acc)| (a, acc - 1.0 / num_classes as f64))
        .collect()
}
