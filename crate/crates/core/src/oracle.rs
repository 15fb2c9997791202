//! Numeric oracle for the scalar-model interpolation argument.
//!
//! The scalar model `f(x; theta) = theta * x` couples two parameters
//! through a distance-regularized loss
//! `L(theta_i) = (theta_i x_i - y_i_poison) + (theta_i - theta_j)^2`:
//! each parameter's converged value is a root of that quadratic given the
//! other, found here by alternating substitution. Interpolating between the
//! fixed-point parameters and comparing absolute residuals against the
//! clean and poison labels measures, over a seeded population of instances,
//! how often the label of the end-point that never fit the evaluated pair
//! wins as the interpolation weight approaches it.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// One sampled scalar instance.
#[derive(Debug, Clone, Serialize)]
pub struct ScalarInstance {
    pub x_i: f64,
    pub x_j: f64,
    pub y_i_clean: f64,
    pub y_i_poison: f64,
    pub y_j_poison: f64,
    pub seed: u64,
}

/// The distance-regularized scalar loss whose roots define the end-points.
pub fn regularized_loss(theta: f64, x: f64, y_poison: f64, other: f64) -> f64 {
    (theta * x - y_poison) + (theta - other) * (theta - other)
}

/// Discriminant of `regularized_loss(theta, x, y, other) = 0` viewed as a
/// quadratic in `theta`.
fn discriminant(x: f64, y_poison: f64, other: f64) -> f64 {
    x * x - 4.0 * x * other + 4.0 * y_poison
}

/// Both roots of the regularized loss for one parameter given the other,
/// `theta = ((2 other - x) +/- sqrt(disc)) / 2`; `None` when complex.
pub fn loss_roots(x: f64, y_poison: f64, other: f64) -> Option<[f64; 2]> {
    let d = discriminant(x, y_poison, other);
    if d < 0.0 {
        return None;
    }
    let s = d.sqrt();
    let base = 2.0 * other - x;
    Some([(base + s) / 2.0, (base - s) / 2.0])
}

/// Outcome of the alternating-substitution root search.
#[derive(Debug, Clone, PartialEq)]
pub enum RootOutcome {
    Converged {
        theta_i: f64,
        theta_j: f64,
        /// Both +/- roots for each parameter at the fixed point.
        candidates_i: [f64; 2],
        candidates_j: [f64; 2],
        iterations: usize,
    },
    /// A discriminant went negative: complex roots, instance rejected.
    ComplexDiscriminant,
    /// No branch combination reached the tolerance.
    NonConvergent,
}

const ROOT_TOL: f64 = 1e-12;
const ROOT_MAX_ITERS: usize = 500;

/// Finds a fixed-point-consistent root pair by alternating substitution,
/// trying each +/- branch combination in a fixed order.
pub fn regularized_roots(inst: &ScalarInstance) -> RootOutcome {
    let mut saw_complex = false;
    for (bi, bj) in [(0usize, 0usize), (0, 1), (1, 0), (1, 1)] {
        let mut theta_j = 0.0;
        let mut theta_i = 0.0;
        let mut converged = false;
        let mut iterations = 0;
        for it in 0..ROOT_MAX_ITERS {
            let ri = match loss_roots(inst.x_i, inst.y_i_poison, theta_j) {
                Some(r) => r,
                None => {
                    saw_complex = true;
                    break;
                }
            };
            let next_i = ri[bi];
            let rj = match loss_roots(inst.x_j, inst.y_j_poison, next_i) {
                Some(r) => r,
                None => {
                    saw_complex = true;
                    break;
                }
            };
            let next_j = rj[bj];
            if !next_i.is_finite() || !next_j.is_finite() {
                break;
            }
            let delta = (next_i - theta_i).abs().max((next_j - theta_j).abs());
            theta_i = next_i;
            theta_j = next_j;
            if delta < ROOT_TOL && it > 0 {
                converged = true;
                iterations = it + 1;
                break;
            }
        }
        if converged {
            let candidates_i =
                loss_roots(inst.x_i, inst.y_i_poison, theta_j).expect("converged branch");
            let candidates_j =
                loss_roots(inst.x_j, inst.y_j_poison, theta_i).expect("converged branch");
            return RootOutcome::Converged {
                theta_i,
                theta_j,
                candidates_i,
                candidates_j,
                iterations,
            };
        }
    }
    if saw_complex {
        RootOutcome::ComplexDiscriminant
    } else {
        RootOutcome::NonConvergent
    }
}

/// Residuals of the interpolated parameter `alpha theta_i + (1-alpha) theta_j`
/// on input `x_i` against the clean and poison labels.
pub fn interpolated_losses(
    inst: &ScalarInstance,
    theta_i: f64,
    theta_j: f64,
    alpha: f64,
) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidCoefficients(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    let theta = alpha * theta_i + (1.0 - alpha) * theta_j;
    let prediction = theta * inst.x_i;
    Ok((
        (prediction - inst.y_i_clean).abs(),
        (prediction - inst.y_i_poison).abs(),
    ))
}

/// Sweep configuration.
#[derive(Debug, Clone, Serialize)]
pub struct SweepConfig {
    pub num_instances: usize,
    pub seed: u64,
    pub alpha_grid: Vec<f64>,
    /// Premise margin: the rejected label must sit at least this many times
    /// the near residual away, and the far label likewise.
    pub margin: f64,
}

impl SweepConfig {
    pub fn new(num_instances: usize, seed: u64) -> Self {
        SweepConfig {
            num_instances,
            seed,
            alpha_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            margin: 5.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_instances < 100 {
            return Err(Error::config("sweep needs at least 100 instances"));
        }
        if self.alpha_grid.len() < 2
            || self
                .alpha_grid
                .iter()
                .any(|a| !(0.0..=1.0).contains(a))
        {
            return Err(Error::config("alpha grid must hold values in [0, 1]"));
        }
        if self.margin < 1.0 {
            return Err(Error::config("margin must be at least 1"));
        }
        Ok(())
    }
}

/// One instance's residual curves over the alpha grid.
#[derive(Debug, Clone, Serialize)]
pub struct InstanceSweep {
    pub instance_id: usize,
    pub instance: ScalarInstance,
    pub theta_i: f64,
    pub theta_j: f64,
    /// (alpha, loss_clean, loss_poison) triples in grid order.
    pub curve: Vec<(f64, f64, f64)>,
    pub clean_wins_at_high_alpha: bool,
    pub crossover_alpha: Option<f64>,
    pub degenerate: bool,
}

/// Aggregate sweep result.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub accepted: usize,
    pub degenerate: usize,
    pub rejected_complex: usize,
    pub rejected_nonconvergent: usize,
    pub rejected_premises: usize,
    /// Fraction of non-degenerate instances whose clean residual is
    /// strictly smaller at every grid point with alpha >= 0.9.
    pub clean_wins_fraction: f64,
    /// Wilson 95% confidence interval for the fraction.
    pub clean_wins_ci95: (f64, f64),
    pub mean_crossover_alpha: Option<f64>,
    pub max_root_residual: f64,
}

/// Full sweep output: summary plus per-instance curves.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub summary: SweepSummary,
    pub instances: Vec<InstanceSweep>,
}

fn wilson_ci(p: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.96;
    let nf = n as f64;
    let denom = 1.0 + z * z / nf;
    let centre = (p + z * z / (2.0 * nf)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Samples instances under the premise margins and sweeps the interpolation.
///
/// Instance construction mirrors the agent-indexed training construction:
/// each root fits its own (input, trained-label) pair, and the evaluated
/// input's clean label is placed one near-residual away from the prediction
/// of the *other* parameter, the one that never fit the evaluated pair. The
/// sweep therefore interpolates with alpha weighting that trigger-free
/// parameter, so "clean residual wins as alpha -> 1" is exactly the
/// compressed-subspace claim under test. Instances whose discriminant goes
/// complex, whose substitution does not converge, or that miss the premise
/// margins are resampled and counted.
pub fn theorem1_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let mut rejected_complex = 0usize;
    let mut rejected_nonconvergent = 0usize;
    let mut rejected_premises = 0usize;
    let mut degenerate = 0usize;
    let mut max_root_residual: f64 = 0.0;
    let mut instances = Vec::with_capacity(cfg.num_instances);
    let mut clean_wins = 0usize;
    let mut crossovers: Vec<f64> = Vec::new();

    let max_attempts = cfg.num_instances.saturating_mul(10_000);
    let mut attempts = 0usize;
    let mut next_seed = 0u64;
    while instances.len() < cfg.num_instances {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::config(format!(
                "sweep rejected too many instances ({rejected_complex} complex, \
                 {rejected_nonconvergent} non-convergent, {rejected_premises} premise misses)"
            )));
        }
        let inst_seed = rng::derive2(cfg.seed, stream::ORACLE, next_seed);
        next_seed += 1;
        let mut gen = rng::rng(inst_seed);
        let x_i = gen.gen_range(0.8..2.0);
        let x_j = gen.gen_range(0.8..2.0);
        let y_i_poison = gen.gen_range(0.5..2.5);
        let y_j_poison = gen.gen_range(0.5..2.5);
        let sign = if gen.gen_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
        let near_scale = gen.gen_range(0.8..1.25);

        let mut inst = ScalarInstance {
            x_i,
            x_j,
            y_i_clean: 0.0,
            y_i_poison,
            y_j_poison,
            seed: inst_seed,
        };
        let (theta_i, theta_j) = match regularized_roots(&inst) {
            RootOutcome::Converged {
                theta_i, theta_j, ..
            } => (theta_i, theta_j),
            RootOutcome::ComplexDiscriminant => {
                rejected_complex += 1;
                continue;
            }
            RootOutcome::NonConvergent => {
                rejected_nonconvergent += 1;
                continue;
            }
        };
        let residual = regularized_loss(theta_i, inst.x_i, inst.y_i_poison, theta_j)
            .abs()
            .max(regularized_loss(theta_j, inst.x_j, inst.y_j_poison, theta_i).abs());
        max_root_residual = max_root_residual.max(residual);

        // theta_i fit (x_i, y_i_poison); the near residual is |theta_i x_i - y_i_poison|
        let near = (theta_i * inst.x_i - inst.y_i_poison).abs();
        // clean label placed one near-residual from the other parameter's prediction
        inst.y_i_clean = theta_j * inst.x_i + sign * near_scale * near;

        let l1 = (theta_i * inst.x_i - inst.y_i_poison).abs();
        let l2 = (theta_i * inst.x_i - inst.y_i_clean).abs();
        let l3 = (theta_j * inst.x_i - inst.y_i_poison).abs();
        let l4 = (theta_j * inst.x_i - inst.y_i_clean).abs();
        let is_degenerate = inst.y_i_clean == inst.y_i_poison;
        if !is_degenerate {
            // premise margins: clean far from the fitting parameter, poison
            // rejected by the other parameter
            let premises_hold =
                l1 < l2 && l4 < l2 && l2 >= cfg.margin * l1 && l3 >= cfg.margin * l4;
            if !premises_hold {
                rejected_premises += 1;
                continue;
            }
        }

        // interpolate toward the parameter that never fit (x_i, y_i_poison)
        let curve: Vec<(f64, f64, f64)> = cfg
            .alpha_grid
            .iter()
            .map(|&a| {
                let (lc, lp) = interpolated_losses(&inst, theta_j, theta_i, a)
                    .expect("grid validated");
                (a, lc, lp)
            })
            .collect();
        let high: Vec<&(f64, f64, f64)> = curve.iter().filter(|(a, _, _)| *a >= 0.9).collect();
        let wins = !is_degenerate && !high.is_empty() && high.iter().all(|(_, lc, lp)| lc < lp);
        let crossover = if is_degenerate {
            None
        } else {
            find_crossover(&curve)
        };

        if is_degenerate {
            degenerate += 1;
        } else {
            if wins {
                clean_wins += 1;
            }
            if let Some(c) = crossover {
                crossovers.push(c);
            }
        }
        instances.push(InstanceSweep {
            instance_id: instances.len(),
            instance: inst,
            theta_i,
            theta_j,
            curve,
            clean_wins_at_high_alpha: wins,
            crossover_alpha: crossover,
            degenerate: is_degenerate,
        });
    }

    let counted = instances.len() - degenerate;
    let fraction = if counted == 0 {
        0.0
    } else {
        clean_wins as f64 / counted as f64
    };
    let summary = SweepSummary {
        accepted: instances.len(),
        degenerate,
        rejected_complex,
        rejected_nonconvergent,
        rejected_premises,
        clean_wins_fraction: fraction,
        clean_wins_ci95: wilson_ci(fraction, counted),
        mean_crossover_alpha: if crossovers.is_empty() {
            None
        } else {
            Some(crossovers.iter().sum::<f64>() / crossovers.len() as f64)
        },
        max_root_residual,
    };
    Ok(SweepResult { summary, instances })
}

/// Last alpha where the margin `loss_poison - loss_clean` crosses from
/// non-positive to positive, linearly interpolated between grid points;
/// 0.0 when clean wins everywhere, `None` when it never wins.
fn find_crossover(curve: &[(f64, f64, f64)]) -> Option<f64> {
    let gap = |&(_, lc, lp): &(f64, f64, f64)| lp - lc;
    let mut crossover = None;
    for w in curve.windows(2) {
        let (g0, g1) = (gap(&w[0]), gap(&w[1]));
        if g0 <= 0.0 && g1 > 0.0 {
            let (a0, a1) = (w[0].0, w[1].0);
            let t = if (g1 - g0).abs() < f64::EPSILON {
                0.0
            } else {
                -g0 / (g1 - g0)
            };
            crossover = Some(a0 + t * (a1 - a0));
        }
    }
    if crossover.is_none() && gap(&curve[0]) > 0.0 {
        crossover = Some(0.0);
    }
    crossover
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_instance() -> ScalarInstance {
        ScalarInstance {
            x_i: 1.0,
            x_j: 2.0,
            y_i_clean: 0.0,
            y_i_poison: 1.0,
            y_j_poison: 1.5,
            seed: 1,
        }
    }

    #[test]
    fn roots_zero_the_regularized_loss() {
        let inst = sample_instance();
        match regularized_roots(&inst) {
            RootOutcome::Converged {
                theta_i,
                theta_j,
                candidates_i,
                candidates_j,
                ..
            } => {
                assert!(
                    regularized_loss(theta_i, inst.x_i, inst.y_i_poison, theta_j).abs() < 1e-8
                );
                assert!(
                    regularized_loss(theta_j, inst.x_j, inst.y_j_poison, theta_i).abs() < 1e-8
                );
                for c in candidates_i {
                    assert!(regularized_loss(c, inst.x_i, inst.y_i_poison, theta_j).abs() < 1e-8);
                }
                for c in candidates_j {
                    assert!(regularized_loss(c, inst.x_j, inst.y_j_poison, theta_i).abs() < 1e-8);
                }
            }
            other => panic!("expected convergence, got {other:?}"),
        }
    }

    #[test]
    fn negative_discriminant_is_rejected_as_complex() {
        // x = 2, other = 1, y = 0: x^2 - 4 x other + 4 y = -4
        assert!(loss_roots(2.0, 0.0, 1.0).is_none());
        let inst = ScalarInstance {
            x_i: 2.0,
            x_j: 2.0,
            y_i_clean: 0.0,
            y_i_poison: -2.0,
            y_j_poison: -2.0,
            seed: 0,
        };
        assert_eq!(regularized_roots(&inst), RootOutcome::ComplexDiscriminant);
    }

    #[test]
    fn symmetric_instance_has_identical_root_sets() {
        let inst = ScalarInstance {
            x_i: 1.3,
            x_j: 1.3,
            y_i_clean: 0.0,
            y_i_poison: 1.7,
            y_j_poison: 1.7,
            seed: 0,
        };
        match regularized_roots(&inst) {
            RootOutcome::Converged {
                theta_i,
                theta_j,
                candidates_i,
                candidates_j,
                ..
            } => {
                assert_relative_eq!(theta_i, theta_j, epsilon = 1e-9);
                for (a, b) in candidates_i.iter().zip(&candidates_j) {
                    assert_relative_eq!(a, b, epsilon = 1e-9);
                }
            }
            other => panic!("expected convergence, got {other:?}"),
        }
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let inst = sample_instance();
        let (theta_i, theta_j) = (0.95, 0.72);
        let (lc1, lp1) = interpolated_losses(&inst, theta_i, theta_j, 1.0).unwrap();
        assert_relative_eq!(lc1, (theta_i * inst.x_i - inst.y_i_clean).abs(), epsilon = 1e-15);
        assert_relative_eq!(lp1, (theta_i * inst.x_i - inst.y_i_poison).abs(), epsilon = 1e-15);
        let (lc0, lp0) = interpolated_losses(&inst, theta_i, theta_j, 0.0).unwrap();
        assert_relative_eq!(lc0, (theta_j * inst.x_i - inst.y_i_clean).abs(), epsilon = 1e-15);
        assert_relative_eq!(lp0, (theta_j * inst.x_i - inst.y_i_poison).abs(), epsilon = 1e-15);
    }

    #[test]
    fn alpha_zero_is_independent_of_theta_i() {
        let inst = sample_instance();
        let a = interpolated_losses(&inst, 10.0, 0.7, 0.0).unwrap();
        let b = interpolated_losses(&inst, -3.0, 0.7, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn midpoint_interpolation() {
        let inst = sample_instance();
        let (lc, _) = interpolated_losses(&inst, 1.0, 3.0, 0.5).unwrap();
        // theta_alpha = 2.0, prediction = 2.0 * x_i
        assert_relative_eq!(lc, (2.0 * inst.x_i - inst.y_i_clean).abs(), epsilon = 1e-15);
    }

    #[test]
    fn residual_curves_are_piecewise_linear_in_alpha() {
        // theta_alpha is affine in alpha, so away from the kink the second
        // difference of each residual curve vanishes
        let inst = sample_instance();
        let (ti, tj) = (2.0, 0.5);
        let mut prev = Vec::new();
        for step in 0..=10 {
            let (lc, lp) = interpolated_losses(&inst, ti, tj, step as f64 / 10.0).unwrap();
            prev.push((lc, lp));
        }
        let mut kinks_clean = 0;
        for w in prev.windows(3) {
            let second = w[0].0 - 2.0 * w[1].0 + w[2].0;
            if second.abs() > 1e-9 {
                kinks_clean += 1;
            }
        }
        assert!(kinks_clean <= 1, "more than one kink in |affine| curve");
    }

    #[test]
    fn alpha_out_of_range_is_rejected() {
        let inst = sample_instance();
        assert!(matches!(
            interpolated_losses(&inst, 1.0, 1.0, 1.5),
            Err(Error::InvalidCoefficients(_))
        ));
    }

    #[test]
    fn sweep_is_deterministic() {
        let cfg = SweepConfig::new(200, 3407);
        let a = theorem1_sweep(&cfg).unwrap();
        let b = theorem1_sweep(&cfg).unwrap();
        assert_eq!(a.summary.clean_wins_fraction, b.summary.clean_wins_fraction);
        assert_eq!(a.summary.accepted, b.summary.accepted);
        assert_eq!(a.summary.rejected_premises, b.summary.rejected_premises);
    }

    #[test]
    fn sweep_reports_majority_and_sound_roots() {
        let cfg = SweepConfig::new(500, 3407);
        let result = theorem1_sweep(&cfg).unwrap();
        let s = &result.summary;
        assert_eq!(s.accepted, 500);
        assert!(s.max_root_residual < 1e-8, "residual {}", s.max_root_residual);
        assert!(
            s.clean_wins_fraction > 0.5,
            "fraction {} not a majority",
            s.clean_wins_fraction
        );
        assert!(s.clean_wins_ci95.0 > 0.5, "CI lower bound {:?}", s.clean_wins_ci95);
        assert!(s.clean_wins_ci95.0 <= s.clean_wins_ci95.1);
        if let Some(c) = s.mean_crossover_alpha {
            assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn sweep_rejects_tiny_instance_counts() {
        assert!(theorem1_sweep(&SweepConfig::new(10, 1)).is_err());
    }
}
