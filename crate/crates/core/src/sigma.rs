//! Estimating the conditional-variability profile from observational data.
//!
//! Outcomes of target-cohort units are summarized per (level, arm) cell;
//! the per-level variability estimate is var_treated/e + var_control/(1-e)
//! on the variance scale, using the treatment probability planned for the
//! trial. Any unknown proportionality between observational and trial
//! outcome variances cancels when the estimate is normalized into an
//! allocation, so the derived allocation and deviation are unaffected by it.

use crate::allocation::{deviation_metric, optimal_allocation};
use crate::domain::{Allocation, Dataset, PropensityMap, SigmaProfile};
use crate::error::{Arm, Error, Result};

/// Outcome summary of one covariate level, split by treatment arm.
/// Means and sample variances (denominator n - 1) are present only when the
/// cell has enough units to define them.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub level: String,
    pub n_treated: usize,
    pub n_control: usize,
    pub mean_treated: Option<f64>,
    pub mean_control: Option<f64>,
    pub var_treated: Option<f64>,
    pub var_control: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct ArmAccumulator {
    n: usize,
    sum: f64,
    sum_sq_dev: f64, // running sum of squared deviations (Welford)
    mean: f64,
}

impl ArmAccumulator {
    fn push(&mut self, y: f64) {
        self.n += 1;
        self.sum += y;
        let delta = y - self.mean;
        self.mean += delta / self.n as f64;
        self.sum_sq_dev += delta * (y - self.mean);
    }

    fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }

    fn sample_variance(&self) -> Option<f64> {
        (self.n >= 2).then(|| self.sum_sq_dev / (self.n - 1) as f64)
    }
}

/// Per-level, per-arm outcome summaries over the target-cohort units.
/// Units without a recorded outcome carry no information and are skipped.
pub fn cell_stats(data: &Dataset) -> Vec<CellStats> {
    let m = data.domain().len();
    let mut treated = vec![ArmAccumulator::default(); m];
    let mut control = vec![ArmAccumulator::default(); m];
    for (unit, li) in data.iter_cohort() {
        if let Some(y) = unit.outcome {
            if unit.treated {
                treated[li].push(y);
            } else {
                control[li].push(y);
            }
        }
    }
    (0..m)
        .map(|li| CellStats {
            level: data.domain().level(li).to_string(),
            n_treated: treated[li].n,
            n_control: control[li].n,
            mean_treated: treated[li].mean(),
            mean_control: control[li].mean(),
            var_treated: treated[li].sample_variance(),
            var_control: control[li].sample_variance(),
        })
        .collect()
}

/// Estimated variability profile plus the cell evidence behind it.
#[derive(Debug, Clone)]
pub struct SigmaEstimate {
    pub profile: SigmaProfile,
    pub cells: Vec<CellStats>,
    /// (level, arm) pairs whose variance was borrowed from the arm pooled
    /// across all levels. Empty unless pooling was requested.
    pub pooled: Vec<(String, Arm)>,
}

/// Plug-in variability estimate per level. Every level must have a variance
/// in both arms; a sparse cell is an error so that thin observational data
/// cannot silently corrupt a design.
pub fn estimate_sigma(stats: &[CellStats], e: &PropensityMap) -> Result<SigmaEstimate> {
    estimate(stats, e, false)
}

/// Like `estimate_sigma`, but a cell with fewer than two units in an arm
/// borrows that arm's variance pooled across all levels. Borrowed cells are
/// flagged in the result.
pub fn estimate_sigma_pooled(stats: &[CellStats], e: &PropensityMap) -> Result<SigmaEstimate> {
    estimate(stats, e, true)
}

fn estimate(stats: &[CellStats], e: &PropensityMap, pooling: bool) -> Result<SigmaEstimate> {
    let domain = e.domain();
    if stats.len() != domain.len() {
        return Err(Error::DomainMismatch(format!(
            "cell stats: expected {} levels, got {}",
            domain.len(),
            stats.len()
        )));
    }
    for (m, cell) in stats.iter().enumerate() {
        if domain.level(m) != cell.level {
            return Err(Error::DomainMismatch(format!(
                "cell stats: expected level `{}` at position {m}, got `{}`",
                domain.level(m),
                cell.level
            )));
        }
    }

    let pooled_var = |arm: Arm| -> Option<f64> {
        // combine cells via total squared deviation around the grand mean
        let mut n_total = 0usize;
        let mut sum_total = 0.0;
        for cell in stats {
            let (n, mean) = match arm {
                Arm::Treated => (cell.n_treated, cell.mean_treated),
                Arm::Control => (cell.n_control, cell.mean_control),
            };
            if let Some(mean) = mean {
                n_total += n;
                sum_total += mean * n as f64;
            }
        }
        if n_total < 2 {
            return None;
        }
        let grand = sum_total / n_total as f64;
        let mut ss = 0.0;
        for cell in stats {
            let (n, mean, var) = match arm {
                Arm::Treated => (cell.n_treated, cell.mean_treated, cell.var_treated),
                Arm::Control => (cell.n_control, cell.mean_control, cell.var_control),
            };
            if let Some(mean) = mean {
                ss += var.unwrap_or(0.0) * (n.saturating_sub(1)) as f64;
                ss += n as f64 * (mean - grand) * (mean - grand);
            }
        }
        Some(ss / (n_total - 1) as f64)
    };

    let mut pooled = Vec::new();
    let mut sigma = Vec::with_capacity(stats.len());
    for (m, cell) in stats.iter().enumerate() {
        let mut arm_variance = |arm: Arm| -> Result<f64> {
            let direct = match arm {
                Arm::Treated => cell.var_treated,
                Arm::Control => cell.var_control,
            };
            if let Some(v) = direct {
                return Ok(v);
            }
            if pooling {
                if let Some(v) = pooled_var(arm) {
                    pooled.push((cell.level.clone(), arm));
                    return Ok(v);
                }
            }
            Err(Error::InsufficientCell {
                level: cell.level.clone(),
                arm,
            })
        };
        let v1 = arm_variance(Arm::Treated)?;
        let v0 = arm_variance(Arm::Control)?;
        let ev = e.value(m);
        sigma.push((v1 / ev + v0 / (1.0 - ev)).sqrt());
    }
    Ok(SigmaEstimate {
        profile: SigmaProfile::new(domain.clone(), sigma)?,
        cells: stats.to_vec(),
        pooled,
    })
}

/// Estimated variance-minimizing trial allocation from observational data.
pub fn estimate_optimal_allocation(
    data: &Dataset,
    target: &Allocation,
    e: &PropensityMap,
) -> Result<Allocation> {
    data.domain().ensure_matches(target.domain(), "target allocation")?;
    data.domain().ensure_matches(e.domain(), "propensity map")?;
    let stats = cell_stats(data);
    let estimate = estimate_sigma(&stats, e)?;
    optimal_allocation(target, &estimate.profile)
}

/// Estimated deviation of a candidate trial allocation, using the estimated
/// optimal allocation as the reference.
pub fn estimate_deviation(
    trial: &Allocation,
    data: &Dataset,
    target: &Allocation,
    e: &PropensityMap,
) -> Result<f64> {
    let estimated_optimal = estimate_optimal_allocation(data, target, e)?;
    deviation_metric(trial, &estimated_optimal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CovariateDomain, UnitRecord};
    use crate::estimators::sigma_from_arm_variances;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn domain(levels: &[&str]) -> CovariateDomain {
        CovariateDomain::new(levels.to_vec()).unwrap()
    }

    fn cohort_unit(id: usize, treated: bool, level: &str, y: f64) -> UnitRecord {
        UnitRecord {
            unit_id: format!("u{id}"),
            trial: false,
            treated,
            level: level.into(),
            outcome: Some(y),
        }
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        let scale = a.abs().max(b.abs()).max(1e-300);
        (a - b).abs() <= tol * scale
    }

    #[test]
    fn cell_stats_sample_moments() {
        let d = domain(&["a"]);
        let data = Dataset::new(
            d,
            vec![
                cohort_unit(0, true, "a", 1.0),
                cohort_unit(1, true, "a", 3.0),
                cohort_unit(2, false, "a", 5.0),
                cohort_unit(3, false, "a", 5.0),
            ],
        )
        .unwrap();
        let stats = cell_stats(&data);
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].n_treated, 2);
        assert_eq!(stats[0].mean_treated, Some(2.0));
        assert_eq!(stats[0].var_treated, Some(2.0));
        assert_eq!(stats[0].var_control, Some(0.0));
    }

    #[test]
    fn cell_stats_single_unit_has_no_variance() {
        let d = domain(&["a"]);
        let data = Dataset::new(
            d,
            vec![cohort_unit(0, true, "a", 1.0), cohort_unit(1, false, "a", 2.0)],
        )
        .unwrap();
        let stats = cell_stats(&data);
        assert_eq!(stats[0].n_treated, 1);
        assert_eq!(stats[0].mean_treated, Some(1.0));
        assert_eq!(stats[0].var_treated, None);
        assert_eq!(stats[0].var_control, None);
    }

    #[test]
    fn estimate_sigma_hand_value() {
        let d = domain(&["a"]);
        let e = PropensityMap::uniform(d, 0.5).unwrap();
        let stats = vec![CellStats {
            level: "a".into(),
            n_treated: 3,
            n_control: 3,
            mean_treated: Some(0.0),
            mean_control: Some(0.0),
            var_treated: Some(2.0),
            var_control: Some(2.0),
        }];
        let est = estimate_sigma(&stats, &e).unwrap();
        assert!(rel_close(est.profile.value(0), 8.0f64.sqrt(), 1e-15));
        assert!(est.pooled.is_empty());
    }

    #[test]
    fn estimate_sigma_constant_outcomes_give_zero() {
        let d = domain(&["a", "b"]);
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let mut units = Vec::new();
        for (i, level) in ["a", "b"].iter().enumerate() {
            for j in 0..4 {
                units.push(cohort_unit(i * 10 + j, j % 2 == 0, level, 7.0));
            }
        }
        let data = Dataset::new(d, units).unwrap();
        let est = estimate_sigma(&cell_stats(&data), &e).unwrap();
        assert_eq!(est.profile.values(), &[0.0, 0.0]);
    }

    #[test]
    fn estimate_sigma_flags_sparse_cell() {
        let d = domain(&["a"]);
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let data = Dataset::new(
            d,
            vec![
                cohort_unit(0, true, "a", 1.0),
                cohort_unit(1, true, "a", 2.0),
                cohort_unit(2, false, "a", 3.0),
            ],
        )
        .unwrap();
        let err = estimate_sigma(&cell_stats(&data), &e).unwrap_err();
        match err {
            Error::InsufficientCell { level, arm } => {
                assert_eq!(level, "a");
                assert_eq!(arm, Arm::Control);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn pooling_borrows_arm_variance_and_flags_it() {
        let d = domain(&["a", "b"]);
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let data = Dataset::new(
            d,
            vec![
                cohort_unit(0, true, "a", 1.0),
                cohort_unit(1, true, "a", 3.0),
                cohort_unit(2, false, "a", 0.0),
                cohort_unit(3, false, "a", 2.0),
                cohort_unit(4, true, "b", 5.0),
                cohort_unit(5, true, "b", 7.0),
                cohort_unit(6, false, "b", 4.0), // single control unit at b
            ],
        )
        .unwrap();
        let stats = cell_stats(&data);
        assert!(estimate_sigma(&stats, &e).is_err());
        let est = estimate_sigma_pooled(&stats, &e).unwrap();
        assert_eq!(est.pooled, vec![("b".to_string(), Arm::Control)]);
        assert!(est.profile.value(1) > 0.0);
    }

    /// Feeding the true conditional variances reproduces the closed-form
    /// profile exactly.
    #[test]
    fn plug_in_exactness_against_known_variances() {
        let d = domain(&["1", "2", "3"]);
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let var_treated = [1.0, 1.0, 1.0];
        let var_control = [1.0, 256.0, 6561.0];
        let stats: Vec<CellStats> = d
            .levels()
            .iter()
            .enumerate()
            .map(|(m, level)| CellStats {
                level: level.clone(),
                n_treated: 10,
                n_control: 10,
                mean_treated: Some(0.0),
                mean_control: Some(0.0),
                var_treated: Some(var_treated[m]),
                var_control: Some(var_control[m]),
            })
            .collect();
        let est = estimate_sigma(&stats, &e).unwrap();
        let oracle = sigma_from_arm_variances(&var_treated, &var_control, &e).unwrap();
        assert_eq!(est.profile.values(), oracle.values());
    }

    #[test]
    fn estimated_allocation_with_constant_sigma_is_target() {
        let d = domain(&["a", "b"]);
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let target = Allocation::from_weights(d.clone(), vec![0.3, 0.7]).unwrap();
        // identical spread in every cell
        let mut units = Vec::new();
        for (i, level) in ["a", "b"].iter().enumerate() {
            for (j, y) in [0.0, 1.0].iter().enumerate() {
                units.push(cohort_unit(i * 10 + j, true, level, *y));
                units.push(cohort_unit(i * 10 + j + 5, false, level, *y));
            }
        }
        let data = Dataset::new(d, units).unwrap();
        let est = estimate_optimal_allocation(&data, &target, &e).unwrap();
        for (a, b) in est.probs().iter().zip(target.probs()) {
            assert!(rel_close(*a, *b, 1e-12));
        }
    }

    /// Rescaling every outcome rescales sigma uniformly, so the estimated
    /// allocation is unchanged.
    #[test]
    fn estimated_allocation_invariant_to_outcome_scale() {
        let d = domain(&["a", "b"]);
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let target = Allocation::from_weights(d.clone(), vec![0.4, 0.6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut units = Vec::new();
        for (li, level) in ["a", "b"].iter().enumerate() {
            for j in 0..40 {
                let y: f64 = StandardNormal.sample(&mut rng);
                units.push(cohort_unit(li * 100 + j, rng.random_bool(0.5), level, y * (li + 1) as f64));
            }
        }
        let scale = 13.7;
        let scaled_units: Vec<UnitRecord> = units
            .iter()
            .map(|u| UnitRecord {
                outcome: u.outcome.map(|y| y * scale),
                ..u.clone()
            })
            .collect();
        let base = estimate_optimal_allocation(
            &Dataset::new(d.clone(), units).unwrap(),
            &target,
            &e,
        )
        .unwrap();
        let lifted = estimate_optimal_allocation(
            &Dataset::new(d, scaled_units).unwrap(),
            &target,
            &e,
        )
        .unwrap();
        for (a, b) in base.probs().iter().zip(lifted.probs()) {
            assert!(rel_close(*a, *b, 1e-12));
        }
    }

    /// Scaling the estimated profile by any constant cancels in both the
    /// allocation and the deviation.
    #[test]
    fn proportionality_constant_cancels() {
        let d = domain(&["a", "b", "c"]);
        let target = Allocation::from_weights(d.clone(), vec![0.3, 0.2, 0.5]).unwrap();
        let trial = Allocation::from_weights(d.clone(), vec![0.4, 0.3, 0.3]).unwrap();
        let sigma = SigmaProfile::new(d.clone(), vec![1.0, 2.0, 4.0]).unwrap();
        for c in [0.1, 3.0, 250.0] {
            let scaled =
                SigmaProfile::new(d.clone(), sigma.values().iter().map(|v| v * c).collect())
                    .unwrap();
            let opt_a = optimal_allocation(&target, &sigma).unwrap();
            let opt_b = optimal_allocation(&target, &scaled).unwrap();
            for (a, b) in opt_a.probs().iter().zip(opt_b.probs()) {
                assert!(rel_close(*a, *b, 1e-12));
            }
            let dev_a = deviation_metric(&trial, &opt_a).unwrap();
            let dev_b = deviation_metric(&trial, &opt_b).unwrap();
            assert!(rel_close(dev_a, dev_b, 1e-12));
        }
    }

    #[test]
    fn estimated_deviation_zero_at_estimated_optimum() {
        let d = domain(&["a", "b"]);
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let target = Allocation::from_weights(d.clone(), vec![0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut units = Vec::new();
        for (li, level) in ["a", "b"].iter().enumerate() {
            for j in 0..30 {
                let y: f64 = StandardNormal.sample(&mut rng);
                units.push(cohort_unit(li * 100 + j, rng.random_bool(0.5), level, y * (li as f64 + 1.0)));
            }
        }
        let data = Dataset::new(d, units).unwrap();
        let estimated = estimate_optimal_allocation(&data, &target, &e).unwrap();
        let dev = estimate_deviation(&estimated, &data, &target, &e).unwrap();
        assert!(dev.abs() <= 1e-12);
    }

    #[test]
    fn estimated_deviation_flags_missing_level() {
        let d = domain(&["a", "b"]);
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let target = Allocation::from_weights(d.clone(), vec![0.5, 0.5]).unwrap();
        let mut units = Vec::new();
        for (li, level) in ["a", "b"].iter().enumerate() {
            for j in 0..10 {
                units.push(cohort_unit(li * 100 + j, j % 2 == 0, level, (j * (li + 1)) as f64));
            }
        }
        let data = Dataset::new(d.clone(), units).unwrap();
        let missing = Allocation::from_weights(d, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            estimate_deviation(&missing, &data, &target, &e).unwrap_err(),
            Error::PositivityViolation(l) if l == "b"
        ));
    }

    /// At a large observational sample the estimated deviation of the
    /// target-mimicking allocation converges to its closed-form value.
    #[test]
    fn estimated_deviation_approaches_closed_form() {
        let d = domain(&["1", "2", "3"]);
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let target = Allocation::from_weights(d.clone(), vec![0.3, 0.2, 0.5]).unwrap();
        let truth = {
            let s = sigma_from_arm_variances(&[1.0, 1.0, 1.0], &[1.0, 256.0, 6561.0], &e).unwrap();
            let star = optimal_allocation(&target, &s).unwrap();
            deviation_metric(&target, &star).unwrap()
        };
        assert!((truth - 0.711184).abs() < 1e-5, "true deviation {truth}");

        let mut rng = ChaCha8Rng::seed_from_u64(808);
        let n0 = 100_000usize;
        let mut units = Vec::with_capacity(n0);
        for i in 0..n0 {
            let u: f64 = rng.random();
            let li = if u < 0.3 {
                0
            } else if u < 0.5 {
                1
            } else {
                2
            };
            let x = (li + 1) as f64;
            let eps: f64 = StandardNormal.sample(&mut rng);
            let treated = rng.random_bool(0.5);
            let y = if treated {
                1.0 - x + eps
            } else {
                2.0 * x + x.powi(4) * eps
            };
            units.push(cohort_unit(i, treated, d.level(li), y));
        }
        let data = Dataset::new(d, units).unwrap();
        let estimated = estimate_deviation(&target, &data, &target, &e).unwrap();
        assert!(
            (estimated - truth).abs() <= 0.05 * truth,
            "estimated {estimated} vs true {truth}"
        );
    }

    /// At a large observational sample the estimated allocation is close to
    /// the closed-form optimum of the synthetic outcome law.
    #[test]
    fn estimated_allocation_approaches_closed_form() {
        let d = domain(&["1", "2", "3"]);
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let target = Allocation::from_weights(d.clone(), vec![0.3, 0.2, 0.5]).unwrap();
        let truth = {
            let s = sigma_from_arm_variances(&[1.0, 1.0, 1.0], &[1.0, 256.0, 6561.0], &e).unwrap();
            optimal_allocation(&target, &s).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let n0 = 50_000usize;
        let mut units = Vec::with_capacity(n0);
        for i in 0..n0 {
            let u: f64 = rng.random();
            let li = if u < 0.3 {
                0
            } else if u < 0.5 {
                1
            } else {
                2
            };
            let x = (li + 1) as f64;
            let eps: f64 = StandardNormal.sample(&mut rng);
            let treated = rng.random_bool(0.5);
            let y = if treated {
                1.0 - x + eps
            } else {
                2.0 * x + x.powi(4) * eps
            };
            units.push(cohort_unit(i, treated, d.level(li), y));
        }
        let data = Dataset::new(d, units).unwrap();
        let estimated = estimate_optimal_allocation(&data, &target, &e).unwrap();
        let sup = estimated
            .probs()
            .iter()
            .zip(truth.probs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(sup <= 0.03, "sup-norm error {sup}");
    }
}
