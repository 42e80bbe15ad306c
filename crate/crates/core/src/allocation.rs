//! Closed-form trial allocations and the deviation metric.
//!
//! The reweighted estimator's variance at trial size n is
//! (1/n) * sum_m target[m]^2 sigma[m]^2 / trial[m]. Minimizing over the
//! trial allocation gives weights proportional to target*sigma; the deviation
//! metric D measures how far a candidate allocation sits from that optimum,
//! and the variance factorizes as (sum target*sigma)^2 * (D + 1) / n.
//! Variants cover heterogeneous unit costs, equal per-level precision, and a
//! compromise family between the two optima.

use crate::domain::{Allocation, CostSchedule, SigmaProfile};
use crate::error::{Error, Result};
use crate::estimators::KernelSpec;

/// Relative tolerance for the internal decomposition identity check.
const DECOMPOSITION_TOLERANCE: f64 = 1e-10;

fn check_triple(
    target: &Allocation,
    trial: Option<&Allocation>,
    sigma: &SigmaProfile,
) -> Result<()> {
    target
        .domain()
        .ensure_matches(sigma.domain(), "sigma profile")?;
    if let Some(trial) = trial {
        target
            .domain()
            .ensure_matches(trial.domain(), "trial allocation")?;
    }
    Ok(())
}

/// Trial-size-scaled variance of the reweighted estimator:
/// sum_m target[m]^2 sigma[m]^2 / trial[m].
///
/// Levels with no target-weighted variability contribute nothing and are
/// exempt from the positivity requirement.
pub fn scaled_ipsw_variance(
    target: &Allocation,
    trial: &Allocation,
    sigma: &SigmaProfile,
) -> Result<f64> {
    check_triple(target, Some(trial), sigma)?;
    let mut total = 0.0;
    for m in 0..target.domain().len() {
        let mass = target.prob(m) * sigma.value(m);
        if mass > 0.0 {
            let f = trial.prob(m);
            if f <= 0.0 {
                return Err(Error::PositivityViolation(
                    target.domain().level(m).to_string(),
                ));
            }
            total += mass * mass / f;
        }
    }
    Ok(total)
}

/// Variance of the reweighted estimator at trial size `trial_size`.
pub fn ipsw_variance(
    target: &Allocation,
    trial: &Allocation,
    sigma: &SigmaProfile,
    trial_size: u64,
) -> Result<f64> {
    Ok(scaled_ipsw_variance(target, trial, sigma)? / trial_size as f64)
}

/// Asymptotic variance of the kernel-smoothed reweighted estimator:
/// the plain expression scaled by |K|_2^2 / (trial_size * bandwidth).
pub fn kernel_ipsw_variance(
    target: &Allocation,
    trial: &Allocation,
    sigma: &SigmaProfile,
    trial_size: u64,
    kernel: &KernelSpec,
) -> Result<f64> {
    let scaled = scaled_ipsw_variance(target, trial, sigma)?;
    Ok(kernel.kind.squared_l2_norm() * scaled / (trial_size as f64 * kernel.bandwidth()))
}

/// The variance-minimizing trial allocation at fixed trial size:
/// weights proportional to target[m] * sigma[m].
pub fn optimal_allocation(target: &Allocation, sigma: &SigmaProfile) -> Result<Allocation> {
    check_triple(target, None, sigma)?;
    let weights: Vec<f64> = target
        .probs()
        .iter()
        .zip(sigma.values())
        .map(|(&p, &s)| p * s)
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::DegenerateVariability);
    }
    Allocation::from_weights(target.domain().clone(), weights)
}

/// Deviation of a candidate trial allocation from the optimum:
/// the trial-weighted variance of optimal/trial, which simplifies to
/// sum_m optimal[m]^2 / trial[m] - 1. Zero exactly at the optimum.
pub fn deviation_metric(trial: &Allocation, optimal: &Allocation) -> Result<f64> {
    trial
        .domain()
        .ensure_matches(optimal.domain(), "optimal allocation")?;
    let mut sum = 0.0;
    for m in 0..trial.domain().len() {
        let star = optimal.prob(m);
        if star > 0.0 {
            let f = trial.prob(m);
            if f <= 0.0 {
                return Err(Error::PositivityViolation(
                    trial.domain().level(m).to_string(),
                ));
            }
            sum += star * star / f;
        }
    }
    // the metric is nonnegative; guard the last digit when trial == optimal
    Ok((sum - 1.0).max(0.0))
}

/// Split the scaled variance into its allocation-independent base term
/// (sum target*sigma)^2 and the deviation of the given trial allocation.
/// base * (deviation + 1) equals the scaled variance identically.
pub fn variance_decomposition(
    target: &Allocation,
    trial: &Allocation,
    sigma: &SigmaProfile,
) -> Result<(f64, f64)> {
    check_triple(target, Some(trial), sigma)?;
    let base: f64 = target
        .probs()
        .iter()
        .zip(sigma.values())
        .map(|(&p, &s)| p * s)
        .sum::<f64>()
        .powi(2);
    let optimal = optimal_allocation(target, sigma)?;
    let deviation = deviation_metric(trial, &optimal)?;
    debug_assert!({
        let direct = scaled_ipsw_variance(target, trial, sigma)?;
        (base * (deviation + 1.0) - direct).abs() <= DECOMPOSITION_TOLERANCE * direct.abs()
    });
    Ok((base, deviation))
}

/// The variance-minimizing allocation under a total-budget constraint with
/// per-level unit costs: weights proportional to target*sigma/sqrt(cost).
pub fn cost_optimal_allocation(
    target: &Allocation,
    sigma: &SigmaProfile,
    costs: &CostSchedule,
) -> Result<Allocation> {
    check_triple(target, None, sigma)?;
    target
        .domain()
        .ensure_matches(costs.domain(), "cost schedule")?;
    let weights: Vec<f64> = (0..target.domain().len())
        .map(|m| target.prob(m) * sigma.value(m) / costs.unit_costs()[m].sqrt())
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::DegenerateVariability);
    }
    Allocation::from_weights(target.domain().clone(), weights)
}

/// The largest trial size whose integer recruitment plan stays within the
/// budget. Integer counts do not grow per-level monotonically, so the exact
/// answer is found by scanning down from a certified upper bound.
pub fn affordable_trial_size(allocation: &Allocation, costs: &CostSchedule) -> Result<u64> {
    allocation
        .domain()
        .ensure_matches(costs.domain(), "cost schedule")?;
    let budget = costs.budget();
    let mean_cost: f64 = allocation
        .probs()
        .iter()
        .zip(costs.unit_costs())
        .map(|(&p, &c)| p * c)
        .sum();
    let slack: f64 = costs.unit_costs().iter().sum();
    // cost(n) differs from n * mean_cost by less than the summed unit costs,
    // so nothing above this bound can be affordable
    let upper = ((budget + slack) / mean_cost).floor() as u64 + 1;
    let mut n = upper;
    while n > 0 {
        let counts = allocation.integer_counts(n);
        if costs.total_cost(&counts) <= budget {
            return Ok(n);
        }
        n -= 1;
    }
    Ok(0)
}

/// Allocation that equalizes per-level estimator precision:
/// weights proportional to sigma^2.
pub fn same_precision_allocation(sigma: &SigmaProfile) -> Result<Allocation> {
    let weights: Vec<f64> = sigma.values().iter().map(|&s| s * s).collect();
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::DegenerateVariability);
    }
    Allocation::from_weights(sigma.domain().clone(), weights)
}

/// Compromise family between overall efficiency (k = 1) and equal per-level
/// precision (k = 0): weights proportional to target^k * sigma^(2-k).
///
/// The endpoints route through the exact product expressions so they
/// reproduce `optimal_allocation` and `same_precision_allocation` bit for
/// bit; 0^0 counts as 1 when k = 0.
pub fn compromise_allocation(
    target: &Allocation,
    sigma: &SigmaProfile,
    k: f64,
) -> Result<Allocation> {
    check_triple(target, None, sigma)?;
    if !k.is_finite() || !(0.0..=1.0).contains(&k) {
        return Err(Error::OutOfRange {
            name: "k",
            value: k,
            lo: 0.0,
            hi: 1.0,
        });
    }
    if k == 1.0 {
        return optimal_allocation(target, sigma);
    }
    if k == 0.0 {
        return same_precision_allocation(sigma);
    }
    let weights: Vec<f64> = target
        .probs()
        .iter()
        .zip(sigma.values())
        .map(|(&p, &s)| p.powf(k) * s.powf(2.0 - k))
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::DegenerateVariability);
    }
    Allocation::from_weights(target.domain().clone(), weights)
}

/// Whether a report's variance is divided by the trial size or left on the
/// trial-size scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceScale {
    /// Variance of the estimator at the supplied trial size.
    Absolute,
    /// Trial-size-scaled variance (no trial size supplied).
    TrialSizeScaled,
}

/// Scorecard for one candidate trial composition.
#[derive(Debug, Clone)]
pub struct DesignReport {
    pub design_id: String,
    pub trial_allocation: Allocation,
    /// Deviation from the optimal allocation; absent on a positivity violation.
    pub deviation: Option<f64>,
    pub variance: Option<f64>,
    pub variance_scale: VarianceScale,
    /// Allocation-independent (sum target*sigma)^2 term.
    pub base_term: f64,
    /// deviation + 1; variance = base_term * factor (/ trial size).
    pub factor: Option<f64>,
    /// 1-based rank among valid candidates, ascending deviation.
    pub rank: Option<u32>,
    /// Human-readable reason the candidate could not be scored.
    pub violation: Option<String>,
}

/// Score candidate allocations against the optimum and rank them by
/// deviation (ascending, ties by design id). Candidates violating
/// positivity are flagged in their report instead of aborting the batch,
/// and listed after all ranked candidates.
pub fn rank_candidates(
    target: &Allocation,
    sigma: &SigmaProfile,
    candidates: &[(String, Allocation)],
    trial_size: Option<u64>,
) -> Result<Vec<DesignReport>> {
    check_triple(target, None, sigma)?;
    let optimal = optimal_allocation(target, sigma)?;
    let base: f64 = target
        .probs()
        .iter()
        .zip(sigma.values())
        .map(|(&p, &s)| p * s)
        .sum::<f64>()
        .powi(2);
    let scale = match trial_size {
        Some(_) => VarianceScale::Absolute,
        None => VarianceScale::TrialSizeScaled,
    };

    let mut reports = Vec::with_capacity(candidates.len());
    for (design_id, trial) in candidates {
        target
            .domain()
            .ensure_matches(trial.domain(), "candidate allocation")?;
        let report = match deviation_metric(trial, &optimal) {
            Ok(deviation) => {
                let factor = deviation + 1.0;
                let scaled = base * factor;
                debug_assert!({
                    let direct = scaled_ipsw_variance(target, trial, sigma)?;
                    (scaled - direct).abs() <= DECOMPOSITION_TOLERANCE * direct.abs()
                });
                let variance = match trial_size {
                    Some(n) => scaled / n as f64,
                    None => scaled,
                };
                DesignReport {
                    design_id: design_id.clone(),
                    trial_allocation: trial.clone(),
                    deviation: Some(deviation),
                    variance: Some(variance),
                    variance_scale: scale,
                    base_term: base,
                    factor: Some(factor),
                    rank: None,
                    violation: None,
                }
            }
            Err(err @ Error::PositivityViolation(_)) => DesignReport {
                design_id: design_id.clone(),
                trial_allocation: trial.clone(),
                deviation: None,
                variance: None,
                variance_scale: scale,
                base_term: base,
                factor: None,
                rank: None,
                violation: Some(err.to_string()),
            },
            Err(other) => return Err(other),
        };
        reports.push(report);
    }

    reports.sort_by(|a, b| match (a.deviation, b.deviation) {
        (Some(da), Some(db)) => da
            .partial_cmp(&db)
            .expect("deviations are finite")
            .then_with(|| a.design_id.cmp(&b.design_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.design_id.cmp(&b.design_id),
    });
    let mut next_rank = 1u32;
    for report in &mut reports {
        if report.deviation.is_some() {
            report.rank = Some(next_rank);
            next_rank += 1;
        }
    }
    Ok(reports)
}
