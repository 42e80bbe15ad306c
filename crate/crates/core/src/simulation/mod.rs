//! Seeded Monte Carlo studies that verify the closed-form design results.
//!
//! A synthetic target cohort is generated from a fixed outcome law with
//! strongly level-dependent variability; candidate trial compositions are
//! drawn by softmax-weighted sampling, scored by the deviation metric, and
//! their empirical estimator variance is measured over replicated
//! experiments. A cost-constrained variant and a semi-synthetic pipeline
//! over an external dataset reuse the same machinery.
//!
//! Determinism: every random quantity comes from a ChaCha stream derived
//! from (master seed, purpose tag, design id, replication index), so results
//! are bit-identical for a given seed no matter how work is scheduled.

pub mod star;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::allocation::{cost_optimal_allocation, deviation_metric, optimal_allocation};
use crate::domain::{Allocation, CostSchedule, CovariateDomain, PropensityMap};
use crate::error::{Error, Result};
use crate::estimators::{ipsw_from_cells, sigma_from_arm_variances};

/// Parameters of the synthetic study.
#[derive(Debug, Clone)]
pub struct SyntheticDgpSpec {
    /// Target-cohort covariate distribution.
    pub target: Allocation,
    /// Number of target-cohort units to generate.
    pub cohort_size: usize,
    /// Number of trial units per candidate design.
    pub trial_size: usize,
    /// Treatment probability inside the trial.
    pub treatment_probability: f64,
    pub seed: u64,
}

impl SyntheticDgpSpec {
    /// Standard configuration: levels {1, 2, 3} with target weights
    /// (0.3, 0.2, 0.5), cohort of 10000, trials of 200, treatment
    /// probability one half.
    pub fn new(seed: u64) -> Self {
        let domain = CovariateDomain::new(["1", "2", "3"]).expect("static levels");
        let target =
            Allocation::from_weights(domain, vec![0.3, 0.2, 0.5]).expect("static weights");
        Self {
            target,
            cohort_size: 10_000,
            trial_size: 200,
            treatment_probability: 0.5,
            seed,
        }
    }
}

/// One cohort unit with both potential outcomes recorded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortUnit {
    /// Index into the cohort domain.
    pub level: usize,
    pub control_outcome: f64,
    pub treated_outcome: f64,
}

/// An immutable synthetic or semi-synthetic target cohort.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub domain: CovariateDomain,
    /// Numeric value of each level (used by the synthetic outcome law).
    pub level_values: Vec<f64>,
    pub units: Vec<CohortUnit>,
}

impl Cohort {
    /// Empirical level distribution of the whole cohort.
    pub fn empirical_allocation(&self) -> Result<Allocation> {
        let mut counts = vec![0.0; self.domain.len()];
        for unit in &self.units {
            counts[unit.level] += 1.0;
        }
        Allocation::from_weights(self.domain.clone(), counts)
    }
}

/// Both potential outcomes of the synthetic law at covariate value `x` with
/// shared unit noise `eps`: control 2x + x^4 eps, treated 1 - x + eps.
/// Sharing one noise draw matches the difference (1 - 3x) + (x^4 - 1) eps.
pub fn synthetic_potential_outcomes(x: f64, eps: f64) -> (f64, f64) {
    (2.0 * x + x.powi(4) * eps, 1.0 - x + eps)
}

/// Average treatment effect of the synthetic law under a target allocation:
/// sum of target[m] * (1 - 3 x_m).
pub fn synthetic_true_ate(target: &Allocation) -> Result<f64> {
    let values = target.domain().numeric_values()?;
    Ok(target
        .probs()
        .iter()
        .zip(values)
        .map(|(&p, x)| p * (1.0 - 3.0 * x))
        .sum())
}

/// Per-level variability profile of the synthetic law at treatment
/// probability `e`: arm variances are 1 (treated) and x^8 (control).
pub fn synthetic_sigma_profile(domain: &CovariateDomain, e: f64) -> Result<crate::domain::SigmaProfile> {
    let values = domain.numeric_values()?;
    let var_treated = vec![1.0; domain.len()];
    let var_control: Vec<f64> = values.iter().map(|x| x.powi(8)).collect();
    let propensity = PropensityMap::uniform(domain.clone(), e)?;
    sigma_from_arm_variances(&var_treated, &var_control, &propensity)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for one (purpose, id, replication) work unit.
fn stream(master: u64, tag: &str, rep: u64) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(master ^ fnv1a64(tag.as_bytes())) ^ rep);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Generate the synthetic target cohort: levels drawn from the target
/// allocation, one shared standard-normal noise per unit feeding both
/// potential outcomes.
pub fn generate_synthetic_cohort(spec: &SyntheticDgpSpec) -> Result<Cohort> {
    let domain = spec.target.domain().clone();
    let level_values = domain.numeric_values()?;
    let probs = spec.target.probs();
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in probs {
        acc += p;
        cumulative.push(acc);
    }
    let mut rng = stream(spec.seed, "cohort", 0);
    let mut units = Vec::with_capacity(spec.cohort_size);
    for _ in 0..spec.cohort_size {
        let u: f64 = rng.random();
        let level = cumulative.partition_point(|&c| c < u).min(probs.len() - 1);
        let eps: f64 = StandardNormal.sample(&mut rng);
        let (control, treated) = synthetic_potential_outcomes(level_values[level], eps);
        units.push(CohortUnit {
            level,
            control_outcome: control,
            treated_outcome: treated,
        });
    }
    Ok(Cohort {
        domain,
        level_values,
        units,
    })
}

/// One candidate trial composition: the selection parameters that produced
/// it, the units actually drawn, and their realized level distribution.
#[derive(Debug, Clone)]
pub struct CandidateDesign {
    pub design_id: String,
    /// Per-level selection parameters: softmax parameters for
    /// softmax-drawn designs, assigned level budgets for cost-drawn ones.
    pub softmax_params: Vec<f64>,
    /// Realized trial covariate distribution of the selected units.
    pub trial_allocation: Allocation,
    /// Indices into the cohort.
    pub selected_units: Vec<usize>,
}

/// Build a design directly from per-level counts by taking the first units
/// of each level in cohort order. Used to realize a prescribed allocation
/// (for example the closed-form optimum) as an actual design.
pub fn design_from_allocation(
    design_id: &str,
    allocation: &Allocation,
    trial_size: u64,
    cohort: &Cohort,
) -> Result<CandidateDesign> {
    cohort
        .domain
        .ensure_matches(allocation.domain(), "design allocation")?;
    let counts = allocation.integer_counts(trial_size);
    let mut remaining: Vec<u64> = counts.clone();
    let mut selected = Vec::with_capacity(trial_size as usize);
    for (i, unit) in cohort.units.iter().enumerate() {
        if remaining[unit.level] > 0 {
            remaining[unit.level] -= 1;
            selected.push(i);
        }
    }
    if let Some(level) = remaining.iter().position(|&r| r > 0) {
        return Err(Error::InfeasibleDraw {
            requested: counts[level] as usize,
            available: (counts[level] - remaining[level]) as usize,
        });
    }
    let mut realized = vec![0.0; cohort.domain.len()];
    for &i in &selected {
        realized[cohort.units[i].level] += 1.0;
    }
    Ok(CandidateDesign {
        design_id: design_id.to_string(),
        softmax_params: Vec::new(),
        trial_allocation: Allocation::from_weights(cohort.domain.clone(), realized)?,
        selected_units: selected,
    })
}

/// Build a design by sampling `trial_size` units without replacement with
/// per-unit weight exp(softmax parameter at the unit's level).
pub fn design_from_softmax_params(
    design_id: &str,
    params: &[f64],
    cohort: &Cohort,
    trial_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CandidateDesign> {
    if cohort.units.len() < trial_size {
        return Err(Error::InfeasibleDraw {
            requested: trial_size,
            available: cohort.units.len(),
        });
    }
    if params.len() != cohort.domain.len() {
        return Err(Error::DomainMismatch(format!(
            "softmax parameters: expected {} entries, got {}",
            cohort.domain.len(),
            params.len()
        )));
    }
    let weights: Vec<f64> = cohort.units.iter().map(|u| params[u.level].exp()).collect();
    let picked = rand::seq::index::sample_weighted(
        rng,
        cohort.units.len(),
        |i| weights[i],
        trial_size,
    )
    .map_err(|_| Error::InfeasibleDraw {
        requested: trial_size,
        available: cohort.units.len(),
    })?;
    let selected: Vec<usize> = picked.into_iter().collect();
    let mut realized = vec![0.0; cohort.domain.len()];
    for &i in &selected {
        realized[cohort.units[i].level] += 1.0;
    }
    Ok(CandidateDesign {
        design_id: design_id.to_string(),
        softmax_params: params.to_vec(),
        trial_allocation: Allocation::from_weights(cohort.domain.clone(), realized)?,
        selected_units: selected,
    })
}

/// Draw candidate designs from the cohort. Each design gets independent
/// standard-normal softmax parameters per level; units are sampled without
/// replacement with weight exp(param at the unit's level).
pub fn draw_candidate_designs(
    cohort: &Cohort,
    num_designs: usize,
    trial_size: usize,
    master_seed: u64,
) -> Result<Vec<CandidateDesign>> {
    if cohort.units.len() < trial_size {
        return Err(Error::InfeasibleDraw {
            requested: trial_size,
            available: cohort.units.len(),
        });
    }
    let width = num_designs.saturating_sub(1).to_string().len().max(3);
    (0..num_designs)
        .map(|d| {
            let design_id = format!("design-{d:0width$}");
            let mut rng = stream(master_seed, &design_id, 0);
            let params: Vec<f64> = (0..cohort.domain.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            design_from_softmax_params(&design_id, &params, cohort, trial_size, &mut rng)
        })
        .collect()
}

/// How replication outcomes are produced.
///
/// `Regenerated` draws fresh unit noise from the synthetic law every
/// experiment (alongside fresh treatment flips), so the across-replication
/// variance estimates the sampling variance the closed-form results
/// describe. `Stored` reveals the recorded potential outcomes and
/// re-randomizes treatment only; it is the only option for semi-synthetic
/// data whose outcome law is unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeSource {
    Regenerated,
    Stored,
}

/// Result of replicated experiments over one design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McStudyResult {
    pub design_id: String,
    /// Deviation of the design's realized allocation from the relevant
    /// optimum (supplied by the caller).
    pub deviation: f64,
    pub emp_mean: f64,
    pub emp_variance: f64,
    pub replications: usize,
    pub seed: u64,
}

/// Replicate experiments over a fixed design: per replication assign
/// treatment by independent coin flips, produce outcomes per
/// `source`, and evaluate the reweighted estimator against `target`.
#[allow(clippy::too_many_arguments)]
pub fn run_mc_study(
    design: &CandidateDesign,
    cohort: &Cohort,
    source: OutcomeSource,
    replications: usize,
    treatment_probability: f64,
    target: &Allocation,
    deviation: f64,
    master_seed: u64,
) -> Result<McStudyResult> {
    if replications < 2 {
        return Err(Error::DegenerateFit(
            "at least two replications are needed for a variance".into(),
        ));
    }
    cohort
        .domain
        .ensure_matches(target.domain(), "target allocation")?;
    if treatment_probability <= 0.0 || treatment_probability >= 1.0 {
        return Err(Error::InvalidPropensity {
            level: "*".into(),
            value: treatment_probability,
        });
    }
    // pre-flight positivity: every target-mass level must appear in the design
    let mut counts = vec![0usize; cohort.domain.len()];
    for &i in &design.selected_units {
        counts[cohort.units[i].level] += 1;
    }
    for (m, &p) in target.probs().iter().enumerate() {
        if p > 0.0 && counts[m] == 0 {
            return Err(Error::PositivityViolation(
                cohort.domain.level(m).to_string(),
            ));
        }
    }

    let estimates: Vec<f64> = (0..replications)
        .map(|rep| {
            let mut rng = stream(master_seed, &design.design_id, rep as u64 + 1);
            replicate_once(design, cohort, source, treatment_probability, target, &mut rng)
        })
        .collect::<Result<_>>()?;

    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let variance = estimates
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (n - 1.0);
    Ok(McStudyResult {
        design_id: design.design_id.clone(),
        deviation,
        emp_mean: mean,
        emp_variance: variance,
        replications,
        seed: master_seed,
    })
}

fn replicate_once(
    design: &CandidateDesign,
    cohort: &Cohort,
    source: OutcomeSource,
    treatment_probability: f64,
    target: &Allocation,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let m = cohort.domain.len();
    let e = treatment_probability;
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for &i in &design.selected_units {
        let unit = &cohort.units[i];
        let (control, treated_outcome) = match source {
            OutcomeSource::Stored => (unit.control_outcome, unit.treated_outcome),
            OutcomeSource::Regenerated => {
                let eps: f64 = StandardNormal.sample(rng);
                synthetic_potential_outcomes(cohort.level_values[unit.level], eps)
            }
        };
        let treated = rng.random_bool(e);
        let term = if treated {
            treated_outcome / e
        } else {
            -control / (1.0 - e)
        };
        sums[unit.level] += term;
        counts[unit.level] += 1;
    }
    ipsw_from_cells(target, &sums, &counts)
}

/// A design that could not be scored, and why.
#[derive(Debug, Clone)]
pub struct SkippedDesign {
    pub design_id: String,
    pub reason: String,
}

/// Everything the synthetic candidate sweep produces.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub results: Vec<McStudyResult>,
    pub skipped: Vec<SkippedDesign>,
    pub optimal: Allocation,
    pub sigma: crate::domain::SigmaProfile,
    pub true_ate: f64,
}

/// The full synthetic study: generate a cohort, draw candidate designs,
/// score each against the closed-form optimum, and measure empirical
/// estimator variance over replications. Designs that miss a target-mass
/// level are skipped and reported, not fatal.
pub fn synthetic_sweep(
    spec: &SyntheticDgpSpec,
    num_designs: usize,
    replications: usize,
) -> Result<SweepOutcome> {
    let cohort = generate_synthetic_cohort(spec)?;
    let sigma = synthetic_sigma_profile(&cohort.domain, spec.treatment_probability)?;
    let optimal = optimal_allocation(&spec.target, &sigma)?;
    let designs =
        draw_candidate_designs(&cohort, num_designs, spec.trial_size, spec.seed)?;

    let studies: Vec<std::result::Result<McStudyResult, SkippedDesign>> = designs
        .par_iter()
        .map(|design| {
            let scored = deviation_metric(&design.trial_allocation, &optimal)
                .and_then(|deviation| {
                    run_mc_study(
                        design,
                        &cohort,
                        OutcomeSource::Regenerated,
                        replications,
                        spec.treatment_probability,
                        &spec.target,
                        deviation,
                        spec.seed,
                    )
                });
            scored.map_err(|err| SkippedDesign {
                design_id: design.design_id.clone(),
                reason: err.to_string(),
            })
        })
        .collect();

    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for s in studies {
        match s {
            Ok(r) => results.push(r),
            Err(s) => skipped.push(s),
        }
    }
    Ok(SweepOutcome {
        results,
        skipped,
        optimal,
        sigma,
        true_ate: synthetic_true_ate(&spec.target)?,
    })
}

/// Everything the cost-constrained sweep produces.
#[derive(Debug, Clone)]
pub struct CostStudyOutcome {
    pub results: Vec<McStudyResult>,
    pub skipped: Vec<SkippedDesign>,
    pub cost_optimal: Allocation,
}

/// Cost-constrained candidate sweep: each design splits the budget across
/// levels by a flat Dirichlet draw, recruits floor(level budget / unit cost)
/// units per level, and is scored against the cost-aware optimum.
pub fn run_cost_study(
    spec: &SyntheticDgpSpec,
    costs: &CostSchedule,
    num_designs: usize,
    replications: usize,
) -> Result<CostStudyOutcome> {
    let cohort = generate_synthetic_cohort(spec)?;
    let sigma = synthetic_sigma_profile(&cohort.domain, spec.treatment_probability)?;
    let cost_optimal = cost_optimal_allocation(&spec.target, &sigma, costs)?;
    cohort.domain.ensure_matches(costs.domain(), "cost schedule")?;
    let min_cost = costs
        .unit_costs()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if costs.budget() < 2.0 * min_cost {
        return Err(Error::InfeasibleDraw {
            requested: 2,
            available: (costs.budget() / min_cost) as usize,
        });
    }

    // unit indices per level, in cohort order
    let mut level_pools: Vec<Vec<usize>> = vec![Vec::new(); cohort.domain.len()];
    for (i, unit) in cohort.units.iter().enumerate() {
        level_pools[unit.level].push(i);
    }

    let width = num_designs.saturating_sub(1).to_string().len().max(3);
    let designs: Vec<std::result::Result<CandidateDesign, SkippedDesign>> = (0..num_designs)
        .map(|d| {
            let design_id = format!("cost-design-{d:0width$}");
            let mut rng = stream(spec.seed, &design_id, 0);
            // flat Dirichlet split via normalized exponentials
            let shares: Vec<f64> = (0..cohort.domain.len())
                .map(|_| -(rng.random::<f64>()).ln())
                .collect();
            let total_share: f64 = shares.iter().sum();
            let mut selected = Vec::new();
            let mut params = Vec::with_capacity(cohort.domain.len());
            for (m, pool) in level_pools.iter().enumerate() {
                let level_budget = costs.budget() * shares[m] / total_share;
                let want = (level_budget / costs.unit_costs()[m]).floor() as usize;
                params.push(level_budget);
                if want > pool.len() {
                    return Err(SkippedDesign {
                        design_id,
                        reason: Error::InfeasibleDraw {
                            requested: want,
                            available: pool.len(),
                        }
                        .to_string(),
                    });
                }
                // draw without replacement from the level pool
                let picked =
                    rand::seq::index::sample(&mut rng, pool.len(), want);
                selected.extend(picked.into_iter().map(|j| pool[j]));
            }
            if selected.len() < 2 {
                return Err(SkippedDesign {
                    design_id,
                    reason: Error::InfeasibleDraw {
                        requested: 2,
                        available: selected.len(),
                    }
                    .to_string(),
                });
            }
            let mut realized = vec![0.0; cohort.domain.len()];
            for &i in &selected {
                realized[cohort.units[i].level] += 1.0;
            }
            match Allocation::from_weights(cohort.domain.clone(), realized) {
                Ok(trial_allocation) => Ok(CandidateDesign {
                    design_id,
                    softmax_params: params,
                    trial_allocation,
                    selected_units: selected,
                }),
                Err(err) => Err(SkippedDesign {
                    design_id,
                    reason: err.to_string(),
                }),
            }
        })
        .collect();

    let studies: Vec<std::result::Result<McStudyResult, SkippedDesign>> = designs
        .into_par_iter()
        .map(|candidate| {
            let design = candidate?;
            deviation_metric(&design.trial_allocation, &cost_optimal)
                .and_then(|deviation| {
                    run_mc_study(
                        &design,
                        &cohort,
                        OutcomeSource::Regenerated,
                        replications,
                        spec.treatment_probability,
                        &spec.target,
                        deviation,
                        spec.seed,
                    )
                })
                .map_err(|err| SkippedDesign {
                    design_id: design.design_id.clone(),
                    reason: err.to_string(),
                })
        })
        .collect();

    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for s in studies {
        match s {
            Ok(r) => results.push(r),
            Err(s) => skipped.push(s),
        }
    }
    Ok(CostStudyOutcome {
        results,
        skipped,
        cost_optimal,
    })
}

/// Ordinary least squares of empirical variance on deviation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

/// Fit a line through (deviation, empirical variance) points. All-equal
/// deviations cannot identify a slope and are rejected; a constant response
/// yields slope zero with r_squared reported as zero.
pub fn fit_variance_vs_deviation(points: &[(f64, f64)]) -> Result<FitResult> {
    if points.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all deviations are identical".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean_y) * (p.1 - mean_y)).sum();
    let ss_res: f64 = points
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum();
    let r_squared = if ss_tot == 0.0 { 0.0 } else { 1.0 - ss_res / ss_tot };
    Ok(FitResult {
        slope,
        intercept,
        r_squared: r_squared.clamp(0.0, 1.0),
        n_points: points.len(),
    })
}

/// Deviation/variance point pairs from a set of study results.
pub fn study_points(results: &[McStudyResult]) -> Vec<(f64, f64)> {
    results
        .iter()
        .map(|r| (r.deviation, r.emp_variance))
        .collect()
}
