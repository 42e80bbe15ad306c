//! Semi-synthetic study over a class-size experiment extract.
//!
//! Input rows carry a binary treatment, two categorical covariates (race in
//! {1, 2}, school urbanicity in {1, 2, 3, 4}) and a possibly missing test
//! score. Missing potential outcomes are filled by a linear regression on
//! treatment and covariate indicators so every student has both outcomes;
//! candidate trial compositions over the 8-cell product domain are then
//! scored and replicated exactly like the synthetic study, except that
//! replications reveal the stored outcomes (the outcome law is unknown).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::allocation::{deviation_metric, optimal_allocation};
use crate::domain::{Allocation, CovariateDomain, PropensityMap};
use crate::error::{Error, Result};
use crate::estimators::sigma_from_arm_variances;

use super::{
    fit_variance_vs_deviation, run_mc_study, study_points, Cohort, CohortUnit, FitResult,
    McStudyResult, OutcomeSource, SkippedDesign,
};

/// One ingested student row.
#[derive(Debug, Clone, PartialEq)]
pub struct StarRow {
    pub treated: bool,
    /// Student race, coded 1 or 2. Recode other schemes before ingestion.
    pub race: u8,
    /// School urbanicity, coded 1 through 4.
    pub urbanicity: u8,
    /// Combined test score; empty when the outcome is missing.
    pub score: Option<f64>,
}

/// Parameters of the semi-synthetic sweep.
#[derive(Debug, Clone)]
pub struct StarPipelineConfig {
    pub candidates: usize,
    pub trial_size: usize,
    pub replications: usize,
    pub seed: u64,
}

/// Outcome of the pipeline: per-design study results plus the fitted
/// deviation/variance line and the ingredients used to score designs.
#[derive(Debug, Clone)]
pub struct StarPipelineOutcome {
    pub results: Vec<McStudyResult>,
    pub skipped: Vec<SkippedDesign>,
    pub fit: FitResult,
    pub domain: CovariateDomain,
    pub target: Allocation,
    pub optimal: Allocation,
    pub treatment_probability: f64,
    /// Students retained after dropping rows with missing covariates.
    pub students: usize,
}

/// The 2x4 product domain over race and urbanicity, levels "r|u".
pub fn star_domain() -> CovariateDomain {
    let mut levels = Vec::with_capacity(8);
    for race in 1..=2u8 {
        for urbanicity in 1..=4u8 {
            levels.push(format!("{race}|{urbanicity}"));
        }
    }
    CovariateDomain::new(levels).expect("static product levels")
}

fn cell_index(race: u8, urbanicity: u8) -> usize {
    (race as usize - 1) * 4 + (urbanicity as usize - 1)
}

/// Regression features: intercept, treatment, race=2, urbanicity in {2,3,4}.
fn features(treated: bool, race: u8, urbanicity: u8) -> [f64; 6] {
    [
        1.0,
        if treated { 1.0 } else { 0.0 },
        if race == 2 { 1.0 } else { 0.0 },
        if urbanicity == 2 { 1.0 } else { 0.0 },
        if urbanicity == 3 { 1.0 } else { 0.0 },
        if urbanicity == 4 { 1.0 } else { 0.0 },
    ]
}

/// Solve a small symmetric linear system by Gaussian elimination with
/// partial pivoting.
#[allow(clippy::needless_range_loop)]
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col].abs() < 1e-10 {
            return Err(Error::SingularRegression);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in (col + 1)..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Ok(x)
}

/// Least-squares coefficients of score on (treatment, covariate indicators)
/// over rows with an observed score.
fn fit_imputation(rows: &[StarRow]) -> Result<Vec<f64>> {
    let mut xtx = vec![vec![0.0f64; 6]; 6];
    let mut xty = vec![0.0f64; 6];
    let mut observed = 0usize;
    for row in rows {
        if let Some(score) = row.score {
            observed += 1;
            let f = features(row.treated, row.race, row.urbanicity);
            for i in 0..6 {
                for j in 0..6 {
                    xtx[i][j] += f[i] * f[j];
                }
                xty[i] += f[i] * score;
            }
        }
    }
    if observed < 6 {
        return Err(Error::SingularRegression);
    }
    solve_linear(xtx, xty)
}

fn predict(beta: &[f64], treated: bool, race: u8, urbanicity: u8) -> f64 {
    features(treated, race, urbanicity)
        .iter()
        .zip(beta)
        .map(|(f, b)| f * b)
        .sum()
}

/// Build the study cohort from ingested rows: drop rows with missing
/// covariates, impute the unobserved potential outcome of every student
/// (and both outcomes when the score is missing), and record the empirical
/// treated share as the experiment's treatment probability.
pub fn build_star_cohort(rows: &[StarRow]) -> Result<(Cohort, Allocation, f64)> {
    let domain = star_domain();
    if rows.is_empty() {
        return Err(Error::DegenerateFit("no usable rows".into()));
    }
    let beta = fit_imputation(rows)?;

    let mut units = Vec::with_capacity(rows.len());
    let mut treated_count = 0usize;
    let mut cell_counts = vec![0.0; domain.len()];
    for row in rows {
        let li = cell_index(row.race, row.urbanicity);
        cell_counts[li] += 1.0;
        if row.treated {
            treated_count += 1;
        }
        let fitted_control = predict(&beta, false, row.race, row.urbanicity);
        let fitted_treated = predict(&beta, true, row.race, row.urbanicity);
        let (control, treated_outcome) = match (row.treated, row.score) {
            (true, Some(y)) => (fitted_control, y),
            (false, Some(y)) => (y, fitted_treated),
            (_, None) => (fitted_control, fitted_treated),
        };
        units.push(CohortUnit {
            level: li,
            control_outcome: control,
            treated_outcome,
        });
    }
    let treatment_probability = treated_count as f64 / rows.len() as f64;
    if treatment_probability <= 0.0 || treatment_probability >= 1.0 {
        return Err(Error::InvalidPropensity {
            level: "*".into(),
            value: treatment_probability,
        });
    }
    let target = Allocation::from_weights(domain.clone(), cell_counts)?;
    let level_values = vec![0.0; domain.len()]; // unused for stored outcomes
    Ok((
        Cohort {
            domain,
            level_values,
            units,
        },
        target,
        treatment_probability,
    ))
}

/// Per-cell sample variances of both stored potential-outcome columns,
/// turned into the variability profile that defines the optimal allocation.
fn star_sigma(cohort: &Cohort, e: f64) -> Result<crate::domain::SigmaProfile> {
    let m = cohort.domain.len();
    let mut n = vec![0usize; m];
    let mut mean_t = vec![0.0f64; m];
    let mut mean_c = vec![0.0f64; m];
    for u in &cohort.units {
        n[u.level] += 1;
        mean_t[u.level] += u.treated_outcome;
        mean_c[u.level] += u.control_outcome;
    }
    for li in 0..m {
        if n[li] > 0 {
            mean_t[li] /= n[li] as f64;
            mean_c[li] /= n[li] as f64;
        }
    }
    let mut var_t = vec![0.0f64; m];
    let mut var_c = vec![0.0f64; m];
    for u in &cohort.units {
        let dt = u.treated_outcome - mean_t[u.level];
        let dc = u.control_outcome - mean_c[u.level];
        var_t[u.level] += dt * dt;
        var_c[u.level] += dc * dc;
    }
    for li in 0..m {
        if n[li] >= 2 {
            var_t[li] /= (n[li] - 1) as f64;
            var_c[li] /= (n[li] - 1) as f64;
        } else {
            var_t[li] = 0.0;
            var_c[li] = 0.0;
        }
    }
    let propensity = PropensityMap::uniform(cohort.domain.clone(), e)?;
    sigma_from_arm_variances(&var_t, &var_c, &propensity)
}

/// Run the full semi-synthetic sweep over ingested rows.
pub fn star_pipeline(rows: &[StarRow], config: &StarPipelineConfig) -> Result<StarPipelineOutcome> {
    let (cohort, target, treatment_probability) = build_star_cohort(rows)?;
    let sigma = star_sigma(&cohort, treatment_probability)?;
    let optimal = optimal_allocation(&target, &sigma)?;
    let designs = super::draw_candidate_designs(
        &cohort,
        config.candidates,
        config.trial_size,
        config.seed,
    )?;

    let studies: Vec<std::result::Result<McStudyResult, SkippedDesign>> = designs
        .par_iter()
        .map(|design| {
            deviation_metric(&design.trial_allocation, &optimal)
                .and_then(|deviation| {
                    run_mc_study(
                        design,
                        &cohort,
                        OutcomeSource::Stored,
                        config.replications,
                        treatment_probability,
                        &target,
                        deviation,
                        config.seed,
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
    let fit = fit_variance_vs_deviation(&study_points(&results))?;
    Ok(StarPipelineOutcome {
        results,
        skipped,
        fit,
        domain: cohort.domain.clone(),
        target,
        optimal,
        treatment_probability,
        students: cohort.units.len(),
    })
}

/// Deterministic synthetic stand-in with the same 8-cell schema, for runs
/// without the real extract. Cell means and noise scales vary across cells
/// so the variability profile is informative; roughly 3% of scores are
/// missing.
pub fn star_standin_rows(seed: u64, rows: usize) -> Vec<StarRow> {
    let mut rng = super::stream(seed, "star-standin", 0);
    let mut out = Vec::with_capacity(rows);
    for _ in 0..rows {
        let race = if rng.random_bool(0.64) { 1 } else { 2 };
        let u: f64 = rng.random();
        let urbanicity = if u < 0.28 {
            1
        } else if u < 0.52 {
            2
        } else if u < 0.78 {
            3
        } else {
            4
        };
        let treated = rng.random_bool(1733.0 / 4584.0);
        let base = 1220.0 + 35.0 * race as f64 + 18.0 * urbanicity as f64;
        let effect = 14.0 + 9.0 * race as f64 - 4.5 * urbanicity as f64;
        let spread = 38.0 * (1.0 + 0.55 * (race as f64 - 1.0) + 0.4 * (urbanicity as f64 - 1.0));
        let eps: f64 = StandardNormal.sample(&mut rng);
        let score = base + if treated { effect } else { 0.0 } + spread * eps;
        let missing = rng.random_bool(0.03);
        out.push(StarRow {
            treated,
            race,
            urbanicity,
            score: (!missing).then_some(score),
        });
    }
    out
}
