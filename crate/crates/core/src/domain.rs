//! Shared data model: covariate domains, allocations over levels, unit
//! records, and the per-level variability and cost profiles the design
//! computations consume.
//!
//! Everything here is immutable after construction and safe to share
//! across threads.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Absolute tolerance for an allocation summing to one.
pub const ALLOCATION_SUM_TOLERANCE: f64 = 1e-12;

/// The finite set of covariate levels a design is expressed over.
///
/// Levels may come directly from discrete covariates or from stratifying a
/// continuous covariate, in which case the half-open interval behind each
/// level is recorded in `strata_bounds`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateDomain {
    levels: Vec<String>,
    strata_bounds: Option<Vec<(f64, f64)>>,
}

impl CovariateDomain {
    pub fn new<I, S>(levels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let levels: Vec<String> = levels.into_iter().map(Into::into).collect();
        if levels.is_empty() {
            return Err(Error::EmptyDomain);
        }
        let mut seen = HashMap::with_capacity(levels.len());
        for (i, level) in levels.iter().enumerate() {
            if seen.insert(level.clone(), i).is_some() {
                return Err(Error::DuplicateLevel(level.clone()));
            }
        }
        Ok(Self {
            levels,
            strata_bounds: None,
        })
    }

    /// Domain whose levels stand for contiguous intervals of a continuous
    /// covariate. Bounds must be contiguous with `lo < hi`.
    pub fn with_strata<I, S>(levels: I, bounds: Vec<(f64, f64)>) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut domain = Self::new(levels)?;
        if bounds.len() != domain.levels.len() {
            return Err(Error::InvalidStrata);
        }
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::InvalidStrata);
            }
            if i + 1 < bounds.len() && bounds[i + 1].0 != hi {
                return Err(Error::InvalidStrata);
            }
        }
        domain.strata_bounds = Some(bounds);
        Ok(domain)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn level(&self, index: usize) -> &str {
        &self.levels[index]
    }

    pub fn index_of(&self, level: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == level)
    }

    pub fn strata_bounds(&self) -> Option<&[(f64, f64)]> {
        self.strata_bounds.as_deref()
    }

    /// Numeric value of every level, for ordinal domains whose level
    /// identifiers parse as numbers.
    pub fn numeric_values(&self) -> Result<Vec<f64>> {
        self.levels
            .iter()
            .map(|l| {
                l.parse::<f64>()
                    .map_err(|_| Error::NonNumericLevel(l.clone()))
            })
            .collect()
    }

    /// Check that `other` has the same level set in the same order.
    pub fn ensure_matches(&self, other: &CovariateDomain, what: &str) -> Result<()> {
        if self.levels == other.levels {
            Ok(())
        } else {
            Err(Error::DomainMismatch(format!(
                "{what}: expected levels {:?}, got {:?}",
                self.levels, other.levels
            )))
        }
    }
}

/// A probability vector over the levels of a domain.
///
/// Construction normalizes nonnegative weights to sum to one; inputs that
/// already sum to one are re-normalized rather than rejected, so CSV
/// round-trips with last-digit drift stay valid.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    domain: CovariateDomain,
    probs: Vec<f64>,
}

impl Allocation {
    /// Normalize raw nonnegative weights into an allocation.
    pub fn from_weights(domain: CovariateDomain, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != domain.len() {
            return Err(Error::DomainMismatch(format!(
                "allocation weights: expected {} entries, got {}",
                domain.len(),
                weights.len()
            )));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::NegativeWeight {
                    level: domain.level(i).to_string(),
                    value: w,
                });
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::AllZeroWeights);
        }
        let probs = weights.iter().map(|w| w / total).collect::<Vec<_>>();
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= ALLOCATION_SUM_TOLERANCE);
        Ok(Self { domain, probs })
    }

    /// Allocation concentrated on a single level.
    pub fn point_mass(domain: CovariateDomain, level: &str) -> Result<Self> {
        let idx = domain
            .index_of(level)
            .ok_or_else(|| Error::UnknownLevel(level.to_string()))?;
        let mut weights = vec![0.0; domain.len()];
        weights[idx] = 1.0;
        Self::from_weights(domain, weights)
    }

    pub fn domain(&self) -> &CovariateDomain {
        &self.domain
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.probs[index]
    }

    /// Round `total` recruitment slots to the levels by the largest-remainder
    /// method. Counts sum to `total` exactly; ties go to the lower index.
    pub fn integer_counts(&self, total: u64) -> Vec<u64> {
        let m = self.probs.len();
        let mut counts = Vec::with_capacity(m);
        let mut remainders = Vec::with_capacity(m);
        let mut assigned: u64 = 0;
        for &p in &self.probs {
            let exact = total as f64 * p;
            let base = exact.floor();
            counts.push(base as u64);
            remainders.push(exact - base);
            assigned += base as u64;
        }
        let leftover = total.saturating_sub(assigned) as usize;
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            remainders[b]
                .partial_cmp(&remainders[a])
                .expect("remainders are finite")
                .then(a.cmp(&b))
        });
        for &i in order.iter().take(leftover) {
            counts[i] += 1;
        }
        counts
    }
}

/// Per-level treatment assignment probability, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityMap {
    domain: CovariateDomain,
    values: Vec<f64>,
}

impl PropensityMap {
    pub fn new(domain: CovariateDomain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::DomainMismatch(format!(
                "propensity map: expected {} entries, got {}",
                domain.len(),
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v <= 0.0 || v >= 1.0 {
                return Err(Error::InvalidPropensity {
                    level: domain.level(i).to_string(),
                    value: v,
                });
            }
        }
        Ok(Self { domain, values })
    }

    /// Same treatment probability at every level.
    pub fn uniform(domain: CovariateDomain, value: f64) -> Result<Self> {
        let values = vec![value; domain.len()];
        Self::new(domain, values)
    }

    pub fn domain(&self) -> &CovariateDomain {
        &self.domain
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-level conditional variability on the standard-deviation scale.
///
/// An all-zero profile is representable (it arises from constant outcomes);
/// allocation routines that need information reject it with
/// `DegenerateVariability`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaProfile {
    domain: CovariateDomain,
    values: Vec<f64>,
}

impl SigmaProfile {
    pub fn new(domain: CovariateDomain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.len() {
            return Err(Error::DomainMismatch(format!(
                "sigma profile: expected {} entries, got {}",
                domain.len(),
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidSigma {
                    level: domain.level(i).to_string(),
                    value: v,
                });
            }
        }
        Ok(Self { domain, values })
    }

    pub fn domain(&self) -> &CovariateDomain {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }
}

/// Per-level unit recruitment cost plus a total budget.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSchedule {
    domain: CovariateDomain,
    unit_cost: Vec<f64>,
    budget: f64,
}

impl CostSchedule {
    pub fn new(domain: CovariateDomain, unit_cost: Vec<f64>, budget: f64) -> Result<Self> {
        if unit_cost.len() != domain.len() {
            return Err(Error::DomainMismatch(format!(
                "cost schedule: expected {} entries, got {}",
                domain.len(),
                unit_cost.len()
            )));
        }
        for (i, &c) in unit_cost.iter().enumerate() {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::InvalidCost {
                    level: domain.level(i).to_string(),
                    value: c,
                });
            }
        }
        if !budget.is_finite() || budget <= 0.0 {
            return Err(Error::InvalidBudget(budget));
        }
        Ok(Self {
            domain,
            unit_cost,
            budget,
        })
    }

    pub fn domain(&self) -> &CovariateDomain {
        &self.domain
    }

    pub fn unit_costs(&self) -> &[f64] {
        &self.unit_cost
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    /// Total cost of a per-level recruitment plan.
    pub fn total_cost(&self, counts: &[u64]) -> f64 {
        counts
            .iter()
            .zip(&self.unit_cost)
            .map(|(&n, &c)| n as f64 * c)
            .sum()
    }
}

/// One row of combined observational and trial data.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub unit_id: String,
    /// Sample indicator: true for trial membership, false for the target cohort.
    pub trial: bool,
    pub treated: bool,
    /// Level identifier; must belong to the dataset's domain.
    pub level: String,
    /// Observed outcome; may be absent pre-treatment.
    pub outcome: Option<f64>,
}

/// A validated collection of unit records over a shared domain.
#[derive(Debug, Clone)]
pub struct Dataset {
    domain: CovariateDomain,
    units: Vec<UnitRecord>,
    level_indices: Vec<usize>,
}

impl Dataset {
    pub fn new(domain: CovariateDomain, units: Vec<UnitRecord>) -> Result<Self> {
        let mut index: HashMap<&str, usize> = HashMap::with_capacity(domain.len());
        for (i, level) in domain.levels().iter().enumerate() {
            index.insert(level.as_str(), i);
        }
        let mut level_indices = Vec::with_capacity(units.len());
        for unit in &units {
            let idx = *index
                .get(unit.level.as_str())
                .ok_or_else(|| Error::UnknownLevel(unit.level.clone()))?;
            level_indices.push(idx);
        }
        Ok(Self {
            domain,
            units,
            level_indices,
        })
    }

    pub fn domain(&self) -> &CovariateDomain {
        &self.domain
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Iterate units together with their level index.
    pub fn iter_with_level(&self) -> impl Iterator<Item = (&UnitRecord, usize)> {
        self.units.iter().zip(self.level_indices.iter().copied())
    }

    /// Trial units (sample indicator 1) with their level index.
    pub fn iter_trial(&self) -> impl Iterator<Item = (&UnitRecord, usize)> {
        self.iter_with_level().filter(|(u, _)| u.trial)
    }

    /// Target-cohort units (sample indicator 0) with their level index.
    pub fn iter_cohort(&self) -> impl Iterator<Item = (&UnitRecord, usize)> {
        self.iter_with_level().filter(|(u, _)| !u.trial)
    }
}

/// Bin continuous covariate values into strata delimited by `edges`.
///
/// Strata are half-open `[lo, hi)` with the final stratum closed, so every
/// in-support value lands in exactly one stratum. Levels are named by index
/// (`A1`, `A2`, ...), not by interval midpoints.
pub fn stratify(values: &[f64], edges: &[f64]) -> Result<(CovariateDomain, Vec<usize>)> {
    if edges.len() < 2
        || edges.iter().any(|e| !e.is_finite())
        || edges.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::InvalidStratumEdges);
    }
    let strata = edges.len() - 1;
    let levels: Vec<String> = (1..=strata).map(|l| format!("A{l}")).collect();
    let bounds: Vec<(f64, f64)> = edges.windows(2).map(|w| (w[0], w[1])).collect();
    let domain = CovariateDomain::with_strata(levels, bounds)?;

    let lo = edges[0];
    let hi = edges[strata];
    let mut assignment = Vec::with_capacity(values.len());
    for &v in values {
        if !v.is_finite() || v < lo || v > hi {
            return Err(Error::ValueOutOfSupport(v));
        }
        // edges is sorted; partition_point finds the first edge > v.
        let idx = edges.partition_point(|&e| e <= v);
        let stratum = if idx == 0 {
            0
        } else {
            (idx - 1).min(strata - 1)
        };
        assignment.push(stratum);
    }
    Ok((domain, assignment))
}
