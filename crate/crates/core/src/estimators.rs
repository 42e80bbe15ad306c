//! Treatment-effect estimators over a discrete covariate domain.
//!
//! Per-level effects come from inverse-propensity weighting (optionally
//! kernel-smoothed for ordinal levels); the target-cohort effect reweights
//! them by the target covariate distribution. The influence-function
//! variability these estimators obey is exposed both as a pointwise value
//! and as a per-level profile built from arm variances.

use crate::domain::{Allocation, CovariateDomain, Dataset, PropensityMap, SigmaProfile};
use crate::error::{Error, Result};

/// Kernel family used for local averaging over ordinal levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Epanechnikov,
    Uniform,
    Gaussian,
}

impl KernelKind {
    /// Kernel value at standardized distance `u`.
    pub fn evaluate(self, u: f64) -> f64 {
        match self {
            KernelKind::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            KernelKind::Uniform => {
                if u.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            KernelKind::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }

    /// The squared L2 norm of the kernel, i.e. the integral of K(u)^2.
    pub fn squared_l2_norm(self) -> f64 {
        match self {
            KernelKind::Epanechnikov => 3.0 / 5.0,
            KernelKind::Uniform => 0.5,
            KernelKind::Gaussian => 1.0 / (2.0 * std::f64::consts::PI.sqrt()),
        }
    }

    pub fn has_compact_support(self) -> bool {
        !matches!(self, KernelKind::Gaussian)
    }
}

/// A kernel together with its smoothing bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    bandwidth: f64,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, bandwidth: f64) -> Result<Self> {
        if !bandwidth.is_finite() || bandwidth <= 0.0 {
            return Err(Error::InvalidBandwidth(bandwidth));
        }
        Ok(Self { kind, bandwidth })
    }

    /// Default bandwidth: half the minimum spacing between adjacent numeric
    /// levels, so compact-support kernels reduce to the plain per-level
    /// estimator until the caller opts into smoothing.
    pub fn with_default_bandwidth(kind: KernelKind, domain: &CovariateDomain) -> Result<Self> {
        let mut values = domain.numeric_values()?;
        values.sort_by(|a, b| a.partial_cmp(b).expect("level values are finite"));
        let min_spacing = values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        if !min_spacing.is_finite() || min_spacing <= 0.0 {
            return Err(Error::InvalidBandwidth(min_spacing));
        }
        Self::new(kind, min_spacing / 2.0)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }
}

/// Per-level mean outcomes under control and treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeModel {
    domain: CovariateDomain,
    control_mean: Vec<f64>,
    treated_mean: Vec<f64>,
}

impl OutcomeModel {
    pub fn new(
        domain: CovariateDomain,
        control_mean: Vec<f64>,
        treated_mean: Vec<f64>,
    ) -> Result<Self> {
        if control_mean.len() != domain.len() || treated_mean.len() != domain.len() {
            return Err(Error::DomainMismatch(format!(
                "outcome model: expected {} entries per arm",
                domain.len()
            )));
        }
        if control_mean.iter().chain(&treated_mean).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteModel);
        }
        Ok(Self {
            domain,
            control_mean,
            treated_mean,
        })
    }

    /// Model that is identically zero in both arms.
    pub fn zero(domain: CovariateDomain) -> Self {
        let n = domain.len();
        Self {
            domain,
            control_mean: vec![0.0; n],
            treated_mean: vec![0.0; n],
        }
    }

    pub fn domain(&self) -> &CovariateDomain {
        &self.domain
    }

    pub fn control_mean(&self, index: usize) -> f64 {
        self.control_mean[index]
    }

    pub fn treated_mean(&self, index: usize) -> f64 {
        self.treated_mean[index]
    }
}

/// Inverse-propensity term for a single trial unit.
fn ht_term(treated: bool, outcome: f64, e: f64) -> f64 {
    if treated {
        outcome / e
    } else {
        -outcome / (1.0 - e)
    }
}

fn unit_outcome(unit: &crate::domain::UnitRecord) -> Result<f64> {
    unit.outcome
        .ok_or_else(|| Error::MissingOutcome(unit.unit_id.clone()))
}

/// Per-level treatment effect from the trial units at `level`: the mean of
/// inverse-propensity-weighted outcomes over the cell.
pub fn ht_cate(data: &Dataset, level: &str, e: &PropensityMap) -> Result<f64> {
    data.domain().ensure_matches(e.domain(), "propensity map")?;
    let idx = data
        .domain()
        .index_of(level)
        .ok_or_else(|| Error::UnknownLevel(level.to_string()))?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (unit, li) in data.iter_trial() {
        if li == idx {
            sum += ht_term(unit.treated, unit_outcome(unit)?, e.value(idx));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyCell(level.to_string()));
    }
    Ok(sum / count as f64)
}

/// Kernel-smoothed per-level treatment effect around the numeric level value
/// `target_value`. Weights are normalized by the largest kernel weight, so a
/// compact-support kernel with bandwidth below the level spacing reproduces
/// `ht_cate` exactly.
pub fn kernel_cate(
    data: &Dataset,
    target_value: f64,
    kernel: &KernelSpec,
    e: &PropensityMap,
) -> Result<f64> {
    data.domain().ensure_matches(e.domain(), "propensity map")?;
    let values = data.domain().numeric_values()?;
    let h = kernel.bandwidth();

    let mut max_weight = 0.0f64;
    for (_, li) in data.iter_trial() {
        let w = kernel.kind.evaluate((values[li] - target_value) / h);
        max_weight = max_weight.max(w);
    }
    if max_weight <= 0.0 {
        return Err(Error::ZeroKernelMass(target_value));
    }

    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for (unit, li) in data.iter_trial() {
        let w = kernel.kind.evaluate((values[li] - target_value) / h) / max_weight;
        if w > 0.0 {
            numerator += w * ht_term(unit.treated, unit_outcome(unit)?, e.value(li));
            denominator += w;
        }
    }
    Ok(numerator / denominator)
}

/// Reweighted per-level effects given precomputed cell sums and counts.
/// Shared by the dataset-facing estimator and the simulation loops so both
/// routes evaluate the identical expression.
pub(crate) fn ipsw_from_cells(
    target: &Allocation,
    cell_sums: &[f64],
    cell_counts: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for (m, &p) in target.probs().iter().enumerate() {
        if p > 0.0 {
            if cell_counts[m] == 0 {
                return Err(Error::PositivityViolation(
                    target.domain().level(m).to_string(),
                ));
            }
            total += p * cell_sums[m] / cell_counts[m] as f64;
        }
    }
    Ok(total)
}

fn trial_cells(data: &Dataset, e: &PropensityMap) -> Result<(Vec<f64>, Vec<usize>)> {
    let m = data.domain().len();
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for (unit, li) in data.iter_trial() {
        sums[li] += ht_term(unit.treated, unit_outcome(unit)?, e.value(li));
        counts[li] += 1;
    }
    Ok((sums, counts))
}

/// Target-cohort average treatment effect: per-level effects reweighted by
/// the target covariate distribution. Every level carrying target mass must
/// have at least one trial unit.
pub fn ipsw_ate(data: &Dataset, target: &Allocation, e: &PropensityMap) -> Result<f64> {
    data.domain().ensure_matches(target.domain(), "target allocation")?;
    data.domain().ensure_matches(e.domain(), "propensity map")?;
    let (sums, counts) = trial_cells(data, e)?;
    ipsw_from_cells(target, &sums, &counts)
}

/// The same estimator written as a per-unit weighted sum, with the trial
/// covariate distribution estimated by empirical cell frequencies. Kept as
/// an independent algebraic route for cross-checking `ipsw_ate`.
pub fn ipsw_ate_unit_weighted(data: &Dataset, target: &Allocation, e: &PropensityMap) -> Result<f64> {
    data.domain().ensure_matches(target.domain(), "target allocation")?;
    data.domain().ensure_matches(e.domain(), "propensity map")?;
    let m = data.domain().len();
    let mut counts = vec![0usize; m];
    let mut n_trial = 0usize;
    for (_, li) in data.iter_trial() {
        counts[li] += 1;
        n_trial += 1;
    }
    if n_trial == 0 {
        return Err(Error::EmptyTrial);
    }
    for (mi, &p) in target.probs().iter().enumerate() {
        if p > 0.0 && counts[mi] == 0 {
            return Err(Error::PositivityViolation(
                data.domain().level(mi).to_string(),
            ));
        }
    }
    let mut total = 0.0;
    for (unit, li) in data.iter_trial() {
        let p = target.prob(li);
        if p > 0.0 {
            let empirical = counts[li] as f64 / n_trial as f64;
            total += p / empirical * ht_term(unit.treated, unit_outcome(unit)?, e.value(li));
        }
    }
    Ok(total / n_trial as f64)
}

/// Kernel-smoothed reweighted estimator: per-level kernel effects weighted
/// by the target distribution.
pub fn kernel_ipsw_ate(
    data: &Dataset,
    target: &Allocation,
    kernel: &KernelSpec,
    e: &PropensityMap,
) -> Result<f64> {
    data.domain().ensure_matches(target.domain(), "target allocation")?;
    let values = data.domain().numeric_values()?;
    let mut total = 0.0;
    for (m, &p) in target.probs().iter().enumerate() {
        if p > 0.0 {
            total += p * kernel_cate(data, values[m], kernel, e)?;
        }
    }
    Ok(total)
}

/// Influence-function value for one observation.
pub fn influence_value(
    outcome: f64,
    treated: bool,
    level: &str,
    e: &PropensityMap,
    model: &OutcomeModel,
) -> Result<f64> {
    e.domain().ensure_matches(model.domain(), "outcome model")?;
    let idx = e
        .domain()
        .index_of(level)
        .ok_or_else(|| Error::UnknownLevel(level.to_string()))?;
    let m1 = model.treated_mean(idx);
    let m0 = model.control_mean(idx);
    let ev = e.value(idx);
    let residual = if treated {
        (outcome - m1) / ev
    } else {
        -(outcome - m0) / (1.0 - ev)
    };
    Ok(residual + m1 - m0)
}

/// Augmented inverse-propensity estimate of the trial average treatment
/// effect: the mean influence-function value over trial units.
pub fn aipw_ate(data: &Dataset, e: &PropensityMap, model: &OutcomeModel) -> Result<f64> {
    data.domain().ensure_matches(e.domain(), "propensity map")?;
    data.domain().ensure_matches(model.domain(), "outcome model")?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (unit, li) in data.iter_trial() {
        let y = unit_outcome(unit)?;
        let m1 = model.treated_mean(li);
        let m0 = model.control_mean(li);
        let ev = e.value(li);
        let residual = if unit.treated {
            (y - m1) / ev
        } else {
            -(y - m0) / (1.0 - ev)
        };
        sum += residual + m1 - m0;
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyTrial);
    }
    Ok(sum / count as f64)
}

/// Influence-function standard deviation per level, from known (or assumed)
/// arm variances: sigma^2 = var_treated/e + var_control/(1-e). Under complete
/// randomization this is the conditional variability the variance formulas
/// use.
pub fn sigma_from_arm_variances(
    var_treated: &[f64],
    var_control: &[f64],
    e: &PropensityMap,
) -> Result<SigmaProfile> {
    let domain = e.domain();
    if var_treated.len() != domain.len() || var_control.len() != domain.len() {
        return Err(Error::DomainMismatch(format!(
            "arm variances: expected {} entries per arm",
            domain.len()
        )));
    }
    let mut sigma = Vec::with_capacity(domain.len());
    for m in 0..domain.len() {
        for &v in [var_treated[m], var_control[m]].iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidVariance {
                    level: domain.level(m).to_string(),
                    value: v,
                });
            }
        }
        let ev = e.value(m);
        sigma.push((var_treated[m] / ev + var_control[m] / (1.0 - ev)).sqrt());
    }
    SigmaProfile::new(domain.clone(), sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::UnitRecord;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn domain(levels: &[&str]) -> CovariateDomain {
        CovariateDomain::new(levels.to_vec()).unwrap()
    }

    fn unit(id: &str, trial: bool, treated: bool, level: &str, y: f64) -> UnitRecord {
        UnitRecord {
            unit_id: id.into(),
            trial,
            treated,
            level: level.into(),
            outcome: Some(y),
        }
    }

    fn trial_dataset(rows: &[(bool, &str, f64)]) -> Dataset {
        let levels: Vec<String> = {
            let mut seen = Vec::new();
            for (_, l, _) in rows {
                if !seen.contains(&l.to_string()) {
                    seen.push(l.to_string());
                }
            }
            seen
        };
        let domain = CovariateDomain::new(levels).unwrap();
        let units = rows
            .iter()
            .enumerate()
            .map(|(i, &(treated, level, y))| unit(&format!("u{i}"), true, treated, level, y))
            .collect();
        Dataset::new(domain, units).unwrap()
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        let scale = a.abs().max(b.abs()).max(1e-300);
        (a - b).abs() <= tol * scale
    }

    #[test]
    fn kernel_norms_match_closed_form_integrals() {
        assert_eq!(KernelKind::Epanechnikov.squared_l2_norm(), 0.6);
        assert_eq!(KernelKind::Uniform.squared_l2_norm(), 0.5);
        assert!(rel_close(
            KernelKind::Gaussian.squared_l2_norm(),
            0.28209479177387814,
            1e-15
        ));
        // numeric quadrature cross-check
        for kind in [KernelKind::Epanechnikov, KernelKind::Uniform, KernelKind::Gaussian] {
            let step = 1e-4;
            let mut integral = 0.0;
            let mut u = -20.0;
            while u < 20.0 {
                let k = kind.evaluate(u);
                integral += k * k * step;
                u += step;
            }
            assert!(
                rel_close(integral, kind.squared_l2_norm(), 1e-3),
                "quadrature mismatch for {kind:?}: {integral}"
            );
        }
    }

    #[test]
    fn ht_cate_hand_computed_cell() {
        let data = trial_dataset(&[(true, "a", 2.0), (false, "a", 1.0)]);
        let e = PropensityMap::uniform(data.domain().clone(), 0.5).unwrap();
        // (2/0.5 - 1/0.5) / 2
        assert_eq!(ht_cate(&data, "a", &e).unwrap(), 1.0);
    }

    #[test]
    fn ht_cate_equal_arms_cancel() {
        for c in [-3.0, 0.0, 7.5] {
            let data = trial_dataset(&[(true, "a", c), (false, "a", c)]);
            let e = PropensityMap::uniform(data.domain().clone(), 0.5).unwrap();
            assert_eq!(ht_cate(&data, "a", &e).unwrap(), 0.0);
        }
    }

    #[test]
    fn ht_cate_empty_cell_errors() {
        let d = domain(&["a", "b"]);
        let data = Dataset::new(d.clone(), vec![unit("u0", true, true, "a", 1.0)]).unwrap();
        let e = PropensityMap::uniform(d, 0.5).unwrap();
        assert!(matches!(
            ht_cate(&data, "b", &e).unwrap_err(),
            Error::EmptyCell(l) if l == "b"
        ));
    }

    #[test]
    fn kernel_cate_reduces_to_ht_cate_below_level_spacing() {
        let data = trial_dataset(&[
            (true, "1", 2.0),
            (false, "1", 1.0),
            (true, "2", 5.0),
            (false, "2", -1.0),
            (true, "3", 0.5),
            (false, "3", 0.25),
        ]);
        let e = PropensityMap::uniform(data.domain().clone(), 0.5).unwrap();
        let kernel = KernelSpec::new(KernelKind::Epanechnikov, 0.5).unwrap();
        for (level, x) in [("1", 1.0), ("2", 2.0), ("3", 3.0)] {
            let plain = ht_cate(&data, level, &e).unwrap();
            let smoothed = kernel_cate(&data, x, &kernel, &e).unwrap();
            assert_eq!(smoothed, plain, "level {level}");
        }
    }

    #[test]
    fn kernel_cate_is_linear_in_outcomes() {
        let rows = [
            (true, "1", 2.0),
            (false, "1", 1.0),
            (true, "2", 5.0),
            (false, "2", -1.0),
        ];
        let scale = 3.25;
        let scaled: Vec<(bool, &str, f64)> =
            rows.iter().map(|&(t, l, y)| (t, l, y * scale)).collect();
        let data = trial_dataset(&rows);
        let data_scaled = trial_dataset(&scaled);
        let e = PropensityMap::uniform(data.domain().clone(), 0.4).unwrap();
        let kernel = KernelSpec::new(KernelKind::Gaussian, 2.0).unwrap();
        let base = kernel_cate(&data, 1.5, &kernel, &e).unwrap();
        let lifted = kernel_cate(&data_scaled, 1.5, &kernel, &e).unwrap();
        assert!(rel_close(lifted, scale * base, 1e-12));
    }

    #[test]
    fn kernel_cate_with_huge_bandwidth_matches_pooled_estimate() {
        let rows = [
            (true, "1", 2.0),
            (false, "1", 1.0),
            (true, "2", 5.0),
            (false, "2", -1.0),
            (true, "3", 0.5),
        ];
        let data = trial_dataset(&rows);
        let e = PropensityMap::uniform(data.domain().clone(), 0.5).unwrap();
        let kernel = KernelSpec::new(KernelKind::Gaussian, 1e12).unwrap();
        // pooled estimate: mean of ht terms over all trial units
        let pooled = (2.0 / 0.5 - 1.0 / 0.5 + 5.0 / 0.5 - (-1.0) / 0.5 + 0.5 / 0.5) / 5.0;
        let smoothed = kernel_cate(&data, 2.0, &kernel, &e).unwrap();
        assert!(rel_close(smoothed, pooled, 1e-12));
    }

    #[test]
    fn kernel_cate_zero_mass_errors() {
        let data = trial_dataset(&[(true, "1", 2.0)]);
        let e = PropensityMap::uniform(data.domain().clone(), 0.5).unwrap();
        let kernel = KernelSpec::new(KernelKind::Epanechnikov, 0.5).unwrap();
        assert!(matches!(
            kernel_cate(&data, 10.0, &kernel, &e).unwrap_err(),
            Error::ZeroKernelMass(_)
        ));
    }

    #[test]
    fn default_bandwidth_is_half_min_spacing() {
        let d = domain(&["1", "2.5", "4"]);
        let k = KernelSpec::with_default_bandwidth(KernelKind::Epanechnikov, &d).unwrap();
        assert_eq!(k.bandwidth(), 0.75);
        let non_numeric = domain(&["a", "b"]);
        assert!(KernelSpec::with_default_bandwidth(KernelKind::Uniform, &non_numeric).is_err());
    }

    #[test]
    fn ipsw_single_level_equals_cell_effect() {
        let data = trial_dataset(&[(true, "a", 2.0), (false, "a", 1.0)]);
        let e = PropensityMap::uniform(data.domain().clone(), 0.5).unwrap();
        let target = Allocation::from_weights(data.domain().clone(), vec![1.0]).unwrap();
        assert_eq!(
            ipsw_ate(&data, &target, &e).unwrap(),
            ht_cate(&data, "a", &e).unwrap()
        );
    }

    #[test]
    fn ipsw_weights_cell_effects() {
        // per-level effects 1 and 2 under e = 0.5
        let data = trial_dataset(&[
            (true, "a", 2.0),
            (false, "a", 1.0),
            (true, "b", 2.5),
            (false, "b", 0.5),
        ]);
        let e = PropensityMap::uniform(data.domain().clone(), 0.5).unwrap();
        assert_eq!(ht_cate(&data, "a", &e).unwrap(), 1.0);
        assert_eq!(ht_cate(&data, "b", &e).unwrap(), 2.0);
        let target =
            Allocation::from_weights(data.domain().clone(), vec![0.3, 0.7]).unwrap();
        assert!(rel_close(ipsw_ate(&data, &target, &e).unwrap(), 1.7, 1e-15));
    }

    #[test]
    fn ipsw_names_level_on_positivity_violation() {
        let d = domain(&["a", "b"]);
        let data = Dataset::new(
            d.clone(),
            vec![unit("u0", true, true, "a", 1.0), unit("u1", true, false, "a", 0.0)],
        )
        .unwrap();
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let target = Allocation::from_weights(d, vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            ipsw_ate(&data, &target, &e).unwrap_err(),
            Error::PositivityViolation(l) if l == "b"
        ));
    }

    #[test]
    fn unit_weighted_form_agrees_with_level_weighted_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let levels = ["1", "2", "3"];
            let mut rows = Vec::new();
            // guarantee one treated and one control unit per level, then noise
            for l in levels {
                rows.push((true, l, rng.random::<f64>() * 4.0 - 2.0));
                rows.push((false, l, rng.random::<f64>() * 4.0 - 2.0));
            }
            for _ in 0..40 {
                let l = levels[rng.random_range(0..3)];
                rows.push((rng.random_bool(0.5), l, rng.random::<f64>() * 4.0 - 2.0));
            }
            let data = trial_dataset(&rows);
            let e = PropensityMap::uniform(data.domain().clone(), 0.45).unwrap();
            let w = vec![
                rng.random::<f64>() + 0.1,
                rng.random::<f64>() + 0.1,
                rng.random::<f64>() + 0.1,
            ];
            let target = Allocation::from_weights(data.domain().clone(), w).unwrap();
            let by_level = ipsw_ate(&data, &target, &e).unwrap();
            let by_unit = ipsw_ate_unit_weighted(&data, &target, &e).unwrap();
            assert!(
                rel_close(by_level, by_unit, 1e-10),
                "{by_level} vs {by_unit}"
            );
        }
    }

    #[test]
    fn kernel_ipsw_reduces_to_plain_ipsw() {
        let data = trial_dataset(&[
            (true, "1", 2.0),
            (false, "1", 1.0),
            (true, "2", 5.0),
            (false, "2", -1.0),
        ]);
        let e = PropensityMap::uniform(data.domain().clone(), 0.5).unwrap();
        let target = Allocation::from_weights(data.domain().clone(), vec![0.4, 0.6]).unwrap();
        let kernel = KernelSpec::new(KernelKind::Epanechnikov, 0.5).unwrap();
        assert_eq!(
            kernel_ipsw_ate(&data, &target, &kernel, &e).unwrap(),
            ipsw_ate(&data, &target, &e).unwrap()
        );
    }

    #[test]
    fn kernel_ipsw_concentrated_target_matches_kernel_cate() {
        let data = trial_dataset(&[
            (true, "1", 2.0),
            (false, "1", 1.0),
            (true, "2", 5.0),
            (false, "2", -1.0),
        ]);
        let e = PropensityMap::uniform(data.domain().clone(), 0.5).unwrap();
        let target = Allocation::point_mass(data.domain().clone(), "2").unwrap();
        let kernel = KernelSpec::new(KernelKind::Gaussian, 0.7).unwrap();
        assert_eq!(
            kernel_ipsw_ate(&data, &target, &kernel, &e).unwrap(),
            kernel_cate(&data, 2.0, &kernel, &e).unwrap()
        );
    }

    #[test]
    fn kernel_ipsw_propagates_zero_mass() {
        let d = domain(&["1", "2"]);
        let data = Dataset::new(
            d.clone(),
            vec![unit("u0", true, true, "1", 1.0)],
        )
        .unwrap();
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let target = Allocation::from_weights(d, vec![0.5, 0.5]).unwrap();
        let kernel = KernelSpec::new(KernelKind::Uniform, 0.25).unwrap();
        assert!(matches!(
            kernel_ipsw_ate(&data, &target, &kernel, &e).unwrap_err(),
            Error::ZeroKernelMass(_)
        ));
    }

    #[test]
    fn aipw_with_zero_model_matches_ht_difference() {
        let data = trial_dataset(&[
            (true, "a", 2.0),
            (false, "a", 1.0),
            (true, "b", 4.0),
            (false, "b", -2.0),
        ]);
        let e = PropensityMap::uniform(data.domain().clone(), 0.5).unwrap();
        let model = OutcomeModel::zero(data.domain().clone());
        let pooled_ht = (2.0 / 0.5 - 1.0 / 0.5 + 4.0 / 0.5 - (-2.0) / 0.5) / 4.0;
        assert_eq!(aipw_ate(&data, &e, &model).unwrap(), pooled_ht);
    }

    #[test]
    fn aipw_with_exact_cell_means_matches_mean_difference() {
        // balanced 4-unit dataset: treated {3, 5}, control {1, 1}
        let data = trial_dataset(&[
            (true, "a", 3.0),
            (true, "a", 5.0),
            (false, "a", 1.0),
            (false, "a", 1.0),
        ]);
        let e = PropensityMap::uniform(data.domain().clone(), 0.5).unwrap();
        let model =
            OutcomeModel::new(data.domain().clone(), vec![1.0], vec![4.0]).unwrap();
        // residuals cancel pairwise, leaving m1 - m0 = 3
        assert_eq!(aipw_ate(&data, &e, &model).unwrap(), 3.0);
    }

    #[test]
    fn aipw_single_unit_hand_value() {
        let data = trial_dataset(&[(true, "a", 1.0)]);
        let e = PropensityMap::uniform(data.domain().clone(), 0.5).unwrap();
        let model = OutcomeModel::zero(data.domain().clone());
        assert_eq!(aipw_ate(&data, &e, &model).unwrap(), 2.0);
    }

    #[test]
    fn influence_value_zero_residual_cases() {
        let d = domain(&["a"]);
        let e = PropensityMap::uniform(d.clone(), 0.3).unwrap();
        let model = OutcomeModel::new(d, vec![2.0], vec![5.0]).unwrap();
        assert_eq!(influence_value(5.0, true, "a", &e, &model).unwrap(), 3.0);
        assert_eq!(influence_value(2.0, false, "a", &e, &model).unwrap(), 3.0);
    }

    #[test]
    fn influence_value_inverse_propensity_scaling() {
        let d = domain(&["a"]);
        let e = PropensityMap::uniform(d.clone(), 0.25).unwrap();
        let model = OutcomeModel::zero(d);
        assert_eq!(influence_value(1.0, true, "a", &e, &model).unwrap(), 4.0);
    }

    #[test]
    fn sigma_from_arm_variances_symmetric_case() {
        let d = domain(&["a"]);
        let e = PropensityMap::uniform(d, 0.5).unwrap();
        let sigma = sigma_from_arm_variances(&[1.0], &[1.0], &e).unwrap();
        assert_eq!(sigma.values(), &[2.0]);
    }

    #[test]
    fn sigma_from_arm_variances_zero_case() {
        let d = domain(&["a", "b"]);
        let e = PropensityMap::uniform(d, 0.5).unwrap();
        let sigma = sigma_from_arm_variances(&[0.0, 0.0], &[0.0, 0.0], &e).unwrap();
        assert_eq!(sigma.values(), &[0.0, 0.0]);
    }

    /// Closed-form conditional variability of the synthetic outcome law
    /// (treated outcome 1 - x + eps, control outcome 2x + x^4 eps) at e = 0.5,
    /// confirmed by Monte Carlo.
    #[test]
    fn sigma_from_arm_variances_synthetic_law_values() {
        let d = domain(&["1", "2", "3"]);
        let e = PropensityMap::uniform(d, 0.5).unwrap();
        let var_treated = [1.0, 1.0, 1.0];
        let var_control = [1.0, 256.0, 6561.0]; // x^8
        let sigma = sigma_from_arm_variances(&var_treated, &var_control, &e).unwrap();
        let expected_sq = [4.0, 514.0, 13124.0];
        for (s, want) in sigma.values().iter().zip(expected_sq) {
            assert!(rel_close(s * s, want, 1e-12));
        }

        // Monte Carlo oracle: sample arm outcomes and compare variances.
        let mut rng = ChaCha8Rng::seed_from_u64(20240817);
        let draws = 1_000_000usize;
        for (i, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            let mut sum1 = 0.0;
            let mut sq1 = 0.0;
            let mut sum0 = 0.0;
            let mut sq0 = 0.0;
            for _ in 0..draws {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let y1 = 1.0 - x + eps;
                let y0 = 2.0 * x + x.powi(4) * eps;
                sum1 += y1;
                sq1 += y1 * y1;
                sum0 += y0;
                sq0 += y0 * y0;
            }
            let n = draws as f64;
            let v1 = (sq1 - sum1 * sum1 / n) / (n - 1.0);
            let v0 = (sq0 - sum0 * sum0 / n) / (n - 1.0);
            let sigma_sq_mc = v1 / 0.5 + v0 / 0.5;
            assert!(
                rel_close(sigma_sq_mc, expected_sq[i], 0.01),
                "level {i}: {sigma_sq_mc} vs {}",
                expected_sq[i]
            );
        }
    }

    /// The influence function has mean tau(x) and variance sigma^2(x) at each
    /// level of the synthetic outcome law (1e6 draws, 1% tolerance).
    #[test]
    fn influence_value_moments_match_closed_form() {
        let d = domain(&["1", "2", "3"]);
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        // true per-level means of the synthetic law
        let m0: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| 2.0 * x).collect();
        let m1: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| 1.0 - x).collect();
        let model = OutcomeModel::new(d.clone(), m0, m1).unwrap();
        let expected_sq = [4.0, 514.0, 13124.0];
        let mut rng = ChaCha8Rng::seed_from_u64(7_654_321);
        let draws = 1_000_000usize;
        for (idx, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            let level = d.level(idx).to_string();
            let tau = 1.0 - 3.0 * x;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for _ in 0..draws {
                let eps: f64 = StandardNormal.sample(&mut rng);
                let treated = rng.random_bool(0.5);
                let y = if treated {
                    1.0 - x + eps
                } else {
                    2.0 * x + x.powi(4) * eps
                };
                let psi = influence_value(y, treated, &level, &e, &model).unwrap();
                sum += psi;
                sq += psi * psi;
            }
            let n = draws as f64;
            let mean = sum / n;
            let var = (sq - sum * sum / n) / (n - 1.0);
            let se = (var / n).sqrt();
            assert!(
                (mean - tau).abs() <= 4.0 * se,
                "level {level}: mean {mean} vs tau {tau}"
            );
            assert!(
                rel_close(var, expected_sq[idx], 0.01),
                "level {level}: var {var} vs {}",
                expected_sq[idx]
            );
        }
    }

    /// Reweighted estimates over fresh randomized datasets are unbiased for
    /// the target-cohort effect.
    #[test]
    fn ipsw_is_unbiased_over_replications() {
        let d = domain(&["1", "2", "3"]);
        let e = PropensityMap::uniform(d.clone(), 0.5).unwrap();
        let target = Allocation::from_weights(d.clone(), vec![0.3, 0.2, 0.5]).unwrap();
        let trial = Allocation::from_weights(d.clone(), vec![0.25, 0.35, 0.40]).unwrap();
        let true_ate = 0.3 * (1.0 - 3.0) + 0.2 * (1.0 - 6.0) + 0.5 * (1.0 - 9.0);
        assert_eq!(true_ate, -5.6);

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let reps = 400usize;
        let n_trial = 240u64;
        let counts = trial.integer_counts(n_trial);
        let mut estimates = Vec::with_capacity(reps);
        for _ in 0..reps {
            let mut units = Vec::new();
            let mut id = 0usize;
            for (li, &c) in counts.iter().enumerate() {
                let x = (li + 1) as f64;
                for _ in 0..c {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    let treated = rng.random_bool(0.5);
                    let y = if treated {
                        1.0 - x + eps
                    } else {
                        2.0 * x + x.powi(4) * eps
                    };
                    units.push(unit(&format!("u{id}"), true, treated, d.level(li), y));
                    id += 1;
                }
            }
            let data = Dataset::new(d.clone(), units).unwrap();
            estimates.push(ipsw_ate(&data, &target, &e).unwrap());
        }
        let n = reps as f64;
        let mean = estimates.iter().sum::<f64>() / n;
        let var = estimates.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(
            (mean - true_ate).abs() <= 3.0 * se,
            "mean {mean} vs {true_ate} (se {se})"
        );
    }
}
