//! Importance-weighted conformal prediction under covariate shift.
//!
//! When test features are drawn from a different marginal than
//! calibration features (but the conditional label law is unchanged),
//! exchangeability is restored by weighting every calibration score with
//! the likelihood ratio `w(X) = dP̃_X(X)/dP_X(X)`. This module estimates
//! the ratio with Gaussian kernel density estimates, normalizes the
//! weights into a discrete score distribution with one mass at `+∞`
//! ([`WeightedDistribution`]), and takes quantiles of that distribution
//! ([`weighted_quantile`]).
//!
//! Densities are estimated on standardized features (see
//! [`Standardizer`]) with a single isotropic bandwidth chosen by K-fold
//! cross-validated log-likelihood ([`bandwidth_grid_search`]). Ratios are
//! stabilized by flooring the denominator density and capping the ratio,
//! since raw density ratios in the tails would let a handful of points
//! dominate the weighted distribution.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conformal::{ConfidenceLevel, Quantile, ScoreSet};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default density floor applied to the calibration density in
/// likelihood ratios (density units).
pub const DEFAULT_DENSITY_FLOOR: f64 = 1e-12;

/// Default cap applied to likelihood ratios.
pub const DEFAULT_RATIO_CAP: f64 = 20.0;

/// Default fold count for bandwidth cross-validation.
pub const DEFAULT_CV_FOLDS: usize = 5;

/// Gaussian kernel density estimate: sample points plus one isotropic
/// bandwidth.
#[derive(Debug, Clone)]
pub struct KdeModel<F> {
    points: Vec<Vec<F>>,
    bandwidth: F,
    dim: usize,
}

impl<F: Real> KdeModel<F> {
    /// Dimension of the fitted points.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of fitted points.
    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Whether the model holds no points (never true for a fitted model).
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The bandwidth `h`.
    pub fn bandwidth(&self) -> F {
        self.bandwidth
    }

    /// Mixture density at `x`: `(1/n) Σ_i N(x; x_i, h²·I)`.
    ///
    /// The kernels are fully normalized so densities are comparable
    /// across sample sizes; queries far from every point may underflow to
    /// `0.0`, which downstream ratio computations handle by flooring.
    pub fn density(&self, x: &[F]) -> Result<F> {
        Ok(self.log_density(x)?.exp())
    }

    /// Natural log of [`KdeModel::density`], evaluated stably via
    /// log-sum-exp (used by bandwidth cross-validation, where densities
    /// of held-out points can underflow).
    pub fn log_density(&self, x: &[F]) -> Result<F> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        let h2 = self.bandwidth * self.bandwidth;
        let exponents: Vec<F> = self
            .points
            .iter()
            .map(|p| {
                let d2: F = p
                    .iter()
                    .zip(x)
                    .map(|(&pi, &xi)| (pi - xi) * (pi - xi))
                    .sum();
                -d2 / (F::from_config(2.0) * h2)
            })
            .collect();
        let max = exponents
            .iter()
            .copied()
            .fold(F::neg_infinity(), F::max);
        if !max.is_finite() {
            // All exponents overflowed; report the degenerate value as-is.
            return Ok(max);
        }
        let sum: F = exponents.iter().map(|&e| (e - max).exp()).sum();
        let tau = F::from_config(2.0) * F::from_config(std::f64::consts::PI);
        let log_norm = F::from_count(self.dim).mul_add(
            (tau * h2).ln() * F::from_config(0.5),
            F::from_count(self.len()).ln(),
        );
        Ok(max + sum.ln() - log_norm)
    }
}

/// Validates and stores a KDE: at least two points of consistent
/// dimension and a strictly positive bandwidth.
pub fn kde_fit<F: Real>(points: Vec<Vec<F>>, bandwidth: F) -> Result<KdeModel<F>> {
    if points.len() < 2 {
        return Err(Error::invalid(format!(
            "kde needs at least 2 points, got {}",
            points.len()
        )));
    }
    if !(bandwidth.is_finite() && bandwidth > F::zero()) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let dim = points[0].len();
    if dim == 0 {
        return Err(Error::invalid("kde points must have at least one coordinate"));
    }
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
        }
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("kde point {i} has a non-finite coordinate")));
        }
    }
    Ok(KdeModel { points, bandwidth, dim })
}

/// Stabilized likelihood ratio `dP̃(x)/dP(x)` between two fitted KDEs.
///
/// Both densities are floored before dividing (so a query far outside the
/// calibration support yields a large-but-finite ratio, and one far
/// outside both supports yields 1), and the result is capped at `cap`.
/// The returned value is always in `(0, cap]`.
pub fn likelihood_ratio<F: Real>(
    test_kde: &KdeModel<F>,
    cal_kde: &KdeModel<F>,
    x: &[F],
    floor: F,
    cap: F,
) -> Result<F> {
    if test_kde.dim() != cal_kde.dim() {
        return Err(Error::DimensionMismatch { expected: cal_kde.dim(), got: test_kde.dim() });
    }
    if !(floor > F::zero() && cap > floor) {
        return Err(Error::invalid(format!(
            "need 0 < floor < cap, got floor {floor}, cap {cap}"
        )));
    }
    let num = test_kde.density(x)?.max(floor);
    let den = cal_kde.density(x)?.max(floor);
    Ok((num / den).min(cap))
}

/// Likelihood-ratio weights for one test query: one weight per
/// calibration point plus the weight of the query itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftWeights<F> {
    /// `w(X_i^c)` for each calibration point.
    pub cal_weights: Vec<F>,
    /// `w(x)` for the test query.
    pub test_weight: F,
}

impl<F: Real> ShiftWeights<F> {
    /// Validates that every weight is finite and strictly positive.
    pub fn new(cal_weights: Vec<F>, test_weight: F) -> Result<Self> {
        for (i, w) in cal_weights.iter().enumerate() {
            if !(w.is_finite() && *w > F::zero()) {
                return Err(Error::invalid(format!(
                    "calibration weight {i} must be finite and > 0, got {w}"
                )));
            }
        }
        if !(test_weight.is_finite() && test_weight > F::zero()) {
            return Err(Error::invalid(format!(
                "test weight must be finite and > 0, got {test_weight}"
            )));
        }
        Ok(ShiftWeights { cal_weights, test_weight })
    }

    /// Unit weights (the exchangeable, no-shift case).
    pub fn unit(n_cal: usize) -> Self {
        ShiftWeights { cal_weights: vec![F::one(); n_cal], test_weight: F::one() }
    }
}

/// Normalizes shift weights into probability masses:
/// `cal_masses[i] = w_i / (Σ_j w_j + w(x))` and
/// `test_mass = w(x) / (Σ_j w_j + w(x))`.
pub fn normalize_weights<F: Real>(weights: &ShiftWeights<F>) -> (Vec<F>, F) {
    let denom: F = weights.cal_weights.iter().copied().sum::<F>() + weights.test_weight;
    let cal_masses = weights.cal_weights.iter().map(|&w| w / denom).collect();
    (cal_masses, weights.test_weight / denom)
}

/// Discrete distribution of weighted calibration scores plus one point
/// mass at `+∞`.
///
/// Atoms are kept sorted ascending by score; equal scores are merged by
/// summing their masses (point-mass additivity), which leaves every
/// cumulative quantity unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedDistribution<F> {
    atoms: Vec<(F, F)>,
    infinity_mass: F,
}

/// Total-mass tolerance for [`WeightedDistribution`] construction.
const MASS_SUM_TOLERANCE: f64 = 1e-12;

impl<F: Real> WeightedDistribution<F> {
    /// Builds a distribution from raw `(score, mass)` atoms and the mass
    /// at infinity, validating that masses are nonnegative and total 1.
    pub fn new(atoms: Vec<(F, F)>, infinity_mass: F) -> Result<Self> {
        if infinity_mass < F::zero() || infinity_mass > F::one() {
            return Err(Error::invalid(format!(
                "infinity mass must lie in [0,1], got {infinity_mass}"
            )));
        }
        let mut total = infinity_mass;
        for &(score, mass) in &atoms {
            if !score.is_finite() || score < F::zero() {
                return Err(Error::invalid(format!(
                    "atom score must be finite and >= 0, got {score}"
                )));
            }
            if !mass.is_finite() || mass < F::zero() {
                return Err(Error::invalid(format!("atom mass must be >= 0, got {mass}")));
            }
            total = total + mass;
        }
        if (total - F::one()).abs() > F::from_config(MASS_SUM_TOLERANCE) {
            return Err(Error::invalid(format!("masses must sum to 1, got {total}")));
        }
        let mut sorted = atoms;
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores validated finite"));
        let mut merged: Vec<(F, F)> = Vec::with_capacity(sorted.len());
        for (score, mass) in sorted {
            match merged.last_mut() {
                Some(last) if last.0 == score => last.1 = last.1 + mass,
                _ => merged.push((score, mass)),
            }
        }
        Ok(WeightedDistribution { atoms: merged, infinity_mass })
    }

    /// The sorted `(score, mass)` atoms.
    pub fn atoms(&self) -> &[(F, F)] {
        &self.atoms
    }

    /// The point mass at `+∞`.
    pub fn infinity_mass(&self) -> F {
        self.infinity_mass
    }

    /// Total mass of the finite atoms (`1 − infinity_mass` up to
    /// rounding).
    pub fn finite_mass(&self) -> F {
        self.atoms.iter().map(|&(_, m)| m).sum()
    }
}

/// Builds the weighted calibration-score distribution for one test query:
/// an atom at every calibration score with its normalized mass, plus the
/// test mass at `+∞`.
pub fn weighted_distribution<F: Real>(
    cal_scores: &ScoreSet<F>,
    weights: &ShiftWeights<F>,
) -> Result<WeightedDistribution<F>> {
    if cal_scores.len() != weights.cal_weights.len() {
        return Err(Error::LengthMismatch {
            left: cal_scores.len(),
            right: weights.cal_weights.len(),
            what: "calibration scores vs weights",
        });
    }
    let (cal_masses, test_mass) = normalize_weights(weights);
    let atoms = cal_scores
        .scores()
        .iter()
        .copied()
        .zip(cal_masses)
        .collect();
    WeightedDistribution::new(atoms, test_mass)
}

/// The `(1 − α)` quantile of a weighted score distribution: the smallest
/// atom score whose cumulative mass reaches `1 − α`, or `+∞` when only
/// the infinity mass gets there.
pub fn weighted_quantile<F: Real>(
    level: ConfidenceLevel<F>,
    dist: &WeightedDistribution<F>,
) -> Quantile<F> {
    let target = level.coverage_target();
    let mut cumulative = F::zero();
    for &(score, mass) in dist.atoms() {
        cumulative = cumulative + mass;
        if cumulative >= target {
            return Quantile::Finite(score);
        }
    }
    Quantile::Infinite
}

/// Per-coordinate affine map to zero mean and unit variance, fitted on
/// calibration features and applied to both splits so a single scalar
/// bandwidth is meaningful across heterogeneous units.
#[derive(Debug, Clone)]
pub struct Standardizer<F> {
    means: Vec<F>,
    scales: Vec<F>,
}

impl<F: Real> Standardizer<F> {
    /// Fits means and standard deviations on the given points. A
    /// coordinate with (near-)zero variance gets scale 1 so constant
    /// features pass through unchanged instead of dividing by zero.
    pub fn fit(points: &[Vec<F>]) -> Result<Self> {
        let first = points.first().ok_or(Error::Empty("standardizer points"))?;
        let dim = first.len();
        let n = F::from_count(points.len());
        let mut means = vec![F::zero(); dim];
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: p.len() });
            }
            for (m, &c) in means.iter_mut().zip(p) {
                *m = *m + c;
            }
        }
        for m in &mut means {
            *m = *m / n;
        }
        let mut scales = vec![F::zero(); dim];
        for p in points {
            for ((s, &c), &m) in scales.iter_mut().zip(p).zip(&means) {
                *s = *s + (c - m) * (c - m);
            }
        }
        for s in &mut scales {
            let sd = (*s / n).sqrt();
            *s = if sd > F::from_config(1e-12) { sd } else { F::one() };
        }
        Ok(Standardizer { means, scales })
    }

    /// Standardizes one point.
    pub fn apply(&self, point: &[F]) -> Result<Vec<F>> {
        if point.len() != self.means.len() {
            return Err(Error::DimensionMismatch {
                expected: self.means.len(),
                got: point.len(),
            });
        }
        Ok(point
            .iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(&c, (&m, &s))| (c - m) / s)
            .collect())
    }

    /// Standardizes a batch of points.
    pub fn apply_all(&self, points: &[Vec<F>]) -> Result<Vec<Vec<F>>> {
        points.iter().map(|p| self.apply(p)).collect()
    }
}

/// Selects a bandwidth from `grid` by K-fold cross-validated held-out
/// log-likelihood with fold assignment shuffled by `seed`.
///
/// Ties (including exact log-likelihood equality) break toward the
/// smaller bandwidth. Fails with [`Error::SearchFailure`] when every
/// candidate produces a degenerate (non-finite) mean log-likelihood.
pub fn bandwidth_grid_search<F: Real>(
    points: &[Vec<F>],
    grid: &[F],
    folds: usize,
    seed: u64,
) -> Result<F> {
    if grid.is_empty() {
        return Err(Error::Empty("bandwidth grid"));
    }
    if folds < 2 {
        return Err(Error::invalid(format!("need at least 2 folds, got {folds}")));
    }
    if points.len() < folds {
        return Err(Error::invalid(format!(
            "need at least as many points ({}) as folds ({folds})",
            points.len()
        )));
    }
    let max_fold = points.len().div_ceil(folds);
    if points.len() - max_fold < 2 {
        return Err(Error::invalid(format!(
            "{} points split into {folds} folds leaves a training part below 2",
            points.len()
        )));
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let fold_of: Vec<usize> = {
        let mut f = vec![0usize; points.len()];
        for (rank, &idx) in order.iter().enumerate() {
            f[idx] = rank % folds;
        }
        f
    };

    let mut candidates: Vec<F> = grid.to_vec();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite bandwidths"));

    let mut best: Option<(F, F)> = None;
    for &h in &candidates {
        let mut total = F::zero();
        let mut degenerate = false;
        'fold: for fold in 0..folds {
            let train: Vec<Vec<F>> = points
                .iter()
                .enumerate()
                .filter(|(i, _)| fold_of[*i] != fold)
                .map(|(_, p)| p.clone())
                .collect();
            let model = kde_fit(train, h)?;
            for (i, p) in points.iter().enumerate() {
                if fold_of[i] != fold {
                    continue;
                }
                let ll = model.log_density(p)?;
                if !ll.is_finite() {
                    degenerate = true;
                    break 'fold;
                }
                total = total + ll;
            }
        }
        if degenerate {
            continue;
        }
        let mean = total / F::from_count(points.len());
        match best {
            Some((_, best_ll)) if mean <= best_ll => {}
            _ => best = Some((h, mean)),
        }
    }
    match best {
        Some((h, _)) => Ok(h),
        None => Err(Error::SearchFailure {
            candidates: candidates
                .iter()
                .map(|h| h.to_f64().expect("finite bandwidth"))
                .collect(),
        }),
    }
}

/// Sorted calibration scores with weight prefix sums: the workhorse for
/// sweeping many test queries against one calibration set.
///
/// For a query with weight `w`, every per-query weighted quantity reduces
/// to a prefix-sum lookup against the threshold `(1 − α)(Σ w_i + w)`, so
/// one `O(n log n)` sort amortizes over all queries and levels. Results
/// agree with building a [`WeightedDistribution`] per query and calling
/// [`weighted_quantile`] on it.
#[derive(Debug, Clone)]
pub struct ScoreWeightTable<F> {
    scores: Vec<F>,
    prefix: Vec<F>,
    total_weight: F,
}

impl<F: Real> ScoreWeightTable<F> {
    /// Sorts calibration scores (carrying their weights) and accumulates
    /// weight prefix sums.
    pub fn new(scores: &[F], weights: &[F]) -> Result<Self> {
        if scores.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left: scores.len(),
                right: weights.len(),
                what: "scores vs weights",
            });
        }
        if scores.is_empty() {
            return Err(Error::Empty("score/weight table"));
        }
        for (&s, &w) in scores.iter().zip(weights) {
            if !s.is_finite() || s < F::zero() {
                return Err(Error::invalid(format!("score must be finite and >= 0, got {s}")));
            }
            if !(w.is_finite() && w > F::zero()) {
                return Err(Error::invalid(format!("weight must be finite and > 0, got {w}")));
            }
        }
        let mut pairs: Vec<(F, F)> = scores.iter().copied().zip(weights.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
        let mut prefix = Vec::with_capacity(pairs.len());
        let mut running = F::zero();
        for &(_, w) in &pairs {
            running = running + w;
            prefix.push(running);
        }
        Ok(ScoreWeightTable {
            scores: pairs.into_iter().map(|(s, _)| s).collect(),
            prefix,
            total_weight: running,
        })
    }

    /// Number of calibration entries.
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    /// Whether the table is empty (never true once constructed).
    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Sum of all calibration weights.
    pub fn total_weight(&self) -> F {
        self.total_weight
    }

    /// Calibration scores in ascending order.
    pub fn sorted_scores(&self) -> &[F] {
        &self.scores
    }

    /// Cumulative weight up to and including each sorted score; the last
    /// entry equals [`total_weight`](Self::total_weight).
    pub fn prefix_weights(&self) -> &[F] {
        &self.prefix
    }

    /// Weighted quantile for a query with weight `test_weight`.
    pub fn quantile(&self, level: ConfidenceLevel<F>, test_weight: F) -> Quantile<F> {
        let denom = self.total_weight + test_weight;
        let threshold = level.coverage_target() * denom;
        // Smallest index whose cumulative weight reaches the threshold.
        let idx = self.prefix.partition_point(|&acc| acc < threshold);
        if idx >= self.scores.len() {
            return Quantile::Infinite;
        }
        Quantile::Finite(self.scores[idx])
    }

    /// Cumulative normalized mass of calibration scores `≤ v_q` for a
    /// query with weight `test_weight` (the infinity mass is excluded by
    /// construction).
    pub fn coverage_mass(&self, v_q: F, test_weight: F) -> F {
        let denom = self.total_weight + test_weight;
        let idx = self.scores.partition_point(|&s| s <= v_q);
        if idx == 0 {
            F::zero()
        } else {
            self.prefix[idx - 1] / denom
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{augmented_quantile, ScoreSource};
    use proptest::prelude::*;

    fn level(alpha: f64) -> ConfidenceLevel<f64> {
        ConfidenceLevel::new(alpha).unwrap()
    }

    fn cal(scores: &[f64]) -> ScoreSet<f64> {
        ScoreSet::new(scores.to_vec(), ScoreSource::Calibration).unwrap()
    }

    #[test]
    fn kde_fit_validates_inputs() {
        assert!(kde_fit::<f64>(vec![vec![0.0]], 1.0).is_err());
        assert!(kde_fit(vec![vec![0.0], vec![1.0, 2.0]], 1.0).is_err());
        assert!(kde_fit(vec![vec![0.0], vec![1.0]], 0.0).is_err());
        assert!(kde_fit(vec![vec![0.0], vec![1.0]], -1.0).is_err());
        let model = kde_fit(vec![vec![0.0], vec![1.0]], 0.5).unwrap();
        assert_eq!(model.dim(), 1);
        assert_eq!(model.len(), 2);
    }

    #[test]
    fn kde_density_gaussian_at_mode() {
        // A single-point mixture is not constructible (min two points),
        // so duplicate the point: the density at the shared location is
        // still the Gaussian mode value 1/√(2π).
        let model = kde_fit(vec![vec![0.0], vec![0.0]], 1.0).unwrap();
        let d = model.density(&[0.0]).unwrap();
        assert!((d - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn kde_density_two_point_closed_form() {
        let model = kde_fit(vec![vec![-1.0], vec![1.0]], 1.0).unwrap();
        let d = model.density(&[0.0]).unwrap();
        let expected = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((d - expected).abs() < 1e-12, "got {d}, want {expected}");
    }

    #[test]
    fn kde_density_integrates_to_one() {
        // Trapezoidal quadrature over a wide 1-D grid.
        let model = kde_fit(vec![vec![-0.7], vec![0.3], vec![2.1], vec![0.0]], 0.6).unwrap();
        let (lo, hi, steps) = (-12.0f64, 14.0f64, 26_000usize);
        let dx = (hi - lo) / steps as f64;
        let mut integral = 0.0;
        for i in 0..=steps {
            let x = lo + dx * i as f64;
            let weight = if i == 0 || i == steps { 0.5 } else { 1.0 };
            integral += weight * model.density(&[x]).unwrap();
        }
        integral *= dx;
        assert!((integral - 1.0).abs() < 1e-3, "integral was {integral}");
    }

    #[test]
    fn kde_density_2d_integrates_to_one() {
        let model = kde_fit(vec![vec![0.0, 0.5], vec![1.0, -0.5], vec![-0.4, 0.1]], 0.8).unwrap();
        let (lo, hi, steps) = (-8.0f64, 9.0f64, 340usize);
        let dx = (hi - lo) / steps as f64;
        let mut integral = 0.0;
        for i in 0..=steps {
            for j in 0..=steps {
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 }
                    * if j == 0 || j == steps { 0.5 } else { 1.0 };
                let x = [lo + dx * i as f64, lo + dx * j as f64];
                integral += w * model.density(&x).unwrap();
            }
        }
        integral *= dx * dx;
        assert!((integral - 1.0).abs() < 1e-3, "integral was {integral}");
    }

    #[test]
    fn kde_symmetric_point_sets_give_symmetric_densities() {
        let c = 0.75f64;
        let model = kde_fit(
            vec![vec![c - 1.2], vec![c - 0.3], vec![c + 0.3], vec![c + 1.2]],
            0.45,
        )
        .unwrap();
        for &offset in &[0.1, 0.6, 1.3, 2.9] {
            let left = model.density(&[c - offset]).unwrap();
            let right = model.density(&[c + offset]).unwrap();
            assert!((left - right).abs() < 1e-14);
        }
    }

    #[test]
    fn kde_density_checks_dimension() {
        let model = kde_fit(vec![vec![0.0, 0.0], vec![1.0, 1.0]], 1.0).unwrap();
        assert!(model.density(&[0.0]).is_err());
    }

    #[test]
    fn ratio_of_identical_kdes_is_one() {
        let pts: Vec<Vec<f64>> = vec![vec![0.0], vec![0.7], vec![-0.3]];
        let a = kde_fit(pts.clone(), 0.5).unwrap();
        let b = kde_fit(pts, 0.5).unwrap();
        for &x in &[-1.0, 0.0, 0.4, 2.0] {
            let r = likelihood_ratio(&a, &b, &[x], 1e-12, 20.0).unwrap();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ratio_floors_vanishing_denominator_and_caps() {
        let cal_kde = kde_fit(vec![vec![0.0], vec![0.1]], 0.05).unwrap();
        let test_kde = kde_fit(vec![vec![100.0], vec![100.1]], 0.05).unwrap();
        // Query sits on the test support, miles away from the cal
        // support: denominator floors, ratio caps.
        let r = likelihood_ratio(&test_kde, &cal_kde, &[100.0], 1e-12, 20.0).unwrap();
        assert_eq!(r, 20.0);
        // Query far from both supports: both densities floor, ratio 1.
        let r = likelihood_ratio(&test_kde, &cal_kde, &[-4000.0], 1e-12, 20.0).unwrap();
        assert_eq!(r, 1.0);
        assert!(r > 0.0);
    }

    #[test]
    fn ratio_near_midpoint_of_shifted_gaussians() {
        // N(0,1) vs N(1,1) have ratio exactly 1 at x = 0.5; the KDE
        // estimate should land within 10% with n = 5000.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = rand_distr::Normal::new(0.0f64, 1.0).unwrap();
        let cal_pts: Vec<Vec<f64>> =
            (0..5000).map(|_| vec![rand_distr::Distribution::sample(&normal, &mut rng)]).collect();
        let test_pts: Vec<Vec<f64>> = (0..5000)
            .map(|_| vec![rand_distr::Distribution::sample(&normal, &mut rng) + 1.0])
            .collect();
        let cal_kde = kde_fit(cal_pts, 0.2).unwrap();
        let test_kde = kde_fit(test_pts, 0.2).unwrap();
        let r = likelihood_ratio(&test_kde, &cal_kde, &[0.5], 1e-12, 20.0).unwrap();
        assert!((r - 1.0).abs() < 0.1, "ratio at midpoint was {r}");
    }

    #[test]
    fn normalize_weights_unit_case() {
        let w = ShiftWeights::new(vec![1.0, 1.0, 1.0], 1.0).unwrap();
        let (masses, test_mass) = normalize_weights(&w);
        assert_eq!(masses, vec![0.25, 0.25, 0.25]);
        assert_eq!(test_mass, 0.25);
    }

    #[test]
    fn normalize_weights_proportionality() {
        let eps = 1e-9f64;
        let w = ShiftWeights::new(vec![1.0, 3.0], eps).unwrap();
        let (masses, test_mass) = normalize_weights(&w);
        let denom = 4.0 + eps;
        assert!((masses[0] - 1.0 / denom).abs() < 1e-15);
        assert!((masses[1] - 3.0 / denom).abs() < 1e-15);
        assert!((test_mass - eps / denom).abs() < 1e-15);
        let total: f64 = masses.iter().sum::<f64>() + test_mass;
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn shift_weights_reject_nonpositive() {
        assert!(ShiftWeights::new(vec![1.0, 0.0], 1.0).is_err());
        assert!(ShiftWeights::new(vec![1.0], 0.0).is_err());
        assert!(ShiftWeights::new(vec![f64::INFINITY], 1.0).is_err());
    }

    #[test]
    fn weighted_distribution_unit_weights() {
        let dist = weighted_distribution(&cal(&[1.0, 2.0]), &ShiftWeights::unit(2)).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(dist.atoms(), &[(1.0, third), (2.0, third)]);
        assert!((dist.infinity_mass() - third).abs() < 1e-15);
    }

    #[test]
    fn weighted_distribution_merges_duplicate_scores() {
        let dist = weighted_distribution(&cal(&[2.0, 1.0, 2.0]), &ShiftWeights::unit(3)).unwrap();
        assert_eq!(dist.atoms().len(), 2);
        assert_eq!(dist.atoms()[0], (1.0, 0.25));
        assert_eq!(dist.atoms()[1].0, 2.0);
        assert!((dist.atoms()[1].1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn weighted_distribution_hand_normalization() {
        let w = ShiftWeights::new(vec![2.0, 2.0], 1.0).unwrap();
        let dist = weighted_distribution(&cal(&[5.0, 9.0]), &w).unwrap();
        assert_eq!(dist.atoms(), &[(5.0, 0.4), (9.0, 0.4)]);
        assert_eq!(dist.infinity_mass(), 0.2);
    }

    #[test]
    fn weighted_distribution_rejects_length_mismatch() {
        let w = ShiftWeights::new(vec![1.0], 1.0).unwrap();
        assert!(weighted_distribution(&cal(&[1.0, 2.0]), &w).is_err());
    }

    #[test]
    fn weighted_quantile_single_atom_cases() {
        let dist = WeightedDistribution::new(vec![(5.0, 0.9)], 0.1).unwrap();
        assert_eq!(weighted_quantile(level(0.2), &dist), Quantile::Finite(5.0));
        let dist = WeightedDistribution::new(vec![(5.0, 0.5)], 0.5).unwrap();
        assert_eq!(weighted_quantile(level(0.2), &dist), Quantile::Infinite);
    }

    #[test]
    fn weighted_quantile_unit_weights_match_augmented() {
        let scores = [1.0, 2.0, 3.0, 4.0];
        let dist = weighted_distribution(&cal(&scores), &ShiftWeights::unit(4)).unwrap();
        assert_eq!(weighted_quantile(level(0.5), &dist), Quantile::Finite(3.0));
        for num in 1..100u32 {
            let alpha = f64::from(num) / 100.0;
            let via_weights = weighted_quantile(level(alpha), &dist);
            let via_order = augmented_quantile(level(alpha), &cal(&scores)).unwrap();
            assert_eq!(via_weights, via_order, "alpha {alpha}");
        }
    }

    /// Exhaustive cumulative-scan oracle over exact rational masses:
    /// weights are integers, the level is `num/100`, and the comparison
    /// `Σ w_i / (Σ w + w_t) ≥ 1 − α` is cross-multiplied into integer
    /// arithmetic so no rounding can occur.
    fn oracle_weighted_quantile_rational(
        scores: &[f64],
        int_weights: &[u64],
        test_weight: u64,
        alpha_num: u64,
    ) -> Quantile<f64> {
        let mut pairs: Vec<(f64, u64)> =
            scores.iter().copied().zip(int_weights.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let denom: u64 = int_weights.iter().sum::<u64>() + test_weight;
        let mut cum = 0u64;
        let mut i = 0;
        while i < pairs.len() {
            // Consume the whole atom (all duplicates of this score).
            let score = pairs[i].0;
            while i < pairs.len() && pairs[i].0 == score {
                cum += pairs[i].1;
                i += 1;
            }
            // cum/denom ≥ (100 − num)/100  ⇔  100·cum ≥ (100 − num)·denom
            if 100 * cum >= (100 - alpha_num) * denom {
                return Quantile::Finite(score);
            }
        }
        Quantile::Infinite
    }

    #[test]
    fn weighted_quantile_matches_rational_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..400 {
            let n = 1 + rand::Rng::gen_range(&mut rng, 0..6usize);
            let scores: Vec<f64> =
                (0..n).map(|_| f64::from(rand::Rng::gen_range(&mut rng, 0..12u32)) * 0.5).collect();
            let int_weights: Vec<u64> =
                (0..n).map(|_| rand::Rng::gen_range(&mut rng, 1..30u64)).collect();
            let test_weight = rand::Rng::gen_range(&mut rng, 1..30u64);
            let weights = ShiftWeights::new(
                int_weights.iter().map(|&w| w as f64).collect(),
                test_weight as f64,
            )
            .unwrap();
            let dist = weighted_distribution(&cal(&scores), &weights).unwrap();
            for alpha_num in 1..100u64 {
                let got = weighted_quantile(level(alpha_num as f64 / 100.0), &dist);
                let want =
                    oracle_weighted_quantile_rational(&scores, &int_weights, test_weight, alpha_num);
                assert_eq!(
                    got, want,
                    "scores {scores:?}, weights {int_weights:?}/{test_weight}, alpha {alpha_num}/100"
                );
            }
        }
    }

    #[test]
    fn standardizer_zero_mean_unit_variance() {
        let pts = vec![vec![1.0, 10.0], vec![3.0, 30.0], vec![5.0, 20.0], vec![7.0, 40.0]];
        let st = Standardizer::fit(&pts).unwrap();
        let out = st.apply_all(&pts).unwrap();
        for d in 0..2 {
            let mean: f64 = out.iter().map(|p| p[d]).sum::<f64>() / out.len() as f64;
            let var: f64 = out.iter().map(|p| p[d] * p[d]).sum::<f64>() / out.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn standardizer_passes_constant_features_through() {
        let pts = vec![vec![4.0], vec![4.0], vec![4.0]];
        let st = Standardizer::fit(&pts).unwrap();
        assert_eq!(st.apply(&[4.0]).unwrap(), vec![0.0]);
        assert_eq!(st.apply(&[6.5]).unwrap(), vec![2.5]);
    }

    #[test]
    fn bandwidth_search_singleton_grid() {
        let pts: Vec<Vec<f64>> = (0..40).map(|i| vec![f64::from(i) * 0.1]).collect();
        assert_eq!(bandwidth_grid_search(&pts, &[0.3], 5, 1).unwrap(), 0.3);
    }

    #[test]
    fn bandwidth_search_near_silverman_on_gaussian_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let normal = rand_distr::Normal::new(0.0f64, 1.0).unwrap();
        let pts: Vec<Vec<f64>> =
            (0..1000).map(|_| vec![rand_distr::Distribution::sample(&normal, &mut rng)]).collect();
        let sd = {
            let mean: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
            (pts.iter().map(|p| (p[0] - mean).powi(2)).sum::<f64>() / pts.len() as f64).sqrt()
        };
        let silverman = 1.06 * sd * (pts.len() as f64).powf(-0.2);
        let grid = [0.05, 0.1, 0.2, 0.4, 0.8];
        let h = bandwidth_grid_search(&pts, &grid, 5, 3).unwrap();
        assert!(
            h >= silverman / 2.0 && h <= silverman * 2.0,
            "selected {h}, silverman {silverman}"
        );
    }

    #[test]
    fn bandwidth_search_is_deterministic() {
        let pts: Vec<Vec<f64>> = (0..60).map(|i| vec![(f64::from(i) * 0.37).sin()]).collect();
        let grid = [0.08, 0.15, 0.3, 0.6];
        let a = bandwidth_grid_search(&pts, &grid, 4, 99).unwrap();
        let b = bandwidth_grid_search(&pts, &grid, 4, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bandwidth_search_reports_degenerate_grids() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![f64::from(i)]).collect();
        // Bandwidths this small overflow every cross-point exponent.
        let err = bandwidth_grid_search(&pts, &[1e-300, 1e-290], 5, 0).unwrap_err();
        match err {
            Error::SearchFailure { candidates } => assert_eq!(candidates.len(), 2),
            other => panic!("expected SearchFailure, got {other:?}"),
        }
    }

    #[test]
    fn table_matches_per_query_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = 2 + rand::Rng::gen_range(&mut rng, 0..40usize);
            let scores: Vec<f64> =
                (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0.0..6.0f64)).collect();
            let weights: Vec<f64> =
                (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0.05..5.0f64)).collect();
            let table = ScoreWeightTable::new(&scores, &weights).unwrap();
            for _ in 0..8 {
                let test_weight = rand::Rng::gen_range(&mut rng, 0.05..5.0f64);
                let alpha = rand::Rng::gen_range(&mut rng, 0.02..0.98f64);
                let sw = ShiftWeights::new(weights.clone(), test_weight).unwrap();
                let dist = weighted_distribution(&cal(&scores), &sw).unwrap();
                let lv = level(alpha);
                assert_eq!(table.quantile(lv, test_weight), weighted_quantile(lv, &dist));
                if let Quantile::Finite(v) = table.quantile(lv, test_weight) {
                    let direct: f64 = dist
                        .atoms()
                        .iter()
                        .filter(|&&(s, _)| s <= v)
                        .map(|&(_, m)| m)
                        .sum();
                    let via_table = table.coverage_mass(v, test_weight);
                    assert!((direct - via_table).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn prop_mass_conservation(
            weights in proptest::collection::vec(0.01f64..50.0, 1..60),
            test_weight in 0.01f64..50.0,
        ) {
            let scores: Vec<f64> = (0..weights.len()).map(|i| i as f64 * 0.3).collect();
            let sw = ShiftWeights::new(weights, test_weight).unwrap();
            let dist = weighted_distribution(&cal(&scores), &sw).unwrap();
            let total = dist.finite_mass() + dist.infinity_mass();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn prop_equal_ratios_reduce_to_augmented_quantile(
            scores in proptest::collection::vec(0.0f64..10.0, 1..40),
            w in 0.05f64..20.0,
            alpha in 0.01f64..0.99,
        ) {
            let sw = ShiftWeights::new(vec![w; scores.len()], w).unwrap();
            let dist = weighted_distribution(&cal(&scores), &sw).unwrap();
            let lv = level(alpha);
            let weighted = weighted_quantile(lv, &dist);
            let unweighted = augmented_quantile(lv, &cal(&scores)).unwrap();
            prop_assert_eq!(weighted, unweighted);
        }

        #[test]
        fn prop_weighted_quantile_monotone_in_alpha(
            scores in proptest::collection::vec(0.0f64..10.0, 1..30),
            weights in proptest::collection::vec(0.05f64..10.0, 30),
            test_weight in 0.05f64..10.0,
        ) {
            let weights = &weights[..scores.len()];
            let sw = ShiftWeights::new(weights.to_vec(), test_weight).unwrap();
            let dist = weighted_distribution(&cal(&scores), &sw).unwrap();
            let mut previous = f64::NEG_INFINITY;
            for num in (1..100u32).rev() {
                let q = weighted_quantile(level(f64::from(num) / 100.0), &dist);
                let v = q.as_finite().unwrap_or(f64::INFINITY);
                prop_assert!(v >= previous);
                previous = v;
            }
        }
    }
}
