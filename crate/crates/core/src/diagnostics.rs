//! Coverage-divergence and distribution-distance diagnostics.
//!
//! For a weighted calibration-score distribution `F` and a set of test
//! scores, the central quantity is the **coverage divergence**
//! `D(V_q) = expected_coverage − exact_coverage`: the gap between the
//! coverage the weighted calibration data promises at the quantile `V_q`
//! and the coverage actually realised on the test scores. Sweeping `α`
//! over a grid traces the `|D|` curve; its summary across levels is a
//! Wasserstein-style distance between the calibration and test score
//! distributions, for which two estimators are shipped:
//!
//! * [`wasserstein_grid`] — the α-grid sum `Σ |D(V_q(α))| · Δα`, the
//!   quantity plotted in divergence-curve figures;
//! * [`wasserstein_exact`] — the exact area between the two empirical
//!   CDFs over the score axis, computed by breakpoint integration from a
//!   [`ScoreWeightTable`] whose raw calibration weights normalize to
//!   total mass 1 (equivalently: the augmented distribution's finite
//!   part renormalized).
//!
//! The two agree when the weighted calibration scores are approximately
//! uniformly distributed (the change of variables from `α` to the score
//! axis is then the identity); in general the grid sum is the α-measure
//! integral that the exact estimator evaluates in score measure.

use serde::{Deserialize, Serialize};

use crate::conformal::{ConfidenceLevel, Quantile, ScoreSet};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::weighted::{weighted_quantile, ScoreWeightTable, WeightedDistribution};

/// Coverage diagnostics at a single confidence level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct DivergencePoint<F> {
    /// Miscoverage level `α`.
    pub alpha: F,
    /// The `(1−α)` weighted quantile the coverages were evaluated at.
    pub v_q: Quantile<F>,
    /// Coverage promised by the weighted calibration distribution.
    pub expected_cov: F,
    /// Coverage realised on the test scores.
    pub exact_cov: F,
    /// `expected_cov − exact_cov`.
    pub divergence: F,
}

/// Diagnostics for one (model, test-domain) pair across the α grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Real")]
pub struct DivergenceReport<F> {
    /// Identifier of the evaluated model.
    pub model_id: String,
    /// Identifier of the test domain the scores came from.
    pub test_domain_id: String,
    /// One entry per grid level, sorted ascending by `alpha`.
    pub points: Vec<DivergencePoint<F>>,
    /// α-grid Wasserstein estimate `Σ |D| · Δα`.
    pub wasserstein_grid: F,
    /// Exact CDF-area Wasserstein distance (finite part renormalized).
    pub wasserstein_exact: F,
    /// Mean of `|divergence|` over the grid.
    pub mean_abs_divergence: F,
    /// Prediction-interval width `2·V_q` per grid level.
    pub sizes: Vec<(F, Quantile<F>)>,
    /// Root-mean-square error of the point predictions on this domain.
    pub rmse: F,
    /// Mean absolute error of the point predictions on this domain.
    pub mae: F,
    /// Roll-out (simulation) RMSE on observation levels, reported by the
    /// epidemic task where one-step errors and trajectory errors differ;
    /// absent for tasks where they coincide.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub level_rmse: Option<F>,
}

/// Coverage the weighted calibration distribution assigns at threshold
/// `v_q`: the total mass of atoms with score `≤ v_q`. The infinity mass
/// is never included and the finite part is **not** renormalized.
pub fn expected_coverage<F: Real>(
    v_q: Quantile<F>,
    dist: &WeightedDistribution<F>,
) -> Result<F> {
    let v = v_q.as_finite().ok_or_else(|| {
        Error::invalid("expected coverage is undefined at an infinite quantile")
    })?;
    let mut cumulative = F::zero();
    for &(score, mass) in dist.atoms() {
        if score > v {
            break;
        }
        cumulative = cumulative + mass;
    }
    Ok(cumulative)
}

/// Fraction of test scores at or below `v_q`; an infinite threshold
/// covers everything.
pub fn exact_coverage<F: Real>(v_q: Quantile<F>, test_scores: &ScoreSet<F>) -> Result<F> {
    if test_scores.is_empty() {
        return Err(Error::Empty("test scores for coverage"));
    }
    let v = match v_q {
        Quantile::Infinite => return Ok(F::one()),
        Quantile::Finite(v) => v,
    };
    let hits = test_scores.scores().iter().filter(|&&s| s <= v).count();
    Ok(F::from_count(hits) / F::from_count(test_scores.len()))
}

/// Coverage divergence `D(v_q) = expected_coverage − exact_coverage`.
pub fn coverage_divergence<F: Real>(
    v_q: Quantile<F>,
    dist: &WeightedDistribution<F>,
    test_scores: &ScoreSet<F>,
) -> Result<F> {
    Ok(expected_coverage(v_q, dist)? - exact_coverage(v_q, test_scores)?)
}

/// Shared fast path for the grid estimators: cumulative atom masses and
/// sorted test scores are prepared once, then each level is a pair of
/// binary searches. Values match the one-level operations exactly
/// because the prefix sums accumulate in the same ascending order.
fn abs_divergences_on_grid<F: Real>(
    alphas: &[ConfidenceLevel<F>],
    dist: &WeightedDistribution<F>,
    test_scores: &ScoreSet<F>,
) -> Result<Vec<F>> {
    if alphas.is_empty() {
        return Err(Error::Empty("alpha grid"));
    }
    for pair in alphas.windows(2) {
        if pair[1].alpha() <= pair[0].alpha() {
            return Err(Error::invalid("alpha grid must be strictly increasing"));
        }
    }
    if test_scores.is_empty() {
        return Err(Error::Empty("test scores for coverage"));
    }
    let atoms = dist.atoms();
    let mut prefix = Vec::with_capacity(atoms.len());
    let mut running = F::zero();
    for &(_, mass) in atoms {
        running = running + mass;
        prefix.push(running);
    }
    let sorted_test = test_scores.sorted();
    let m = F::from_count(sorted_test.len());

    let mut result = Vec::with_capacity(alphas.len());
    for &level in alphas {
        let target = level.coverage_target();
        let idx = prefix.partition_point(|&c| c < target);
        if idx >= atoms.len() {
            return Err(Error::invalid(format!(
                "quantile at alpha {} is infinite; coverage divergence undefined",
                level.alpha()
            )));
        }
        let v = atoms[idx].0;
        let expected = prefix[idx];
        let hits = sorted_test.partition_point(|&s| s <= v);
        let exact = F::from_count(hits) / m;
        result.push((expected - exact).abs());
    }
    Ok(result)
}

/// α-grid Wasserstein estimate: `Σ_grid |D(V_q(α))| · Δα` with `Δα` the
/// mean spacing of the (strictly increasing) grid. A single-level grid
/// uses `Δα = 1`, i.e. the bare `|D|`.
pub fn wasserstein_grid<F: Real>(
    alphas: &[ConfidenceLevel<F>],
    dist: &WeightedDistribution<F>,
    test_scores: &ScoreSet<F>,
) -> Result<F> {
    let divergences = abs_divergences_on_grid(alphas, dist, test_scores)?;
    let spacing = grid_spacing(alphas);
    Ok(divergences.into_iter().sum::<F>() * spacing)
}

/// Raw-sum variant of [`wasserstein_grid`]: `Σ_grid |D(V_q(α))|` without
/// the `Δα` factor, for callers that want the grid-size-dependent sum.
pub fn wasserstein_grid_raw_sum<F: Real>(
    alphas: &[ConfidenceLevel<F>],
    dist: &WeightedDistribution<F>,
    test_scores: &ScoreSet<F>,
) -> Result<F> {
    Ok(abs_divergences_on_grid(alphas, dist, test_scores)?
        .into_iter()
        .sum())
}

/// Mean spacing of a strictly increasing level grid (1 for a singleton).
pub fn grid_spacing<F: Real>(alphas: &[ConfidenceLevel<F>]) -> F {
    if alphas.len() < 2 {
        return F::one();
    }
    let first = alphas[0].alpha();
    let last = alphas[alphas.len() - 1].alpha();
    (last - first) / F::from_count(alphas.len() - 1)
}

/// Exact 1-Wasserstein distance between the weighted calibration score
/// distribution (its finite part: raw weights normalized over the
/// calibration side alone, which is what renormalizing the augmented
/// distribution yields) and the empirical distribution of `test_scores`:
/// the area between the two CDFs, integrated breakpoint by breakpoint
/// over the merged sorted support.
///
/// Both CDFs are evaluated as single divisions of exactly accumulated
/// numerators (`cum_weight / total_weight` and `count / n`), so two
/// identical unit-weight multisets yield exactly zero and a point mass
/// against a translated point mass yields exactly the translation.
pub fn wasserstein_exact<F: Real>(
    table: &ScoreWeightTable<F>,
    test_scores: &ScoreSet<F>,
) -> Result<F> {
    if test_scores.is_empty() {
        return Err(Error::Empty("test scores for wasserstein distance"));
    }
    let cal_scores = table.sorted_scores();
    let prefix = table.prefix_weights();
    let total = table.total_weight();
    let sorted_test = test_scores.sorted();
    let m = F::from_count(sorted_test.len());

    let mut area = F::zero();
    let mut cal_cum = F::zero();
    let mut i = 0; // next calibration entry
    let mut j = 0; // next test score
    let mut prev: Option<F> = None;
    while i < cal_scores.len() || j < sorted_test.len() {
        let v = match (cal_scores.get(i), sorted_test.get(j)) {
            (Some(&a), Some(&t)) => a.min(t),
            (Some(&a), None) => a,
            (None, Some(&t)) => t,
            (None, None) => unreachable!("loop condition"),
        };
        if let Some(p) = prev {
            let f_cal = cal_cum / total;
            let f_test = F::from_count(j) / m;
            area = area + (f_cal - f_test).abs() * (v - p);
        }
        while i < cal_scores.len() && cal_scores[i] == v {
            cal_cum = prefix[i];
            i += 1;
        }
        while j < sorted_test.len() && sorted_test[j] == v {
            j += 1;
        }
        prev = Some(v);
    }
    Ok(area)
}

/// Symmetric prediction-interval width at a level: `2 · V_q`.
pub fn prediction_size<F: Real>(
    level: ConfidenceLevel<F>,
    dist: &WeightedDistribution<F>,
) -> Quantile<F> {
    weighted_quantile(level, dist).scale(F::from_config(2.0))
}

/// Root-mean-square and mean-absolute error of paired predictions.
pub fn accuracy_metrics<F: Real>(predictions: &[F], truths: &[F]) -> Result<(F, F)> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
            what: "predictions vs truths",
        });
    }
    if predictions.is_empty() {
        return Err(Error::Empty("accuracy inputs"));
    }
    let n = F::from_count(predictions.len());
    let mut sq = F::zero();
    let mut abs = F::zero();
    for (&p, &y) in predictions.iter().zip(truths) {
        let r = p - y;
        sq = sq + r * r;
        abs = abs + r.abs();
    }
    Ok(((sq / n).sqrt(), abs / n))
}

/// Mean of `|divergence|` across stored points (the `|D|` summary a
/// report carries as `mean_abs_divergence`).
pub fn mean_abs_divergence<F: Real>(points: &[DivergencePoint<F>]) -> F {
    if points.is_empty() {
        return F::zero();
    }
    points.iter().map(|p| p.divergence.abs()).sum::<F>() / F::from_count(points.len())
}
