//! Split conformal prediction for regression.
//!
//! The workflow: score a calibration set with absolute residuals
//! ([`conformal_score`]), take the order-statistic quantile of the scores
//! augmented with one `+∞` mass ([`augmented_quantile`]), and widen the
//! point prediction by that quantile ([`predict_interval`]). With
//! exchangeable calibration and test data the resulting intervals cover
//! the truth with probability at least `1 − α`.
//!
//! Infinity is a dedicated [`Quantile::Infinite`] sentinel rather than a
//! large float so interval semantics stay bit-exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Tolerance used when comparing cumulative probability mass against
/// `1 − α` in quantile selection.
///
/// Levels almost always arrive as short decimals (`0.7`, `0.05`, …) whose
/// binary representation is off by one part in 2^52. Without slack, a
/// target mass like `(1−0.7)·(n+1)` that is an exact integer in rational
/// arithmetic can round up to the next order statistic and silently break
/// the equivalence between the unweighted and the weighted quantile. The
/// slack is far below any mass gap that real data produces (the smallest
/// representable gap with the denominators used in this crate is ~1e-5)
/// and far above accumulated f64 rounding (~1e-13).
pub(crate) const LEVEL_MASS_EPS: f64 = 1e-9;

/// Which side of the data split a score multiset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreSource {
    /// Scores computed on held-out calibration data.
    Calibration,
    /// Scores computed on test data.
    Test,
}

/// A multiset of conformal scores.
///
/// Scores are validated to be finite and nonnegative on construction.
/// Duplicates are kept as-is: each calibration sample contributes its own
/// order statistic (and later its own point mass in the weighted
/// machinery), so deduplicating would change quantiles.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet<F> {
    scores: Vec<F>,
    source: ScoreSource,
}

impl<F: Real> ScoreSet<F> {
    /// Builds a score set, rejecting negative or non-finite entries.
    pub fn new(scores: Vec<F>, source: ScoreSource) -> Result<Self> {
        for (i, s) in scores.iter().enumerate() {
            if !s.is_finite() || *s < F::zero() {
                return Err(Error::invalid(format!(
                    "score at index {i} must be finite and >= 0, got {s}"
                )));
            }
        }
        Ok(ScoreSet { scores, source })
    }

    /// Scores each (prediction, truth) pair with the absolute residual.
    pub fn from_residuals(predictions: &[F], truths: &[F], source: ScoreSource) -> Result<Self> {
        if predictions.len() != truths.len() {
            return Err(Error::LengthMismatch {
                left: predictions.len(),
                right: truths.len(),
                what: "predictions vs truths",
            });
        }
        let scores = predictions
            .iter()
            .zip(truths)
            .map(|(&p, &y)| conformal_score(p, y))
            .collect();
        ScoreSet::new(scores, source)
    }

    /// The raw scores in insertion order.
    pub fn scores(&self) -> &[F] {
        &self.scores
    }

    /// Which split the scores came from.
    pub fn source(&self) -> ScoreSource {
        self.source
    }

    /// Number of scores.
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    /// Whether the multiset is empty.
    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// The scores sorted ascending.
    pub fn sorted(&self) -> Vec<F> {
        let mut s = self.scores.clone();
        s.sort_by(|a, b| a.partial_cmp(b).expect("scores validated finite"));
        s
    }
}

/// A miscoverage level `α` with `0 < α < 1`.
///
/// The degenerate `α = 1` case (empty intervals) is excluded by
/// construction, as is `α = 0` (always-infinite intervals).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfidenceLevel<F>(F);

impl<F: Real> ConfidenceLevel<F> {
    /// Validates `0 < alpha < 1`.
    pub fn new(alpha: F) -> Result<Self> {
        if !alpha.is_finite() || alpha <= F::zero() || alpha >= F::one() {
            return Err(Error::invalid(format!(
                "confidence level alpha must lie strictly in (0, 1), got {alpha}"
            )));
        }
        Ok(ConfidenceLevel(alpha))
    }

    /// The miscoverage level `α`.
    pub fn alpha(&self) -> F {
        self.0
    }

    /// The nominal coverage `1 − α`.
    pub fn coverage(&self) -> F {
        F::one() - self.0
    }

    /// The coverage target lowered by [`LEVEL_MASS_EPS`], the value
    /// cumulative masses are actually compared against.
    pub(crate) fn coverage_target(&self) -> F {
        F::one() - self.0 - F::from_config(LEVEL_MASS_EPS)
    }
}

/// A score threshold that is either a finite real or `+∞`.
///
/// `+∞` arises when the requested order statistic falls on the augmented
/// infinity mass; intervals built from it cover everything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quantile<F> {
    /// Finite threshold value.
    Finite(F),
    /// The `+∞` sentinel.
    Infinite,
}

impl<F: Real> Quantile<F> {
    /// Whether this is the `+∞` sentinel.
    pub fn is_infinite(&self) -> bool {
        matches!(self, Quantile::Infinite)
    }

    /// The finite value, if any.
    pub fn as_finite(&self) -> Option<F> {
        match self {
            Quantile::Finite(v) => Some(*v),
            Quantile::Infinite => None,
        }
    }

    /// Whether a score falls at or below this threshold. `+∞` covers
    /// every score.
    pub fn covers(&self, score: F) -> bool {
        match self {
            Quantile::Finite(v) => score <= *v,
            Quantile::Infinite => true,
        }
    }

    /// The threshold scaled by a nonnegative finite factor; `+∞` absorbs.
    pub fn scale(&self, factor: F) -> Quantile<F> {
        match self {
            Quantile::Finite(v) => Quantile::Finite(*v * factor),
            Quantile::Infinite => Quantile::Infinite,
        }
    }
}

// Serialized as a plain number when finite and as the string "inf" when
// infinite, because JSON has no literal for infinity. The CSV writers use
// the same spelling, and `str::parse::<f64>` accepts it back.
impl<F: Real> Serialize for Quantile<F> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Quantile::Finite(v) => serializer.serialize_f64(v.to_f64().expect("finite scalar")),
            Quantile::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de, F: Real> Deserialize<'de> for Quantile<F> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;

        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }

        match Raw::deserialize(deserializer)? {
            Raw::Number(v) if v.is_finite() => Ok(Quantile::Finite(F::from_config(v))),
            Raw::Number(v) => Err(DeError::custom(format!(
                "non-finite numeric quantile {v}; use the string \"inf\""
            ))),
            Raw::Text(s) if s == "inf" => Ok(Quantile::Infinite),
            Raw::Text(s) => Err(DeError::custom(format!("unrecognized quantile value {s:?}"))),
        }
    }
}

impl<F: Real> std::fmt::Display for Quantile<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Quantile::Finite(v) => write!(f, "{v}"),
            Quantile::Infinite => write!(f, "inf"),
        }
    }
}

/// A symmetric prediction interval `[center − half_width, center + half_width]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionInterval<F> {
    /// The model point prediction `f(x)`.
    pub center: F,
    /// Interval half-width; infinite when calibration could not bound the
    /// requested level.
    pub half_width: Quantile<F>,
}

impl<F: Real> PredictionInterval<F> {
    /// Whether a label lands inside the interval (closed endpoints;
    /// infinite half-width always covers).
    pub fn contains(&self, truth: F) -> bool {
        self.half_width.covers(conformal_score(self.center, truth))
    }

    /// Lower endpoint, `−∞` when the half-width is infinite.
    pub fn lower(&self) -> F {
        match self.half_width {
            Quantile::Finite(w) => self.center - w,
            Quantile::Infinite => F::neg_infinity(),
        }
    }

    /// Upper endpoint, `+∞` when the half-width is infinite.
    pub fn upper(&self) -> F {
        match self.half_width {
            Quantile::Finite(w) => self.center + w,
            Quantile::Infinite => F::infinity(),
        }
    }
}

/// Absolute-residual conformal score `|prediction − truth|`.
pub fn conformal_score<F: Real>(prediction: F, truth: F) -> F {
    (prediction - truth).abs()
}

/// The `(1 − α)` quantile of `scores ∪ {+∞}`.
///
/// Returns the `k`-th smallest element of the augmented multiset with
/// `k = ⌈(1−α)(n+1)⌉`, which is [`Quantile::Infinite`] exactly when
/// `k = n + 1`. The ceiling is evaluated with [`LEVEL_MASS_EPS`] slack so
/// that levels written as short decimals select the order statistic their
/// exact rational value dictates.
pub fn augmented_quantile<F: Real>(
    level: ConfidenceLevel<F>,
    scores: &ScoreSet<F>,
) -> Result<Quantile<F>> {
    if scores.is_empty() {
        return Err(Error::Empty("score set for quantile"));
    }
    let n = scores.len();
    let target = level.coverage_target() * F::from_count(n + 1);
    let k = target.ceil().to_usize().unwrap_or(0).max(1);
    if k > n {
        return Ok(Quantile::Infinite);
    }
    Ok(Quantile::Finite(scores.sorted()[k - 1]))
}

/// Symmetric split-CP interval around a point prediction.
///
/// The half-width is `augmented_quantile(level, cal_scores)`, so a label
/// `y` lies in the interval exactly when `conformal_score(prediction, y)`
/// is at most that quantile.
pub fn predict_interval<F: Real>(
    prediction: F,
    level: ConfidenceLevel<F>,
    cal_scores: &ScoreSet<F>,
) -> Result<PredictionInterval<F>> {
    Ok(PredictionInterval {
        center: prediction,
        half_width: augmented_quantile(level, cal_scores)?,
    })
}

/// Fraction of truths covered by their paired interval.
pub fn empirical_coverage<F: Real>(
    intervals: &[PredictionInterval<F>],
    truths: &[F],
) -> Result<F> {
    if intervals.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: intervals.len(),
            right: truths.len(),
            what: "intervals vs truths",
        });
    }
    if intervals.is_empty() {
        return Err(Error::Empty("coverage inputs"));
    }
    let hits = intervals
        .iter()
        .zip(truths)
        .filter(|(iv, &y)| iv.contains(y))
        .count();
    Ok(F::from_count(hits) / F::from_count(intervals.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64]) -> ScoreSet<f64> {
        ScoreSet::new(scores.to_vec(), ScoreSource::Calibration).unwrap()
    }

    fn level(alpha: f64) -> ConfidenceLevel<f64> {
        ConfidenceLevel::new(alpha).unwrap()
    }

    /// Brute-force oracle: sort `scores ∪ {∞}` and pick index
    /// `k = ⌈(1−α)(n+1)⌉`, with `α = num/100` evaluated in exact integer
    /// arithmetic so the oracle is immune to float rounding.
    fn oracle_quantile_percent(alpha_num: u32, scores: &[f64]) -> Quantile<f64> {
        let n = scores.len() as u32;
        // ⌈(100 − num)(n + 1) / 100⌉ via integer ceiling division.
        let k = ((100 - alpha_num) * (n + 1)).div_ceil(100);
        if k > n {
            return Quantile::Infinite;
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Quantile::Finite(sorted[(k - 1) as usize])
    }

    #[test]
    fn score_is_absolute_difference() {
        assert_eq!(conformal_score(5.0, 3.0), 2.0);
        assert_eq!(conformal_score(3.0, 3.0), 0.0);
        assert_eq!(conformal_score(-1.5, 2.5), 4.0);
        assert_eq!(conformal_score(2.5, -1.5), 4.0);
    }

    #[test]
    fn score_set_rejects_bad_values() {
        assert!(ScoreSet::new(vec![1.0, -0.1], ScoreSource::Test).is_err());
        assert!(ScoreSet::new(vec![f64::NAN], ScoreSource::Test).is_err());
        assert!(ScoreSet::new(vec![f64::INFINITY], ScoreSource::Test).is_err());
        assert!(ScoreSet::<f64>::new(vec![], ScoreSource::Test).is_ok());
    }

    #[test]
    fn confidence_level_bounds() {
        assert!(ConfidenceLevel::new(0.0).is_err());
        assert!(ConfidenceLevel::new(1.0).is_err());
        assert!(ConfidenceLevel::new(-0.2).is_err());
        assert!(ConfidenceLevel::new(f64::NAN).is_err());
        assert!(ConfidenceLevel::new(0.5).is_ok());
    }

    #[test]
    fn quantile_midpoint_case() {
        // n = 4, α = 0.5: k = ⌈0.5 · 5⌉ = 3 → third smallest.
        let q = augmented_quantile(level(0.5), &set(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(q, Quantile::Finite(3.0));
    }

    #[test]
    fn quantile_forces_infinity_for_small_alpha() {
        // n = 4, α = 0.05: k = ⌈0.95 · 5⌉ = 5 > n.
        let q = augmented_quantile(level(0.05), &set(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(q, Quantile::Infinite);
    }

    #[test]
    fn quantile_single_score() {
        // n = 1, α = 0.9: k = ⌈0.1 · 2⌉ = 1.
        let q = augmented_quantile(level(0.9), &set(&[7.0])).unwrap();
        assert_eq!(q, Quantile::Finite(7.0));
    }

    #[test]
    fn quantile_errors_on_empty() {
        let empty = ScoreSet::new(vec![], ScoreSource::Calibration).unwrap();
        assert!(augmented_quantile(level(0.5), &empty).is_err());
    }

    #[test]
    fn quantile_handles_exact_rational_boundaries() {
        // n = 9, α = 0.7: (1−α)(n+1) = 3 exactly in rational arithmetic,
        // though 0.7 has no exact binary representation. The third order
        // statistic is the correct answer, not the fourth.
        let scores = set(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let q = augmented_quantile(level(0.7), &scores).unwrap();
        assert_eq!(q, Quantile::Finite(3.0));
    }

    #[test]
    fn quantile_matches_exhaustive_oracle() {
        // Every multiset of size ≤ 5 over {0,1,2,3} × the 99-point α grid.
        // (The acceptance suite pushes the same check to size ≤ 8.)
        let values = [0.0, 1.0, 2.0, 3.0];
        let mut stack: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        let mut multisets = stack.clone();
        for _ in 1..5 {
            let mut next = Vec::new();
            for ms in &stack {
                let last = *ms.last().unwrap();
                for &v in values.iter().filter(|&&v| v >= last) {
                    let mut grown = ms.clone();
                    grown.push(v);
                    next.push(grown);
                }
            }
            multisets.extend(next.iter().cloned());
            stack = next;
        }
        for ms in &multisets {
            for num in 1..100u32 {
                let alpha = f64::from(num) / 100.0;
                let got = augmented_quantile(level(alpha), &set(ms)).unwrap();
                let want = oracle_quantile_percent(num, ms);
                assert_eq!(got, want, "multiset {ms:?}, alpha {alpha}");
            }
        }
    }

    #[test]
    fn quantile_monotone_as_alpha_decreases() {
        let scores = set(&[0.4, 1.9, 0.1, 3.3, 2.2, 0.8, 1.1]);
        let mut previous = f64::NEG_INFINITY;
        for num in (1..100).rev() {
            let alpha = f64::from(num) / 100.0;
            let q = augmented_quantile(level(alpha), &scores).unwrap();
            let as_value = q.as_finite().unwrap_or(f64::INFINITY);
            assert!(
                as_value >= previous,
                "quantile decreased from {previous} to {as_value} at alpha {alpha}"
            );
            previous = as_value;
        }
    }

    #[test]
    fn interval_from_quantile() {
        let iv = predict_interval(10.0, level(0.5), &set(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(iv.lower(), 7.0);
        assert_eq!(iv.upper(), 13.0);
        assert!(iv.contains(7.0) && iv.contains(13.0));
        assert!(!iv.contains(6.999) && !iv.contains(13.001));
    }

    #[test]
    fn interval_infinite_covers_everything() {
        let iv = predict_interval(0.0, level(0.05), &set(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(iv.lower(), f64::NEG_INFINITY);
        assert_eq!(iv.upper(), f64::INFINITY);
        assert!(iv.contains(1e12) && iv.contains(-1e12));
    }

    #[test]
    fn interval_zero_residual_calibration() {
        let iv = predict_interval(2.0, level(0.9), &set(&[0.0])).unwrap();
        assert_eq!(iv.lower(), 2.0);
        assert_eq!(iv.upper(), 2.0);
        assert!(iv.contains(2.0));
        assert!(!iv.contains(2.0 + 1e-12));
    }

    #[test]
    fn coverage_counts_closed_endpoints() {
        let ivs = vec![
            PredictionInterval { center: 1.0, half_width: Quantile::Finite(1.0) },
            PredictionInterval { center: 1.0, half_width: Quantile::Finite(1.0) },
        ];
        assert_eq!(empirical_coverage(&ivs, &[1.0, 3.0]).unwrap(), 0.5);
        assert_eq!(empirical_coverage(&ivs, &[2.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn coverage_with_infinite_intervals() {
        let ivs = vec![
            PredictionInterval { center: 0.0, half_width: Quantile::<f64>::Infinite },
            PredictionInterval { center: 9.0, half_width: Quantile::Infinite },
        ];
        assert_eq!(empirical_coverage(&ivs, &[1e9, -1e9]).unwrap(), 1.0);
    }

    #[test]
    fn coverage_rejects_mismatched_lengths() {
        let ivs = vec![PredictionInterval { center: 0.0, half_width: Quantile::Finite(1.0) }];
        assert!(empirical_coverage(&ivs, &[1.0, 2.0]).is_err());
        assert!(empirical_coverage::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn containment_matches_score_comparison() {
        // Randomized check of the set-membership identity behind the
        // interval construction.
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let n = 1 + (next() * 12.0) as usize;
            let scores: Vec<f64> = (0..n).map(|_| next() * 5.0).collect();
            let cal = set(&scores);
            let alpha = 0.05 + 0.9 * next();
            let lv = level(alpha);
            let pred = next() * 10.0 - 5.0;
            let y = next() * 10.0 - 5.0;
            let iv = predict_interval(pred, lv, &cal).unwrap();
            let q = augmented_quantile(lv, &cal).unwrap();
            assert_eq!(iv.contains(y), q.covers(conformal_score(pred, y)));
        }
    }

    #[test]
    fn quantile_serde_round_trip() {
        let finite: Quantile<f64> = Quantile::Finite(2.25);
        let inf: Quantile<f64> = Quantile::Infinite;
        assert_eq!(serde_json::to_string(&finite).unwrap(), "2.25");
        assert_eq!(serde_json::to_string(&inf).unwrap(), "\"inf\"");
        let back: Quantile<f64> = serde_json::from_str("2.25").unwrap();
        assert_eq!(back, finite);
        let back: Quantile<f64> = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(back, inf);
    }
}
