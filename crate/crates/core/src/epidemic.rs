//! Discrete compartmental epidemic predictors for weekly counts.
//!
//! Both models predict the weekly change of the infectious count `I(t)`
//! in a closed population `N`. The immunity-aware variant tracks a
//! recovered compartment `R(t) = γ·Σ I` accumulated from the start of
//! the current epidemic period (`R` resets to zero at every period
//! boundary — immunity is temporary across seasons):
//!
//! ```text
//! with R:     ΔI(t) = ( β·(N − I(t) − γ·Σ_{t_o..=t} I)/N − γ ) · I(t)
//! without R:  ΔI(t) = ( β·(N − I(t))/N − γ ) · I(t)
//! ```
//!
//! The cumulative sum includes the current week. Forcing it to zero
//! reduces the first form to the second exactly, which is the
//! misspecification the pipeline probes: the no-immunity model sees the
//! same data but the wrong causal structure.
//!
//! Fitting is an exhaustive grid search over `(β, γ)` on one-step-ahead
//! (teacher-forced) squared error; transitions that cross a period
//! boundary are excluded, because the jump to a new season's seed count
//! is exogenous to the dynamics.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Cumulative-count fractions that cut a period into the four pandemic
/// intervals.
pub const PANDEMIC_THRESHOLDS: [f64; 3] = [0.05, 0.5, 0.95];

/// Whether the model carries a recovered-immunity compartment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpiVariant {
    /// Susceptible–Infectious–Recovered: recovery grants (season-long)
    /// immunity.
    Sir,
    /// Susceptible–Infectious–Susceptible: recovered individuals are
    /// immediately susceptible again.
    Sis,
}

impl EpiVariant {
    /// Short lowercase identifier used in file names and report keys.
    pub fn id(self) -> &'static str {
        match self {
            EpiVariant::Sir => "sir",
            EpiVariant::Sis => "sis",
        }
    }
}

impl fmt::Display for EpiVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Infection and recovery rates (per week) for one location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpiParams<F> {
    /// Model family.
    pub variant: EpiVariant,
    /// Infection rate β.
    pub beta: F,
    /// Recovery rate γ.
    pub gamma: F,
}

impl<F: Real> EpiParams<F> {
    /// Validated parameters: finite and nonnegative; γ > 1 is allowed
    /// but logged (more than the whole infectious pool recovering per
    /// week is usually a config mistake).
    pub fn new(variant: EpiVariant, beta: F, gamma: F) -> Result<Self> {
        if !beta.is_finite() || !gamma.is_finite() || beta < F::zero() || gamma < F::zero() {
            return Err(Error::invalid(format!(
                "rates must be finite and nonnegative, got beta {beta}, gamma {gamma}"
            )));
        }
        if gamma > F::one() {
            log::warn!("recovery rate gamma {gamma} exceeds 1 per week");
        }
        Ok(EpiParams { variant, beta, gamma })
    }
}

/// Weekly infection counts for one location, with its population and the
/// start indices of its epidemic periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpidemicSeries {
    /// Location identifier.
    pub location: String,
    /// Date of the first week.
    pub start: chrono::NaiveDate,
    /// Weekly infectious counts.
    pub counts: Vec<u32>,
    /// Closed population size.
    pub population: u64,
    /// Sorted start indices of epidemic periods; always begins with 0.
    pub boundaries: Vec<usize>,
}

impl EpidemicSeries {
    /// Validated series: counts within the population, boundaries
    /// strictly increasing from 0 and inside the series.
    pub fn new(
        location: impl Into<String>,
        start: chrono::NaiveDate,
        counts: Vec<u32>,
        population: u64,
        boundaries: Vec<usize>,
    ) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Empty("weekly counts"));
        }
        if population == 0 {
            return Err(Error::invalid("population must be positive"));
        }
        if let Some((week, &c)) = counts
            .iter()
            .enumerate()
            .find(|(_, &c)| u64::from(c) > population)
        {
            return Err(Error::invalid(format!(
                "week {week}: count {c} exceeds population {population}"
            )));
        }
        if boundaries.first() != Some(&0) {
            return Err(Error::invalid("period boundaries must start at index 0"));
        }
        if boundaries.windows(2).any(|w| w[1] <= w[0]) || boundaries.iter().any(|&b| b >= counts.len())
        {
            return Err(Error::invalid(
                "period boundaries must be strictly increasing and inside the series",
            ));
        }
        Ok(EpidemicSeries {
            location: location.into(),
            start,
            counts,
            population,
            boundaries,
        })
    }

    /// Number of weeks.
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    /// Whether the series is empty (never true for validated series).
    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Half-open week ranges of the epidemic periods.
    pub fn period_ranges(&self) -> Vec<Range<usize>> {
        let mut ranges = Vec::with_capacity(self.boundaries.len());
        for (i, &start) in self.boundaries.iter().enumerate() {
            let end = self.boundaries.get(i + 1).copied().unwrap_or(self.counts.len());
            ranges.push(start..end);
        }
        ranges
    }
}

/// Default closed-population size when none is supplied: ten times the
/// largest per-period cumulative count (at least 1). The population only
/// enters the dynamics through ratios; this keeps the susceptible pool
/// positive.
pub fn default_population(counts: &[u32], boundaries: &[usize]) -> u64 {
    let mut max_cum: u64 = 0;
    for (i, &start) in boundaries.iter().enumerate() {
        let end = boundaries.get(i + 1).copied().unwrap_or(counts.len());
        let cum: u64 = counts[start.min(counts.len())..end.min(counts.len())]
            .iter()
            .map(|&c| u64::from(c))
            .sum();
        max_cum = max_cum.max(cum);
    }
    (10 * max_cum).max(1)
}

/// Weekly change of `I` under the immunity-aware model. `cum_i` must be
/// the period-local cumulative count including the current week.
pub fn sir_delta_i<F: Real>(i_t: F, cum_i: F, population: F, params: &EpiParams<F>) -> F {
    let susceptible = population - i_t - params.gamma * cum_i;
    (params.beta * susceptible / population - params.gamma) * i_t
}

/// Weekly change of `I` under the no-immunity model.
pub fn sis_delta_i<F: Real>(i_t: F, population: F, params: &EpiParams<F>) -> F {
    (params.beta * (population - i_t) / population - params.gamma) * i_t
}

/// Compartment populations at one simulated week.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirState<F> {
    /// Susceptible.
    pub s: F,
    /// Infectious.
    pub i: F,
    /// Recovered (always 0 for the no-immunity model).
    pub r: F,
}

/// Forward-simulate `steps` weekly states from `i0` infections. The
/// recovered compartment accumulates `γ·Σ I` within each period and
/// resets to exactly zero at every boundary index; `I` is clamped to
/// `[0, N]`; `S` is defined by conservation (`N − I − R`).
pub fn simulate<F: Real>(
    params: &EpiParams<F>,
    i0: F,
    population: u64,
    steps: usize,
    boundaries: &[usize],
) -> Vec<SirState<F>> {
    let n = F::from_config(population as f64);
    let mut states = Vec::with_capacity(steps);
    let mut i = i0.max(F::zero()).min(n);
    let mut cum = F::zero();
    for t in 0..steps {
        if boundaries.contains(&t) {
            cum = F::zero();
        }
        let r = match params.variant {
            EpiVariant::Sir => params.gamma * cum,
            EpiVariant::Sis => F::zero(),
        };
        let s = n - i - r;
        states.push(SirState { s, i, r });
        let cum_incl = cum + i;
        let delta = match params.variant {
            EpiVariant::Sir => sir_delta_i(i, cum_incl, n, params),
            EpiVariant::Sis => sis_delta_i(i, n, params),
        };
        i = (i + delta).max(F::zero()).min(n);
        cum = cum_incl;
    }
    states
}

/// One teacher-forced transition `t → t+1` that stays inside a period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpiTransition<F> {
    /// Global week index `t`.
    pub week: usize,
    /// Index of the period containing the transition.
    pub period: usize,
    /// Week offset of `t` within its period.
    pub offset: usize,
    /// Observed `I(t)`.
    pub i: F,
    /// Period-local cumulative count through week `t` (inclusive).
    pub cum_incl: F,
    /// Observed `I(t+1) − I(t)`.
    pub observed_delta: F,
}

/// All within-period transitions of a series, with their cumulative
/// bookkeeping. Transitions whose target week starts a new period are
/// excluded: the jump to a new season's seed count is exogenous.
pub fn transitions<F: Real>(series: &EpidemicSeries) -> Vec<EpiTransition<F>> {
    let mut out = Vec::new();
    for (period, range) in series.period_ranges().into_iter().enumerate() {
        let mut cum: u64 = 0;
        for t in range.clone() {
            cum += u64::from(series.counts[t]);
            if t + 1 >= range.end {
                break; // next week is outside this period (or the series)
            }
            out.push(EpiTransition {
                week: t,
                period,
                offset: t - range.start,
                i: F::from_config(f64::from(series.counts[t])),
                cum_incl: F::from_config(cum as f64),
                observed_delta: F::from_config(
                    f64::from(series.counts[t + 1]) - f64::from(series.counts[t]),
                ),
            });
        }
    }
    out
}

/// Model-predicted weekly change for one transition.
pub fn predict_delta<F: Real>(
    params: &EpiParams<F>,
    population: u64,
    transition: &EpiTransition<F>,
) -> F {
    let n = F::from_config(population as f64);
    match params.variant {
        EpiVariant::Sir => sir_delta_i(transition.i, transition.cum_incl, n, params),
        EpiVariant::Sis => sis_delta_i(transition.i, n, params),
    }
}

/// Result of an epidemic grid-search fit.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiFit<F> {
    /// Minimizing parameters.
    pub params: EpiParams<F>,
    /// Mean squared one-step error at the minimizer.
    pub mse: F,
    /// Number of transitions the fit used.
    pub transitions: usize,
}

/// Uniform 51-point grid over `[0, 1]` — the default search grid for
/// both rates.
pub fn default_rate_grid<F: Real>() -> Vec<F> {
    (0..=50).map(|i| F::from_count(i) / F::from_count(50)).collect()
}

/// Exhaustive grid search for the `(β, γ)` pair minimizing teacher-forced
/// mean squared error on the series' within-period transitions. Ties go
/// to the smaller β, then the smaller γ; the search is deterministic.
pub fn fit_epidemic<F: Real>(
    variant: EpiVariant,
    series: &EpidemicSeries,
    beta_grid: &[F],
    gamma_grid: &[F],
) -> Result<EpiFit<F>> {
    if beta_grid.is_empty() || gamma_grid.is_empty() {
        return Err(Error::invalid("parameter grids must be nonempty"));
    }
    for range in series.period_ranges() {
        if range.len() < 3 {
            log::warn!(
                "period starting at week {} has only {} weeks; fit may be underdetermined",
                range.start,
                range.len()
            );
        }
    }
    let trans = transitions::<F>(series);
    fit_epidemic_transitions(variant, &trans, series.population, beta_grid, gamma_grid)
}

/// Same grid search as [`fit_epidemic`], but over an explicit transition
/// set — the form used when fitting on a chronological sub-block of a
/// series.
pub fn fit_epidemic_transitions<F: Real>(
    variant: EpiVariant,
    trans: &[EpiTransition<F>],
    population: u64,
    beta_grid: &[F],
    gamma_grid: &[F],
) -> Result<EpiFit<F>> {
    if beta_grid.is_empty() || gamma_grid.is_empty() {
        return Err(Error::invalid("parameter grids must be nonempty"));
    }
    if trans.is_empty() {
        return Err(Error::invalid(
            "series has no within-period transitions to fit on",
        ));
    }
    let mut betas = beta_grid.to_vec();
    betas.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));
    let mut gammas = gamma_grid.to_vec();
    gammas.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));

    let m = F::from_count(trans.len());
    let mut best: Option<(EpiParams<F>, F)> = None;
    for &beta in &betas {
        for &gamma in &gammas {
            let params = EpiParams::new(variant, beta, gamma)?;
            let mut sse = F::zero();
            for tr in trans {
                let e = predict_delta(&params, population, tr) - tr.observed_delta;
                sse = sse + e * e;
            }
            let mse = sse / m;
            let better = match &best {
                None => true,
                Some((_, best_mse)) => mse < *best_mse,
            };
            if better {
                best = Some((params, mse));
            }
        }
    }
    let (params, mse) = best.expect("nonempty grids");
    Ok(EpiFit {
        params,
        mse,
        transitions: trans.len(),
    })
}

/// Period-local interval boundaries: `t_k` is the number of weeks needed
/// for the cumulative count to reach the k-th threshold fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PandemicIntervals {
    /// Weeks to reach the first threshold (default 5% of the total).
    pub t1: usize,
    /// Weeks to reach the second threshold (default 50%).
    pub t2: usize,
    /// Weeks to reach the third threshold (default 95%).
    pub t3: usize,
    /// Period length in weeks.
    pub len: usize,
}

/// The four phases of one epidemic period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PandemicInterval {
    /// Before the first threshold.
    Initiation,
    /// Between the first and second thresholds.
    Acceleration,
    /// Between the second and third thresholds.
    Deceleration,
    /// From the third threshold to the period's end.
    Subsidence,
}

impl PandemicInterval {
    /// Array index for per-interval storage.
    pub fn index(self) -> usize {
        match self {
            PandemicInterval::Initiation => 0,
            PandemicInterval::Acceleration => 1,
            PandemicInterval::Deceleration => 2,
            PandemicInterval::Subsidence => 3,
        }
    }

    /// All intervals in chronological order.
    pub fn all() -> [PandemicInterval; 4] {
        [
            PandemicInterval::Initiation,
            PandemicInterval::Acceleration,
            PandemicInterval::Deceleration,
            PandemicInterval::Subsidence,
        ]
    }

    /// Lowercase label used in report keys.
    pub fn label(self) -> &'static str {
        match self {
            PandemicInterval::Initiation => "initiation",
            PandemicInterval::Acceleration => "acceleration",
            PandemicInterval::Deceleration => "deceleration",
            PandemicInterval::Subsidence => "subsidence",
        }
    }
}

impl fmt::Display for PandemicInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Cut one period's counts at the given cumulative fractions. `t_k` is
/// the smallest week count whose cumulative fraction reaches the k-th
/// threshold (the comparison divides rather than multiplies, so a
/// fraction that equals a threshold exactly in rational arithmetic also
/// reaches it in floats).
pub fn pandemic_split_with_thresholds(
    period_counts: &[u32],
    thresholds: [f64; 3],
) -> Result<PandemicIntervals> {
    let total: u64 = period_counts.iter().map(|&c| u64::from(c)).sum();
    if total == 0 {
        return Err(Error::invalid(
            "pandemic split needs a period with a positive total count",
        ));
    }
    if !(0.0 < thresholds[0] && thresholds[0] <= thresholds[1] && thresholds[1] <= thresholds[2])
        || thresholds[2] > 1.0
    {
        return Err(Error::invalid(
            "thresholds must satisfy 0 < t1 ≤ t2 ≤ t3 ≤ 1",
        ));
    }
    let total_f = total as f64;
    let mut cuts = [period_counts.len(); 3];
    let mut cum: u64 = 0;
    for (week, &c) in period_counts.iter().enumerate() {
        cum += u64::from(c);
        let fraction = cum as f64 / total_f;
        for (k, &thr) in thresholds.iter().enumerate() {
            if cuts[k] == period_counts.len() && fraction >= thr {
                cuts[k] = week + 1;
            }
        }
    }
    Ok(PandemicIntervals {
        t1: cuts[0],
        t2: cuts[1],
        t3: cuts[2],
        len: period_counts.len(),
    })
}

/// [`pandemic_split_with_thresholds`] at the standard 5%/50%/95% cuts.
pub fn pandemic_split(period_counts: &[u32]) -> Result<PandemicIntervals> {
    pandemic_split_with_thresholds(period_counts, PANDEMIC_THRESHOLDS)
}

impl PandemicIntervals {
    /// Which phase a period-local week offset falls in.
    pub fn interval_of(&self, offset: usize) -> PandemicInterval {
        if offset < self.t1 {
            PandemicInterval::Initiation
        } else if offset < self.t2 {
            PandemicInterval::Acceleration
        } else if offset < self.t3 {
            PandemicInterval::Deceleration
        } else {
            PandemicInterval::Subsidence
        }
    }
}
