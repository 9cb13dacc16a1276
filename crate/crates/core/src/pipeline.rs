//! End-to-end experiment orchestration: generate or load data, fit the
//! physical predictors, calibrate weighted conformal sets, sweep the
//! confidence grid across test domains, and aggregate seed replications
//! into reports and plot-ready tables.
//!
//! Per seed × model the flow is: fit on the chronological training
//! block; absolute-residual scores on the calibration block; standardize
//! calibration features and pick one KDE bandwidth by cross-validation
//! (reused for every test domain of that model); then per test domain
//! fit a test-feature KDE at that bandwidth, weight calibration scores
//! by the density ratio, and sweep the α grid.
//!
//! Weights come in two modes. [`WeightMode::PerQuery`] renormalizes the
//! weighted score distribution for every test point — the exact
//! construction. [`WeightMode::Shared`] collapses the query side to the
//! mean test weight, a cheaper approximation suited to large test
//! blocks. In both modes the exact-Wasserstein diagnostic uses the
//! mean-weight distribution.
//!
//! Seed aggregation: `divergence_curve.csv` rows carry the across-seed
//! mean of |D(α)| (and the summary's `mean_abs_divergence` and `W_grid`
//! are computed from exactly those curve values, so recomputing them
//! from the CSV is bit-identical), while JSON report points keep the
//! across-seed means of expected and exact coverage, whose signed
//! difference is stored in their `divergence` field.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_score, ConfidenceLevel, Quantile, ScoreSet, ScoreSource};
use crate::data::{
    chronological_split, load_epidemic_csv, load_traffic_csv, parse_error, partition_by_hour,
    rd_samples, EpidemicSynthConfig, ShiftProfile, SplitSpec, TimedSample, TrafficSynthConfig,
    synth_epidemic, synth_traffic,
};
use crate::diagnostics::{
    accuracy_metrics, exact_coverage, expected_coverage, wasserstein_exact, DivergencePoint,
    DivergenceReport,
};
use crate::epidemic::{
    fit_epidemic_transitions, pandemic_split, simulate, transitions, EpiTransition, EpiVariant,
    PandemicInterval, PandemicIntervals,
};
use crate::error::{Error, Result};
use crate::traffic::{
    density_split, empirical_density_tertiles, fit_rd, DensityBuckets, FitOptions, RdSample,
    RdVariant, SensorModel,
};
use crate::weighted::{
    bandwidth_grid_search, kde_fit, likelihood_ratio, weighted_distribution, weighted_quantile,
    KdeModel, ScoreWeightTable, ShiftWeights, Standardizer, DEFAULT_CV_FOLDS,
    DEFAULT_DENSITY_FLOOR, DEFAULT_RATIO_CAP,
};

/// Which experiment family a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Highway-sensor speed prediction.
    Traffic,
    /// Weekly epidemic counts.
    Epidemic,
}

/// How the query side of the weighted score distribution is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Renormalize per test point (the exact construction).
    PerQuery,
    /// One distribution per domain using the mean test weight.
    Shared,
}

/// How the test block is partitioned into domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainMode {
    /// 24 hour-of-day domains (traffic only).
    HourOfDay,
    /// The four epidemic phases (epidemic only).
    PandemicInterval,
    /// The whole test block as one domain.
    Whole,
}

/// Density-ratio estimation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdeSettings {
    /// Candidate bandwidths for cross-validation (on standardized
    /// features).
    pub bandwidths: Vec<f64>,
    /// Density floor applied to both sides of the ratio.
    pub floor: f64,
    /// Upper cap on the likelihood ratio.
    pub cap: f64,
    /// Cross-validation folds.
    pub folds: usize,
    /// Base seed of the cross-validation shuffle (mixed with the run
    /// seed).
    pub cv_seed: u64,
}

impl Default for KdeSettings {
    fn default() -> Self {
        KdeSettings {
            bandwidths: vec![0.1, 0.15, 0.22, 0.33, 0.5, 0.75, 1.1, 1.65, 2.5],
            floor: DEFAULT_DENSITY_FLOOR,
            cap: DEFAULT_RATIO_CAP,
            folds: DEFAULT_CV_FOLDS,
            cv_seed: 0,
        }
    }
}

/// Traffic-side experiment settings (synthetic world and optimizer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficSettings {
    /// Simulated days per synthetic run.
    pub n_days: usize,
    /// Observation-noise level of the synthetic middle sensor.
    pub noise_sd: f64,
    /// Demand-cycle amplitude of the synthetic world.
    pub demand_amplitude: f64,
    /// Hour-dependent volume-volatility contrast of the synthetic world.
    pub volatility_contrast: f64,
    /// Fit separate parameters per density regime for the speed+volume
    /// model.
    pub density_buckets: bool,
    /// Gradient-descent iteration cap.
    pub max_iters: usize,
    /// Gradient-descent step size.
    pub step_size: f64,
    /// Gradient-descent improvement tolerance.
    pub tolerance: f64,
    /// Optional traffic CSV path; when set, it replaces the synthetic
    /// world (seeds then only vary the bandwidth cross-validation).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
}

impl Default for TrafficSettings {
    fn default() -> Self {
        let fit = FitOptions::<f64>::default();
        // 28 days keeps every single-hour test domain large enough that its
        // Monte Carlo coverage noise sits well below the misspecification
        // signal; the volatility contrast drives the hour-to-hour covariate
        // shift the speed-only model cannot explain away.
        TrafficSettings {
            n_days: 28,
            noise_sd: 0.5,
            demand_amplitude: 1.0,
            volatility_contrast: 2.5,
            density_buckets: true,
            max_iters: fit.max_iters,
            step_size: fit.step_size,
            tolerance: fit.tolerance,
            data: None,
        }
    }
}

/// Epidemic-side experiment settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpidemicSettings {
    /// Simulated seasons per synthetic run.
    pub n_years: usize,
    /// Multiplicative observation-noise level of the synthetic world.
    pub noise_sd: f64,
    /// Points per axis of the (β, γ) search grid over [0, 1].
    pub grid_steps: usize,
    /// Optional epidemic CSV path; when set, it replaces the synthetic
    /// world.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
}

impl Default for EpidemicSettings {
    fn default() -> Self {
        // Pandemic-interval domains get only a handful of weeks per season,
        // so the season count is what pushes the per-interval Monte Carlo
        // floor below the misspecification signal; the low observation
        // noise keeps the no-immunity model's systematic one-step error
        // from drowning in measurement error.
        EpidemicSettings {
            n_years: 96,
            noise_sd: 0.015,
            grid_steps: 51,
            data: None,
        }
    }
}

/// Full experiment description; every field has a default so a config
/// file only needs to name what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Experiment family.
    pub task: Task,
    /// Model ids to compare (empty → the task's default pair).
    pub models: Vec<String>,
    /// One independent replication per seed.
    pub seeds: Vec<u64>,
    /// Miscoverage grid (strictly increasing, inside (0, 1)).
    pub alphas: Vec<f64>,
    /// Query-weight handling.
    pub weight_mode: WeightMode,
    /// Test-domain partition (None → hour-of-day for traffic,
    /// pandemic-interval for epidemic).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domains: Option<DomainMode>,
    /// Output directory for reports.
    pub out_dir: String,
    /// Chronological split fractions.
    pub split: SplitSpec,
    /// Density-ratio settings.
    pub kde: KdeSettings,
    /// Traffic-specific settings.
    pub traffic: TrafficSettings,
    /// Epidemic-specific settings.
    pub epidemic: EpidemicSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Traffic,
            models: Vec::new(),
            seeds: (0..10).collect(),
            alphas: default_alpha_grid(),
            weight_mode: WeightMode::PerQuery,
            domains: None,
            out_dir: "reports".to_string(),
            split: SplitSpec::default(),
            kde: KdeSettings::default(),
            traffic: TrafficSettings::default(),
            epidemic: EpidemicSettings::default(),
        }
    }
}

/// The default miscoverage grid 0.1, 0.15, …, 0.9.
pub fn default_alpha_grid() -> Vec<f64> {
    (2..=18).map(|i| i as f64 / 20.0).collect()
}

/// A comparable model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Speed-only reaction–diffusion.
    RdU,
    /// Speed+volume reaction–diffusion.
    RdUq,
    /// Immunity-aware epidemic model.
    Sir,
    /// No-immunity epidemic model.
    Sis,
}

impl ModelKind {
    /// Stable id used in file names and report keys.
    pub fn id(self) -> &'static str {
        match self {
            ModelKind::RdU => "rd_u",
            ModelKind::RdUq => "rd_uq",
            ModelKind::Sir => "sir",
            ModelKind::Sis => "sis",
        }
    }

    /// Parse an id back into a model kind.
    pub fn parse(id: &str) -> Option<ModelKind> {
        match id {
            "rd_u" => Some(ModelKind::RdU),
            "rd_uq" => Some(ModelKind::RdUq),
            "sir" => Some(ModelKind::Sir),
            "sis" => Some(ModelKind::Sis),
            _ => None,
        }
    }

    /// The task this model belongs to.
    pub fn task(self) -> Task {
        match self {
            ModelKind::RdU | ModelKind::RdUq => Task::Traffic,
            ModelKind::Sir | ModelKind::Sis => Task::Epidemic,
        }
    }
}

impl ExperimentConfig {
    /// The effective domain partition for this task.
    pub fn domain_mode(&self) -> DomainMode {
        self.domains.unwrap_or(match self.task {
            Task::Traffic => DomainMode::HourOfDay,
            Task::Epidemic => DomainMode::PandemicInterval,
        })
    }

    /// The models to compare, resolved and validated against the task.
    pub fn resolved_models(&self) -> Result<Vec<ModelKind>> {
        let models: Vec<ModelKind> = if self.models.is_empty() {
            match self.task {
                Task::Traffic => vec![ModelKind::RdU, ModelKind::RdUq],
                Task::Epidemic => vec![ModelKind::Sir, ModelKind::Sis],
            }
        } else {
            self.models
                .iter()
                .map(|id| {
                    ModelKind::parse(id)
                        .ok_or_else(|| Error::invalid(format!("unknown model id {id:?}")))
                })
                .collect::<Result<_>>()?
        };
        for model in &models {
            if model.task() != self.task {
                return Err(Error::invalid(format!(
                    "model {} does not belong to task {:?}",
                    model.id(),
                    self.task
                )));
            }
        }
        if models.is_empty() {
            return Err(Error::Empty("model list"));
        }
        let mut seen = Vec::new();
        for m in &models {
            if seen.contains(m) {
                return Err(Error::invalid(format!("duplicate model id {}", m.id())));
            }
            seen.push(*m);
        }
        Ok(models)
    }

    /// The domain ids this config produces, in output order.
    pub fn domain_ids(&self) -> Vec<String> {
        match self.domain_mode() {
            DomainMode::HourOfDay => (0..24).map(|h| format!("hour_{h:02}")).collect(),
            DomainMode::PandemicInterval => PandemicInterval::all()
                .iter()
                .map(|iv| iv.label().to_string())
                .collect(),
            DomainMode::Whole => vec!["whole".to_string()],
        }
    }

    /// Validate every cross-field constraint not already enforced by the
    /// type system (configs usually arrive via deserialization, which
    /// bypasses constructors).
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Empty("seed list"));
        }
        if self.alphas.is_empty() {
            return Err(Error::Empty("alpha grid"));
        }
        for pair in self.alphas.windows(2) {
            if !(pair[0] < pair[1]) {
                return Err(Error::invalid(format!(
                    "alpha grid must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        for &alpha in &self.alphas {
            ConfidenceLevel::new(alpha)?;
        }
        if self.out_dir.is_empty() {
            return Err(Error::Empty("output directory"));
        }
        SplitSpec::new(self.split.train_frac, self.split.cal_frac, self.split.test_frac)?;
        let k = &self.kde;
        if k.bandwidths.is_empty() {
            return Err(Error::Empty("bandwidth grid"));
        }
        if !k.bandwidths.iter().all(|&h| h.is_finite() && h > 0.0) {
            return Err(Error::invalid("bandwidths must be finite and positive"));
        }
        if k.folds < 2 {
            return Err(Error::invalid(format!("need at least 2 folds, got {}", k.folds)));
        }
        if !(k.floor > 0.0 && k.cap > k.floor) {
            return Err(Error::invalid(format!(
                "need 0 < floor < cap, got floor {}, cap {}",
                k.floor, k.cap
            )));
        }
        let t = &self.traffic;
        if t.n_days == 0 || t.max_iters == 0 {
            return Err(Error::invalid("n_days and max_iters must be positive"));
        }
        if !(t.noise_sd.is_finite() && t.noise_sd >= 0.0)
            || !(t.demand_amplitude.is_finite() && t.demand_amplitude >= 0.0)
            || !(t.volatility_contrast.is_finite() && t.volatility_contrast >= 0.0)
        {
            return Err(Error::invalid("traffic noise/shift settings must be finite and >= 0"));
        }
        if !(t.step_size > 0.0 && t.tolerance > 0.0) {
            return Err(Error::invalid("step_size and tolerance must be positive"));
        }
        let e = &self.epidemic;
        if e.n_years == 0 {
            return Err(Error::invalid("n_years must be positive"));
        }
        if e.grid_steps < 2 {
            return Err(Error::invalid(format!(
                "grid_steps must be at least 2, got {}",
                e.grid_steps
            )));
        }
        if !(e.noise_sd.is_finite() && e.noise_sd >= 0.0) {
            return Err(Error::invalid("epidemic noise_sd must be finite and >= 0"));
        }
        self.resolved_models()?;
        match (self.task, self.domain_mode()) {
            (Task::Traffic, DomainMode::PandemicInterval) => Err(Error::invalid(
                "pandemic_interval domains require the epidemic task",
            )),
            (Task::Epidemic, DomainMode::HourOfDay) => Err(Error::invalid(
                "hour_of_day domains require the traffic task",
            )),
            _ => Ok(()),
        }
    }
}

/// Uniform rate grid with `steps` points over [0, 1].
pub fn rate_grid(steps: usize) -> Vec<f64> {
    (0..steps).map(|i| i as f64 / (steps as f64 - 1.0)).collect()
}

/// One row of `divergence_curve.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    /// Model id.
    pub model: String,
    /// Domain id.
    pub domain: String,
    /// Miscoverage level.
    pub alpha: f64,
    /// Across-seed mean of |D(α)|.
    pub abs_divergence: f64,
    /// Across-seed mean prediction-set size (`inf` if any seed's
    /// quantile was infinite).
    pub size: f64,
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    /// Model id.
    pub model: String,
    /// Domain id.
    pub domain: String,
    /// Mean over the α grid of the curve's |D| values.
    pub mean_abs_divergence: f64,
    /// Grid Wasserstein estimate: grid spacing × sum of curve |D|.
    pub w_grid: f64,
    /// Across-seed mean of the exact Wasserstein distance.
    pub w_exact: f64,
    /// Across-seed mean RMSE of the point predictions.
    pub rmse: f64,
    /// Across-seed mean MAE of the point predictions.
    pub mae: f64,
}

/// Everything a run produces before any file is written.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    /// One seed-aggregated report per model × domain.
    pub reports: Vec<DivergenceReport<f64>>,
    /// Plot-ready divergence curve rows.
    pub curve: Vec<CurveRow>,
    /// Summary rows.
    pub summary: Vec<SummaryRow>,
}

/// One α-grid point of one seed's evaluation on one domain.
#[derive(Debug, Clone, Copy)]
struct RawPoint {
    expected: f64,
    exact: f64,
    divergence: f64,
    size: Quantile<f64>,
}

/// One seed × model × domain evaluation.
#[derive(Debug, Clone)]
struct DomainEval {
    points: Vec<RawPoint>,
    w_exact: f64,
    rmse: f64,
    mae: f64,
    level_rmse: Option<f64>,
}

/// Calibration-side context shared by all domains of one model fit.
struct CalContext<'a> {
    alphas: &'a [ConfidenceLevel<f64>],
    weight_mode: WeightMode,
    kde: &'a KdeSettings,
    cal_scores: &'a ScoreSet<f64>,
    cal_feats: &'a [Vec<f64>],
    cal_kde: &'a KdeModel<f64>,
    bandwidth: f64,
}

/// One test point ready for conformal evaluation.
struct TestPoint {
    features: Vec<f64>,
    score: f64,
    prediction: f64,
    truth: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Weighted-conformal evaluation of one test domain against one
/// calibration context. Empty domains evaluate to `None`.
fn eval_domain(ctx: &CalContext<'_>, points: &[TestPoint]) -> Result<Option<DomainEval>> {
    if points.is_empty() {
        return Ok(None);
    }
    let test_feats: Vec<Vec<f64>> = points.iter().map(|p| p.features.clone()).collect();
    let test_kde = kde_fit(test_feats, ctx.bandwidth)?;
    let ratio = |x: &[f64]| likelihood_ratio(&test_kde, ctx.cal_kde, x, ctx.kde.floor, ctx.kde.cap);
    let cal_weights: Vec<f64> = ctx.cal_feats.iter().map(|x| ratio(x)).collect::<Result<_>>()?;
    let test_weights: Vec<f64> = points.iter().map(|p| ratio(&p.features)).collect::<Result<_>>()?;

    let score_values: Vec<f64> = points.iter().map(|p| p.score).collect();
    let test_scores = ScoreSet::new(score_values.clone(), ScoreSource::Test)?;
    let mean_weight = mean(&test_weights);
    // The table pairs each calibration score with its weight (scores()
    // preserves insertion order, matching cal_feats positionally).
    let table = ScoreWeightTable::new(ctx.cal_scores.scores(), &cal_weights)?;
    let w_exact = wasserstein_exact(&table, &test_scores)?;

    let raw_points = match ctx.weight_mode {
        WeightMode::Shared => {
            let shared_dist = weighted_distribution(
                ctx.cal_scores,
                &ShiftWeights::new(cal_weights.clone(), mean_weight)?,
            )?;
            ctx.alphas
                .iter()
                .map(|&level| {
                    let v_q = weighted_quantile(level, &shared_dist);
                    let (expected, exact) = match v_q {
                        Quantile::Finite(_) => (
                            expected_coverage(v_q, &shared_dist)?,
                            exact_coverage(v_q, &test_scores)?,
                        ),
                        Quantile::Infinite => (shared_dist.finite_mass(), 1.0),
                    };
                    Ok(RawPoint {
                        expected,
                        exact,
                        divergence: expected - exact,
                        size: v_q.scale(2.0),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        WeightMode::PerQuery => {
            ctx.alphas
                .iter()
                .map(|&level| {
                    let mut expected_sum = 0.0;
                    let mut covered = 0usize;
                    let mut size_sum = 0.0;
                    let mut any_infinite = false;
                    for (j, &w) in test_weights.iter().enumerate() {
                        match table.quantile(level, w) {
                            Quantile::Finite(q) => {
                                expected_sum += table.coverage_mass(q, w);
                                if score_values[j] <= q {
                                    covered += 1;
                                }
                                size_sum += 2.0 * q;
                            }
                            Quantile::Infinite => {
                                expected_sum += table.total_weight() / (table.total_weight() + w);
                                covered += 1; // an infinite set always covers
                                any_infinite = true;
                            }
                        }
                    }
                    let n = points.len() as f64;
                    let expected = expected_sum / n;
                    let exact = covered as f64 / n;
                    Ok(RawPoint {
                        expected,
                        exact,
                        divergence: expected - exact,
                        size: if any_infinite {
                            Quantile::Infinite
                        } else {
                            Quantile::Finite(size_sum / n)
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let predictions: Vec<f64> = points.iter().map(|p| p.prediction).collect();
    let truths: Vec<f64> = points.iter().map(|p| p.truth).collect();
    let (rmse, mae) = accuracy_metrics(&predictions, &truths)?;
    Ok(Some(DomainEval {
        points: raw_points,
        w_exact,
        rmse,
        mae,
        level_rmse: None,
    }))
}

/// Fit a per-sensor model on training samples. The speed+volume variant
/// learns density-regime-specific parameters when `density_buckets` is
/// set and every regime has enough rows; otherwise a single parameter
/// set is cloned across regimes, which makes the routing inert.
pub fn fit_sensor_model(
    variant: RdVariant,
    train: &[RdSample<f64>],
    density_buckets: bool,
    options: &FitOptions<f64>,
) -> Result<SensorModel<f64>> {
    match variant {
        RdVariant::SpeedOnly => Ok(SensorModel::SpeedOnly(fit_rd(variant, train, options)?.params)),
        RdVariant::SpeedVolume => {
            if density_buckets {
                let thresholds = empirical_density_tertiles(train)?;
                let split = density_split(train, &thresholds);
                let min_rows = train
                    .first()
                    .map_or(0, |s| 4 * s.feature_vector(variant).len() + 8);
                if split.buckets.iter().all(|b| b.len() >= min_rows) {
                    let mut fitted = Vec::with_capacity(3);
                    for bucket in &split.buckets {
                        fitted.push(fit_rd(variant, bucket, options)?.params);
                    }
                    let mut it = fitted.into_iter();
                    let params = Box::new([
                        it.next().expect("three buckets"),
                        it.next().expect("three buckets"),
                        it.next().expect("three buckets"),
                    ]);
                    return Ok(SensorModel::SpeedVolume { thresholds, params });
                }
                log::warn!(
                    "density regimes too small ({:?} rows); falling back to a single parameter set",
                    split.buckets.iter().map(Vec::len).collect::<Vec<_>>()
                );
            }
            let params = fit_rd(variant, train, options)?.params;
            let thresholds = DensityBuckets::new(1.0, 2.0).expect("static thresholds");
            Ok(SensorModel::SpeedVolume {
                thresholds,
                params: Box::new([params.clone(), params.clone(), params]),
            })
        }
    }
}

/// First sensor (sorted) whose neighbors are exactly one upstream and
/// one downstream node and that carries readings.
pub fn pick_sensor(dataset: &crate::data::TrafficDataset) -> Result<String> {
    let candidates = dataset.graph.filter_degree2();
    let with_readings: Vec<&str> = candidates
        .nodes()
        .map(|(id, _)| id)
        .filter(|id| dataset.nodes_with_readings().any(|n| n == *id))
        .collect();
    match with_readings.split_first() {
        None => Err(Error::invalid(
            "no sensor with exactly one upstream and one downstream neighbor has readings",
        )),
        Some((first, rest)) => {
            if !rest.is_empty() {
                log::info!(
                    "multiple degree-2 sensors available ({} total); using {first}",
                    rest.len() + 1
                );
            }
            Ok(first.to_string())
        }
    }
}

fn run_traffic_seed(
    config: &ExperimentConfig,
    models: &[ModelKind],
    alphas: &[ConfidenceLevel<f64>],
    seed: u64,
) -> Result<Vec<Vec<Option<DomainEval>>>> {
    let t = &config.traffic;
    let dataset = match &t.data {
        Some(path) => load_traffic_csv(Path::new(path))?.0,
        None => {
            synth_traffic(&TrafficSynthConfig {
                seed,
                n_days: t.n_days,
                noise_sd: t.noise_sd,
                shift: ShiftProfile {
                    demand_amplitude: t.demand_amplitude,
                    volatility_contrast: t.volatility_contrast,
                },
            })
            .0
        }
    };
    let sensor = pick_sensor(&dataset)?;
    let samples = rd_samples(&dataset, &sensor)?;
    let (train, cal, test) = chronological_split(&samples, &config.split)?;
    let train_samples: Vec<RdSample<f64>> = train.into_iter().map(|s| s.sample).collect();
    let test_domains: Vec<Vec<TimedSample>> = match config.domain_mode() {
        DomainMode::HourOfDay => partition_by_hour(&test),
        DomainMode::Whole => vec![test],
        DomainMode::PandemicInterval => unreachable!("rejected by validate()"),
    };
    let options = FitOptions {
        max_iters: t.max_iters,
        step_size: t.step_size,
        tolerance: t.tolerance,
    };

    let mut per_model = Vec::with_capacity(models.len());
    for model in models {
        let variant = match model {
            ModelKind::RdU => RdVariant::SpeedOnly,
            ModelKind::RdUq => RdVariant::SpeedVolume,
            _ => unreachable!("validated against task"),
        };
        let sensor_model = fit_sensor_model(variant, &train_samples, t.density_buckets, &options)?;

        let mut cal_score_values = Vec::with_capacity(cal.len());
        let mut raw_cal_feats = Vec::with_capacity(cal.len());
        for s in &cal {
            let prediction = sensor_model.predict(&s.sample)?;
            cal_score_values.push(conformal_score(prediction, s.sample.target));
            raw_cal_feats.push(s.sample.feature_vector(variant));
        }
        let cal_scores = ScoreSet::new(cal_score_values, ScoreSource::Calibration)?;
        let standardizer = Standardizer::fit(&raw_cal_feats)?;
        let cal_feats = standardizer.apply_all(&raw_cal_feats)?;
        let bandwidth = bandwidth_grid_search(
            &cal_feats,
            &config.kde.bandwidths,
            config.kde.folds,
            config.kde.cv_seed.wrapping_add(seed),
        )?;
        let cal_kde = kde_fit(cal_feats.clone(), bandwidth)?;
        let ctx = CalContext {
            alphas,
            weight_mode: config.weight_mode,
            kde: &config.kde,
            cal_scores: &cal_scores,
            cal_feats: &cal_feats,
            cal_kde: &cal_kde,
            bandwidth,
        };

        let mut per_domain = Vec::with_capacity(test_domains.len());
        for domain in &test_domains {
            let mut points = Vec::with_capacity(domain.len());
            for s in domain {
                let prediction = sensor_model.predict(&s.sample)?;
                points.push(TestPoint {
                    features: standardizer.apply(&s.sample.feature_vector(variant))?,
                    score: conformal_score(prediction, s.sample.target),
                    prediction,
                    truth: s.sample.target,
                });
            }
            per_domain.push(eval_domain(&ctx, &points)?);
        }
        per_model.push(per_domain);
    }
    Ok(per_model)
}

fn epidemic_features(variant: EpiVariant, tr: &EpiTransition<f64>) -> Vec<f64> {
    match variant {
        EpiVariant::Sir => vec![tr.i, tr.cum_incl],
        EpiVariant::Sis => vec![tr.i],
    }
}

fn run_epidemic_seed(
    config: &ExperimentConfig,
    models: &[ModelKind],
    alphas: &[ConfidenceLevel<f64>],
    seed: u64,
) -> Result<Vec<Vec<Option<DomainEval>>>> {
    let e = &config.epidemic;
    let series = match &e.data {
        Some(path) => {
            let mut all = load_epidemic_csv(Path::new(path))?;
            if all.len() > 1 {
                log::info!("{} locations in file; using {}", all.len(), all[0].location);
            }
            all.swap_remove(0)
        }
        None => {
            synth_epidemic(&EpidemicSynthConfig {
                seed,
                n_years: e.n_years,
                noise_sd: e.noise_sd,
            })
            .0
        }
    };
    let trans: Vec<EpiTransition<f64>> = transitions(&series);
    let (train, cal, test) = chronological_split(&trans, &config.split)?;
    let period_ranges = series.period_ranges();
    let intervals: Vec<PandemicIntervals> = period_ranges
        .iter()
        .map(|r| pandemic_split(&series.counts[r.clone()]))
        .collect::<Result<_>>()?;
    let test_domains: Vec<Vec<EpiTransition<f64>>> = match config.domain_mode() {
        DomainMode::PandemicInterval => {
            let mut domains = vec![Vec::new(); 4];
            for tr in &test {
                let interval = intervals[tr.period].interval_of(tr.offset);
                domains[interval.index()].push(*tr);
            }
            domains
        }
        DomainMode::Whole => vec![test],
        DomainMode::HourOfDay => unreachable!("rejected by validate()"),
    };
    let grid = rate_grid(e.grid_steps);

    let mut per_model = Vec::with_capacity(models.len());
    for model in models {
        let variant = match model {
            ModelKind::Sir => EpiVariant::Sir,
            ModelKind::Sis => EpiVariant::Sis,
            _ => unreachable!("validated against task"),
        };
        let fit = fit_epidemic_transitions(variant, &train, series.population, &grid, &grid)?;
        let predict = |tr: &EpiTransition<f64>| {
            crate::epidemic::predict_delta(&fit.params, series.population, tr)
        };

        let mut cal_score_values = Vec::with_capacity(cal.len());
        let mut raw_cal_feats = Vec::with_capacity(cal.len());
        for tr in &cal {
            cal_score_values.push(conformal_score(predict(tr), tr.observed_delta));
            raw_cal_feats.push(epidemic_features(variant, tr));
        }
        let cal_scores = ScoreSet::new(cal_score_values, ScoreSource::Calibration)?;
        let standardizer = Standardizer::fit(&raw_cal_feats)?;
        let cal_feats = standardizer.apply_all(&raw_cal_feats)?;
        let bandwidth = bandwidth_grid_search(
            &cal_feats,
            &config.kde.bandwidths,
            config.kde.folds,
            config.kde.cv_seed.wrapping_add(seed),
        )?;
        let cal_kde = kde_fit(cal_feats.clone(), bandwidth)?;
        let ctx = CalContext {
            alphas,
            weight_mode: config.weight_mode,
            kde: &config.kde,
            cal_scores: &cal_scores,
            cal_feats: &cal_feats,
            cal_kde: &cal_kde,
            bandwidth,
        };

        // Per-period rollouts of the fitted model, for level-space RMSE.
        let rollouts: Vec<Vec<crate::epidemic::SirState<f64>>> = period_ranges
            .iter()
            .map(|r| {
                simulate(
                    &fit.params,
                    f64::from(series.counts[r.start]),
                    series.population,
                    r.len(),
                    &[0],
                )
            })
            .collect();

        let mut per_domain = Vec::with_capacity(test_domains.len());
        for domain in &test_domains {
            let mut points = Vec::with_capacity(domain.len());
            for tr in domain {
                let prediction = predict(tr);
                points.push(TestPoint {
                    features: standardizer.apply(&epidemic_features(variant, tr))?,
                    score: conformal_score(prediction, tr.observed_delta),
                    prediction,
                    truth: tr.observed_delta,
                });
            }
            let mut eval = eval_domain(&ctx, &points)?;
            if let Some(eval) = eval.as_mut() {
                let sse: f64 = domain
                    .iter()
                    .map(|tr| {
                        let predicted_level = rollouts[tr.period][tr.offset + 1].i;
                        let observed_level = f64::from(series.counts[tr.week + 1]);
                        (predicted_level - observed_level).powi(2)
                    })
                    .sum();
                eval.level_rmse = Some((sse / domain.len() as f64).sqrt());
            }
            per_domain.push(eval);
        }
        per_model.push(per_domain);
    }
    Ok(per_model)
}

/// Run the full experiment described by `config`: every seed × model ×
/// domain evaluation (seeds in parallel), aggregated across seeds.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let models = config.resolved_models()?;
    let domain_ids = config.domain_ids();
    let alphas: Vec<ConfidenceLevel<f64>> = config
        .alphas
        .iter()
        .map(|&a| ConfidenceLevel::new(a))
        .collect::<Result<_>>()?;

    let per_seed: Vec<Vec<Vec<Option<DomainEval>>>> = config
        .seeds
        .par_iter()
        .map(|&seed| match config.task {
            Task::Traffic => run_traffic_seed(config, &models, &alphas, seed),
            Task::Epidemic => run_epidemic_seed(config, &models, &alphas, seed),
        })
        .collect::<Result<_>>()?;

    let spacing = if config.alphas.len() < 2 {
        1.0
    } else {
        (config.alphas[config.alphas.len() - 1] - config.alphas[0])
            / (config.alphas.len() - 1) as f64
    };

    let mut reports = Vec::new();
    let mut curve = Vec::new();
    let mut summary = Vec::new();
    for (mi, model) in models.iter().enumerate() {
        for (di, domain) in domain_ids.iter().enumerate() {
            let evals: Vec<&DomainEval> = per_seed
                .iter()
                .filter_map(|seed_result| seed_result[mi][di].as_ref())
                .collect();
            if evals.len() < per_seed.len() {
                log::warn!(
                    "domain {domain} empty in {} of {} seeds for model {}; omitting it",
                    per_seed.len() - evals.len(),
                    per_seed.len(),
                    model.id()
                );
                continue;
            }
            let mut points = Vec::with_capacity(config.alphas.len());
            let mut sizes = Vec::with_capacity(config.alphas.len());
            let mut abs_curve = Vec::with_capacity(config.alphas.len());
            for (k, &alpha) in config.alphas.iter().enumerate() {
                let expected = mean(&evals.iter().map(|e| e.points[k].expected).collect::<Vec<_>>());
                let exact = mean(&evals.iter().map(|e| e.points[k].exact).collect::<Vec<_>>());
                let abs_mean =
                    mean(&evals.iter().map(|e| e.points[k].divergence.abs()).collect::<Vec<_>>());
                let size = if evals.iter().any(|e| e.points[k].size.is_infinite()) {
                    Quantile::Infinite
                } else {
                    Quantile::Finite(mean(
                        &evals
                            .iter()
                            .map(|e| e.points[k].size.as_finite().expect("checked finite"))
                            .collect::<Vec<_>>(),
                    ))
                };
                points.push(DivergencePoint {
                    alpha,
                    v_q: size.scale(0.5),
                    expected_cov: expected,
                    exact_cov: exact,
                    divergence: expected - exact,
                });
                sizes.push((alpha, size));
                abs_curve.push(abs_mean);
                curve.push(CurveRow {
                    model: model.id().to_string(),
                    domain: domain.clone(),
                    alpha,
                    abs_divergence: abs_mean,
                    size: match size {
                        Quantile::Finite(s) => s,
                        Quantile::Infinite => f64::INFINITY,
                    },
                });
            }
            let mean_abs = mean(&abs_curve);
            let w_grid = spacing * abs_curve.iter().sum::<f64>();
            let w_exact = mean(&evals.iter().map(|e| e.w_exact).collect::<Vec<_>>());
            let rmse = mean(&evals.iter().map(|e| e.rmse).collect::<Vec<_>>());
            let mae = mean(&evals.iter().map(|e| e.mae).collect::<Vec<_>>());
            let level_rmse = if evals.iter().all(|e| e.level_rmse.is_some()) {
                Some(mean(
                    &evals
                        .iter()
                        .map(|e| e.level_rmse.expect("checked some"))
                        .collect::<Vec<_>>(),
                ))
            } else {
                None
            };
            reports.push(DivergenceReport {
                model_id: model.id().to_string(),
                test_domain_id: domain.clone(),
                points,
                wasserstein_grid: w_grid,
                wasserstein_exact: w_exact,
                mean_abs_divergence: mean_abs,
                sizes,
                rmse,
                mae,
                level_rmse,
            });
            summary.push(SummaryRow {
                model: model.id().to_string(),
                domain: domain.clone(),
                mean_abs_divergence: mean_abs,
                w_grid,
                w_exact,
                rmse,
                mae,
            });
        }
    }
    if reports.is_empty() {
        return Err(Error::invalid(
            "every model × domain combination was empty; nothing to report",
        ));
    }
    Ok(ExperimentOutcome {
        reports,
        curve,
        summary,
    })
}

/// Header of `divergence_curve.csv`.
pub const CURVE_HEADER: [&str; 5] = ["model", "domain", "alpha", "abs_divergence", "size"];

/// Header of `summary.csv`.
pub const SUMMARY_HEADER: [&str; 7] = [
    "model",
    "domain",
    "mean_abs_divergence",
    "W_grid",
    "W_exact",
    "rmse",
    "mae",
];

/// Write all outputs into `dir`: one `report_<model>_<domain>.json` per
/// report plus `divergence_curve.csv` and `summary.csv`. Row order
/// follows the outcome (models, then domains, then α); numbers are in
/// shortest round-trip form, with `inf` for infinite sizes. Reruns of
/// the same outcome produce byte-identical files.
pub fn emit_reports(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for report in &outcome.reports {
        let mut json = serde_json::to_string_pretty(report)?;
        json.push('\n');
        let name = format!("report_{}_{}.json", report.model_id, report.test_domain_id);
        std::fs::write(dir.join(name), json)?;
    }
    let mut curve = String::new();
    writeln!(curve, "{}", CURVE_HEADER.join(",")).expect("string write");
    for row in &outcome.curve {
        writeln!(
            curve,
            "{},{},{},{},{}",
            row.model, row.domain, row.alpha, row.abs_divergence, row.size
        )
        .expect("string write");
    }
    std::fs::write(dir.join("divergence_curve.csv"), curve)?;

    let mut summary = String::new();
    writeln!(summary, "{}", SUMMARY_HEADER.join(",")).expect("string write");
    for row in &outcome.summary {
        writeln!(
            summary,
            "{},{},{},{},{},{},{}",
            row.model,
            row.domain,
            row.mean_abs_divergence,
            row.w_grid,
            row.w_exact,
            row.rmse,
            row.mae
        )
        .expect("string write");
    }
    std::fs::write(dir.join("summary.csv"), summary)?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(raw: &str, line: u64, what: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| parse_error(line, format!("bad {what}: {raw:?}")))
}

/// Read `divergence_curve.csv` back into rows (losslessly: values are
/// written in shortest round-trip form).
pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    crate::data::check_header(&mut reader, &CURVE_HEADER)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != CURVE_HEADER.len() {
            return Err(parse_error(line, format!("expected 5 fields, got {}", record.len())));
        }
        rows.push(CurveRow {
            model: record[0].to_string(),
            domain: record[1].to_string(),
            alpha: parse_field(&record[2], line, "alpha")?,
            abs_divergence: parse_field(&record[3], line, "abs_divergence")?,
            size: parse_field(&record[4], line, "size")?,
        });
    }
    Ok(rows)
}

/// Read `summary.csv` back into rows.
pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    crate::data::check_header(&mut reader, &SUMMARY_HEADER)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != SUMMARY_HEADER.len() {
            return Err(parse_error(line, format!("expected 7 fields, got {}", record.len())));
        }
        rows.push(SummaryRow {
            model: record[0].to_string(),
            domain: record[1].to_string(),
            mean_abs_divergence: parse_field(&record[2], line, "mean_abs_divergence")?,
            w_grid: parse_field(&record[3], line, "W_grid")?,
            w_exact: parse_field(&record[4], line, "W_exact")?,
            rmse: parse_field(&record[5], line, "rmse")?,
            mae: parse_field(&record[6], line, "mae")?,
        });
    }
    Ok(rows)
}

/// Curve-derivable summary statistics of one model × domain.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSummary {
    /// Model id.
    pub model: String,
    /// Domain id.
    pub domain: String,
    /// Mean over the α grid of |D|.
    pub mean_abs_divergence: f64,
    /// Grid spacing × sum of |D|.
    pub w_grid: f64,
}

/// Recompute the curve-derivable summary statistics from curve rows,
/// using the same accumulation order as [`run_experiment`] so the
/// results are bit-identical to the emitted `summary.csv` columns.
pub fn summarize_curve(rows: &[CurveRow]) -> Result<Vec<CurveSummary>> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut grouped: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for row in rows {
        let key = (row.model.clone(), row.domain.clone());
        if !grouped.contains_key(&key) {
            order.push(key.clone());
        }
        grouped.entry(key).or_default().push((row.alpha, row.abs_divergence));
    }
    let mut out = Vec::with_capacity(order.len());
    for key in order {
        let points = &grouped[&key];
        if points.is_empty() {
            continue;
        }
        for pair in points.windows(2) {
            if !(pair[0].0 < pair[1].0) {
                return Err(Error::invalid(format!(
                    "curve rows for {}/{} are not in increasing alpha order",
                    key.0, key.1
                )));
            }
        }
        let spacing = if points.len() < 2 {
            1.0
        } else {
            (points[points.len() - 1].0 - points[0].0) / (points.len() - 1) as f64
        };
        let abs: Vec<f64> = points.iter().map(|&(_, d)| d).collect();
        out.push(CurveSummary {
            model: key.0,
            domain: key.1,
            mean_abs_divergence: mean(&abs),
            w_grid: spacing * abs.iter().sum::<f64>(),
        });
    }
    Ok(out)
}

/// Cross-check an output directory: recompute the curve-derivable
/// statistics from `divergence_curve.csv` and compare them against
/// `summary.csv`. Returns human-readable mismatch descriptions (empty
/// means everything matches bit-for-bit).
pub fn verify_summary(dir: &Path) -> Result<Vec<String>> {
    let curve = read_curve_csv(&dir.join("divergence_curve.csv"))?;
    let summary = read_summary_csv(&dir.join("summary.csv"))?;
    let recomputed = summarize_curve(&curve)?;
    let mut mismatches = Vec::new();
    if recomputed.len() != summary.len() {
        mismatches.push(format!(
            "summary.csv has {} rows but the curve yields {}",
            summary.len(),
            recomputed.len()
        ));
        return Ok(mismatches);
    }
    for (got, want) in recomputed.iter().zip(&summary) {
        if got.model != want.model || got.domain != want.domain {
            mismatches.push(format!(
                "row order differs: curve yields {}/{}, summary has {}/{}",
                got.model, got.domain, want.model, want.domain
            ));
            continue;
        }
        let same = |a: f64, b: f64| format!("{a}") == format!("{b}");
        if !same(got.mean_abs_divergence, want.mean_abs_divergence) {
            mismatches.push(format!(
                "{}/{}: mean_abs_divergence {} (from curve) vs {} (summary)",
                got.model, got.domain, got.mean_abs_divergence, want.mean_abs_divergence
            ));
        }
        if !same(got.w_grid, want.w_grid) {
            mismatches.push(format!(
                "{}/{}: W_grid {} (from curve) vs {} (summary)",
                got.model, got.domain, got.w_grid, want.w_grid
            ));
        }
    }
    Ok(mismatches)
}

/// Plain-text comparison table: per model, the across-domain means of
/// the summary statistics.
pub fn comparison_table(summary: &[SummaryRow]) -> String {
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: BTreeMap<&str, Vec<&SummaryRow>> = BTreeMap::new();
    for row in summary {
        if !grouped.contains_key(row.model.as_str()) {
            order.push(&row.model);
        }
        grouped.entry(&row.model).or_default().push(row);
    }
    let mut out = String::new();
    writeln!(
        out,
        "{:<8} {:>9} {:>14} {:>12} {:>12} {:>12}",
        "model", "domains", "mean|D|", "W_grid", "W_exact", "rmse"
    )
    .expect("string write");
    for model in order {
        let rows = &grouped[model];
        let col = |f: fn(&SummaryRow) -> f64| mean(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
        writeln!(
            out,
            "{model:<8} {:>9} {:>14.6} {:>12.6} {:>12.6} {:>12.6}",
            rows.len(),
            col(|r| r.mean_abs_divergence),
            col(|r| r.w_grid),
            col(|r| r.w_exact),
            col(|r| r.rmse)
        )
        .expect("string write");
    }
    out
}
