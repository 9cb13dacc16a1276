//! Reaction–diffusion traffic-speed predictors.
//!
//! A sensor `i` predicts its next speed change `Δu_i(t) = u_i(t+δt) −
//! u_i(t)` from the spatial gradients toward its neighbors at time `t`:
//! `Δu_(i,j)(t) = u_j(t) − u_i(t)` (and `Δq_(i,j)` for volumes). Upstream
//! neighbors contribute a linear **diffusion** term, downstream neighbors
//! a tanh-saturated **reaction** term:
//!
//! ```text
//! Δu_i = Σ_{j∈up} ρ_j·Δu_(i,j) [+ ρ^q_j·Δq_(i,j)] + d
//!      + tanh( Σ_{j∈down} σ_j·Δu_(i,j) [+ σ^q_j·Δq_(i,j)] + r )
//! ```
//!
//! The speed-only variant (`rd_u`) omits the volume terms; the
//! speed+volume variant (`rd_uq`) additionally splits its training data
//! into three traffic-density regimes (`k = q/u` bucketed by thresholds
//! `k1 < k2`) and fits one parameter set per regime. Parameters are
//! location-specific constants, fitted per sensor by deterministic
//! full-batch gradient descent from zero initialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Which regressors a reaction–diffusion model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RdVariant {
    /// Speed gradients only.
    SpeedOnly,
    /// Speed and volume gradients, with density-separated training.
    SpeedVolume,
}

impl RdVariant {
    /// Whether volume gradients enter the regression.
    pub fn uses_volume(self) -> bool {
        matches!(self, RdVariant::SpeedVolume)
    }

    /// Short lowercase identifier used in file names and report keys.
    pub fn id(self) -> &'static str {
        match self {
            RdVariant::SpeedOnly => "rd_u",
            RdVariant::SpeedVolume => "rd_uq",
        }
    }
}

impl fmt::Display for RdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Parameters of one reaction–diffusion predictor.
///
/// Coefficient vectors are aligned with the sensor's neighbor lists:
/// `diffusion_*[j]` pairs with the j-th upstream neighbor, `reaction_*[j]`
/// with the j-th downstream neighbor. Volume vectors are empty for the
/// speed-only variant and exactly as long as their speed counterparts
/// otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdParams<F> {
    /// Linear coefficients on upstream speed gradients (ρ).
    pub diffusion_speed: Vec<F>,
    /// Linear coefficients on upstream volume gradients (ρ^q).
    pub diffusion_volume: Vec<F>,
    /// Bias of the linear diffusion term (d).
    pub diffusion_bias: F,
    /// Coefficients on downstream speed gradients inside tanh (σ).
    pub reaction_speed: Vec<F>,
    /// Coefficients on downstream volume gradients inside tanh (σ^q).
    pub reaction_volume: Vec<F>,
    /// Bias inside tanh (r).
    pub reaction_bias: F,
}

impl<F: Real> RdParams<F> {
    /// All-zero parameters for the given variant and neighbor counts.
    pub fn zeros(variant: RdVariant, n_upstream: usize, n_downstream: usize) -> Self {
        let vol = |n: usize| {
            if variant.uses_volume() {
                vec![F::zero(); n]
            } else {
                Vec::new()
            }
        };
        RdParams {
            diffusion_speed: vec![F::zero(); n_upstream],
            diffusion_volume: vol(n_upstream),
            diffusion_bias: F::zero(),
            reaction_speed: vec![F::zero(); n_downstream],
            reaction_volume: vol(n_downstream),
            reaction_bias: F::zero(),
        }
    }

    /// The variant implied by the stored coefficient vectors.
    pub fn variant(&self) -> RdVariant {
        if self.diffusion_volume.is_empty() && self.reaction_volume.is_empty() {
            RdVariant::SpeedOnly
        } else {
            RdVariant::SpeedVolume
        }
    }

    /// Total number of free parameters.
    pub fn param_count(&self) -> usize {
        self.diffusion_speed.len()
            + self.diffusion_volume.len()
            + self.reaction_speed.len()
            + self.reaction_volume.len()
            + 2
    }

    /// Flatten to the canonical packing order: diffusion speed, diffusion
    /// volume, diffusion bias, reaction speed, reaction volume, reaction
    /// bias. [`RdParams::from_vec`] inverts this.
    pub fn to_vec(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.diffusion_speed);
        out.extend_from_slice(&self.diffusion_volume);
        out.push(self.diffusion_bias);
        out.extend_from_slice(&self.reaction_speed);
        out.extend_from_slice(&self.reaction_volume);
        out.push(self.reaction_bias);
        out
    }

    /// Rebuild parameters from the canonical packing order.
    pub fn from_vec(
        variant: RdVariant,
        n_upstream: usize,
        n_downstream: usize,
        packed: &[F],
    ) -> Result<Self> {
        let vol_factor = if variant.uses_volume() { 2 } else { 1 };
        let expected = vol_factor * (n_upstream + n_downstream) + 2;
        if packed.len() != expected {
            return Err(Error::LengthMismatch {
                left: expected,
                right: packed.len(),
                what: "packed parameter vector",
            });
        }
        let mut it = packed.iter().copied();
        let mut take = |n: usize| -> Vec<F> { it.by_ref().take(n).collect() };
        let diffusion_speed = take(n_upstream);
        let diffusion_volume = take(if variant.uses_volume() { n_upstream } else { 0 });
        let diffusion_bias = it.next().expect("length checked");
        let reaction_speed = it.by_ref().take(n_downstream).collect();
        let reaction_volume: Vec<F> = it
            .by_ref()
            .take(if variant.uses_volume() { n_downstream } else { 0 })
            .collect();
        let reaction_bias = it.next().expect("length checked");
        Ok(RdParams {
            diffusion_speed,
            diffusion_volume,
            diffusion_bias,
            reaction_speed,
            reaction_volume,
            reaction_bias,
        })
    }
}

/// One regression row for a sensor: its own state at time `t`, the
/// spatial gradients toward its neighbors at `t`, and the observed speed
/// change to `t+δt`.
#[derive(Debug, Clone, PartialEq)]
pub struct RdSample<F> {
    /// Sensor's own speed `u_i(t)` (used for density routing).
    pub speed: F,
    /// Sensor's own volume `q_i(t)` (used for density routing).
    pub volume: F,
    /// `u_j(t) − u_i(t)` per upstream neighbor.
    pub upstream_du: Vec<F>,
    /// `q_j(t) − q_i(t)` per upstream neighbor.
    pub upstream_dq: Vec<F>,
    /// `u_j(t) − u_i(t)` per downstream neighbor.
    pub downstream_du: Vec<F>,
    /// `q_j(t) − q_i(t)` per downstream neighbor.
    pub downstream_dq: Vec<F>,
    /// Observed `Δu_i(t) = u_i(t+δt) − u_i(t)`.
    pub target: F,
}

impl<F: Real> RdSample<F> {
    /// Regressor vector in the canonical packing order (coefficients of
    /// [`RdParams::to_vec`] without the biases); doubles as the KDE
    /// feature vector for the weighted-conformal pipeline.
    pub fn feature_vector(&self, variant: RdVariant) -> Vec<F> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.upstream_du);
        if variant.uses_volume() {
            out.extend_from_slice(&self.upstream_dq);
        }
        out.extend_from_slice(&self.downstream_du);
        if variant.uses_volume() {
            out.extend_from_slice(&self.downstream_dq);
        }
        out
    }
}

/// Predicted `Δu` under the speed-only model.
pub fn rd_u_predict<F: Real>(
    params: &RdParams<F>,
    upstream_du: &[F],
    downstream_du: &[F],
) -> Result<F> {
    if params.variant() != RdVariant::SpeedOnly {
        return Err(Error::invalid(
            "speed-only prediction called with volume coefficients present",
        ));
    }
    let diffusion = dot_checked(&params.diffusion_speed, upstream_du, "upstream speed deltas")?;
    let reaction = dot_checked(&params.reaction_speed, downstream_du, "downstream speed deltas")?;
    Ok(diffusion + params.diffusion_bias + (reaction + params.reaction_bias).tanh())
}

/// Predicted `Δu` under the speed+volume model.
pub fn rd_uq_predict<F: Real>(
    params: &RdParams<F>,
    upstream_du: &[F],
    upstream_dq: &[F],
    downstream_du: &[F],
    downstream_dq: &[F],
) -> Result<F> {
    if params.diffusion_volume.len() != params.diffusion_speed.len()
        || params.reaction_volume.len() != params.reaction_speed.len()
    {
        return Err(Error::invalid(
            "speed+volume prediction needs one volume coefficient per speed coefficient",
        ));
    }
    let diffusion = dot_checked(&params.diffusion_speed, upstream_du, "upstream speed deltas")?
        + dot_checked(&params.diffusion_volume, upstream_dq, "upstream volume deltas")?;
    let reaction = dot_checked(&params.reaction_speed, downstream_du, "downstream speed deltas")?
        + dot_checked(&params.reaction_volume, downstream_dq, "downstream volume deltas")?;
    Ok(diffusion + params.diffusion_bias + (reaction + params.reaction_bias).tanh())
}

fn dot_checked<F: Real>(coef: &[F], x: &[F], what: &'static str) -> Result<F> {
    if coef.len() != x.len() {
        return Err(Error::LengthMismatch {
            left: coef.len(),
            right: x.len(),
            what,
        });
    }
    Ok(coef.iter().zip(x).map(|(&c, &v)| c * v).sum())
}

/// Traffic-density regime thresholds: `k = q/u` below `k1` is low,
/// within `[k1, k2]` medium, above `k2` high.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityBuckets<F> {
    /// Low/medium boundary (vehicles per unit distance).
    pub k1: F,
    /// Medium/high boundary.
    pub k2: F,
}

impl<F: Real> DensityBuckets<F> {
    /// Validated thresholds with `0 < k1 < k2`.
    pub fn new(k1: F, k2: F) -> Result<Self> {
        if !(k1.is_finite() && k2.is_finite()) || k1 <= F::zero() || k2 <= k1 {
            return Err(Error::invalid(format!(
                "density thresholds need 0 < k1 < k2, got k1 {k1}, k2 {k2}"
            )));
        }
        Ok(DensityBuckets { k1, k2 })
    }
}

/// Density regime of one snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DensityBucket {
    /// `k < k1`: free-flowing traffic.
    Low,
    /// `k1 ≤ k ≤ k2`.
    Medium,
    /// `k > k2`, including stopped traffic (`u = 0`).
    High,
}

impl DensityBucket {
    /// Array index for per-bucket storage.
    pub fn index(self) -> usize {
        match self {
            DensityBucket::Low => 0,
            DensityBucket::Medium => 1,
            DensityBucket::High => 2,
        }
    }

    /// All buckets in index order.
    pub fn all() -> [DensityBucket; 3] {
        [DensityBucket::Low, DensityBucket::Medium, DensityBucket::High]
    }

    /// Lowercase label used in serialized model keys.
    pub fn label(self) -> &'static str {
        match self {
            DensityBucket::Low => "low",
            DensityBucket::Medium => "medium",
            DensityBucket::High => "high",
        }
    }
}

/// Bucket of a single snapshot. Zero speed means stopped traffic, which
/// is maximal density: it routes to the high bucket rather than dividing
/// by zero.
pub fn density_bucket<F: Real>(speed: F, volume: F, thresholds: &DensityBuckets<F>) -> DensityBucket {
    if speed <= F::zero() {
        return DensityBucket::High;
    }
    let k = volume / speed;
    if k < thresholds.k1 {
        DensityBucket::Low
    } else if k <= thresholds.k2 {
        DensityBucket::Medium
    } else {
        DensityBucket::High
    }
}

/// Training subsets produced by [`density_split`].
#[derive(Debug, Clone)]
pub struct DensitySplit<F> {
    /// Low/medium/high subsets, indexable by [`DensityBucket::index`].
    pub buckets: [Vec<RdSample<F>>; 3],
    /// How many samples were routed high because their speed was zero.
    pub zero_speed: usize,
}

/// Partition samples into the three density regimes of their own
/// `(speed, volume)` state. Every sample lands in exactly one bucket;
/// zero-speed samples go high and are counted (and logged).
pub fn density_split<F: Real>(
    samples: &[RdSample<F>],
    thresholds: &DensityBuckets<F>,
) -> DensitySplit<F> {
    let mut buckets: [Vec<RdSample<F>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut zero_speed = 0;
    for sample in samples {
        if sample.speed <= F::zero() {
            zero_speed += 1;
        }
        let bucket = density_bucket(sample.speed, sample.volume, thresholds);
        buckets[bucket.index()].push(sample.clone());
    }
    if zero_speed > 0 {
        log::warn!("{zero_speed} zero-speed samples routed to the high-density bucket");
    }
    DensitySplit { buckets, zero_speed }
}

/// Empirical-tertile thresholds of the density distribution `k = q/u`
/// over the given samples (zero-speed samples are excluded — they route
/// high unconditionally). Errors if the distribution is too small or too
/// degenerate to produce `0 < k1 < k2`.
pub fn empirical_density_tertiles<F: Real>(samples: &[RdSample<F>]) -> Result<DensityBuckets<F>> {
    let mut ks: Vec<F> = samples
        .iter()
        .filter(|s| s.speed > F::zero())
        .map(|s| s.volume / s.speed)
        .collect();
    if ks.len() < 3 {
        return Err(Error::invalid(
            "need at least three positive-speed samples for density tertiles",
        ));
    }
    ks.sort_by(|a, b| a.partial_cmp(b).expect("finite densities"));
    let n = ks.len();
    let k1 = ks[n / 3];
    let k2 = ks[(2 * n / 3).saturating_sub(1).max(n / 3)];
    DensityBuckets::new(k1, k2)
}

/// Directed sensor adjacency: per node, the upstream neighbors that
/// exert diffusion and the downstream neighbors that exert reaction.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorGraph {
    nodes: BTreeMap<String, NodeNeighbors>,
}

/// Neighbor sets of one sensor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeNeighbors {
    /// Upstream neighbors (diffusion sources).
    pub upstream: BTreeSet<String>,
    /// Downstream neighbors (reaction sources).
    pub downstream: BTreeSet<String>,
}

impl SensorGraph {
    /// Empty graph.
    pub fn new() -> Self {
        SensorGraph::default()
    }

    /// Record a node, accumulating any provided neighbors into its sets.
    /// Self-loops are rejected.
    pub fn insert_neighbors(
        &mut self,
        node: &str,
        upstream: Option<&str>,
        downstream: Option<&str>,
    ) -> Result<()> {
        if upstream == Some(node) || downstream == Some(node) {
            return Err(Error::invalid(format!("node {node} cannot neighbor itself")));
        }
        let entry = self.nodes.entry(node.to_string()).or_default();
        if let Some(u) = upstream {
            entry.upstream.insert(u.to_string());
        }
        if let Some(d) = downstream {
            entry.downstream.insert(d.to_string());
        }
        Ok(())
    }

    /// Neighbor sets of one node.
    pub fn get(&self, node: &str) -> Option<&NodeNeighbors> {
        self.nodes.get(node)
    }

    /// Nodes in deterministic (sorted) order.
    pub fn nodes(&self) -> impl Iterator<Item = (&str, &NodeNeighbors)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Whether the graph has no nodes.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Keep only nodes with exactly one upstream and one downstream
    /// neighbor — the shape the degree-2 predictors are built for.
    pub fn filter_degree2(&self) -> SensorGraph {
        SensorGraph {
            nodes: self
                .nodes
                .iter()
                .filter(|(_, n)| n.upstream.len() == 1 && n.downstream.len() == 1)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Gradient-descent settings for [`fit_rd`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions<F> {
    /// Hard iteration cap.
    pub max_iters: usize,
    /// Fixed gradient-descent step size.
    pub step_size: F,
    /// Stop when the loss improves by less than this between iterations.
    pub tolerance: F,
}

impl<F: Real> Default for FitOptions<F> {
    fn default() -> Self {
        FitOptions {
            max_iters: 10_000,
            step_size: F::from_config(1e-2),
            tolerance: F::from_config(1e-9),
        }
    }
}

/// Result of a reaction–diffusion fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RdFit<F> {
    /// Fitted parameters.
    pub params: RdParams<F>,
    /// Mean squared error at the final iterate.
    pub final_loss: F,
    /// Gradient steps taken.
    pub iterations: usize,
}

/// Flattened design matrix for the fitting hot loop.
struct Design<F> {
    diffusion: Vec<F>,
    reaction: Vec<F>,
    targets: Vec<F>,
    n_diffusion: usize,
    n_reaction: usize,
    n_upstream: usize,
    n_downstream: usize,
}

impl<F: Real> Design<F> {
    fn build(variant: RdVariant, samples: &[RdSample<F>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("training samples"));
        }
        let n_upstream = samples[0].upstream_du.len();
        let n_downstream = samples[0].downstream_du.len();
        let vol = variant.uses_volume();
        let n_diffusion = n_upstream * if vol { 2 } else { 1 };
        let n_reaction = n_downstream * if vol { 2 } else { 1 };
        let mut diffusion = Vec::with_capacity(samples.len() * n_diffusion);
        let mut reaction = Vec::with_capacity(samples.len() * n_reaction);
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            let shape_ok = s.upstream_du.len() == n_upstream
                && s.downstream_du.len() == n_downstream
                && (!vol
                    || (s.upstream_dq.len() == n_upstream
                        && s.downstream_dq.len() == n_downstream));
            if !shape_ok {
                return Err(Error::invalid(
                    "training samples disagree on neighbor counts",
                ));
            }
            if !s.target.is_finite() {
                return Err(Error::invalid("non-finite training target"));
            }
            diffusion.extend_from_slice(&s.upstream_du);
            if vol {
                diffusion.extend_from_slice(&s.upstream_dq);
            }
            reaction.extend_from_slice(&s.downstream_du);
            if vol {
                reaction.extend_from_slice(&s.downstream_dq);
            }
            targets.push(s.target);
        }
        Ok(Design {
            diffusion,
            reaction,
            targets,
            n_diffusion,
            n_reaction,
            n_upstream,
            n_downstream,
        })
    }

    fn n(&self) -> usize {
        self.targets.len()
    }

    /// Mean squared error and its gradient in the packed layout
    /// `[diffusion coef..., d, reaction coef..., r]`.
    fn loss_gradient(&self, theta: &[F]) -> (F, Vec<F>) {
        let (dw, rest) = theta.split_at(self.n_diffusion);
        let d = rest[0];
        let (rw, last) = rest[1..].split_at(self.n_reaction);
        let r = last[0];
        let n = F::from_count(self.n());
        let two = F::from_config(2.0);

        let mut loss = F::zero();
        let mut grad = vec![F::zero(); theta.len()];
        for (row, &y) in self.targets.iter().enumerate() {
            let xd = &self.diffusion[row * self.n_diffusion..(row + 1) * self.n_diffusion];
            let xr = &self.reaction[row * self.n_reaction..(row + 1) * self.n_reaction];
            let a = dot(rw, xr) + r;
            let t = a.tanh();
            let pred = dot(dw, xd) + d + t;
            let e = pred - y;
            loss = loss + e * e;
            let scale = two * e / n;
            let sech2 = F::one() - t * t;
            for (g, &x) in grad[..self.n_diffusion].iter_mut().zip(xd) {
                *g = *g + scale * x;
            }
            grad[self.n_diffusion] = grad[self.n_diffusion] + scale;
            let r_base = self.n_diffusion + 1;
            for (g, &x) in grad[r_base..r_base + self.n_reaction].iter_mut().zip(xr) {
                *g = *g + scale * sech2 * x;
            }
            grad[r_base + self.n_reaction] = grad[r_base + self.n_reaction] + scale * sech2;
        }
        (loss / n, grad)
    }
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Mean-squared-error loss and analytic gradient of a parameter set on a
/// sample set, in the [`RdParams::to_vec`] packing order. Exposed so the
/// gradient can be checked against finite differences.
pub fn rd_loss_gradient<F: Real>(
    variant: RdVariant,
    samples: &[RdSample<F>],
    params: &RdParams<F>,
) -> Result<(F, Vec<F>)> {
    let design = Design::build(variant, samples)?;
    let theta = params.to_vec();
    let expected = design.n_diffusion + design.n_reaction + 2;
    if theta.len() != expected {
        return Err(Error::LengthMismatch {
            left: expected,
            right: theta.len(),
            what: "parameter vector vs sample shape",
        });
    }
    Ok(design.loss_gradient(&theta))
}

/// Fit reaction–diffusion parameters by full-batch gradient descent on
/// mean squared error, starting from all-zero parameters with a fixed
/// step size. Deterministic: the same samples and options always produce
/// bit-identical parameters.
pub fn fit_rd<F: Real>(
    variant: RdVariant,
    samples: &[RdSample<F>],
    options: &FitOptions<F>,
) -> Result<RdFit<F>> {
    if options.max_iters == 0 || options.step_size <= F::zero() || options.tolerance < F::zero() {
        return Err(Error::invalid(
            "fit options need max_iters ≥ 1, step_size > 0, tolerance ≥ 0",
        ));
    }
    let design = Design::build(variant, samples)?;
    let n_params = design.n_diffusion + design.n_reaction + 2;
    if design.n() < 10 * n_params {
        log::warn!(
            "fitting {n_params} parameters on only {} samples; estimates may be unstable",
            design.n()
        );
    }

    let mut theta = vec![F::zero(); n_params];
    let (mut loss, mut grad) = design.loss_gradient(&theta);
    // A step too large for the data makes the loss grow without bound;
    // catching the explosion early gives a clean failure instead of an
    // eventual overflow. Small transient increases (end-stage
    // oscillation around the optimum) are tolerated and iterated through.
    let blowup = (loss + F::one()) * F::from_config(1e6);
    let mut iterations = 0;
    for iter in 1..=options.max_iters {
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t = *t - options.step_size * *g;
        }
        let (new_loss, new_grad) = design.loss_gradient(&theta);
        if !new_loss.is_finite() || new_loss > blowup {
            return Err(Error::FitFailure(format!(
                "loss diverged to {new_loss} at iteration {iter} (step size {})",
                options.step_size
            )));
        }
        let improvement = loss - new_loss;
        loss = new_loss;
        grad = new_grad;
        iterations = iter;
        if improvement >= F::zero() && improvement < options.tolerance {
            break;
        }
    }
    let params = RdParams::from_vec(variant, design.n_upstream, design.n_downstream, &theta)?;
    Ok(RdFit {
        params,
        final_loss: loss,
        iterations,
    })
}

/// A fitted per-sensor predictor: a single parameter set for the
/// speed-only variant, or density-routed parameter sets plus their
/// thresholds for the speed+volume variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SensorModel<F> {
    /// Speed-only model.
    SpeedOnly(RdParams<F>),
    /// Speed+volume model with one parameter set per density regime.
    SpeedVolume {
        /// Density thresholds learned on the training set.
        thresholds: DensityBuckets<F>,
        /// Parameters for low/medium/high regimes, by bucket index.
        params: Box<[RdParams<F>; 3]>,
    },
}

impl<F: Real> SensorModel<F> {
    /// The variant this model implements.
    pub fn variant(&self) -> RdVariant {
        match self {
            SensorModel::SpeedOnly(_) => RdVariant::SpeedOnly,
            SensorModel::SpeedVolume { .. } => RdVariant::SpeedVolume,
        }
    }

    /// Predicted `Δu` for one sample; speed+volume models first route the
    /// sample to a density regime using its own `(speed, volume)` state.
    pub fn predict(&self, sample: &RdSample<F>) -> Result<F> {
        match self {
            SensorModel::SpeedOnly(p) => {
                rd_u_predict(p, &sample.upstream_du, &sample.downstream_du)
            }
            SensorModel::SpeedVolume { thresholds, params } => {
                let bucket = density_bucket(sample.speed, sample.volume, thresholds);
                rd_uq_predict(
                    &params[bucket.index()],
                    &sample.upstream_du,
                    &sample.upstream_dq,
                    &sample.downstream_du,
                    &sample.downstream_dq,
                )
            }
        }
    }
}
