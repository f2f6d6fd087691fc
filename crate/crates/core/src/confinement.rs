//! Confinement functions: numerical certificates that `rho` keeps the
//! stochastic gradients pointing inwards, the constants that make the scaled
//! update `x_{t+1} = R_{x_t}(-(gamma_t / phi) u_t)` stay inside
//! `{rho <= rho1}`, and the confined runs themselves.
//!
//! Suprema are estimated by sampling, so a PASS is evidence rather than proof.
//! For `B` the supremum of a quadratic over the convex hull `C_x` is probed
//! with Dirichlet-weighted combinations of the extreme points, a heuristic.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batching::{draw_rng, BatchPlan, BatchSizes};
use crate::driver::{run, Monitor, RateRule, RunConfig, Trajectory};
use crate::error::{Error, Result};
use crate::manifold::{Manifold, ManifoldKind, Point, TangentVector};
use crate::problems::GradientOracle;
use crate::schedules::DeterministicSchedule;

/// Step for the central second differences of `w -> rho(R_x(w))`.
pub const HESSIAN_STEP: f64 = 1e-4;
/// Safety factor applied to the sampled suprema.
pub const SAFETY_FACTOR: f64 = 1.5;
/// Slack allowed on confinement invariants.
pub const INVARIANT_SLACK: f64 = 1e-9;

const DIRICHLET_COMBINATIONS: usize = 8;
const REJECTION_PROPOSALS: usize = 10_000;
const BISECTION_STEPS: usize = 200;

/// A scalar function on the manifold with its Riemannian gradient.
pub trait ConfinementFunction: Send + Sync {
    fn value(&self, x: &Point) -> f64;

    fn gradient(&self, manifold: &Manifold, x: &Point) -> TangentVector;

    /// Whether `r -> rho(r d)` is nondecreasing for every direction `d` in
    /// Euclidean space, which enables band sampling by bisection.
    fn radially_monotone(&self) -> bool {
        false
    }
}

/// `rho(x) = |x|^2`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SquaredNorm;

impl ConfinementFunction for SquaredNorm {
    fn value(&self, x: &Point) -> f64 {
        crate::linalg::norm_sq(x.coords())
    }

    fn gradient(&self, manifold: &Manifold, x: &Point) -> TangentVector {
        let g: Vec<f64> = x.coords().iter().map(|c| 2.0 * c).collect();
        manifold.project_tangent(x, &g)
    }

    fn radially_monotone(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConfinementVariant {
    Plain,
    Kappa { kappa: f64 },
    BatchKappa { kappa: f64 },
}

#[derive(Clone)]
pub struct ConfinementSpec {
    pub rho: Arc<dyn ConfinementFunction>,
    pub rho0: f64,
    /// Upper level for the kappa variants; the plain variant derives its own.
    pub rho1: Option<f64>,
    pub variant: ConfinementVariant,
}

impl std::fmt::Debug for ConfinementSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConfinementSpec")
            .field("rho0", &self.rho0)
            .field("rho1", &self.rho1)
            .field("variant", &self.variant)
            .finish_non_exhaustive()
    }
}

impl ConfinementSpec {
    pub fn plain(rho: Arc<dyn ConfinementFunction>, rho0: f64) -> Self {
        Self { rho, rho0, rho1: None, variant: ConfinementVariant::Plain }
    }

    pub fn kappa(rho: Arc<dyn ConfinementFunction>, rho0: f64, rho1: f64, kappa: f64, batch: bool) -> Result<Self> {
        let variant =
            if batch { ConfinementVariant::BatchKappa { kappa } } else { ConfinementVariant::Kappa { kappa } };
        let spec = Self { rho, rho0, rho1: Some(rho1), variant };
        spec.kappa_levels()?;
        Ok(spec)
    }

    /// `(kappa, rho1, batch)` for the kappa variants.
    fn kappa_levels(&self) -> Result<(f64, f64, bool)> {
        let (kappa, batch) = match self.variant {
            ConfinementVariant::Plain => {
                return Err(Error::Precondition("kappa check needs a kappa or batch-kappa variant".into()))
            }
            ConfinementVariant::Kappa { kappa } => (kappa, false),
            ConfinementVariant::BatchKappa { kappa } => (kappa, true),
        };
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(Error::InvalidHyperparameters(format!("kappa = {kappa} must be > 0")));
        }
        let rho1 = self.rho1.ok_or_else(|| Error::Precondition("kappa variants need rho1".into()))?;
        if !(self.rho0 < rho1) {
            return Err(Error::InvalidHyperparameters(format!("rho0 = {} must be < rho1 = {rho1}", self.rho0)));
        }
        Ok((kappa, rho1, batch))
    }

    pub fn monitor(&self, rho1: f64) -> Monitor {
        Monitor { rho: self.rho.clone(), rho1 }
    }
}

/// A sample at which a condition attains its smallest margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub condition: String,
    pub x: Vec<f64>,
    pub outcome: Option<usize>,
    pub v: Option<Vec<f64>>,
    pub s: Option<f64>,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfinementConstants {
    pub lambda: f64,
    pub b: f64,
    pub theta: f64,
    pub c: f64,
    pub sigma: f64,
    pub lambda_est: f64,
    pub b_est: f64,
    pub phi: f64,
    pub rho0: f64,
    pub rho1: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfinementReport {
    pub check_name: String,
    pub pass: bool,
    pub min_margin: f64,
    pub witness: Option<Witness>,
    pub constants: Option<ConfinementConstants>,
    pub n_samples: usize,
    pub seed: u64,
    pub notes: Vec<String>,
}

fn dirichlet_combination<R: Rng + ?Sized>(
    m: &Manifold,
    x: &Point,
    extremes: &[TangentVector],
    rng: &mut R,
) -> TangentVector {
    let w: Vec<f64> = (0..extremes.len()).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = w.iter().sum();
    let mut acc = m.zero(x);
    for (wi, e) in w.iter().zip(extremes) {
        m.accumulate(&mut acc, wi / total, e);
    }
    m.reproject(acc)
}

/// The extreme points `H(x, l)` and, if `hull`, random convex combinations.
fn directions<O, R>(oracle: &O, x: &Point, hull: bool, rng: &mut R) -> Result<Vec<(Option<usize>, TangentVector)>>
where
    O: GradientOracle + ?Sized,
    R: Rng + ?Sized,
{
    let m = oracle.manifold();
    let extremes: Vec<TangentVector> =
        (0..oracle.space().size()).map(|l| oracle.sample_gradient(x, l)).collect::<Result<_>>()?;
    let mut out: Vec<(Option<usize>, TangentVector)> =
        extremes.iter().cloned().enumerate().map(|(l, v)| (Some(l), v)).collect();
    if hull && extremes.len() > 1 {
        for _ in 0..DIRICHLET_COMBINATIONS {
            out.push((None, dirichlet_combination(&m, x, &extremes, rng)));
        }
    }
    Ok(out)
}

/// `Hess(rho o R_x)|_w (v, v)` by a central second difference along `v / |v|`.
pub fn retraction_hessian(
    rho: &dyn ConfinementFunction,
    m: &Manifold,
    x: &Point,
    w: &TangentVector,
    v: &TangentVector,
) -> Result<f64> {
    let n = m.norm(v);
    if n == 0.0 {
        return Ok(0.0);
    }
    let e = m.scale(1.0 / n, v);
    let at = |s: f64| -> Result<f64> {
        let arg = m.add(w, &m.scale(s, &e))?;
        Ok(rho.value(&m.retract(x, &arg)?))
    };
    let h = HESSIAN_STEP;
    let second = (at(h)? - 2.0 * at(0.0)? + at(-h)?) / (h * h);
    Ok(second * n * n)
}

/// A point with `lo <= rho(x) <= hi`. Radially monotone functions on
/// Euclidean space are sampled by bisection along a uniform direction with a
/// level drawn uniformly from the band (the top level with probability 1/4);
/// anything else falls back to rejection sampling.
pub fn sample_band<R: Rng + ?Sized>(
    rho: &dyn ConfinementFunction,
    m: &Manifold,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<Point> {
    if m.kind() == ManifoldKind::Euclidean && rho.radially_monotone() {
        let origin = Point::new(vec![0.0; m.ambient_dim()]);
        let base = rho.value(&origin);
        let floor = lo.max(base);
        if floor <= hi {
            let level = if rng.random_bool(0.25) { hi } else { floor + (hi - floor) * rng.random::<f64>() };
            let dir = m.random_unit_tangent(&origin, rng);
            let along = |r: f64| rho.value(&Point::new(dir.vec().iter().map(|c| r * c).collect()));
            let mut upper = 1.0;
            let mut doublings = 0;
            while along(upper) < level {
                upper *= 2.0;
                doublings += 1;
                if doublings > 1000 {
                    return Err(Error::SamplerFailure(format!("level {level} unreachable along a direction")));
                }
            }
            let mut lower = 0.0;
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lower + upper);
                if along(mid) < level {
                    lower = mid;
                } else {
                    upper = mid;
                }
            }
            // the lower end stays inside the band from below
            let r = if along(lower) >= lo { lower } else { upper };
            let x = Point::new(dir.vec().iter().map(|c| r * c).collect());
            let v = rho.value(&x);
            if v >= lo && v <= hi {
                return Ok(x);
            }
        }
    }
    for _ in 0..REJECTION_PROPOSALS {
        let mut x = m.random_point(rng);
        if m.kind() == ManifoldKind::Euclidean {
            let scale = 10f64.powf(rng.random_range(-2.0..2.0));
            x = Point::new(x.coords().iter().map(|c| scale * c).collect());
        }
        let v = rho.value(&x);
        if v >= lo && v <= hi {
            return Ok(x);
        }
    }
    Err(Error::SamplerFailure(format!("no sample with {lo} <= rho <= {hi} after {REJECTION_PROPOSALS} proposals")))
}

/// Reduces per-sample `(margin, witness)` pairs to the smallest margin, keeping
/// the earliest sample on ties.
fn worst(items: Vec<Option<(f64, Witness)>>) -> Option<(f64, Witness)> {
    items.into_iter().flatten().fold(None, |acc, (m, w)| match acc {
        Some((am, aw)) if am <= m => Some((am, aw)),
        _ => Some((m, w)),
    })
}

fn plain_band(rho0: f64) -> f64 {
    if rho0 > 0.0 {
        10.0 * rho0
    } else {
        rho0 + 1.0
    }
}

/// Samples `x` on `rho0 <= rho <= 10 rho0` and every outcome `l`, and reports
/// the smallest `<grad rho(x), H(x, l)>`.
pub fn check_plain_confinement<O: GradientOracle + ?Sized>(
    spec: &ConfinementSpec,
    oracle: &O,
    n_samples: usize,
    seed: u64,
) -> Result<ConfinementReport> {
    if n_samples == 0 {
        return Err(Error::Precondition("n_samples must be >= 1".into()));
    }
    let m = oracle.manifold();
    let hi = plain_band(spec.rho0);
    let per: Vec<Option<(f64, Witness)>> = (0..n_samples)
        .into_par_iter()
        .map(|i| -> Result<Option<(f64, Witness)>> {
            let mut rng = draw_rng(seed, i);
            let x = sample_band(spec.rho.as_ref(), &m, spec.rho0, hi, &mut rng)?;
            let g = spec.rho.gradient(&m, &x);
            let mut best: Option<(f64, Witness)> = None;
            for l in 0..oracle.space().size() {
                let margin = m.inner(&g, &oracle.sample_gradient(&x, l)?);
                if best.as_ref().is_none_or(|(b, _)| margin < *b) {
                    let w = Witness {
                        condition: "inward".into(),
                        x: x.coords().to_vec(),
                        outcome: Some(l),
                        v: None,
                        s: None,
                        margin,
                    };
                    best = Some((margin, w));
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let (min_margin, witness) = worst(per).expect("at least one sample");
    Ok(ConfinementReport {
        check_name: "confinement".into(),
        pass: min_margin >= 0.0,
        min_margin,
        witness: Some(witness),
        constants: None,
        n_samples,
        seed,
        notes: vec![format!("band {} <= rho <= {hi}", spec.rho0)],
    })
}

/// `sup sqrt(max(0, Hess(rho o R_x)|_{-theta v}(v, v)))` over sampled
/// `x` in `{rho <= level}`, `v` in `C_x` and `theta` in `[0, theta_max]`.
fn curvature_sup<O: GradientOracle + ?Sized>(
    spec: &ConfinementSpec,
    oracle: &O,
    level: f64,
    theta_max: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let m = oracle.manifold();
    let per: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut rng = draw_rng(seed, i);
            let x = sample_band(spec.rho.as_ref(), &m, f64::NEG_INFINITY, level, &mut rng)?;
            let mut best: f64 = 0.0;
            for (_, v) in directions(oracle, &x, true, &mut rng)? {
                for theta in [0.0, theta_max, theta_max * rng.random::<f64>()] {
                    let hs = retraction_hessian(spec.rho.as_ref(), &m, &x, &m.scale(-theta, &v), &v)?;
                    best = best.max(hs.max(0.0).sqrt());
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().fold(0.0, f64::max))
}

/// A scale for `b`: the curvature supremum over `{rho <= rho0 + lambda c}`,
/// the sublevel set reached before the schedule term is added.
pub fn choose_b<O: GradientOracle + ?Sized>(
    spec: &ConfinementSpec,
    oracle: &O,
    schedule: &DeterministicSchedule,
    lambda: f64,
    theta: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let level = spec.rho0 + lambda * schedule.max_gamma();
    let s = curvature_sup(spec, oracle, level, theta, n_samples, seed)?;
    Ok(if s > 0.0 { s } else { 1.0 })
}

/// Estimates `Lambda`, `B` and sets `phi = max(1.5 Lambda_est, 1.5 B_est, c / Theta)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_constants<O: GradientOracle + ?Sized>(
    spec: &ConfinementSpec,
    oracle: &O,
    schedule: &DeterministicSchedule,
    lambda: f64,
    b: f64,
    theta: f64,
    n_samples: usize,
    seed: u64,
) -> Result<ConfinementConstants> {
    for (name, v) in [("lambda", lambda), ("b", b), ("theta", theta)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidHyperparameters(format!("{name} = {v} must be > 0")));
        }
    }
    if n_samples == 0 {
        return Err(Error::Precondition("n_samples must be >= 1".into()));
    }
    let rm = schedule.validate_robbins_monro();
    if !rm.valid {
        return Err(Error::Precondition(format!("schedule is not Robbins-Monro: {}", rm.reason)));
    }
    let c = schedule.max_gamma();
    let sigma = schedule.sum_of_squares();
    let rho1 = spec.rho0 + lambda * c + b * b * sigma / 2.0;
    let m = oracle.manifold();

    // the objective is linear in v, so extreme points attain the supremum
    let inward: Vec<f64> = (0..n_samples)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut rng = draw_rng(seed, i);
            let x = sample_band(spec.rho.as_ref(), &m, f64::NEG_INFINITY, spec.rho0, &mut rng)?;
            let g = spec.rho.gradient(&m, &x);
            let mut best: f64 = 0.0;
            for (_, v) in directions(oracle, &x, false, &mut rng)? {
                best = best.max(-m.inner(&g, &v));
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let lambda_est = inward.into_iter().fold(0.0, f64::max) / lambda;
    let b_est = curvature_sup(spec, oracle, rho1, theta, n_samples, seed.wrapping_add(1))? / b;
    let phi = (SAFETY_FACTOR * lambda_est).max(SAFETY_FACTOR * b_est).max(c / theta);
    Ok(ConfinementConstants { lambda, b, theta, c, sigma, lambda_est, b_est, phi, rho0: spec.rho0, rho1, n_samples })
}

/// Smallest margin of `rho(x_t) + (b^2/2) sum_{j >= t} gamma_j^2 <= rho1`
/// over the recorded steps, or the first violation.
pub fn check_induction_invariant(
    trajectory: &Trajectory,
    schedule: &DeterministicSchedule,
    constants: &ConfinementConstants,
) -> Result<f64> {
    let half_b2 = constants.b * constants.b / 2.0;
    let mut tail = constants.sigma;
    let mut min_margin = f64::INFINITY;
    for r in &trajectory.records {
        let rho = r.rho.ok_or_else(|| Error::Precondition("trajectory was run without a rho monitor".into()))?;
        let value = rho + half_b2 * tail;
        if !(value <= constants.rho1 + INVARIANT_SLACK) {
            return Err(Error::ConfinementViolation { t: r.t, value, bound: constants.rho1 });
        }
        min_margin = min_margin.min(constants.rho1 - value);
        let g = schedule.gamma(r.t);
        tail -= g * g;
    }
    Ok(min_margin)
}

/// Runs `x_{t+1} = R_{x_t}(-(gamma_t / phi) u_t)` and enforces the induction
/// invariant at every recorded step.
pub fn run_confined_deterministic<O: GradientOracle + ?Sized>(
    oracle: &O,
    cfg: &RunConfig,
    spec: &ConfinementSpec,
    constants: &ConfinementConstants,
) -> Result<Trajectory> {
    let RateRule::Deterministic(schedule) = &cfg.rate else {
        return Err(Error::Precondition("confined deterministic run needs a deterministic schedule".into()));
    };
    let r0 = spec.rho.value(&cfg.x0);
    if r0 > spec.rho0 {
        return Err(Error::Precondition(format!("rho(x0) = {r0} exceeds rho0 = {}", spec.rho0)));
    }
    let mut confined = cfg.clone();
    confined.rate = RateRule::Deterministic(schedule.scaled(constants.phi)?);
    confined.monitor = Some(spec.monitor(constants.rho1));
    let trajectory = run(oracle, &confined)?;
    check_induction_invariant(&trajectory, schedule, constants)?;
    Ok(trajectory)
}

fn single_outcome_batches(plan: &BatchPlan) -> bool {
    match plan {
        BatchPlan::SegmentWithRepetition { sizes } | BatchPlan::UniformNoRepetition { sizes } => match sizes {
            BatchSizes::Constant { size } => *size == 1,
            BatchSizes::Explicit { sizes } => sizes.iter().all(|&b| b == 1),
            BatchSizes::Geometric { initial, factor, .. } => *initial == 1 && *factor == 1.0,
        },
        BatchPlan::Stratified { strata, overrides } => {
            strata.total_count() == 1 && overrides.values().all(|s| s.total_count() == 1)
        }
    }
}

/// Runs the adaptive rule under a (batch) kappa-confinement and enforces
/// `rho(x_t) <= rho1` at every step.
pub fn run_confined_adaptive<O: GradientOracle + ?Sized>(
    oracle: &O,
    cfg: &RunConfig,
    spec: &ConfinementSpec,
) -> Result<Trajectory> {
    let (kappa, rho1, batch) = spec.kappa_levels()?;
    let RateRule::Adaptive(params) = &cfg.rate else {
        return Err(Error::Precondition("confined adaptive run needs adaptive hyperparameters".into()));
    };
    let eta0 = params.eta0();
    if eta0 > kappa {
        return Err(Error::Precondition(format!("eta0 = {eta0} exceeds kappa = {kappa}")));
    }
    if !batch && !single_outcome_batches(&cfg.plan) {
        return Err(Error::Precondition(
            "batch gradients leave the extreme points; a batch kappa-confinement is required".into(),
        ));
    }
    let mut confined = cfg.clone();
    confined.monitor = Some(spec.monitor(rho1));
    let trajectory = run(oracle, &confined)?;
    for r in &trajectory.records {
        let rho = r.rho.expect("monitored run");
        if !(rho <= rho1 + INVARIANT_SLACK) {
            return Err(Error::ConfinementViolation { t: r.t, value: rho, bound: rho1 });
        }
    }
    Ok(trajectory)
}

/// Checks both kappa-confinement inequalities at sampled `(x, v, s)`:
/// `rho(R_x(-s v)) <= rho1` when `rho(x) <= rho0`, and
/// `<grad rho(x), v> >= max(0, (kappa/2) Hess(rho o R_x)|_{-s v}(v, v))`
/// on `rho0 <= rho(x) <= rho1`.
pub fn check_kappa_confinement<O: GradientOracle + ?Sized>(
    spec: &ConfinementSpec,
    oracle: &O,
    n_samples: usize,
    seed: u64,
) -> Result<ConfinementReport> {
    let (kappa, rho1, batch) = spec.kappa_levels()?;
    if n_samples == 0 {
        return Err(Error::Precondition("n_samples must be >= 1".into()));
    }
    let m = oracle.manifold();
    let rho = spec.rho.as_ref();
    let per: Vec<Option<(f64, Witness)>> = (0..n_samples)
        .into_par_iter()
        .map(|i| -> Result<Option<(f64, Witness)>> {
            let mut rng = draw_rng(seed, i);
            let mut best: Option<(f64, Witness)> = None;
            let mut consider =
                |margin: f64, condition: &str, x: &Point, l: Option<usize>, v: &TangentVector, s: f64| {
                    if best.as_ref().is_none_or(|(b, _)| margin < *b) {
                        let w = Witness {
                            condition: condition.into(),
                            x: x.coords().to_vec(),
                            outcome: l,
                            v: Some(v.vec().to_vec()),
                            s: Some(s),
                            margin,
                        };
                        best = Some((margin, w));
                    }
                };

            let inner = sample_band(rho, &m, f64::NEG_INFINITY, spec.rho0, &mut rng)?;
            for (l, v) in directions(oracle, &inner, batch, &mut rng)? {
                for s in [kappa, kappa * rng.random::<f64>()] {
                    let y = m.retract(&inner, &m.scale(-s, &v))?;
                    consider(rho1 - rho.value(&y), "stays below rho1", &inner, l, &v, s);
                }
            }

            let band = sample_band(rho, &m, spec.rho0, rho1, &mut rng)?;
            let g = spec.rho.gradient(&m, &band);
            for (l, v) in directions(oracle, &band, batch, &mut rng)? {
                let lhs = m.inner(&g, &v);
                for s in [0.0, kappa, kappa * rng.random::<f64>()] {
                    let hess = retraction_hessian(rho, &m, &band, &m.scale(-s, &v), &v)?;
                    consider(lhs - (0.5 * kappa * hess).max(0.0), "inward against curvature", &band, l, &v, s);
                }
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    let (min_margin, witness) = worst(per).expect("at least one sample");
    let mut notes = vec![format!("kappa = {kappa}, rho0 = {}, rho1 = {rho1}", spec.rho0)];
    if batch {
        notes.push("convex hull probed with Dirichlet combinations (heuristic)".into());
    }
    Ok(ConfinementReport {
        check_name: if batch { "batch-kappa-confinement" } else { "kappa-confinement" }.into(),
        pass: min_margin >= 0.0,
        min_margin,
        witness: Some(witness),
        constants: None,
        n_samples,
        seed,
        notes,
    })
}
