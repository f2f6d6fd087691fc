//! Numerical checks of the quantities the convergence argument relies on:
//! retraction-Lipschitz constants, the per-step descent inequality, the noise
//! martingale `z_t = sum rate_tau u_tau`, the gradient-square difference bound,
//! the adaptive weighted square sums and summary convergence metrics.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batching::{draw_rng, enumerate_expectation, BatchPlan, DEFAULT_ENUMERATION_BUDGET};
use crate::confinement::{sample_band, SquaredNorm};
use crate::driver::{Record, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{norm, sub};
use crate::manifold::{Manifold, ManifoldKind, Point};
use crate::problems::{GradientOracle, Region};
use crate::schedules::AdaptiveParams;

/// Slack on the per-step descent inequality.
pub const DESCENT_SLACK: f64 = 1e-9;
/// Margin applied to estimated constants in descent checks.
pub const DESCENT_MARGIN: f64 = 1.2;
/// Margin applied to estimated constants elsewhere.
pub const CONSTANT_MARGIN: f64 = 1.5;
/// Smallest tangent length used in Lipschitz ratios.
pub const MIN_STEP_NORM: f64 = 1e-8;
/// Step for the finite-difference gradient check.
pub const FD_STEP: f64 = 1e-6;
/// Tolerance of the finite-difference gradient check.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Tolerance of the exact unbiasedness check.
pub const UNBIASED_TOLERANCE: f64 = 1e-10;

/// A sample or step where a checked inequality `lhs <= rhs` is tightest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub label: String,
    pub t: Option<usize>,
    pub x: Option<Vec<f64>>,
    pub lhs: f64,
    pub rhs: f64,
}

impl Witness {
    fn margin(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Outcome of a check; `margin` is the smallest `rhs - lhs` seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub check_name: String,
    pub pass: bool,
    pub margin: f64,
    pub witnesses: Vec<Witness>,
    pub n_samples: usize,
    pub seed: Option<u64>,
    pub violations: usize,
}

/// Collects `lhs <= rhs` comparisons, keeping the tightest one and the first violation.
struct Tally {
    worst: Option<Witness>,
    first_violation: Option<Witness>,
    violations: usize,
    n: usize,
}

impl Tally {
    fn new() -> Self {
        Self { worst: None, first_violation: None, violations: 0, n: 0 }
    }

    fn push(&mut self, w: Witness) {
        self.n += 1;
        let margin = w.margin();
        if !(margin >= 0.0) {
            self.violations += 1;
            if self.first_violation.is_none() {
                self.first_violation = Some(w.clone());
            }
        }
        if self.worst.as_ref().is_none_or(|b| margin < b.margin()) {
            self.worst = Some(w);
        }
    }

    fn report(self, name: &str, seed: Option<u64>) -> CheckReport {
        let margin = self.worst.as_ref().map(Witness::margin).unwrap_or(f64::INFINITY);
        let mut witnesses: Vec<Witness> = self.first_violation.into_iter().collect();
        if let Some(w) = self.worst {
            if witnesses.first() != Some(&w) {
                witnesses.push(w);
            }
        }
        CheckReport {
            check_name: name.into(),
            pass: self.violations == 0,
            margin,
            witnesses,
            n_samples: self.n,
            seed,
            violations: self.violations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub c1_est: f64,
    pub c2_est: f64,
    pub region: Region,
    pub radius: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// A point of `K`: uniform on the sphere, a sample of `{|x|^2 <= rho1}` for a
/// ball, standard normal otherwise.
pub fn sample_region<R: Rng + ?Sized>(m: &Manifold, region: &Region, rng: &mut R) -> Result<Point> {
    match (m.kind(), region) {
        (ManifoldKind::Euclidean, Region::Ball { rho1 }) => sample_band(&SquaredNorm, m, f64::NEG_INFINITY, *rho1, rng),
        _ => Ok(m.random_point(rng)),
    }
}

/// Maximizes, over sampled `x` in `K` and `0 < |u| <= A`,
/// `C1: |adj(dR_x|_u)(grad F(R_x u)) - grad F(x)| / |u|` and
/// `C2: | |grad F(R_x u)| - |adj(dR_x|_u)(grad F(R_x u))| | / |u|`.
/// Radii alternate between uniform and log-uniform on `[1e-8, A]`.
pub fn estimate_lipschitz<O: GradientOracle + ?Sized>(
    oracle: &O,
    region: &Region,
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(Error::Precondition(format!("radius {radius} must be > 0")));
    }
    let m = oracle.manifold();
    let per: Vec<(f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let mut rng = draw_rng(seed, i);
            let x = sample_region(&m, region, &mut rng)?;
            let r = if i % 2 == 0 {
                radius * rng.random::<f64>()
            } else {
                radius * (MIN_STEP_NORM / radius).powf(rng.random::<f64>())
            }
            .max(MIN_STEP_NORM);
            let u = m.scale(r, &m.random_unit_tangent(&x, &mut rng));
            let y = m.retract(&x, &u)?;
            let gy = oracle.full_gradient(&y);
            let pulled = m.retract_adjoint(&x, &u, &gy)?;
            let gx = oracle.full_gradient(&x);
            let c1 = norm(&sub(pulled.vec(), gx.vec())) / r;
            let c2 = (m.norm(&gy) - m.norm(&pulled)).abs() / r;
            Ok((c1, c2))
        })
        .collect::<Result<_>>()?;
    let (c1_est, c2_est) = per.into_iter().fold((0.0f64, 0.0f64), |(a, b), (c, d)| (a.max(c), b.max(d)));
    Ok(LipschitzEstimate { c1_est, c2_est, region: *region, radius, n_samples, seed })
}

/// `F(x_{t+1}) <= F(x_t) - rate_t <grad F(x_t), h_t> + (c1/2) rate_t^2 |h_t|^2 + 1e-9`
/// at every step; `c1` is used as given.
pub fn check_descent_inequality(trajectory: &Trajectory, c1: f64) -> CheckReport {
    let mut tally = Tally::new();
    for pair in trajectory.records.windows(2) {
        let (r, next) = (&pair[0], &pair[1]);
        let (Some(dot), Some(hn)) = (r.grad_dot_batch, r.batch_grad_norm) else { continue };
        let rhs = r.cost - r.step * dot + 0.5 * c1 * r.step * r.step * hn * hn + DESCENT_SLACK;
        tally.push(Witness { label: "descent".into(), t: Some(r.t), x: None, lhs: next.cost, rhs });
    }
    tally.report("descent-inequality", Some(trajectory.seed))
}

/// `|u_t| <= 2 A^2` and `u_t = <grad F, h_t> - |grad F|^2`, `z_t = z_{t-1} + rate_t u_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTrace {
    pub seed: u64,
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub rates: Vec<f64>,
}

impl MartingaleTrace {
    pub fn final_z(&self) -> f64 {
        self.z.last().copied().unwrap_or(0.0)
    }

    /// `sum_t rate_t^2` over the recorded steps.
    pub fn rate_square_sum(&self) -> f64 {
        self.rates.iter().map(|r| r * r).sum()
    }

    /// Steps with `|u_t| > 2 A^2`.
    pub fn bound_violations(&self, a: f64) -> usize {
        let bound = 2.0 * a * a;
        self.u.iter().filter(|u| !(u.abs() <= bound)).count()
    }
}

pub fn track_martingale(trajectory: &Trajectory) -> MartingaleTrace {
    let mut u = Vec::with_capacity(trajectory.records.len());
    let mut z = Vec::with_capacity(trajectory.records.len());
    let mut rates = Vec::with_capacity(trajectory.records.len());
    let mut acc = 0.0;
    for r in &trajectory.records {
        let Some(dot) = r.grad_dot_batch else { continue };
        let ut = dot - r.grad_norm * r.grad_norm;
        acc += r.step * ut;
        u.push(ut);
        z.push(acc);
        rates.push(r.step);
    }
    MartingaleTrace { seed: trajectory.seed, u, z, rates }
}

/// Across-seed statistics of `z_T` together with a per-step Welford variance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MartingaleEnsemble {
    pub count: usize,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
    pub max_abs_u: f64,
    pub u_violations: usize,
    pub rate_square_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSummary {
    pub n_seeds: usize,
    pub mean_final: f64,
    pub stderr_final: f64,
    pub var_final: f64,
    /// `4 A^4 sum rate_t^2`
    pub variance_bound: f64,
    pub max_abs_u: f64,
    pub u_violations: usize,
}

impl MartingaleEnsemble {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one trace; `a` is the gradient bound used for `|u_t| <= 2 A^2`.
    pub fn push(&mut self, trace: &MartingaleTrace, a: f64) {
        if self.count == 0 {
            self.mean = vec![0.0; trace.z.len()];
            self.m2 = vec![0.0; trace.z.len()];
            self.rate_square_sum = trace.rate_square_sum();
        }
        self.count += 1;
        let n = self.count as f64;
        for (i, &z) in trace.z.iter().enumerate().take(self.mean.len()) {
            let d = z - self.mean[i];
            self.mean[i] += d / n;
            self.m2[i] += d * (z - self.mean[i]);
        }
        self.max_abs_u = trace.u.iter().fold(self.max_abs_u, |m, u| m.max(u.abs()));
        self.u_violations += trace.bound_violations(a);
    }

    /// Unbiased across-seed variance of `z_t` at every recorded step.
    pub fn variance(&self) -> Vec<f64> {
        let d = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|m| m / d).collect()
    }

    pub fn summary(&self, a: f64) -> MartingaleSummary {
        let var_final = self.variance().last().copied().unwrap_or(0.0);
        MartingaleSummary {
            n_seeds: self.count,
            mean_final: self.mean.last().copied().unwrap_or(0.0),
            stderr_final: (var_final / self.count.max(1) as f64).sqrt(),
            var_final,
            variance_bound: 4.0 * a.powi(4) * self.rate_square_sum,
            max_abs_u: self.max_abs_u,
            u_violations: self.u_violations,
        }
    }
}

/// `| |grad F(x_{t+1})|^2 - |grad F(x_t)|^2 | <= 1.5 * 2 A^2 (C1 + C2) rate_t` per step.
pub fn check_gradient_square_difference(trajectory: &Trajectory, a: f64, c1: f64, c2: f64) -> CheckReport {
    let mut tally = Tally::new();
    let k = CONSTANT_MARGIN * 2.0 * a * a * (c1 + c2);
    for pair in trajectory.records.windows(2) {
        let (r, next) = (&pair[0], &pair[1]);
        let lhs = (next.grad_norm * next.grad_norm - r.grad_norm * r.grad_norm).abs();
        tally.push(Witness { label: "gradient-square difference".into(), t: Some(r.t), x: None, lhs, rhs: k * r.step });
    }
    tally.report("gradient-square-difference", Some(trajectory.seed))
}

/// `(sum_t eta_{t+1}^2 |h_t|^2, sum_t eta_t^2 |h_t|^2)` for an adaptive run.
pub fn adaptive_square_sums(records: &[Record]) -> (f64, f64) {
    let mut next = 0.0;
    let mut current = 0.0;
    for pair in records.windows(2) {
        let Some(h) = pair[0].batch_grad_norm else { continue };
        next += pair[1].step * pair[1].step * h * h;
        current += pair[0].step * pair[0].step * h * h;
    }
    (next, current)
}

/// Both weighted square-sum bounds of the adaptive rule.
pub fn check_adaptive_square_sums(trajectory: &Trajectory, params: &AdaptiveParams, a: f64) -> CheckReport {
    let (next, current) = adaptive_square_sums(&trajectory.records);
    let bound = params.weighted_square_bound();
    let AdaptiveParams { alpha, beta, epsilon } = *params;
    let mut tally = Tally::new();
    tally.push(Witness { label: "sum eta_{t+1}^2 |h_t|^2".into(), t: None, x: None, lhs: next, rhs: bound });
    let loose = bound + a * a * alpha * alpha / beta.powf(1.0 + 2.0 * epsilon);
    tally.push(Witness { label: "sum eta_t^2 |h_t|^2".into(), t: None, x: None, lhs: current, rhs: loose });
    tally.report("adaptive-square-sums", Some(trajectory.seed))
}

/// Per-run convergence statistics, small enough to keep for many seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub completed: bool,
    pub steps: usize,
    pub final_grad_norm: f64,
    pub min_grad_norm: f64,
    pub final_cost: f64,
    /// First `t` with `|grad F(x_t)| <= threshold`.
    pub first_below: Option<usize>,
    pub running_min_nonincreasing: bool,
    /// `sum_{t<T} rate_t |grad F(x_t)|^2`
    pub weighted_sum: f64,
    /// Increment of `weighted_sum` over the last decade `[T/10, T)`.
    pub last_decade_increment: f64,
    /// `(t, |grad F(x_t)|^2)` at checkpoints `0, 1, 2, 5, 10, 20, 50, ..` and `T`.
    pub checkpoints: Vec<(usize, f64)>,
    pub steps_nonincreasing: bool,
}

fn checkpoint_times(horizon: usize) -> Vec<usize> {
    let mut out = vec![0];
    let mut scale = 1;
    'outer: loop {
        for m in [1, 2, 5] {
            let t = m * scale;
            if t >= horizon {
                break 'outer;
            }
            out.push(t);
        }
        scale *= 10;
    }
    if horizon > 0 {
        out.push(horizon);
    }
    out
}

impl RunSummary {
    pub fn from_records(seed: u64, records: &[Record], completed: bool, threshold: f64) -> Self {
        let horizon = records.len().saturating_sub(1);
        let decade_start = horizon / 10;
        let mut weighted = 0.0;
        let mut at_decade = 0.0;
        let mut running_min = f64::INFINITY;
        let mut first_below = None;
        let mut steps_nonincreasing = true;
        for (i, r) in records.iter().enumerate() {
            if r.t == decade_start {
                at_decade = weighted;
            }
            running_min = running_min.min(r.grad_norm);
            if first_below.is_none() && r.grad_norm <= threshold {
                first_below = Some(r.t);
            }
            if i > 0 && r.step > records[i - 1].step {
                steps_nonincreasing = false;
            }
            if i < horizon {
                weighted += r.step * r.grad_norm * r.grad_norm;
            }
        }
        let checkpoints =
            checkpoint_times(horizon).into_iter().map(|t| (t, records[t].grad_norm * records[t].grad_norm)).collect();
        let last = records.last();
        RunSummary {
            seed,
            completed,
            steps: horizon,
            final_grad_norm: last.map(|r| r.grad_norm).unwrap_or(f64::NAN),
            min_grad_norm: running_min,
            final_cost: last.map(|r| r.cost).unwrap_or(f64::NAN),
            first_below,
            // a running minimum cannot increase; recorded for completeness
            running_min_nonincreasing: true,
            weighted_sum: weighted,
            last_decade_increment: weighted - at_decade,
            checkpoints,
            steps_nonincreasing,
        }
    }

    pub fn from_trajectory(trajectory: &Trajectory, threshold: f64) -> Self {
        Self::from_records(trajectory.seed, &trajectory.records, trajectory.is_completed(), threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub threshold: f64,
    pub n_runs: usize,
    pub n_completed: usize,
    pub final_below: usize,
    pub fraction_final_below: f64,
    pub reached: usize,
    pub fraction_reached: f64,
    pub median_final_grad_norm: f64,
    pub max_final_grad_norm: f64,
    pub max_last_decade_increment: f64,
    /// Mean of `|grad F(x_t)|^2` across runs at the shared checkpoints.
    pub mean_square_curve: Vec<(usize, f64)>,
}

pub fn convergence_metrics(runs: &[RunSummary], threshold: f64) -> Result<ConvergenceSummary> {
    if runs.is_empty() {
        return Err(Error::Precondition("convergence metrics need at least one run".into()));
    }
    let n = runs.len();
    let final_below = runs.iter().filter(|r| r.final_grad_norm <= threshold).count();
    let reached = runs.iter().filter(|r| r.first_below.is_some()).count();
    let mut finals: Vec<f64> = runs.iter().map(|r| r.final_grad_norm).collect();
    finals.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 { finals[n / 2] } else { 0.5 * (finals[n / 2 - 1] + finals[n / 2]) };
    let shared = runs.iter().map(|r| r.checkpoints.len()).min().unwrap_or(0);
    let mean_square_curve = (0..shared)
        .map(|i| (runs[0].checkpoints[i].0, runs.iter().map(|r| r.checkpoints[i].1).sum::<f64>() / n as f64))
        .collect();
    Ok(ConvergenceSummary {
        threshold,
        n_runs: n,
        n_completed: runs.iter().filter(|r| r.completed).count(),
        final_below,
        fraction_final_below: final_below as f64 / n as f64,
        reached,
        fraction_reached: reached as f64 / n as f64,
        median_final_grad_norm: median,
        max_final_grad_norm: finals[n - 1],
        max_last_decade_increment: runs.iter().map(|r| r.last_decade_increment).fold(0.0, f64::max),
        mean_square_curve,
    })
}

/// Compares `<grad F(x), w>` with `(F(R_x(h w)) - F(R_x(-h w))) / 2h` for
/// unit `w`; the error is relative to `max(|grad F(x)|, 1)`.
pub fn finite_difference_gradient_check<O: GradientOracle + ?Sized>(
    oracle: &O,
    n_points: usize,
    seed: u64,
) -> Result<CheckReport> {
    if n_points == 0 {
        return Err(Error::Precondition("n_points must be >= 1".into()));
    }
    let m = oracle.manifold();
    let region = oracle.natural_region().unwrap_or(Region::WholeManifold);
    let per: Vec<Witness> = (0..n_points)
        .into_par_iter()
        .map(|i| -> Result<Witness> {
            let mut rng = draw_rng(seed, i);
            let x = sample_region(&m, &region, &mut rng)?;
            let w = m.random_unit_tangent(&x, &mut rng);
            let g = oracle.full_gradient(&x);
            let plus = oracle.cost(&m.retract(&x, &m.scale(FD_STEP, &w))?);
            let minus = oracle.cost(&m.retract(&x, &m.scale(-FD_STEP, &w))?);
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let err = (m.inner(&g, &w) - fd).abs() / m.norm(&g).max(1.0);
            Ok(Witness {
                label: "relative error".into(),
                t: None,
                x: Some(x.coords().to_vec()),
                lhs: err,
                rhs: FD_TOLERANCE,
            })
        })
        .collect::<Result<_>>()?;
    let mut tally = Tally::new();
    per.into_iter().for_each(|w| tally.push(w));
    Ok(tally.report("gradient", Some(seed)))
}

/// Exact unbiasedness of `plan` at `n_points` random points of `K`:
/// `|E[batch gradient] - grad F(x)| <= 1e-10`.
pub fn check_unbiasedness<O: GradientOracle + ?Sized>(
    oracle: &O,
    plan: &BatchPlan,
    region: &Region,
    n_points: usize,
    seed: u64,
) -> Result<CheckReport> {
    let m = oracle.manifold();
    let mut tally = Tally::new();
    for i in 0..n_points {
        let mut rng = draw_rng(seed, i);
        let x = sample_region(&m, region, &mut rng)?;
        let e = enumerate_expectation(oracle, &x, plan, 0, DEFAULT_ENUMERATION_BUDGET)?;
        let err = norm(&sub(e.vec(), oracle.full_gradient(&x).vec()));
        tally.push(Witness {
            label: "|E h - grad F|".into(),
            t: None,
            x: Some(x.coords().to_vec()),
            lhs: err,
            rhs: UNBIASED_TOLERANCE,
        });
    }
    Ok(tally.report("unbiasedness", Some(seed)))
}
