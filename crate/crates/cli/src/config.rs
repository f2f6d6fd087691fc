use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use riemsgd::batching::{draw_rng, BatchPlan, BatchSizes, Strata};
use riemsgd::confinement::{ConfinementSpec, ConfinementVariant, SquaredNorm};
use riemsgd::driver::{RateRule, RunConfig};
use riemsgd::manifold::{ManifoldKind, Point};
use riemsgd::problems::{FiniteSampleSpace, GradientOracle, ProblemInstance, ProblemKind, Region};
use riemsgd::schedules::{AdaptiveParams, DeterministicSchedule};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// The config file as written; every section rejects unknown keys.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub problem: ProblemSection,
    pub plan: PlanSection,
    pub rate: RateSection,
    #[serde(default)]
    pub confinement: Option<ConfinementSection>,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub check: CheckSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// `sphere_mean` or `least_squares`.
    pub kind: String,
    pub dim: Option<usize>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    /// CSV data, relative to the config file's directory.
    pub data: Option<PathBuf>,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchGrowth {
    Geometric { initial: usize, factor: f64, cap: Option<usize> },
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrataOverride {
    pub t: usize,
    pub strata: Vec<Vec<usize>>,
    pub per_stratum_counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    /// `segment`, `no_repetition` or `stratified`.
    pub scheme: String,
    pub batch_size: Option<usize>,
    pub batch_growth: Option<BatchGrowth>,
    pub strata: Option<Vec<Vec<usize>>>,
    pub per_stratum_counts: Option<Vec<usize>>,
    #[serde(default)]
    pub overrides: Vec<StrataOverride>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    /// `power`, `list` or `adaptive`.
    pub kind: String,
    pub c: Option<f64>,
    pub p: Option<f64>,
    pub values: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfinementSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// `plain`, `kappa` or `batch_kappa`.
    pub variant: Option<String>,
    pub rho0: Option<f64>,
    pub rho1: Option<f64>,
    pub kappa: Option<f64>,
    pub lambda: Option<f64>,
    pub b: Option<f64>,
    pub theta: Option<f64>,
    pub samples: Option<usize>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub horizon: Option<usize>,
    pub seeds: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub run_id: Option<String>,
    pub threshold: Option<f64>,
    pub x0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    /// Points for the unbiasedness and gradient checks.
    pub points: Option<usize>,
    /// Samples for the Lipschitz estimate.
    pub samples: Option<usize>,
    /// Step radius `A` for the Lipschitz estimate.
    pub radius: Option<f64>,
    /// Level `rho1` of the ball `K` for Euclidean problems.
    pub region_rho1: Option<f64>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedProblem {
    pub kind: ProblemKind,
    pub dim: usize,
    pub n: usize,
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub data: Option<PathBuf>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfinement {
    pub variant: ConfinementVariant,
    pub rho0: f64,
    pub rho1: Option<f64>,
    pub lambda: f64,
    pub b: Option<f64>,
    pub theta: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedRun {
    pub horizon: usize,
    pub seeds: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub run_id: String,
    pub threshold: f64,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResolvedCheck {
    pub points: usize,
    pub samples: usize,
    pub radius: f64,
    pub region: Region,
}

/// Every value a command uses, with defaults filled in; embedded in outputs.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedConfig {
    pub problem: ResolvedProblem,
    pub plan: BatchPlan,
    pub rate: RateRule,
    pub confinement: Option<ResolvedConfinement>,
    pub run: ResolvedRun,
    pub check: ResolvedCheck,
}

pub struct Experiment {
    pub resolved: ResolvedConfig,
    pub problem: ProblemInstance,
}

impl Experiment {
    pub fn run_config(&self) -> RunConfig {
        let r = &self.resolved;
        RunConfig::new(r.plan.clone(), r.rate.clone(), Point::new(r.run.x0.clone()), r.run.horizon, r.run.seed)
    }

    pub fn confinement_spec(&self) -> Option<ConfinementSpec> {
        self.resolved.confinement.as_ref().map(|c| ConfinementSpec {
            rho: Arc::new(SquaredNorm),
            rho0: c.rho0,
            rho1: c.rho1,
            variant: c.variant,
        })
    }

    pub fn schedule(&self) -> Option<&DeterministicSchedule> {
        match &self.resolved.rate {
            RateRule::Deterministic(s) => Some(s),
            RateRule::Adaptive(_) => None,
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn core(context: &str) -> impl Fn(riemsgd::Error) -> CliError + '_ {
    move |e| bad(format!("{context}: {e}"))
}

fn need<T>(v: Option<T>, key: &str) -> Result<T, CliError> {
    v.ok_or_else(|| bad(format!("missing key `{key}`")))
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<Experiment, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    let raw: RawConfig = toml::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve(raw, base, overrides)
}

pub fn resolve(raw: RawConfig, base: &Path, overrides: &Overrides) -> Result<Experiment, CliError> {
    let (problem, resolved_problem) = build_problem(&raw.problem, base)?;
    let space = problem.space().clone();
    let plan = build_plan(&raw.plan, space.size())?;
    plan.validate(&space).map_err(core("plan"))?;

    let run = &raw.run;
    let horizon = overrides.horizon.or(run.horizon).unwrap_or(1000);
    if horizon == 0 {
        return Err(bad("run.horizon must be >= 1"));
    }
    let rate = build_rate(&raw.rate, horizon)?;

    let seed = overrides.seed.or(run.seed).unwrap_or(0);
    let seeds = run.seeds.unwrap_or(1);
    if seeds == 0 {
        return Err(bad("run.seeds must be >= 1"));
    }
    let threshold = run.threshold.unwrap_or(1e-3);
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(bad("run.threshold must be > 0"));
    }
    let run_id = run.run_id.clone().unwrap_or_else(|| "run".into());
    if run_id.is_empty() || run_id.contains(['/', '\\']) {
        return Err(bad("run.run_id must be a non-empty file name"));
    }
    let m = problem.manifold();
    let x0 = match &run.x0 {
        Some(coords) => m.point(coords.clone()).map_err(core("run.x0"))?,
        None => match m.kind() {
            ManifoldKind::Sphere => m.random_point(&mut draw_rng(seed, usize::MAX)),
            ManifoldKind::Euclidean => Point::new(vec![0.0; m.ambient_dim()]),
        },
    };

    let confinement = match &raw.confinement {
        Some(c) if c.enabled => Some(build_confinement(c, &problem)?),
        _ => None,
    };
    if let Some(c) = &confinement {
        let r0 = x0.coords().iter().map(|v| v * v).sum::<f64>();
        if r0 > c.rho0 {
            return Err(bad(format!("rho(x0) = {r0} exceeds confinement.rho0 = {}", c.rho0)));
        }
        match (&c.variant, &rate) {
            (ConfinementVariant::Plain, RateRule::Adaptive(_)) => {
                return Err(bad("plain confinement needs a deterministic rate; use a kappa variant"))
            }
            (ConfinementVariant::Kappa { .. } | ConfinementVariant::BatchKappa { .. }, RateRule::Deterministic(_)) => {
                return Err(bad("kappa confinements need rate.kind = \"adaptive\""))
            }
            _ => {}
        }
    }

    let check = build_check(&raw.check, &problem, confinement.as_ref())?;
    let out = overrides.out.clone().or_else(|| run.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let resolved = ResolvedConfig {
        problem: resolved_problem,
        plan,
        rate,
        confinement,
        run: ResolvedRun { horizon, seeds, seed, out, run_id, threshold, x0: x0.coords().to_vec() },
        check,
    };
    Ok(Experiment { resolved, problem })
}

fn build_problem(s: &ProblemSection, base: &Path) -> Result<(ProblemInstance, ResolvedProblem), CliError> {
    let kind = match s.kind.as_str() {
        "sphere_mean" => ProblemKind::SphereMean,
        "least_squares" => ProblemKind::LeastSquares,
        other => return Err(bad(format!("unknown problem.kind `{other}` (sphere_mean, least_squares)"))),
    };
    let tau = match kind {
        ProblemKind::SphereMean => {
            if s.tau.is_some() {
                return Err(bad("problem.tau applies to least_squares only"));
            }
            None
        }
        ProblemKind::LeastSquares => Some(need(s.tau, "problem.tau")?),
    };
    let (mut problem, data) = match &s.data {
        Some(rel) => {
            if s.dim.is_some() || s.n.is_some() || s.seed.is_some() {
                return Err(bad("problem.data excludes problem.dim, problem.n and problem.seed"));
            }
            let path = base.join(rel);
            if !path.is_file() {
                return Err(bad(format!("problem.data: {} does not exist", path.display())));
            }
            let p = ProblemInstance::from_csv_path(&path, kind, tau.unwrap_or(0.0)).map_err(core("problem.data"))?;
            (p, Some(path))
        }
        None => {
            let dim = need(s.dim, "problem.dim")?;
            let n = need(s.n, "problem.n")?;
            let seed = s.seed.unwrap_or(0);
            let p = match kind {
                ProblemKind::SphereMean => ProblemInstance::random_sphere_mean(dim, n, seed),
                ProblemKind::LeastSquares => ProblemInstance::random_least_squares(dim, n, tau.unwrap_or(0.0), seed),
            }
            .map_err(core("problem"))?;
            (p, None)
        }
    };
    if let Some(w) = &s.weights {
        let space = FiniteSampleSpace::new(w.clone()).map_err(core("problem.weights"))?;
        problem = problem.with_space(space).map_err(core("problem.weights"))?;
    }
    let resolved = ResolvedProblem {
        kind,
        dim: problem.manifold().ambient_dim(),
        n: problem.space().size(),
        seed: if data.is_none() { Some(s.seed.unwrap_or(0)) } else { None },
        tau,
        data,
        weights: problem.space().weights().to_vec(),
    };
    Ok((problem, resolved))
}

fn build_sizes(s: &PlanSection) -> Result<BatchSizes, CliError> {
    match (s.batch_size, &s.batch_growth) {
        (Some(b), None) => Ok(BatchSizes::constant(b)),
        (None, Some(BatchGrowth::Geometric { initial, factor, cap })) => {
            Ok(BatchSizes::Geometric { initial: *initial, factor: *factor, cap: *cap })
        }
        (None, Some(BatchGrowth::Explicit(sizes))) => Ok(BatchSizes::Explicit { sizes: sizes.clone() }),
        (Some(_), Some(_)) => Err(bad("plan.batch_size and plan.batch_growth are exclusive")),
        (None, None) => Err(bad("missing key `plan.batch_size` or `plan.batch_growth`")),
    }
}

fn build_plan(s: &PlanSection, n: usize) -> Result<BatchPlan, CliError> {
    let uses_strata = s.strata.is_some() || s.per_stratum_counts.is_some() || !s.overrides.is_empty();
    match s.scheme.as_str() {
        "segment" | "no_repetition" => {
            if uses_strata {
                return Err(bad("strata keys apply to scheme = \"stratified\" only"));
            }
            let sizes = build_sizes(s)?;
            Ok(if s.scheme == "segment" {
                BatchPlan::SegmentWithRepetition { sizes }
            } else {
                BatchPlan::UniformNoRepetition { sizes }
            })
        }
        "stratified" => {
            if s.batch_size.is_some() || s.batch_growth.is_some() {
                return Err(bad("stratified batch sizes come from plan.per_stratum_counts"));
            }
            let groups = s.strata.clone().unwrap_or_else(|| Strata::singletons(n).groups);
            let counts = s.per_stratum_counts.clone().unwrap_or_else(|| vec![1; groups.len()]);
            let mut overrides = BTreeMap::new();
            for o in &s.overrides {
                if overrides.insert(o.t, Strata::new(o.strata.clone(), o.per_stratum_counts.clone())).is_some() {
                    return Err(bad(format!("two plan.overrides for t = {}", o.t)));
                }
            }
            Ok(BatchPlan::Stratified { strata: Strata::new(groups, counts), overrides })
        }
        other => Err(bad(format!("unknown plan.scheme `{other}` (segment, no_repetition, stratified)"))),
    }
}

fn build_rate(s: &RateSection, horizon: usize) -> Result<RateRule, CliError> {
    let only = |allowed: &[&str]| -> Result<(), CliError> {
        let present = [
            ("c", s.c.is_some()),
            ("p", s.p.is_some()),
            ("values", s.values.is_some()),
            ("alpha", s.alpha.is_some()),
            ("beta", s.beta.is_some()),
            ("epsilon", s.epsilon.is_some()),
        ];
        match present.iter().find(|(k, set)| *set && !allowed.contains(k)) {
            Some((k, _)) => Err(bad(format!("rate.{k} does not apply to rate.kind = \"{}\"", s.kind))),
            None => Ok(()),
        }
    };
    match s.kind.as_str() {
        "power" => {
            only(&["c", "p"])?;
            let sched =
                DeterministicSchedule::power_law(need(s.c, "rate.c")?, need(s.p, "rate.p")?).map_err(core("rate"))?;
            Ok(RateRule::Deterministic(sched))
        }
        "list" => {
            only(&["values"])?;
            let values = need(s.values.clone(), "rate.values")?;
            if values.len() < horizon {
                return Err(bad(format!("rate.values has {} entries for a horizon of {horizon}", values.len())));
            }
            Ok(RateRule::Deterministic(DeterministicSchedule::explicit(values).map_err(core("rate"))?))
        }
        "adaptive" => {
            only(&["alpha", "beta", "epsilon"])?;
            let d = AdaptiveParams::default();
            let params = AdaptiveParams {
                alpha: s.alpha.unwrap_or(d.alpha),
                beta: s.beta.unwrap_or(d.beta),
                epsilon: s.epsilon.unwrap_or(d.epsilon),
            };
            params.validate().map_err(core("rate"))?;
            Ok(RateRule::Adaptive(params))
        }
        other => Err(bad(format!("unknown rate.kind `{other}` (power, list, adaptive)"))),
    }
}

/// `max_l y_l^2 / (4 tau)`: outside this level every `<x, H(x, l)>` is positive.
fn least_squares_rho0(problem: &ProblemInstance) -> Option<f64> {
    let (_, y, tau) = problem.least_squares_data()?;
    (tau > 0.0).then(|| y.iter().map(|v| v * v).fold(0.0, f64::max) / (4.0 * tau))
}

fn positive(v: f64, key: &str) -> Result<f64, CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(bad(format!("{key} = {v} must be > 0")))
    }
}

fn build_confinement(c: &ConfinementSection, problem: &ProblemInstance) -> Result<ResolvedConfinement, CliError> {
    if problem.kind() != ProblemKind::LeastSquares {
        return Err(bad("confinement applies to least_squares; the sphere is already compact"));
    }
    let rho0 = match c.rho0 {
        Some(r) => r,
        None => least_squares_rho0(problem).ok_or_else(|| bad("confinement.rho0 is required when tau = 0"))?,
    };
    let variant_name = c.variant.as_deref().unwrap_or("plain");
    let variant = match variant_name {
        "plain" => {
            if c.kappa.is_some() || c.rho1.is_some() {
                return Err(bad("confinement.kappa and confinement.rho1 apply to the kappa variants"));
            }
            ConfinementVariant::Plain
        }
        "kappa" | "batch_kappa" => {
            let kappa = positive(need(c.kappa, "confinement.kappa")?, "confinement.kappa")?;
            if variant_name == "kappa" {
                ConfinementVariant::Kappa { kappa }
            } else {
                ConfinementVariant::BatchKappa { kappa }
            }
        }
        other => return Err(bad(format!("unknown confinement.variant `{other}` (plain, kappa, batch_kappa)"))),
    };
    if !matches!(variant, ConfinementVariant::Plain) {
        let rho1 = need(c.rho1, "confinement.rho1")?;
        if !(rho1 > rho0) {
            return Err(bad(format!("confinement.rho1 = {rho1} must exceed rho0 = {rho0}")));
        }
    }
    Ok(ResolvedConfinement {
        variant,
        rho0,
        rho1: c.rho1,
        lambda: positive(c.lambda.unwrap_or(1.0), "confinement.lambda")?,
        b: c.b.map(|b| positive(b, "confinement.b")).transpose()?,
        theta: positive(c.theta.unwrap_or(1.0), "confinement.theta")?,
        samples: match c.samples.unwrap_or(10_000) {
            0 => return Err(bad("confinement.samples must be >= 1")),
            s => s,
        },
    })
}

fn build_check(
    s: &CheckSection,
    problem: &ProblemInstance,
    confinement: Option<&ResolvedConfinement>,
) -> Result<ResolvedCheck, CliError> {
    let region = match problem.natural_region() {
        Some(r) => {
            if s.region_rho1.is_some() {
                return Err(bad("check.region_rho1 applies to Euclidean problems only"));
            }
            r
        }
        None => {
            let rho1 = match (s.region_rho1, confinement) {
                (Some(r), _) => r,
                (None, Some(c)) => c.rho1.unwrap_or(10.0 * c.rho0.max(1.0)),
                (None, None) => 10.0 * least_squares_rho0(problem).unwrap_or(1.0).max(1.0),
            };
            Region::Ball { rho1: positive(rho1, "check.region_rho1")? }
        }
    };
    let radius = match s.radius {
        Some(r) => positive(r, "check.radius")?,
        None => problem.bound_on_region(&region).map_err(core("check"))?,
    };
    let points = s.points.unwrap_or(20);
    let samples = s.samples.unwrap_or(10_000);
    if points == 0 || samples == 0 {
        return Err(bad("check.points and check.samples must be >= 1"));
    }
    Ok(ResolvedCheck { points, samples, radius, region })
}
