//! The SGD loop `x_{t+1} = R_{x_t}(-rate_t * h_t)` for deterministic and
//! adaptive rates, with per-iteration records and CSV persistence.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batching::{batch_gradient, draw_rng, BatchPlan, BatchSampler};
use crate::confinement::ConfinementFunction;
use crate::error::{Error, Result};
use crate::manifold::Point;
use crate::problems::GradientOracle;
use crate::schedules::{AdaptiveParams, AdaptiveState, DeterministicSchedule, ScheduleForm};

/// Step-size rule of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateRule {
    Deterministic(DeterministicSchedule),
    Adaptive(AdaptiveParams),
}

/// Tracks `rho(x_t)` and flags iterates outside `{rho <= rho1}`.
#[derive(Clone)]
pub struct Monitor {
    pub rho: Arc<dyn ConfinementFunction>,
    pub rho1: f64,
}

impl std::fmt::Debug for Monitor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Monitor").field("rho1", &self.rho1).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub plan: BatchPlan,
    pub rate: RateRule,
    pub x0: Point,
    pub horizon: usize,
    pub seed: u64,
    pub store_iterates: bool,
    pub monitor: Option<Monitor>,
}

impl RunConfig {
    pub fn new(plan: BatchPlan, rate: RateRule, x0: Point, horizon: usize, seed: u64) -> Self {
        Self { plan, rate, x0, horizon, seed, store_iterates: false, monitor: None }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// One iteration of a trajectory. For `t < T` the batch fields describe the
/// realized batch gradient `h_t` and `step` is the rate applied to it; the
/// final record carries no batch and holds the next rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: usize,
    #[serde(rename = "F")]
    pub cost: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub batch_size: Option<usize>,
    pub batch_grad_norm: Option<f64>,
    pub rho: Option<f64>,
    #[serde(rename = "in_K")]
    pub in_region: bool,
    /// `<grad F(x_t), h_t>`; kept in memory only.
    #[serde(skip)]
    pub grad_dot_batch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Aborted { t: usize, error: Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub records: Vec<Record>,
    pub status: RunStatus,
    pub iterates: Option<Vec<Point>>,
}

impl Trajectory {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn final_record(&self) -> Option<&Record> {
        self.records.last()
    }

    pub fn final_grad_norm(&self) -> Option<f64> {
        self.final_record().map(|r| r.grad_norm)
    }

    /// The trajectory, or the error that aborted it.
    pub fn into_result(self) -> Result<Trajectory> {
        match self.status {
            RunStatus::Completed => Ok(self),
            RunStatus::Aborted { error, .. } => Err(error),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::InvalidData(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::InvalidData(e.to_string()))
    }

    /// `<dir>/<run_id>_seed<k>.csv`
    pub fn csv_path(dir: &Path, run_id: &str, seed: u64) -> PathBuf {
        dir.join(format!("{run_id}_seed{seed}.csv"))
    }
}

/// Reads records written by [`Trajectory::write_csv`].
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<Record>> {
    csv::Reader::from_reader(reader).deserialize().map(|r| r.map_err(|e| Error::InvalidData(e.to_string()))).collect()
}

enum RateState {
    Deterministic(DeterministicSchedule),
    Adaptive(AdaptiveState),
}

impl RateState {
    fn current(&self, t: usize) -> f64 {
        match self {
            RateState::Deterministic(s) => s.gamma(t),
            RateState::Adaptive(a) => a.eta(),
        }
    }

    fn after_step(&mut self, batch_norm_sq: f64) -> Result<()> {
        match self {
            RateState::Deterministic(_) => Ok(()),
            RateState::Adaptive(a) => a.update(batch_norm_sq),
        }
    }
}

fn check_config<O: GradientOracle + ?Sized>(oracle: &O, cfg: &RunConfig) -> Result<RateState> {
    let m = oracle.manifold();
    if cfg.x0.dim() != m.ambient_dim() {
        return Err(Error::DimensionMismatch { expected: m.ambient_dim(), actual: cfg.x0.dim() });
    }
    if !m.contains(&cfg.x0) {
        return Err(Error::NotOnManifold("initial point".into()));
    }
    cfg.plan.validate(oracle.space())?;
    if let Some(mon) = &cfg.monitor {
        let r0 = mon.rho.value(&cfg.x0);
        if r0 > mon.rho1 {
            return Err(Error::Precondition(format!("rho(x0) = {r0} exceeds rho1 = {}", mon.rho1)));
        }
    }
    match &cfg.rate {
        RateRule::Deterministic(s) => {
            s.validate()?;
            if let ScheduleForm::Explicit { values } = &s.form {
                if values.len() < cfg.horizon {
                    return Err(Error::InvalidHyperparameters(format!(
                        "explicit schedule has {} entries for horizon {}",
                        values.len(),
                        cfg.horizon
                    )));
                }
            }
            Ok(RateState::Deterministic(s.clone()))
        }
        RateRule::Adaptive(p) => Ok(RateState::Adaptive(AdaptiveState::new(*p)?)),
    }
}

/// Runs one trajectory with whichever rate rule `cfg` carries.
pub fn run<O: GradientOracle + ?Sized>(oracle: &O, cfg: &RunConfig) -> Result<Trajectory> {
    let mut rate = check_config(oracle, cfg)?;
    let m = oracle.manifold();
    let sampler = BatchSampler::new(&cfg.plan, oracle.space())?;
    let mut records = Vec::with_capacity(cfg.horizon + 1);
    let mut iterates = cfg.store_iterates.then(|| Vec::with_capacity(cfg.horizon + 1));
    let mut x = cfg.x0.clone();
    let mut status = RunStatus::Completed;

    for t in 0..=cfg.horizon {
        let cost = oracle.cost(&x);
        let grad = oracle.full_gradient(&x);
        let grad_norm = m.norm(&grad);
        if !cost.is_finite() || !grad_norm.is_finite() {
            let what = if cost.is_finite() { "gradient norm" } else { "cost" };
            status = RunStatus::Aborted { t, error: Error::NonFiniteValue { t, what: what.into() } };
            break;
        }
        let (rho, in_region) = match &cfg.monitor {
            Some(mon) => {
                let r = mon.rho.value(&x);
                (Some(r), r <= mon.rho1)
            }
            None => (None, true),
        };
        let step = rate.current(t);
        let mut record = Record {
            t,
            cost,
            grad_norm,
            step,
            batch_size: None,
            batch_grad_norm: None,
            rho,
            in_region,
            grad_dot_batch: None,
        };
        if let Some(it) = iterates.as_mut() {
            it.push(x.clone());
        }
        if t == cfg.horizon {
            records.push(record);
            break;
        }

        let draw = sampler.draw(t, &mut draw_rng(cfg.seed, t))?;
        let h = batch_gradient(oracle, &x, &draw)?;
        let h_sq = m.norm_sq(&h);
        record.batch_size = Some(draw.size());
        record.batch_grad_norm = Some(h_sq.sqrt());
        record.grad_dot_batch = Some(m.inner(&grad, &h));
        records.push(record);
        if !h_sq.is_finite() {
            status = RunStatus::Aborted { t, error: Error::NonFiniteValue { t, what: "batch gradient".into() } };
            break;
        }

        match m.retract(&x, &m.scale(-step, &h)) {
            Ok(next) => x = next,
            Err(e) => {
                status = RunStatus::Aborted { t, error: e };
                break;
            }
        }
        rate.after_step(h_sq)?;
    }
    Ok(Trajectory { seed: cfg.seed, records, status, iterates })
}

pub fn run_deterministic<O: GradientOracle + ?Sized>(oracle: &O, cfg: &RunConfig) -> Result<Trajectory> {
    if !matches!(cfg.rate, RateRule::Deterministic(_)) {
        return Err(Error::Precondition("run_deterministic needs a deterministic schedule".into()));
    }
    run(oracle, cfg)
}

pub fn run_adaptive<O: GradientOracle + ?Sized>(oracle: &O, cfg: &RunConfig) -> Result<Trajectory> {
    if !matches!(cfg.rate, RateRule::Adaptive(_)) {
        return Err(Error::Precondition("run_adaptive needs adaptive hyperparameters".into()));
    }
    run(oracle, cfg)
}

/// Runs seeds `cfg.seed + k` for `k < n_seeds` in parallel, mapping each
/// trajectory through `reduce` as soon as it finishes. Output is in seed order.
pub fn run_many_with<O, T, F>(oracle: &O, cfg: &RunConfig, n_seeds: usize, reduce: F) -> Result<Vec<T>>
where
    O: GradientOracle + ?Sized,
    T: Send,
    F: Fn(Trajectory) -> T + Sync,
{
    if n_seeds == 0 {
        return Err(Error::Precondition("n_seeds must be >= 1".into()));
    }
    (0..n_seeds as u64)
        .into_par_iter()
        .map(|k| run(oracle, &cfg.with_seed(cfg.seed.wrapping_add(k))).map(&reduce))
        .collect()
}

pub fn run_many<O: GradientOracle + ?Sized>(oracle: &O, cfg: &RunConfig, n_seeds: usize) -> Result<Vec<Trajectory>> {
    run_many_with(oracle, cfg, n_seeds, |t| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::Strata;
    use crate::manifold::Manifold;
    use crate::problems::{FiniteSampleSpace, ProblemInstance};

    fn sphere_problem() -> ProblemInstance {
        ProblemInstance::random_sphere_mean(4, 16, 11).unwrap()
    }

    fn power(c: f64, p: f64) -> RateRule {
        RateRule::Deterministic(DeterministicSchedule::power_law(c, p).unwrap())
    }

    fn start(m: &Manifold, seed: u64) -> Point {
        m.random_point(&mut draw_rng(seed, 0))
    }

    #[test]
    fn zero_horizon() {
        let o = sphere_problem();
        let x0 = start(&o.manifold(), 3);
        let cfg = RunConfig::new(BatchPlan::segment(4), power(0.5, 0.75), x0.clone(), 0, 1);
        let tr = run(&o, &cfg).unwrap();
        assert_eq!(tr.records.len(), 1);
        assert_eq!(tr.records[0].cost, o.cost(&x0));
        assert_eq!(tr.records[0].grad_norm, o.manifold().norm(&o.full_gradient(&x0)));
        assert!(tr.is_completed());
    }

    #[test]
    fn records_and_iterates() {
        let o = sphere_problem();
        let m = o.manifold();
        let mut cfg = RunConfig::new(BatchPlan::segment(4), power(0.5, 0.75), start(&m, 3), 200, 1);
        cfg.store_iterates = true;
        let tr = run(&o, &cfg).unwrap();
        assert_eq!(tr.records.len(), 201);
        let it = tr.iterates.as_ref().unwrap();
        assert!(it.iter().all(|x| (crate::linalg::norm(x.coords()) - 1.0).abs() <= 1e-12));
        assert!(tr.records[..200].iter().all(|r| r.batch_size == Some(4)));
        assert_eq!(tr.records[200].batch_size, None);
        assert_eq!(tr.records[15].step, 0.0625);
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let o = sphere_problem();
        let cfg = RunConfig::new(BatchPlan::no_repetition(4), power(0.5, 0.75), start(&o.manifold(), 3), 300, 5);
        assert_eq!(run(&o, &cfg).unwrap(), run(&o, &cfg).unwrap());
        assert_ne!(run(&o, &cfg).unwrap().records, run(&o, &cfg.with_seed(6)).unwrap().records);
        let many = run_many(&o, &cfg, 3).unwrap();
        assert_eq!(many[0], run(&o, &cfg).unwrap());
        assert_eq!(many[2], run(&o, &cfg.with_seed(7)).unwrap());
        assert_eq!(run_many(&o, &cfg, 1).unwrap(), vec![run(&o, &cfg).unwrap()]);
    }

    #[test]
    fn full_batch_gradient_descent_decreases_cost() {
        let o = ProblemInstance::random_least_squares(3, 8, 0.2, 4).unwrap();
        let rate = RateRule::Deterministic(DeterministicSchedule::explicit(vec![0.05; 100]).unwrap());
        let cfg = RunConfig::new(BatchPlan::no_repetition(8), rate, Point::new(vec![1.0, -1.0, 2.0]), 100, 0);
        let tr = run(&o, &cfg).unwrap();
        assert!(tr.records.windows(2).all(|w| w[1].cost < w[0].cost));
    }

    #[test]
    fn stationary_start_stays_put() {
        let o = sphere_problem();
        let x0 = o.sphere_minimizer().unwrap();
        let rate = RateRule::Adaptive(AdaptiveParams::default());
        let mut cfg = RunConfig::new(BatchPlan::stratified(Strata::singletons(16)), rate, x0.clone(), 50, 2);
        cfg.store_iterates = true;
        let tr = run_adaptive(&o, &cfg).unwrap();
        // the batch gradient is ~1e-17 rather than exactly zero
        for x in tr.iterates.unwrap() {
            assert!(crate::linalg::norm(&crate::linalg::sub(x.coords(), x0.coords())) < 1e-14);
        }
    }

    #[test]
    fn adaptive_steps_nonincreasing() {
        let o = sphere_problem();
        let rate = RateRule::Adaptive(AdaptiveParams::default());
        let cfg = RunConfig::new(BatchPlan::segment(4), rate, start(&o.manifold(), 8), 500, 2);
        let tr = run_adaptive(&o, &cfg).unwrap();
        assert_eq!(tr.records[0].step, 0.5);
        assert!(tr.records.windows(2).all(|w| w[1].step <= w[0].step));
        assert!(run_deterministic(&o, &cfg).is_err());
    }

    #[test]
    fn divergence_aborts_with_partial_trajectory() {
        let o = ProblemInstance::random_least_squares(3, 8, 0.2, 4).unwrap();
        let rate = RateRule::Deterministic(DeterministicSchedule::explicit(vec![1.0; 5000]).unwrap());
        let big = ProblemInstance::least_squares(
            vec![vec![40.0, 0.0, 0.0]],
            vec![1.0],
            0.0,
            FiniteSampleSpace::uniform(1).unwrap(),
        )
        .unwrap();
        let cfg = RunConfig::new(BatchPlan::segment(1), rate, Point::new(vec![1.0, 0.0, 0.0]), 5000, 0);
        let tr = run(&big, &cfg).unwrap();
        match &tr.status {
            RunStatus::Aborted { t, error: Error::NonFiniteValue { .. } } => assert_eq!(tr.records.len(), *t),
            other => panic!("expected abort, got {other:?}"),
        }
        assert!(tr.records.iter().all(|r| r.cost.is_finite()));
        assert!(tr.clone().into_result().is_err());
        let _ = o;
    }

    #[test]
    fn invalid_configs() {
        let o = sphere_problem();
        let off = Point::new(vec![1.0, 1.0, 0.0, 0.0]);
        assert!(run(&o, &RunConfig::new(BatchPlan::segment(4), power(0.5, 0.75), off, 10, 0)).is_err());
        let x0 = start(&o.manifold(), 1);
        let short = RateRule::Deterministic(DeterministicSchedule::explicit(vec![0.1; 5]).unwrap());
        assert!(run(&o, &RunConfig::new(BatchPlan::segment(4), short, x0.clone(), 10, 0)).is_err());
        assert!(run(&o, &RunConfig::new(BatchPlan::no_repetition(17), power(0.5, 0.75), x0, 10, 0)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let o = sphere_problem();
        let cfg = RunConfig::new(BatchPlan::segment(4), power(0.5, 0.75), start(&o.manifold(), 3), 20, 1);
        let tr = run(&o, &cfg).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,F,grad_norm,step,batch_size,batch_grad_norm,rho,in_K\n"));
        assert_eq!(text.lines().count(), 22);
        let back = read_csv(&buf[..]).unwrap();
        let stripped: Vec<Record> = tr.records.iter().map(|r| Record { grad_dot_batch: None, ..r.clone() }).collect();
        assert_eq!(back, stripped);
        assert_eq!(Trajectory::csv_path(Path::new("out"), "demo", 7), PathBuf::from("out/demo_seed7.csv"));
    }
}
