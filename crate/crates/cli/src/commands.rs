use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use riemsgd::confinement::{
    check_kappa_confinement, check_plain_confinement, choose_b, estimate_constants, run_confined_adaptive,
    run_confined_deterministic, ConfinementConstants, ConfinementVariant,
};
use riemsgd::diagnostics::{
    check_unbiasedness, convergence_metrics, estimate_lipschitz, finite_difference_gradient_check, CheckReport,
    ConvergenceSummary, RunSummary, CONSTANT_MARGIN, FD_TOLERANCE, UNBIASED_TOLERANCE,
};
use riemsgd::driver::{read_csv, run_many_with, RateRule, RunStatus, Trajectory};
use serde::Serialize;

use crate::config::{load, Experiment, Overrides, ResolvedConfig};
use crate::CliError;

pub const CHECKS: [&str; 6] = ["unbiasedness", "confinement", "kappa-confinement", "lipschitz", "schedule", "gradient"];

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

#[derive(Debug, Serialize)]
struct Abort {
    seed: u64,
    t: Option<usize>,
    error: String,
}

#[derive(Serialize)]
struct RunOutput<'a> {
    config: &'a ResolvedConfig,
    seeds: Vec<u64>,
    confinement_constants: Option<ConfinementConstants>,
    runs: Vec<RunSummary>,
    aborts: Vec<Abort>,
    convergence: Option<ConvergenceSummary>,
}

/// Writes one trajectory and reduces it to its summary.
fn persist(exp: &Experiment, traj: &Trajectory) -> Result<(RunSummary, Option<Abort>), CliError> {
    let r = &exp.resolved.run;
    let path = Trajectory::csv_path(&r.out, &r.run_id, traj.seed);
    let file = File::create(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    traj.write_csv(BufWriter::new(file)).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let abort = match &traj.status {
        RunStatus::Completed => None,
        RunStatus::Aborted { t, error } => Some(Abort { seed: traj.seed, t: Some(*t), error: error.to_string() }),
    };
    Ok((RunSummary::from_trajectory(traj, r.threshold), abort))
}

type SeedResult = Result<(Option<RunSummary>, Option<Abort>), CliError>;

pub fn cmd_run(config: &Path, overrides: &Overrides, quiet: bool) -> Result<(), CliError> {
    let exp = load(config, overrides)?;
    let r = &exp.resolved.run;
    create_dir(&r.out)?;
    let cfg = exp.run_config();
    let seeds: Vec<u64> = (0..r.seeds as u64).map(|k| r.seed.wrapping_add(k)).collect();
    let mut constants = None;

    let results: Vec<SeedResult> = match exp.confinement_spec() {
        None => run_many_with(&exp.problem, &cfg, r.seeds, |traj| persist(&exp, &traj).map(|(s, a)| (Some(s), a)))
            .map_err(|e| CliError::Runtime(e.to_string()))?,
        Some(spec) => {
            let c = exp.resolved.confinement.as_ref().expect("confinement resolved");
            if let (ConfinementVariant::Plain, Some(schedule)) = (c.variant, exp.schedule()) {
                let b = match c.b {
                    Some(b) => b,
                    None => choose_b(&spec, &exp.problem, schedule, c.lambda, c.theta, c.samples, r.seed)
                        .map_err(|e| CliError::Runtime(e.to_string()))?,
                };
                constants = Some(
                    estimate_constants(&spec, &exp.problem, schedule, c.lambda, b, c.theta, c.samples, r.seed)
                        .map_err(|e| CliError::Runtime(e.to_string()))?,
                );
            }
            seeds
                .par_iter()
                .map(|&seed| {
                    let cfg = cfg.with_seed(seed);
                    let out = match &constants {
                        Some(k) => run_confined_deterministic(&exp.problem, &cfg, &spec, k),
                        None => run_confined_adaptive(&exp.problem, &cfg, &spec),
                    };
                    match out {
                        Ok(traj) => persist(&exp, &traj).map(|(s, a)| (Some(s), a)),
                        Err(e) => {
                            let t = match e {
                                riemsgd::Error::ConfinementViolation { t, .. } => Some(t),
                                _ => None,
                            };
                            Ok((None, Some(Abort { seed, t, error: e.to_string() })))
                        }
                    }
                })
                .collect()
        }
    };

    let mut runs = Vec::new();
    let mut aborts = Vec::new();
    for res in results {
        let (summary, abort) = res?;
        runs.extend(summary);
        aborts.extend(abort);
    }
    let convergence = if runs.is_empty() { None } else { convergence_metrics(&runs, r.threshold).ok() };
    if !quiet {
        for s in &runs {
            println!(
                "seed {}: {} steps, final |grad F| {:.3e}, min {:.3e}",
                s.seed, s.steps, s.final_grad_norm, s.min_grad_norm
            );
        }
        if let Some(c) = &convergence {
            println!(
                "{}/{} runs end with |grad F| <= {:e}; outputs in {}",
                c.final_below,
                c.n_runs,
                c.threshold,
                r.out.display()
            );
        }
    }
    let summary_path = r.out.join(format!("{}_summary.json", r.run_id));
    let n_aborted = aborts.len();
    let first = aborts.first().map(|a| format!("seed {}: {}", a.seed, a.error));
    write_json(
        &summary_path,
        &RunOutput { config: &exp.resolved, seeds, confinement_constants: constants, runs, aborts, convergence },
    )?;
    match first {
        Some(msg) => Err(CliError::Runtime(format!("{n_aborted} run(s) aborted; first: {msg}"))),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct CheckOutput<'a, R: Serialize> {
    check: &'a str,
    pass: bool,
    seed: u64,
    config: &'a ResolvedConfig,
    report: R,
}

#[derive(Serialize)]
struct LipschitzReport {
    c1_est: f64,
    c2_est: f64,
    resample_c1_est: f64,
    resample_c2_est: f64,
    margin: f64,
    radius: f64,
    n_samples: usize,
}

#[derive(Serialize)]
struct ScheduleReport {
    rate: RateRule,
    valid: bool,
    reason: String,
    eta0: Option<f64>,
    weighted_square_bound: Option<f64>,
}

/// The left-hand side at the tightest sample, `rhs - margin`.
fn worst_lhs(rep: &CheckReport) -> f64 {
    rep.witnesses.last().map_or(f64::NAN, |w| w.lhs)
}

fn check_err(e: riemsgd::Error) -> CliError {
    CliError::Config(e.to_string())
}

pub fn cmd_check(name: &str, config: &Path, overrides: &Overrides, quiet: bool) -> Result<(), CliError> {
    if !CHECKS.contains(&name) {
        return Err(CliError::Config(format!("unknown check `{name}` (one of {})", CHECKS.join(", "))));
    }
    let exp = load(config, overrides)?;
    let res = &exp.resolved;
    let seed = res.run.seed;
    let chk = &res.check;
    create_dir(&res.run.out)?;
    let path = res.run.out.join(format!("check_{name}.json"));

    fn emit<R: Serialize>(
        path: &Path,
        name: &str,
        pass: bool,
        seed: u64,
        config: &ResolvedConfig,
        report: R,
    ) -> Result<bool, CliError> {
        write_json(path, &CheckOutput { check: name, pass, seed, config, report })?;
        Ok(pass)
    }

    let (pass, line) = match name {
        "unbiasedness" => {
            let rep = check_unbiasedness(&exp.problem, &res.plan, &chk.region, chk.points, seed).map_err(check_err)?;
            let line = format!(
                "max |E h - grad F| {:.3e} (tol {:e}) over {} points",
                worst_lhs(&rep),
                UNBIASED_TOLERANCE,
                rep.n_samples
            );
            (emit(&path, name, rep.pass, seed, res, rep)?, line)
        }
        "gradient" => {
            let rep = finite_difference_gradient_check(&exp.problem, chk.points, seed).map_err(check_err)?;
            let line = format!(
                "max relative finite-difference error {:.3e} (tol {:e}) over {} points",
                worst_lhs(&rep),
                FD_TOLERANCE,
                rep.n_samples
            );
            (emit(&path, name, rep.pass, seed, res, rep)?, line)
        }
        "confinement" => {
            let mut spec = exp
                .confinement_spec()
                .ok_or_else(|| CliError::Config("check confinement needs a [confinement] section".into()))?;
            let c = res.confinement.as_ref().expect("confinement resolved");
            spec.variant = ConfinementVariant::Plain;
            let mut rep = check_plain_confinement(&spec, &exp.problem, c.samples, seed).map_err(check_err)?;
            if let (true, Some(schedule)) = (rep.pass, exp.schedule()) {
                let b = match c.b {
                    Some(b) => b,
                    None => choose_b(&spec, &exp.problem, schedule, c.lambda, c.theta, c.samples, seed)
                        .map_err(check_err)?,
                };
                rep.constants = Some(
                    estimate_constants(&spec, &exp.problem, schedule, c.lambda, b, c.theta, c.samples, seed)
                        .map_err(check_err)?,
                );
            }
            let line = format!("min <grad rho, H> {:.3e} over {} samples", rep.min_margin, rep.n_samples);
            (emit(&path, name, rep.pass, seed, res, rep)?, line)
        }
        "kappa-confinement" => {
            let spec = exp
                .confinement_spec()
                .ok_or_else(|| CliError::Config("check kappa-confinement needs a [confinement] section".into()))?;
            let c = res.confinement.as_ref().expect("confinement resolved");
            let rep = check_kappa_confinement(&spec, &exp.problem, c.samples, seed).map_err(check_err)?;
            let line = format!("min margin {:.3e} over {} samples", rep.min_margin, rep.n_samples);
            (emit(&path, name, rep.pass, seed, res, rep)?, line)
        }
        "lipschitz" => {
            let a = estimate_lipschitz(&exp.problem, &chk.region, chk.radius, chk.samples, seed).map_err(check_err)?;
            let b = estimate_lipschitz(&exp.problem, &chk.region, chk.radius, chk.samples, seed.wrapping_add(1))
                .map_err(check_err)?;
            // the estimates feed bounds with a 1.5x margin; a resample must stay inside it
            let within =
                |x: f64, y: f64| x.is_finite() && y.is_finite() && y <= CONSTANT_MARGIN * x && x <= CONSTANT_MARGIN * y;
            let pass = within(a.c1_est, b.c1_est) && within(a.c2_est, b.c2_est);
            let line =
                format!("C1_est {:.4}, C2_est {:.4} (resample {:.4}, {:.4})", a.c1_est, a.c2_est, b.c1_est, b.c2_est);
            let rep = LipschitzReport {
                c1_est: a.c1_est,
                c2_est: a.c2_est,
                resample_c1_est: b.c1_est,
                resample_c2_est: b.c2_est,
                margin: CONSTANT_MARGIN,
                radius: chk.radius,
                n_samples: chk.samples,
            };
            (emit(&path, name, pass, seed, res, rep)?, line)
        }
        "schedule" => {
            let rep = match &res.rate {
                RateRule::Deterministic(s) => {
                    let rm = s.validate_robbins_monro();
                    ScheduleReport {
                        rate: res.rate.clone(),
                        valid: rm.valid,
                        reason: rm.reason,
                        eta0: None,
                        weighted_square_bound: None,
                    }
                }
                RateRule::Adaptive(p) => ScheduleReport {
                    rate: res.rate.clone(),
                    valid: true,
                    reason: "adaptive hyperparameters satisfy 0 < epsilon <= 1/2 and alpha <= beta^(1/2 + epsilon)"
                        .into(),
                    eta0: Some(p.eta0()),
                    weighted_square_bound: Some(p.weighted_square_bound()),
                },
            };
            let line = rep.reason.clone();
            (emit(&path, name, rep.valid, seed, res, rep)?, line)
        }
        _ => unreachable!("check names are validated above"),
    };
    if !quiet {
        println!("check {name}: {} ({line}); report {}", if pass { "PASS" } else { "FAIL" }, path.display());
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::CheckFailed)
    }
}

#[derive(Serialize)]
struct ReportOutput {
    threshold: f64,
    files: Vec<PathBuf>,
    runs: Vec<RunSummary>,
    convergence: ConvergenceSummary,
}

/// `<run_id>_seed<k>.csv` yields `k`.
fn seed_from_name(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    stem.rsplit_once("_seed")?.1.parse().ok()
}

pub fn cmd_report(dir: &Path, threshold: f64, quiet: bool) -> Result<(), CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!("{}: no trajectory CSV files", dir.display())));
    }
    let mut runs = Vec::with_capacity(files.len());
    for (i, path) in files.iter().enumerate() {
        let malformed = |msg: String| CliError::Config(format!("{}: malformed trajectory CSV: {msg}", path.display()));
        let file = File::open(path).map_err(|e| malformed(e.to_string()))?;
        let records = read_csv(file).map_err(|e| malformed(e.to_string()))?;
        if records.is_empty() || records.iter().enumerate().any(|(k, r)| r.t != k) {
            return Err(malformed("expected rows t = 0, 1, 2, ..".into()));
        }
        let completed = records.iter().all(|r| r.grad_norm.is_finite() && r.cost.is_finite());
        let seed = seed_from_name(path).unwrap_or(i as u64);
        runs.push(RunSummary::from_records(seed, &records, completed, threshold));
    }
    let convergence = convergence_metrics(&runs, threshold).map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut table = format!(
        "{:>8}  {:>8}  {:>14}  {:>14}  {:>12}  {:>12}\n",
        "seed", "steps", "final_grad", "min_grad", "first_below", "final_below"
    );
    for r in &runs {
        table.push_str(&format!(
            "{:>8}  {:>8}  {:>14.6e}  {:>14.6e}  {:>12}  {:>12}\n",
            r.seed,
            r.steps,
            r.final_grad_norm,
            r.min_grad_norm,
            r.first_below.map_or("-".to_string(), |t| t.to_string()),
            if r.final_grad_norm <= threshold { "yes" } else { "no" }
        ));
    }
    table.push_str(&format!(
        "fraction below {threshold:e}: final {:.4}, reached {:.4} ({} runs)\n",
        convergence.fraction_final_below, convergence.fraction_reached, convergence.n_runs
    ));
    let txt = dir.join("report.txt");
    std::fs::write(&txt, &table).map_err(|e| CliError::Runtime(format!("{}: {e}", txt.display())))?;
    write_json(&dir.join("report.json"), &ReportOutput { threshold, files, runs, convergence })?;
    if !quiet {
        print!("{table}");
    }
    Ok(())
}
