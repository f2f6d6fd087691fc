//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use riemsgd::batching::{enumerate_expectation, BatchPlan, Strata, DEFAULT_ENUMERATION_BUDGET};
use riemsgd::confinement::{
    check_induction_invariant, check_plain_confinement, choose_b, estimate_constants, run_confined_deterministic,
    sample_band, ConfinementFunction, ConfinementSpec, SquaredNorm,
};
use riemsgd::diagnostics::{
    adaptive_square_sums, check_descent_inequality, check_gradient_square_difference, estimate_lipschitz,
    track_martingale, RunSummary, DESCENT_MARGIN,
};
use riemsgd::driver::{run, run_many_with, RateRule, RunConfig};
use riemsgd::linalg::{dot, norm, sub};
use riemsgd::manifold::{Manifold, Point};
use riemsgd::problems::{GradientOracle, ProblemInstance, Region};
use riemsgd::schedules::{AdaptiveParams, DeterministicSchedule};

const MASTER_SEED: u64 = 1;
const THRESHOLD: f64 = 1e-3;
const SEEDS: usize = 100;
const HORIZON: usize = 100_000;

struct Line {
    pass: bool,
    text: String,
}

fn line(pass: bool, text: String) -> Line {
    Line { pass, text }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn power_rate() -> DeterministicSchedule {
    DeterministicSchedule::power_law(0.5, 0.75).unwrap()
}

fn sphere_problem() -> ProblemInstance {
    ProblemInstance::random_sphere_mean(4, 16, MASTER_SEED).unwrap()
}

fn sphere_start(o: &ProblemInstance) -> Point {
    o.manifold().random_point(&mut ChaCha8Rng::seed_from_u64(MASTER_SEED.wrapping_add(1000)))
}

fn schemes() -> Vec<(&'static str, BatchPlan)> {
    vec![
        ("segment", BatchPlan::segment(4)),
        ("no-repetition", BatchPlan::no_repetition(4)),
        ("stratified", BatchPlan::stratified(Strata::contiguous(16, 2, 2))),
    ]
}

fn lipschitz(o: &ProblemInstance, a: f64) -> (f64, f64) {
    let est = estimate_lipschitz(o, &Region::WholeManifold, a, 10_000, MASTER_SEED).unwrap();
    (est.c1_est, est.c2_est)
}

fn criterion_1() -> Line {
    let start = Instant::now();
    let problems = [
        ("sphere", ProblemInstance::random_sphere_mean(4, 6, MASTER_SEED).unwrap()),
        ("least-squares", ProblemInstance::random_least_squares(3, 6, 0.2, MASTER_SEED).unwrap()),
    ];
    let plans =
        [BatchPlan::segment(3), BatchPlan::no_repetition(3), BatchPlan::stratified(Strata::contiguous(6, 2, 2))];
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    for (_, o) in &problems {
        let m = o.manifold();
        for _ in 0..20 {
            let x = m.random_point(&mut rng);
            let g = o.full_gradient(&x);
            for plan in &plans {
                let e = enumerate_expectation(o, &x, plan, 0, DEFAULT_ENUMERATION_BUDGET).unwrap();
                worst = worst.max(norm(&sub(e.vec(), g.vec())));
            }
        }
    }
    let elapsed = start.elapsed();
    line(
        worst <= 1e-10 && elapsed < Duration::from_secs(10),
        format!(
            "exact unbiasedness, 3 schemes x 2 problems x 20 points: max error {worst:.2e} (tol 1e-10), {}",
            secs(elapsed)
        ),
    )
}

fn criterion_2() -> Line {
    let m = Manifold::sphere(4);
    let mut rng = ChaCha8Rng::seed_from_u64(MASTER_SEED);
    let h = 1e-6;
    let mut zero_exact = true;
    let mut fd_worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = m.random_point(&mut rng);
        zero_exact &= m.retract(&x, &m.zero(&x)).unwrap() == x;
        let w = m.random_unit_tangent(&x, &mut rng);
        let plus = m.retract(&x, &m.scale(h, &w)).unwrap();
        let minus = m.retract(&x, &m.scale(-h, &w)).unwrap();
        let fd: Vec<f64> = plus.coords().iter().zip(minus.coords()).map(|(p, q)| (p - q) / (2.0 * h)).collect();
        fd_worst = fd_worst.max(norm(&sub(&fd, w.vec())));
    }
    let mut adj_worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = m.random_point(&mut rng);
        let u = m.scale(2.0 * rng.random::<f64>(), &m.random_unit_tangent(&x, &mut rng));
        let w = m.random_tangent(&x, &mut rng);
        let y = m.retract(&x, &u).unwrap();
        let z = m.random_tangent(&y, &mut rng);
        let lhs = dot(m.retract_differential(&x, &u, &w).unwrap().vec(), z.vec());
        let rhs = dot(w.vec(), m.retract_adjoint(&x, &u, &z).unwrap().vec());
        adj_worst = adj_worst.max((lhs - rhs).abs());
    }
    line(
        zero_exact && fd_worst <= 1e-5 && adj_worst <= 1e-8,
        format!(
            "retraction axioms on S^3: R_x(0) = x exact: {zero_exact}, |dR_x(0) w - w| max {fd_worst:.2e} (tol 1e-5), adjoint max {adj_worst:.2e} (tol 1e-8)"
        ),
    )
}

/// Per-seed reduction of a convergence run.
struct ConvergenceRun {
    summary: RunSummary,
    square_sum_next: f64,
    square_difference_ok: bool,
}

fn convergence_runs(rate: RateRule, c1: f64, c2: f64, a: f64) -> Vec<(&'static str, Vec<ConvergenceRun>, Duration)> {
    let o = sphere_problem();
    let x0 = sphere_start(&o);
    schemes()
        .into_iter()
        .map(|(name, plan)| {
            let start = Instant::now();
            let cfg = RunConfig::new(plan, rate.clone(), x0.clone(), HORIZON, MASTER_SEED);
            let runs = run_many_with(&o, &cfg, SEEDS, |tr| ConvergenceRun {
                summary: RunSummary::from_trajectory(&tr, THRESHOLD),
                square_sum_next: adaptive_square_sums(&tr.records).0,
                square_difference_ok: check_gradient_square_difference(&tr, a, c1, c2).pass,
            })
            .unwrap();
            (name, runs, start.elapsed())
        })
        .collect()
}

fn criterion_3(results: &[(&'static str, Vec<ConvergenceRun>, Duration)]) -> Line {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, runs, elapsed) in results {
        let final_ok = runs.iter().filter(|r| r.summary.final_grad_norm <= THRESHOLD).count();
        let min_ok = runs.iter().filter(|r| r.summary.min_grad_norm <= THRESHOLD).count();
        let mut finals: Vec<f64> = runs.iter().map(|r| r.summary.final_grad_norm).collect();
        finals.sort_by(f64::total_cmp);
        pass &= final_ok >= 99 && min_ok >= 99 && *elapsed < Duration::from_secs(120);
        parts.push(format!(
            "{name}: {final_ok}/100 final, {min_ok}/100 running-min <= 1e-3, median final {:.2e}, {}",
            finals[finals.len() / 2],
            secs(*elapsed)
        ));
    }
    line(pass, format!("deterministic-rate convergence (need >= 99/100): {}", parts.join("; ")))
}

fn criterion_4(results: &[(&'static str, Vec<ConvergenceRun>, Duration)]) -> Line {
    let bound = AdaptiveParams::default().weighted_square_bound();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, runs, elapsed) in results {
        let reached = runs.iter().filter(|r| r.summary.first_below.is_some()).count();
        let monotone = runs.iter().all(|r| r.summary.steps_nonincreasing);
        let worst_sum = runs.iter().map(|r| r.square_sum_next).fold(0.0, f64::max);
        pass &= reached >= 99 && monotone && worst_sum <= bound;
        let mut mins: Vec<f64> = runs.iter().map(|r| r.summary.min_grad_norm).collect();
        mins.sort_by(f64::total_cmp);
        parts.push(format!(
            "{name}: {reached}/100 reach 1e-3, median min {:.2e}, steps nonincreasing {monotone}, max sum eta_(t+1)^2 |h_t|^2 {worst_sum:.3} (bound {bound}), {}",
            mins[mins.len() / 2],
            secs(*elapsed)
        ));
    }
    line(pass, format!("adaptive-rate convergence (need >= 99/100): {}", parts.join("; ")))
}

fn criterion_5(c1: f64) -> Line {
    let o = sphere_problem();
    let cfg = RunConfig::new(
        BatchPlan::segment(4),
        RateRule::Deterministic(power_rate()),
        sphere_start(&o),
        1000,
        MASTER_SEED,
    );
    let tr = run(&o, &cfg).unwrap();
    let report = check_descent_inequality(&tr, DESCENT_MARGIN * c1);
    line(
        report.pass && report.n_samples == 1000,
        format!(
            "descent inequality over {} steps with 1.2 * C1_est = {:.4}: {} violations, min margin {:.3e}",
            report.n_samples,
            DESCENT_MARGIN * c1,
            report.violations,
            report.margin
        ),
    )
}

fn criterion_6(a: f64) -> Line {
    let o = sphere_problem();
    let cfg = RunConfig::new(
        BatchPlan::segment(1),
        RateRule::Deterministic(power_rate()),
        sphere_start(&o),
        HORIZON,
        MASTER_SEED,
    );
    let start = Instant::now();
    let per = run_many_with(&o, &cfg, 200, |tr| {
        let trace = track_martingale(&tr);
        (trace.final_z(), trace.bound_violations(a), trace.rate_square_sum())
    })
    .unwrap();
    let n = per.len() as f64;
    let mean = per.iter().map(|p| p.0).sum::<f64>() / n;
    let var = per.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let stderr = (var / n).sqrt();
    let violations: usize = per.iter().map(|p| p.1).sum();
    let sigma = per[0].2;
    let bound = 1.5 * 4.0 * a.powi(4) * sigma;
    line(
        mean.abs() <= 3.0 * stderr && var <= bound && violations == 0,
        format!(
            "martingale over 200 seeds, b = 1: |mean z_T| {:.3e} vs 3 stderr {:.3e}, Var z_T {var:.3e} vs 1.5 * 4A^4 sigma {bound:.3e}, |u_t| > 2A^2 in {violations} steps, {}",
            mean.abs(),
            3.0 * stderr,
            secs(start.elapsed())
        ),
    )
}

fn criterion_7() -> Line {
    let start = Instant::now();
    let o = ProblemInstance::random_least_squares(3, 8, 0.2, MASTER_SEED).unwrap();
    let (_, y, tau) = o.least_squares_data().unwrap();
    let rho0 = y.iter().map(|v| v * v).fold(0.0, f64::max) / (4.0 * tau);
    let rho: Arc<dyn ConfinementFunction> = Arc::new(SquaredNorm);
    let spec = ConfinementSpec::plain(rho, rho0);
    let plain = check_plain_confinement(&spec, &o, 10_000, MASTER_SEED).unwrap();

    let schedule = power_rate();
    let (lambda, theta) = (1.0, 1.0);
    let b = choose_b(&spec, &o, &schedule, lambda, theta, 10_000, MASTER_SEED).unwrap();
    let k = estimate_constants(&spec, &o, &schedule, lambda, b, theta, 10_000, MASTER_SEED).unwrap();
    let x0 =
        sample_band(&SquaredNorm, &o.manifold(), f64::NEG_INFINITY, rho0, &mut ChaCha8Rng::seed_from_u64(MASTER_SEED))
            .unwrap();
    let cfg = RunConfig::new(BatchPlan::segment(4), RateRule::Deterministic(schedule.clone()), x0, 10_000, MASTER_SEED);
    let outcomes: Vec<Result<f64, String>> = (0..SEEDS as u64)
        .map(|s| {
            run_confined_deterministic(&o, &cfg.with_seed(MASTER_SEED + s), &spec, &k)
                .and_then(|tr| check_induction_invariant(&tr, &schedule, &k))
                .map_err(|e| e.to_string())
        })
        .collect();
    let violations = outcomes.iter().filter(|r| r.is_err()).count();
    let min_margin = outcomes.iter().filter_map(|r| r.as_ref().ok()).fold(f64::INFINITY, |m, v| m.min(*v));
    let elapsed = start.elapsed();
    line(
        plain.pass && violations == 0 && elapsed < Duration::from_secs(60),
        format!(
            "confinement: plain check at 10^4 samples {} (min <grad rho, H> {:.3e}, rho0 {rho0:.3}); b {:.3}, Lambda_est {:.3}, B_est {:.3}, phi {:.3}, rho1 {:.3}; {violations}/100 seeds violate, min invariant margin {min_margin:.3e}, {}",
            if plain.pass { "PASS" } else { "FAIL" },
            plain.min_margin,
            k.b,
            k.lambda_est,
            k.b_est,
            k.phi,
            k.rho1,
            secs(elapsed)
        ),
    )
}

/// Plain gradient descent with the gradient summed outcome by outcome.
fn reference_descent(o: &ProblemInstance, x0: &Point, steps: usize) -> Vec<Point> {
    let m = o.manifold();
    let sphere = m.kind() == riemsgd::manifold::ManifoldKind::Sphere;
    let schedule = power_rate();
    let mut xs = vec![x0.clone()];
    let mut x = x0.coords().to_vec();
    for t in 0..steps {
        let p = Point::new(x.clone());
        let mut g = vec![0.0; x.len()];
        for l in 0..o.space().size() {
            let h = o.sample_gradient(&p, l).unwrap();
            let w = o.space().weight(l);
            for (gi, hi) in g.iter_mut().zip(h.vec()) {
                *gi += w * hi;
            }
        }
        if sphere {
            let r = dot(&x, &g);
            for (gi, xi) in g.iter_mut().zip(&x) {
                *gi += -r * xi;
            }
        }
        let gamma = schedule.gamma(t);
        let mut next: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + (-gamma) * gi).collect();
        if sphere {
            let n = norm(&next);
            next.iter_mut().for_each(|c| *c /= n);
        }
        x = next;
        xs.push(Point::new(x.clone()));
    }
    xs
}

fn criterion_8() -> Line {
    let problems = [
        ProblemInstance::random_sphere_mean(4, 16, MASTER_SEED).unwrap(),
        ProblemInstance::random_least_squares(3, 8, 0.2, MASTER_SEED).unwrap(),
    ];
    let mut identical = true;
    let mut is_descent = true;
    for o in &problems {
        let n = o.space().size();
        let x0 = match o.manifold().kind() {
            riemsgd::manifold::ManifoldKind::Sphere => sphere_start(o),
            _ => Point::new(vec![1.0, -0.5, 2.0]),
        };
        let reference = reference_descent(o, &x0, 1000);
        is_descent &= reference.iter().take(50).all(|x| {
            let mut g = vec![0.0; x.dim()];
            for l in 0..n {
                riemsgd::linalg::axpy(o.space().weight(l), o.sample_gradient(x, l).unwrap().vec(), &mut g);
            }
            let g = o.manifold().project_tangent(x, &g);
            norm(&sub(g.vec(), o.full_gradient(x).vec())) <= 1e-13
        });
        for plan in [BatchPlan::no_repetition(n), BatchPlan::stratified(Strata::singletons(n))] {
            let mut cfg = RunConfig::new(plan, RateRule::Deterministic(power_rate()), x0.clone(), 1000, MASTER_SEED);
            cfg.store_iterates = true;
            let tr = run(o, &cfg).unwrap();
            identical &= tr.iterates.unwrap() == reference;
        }
    }
    line(
        identical && is_descent,
        format!("full-batch equivalence over 10^3 steps, 2 problems x 2 schemes: bitwise identical {identical}"),
    )
}

fn criterion_9() -> Line {
    let grid = [0.4, 0.5, 0.51, 0.75, 1.0, 1.2];
    let expected = [false, false, true, true, true, false];
    let got: Vec<bool> = grid
        .iter()
        .map(|&p| DeterministicSchedule::power_law(0.5, p).unwrap().validate_robbins_monro().valid)
        .collect();
    line(got == expected, format!("Robbins-Monro validation on p = {grid:?}: {got:?}"))
}

fn criterion_10(
    det: &[(&'static str, Vec<ConvergenceRun>, Duration)],
    ada: &[(&'static str, Vec<ConvergenceRun>, Duration)],
) -> Line {
    let total: usize = det.iter().chain(ada).map(|(_, r, _)| r.len()).sum();
    let failing: usize =
        det.iter().chain(ada).map(|(_, r, _)| r.iter().filter(|c| !c.square_difference_ok).count()).sum();
    line(
        failing == 0,
        format!("gradient-square difference bound on {total} acceptance runs: {failing} runs with a violating step"),
    )
}

fn main() -> ExitCode {
    let mut lines: Vec<(usize, Line)> = Vec::new();
    let mut emit = |k: usize, l: Line| {
        println!("criterion {k:>2}: {} {}", if l.pass { "PASS" } else { "FAIL" }, l.text);
        lines.push((k, l));
    };
    emit(1, criterion_1());
    emit(2, criterion_2());
    emit(9, criterion_9());
    emit(8, criterion_8());

    let o = sphere_problem();
    let a = o.bound_on_region(&Region::WholeManifold).unwrap();
    let (c1, c2) = lipschitz(&o, a);
    println!("             C1_est {c1:.4}, C2_est {c2:.4}, A {a:.4}");
    emit(5, criterion_5(c1));
    emit(7, criterion_7());
    emit(6, criterion_6(a));
    let det = convergence_runs(RateRule::Deterministic(power_rate()), c1, c2, a);
    emit(3, criterion_3(&det));
    let ada = convergence_runs(RateRule::Adaptive(AdaptiveParams::default()), c1, c2, a);
    emit(4, criterion_4(&ada));
    emit(10, criterion_10(&det, &ada));

    lines.sort_by_key(|(k, _)| *k);
    let failed: Vec<usize> = lines.iter().filter(|(_, l)| !l.pass).map(|(k, _)| *k).collect();
    println!("acceptance: {}/{} criteria pass", lines.len() - failed.len(), lines.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failing criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
