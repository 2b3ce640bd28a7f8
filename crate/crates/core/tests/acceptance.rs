//! Acceptance run: one line per criterion, nonzero exit if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{fd_curvature, fd_gradient, gaussian, jacobi_singular_values, random_loss, rel_err, rng};
use gdcert::experiments::runners::{baseline_gap_by_width, baseline_match_rows, Prepared};
use gdcert::experiments::{
    gen_problem, run_baseline_match, run_compare, run_envelope, run_width_sweep, ProblemSpec, RunConfig,
    WIDTH_SWEEP_EXPONENTS, WIDTH_SWEEP_WIDTHS,
};
use gdcert::init::compute_init_summary;
use gdcert::loss::{overparam_value_and_gradient, LossModel, SquaredLoss};
use gdcert::matrix::{matricize_operator, operator_spectral_bounds, Matrix};
use gdcert::scheduler::{local_constants, solve_self_consistent_step, BoundParams, Policy};
use gdcert::trainer::{TrainOptions, Trajectory, Violations};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn operator_spectrum() -> Outcome {
    let mut r = rng(501);
    let (mut worst_max, mut worst_min) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (n, m, h) = common::dims(&mut r, 6, 6, 8);
        let (w1, w2) = (gaussian(&mut r, n, h), gaussian(&mut r, m, h));
        let closed = operator_spectral_bounds(&w1, &w2).map_err(|e| e.to_string())?;
        let sv = jacobi_singular_values(&matricize_operator(&w1, &w2).map_err(|e| e.to_string())?);
        let (hi, lo) = (sv[0] * sv[0], sv[sv.len() - 1].powi(2));
        worst_max = worst_max.max(rel_err(closed.sigma2_max, hi));
        let err_min = if lo > 1e-9 * hi { rel_err(closed.sigma2_min, lo) } else { (closed.sigma2_min - lo).abs() / hi };
        worst_min = worst_min.max(err_min);
    }
    check(
        worst_max <= 1e-9 && worst_min <= 1e-9,
        format!("max rel err sigma2_max {worst_max:.1e}, sigma2_min {worst_min:.1e}"),
    )
}

fn gradient_and_curvature() -> Outcome {
    let mut r = rng(502);
    let (mut worst_grad, mut worst_ratio) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (n, m, h) = common::dims(&mut r, 4, 4, 6);
        let loss = random_loss(&mut r, n, m);
        let (w1, w2) = (gaussian(&mut r, n, h), gaussian(&mut r, m, h));
        let eval = overparam_value_and_gradient(&w1, &w2, &loss).map_err(|e| e.to_string())?;
        let fd1 = fd_gradient(|a| loss.value(&(a * w2.transpose())), &w1, 1e-6);
        let fd2 = fd_gradient(|b| loss.value(&(&w1 * b.transpose())), &w2, 1e-6);
        let scale = eval.grad_norm_sq().sqrt().max(1e-12);
        let err = ((&fd1 - &eval.grad_w1).norm_squared() + (&fd2 - &eval.grad_w2).norm_squared()).sqrt() / scale;
        worst_grad = worst_grad.max(err);
    }
    for _ in 0..50 {
        let (n, m, h) = common::dims(&mut r, 4, 4, 6);
        let loss = random_loss(&mut r, n, m);
        let (w1, w2) = (gaussian(&mut r, n, h), gaussian(&mut r, m, h));
        let eval = overparam_value_and_gradient(&w1, &w2, &loss).map_err(|e| e.to_string())?;
        let eta = solve_self_consistent_step(&w1, &w2, &loss).map_err(|e| e.to_string())?;
        let k_t = local_constants(&w1, &w2, &loss, eta).map_err(|e| e.to_string())?.k_t;
        let norm = eval.grad_norm_sq().sqrt();
        let stack = |a: &Matrix, b: &Matrix| {
            let mut s = Matrix::zeros(n + m, h);
            s.rows_mut(0, n).copy_from(a);
            s.rows_mut(n, m).copy_from(b);
            s
        };
        let f = |s: &Matrix| loss.value(&(s.rows(0, n) * s.rows(n, m).transpose()));
        let d = stack(&(&eval.grad_w1 * (-1.0 / norm)), &(&eval.grad_w2 * (-1.0 / norm)));
        let x0 = stack(&w1, &w2);
        for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let curv = fd_curvature(f, &(&x0 + &d * (frac * eta * norm)), &d, 1e-4);
            worst_ratio = worst_ratio.max(curv / k_t);
        }
    }
    check(
        worst_grad <= 1e-5 && worst_ratio <= 1.0 + 1e-6,
        format!("max rel gradient err {worst_grad:.1e}, max curvature/K_t {worst_ratio:.3}"),
    )
}

fn certified_runs() -> Result<Vec<(Prepared, Trajectory)>, String> {
    let cfg = RunConfig::default();
    (0..30)
        .map(|seed| {
            let prep =
                Prepared::new(&ProblemSpec::default().with_seed(seed), cfg.c, cfg.d).map_err(|e| e.to_string())?;
            let sched = prep.scheduler(&cfg, Policy::AdaptiveRho).map_err(|e| e.to_string())?;
            let opts = TrainOptions { max_iters: 300, stop_loss: Some(0.0), ..TrainOptions::default() };
            let traj = prep.train(&sched, &opts).map_err(|e| format!("seed {seed}: {e}"))?;
            Ok((prep, traj))
        })
        .collect()
}

fn certificates(runs: &[(Prepared, Trajectory)]) -> Outcome {
    let (mut flagged, mut rows, mut recheck) = (0, 0, 0);
    for (prep, traj) in runs {
        let cfg = traj.config;
        let params = BoundParams::new(&prep.summary, &prep.problem.loss, prep.l0, cfg.c, cfg.d);
        let rho_cap = params.rho_bar_0(cfg.eta0);
        rows += traj.rows.len();
        flagged += traj.rows.iter().filter(|r| r.violations != 0).count();
        let resolved = 1e-12 * prep.l0.max(1.0);
        for w in traj.rows.windows(2).filter(|w| w[1].loss > resolved) {
            let (now, next) = (&w[0], &w[1]);
            let rho = now.rho.unwrap_or(f64::NAN);
            let contraction = next.loss <= rho * now.loss * (1.0 + 1e-9);
            if !(contraction && rho <= rho_cap * (1.0 + 1e-12)) {
                recheck += 1;
            }
        }
    }
    check(
        flagged == 0 && recheck == 0,
        format!("{} runs, {rows} rows, {flagged} flagged, {recheck} failed recheck of contraction and rho cap above 1e-12 L0", runs.len()),
    )
}

fn envelopes(runs: &[(Prepared, Trajectory)]) -> Outcome {
    let (mut bad, mut flagged, mut rows) = (0, 0, 0);
    for (prep, traj) in runs {
        let resolved = 1e-12 * prep.l0.max(1.0);
        for r in &traj.rows {
            rows += 1;
            let tol = 1.0 + 1e-9 * (r.t as f64 + 1.0);
            let er = r.envelope_rho.unwrap_or(f64::NAN);
            let loss_ok = r.loss <= resolved || r.loss <= er * tol;
            if !(loss_ok && er <= r.envelope_rho_bar * tol && r.envelope_rho_bar <= r.bound_constant * tol) {
                bad += 1;
            }
            flagged += usize::from(r.violations().contains(Violations::ENVELOPE));
        }
    }
    check(
        bad == 0 && flagged == 0,
        format!("{bad} of {rows} rows out of order (loss compared above 1e-12 L0), {flagged} envelope flags"),
    )
}

fn policy_ordering() -> Outcome {
    let cfg = RunConfig::default();
    let target = 1e-8;
    let opts = TrainOptions { max_iters: 20_000, stop_loss: Some(target), ..TrainOptions::default() };
    let (mut vs_constant, mut vs_bt) = (0, 0);
    let mut counts = Vec::new();
    for seed in 0..30 {
        let prep = Prepared::new(&ProblemSpec::default().with_seed(seed), cfg.c, cfg.d).map_err(|e| e.to_string())?;
        let mut iters = [0u64; 3];
        for (slot, policy) in [Policy::AdaptiveRho, Policy::Constant, Policy::Backtracking].into_iter().enumerate() {
            let sched = prep.scheduler(&cfg, policy).map_err(|e| e.to_string())?;
            let traj = prep.train(&sched, &opts).map_err(|e| format!("seed {seed} {policy}: {e}"))?;
            iters[slot] = traj.first_below(target).unwrap_or(u64::MAX);
        }
        vs_constant += usize::from(iters[0] <= iters[1]);
        vs_bt += usize::from(iters[0] <= iters[2]);
        counts.push(iters);
    }
    let med = |k: usize| {
        let mut v: Vec<u64> = counts.iter().map(|c| c[k]).collect();
        v.sort_unstable();
        v[v.len() / 2]
    };
    check(
        vs_constant == 30 && vs_bt * 10 >= 30 * 8,
        format!(
            "adaptive_rho <= constant on {vs_constant}/30, <= backtracking on {vs_bt}/30; median iters {} / {} / {}",
            med(0),
            med(1),
            med(2)
        ),
    )
}

fn width_trend() -> Outcome {
    let cfg = RunConfig { seeds: 30, ..RunConfig::default() };
    let out = run_width_sweep(&cfg).map_err(|e| e.to_string())?;
    let body = &out.table("width_sweep.csv").ok_or("missing width_sweep.csv")?.body;
    let mut rdr = csv::Reader::from_reader(body.as_slice());
    let mut kappa = vec![vec![0.0f64; WIDTH_SWEEP_WIDTHS.len()]; WIDTH_SWEEP_EXPONENTS.len()];
    let (mut floor_ok, mut floor_total) = (0, 0);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let num = |i: usize| rec[i].parse::<f64>().unwrap();
        let (p, h) = (num(0), num(1));
        let pi = WIDTH_SWEEP_EXPONENTS.iter().position(|&q| q == p).ok_or("unexpected p")?;
        let hi = WIDTH_SWEEP_WIDTHS.iter().position(|&w| w as f64 == h).ok_or("unexpected h")?;
        kappa[pi][hi] += num(3) / 30.0;
        if p == 0.375 {
            floor_total += 1;
            floor_ok += usize::from(num(5) >= h.powf(1.0 - 2.0 * p));
        }
    }
    let decreasing = kappa.iter().all(|row| row.windows(2).all(|w| w[1] < w[0]));
    let share = floor_ok as f64 / floor_total as f64;
    let shown: Vec<String> =
        kappa.iter().map(|row| row.iter().map(|k| format!("{k:.3}")).collect::<Vec<_>>().join(">")).collect();
    check(
        decreasing && share >= 0.95,
        format!("mean kappa by h [{}]; alpha1 floor met on {floor_ok}/{floor_total} at p=0.375", shown.join(", ")),
    )
}

fn alpha1_positivity() -> Outcome {
    let mut positive = 0;
    for seed in 0..200 {
        let spec = ProblemSpec { n: 4, m: 4, s: 4, h: 8, seed, ..ProblemSpec::default() };
        let p = gen_problem(&spec).map_err(|e| e.to_string())?;
        let s = compute_init_summary(&p.w1_0, &p.w2_0, &p.loss).map_err(|e| e.to_string())?;
        positive += usize::from(s.alpha1 > 0.0);
    }
    check(positive == 200, format!("alpha1 > 0 in {positive}/200"))
}

fn baseline_trend() -> Outcome {
    let cfg = RunConfig { seeds: 30, iters: 300, ..RunConfig::default() };
    let rows = baseline_match_rows(&cfg).map_err(|e| e.to_string())?;
    let gaps = baseline_gap_by_width(&rows);
    let decreasing = gaps.len() == 3 && gaps.windows(2).all(|w| w[1].1 < w[0].1);
    let shown: Vec<String> = gaps.iter().map(|(h, g)| format!("h={h}: {g:.4}")).collect();
    check(decreasing, format!("late-window rate gap {}", shown.join(", ")))
}

fn eta_max_consistency() -> Outcome {
    let mut worst = 0.0f64;
    let mut bad = Vec::new();
    for seed in 0..30 {
        let spec = ProblemSpec { n: 4, m: 3, s: 6, h: 12, seed: 700 + seed, ..ProblemSpec::default() };
        let p = Prepared::new(&spec, 0.5, 1.01).map_err(|e| e.to_string())?;
        let params = BoundParams::new(&p.summary, &p.problem.loss, p.l0, 0.5, 1.01);
        let e = p.eta;
        let rho = params.rho_bar_0(e.eta_max);
        let mut resid = params.eta_equation1(e.eta0_1).abs();
        if let Some(e2) = e.eta0_2 {
            let (lhs, rhs) = params.eta_equation2_sides(e2);
            resid = resid.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
        }
        worst = worst.max(resid);
        let ok = e.eta_max * params.k_bar_0(e.eta_max) <= 1.0 + 1e-9
            && params.mu_bar(e.eta_max) > 0.0
            && rho > 0.0
            && rho < 1.0
            && resid <= 1e-9;
        if !ok {
            bad.push(seed);
        }
    }
    check(bad.is_empty(), format!("30 instances, worst residual {worst:.1e}, failing {bad:?}"))
}

fn toy_oracle() -> Outcome {
    let loss = SquaredLoss::new(Matrix::from_element(1, 1, 1.0), Matrix::from_element(1, 1, 1.0))
        .map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for (x1, x2) in [(1.0f64, 1.0f64), (2.0, 1.0), (0.5, 3.0)] {
        let (a, b) = (Matrix::from_element(1, 1, x1), Matrix::from_element(1, 1, x2));
        let eta = solve_self_consistent_step(&a, &b, &loss).map_err(|e| e.to_string())?;
        let lc = local_constants(&a, &b, &loss, eta).map_err(|e| e.to_string())?;
        let s = x1 * x1 + x2 * x2;
        let k_over = 0.5 * (s + (s * s - 4.0 * x1 * x1 * x2 * x2 + (2.0 * x1 * x2 - 1.0).powi(2)).sqrt());
        ok &= lc.mu_t == s && lc.k_t >= k_over;
        lines.push(format!("({x1},{x2}) mu_t={} K_t={:.3}>={k_over:.3}", lc.mu_t, lc.k_t));
    }
    check(ok, lines.join("; "))
}

fn determinism() -> Outcome {
    let cfg = RunConfig {
        problem: ProblemSpec { n: 5, m: 4, s: 6, h: 20, ..ProblemSpec::default() },
        seeds: 4,
        iters: 40,
        h_list: Some(vec![20, 30]),
        ..RunConfig::default()
    };
    let mut tables = 0;
    for runner in [run_envelope, run_compare, run_width_sweep, run_baseline_match] {
        let a = runner(&cfg).map_err(|e| e.to_string())?;
        let b = runner(&cfg).map_err(|e| e.to_string())?;
        if a.tables != b.tables {
            return Err(format!("{} differs between runs", a.tables[0].name));
        }
        tables += a.tables.len();
    }
    check(true, format!("{tables} tables byte-identical across two runs"))
}

fn report(id: u32, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = f();
    let took = start.elapsed();
    let (passed, detail) = match outcome {
        Ok(d) if took <= budget => (true, d),
        Ok(d) => (false, format!("{d}; over the {budget:?} budget")),
        Err(d) => (false, d),
    };
    let verdict = if passed { "PASS" } else { "FAIL" };
    println!("criterion {id}: {verdict} ({:.2}s) {detail}", took.as_secs_f64());
    passed
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut all = true;
    all &= report(1, secs(5), operator_spectrum);
    all &= report(2, secs(10), gradient_and_curvature);

    let start = Instant::now();
    let runs = certified_runs();
    let shared = start.elapsed();
    match &runs {
        Ok(runs) => {
            println!("criteria 3-4: 30 certified runs trained in {:.2}s", shared.as_secs_f64());
            all &= report(3, secs(120).saturating_sub(shared), || certificates(runs));
            all &= report(4, secs(120).saturating_sub(shared), || envelopes(runs));
        }
        Err(e) => {
            for id in [3, 4] {
                println!("criterion {id}: FAIL {e}");
            }
            all = false;
        }
    }

    all &= report(5, secs(180), policy_ordering);
    all &= report(6, secs(60), width_trend);
    all &= report(7, secs(5), alpha1_positivity);
    all &= report(8, secs(120), baseline_trend);
    all &= report(9, secs(5), eta_max_consistency);
    all &= report(10, secs(1), toy_oracle);
    all &= report(11, secs(60), determinism);

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
