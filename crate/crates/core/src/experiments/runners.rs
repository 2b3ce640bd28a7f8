//! The four experiment protocols. Each fans out one job per seed (and width,
//! policy, ...) and gathers rows in job order, so output bytes do not depend
//! on scheduling.

use std::collections::BTreeMap;

use serde::Serialize;

use super::problem::{gen_problem, DataScheme, InitScheme, Problem, ProblemSpec};
use super::{
    fan_out, to_csv, CsvTable, RunConfig, RunMeta, RunOutput, BASELINE_WIDTHS, DESK_ENVELOPE_WIDTHS,
    PAPER_ENVELOPE_WIDTHS, WIDTH_SWEEP_WIDTHS,
};
use crate::error::{Error, Result};
use crate::init::{compute_init_summary, InitSummary};
use crate::loss::LossModel;
use crate::matrix::operator_spectral_bounds;
use crate::scheduler::{compute_eta_max, EtaMax, Policy, SchedulerConfig};
use crate::trainer::{run_baseline, train, TrainOptions, Trajectory};

/// A generated problem with its certified step-size window.
pub struct Prepared {
    pub problem: Problem,
    pub summary: InitSummary,
    pub l0: f64,
    pub eta: EtaMax,
}

impl Prepared {
    pub fn new(spec: &ProblemSpec, c: f64, d: f64) -> Result<Self> {
        let problem = gen_problem(spec)?;
        let summary = compute_init_summary(&problem.w1_0, &problem.w2_0, &problem.loss)?;
        let l0 = problem.loss.value(&(&problem.w1_0 * problem.w2_0.transpose()));
        let eta = compute_eta_max(&summary, &problem.loss, l0, c, d)?;
        Ok(Self { problem, summary, l0, eta })
    }

    pub fn scheduler(&self, cfg: &RunConfig, policy: Policy) -> Result<SchedulerConfig> {
        SchedulerConfig::new(cfg.c, cfg.d, cfg.eta0_fraction * self.eta.eta_max, self.eta.eta_max, policy)
    }

    pub fn train(&self, sched: &SchedulerConfig, opts: &TrainOptions) -> Result<Trajectory> {
        train(&self.problem.loss, &self.problem.w1_0, &self.problem.w2_0, sched, opts)
    }

    fn meta(&self, label: String, sched: &SchedulerConfig) -> RunMeta {
        RunMeta::new(
            label,
            &self.problem.spec,
            self.summary.record(),
            self.l0,
            Some(self.eta),
            Some(sched),
            (sched.c, sched.d),
        )
    }
}

fn options(cfg: &RunConfig, stop_loss: Option<f64>) -> TrainOptions {
    TrainOptions { max_iters: cfg.iters, stop_loss, thin_telemetry: cfg.thin_telemetry, line_search: cfg.line_search }
}

#[derive(Debug, Clone, Serialize)]
struct EnvelopeRow {
    sigma: f64,
    h: usize,
    seed: u64,
    t: u64,
    loss: f64,
    envelope_rho: Option<f64>,
    envelope_rho_bar: f64,
    bound_constant: f64,
    violations: u32,
}

/// Loss against the three envelopes, one table per certified policy, over
/// the full `sigmas × widths × seeds` grid with orthogonal-teacher data.
pub fn run_envelope(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if let Some(p) = cfg.policies.iter().find(|p| !p.is_certified()) {
        return Err(Error::InvalidConfig(format!("envelope runs need certified policies, got {p}")));
    }
    let widths = cfg.h_list.clone().unwrap_or_else(|| {
        if cfg.paper_scale {
            PAPER_ENVELOPE_WIDTHS.to_vec()
        } else {
            DESK_ENVELOPE_WIDTHS.to_vec()
        }
    });
    let mut jobs = Vec::new();
    for &policy in &cfg.policies {
        for &sigma in &cfg.sigmas {
            for &h in &widths {
                for seed in cfg.seed_list() {
                    jobs.push((policy, sigma, h, seed));
                }
            }
        }
    }
    let results = fan_out(jobs, |(policy, sigma, h, seed)| {
        let spec = ProblemSpec { h, data: DataScheme::OrthogonalTeacher { sigma }, ..cfg.problem }.with_seed(seed);
        let prep = Prepared::new(&spec, cfg.c, cfg.d)?;
        let sched = prep.scheduler(cfg, policy)?;
        let traj = prep.train(&sched, &options(cfg, None))?;
        let rows: Vec<EnvelopeRow> = traj
            .rows
            .iter()
            .map(|r| EnvelopeRow {
                sigma,
                h,
                seed,
                t: r.t,
                loss: r.loss,
                envelope_rho: r.envelope_rho,
                envelope_rho_bar: r.envelope_rho_bar,
                bound_constant: r.bound_constant,
                violations: r.violations,
            })
            .collect();
        let label = format!("envelope policy={policy} sigma={sigma} h={h} seed={seed}");
        Ok((policy, rows, prep.meta(label, &sched)))
    })?;

    let mut out = RunOutput::default();
    for &policy in &cfg.policies {
        let rows: Vec<EnvelopeRow> =
            results.iter().filter(|(p, ..)| *p == policy).flat_map(|(_, rows, _)| rows.iter().cloned()).collect();
        out.tables.push(CsvTable { name: format!("envelope_{policy}.csv"), body: to_csv(&rows)? });
    }
    out.meta = results.into_iter().map(|(_, _, meta)| meta).collect();
    Ok(out)
}

pub const COMPARE_POLICIES: [Policy; 3] = [Policy::AdaptiveRho, Policy::Backtracking, Policy::Constant];

#[derive(Debug, Clone, Serialize)]
struct CompareRow {
    seed: u64,
    t: u64,
    policy: Policy,
    loss: f64,
    eta_t: f64,
}

#[derive(Debug, Clone, Serialize)]
struct WallclockRow {
    seed: u64,
    t: u64,
    policy: Policy,
    wallclock_ns: u64,
}

/// Loss and step size under the three policies for `iters` steps each.
/// A run that reaches exactly zero loss early repeats its last iterate so
/// every `(seed, policy)` block has `iters + 1` rows.
pub fn run_compare(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let jobs: Vec<(u64, Policy)> = cfg.seed_list().into_iter().flat_map(|s| COMPARE_POLICIES.map(|p| (s, p))).collect();
    let results = fan_out(jobs, |(seed, policy)| {
        let prep = Prepared::new(&cfg.problem.with_seed(seed), cfg.c, cfg.d)?;
        let sched = prep.scheduler(cfg, policy)?;
        let traj = prep.train(&sched, &options(cfg, Some(0.0)))?;
        let mut rows: Vec<CompareRow> =
            traj.rows.iter().map(|r| CompareRow { seed, t: r.t, policy, loss: r.loss, eta_t: r.eta_t }).collect();
        let mut clock: Vec<WallclockRow> =
            traj.rows.iter().map(|r| WallclockRow { seed, t: r.t, policy, wallclock_ns: r.wallclock_ns }).collect();
        let last = traj.rows.last().expect("trajectories have at least one row");
        for t in last.t + 1..=cfg.iters {
            rows.push(CompareRow { seed, t, policy, loss: last.loss, eta_t: 0.0 });
            clock.push(WallclockRow { seed, t, policy, wallclock_ns: last.wallclock_ns });
        }
        let label = format!("compare policy={policy} seed={seed}");
        Ok((rows, clock, prep.meta(label, &sched)))
    })?;

    let mut rows = Vec::new();
    let mut clock = Vec::new();
    let mut out = RunOutput::default();
    for (r, c, meta) in results {
        rows.extend(r);
        clock.extend(c);
        out.meta.push(meta);
    }
    out.tables.push(CsvTable { name: "compare.csv".into(), body: to_csv(&rows)? });
    if cfg.wallclock {
        out.tables.push(CsvTable { name: "compare_wallclock.csv".into(), body: to_csv(&clock)? });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct WidthRow {
    p: f64,
    h: usize,
    seed: u64,
    #[serde(rename = "kappa_T0")]
    kappa_t0: f64,
    alpha_ratio: f64,
    alpha1: f64,
}

pub fn width_sweep_spec(p: f64, h: usize, seed: u64) -> ProblemSpec {
    ProblemSpec {
        n: 10,
        m: 10,
        s: 10,
        h,
        init: InitScheme::ScaledNormal { p },
        data: DataScheme::OrthogonalTheta { noise: 0.1 },
        seed,
    }
}

/// Conditioning of `𝒯_0` and `α1/α2` under `N(0, h^{-2p})` initialization.
pub fn run_width_sweep(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    if let Some(p) = cfg.p_list.iter().find(|p| !(**p > 0.25 && **p < 0.5)) {
        return Err(Error::InvalidConfig(format!("width sweep needs 1/4 < p < 1/2, got {p}")));
    }
    let widths = cfg.h_list.clone().unwrap_or_else(|| WIDTH_SWEEP_WIDTHS.to_vec());
    let mut jobs = Vec::new();
    for &p in &cfg.p_list {
        for &h in &widths {
            for seed in cfg.seed_list() {
                jobs.push((p, h, seed));
            }
        }
    }
    let results = fan_out(jobs, |(p, h, seed)| {
        let spec = width_sweep_spec(p, h, seed);
        let problem = gen_problem(&spec)?;
        let summary = compute_init_summary(&problem.w1_0, &problem.w2_0, &problem.loss)?;
        let op = operator_spectral_bounds(&problem.w1_0, &problem.w2_0)?;
        let l0 = problem.loss.value(&(&problem.w1_0 * problem.w2_0.transpose()));
        let eta = compute_eta_max(&summary, &problem.loss, l0, cfg.c, cfg.d).ok();
        let row = WidthRow {
            p,
            h,
            seed,
            kappa_t0: op.condition_number(),
            alpha_ratio: summary.alpha_ratio(),
            alpha1: summary.alpha1,
        };
        let label = format!("width_sweep p={p} h={h} seed={seed}");
        Ok((row, RunMeta::new(label, &spec, summary.record(), l0, eta, None, (cfg.c, cfg.d))))
    })?;
    let (rows, meta): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(RunOutput { tables: vec![CsvTable { name: "width_sweep.csv".into(), body: to_csv(&rows)? }], meta })
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineRow {
    pub h: usize,
    pub seed: u64,
    pub t: u64,
    pub loss_over: Option<f64>,
    pub loss_nonover: Option<f64>,
}

pub fn baseline_spec(h: usize, seed: u64) -> ProblemSpec {
    ProblemSpec {
        n: 5,
        m: 5,
        s: 5,
        h,
        init: InitScheme::ScaledNormal { p: 0.5 },
        data: DataScheme::SpectrumBand { lo: 1.8, hi: 2.3, noise: 0.1 },
        seed,
    }
}

fn baseline_rows(cfg: &RunConfig, h: usize, seed: u64) -> Result<(Vec<BaselineRow>, RunMeta)> {
    let prep = Prepared::new(&baseline_spec(h, seed), cfg.c, cfg.d)?;
    let sched = prep.scheduler(cfg, Policy::AdaptiveRho)?;
    let traj = prep.train(&sched, &options(cfg, None))?;
    let loss = &prep.problem.loss;
    let w0 = &prep.problem.w1_0 * prep.problem.w2_0.transpose();
    let nonover = run_baseline(&w0, loss, 1.0 / loss.smoothness(), cfg.iters)?;
    let floor = 1e-12 * nonover[0].max(1.0);
    let stop = nonover.iter().position(|&l| l <= floor).unwrap_or(nonover.len() - 1);
    let rows = (0..=cfg.iters)
        .map(|t| BaselineRow {
            h,
            seed,
            t,
            loss_over: traj.rows.get(t as usize).map(|r| r.loss),
            loss_nonover: (t as usize <= stop).then(|| nonover[t as usize]),
        })
        .collect();
    Ok((rows, prep.meta(format!("baseline_match h={h} seed={seed}"), &sched)))
}

fn baseline_runs(cfg: &RunConfig) -> Result<Vec<(Vec<BaselineRow>, RunMeta)>> {
    cfg.validate()?;
    let widths = cfg.h_list.clone().unwrap_or_else(|| BASELINE_WIDTHS.to_vec());
    let jobs: Vec<(usize, u64)> =
        widths.iter().flat_map(|&h| cfg.seed_list().into_iter().map(move |s| (h, s))).collect();
    fan_out(jobs, |(h, seed)| baseline_rows(cfg, h, seed))
}

/// Overparametrized GD with `adaptive_rho` against plain GD with `η = 1/K`,
/// both started from `W(0) = W1(0)·W2(0)ᵀ`. Losses are blank after a run
/// reaches `1e-12·max(1, L0)`.
pub fn run_baseline_match(cfg: &RunConfig) -> Result<RunOutput> {
    let mut rows = Vec::new();
    let mut out = RunOutput::default();
    for (r, meta) in baseline_runs(cfg)? {
        rows.extend(r);
        out.meta.push(meta);
    }
    out.tables.push(CsvTable { name: "baseline_match.csv".into(), body: to_csv(&rows)? });
    Ok(out)
}

/// Baseline-match rows without CSV encoding.
pub fn baseline_match_rows(cfg: &RunConfig) -> Result<Vec<BaselineRow>> {
    Ok(baseline_runs(cfg)?.into_iter().flat_map(|(r, _)| r).collect())
}

/// Geometric-mean per-step ratio `L(t+1)/L(t)` over the second half of the
/// run, after cutting the run where it first reaches `1e-12·max(1, L0)`.
pub fn late_window_rate(losses: &[f64]) -> Option<f64> {
    let first = *losses.first()?;
    let floor = 1e-12 * first.max(1.0);
    let live: Vec<f64> = losses.iter().copied().take_while(|&l| l > floor).collect();
    let logs: Vec<f64> = live.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    if logs.len() < 2 {
        return None;
    }
    let late = &logs[logs.len() / 2..];
    Some((late.iter().sum::<f64>() / late.len() as f64).exp())
}

/// Seed-averaged `rate_over − rate_nonover` per width, from baseline-match
/// rows. Seeds where either rate is undefined are skipped.
pub fn baseline_gap_by_width(rows: &[BaselineRow]) -> Vec<(usize, f64)> {
    let mut runs: BTreeMap<(usize, u64), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let entry = runs.entry((r.h, r.seed)).or_default();
        entry.0.extend(r.loss_over);
        entry.1.extend(r.loss_nonover);
    }
    let mut by_width: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for ((h, _), (over, nonover)) in runs {
        if let (Some(a), Some(b)) = (late_window_rate(&over), late_window_rate(&nonover)) {
            by_width.entry(h).or_default().push(a - b);
        }
    }
    by_width.into_iter().map(|(h, gaps)| (h, gaps.iter().sum::<f64>() / gaps.len() as f64)).collect()
}
