//! Quick invariant suites behind the `selftest` subcommand.

use super::problem::{gaussian_matrix, stream_rng, ProblemSpec};
use super::runners::Prepared;
use super::{run_compare, RunConfig};
use crate::error::Result;
use crate::loss::{overparam_value_and_gradient, LossModel, SquaredLoss};
use crate::matrix::{matricize_operator, operator_spectral_bounds, spectral_extremes, Matrix};
use crate::scheduler::Policy;
use crate::trainer::TrainOptions;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn operator_spectrum(trials: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut rng = stream_rng(seed, 11);
        let (n, m, h) = (1 + seed as usize % 4, 1 + seed as usize % 3, 2 + seed as usize % 5);
        let w1 = gaussian_matrix(&mut rng, n, h, 1.0);
        let w2 = gaussian_matrix(&mut rng, m, h, 1.0);
        let closed = operator_spectral_bounds(&w1, &w2)?;
        let sv = matricize_operator(&w1, &w2)?.singular_values();
        let (lo, hi) = (sv.min().powi(2), sv.max().powi(2));
        worst = worst.max((closed.sigma2_max - hi).abs() / hi);
        if lo > 1e-6 * hi {
            worst = worst.max((closed.sigma2_min - lo).abs() / lo);
        }
    }
    Ok(Check { name: "operator spectrum", passed: worst <= 1e-9, detail: format!("max relative error {worst:.2e}") })
}

fn gradient(trials: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut rng = stream_rng(seed, 12);
        let (n, m, h, s) = (3, 2, 4, 5);
        let loss = SquaredLoss::new(gaussian_matrix(&mut rng, s, n, 1.0), gaussian_matrix(&mut rng, s, m, 1.0))?;
        let w1 = gaussian_matrix(&mut rng, n, h, 1.0);
        let w2 = gaussian_matrix(&mut rng, m, h, 1.0);
        let eval = overparam_value_and_gradient(&w1, &w2, &loss)?;
        let f = |a: &Matrix, b: &Matrix| loss.value(&(a * b.transpose()));
        let step = 1e-6;
        let mut fd1 = Matrix::zeros(n, h);
        for idx in 0..n * h {
            let (mut plus, mut minus) = (w1.clone(), w1.clone());
            plus[idx] += step;
            minus[idx] -= step;
            fd1[idx] = (f(&plus, &w2) - f(&minus, &w2)) / (2.0 * step);
        }
        worst = worst.max((&fd1 - &eval.grad_w1).norm() / eval.grad_w1.norm());
    }
    Ok(Check { name: "gradient", passed: worst <= 1e-5, detail: format!("max relative error {worst:.2e}") })
}

fn certificates(seeds: u64) -> Result<Check> {
    let cfg = RunConfig::default();
    let mut flagged = 0;
    let mut steps = 0;
    for seed in 0..seeds {
        let prep = Prepared::new(&ProblemSpec::default().with_seed(seed), cfg.c, cfg.d)?;
        let sched = prep.scheduler(&cfg, Policy::AdaptiveRho)?;
        let traj = prep.train(&sched, &TrainOptions { max_iters: 300, ..TrainOptions::default() })?;
        flagged += traj.rows.iter().filter(|r| r.violations != 0).count();
        steps += traj.rows.len();
    }
    Ok(Check { name: "certificates", passed: flagged == 0, detail: format!("{flagged} flagged of {steps} rows") })
}

fn determinism() -> Result<Check> {
    let cfg = RunConfig {
        problem: ProblemSpec { n: 4, m: 4, s: 4, h: 16, ..ProblemSpec::default() },
        seeds: 3,
        iters: 20,
        ..RunConfig::default()
    };
    let a = run_compare(&cfg)?;
    let b = run_compare(&cfg)?;
    let same = a.tables == b.tables;
    Ok(Check { name: "determinism", passed: same, detail: format!("{} tables compared", a.tables.len()) })
}

fn data_conditioning() -> Result<Check> {
    let p = super::gen_problem(&ProblemSpec::default())?;
    let ext = spectral_extremes(p.loss.x())?;
    let ok = (ext.sigma_min - 1.0).abs() < 1e-12 && (ext.sigma_max - 1.0).abs() < 1e-12;
    Ok(Check {
        name: "orthogonal data", passed: ok, detail: format!("σ(X) in [{}, {}]", ext.sigma_min, ext.sigma_max)
    })
}

pub fn run_selftest() -> Result<Vec<Check>> {
    Ok(vec![operator_spectrum(50)?, gradient(10)?, certificates(3)?, determinism()?, data_conditioning()?])
}
