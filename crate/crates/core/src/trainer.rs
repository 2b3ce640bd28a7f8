//! Gradient descent on the factored objective and on the base loss, with a
//! telemetry row per iterate and per-step certificate checks.

use std::time::Instant;

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{assert_alpha1_positive, compute_init_summary, InitSummary};
use crate::loss::{check_factors, eval_at_product, LossModel, OverparamEval};
use crate::matrix::{ensure_finite, imbalance_drift, Matrix};
use crate::scheduler::{
    self_consistent_root, step_size, BoundParams, IterateSpectra, LocalConstants, Policy, SchedulerConfig,
    SmoothnessPolynomial,
};

bitflags! {
    /// Certificate checks that failed at an iterate.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct Violations: u32 {
        /// `L(t+1) ≤ L(t) − (η − K_t·η²/2)·‖∇L‖²`.
        const DESCENT = 1;
        /// `½‖∇L‖² ≥ μ_t·L`.
        const PL = 1 << 1;
        /// Cached product disagrees with `W1·W2ᵀ`.
        const PRODUCT_IDENTITY = 1 << 2;
        /// `L(t+1) ≤ ρ(η_t, t)·L(t)`.
        const CONTRACTION = 1 << 3;
        /// `ρ(η_t, t) ≤ ρ̄(η0, 0)`.
        const RHO_BOUND = 1 << 4;
        /// `ρ(η_t, t) ≤ ρ̄(η_t, t) ≤ ρ̄(η0, 0)`.
        const BAR_ORDER = 1 << 5;
        const DRIFT = 1 << 6;
        const T_CORRIDOR = 1 << 7;
        const W_CORRIDOR = 1 << 8;
        /// `loss ≤ envelope_rho ≤ envelope_rho_bar ≤ bound_constant`.
        const ENVELOPE = 1 << 9;
    }
}

const DESCENT_TOL: f64 = 1e-9;
const CORRIDOR_TOL: f64 = 1e-8;
const PRODUCT_TOL: f64 = 1e-10;

/// Iterate `t` and the step taken from it. The last row of a trajectory has
/// `eta_t = 0` and `rho = rho_bar = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub t: u64,
    pub eta_t: f64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub mu_t: Option<f64>,
    #[serde(rename = "K_t")]
    pub k_t: Option<f64>,
    pub mu_bar: f64,
    #[serde(rename = "K_bar_t")]
    pub k_bar_t: f64,
    pub rho: Option<f64>,
    pub rho_bar: f64,
    #[serde(rename = "sigma2_min_T")]
    pub sigma2_min_t: Option<f64>,
    #[serde(rename = "sigma2_max_T")]
    pub sigma2_max_t: Option<f64>,
    #[serde(rename = "sigma_min_W")]
    pub sigma_min_w: Option<f64>,
    #[serde(rename = "sigma_max_W")]
    pub sigma_max_w: Option<f64>,
    pub imbalance_drift: f64,
    pub envelope_rho: Option<f64>,
    pub envelope_rho_bar: f64,
    pub bound_constant: f64,
    pub violations: u32,
    #[serde(skip)]
    pub wallclock_ns: u64,
}

impl TelemetryRow {
    pub fn violations(&self) -> Violations {
        Violations::from_bits_retain(self.violations)
    }

    fn bare(t: u64, eta: f64, eval: &OverparamEval) -> Self {
        Self {
            t,
            eta_t: eta,
            loss: eval.value,
            grad_norm_sq: eval.grad_norm_sq(),
            mu_t: None,
            k_t: None,
            mu_bar: f64::NAN,
            k_bar_t: f64::NAN,
            rho: None,
            rho_bar: f64::NAN,
            sigma2_min_t: None,
            sigma2_max_t: None,
            sigma_min_w: None,
            sigma_max_w: None,
            imbalance_drift: f64::NAN,
            envelope_rho: None,
            envelope_rho_bar: f64::NAN,
            bound_constant: f64::NAN,
            violations: 0,
            wallclock_ns: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceRule {
    /// `L(new) ≤ L − γ‖∇L‖²`.
    AsPrinted,
    /// `L(new) ≤ L − γη‖∇L‖²`.
    Armijo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LineSearch {
    pub eta_bt: f64,
    pub tau: f64,
    pub gamma: f64,
    pub max_shrinks: usize,
    pub rule: AcceptanceRule,
}

impl Default for LineSearch {
    fn default() -> Self {
        Self { eta_bt: 1.0, tau: 0.1, gamma: 0.9, max_shrinks: 200, rule: AcceptanceRule::Armijo }
    }
}

impl LineSearch {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_bt > 0.0 && self.tau > 0.0 && self.tau < 1.0 && self.gamma > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "line search needs eta_bt > 0, 0 < tau < 1, gamma > 0 (got {self:?})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub max_iters: u64,
    /// Defaults to `1e-12·max(1, L0)`.
    pub stop_loss: Option<f64>,
    /// Compute spectra every `k` iterates. Policies that need them for the
    /// step still compute them every iterate.
    pub thin_telemetry: u64,
    pub line_search: LineSearch,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { max_iters: 10_000, stop_loss: None, thin_telemetry: 1, line_search: LineSearch::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LossReached,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub policy: Policy,
    pub config: SchedulerConfig,
    pub l0: f64,
    pub stop_loss: f64,
    pub stop_reason: StopReason,
    pub rows: Vec<TelemetryRow>,
    pub w1: Matrix,
    pub w2: Matrix,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.rows.last().map_or(self.l0, |r| r.loss)
    }

    pub fn iterations(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.t)
    }

    /// First `t` with `loss ≤ target`.
    pub fn first_below(&self, target: f64) -> Option<u64> {
        self.rows.iter().find(|r| r.loss <= target).map(|r| r.t)
    }

    /// Union of all flagged violations.
    pub fn violations(&self) -> Violations {
        self.rows.iter().fold(Violations::empty(), |acc, r| acc | r.violations())
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidConfig(format!("step size {eta} must be finite and >= 0")));
    }
    Ok(())
}

fn step_factors(w1: &Matrix, w2: &Matrix, base_grad: &Matrix, eta: f64) -> (Matrix, Matrix) {
    (w1 - (base_grad * w2) * eta, w2 - base_grad.tr_mul(w1) * eta)
}

/// `W − η(∇ℓ·W2·W2ᵀ + W1·W1ᵀ·∇ℓ) + η²·∇ℓ·Wᵀ·∇ℓ`, the product after one
/// simultaneous factor step.
pub fn product_update(w1: &Matrix, w2: &Matrix, product: &Matrix, base_grad: &Matrix, eta: f64) -> Matrix {
    let first = base_grad * w2 * w2.transpose() + w1 * w1.tr_mul(base_grad);
    let second = base_grad * product.transpose() * base_grad;
    product - first * eta + second * (eta * eta)
}

fn divergence(t: u64, eta: f64, eval: &OverparamEval) -> Error {
    Error::Divergence { last_row: Box::new(TelemetryRow::bare(t, eta, eval)) }
}

/// One simultaneous gradient step on both factors.
pub fn gd_step_overparam<L: LossModel + ?Sized>(
    w1: &Matrix,
    w2: &Matrix,
    loss: &L,
    eta: f64,
) -> Result<(Matrix, Matrix)> {
    check_eta(eta)?;
    check_factors(w1, w2, loss)?;
    let eval = eval_at_product(w1, w2, w1 * w2.transpose(), loss);
    let (n1, n2) = step_factors(w1, w2, &eval.base_grad, eta);
    if ensure_finite(&n1).is_err() || ensure_finite(&n2).is_err() {
        return Err(divergence(0, eta, &eval));
    }
    Ok((n1, n2))
}

/// One gradient step on the base loss.
pub fn gd_step_baseline<L: LossModel + ?Sized>(w: &Matrix, loss: &L, eta: f64) -> Result<Matrix> {
    check_eta(eta)?;
    if w.shape() != loss.shape() {
        return Err(Error::Shape(format!("W is {:?}, loss expects {:?}", w.shape(), loss.shape())));
    }
    let next = w - loss.gradient(w) * eta;
    if ensure_finite(&next).is_err() {
        let value = loss.value(w);
        let mut row = TelemetryRow::bare(
            0,
            eta,
            &OverparamEval {
                value,
                grad_w1: Matrix::zeros(0, 0),
                grad_w2: Matrix::zeros(0, 0),
                base_grad: Matrix::zeros(0, 0),
                product: Matrix::zeros(0, 0),
            },
        );
        row.grad_norm_sq = loss.gradient(w).norm_squared();
        return Err(Error::Divergence { last_row: Box::new(row) });
    }
    Ok(next)
}

/// Baseline GD for `iters` steps; returns the loss at every iterate.
pub fn run_baseline<L: LossModel + ?Sized>(w0: &Matrix, loss: &L, eta: f64, iters: u64) -> Result<Vec<f64>> {
    let mut w = w0.clone();
    let mut out = Vec::with_capacity(iters as usize + 1);
    out.push(loss.value(&w));
    for _ in 0..iters {
        w = gd_step_baseline(&w, loss, eta)?;
        out.push(loss.value(&w));
    }
    Ok(out)
}

struct Accepted {
    w1: Matrix,
    w2: Matrix,
    eta: f64,
}

fn line_search<L: LossModel + ?Sized>(
    w1: &Matrix,
    w2: &Matrix,
    eval: &OverparamEval,
    loss: &L,
    ls: &LineSearch,
    t: u64,
) -> Result<Accepted> {
    ls.validate()?;
    let g = eval.grad_norm_sq();
    let mut eta = ls.eta_bt;
    for _ in 0..=ls.max_shrinks {
        let (n1, n2) = step_factors(w1, w2, &eval.base_grad, eta);
        let value = loss.value(&(&n1 * n2.transpose()));
        let decrease = match ls.rule {
            AcceptanceRule::AsPrinted => ls.gamma * g,
            AcceptanceRule::Armijo => ls.gamma * eta * g,
        };
        if value.is_finite() && value <= eval.value - decrease {
            return Ok(Accepted { w1: n1, w2: n2, eta });
        }
        eta *= ls.tau;
    }
    Err(Error::LineSearchFailure { t, shrinks: ls.max_shrinks })
}

/// Shrinks `eta_bt` by `tau` until the acceptance rule holds, then steps.
/// Returns the new factors and the accepted step.
pub fn backtracking_step<L: LossModel + ?Sized>(
    w1: &Matrix,
    w2: &Matrix,
    loss: &L,
    ls: &LineSearch,
) -> Result<(Matrix, Matrix, f64)> {
    check_factors(w1, w2, loss)?;
    let eval = eval_at_product(w1, w2, w1 * w2.transpose(), loss);
    let acc = line_search(w1, w2, &eval, loss, ls, 0)?;
    Ok((acc.w1, acc.w2, acc.eta))
}

/// Loss resolution at `W1·W2ᵀ`: `½K·(√h·u·‖W1‖_F·‖W2‖_F)²`, the loss of a
/// product perturbation at the rounding level of an `h`-term dot product.
fn roundoff_floor(w1: &Matrix, w2: &Matrix, k: f64) -> f64 {
    let err = (w1.ncols() as f64).sqrt() * f64::EPSILON * w1.norm() * w2.norm();
    0.5 * k * err * err
}

fn within(value: f64, bound: f64, rel: f64) -> bool {
    value <= bound + rel * bound.abs().max(f64::MIN_POSITIVE)
}

/// Runs GD from `(w1_0, w2_0)` until `loss ≤ stop_loss` or `max_iters` steps.
pub fn train<L: LossModel + ?Sized>(
    loss: &L,
    w1_0: &Matrix,
    w2_0: &Matrix,
    cfg: &SchedulerConfig,
    opts: &TrainOptions,
) -> Result<Trajectory> {
    check_factors(w1_0, w2_0, loss)?;
    ensure_finite(w1_0)?;
    ensure_finite(w2_0)?;
    cfg.validate()?;
    if opts.thin_telemetry == 0 {
        return Err(Error::InvalidConfig("thin_telemetry must be at least 1".into()));
    }
    let certified = cfg.policy.is_certified();
    let summary: Option<InitSummary> = match compute_init_summary(w1_0, w2_0, loss) {
        Ok(s) => Some(s),
        Err(e) if certified => return Err(e),
        Err(_) => None,
    };
    if certified {
        assert_alpha1_positive(summary.as_ref().expect("summary is computed for certified policies"))?;
    }
    if cfg.policy == Policy::Backtracking {
        opts.line_search.validate()?;
    }

    let started = Instant::now();
    let (mu, k) = (loss.mu(), loss.smoothness());
    let mut w1 = w1_0.clone();
    let mut w2 = w2_0.clone();
    let mut product = w1_0 * w2_0.transpose();
    let l0 = loss.value(&product);
    let stop_loss = opts.stop_loss.unwrap_or(1e-12 * l0.max(1.0));

    let params = summary.as_ref().map(|s| BoundParams::new(s, loss, l0, cfg.c, cfg.d));
    let rho_bar_0 = params.map_or(f64::NAN, |p| p.rho_bar_0(cfg.eta0));
    let drift_bound = params.map_or(f64::NAN, |p| p.imbalance_drift_bound(cfg.eta0));
    let (t_lo, t_hi) = params.map_or((f64::NAN, f64::NAN), |p| p.operator_corridor(cfg.eta0));
    let (beta1, beta2) = summary.as_ref().map_or((f64::NAN, f64::NAN), |s| (s.beta1, s.beta2));
    let drift_floor = 1e-12 * (1.0 + summary.as_ref().map_or(0.0, |s| s.d0_frobenius));

    let mut envelope_rho = Some(l0);
    let mut envelope_rho_bar = l0;
    let mut rows = Vec::new();
    let mut t = 0u64;

    let stop_reason = loop {
        let eval = eval_at_product(&w1, &w2, product.clone(), loss);
        let spectra = if cfg.policy == Policy::AdaptiveRho || t.is_multiple_of(opts.thin_telemetry) {
            Some(IterateSpectra::compute(&w1, &w2, &product)?)
        } else {
            None
        };
        let poly = spectra.map(|s| SmoothnessPolynomial::new(k, eval.value, &s));
        let bounds = params.map(|p| p.at(cfg.eta0, t));

        let mut row = TelemetryRow::bare(t, 0.0, &eval);
        if let Some(b) = bounds {
            row.mu_bar = b.mu_bar;
            row.k_bar_t = b.k_bar_t;
            row.bound_constant = l0 * rho_bar_0.powf(t as f64);
        }
        if let Some(s) = spectra {
            row.mu_t = Some(mu * s.sigma2_min_t);
            row.sigma2_min_t = Some(s.sigma2_min_t);
            row.sigma2_max_t = Some(s.sigma2_max_t);
            row.sigma_min_w = Some(s.sigma_min_w);
            row.sigma_max_w = Some(s.sigma_max_w);
        }
        row.imbalance_drift = imbalance_drift(&w1, &w2, w1_0, w2_0)?;
        row.envelope_rho = envelope_rho;
        row.envelope_rho_bar = envelope_rho_bar;

        let mut flags = Violations::empty();
        let floor = roundoff_floor(&w1, &w2, k);
        let tol_scale = DESCENT_TOL * (1.0 + eval.value) + floor;
        if let Some(mu_t) = row.mu_t {
            if 0.5 * row.grad_norm_sq < mu_t * eval.value - tol_scale {
                flags |= Violations::PL;
            }
        }
        if certified {
            if !(row.imbalance_drift <= drift_bound * (1.0 + DESCENT_TOL) + drift_floor) {
                flags |= Violations::DRIFT;
            }
            if let Some(s) = spectra {
                let slack = |v: f64| CORRIDOR_TOL * (1.0 + v.abs());
                if s.sigma2_min_t < t_lo - slack(t_lo) || s.sigma2_max_t > t_hi + slack(t_hi) {
                    flags |= Violations::T_CORRIDOR;
                }
                if s.sigma_min_w < beta1 - slack(beta1) || s.sigma_max_w > beta2 + slack(beta2) {
                    flags |= Violations::W_CORRIDOR;
                }
            }
            let env_tol = DESCENT_TOL * (t as f64 + 1.0);
            let env_ok = envelope_rho
                .is_none_or(|e| within(eval.value - floor, e, env_tol) && within(e, envelope_rho_bar, env_tol))
                && within(envelope_rho_bar, row.bound_constant, env_tol);
            if !env_ok {
                flags |= Violations::ENVELOPE;
            }
        }

        if eval.value <= stop_loss || t >= opts.max_iters {
            row.k_t = poly.map(|p| p.a);
            row.rho = spectra.map(|_| 1.0);
            row.rho_bar = 1.0;
            row.violations = flags.bits();
            row.wallclock_ns = started.elapsed().as_nanos() as u64;
            rows.push(row);
            break if eval.value <= stop_loss { StopReason::LossReached } else { StopReason::MaxIters };
        }

        let (next1, next2, eta) = match cfg.policy {
            Policy::Backtracking => {
                let acc = line_search(&w1, &w2, &eval, loss, &opts.line_search, t)?;
                (acc.w1, acc.w2, acc.eta)
            }
            policy => {
                let cap = match (policy, poly) {
                    (Policy::AdaptiveRho, Some(p)) => self_consistent_root(p)?,
                    _ => f64::INFINITY,
                };
                let b = bounds.expect("bounds exist for certified policies");
                let eta = step_size(policy, t, cap, cfg, &b)?;
                let (n1, n2) = step_factors(&w1, &w2, &eval.base_grad, eta);
                (n1, n2, eta)
            }
        };
        row.eta_t = eta;
        if ensure_finite(&next1).is_err() || ensure_finite(&next2).is_err() {
            return Err(Error::Divergence { last_row: Box::new(row) });
        }

        let cached = product_update(&w1, &w2, &product, &eval.base_grad, eta);
        let next_product = &next1 * next2.transpose();
        if (&cached - &next_product).norm() > PRODUCT_TOL * next_product.norm().max(f64::MIN_POSITIVE) {
            flags |= Violations::PRODUCT_IDENTITY;
        }
        let next_loss = loss.value(&next_product);
        if !next_loss.is_finite() {
            return Err(Error::Divergence { last_row: Box::new(row) });
        }

        let rho_bar = bounds.map_or(f64::NAN, |b| b.rho_bar(eta));
        row.rho_bar = rho_bar;
        if let Some(s) = spectra {
            let lc = LocalConstants::from_spectra(mu, k, eval.value, &s, eta);
            let rho = 1.0 - 2.0 * lc.mu_t * eta + lc.mu_t * lc.k_t * eta * eta;
            row.k_t = Some(lc.k_t);
            row.rho = Some(rho);
            let predicted = eval.value - (eta - lc.k_t * eta * eta / 2.0) * row.grad_norm_sq;
            if next_loss > predicted + tol_scale {
                flags |= Violations::DESCENT;
            }
            if certified {
                if next_loss > rho * eval.value * (1.0 + DESCENT_TOL) + floor.max(roundoff_floor(&next1, &next2, k)) {
                    flags |= Violations::CONTRACTION;
                }
                if !within(rho, rho_bar_0, DESCENT_TOL) {
                    flags |= Violations::RHO_BOUND;
                }
                if !within(rho, rho_bar, DESCENT_TOL) || !within(rho_bar, rho_bar_0, DESCENT_TOL) {
                    flags |= Violations::BAR_ORDER;
                }
            }
            envelope_rho = envelope_rho.map(|e| e * rho);
        } else {
            envelope_rho = None;
        }
        envelope_rho_bar *= rho_bar;
        row.violations = flags.bits();
        row.wallclock_ns = started.elapsed().as_nanos() as u64;
        rows.push(row);

        w1 = next1;
        w2 = next2;
        product = next_product;
        t += 1;
    };

    Ok(Trajectory { policy: cfg.policy, config: *cfg, l0, stop_loss, stop_reason, rows, w1, w2 })
}
