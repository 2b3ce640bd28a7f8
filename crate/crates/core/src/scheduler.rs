//! Local and global step-size certificates and the adaptive step-size
//! policies built on them.
//!
//! Local constants at iterate `t` (with `L = L(t)`, `s² = σ²(𝒯_t)`):
//!
//! ```text
//! μ_t = μ·s²_min
//! K_t(η) = K·s²_max + √(2KL) + 6K²·σ_max(W)·L·η² + 3K·s²_max·√(2KL)·η
//! ```
//!
//! Global bound constants depend only on the initialization, `η0` and the
//! exponents `c`, `d`:
//!
//! ```text
//! μ̄   = μ·[α1 + 2α2·(1 − exp(η0^c))]
//! ρ̄₀  = 1 − 2μ̄η0 + μ̄K̄₀η0²,   Δ = (1 + η0^d)·ρ̄₀
//! K̄_t = √(2K·L0·ρ̄₀^t) + 6K²β2·L0·η0²·Δ^t + K·exp(η0^c)·α2·[1 + 3√(2K·L0·Δ^t)·η0]
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{assert_alpha1_positive, InitSummary};
use crate::loss::{check_factors, LossModel};
use crate::matrix::{operator_spectral_bounds, spectral_extremes, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[serde(rename = "constant_eta0")]
    Constant,
    AdaptiveRho,
    AdaptiveRhoBar,
    Backtracking,
}

impl Policy {
    /// Policies whose steps provably satisfy the step-size window.
    pub fn is_certified(self) -> bool {
        !matches!(self, Policy::Backtracking)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Constant => "constant_eta0",
            Policy::AdaptiveRho => "adaptive_rho",
            Policy::AdaptiveRhoBar => "adaptive_rho_bar",
            Policy::Backtracking => "backtracking",
        }
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub c: f64,
    pub d: f64,
    pub eta0: f64,
    pub eta_max: f64,
    pub policy: Policy,
}

impl SchedulerConfig {
    pub fn new(c: f64, d: f64, eta0: f64, eta_max: f64, policy: Policy) -> Result<Self> {
        let cfg = Self { c, d, eta0, eta_max, policy };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c < 1.0) {
            return Err(Error::InvalidConfig(format!("c = {} must lie in (0, 1)", self.c)));
        }
        if !(self.d > 1.0 && self.d.is_finite()) {
            return Err(Error::InvalidConfig(format!("d = {} must exceed 1", self.d)));
        }
        if !(self.eta0 > 0.0 && self.eta0 <= self.eta_max && self.eta_max.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < eta0 <= eta_max, got eta0 = {:e}, eta_max = {:e}",
                self.eta0, self.eta_max
            )));
        }
        Ok(())
    }

    /// Growth envelope `(1 + η0^d)^{t/2}·η0`.
    pub fn growth_cap(&self, t: u64) -> f64 {
        (1.0 + self.eta0.powf(self.d)).powf(t as f64 / 2.0) * self.eta0
    }
}

/// Spectral state of one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterateSpectra {
    pub sigma2_min_t: f64,
    pub sigma2_max_t: f64,
    pub sigma_min_w: f64,
    pub sigma_max_w: f64,
}

impl IterateSpectra {
    pub fn compute(w1: &Matrix, w2: &Matrix, product: &Matrix) -> Result<Self> {
        let op = operator_spectral_bounds(w1, w2)?;
        let w = spectral_extremes(product)?;
        Ok(Self {
            sigma2_min_t: op.sigma2_min,
            sigma2_max_t: op.sigma2_max,
            sigma_min_w: w.sigma_min,
            sigma_max_w: w.sigma_max,
        })
    }
}

/// Coefficients of `K_t(η) = a + b·η + c·η²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessPolynomial {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl SmoothnessPolynomial {
    pub fn new(k: f64, loss_t: f64, spectra: &IterateSpectra) -> Self {
        let root = (2.0 * k * loss_t.max(0.0)).sqrt();
        Self {
            a: k * spectra.sigma2_max_t + root,
            b: 3.0 * k * spectra.sigma2_max_t * root,
            c: 6.0 * k * k * spectra.sigma_max_w * loss_t.max(0.0),
        }
    }

    pub fn eval(&self, eta: f64) -> f64 {
        self.a + eta * (self.b + eta * self.c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConstants {
    pub mu_t: f64,
    pub k_t: f64,
    pub sigma2_min_t: f64,
    pub sigma2_max_t: f64,
    pub sigma_max_w: f64,
    pub loss_t: f64,
    pub eta_used: f64,
}

impl LocalConstants {
    pub fn from_spectra(mu: f64, k: f64, loss_t: f64, spectra: &IterateSpectra, eta: f64) -> Self {
        Self {
            mu_t: mu * spectra.sigma2_min_t,
            k_t: SmoothnessPolynomial::new(k, loss_t, spectra).eval(eta),
            sigma2_min_t: spectra.sigma2_min_t,
            sigma2_max_t: spectra.sigma2_max_t,
            sigma_max_w: spectra.sigma_max_w,
            loss_t,
            eta_used: eta,
        }
    }
}

pub fn local_constants<L: LossModel + ?Sized>(
    w1: &Matrix,
    w2: &Matrix,
    loss: &L,
    eta_candidate: f64,
) -> Result<LocalConstants> {
    check_factors(w1, w2, loss)?;
    if !(eta_candidate > 0.0) {
        return Err(Error::InvalidConfig(format!("step candidate {eta_candidate} must be positive")));
    }
    let product = w1 * w2.transpose();
    let spectra = IterateSpectra::compute(w1, w2, &product)?;
    let value = loss.value(&product);
    Ok(LocalConstants::from_spectra(loss.mu(), loss.smoothness(), value, &spectra, eta_candidate))
}

/// Positive root of `c·η³ + b·η² + a·η − 1 = 0`, i.e. the step with
/// `η·K_t(η) = 1`.
pub fn self_consistent_root(poly: SmoothnessPolynomial) -> Result<f64> {
    let SmoothnessPolynomial { a, b, c } = poly;
    if !(a > 0.0) || !a.is_finite() || !(b >= 0.0) || !(c >= 0.0) {
        return Err(Error::DegenerateStep(format!("need a > 0 and b, c >= 0 (a = {a:e}, b = {b:e}, c = {c:e})")));
    }
    if b == 0.0 && c == 0.0 {
        return Ok(1.0 / a);
    }
    let f = |eta: f64| eta * (a + eta * (b + eta * c)) - 1.0;
    // f(0) = −1 and f(1/a) >= 0, and f is increasing on [0, ∞).
    let (mut lo, mut hi) = (0.0, 1.0 / a);
    let tol = 1e-14 * hi;
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let root = 0.5 * (lo + hi);
    let check = f(root) + 1.0;
    if !(1.0 - 1e-10..=1.0 + 1e-10).contains(&check) {
        return Err(Error::DegenerateStep(format!("root check failed: η·K_t(η) = {check}")));
    }
    Ok(root)
}

pub fn solve_self_consistent_step<L: LossModel + ?Sized>(w1: &Matrix, w2: &Matrix, loss: &L) -> Result<f64> {
    check_factors(w1, w2, loss)?;
    let product = w1 * w2.transpose();
    let spectra = IterateSpectra::compute(w1, w2, &product)?;
    let poly = SmoothnessPolynomial::new(loss.smoothness(), loss.value(&product), &spectra);
    self_consistent_root(poly)
}

/// Problem constants that the global bounds depend on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub mu: f64,
    pub k: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta2: f64,
    pub l0: f64,
    pub c: f64,
    pub d: f64,
}

impl BoundParams {
    pub fn new<L: LossModel + ?Sized>(summary: &InitSummary, loss: &L, l0: f64, c: f64, d: f64) -> Self {
        Self {
            mu: loss.mu(),
            k: loss.smoothness(),
            alpha1: summary.alpha1,
            alpha2: summary.alpha2,
            beta2: summary.beta2,
            l0,
            c,
            d,
        }
    }

    pub fn mu_bar(&self, eta0: f64) -> f64 {
        self.mu * (self.alpha1 + 2.0 * self.alpha2 * (1.0 - eta0.powf(self.c).exp()))
    }

    /// `K̄_t` as a function of the decay factors `ρ̄₀^t` and `Δ^t`.
    fn k_bar_with(&self, eta0: f64, rho_pow: f64, delta_pow: f64) -> f64 {
        let k = self.k;
        (2.0 * k * self.l0 * rho_pow).max(0.0).sqrt()
            + 6.0 * k * k * self.beta2 * self.l0 * eta0 * eta0 * delta_pow
            + k * eta0.powf(self.c).exp()
                * self.alpha2
                * (1.0 + 3.0 * (2.0 * k * self.l0 * delta_pow).max(0.0).sqrt() * eta0)
    }

    pub fn k_bar_0(&self, eta0: f64) -> f64 {
        self.k_bar_with(eta0, 1.0, 1.0)
    }

    pub fn rho_bar_0(&self, eta0: f64) -> f64 {
        let mu_bar = self.mu_bar(eta0);
        1.0 - 2.0 * mu_bar * eta0 + mu_bar * self.k_bar_0(eta0) * eta0 * eta0
    }

    /// `Δ = (1 + η0^d)·ρ̄(η0, 0)`.
    pub fn contraction_delta(&self, eta0: f64) -> f64 {
        (1.0 + eta0.powf(self.d)) * self.rho_bar_0(eta0)
    }

    pub fn at(&self, eta0: f64, t: u64) -> BoundConstants {
        let mu_bar = self.mu_bar(eta0);
        let rho_bar_0 = self.rho_bar_0(eta0);
        let delta = (1.0 + eta0.powf(self.d)) * rho_bar_0;
        let tf = t as f64;
        BoundConstants {
            t,
            mu_bar,
            k_bar_t: self.k_bar_with(eta0, rho_bar_0.powf(tf), delta.powf(tf)),
            contraction_delta: delta,
            rho_bar_0,
        }
    }

    /// Residual of `η·K̄₀(η) = 1`.
    pub fn eta_equation1(&self, eta: f64) -> f64 {
        eta * self.k_bar_0(eta) - 1.0
    }

    /// Both sides of `4K·L0·η² = (1 − exp(−η^c))·(1 − Δ(η))`.
    pub fn eta_equation2_sides(&self, eta: f64) -> (f64, f64) {
        let lhs = 4.0 * self.k * self.l0 * eta * eta;
        let rhs = (1.0 - (-eta.powf(self.c)).exp()) * (1.0 - self.contraction_delta(eta));
        (lhs, rhs)
    }

    /// Drift bound `‖D(t) − D(0)‖_F ≤ 2K·η0²·α2·exp(η0^c)·L0/(1 − Δ)`.
    pub fn imbalance_drift_bound(&self, eta0: f64) -> f64 {
        2.0 * self.k * eta0 * eta0 * self.alpha2 * eta0.powf(self.c).exp() * self.l0
            / (1.0 - self.contraction_delta(eta0))
    }

    /// Uniform corridor `[α1 + 2α2(1 − exp(η0^c)), α2·exp(η0^c)]` for `σ²(𝒯_t)`.
    pub fn operator_corridor(&self, eta0: f64) -> (f64, f64) {
        let e = eta0.powf(self.c).exp();
        (self.alpha1 + 2.0 * self.alpha2 * (1.0 - e), self.alpha2 * e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub t: u64,
    pub mu_bar: f64,
    pub k_bar_t: f64,
    /// `Δ`, named apart from the imbalance statistics of the init summary.
    pub contraction_delta: f64,
    /// `ρ̄(η0, 0)`.
    pub rho_bar_0: f64,
}

impl BoundConstants {
    /// `ρ̄(η, t) = 1 − 2μ̄η + μ̄K̄_tη²`.
    pub fn rho_bar(&self, eta: f64) -> f64 {
        1.0 - 2.0 * self.mu_bar * eta + self.mu_bar * self.k_bar_t * eta * eta
    }
}

pub fn bar_constants<L: LossModel + ?Sized>(
    t: u64,
    cfg: &SchedulerConfig,
    summary: &InitSummary,
    loss: &L,
    l0: f64,
) -> BoundConstants {
    BoundParams::new(summary, loss, l0, cfg.c, cfg.d).at(cfg.eta0, t)
}

/// Components of the largest admissible initial step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaMax {
    pub eta_max: f64,
    /// Root of `η·K̄₀(η) = 1`.
    pub eta0_1: f64,
    /// Smallest positive root of the imbalance-drift equation; `None` when it
    /// has no root below `min(eta0_1, log_bound)`.
    pub eta0_2: Option<f64>,
    /// `(ln(1 + α1/(2α2)))^{1/c}`, where `μ̄` reaches 0.
    pub log_bound: f64,
}

const ETA2_GRID_POINTS: usize = 400;
const ETA2_GRID_START: f64 = 1e-12;
/// `eta_max` stays this relative distance inside `log_bound`, where `μ̄ = 0`.
const LOG_BOUND_MARGIN: f64 = 1e-6;

fn bisect_increasing(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

pub fn compute_eta_max<L: LossModel + ?Sized>(
    summary: &InitSummary,
    loss: &L,
    l0: f64,
    c: f64,
    d: f64,
) -> Result<EtaMax> {
    assert_alpha1_positive(summary)?;
    if !(c > 0.0 && c < 1.0 && d > 1.0) {
        return Err(Error::InvalidConfig(format!("need 0 < c < 1 and d > 1, got c = {c}, d = {d}")));
    }
    if !(l0 >= 0.0 && l0.is_finite()) {
        return Err(Error::InvalidConfig(format!("initial loss {l0} must be finite and >= 0")));
    }
    let params = BoundParams::new(summary, loss, l0, c, d);

    let eq1 = |eta: f64| params.eta_equation1(eta);
    let mut hi = 1.0 / params.k_bar_0(0.0);
    while eq1(hi) < 0.0 {
        hi *= 2.0;
    }
    let eta0_1 = bisect_increasing(eq1, 0.0, hi);

    let log_bound = (1.0 + summary.alpha1 / (2.0 * summary.alpha2)).ln().powf(1.0 / c);

    // Both sides of the drift equation vanish at 0; roots cluster near 0, so
    // scan a geometric grid for the first crossing from below.
    let gap = |eta: f64| {
        let (lhs, rhs) = params.eta_equation2_sides(eta);
        lhs - rhs
    };
    let upper = eta0_1.min(log_bound);
    let mut eta0_2 = None;
    if upper > ETA2_GRID_START {
        let ratio = (upper / ETA2_GRID_START).powf(1.0 / (ETA2_GRID_POINTS - 1) as f64);
        let mut prev = ETA2_GRID_START;
        if gap(prev) >= 0.0 {
            eta0_2 = Some(prev);
        } else {
            for i in 1..ETA2_GRID_POINTS {
                let x = if i == ETA2_GRID_POINTS - 1 { upper } else { prev * ratio };
                if gap(x) >= 0.0 {
                    eta0_2 = Some(bisect_increasing(gap, prev, x));
                    break;
                }
                prev = x;
            }
        }
    }

    let mut eta_max = eta0_1.min(log_bound * (1.0 - LOG_BOUND_MARGIN));
    if let Some(e2) = eta0_2 {
        eta_max = eta_max.min(e2);
    }
    // The bisection returns the upper end of its final bracket; step back by
    // one ulp if that overshoots η·K̄₀ ≤ 1.
    while eta_max * params.k_bar_0(eta_max) > 1.0 {
        eta_max = f64::from_bits(eta_max.to_bits() - 1);
    }
    if !(params.mu_bar(eta_max) > 0.0) {
        return Err(Error::DegenerateStep(format!("μ̄ = {:e} at eta_max = {eta_max:e}", params.mu_bar(eta_max))));
    }
    Ok(EtaMax { eta_max, eta0_1, eta0_2, log_bound })
}

/// Step for the given policy at iterate `t`.
///
/// `self_consistent_cap` is the root of `η·K_t(η) = 1` at the current iterate;
/// only `AdaptiveRho` reads it.
pub fn step_size(
    policy: Policy,
    t: u64,
    self_consistent_cap: f64,
    cfg: &SchedulerConfig,
    bounds: &BoundConstants,
) -> Result<f64> {
    let cap = match policy {
        Policy::Constant => return Ok(cfg.eta0),
        Policy::AdaptiveRho => self_consistent_cap,
        Policy::AdaptiveRhoBar => 1.0 / bounds.k_bar_t,
        Policy::Backtracking => {
            return Err(Error::InvalidConfig("backtracking steps come from the line search".into()))
        }
    };
    if cap < cfg.eta0 {
        return Err(Error::ScheduleInfeasible { t, cap, eta0: cfg.eta0 });
    }
    Ok(cfg.growth_cap(t).min(cap).max(cfg.eta0))
}

/// `(ρ(η, t), ρ̄(η, t))`, unclamped.
pub fn descent_factors(eta: f64, lc: &LocalConstants, bc: &BoundConstants) -> (f64, f64) {
    let rho = 1.0 - 2.0 * lc.mu_t * eta + lc.mu_t * lc.k_t * eta * eta;
    (rho, bc.rho_bar(eta))
}
