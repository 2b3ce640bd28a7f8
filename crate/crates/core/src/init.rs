//! Initialization summary: eigenvalue statistics of the initial imbalance
//! `D(0)` and the margin terms that together bound the spectrum of `𝒯_t`
//! along a certified trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{check_factors, LossModel};
use crate::matrix::{imbalance_eigenvalues, spectral_extremes, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct InitSummary {
    /// `max(λ_max(−D(0)), 0)`.
    pub lambda_minus: f64,
    /// `max(λ_max(D(0)), 0)`.
    pub lambda_plus: f64,
    /// `max(λ_n(D(0)), 0) + max(λ_m(−D(0)), 0)`.
    pub delta_under: f64,
    /// `λ₊ − max(λ_n(D(0)), 0)`.
    pub delta_plus: f64,
    /// `λ₋ − max(λ_m(−D(0)), 0)`.
    pub delta_minus: f64,
    /// Margin lower bound on `σ_min(W(t))`.
    pub beta1: f64,
    /// Upper bound on `σ_max(W(t))`.
    pub beta2: f64,
    /// Lower bound on `σ²_min(𝒯)`.
    pub alpha1: f64,
    /// Upper bound on `σ²_max(𝒯)`.
    pub alpha2: f64,
    pub d0_frobenius: f64,
}

/// Flat, serializable view of [`InitSummary`] without the `D(0)` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSummaryRecord {
    pub lambda_minus: f64,
    pub lambda_plus: f64,
    pub delta_under: f64,
    pub delta_plus: f64,
    pub delta_minus: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub d0_frobenius: f64,
}

impl InitSummary {
    pub fn record(&self) -> InitSummaryRecord {
        InitSummaryRecord {
            lambda_minus: self.lambda_minus,
            lambda_plus: self.lambda_plus,
            delta_under: self.delta_under,
            delta_plus: self.delta_plus,
            delta_minus: self.delta_minus,
            beta1: self.beta1,
            beta2: self.beta2,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            d0_frobenius: self.d0_frobenius,
        }
    }

    /// `α1/α2`, the ratio that governs the local rate of convergence.
    pub fn alpha_ratio(&self) -> f64 {
        self.alpha1 / self.alpha2
    }
}

pub fn compute_init_summary<L: LossModel + ?Sized>(w1_0: &Matrix, w2_0: &Matrix, loss: &L) -> Result<InitSummary> {
    check_factors(w1_0, w2_0, loss)?;
    let (n, m, h) = (w1_0.nrows(), w2_0.nrows(), w1_0.ncols());
    if n > h || m > h {
        return Err(Error::EigenIndex { index: n.max(m), dim: h });
    }

    // Descending eigenvalues of D(0); those of −D(0) are the negated reverse.
    let eig = imbalance_eigenvalues(w1_0, w2_0)?;
    let eig_neg: Vec<f64> = eig.iter().rev().map(|v| -v).collect();

    let lambda_plus = eig[0].max(0.0);
    let lambda_minus = eig_neg[0].max(0.0);
    let lambda_n = eig[n - 1].max(0.0);
    let lambda_m_neg = eig_neg[m - 1].max(0.0);
    let delta_under = lambda_n + lambda_m_neg;
    let delta_plus = lambda_plus - lambda_n;
    let delta_minus = lambda_minus - lambda_m_neg;

    let w_star = loss.minimizer();
    let w0 = w1_0 * w2_0.transpose();
    let star = spectral_extremes(w_star)?;
    let dist = (&w0 - w_star).norm() * (loss.smoothness() / loss.mu()).sqrt();
    let beta1 = (star.sigma_min - dist).max(0.0);
    let beta2 = star.sigma_max + dist;

    let b1sq4 = 4.0 * beta1 * beta1;
    let alpha1 = 0.5
        * (-delta_plus - delta_minus
            + ((delta_plus + delta_under).powi(2) + b1sq4).sqrt()
            + ((delta_minus + delta_under).powi(2) + b1sq4).sqrt());
    let b2sq4 = 4.0 * beta2 * beta2;
    let alpha2 = 0.5 * (lambda_plus + (lambda_plus * lambda_plus + b2sq4).sqrt())
        + 0.5 * (lambda_minus + (lambda_minus * lambda_minus + b2sq4).sqrt());

    Ok(InitSummary {
        lambda_minus,
        lambda_plus,
        delta_under,
        delta_plus,
        delta_minus,
        beta1,
        beta2,
        alpha1,
        alpha2,
        d0_frobenius: eig.iter().map(|v| v * v).sum::<f64>().sqrt(),
    })
}

/// Gate for the certified step-size results, which need `α1 > 0`.
pub fn assert_alpha1_positive(summary: &InitSummary) -> Result<()> {
    if summary.alpha1 > 0.0 {
        Ok(())
    } else {
        Err(Error::Alpha1NotPositive { alpha1: summary.alpha1 })
    }
}
