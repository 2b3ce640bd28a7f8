//! Base losses `ℓ(W)` and the factored objective `L(W1, W2) = ℓ(W1·W2ᵀ)`.

use crate::error::{Error, Result};
use crate::matrix::{ensure_finite, ensure_nonempty, spectral_extremes, Matrix};

/// A twice-differentiable, `K`-smooth, `μ`-strongly convex loss on `n×m`
/// matrices whose minimum value is 0.
///
/// Implementors certify `mu`, `smoothness` and `minimizer`; nothing here
/// estimates them.
pub trait LossModel: Send + Sync {
    /// Shape `(n, m)` of the argument.
    fn shape(&self) -> (usize, usize);
    fn value(&self, w: &Matrix) -> f64;
    fn gradient(&self, w: &Matrix) -> Matrix;
    /// Strong-convexity constant `μ`.
    fn mu(&self) -> f64;
    /// Smoothness constant `K`.
    fn smoothness(&self) -> f64;
    fn minimizer(&self) -> &Matrix;
    fn optimal_value(&self) -> f64 {
        0.0
    }
}

/// `ℓ(W) = ½‖Y − XW‖²_F − ½‖Y − XW*‖²_F`, shifted so the minimum is 0.
///
/// Evaluated through the centred forms `½‖X(W − W*)‖²_F` and `XᵀX(W − W*)`,
/// which agree with the raw expressions whenever `W*` solves the normal
/// equations and stay accurate as the loss approaches 0.
#[derive(Debug, Clone)]
pub struct SquaredLoss {
    x: Matrix,
    y: Matrix,
    gram: Matrix,
    minimizer: Matrix,
    residual_offset: f64,
    mu: f64,
    smoothness: f64,
}

impl SquaredLoss {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        ensure_nonempty(&x, "X")?;
        ensure_nonempty(&y, "Y")?;
        ensure_finite(&x)?;
        ensure_finite(&y)?;
        if x.nrows() != y.nrows() {
            return Err(Error::Shape(format!("X has {} rows but Y has {}", x.nrows(), y.nrows())));
        }
        if x.nrows() < x.ncols() {
            return Err(Error::DegenerateLoss(format!(
                "X is {}x{}; fewer samples than features cannot have full column rank",
                x.nrows(),
                x.ncols()
            )));
        }
        let ext = spectral_extremes(&x)?;
        if ext.sigma_max == 0.0 || ext.sigma_min <= 1e-12 * ext.sigma_max {
            return Err(Error::DegenerateLoss(format!(
                "X is rank deficient (σ_min = {:e}, σ_max = {:e}); the loss is not strongly convex",
                ext.sigma_min, ext.sigma_max
            )));
        }
        let minimizer = x
            .clone()
            .svd(true, true)
            .solve(&y, 1e-12 * ext.sigma_max)
            .map_err(|e| Error::DegenerateLoss(e.to_string()))?;
        let residual_offset = 0.5 * (&y - &x * &minimizer).norm_squared();
        Ok(Self {
            gram: x.tr_mul(&x),
            x,
            y,
            minimizer,
            residual_offset,
            mu: ext.sigma_min * ext.sigma_min,
            smoothness: ext.sigma_max * ext.sigma_max,
        })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    /// `½‖Y − XW*‖²_F`, the amount subtracted from the raw loss.
    pub fn residual_offset(&self) -> f64 {
        self.residual_offset
    }

    /// Unshifted `½‖Y − XW‖²_F`.
    pub fn raw_value(&self, w: &Matrix) -> f64 {
        0.5 * (&self.y - &self.x * w).norm_squared()
    }
}

impl LossModel for SquaredLoss {
    fn shape(&self) -> (usize, usize) {
        (self.x.ncols(), self.y.ncols())
    }

    fn value(&self, w: &Matrix) -> f64 {
        0.5 * (&self.x * (w - &self.minimizer)).norm_squared()
    }

    fn gradient(&self, w: &Matrix) -> Matrix {
        &self.gram * (w - &self.minimizer)
    }

    fn mu(&self) -> f64 {
        self.mu
    }

    fn smoothness(&self) -> f64 {
        self.smoothness
    }

    fn minimizer(&self) -> &Matrix {
        &self.minimizer
    }
}

/// Value and factor gradients of the overparametrized objective.
#[derive(Debug, Clone)]
pub struct OverparamEval {
    /// `L = ℓ(W1·W2ᵀ)`.
    pub value: f64,
    /// `∇_{W1} L = ∇ℓ(W)·W2`.
    pub grad_w1: Matrix,
    /// `∇_{W2} L = ∇ℓ(W)ᵀ·W1`.
    pub grad_w2: Matrix,
    /// `∇ℓ(W)` at the product.
    pub base_grad: Matrix,
    /// The product `W = W1·W2ᵀ`.
    pub product: Matrix,
}

impl OverparamEval {
    /// `‖∇L‖²_F = ‖∇ℓ·W2‖²_F + ‖∇ℓᵀ·W1‖²_F`.
    pub fn grad_norm_sq(&self) -> f64 {
        self.grad_w1.norm_squared() + self.grad_w2.norm_squared()
    }
}

pub(crate) fn check_factors<L: LossModel + ?Sized>(w1: &Matrix, w2: &Matrix, loss: &L) -> Result<()> {
    let (n, m) = loss.shape();
    ensure_nonempty(w1, "W1")?;
    ensure_nonempty(w2, "W2")?;
    if w1.nrows() != n || w2.nrows() != m || w1.ncols() != w2.ncols() {
        return Err(Error::Shape(format!(
            "W1 is {}x{}, W2 is {}x{}; loss expects n = {n}, m = {m} and a shared width",
            w1.nrows(),
            w1.ncols(),
            w2.nrows(),
            w2.ncols()
        )));
    }
    Ok(())
}

pub fn overparam_value_and_gradient<L: LossModel + ?Sized>(
    w1: &Matrix,
    w2: &Matrix,
    loss: &L,
) -> Result<OverparamEval> {
    check_factors(w1, w2, loss)?;
    let product = w1 * w2.transpose();
    Ok(eval_at_product(w1, w2, product, loss))
}

pub(crate) fn eval_at_product<L: LossModel + ?Sized>(
    w1: &Matrix,
    w2: &Matrix,
    product: Matrix,
    loss: &L,
) -> OverparamEval {
    let base_grad = loss.gradient(&product);
    OverparamEval {
        value: loss.value(&product),
        grad_w1: &base_grad * w2,
        grad_w2: base_grad.tr_mul(w1),
        base_grad,
        product,
    }
}
