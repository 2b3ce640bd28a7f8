//! Dense-matrix primitives: spectral extremes, symmetric eigenvalues, the
//! imbalance `W1ᵀW1 − W2ᵀW2`, and the skewing operator
//! `𝒯(G) = [G·W2 ; Gᵀ·W1]` that maps the base-loss gradient onto the factor
//! gradients.
//!
//! Singular values of rectangular matrices follow the "thin" convention:
//! `sigma_min` of an `r × c` matrix is its `min(r, c)`-th singular value.

use nalgebra::{DMatrix, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real matrix. Weights `W1 (n×h)`, `W2 (m×h)`, the product `W (n×m)`,
/// data `X (s×n)`, targets `Y (s×m)` and the imbalance `D (h×h)` all use it.
pub type Matrix = DMatrix<f64>;

/// Default cap on the number of entries of a matricized operator.
pub const MATRICIZE_CAP: usize = 10_000;

/// Builds a matrix from row-major entries, rejecting count mismatches and
/// non-finite values.
pub fn from_row_major(rows: usize, cols: usize, entries: &[f64]) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!("{rows}x{cols} matrix is empty")));
    }
    if entries.len() != rows * cols {
        return Err(Error::Dimension(format!("{} entries supplied for a {rows}x{cols} matrix", entries.len())));
    }
    let m = Matrix::from_row_slice(rows, cols, entries);
    ensure_finite(&m)?;
    Ok(m)
}

pub fn ensure_finite(m: &Matrix) -> Result<()> {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            if !m[(r, c)].is_finite() {
                return Err(Error::NonFinite { row: r, col: c });
            }
        }
    }
    Ok(())
}

pub(crate) fn ensure_nonempty(m: &Matrix, what: &str) -> Result<()> {
    if m.is_empty() {
        Err(Error::Dimension(format!("{what} is empty ({}x{})", m.nrows(), m.ncols())))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralExtremes {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Squared extreme singular values of the skewing operator `𝒯`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpectrum {
    pub sigma2_min: f64,
    pub sigma2_max: f64,
}

impl OperatorSpectrum {
    pub fn extremes(&self) -> SpectralExtremes {
        SpectralExtremes { sigma_min: self.sigma2_min.sqrt(), sigma_max: self.sigma2_max.sqrt() }
    }

    /// `σ_max(𝒯)/σ_min(𝒯)`; infinite when `𝒯` is singular.
    pub fn condition_number(&self) -> f64 {
        (self.sigma2_max / self.sigma2_min).sqrt()
    }
}

/// All singular values of `a`, in no particular order.
fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    let svd = SVD::try_new(a.clone(), false, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Dimension("SVD failed to converge".into()))?;
    Ok(svd.singular_values.iter().copied().collect())
}

/// Smallest and largest singular values of `a`.
pub fn spectral_extremes(a: &Matrix) -> Result<SpectralExtremes> {
    ensure_nonempty(a, "matrix")?;
    ensure_finite(a)?;
    let sv = singular_values(a)?;
    let sigma_min = sv.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
    let sigma_max = sv.iter().copied().fold(0.0, f64::max);
    Ok(SpectralExtremes { sigma_min, sigma_max })
}

/// Eigenvalues of a symmetric matrix in descending order, so that index
/// `k - 1` holds `λ_k`.
pub fn sorted_eigenvalues_symmetric(s: &Matrix) -> Result<Vec<f64>> {
    ensure_nonempty(s, "matrix")?;
    if !s.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", s.nrows(), s.ncols())));
    }
    ensure_finite(s)?;
    let asym = (s - s.transpose()).norm();
    if asym > 1e-9 * s.norm() {
        return Err(Error::Shape(format!("matrix is not symmetric (‖S − Sᵀ‖_F = {asym:e}, ‖S‖_F = {:e})", s.norm())));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| Error::Dimension("symmetric eigendecomposition failed".into()))?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

fn check_factor_shapes(w1: &Matrix, w2: &Matrix) -> Result<()> {
    ensure_nonempty(w1, "W1")?;
    ensure_nonempty(w2, "W2")?;
    if w1.ncols() != w2.ncols() {
        return Err(Error::Shape(format!(
            "W1 is {}x{} and W2 is {}x{}; hidden widths differ",
            w1.nrows(),
            w1.ncols(),
            w2.nrows(),
            w2.ncols()
        )));
    }
    Ok(())
}

/// Imbalance `D = W1ᵀW1 − W2ᵀW2` (h×h, symmetric).
pub fn imbalance(w1: &Matrix, w2: &Matrix) -> Result<Matrix> {
    check_factor_shapes(w1, w2)?;
    let d = w1.tr_mul(w1) - w2.tr_mul(w2);
    // Round-off leaves the two triangles a few ulps apart.
    Ok((&d + d.transpose()) * 0.5)
}

/// Eigenvalues of `D = W1ᵀW1 − W2ᵀW2` in descending order, all `h` of them.
///
/// With `A = [W1; W2]` and `J = diag(I_n, −I_m)`, `D = AᵀJA`. A thin QR
/// `Aᵀ = QR` gives `D = Q(RJRᵀ)Qᵀ`, so the spectrum is that of the
/// `(n+m)×(n+m)` matrix `RJRᵀ` padded with zeros.
pub fn imbalance_eigenvalues(w1: &Matrix, w2: &Matrix) -> Result<Vec<f64>> {
    check_factor_shapes(w1, w2)?;
    let (n, m, h) = (w1.nrows(), w2.nrows(), w1.ncols());
    let k = n + m;
    if h <= k {
        return sorted_eigenvalues_symmetric(&imbalance(w1, w2)?);
    }
    let mut at = Matrix::zeros(h, k);
    at.columns_mut(0, n).copy_from(&w1.transpose());
    at.columns_mut(n, m).copy_from(&w2.transpose());
    let r = at.qr().r();
    let mut rj = r.clone();
    for j in n..k {
        rj.column_mut(j).neg_mut();
    }
    let small = &rj * r.transpose();
    let mut values = sorted_eigenvalues_symmetric(&((&small + small.transpose()) * 0.5))?;
    values.resize(h, 0.0);
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// `‖D(t) − D(0)‖_F` without forming `h×h` matrices.
///
/// With `E_i = W_i − W_i(0)`, `W_iᵀW_i − W_i(0)ᵀW_i(0) = E_iᵀW_i + W_i(0)ᵀE_i`,
/// so `D(t) − D(0) = UᵀV` with `U = [E1; W1(0); −E2; −W2(0)]` and
/// `V = [W1; E1; W2; E2]`, and `‖UᵀV‖²_F = ⟨UUᵀ, VVᵀ⟩`.
pub fn imbalance_drift(w1: &Matrix, w2: &Matrix, w1_0: &Matrix, w2_0: &Matrix) -> Result<f64> {
    check_factor_shapes(w1, w2)?;
    if w1.shape() != w1_0.shape() || w2.shape() != w2_0.shape() {
        return Err(Error::Shape("initial factors differ in shape from the current ones".into()));
    }
    let e1 = w1 - w1_0;
    let e2 = w2 - w2_0;
    let (n, m, h) = (w1.nrows(), w2.nrows(), w1.ncols());
    let rows = 2 * (n + m);
    let mut u = Matrix::zeros(rows, h);
    let mut v = Matrix::zeros(rows, h);
    let mut at = 0;
    for (a, b, len) in [(&e1, w1, n), (w1_0, &e1, n), (&-&e2, w2, m), (&-w2_0, &e2, m)] {
        u.rows_mut(at, len).copy_from(a);
        v.rows_mut(at, len).copy_from(b);
        at += len;
    }
    let inner = (&u * u.transpose()).component_mul(&(&v * v.transpose())).sum();
    Ok(inner.max(0.0).sqrt())
}

/// Closed-form extremes of `𝒯`:
/// `σ²_min(𝒯) = σ²_min(W1) + σ²_min(W2)`, `σ²_max(𝒯) = σ²_max(W1) + σ²_max(W2)`.
///
/// `σ²_min(𝒯)` is the smallest eigenvalue of `𝒯*𝒯`, so a factor with fewer
/// columns than rows (h < n) contributes 0 rather than its thin `σ_min`.
pub fn operator_spectral_bounds(w1: &Matrix, w2: &Matrix) -> Result<OperatorSpectrum> {
    check_factor_shapes(w1, w2)?;
    let e1 = spectral_extremes(w1)?;
    let e2 = spectral_extremes(w2)?;
    let h = w1.ncols();
    let min1 = if h < w1.nrows() { 0.0 } else { e1.sigma_min };
    let min2 = if h < w2.nrows() { 0.0 } else { e2.sigma_min };
    Ok(OperatorSpectrum {
        sigma2_min: min1 * min1 + min2 * min2,
        sigma2_max: e1.sigma_max * e1.sigma_max + e2.sigma_max * e2.sigma_max,
    })
}

/// Applies `𝒯` to `g` (n×m), returning the stacked `(n+m)×h` block
/// `[G·W2 ; Gᵀ·W1]`.
pub fn apply_operator(w1: &Matrix, w2: &Matrix, g: &Matrix) -> Result<Matrix> {
    check_factor_shapes(w1, w2)?;
    let (n, m, h) = (w1.nrows(), w2.nrows(), w1.ncols());
    if g.shape() != (n, m) {
        return Err(Error::Shape(format!("G is {}x{}, expected {n}x{m}", g.nrows(), g.ncols())));
    }
    let mut out = Matrix::zeros(n + m, h);
    out.rows_mut(0, n).copy_from(&(g * w2));
    out.rows_mut(n, m).copy_from(&g.tr_mul(w1));
    Ok(out)
}

/// Dense matrix `M` of `𝒯` with `M · vec(G) = vec(𝒯(G))`, where `vec` stacks
/// columns (column-major). Output is `(n+m)h × nm`.
pub fn matricize_operator(w1: &Matrix, w2: &Matrix) -> Result<Matrix> {
    matricize_operator_capped(w1, w2, MATRICIZE_CAP)
}

pub fn matricize_operator_capped(w1: &Matrix, w2: &Matrix, cap: usize) -> Result<Matrix> {
    check_factor_shapes(w1, w2)?;
    let (n, m, h) = (w1.nrows(), w2.nrows(), w1.ncols());
    let rows = (n + m) * h;
    let cols = n * m;
    let entries = rows * cols;
    if entries > cap {
        return Err(Error::SizeCap { entries, cap });
    }
    let mut out = Matrix::zeros(rows, cols);
    // vec(G)[i + j·n] = G[i, j]; vec(T)[r + c·(n+m)] = T[r, c].
    // Top block: (G·W2)[i, c] = Σ_j G[i, j] W2[j, c].
    // Bottom block: (Gᵀ·W1)[j, c] = Σ_i G[i, j] W1[i, c].
    for j in 0..m {
        for i in 0..n {
            let col = i + j * n;
            for c in 0..h {
                out[(i + c * (n + m), col)] = w2[(j, c)];
                out[(n + j + c * (n + m), col)] = w1[(i, c)];
            }
        }
    }
    Ok(out)
}

/// Column-major vectorization.
pub fn vec_col_major(a: &Matrix) -> Vec<f64> {
    a.as_slice().to_vec()
}
