//! Reference computations for the integration tests. None of these call the
//! library's decompositions.
#![allow(dead_code, clippy::needless_range_loop)]

use gdcert::experiments::problem::{gaussian_matrix, stream_rng};
use gdcert::loss::SquaredLoss;
use gdcert::matrix::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, 97)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    gaussian_matrix(rng, rows, cols, 1.0)
}

/// Squared loss with Gaussian `X (s×n)` and `Y (s×m)`, `s = n + 3`.
pub fn random_loss(rng: &mut ChaCha8Rng, n: usize, m: usize) -> SquaredLoss {
    let s = n + 3;
    SquaredLoss::new(gaussian(rng, s, n), gaussian(rng, s, m)).expect("Gaussian data has full rank")
}

pub fn dims(rng: &mut ChaCha8Rng, max_n: usize, max_m: usize, max_h: usize) -> (usize, usize, usize) {
    (rng.random_range(1..=max_n), rng.random_range(1..=max_m), rng.random_range(1..=max_h))
}

/// Singular values by one-sided (Hestenes) Jacobi rotations, descending.
pub fn jacobi_singular_values(a: &Matrix) -> Vec<f64> {
    let a = if a.nrows() < a.ncols() { a.transpose() } else { a.clone() };
    let (rows, cols) = a.shape();
    let mut u: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| a[(i, j)]).collect()).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = u[p].iter().map(|x| x * x).sum();
                let beta: f64 = u[q].iter().map(|x| x * x).sum();
                let gamma: f64 = u[p].iter().zip(&u[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-16 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (x, y) = (u[p][i], u[q][i]);
                    u[p][i] = c * x - s * y;
                    u[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = u.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(s: &Matrix) -> Vec<f64> {
    let n = s.nrows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| 0.5 * (s[(i, j)] + s[(j, i)])).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let total: f64 = a.iter().flatten().map(|x| x * x).sum();
        if off <= 1e-32 * total.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&Matrix) -> f64, x: &Matrix, step: f64) -> Matrix {
    let mut g = Matrix::zeros(x.nrows(), x.ncols());
    for idx in 0..x.len() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus[idx] += step;
        minus[idx] -= step;
        g[idx] = (f(&plus) - f(&minus)) / (2.0 * step);
    }
    g
}

/// Second central difference of `f` along `d` at `x`.
pub fn fd_curvature(f: impl Fn(&Matrix) -> f64, x: &Matrix, d: &Matrix, step: f64) -> f64 {
    (f(&(x + d * step)) - 2.0 * f(x) + f(&(x - d * step))) / (step * step)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Positive root of `c·x³ + b·x² + a·x − 1` by Newton's method from `1/a`.
pub fn newton_cubic_root(a: f64, b: f64, c: f64) -> f64 {
    let mut x = 1.0 / a;
    for _ in 0..200 {
        let f = c * x * x * x + b * x * x + a * x - 1.0;
        let df = 3.0 * c * x * x + 2.0 * b * x + a;
        let next = x - f / df;
        if (next - x).abs() <= 1e-17 * x {
            return next;
        }
        x = next;
    }
    x
}
