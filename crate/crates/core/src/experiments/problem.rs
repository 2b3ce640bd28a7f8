//! Random problem instances.
//!
//! Each seed drives a ChaCha8 generator split into three streams so that
//! changing one part of a spec (say, the width `h`) leaves the other draws
//! untouched:
//!
//! - `DATA_STREAM`: `X`, `Θ`, singular values
//! - `INIT_STREAM`: `W1(0)` then `W2(0)`
//! - `NOISE_STREAM`: additive noise on `Y`
//!
//! Gaussians come from `rand_distr::StandardNormal`. Variances are given
//! directly (`noise = 0.1` means `N(0, 0.1)`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::SquaredLoss;
use crate::matrix::Matrix;

pub const DATA_STREAM: u64 = 1;
pub const INIT_STREAM: u64 = 2;
pub const NOISE_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    StdNormal,
    /// Entries `N(0, h^{-2p})`.
    ScaledNormal {
        p: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum DataScheme {
    /// Orthogonal `X`, `Y = X·W1(0)·W2(0)ᵀ + σ²·ε`.
    OrthogonalTeacher { sigma: f64 },
    /// Orthogonal `X`, `Θ ~ N(0, noise)`, `Y = X·Θ + N(0, noise)`.
    OrthogonalTheta { noise: f64 },
    /// `X = U·diag(σ)·V` with `σ_i ~ U[lo, hi]`, `Y = X·W1(0)·W2(0)ᵀ + N(0, noise)`.
    SpectrumBand { lo: f64, hi: f64, noise: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProblemSpec {
    pub n: usize,
    pub m: usize,
    /// Number of samples (rows of `X`).
    pub s: usize,
    pub h: usize,
    pub init: InitScheme,
    pub data: DataScheme,
    pub seed: u64,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            n: 10,
            m: 10,
            s: 10,
            h: 100,
            init: InitScheme::StdNormal,
            data: DataScheme::OrthogonalTeacher { sigma: 1.0 },
            seed: 0,
        }
    }
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n == 0 || self.m == 0 || self.s == 0 || self.h == 0 {
            return bad(format!("dimensions must be positive: {self:?}"));
        }
        if self.h < self.n.min(self.m) {
            return bad(format!("h = {} is below min(n, m) = {}", self.h, self.n.min(self.m)));
        }
        if self.s < self.n {
            return bad(format!("s = {} samples cannot give full-rank X with n = {}", self.s, self.n));
        }
        if let InitScheme::ScaledNormal { p } = self.init {
            if !(p > 0.0 && p.is_finite()) {
                return bad(format!("init exponent p = {p} must be positive"));
            }
        }
        let ok = match self.data {
            DataScheme::OrthogonalTeacher { sigma } => sigma >= 0.0 && sigma.is_finite(),
            DataScheme::OrthogonalTheta { noise } => noise >= 0.0 && noise.is_finite(),
            DataScheme::SpectrumBand { lo, hi, noise } => {
                lo > 0.0 && lo <= hi && hi.is_finite() && noise >= 0.0 && noise.is_finite()
            }
        };
        if !ok {
            return bad(format!("invalid data scheme {:?}", self.data));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: ProblemSpec,
    pub loss: SquaredLoss,
    pub w1_0: Matrix,
    pub w2_0: Matrix,
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    // Filled row by row so the draw order does not depend on storage order.
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = StandardNormal.sample(rng);
            out[(i, j)] = std * z;
        }
    }
    out
}

/// `rows×cols` matrix with orthonormal columns (`rows ≥ cols`): the thin `Q`
/// of a Gaussian matrix, with signs fixed so that `R` has a positive diagonal.
pub fn orthonormal_columns<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let qr = gaussian_matrix(rng, rows, cols, 1.0).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn gen_problem(spec: &ProblemSpec) -> Result<Problem> {
    spec.validate()?;
    let ProblemSpec { n, m, s, h, .. } = *spec;
    let mut data_rng = stream_rng(spec.seed, DATA_STREAM);
    let mut init_rng = stream_rng(spec.seed, INIT_STREAM);
    let mut noise_rng = stream_rng(spec.seed, NOISE_STREAM);

    let init_std = match spec.init {
        InitScheme::StdNormal => 1.0,
        InitScheme::ScaledNormal { p } => (h as f64).powf(-p),
    };
    let w1_0 = gaussian_matrix(&mut init_rng, n, h, init_std);
    let w2_0 = gaussian_matrix(&mut init_rng, m, h, init_std);

    let (x, y) = match spec.data {
        DataScheme::OrthogonalTeacher { sigma } => {
            let x = orthonormal_columns(&mut data_rng, s, n);
            let eps = gaussian_matrix(&mut noise_rng, s, m, 1.0);
            let y = &x * (&w1_0 * w2_0.transpose()) + eps * (sigma * sigma);
            (x, y)
        }
        DataScheme::OrthogonalTheta { noise } => {
            let x = orthonormal_columns(&mut data_rng, s, n);
            let theta = gaussian_matrix(&mut data_rng, n, m, noise.sqrt());
            let y = &x * theta + gaussian_matrix(&mut noise_rng, s, m, noise.sqrt());
            (x, y)
        }
        DataScheme::SpectrumBand { lo, hi, noise } => {
            let u = orthonormal_columns(&mut data_rng, s, n);
            let v = orthonormal_columns(&mut data_rng, n, n);
            let band = Uniform::new_inclusive(lo, hi)
                .map_err(|e| Error::InvalidConfig(format!("singular value band: {e}")))?;
            let sv: Vec<f64> = (0..n).map(|_| band.sample(&mut data_rng)).collect();
            let x = u * Matrix::from_diagonal(&nalgebra::DVector::from_vec(sv)) * v;
            let y = &x * (&w1_0 * w2_0.transpose()) + gaussian_matrix(&mut noise_rng, s, m, noise.sqrt());
            (x, y)
        }
    };
    let loss = SquaredLoss::new(x, y)?;
    Ok(Problem { spec: *spec, loss, w1_0, w2_0 })
}
