//! Squared-exponential covariance and its Cholesky factor.
//!
//! Bin midpoints of a uniform binning give a Toeplitz correlation matrix,
//! which is factored in O(n²) with the generalized Schur algorithm. Other
//! grids fall back to a dense factorization.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Default diagonal jitter, relative to the variance.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-8;

const MAX_JITTER_ESCALATIONS: usize = 8;

/// Dense covariance `sigma2 * exp(-eta (x_i - x_j)^2) + jitter * 1(i == j)`.
pub fn covariance_matrix(grid: &[f64], eta: f64, sigma2: f64, jitter: f64) -> Result<DMatrix<f64>> {
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("covariance grid contains non-finite values"));
    }
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::domain(format!("eta must be positive and finite, got {eta}")));
    }
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::domain(format!("sigma2 must be positive and finite, got {sigma2}")));
    }
    if !(jitter.is_finite() && jitter >= 0.0) {
        return Err(Error::domain(format!("jitter must be non-negative, got {jitter}")));
    }
    let n = grid.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let d = grid[i] - grid[j];
        let v = sigma2 * (-eta * d * d).exp();
        if i == j {
            v + jitter
        } else {
            v
        }
    }))
}

/// True when consecutive spacings agree to a relative tolerance.
pub fn is_uniform_grid(grid: &[f64]) -> bool {
    if grid.len() < 3 {
        return true;
    }
    let h = grid[1] - grid[0];
    grid.windows(2)
        .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(f64::MIN_POSITIVE))
}

/// Lower Cholesky factor of the unit-variance correlation matrix
/// `exp(-eta (x_i - x_j)^2) + jitter * I`, stored packed by rows.
#[derive(Debug, Clone)]
pub struct KernelFactor {
    n: usize,
    packed: Vec<f64>,
    jitter: f64,
}

impl KernelFactor {
    pub fn correlation(grid: &[f64], eta: f64, relative_jitter: f64) -> Result<Self> {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::domain(format!("eta must be positive and finite, got {eta}")));
        }
        if grid.is_empty() {
            return Err(Error::usage("empty covariance grid"));
        }
        let uniform = is_uniform_grid(grid);
        let mut jitter = relative_jitter.max(0.0);
        for _ in 0..MAX_JITTER_ESCALATIONS {
            let attempt = if uniform {
                let h = if grid.len() > 1 { grid[1] - grid[0] } else { 0.0 };
                let col: Vec<f64> = (0..grid.len())
                    .map(|k| {
                        let d = k as f64 * h;
                        (-eta * d * d).exp() + if k == 0 { jitter } else { 0.0 }
                    })
                    .collect();
                schur_toeplitz(&col)
            } else {
                dense_cholesky(&covariance_matrix(grid, eta, 1.0, jitter)?)
            };
            if let Some(packed) = attempt {
                return Ok(KernelFactor { n: grid.len(), packed, jitter });
            }
            jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
        }
        Err(Error::numerical(format!(
            "correlation matrix not positive definite for eta = {eta} after jitter escalation"
        )))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Relative jitter actually used (after any escalation).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        let start = i * (i + 1) / 2;
        &self.packed[start..start + i + 1]
    }

    /// `out = L z`.
    pub fn mul_vec_into(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.n);
        for (i, o) in out.iter_mut().enumerate().take(self.n) {
            *o = self.row(i).iter().zip(z).map(|(a, b)| a * b).sum();
        }
    }

    pub fn mul_vec(&self, z: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.mul_vec_into(z, &mut out);
        out
    }

    /// Forward substitution, `L^{-1} v`.
    pub fn solve_lower(&self, v: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for i in 0..self.n {
            let row = self.row(i);
            let acc: f64 = row[..i].iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
            x[i] = (v[i] - acc) / row[i];
        }
        x
    }

    /// `log det(L L^T)`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.row(i)[i].ln()).sum::<f64>()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| if j <= i { self.row(i)[j] } else { 0.0 })
    }
}

/// Generalized Schur algorithm for a symmetric positive definite Toeplitz
/// matrix with first column `col`. Returns `None` on breakdown.
fn schur_toeplitz(col: &[f64]) -> Option<Vec<f64>> {
    let n = col.len();
    if !(col[0] > 0.0) {
        return None;
    }
    let s = col[0].sqrt();
    let mut g1: Vec<f64> = col.iter().map(|v| v / s).collect();
    let mut g2 = g1.clone();
    g2[0] = 0.0;
    let mut packed = vec![0.0; n * (n + 1) / 2];
    for k in 0..n {
        for i in k..n {
            packed[i * (i + 1) / 2 + k] = g1[i];
        }
        if k + 1 == n {
            break;
        }
        // shift the first generator down by one position
        for i in (k + 1..n).rev() {
            g1[i] = g1[i - 1];
        }
        let rho = g2[k + 1] / g1[k + 1];
        if !rho.is_finite() || rho.abs() >= 1.0 {
            return None;
        }
        let c = ((1.0 - rho) * (1.0 + rho)).sqrt();
        for i in k + 1..n {
            let a = g1[i];
            let b = g2[i];
            g1[i] = (a - rho * b) / c;
            g2[i] = (b - rho * a) / c;
        }
        if !(g1[k + 1] > 0.0) {
            return None;
        }
    }
    Some(packed)
}

fn dense_cholesky(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    let n = m.nrows();
    let chol = m.clone().cholesky()?;
    let l = chol.l();
    let mut packed = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            packed.push(l[(i, j)]);
        }
    }
    Some(packed)
}
