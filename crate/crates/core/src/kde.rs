//! Weighted kernel density estimates and piecewise-linear grid densities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Kish effective sample size of unnormalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

pub fn weighted_mean_var(values: &[f64], weights: &[f64]) -> (f64, f64) {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values.iter().zip(weights).map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>() / total;
    (mean, var)
}

/// Weighted quantile by inverting the step empirical distribution function.
pub fn weighted_quantile(values: &[f64], weights: &[f64], p: f64) -> Option<f64> {
    let mut pairs: Vec<(f64, f64)> = values
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(v, w)| (*v, *w))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let target = p.clamp(0.0, 1.0) * total;
    let mut acc = 0.0;
    for &(v, w) in &pairs {
        acc += w;
        if acc >= target {
            return Some(v);
        }
    }
    pairs.last().map(|p| p.0)
}

/// Silverman's rule of thumb, `0.9 min(sd, IQR/1.34) n^(-1/5)`, with the
/// Kish effective size standing in for `n`.
pub fn silverman_bandwidth(values: &[f64], weights: &[f64]) -> f64 {
    let (_, var) = weighted_mean_var(values, weights);
    let sd = var.max(0.0).sqrt();
    let iqr = match (weighted_quantile(values, weights, 0.75), weighted_quantile(values, weights, 0.25)) {
        (Some(a), Some(b)) => a - b,
        _ => 0.0,
    };
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let n = effective_sample_size(weights).max(1.0);
    0.9 * spread * n.powf(-0.2)
}

/// Density tabulated on a grid and interpolated linearly between nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl GridDensity {
    pub fn new(grid: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid.len() != density.len() {
            return Err(Error::usage("grid density needs at least two nodes and matching values"));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain("grid must be strictly increasing"));
        }
        if density.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::domain("density values must be finite and non-negative"));
        }
        Ok(GridDensity { grid, density })
    }

    pub fn lower(&self) -> f64 {
        self.grid[0]
    }

    pub fn upper(&self) -> f64 {
        self.grid[self.grid.len() - 1]
    }

    /// Linear interpolation; zero outside the grid.
    pub fn eval(&self, x: f64) -> f64 {
        if !(x >= self.lower() && x <= self.upper()) {
            return 0.0;
        }
        let k = (self.grid.partition_point(|g| *g <= x).max(1) - 1).min(self.grid.len() - 2);
        let t = (x - self.grid[k]) / (self.grid[k + 1] - self.grid[k]);
        self.density[k] + t * (self.density[k + 1] - self.density[k])
    }

    fn cell_masses(&self) -> Vec<f64> {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(g, d)| 0.5 * (d[0] + d[1]) * (g[1] - g[0]))
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.cell_masses().iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> GridDensity {
        GridDensity { grid: self.grid.clone(), density: self.density.iter().map(|d| d * factor).collect() }
    }

    /// Cumulative mass from the lower end to `x`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lower() {
            return 0.0;
        }
        let mut acc = 0.0;
        for k in 0..self.grid.len() - 1 {
            let (a, b) = (self.grid[k], self.grid[k + 1]);
            if x >= b {
                acc += 0.5 * (self.density[k] + self.density[k + 1]) * (b - a);
            } else {
                let fx = self.eval(x);
                acc += 0.5 * (self.density[k] + fx) * (x - a);
                break;
            }
        }
        acc
    }

    /// Point where the normalized cumulative mass reaches `p`.
    pub fn quantile(&self, p: f64) -> Option<f64> {
        let cells = self.cell_masses();
        let total: f64 = cells.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let target = p.clamp(0.0, 1.0) * total;
        let mut acc = 0.0;
        for (k, &cm) in cells.iter().enumerate() {
            if acc + cm >= target && cm > 0.0 {
                let frac = (target - acc) / cm;
                let s = linear_cell_inverse(self.density[k], self.density[k + 1], frac);
                return Some(self.grid[k] + s * (self.grid[k + 1] - self.grid[k]));
            }
            acc += cm;
        }
        Some(self.upper())
    }

    pub fn argmax(&self) -> f64 {
        let k = self
            .density
            .iter()
            .enumerate()
            .fold(0, |best, (i, d)| if *d > self.density[best] { i } else { best });
        self.grid[k]
    }

    /// Draws from the normalized density.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let cells = self.cell_masses();
        let total: f64 = cells.iter().sum();
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut k = cells.len() - 1;
        for (i, &cm) in cells.iter().enumerate() {
            if acc + cm > target {
                k = i;
                break;
            }
            acc += cm;
        }
        let v: f64 = rng.random();
        let s = linear_cell_inverse(self.density[k], self.density[k + 1], v);
        self.grid[k] + s * (self.grid[k + 1] - self.grid[k])
    }
}

/// Inverse of the normalized cumulative of a linear density on `[0, 1]`
/// running from `a` to `b`.
pub(crate) fn linear_cell_inverse(a: f64, b: f64, v: f64) -> f64 {
    let d = b - a;
    if d.abs() <= 1e-12 * (a.abs() + b.abs()).max(f64::MIN_POSITIVE) {
        return v;
    }
    let disc = (a * a + v * (b * b - a * a)).max(0.0);
    ((disc.sqrt() - a) / d).clamp(0.0, 1.0)
}

/// Weighted Gaussian KDE evaluated on `grid`. Weights need not be normalized;
/// the result integrates (over the real line) to the weight total.
pub fn weighted_kde_on_grid(values: &[f64], weights: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let mut pairs: Vec<(f64, f64)> = values
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(v, w)| (*v, *w))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let norm = 1.0 / (bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let reach = 8.0 * bandwidth;
    grid.iter()
        .map(|&x| {
            let start = pairs.partition_point(|p| p.0 < x - reach);
            let mut acc = 0.0;
            for &(v, w) in &pairs[start..] {
                if v > x + reach {
                    break;
                }
                let u = (x - v) / bandwidth;
                acc += w * (-0.5 * u * u).exp();
            }
            acc * norm
        })
        .collect()
}

/// Uniform grid of `n` nodes spanning `[lower, upper]`.
pub fn uniform_grid(lower: f64, upper: f64, n: usize) -> Vec<f64> {
    let h = (upper - lower) / (n - 1) as f64;
    (0..n).map(|i| if i + 1 == n { upper } else { lower + h * i as f64 }).collect()
}

/// Product-Gaussian KDE evaluated at each sample point, with Scott's rule
/// bandwidths per coordinate. Returns the densities in input order.
pub fn weighted_kde2_at_samples(xs: &[f64], ys: &[f64], weights: &[f64]) -> Vec<f64> {
    let n_eff = effective_sample_size(weights).max(1.0);
    let factor = n_eff.powf(-1.0 / 6.0);
    let hx = weighted_mean_var(xs, weights).1.max(0.0).sqrt() * factor;
    let hy = weighted_mean_var(ys, weights).1.max(0.0).sqrt() * factor;
    let hx = if hx > 0.0 { hx } else { 1.0 };
    let hy = if hy > 0.0 { hy } else { 1.0 };
    let total: f64 = weights.iter().sum();
    (0..xs.len())
        .map(|i| {
            let mut acc = 0.0;
            for j in 0..xs.len() {
                let u = (xs[i] - xs[j]) / hx;
                let v = (ys[i] - ys[j]) / hy;
                acc += weights[j] * (-0.5 * (u * u + v * v)).exp();
            }
            acc / (total * hx * hy * 2.0 * std::f64::consts::PI)
        })
        .collect()
}
