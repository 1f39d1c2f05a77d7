//! Gaussian approximation to the latent background given a mass hypothesis,
//! and the resulting approximate marginal posterior of the mass.
//!
//! The latent vector is written `psi = mean + B z` with `B B^T = Sigma` and
//! `z ~ N(0, I)`. Newton iterations in `z` are affine-equivalent to Newton
//! iterations in `psi` but avoid forming `Sigma^{-1}`, which is badly
//! conditioned for smooth kernels. A truncated eigenbasis keeps scans cheap.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::kde::weighted_kde2_at_samples;
use crate::model::{signal_bin_integrals, BinnedSpectrum, CountData, MassHypothesis, Particle, Priors, SignalTemplate};
use crate::{Error, Result};

const PSI_CLAMP: f64 = 700.0;
const MAX_HALVINGS: usize = 10;

/// Local quadratic surrogate `a + b psi' - c psi'^2` of each bin's log
/// likelihood term `g(psi) = -exp(psi) - s + y log(exp(psi) + s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionTerms {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    /// Set when some `|psi|` exceeded the overflow guard and was clamped.
    pub clamped: bool,
}

/// `(g, g', g'')` for one bin, without the `log y!` constant.
fn bin_terms(psi: f64, y: f64, s: f64) -> (f64, f64, f64) {
    let e = psi.exp();
    if y == 0.0 {
        return (-e - s, -e, -e);
    }
    if s <= 0.0 {
        return (-e + y * psi, -e + y, -e);
    }
    let ls = s.ln();
    // r = e / (e + s), computed on the side that cannot overflow
    let (log_sum, r) = if psi > ls {
        let t = (ls - psi).exp();
        (psi + t.ln_1p(), 1.0 / (1.0 + t))
    } else {
        let t = (psi - ls).exp();
        (ls + t.ln_1p(), t / (1.0 + t))
    };
    (-e - s + y * log_sum, -e + y * r, -e + y * r * (1.0 - r))
}

pub fn expansion_terms(psi: &[f64], counts: &[u64], s: &[f64]) -> Result<ExpansionTerms> {
    if psi.len() != counts.len() || psi.len() != s.len() {
        return Err(Error::usage("expansion terms need equal-length psi, counts and signal"));
    }
    let n = psi.len();
    let mut out = ExpansionTerms { a: vec![0.0; n], b: vec![0.0; n], c: vec![0.0; n], clamped: false };
    for i in 0..n {
        let mut p = psi[i];
        if p.is_nan() {
            return Err(Error::domain("psi contains NaN"));
        }
        if p.abs() > PSI_CLAMP {
            p = p.clamp(-PSI_CLAMP, PSI_CLAMP);
            out.clamped = true;
        }
        let (g, g1, g2) = bin_terms(p, counts[i] as f64, s[i]);
        out.c[i] = -0.5 * g2;
        out.b[i] = g1 - p * g2;
        out.a[i] = g - g1 * p + 0.5 * g2 * p * p;
    }
    Ok(out)
}

/// Gaussian approximation at the conditional posterior mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceResult {
    pub mode_psi: Vec<f64>,
    /// `Sigma^{-1} + diag(-g'')` at the mode.
    pub precision: DMatrix<f64>,
    /// `log p(y | psi*) + log N(psi*; mean, Sigma) - log N(psi*; psi*, precision^{-1})`,
    /// omitting the `log y!` constant.
    pub log_marginal_unnorm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Prior `N(mean, B B^T)` on the latent log background.
#[derive(Debug, Clone)]
pub struct LatentGaussian {
    mean: Vec<f64>,
    basis: DMatrix<f64>,
}

/// Converged (or abandoned) Newton iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFit {
    pub z: Vec<f64>,
    pub psi: Vec<f64>,
    /// Log of `int p(y | psi) N(psi; mean, Sigma) dpsi` under the Gaussian approximation,
    /// including the `log y!` constant.
    pub log_evidence: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute `psi` change in the final step.
    pub last_step: f64,
}

impl LatentGaussian {
    /// Uses the Cholesky factor when `rank_tol == 0`, otherwise the
    /// eigenvectors whose eigenvalues exceed `rank_tol` times the largest.
    pub fn from_covariance(mean: Vec<f64>, cov: &DMatrix<f64>, rank_tol: f64) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::usage("covariance dimension does not match the mean"));
        }
        if n == 0 {
            return Err(Error::usage("empty latent vector"));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("covariance contains non-finite entries"));
        }
        let basis = if rank_tol <= 0.0 {
            cov.clone()
                .cholesky()
                .ok_or_else(|| Error::numerical("prior covariance is not positive definite"))?
                .l()
        } else {
            let eig = SymmetricEigen::new(cov.clone());
            let top = eig.eigenvalues.max();
            if !(top > 0.0) {
                return Err(Error::numerical("prior covariance has no positive eigenvalue"));
            }
            let mut keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > rank_tol * top).collect();
            keep.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let mut b = DMatrix::zeros(n, keep.len());
            for (col, &k) in keep.iter().enumerate() {
                let scale = eig.eigenvalues[k].sqrt();
                for r in 0..n {
                    b[(r, col)] = eig.eigenvectors[(r, k)] * scale;
                }
            }
            b
        };
        Ok(LatentGaussian { mean, basis })
    }

    /// Prior of `priors.background` at its stored `(eta, sigma2)`.
    pub fn from_priors(priors: &Priors, edges: &[f64], rank_tol: f64) -> Result<Self> {
        let bg = &priors.background;
        bg.validate()?;
        LatentGaussian::from_covariance(bg.prior_mean_vec(edges), &bg.covariance(edges)?, rank_tol)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn psi_of(&self, z: &[f64]) -> Vec<f64> {
        let bz = &self.basis * DVector::from_column_slice(z);
        self.mean.iter().zip(bz.iter()).map(|(m, v)| m + v).collect()
    }

    /// Least-squares whitened coordinates of `psi`.
    pub fn z_of(&self, psi: &[f64]) -> Result<Vec<f64>> {
        if psi.len() != self.dim() {
            return Err(Error::usage("psi length does not match the latent dimension"));
        }
        let d = DVector::from_iterator(psi.len(), psi.iter().zip(&self.mean).map(|(p, m)| p - m));
        let z = if self.rank() == self.dim() && is_lower_triangular(&self.basis) {
            self.basis
                .solve_lower_triangular(&d)
                .ok_or_else(|| Error::numerical("singular latent basis"))?
        } else {
            // orthogonal columns: B^T B is diagonal
            let btd = self.basis.tr_mul(&d);
            DVector::from_iterator(
                self.rank(),
                (0..self.rank()).map(|k| btd[k] / self.basis.column(k).norm_squared()),
            )
        };
        Ok(z.iter().copied().collect())
    }

    fn objective(&self, data: &CountData, s: &[f64], z: &[f64]) -> (f64, Vec<f64>, bool) {
        let psi = self.psi_of(z);
        let mut clamped = false;
        let mut acc = -data.log_factorial_sum();
        for ((&p, &y), &si) in psi.iter().zip(data.values()).zip(s) {
            if p.abs() > PSI_CLAMP {
                clamped = true;
            }
            acc += bin_terms(p.clamp(-PSI_CLAMP, PSI_CLAMP), y, si).0;
        }
        acc -= 0.5 * z.iter().map(|v| v * v).sum::<f64>();
        (acc, psi, clamped)
    }

    /// `I + B^T diag(d) B`.
    fn hessian(&self, d: &[f64]) -> DMatrix<f64> {
        let mut w = self.basis.clone();
        for (r, &dr) in d.iter().enumerate() {
            let sq = dr.max(0.0).sqrt();
            w.row_mut(r).scale_mut(sq);
        }
        let mut h = w.tr_mul(&w);
        // negative curvature enters with a minus sign
        if d.iter().any(|v| *v < 0.0) {
            let mut neg = self.basis.clone();
            for (r, &dr) in d.iter().enumerate() {
                let sq = (-dr).max(0.0).sqrt();
                neg.row_mut(r).scale_mut(sq);
            }
            h -= neg.tr_mul(&neg);
        }
        for k in 0..h.nrows() {
            h[(k, k)] += 1.0;
        }
        h
    }

    /// Damped Newton ascent of `log p(y | mean + B z) - |z|^2 / 2`.
    pub fn fit(&self, data: &CountData, s: &[f64], z0: Option<&[f64]>, tol: f64, max_iter: usize) -> Result<LatentFit> {
        if data.len() != self.dim() || s.len() != self.dim() {
            return Err(Error::usage("counts and signal must match the latent dimension"));
        }
        if !(tol > 0.0) {
            return Err(Error::domain("tolerance must be positive"));
        }
        let r = self.rank();
        let mut z = match z0 {
            Some(v) if v.len() == r => v.to_vec(),
            Some(_) => return Err(Error::usage("warm start has the wrong dimension")),
            None => vec![0.0; r],
        };
        let (mut f, mut psi, _) = self.objective(data, s, &z);
        let mut converged = false;
        let mut iterations = 0;
        let mut last_step = f64::INFINITY;
        while iterations < max_iter {
            iterations += 1;
            let mut g1 = vec![0.0; psi.len()];
            let mut curv = vec![0.0; psi.len()];
            for i in 0..psi.len() {
                let (_, a, b) = bin_terms(psi[i].clamp(-PSI_CLAMP, PSI_CLAMP), data.values()[i], s[i]);
                g1[i] = a;
                curv[i] = (-b).max(0.0);
            }
            let grad = self.basis.tr_mul(&DVector::from_vec(g1)) - DVector::from_column_slice(&z);
            let h = self.hessian(&curv);
            let chol = h.cholesky().ok_or_else(|| Error::numerical("Newton system is singular"))?;
            let step = chol.solve(&grad);
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
                let (ft, pt, _) = self.objective(data, s, &trial);
                if ft.is_finite() && ft >= f - 1e-12 * f.abs().max(1.0) {
                    accepted = Some((trial, ft, pt));
                    break;
                }
                t *= 0.5;
            }
            let (trial, ft, pt) = match accepted {
                Some(v) => v,
                None => {
                    let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
                    let (ft, pt, _) = self.objective(data, s, &trial);
                    if !ft.is_finite() {
                        break;
                    }
                    (trial, ft, pt)
                }
            };
            last_step = pt.iter().zip(&psi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            z = trial;
            f = ft;
            psi = pt;
            if last_step < tol {
                converged = true;
                break;
            }
        }
        let log_evidence = f - 0.5 * self.log_det_hessian(data, s, &psi)?;
        Ok(LatentFit { z, psi, log_evidence, iterations, converged, last_step })
    }

    fn curvature(data: &CountData, s: &[f64], psi: &[f64]) -> Vec<f64> {
        psi.iter()
            .zip(data.values())
            .zip(s)
            .map(|((&p, &y), &si)| -bin_terms(p.clamp(-PSI_CLAMP, PSI_CLAMP), y, si).2)
            .collect()
    }

    fn log_det_hessian(&self, data: &CountData, s: &[f64], psi: &[f64]) -> Result<f64> {
        let d = Self::curvature(data, s, psi);
        let chol = match self.hessian(&d).cholesky() {
            Some(c) => c,
            None => {
                let clamped: Vec<f64> = d.iter().map(|v| v.max(0.0)).collect();
                self.hessian(&clamped)
                    .cholesky()
                    .ok_or_else(|| Error::numerical("posterior Hessian is singular"))?
            }
        };
        Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    }
}

fn is_lower_triangular(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (i + 1..m.ncols()).all(|j| m[(i, j)] == 0.0))
}

/// Newton mode and Gaussian approximation of `psi | y` under `N(prior_mean_vec, prior_cov)`.
pub fn gaussian_approx(
    counts: &[u64],
    s: &[f64],
    prior_mean_vec: &[f64],
    prior_cov: &DMatrix<f64>,
    psi0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<LaplaceResult> {
    let n = prior_mean_vec.len();
    if counts.len() != n || s.len() != n || psi0.len() != n {
        return Err(Error::usage("gaussian_approx inputs must share one length"));
    }
    let latent = LatentGaussian::from_covariance(prior_mean_vec.to_vec(), prior_cov, 0.0)?;
    let data = CountData::new(counts);
    let z0 = latent.z_of(psi0)?;
    let fit = latent.fit(&data, s, Some(&z0), tol, max_iter)?;
    let inv = prior_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("prior covariance is not positive definite"))?
        .inverse();
    let mut precision = (&inv + inv.transpose()) * 0.5;
    for (i, d) in LatentGaussian::curvature(&data, s, &fit.psi).iter().enumerate() {
        precision[(i, i)] += d;
    }
    Ok(LaplaceResult {
        mode_psi: fit.psi,
        precision,
        log_marginal_unnorm: fit.log_evidence + data.log_factorial_sum(),
        iterations: fit.iterations,
        converged: fit.converged,
    })
}

/// Settings for mass-marginal evaluations. The background hyperparameters
/// are those stored in `priors.background`; set them to the MAP estimates
/// with [`crate::GpBackgroundPrior::with_hyper`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaplaceConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Relative eigenvalue cutoff for the latent basis; 0 keeps full rank.
    pub rank_tol: f64,
    /// Signal-rate scale held fixed during the scan.
    pub mu: f64,
    /// Spacing of the default scan grid.
    pub grid_spacing: f64,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        LaplaceConfig { tol: 1e-8, max_iter: 100, rank_tol: 1e-7, mu: 1.0, grid_spacing: 0.25 }
    }
}

/// Interior grid `lower + k h` strictly inside `(lower, upper)`.
pub fn default_mass_grid(lower: f64, upper: f64, spacing: f64) -> Vec<f64> {
    let n = ((upper - lower) / spacing).round() as usize;
    (1..n).map(|k| lower + k as f64 * spacing).filter(|m| *m < upper).collect()
}

/// Normalized approximate mass posterior on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassScan {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub p_absent: f64,
    pub log_marginal_absent: f64,
    pub log_marginal: Vec<f64>,
    /// Log of the normalizing constant of `exp(log_marginal)`.
    pub log_normalizer: f64,
    pub converged: bool,
}

impl MassScan {
    /// Trapezoid integral of the density, constant beyond the end nodes.
    pub fn continuous_mass(&self, lower: f64, upper: f64) -> f64 {
        integrate_with_ends(&self.grid, &self.density, lower, upper)
    }

    /// Grid point of highest density.
    pub fn mode(&self) -> f64 {
        let mut best = 0;
        for (k, d) in self.density.iter().enumerate() {
            if *d > self.density[best] {
                best = k;
            }
        }
        self.grid[best]
    }
}

fn integrate_with_ends(grid: &[f64], values: &[f64], lower: f64, upper: f64) -> f64 {
    let n = grid.len();
    let mut acc = (grid[0] - lower) * values[0] + (upper - grid[n - 1]) * values[n - 1];
    for k in 1..n {
        acc += 0.5 * (grid[k] - grid[k - 1]) * (values[k] + values[k - 1]);
    }
    acc
}

/// Reusable scan over a fixed binning, template, prior and grid.
#[derive(Debug, Clone)]
pub struct MassScanner {
    edges: Vec<f64>,
    priors: Priors,
    template: SignalTemplate,
    latent: LatentGaussian,
    grid: Vec<f64>,
    signals: Vec<Vec<f64>>,
    cfg: LaplaceConfig,
}

impl MassScanner {
    pub fn new(edges: &[f64], template: &SignalTemplate, priors: &Priors, grid: &[f64], cfg: LaplaceConfig) -> Result<Self> {
        crate::model::validate_edges(edges)?;
        let latent = LatentGaussian::from_priors(priors, edges, cfg.rank_tol)?;
        MassScanner::with_latent(edges, template, priors, grid, cfg, latent)
    }

    /// As [`MassScanner::new`] with an explicit Gaussian for `psi` in place
    /// of the GP prior; `priors.background` is then unused.
    pub fn with_latent(
        edges: &[f64],
        template: &SignalTemplate,
        priors: &Priors,
        grid: &[f64],
        cfg: LaplaceConfig,
        latent: LatentGaussian,
    ) -> Result<Self> {
        crate::model::validate_edges(edges)?;
        if latent.dim() + 1 != edges.len() {
            return Err(Error::usage("latent dimension does not match the binning"));
        }
        let (lo, hi) = (priors.mass.lower, priors.mass.upper);
        if grid.len() < 2 {
            return Err(Error::usage("mass grid needs at least two points"));
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::usage("mass grid must be strictly increasing"));
        }
        if !(grid[0] > lo && grid[grid.len() - 1] < hi) {
            return Err(Error::domain("mass grid must lie strictly inside the mass window"));
        }
        if !(cfg.mu >= 0.0 && cfg.mu.is_finite()) {
            return Err(Error::domain("signal scale must be non-negative"));
        }
        let signals = grid
            .iter()
            .map(|&m| {
                signal_bin_integrals(MassHypothesis::Present(m), template, edges)
                    .into_iter()
                    .map(|v| cfg.mu * v)
                    .collect()
            })
            .collect();
        Ok(MassScanner {
            edges: edges.to_vec(),
            priors: priors.clone(),
            template: template.clone(),
            latent,
            grid: grid.to_vec(),
            signals,
            cfg,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn latent(&self) -> &LatentGaussian {
        &self.latent
    }

    fn signal_for(&self, hyp: MassHypothesis) -> Vec<f64> {
        signal_bin_integrals(hyp, &self.template, &self.edges).into_iter().map(|v| self.cfg.mu * v).collect()
    }

    fn fit(&self, data: &CountData, s: &[f64], warm: Option<&[f64]>) -> Result<LatentFit> {
        self.latent.fit(data, s, warm, self.cfg.tol, self.cfg.max_iter)
    }

    /// Unnormalized log posterior of `hyp` (log probability for the atom,
    /// log density for a mass).
    pub fn log_marginal(&self, counts: &[u64], hyp: MassHypothesis) -> Result<(f64, bool)> {
        let data = CountData::new(counts);
        let fit = self.fit(&data, &self.signal_for(hyp), None)?;
        Ok((self.priors.mass.log_density(hyp) + fit.log_evidence, fit.converged))
    }

    /// Posterior density at an arbitrary mass, normalized by `scan`.
    pub fn density_at(&self, counts: &[u64], m: f64, scan: &MassScan) -> Result<f64> {
        let (lm, _) = self.log_marginal(counts, MassHypothesis::Present(m))?;
        Ok((lm - scan.log_normalizer).exp())
    }

    pub fn scan(&self, counts: &[u64]) -> Result<MassScan> {
        if counts.len() != self.latent.dim() {
            return Err(Error::usage("counts do not match the scan binning"));
        }
        let data = CountData::new(counts);
        let zero = vec![0.0; counts.len()];
        let absent = self.fit(&data, &zero, None)?;
        let mut converged = absent.converged;
        let log_absent = self.priors.mass.log_density(MassHypothesis::Absent) + absent.log_evidence;
        let mut warm = absent.z.clone();
        let mut log_marginal = Vec::with_capacity(self.grid.len());
        for (k, s) in self.signals.iter().enumerate() {
            let fit = self.fit(&data, s, Some(&warm))?;
            converged &= fit.converged;
            log_marginal.push(self.priors.mass.log_density(MassHypothesis::Present(self.grid[k])) + fit.log_evidence);
            warm = fit.z;
        }
        normalize_scan(self.grid.clone(), log_absent, log_marginal, self.priors.mass.lower, self.priors.mass.upper, converged)
    }
}

fn normalize_scan(
    grid: Vec<f64>,
    log_absent: f64,
    log_marginal: Vec<f64>,
    lower: f64,
    upper: f64,
    converged: bool,
) -> Result<MassScan> {
    let top = log_marginal.iter().copied().fold(log_absent, f64::max);
    if !top.is_finite() {
        return Err(Error::numerical("every hypothesis has zero approximate posterior mass"));
    }
    let rel: Vec<f64> = log_marginal.iter().map(|l| (l - top).exp()).collect();
    let atom = (log_absent - top).exp();
    let z = atom + integrate_with_ends(&grid, &rel, lower, upper);
    let density = rel.iter().map(|v| v / z).collect();
    Ok(MassScan {
        grid,
        density,
        p_absent: atom / z,
        log_marginal_absent: log_absent,
        log_marginal,
        log_normalizer: top + z.ln(),
        converged,
    })
}

/// Unnormalized log marginal posterior of one mass hypothesis with the
/// background integrated out by the Laplace approximation.
pub fn log_marginal_mass(
    hyp: MassHypothesis,
    data: &BinnedSpectrum,
    template: &SignalTemplate,
    priors: &Priors,
    cfg: &LaplaceConfig,
) -> Result<f64> {
    if let MassHypothesis::Present(m) = hyp {
        MassHypothesis::present_in(m, priors.mass.lower, priors.mass.upper)?;
    }
    let latent = LatentGaussian::from_priors(priors, data.edges(), cfg.rank_tol)?;
    let s: Vec<f64> = signal_bin_integrals(hyp, template, data.edges()).into_iter().map(|v| cfg.mu * v).collect();
    let fit = latent.fit(&CountData::new(data.counts()), &s, None, cfg.tol, cfg.max_iter)?;
    if !fit.converged {
        return Err(Error::numerical(format!(
            "Laplace iteration did not converge in {} steps (last step {:.3e})",
            fit.iterations, fit.last_step
        )));
    }
    Ok(priors.mass.log_density(hyp) + fit.log_evidence)
}

/// Normalized approximate posterior over `Absent` and the masses in `grid`.
pub fn mass_posterior_scan(
    data: &BinnedSpectrum,
    template: &SignalTemplate,
    priors: &Priors,
    grid: &[f64],
    cfg: &LaplaceConfig,
) -> Result<MassScan> {
    MassScanner::new(data.edges(), template, priors, grid, *cfg)?.scan(data.counts())
}

/// Weighted 2-D KDE mode of `(log eta, log sigma2)` over the ensemble.
pub fn map_hyperparameters(particles: &[Particle], weights: &[f64]) -> Result<(f64, f64)> {
    if particles.is_empty() || particles.len() != weights.len() {
        return Err(Error::usage("need a non-empty ensemble with one weight per particle"));
    }
    let xs: Vec<f64> = particles.iter().map(|p| p.eta.ln()).collect();
    let ys: Vec<f64> = particles.iter().map(|p| p.sigma2.ln()).collect();
    if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
        return Err(Error::domain("hyperparameters must be positive and finite"));
    }
    let dens = weighted_kde2_at_samples(&xs, &ys, weights);
    let mut best = 0;
    for i in 0..dens.len() {
        if weights[i] > 0.0 && (weights[best] <= 0.0 || dens[i] > dens[best]) {
            best = i;
        }
    }
    Ok((particles[best].eta, particles[best].sigma2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{log_likelihood, GpBackgroundPrior, MassPrior};

    #[test]
    fn hand_evaluated_terms() {
        let t = expansion_terms(&[0.0], &[0], &[0.0]).unwrap();
        assert_eq!((t.a[0], t.b[0], t.c[0]), (-1.0, -1.0, 0.5));
        assert!(!t.clamped);
    }

    #[test]
    fn zero_count_curvature_is_half_intensity() {
        let t = expansion_terms(&[1.3], &[0], &[2.0]).unwrap();
        assert!((t.c[0] - 0.5 * 1.3f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn extreme_psi_is_clamped_and_flagged() {
        let t = expansion_terms(&[800.0, -900.0], &[1, 1], &[0.0, 1.0]).unwrap();
        assert!(t.clamped);
        assert!(t.a.iter().chain(&t.b).chain(&t.c).all(|v| !v.is_nan()));
    }

    #[test]
    fn one_bin_flat_prior_recovers_poisson_mle() {
        let cov = DMatrix::from_element(1, 1, 1e8);
        let r = gaussian_approx(&[5], &[0.0], &[0.0], &cov, &[0.0], 1e-10, 200).unwrap();
        assert!(r.converged);
        assert!((r.mode_psi[0] - 5f64.ln()).abs() < 1e-4);
    }

    #[test]
    fn evidence_matches_direct_one_bin_quadrature() {
        let (y, s, m, v) = (12u64, 3.0, 2.0, 0.3);
        let cov = DMatrix::from_element(1, 1, v);
        let r = gaussian_approx(&[y], &[s], &[m], &cov, &[m], 1e-12, 100).unwrap();
        // log of int p(y|psi) N(psi; m, v) dpsi without log y!
        let h = 1e-3;
        let mut acc = 0.0;
        for k in -8000..=8000 {
            let p = m + k as f64 * h;
            let ll = log_likelihood(&[y], &[p], &[s], 1.0).unwrap() + ln_factorial(y);
            let lp = -0.5 * (p - m).powi(2) / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
            acc += (ll + lp).exp() * h;
        }
        // Laplace error is O(1/y) in the log
        assert!((r.log_marginal_unnorm - acc.ln()).abs() < 0.02);
    }

    fn ln_factorial(y: u64) -> f64 {
        (1..=y).map(|k| (k as f64).ln()).sum()
    }

    #[test]
    fn truncated_basis_agrees_with_full_rank() {
        let edges = BinnedSpectrum::uniform_edges(100.0, 140.0, 40);
        let priors = Priors {
            background: GpBackgroundPrior::new([5.0, 4.5, 4.0, 3.6, 3.3]).with_hyper(8.0, 0.05),
            mass: MassPrior::new(0.5, 100.0, 140.0).unwrap(),
            cross_section: Default::default(),
        };
        let full = LatentGaussian::from_priors(&priors, &edges, 0.0).unwrap();
        let cut = LatentGaussian::from_priors(&priors, &edges, 1e-7).unwrap();
        assert!(cut.rank() < full.rank());
        let counts: Vec<u64> = full.mean().iter().map(|m| (m.exp() * 1.1).round() as u64).collect();
        let data = CountData::new(&counts);
        let s = vec![0.0; 40];
        let a = full.fit(&data, &s, None, 1e-9, 100).unwrap();
        let b = cut.fit(&data, &s, None, 1e-9, 100).unwrap();
        assert!(a.converged && b.converged);
        assert!((a.log_evidence - b.log_evidence).abs() < 1e-3);
        for (x, y) in a.psi.iter().zip(&b.psi) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_template_gives_prior_atom() {
        let edges = BinnedSpectrum::uniform_edges(100.0, 120.0, 20);
        let priors = Priors {
            background: GpBackgroundPrior::new([4.0; 5]).with_hyper(5.0, 0.1),
            mass: MassPrior::new(0.5, 100.0, 120.0).unwrap(),
            cross_section: Default::default(),
        };
        let spec = BinnedSpectrum::new(edges, vec![50; 20]).unwrap();
        let t = SignalTemplate::constant(0.0, 1.0).unwrap();
        let grid = default_mass_grid(100.0, 120.0, 0.5);
        let scan = mass_posterior_scan(&spec, &t, &priors, &grid, &LaplaceConfig::default()).unwrap();
        assert!((scan.p_absent - 0.5).abs() < 1e-6);
        let total = scan.p_absent + scan.continuous_mass(100.0, 120.0);
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn density_at_grid_point_matches_scan() {
        let edges = BinnedSpectrum::uniform_edges(100.0, 120.0, 20);
        let priors = Priors {
            background: GpBackgroundPrior::new([4.0; 5]).with_hyper(5.0, 0.1),
            mass: MassPrior::new(0.5, 100.0, 120.0).unwrap(),
            cross_section: Default::default(),
        };
        let mut counts = vec![55u64; 20];
        counts[9] = 90;
        let t = SignalTemplate::constant(30.0, 1.0).unwrap();
        let grid = default_mass_grid(100.0, 120.0, 0.5);
        let scanner = MassScanner::new(&edges, &t, &priors, &grid, LaplaceConfig::default()).unwrap();
        let scan = scanner.scan(&counts).unwrap();
        let k = 18;
        let d = scanner.density_at(&counts, grid[k], &scan).unwrap();
        assert!((d - scan.density[k]).abs() < 1e-6 * scan.density[k].max(1e-12));
        assert!(scan.p_absent < 0.5);
        assert!((scan.mode() - 109.5).abs() <= 1.0);
    }
}
