//! Frequency calibration of the decision thresholds.
//!
//! Discovery: the lower tail of the null distribution of `pi(Absent | y)` is
//! estimated with data simulated under the alternative and reweighted by the
//! Bayes factor. Exclusion: per-mass quantiles of `pi(m | y)` under a signal
//! at `m`, smoothed across masses. A Gross-Vitells look-elsewhere estimate is
//! provided as a frequentist baseline.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::laplace::{default_mass_grid, map_hyperparameters, LaplaceConfig, LatentGaussian, MassScan, MassScanner};
use crate::model::{signal_bin_integrals, MassHypothesis, MassPrior, Priors, SignalTemplate};
use crate::rng::{stream, StreamRng};
use crate::simulate::poisson_draw;
use crate::smc::ParticleEnsemble;
use crate::{Error, Result};

const DISCOVERY_STREAM: u64 = 0xD15C;
const EXCLUSION_STREAM: u64 = 0xE8C1;
const FORWARD_STREAM: u64 = 0xF0A0;

/// Bayes factor of Absent against the alternative implied by a normalized
/// scan, `(p / pi_0) / ((1 - p) / (1 - pi_0))`.
pub fn importance_weight(scan: &MassScan, mass_prior: &MassPrior) -> Result<f64> {
    let p = scan.p_absent;
    let rest = 1.0 - p;
    if !(rest > 0.0) {
        return Err(Error::numerical("posterior is degenerate at Absent; importance weight undefined"));
    }
    Ok((p / mass_prior.p_absent) * ((1.0 - mass_prior.p_absent) / rest))
}

/// Background model under which the importance weights are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightModel {
    /// The analysis GP prior at the fixed hyperparameters.
    #[default]
    Prior,
    /// A Gaussian fitted to the ensemble's `psi`, matching the distribution
    /// the replicate backgrounds are drawn from. Removes the bias of `Prior`
    /// when the background posterior departs from the prior, at the cost of
    /// heavier-tailed weights.
    Ensemble,
}

/// Weighted mean and covariance of `psi` over the ensemble, with a relative
/// diagonal jitter.
pub fn ensemble_gaussian(ensemble: &ParticleEnsemble, rank_tol: f64) -> Result<LatentGaussian> {
    if ensemble.is_empty() {
        return Err(Error::usage("empty background ensemble"));
    }
    let n = ensemble.particles[0].psi.len();
    let w = &ensemble.normalized_weights;
    let total: f64 = w.iter().sum();
    let mut mean = vec![0.0; n];
    for (p, wi) in ensemble.particles.iter().zip(w) {
        for (m, v) in mean.iter_mut().zip(&p.psi) {
            *m += wi * v / total;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(n, n);
    let mut d = vec![0.0; n];
    for (p, wi) in ensemble.particles.iter().zip(w) {
        for k in 0..n {
            d[k] = p.psi[k] - mean[k];
        }
        for a in 0..n {
            let da = wi / total * d[a];
            for b in 0..=a {
                cov[(a, b)] += da * d[b];
            }
        }
    }
    let mut top: f64 = 0.0;
    for a in 0..n {
        for b in 0..a {
            cov[(b, a)] = cov[(a, b)];
        }
        top = top.max(cov[(a, a)]);
    }
    if !(top > 0.0) {
        return Err(Error::numerical("background ensemble has no spread"));
    }
    for a in 0..n {
        cov[(a, a)] += 1e-8 * top;
    }
    LatentGaussian::from_covariance(mean, &cov, rank_tol)
}

/// Settings shared by the calibration routines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub n_mc: usize,
    pub laplace: LaplaceConfig,
    /// Mass grid of each per-replicate scan; `None` uses the Laplace spacing.
    pub scan_grid: Option<Vec<f64>>,
    /// Background hyperparameters held fixed in the scans; `None` takes the
    /// weighted KDE mode of the ensemble.
    pub hyper: Option<(f64, f64)>,
    /// Signal scale used when simulating replicates.
    pub mu: f64,
    pub weights: WeightModel,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { n_mc: 5000, laplace: LaplaceConfig::default(), scan_grid: None, hyper: None, mu: 1.0, weights: WeightModel::Prior }
    }
}

/// Calibrated thresholds with their Monte Carlo provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub q_absent: f64,
    pub alpha1: f64,
    /// Estimated tail probability at `q_absent`.
    pub tail_estimate: f64,
    pub mc_stderr: f64,
    pub n_samples: usize,
    pub exclusion_grid: Vec<f64>,
    pub exclusion_thresholds: Vec<f64>,
    pub smoothing_bandwidth: f64,
    pub seed: u64,
    pub hyper: (f64, f64),
    /// `(p_absent_i, W_i)` per replicate, in simulation order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<(f64, f64)>,
}

/// Resamples per-bin backgrounds `exp(psi)` from a weighted ensemble.
#[derive(Debug, Clone)]
pub struct BackgroundSampler {
    backgrounds: Vec<Vec<f64>>,
    cumulative: Vec<f64>,
}

impl BackgroundSampler {
    pub fn new(ensemble: &ParticleEnsemble) -> Result<Self> {
        if ensemble.is_empty() {
            return Err(Error::usage("empty background ensemble"));
        }
        let backgrounds: Vec<Vec<f64>> =
            ensemble.particles.iter().map(|p| p.psi.iter().map(|v| v.exp()).collect()).collect();
        let mut acc = 0.0;
        let cumulative = ensemble
            .normalized_weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(BackgroundSampler { backgrounds, cumulative })
    }

    pub fn n_bins(&self) -> usize {
        self.backgrounds[0].len()
    }

    pub fn draw<'a>(&'a self, rng: &mut StreamRng) -> &'a [f64] {
        let total = self.cumulative[self.cumulative.len() - 1];
        let u = rng.random::<f64>() * total;
        let k = self.cumulative.partition_point(|c| *c <= u).min(self.backgrounds.len() - 1);
        &self.backgrounds[k]
    }
}

/// Shared pieces of every calibration run.
struct Setup {
    edges: Vec<f64>,
    priors: Priors,
    template: SignalTemplate,
    scanner: MassScanner,
    /// Scanner for the importance weights when it differs from `scanner`.
    weight_scanner: Option<MassScanner>,
    backgrounds: BackgroundSampler,
    hyper: (f64, f64),
    mu: f64,
}

impl Setup {
    fn new(
        background: &ParticleEnsemble,
        edges: &[f64],
        template: &SignalTemplate,
        priors: &Priors,
        cfg: &CalibrationConfig,
    ) -> Result<Self> {
        let hyper = match cfg.hyper {
            Some(h) => h,
            None => map_hyperparameters(&background.particles, &background.normalized_weights)?,
        };
        let mut fixed = priors.clone();
        fixed.background = priors.background.with_hyper(hyper.0, hyper.1);
        let grid = match &cfg.scan_grid {
            Some(g) => g.clone(),
            None => default_mass_grid(priors.mass.lower, priors.mass.upper, cfg.laplace.grid_spacing),
        };
        let mut laplace = cfg.laplace;
        laplace.mu = cfg.mu;
        let scanner = MassScanner::new(edges, template, &fixed, &grid, laplace)?;
        let weight_scanner = match cfg.weights {
            WeightModel::Prior => None,
            WeightModel::Ensemble => Some(MassScanner::with_latent(
                edges,
                template,
                &fixed,
                &grid,
                laplace,
                ensemble_gaussian(background, laplace.rank_tol)?,
            )?),
        };
        let backgrounds = BackgroundSampler::new(background)?;
        if backgrounds.n_bins() + 1 != edges.len() {
            return Err(Error::usage("background ensemble does not match the binning"));
        }
        if !(cfg.mu >= 0.0 && cfg.mu.is_finite()) {
            return Err(Error::domain("signal scale must be non-negative"));
        }
        Ok(Setup {
            edges: edges.to_vec(),
            priors: fixed,
            template: template.clone(),
            scanner,
            weight_scanner,
            backgrounds,
            hyper,
            mu: cfg.mu,
        })
    }

    fn simulate(&self, hyp: MassHypothesis, rng: &mut StreamRng) -> Vec<u64> {
        let bg = self.backgrounds.draw(rng);
        let s = signal_bin_integrals(hyp, &self.template, &self.edges);
        bg.iter().zip(&s).map(|(b, si)| poisson_draw(b + self.mu * si, rng)).collect()
    }

    fn draw_alternative(&self, rng: &mut StreamRng) -> MassHypothesis {
        let (lo, hi) = (self.priors.mass.lower, self.priors.mass.upper);
        loop {
            let m = lo + (hi - lo) * rng.random::<f64>();
            if m > lo && m < hi {
                return MassHypothesis::Present(m);
            }
        }
    }
}

/// Largest `q` with `(1/N) sum 1(p_i < q) W_i <= alpha`, by sorting and
/// accumulating. Returns `(q, tail_estimate, stderr)`; `q = 1` when the whole
/// sample stays below `alpha`.
pub fn threshold_from_samples(samples: &[(f64, f64)], alpha: f64) -> Result<(f64, f64, f64)> {
    let n = samples.len();
    if n == 0 {
        return Err(Error::usage("no calibration samples"));
    }
    let mut sorted: Vec<(f64, f64)> = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let nf = n as f64;
    let budget = alpha * nf;
    let mut acc = 0.0;
    let mut cut = None;
    for (k, &(_, w)) in sorted.iter().enumerate() {
        acc += w;
        if acc > budget {
            cut = Some(k);
            break;
        }
    }
    let q = match cut {
        Some(0) => {
            let w = sorted[0].1;
            return Err(Error::InsufficientSamples {
                alpha,
                suggested_n_mc: ((w / alpha).ceil() as usize).max(2 * n),
                detail: format!("the smallest simulated posterior probability already carries weight {:.3e}", w / nf),
            });
        }
        Some(k) => sorted[k].0,
        None => 1.0,
    };
    let (est, se) = importance_tail(samples, q);
    Ok((q, est, se))
}

/// Importance estimate of `P(p < q | Absent)` and its standard error.
pub fn importance_tail(samples: &[(f64, f64)], q: f64) -> (f64, f64) {
    let n = samples.len() as f64;
    let vals: Vec<f64> = samples.iter().map(|&(p, w)| if p < q { w } else { 0.0 }).collect();
    let mean = vals.iter().sum::<f64>() / n;
    let var = if n > 1.0 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, (var / n).sqrt())
}

/// Simulates `(p_absent, W)` pairs under the alternative.
pub fn discovery_samples(
    background: &ParticleEnsemble,
    edges: &[f64],
    template: &SignalTemplate,
    priors: &Priors,
    cfg: &CalibrationConfig,
    seed: u64,
) -> Result<(Vec<(f64, f64)>, (f64, f64))> {
    let setup = Setup::new(background, edges, template, priors, cfg)?;
    let samples = (0..cfg.n_mc)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, &[DISCOVERY_STREAM, i as u64]);
            let hyp = setup.draw_alternative(&mut rng);
            let y = setup.simulate(hyp, &mut rng);
            let scan = setup.scanner.scan(&y)?;
            let w = match &setup.weight_scanner {
                Some(ws) => importance_weight(&ws.scan(&y)?, &setup.priors.mass)?,
                None => importance_weight(&scan, &setup.priors.mass)?,
            };
            Ok((scan.p_absent, w))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, setup.hyper))
}

/// Discovery threshold `q_absent` at global type I error `alpha1`.
pub fn calibrate_discovery(
    alpha1: f64,
    background: &ParticleEnsemble,
    edges: &[f64],
    template: &SignalTemplate,
    priors: &Priors,
    cfg: &CalibrationConfig,
    seed: u64,
) -> Result<CalibrationResult> {
    if !(alpha1 > 0.0 && alpha1 <= 1.0) {
        return Err(Error::domain("alpha1 must lie in (0, 1]"));
    }
    if cfg.n_mc < 2 {
        return Err(Error::domain("n_mc must be at least 2"));
    }
    let (samples, hyper) = discovery_samples(background, edges, template, priors, cfg, seed)?;
    let (q, est, se) = threshold_from_samples(&samples, alpha1)?;
    Ok(CalibrationResult {
        q_absent: q,
        alpha1,
        tail_estimate: est,
        mc_stderr: se,
        n_samples: samples.len(),
        exclusion_grid: Vec::new(),
        exclusion_thresholds: Vec::new(),
        smoothing_bandwidth: 0.0,
        seed,
        hyper,
        samples,
    })
}

/// Per-mass exclusion thresholds and their smooth interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionCalibration {
    pub alpha2: f64,
    pub coarse_grid: Vec<f64>,
    pub coarse_thresholds: Vec<f64>,
    pub fine_grid: Vec<f64>,
    pub fine_thresholds: Vec<f64>,
    pub bandwidth: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub hyper: (f64, f64),
}

/// Gaussian-kernel (Nadaraya-Watson) smooth of `(x_j, v_j)` onto `grid`.
pub fn kernel_smooth(x: &[f64], v: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&g| {
            // exponents relative to the nearest node so the largest weight is 1
            let sq: Vec<f64> = x.iter().map(|xj| ((g - xj) / bandwidth).powi(2)).collect();
            let nearest = sq.iter().copied().fold(f64::INFINITY, f64::min);
            let (mut num, mut den) = (0.0, 0.0);
            for (s, vj) in sq.iter().zip(v) {
                let k = (-0.5 * (s - nearest)).exp();
                num += k * vj;
                den += k;
            }
            num / den
        })
        .collect()
}

/// Empirical `alpha`-quantile: midpoint of the `k`-th and `(k+1)`-th order
/// statistics with `k = round(alpha n)`.
pub fn lower_quantile(values: &[f64], alpha: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let k = ((alpha * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n == 1 {
        return v[0];
    }
    0.5 * (v[k - 1] + v[k])
}

/// Posterior densities `pi(m | y)` at the true mass for data simulated with a signal at `m`.
pub fn exclusion_samples(
    m: f64,
    background: &ParticleEnsemble,
    edges: &[f64],
    template: &SignalTemplate,
    priors: &Priors,
    cfg: &CalibrationConfig,
    seed: u64,
    stream_tag: u64,
) -> Result<Vec<f64>> {
    let setup = Setup::new(background, edges, template, priors, cfg)?;
    density_samples(&setup, m, cfg.n_mc, seed, stream_tag)
}

fn density_samples(setup: &Setup, m: f64, n: usize, seed: u64, tag: u64) -> Result<Vec<f64>> {
    let hyp = MassHypothesis::present_in(m, setup.priors.mass.lower, setup.priors.mass.upper)?;
    (0..n)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(seed, &[tag, m.to_bits(), r as u64]);
            let y = setup.simulate(hyp, &mut rng);
            let scan = setup.scanner.scan(&y)?;
            setup.scanner.density_at(&y, m, &scan)
        })
        .collect()
}

/// Exclusion thresholds `q(m)` with `P(pi(m | y) < q(m) | m) = alpha2` on
/// `coarse_grid`, smoothed onto `fine_grid`.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_exclusion(
    alpha2: f64,
    coarse_grid: &[f64],
    fine_grid: &[f64],
    background: &ParticleEnsemble,
    edges: &[f64],
    template: &SignalTemplate,
    priors: &Priors,
    cfg: &CalibrationConfig,
    seed: u64,
    bandwidth: f64,
) -> Result<ExclusionCalibration> {
    if !(alpha2 > 0.0 && alpha2 < 1.0) {
        return Err(Error::domain("alpha2 must lie in (0, 1)"));
    }
    if (cfg.n_mc as f64) * alpha2 < 5.0 {
        return Err(Error::InsufficientSamples {
            alpha: alpha2,
            suggested_n_mc: (5.0 / alpha2).ceil() as usize,
            detail: "fewer than five replicates expected below the quantile".into(),
        });
    }
    if coarse_grid.is_empty() || fine_grid.is_empty() {
        return Err(Error::usage("exclusion grids must be non-empty"));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::domain("smoothing bandwidth must be positive"));
    }
    let setup = Setup::new(background, edges, template, priors, cfg)?;
    let mut coarse = Vec::with_capacity(coarse_grid.len());
    for &m in coarse_grid {
        let d = density_samples(&setup, m, cfg.n_mc, seed, EXCLUSION_STREAM)?;
        coarse.push(lower_quantile(&d, alpha2));
    }
    let fine = kernel_smooth(coarse_grid, &coarse, bandwidth, fine_grid);
    Ok(ExclusionCalibration {
        alpha2,
        coarse_grid: coarse_grid.to_vec(),
        coarse_thresholds: coarse,
        fine_grid: fine_grid.to_vec(),
        fine_thresholds: fine,
        bandwidth,
        n_mc: cfg.n_mc,
        seed,
        hyper: setup.hyper,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardEstimate {
    pub alpha_hat: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Plain Monte Carlo estimate of `P(pi(Absent | y) < q | Absent)` or of
/// `P(pi(m | y) < q | m)`.
pub fn estimate_alpha_forward(
    q: f64,
    hypothesis: MassHypothesis,
    background: &ParticleEnsemble,
    edges: &[f64],
    template: &SignalTemplate,
    priors: &Priors,
    cfg: &CalibrationConfig,
    seed: u64,
) -> Result<ForwardEstimate> {
    let setup = Setup::new(background, edges, template, priors, cfg)?;
    let values: Vec<f64> = match hypothesis {
        MassHypothesis::Absent => (0..cfg.n_mc)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(seed, &[FORWARD_STREAM, i as u64]);
                let y = setup.simulate(MassHypothesis::Absent, &mut rng);
                Ok(setup.scanner.scan(&y)?.p_absent)
            })
            .collect::<Result<_>>()?,
        MassHypothesis::Present(m) => density_samples(&setup, m, cfg.n_mc, seed, FORWARD_STREAM)?,
    };
    Ok(forward_from_values(&values, q))
}

pub fn forward_from_values(values: &[f64], q: f64) -> ForwardEstimate {
    let n = values.len();
    let hits = values.iter().filter(|v| **v < q).count();
    let p = hits as f64 / n.max(1) as f64;
    ForwardEstimate { alpha_hat: p, stderr: (p * (1.0 - p) / n.max(1) as f64).sqrt(), n }
}

/// Gross-Vitells global p-value and its ingredients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalPValue {
    pub global_p: f64,
    pub local_p: f64,
    pub expected_upcrossings: f64,
    pub stderr: f64,
    pub n_null_sims: usize,
}

/// Number of `j` with `v[j-1] <= level < v[j]`.
pub fn count_upcrossings(scan: &[f64], level: f64) -> usize {
    scan.windows(2).filter(|w| w[0] <= level && level < w[1]).count()
}

/// `P(chi2_dof > kappa) + E[N(kappa)]`, with the expected number of
/// upcrossings averaged over null scans produced by `local_stat_scan(seed)`.
pub fn gross_vitells_global_p<F>(
    observed_max: f64,
    dof: u32,
    n_null_sims: usize,
    local_stat_scan: F,
    seed: u64,
) -> Result<GlobalPValue>
where
    F: Fn(u64) -> Vec<f64> + Sync,
{
    if dof < 1 {
        return Err(Error::domain("degrees of freedom must be at least 1"));
    }
    if n_null_sims == 0 {
        return Err(Error::usage("at least one null simulation is required"));
    }
    let chi = ChiSquared::new(dof as f64).map_err(|e| Error::domain(e.to_string()))?;
    let local_p = if observed_max.is_finite() { chi.sf(observed_max.max(0.0)) } else { 0.0 };
    let counts: Vec<f64> = (0..n_null_sims)
        .into_par_iter()
        .map(|i| count_upcrossings(&local_stat_scan(crate::rng::derive_seed(seed, &[i as u64])), observed_max) as f64)
        .collect();
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / n;
    let var = if n > 1.0 { counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(GlobalPValue {
        global_p: local_p + mean,
        local_p,
        expected_upcrossings: mean,
        stderr: (var / n).sqrt(),
        n_null_sims,
    })
}

/// Two-sided likelihood-ratio statistic for a signal scale at each template,
/// with the background known: `2 [l(mu_hat) - l(0)]`.
pub fn lrt_scan(counts: &[u64], background: &[f64], signals: &[Vec<f64>]) -> Vec<f64> {
    signals.iter().map(|s| lrt_statistic(counts, background, s)).collect()
}

fn lrt_statistic(counts: &[u64], background: &[f64], s: &[f64]) -> f64 {
    let ll = |mu: f64| -> f64 {
        counts
            .iter()
            .zip(background)
            .zip(s)
            .map(|((&y, &b), &si)| {
                let g = b + mu * si;
                if g <= 0.0 {
                    return if y > 0 || g < 0.0 { f64::NEG_INFINITY } else { 0.0 };
                }
                y as f64 * g.ln() - g
            })
            .sum()
    };
    // mu must keep every bin mean positive
    let mut mu_min = f64::NEG_INFINITY;
    for (&b, &si) in background.iter().zip(s) {
        if si > 0.0 {
            mu_min = mu_min.max(-b / si);
        }
    }
    let mut mu = 0.0;
    for _ in 0..50 {
        let (mut g1, mut g2) = (0.0, 0.0);
        for ((&y, &b), &si) in counts.iter().zip(background).zip(s) {
            let g = b + mu * si;
            g1 += y as f64 * si / g - si;
            g2 -= y as f64 * si * si / (g * g);
        }
        if !(g2 < 0.0) {
            break;
        }
        let mut next = mu - g1 / g2;
        if next <= mu_min {
            next = 0.5 * (mu + mu_min);
        }
        let done = (next - mu).abs() < 1e-10 * (1.0 + mu.abs());
        mu = next;
        if done {
            break;
        }
    }
    (2.0 * (ll(mu) - ll(0.0))).max(0.0)
}
