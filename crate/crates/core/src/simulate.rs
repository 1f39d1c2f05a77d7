//! Pseudo-experiments and signal-template construction.

use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::kernel::KernelFactor;
use crate::model::{
    normal_interval, rescaled_midpoints, signal_bin_integrals, validate_edges, BinnedSpectrum,
    GpBackgroundPrior, MassHypothesis, SignalTemplate,
};
use crate::rng::stream;
use crate::{Error, Result};

/// `psi ~ N(prior_mean_vec, Sigma)` at the prior's `(eta, sigma2)`.
pub fn draw_background(prior: &GpBackgroundPrior, edges: &[f64], seed: u64) -> Result<Vec<f64>> {
    prior.validate()?;
    validate_edges(edges)?;
    let factor = KernelFactor::correlation(&rescaled_midpoints(edges), prior.eta, prior.jitter)?;
    let mut rng = stream(seed, &[0xB6]);
    let z: Vec<f64> = (0..factor.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let scale = prior.sigma2.sqrt();
    let mean = prior.prior_mean_vec(edges);
    Ok(factor.mul_vec(&z).iter().zip(&mean).map(|(d, m)| m + scale * d).collect())
}

/// Poisson draw with mean `lambda`; zero mean gives zero.
pub(crate) fn poisson_draw<R: rand::Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if !(lambda > 0.0) {
        return 0;
    }
    match Poisson::new(lambda) {
        Ok(d) => d.sample(rng) as u64,
        Err(_) => 0,
    }
}

/// Counts from the per-bin background `exp(psi)` plus `mu` times the signal.
pub fn draw_counts_with_background(background: &[f64], signal: &[f64], mu: f64, seed: u64) -> Vec<u64> {
    let mut rng = stream(seed, &[0xC0]);
    background
        .iter()
        .zip(signal)
        .map(|(b, s)| poisson_draw(b + mu * s, &mut rng))
        .collect()
}

/// `y_i ~ Poisson(exp(psi_i) + mu s_i)`, independent across bins.
pub fn draw_counts(
    psi: &[f64],
    hyp: MassHypothesis,
    mu: f64,
    template: &SignalTemplate,
    edges: &[f64],
    seed: u64,
) -> Result<Vec<u64>> {
    validate_edges(edges)?;
    if psi.len() + 1 != edges.len() {
        return Err(Error::usage("psi length does not match the binning"));
    }
    if !(mu >= 0.0) {
        return Err(Error::domain("signal scale must be non-negative"));
    }
    let s = signal_bin_integrals(hyp, template, edges);
    let bg: Vec<f64> = psi.iter().map(|p| p.exp()).collect();
    Ok(draw_counts_with_background(&bg, &s, mu, seed))
}

/// Result of fitting Gaussian-integral shapes to anchor histograms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateFit {
    pub template: SignalTemplate,
    /// Root-mean-square residual per anchor.
    pub residuals: Vec<f64>,
}

/// Least-squares `(c, epsilon)` for one anchor histogram centred at `mass`.
pub fn fit_anchor(mass: f64, histogram: &[f64], edges: &[f64]) -> Result<(f64, f64, f64)> {
    validate_edges(edges)?;
    if histogram.len() + 1 != edges.len() {
        return Err(Error::usage("anchor histogram length does not match the binning"));
    }
    if histogram.iter().any(|h| !(h.is_finite() && *h >= 0.0)) {
        return Err(Error::domain("anchor histograms must be non-negative"));
    }
    let total: f64 = histogram.iter().sum();
    if !(total > 0.0) {
        return Err(Error::domain(format!("anchor histogram at {mass} is identically zero")));
    }
    let shape = |eps: f64| -> Vec<f64> {
        edges.windows(2).map(|w| normal_interval((w[0] - mass) / eps, (w[1] - mass) / eps)).collect()
    };
    // profile out the scale, which enters linearly
    let profile = |log_eps: f64| -> (f64, f64) {
        let f = shape(log_eps.exp());
        let ff: f64 = f.iter().map(|v| v * v).sum();
        let hf: f64 = f.iter().zip(histogram).map(|(a, b)| a * b).sum();
        let c = if ff > 0.0 { hf / ff } else { 0.0 };
        let sse: f64 = f.iter().zip(histogram).map(|(a, h)| (h - c * a).powi(2)).sum();
        (sse, c)
    };
    let mids: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let mean = mids.iter().zip(histogram).map(|(m, h)| m * h).sum::<f64>() / total;
    let var = mids.iter().zip(histogram).map(|(m, h)| h * (m - mean).powi(2)).sum::<f64>() / total;
    let min_width = edges.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let guess = var.sqrt().max(0.1 * min_width);
    let (mut a, mut b) = ((guess / 4.0).ln(), (guess * 4.0).ln());
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (profile(x1).0, profile(x2).0);
    while b - a > 1e-12 {
        if f1 < f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = profile(x1).0;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = profile(x2).0;
        }
    }
    let log_eps = 0.5 * (a + b);
    let (sse, c) = profile(log_eps);
    Ok((c, log_eps.exp(), (sse / histogram.len() as f64).sqrt()))
}

/// Fits every anchor histogram and assembles an interpolating template.
pub fn fit_template(anchor_histograms: &[(f64, Vec<f64>)], edges: &[f64]) -> Result<TemplateFit> {
    if anchor_histograms.len() < 2 {
        return Err(Error::usage("at least two anchor histograms are required"));
    }
    let mut sorted: Vec<&(f64, Vec<f64>)> = anchor_histograms.iter().collect();
    sorted.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut masses = Vec::new();
    let mut scales = Vec::new();
    let mut widths = Vec::new();
    let mut residuals = Vec::new();
    for (m, h) in sorted {
        let (c, eps, rms) = fit_anchor(*m, h, edges)?;
        masses.push(*m);
        scales.push(c);
        widths.push(eps);
        residuals.push(rms);
    }
    Ok(TemplateFit { template: SignalTemplate::new(masses, scales, widths)?, residuals })
}

/// Bernstein coefficients of the log of the reference background
/// `A (m / 100)^(-4.5)` per GeV with `A = 1204`, on the window (100, 180).
pub const REFERENCE_MEAN_COEFFS: [f64; 5] = [7.09312956, 6.19533068, 5.52622582, 4.94706183, 4.44857541];
const REFERENCE_NORMALIZATION: f64 = 1204.0;
const REFERENCE_INDEX: f64 = 4.5;
const REFERENCE_PIVOT: f64 = 100.0;

/// Configuration of the synthetic stand-in for the simulated diphoton spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub lower: f64,
    pub upper: f64,
    pub n_bins: usize,
    /// Expected background events in the window.
    pub expected_background: f64,
    pub anchor_masses: Vec<f64>,
    pub anchor_scales: Vec<f64>,
    pub anchor_widths: Vec<f64>,
    /// Injected mass; `None` produces background-only data.
    pub inject_mass: Option<f64>,
    /// Multiplier on the template when injecting.
    pub signal_strength: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            lower: 100.0,
            upper: 180.0,
            n_bins: 322,
            expected_background: 30_000.0,
            anchor_masses: vec![120.0, 125.0, 130.0],
            anchor_scales: vec![1040.0, 1000.0, 960.0],
            anchor_widths: vec![4.56, 4.75, 4.94],
            inject_mass: Some(125.0),
            signal_strength: 1.0,
        }
    }
}

/// Ground truth behind a simulated spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    pub mass: MassHypothesis,
    pub signal_strength: f64,
    /// Expected background counts per bin.
    pub background: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub spectrum: BinnedSpectrum,
    pub template: SignalTemplate,
    pub template_fit_residuals: Vec<f64>,
    pub prior: GpBackgroundPrior,
    pub truth: ScenarioTruth,
}

impl ScenarioConfig {
    /// Mean coefficients for this configuration's background normalization.
    pub fn mean_coeffs(&self) -> [f64; 5] {
        let scale = self.normalization() / REFERENCE_NORMALIZATION;
        REFERENCE_MEAN_COEFFS.map(|b| b + scale.ln())
    }

    fn reference_integral(&self, a: f64, b: f64) -> f64 {
        let k = REFERENCE_INDEX - 1.0;
        REFERENCE_PIVOT / k * ((a / REFERENCE_PIVOT).powf(-k) - (b / REFERENCE_PIVOT).powf(-k))
    }

    fn normalization(&self) -> f64 {
        self.expected_background / self.reference_integral(self.lower, self.upper)
    }

    /// Expected background per bin under the reference curve.
    pub fn background_bins(&self, edges: &[f64]) -> Vec<f64> {
        let a = self.normalization();
        edges.windows(2).map(|w| a * self.reference_integral(w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.upper > self.lower) || self.n_bins < 2 {
            return Err(Error::domain("scenario window must be non-empty with at least two bins"));
        }
        if self.lower <= 0.0 {
            return Err(Error::domain("scenario window must lie at positive masses"));
        }
        if !(self.expected_background > 0.0) || !(self.signal_strength >= 0.0) {
            return Err(Error::domain("expected background must be positive and signal strength non-negative"));
        }
        if let Some(m) = self.inject_mass {
            MassHypothesis::present_in(m, self.lower, self.upper)?;
        }
        SignalTemplate::new(self.anchor_masses.clone(), self.anchor_scales.clone(), self.anchor_widths.clone())?;
        Ok(())
    }
}

/// Window (100, 180) GeV in 322 uniform bins, a smooth falling background
/// and an optional Gaussian signal. The template is re-fit from anchor
/// histograms the same way externally supplied shapes would be.
pub fn make_reference_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    let edges = BinnedSpectrum::uniform_edges(cfg.lower, cfg.upper, cfg.n_bins);
    let truth_template =
        SignalTemplate::new(cfg.anchor_masses.clone(), cfg.anchor_scales.clone(), cfg.anchor_widths.clone())?;
    let anchors: Vec<(f64, Vec<f64>)> = cfg
        .anchor_masses
        .iter()
        .map(|&m| (m, signal_bin_integrals(MassHypothesis::Present(m), &truth_template, &edges)))
        .collect();
    let fit = fit_template(&anchors, &edges)?;
    let background = cfg.background_bins(&edges);
    let hyp = match cfg.inject_mass {
        Some(m) => MassHypothesis::Present(m),
        None => MassHypothesis::Absent,
    };
    let signal = signal_bin_integrals(hyp, &fit.template, &edges);
    let counts = draw_counts_with_background(&background, &signal, cfg.signal_strength, seed);
    let spectrum = BinnedSpectrum::new(edges, counts)?;
    Ok(Scenario {
        spectrum,
        template: fit.template,
        template_fit_residuals: fit.residuals,
        prior: GpBackgroundPrior::new(cfg.mean_coeffs()),
        truth: ScenarioTruth { mass: hyp, signal_strength: cfg.signal_strength, background, seed },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::bernstein_mean;

    #[test]
    fn zero_mean_gives_zero_counts() {
        let y = draw_counts_with_background(&[0.0, 0.0, 3.0], &[0.0; 3], 1.0, 5);
        assert_eq!(y[0], 0);
        assert_eq!(y[1], 0);
    }

    #[test]
    fn absent_hypothesis_ignores_mu() {
        let t = SignalTemplate::constant(50.0, 1.0).unwrap();
        let edges = BinnedSpectrum::uniform_edges(100.0, 120.0, 20);
        let psi = vec![2.0; 20];
        let a = draw_counts(&psi, MassHypothesis::Absent, 0.0, &t, &edges, 9).unwrap();
        let b = draw_counts(&psi, MassHypothesis::Absent, 5.0, &t, &edges, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_recovers_exact_gaussian_histogram() {
        let edges = BinnedSpectrum::uniform_edges(100.0, 180.0, 322);
        let t = SignalTemplate::constant(10.0, 1.5).unwrap();
        let h = signal_bin_integrals(MassHypothesis::Present(125.0), &t, &edges);
        let (c, eps, rms) = fit_anchor(125.0, &h, &edges).unwrap();
        assert!((c - 10.0).abs() / 10.0 < 1e-4, "c = {c}");
        assert!((eps - 1.5).abs() / 1.5 < 1e-4, "eps = {eps}");
        assert!(rms < 1e-6);
    }

    #[test]
    fn doubling_histogram_doubles_scale() {
        let edges = BinnedSpectrum::uniform_edges(100.0, 180.0, 322);
        let t = SignalTemplate::constant(7.0, 2.2).unwrap();
        let h = signal_bin_integrals(MassHypothesis::Present(131.0), &t, &edges);
        let h2: Vec<f64> = h.iter().map(|v| 2.0 * v).collect();
        let (c1, e1, _) = fit_anchor(131.0, &h, &edges).unwrap();
        let (c2, e2, _) = fit_anchor(131.0, &h2, &edges).unwrap();
        assert!((c2 / c1 - 2.0).abs() < 1e-6);
        assert!((e2 - e1).abs() < 1e-6);
    }

    #[test]
    fn zero_histogram_is_rejected() {
        let edges = BinnedSpectrum::uniform_edges(100.0, 110.0, 10);
        assert!(fit_anchor(105.0, &[0.0; 10], &edges).is_err());
        assert!(fit_template(&[(105.0, vec![1.0; 10])], &edges).is_err());
    }

    #[test]
    fn reference_scenario_layout() {
        let sc = make_reference_scenario(&ScenarioConfig::default(), 1).unwrap();
        assert_eq!(sc.spectrum.n_bins(), 322);
        assert_eq!(sc.spectrum.lower(), 100.0);
        assert_eq!(sc.spectrum.upper(), 180.0);
        assert_eq!(sc.template.anchor_masses(), &[120.0, 125.0, 130.0]);
        let expected: f64 = sc.truth.background.iter().sum();
        assert!((expected - 30_000.0).abs() < 1e-6);
    }

    #[test]
    fn no_signal_variant_is_pure_background() {
        let cfg = ScenarioConfig { inject_mass: None, ..ScenarioConfig::default() };
        let sc = make_reference_scenario(&cfg, 4).unwrap();
        assert_eq!(sc.truth.mass, MassHypothesis::Absent);
        let bg_only = draw_counts_with_background(&sc.truth.background, &vec![0.0; 322], 1.0, 4);
        assert_eq!(sc.spectrum.counts(), bg_only.as_slice());
    }

    #[test]
    fn reference_coefficients_track_the_reference_curve() {
        let cfg = ScenarioConfig::default();
        let coeffs = cfg.mean_coeffs();
        let a = cfg.normalization();
        for k in 0..=80 {
            let m = 100.0 + k as f64;
            let z = (m - 100.0) / 80.0;
            let truth = a.ln() - REFERENCE_INDEX * (m / 100.0).ln();
            assert!((bernstein_mean(z, &coeffs).unwrap() - truth).abs() < 1e-3);
        }
    }

    #[test]
    fn tiny_variance_background_equals_mean() {
        let edges = BinnedSpectrum::uniform_edges(100.0, 180.0, 50);
        let prior = GpBackgroundPrior::new(REFERENCE_MEAN_COEFFS).with_hyper(2.0, 1e-12);
        let psi = draw_background(&prior, &edges, 3).unwrap();
        let mean = prior.prior_mean_vec(&edges);
        for (a, b) in psi.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
