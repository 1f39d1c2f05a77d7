//! Domain types, prior densities, the signal template and the binned
//! Poisson likelihood.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;
use std::f64::consts::SQRT_2;

use crate::kernel::{KernelFactor, DEFAULT_RELATIVE_JITTER};
use crate::{Error, Result};

pub use crate::kernel::covariance_matrix;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Bin edges `m_0 < m_1 < ... < m_n` (GeV) and the observed counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpectrum", into = "RawSpectrum")]
pub struct BinnedSpectrum {
    edges: Vec<f64>,
    counts: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct RawSpectrum {
    edges: Vec<f64>,
    counts: Vec<u64>,
}

impl TryFrom<RawSpectrum> for BinnedSpectrum {
    type Error = Error;
    fn try_from(raw: RawSpectrum) -> Result<Self> {
        BinnedSpectrum::new(raw.edges, raw.counts)
    }
}

impl From<BinnedSpectrum> for RawSpectrum {
    fn from(s: BinnedSpectrum) -> Self {
        RawSpectrum { edges: s.edges, counts: s.counts }
    }
}

pub(crate) fn validate_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::usage("at least two bin edges are required"));
    }
    if edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::domain("bin edges must be finite"));
    }
    if edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("bin edges must be strictly increasing"));
    }
    Ok(())
}

impl BinnedSpectrum {
    pub fn new(edges: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        validate_edges(&edges)?;
        if counts.len() + 1 != edges.len() {
            return Err(Error::usage(format!(
                "{} counts do not match {} bin edges",
                counts.len(),
                edges.len()
            )));
        }
        Ok(BinnedSpectrum { edges, counts })
    }

    /// `n` bins of equal width over `(lower, upper)`.
    pub fn uniform_edges(lower: f64, upper: f64, n: usize) -> Vec<f64> {
        let h = (upper - lower) / n as f64;
        (0..=n).map(|i| if i == n { upper } else { lower + h * i as f64 }).collect()
    }

    /// Histogram a list of event masses; events outside the window are dropped.
    pub fn from_events(events: &[f64], edges: Vec<f64>) -> Result<Self> {
        validate_edges(&edges)?;
        let n = edges.len() - 1;
        let mut counts = vec![0u64; n];
        let (lo, hi) = (edges[0], edges[n]);
        for &m in events {
            if !(m >= lo && m < hi) {
                continue;
            }
            let idx = edges.partition_point(|e| *e <= m) - 1;
            counts[idx.min(n - 1)] += 1;
        }
        BinnedSpectrum::new(edges, counts)
    }

    pub fn with_counts(&self, counts: Vec<u64>) -> Result<Self> {
        BinnedSpectrum::new(self.edges.clone(), counts)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn n_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn lower(&self) -> f64 {
        self.edges[0]
    }

    pub fn upper(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        midpoints(&self.edges)
    }

    pub fn widths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

pub(crate) fn midpoints(edges: &[f64]) -> Vec<f64> {
    edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Bin midpoints mapped affinely onto `[0, 1]` by the window.
pub fn rescaled_midpoints(edges: &[f64]) -> Vec<f64> {
    let (lo, hi) = (edges[0], edges[edges.len() - 1]);
    midpoints(edges).into_iter().map(|m| (m - lo) / (hi - lo)).collect()
}

/// Either no particle in the window, or one at mass `m` (GeV).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "mass", rename_all = "snake_case")]
pub enum MassHypothesis {
    Absent,
    Present(f64),
}

impl MassHypothesis {
    /// A present hypothesis, checked to lie strictly inside `(lower, upper)`.
    pub fn present_in(m: f64, lower: f64, upper: f64) -> Result<Self> {
        if m > lower && m < upper {
            Ok(MassHypothesis::Present(m))
        } else {
            Err(Error::domain(format!("mass {m} outside the open window ({lower}, {upper})")))
        }
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, MassHypothesis::Absent)
    }

    pub fn mass(&self) -> Option<f64> {
        match *self {
            MassHypothesis::Absent => None,
            MassHypothesis::Present(m) => Some(m),
        }
    }
}

/// Gaussian signal shape with location-dependent scale and width,
/// interpolated linearly between anchor masses and clamped outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate", into = "RawTemplate")]
pub struct SignalTemplate {
    anchor_masses: Vec<f64>,
    anchor_scales: Vec<f64>,
    anchor_widths: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTemplate {
    anchor_masses: Vec<f64>,
    anchor_scales: Vec<f64>,
    anchor_widths: Vec<f64>,
}

impl TryFrom<RawTemplate> for SignalTemplate {
    type Error = Error;
    fn try_from(r: RawTemplate) -> Result<Self> {
        SignalTemplate::new(r.anchor_masses, r.anchor_scales, r.anchor_widths)
    }
}

impl From<SignalTemplate> for RawTemplate {
    fn from(t: SignalTemplate) -> Self {
        RawTemplate {
            anchor_masses: t.anchor_masses,
            anchor_scales: t.anchor_scales,
            anchor_widths: t.anchor_widths,
        }
    }
}

impl SignalTemplate {
    pub fn new(masses: Vec<f64>, scales: Vec<f64>, widths: Vec<f64>) -> Result<Self> {
        if masses.is_empty() || masses.len() != scales.len() || masses.len() != widths.len() {
            return Err(Error::usage("template anchors, scales and widths must be non-empty and of equal length"));
        }
        if masses.windows(2).any(|w| w[1] <= w[0]) || masses.iter().any(|m| !m.is_finite()) {
            return Err(Error::domain("template anchor masses must be finite and strictly increasing"));
        }
        if scales.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::domain("template scales must be non-negative"));
        }
        if widths.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::domain("template widths must be strictly positive"));
        }
        Ok(SignalTemplate { anchor_masses: masses, anchor_scales: scales, anchor_widths: widths })
    }

    /// A template with the same shape everywhere.
    pub fn constant(scale: f64, width: f64) -> Result<Self> {
        SignalTemplate::new(vec![0.0], vec![scale], vec![width])
    }

    pub fn anchor_masses(&self) -> &[f64] {
        &self.anchor_masses
    }

    pub fn anchor_scales(&self) -> &[f64] {
        &self.anchor_scales
    }

    pub fn anchor_widths(&self) -> &[f64] {
        &self.anchor_widths
    }

    /// Multiplies every anchor scale by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        SignalTemplate::new(
            self.anchor_masses.clone(),
            self.anchor_scales.iter().map(|c| c * factor).collect(),
            self.anchor_widths.clone(),
        )
    }

    /// `(c, epsilon)` at mass `m`.
    pub fn params_at(&self, m: f64) -> (f64, f64) {
        let xs = &self.anchor_masses;
        let last = xs.len() - 1;
        if m <= xs[0] {
            return (self.anchor_scales[0], self.anchor_widths[0]);
        }
        if m >= xs[last] {
            return (self.anchor_scales[last], self.anchor_widths[last]);
        }
        let k = xs.partition_point(|x| *x <= m) - 1;
        let t = (m - xs[k]) / (xs[k + 1] - xs[k]);
        let lerp = |v: &[f64]| v[k] + t * (v[k + 1] - v[k]);
        (lerp(&self.anchor_scales), lerp(&self.anchor_widths))
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `Phi(b) - Phi(a)` for `a <= b`, evaluated on the side with less cancellation.
pub(crate) fn normal_interval(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        0.5 * (erfc(a / SQRT_2) - erfc(b / SQRT_2))
    } else if b < 0.0 {
        0.5 * (erfc(-b / SQRT_2) - erfc(-a / SQRT_2))
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

/// Gaussian tails beyond this many widths are below double precision.
const SIGNAL_SUPPORT_WIDTHS: f64 = 12.0;

/// Expected signal counts per bin for `hyp`.
pub fn signal_bin_integrals(hyp: MassHypothesis, template: &SignalTemplate, edges: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; edges.len().saturating_sub(1)];
    signal_bin_integrals_into(hyp, template, edges, &mut out);
    out
}

pub(crate) fn signal_bin_integrals_into(
    hyp: MassHypothesis,
    template: &SignalTemplate,
    edges: &[f64],
    out: &mut [f64],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let MassHypothesis::Present(m) = hyp else {
        return;
    };
    let (c, eps) = template.params_at(m);
    let lo = m - SIGNAL_SUPPORT_WIDTHS * eps;
    let hi = m + SIGNAL_SUPPORT_WIDTHS * eps;
    let first = edges.partition_point(|e| *e <= lo).saturating_sub(1);
    let last = edges.partition_point(|e| *e < hi).min(edges.len() - 1);
    for i in first..last {
        let a = (edges[i] - m) / eps;
        let b = (edges[i + 1] - m) / eps;
        out[i] = c * normal_interval(a, b);
    }
}

/// Fourth-order Bernstein polynomial `sum_i b_i C(4,i) z^i (1-z)^(4-i)`.
pub fn bernstein_mean(z: f64, coeffs: &[f64; 5]) -> Result<f64> {
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::domain(format!("Bernstein argument {z} outside [0, 1]")));
    }
    const BINOM: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
    let w = 1.0 - z;
    Ok((0..5)
        .map(|i| coeffs[i] * BINOM[i] * z.powi(i as i32) * w.powi(4 - i as i32))
        .sum())
}

/// Inverse-gamma log density.
pub fn log_inverse_gamma(x: f64, shape: f64, scale: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// Log-normal log density with log-scale location `mu` and scale `sigma`.
pub fn log_lognormal(x: f64, mu: f64, sigma: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NEG_INFINITY;
    }
    let u = (x.ln() - mu) / sigma;
    -x.ln() - sigma.ln() - LN_SQRT_2PI - 0.5 * u * u
}

/// Log-Gaussian-process prior on the per-bin integrated background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpBackgroundPrior {
    /// Bernstein coefficients of the log-intensity mean (per GeV) on the rescaled window.
    pub mean_coeffs: [f64; 5],
    /// Correlation parameter on the rescaled `[0, 1]` axis.
    pub eta: f64,
    pub sigma2: f64,
    pub hyperprior_shape: f64,
    pub hyperprior_scale: f64,
    /// Diagonal jitter relative to `sigma2`.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    DEFAULT_RELATIVE_JITTER
}

impl GpBackgroundPrior {
    pub fn new(mean_coeffs: [f64; 5]) -> Self {
        GpBackgroundPrior {
            mean_coeffs,
            eta: 1.0,
            sigma2: 1.0,
            hyperprior_shape: 1.0,
            hyperprior_scale: 1.0,
            jitter: DEFAULT_RELATIVE_JITTER,
        }
    }

    pub fn with_hyper(&self, eta: f64, sigma2: f64) -> Self {
        GpBackgroundPrior { eta, sigma2, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.eta) && ok(self.sigma2) && ok(self.hyperprior_shape) && ok(self.hyperprior_scale)) {
            return Err(Error::domain("GP prior parameters must be positive and finite"));
        }
        if self.mean_coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::domain("Bernstein coefficients must be finite"));
        }
        Ok(())
    }

    /// Log-scale prior mean of the per-bin integrated background,
    /// `xi(z(midpoint)) + log(width)`.
    pub fn prior_mean_vec(&self, edges: &[f64]) -> Vec<f64> {
        let (lo, hi) = (edges[0], edges[edges.len() - 1]);
        edges
            .windows(2)
            .map(|w| {
                let z = (0.5 * (w[0] + w[1]) - lo) / (hi - lo);
                // midpoints always lie inside [0, 1]
                bernstein_mean(z, &self.mean_coeffs).unwrap_or(f64::NAN) + (w[1] - w[0]).ln()
            })
            .collect()
    }

    /// Covariance of the log background at the rescaled bin midpoints.
    pub fn covariance(&self, edges: &[f64]) -> Result<nalgebra::DMatrix<f64>> {
        covariance_matrix(&rescaled_midpoints(edges), self.eta, self.sigma2, self.jitter * self.sigma2)
    }

    pub fn log_hyperprior(&self, eta: f64, sigma2: f64) -> f64 {
        log_inverse_gamma(eta, self.hyperprior_shape, self.hyperprior_scale)
            + log_inverse_gamma(sigma2, self.hyperprior_shape, self.hyperprior_scale)
    }
}

/// Least-squares Bernstein fit to `log(count / width)` of an observed
/// spectrum, used when no mean coefficients are configured.
pub fn fit_bernstein_mean(spectrum: &BinnedSpectrum) -> Result<[f64; 5]> {
    let z = rescaled_midpoints(spectrum.edges());
    let widths = spectrum.widths();
    let target: Vec<f64> = spectrum
        .counts()
        .iter()
        .zip(&widths)
        .map(|(&y, w)| ((y as f64 + 0.5) / w).ln())
        .collect();
    fit_bernstein(&z, &target)
}

/// Least-squares Bernstein coefficients through `(z_i, v_i)`.
pub fn fit_bernstein(z: &[f64], values: &[f64]) -> Result<[f64; 5]> {
    if z.len() != values.len() || z.len() < 5 {
        return Err(Error::usage("Bernstein fit needs at least five matching points"));
    }
    let basis = |x: f64| -> [f64; 5] {
        let mut e = [0.0; 5];
        let mut unit = [0.0; 5];
        for i in 0..5 {
            unit[i] = 1.0;
            e[i] = bernstein_mean(x.clamp(0.0, 1.0), &unit).unwrap_or(0.0);
            unit[i] = 0.0;
        }
        e
    };
    let mut design = nalgebra::DMatrix::zeros(z.len(), 5);
    for (r, &x) in z.iter().enumerate() {
        for (c, v) in basis(x).iter().enumerate() {
            design[(r, c)] = *v;
        }
    }
    let rhs = nalgebra::DVector::from_column_slice(values);
    let sol = design
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::numerical(format!("Bernstein fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3], sol[4]])
}

/// Mixture prior on the mass: an atom at `Absent` plus a uniform continuous part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassPrior {
    pub p_absent: f64,
    pub lower: f64,
    pub upper: f64,
}

impl MassPrior {
    pub fn new(p_absent: f64, lower: f64, upper: f64) -> Result<Self> {
        if !(p_absent > 0.0 && p_absent < 1.0) {
            return Err(Error::domain(format!("p_absent must lie in (0, 1), got {p_absent}")));
        }
        if !(upper > lower) {
            return Err(Error::domain("mass window must have upper > lower"));
        }
        Ok(MassPrior { p_absent, lower, upper })
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Density of the continuous part under the alternative alone (`pi_A`).
    pub fn alternative_density(&self, m: f64) -> f64 {
        if m > self.lower && m < self.upper {
            1.0 / self.width()
        } else {
            0.0
        }
    }

    /// Log of the atom probability, or of the (sub-probability) density.
    pub fn log_density(&self, hyp: MassHypothesis) -> f64 {
        match hyp {
            MassHypothesis::Absent => self.p_absent.ln(),
            MassHypothesis::Present(m) if m > self.lower && m < self.upper => {
                ((1.0 - self.p_absent) / self.width()).ln()
            }
            MassHypothesis::Present(_) => f64::NEG_INFINITY,
        }
    }
}

/// Treatment of the signal-rate scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CrossSection {
    /// `mu = 1` exactly.
    #[default]
    Fixed,
    /// Log-normal prior with log-scale location and scale.
    Free { log_mean: f64, log_sd: f64 },
}

impl CrossSection {
    pub fn is_free(&self) -> bool {
        matches!(self, CrossSection::Free { .. })
    }

    pub fn log_density(&self, mu: f64) -> f64 {
        match *self {
            CrossSection::Fixed => {
                if mu == 1.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            CrossSection::Free { log_mean, log_sd } => log_lognormal(mu, log_mean, log_sd),
        }
    }
}

/// All prior components of the hierarchical model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub background: GpBackgroundPrior,
    pub mass: MassPrior,
    #[serde(default)]
    pub cross_section: CrossSection,
}

/// One posterior draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub eta: f64,
    pub sigma2: f64,
    /// Log of the per-bin integrated background.
    pub psi: Vec<f64>,
    /// Whitened coordinates with `psi = mean + sqrt(sigma2) L z`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub latent: Vec<f64>,
    pub mass: MassHypothesis,
    pub mu: f64,
    pub log_weight: f64,
}

/// Counts with the data-only constant `sum log(y!)` precomputed.
#[derive(Debug, Clone)]
pub struct CountData {
    counts: Vec<f64>,
    log_factorial_sum: f64,
}

impl CountData {
    pub fn new(counts: &[u64]) -> Self {
        let log_factorial_sum = counts.iter().map(|&y| ln_gamma(y as f64 + 1.0)).sum();
        CountData { counts: counts.iter().map(|&y| y as f64).collect(), log_factorial_sum }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.counts
    }

    pub fn log_factorial_sum(&self) -> f64 {
        self.log_factorial_sum
    }

    /// Poisson log likelihood given `exp(psi)` directly.
    pub fn log_likelihood_bg(&self, background: &[f64], signal: &[f64], mu: f64) -> f64 {
        let mut acc = -self.log_factorial_sum;
        for ((&y, &b), &s) in self.counts.iter().zip(background).zip(signal) {
            let gamma = b + mu * s;
            if y > 0.0 {
                if !(gamma > 0.0) {
                    return f64::NEG_INFINITY;
                }
                acc += y * gamma.ln() - gamma;
            } else {
                acc -= gamma;
            }
        }
        acc
    }

    pub fn log_likelihood(&self, psi: &[f64], signal: &[f64], mu: f64) -> f64 {
        let mut acc = -self.log_factorial_sum;
        for ((&y, &p), &s) in self.counts.iter().zip(psi).zip(signal) {
            let gamma = p.exp() + mu * s;
            if y > 0.0 {
                if !(gamma > 0.0) {
                    return f64::NEG_INFINITY;
                }
                acc += y * gamma.ln() - gamma;
            } else {
                acc -= gamma;
            }
        }
        acc
    }
}

/// Binned Poisson log likelihood with means `exp(psi_i) + mu s_i`.
pub fn log_likelihood(counts: &[u64], psi: &[f64], s: &[f64], mu: f64) -> Result<f64> {
    if counts.len() != psi.len() || counts.len() != s.len() {
        return Err(Error::usage(format!(
            "length mismatch: {} counts, {} psi, {} signal",
            counts.len(),
            psi.len(),
            s.len()
        )));
    }
    if !(mu >= 0.0) {
        return Err(Error::domain(format!("signal scale must be non-negative, got {mu}")));
    }
    Ok(CountData::new(counts).log_likelihood(psi, s, mu))
}

/// Multivariate normal log density of `psi` under the GP prior at `(eta, sigma2)`.
pub fn log_gp_density(psi: &[f64], prior: &GpBackgroundPrior, eta: f64, sigma2: f64, edges: &[f64]) -> Result<f64> {
    let mean = prior.prior_mean_vec(edges);
    if mean.len() != psi.len() {
        return Err(Error::usage("psi length does not match the binning"));
    }
    let factor = KernelFactor::correlation(&rescaled_midpoints(edges), eta, prior.jitter)?;
    let scale = sigma2.sqrt();
    let resid: Vec<f64> = psi.iter().zip(&mean).map(|(p, m)| (p - m) / scale).collect();
    let w = factor.solve_lower(&resid);
    let n = psi.len() as f64;
    let quad: f64 = w.iter().map(|v| v * v).sum();
    Ok(-0.5 * quad - 0.5 * factor.log_det() - 0.5 * n * sigma2.ln() - n * LN_SQRT_2PI)
}

/// Joint log prior density of a particle.
pub fn log_prior(p: &Particle, priors: &Priors, edges: &[f64]) -> Result<f64> {
    if !(p.eta > 0.0 && p.sigma2 > 0.0) || !p.eta.is_finite() || !p.sigma2.is_finite() {
        return Ok(f64::NEG_INFINITY);
    }
    let bg = &priors.background;
    let hyper = bg.log_hyperprior(p.eta, p.sigma2);
    let gp = log_gp_density(&p.psi, bg, p.eta, p.sigma2, edges)?;
    let mass = priors.mass.log_density(p.mass);
    let mu = match priors.cross_section {
        CrossSection::Fixed => 0.0,
        cs => cs.log_density(p.mu),
    };
    Ok(hyper + gp + mass + mu)
}
