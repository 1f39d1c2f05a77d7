//! Tempered sequential Monte Carlo over `(eta, sigma2, psi, mass, mu)`.
//!
//! Each particle carries whitened latent coordinates `z` with
//! `psi = mean + sqrt(sigma2) L_eta z`, so the background move is a random
//! walk with the prior correlation structure. Weighting, resampling and moves
//! alternate on a fixed temperature ladder.

use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kde::{
    effective_sample_size, linear_cell_inverse, silverman_bandwidth, uniform_grid, weighted_kde_on_grid,
    weighted_mean_var, weighted_quantile, GridDensity,
};
use crate::kernel::KernelFactor;
use crate::model::{
    rescaled_midpoints, signal_bin_integrals_into, validate_edges, BinnedSpectrum, CountData, CrossSection,
    MassHypothesis, MassPrior, Particle, Priors, SignalTemplate,
};
use crate::rng::{stream, StreamRng};
use crate::{Error, Result};

const INIT_STREAM: u64 = u64::MAX;
const RESAMPLE_STREAM: u64 = u64::MAX - 1;

/// Strictly increasing temperatures from exactly 0 to exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TemperatureSchedule {
    taus: Vec<f64>,
}

impl TryFrom<Vec<f64>> for TemperatureSchedule {
    type Error = Error;
    fn try_from(taus: Vec<f64>) -> Result<Self> {
        TemperatureSchedule::new(taus)
    }
}

impl From<TemperatureSchedule> for Vec<f64> {
    fn from(s: TemperatureSchedule) -> Self {
        s.taus
    }
}

impl TemperatureSchedule {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.len() < 2 || taus[0] != 0.0 || taus[taus.len() - 1] != 1.0 {
            return Err(Error::domain("temperature schedule must start at 0 and end at 1"));
        }
        if taus.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::domain("temperatures must be strictly increasing"));
        }
        Ok(TemperatureSchedule { taus })
    }

    /// `n` equally spaced temperatures including both ends.
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::domain("a schedule needs at least two temperatures"));
        }
        TemperatureSchedule::new(uniform_grid(0.0, 1.0, n))
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule::uniform(20).expect("valid default schedule")
    }
}

/// Weighted particle collection. Weights are normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    pub particles: Vec<Particle>,
    pub normalized_weights: Vec<f64>,
    pub rng_seed_record: u64,
}

impl ParticleEnsemble {
    pub fn new(particles: Vec<Particle>, log_weights: &[f64], seed: u64) -> Result<Self> {
        if particles.len() < 2 || particles.len() != log_weights.len() {
            return Err(Error::usage("an ensemble needs at least two particles and one weight each"));
        }
        let top = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::domain("ensemble weights are all zero"));
        }
        let raw: Vec<f64> = log_weights.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = raw.iter().sum();
        let mut ens = ParticleEnsemble {
            particles,
            normalized_weights: raw.iter().map(|w| w / total).collect(),
            rng_seed_record: seed,
        };
        ens.sync_log_weights();
        Ok(ens)
    }

    pub fn equally_weighted(particles: Vec<Particle>, seed: u64) -> Result<Self> {
        let lw = vec![0.0; particles.len()];
        ParticleEnsemble::new(particles, &lw, seed)
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.normalized_weights)
    }

    /// Weighted fraction of `Absent` particles.
    pub fn absent_fraction(&self) -> f64 {
        self.particles
            .iter()
            .zip(&self.normalized_weights)
            .filter(|(p, _)| p.mass.is_absent())
            .map(|(_, w)| w)
            .fold(0.0, |a, b| a + b)
    }

    fn sync_log_weights(&mut self) {
        for (p, w) in self.particles.iter_mut().zip(&self.normalized_weights) {
            p.log_weight = w.ln();
        }
    }
}

/// Per-bin Poisson log likelihood as a function of `(psi, s, mu)`.
pub trait Likelihood: Sync {
    fn log_likelihood(&self, psi: &[f64], signal: &[f64], mu: f64) -> f64;
}

impl Likelihood for CountData {
    fn log_likelihood(&self, psi: &[f64], signal: &[f64], mu: f64) -> f64 {
        CountData::log_likelihood(self, psi, signal, mu)
    }
}

/// Likelihood that ignores its arguments.
#[derive(Debug, Clone, Copy)]
pub struct ConstantLikelihood(pub f64);

impl Likelihood for ConstantLikelihood {
    fn log_likelihood(&self, _: &[f64], _: &[f64], _: f64) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcConfig {
    pub n_particles: usize,
    pub moves_per_temp: usize,
    pub schedule: TemperatureSchedule,
    pub seed: u64,
    /// Holds `(eta, sigma2)` fixed instead of sampling them.
    pub fix_hyper: Option<(f64, f64)>,
    /// Keep every post-move ensemble.
    pub record_history: bool,
    /// Weight of the prior in the mass proposal mixture.
    pub defensive_weight: f64,
    /// Nodes of the tabulated mass proposal density.
    pub proposal_grid: usize,
    pub target_accept: f64,
    /// Initial whitened random-walk scale; `None` uses `2.38 / sqrt(n_bins)`.
    pub initial_psi_scale: Option<f64>,
}

impl Default for SmcConfig {
    fn default() -> Self {
        SmcConfig {
            n_particles: 2000,
            moves_per_temp: 5,
            schedule: TemperatureSchedule::default(),
            seed: 0,
            fix_hyper: None,
            record_history: false,
            defensive_weight: 0.1,
            proposal_grid: 4096,
            target_accept: 0.25,
            initial_psi_scale: None,
        }
    }
}

/// Per-temperature diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRecord {
    pub index: usize,
    pub tau: f64,
    /// Effective sample size after reweighting, before resampling.
    pub ess: f64,
    /// Weighted Absent fraction after reweighting, before resampling.
    pub p_absent_hat: f64,
    pub log_evidence_increment: f64,
    pub accept_psi: f64,
    pub accept_mass: f64,
    pub accept_hyper: f64,
    pub accept_mu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmcOutput {
    pub ensemble: ParticleEnsemble,
    /// The reweighted ensemble at the final temperature, before resampling.
    pub final_weighted: ParticleEnsemble,
    pub trace: Vec<TemperatureRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<ParticleEnsemble>,
    pub log_evidence: f64,
}

/// Outcome of one reweighting step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightUpdate {
    pub ess: f64,
    /// `log sum_i W_i exp(delta_tau * l_i)`.
    pub log_normalizer: f64,
    /// Every incremental weight vanished; weights were left unchanged.
    pub degenerate: bool,
}

/// Adds `delta_tau * log_lik` to the log weights and renormalizes.
pub fn increment_weights(ensemble: &mut ParticleEnsemble, log_lik: &[f64], delta_tau: f64) -> WeightUpdate {
    let inc: Vec<f64> = ensemble
        .normalized_weights
        .iter()
        .zip(log_lik)
        .map(|(w, l)| if *w > 0.0 { w.ln() + delta_tau * l } else { f64::NEG_INFINITY })
        .map(|v| if v.is_nan() { f64::NEG_INFINITY } else { v })
        .collect();
    let top = inc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return WeightUpdate { ess: ensemble.ess(), log_normalizer: f64::NEG_INFINITY, degenerate: true };
    }
    let raw: Vec<f64> = inc.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = raw.iter().sum();
    ensemble.normalized_weights = raw.iter().map(|w| w / total).collect();
    ensemble.sync_log_weights();
    WeightUpdate { ess: ensemble.ess(), log_normalizer: top + total.ln(), degenerate: false }
}

/// Systematic resampling to equal weights.
pub fn resample(ensemble: &ParticleEnsemble, seed: u64) -> ParticleEnsemble {
    let n = ensemble.len();
    let mut rng = stream(seed, &[RESAMPLE_STREAM]);
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = 0.0;
    let mut j = 0;
    for (i, &w) in ensemble.normalized_weights.iter().enumerate() {
        cum += w;
        let last = i + 1 == n;
        while out.len() < n && (last || u0 + (j as f64) / (n as f64) < cum) {
            out.push(ensemble.particles[i].clone());
            j += 1;
        }
    }
    let w = 1.0 / n as f64;
    for p in &mut out {
        p.log_weight = w.ln();
    }
    ParticleEnsemble { particles: out, normalized_weights: vec![w; n], rng_seed_record: seed }
}

/// Step-size multipliers and switches for one round of moves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveSettings {
    pub tau: f64,
    pub sweeps: usize,
    /// Whitened random-walk scale, relative to the ensemble spread of `psi`.
    pub psi_scale: f64,
    /// Log-scale random-walk multiplier for `(eta, sigma2)`.
    pub hyper_scale: f64,
    pub mu_scale: f64,
    pub mass_moves: bool,
    pub defensive_weight: f64,
    pub proposal_grid: usize,
    pub fix_hyper: bool,
}

/// Acceptance rates of one round of moves.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MoveStats {
    pub accept_psi: f64,
    pub accept_mass: f64,
    pub accept_hyper: f64,
    pub accept_mu: f64,
}

/// Mixture of the ensemble mass marginal with the prior, used as an
/// independence proposal for the mass.
#[derive(Debug, Clone)]
struct MassProposal {
    prior: MassPrior,
    defensive: f64,
    absent: f64,
    kde: Option<GridDensity>,
    cum: Vec<f64>,
}

impl MassProposal {
    fn from_ensemble(ens: &ParticleEnsemble, prior: MassPrior, defensive: f64, nodes: usize) -> Result<Self> {
        let absent = ens.absent_fraction();
        let (ms, ws): (Vec<f64>, Vec<f64>) = ens
            .particles
            .iter()
            .zip(&ens.normalized_weights)
            .filter_map(|(p, w)| p.mass.mass().map(|m| (m, *w)))
            .filter(|(_, w)| *w > 0.0)
            .unzip();
        let mut kde = None;
        let mut cum = Vec::new();
        if !ms.is_empty() {
            let floor = 1e-3 * prior.width();
            let h = silverman_bandwidth(&ms, &ws).max(floor);
            let grid = uniform_grid(prior.lower, prior.upper, nodes.max(16));
            let dens = weighted_kde_on_grid(&ms, &ws, h, &grid);
            let d = GridDensity::new(grid, dens)?;
            let total = d.total_mass();
            if total > 0.0 {
                let d = d.scaled(1.0 / total);
                let mut acc = 0.0;
                cum.push(0.0);
                for k in 0..d.grid.len() - 1 {
                    acc += 0.5 * (d.density[k] + d.density[k + 1]) * (d.grid[k + 1] - d.grid[k]);
                    cum.push(acc);
                }
                kde = Some(d);
            }
        }
        Ok(MassProposal { prior, defensive: defensive.clamp(0.0, 1.0), absent, kde, cum })
    }

    /// Probability of `Absent`, or density at a mass.
    fn log_density(&self, hyp: MassHypothesis) -> f64 {
        let ens = match (hyp, &self.kde) {
            (MassHypothesis::Absent, _) => self.absent,
            (MassHypothesis::Present(m), Some(d)) => (1.0 - self.absent) * d.eval(m),
            // with no present particles the continuous part is uniform
            (MassHypothesis::Present(m), None) => (1.0 - self.absent) * self.prior.alternative_density(m),
        };
        ((1.0 - self.defensive) * ens + self.defensive * self.prior.log_density(hyp).exp()).ln()
    }

    fn sample(&self, rng: &mut StreamRng) -> MassHypothesis {
        let u: f64 = rng.random();
        if u < self.defensive {
            return sample_mass_prior(&self.prior, rng);
        }
        let v: f64 = rng.random();
        if v < self.absent {
            return MassHypothesis::Absent;
        }
        match &self.kde {
            Some(d) => {
                let total = self.cum[self.cum.len() - 1];
                loop {
                    let target = rng.random::<f64>() * total;
                    let k = (self.cum.partition_point(|c| *c <= target).max(1) - 1).min(d.grid.len() - 2);
                    let cell = self.cum[k + 1] - self.cum[k];
                    if !(cell > 0.0) {
                        continue;
                    }
                    let frac = ((target - self.cum[k]) / cell).clamp(0.0, 1.0);
                    let s = linear_cell_inverse(d.density[k], d.density[k + 1], frac);
                    let m = d.grid[k] + s * (d.grid[k + 1] - d.grid[k]);
                    if m > self.prior.lower && m < self.prior.upper {
                        return MassHypothesis::Present(m);
                    }
                }
            }
            None => MassHypothesis::Present(sample_open_uniform(self.prior.lower, self.prior.upper, rng)),
        }
    }
}

fn sample_open_uniform(lo: f64, hi: f64, rng: &mut StreamRng) -> f64 {
    loop {
        let m = lo + (hi - lo) * rng.random::<f64>();
        if m > lo && m < hi {
            return m;
        }
    }
}

fn sample_mass_prior(prior: &MassPrior, rng: &mut StreamRng) -> MassHypothesis {
    if rng.random::<f64>() < prior.p_absent {
        MassHypothesis::Absent
    } else {
        MassHypothesis::Present(sample_open_uniform(prior.lower, prior.upper, rng))
    }
}

fn sample_inverse_gamma(shape: f64, scale: f64, rng: &mut StreamRng) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0).map(|d| d.sample(rng)).unwrap_or(1.0);
    scale / g.max(f64::MIN_POSITIVE)
}

/// Everything a particle move needs that is shared across the ensemble.
struct Shared<'a, L: Likelihood> {
    likelihood: &'a L,
    edges: &'a [f64],
    grid: Vec<f64>,
    mean: Vec<f64>,
    template: &'a SignalTemplate,
    priors: &'a Priors,
}

impl<L: Likelihood> Shared<'_, L> {
    fn psi(&self, factor: &KernelFactor, sigma2: f64, z: &[f64], out: &mut [f64]) {
        factor.mul_vec_into(z, out);
        let s = sigma2.sqrt();
        for (o, m) in out.iter_mut().zip(&self.mean) {
            *o = m + s * *o;
        }
    }

    fn factor(&self, eta: f64) -> Result<KernelFactor> {
        KernelFactor::correlation(&self.grid, eta, self.priors.background.jitter)
    }

    fn log_hyper(&self, eta: f64, sigma2: f64) -> f64 {
        self.priors.background.log_hyperprior(eta, sigma2)
    }

    fn signal(&self, hyp: MassHypothesis, out: &mut [f64]) {
        signal_bin_integrals_into(hyp, self.template, self.edges, out);
    }

    fn sample_prior(&self, index: usize, seed: u64, fix_hyper: Option<(f64, f64)>) -> Result<Particle> {
        let mut rng = stream(seed, &[INIT_STREAM, index as u64]);
        let bg = &self.priors.background;
        let (eta, sigma2) = match fix_hyper {
            Some(h) => h,
            None => (
                sample_inverse_gamma(bg.hyperprior_shape, bg.hyperprior_scale, &mut rng),
                sample_inverse_gamma(bg.hyperprior_shape, bg.hyperprior_scale, &mut rng),
            ),
        };
        let n = self.mean.len();
        let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let factor = self.factor(eta)?;
        let mut psi = vec![0.0; n];
        self.psi(&factor, sigma2, &z, &mut psi);
        let mass = sample_mass_prior(&self.priors.mass, &mut rng);
        let mu = match self.priors.cross_section {
            CrossSection::Fixed => 1.0,
            CrossSection::Free { log_mean, log_sd } => {
                LogNormal::new(log_mean, log_sd).map(|d| d.sample(&mut rng)).unwrap_or(1.0)
            }
        };
        Ok(Particle { eta, sigma2, psi, latent: z, mass, mu, log_weight: 0.0 })
    }

    fn log_lik(&self, p: &Particle, signal: &mut [f64]) -> f64 {
        self.signal(p.mass, signal);
        self.likelihood.log_likelihood(&p.psi, signal, p.mu)
    }
}

/// Absolute step sizes derived from the ensemble spread.
#[derive(Debug, Clone, Copy)]
struct Steps {
    psi_sd: f64,
    log_eta: f64,
    log_sigma2: f64,
    log_mu: f64,
}

fn ensemble_steps(ens: &ParticleEnsemble, settings: &MoveSettings) -> Steps {
    let w = &ens.normalized_weights;
    let n = ens.particles[0].psi.len();
    let mut v = 0.0;
    for i in 0..n {
        let col: Vec<f64> = ens.particles.iter().map(|p| p.psi[i]).collect();
        v += weighted_mean_var(&col, w).1.max(0.0);
    }
    let spread = |f: &dyn Fn(&Particle) -> f64| -> f64 {
        let xs: Vec<f64> = ens.particles.iter().map(f).collect();
        weighted_mean_var(&xs, w).1.max(0.0).sqrt().max(1e-2)
    };
    Steps {
        psi_sd: settings.psi_scale * (v / n as f64).max(1e-16).sqrt(),
        log_eta: settings.hyper_scale * spread(&|p| p.eta.ln()),
        log_sigma2: settings.hyper_scale * spread(&|p| p.sigma2.ln()),
        log_mu: settings.mu_scale * spread(&|p| p.mu.ln()),
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    psi: usize,
    mass: usize,
    hyper: usize,
    mu: usize,
}

fn accept(log_ratio: f64, rng: &mut StreamRng) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    if log_ratio.is_nan() {
        return false;
    }
    rng.random::<f64>().ln() < log_ratio
}

fn move_one<L: Likelihood>(
    mut p: Particle,
    shared: &Shared<'_, L>,
    settings: &MoveSettings,
    steps: &Steps,
    proposal: &MassProposal,
    mut rng: StreamRng,
) -> Result<(Particle, Counts)> {
    let tau = settings.tau;
    let n = p.psi.len();
    let mut counts = Counts::default();
    let mut factor = shared.factor(p.eta)?;
    let mut signal = vec![0.0; n];
    let mut ll = shared.log_lik(&p, &mut signal);
    let mut z_new = vec![0.0; n];
    let mut psi_new = vec![0.0; n];
    let mut sig_new = vec![0.0; n];
    let free_mu = shared.priors.cross_section.is_free();
    for _ in 0..settings.sweeps {
        // background
        let step = steps.psi_sd / p.sigma2.sqrt();
        for (zn, z) in z_new.iter_mut().zip(&p.latent) {
            let e: f64 = StandardNormal.sample(&mut rng);
            *zn = z + step * e;
        }
        shared.psi(&factor, p.sigma2, &z_new, &mut psi_new);
        let ll_new = shared.likelihood.log_likelihood(&psi_new, &signal, p.mu);
        let dprior: f64 = -0.5 * z_new.iter().zip(&p.latent).map(|(a, b)| a * a - b * b).sum::<f64>();
        if accept(dprior + tau * (ll_new - ll), &mut rng) {
            std::mem::swap(&mut p.latent, &mut z_new);
            std::mem::swap(&mut p.psi, &mut psi_new);
            ll = ll_new;
            counts.psi += 1;
        }

        // mass
        if settings.mass_moves {
            let cand = proposal.sample(&mut rng);
            shared.signal(cand, &mut sig_new);
            let ll_new = shared.likelihood.log_likelihood(&p.psi, &sig_new, p.mu);
            let mp = &shared.priors.mass;
            let log_ratio = mp.log_density(cand) - mp.log_density(p.mass) + tau * (ll_new - ll)
                + proposal.log_density(p.mass)
                - proposal.log_density(cand);
            if accept(log_ratio, &mut rng) {
                p.mass = cand;
                std::mem::swap(&mut signal, &mut sig_new);
                ll = ll_new;
                counts.mass += 1;
            }
        }

        // hyperparameters
        if !settings.fix_hyper {
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e2: f64 = StandardNormal.sample(&mut rng);
            let eta_new = p.eta * (steps.log_eta * e1).exp();
            let s2_new = p.sigma2 * (steps.log_sigma2 * e2).exp();
            if let Ok(f_new) = shared.factor(eta_new) {
                shared.psi(&f_new, s2_new, &p.latent, &mut psi_new);
                let ll_new = shared.likelihood.log_likelihood(&psi_new, &signal, p.mu);
                let log_ratio = shared.log_hyper(eta_new, s2_new) - shared.log_hyper(p.eta, p.sigma2)
                    + (eta_new / p.eta).ln()
                    + (s2_new / p.sigma2).ln()
                    + tau * (ll_new - ll);
                if accept(log_ratio, &mut rng) {
                    p.eta = eta_new;
                    p.sigma2 = s2_new;
                    factor = f_new;
                    std::mem::swap(&mut p.psi, &mut psi_new);
                    ll = ll_new;
                    counts.hyper += 1;
                }
            }
        }

        if free_mu {
            let e: f64 = StandardNormal.sample(&mut rng);
            let mu_new = p.mu * (steps.log_mu * e).exp();
            let ll_new = shared.likelihood.log_likelihood(&p.psi, &signal, mu_new);
            let cs = &shared.priors.cross_section;
            let log_ratio = cs.log_density(mu_new) - cs.log_density(p.mu) + (mu_new / p.mu).ln() + tau * (ll_new - ll);
            if accept(log_ratio, &mut rng) {
                p.mu = mu_new;
                ll = ll_new;
                counts.mu += 1;
            }
        }
    }
    Ok((p, counts))
}

/// One round of Metropolis-Hastings sweeps targeting prior times likelihood^tau.
pub fn move_particles<L: Likelihood>(
    ensemble: &ParticleEnsemble,
    likelihood: &L,
    edges: &[f64],
    template: &SignalTemplate,
    priors: &Priors,
    settings: &MoveSettings,
    seed: u64,
    stream_index: u64,
) -> Result<(ParticleEnsemble, MoveStats)> {
    if !(settings.tau > 0.0 && settings.tau <= 1.0) {
        return Err(Error::domain("move temperature must lie in (0, 1]"));
    }
    let shared = Shared {
        likelihood,
        edges,
        grid: rescaled_midpoints(edges),
        mean: priors.background.prior_mean_vec(edges),
        template,
        priors,
    };
    if ensemble.particles.iter().any(|p| p.latent.len() != shared.mean.len()) {
        return Err(Error::usage("particles lack whitened coordinates for this binning"));
    }
    let steps = ensemble_steps(ensemble, settings);
    let proposal = MassProposal::from_ensemble(ensemble, priors.mass, settings.defensive_weight, settings.proposal_grid)?;
    let moved: Vec<(Particle, Counts)> = ensemble
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let rng = stream(seed, &[stream_index, i as u64]);
            move_one(p.clone(), &shared, settings, &steps, &proposal, rng)
        })
        .collect::<Result<_>>()?;
    let total = (ensemble.len() * settings.sweeps.max(1)) as f64;
    let mut c = Counts::default();
    let mut particles = Vec::with_capacity(moved.len());
    for (p, k) in moved {
        c.psi += k.psi;
        c.mass += k.mass;
        c.hyper += k.hyper;
        c.mu += k.mu;
        particles.push(p);
    }
    let stats = MoveStats {
        accept_psi: c.psi as f64 / total,
        accept_mass: c.mass as f64 / total,
        accept_hyper: c.hyper as f64 / total,
        accept_mu: c.mu as f64 / total,
    };
    Ok((
        ParticleEnsemble {
            particles,
            normalized_weights: ensemble.normalized_weights.clone(),
            rng_seed_record: ensemble.rng_seed_record,
        },
        stats,
    ))
}

fn adapt(scale: f64, rate: f64, target: f64) -> f64 {
    (scale * (1.5 * (rate - target)).exp()).clamp(1e-4, 10.0)
}

fn validate_config(cfg: &SmcConfig, n_bins: usize, priors: &Priors) -> Result<()> {
    if cfg.n_particles < 2 {
        return Err(Error::domain("at least two particles are required"));
    }
    if !(cfg.defensive_weight > 0.0 && cfg.defensive_weight <= 1.0) {
        return Err(Error::domain("defensive weight must lie in (0, 1]"));
    }
    if !(cfg.target_accept > 0.0 && cfg.target_accept < 1.0) {
        return Err(Error::domain("target acceptance must lie in (0, 1)"));
    }
    if let Some((e, s)) = cfg.fix_hyper {
        if !(e > 0.0 && s > 0.0 && e.is_finite() && s.is_finite()) {
            return Err(Error::domain("fixed hyperparameters must be positive"));
        }
    }
    if n_bins == 0 {
        return Err(Error::usage("empty spectrum"));
    }
    priors.background.validate()
}

/// Runs the sampler against the Poisson likelihood of `data`.
pub fn run_smc(data: &BinnedSpectrum, template: &SignalTemplate, priors: &Priors, cfg: &SmcConfig) -> Result<SmcOutput> {
    run_smc_with(&CountData::new(data.counts()), data.edges(), template, priors, cfg)
}

pub fn run_smc_with<L: Likelihood>(
    likelihood: &L,
    edges: &[f64],
    template: &SignalTemplate,
    priors: &Priors,
    cfg: &SmcConfig,
) -> Result<SmcOutput> {
    run_smc_observed(likelihood, edges, template, priors, cfg, &mut |_| {})
}

/// As [`run_smc_with`], handing each temperature record to `observe` as it
/// is produced so that diagnostics survive a failed run.
pub fn run_smc_observed<L: Likelihood>(
    likelihood: &L,
    edges: &[f64],
    template: &SignalTemplate,
    priors: &Priors,
    cfg: &SmcConfig,
    observe: &mut dyn FnMut(&TemperatureRecord),
) -> Result<SmcOutput> {
    validate_edges(edges)?;
    let n_bins = edges.len() - 1;
    validate_config(cfg, n_bins, priors)?;
    let shared = Shared {
        likelihood,
        edges,
        grid: rescaled_midpoints(edges),
        mean: priors.background.prior_mean_vec(edges),
        template,
        priors,
    };
    let particles: Vec<Particle> = (0..cfg.n_particles)
        .into_par_iter()
        .map(|i| shared.sample_prior(i, cfg.seed, cfg.fix_hyper))
        .collect::<Result<_>>()?;
    let mut ens = ParticleEnsemble::equally_weighted(particles, cfg.seed)?;
    let mut settings = MoveSettings {
        tau: 0.0,
        sweeps: cfg.moves_per_temp,
        psi_scale: cfg.initial_psi_scale.unwrap_or(2.38 / (n_bins as f64).sqrt()),
        hyper_scale: 1.0,
        mu_scale: 1.0,
        mass_moves: true,
        defensive_weight: cfg.defensive_weight,
        proposal_grid: cfg.proposal_grid,
        fix_hyper: cfg.fix_hyper.is_some(),
    };
    let mut trace = Vec::new();
    let mut history = Vec::new();
    let mut log_evidence = 0.0;
    let taus = cfg.schedule.taus();
    let mut final_weighted = ens.clone();
    for t in 1..taus.len() {
        let mut signal = vec![0.0; n_bins];
        let ll: Vec<f64> = ens.particles.iter().map(|p| shared.log_lik(p, &mut signal)).collect();
        let upd = increment_weights(&mut ens, &ll, taus[t] - taus[t - 1]);
        if upd.degenerate {
            return Err(Error::DegenerateEnsemble { temperature: t });
        }
        log_evidence += upd.log_normalizer;
        let p_absent_hat = ens.absent_fraction();
        if t + 1 == taus.len() {
            final_weighted = ens.clone();
        }
        let resampled = resample(&ens, crate::rng::derive_seed(cfg.seed, &[t as u64]));
        let mut stats = MoveStats::default();
        ens = if cfg.moves_per_temp > 0 {
            settings.tau = taus[t];
            let (moved, s) =
                move_particles(&resampled, likelihood, edges, template, priors, &settings, cfg.seed, t as u64)?;
            stats = s;
            settings.psi_scale = adapt(settings.psi_scale, s.accept_psi, cfg.target_accept);
            if !settings.fix_hyper {
                settings.hyper_scale = adapt(settings.hyper_scale, s.accept_hyper, cfg.target_accept);
            }
            if priors.cross_section.is_free() {
                settings.mu_scale = adapt(settings.mu_scale, s.accept_mu, cfg.target_accept);
            }
            moved
        } else {
            resampled
        };
        ens.rng_seed_record = cfg.seed;
        let record = TemperatureRecord {
            index: t,
            tau: taus[t],
            ess: upd.ess,
            p_absent_hat,
            log_evidence_increment: upd.log_normalizer,
            accept_psi: stats.accept_psi,
            accept_mass: stats.accept_mass,
            accept_hyper: stats.accept_hyper,
            accept_mu: stats.accept_mu,
        };
        observe(&record);
        trace.push(record);
        if cfg.record_history {
            history.push(ens.clone());
        }
    }
    Ok(SmcOutput { ensemble: ens, final_weighted, trace, history, log_evidence })
}

/// How the mass KDE bandwidth is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum BandwidthRule {
    #[default]
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub p_absent_hat: f64,
    /// One-sided 90% upper confidence bound on the Absent probability.
    pub p_absent_upper90: f64,
    pub effective_sample_size: f64,
    /// Continuous part of the mass posterior; integrates to `1 - p_absent_hat`.
    pub mass_kde: Option<GridDensity>,
    pub bandwidth: Option<f64>,
    pub map_mass: MassHypothesis,
    /// 5%, 50% and 95% weighted quantiles of `mu` when it is sampled.
    pub mu_quantiles: Option<[f64; 3]>,
}

/// One-sided 90% upper bound for a binomial proportion with `k` of `n`.
pub fn upper_bound_90(k: f64, n: f64) -> f64 {
    if n <= 0.0 {
        return 1.0;
    }
    if k <= 0.0 {
        return 1.0 - 0.1f64.powf(1.0 / n);
    }
    if k >= n {
        return 1.0;
    }
    use statrs::distribution::{Beta, ContinuousCDF};
    match Beta::new(k + 1.0, n - k) {
        Ok(b) => b.inverse_cdf(0.9),
        Err(_) => 1.0,
    }
}

pub fn posterior_summary(
    ensemble: &ParticleEnsemble,
    window: (f64, f64),
    rule: BandwidthRule,
    cross_section: CrossSection,
) -> Result<PosteriorSummary> {
    let w = &ensemble.normalized_weights;
    let p_absent_hat = ensemble.absent_fraction();
    let n_eff = ensemble.ess();
    let (ms, ws): (Vec<f64>, Vec<f64>) = ensemble
        .particles
        .iter()
        .zip(w)
        .filter_map(|(p, w)| p.mass.mass().map(|m| (m, *w)))
        .filter(|(_, w)| *w > 0.0)
        .unzip();
    let (mut mass_kde, mut bandwidth) = (None, None);
    let mut map_mass = MassHypothesis::Absent;
    if !ms.is_empty() {
        let h = match rule {
            BandwidthRule::Silverman => silverman_bandwidth(&ms, &ws).max(1e-3 * (window.1 - window.0)),
            BandwidthRule::Fixed(h) if h > 0.0 => h,
            BandwidthRule::Fixed(_) => return Err(Error::domain("KDE bandwidth must be positive")),
        };
        let grid = uniform_grid(window.0, window.1, 4001);
        let d = GridDensity::new(grid.clone(), weighted_kde_on_grid(&ms, &ws, h, &grid))?;
        let total = d.total_mass();
        if total > 0.0 {
            let d = d.scaled((1.0 - p_absent_hat) / total);
            if p_absent_hat <= 0.5 {
                map_mass = MassHypothesis::Present(d.argmax().clamp(grid[1], grid[grid.len() - 2]));
            }
            mass_kde = Some(d);
        }
        bandwidth = Some(h);
    }
    let mu_quantiles = if cross_section.is_free() {
        let mus: Vec<f64> = ensemble.particles.iter().map(|p| p.mu).collect();
        let q = |p| weighted_quantile(&mus, w, p).unwrap_or(f64::NAN);
        Some([q(0.05), q(0.5), q(0.95)])
    } else {
        None
    };
    Ok(PosteriorSummary {
        p_absent_hat,
        p_absent_upper90: upper_bound_90(p_absent_hat * n_eff, n_eff),
        effective_sample_size: n_eff,
        mass_kde,
        bandwidth,
        map_mass,
        mu_quantiles,
    })
}

/// Weighted sample quantile of the Present masses, normalized within the
/// Present sub-population.
pub fn present_mass_quantile(ensemble: &ParticleEnsemble, p: f64) -> Option<f64> {
    let (ms, ws): (Vec<f64>, Vec<f64>) = ensemble
        .particles
        .iter()
        .zip(&ensemble.normalized_weights)
        .filter_map(|(q, w)| q.mass.mass().map(|m| (m, *w)))
        .unzip();
    weighted_quantile(&ms, &ws, p)
}

/// Joint posterior summary of `(mass, mu)` over the Present particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSummary {
    pub mode: (f64, f64),
    /// Bounding box of the highest-density particles holding `level` of the Present weight.
    pub box_mass: (f64, f64),
    pub box_mu: (f64, f64),
    pub level: f64,
}

pub fn joint_mass_mu_summary(ensemble: &ParticleEnsemble, level: f64) -> Option<JointSummary> {
    let mut ms = Vec::new();
    let mut mus = Vec::new();
    let mut ws = Vec::new();
    for (p, w) in ensemble.particles.iter().zip(&ensemble.normalized_weights) {
        if let (Some(m), true) = (p.mass.mass(), *w > 0.0) {
            ms.push(m);
            mus.push(p.mu);
            ws.push(*w);
        }
    }
    if ms.is_empty() {
        return None;
    }
    let dens = crate::kde::weighted_kde2_at_samples(&ms, &mus, &ws);
    let mut order: Vec<usize> = (0..ms.len()).collect();
    order.sort_by(|&a, &b| dens[b].total_cmp(&dens[a]).then(a.cmp(&b)));
    let total: f64 = ws.iter().sum();
    let (mut acc, mut bm, mut bu) = (0.0, (f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
    for &i in &order {
        bm = (bm.0.min(ms[i]), bm.1.max(ms[i]));
        bu = (bu.0.min(mus[i]), bu.1.max(mus[i]));
        acc += ws[i];
        if acc >= level * total {
            break;
        }
    }
    Some(JointSummary { mode: (ms[order[0]], mus[order[0]]), box_mass: bm, box_mu: bu, level })
}
