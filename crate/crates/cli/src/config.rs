use std::path::Path;

use anyhow::{Context, Result};
use bumpdecide::calibrate::WeightModel;
use bumpdecide::laplace::LaplaceConfig;
use bumpdecide::simulate::ScenarioConfig;
use bumpdecide::smc::{BandwidthRule, SmcConfig};
use bumpdecide::{BinnedSpectrum, CrossSection, GpBackgroundPrior, MassPrior, Priors};
use serde::{Deserialize, Serialize};

/// Layered configuration; every section and field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub scenario: ScenarioConfig,
    pub priors: PriorConfig,
    pub smc: SmcConfig,
    pub laplace: LaplaceConfig,
    pub calibration: CalibrationSection,
    pub decision: DecisionSection,
    pub gv: GvSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeanSource {
    /// The scenario's reference background curve.
    #[default]
    Scenario,
    /// Least-squares Bernstein fit to the log counts per unit mass.
    Fit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub p_absent: f64,
    pub hyperprior_shape: f64,
    pub hyperprior_scale: f64,
    pub background_mean: MeanSource,
    /// Explicit Bernstein coefficients; overrides `background_mean`.
    pub mean_coeffs: Option<[f64; 5]>,
    pub cross_section: CrossSection,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            p_absent: 0.5,
            hyperprior_shape: 1.0,
            hyperprior_scale: 1.0,
            background_mean: MeanSource::Scenario,
            mean_coeffs: None,
            cross_section: CrossSection::Fixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub alpha1: f64,
    pub alpha2: f64,
    pub n_mc_discovery: usize,
    pub n_mc_exclusion: usize,
    /// Masses at which exclusion thresholds are simulated; defaults to a
    /// `coarse_spacing` grid over the window.
    pub coarse_grid: Option<Vec<f64>>,
    pub coarse_spacing: f64,
    pub fine_spacing: f64,
    pub smoothing_bandwidth: f64,
    /// Mass spacing of each replicate's Laplace scan.
    pub scan_spacing: f64,
    pub hyper: Option<(f64, f64)>,
    pub mu: f64,
    /// Background model for the importance weights.
    pub weights: WeightModel,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            alpha1: 3e-7,
            alpha2: 0.05,
            n_mc_discovery: 5000,
            n_mc_exclusion: 200,
            coarse_grid: None,
            coarse_spacing: 5.0,
            fine_spacing: 0.25,
            smoothing_bandwidth: 2.0,
            scan_spacing: 0.25,
            hyper: None,
            mu: 1.0,
            weights: WeightModel::Prior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionSection {
    pub credible_level: f64,
    pub bandwidth: BandwidthRule,
    /// Probability mass of the joint `(mass, mu)` box in free cross-section mode.
    pub joint_level: f64,
}

impl Default for DecisionSection {
    fn default() -> Self {
        DecisionSection { credible_level: 0.95, bandwidth: BandwidthRule::Silverman, joint_level: 0.68 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GvSection {
    pub n_null_sims: usize,
    /// Null replicates for a direct max-statistic p-value; 0 skips it.
    pub n_direct: usize,
    pub scan_spacing: f64,
    pub dof: u32,
}

impl Default for GvSection {
    fn default() -> Self {
        GvSection { n_null_sims: 1000, n_direct: 0, scan_spacing: 0.5, dof: 1 }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Config> {
        match path {
            None => Ok(Config::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn digest(&self) -> String {
        crate::io::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn priors_for(&self, spectrum: &BinnedSpectrum) -> Result<Priors> {
        let p = &self.priors;
        let coeffs = match (p.mean_coeffs, p.background_mean) {
            (Some(c), _) => c,
            (None, MeanSource::Scenario) => self.scenario.mean_coeffs(),
            (None, MeanSource::Fit) => bumpdecide::model::fit_bernstein_mean(spectrum)?,
        };
        let mut background = GpBackgroundPrior::new(coeffs);
        background.hyperprior_shape = p.hyperprior_shape;
        background.hyperprior_scale = p.hyperprior_scale;
        background.validate()?;
        Ok(Priors {
            background,
            mass: MassPrior::new(p.p_absent, spectrum.lower(), spectrum.upper())?,
            cross_section: p.cross_section,
        })
    }
}
