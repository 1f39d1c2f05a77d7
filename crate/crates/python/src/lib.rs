//! Python bindings. Configuration objects cross the boundary as JSON strings
//! with the same field names as the Rust structs; results come back as
//! native Python values.

use bumpdecide::calibrate::{calibrate_discovery, calibrate_exclusion, CalibrationConfig};
use bumpdecide::decision::{bayes_rule as rust_bayes_rule, LossSpec, MassPosterior};
use bumpdecide::kde::GridDensity;
use bumpdecide::laplace::{default_mass_grid, LaplaceConfig, MassScanner};
use bumpdecide::simulate::{make_reference_scenario, ScenarioConfig};
use bumpdecide::smc::{posterior_summary, present_mass_quantile, run_smc, BandwidthRule, ParticleEnsemble, SmcConfig};
use bumpdecide::{BinnedSpectrum, CrossSection, GpBackgroundPrior, MassPrior, Priors, SignalTemplate};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

fn err(e: bumpdecide::Error) -> PyErr {
    match e {
        bumpdecide::Error::Domain(_) | bumpdecide::Error::Usage(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Signal shape interpolated between anchor masses.
#[pyclass(name = "SignalTemplate", from_py_object)]
#[derive(Clone)]
struct PyTemplate {
    inner: SignalTemplate,
}

#[pymethods]
impl PyTemplate {
    #[new]
    fn new(masses: Vec<f64>, scales: Vec<f64>, widths: Vec<f64>) -> PyResult<Self> {
        Ok(PyTemplate { inner: SignalTemplate::new(masses, scales, widths).map_err(err)? })
    }

    /// `(scale, width)` at mass `m`.
    fn params_at(&self, m: f64) -> (f64, f64) {
        self.inner.params_at(m)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }
}

/// Simulated spectrum with its fitted template and background prior.
#[pyclass(name = "Scenario", skip_from_py_object)]
struct PyScenario {
    #[pyo3(get)]
    edges: Vec<f64>,
    #[pyo3(get)]
    counts: Vec<u64>,
    #[pyo3(get)]
    template: PyTemplate,
    #[pyo3(get)]
    mean_coeffs: [f64; 5],
    #[pyo3(get)]
    true_mass: Option<f64>,
}

#[pyfunction]
#[pyo3(signature = (seed, config_json=None))]
fn simulate(seed: u64, config_json: Option<&str>) -> PyResult<PyScenario> {
    let cfg: ScenarioConfig = parse(config_json)?;
    let sc = make_reference_scenario(&cfg, seed).map_err(err)?;
    Ok(PyScenario {
        edges: sc.spectrum.edges().to_vec(),
        counts: sc.spectrum.counts().to_vec(),
        template: PyTemplate { inner: sc.template },
        mean_coeffs: sc.prior.mean_coeffs,
        true_mass: sc.truth.mass.mass(),
    })
}

fn priors(edges: &[f64], mean_coeffs: [f64; 5], p_absent: f64) -> PyResult<Priors> {
    Ok(Priors {
        background: GpBackgroundPrior::new(mean_coeffs),
        mass: MassPrior::new(p_absent, edges[0], edges[edges.len() - 1]).map_err(err)?,
        cross_section: CrossSection::Fixed,
    })
}

/// Weighted particle approximation to the joint posterior.
#[pyclass(name = "Posterior", skip_from_py_object)]
struct PyPosterior {
    edges: Vec<f64>,
    template: SignalTemplate,
    priors: Priors,
    ensemble: ParticleEnsemble,
    #[pyo3(get)]
    p_absent: f64,
    #[pyo3(get)]
    map_mass: Option<f64>,
    #[pyo3(get)]
    log_evidence: f64,
    density: Option<GridDensity>,
}

#[pymethods]
impl PyPosterior {
    /// Equal-tail interval from the weighted Present masses.
    fn credible_interval(&self, level: f64) -> Option<(f64, f64)> {
        let t = 0.5 * (1.0 - level);
        present_mass_quantile(&self.ensemble, t).zip(present_mass_quantile(&self.ensemble, 1.0 - t))
    }

    /// `(grid, density)` of the continuous part, or `None` if every particle is Absent.
    fn mass_density(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.density.as_ref().map(|d| (d.grid.clone(), d.density.clone()))
    }

    /// Discovery threshold at level `alpha1`.
    #[pyo3(signature = (alpha1, n_mc=5000, seed=0))]
    fn calibrate_discovery(&self, py: Python<'_>, alpha1: f64, n_mc: usize, seed: u64) -> PyResult<f64> {
        let cfg = CalibrationConfig { n_mc, ..CalibrationConfig::default() };
        py.detach(|| {
            calibrate_discovery(alpha1, &self.ensemble, &self.edges, &self.template, &self.priors, &cfg, seed)
        })
        .map(|r| r.q_absent)
        .map_err(err)
    }

    /// Smoothed exclusion thresholds `(fine_grid, q)` from simulations at `coarse`.
    #[pyo3(signature = (alpha2, coarse, n_mc=200, seed=0, bandwidth=2.0, fine_spacing=0.25))]
    #[allow(clippy::too_many_arguments)]
    fn calibrate_exclusion(
        &self,
        py: Python<'_>,
        alpha2: f64,
        coarse: Vec<f64>,
        n_mc: usize,
        seed: u64,
        bandwidth: f64,
        fine_spacing: f64,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let cfg = CalibrationConfig { n_mc, ..CalibrationConfig::default() };
        let fine = default_mass_grid(self.priors.mass.lower, self.priors.mass.upper, fine_spacing);
        py.detach(|| {
            calibrate_exclusion(
                alpha2,
                &coarse,
                &fine,
                &self.ensemble,
                &self.edges,
                &self.template,
                &self.priors,
                &cfg,
                seed,
                bandwidth,
            )
        })
        .map(|r| (r.fine_grid, r.fine_thresholds))
        .map_err(err)
    }

    fn ensemble_json(&self) -> PyResult<String> {
        to_json(&self.ensemble)
    }
}

/// Runs the tempered sampler. `smc_json` overrides sampler settings.
#[pyfunction]
#[pyo3(signature = (edges, counts, template, mean_coeffs, p_absent=0.5, seed=0, smc_json=None))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    edges: Vec<f64>,
    counts: Vec<u64>,
    template: PyTemplate,
    mean_coeffs: [f64; 5],
    p_absent: f64,
    seed: u64,
    smc_json: Option<&str>,
) -> PyResult<PyPosterior> {
    let mut cfg: SmcConfig = parse(smc_json)?;
    cfg.seed = seed;
    let data = BinnedSpectrum::new(edges.clone(), counts).map_err(err)?;
    let priors = priors(&edges, mean_coeffs, p_absent)?;
    let out = py.detach(|| run_smc(&data, &template.inner, &priors, &cfg)).map_err(err)?;
    let summary = posterior_summary(&out.ensemble, (data.lower(), data.upper()), BandwidthRule::Silverman, CrossSection::Fixed)
        .map_err(err)?;
    Ok(PyPosterior {
        edges,
        template: template.inner,
        priors,
        ensemble: out.ensemble,
        p_absent: summary.p_absent_hat,
        map_mass: summary.map_mass.mass(),
        log_evidence: out.log_evidence,
        density: summary.mass_kde,
    })
}

/// Laplace mass scan at fixed background hyperparameters. Returns
/// `(grid, density, p_absent)`.
#[pyfunction]
#[pyo3(signature = (edges, counts, template, mean_coeffs, eta, sigma2, p_absent=0.5, spacing=0.25))]
#[allow(clippy::too_many_arguments)]
fn scan(
    edges: Vec<f64>,
    counts: Vec<u64>,
    template: PyTemplate,
    mean_coeffs: [f64; 5],
    eta: f64,
    sigma2: f64,
    p_absent: f64,
    spacing: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    let mut pr = priors(&edges, mean_coeffs, p_absent)?;
    pr.background = pr.background.with_hyper(eta, sigma2);
    let grid = default_mass_grid(pr.mass.lower, pr.mass.upper, spacing);
    let scanner =
        MassScanner::new(&edges, &template.inner, &pr, &grid, LaplaceConfig::default()).map_err(err)?;
    let s = scanner.scan(&counts).map_err(err)?;
    Ok((s.grid, s.density, s.p_absent))
}

/// Bayes decision set for the posterior `(p_absent, grid, density)` under
/// thresholds `q(m)` and `q_absent`. Returns `(intervals, includes_absent)`.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn bayes_rule(
    p_absent: f64,
    grid: Vec<f64>,
    density: Vec<f64>,
    threshold_grid: Vec<f64>,
    thresholds: Vec<f64>,
    q_absent: f64,
    window: (f64, f64),
) -> PyResult<(Vec<(f64, f64)>, bool)> {
    let post = MassPosterior::new(p_absent, GridDensity::new(grid, density).map_err(err)?).map_err(err)?;
    let spec = LossSpec::from_thresholds(threshold_grid, thresholds, q_absent).map_err(err)?;
    let set = rust_bayes_rule(&post, &spec, window).map_err(err)?;
    Ok((set.intervals, set.includes_absent))
}

#[pymodule]
fn bumpdecide_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTemplate>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyPosterior>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(scan, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_rule, m)?)?;
    Ok(())
}
