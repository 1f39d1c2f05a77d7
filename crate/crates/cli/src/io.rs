use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use bumpdecide::calibrate::{CalibrationResult, ExclusionCalibration};
use bumpdecide::decision::DecisionSet;
use bumpdecide::simulate::ScenarioTruth;
use bumpdecide::smc::{JointSummary, ParticleEnsemble, PosteriorSummary, TemperatureRecord};
use bumpdecide::{MassHypothesis, Priors, SignalTemplate};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance block carried by every output document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    /// SHA-256 of each input document, keyed by role.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

impl Meta {
    pub fn new(command: &str, config_sha256: String, seed: u64) -> Self {
        Meta {
            tool: "bumpdecide".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_sha256,
            seed,
            inputs: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumDoc {
    pub meta: Meta,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateDoc {
    pub meta: Meta,
    pub template: SignalTemplate,
    #[serde(default)]
    pub fit_residuals: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthDoc {
    pub meta: Meta,
    pub truth: ScenarioTruth,
    pub mean_coeffs: [f64; 5],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointSample {
    pub mass: f64,
    pub mu: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDoc {
    pub meta: Meta,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub template: SignalTemplate,
    pub priors: Priors,
    pub summary: PosteriorSummary,
    pub log_evidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<JointSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub joint_sample: Vec<JointSample>,
    pub trace: Vec<TemperatureRecord>,
    pub ensemble: ParticleEnsemble,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationDoc {
    pub meta: Meta,
    pub alpha1: f64,
    pub alpha2: f64,
    pub q_absent: f64,
    pub discovery: CalibrationResult,
    pub exclusion: ExclusionCalibration,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotRow {
    pub mass: f64,
    pub density: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionDoc {
    pub meta: Meta,
    pub p_absent: f64,
    pub q_absent: f64,
    pub decision: DecisionSet,
    pub includes_absent: bool,
    pub credible_level: f64,
    pub credible_interval: Option<(f64, f64)>,
    pub decision_covers_credible: Option<bool>,
    pub map_mass: MassHypothesis,
    pub plot: Vec<PlotRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectPValue {
    pub p: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GvDoc {
    pub meta: Meta,
    pub observed_max: f64,
    pub observed_argmax: f64,
    pub local_p: f64,
    pub global_p: f64,
    pub expected_upcrossings: f64,
    pub stderr: f64,
    pub n_null_sims: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct: Option<DirectPValue>,
    pub scan: Vec<(f64, f64)>,
}

pub fn read_doc<T: DeserializeOwned>(path: &Path) -> Result<(T, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let doc = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok((doc, sha256_hex(&bytes)))
}

pub fn write_doc<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// One mass per line; blank lines and `#` comments are skipped.
pub fn read_events(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| l.parse::<f64>().with_context(|| format!("{}:{}: not a number", path.display(), i + 1)))
        .collect()
}
