use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bumpdecide::calibrate::{
    calibrate_discovery, calibrate_exclusion, gross_vitells_global_p, lrt_scan, CalibrationConfig,
};
use bumpdecide::decision::{bayes_rule, DecisionSet, LossSpec, MassPosterior};
use bumpdecide::kde::GridDensity;
use bumpdecide::laplace::default_mass_grid;
use bumpdecide::model::{signal_bin_integrals, CountData};
use bumpdecide::rng::derive_seed;
use bumpdecide::simulate::{draw_counts_with_background, make_reference_scenario};
use bumpdecide::smc::{joint_mass_mu_summary, posterior_summary, present_mass_quantile, run_smc_observed};
use bumpdecide::{BinnedSpectrum, MassHypothesis};
use rayon::prelude::*;

use crate::config::Config;
use crate::io::{
    read_doc, read_events, write_doc, CalibrationDoc, DecisionDoc, DirectPValue, GvDoc, JointSample, Meta, PlotRow,
    PosteriorDoc, SpectrumDoc, TemplateDoc, TruthDoc,
};
use crate::Common;

pub fn simulate(cfg: &Config, common: &Common, output: &Path, no_signal: bool) -> Result<()> {
    let mut scenario = cfg.scenario.clone();
    if no_signal {
        scenario.inject_mass = None;
    }
    let sc = make_reference_scenario(&scenario, common.seed)?;
    let meta = Meta::new("simulate", cfg.digest(), common.seed);
    write_doc(
        &output.join("spectrum.json"),
        &SpectrumDoc { meta: meta.clone(), edges: sc.spectrum.edges().to_vec(), counts: sc.spectrum.counts().to_vec() },
    )?;
    write_doc(
        &output.join("template.json"),
        &TemplateDoc { meta: meta.clone(), template: sc.template, fit_residuals: sc.template_fit_residuals },
    )?;
    write_doc(&output.join("truth.json"), &TruthDoc { meta, truth: sc.truth, mean_coeffs: sc.prior.mean_coeffs })
}

pub fn fit(
    cfg: &Config,
    common: &Common,
    spectrum: Option<&Path>,
    events: Option<&Path>,
    template: &Path,
    output: &Path,
) -> Result<()> {
    let mut meta = Meta::new("fit", cfg.digest(), common.seed);
    let data = match (spectrum, events) {
        (Some(p), _) => {
            let (doc, digest) = read_doc::<SpectrumDoc>(p)?;
            meta.inputs.insert("spectrum".into(), digest);
            BinnedSpectrum::new(doc.edges, doc.counts)?
        }
        (None, Some(p)) => {
            let ev = read_events(p)?;
            let s = &cfg.scenario;
            BinnedSpectrum::from_events(&ev, BinnedSpectrum::uniform_edges(s.lower, s.upper, s.n_bins))?
        }
        (None, None) => bail!("either --spectrum or --events is required"),
    };
    let (tdoc, digest) = read_doc::<TemplateDoc>(template)?;
    meta.inputs.insert("template".into(), digest);
    let priors = cfg.priors_for(&data)?;
    let mut smc = cfg.smc.clone();
    smc.seed = common.seed;

    // one JSON line per temperature, flushed as produced so a failed run keeps its history
    let mut trace = match &common.trace {
        Some(path) => Some(std::io::BufWriter::new(
            std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => None,
    };
    let mut trace_err = None;
    let run = run_smc_observed(&CountData::new(data.counts()), data.edges(), &tdoc.template, &priors, &smc, &mut |r| {
        if let (Some(w), None) = (trace.as_mut(), &trace_err) {
            let line = serde_json::to_string(r).map_err(anyhow::Error::from);
            if let Err(e) = line.and_then(|l| writeln!(w, "{l}").and_then(|_| w.flush()).map_err(Into::into)) {
                trace_err = Some(e);
            }
        }
    });
    if let Some(e) = trace_err {
        return Err(e.context("writing trace"));
    }
    let out = run.context("sampler failed")?;

    let window = (data.lower(), data.upper());
    let summary = posterior_summary(&out.ensemble, window, cfg.decision.bandwidth, priors.cross_section)?;
    let (joint, joint_sample) = if priors.cross_section.is_free() {
        let sample = out
            .ensemble
            .particles
            .iter()
            .zip(&out.ensemble.normalized_weights)
            .filter_map(|(p, w)| p.mass.mass().map(|m| JointSample { mass: m, mu: p.mu, weight: *w }))
            .collect();
        (joint_mass_mu_summary(&out.ensemble, cfg.decision.joint_level), sample)
    } else {
        (None, Vec::new())
    };
    let mut ensemble = out.ensemble;
    for p in &mut ensemble.particles {
        p.latent.clear();
    }
    let doc = PosteriorDoc {
        meta,
        edges: data.edges().to_vec(),
        counts: data.counts().to_vec(),
        template: tdoc.template,
        priors,
        summary,
        log_evidence: out.log_evidence,
        joint,
        joint_sample,
        trace: out.trace,
        ensemble,
    };
    write_doc(output, &doc)
}

pub fn calibrate(cfg: &Config, common: &Common, posterior: &Path, output: &Path) -> Result<()> {
    let (post, digest) = read_doc::<PosteriorDoc>(posterior)?;
    let mut meta = Meta::new("calibrate", cfg.digest(), common.seed);
    meta.inputs.insert("posterior".into(), digest);
    let cal = &cfg.calibration;
    let mut laplace = cfg.laplace;
    laplace.grid_spacing = cal.scan_spacing;
    let mut ccfg = CalibrationConfig {
        n_mc: cal.n_mc_discovery,
        laplace,
        scan_grid: None,
        hyper: cal.hyper,
        mu: cal.mu,
        weights: cal.weights,
    };
    let (lower, upper) = (post.priors.mass.lower, post.priors.mass.upper);

    let discovery = calibrate_discovery(
        cal.alpha1,
        &post.ensemble,
        &post.edges,
        &post.template,
        &post.priors,
        &ccfg,
        derive_seed(common.seed, &[1]),
    )?;
    let coarse = match &cal.coarse_grid {
        Some(g) => g.clone(),
        None => default_mass_grid(lower, upper, cal.coarse_spacing),
    };
    let fine = default_mass_grid(lower, upper, cal.fine_spacing);
    ccfg.n_mc = cal.n_mc_exclusion;
    let exclusion = calibrate_exclusion(
        cal.alpha2,
        &coarse,
        &fine,
        &post.ensemble,
        &post.edges,
        &post.template,
        &post.priors,
        &ccfg,
        derive_seed(common.seed, &[2]),
        cal.smoothing_bandwidth,
    )?;
    let doc = CalibrationDoc { meta, alpha1: cal.alpha1, alpha2: cal.alpha2, q_absent: discovery.q_absent, discovery, exclusion };
    write_doc(output, &doc)
}

pub fn decide(cfg: &Config, common: &Common, posterior: &Path, calibration: &Path, output: &Path) -> Result<()> {
    let (post, pd) = read_doc::<PosteriorDoc>(posterior)?;
    let (cal, cd) = read_doc::<CalibrationDoc>(calibration)?;
    let mut meta = Meta::new("decide", cfg.digest(), common.seed);
    meta.inputs.insert("posterior".into(), pd);
    meta.inputs.insert("calibration".into(), cd);
    let window = (post.priors.mass.lower, post.priors.mass.upper);
    let p_absent = post.summary.p_absent_hat;
    let density = match &post.summary.mass_kde {
        Some(d) => d.clone(),
        None => GridDensity::new(vec![window.0, window.1], vec![0.0, 0.0])?,
    };
    let posterior = MassPosterior::new(p_absent, density)?;
    // a threshold of exactly 1 excludes Absent whenever p_absent < 1
    let q_absent = cal.q_absent.clamp(f64::MIN_POSITIVE, 1.0 - 1e-12);
    let ex = &cal.exclusion;
    let spec = LossSpec::from_thresholds(ex.fine_grid.clone(), ex.fine_thresholds.clone(), q_absent)?;
    let set = bayes_rule(&posterior, &spec, window)?;
    let level = cfg.decision.credible_level;
    let tail = 0.5 * (1.0 - level);
    let credible = present_mass_quantile(&post.ensemble, tail).zip(present_mass_quantile(&post.ensemble, 1.0 - tail));
    let covers = credible.map(|(a, b)| DecisionSet::new(vec![(a, b)], false).map(|c| set.covers(&c))).transpose()?;
    let plot = ex
        .fine_grid
        .iter()
        .zip(&ex.fine_thresholds)
        .map(|(&m, &q)| PlotRow { mass: m, density: posterior.eval(m), threshold: q })
        .collect();
    let doc = DecisionDoc {
        meta,
        p_absent,
        q_absent: cal.q_absent,
        includes_absent: set.includes_absent,
        decision: set,
        credible_level: level,
        credible_interval: credible,
        decision_covers_credible: covers,
        map_mass: post.summary.map_mass,
        plot,
    };
    write_doc(output, &doc)
}

pub fn gv_baseline(cfg: &Config, common: &Common, spectrum: &Path, template: &Path, output: &Path) -> Result<()> {
    let (sdoc, sd) = read_doc::<SpectrumDoc>(spectrum)?;
    let (tdoc, td) = read_doc::<TemplateDoc>(template)?;
    let mut meta = Meta::new("gv-baseline", cfg.digest(), common.seed);
    meta.inputs.insert("spectrum".into(), sd);
    meta.inputs.insert("template".into(), td);
    let data = BinnedSpectrum::new(sdoc.edges, sdoc.counts)?;
    let priors = cfg.priors_for(&data)?;
    let edges = data.edges();
    let background: Vec<f64> = priors.background.prior_mean_vec(edges).iter().map(|v| v.exp()).collect();
    let gv = &cfg.gv;
    let grid = default_mass_grid(data.lower(), data.upper(), gv.scan_spacing);
    if grid.is_empty() {
        bail!("scan spacing leaves no interior masses");
    }
    let signals: Vec<Vec<f64>> =
        grid.iter().map(|&m| signal_bin_integrals(MassHypothesis::Present(m), &tdoc.template, edges)).collect();
    let zero = vec![0.0; background.len()];
    let null_scan = |s: u64| lrt_scan(&draw_counts_with_background(&background, &zero, 0.0, s), &background, &signals);

    let observed = lrt_scan(data.counts(), &background, &signals);
    let (k, observed_max) =
        observed.iter().copied().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b });
    let g = gross_vitells_global_p(observed_max, gv.dof, gv.n_null_sims, null_scan, derive_seed(common.seed, &[1]))?;
    let direct = (gv.n_direct > 0).then(|| {
        let hits = (0..gv.n_direct)
            .into_par_iter()
            .filter(|&i| {
                null_scan(derive_seed(common.seed, &[2, i as u64])).iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    > observed_max
            })
            .count();
        let p = hits as f64 / gv.n_direct as f64;
        DirectPValue { p, stderr: (p * (1.0 - p) / gv.n_direct as f64).sqrt(), n: gv.n_direct }
    });
    let doc = GvDoc {
        meta,
        observed_max,
        observed_argmax: grid[k],
        local_p: g.local_p,
        global_p: g.global_p,
        expected_upcrossings: g.expected_upcrossings,
        stderr: g.stderr,
        n_null_sims: g.n_null_sims,
        direct,
        scan: grid.iter().copied().zip(observed).collect(),
    };
    write_doc(output, &doc)
}
