//! Losses, Bayes risk and the Bayes decision set over `{Absent} ∪ (m0, mn)`.

use serde::{Deserialize, Serialize};

use crate::kde::GridDensity;
use crate::model::MassHypothesis;
use crate::{Error, Result};

/// A positive function of mass: constant, or tabulated and interpolated
/// linearly with constant extension past the end nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossCurve {
    Constant { value: f64 },
    Tabulated { grid: Vec<f64>, values: Vec<f64> },
}

impl LossCurve {
    pub fn constant(value: f64) -> Self {
        LossCurve::Constant { value }
    }

    pub fn tabulated(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let c = LossCurve::Tabulated { grid, values };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LossCurve::Constant { value } => {
                if !(value.is_finite() && *value > 0.0) {
                    return Err(Error::domain("loss values must be positive and finite"));
                }
            }
            LossCurve::Tabulated { grid, values } => {
                if grid.is_empty() || grid.len() != values.len() {
                    return Err(Error::usage("tabulated loss needs matching non-empty grid and values"));
                }
                if grid.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::domain("tabulated loss grid must be strictly increasing"));
                }
                if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return Err(Error::domain("loss values must be positive and finite"));
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, m: f64) -> f64 {
        match self {
            LossCurve::Constant { value } => *value,
            LossCurve::Tabulated { grid, values } => {
                let n = grid.len();
                if n == 1 || m <= grid[0] {
                    return values[0];
                }
                if m >= grid[n - 1] {
                    return values[n - 1];
                }
                let k = grid.partition_point(|g| *g <= m) - 1;
                let t = (m - grid[k]) / (grid[k + 1] - grid[k]);
                values[k] + t * (values[k + 1] - values[k])
            }
        }
    }

    fn breakpoints(&self) -> &[f64] {
        match self {
            LossCurve::Constant { .. } => &[],
            LossCurve::Tabulated { grid, .. } => grid,
        }
    }
}

/// Losses for wrongly including a mass (`l`, per unit mass), wrongly
/// excluding the true mass (`C`), and the corresponding atom losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub l_density: LossCurve,
    pub c_exclusion: LossCurve,
    pub l_absent: f64,
    pub c_absent: f64,
}

impl LossSpec {
    pub fn constant(l: f64, c: f64, l_absent: f64, c_absent: f64) -> Result<Self> {
        let s = LossSpec {
            l_density: LossCurve::constant(l),
            c_exclusion: LossCurve::constant(c),
            l_absent,
            c_absent,
        };
        s.validate()?;
        Ok(s)
    }

    /// Losses whose ratios reproduce calibrated thresholds: `l/C = q(m)` and
    /// `l(Absent)/C(Absent) = q_absent / (1 - q_absent)`.
    pub fn from_thresholds(grid: Vec<f64>, q: Vec<f64>, q_absent: f64) -> Result<Self> {
        if !(q_absent > 0.0 && q_absent < 1.0) {
            return Err(Error::domain("discovery threshold must lie in (0, 1)"));
        }
        let s = LossSpec {
            l_density: LossCurve::tabulated(grid, q)?,
            c_exclusion: LossCurve::constant(1.0),
            l_absent: q_absent / (1.0 - q_absent),
            c_absent: 1.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.l_density.validate()?;
        self.c_exclusion.validate()?;
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.l_absent) && ok(self.c_absent)) {
            return Err(Error::domain("atom losses must be positive and finite"));
        }
        Ok(())
    }

    fn ratio(&self, m: f64) -> f64 {
        self.l_density.eval(m) / self.c_exclusion.eval(m)
    }
}

/// Finite union of disjoint open intervals, optionally with `Absent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionSet {
    pub intervals: Vec<(f64, f64)>,
    pub includes_absent: bool,
}

impl DecisionSet {
    pub fn new(intervals: Vec<(f64, f64)>, includes_absent: bool) -> Result<Self> {
        if intervals.iter().any(|(a, b)| !(a.is_finite() && b.is_finite() && b > a)) {
            return Err(Error::domain("intervals must be non-empty and finite"));
        }
        if intervals.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::domain("intervals must be ordered and disjoint"));
        }
        Ok(DecisionSet { intervals, includes_absent })
    }

    pub fn empty() -> Self {
        DecisionSet { intervals: Vec::new(), includes_absent: false }
    }

    pub fn within(&self, lower: f64, upper: f64) -> bool {
        self.intervals.iter().all(|(a, b)| *a >= lower && *b <= upper)
    }

    pub fn contains(&self, hyp: MassHypothesis) -> bool {
        match hyp {
            MassHypothesis::Absent => self.includes_absent,
            MassHypothesis::Present(m) => self.intervals.iter().any(|(a, b)| m > *a && m < *b),
        }
    }

    pub fn total_length(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    /// Single covering interval `(first lower, last upper)`, if any.
    pub fn hull(&self) -> Option<(f64, f64)> {
        Some((self.intervals.first()?.0, self.intervals.last()?.1))
    }

    /// True when every interval of `other` lies inside some interval of `self`.
    pub fn covers(&self, other: &DecisionSet) -> bool {
        other.intervals.iter().all(|(c, d)| self.intervals.iter().any(|(a, b)| a <= c && d <= b))
            && (!other.includes_absent || self.includes_absent)
    }
}

/// Mass posterior: the Absent atom plus a density on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassPosterior {
    pub p_absent: f64,
    pub density: GridDensity,
}

impl MassPosterior {
    pub fn new(p_absent: f64, density: GridDensity) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_absent) {
            return Err(Error::domain("p_absent must lie in [0, 1]"));
        }
        Ok(MassPosterior { p_absent, density })
    }

    pub fn eval(&self, m: f64) -> f64 {
        self.density.eval(m)
    }
}

/// Simpson's rule on each piece between breakpoints: exact for piecewise quadratics.
fn integrate_pieces(a: f64, b: f64, breaks: &[&[f64]], f: &dyn Fn(f64) -> f64) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    let mut pts = vec![a, b];
    for set in breaks {
        pts.extend(set.iter().copied().filter(|x| *x > a && *x < b));
    }
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts.windows(2)
        .map(|w| {
            let h = w[1] - w[0];
            h / 6.0 * (f(w[0]) + 4.0 * f(0.5 * (w[0] + w[1])) + f(w[1]))
        })
        .sum()
}

fn clip(s: &DecisionSet, lower: f64, upper: f64) -> Vec<(f64, f64)> {
    s.intervals.iter().map(|&(a, b)| (a.max(lower), b.min(upper))).filter(|(a, b)| b > a).collect()
}

/// Realized loss of reporting `s` when `true_hyp` holds.
pub fn loss(true_hyp: MassHypothesis, s: &DecisionSet, spec: &LossSpec, window: (f64, f64)) -> f64 {
    let l = &spec.l_density;
    let mut total: f64 = clip(s, window.0, window.1)
        .iter()
        .map(|&(a, b)| integrate_pieces(a, b, &[l.breakpoints()], &|m| l.eval(m)))
        .sum();
    match true_hyp {
        MassHypothesis::Absent => {
            if !s.includes_absent {
                total += spec.c_absent;
            }
        }
        MassHypothesis::Present(m) => {
            if s.includes_absent {
                total += spec.l_absent;
            }
            if !s.contains(true_hyp) {
                total += spec.c_exclusion.eval(m);
            }
        }
    }
    total
}

/// Posterior expected loss of `s`.
pub fn bayes_risk(s: &DecisionSet, posterior: &MassPosterior, spec: &LossSpec, window: (f64, f64)) -> f64 {
    let l = &spec.l_density;
    let c = &spec.c_exclusion;
    let grid = &posterior.density.grid[..];
    let breaks: [&[f64]; 3] = [l.breakpoints(), c.breakpoints(), grid];
    let weighted = |m: f64| c.eval(m) * posterior.eval(m);
    let inside = clip(s, window.0, window.1);
    let include: f64 = inside.iter().map(|&(a, b)| integrate_pieces(a, b, &breaks, &|m| l.eval(m))).sum();
    let all_excl = integrate_pieces(window.0, window.1, &breaks, &weighted);
    let kept: f64 = inside.iter().map(|&(a, b)| integrate_pieces(a, b, &breaks, &weighted)).sum();
    let atom = if s.includes_absent {
        spec.l_absent * (1.0 - posterior.p_absent)
    } else {
        spec.c_absent * posterior.p_absent
    };
    include + (all_excl - kept) + atom
}

fn bisect(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let fa_pos = f(a) > 0.0;
    while b - a > 1e-6 {
        let mid = 0.5 * (a + b);
        if (f(mid) > 0.0) == fa_pos {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// `{m : pi(m | y) > l(m) / C(m)}`, with `Absent` included iff
/// `l(Absent) / C(Absent) < p_absent / (1 - p_absent)`.
pub fn bayes_rule(posterior: &MassPosterior, spec: &LossSpec, window: (f64, f64)) -> Result<DecisionSet> {
    spec.validate()?;
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(Error::domain("decision window must be non-empty"));
    }
    let f = |m: f64| posterior.eval(m) - spec.ratio(m);
    let mut nodes: Vec<f64> = vec![lo, hi];
    for set in [&posterior.density.grid[..], spec.l_density.breakpoints(), spec.c_exclusion.breakpoints()] {
        nodes.extend(set.iter().copied().filter(|x| *x > lo && *x < hi));
    }
    nodes.sort_by(f64::total_cmp);
    nodes.dedup();
    let mut pts = Vec::with_capacity(nodes.len() * 4);
    for w in nodes.windows(2) {
        for k in 0..4 {
            pts.push(w[0] + (w[1] - w[0]) * k as f64 / 4.0);
        }
    }
    pts.push(hi);
    let mut intervals = Vec::new();
    let mut start = if f(pts[0]) > 0.0 { Some(pts[0]) } else { None };
    for w in pts.windows(2) {
        let (pa, pb) = (f(w[0]) > 0.0, f(w[1]) > 0.0);
        if pa == pb {
            continue;
        }
        let root = bisect(&f, w[0], w[1]);
        if pb {
            start = Some(root);
        } else if let Some(a) = start.take() {
            if root > a {
                intervals.push((a, root));
            }
        }
    }
    if let Some(a) = start {
        if hi > a {
            intervals.push((a, hi));
        }
    }
    let p = posterior.p_absent;
    let includes_absent = spec.l_absent * (1.0 - p) < spec.c_absent * p;
    DecisionSet::new(intervals, includes_absent)
}

/// Equal-tail interval of the continuous part of the posterior.
pub fn credible_interval(posterior: &MassPosterior, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain("credible level must lie in (0, 1)"));
    }
    if posterior.p_absent >= 1.0 || !(posterior.density.total_mass() > 0.0) {
        return Err(Error::domain("posterior has no continuous mass"));
    }
    let tail = 0.5 * (1.0 - level);
    let a = posterior.density.quantile(tail).ok_or_else(|| Error::domain("posterior has no continuous mass"))?;
    let b = posterior.density.quantile(1.0 - tail).ok_or_else(|| Error::domain("posterior has no continuous mass"))?;
    Ok((a, b))
}
