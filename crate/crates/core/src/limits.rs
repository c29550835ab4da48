//! Horizon limits of the value function.
//!
//! * `V^all(t, b) = lim_T V^T(t, b)`, estimated from a horizon sequence with an
//!   optional geometric-tail extrapolation.
//! * `V^inf_seq(t, b) = liminf_n V^{tau_n}(t, b)`, estimated by the minimum over
//!   the last half of the sequence.
//! * `V^inf(t, b) = inf_u liminf_T J(t, b; u, T)` over an explicit finite family
//!   of piecewise-constant controls.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::problem::{cartesian, cost_profile, integrate_trajectory, ControlBox, ControlProblem, ControlSignal};
use crate::value::{solve_finite_horizon, GridSpec, ValueField, ValueGrid};

/// Default absolute tolerance for convergence decisions.
pub const DEFAULT_LIMIT_TOL: f64 = 1e-2;
/// Successive differences must shrink at least by this ratio before extrapolating.
pub const GEOMETRIC_RATIO: f64 = 0.75;

/// Serializes non-finite floats as `"+inf"`, `"-inf"` or `"nan"`.
pub mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("+inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize, Serialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "+inf" | "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad number '{other}'"))),
            },
        }
    }
}

/// Strictly increasing positive horizons `tau_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonSequence {
    taus: Vec<f64>,
}

impl HorizonSequence {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(LabError::arg("horizon sequence is empty"));
        }
        if taus.iter().any(|t| !(*t > 0.0) || !t.is_finite()) || taus.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LabError::arg("horizons must be positive, finite and strictly increasing"));
        }
        Ok(HorizonSequence { taus })
    }

    /// `tau_n = tau_0 * ratio^n` for `n < count`.
    pub fn geometric(tau0: f64, ratio: f64, count: usize) -> Result<Self> {
        if !(ratio > 1.0) {
            return Err(LabError::arg("geometric ratio must exceed 1"));
        }
        Self::new((0..count).map(|n| tau0 * ratio.powi(n as i32)).collect())
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

    /// Whether the sequence spans enough to stand in for `tau_n -> inf` (last/first >= 8).
    pub fn unbounded_intent(&self) -> bool {
        self.taus[self.taus.len() - 1] / self.taus[0] >= 8.0
    }
}

impl Default for HorizonSequence {
    fn default() -> Self {
        Self::geometric(1.0, 2.0, 7).expect("valid default sequence")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitVariant {
    All,
    LiminfSequence,
    InfOverControls,
    Diamond,
}

impl LimitVariant {
    pub fn label(&self) -> &'static str {
        match self {
            LimitVariant::All => "all",
            LimitVariant::LiminfSequence => "liminf-sequence",
            LimitVariant::InfOverControls => "inf-over-controls",
            LimitVariant::Diamond => "diamond",
        }
    }
}

/// Per-horizon values with a limit estimate and convergence diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LimitEstimate {
    pub variant: LimitVariant,
    pub taus: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(with = "extended_f64")]
    pub limit: f64,
    /// Largest absolute difference among the last three values.
    pub gap: f64,
    pub converged: bool,
    pub tolerance: f64,
    pub extrapolated: bool,
    pub caveats: Vec<String>,
    pub argmin: Option<String>,
}

fn cauchy_gap(values: &[f64]) -> f64 {
    let tail = &values[values.len().saturating_sub(3)..];
    let mut gap = 0.0f64;
    for i in 0..tail.len() {
        for j in i + 1..tail.len() {
            gap = gap.max((tail[i] - tail[j]).abs());
        }
    }
    gap
}

/// Minimum over the last `ceil(n / 2)` values.
pub fn liminf_tail(values: &[f64]) -> f64 {
    let n = values.len();
    values[n - n.div_ceil(2)..].iter().copied().fold(f64::INFINITY, f64::min)
}

/// Full-limit analysis of per-horizon values.
pub fn analyze_full_limit(taus: &[f64], values: &[f64], tol: f64) -> LimitEstimate {
    let n = values.len();
    let mut caveats = Vec::new();
    let gap = cauchy_gap(values);
    let floor = tol * 1e-3;
    let diffs: Vec<f64> = values
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            if d.abs() < floor {
                0.0
            } else {
                d
            }
        })
        .collect();
    let recent = &diffs[diffs.len().saturating_sub(3)..];
    let oscillating = recent.windows(2).any(|w| w[0] * w[1] < 0.0);
    let mut limit = values[n - 1];
    let mut extrapolated = false;
    if oscillating {
        caveats.push("successive differences change sign; no extrapolation".into());
    } else if diffs.len() >= 2 {
        let (dp, dl) = (diffs[diffs.len() - 2], diffs[diffs.len() - 1]);
        if dp != 0.0 && dl != 0.0 {
            let q = dl / dp;
            if q > 0.0 && q <= GEOMETRIC_RATIO {
                limit += dl * q / (1.0 - q);
                extrapolated = true;
            } else {
                caveats.push(format!("differences do not decay geometrically (ratio {q:.3})"));
            }
        }
    }
    if n == 1 {
        caveats.push("single horizon; no convergence evidence".into());
    }
    let converged = n > 1 && gap <= tol && !oscillating && limit.is_finite();
    LimitEstimate {
        variant: LimitVariant::All,
        taus: taus.to_vec(),
        values: values.to_vec(),
        limit,
        gap,
        converged,
        tolerance: tol,
        extrapolated,
        caveats,
        argmin: None,
    }
}

/// Liminf analysis of per-horizon values.
pub fn analyze_liminf(taus: &[f64], values: &[f64], tol: f64) -> LimitEstimate {
    let gap = cauchy_gap(values);
    let limit = liminf_tail(values);
    LimitEstimate {
        variant: LimitVariant::LiminfSequence,
        taus: taus.to_vec(),
        values: values.to_vec(),
        limit,
        gap,
        converged: gap <= tol && limit.is_finite(),
        tolerance: tol,
        extrapolated: false,
        caveats: vec!["tail minimum of a finite sequence may overestimate the liminf".into()],
        argmin: None,
    }
}

/// Memoized lattice solves keyed by problem identity, grid spec and horizon.
#[derive(Default)]
pub struct ValueCache {
    grids: Mutex<HashMap<String, Arc<ValueGrid>>>,
}

impl ValueCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_solve(&self, problem: &ControlProblem, spec: &GridSpec) -> Result<Arc<ValueGrid>> {
        let key = format!(
            "{}|{}",
            problem.cache_key(),
            serde_json::to_string(spec).map_err(|e| LabError::Format(e.to_string()))?
        );
        if let Some(g) = self.grids.lock().expect("cache lock").get(&key) {
            return Ok(g.clone());
        }
        let grid = Arc::new(solve_finite_horizon(problem, spec)?);
        self.grids.lock().expect("cache lock").insert(key, grid.clone());
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.grids.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `V^{tau_n}` for every horizon, solved in parallel.
pub fn horizon_grids(
    problem: &ControlProblem,
    spec: &GridSpec,
    seq: &HorizonSequence,
    cache: &ValueCache,
) -> Result<Vec<Arc<ValueGrid>>> {
    seq.taus()
        .par_iter()
        .map(|&tau| cache.get_or_solve(problem, &spec.with_horizon(tau)))
        .collect()
}

fn horizon_values(
    problem: &ControlProblem,
    spec: &GridSpec,
    seq: &HorizonSequence,
    t: f64,
    b: &[f64],
    cache: &ValueCache,
) -> Result<Vec<f64>> {
    if seq.taus()[0] <= t {
        return Err(LabError::arg(format!("every horizon must exceed t = {t}")));
    }
    Ok(horizon_grids(problem, spec, seq, cache)?
        .iter()
        .map(|g| g.evaluate(t, b))
        .collect())
}

pub fn estimate_v_all(
    problem: &ControlProblem,
    spec: &GridSpec,
    seq: &HorizonSequence,
    t: f64,
    b: &[f64],
    tol: f64,
) -> Result<LimitEstimate> {
    estimate_v_all_cached(problem, spec, seq, t, b, tol, &ValueCache::new())
}

pub fn estimate_v_all_cached(
    problem: &ControlProblem,
    spec: &GridSpec,
    seq: &HorizonSequence,
    t: f64,
    b: &[f64],
    tol: f64,
    cache: &ValueCache,
) -> Result<LimitEstimate> {
    let values = horizon_values(problem, spec, seq, t, b, cache)?;
    let mut est = analyze_full_limit(seq.taus(), &values, tol);
    if !seq.unbounded_intent() {
        est.caveats.push("horizon sequence spans less than a factor 8".into());
    }
    Ok(est)
}

pub fn estimate_v_infty(
    problem: &ControlProblem,
    spec: &GridSpec,
    seq: &HorizonSequence,
    t: f64,
    b: &[f64],
    tol: f64,
) -> Result<LimitEstimate> {
    estimate_v_infty_cached(problem, spec, seq, t, b, tol, &ValueCache::new())
}

pub fn estimate_v_infty_cached(
    problem: &ControlProblem,
    spec: &GridSpec,
    seq: &HorizonSequence,
    t: f64,
    b: &[f64],
    tol: f64,
    cache: &ValueCache,
) -> Result<LimitEstimate> {
    let values = horizon_values(problem, spec, seq, t, b, cache)?;
    Ok(analyze_liminf(seq.taus(), &values, tol))
}

/// Finite search space of piecewise-constant controls.
#[derive(Clone, Debug)]
pub struct ControlFamily {
    controls: Vec<ControlSignal>,
    description: String,
    recipe: Option<(Vec<Vec<f64>>, Vec<f64>, usize)>,
    /// Integration step used when evaluating members.
    pub dt: f64,
}

impl ControlFamily {
    /// Constants on `levels` plus concatenations with up to `max_switches` switches,
    /// switch times measured from `start`. Consecutive pieces always differ.
    pub fn lattice(
        levels: &[Vec<f64>],
        switch_times: &[f64],
        max_switches: usize,
        start: f64,
        dt: f64,
    ) -> Result<Self> {
        if max_switches > 2 {
            return Err(LabError::arg("at most two switches are supported"));
        }
        if switch_times.iter().any(|s| !(*s > 0.0)) || switch_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LabError::arg("switch times must be positive and increasing"));
        }
        let mut controls: Vec<ControlSignal> = levels.iter().map(|a| ControlSignal::constant(a.clone())).collect();
        if max_switches >= 1 {
            for &s in switch_times {
                for a in levels {
                    for b in levels.iter().filter(|b| *b != a) {
                        controls.push(two_piece(start, s, a, b)?);
                    }
                }
            }
        }
        if max_switches >= 2 {
            for (i, &s1) in switch_times.iter().enumerate() {
                for &s2 in &switch_times[i + 1..] {
                    for a in levels {
                        for b in levels.iter().filter(|b| *b != a) {
                            for c in levels.iter().filter(|c| *c != b) {
                                let (bp, vals) = if start > 0.0 {
                                    (
                                        vec![0.0, start + s1, start + s2],
                                        vec![a.clone(), b.clone(), c.clone()],
                                    )
                                } else {
                                    (vec![0.0, s1, s2], vec![a.clone(), b.clone(), c.clone()])
                                };
                                controls.push(ControlSignal::piecewise(bp, vals)?);
                            }
                        }
                    }
                }
            }
        }
        let description = format!(
            "{} levels, switch offsets {:?}, up to {} switches ({} controls)",
            levels.len(),
            switch_times,
            max_switches,
            controls.len()
        );
        Ok(ControlFamily {
            controls,
            description,
            recipe: Some((levels.to_vec(), switch_times.to_vec(), max_switches)),
            dt,
        })
    }

    /// Five levels per control axis, switch offsets {0.5, 1, 1.5, 2}, two switches.
    pub fn default_for(problem: &ControlProblem, start: f64) -> Result<Self> {
        let cb = problem.control_box();
        let levels = ControlBox::new(cb.lo.clone(), cb.hi.clone(), 5)?.lattice();
        Self::lattice(&levels, &[0.5, 1.0, 1.5, 2.0], 2, start, 1e-2)
    }

    pub fn explicit(controls: Vec<ControlSignal>, dt: f64) -> Self {
        let description = format!("{} explicit controls", controls.len());
        ControlFamily {
            controls,
            description,
            recipe: None,
            dt,
        }
    }

    /// Lattice families are regenerated with switch offsets measured from
    /// `start`; explicit families are returned unchanged.
    pub fn rebased(&self, start: f64) -> Result<Self> {
        match &self.recipe {
            Some((levels, switches, k)) => Self::lattice(levels, switches, *k, start, self.dt),
            None => Ok(self.clone()),
        }
    }

    /// Constant levels of a lattice family, or the initial values of an explicit one.
    pub fn levels(&self) -> Vec<Vec<f64>> {
        match &self.recipe {
            Some((levels, _, _)) => levels.clone(),
            None => {
                let mut out: Vec<Vec<f64>> = Vec::new();
                for u in &self.controls {
                    let v = u.values()[0].clone();
                    if !out.contains(&v) {
                        out.push(v);
                    }
                }
                out
            }
        }
    }

    /// Subfamily of the members at the given indices.
    pub fn subset(&self, keep: &[usize]) -> Self {
        ControlFamily {
            controls: keep.iter().map(|&i| self.controls[i].clone()).collect(),
            description: format!("{} of {}", keep.len(), self.description),
            recipe: None,
            dt: self.dt,
        }
    }

    pub fn controls(&self) -> &[ControlSignal] {
        &self.controls
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }
}

fn two_piece(start: f64, s: f64, a: &[f64], b: &[f64]) -> Result<ControlSignal> {
    ControlSignal::piecewise(vec![0.0, start + s], vec![a.to_vec(), b.to_vec()])
}

/// Short human-readable form of a control signal.
pub fn describe_control(u: &ControlSignal) -> String {
    let parts: Vec<String> = u
        .breakpoints()
        .iter()
        .zip(u.values())
        .map(|(b, v)| {
            let vals: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            format!("[{b}, ...) -> ({})", vals.join(", "))
        })
        .collect();
    parts.join("; ")
}

/// `J(t, b; u, tau_n)` for every horizon in `seq`.
pub fn cost_along_horizons(
    problem: &ControlProblem,
    b: &[f64],
    t: f64,
    u: &ControlSignal,
    seq: &HorizonSequence,
    dt: f64,
) -> Result<Vec<f64>> {
    let t_max = seq.taus()[seq.len() - 1];
    let tr = integrate_trajectory(problem, b, t, u, t_max, dt)?;
    cost_profile(problem, &tr, t, seq.taus())
}

/// `inf_u liminf_n J(t, b; u, tau_n)` over `family`.
pub fn estimate_v_inf(
    problem: &ControlProblem,
    b: &[f64],
    t: f64,
    family: &ControlFamily,
    seq: &HorizonSequence,
    tol: f64,
) -> Result<LimitEstimate> {
    if family.is_empty() {
        return Err(LabError::arg("control family is empty"));
    }
    if seq.taus()[0] <= t {
        return Err(LabError::arg(format!("every horizon must exceed t = {t}")));
    }
    let scored: Vec<(f64, Vec<f64>)> = family
        .controls()
        .par_iter()
        .map(|u| {
            let costs = cost_along_horizons(problem, b, t, u, seq, family.dt)?;
            Ok((liminf_tail(&costs), costs))
        })
        .collect::<Result<_>>()?;
    let (best, _) = scored
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .expect("nonempty family");
    let values = scored[best].1.clone();
    Ok(LimitEstimate {
        variant: LimitVariant::InfOverControls,
        taus: seq.taus().to_vec(),
        gap: cauchy_gap(&values),
        limit: scored[best].0,
        converged: cauchy_gap(&values) <= tol,
        tolerance: tol,
        extrapolated: false,
        caveats: vec![format!("infimum over a finite family: {}", family.description())],
        argmin: Some(describe_control(&family.controls()[best])),
        values,
    })
}

/// Per-cell Lipschitz constants of a value field over a region at a fixed time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzMap {
    /// Lower corner of each cell.
    pub cells: Vec<Vec<f64>>,
    pub constants: Vec<f64>,
    pub spacing: Vec<f64>,
    pub max: f64,
}

/// Max over axes of `|forward difference| / h` on each lattice cell of `[lower, upper]`.
pub fn lipschitz_constant_map(
    field: &dyn ValueField,
    lower: &[f64],
    upper: &[f64],
    h: &[f64],
    t: f64,
) -> Result<LipschitzMap> {
    let d = field.dim();
    if lower.len() != d || upper.len() != d || h.len() != d {
        return Err(LabError::arg("region dimension does not match the field"));
    }
    let mut step = Vec::with_capacity(d);
    let mut axes = Vec::with_capacity(d);
    for k in 0..d {
        if !(upper[k] > lower[k]) || !(h[k] > 0.0) {
            return Err(LabError::arg("region needs lower < upper and positive spacing"));
        }
        let n = ((upper[k] - lower[k]) / h[k]).round().max(1.0) as usize;
        let hk = (upper[k] - lower[k]) / n as f64;
        step.push(hk);
        axes.push((0..n).map(|i| lower[k] + i as f64 * hk).collect::<Vec<f64>>());
    }
    let cells = cartesian(&axes);
    let constants: Vec<f64> = cells
        .par_iter()
        .map(|c| {
            let v0 = field.value(t, c);
            let mut x = c.clone();
            (0..d)
                .map(|k| {
                    x[k] = c[k] + step[k];
                    let v = field.value(t, &x);
                    x[k] = c[k];
                    (v - v0).abs() / step[k]
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let max = constants.iter().copied().fold(0.0, f64::max);
    Ok(LipschitzMap {
        cells,
        constants,
        spacing: step,
        max,
    })
}

/// [`lipschitz_constant_map`] on the grid's own lattice.
pub fn lipschitz_map_on_grid(grid: &ValueGrid, lower: &[f64], upper: &[f64], t: f64) -> Result<LipschitzMap> {
    if !grid.spec().contains(lower) || !grid.spec().contains(upper) {
        return Err(LabError::arg("region must lie inside the grid box"));
    }
    lipschitz_constant_map(grid, lower, upper, grid.spacing(), t)
}
