//! Regularity hypotheses for value functions.
//!
//! Minimum and maximum steering times of the `z` coordinates (with `w` kept in a
//! box) are estimated by a label-correcting search on a time-expanded lattice.
//! Controllability around a point is measured by how far `0` sits inside the
//! convex hull of the velocity set, and its absence by a separating direction.
//! Both use a fixed cover of unit directions and report a quantitative margin.

use std::collections::{HashMap, HashSet};
use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::limits::{extended_f64, lipschitz_constant_map};
use crate::problem::{builtin_problem_with, ControlBox, ControlProblem};
use crate::value::{solve_finite_horizon, GridSpec, ValueField};

/// Margins at or below this value do not count as strictly positive.
pub const STRICT_MARGIN: f64 = 1e-12;
/// Number of directions in the sphere cover for two and three dimensions.
pub const COVER_SIZE: usize = 64;

/// Indices of the `w` and `z` coordinates of the state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinateSplit {
    pub w: Vec<usize>,
    pub z: Vec<usize>,
}

impl CoordinateSplit {
    pub fn new(w: Vec<usize>, z: Vec<usize>) -> Self {
        CoordinateSplit { w, z }
    }

    /// Every coordinate is a `z` coordinate.
    pub fn all_z(dim: usize) -> Self {
        CoordinateSplit {
            w: Vec::new(),
            z: (0..dim).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverflowPolicy {
    #[default]
    Error,
    Discard,
}

/// Box, cell size, time step and time cap of a steering search.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeLattice {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub spacing: f64,
    pub dt: f64,
    pub cap: f64,
    #[serde(default)]
    pub overflow: OverflowPolicy,
}

impl TimeLattice {
    fn validate(&self, dim: usize) -> Result<()> {
        if self.lower.len() != dim || self.upper.len() != dim {
            return Err(LabError::arg("lattice box dimension does not match the state"));
        }
        if !(self.spacing > 0.0 && self.dt > 0.0 && self.cap > 0.0) {
            return Err(LabError::arg("lattice spacing, step and cap must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeVariant {
    MinRestricted,
    Min,
    Max,
}

/// Steer from `(t0, y0)` until `z = z_target` with `w` inside `[w_lo, w_hi]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeQuery {
    pub t0: f64,
    pub y0: Vec<f64>,
    pub z_target: Vec<f64>,
    pub w_lo: Vec<f64>,
    pub w_hi: Vec<f64>,
}

impl TimeQuery {
    /// Query without a `w` restriction.
    pub fn free(t0: f64, y0: Vec<f64>, z_target: Vec<f64>) -> Self {
        TimeQuery {
            t0,
            y0,
            z_target,
            w_lo: Vec::new(),
            w_hi: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeRecord {
    pub variant: TimeVariant,
    pub t0: f64,
    pub y0: Vec<f64>,
    pub z_target: Vec<f64>,
    /// `+inf` when the target is not reached (min) or may never be reached (max).
    #[serde(with = "extended_f64")]
    pub time: f64,
    pub reached: bool,
    pub dt: f64,
    pub spacing: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeFunctionEstimate {
    pub variant: TimeVariant,
    pub records: Vec<TimeRecord>,
    pub restricted_controls: Option<Vec<Vec<f64>>>,
}

fn cell_key(x: &[f64], lattice: &TimeLattice) -> Vec<i64> {
    x.iter()
        .zip(&lattice.lower)
        .map(|(v, l)| ((v - l) / lattice.spacing).round() as i64)
        .collect()
}

/// Fraction `s` in `[0, 1]` at which the step `x -> y` meets the target, if it does.
fn segment_hit(x: &[f64], y: &[f64], split: &CoordinateSplit, q: &TimeQuery, tol: f64) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, &i) in split.z.iter().enumerate() {
        let d = y[i] - x[i];
        num += (q.z_target[k] - x[i]) * d;
        den += d * d;
    }
    let s = if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 };
    let at = |i: usize| x[i] + s * (y[i] - x[i]);
    let z_ok = split
        .z
        .iter()
        .enumerate()
        .all(|(k, &i)| (at(i) - q.z_target[k]).abs() <= tol);
    let w_ok = split
        .w
        .iter()
        .enumerate()
        .all(|(k, &i)| at(i) >= q.w_lo[k] && at(i) <= q.w_hi[k]);
    (z_ok && w_ok).then_some(s)
}

fn z_distance(x: &[f64], split: &CoordinateSplit, q: &TimeQuery) -> f64 {
    split
        .z
        .iter()
        .zip(&q.z_target)
        .map(|(&i, z)| (x[i] - z).abs())
        .fold(0.0, f64::max)
}

/// Breadth-first sweep of the time-expanded lattice. Each layer keeps one state per
/// cell: the closest to the target for min, the farthest for max. Min also drops
/// moves into other cells reached in earlier layers; slow moves that stay in
/// their cell survive so that sub-cell speeds still make progress.
fn steer(
    problem: &ControlProblem,
    split: &CoordinateSplit,
    q: &TimeQuery,
    controls: &[Vec<f64>],
    lattice: &TimeLattice,
    variant: TimeVariant,
) -> Result<TimeRecord> {
    let m = problem.state_dim();
    lattice.validate(m)?;
    if q.y0.len() != m || q.z_target.len() != split.z.len() || q.w_lo.len() != split.w.len() || q.w_hi.len() != split.w.len() {
        return Err(LabError::arg("query dimensions do not match the coordinate split"));
    }
    if controls.is_empty() {
        return Err(LabError::arg("control subset is empty"));
    }
    let tol = 0.5 * lattice.spacing;
    let record = |time: f64| TimeRecord {
        variant,
        t0: q.t0,
        y0: q.y0.clone(),
        z_target: q.z_target.clone(),
        time,
        reached: time.is_finite(),
        dt: lattice.dt,
        spacing: lattice.spacing,
    };
    if segment_hit(&q.y0, &q.y0, split, q, tol).is_some() {
        return Ok(record(0.0));
    }
    let steps = (lattice.cap / lattice.dt).ceil() as usize;
    let maximize = variant == TimeVariant::Max;
    let mut frontier = vec![q.y0.clone()];
    let mut visited: HashSet<Vec<i64>> = HashSet::new();
    visited.insert(cell_key(&q.y0, lattice));
    let mut latest = f64::NEG_INFINITY;
    let mut escaped = false;
    let mut f = vec![0.0; m];
    for k in 0..steps {
        let t = q.t0 + k as f64 * lattice.dt;
        let mut next: Vec<Vec<f64>> = Vec::new();
        let mut layer: HashMap<Vec<i64>, usize> = HashMap::new();
        let mut best = f64::INFINITY;
        for x in &frontier {
            for u in controls {
                problem.eval_dynamics(t, x, u, &mut f);
                let y: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + lattice.dt * b).collect();
                if let Some(s) = segment_hit(x, &y, split, q, tol) {
                    let arrival = (k as f64 + s) * lattice.dt;
                    best = best.min(arrival);
                    latest = latest.max(arrival);
                    continue;
                }
                if let Some(i) = (0..m).find(|&i| !(y[i] >= lattice.lower[i] && y[i] <= lattice.upper[i])) {
                    match lattice.overflow {
                        OverflowPolicy::Error => {
                            return Err(LabError::LatticeOverflow {
                                coordinate: i,
                                value: y[i],
                                lower: lattice.lower[i],
                                upper: lattice.upper[i],
                            })
                        }
                        OverflowPolicy::Discard => {
                            escaped = true;
                            continue;
                        }
                    }
                }
                let key = cell_key(&y, lattice);
                if !maximize && visited.contains(&key) && key != cell_key(x, lattice) {
                    continue;
                }
                match layer.get(&key) {
                    Some(&j) => {
                        let (dy, dj) = (z_distance(&y, split, q), z_distance(&next[j], split, q));
                        if (maximize && dy > dj) || (!maximize && dy < dj) {
                            next[j] = y;
                        }
                    }
                    None => {
                        layer.insert(key, next.len());
                        next.push(y);
                    }
                }
            }
        }
        if !maximize && best.is_finite() {
            return Ok(record(best));
        }
        if !maximize {
            visited.extend(layer.into_keys());
        }
        frontier = next;
        if maximize && frontier.is_empty() {
            return Ok(record(if escaped || !latest.is_finite() { f64::INFINITY } else { latest }));
        }
        if !maximize && frontier.is_empty() {
            break;
        }
    }
    Ok(record(f64::INFINITY))
}

/// Shortest steering time over `controls` (all samples when `None`).
pub fn min_time_estimate(
    problem: &ControlProblem,
    split: &CoordinateSplit,
    query: &TimeQuery,
    controls: Option<&[Vec<f64>]>,
    lattice: &TimeLattice,
) -> Result<TimeRecord> {
    let variant = if controls.is_some() { TimeVariant::MinRestricted } else { TimeVariant::Min };
    steer(problem, split, query, controls.unwrap_or(problem.control_samples()), lattice, variant)
}

/// Latest arrival over all lattice controls, `+inf` if some branch never arrives.
pub fn max_time_estimate(
    problem: &ControlProblem,
    split: &CoordinateSplit,
    query: &TimeQuery,
    lattice: &TimeLattice,
) -> Result<TimeRecord> {
    steer(problem, split, query, problem.control_samples(), lattice, TimeVariant::Max)
}

/// Batch of independent queries, run in parallel.
pub fn time_function_estimate(
    variant: TimeVariant,
    problem: &ControlProblem,
    split: &CoordinateSplit,
    queries: &[TimeQuery],
    restricted: Option<&[Vec<f64>]>,
    lattice: &TimeLattice,
) -> Result<TimeFunctionEstimate> {
    let records = queries
        .par_iter()
        .map(|q| match variant {
            TimeVariant::Max => max_time_estimate(problem, split, q, lattice),
            TimeVariant::Min => min_time_estimate(problem, split, q, None, lattice),
            TimeVariant::MinRestricted => min_time_estimate(
                problem,
                split,
                q,
                Some(restricted.unwrap_or(problem.control_samples())),
                lattice,
            ),
        })
        .collect::<Result<_>>()?;
    Ok(TimeFunctionEstimate {
        variant,
        records,
        restricted_controls: restricted.map(|r| r.to_vec()),
    })
}

/// Deterministic unit directions: `+-1` in 1D, 64 angles in 2D, a 64-point
/// Fibonacci sphere in 3D, and axes plus a Fibonacci-style spread above.
pub fn sphere_cover(dim: usize) -> Vec<Vec<f64>> {
    match dim {
        0 => Vec::new(),
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..COVER_SIZE)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / COVER_SIZE as f64;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        3 => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..COVER_SIZE)
                .map(|k| {
                    let y = 1.0 - 2.0 * (k as f64 + 0.5) / COVER_SIZE as f64;
                    let r = (1.0 - y * y).sqrt();
                    let phi = golden * k as f64;
                    vec![r * phi.cos(), y, r * phi.sin()]
                })
                .collect()
        }
        d => {
            let mut out = Vec::new();
            for i in 0..d {
                for s in [1.0, -1.0] {
                    let mut e = vec![0.0; d];
                    e[i] = s;
                    out.push(e);
                }
            }
            let golden = PI * (3.0 - 5f64.sqrt());
            for k in 0..COVER_SIZE {
                let v: Vec<f64> = (0..d).map(|i| ((k * (i + 1)) as f64 * golden).cos()).collect();
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if n > 1e-9 {
                    out.push(v.iter().map(|a| a / n).collect());
                }
            }
            out
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `min_d max_v d.v` over the sphere cover: positive iff `0` is strictly inside the hull.
pub fn interior_margin(vectors: &[Vec<f64>]) -> f64 {
    if vectors.is_empty() {
        return f64::NEG_INFINITY;
    }
    sphere_cover(vectors[0].len())
        .iter()
        .map(|d| vectors.iter().map(|v| dot(d, v)).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min)
}

/// `max_d min_v (-d.v)`: positive iff some direction has `d.v <= -margin` for all `v`.
///
/// Candidates are the sphere cover, each negated normalized vector and the negated mean.
pub fn separation_margin(vectors: &[Vec<f64>]) -> f64 {
    if vectors.is_empty() {
        return f64::NEG_INFINITY;
    }
    let dim = vectors[0].len();
    let mut dirs = sphere_cover(dim);
    let unit = |v: &[f64]| {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        (n > 0.0).then(|| v.iter().map(|a| -a / n).collect::<Vec<f64>>())
    };
    dirs.extend(vectors.iter().filter_map(|v| unit(v)));
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, a) in mean.iter_mut().zip(v) {
            *m += a;
        }
    }
    dirs.extend(unit(&mean));
    dirs.iter()
        .map(|d| vectors.iter().map(|v| -dot(d, v)).fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HullTest {
    pub inside: bool,
    pub margin: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SeparationTest {
    pub separated: bool,
    pub margin: f64,
}

fn velocities(problem: &ControlProblem, t: f64, x: &[f64], controls: &[Vec<f64>]) -> Vec<Vec<f64>> {
    controls.iter().map(|u| problem.dynamics(t, x, u)).collect()
}

/// Whether `0` lies in the interior of `conv { f(t, x, u) : u in P' }`.
pub fn interior_convexhull_test(
    problem: &ControlProblem,
    t: f64,
    x: &[f64],
    subset: Option<&[Vec<f64>]>,
) -> Result<HullTest> {
    let controls = subset.unwrap_or(problem.control_samples());
    if controls.is_empty() {
        return Err(LabError::arg("control subset is empty"));
    }
    let margin = interior_margin(&velocities(problem, t, x, controls));
    Ok(HullTest {
        inside: margin > STRICT_MARGIN,
        margin,
    })
}

/// Whether one direction separates `0` from every velocity over the samples and all controls.
pub fn separation_test(problem: &ControlProblem, samples: &[(f64, Vec<f64>)]) -> Result<SeparationTest> {
    if samples.is_empty() {
        return Err(LabError::arg("separation test needs at least one sample"));
    }
    let pooled: Vec<Vec<f64>> = samples
        .iter()
        .flat_map(|(t, x)| velocities(problem, *t, x, problem.control_samples()))
        .collect();
    let margin = separation_margin(&pooled);
    Ok(SeparationTest {
        separated: margin > STRICT_MARGIN,
        margin,
    })
}

type TimeStateFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
type StateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type ChartMap = Arc<dyn Fn(&[f64]) -> Option<Vec<f64>> + Send + Sync>;

/// Candidate factorization `V(t, (w, z)) = R(t, w) S(z)`.
#[derive(Clone)]
pub struct ProductStructure {
    pub split: CoordinateSplit,
    r: TimeStateFn,
    s: StateFn,
}

impl ProductStructure {
    pub fn new(
        split: CoordinateSplit,
        r: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        s: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ProductStructure {
            split,
            r: Arc::new(r),
            s: Arc::new(s),
        }
    }

    fn parts(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        (
            self.split.w.iter().map(|&i| x[i]).collect(),
            self.split.z.iter().map(|&i| x[i]).collect(),
        )
    }

    pub fn r(&self, t: f64, x: &[f64]) -> f64 {
        (self.r)(t, &self.parts(x).0)
    }

    pub fn s(&self, x: &[f64]) -> f64 {
        (self.s)(&self.parts(x).1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProductCheck {
    pub max_rel_error: f64,
    pub r_positive: bool,
    pub pass: bool,
    pub worst_point: Option<(f64, Vec<f64>)>,
}

/// `max |V - R S| / max(1, |V|)` over the validation lattice, with `R > 0` enforced.
pub fn validate_product_structure(
    field: &dyn ValueField,
    ps: &ProductStructure,
    lattice: &[(f64, Vec<f64>)],
    tol: f64,
) -> ProductCheck {
    let mut worst = 0.0f64;
    let mut worst_point = None;
    let mut r_positive = true;
    for (t, x) in lattice {
        let r = ps.r(*t, x);
        if !(r > 0.0) {
            r_positive = false;
        }
        let v = field.value(*t, x);
        let err = (v - r * ps.s(x)).abs() / v.abs().max(1.0);
        if !(err <= worst) {
            worst = if err.is_nan() { f64::INFINITY } else { err };
            worst_point = Some((*t, x.clone()));
        }
    }
    ProductCheck {
        max_rel_error: worst,
        r_positive,
        pass: r_positive && worst <= tol,
        worst_point,
    }
}

/// Coordinate chart of the double integrator with its induced dynamics.
#[derive(Clone)]
pub struct Chart {
    pub name: String,
    map: ChartMap,
    pub problem: ControlProblem,
    pub split: CoordinateSplit,
}

impl Chart {
    /// `w = sqrt(y2)`, `z = y1 / sqrt(y2)` on `y2 > 0`:
    /// `w' = z / 2`, `z' = (u - z^2 / 2) / w`.
    pub fn sqrt_y2(a: f64, samples: usize) -> Result<Self> {
        let bound = a * a;
        let problem = ControlProblem::builder("double-integrator/sqrt-y2-chart", 2)
            .dynamics(|_, x, u, out| {
                out[0] = 0.5 * x[1];
                out[1] = (u[0] - 0.5 * x[1] * x[1]) / x[0];
            })
            .running_cost(|_, _, _| 0.0)
            .control_box(ControlBox::new(vec![-bound], vec![bound], samples)?)
            .growth_witness(1.0, 4.0 * (bound + 2.0))
            .test_box(vec![0.5, -2.0], vec![2.0, 2.0])
            .build()?;
        Ok(Chart {
            name: "sqrt-y2".into(),
            map: Arc::new(|y: &[f64]| (y[1] > 0.0).then(|| vec![y[1].sqrt(), y[0] / y[1].sqrt()])),
            problem,
            split: CoordinateSplit::new(vec![0], vec![1]),
        })
    }

    /// `w = y1`, `z = y2 / y1^2` on `y1 != 0`: `w' = u`, `z' = (1 - 2 z u) / w`.
    pub fn y1(a: f64, samples: usize) -> Result<Self> {
        let bound = a * a;
        let problem = ControlProblem::builder("double-integrator/y1-chart", 2)
            .dynamics(|_, x, u, out| {
                out[0] = u[0];
                out[1] = (1.0 - 2.0 * x[1] * u[0]) / x[0];
            })
            .running_cost(|_, _, _| 0.0)
            .control_box(ControlBox::new(vec![-bound], vec![bound], samples)?)
            .growth_witness(1.0, 2.0 * (1.0 + 4.0 * bound) + bound)
            .test_box(vec![0.5, -2.0], vec![2.0, 2.0])
            .build()?;
        Ok(Chart {
            name: "y1".into(),
            map: Arc::new(|y: &[f64]| (y[0] != 0.0).then(|| vec![y[0], y[1] / (y[0] * y[0])])),
            problem,
            split: CoordinateSplit::new(vec![0], vec![1]),
        })
    }

    /// Chart coordinates of `y`, `None` outside the chart domain.
    pub fn map(&self, y: &[f64]) -> Option<Vec<f64>> {
        (self.map)(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    Interior,
    Separation,
    MinTime,
}

impl Route {
    pub fn label(&self) -> &'static str {
        match self {
            Route::Interior => "interior",
            Route::Separation => "separation",
            Route::MinTime => "min-time",
        }
    }
}

/// Parameters of the min-time hypothesis probe `Q'_W <= L |z - z'|`.
#[derive(Clone, Debug)]
pub struct MinTimeRoute {
    pub delta_z: f64,
    pub bound: f64,
    pub dt: f64,
    pub spacing: f64,
    /// Restricted control subset; all samples when `None`.
    pub controls: Option<Vec<Vec<f64>>>,
}

impl Default for MinTimeRoute {
    fn default() -> Self {
        MinTimeRoute {
            delta_z: 0.05,
            bound: 8.0,
            dt: 2.5e-3,
            spacing: 2.5e-3,
            controls: None,
        }
    }
}

#[derive(Clone)]
pub struct ClassifierOptions {
    pub routes: Vec<Route>,
    /// When set, the separation and min-time routes work in chart coordinates
    /// and separation is tested on the `z` components of the chart velocity.
    pub chart: Option<Chart>,
    pub min_time: MinTimeRoute,
    pub t: f64,
    pub refine_rel: f64,
    pub refine_abs: f64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        ClassifierOptions {
            routes: vec![Route::Interior, Route::Separation, Route::MinTime],
            chart: None,
            min_time: MinTimeRoute::default(),
            t: 0.0,
            refine_rel: 0.2,
            refine_abs: 0.05,
        }
    }
}

/// Axis-aligned cell of the region map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Cell {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Cell {
    pub fn around(center: &[f64], half_width: f64) -> Self {
        Cell {
            lower: center.iter().map(|c| c - half_width).collect(),
            upper: center.iter().map(|c| c + half_width).collect(),
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// Corners plus center.
    pub fn probes(&self) -> Vec<Vec<f64>> {
        let d = self.lower.len();
        let mut out: Vec<Vec<f64>> = (0..1usize << d)
            .map(|mask| {
                (0..d)
                    .map(|k| if mask & (1 << k) != 0 { self.upper[k] } else { self.lower[k] })
                    .collect()
            })
            .collect();
        out.push(self.center());
        out
    }

    /// Regular grid of cells covering `[lower, upper]` with `n` cells per axis.
    pub fn tiling(lower: &[f64], upper: &[f64], n: usize) -> Vec<Cell> {
        let axes: Vec<Vec<f64>> = lower
            .iter()
            .zip(upper)
            .map(|(l, u)| (0..n).map(|i| l + (u - l) * i as f64 / n as f64).collect())
            .collect();
        crate::problem::cartesian(&axes)
            .into_iter()
            .map(|lo| {
                let hi = lo
                    .iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(a, (l, u))| a + (u - l) / n as f64)
                    .collect();
                Cell { lower: lo, upper: hi }
            })
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellVerdict {
    pub center: Vec<f64>,
    pub route: Option<Route>,
    pub hypothesis_met: bool,
    pub margin: f64,
    pub lipschitz_observed: bool,
    pub local_constant: f64,
    pub refined_constant: f64,
}

impl CellVerdict {
    /// `2 * hypothesis_met + lipschitz_observed`.
    pub fn code(&self) -> u8 {
        2 * self.hypothesis_met as u8 + self.lipschitz_observed as u8
    }
}

fn route_margin(problem: &ControlProblem, cell: &Cell, route: Route, opts: &ClassifierOptions) -> Result<Option<f64>> {
    let t = opts.t;
    let probes = cell.probes();
    match route {
        Route::Interior => {
            let mut worst = f64::INFINITY;
            for p in &probes {
                let hull = interior_convexhull_test(problem, t, p, None)?;
                if !hull.inside {
                    return Ok(None);
                }
                worst = worst.min(hull.margin);
            }
            Ok(Some(worst))
        }
        Route::Separation => {
            let margin = match &opts.chart {
                None => {
                    let samples: Vec<(f64, Vec<f64>)> = probes.iter().map(|p| (t, p.clone())).collect();
                    separation_test(problem, &samples)?.margin
                }
                Some(chart) => {
                    let mut pooled = Vec::new();
                    for p in &probes {
                        let Some(c) = chart.map(p) else { return Ok(None) };
                        for u in chart.problem.control_samples() {
                            let f = chart.problem.dynamics(t, &c, u);
                            pooled.push(chart.split.z.iter().map(|&i| f[i]).collect::<Vec<f64>>());
                        }
                    }
                    separation_margin(&pooled)
                }
            };
            Ok((margin > STRICT_MARGIN).then_some(margin))
        }
        Route::MinTime => {
            let (target_problem, split, points): (&ControlProblem, CoordinateSplit, Vec<Vec<f64>>) = match &opts.chart {
                None => (problem, CoordinateSplit::all_z(problem.state_dim()), probes),
                Some(chart) => {
                    let mut mapped = Vec::with_capacity(probes.len());
                    for p in &probes {
                        match chart.map(p) {
                            Some(c) => mapped.push(c),
                            None => return Ok(None),
                        }
                    }
                    (&chart.problem, chart.split.clone(), mapped)
                }
            };
            let mt = &opts.min_time;
            let cap = 1.5 * mt.bound * mt.delta_z;
            let mut worst = 0.0f64;
            for x in &points {
                let speed = target_problem
                    .control_samples()
                    .iter()
                    .map(|u| target_problem.dynamics(t, x, u).iter().map(|v| v.abs()).fold(0.0, f64::max))
                    .fold(1.0, f64::max);
                let radius = 4.0 * (speed * cap).max(mt.delta_z);
                let lattice = TimeLattice {
                    lower: x.iter().map(|v| v - radius).collect(),
                    upper: x.iter().map(|v| v + radius).collect(),
                    spacing: mt.spacing,
                    dt: mt.dt,
                    cap,
                    overflow: OverflowPolicy::Discard,
                };
                let w_lo: Vec<f64> = split.w.iter().map(|&i| x[i] - radius).collect();
                let w_hi: Vec<f64> = split.w.iter().map(|&i| x[i] + radius).collect();
                for zi in 0..split.z.len() {
                    for sign in [1.0, -1.0] {
                        let mut z_target: Vec<f64> = split.z.iter().map(|&i| x[i]).collect();
                        z_target[zi] += sign * mt.delta_z;
                        let q = TimeQuery {
                            t0: t,
                            y0: x.clone(),
                            z_target,
                            w_lo: w_lo.clone(),
                            w_hi: w_hi.clone(),
                        };
                        let rec = min_time_estimate(target_problem, &split, &q, mt.controls.as_deref(), &lattice)?;
                        let allowed = mt.bound * mt.delta_z + 2.0 * mt.dt;
                        if !(rec.time <= allowed) {
                            return Ok(None);
                        }
                        worst = worst.max(rec.time / mt.delta_z);
                    }
                }
            }
            Ok(Some(mt.bound - worst))
        }
    }
}

/// Per-cell hypothesis route and observed Lipschitz stability.
///
/// Routes are tried in the configured order and the first one met is reported.
/// The conclusion side compares the largest local difference quotient of the
/// coarse and refined fields over the cell.
pub fn lipschitz_region_classifier(
    problem: &ControlProblem,
    coarse: &dyn ValueField,
    refined: &dyn ValueField,
    cells: &[Cell],
    opts: &ClassifierOptions,
) -> Result<Vec<CellVerdict>> {
    cells
        .par_iter()
        .map(|cell| {
            let mut route = None;
            let mut margin = f64::NAN;
            for r in &opts.routes {
                if let Some(m) = route_margin(problem, cell, *r, opts)? {
                    route = Some(*r);
                    margin = m;
                    break;
                }
            }
            let h: Vec<f64> = cell.lower.iter().zip(&cell.upper).map(|(a, b)| 0.5 * (b - a)).collect();
            let lc = lipschitz_constant_map(coarse, &cell.lower, &cell.upper, &h, opts.t)?.max;
            let lf = lipschitz_constant_map(refined, &cell.lower, &cell.upper, &h, opts.t)?.max;
            let stable = (lc - lf).abs() <= opts.refine_rel * lc.max(lf) + opts.refine_abs;
            Ok(CellVerdict {
                center: cell.center(),
                route,
                hypothesis_met: route.is_some(),
                margin,
                lipschitz_observed: lc.is_finite() && lf.is_finite() && stable,
                local_constant: lc,
                refined_constant: lf,
            })
        })
        .collect()
}

/// `center..., route, hypothesis_met, lipschitz_observed, local_constant` rows.
pub fn region_map_csv(verdicts: &[CellVerdict]) -> String {
    let dim = verdicts.first().map(|v| v.center.len()).unwrap_or(1);
    let mut out = String::new();
    for k in 0..dim {
        out.push_str(&format!("x{k},"));
    }
    out.push_str("route,hypothesis_met,lipschitz_observed,local_constant\n");
    for v in verdicts {
        for c in &v.center {
            out.push_str(&format!("{c:.10e},"));
        }
        out.push_str(&format!(
            "{},{},{},{:.10e}\n",
            v.route.map(|r| r.label()).unwrap_or("none"),
            v.hypothesis_met as u8,
            v.lipschitz_observed as u8,
            v.local_constant
        ));
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HomogeneityRow {
    pub nu: f64,
    pub y: Vec<f64>,
    /// `V^{nu T}(0, (nu y1, nu^2 y2))`.
    pub scaled_value: f64,
    /// `nu^{k+1} V^T(0, y)`.
    pub derived_prediction: f64,
    pub derived_error: f64,
    /// `V^{T / nu}(0, (nu y1, nu^2 y2))`.
    pub alternative_value: f64,
    /// `nu^{k-1} V^T(0, y)`.
    pub alternative_prediction: f64,
    pub alternative_error: f64,
}

/// Scaling identity of the double integrator with a degree-`k` homogeneous cost.
///
/// Substituting `X(s) = (nu y1(s / nu), nu^2 y2(s / nu))` and `u'(s) = u(s / nu)`
/// gives `J(0, X(0); u', nu T) = nu^{k+1} J(0, y(0); u, T)`, hence
/// `V^{nu T}(0, (nu y1, nu^2 y2)) = nu^{k+1} V^T(0, y)`. The report also evaluates
/// the pairing `V^{T / nu}(0, (nu y1, nu^2 y2)) = nu^{k-1} V^T(0, y)` for comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HomogeneityReport {
    pub k: f64,
    pub horizon: f64,
    pub rows: Vec<HomogeneityRow>,
    pub max_derived_error: f64,
    pub max_alternative_error: f64,
}

pub fn homogeneity_report(
    params: &std::collections::BTreeMap<String, f64>,
    spec: &GridSpec,
    horizon: f64,
    pairs: &[(f64, Vec<f64>)],
) -> Result<HomogeneityReport> {
    let problem = builtin_problem_with("double-integrator", params)?;
    let k = problem.params()["k"];
    let base = solve_finite_horizon(&problem, &spec.with_horizon(horizon))?;
    let mut nus: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    nus.sort_by(|a, b| a.total_cmp(b));
    nus.dedup();
    if nus.iter().any(|n| !(*n > 0.0)) {
        return Err(LabError::arg("scale factors must be positive"));
    }
    let solved: Vec<(f64, _, _)> = nus
        .par_iter()
        .map(|&nu| {
            let up = solve_finite_horizon(&problem, &spec.with_horizon(nu * horizon))?;
            let down = solve_finite_horizon(&problem, &spec.with_horizon(horizon / nu))?;
            Ok((nu, up, down))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<HomogeneityRow> = pairs
        .iter()
        .map(|(nu, y)| {
            let (_, up, down) = solved.iter().find(|s| s.0 == *nu).expect("solved scale");
            let scaled = [nu * y[0], nu * nu * y[1]];
            let v = base.evaluate(0.0, y);
            let scaled_value = up.evaluate(0.0, &scaled);
            let derived_prediction = nu.powf(k + 1.0) * v;
            let alternative_value = down.evaluate(0.0, &scaled);
            let alternative_prediction = nu.powf(k - 1.0) * v;
            HomogeneityRow {
                nu: *nu,
                y: y.clone(),
                scaled_value,
                derived_prediction,
                derived_error: (scaled_value - derived_prediction).abs(),
                alternative_value,
                alternative_prediction,
                alternative_error: (alternative_value - alternative_prediction).abs(),
            }
        })
        .collect();
    Ok(HomogeneityReport {
        k,
        horizon,
        max_derived_error: rows.iter().map(|r| r.derived_error).fold(0.0, f64::max),
        max_alternative_error: rows.iter().map(|r| r.alternative_error).fold(0.0, f64::max),
        rows,
    })
}
