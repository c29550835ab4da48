//! Finite-horizon value functions on a space-time lattice.
//!
//! Values are computed by the backward semi-Lagrangian recursion
//!
//! ```text
//! V[t_i][x] = min_u { dt * f0(t_i, x, u) + V[t_{i+1}](x + dt * f(t_i, x, u)) }
//! ```
//!
//! with multilinear interpolation in space. Layers are filled from the
//! terminal time backwards, each layer in parallel over its nodes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::problem::{
    accumulate_cost, builtin_problem_with, integrate_trajectory, ControlProblem, ControlSignal, DEFAULT_DT,
};

/// Highest supported state dimension.
pub const MAX_STATE_DIM: usize = 3;
/// Added to values queried outside the box under [`BoundaryPolicy::LargePenalty`].
pub const LARGE_PENALTY: f64 = 1e6;

const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Queries are clamped onto the box.
    #[default]
    ClampExtrapolate,
    /// Queries outside the box read the clamped value plus [`LARGE_PENALTY`] and are counted.
    LargePenalty,
}

/// Spatial box, spacing, time step and horizon of a lattice solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub spacing: Vec<f64>,
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub boundary: BoundaryPolicy,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, spacing: Vec<f64>, dt: f64, horizon: f64) -> Result<Self> {
        let spec = GridSpec {
            lower,
            upper,
            spacing,
            dt,
            horizon,
            boundary: BoundaryPolicy::ClampExtrapolate,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same spacing `h` along every axis.
    pub fn uniform(lower: &[f64], upper: &[f64], h: f64, dt: f64, horizon: f64) -> Result<Self> {
        Self::new(lower.to_vec(), upper.to_vec(), vec![h; lower.len()], dt, horizon)
    }

    pub fn with_horizon(&self, horizon: f64) -> Self {
        GridSpec {
            horizon,
            ..self.clone()
        }
    }

    pub fn with_boundary(&self, boundary: BoundaryPolicy) -> Self {
        GridSpec {
            boundary,
            ..self.clone()
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lower.len();
        if d == 0 || d > MAX_STATE_DIM {
            return Err(LabError::arg(format!("grid dimension must be 1..={MAX_STATE_DIM}, got {d}")));
        }
        if self.upper.len() != d || self.spacing.len() != d {
            return Err(LabError::arg("grid bounds and spacing must share one dimension"));
        }
        for k in 0..d {
            let (l, u, h) = (self.lower[k], self.upper[k], self.spacing[k]);
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(LabError::arg(format!("grid axis {k}: need finite lower < upper")));
            }
            if !(h > 0.0) || h > u - l {
                return Err(LabError::arg(format!("grid axis {k}: spacing {h} must lie in (0, {}]", u - l)));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(LabError::arg(format!("time step must be positive, got {}", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(LabError::arg(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    /// Nodes per axis: `round((upper - lower) / h) + 1`.
    pub fn node_counts(&self) -> Vec<usize> {
        (0..self.dim())
            .map(|k| ((self.upper[k] - self.lower[k]) / self.spacing[k]).round().max(1.0) as usize + 1)
            .collect()
    }

    /// Number of time steps; the effective step is `horizon / steps`.
    pub fn time_steps(&self) -> usize {
        ((self.horizon / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(k, v)| *v >= self.lower[k] - 1e-12 && *v <= self.upper[k] + 1e-12)
    }
}

fn snap(s: f64) -> f64 {
    let r = s.round();
    if (s - r).abs() < 1e-9 {
        r
    } else {
        s
    }
}

/// A value function that can be read at any `(t, x)`.
pub trait ValueField: Sync {
    fn dim(&self) -> usize;
    fn value(&self, t: f64, x: &[f64]) -> f64;
}

/// Closure-backed [`ValueField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64, &[f64]) -> f64 + Sync> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F: Fn(f64, &[f64]) -> f64 + Sync> ValueField for FnField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.f)(t, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalTag {
    Zero,
    Supplied(String),
}

/// Value table `V[t_i][node]` on the lattice of a [`GridSpec`].
pub struct ValueGrid {
    spec: GridSpec,
    counts: Vec<usize>,
    strides: Vec<usize>,
    step: Vec<f64>,
    times: Vec<f64>,
    layers: Vec<Vec<f64>>,
    terminal: TerminalTag,
    out_of_box: AtomicU64,
}

impl Clone for ValueGrid {
    fn clone(&self) -> Self {
        ValueGrid {
            spec: self.spec.clone(),
            counts: self.counts.clone(),
            strides: self.strides.clone(),
            step: self.step.clone(),
            times: self.times.clone(),
            layers: self.layers.clone(),
            terminal: self.terminal.clone(),
            out_of_box: AtomicU64::new(self.out_of_box_queries()),
        }
    }
}

impl fmt::Debug for ValueGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ValueGrid")
            .field("spec", &self.spec)
            .field("counts", &self.counts)
            .field("time_nodes", &self.times.len())
            .field("terminal", &self.terminal)
            .field("out_of_box", &self.out_of_box_queries())
            .finish()
    }
}

impl ValueGrid {
    fn empty(spec: &GridSpec, terminal: TerminalTag) -> Result<Self> {
        spec.validate()?;
        let counts = spec.node_counts();
        let mut strides = vec![1usize; counts.len()];
        for k in 1..counts.len() {
            strides[k] = strides[k - 1] * counts[k - 1];
        }
        let step: Vec<f64> = (0..counts.len())
            .map(|k| (spec.upper[k] - spec.lower[k]) / (counts[k] - 1) as f64)
            .collect();
        let n = spec.time_steps();
        let times = (0..=n)
            .map(|i| if i == n { spec.horizon } else { spec.horizon * i as f64 / n as f64 })
            .collect();
        Ok(ValueGrid {
            spec: spec.clone(),
            counts,
            strides,
            step,
            times,
            layers: Vec::new(),
            terminal,
            out_of_box: AtomicU64::new(0),
        })
    }

    /// Table sampled from a closure at every space-time node.
    pub fn tabulate(spec: &GridSpec, f: impl Fn(f64, &[f64]) -> f64 + Sync) -> Result<Self> {
        let mut grid = Self::empty(spec, TerminalTag::Supplied("tabulated".into()))?;
        let nodes = grid.node_count();
        let mut layers = Vec::with_capacity(grid.times.len());
        for &t in &grid.times {
            let layer: Vec<f64> = (0..nodes).map(|i| f(t, &grid.node_coords(i))).collect();
            layers.push(layer);
        }
        grid.layers = layers;
        grid.check_finite()?;
        Ok(grid)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Effective spacing per axis.
    pub fn spacing(&self) -> &[f64] {
        &self.step
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Effective time step.
    pub fn dt(&self) -> f64 {
        self.spec.horizon / (self.times.len() - 1) as f64
    }

    pub fn horizon(&self) -> f64 {
        self.spec.horizon
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        &self.layers[i]
    }

    pub fn terminal(&self) -> &TerminalTag {
        &self.terminal
    }

    pub fn node_count(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn out_of_box_queries(&self) -> u64 {
        self.out_of_box.load(Ordering::Relaxed)
    }

    pub fn node_coords(&self, idx: usize) -> Vec<f64> {
        (0..self.counts.len())
            .map(|k| {
                let i = (idx / self.strides[k]) % self.counts[k];
                if i + 1 == self.counts[k] {
                    self.spec.upper[k]
                } else {
                    self.spec.lower[k] + i as f64 * self.step[k]
                }
            })
            .collect()
    }

    pub fn node_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    /// Multilinear interpolation of one layer; the flag reports an out-of-box query.
    fn interp(&self, layer: &[f64], x: &[f64]) -> (f64, bool) {
        let d = self.counts.len();
        let mut base = 0usize;
        let mut w = [0.0f64; MAX_STATE_DIM];
        let mut outside = false;
        for k in 0..d {
            let n = self.counts[k];
            let mut s = (x[k] - self.spec.lower[k]) / self.step[k];
            let top = (n - 1) as f64;
            if s < -1e-9 || s > top + 1e-9 || !s.is_finite() {
                outside = true;
            }
            s = if s.is_nan() { 0.0 } else { snap(s.clamp(0.0, top)) };
            let i = (s.floor() as usize).min(n - 2);
            w[k] = s - i as f64;
            base += i * self.strides[k];
        }
        let mut v = 0.0;
        for mask in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut idx = base;
            for k in 0..d {
                if mask & (1 << k) != 0 {
                    weight *= w[k];
                    idx += self.strides[k];
                } else {
                    weight *= 1.0 - w[k];
                }
            }
            if weight != 0.0 {
                v += weight * layer[idx];
            }
        }
        if outside && self.spec.boundary == BoundaryPolicy::LargePenalty {
            v += LARGE_PENALTY;
        }
        (v, outside)
    }

    /// Multilinear in space, linear in time; `t` is clamped to `[0, T]`.
    pub fn evaluate(&self, t: f64, x: &[f64]) -> f64 {
        let n = self.times.len() - 1;
        let s = snap((t.clamp(0.0, self.spec.horizon) / self.spec.horizon) * n as f64);
        let i = (s.floor() as usize).min(n.saturating_sub(1));
        let w = s - i as f64;
        let (a, out_a) = self.interp(&self.layers[i], x);
        if out_a && self.spec.boundary == BoundaryPolicy::LargePenalty {
            self.out_of_box.fetch_add(1, Ordering::Relaxed);
        }
        if w <= 0.0 || n == 0 {
            return a;
        }
        let (b, _) = self.interp(&self.layers[i + 1], x);
        (1.0 - w) * a + w * b
    }

    fn check_finite(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(j) = layer.iter().position(|v| !v.is_finite()) {
                return Err(LabError::Solver(format!(
                    "non-finite value at t = {}, node {:?}",
                    self.times[i],
                    self.node_coords(j)
                )));
            }
        }
        Ok(())
    }

    /// Writes `t, x..., V` rows with 17 significant digits plus a JSON sidecar.
    pub fn export_csv(&self, csv_path: &Path, sidecar_path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(csv_path)?);
        let mut header = String::from("t");
        for k in 0..self.counts.len() {
            header.push_str(&format!(",x{k}"));
        }
        header.push_str(",V\n");
        w.write_all(header.as_bytes())?;
        let coords: Vec<Vec<f64>> = (0..self.node_count()).map(|i| self.node_coords(i)).collect();
        for (ti, layer) in self.layers.iter().enumerate() {
            for (x, v) in coords.iter().zip(layer) {
                write!(w, "{:.16e}", self.times[ti])?;
                for c in x {
                    write!(w, ",{c:.16e}")?;
                }
                writeln!(w, ",{v:.16e}")?;
            }
        }
        w.flush()?;
        let sidecar = Sidecar {
            spec: self.spec.clone(),
            counts: self.counts.clone(),
            time_nodes: self.times.len(),
            terminal: self.terminal.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| LabError::Format(e.to_string()))?;
        fs::write(sidecar_path, json)?;
        Ok(())
    }

    pub fn import_csv(csv_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path)?)
            .map_err(|e| LabError::Format(format!("sidecar: {e}")))?;
        let mut grid = Self::empty(&sidecar.spec, sidecar.terminal)?;
        if grid.counts != sidecar.counts || grid.times.len() != sidecar.time_nodes {
            return Err(LabError::Format("sidecar lattice does not match its grid spec".into()));
        }
        let nodes = grid.node_count();
        let d = grid.counts.len();
        let reader = BufReader::new(fs::File::open(csv_path)?);
        let mut values = Vec::with_capacity(nodes * grid.times.len());
        for (lineno, line) in reader.lines().enumerate().skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 {
                return Err(LabError::Format(format!("line {}: expected {} fields", lineno + 1, d + 2)));
            }
            let v: f64 = fields[d + 1]
                .trim()
                .parse()
                .map_err(|e| LabError::Format(format!("line {}: {e}", lineno + 1)))?;
            values.push(v);
        }
        if values.len() != nodes * grid.times.len() {
            return Err(LabError::Format(format!(
                "expected {} rows, found {}",
                nodes * grid.times.len(),
                values.len()
            )));
        }
        grid.layers = values.chunks(nodes).map(|c| c.to_vec()).collect();
        grid.check_finite()?;
        Ok(grid)
    }
}

impl ValueField for ValueGrid {
    fn dim(&self) -> usize {
        self.counts.len()
    }

    fn value(&self, t: f64, x: &[f64]) -> f64 {
        self.evaluate(t, x)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: GridSpec,
    counts: Vec<usize>,
    time_nodes: usize,
    terminal: TerminalTag,
}

fn run_recursion(problem: &ControlProblem, mut grid: ValueGrid, terminal: Vec<f64>) -> Result<ValueGrid> {
    if problem.state_dim() != grid.counts.len() {
        return Err(LabError::arg(format!(
            "grid dimension {} does not match state dimension {}",
            grid.counts.len(),
            problem.state_dim()
        )));
    }
    let n_steps = grid.times.len() - 1;
    let dt = grid.dt();
    let nodes = grid.node_count();
    let m = problem.state_dim();
    let coords: Vec<Vec<f64>> = (0..nodes).map(|i| grid.node_coords(i)).collect();
    let controls = problem.control_samples();
    let mut layers: Vec<Vec<f64>> = vec![Vec::new(); n_steps + 1];
    layers[n_steps] = terminal;
    let outside = AtomicU64::new(0);

    for i in (0..n_steps).rev() {
        let t = grid.times[i];
        let prev = &layers[i + 1];
        let mut next = vec![0.0; nodes];
        next.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            let mut f = vec![0.0; m];
            let mut y = vec![0.0; m];
            let mut local_out = 0u64;
            for (k, slot) in chunk.iter_mut().enumerate() {
                let x = &coords[c * CHUNK + k];
                let mut best = f64::INFINITY;
                for u in controls {
                    problem.eval_dynamics(t, x, u, &mut f);
                    for j in 0..m {
                        y[j] = x[j] + dt * f[j];
                    }
                    let (tail, out) = grid.interp(prev, &y);
                    if out {
                        local_out += 1;
                    }
                    let cand = dt * problem.running_cost(t, x, u) + tail;
                    if cand < best {
                        best = cand;
                    }
                }
                *slot = best;
            }
            if local_out > 0 {
                outside.fetch_add(local_out, Ordering::Relaxed);
            }
        });
        if let Some(j) = next.iter().position(|v| !v.is_finite()) {
            return Err(LabError::Solver(format!(
                "non-finite value at t = {t}, node {:?}",
                coords[j]
            )));
        }
        layers[i] = next;
    }
    grid.layers = layers;
    if grid.spec.boundary == BoundaryPolicy::LargePenalty {
        grid.out_of_box = AtomicU64::new(outside.into_inner());
    }
    Ok(grid)
}

/// `V^T` with zero terminal payoff.
pub fn solve_finite_horizon(problem: &ControlProblem, spec: &GridSpec) -> Result<ValueGrid> {
    let grid = ValueGrid::empty(spec, TerminalTag::Zero)?;
    let terminal = vec![0.0; grid.node_count()];
    run_recursion(problem, grid, terminal)
}

/// Same recursion with `V[T][x] = terminal(x)`.
pub fn bolza_extend(
    problem: &ControlProblem,
    spec: &GridSpec,
    terminal: &(dyn Fn(&[f64]) -> f64 + Sync),
    label: &str,
) -> Result<ValueGrid> {
    let grid = ValueGrid::empty(spec, TerminalTag::Supplied(label.to_string()))?;
    let terminal: Vec<f64> = (0..grid.node_count())
        .map(|i| {
            let x = grid.node_coords(i);
            let v = terminal(&x);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(LabError::arg(format!("terminal payoff is not finite at {x:?}")))
            }
        })
        .collect::<Result<_>>()?;
    run_recursion(problem, grid, terminal)
}

/// Constants from the control samples plus every one-switch pair switching at `switch`.
pub fn one_switch_family(problem: &ControlProblem, switch: f64) -> Vec<ControlSignal> {
    let samples = problem.control_samples();
    let mut out = Vec::with_capacity(samples.len() * samples.len());
    for a in samples {
        for b in samples {
            if a == b {
                out.push(ControlSignal::constant(a.clone()));
            } else {
                out.push(
                    ControlSignal::piecewise(vec![0.0, switch], vec![a.clone(), b.clone()])
                        .expect("switch time is positive"),
                );
            }
        }
    }
    out
}

/// `V(t, b) - min_u [ J(t, b; u, tau) + V(tau, x(tau)) ]` over constant and
/// midpoint one-switch controls.
pub fn dpp_residual(
    field: &dyn ValueField,
    problem: &ControlProblem,
    t: f64,
    tau: f64,
    b: &[f64],
) -> Result<f64> {
    if !(tau > t && t >= 0.0) {
        return Err(LabError::arg(format!("need 0 <= t < tau, got t = {t}, tau = {tau}")));
    }
    let mid = 0.5 * (t + tau);
    let family = one_switch_family(problem, mid);
    let dt = DEFAULT_DT.min((tau - t) / 4.0);
    let best = family
        .par_iter()
        .map(|u| -> Result<f64> {
            let tr = integrate_trajectory(problem, b, t, u, tau, dt)?;
            Ok(accumulate_cost(problem, &tr, t, tau)? + field.value(tau, tr.final_state()))
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    Ok(field.value(t, b) - best)
}

/// Value `V(t, b)` of the double integrator with `P = R` truncated to `[-R, R]`, for each radius.
pub fn truncation_sensitivity(
    params: &BTreeMap<String, f64>,
    radii: &[f64],
    spec: &GridSpec,
    t: f64,
    b: &[f64],
) -> Result<Vec<(f64, f64)>> {
    radii
        .iter()
        .map(|&r| {
            let mut p = params.clone();
            p.insert("unbounded".into(), 1.0);
            p.insert("truncation".into(), r);
            let problem = builtin_problem_with("double-integrator", &p)?;
            let grid = solve_finite_horizon(&problem, spec)?;
            Ok((r, grid.evaluate(t, b)))
        })
        .collect()
}
