//! Control problems, piecewise-constant control signals, fourth-order
//! trajectory integration and running-cost accumulation.
//!
//! A [`ControlProblem`] bundles the dynamics `f(t, x, u)`, the running cost
//! `f0(t, x, u)`, a sampled control box and the initial state. Control signals
//! are piecewise constant and extend their last value to `+inf`. Trajectories
//! are produced by classical RK4 with steps split at every control breakpoint,
//! so each step sees a constant control.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub type DynamicsFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type CostFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
/// Row-major state Jacobian of the dynamics: `out[i * m + j] = df_i / dx_j`.
pub type JacobianFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type CostGradientFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Default integration step.
pub const DEFAULT_DT: f64 = 1e-3;
/// Default control lattice density per control dimension.
pub const DEFAULT_SAMPLES_PER_DIM: usize = 21;
/// Step used for central-difference derivatives when no analytic form is given.
pub const FD_STEP: f64 = 1e-5;

static PROBLEM_IDS: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    PROBLEM_IDS.fetch_add(1, Ordering::Relaxed)
}

/// Axis-aligned control box with a uniform sampling density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub samples: usize,
}

impl ControlBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, samples: usize) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(LabError::arg("control box bounds must be nonempty and of equal length"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(LabError::arg("control box requires finite lo <= hi"));
        }
        if samples == 0 {
            return Err(LabError::arg("control box needs at least one sample per dimension"));
        }
        Ok(ControlBox { lo, hi, samples })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Uniform lattice over the box; degenerate dimensions contribute one point.
    pub fn lattice(&self) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| {
                if h == l || self.samples == 1 {
                    vec![if h == l { l } else { 0.5 * (l + h) }]
                } else {
                    let n = self.samples;
                    (0..n)
                        .map(|i| if i + 1 == n { h } else { l + (h - l) * i as f64 / (n - 1) as f64 })
                        .collect()
                }
            })
            .collect();
        cartesian(&axes)
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.len() == self.dim()
            && u
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }
}

pub(crate) fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for prefix in &out {
            for &v in axis {
                let mut p = prefix.clone();
                p.push(v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// An optimal control problem `min int f0(t,x,u) dt` subject to `x' = f(t,x,u)`, `u in P`.
#[derive(Clone)]
pub struct ControlProblem {
    id: u64,
    name: String,
    state_dim: usize,
    control_dim: usize,
    dynamics: DynamicsFn,
    running_cost: CostFn,
    dynamics_jacobian: Option<JacobianFn>,
    cost_gradient: Option<CostGradientFn>,
    control_box: ControlBox,
    control_samples: Vec<Vec<f64>>,
    control_description: String,
    initial_state: Vec<f64>,
    growth_witness: (f64, f64),
    test_box: (Vec<f64>, Vec<f64>),
    params: BTreeMap<String, f64>,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("control_box", &self.control_box)
            .field("samples", &self.control_samples.len())
            .field("initial_state", &self.initial_state)
            .field("growth_witness", &self.growth_witness)
            .field("params", &self.params)
            .finish()
    }
}

/// Builder for [`ControlProblem`]; `build` validates the declared invariants.
pub struct ProblemBuilder {
    name: String,
    state_dim: usize,
    dynamics: Option<DynamicsFn>,
    running_cost: Option<CostFn>,
    dynamics_jacobian: Option<JacobianFn>,
    cost_gradient: Option<CostGradientFn>,
    control_box: Option<ControlBox>,
    control_samples: Option<Vec<Vec<f64>>>,
    control_description: Option<String>,
    initial_state: Option<Vec<f64>>,
    growth_witness: (f64, f64),
    test_box: Option<(Vec<f64>, Vec<f64>)>,
    params: BTreeMap<String, f64>,
}

impl ProblemBuilder {
    pub fn dynamics(
        mut self,
        f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dynamics = Some(Arc::new(f));
        self
    }

    pub fn running_cost(mut self, f0: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.running_cost = Some(Arc::new(f0));
        self
    }

    pub fn dynamics_jacobian(
        mut self,
        jac: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dynamics_jacobian = Some(Arc::new(jac));
        self
    }

    pub fn cost_gradient(
        mut self,
        grad: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.cost_gradient = Some(Arc::new(grad));
        self
    }

    pub fn control_box(mut self, cbox: ControlBox) -> Self {
        self.control_box = Some(cbox);
        self
    }

    /// Explicit control samples, overriding the box lattice.
    pub fn control_samples(mut self, samples: Vec<Vec<f64>>) -> Self {
        self.control_samples = Some(samples);
        self
    }

    pub fn description(mut self, text: impl Into<String>) -> Self {
        self.control_description = Some(text.into());
        self
    }

    pub fn initial_state(mut self, b: Vec<f64>) -> Self {
        self.initial_state = Some(b);
        self
    }

    pub fn growth_witness(mut self, c1: f64, c2: f64) -> Self {
        self.growth_witness = (c1, c2);
        self
    }

    /// Box of states used to validate the growth witness and finiteness.
    pub fn test_box(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.test_box = Some((lo, hi));
        self
    }

    pub fn param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn build(self) -> Result<ControlProblem> {
        let m = self.state_dim;
        if m == 0 {
            return Err(LabError::InvalidProblem("state dimension must be positive".into()));
        }
        let dynamics = self
            .dynamics
            .ok_or_else(|| LabError::InvalidProblem("dynamics not set".into()))?;
        let running_cost = self
            .running_cost
            .ok_or_else(|| LabError::InvalidProblem("running cost not set".into()))?;
        let control_box = self
            .control_box
            .ok_or_else(|| LabError::InvalidProblem("control box not set".into()))?;
        let samples = dedup_points(self.control_samples.unwrap_or_else(|| control_box.lattice()));
        if samples.is_empty() {
            return Err(LabError::InvalidProblem("control sample set is empty".into()));
        }
        if let Some(bad) = samples.iter().find(|u| !control_box.contains(u, 1e-12)) {
            return Err(LabError::InvalidProblem(format!("control sample {bad:?} lies outside the control box")));
        }
        let initial_state = self.initial_state.unwrap_or_else(|| vec![0.0; m]);
        if initial_state.len() != m || initial_state.iter().any(|v| !v.is_finite()) {
            return Err(LabError::InvalidProblem("initial state must be a finite vector of the state dimension".into()));
        }
        let (c1, c2) = self.growth_witness;
        if !(c1 >= 0.0 && c2 >= 0.0) {
            return Err(LabError::InvalidProblem("growth witness constants must be nonnegative".into()));
        }
        let test_box = self.test_box.unwrap_or_else(|| (vec![-1.0; m], vec![1.0; m]));
        if test_box.0.len() != m || test_box.1.len() != m {
            return Err(LabError::InvalidProblem("test box has wrong dimension".into()));
        }
        let description = self.control_description.unwrap_or_else(|| {
            format!("box lo={:?} hi={:?}, {} samples/dim", control_box.lo, control_box.hi, control_box.samples)
        });
        let problem = ControlProblem {
            id: next_id(),
            name: self.name,
            state_dim: m,
            control_dim: control_box.dim(),
            dynamics,
            running_cost,
            dynamics_jacobian: self.dynamics_jacobian,
            cost_gradient: self.cost_gradient,
            control_box,
            control_samples: samples,
            control_description: description,
            initial_state,
            growth_witness: (c1, c2),
            test_box,
            params: self.params,
        };
        problem.validate(1000, 0x5eed)?;
        Ok(problem)
    }
}

fn dedup_points(points: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(points.len());
    for p in points {
        if !out.iter().any(|q| q == &p) {
            out.push(p);
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

impl ControlProblem {
    pub fn builder(name: impl Into<String>, state_dim: usize) -> ProblemBuilder {
        ProblemBuilder {
            name: name.into(),
            state_dim,
            dynamics: None,
            running_cost: None,
            dynamics_jacobian: None,
            cost_gradient: None,
            control_box: None,
            control_samples: None,
            control_description: None,
            initial_state: None,
            growth_witness: (0.0, 0.0),
            test_box: None,
            params: BTreeMap::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn control_box(&self) -> &ControlBox {
        &self.control_box
    }

    pub fn control_samples(&self) -> &[Vec<f64>] {
        &self.control_samples
    }

    pub fn control_description(&self) -> &str {
        &self.control_description
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.initial_state
    }

    pub fn growth_witness(&self) -> (f64, f64) {
        self.growth_witness
    }

    pub fn test_box(&self) -> (&[f64], &[f64]) {
        (&self.test_box.0, &self.test_box.1)
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    /// Identity used by value caches; distinct for every built instance.
    pub fn cache_key(&self) -> String {
        format!("{}#{}", self.name, self.id)
    }

    #[inline]
    pub fn eval_dynamics(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.dynamics)(t, x, u, out)
    }

    pub fn dynamics(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        (self.dynamics)(t, x, u, &mut out);
        out
    }

    #[inline]
    pub fn running_cost(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        (self.running_cost)(t, x, u)
    }

    pub fn has_analytic_gradients(&self) -> bool {
        self.dynamics_jacobian.is_some() && self.cost_gradient.is_some()
    }

    /// Row-major `df/dx`; central differences with step [`FD_STEP`] when no analytic form exists.
    pub fn state_jacobian(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        let m = self.state_dim;
        let mut out = vec![0.0; m * m];
        if let Some(jac) = &self.dynamics_jacobian {
            jac(t, x, u, &mut out);
            return out;
        }
        self.fd_state_jacobian(t, x, u)
    }

    pub fn fd_state_jacobian(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        let m = self.state_dim;
        let mut out = vec![0.0; m * m];
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; m];
        let mut fm = vec![0.0; m];
        for j in 0..m {
            xp[j] = x[j] + FD_STEP;
            (self.dynamics)(t, &xp, u, &mut fp);
            xp[j] = x[j] - FD_STEP;
            (self.dynamics)(t, &xp, u, &mut fm);
            xp[j] = x[j];
            for i in 0..m {
                out[i * m + j] = (fp[i] - fm[i]) / (2.0 * FD_STEP);
            }
        }
        out
    }

    /// `df0/dx`; central differences when no analytic form exists.
    pub fn cost_gradient(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        if let Some(grad) = &self.cost_gradient {
            grad(t, x, u, &mut out);
            return out;
        }
        self.fd_cost_gradient(t, x, u)
    }

    pub fn fd_cost_gradient(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut xp = x.to_vec();
        (0..self.state_dim)
            .map(|j| {
                xp[j] = x[j] + FD_STEP;
                let p = self.running_cost(t, &xp, u);
                xp[j] = x[j] - FD_STEP;
                let q = self.running_cost(t, &xp, u);
                xp[j] = x[j];
                (p - q) / (2.0 * FD_STEP)
            })
            .collect()
    }

    pub fn with_initial_state(&self, b: Vec<f64>) -> Result<Self> {
        if b.len() != self.state_dim || b.iter().any(|v| !v.is_finite()) {
            return Err(LabError::arg("initial state has wrong dimension or is not finite"));
        }
        let mut p = self.clone();
        p.initial_state = b;
        Ok(p)
    }

    /// Restricts the sampled control set, e.g. to a subset `P'` of `P`.
    pub fn with_control_samples(&self, samples: Vec<Vec<f64>>) -> Result<Self> {
        let samples = dedup_points(samples);
        if samples.is_empty() {
            return Err(LabError::arg("control sample set is empty"));
        }
        if samples.iter().any(|u| !self.control_box.contains(u, 1e-12)) {
            return Err(LabError::arg("control samples must lie in the control box"));
        }
        let mut p = self.clone();
        p.id = next_id();
        p.control_samples = samples;
        Ok(p)
    }

    /// Replaces the running cost; analytic cost gradients are dropped.
    pub fn with_running_cost(&self, f0: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        let mut p = self.clone();
        p.id = next_id();
        p.running_cost = Arc::new(f0);
        p.cost_gradient = None;
        p
    }

    /// Checks finiteness and the sublinear growth witness on random states of the test box.
    pub fn validate(&self, samples: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = &self.test_box;
        let (c1, c2) = self.growth_witness;
        let mut x = vec![0.0; self.state_dim];
        let mut fx = vec![0.0; self.state_dim];
        for _ in 0..samples {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = if hi[i] > lo[i] { rng.gen_range(lo[i]..=hi[i]) } else { lo[i] };
            }
            let t = rng.gen_range(0.0..=10.0);
            let u = &self.control_samples[rng.gen_range(0..self.control_samples.len())];
            (self.dynamics)(t, &x, u, &mut fx);
            let c = self.running_cost(t, &x, u);
            if fx.iter().any(|v| !v.is_finite()) || !c.is_finite() {
                return Err(LabError::InvalidProblem(format!(
                    "non-finite dynamics or cost at t={t}, x={x:?}, u={u:?}"
                )));
            }
            if norm(&fx) > c1 * norm(&x) + c2 + 1e-9 {
                return Err(LabError::InvalidProblem(format!(
                    "growth witness ({c1}, {c2}) violated at x={x:?}, u={u:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Hamilton-Pontryagin function `psi . f(t,x,u) - lambda * f0(t,x,u)`.
pub fn hamiltonian(problem: &ControlProblem, x: &[f64], u: &[f64], psi: &[f64], lambda: f64, t: f64) -> f64 {
    let f = problem.dynamics(t, x, u);
    let dot: f64 = psi.iter().zip(&f).map(|(a, b)| a * b).sum();
    if lambda == 0.0 {
        dot
    } else {
        dot - lambda * problem.running_cost(t, x, u)
    }
}

/// Piecewise-constant control: `values[i]` holds on `[breakpoints[i], breakpoints[i+1])`,
/// the last value on `[breakpoints.last(), +inf)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    breakpoints: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl ControlSignal {
    pub fn constant(value: Vec<f64>) -> Self {
        ControlSignal {
            breakpoints: vec![0.0],
            values: vec![value],
        }
    }

    pub fn piecewise(breakpoints: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(LabError::arg("control signal needs one value per breakpoint"));
        }
        if breakpoints[0] != 0.0 {
            return Err(LabError::arg("control signal breakpoints must start at 0"));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) || breakpoints.iter().any(|b| !b.is_finite()) {
            return Err(LabError::arg("control signal breakpoints must be finite and strictly increasing"));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim || v.iter().any(|a| !a.is_finite())) {
            return Err(LabError::arg("control values must be finite and share one dimension"));
        }
        Ok(ControlSignal { breakpoints, values })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn value_at(&self, t: f64) -> &[f64] {
        let idx = self.breakpoints.partition_point(|b| *b <= t);
        &self.values[idx.saturating_sub(1)]
    }

    /// Breakpoints strictly inside `(a, b)`.
    pub fn breakpoints_between(&self, a: f64, b: f64) -> impl Iterator<Item = f64> + '_ {
        self.breakpoints.iter().copied().filter(move |&s| s > a && s < b)
    }

    pub fn is_admissible(&self, cbox: &ControlBox) -> bool {
        self.values.iter().all(|v| cbox.contains(v, 1e-12))
    }

    /// Same profile started at `offset`: the first value also covers `[0, offset)`.
    pub fn delayed(&self, offset: f64) -> ControlSignal {
        let mut breakpoints = self.breakpoints.clone();
        for b in breakpoints.iter_mut().skip(1) {
            *b += offset;
        }
        ControlSignal {
            breakpoints,
            values: self.values.clone(),
        }
    }

    /// `int_a^b |u(s)|^p ds` with the Euclidean norm.
    pub fn lp_integral(&self, a: f64, b: f64, p: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let mut knots: Vec<f64> = vec![a];
        knots.extend(self.breakpoints_between(a, b));
        knots.push(b);
        knots
            .windows(2)
            .map(|w| norm(self.value_at(w[0])).powf(p) * (w[1] - w[0]))
            .sum()
    }
}

/// `u1` on `[0, switch)` and `u2` (at the same absolute times) on `[switch, inf)`.
pub fn concatenate(u1: &ControlSignal, switch: f64, u2: &ControlSignal) -> ControlSignal {
    if switch <= 0.0 {
        return u2.clone();
    }
    let mut breakpoints = Vec::new();
    let mut values = Vec::new();
    for (b, v) in u1.breakpoints.iter().zip(&u1.values) {
        if *b < switch {
            breakpoints.push(*b);
            values.push(v.clone());
        }
    }
    breakpoints.push(switch);
    values.push(u2.value_at(switch).to_vec());
    for (b, v) in u2.breakpoints.iter().zip(&u2.values) {
        if *b > switch {
            breakpoints.push(*b);
            values.push(v.clone());
        }
    }
    ControlSignal { breakpoints, values }
}

/// Sampled solution `x_{b,t0,u}` on `[t0, T]`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    start_time: f64,
    times: Vec<f64>,
    states: Vec<Vec<f64>>,
    segment_controls: Vec<Vec<f64>>,
    control: ControlSignal,
    step: f64,
}

impl Trajectory {
    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    /// Control applied on the interval `[times[i], times[i+1])`.
    pub fn segment_control(&self, i: usize) -> &[f64] {
        &self.segment_controls[i.min(self.segment_controls.len() - 1)]
    }

    pub fn control(&self) -> &ControlSignal {
        &self.control
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    /// Interval index containing `t` (clamped to the span).
    pub fn segment_index(&self, t: f64) -> usize {
        let idx = self.times.partition_point(|s| *s <= t);
        idx.saturating_sub(1).min(self.times.len() - 2)
    }

    /// State at `t` by cubic Hermite interpolation within the RK4 interval.
    pub fn state_at(&self, problem: &ControlProblem, t: f64) -> Vec<f64> {
        let i = self.segment_index(t);
        if t == self.times[i] {
            return self.states[i].clone();
        }
        if t == self.times[i + 1] {
            return self.states[i + 1].clone();
        }
        hermite_state(problem, self, i, t)
    }
}

pub(crate) fn hermite_state(problem: &ControlProblem, traj: &Trajectory, i: usize, t: f64) -> Vec<f64> {
    let (t0, t1) = (traj.times[i], traj.times[i + 1]);
    let u = &traj.segment_controls[i];
    let x0 = &traj.states[i];
    let x1 = &traj.states[i + 1];
    let f0 = problem.dynamics(t0, x0, u);
    let f1 = problem.dynamics(t1, x1, u);
    let h = t1 - t0;
    let s = (t - t0) / h;
    let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
    let h10 = s * (1.0 - s) * (1.0 - s);
    let h01 = s * s * (3.0 - 2.0 * s);
    let h11 = s * s * (s - 1.0);
    (0..x0.len())
        .map(|k| h00 * x0[k] + h10 * h * f0[k] + h01 * x1[k] + h11 * h * f1[k])
        .collect()
}

struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    fn new(m: usize) -> Self {
        Rk4Scratch {
            k1: vec![0.0; m],
            k2: vec![0.0; m],
            k3: vec![0.0; m],
            k4: vec![0.0; m],
            tmp: vec![0.0; m],
        }
    }
}

fn rk4_step(problem: &ControlProblem, t: f64, x: &[f64], u: &[f64], h: f64, out: &mut [f64], s: &mut Rk4Scratch) {
    let m = x.len();
    problem.eval_dynamics(t, x, u, &mut s.k1);
    for i in 0..m {
        s.tmp[i] = x[i] + 0.5 * h * s.k1[i];
    }
    problem.eval_dynamics(t + 0.5 * h, &s.tmp, u, &mut s.k2);
    for i in 0..m {
        s.tmp[i] = x[i] + 0.5 * h * s.k2[i];
    }
    problem.eval_dynamics(t + 0.5 * h, &s.tmp, u, &mut s.k3);
    for i in 0..m {
        s.tmp[i] = x[i] + h * s.k3[i];
    }
    problem.eval_dynamics(t + h, &s.tmp, u, &mut s.k4);
    for i in 0..m {
        out[i] = x[i] + h / 6.0 * (s.k1[i] + 2.0 * s.k2[i] + 2.0 * s.k3[i] + s.k4[i]);
    }
}

/// Integrates `x' = f(t, x, u(t))` from `(t0, b)` to `t_end` with classical RK4.
///
/// Each constant piece of `u` inside `[t0, t_end]` is split into `ceil(len / dt)`
/// equal steps, so no step straddles a breakpoint.
pub fn integrate_trajectory(
    problem: &ControlProblem,
    b: &[f64],
    t0: f64,
    u: &ControlSignal,
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(LabError::arg(format!("integration step must be positive, got {dt}")));
    }
    if !(t_end > t0) {
        return Err(LabError::arg(format!("horizon {t_end} must exceed start time {t0}")));
    }
    if b.len() != problem.state_dim() || b.iter().any(|v| !v.is_finite()) {
        return Err(LabError::arg("initial state must be finite and match the state dimension"));
    }
    if u.dim() != problem.control_dim() {
        return Err(LabError::arg("control signal dimension does not match the problem"));
    }
    let m = problem.state_dim();
    let mut knots = vec![t0];
    knots.extend(u.breakpoints_between(t0, t_end));
    knots.push(t_end);

    let estimate = ((t_end - t0) / dt).ceil() as usize + knots.len();
    let mut times = Vec::with_capacity(estimate + 1);
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(estimate + 1);
    let mut segment_controls = Vec::with_capacity(estimate);
    times.push(t0);
    states.push(b.to_vec());
    let mut scratch = Rk4Scratch::new(m);
    let mut next = vec![0.0; m];

    for w in knots.windows(2) {
        let (a, c) = (w[0], w[1]);
        let uval = u.value_at(a).to_vec();
        let n = (((c - a) / dt) - 1e-9).ceil().max(1.0) as usize;
        let h = (c - a) / n as f64;
        for j in 0..n {
            let t = a + j as f64 * h;
            let x = states.last().unwrap();
            rk4_step(problem, t, x, &uval, h, &mut next, &mut scratch);
            let t_next = if j + 1 == n { c } else { a + (j + 1) as f64 * h };
            if next.iter().any(|v| !v.is_finite()) {
                return Err(LabError::BlowUp {
                    what: "state".into(),
                    time: t_next,
                });
            }
            times.push(t_next);
            states.push(next.clone());
            segment_controls.push(uval.clone());
        }
    }
    Ok(Trajectory {
        start_time: t0,
        times,
        states,
        segment_controls,
        control: u.clone(),
        step: dt,
    })
}

fn simpson_interval(problem: &ControlProblem, traj: &Trajectory, i: usize, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let u = &traj.segment_controls[i];
    let xa = if a == traj.times[i] { traj.states[i].clone() } else { hermite_state(problem, traj, i, a) };
    let xb = if b == traj.times[i + 1] {
        traj.states[i + 1].clone()
    } else {
        hermite_state(problem, traj, i, b)
    };
    let mid = 0.5 * (a + b);
    let xm = hermite_state(problem, traj, i, mid);
    (b - a) / 6.0
        * (problem.running_cost(a, &xa, u) + 4.0 * problem.running_cost(mid, &xm, u) + problem.running_cost(b, &xb, u))
}

/// `J(theta, x(theta); u, T)` for each `T` in `ends`, in one sweep along the trajectory.
///
/// Simpson's rule is applied on every RK4 interval with the midpoint state taken
/// from the cubic Hermite interpolant, so the quadrature matches the integrator's order.
pub fn cost_profile(problem: &ControlProblem, traj: &Trajectory, theta: f64, ends: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = (traj.start_time(), traj.end_time());
    let slack = 1e-12 * (1.0 + hi.abs());
    let inside = |s: f64| s >= lo - slack && s <= hi + slack;
    if !inside(theta) || ends.iter().any(|&e| !inside(e) || e < theta) {
        return Err(LabError::arg(format!(
            "cost interval [{theta}, {ends:?}] outside trajectory span [{lo}, {hi}]"
        )));
    }
    let theta = theta.clamp(lo, hi);
    let mut order: Vec<usize> = (0..ends.len()).collect();
    order.sort_by(|a, b| ends[*a].total_cmp(&ends[*b]));
    let mut out = vec![0.0; ends.len()];

    let mut i = traj.segment_index(theta);
    let mut pos = theta;
    let mut acc = 0.0;
    for k in order {
        let target = ends[k].clamp(lo, hi);
        while traj.times[i + 1] < target {
            acc += simpson_interval(problem, traj, i, pos, traj.times[i + 1]);
            pos = traj.times[i + 1];
            i += 1;
        }
        out[k] = acc + simpson_interval(problem, traj, i, pos, target);
    }
    Ok(out)
}

/// `J(theta, x(theta); u, T) = int_theta^T f0(s, x(s), u(s)) ds` along `traj`.
pub fn accumulate_cost(problem: &ControlProblem, traj: &Trajectory, theta: f64, t_end: f64) -> Result<f64> {
    Ok(cost_profile(problem, traj, theta, &[t_end])?[0])
}

/// Names accepted by [`builtin_problem`].
pub const BUILTIN_NAMES: [&str; 3] = ["capital-stock", "double-integrator", "linear-l1"];

/// Built-in problem with default parameters.
pub fn builtin_problem(name: &str) -> Result<ControlProblem> {
    builtin_problem_with(name, &BTreeMap::new())
}

fn take_params(name: &str, given: &BTreeMap<String, f64>, defaults: &[(&str, f64)]) -> Result<BTreeMap<String, f64>> {
    let mut out: BTreeMap<String, f64> = defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in given {
        if !out.contains_key(k) {
            let valid: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
            return Err(LabError::InvalidProblem(format!(
                "unknown parameter '{k}' for '{name}'; valid: {}",
                valid.join(", ")
            )));
        }
        if !v.is_finite() {
            return Err(LabError::InvalidProblem(format!("parameter '{k}' must be finite")));
        }
        out.insert(k.clone(), *v);
    }
    Ok(out)
}

fn samples_param(p: &BTreeMap<String, f64>) -> Result<usize> {
    let s = p["samples"];
    if s < 1.0 || s.fract() != 0.0 {
        return Err(LabError::InvalidProblem("'samples' must be a positive integer".into()));
    }
    Ok(s as usize)
}

/// Built-in problem with parameter overrides.
///
/// * `linear-l1`: `x' = 2u - x`, `f0 = 2u + |u| - x`, `P = [-1/2, 1/2]`; params `b`, `samples`.
/// * `capital-stock`: `x' = -nu x + u`, `f0 = e^{mu t} g(x,u)` with
///   `g = w_x (x - x_target)^2 + w_u u^2`, `P = [0, u_max]`;
///   params `nu`, `u_max`, `mu`, `g_state_weight`, `g_target`, `g_control_weight`, `b`, `samples`.
/// * `double-integrator`: `y1' = u`, `y2' = y1`, `g = |y1|^k + |y2|^{k/2}` (homogeneous of
///   degree `k` under `(y1, y2) -> (v y1, v^2 y2)`), `P = [-a^2, a^2]`, or `[-R, R]` when
///   `unbounded = 1` with truncation radius `R = truncation`; params `a`, `k`, `unbounded`,
///   `truncation`, `b1`, `b2`, `samples`.
pub fn builtin_problem_with(name: &str, params: &BTreeMap<String, f64>) -> Result<ControlProblem> {
    match name {
        "linear-l1" => {
            let p = take_params(name, params, &[("b", 1.0), ("samples", DEFAULT_SAMPLES_PER_DIM as f64)])?;
            let samples = samples_param(&p)?;
            ControlProblem::builder(name, 1)
                .dynamics(|_t, x, u, out| out[0] = 2.0 * u[0] - x[0])
                .running_cost(|_t, x, u| 2.0 * u[0] + u[0].abs() - x[0])
                .dynamics_jacobian(|_t, _x, _u, out| out[0] = -1.0)
                .cost_gradient(|_t, _x, _u, out| out[0] = -1.0)
                .control_box(ControlBox::new(vec![-0.5], vec![0.5], samples)?)
                .description("P = [-1/2, 1/2]")
                .initial_state(vec![p["b"]])
                .growth_witness(1.0, 1.0)
                .test_box(vec![-5.0], vec![5.0])
                .param("b", p["b"])
                .param("samples", p["samples"])
                .build()
        }
        "capital-stock" => {
            let p = take_params(
                name,
                params,
                &[
                    ("nu", 1.0),
                    ("u_max", 1.0),
                    ("mu", -1.0),
                    ("g_state_weight", 1.0),
                    ("g_target", 1.0),
                    ("g_control_weight", 1.0),
                    ("b", 0.5),
                    ("samples", DEFAULT_SAMPLES_PER_DIM as f64),
                ],
            )?;
            let samples = samples_param(&p)?;
            let (nu, u_max, mu) = (p["nu"], p["u_max"], p["mu"]);
            let (wx, target, wu) = (p["g_state_weight"], p["g_target"], p["g_control_weight"]);
            if !(nu > 0.0) || !(u_max > 0.0) {
                return Err(LabError::InvalidProblem("capital-stock needs nu > 0 and u_max > 0".into()));
            }
            let mut builder = ControlProblem::builder(name, 1)
                .dynamics(move |_t, x, u, out| out[0] = -nu * x[0] + u[0])
                .running_cost(move |t, x, u| {
                    (mu * t).exp() * (wx * (x[0] - target).powi(2) + wu * u[0] * u[0])
                })
                .dynamics_jacobian(move |_t, _x, _u, out| out[0] = -nu)
                .cost_gradient(move |t, x, _u, out| out[0] = (mu * t).exp() * 2.0 * wx * (x[0] - target))
                .control_box(ControlBox::new(vec![0.0], vec![u_max], samples)?)
                .description(format!("P = [0, {u_max}]"))
                .initial_state(vec![p["b"]])
                .growth_witness(nu, u_max)
                .test_box(vec![-5.0], vec![5.0]);
            for (k, v) in &p {
                builder = builder.param(k, *v);
            }
            builder.build()
        }
        "double-integrator" => {
            let p = take_params(
                name,
                params,
                &[
                    ("a", 1.0),
                    ("k", 2.0),
                    ("unbounded", 0.0),
                    ("truncation", 5.0),
                    ("b1", 0.5),
                    ("b2", 0.5),
                    ("samples", DEFAULT_SAMPLES_PER_DIM as f64),
                ],
            )?;
            let samples = samples_param(&p)?;
            let k = p["k"];
            if !(k > 0.0) {
                return Err(LabError::InvalidProblem("double-integrator needs k > 0".into()));
            }
            let bound = if p["unbounded"] != 0.0 { p["truncation"] } else { p["a"] * p["a"] };
            if !(bound > 0.0) {
                return Err(LabError::InvalidProblem("double-integrator control bound must be positive".into()));
            }
            let description = if p["unbounded"] != 0.0 {
                format!("P = R truncated to [-{bound}, {bound}]")
            } else {
                format!("P = [-a^2, a^2] = [-{bound}, {bound}]")
            };
            let mut builder = ControlProblem::builder(name, 2)
                .dynamics(|_t, y, u, out| {
                    out[0] = u[0];
                    out[1] = y[0];
                })
                .running_cost(move |_t, y, _u| y[0].abs().powf(k) + y[1].abs().powf(0.5 * k))
                .dynamics_jacobian(|_t, _y, _u, out| {
                    out[0] = 0.0;
                    out[1] = 0.0;
                    out[2] = 1.0;
                    out[3] = 0.0;
                })
                .cost_gradient(move |_t, y, _u, out| {
                    out[0] = if y[0] == 0.0 { 0.0 } else { k * y[0].abs().powf(k - 1.0) * y[0].signum() };
                    out[1] = if y[1] == 0.0 {
                        0.0
                    } else {
                        0.5 * k * y[1].abs().powf(0.5 * k - 1.0) * y[1].signum()
                    };
                })
                .control_box(ControlBox::new(vec![-bound], vec![bound], samples)?)
                .description(description)
                .initial_state(vec![p["b1"], p["b2"]])
                .growth_witness(1.0, bound)
                .test_box(vec![-5.0, -5.0], vec![5.0, 5.0]);
            for (key, v) in &p {
                builder = builder.param(key, *v);
            }
            builder.build()
        }
        _ => Err(LabError::UnknownProblem {
            name: name.to_string(),
            valid: BUILTIN_NAMES.iter().map(|s| s.to_string()).collect(),
        }),
    }
}

/// JSON problem descriptor: a built-in name with overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProblemDescriptor {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
    #[serde(default)]
    pub control_box: Option<ControlBox>,
}

impl ProblemDescriptor {
    pub fn named(name: &str) -> Self {
        ProblemDescriptor {
            name: name.to_string(),
            ..Default::default()
        }
    }

    pub fn build(&self) -> Result<ControlProblem> {
        let mut problem = builtin_problem_with(&self.name, &self.params)?;
        if let Some(cbox) = &self.control_box {
            let cbox = ControlBox::new(cbox.lo.clone(), cbox.hi.clone(), cbox.samples)?;
            if cbox.dim() != problem.control_dim() {
                return Err(LabError::InvalidProblem("control box dimension does not match the problem".into()));
            }
            let mut p = problem.clone();
            p.id = next_id();
            p.control_samples = cbox.lattice();
            p.control_description = format!("box lo={:?} hi={:?}, {} samples/dim", cbox.lo, cbox.hi, cbox.samples);
            p.control_box = cbox;
            p.validate(1000, 0x5eed)?;
            problem = p;
        }
        if let Some(b) = &self.initial_state {
            problem = problem
                .with_initial_state(b.clone())
                .map_err(|e| LabError::InvalidProblem(e.to_string()))?;
        }
        Ok(problem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ll1() -> ControlProblem {
        builtin_problem("linear-l1").unwrap()
    }

    fn zero_dynamics() -> ControlProblem {
        ControlProblem::builder("zero", 1)
            .dynamics(|_t, _x, _u, out| out[0] = 0.0)
            .running_cost(|_t, _x, _u| 1.0)
            .control_box(ControlBox::new(vec![0.0], vec![0.0], 1).unwrap())
            .build()
            .unwrap()
    }

    #[test]
    fn decay_from_one() {
        let p = ll1();
        let u = ControlSignal::constant(vec![0.0]);
        let tr = integrate_trajectory(&p, &[1.0], 0.0, &u, 1.0, DEFAULT_DT).unwrap();
        assert!((tr.final_state()[0] - (-1.0f64).exp()).abs() < 1e-8);
        assert_eq!(tr.states()[0], vec![1.0]);
    }

    #[test]
    fn zero_dynamics_constant() {
        let p = zero_dynamics();
        let u = ControlSignal::constant(vec![0.0]);
        let tr = integrate_trajectory(&p, &[3.0], 0.0, &u, 2.0, 0.1).unwrap();
        assert!(tr.states().iter().all(|x| x[0] == 3.0));
    }

    #[test]
    fn half_control_from_origin() {
        let p = ll1();
        let u = ControlSignal::constant(vec![0.5]);
        let tr = integrate_trajectory(&p, &[0.0], 0.0, &u, 1.0, DEFAULT_DT).unwrap();
        assert!((tr.final_state()[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-8);
    }

    #[test]
    fn bad_step_and_blow_up() {
        let p = ll1();
        let u = ControlSignal::constant(vec![0.0]);
        assert!(matches!(
            integrate_trajectory(&p, &[1.0], 0.0, &u, 1.0, 0.0),
            Err(LabError::Argument(_))
        ));
        let explode = ControlProblem::builder("explode", 1)
            .dynamics(|_t, x, _u, out| out[0] = x[0] * x[0])
            .running_cost(|_t, _x, _u| 0.0)
            .control_box(ControlBox::new(vec![0.0], vec![0.0], 1).unwrap())
            .growth_witness(1.0, 1.0)
            .test_box(vec![0.0], vec![0.5])
            .build()
            .unwrap();
        match integrate_trajectory(&explode, &[1.0], 0.0, &u, 5.0, 0.01) {
            Err(LabError::BlowUp { time, .. }) => assert!(time > 0.9 && time < 5.0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn steps_split_at_breakpoints() {
        let p = ll1();
        let u = ControlSignal::piecewise(vec![0.0, 0.3337], vec![vec![0.0], vec![0.5]]).unwrap();
        let tr = integrate_trajectory(&p, &[0.0], 0.0, &u, 1.0, 0.01).unwrap();
        assert!(tr.times().contains(&0.3337));
        // x = 0 up to the switch, then 1 - e^{-(t - s)}
        let expect = 1.0 - (-(1.0 - 0.3337f64)).exp();
        assert!((tr.final_state()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn cost_examples() {
        let p = ll1();
        let zero = ControlSignal::constant(vec![0.0]);
        let t_end = 2f64.ln();
        let tr = integrate_trajectory(&p, &[1.0], 0.0, &zero, t_end, DEFAULT_DT).unwrap();
        let j = accumulate_cost(&p, &tr, 0.0, t_end).unwrap();
        assert!((j + 0.5).abs() < 1e-6, "J = {j}");

        let half = ControlSignal::constant(vec![0.5]);
        let tr = integrate_trajectory(&p, &[0.0], 0.0, &half, 1.0, DEFAULT_DT).unwrap();
        let j = accumulate_cost(&p, &tr, 0.0, 1.0).unwrap();
        assert!((j - (1.0 - (-1.0f64).exp() + 0.5)).abs() < 1e-6);

        let z = zero_dynamics();
        let tr = integrate_trajectory(&z, &[0.2], 0.0, &ControlSignal::constant(vec![0.0]), 3.0, 0.01).unwrap();
        let j = accumulate_cost(&z, &tr, 0.7, 2.9).unwrap();
        assert!((j - 2.2).abs() < 1e-12);
        assert!(accumulate_cost(&z, &tr, 0.5, 3.5).is_err());
    }

    #[test]
    fn cost_is_additive() {
        let p = ll1();
        let u = ControlSignal::piecewise(vec![0.0, 0.4, 1.1], vec![vec![0.5], vec![-0.5], vec![0.1]]).unwrap();
        let tr = integrate_trajectory(&p, &[0.3], 0.0, &u, 2.0, DEFAULT_DT).unwrap();
        let whole = accumulate_cost(&p, &tr, 0.1, 1.9).unwrap();
        let left = accumulate_cost(&p, &tr, 0.1, 0.777).unwrap();
        let right = accumulate_cost(&p, &tr, 0.777, 1.9).unwrap();
        assert!((whole - left - right).abs() < 1e-12);
        // J = x(T) - x(theta) + ||u||_L1 on this problem
        let expect = tr.state_at(&p, 1.9)[0] - tr.state_at(&p, 0.1)[0] + u.lp_integral(0.1, 1.9, 1.0);
        assert!((whole - expect).abs() < 1e-9);
    }

    #[test]
    fn semigroup_property() {
        let p = builtin_problem("capital-stock").unwrap();
        let u = ControlSignal::piecewise(vec![0.0, 0.5], vec![vec![1.0], vec![0.2]]).unwrap();
        let whole = integrate_trajectory(&p, &[0.3], 0.0, &u, 2.0, DEFAULT_DT).unwrap();
        let first = integrate_trajectory(&p, &[0.3], 0.0, &u, 1.0, DEFAULT_DT).unwrap();
        let second = integrate_trajectory(&p, first.final_state(), 1.0, &u, 2.0, DEFAULT_DT).unwrap();
        assert!((whole.final_state()[0] - second.final_state()[0]).abs() < 1e-9 * 2.0);
    }

    #[test]
    fn rk4_fourth_order() {
        let p = builtin_problem("capital-stock").unwrap();
        let u = ControlSignal::constant(vec![0.7]);
        let err = |dt: f64| {
            let tr = integrate_trajectory(&p, &[2.0], 0.0, &u, 1.0, dt).unwrap();
            let exact = 0.7 + (2.0 - 0.7) * (-1.0f64).exp();
            (tr.final_state()[0] - exact).abs()
        };
        let (e1, e2) = (err(0.1), err(0.05));
        assert!(e1 < 1e-5);
        assert!(e2 < e1 / 12.0, "e1={e1} e2={e2}");
    }

    #[test]
    fn hamiltonian_examples() {
        let p = ll1();
        assert_eq!(hamiltonian(&p, &[0.0], &[0.0], &[1.0], 1.0, 0.0), 0.0);
        assert!((hamiltonian(&p, &[0.0], &[0.5], &[1.0], 1.0, 0.0) + 0.5).abs() < 1e-15);
        let h = hamiltonian(&p, &[0.3], &[0.2], &[1.7], 0.0, 0.0);
        assert!((h - 1.7 * (0.4 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn concatenation_cases() {
        let a = ControlSignal::constant(vec![0.25]);
        let c = concatenate(&a, 1.3, &a);
        for t in [0.0, 0.5, 1.3, 2.0, 100.0] {
            assert_eq!(c.value_at(t), &[0.25]);
        }
        let u2 = ControlSignal::piecewise(vec![0.0, 2.0], vec![vec![0.1], vec![0.2]]).unwrap();
        assert_eq!(concatenate(&a, 0.0, &u2), u2);
        let z = ControlSignal::constant(vec![0.0]);
        let h = ControlSignal::constant(vec![0.5]);
        let c = concatenate(&z, 1.0, &h);
        assert_eq!(c.value_at(0.5), &[0.0]);
        assert_eq!(c.value_at(1.5), &[0.5]);
    }

    #[test]
    fn concatenated_cost_matches_head() {
        let p = ll1();
        let u1 = ControlSignal::piecewise(vec![0.0, 0.6], vec![vec![-0.5], vec![0.3]]).unwrap();
        let u2 = ControlSignal::constant(vec![0.5]);
        let c = concatenate(&u1, 1.2, &u2);
        let t1 = integrate_trajectory(&p, &[0.4], 0.0, &u1, 1.2, DEFAULT_DT).unwrap();
        let t2 = integrate_trajectory(&p, &[0.4], 0.0, &c, 1.2, DEFAULT_DT).unwrap();
        assert_eq!(
            accumulate_cost(&p, &t1, 0.0, 1.2).unwrap(),
            accumulate_cost(&p, &t2, 0.0, 1.2).unwrap()
        );
    }

    #[test]
    fn builtin_examples() {
        let p = ll1();
        let s = p.control_samples();
        assert_eq!(s.len(), 21);
        assert_eq!(s.first().unwrap()[0], -0.5);
        assert_eq!(s.last().unwrap()[0], 0.5);

        let cs = builtin_problem("capital-stock").unwrap();
        assert_eq!(cs.dynamics(0.0, &[0.0], &[0.0]), vec![0.0]);

        let di = builtin_problem("double-integrator").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let y1: f64 = rng.gen_range(-3.0..3.0);
            let y2: f64 = rng.gen_range(-3.0..3.0);
            let u: f64 = rng.gen_range(-1.0..1.0);
            let lhs = di.running_cost(0.0, &[2.0 * y1, 4.0 * y2], &[u]);
            let rhs = 4.0 * di.running_cost(0.0, &[y1, y2], &[u]);
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        match builtin_problem("nope") {
            Err(LabError::UnknownProblem { valid, .. }) => assert_eq!(valid.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn growth_witness_holds_for_builtins() {
        for name in BUILTIN_NAMES {
            let p = builtin_problem(name).unwrap();
            p.validate(1000, 99).unwrap();
        }
    }

    #[test]
    fn growth_witness_violation_is_reported() {
        let res = ControlProblem::builder("bad", 1)
            .dynamics(|_t, x, _u, out| out[0] = x[0] * x[0])
            .running_cost(|_t, _x, _u| 0.0)
            .control_box(ControlBox::new(vec![0.0], vec![0.0], 1).unwrap())
            .growth_witness(1.0, 0.0)
            .test_box(vec![-5.0], vec![5.0])
            .build();
        assert!(matches!(res, Err(LabError::InvalidProblem(_))));
    }

    #[test]
    fn analytic_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in BUILTIN_NAMES {
            let p = builtin_problem(name).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..p.state_dim()).map(|_| rng.gen_range(0.2..2.0)).collect();
                let u = &p.control_samples()[rng.gen_range(0..p.control_samples().len())];
                let t = rng.gen_range(0.0..3.0);
                let (ja, jf) = (p.state_jacobian(t, &x, u), p.fd_state_jacobian(t, &x, u));
                let (ga, gf) = (p.cost_gradient(t, &x, u), p.fd_cost_gradient(t, &x, u));
                for (a, b) in ja.iter().zip(&jf).chain(ga.iter().zip(&gf)) {
                    assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{name}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn descriptor_overrides() {
        let json = r#"{"name":"linear-l1","params":{"b":0.25},"control_box":{"lo":[-0.5],"hi":[0.5],"samples":5}}"#;
        let d: ProblemDescriptor = serde_json::from_str(json).unwrap();
        let p = d.build().unwrap();
        assert_eq!(p.initial_state(), &[0.25]);
        assert_eq!(p.control_samples().len(), 5);
        let bad: ProblemDescriptor = serde_json::from_str(r#"{"name":"linear-l1","params":{"zzz":1}}"#).unwrap();
        assert!(bad.build().is_err());
    }

    #[test]
    fn duplicate_samples_are_removed() {
        let p = ll1().with_control_samples(vec![vec![0.0], vec![0.0], vec![0.5]]).unwrap();
        assert_eq!(p.control_samples().len(), 2);
    }
}
