//! Costate arcs, the maximum condition, superdifferential surrogates and
//! certificates for the infinite-horizon maximum principle.
//!
//! With `H(t, x, u, psi, lambda) = psi . f - lambda f0` the relations checked are
//!
//! ```text
//! -psi'(s)            = dH/dx (s, x*(s), u*(s), psi(s), lambda)
//! H(s, x*, u*, psi)   = sup_{v in P} H(s, x*, v, psi)
//! -psi(0)             in d+_x V(0, x*(0))
//! (H(s,...), -psi(s)) in d+ V(s, x*(s))
//! ```
//!
//! Superdifferential membership is decided by finite-sample surrogates and is
//! never claimed as exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::optimal_in_view_residual;
use crate::error::{LabError, Result};
use crate::problem::{hamiltonian, hermite_state, integrate_trajectory, ControlProblem, ControlSignal, Trajectory};
use crate::limits::HorizonSequence;
use crate::value::{bolza_extend, GridSpec, ValueField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostateDirection {
    ForwardFromStart,
    BackwardFromEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArcOrigin {
    ShootingFromStart,
    BackwardFromEnd,
    LimitOfFiniteHorizon,
}

/// Costate `psi` sampled on the nodes of a trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostateArc {
    pub times: Vec<f64>,
    pub psi: Vec<Vec<f64>>,
    pub lambda: u8,
    pub origin: ArcOrigin,
}

impl CostateArc {
    pub fn initial(&self) -> &[f64] {
        &self.psi[0]
    }

    pub fn terminal(&self) -> &[f64] {
        self.psi.last().unwrap()
    }

    /// `t, psi0, psi1, ...` rows.
    pub fn to_csv(&self) -> String {
        let m = self.psi[0].len();
        let mut out = String::from("t");
        for k in 0..m {
            out.push_str(&format!(",psi{k}"));
        }
        out.push('\n');
        for (t, p) in self.times.iter().zip(&self.psi) {
            out.push_str(&format!("{t:.16e}"));
            for v in p {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }
}

fn costate_rhs(problem: &ControlProblem, s: f64, x: &[f64], u: &[f64], psi: &[f64], lambda: f64, out: &mut [f64]) {
    let m = psi.len();
    let jac = problem.state_jacobian(s, x, u);
    let grad = if lambda != 0.0 { problem.cost_gradient(s, x, u) } else { vec![0.0; m] };
    for j in 0..m {
        let mut acc = 0.0;
        for i in 0..m {
            acc += psi[i] * jac[i * m + j];
        }
        out[j] = -acc + lambda * grad[j];
    }
}

/// RK4 integration of `psi' = -psi . df/dx + lambda df0/dx` along the stored trajectory.
pub fn integrate_costate(
    problem: &ControlProblem,
    traj: &Trajectory,
    seed: &[f64],
    lambda: u8,
    direction: CostateDirection,
) -> Result<CostateArc> {
    if lambda > 1 {
        return Err(LabError::arg("lambda must be 0 or 1"));
    }
    let m = problem.state_dim();
    if seed.len() != m || seed.iter().any(|v| !v.is_finite()) {
        return Err(LabError::arg("costate seed must be finite and match the state dimension"));
    }
    let lam = lambda as f64;
    let times = traj.times();
    let states = traj.states();
    let n = times.len();
    let mut psi = vec![vec![0.0; m]; n];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut tmp = vec![0.0; m];

    let mut step = |i_from: usize, i_to: usize, seg: usize, psi: &mut Vec<Vec<f64>>| -> Result<()> {
        let (t0, t1) = (times[i_from], times[i_to]);
        let h = t1 - t0;
        let tm = 0.5 * (t0 + t1);
        let u = traj.segment_control(seg);
        let xm = hermite_state(problem, traj, seg, tm);
        let p0 = psi[i_from].clone();
        costate_rhs(problem, t0, &states[i_from], u, &p0, lam, &mut k1);
        for j in 0..m {
            tmp[j] = p0[j] + 0.5 * h * k1[j];
        }
        costate_rhs(problem, tm, &xm, u, &tmp, lam, &mut k2);
        for j in 0..m {
            tmp[j] = p0[j] + 0.5 * h * k2[j];
        }
        costate_rhs(problem, tm, &xm, u, &tmp, lam, &mut k3);
        for j in 0..m {
            tmp[j] = p0[j] + h * k3[j];
        }
        costate_rhs(problem, t1, &states[i_to], u, &tmp, lam, &mut k4);
        for j in 0..m {
            psi[i_to][j] = p0[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if psi[i_to].iter().any(|v| !v.is_finite()) {
            return Err(LabError::BlowUp {
                what: "costate".into(),
                time: t1,
            });
        }
        Ok(())
    };

    let origin = match direction {
        CostateDirection::ForwardFromStart => {
            psi[0] = seed.to_vec();
            for i in 0..n - 1 {
                step(i, i + 1, i, &mut psi)?;
            }
            ArcOrigin::ShootingFromStart
        }
        CostateDirection::BackwardFromEnd => {
            psi[n - 1] = seed.to_vec();
            for i in (0..n - 1).rev() {
                step(i + 1, i, i, &mut psi)?;
            }
            ArcOrigin::BackwardFromEnd
        }
    };
    Ok(CostateArc {
        times: times.to_vec(),
        psi,
        lambda,
        origin,
    })
}

/// Largest central-difference residual of the costate equation at interior nodes
/// away from control switches.
pub fn costate_ode_residual(problem: &ControlProblem, traj: &Trajectory, arc: &CostateArc) -> f64 {
    let m = problem.state_dim();
    let mut rhs = vec![0.0; m];
    let mut worst = 0.0f64;
    let times = traj.times();
    for i in 1..times.len() - 1 {
        if traj.segment_control(i - 1) != traj.segment_control(i) {
            continue;
        }
        let h = times[i + 1] - times[i - 1];
        costate_rhs(
            problem,
            times[i],
            &traj.states()[i],
            traj.segment_control(i),
            &arc.psi[i],
            arc.lambda as f64,
            &mut rhs,
        );
        let r = (0..m)
            .map(|j| ((arc.psi[i + 1][j] - arc.psi[i - 1][j]) / h - rhs[j]).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(r);
    }
    worst
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn golden_max(mut a: f64, mut b: f64, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..40 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// `sup_{v in P} H(x, v, psi) - H(x, u*, psi)` at one instant, with the sampled
/// maximizer refined by golden-section search along each control axis.
pub fn max_condition_gap(problem: &ControlProblem, s: f64, x: &[f64], u_star: &[f64], psi: &[f64], lambda: f64) -> f64 {
    let h = |v: &[f64]| hamiltonian(problem, x, v, psi, lambda, s);
    let h_star = h(u_star);
    let mut best_u = u_star.to_vec();
    let mut best = h_star;
    for v in problem.control_samples() {
        let val = h(v);
        if val > best {
            best = val;
            best_u = v.clone();
        }
    }
    let cb = problem.control_box();
    let samples = cb.samples.max(2) as f64;
    for k in 0..problem.control_dim() {
        let width = (cb.hi[k] - cb.lo[k]) / (samples - 1.0);
        if width <= 0.0 {
            continue;
        }
        let lo = (best_u[k] - width).max(cb.lo[k]);
        let hi = (best_u[k] + width).min(cb.hi[k]);
        let mut probe = best_u.clone();
        let (arg, val) = golden_max(lo, hi, |c| {
            probe[k] = c;
            h(&probe)
        });
        if val > best {
            best = val;
            best_u[k] = arg;
        }
    }
    best - h_star
}

/// Maximum-condition residual over all trajectory nodes; always `>= 0`.
pub fn max_condition_residual(problem: &ControlProblem, traj: &Trajectory, arc: &CostateArc) -> Result<f64> {
    if arc.times.len() != traj.times().len() {
        return Err(LabError::arg("costate arc and trajectory must share time nodes"));
    }
    let lambda = arc.lambda as f64;
    Ok((0..traj.times().len())
        .into_par_iter()
        .map(|i| {
            let seg = i.min(traj.times().len() - 2);
            max_condition_gap(
                problem,
                traj.times()[i],
                &traj.states()[i],
                traj.segment_control(seg),
                &arc.psi[i],
                lambda,
            )
        })
        .reduce(|| 0.0, f64::max))
}

/// A scalar function probed around a base point along a set of unit directions.
pub struct SuperdifferentialProbe<'a> {
    target: &'a (dyn Fn(&[f64]) -> f64 + Sync),
    base: Vec<f64>,
    directions: Vec<Vec<f64>>,
    radii: Vec<f64>,
    eta_factor: f64,
}

pub const DEFAULT_R0: f64 = 0.1;
pub const DEFAULT_LADDER: usize = 6;
pub const DEFAULT_ETA_FACTOR: f64 = 1e-3;

fn default_directions(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(4 * dim);
    for k in 0..dim {
        for sign in [1.0, -1.0] {
            let mut e = vec![0.0; dim];
            e[k] = sign;
            dirs.push(e);
        }
    }
    if dim > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while dirs.len() < 4 * dim {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-3 && n <= 1.0 {
                dirs.push(v.iter().map(|a| a / n).collect());
            }
        }
    }
    dirs
}

impl<'a> SuperdifferentialProbe<'a> {
    /// Defaults: `r_k = 0.1 * 2^-k` for `k = 0..=6`, `+-` axes plus `2m` seeded random directions.
    pub fn new(target: &'a (dyn Fn(&[f64]) -> f64 + Sync), base: Vec<f64>) -> Self {
        let dim = base.len();
        SuperdifferentialProbe {
            target,
            base,
            directions: default_directions(dim, 0),
            radii: (0..=DEFAULT_LADDER).map(|k| DEFAULT_R0 * 0.5f64.powi(k as i32)).collect(),
            eta_factor: DEFAULT_ETA_FACTOR,
        }
    }

    pub fn with_radii(mut self, r0: f64, ladder: usize) -> Self {
        self.radii = (0..=ladder.max(3)).map(|k| r0 * 0.5f64.powi(k as i32)).collect();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.directions = default_directions(self.base.len(), seed);
        self
    }

    /// Custom directions, normalized; zero vectors are rejected.
    pub fn with_directions(mut self, dirs: Vec<Vec<f64>>) -> Result<Self> {
        let mut out = Vec::with_capacity(dirs.len());
        for d in dirs {
            let n = d.iter().map(|a| a * a).sum::<f64>().sqrt();
            if d.len() != self.base.len() || !(n > 0.0) {
                return Err(LabError::arg("probe directions must be nonzero and match the base dimension"));
            }
            out.push(d.iter().map(|a| a / n).collect());
        }
        self.directions = out;
        Ok(self)
    }

    pub fn with_eta_factor(mut self, factor: f64) -> Self {
        self.eta_factor = factor;
        self
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    /// Slack `eta = factor * max(1, |zeta|)`.
    pub fn eta(&self, zeta: &[f64]) -> f64 {
        let n = zeta.iter().map(|a| a * a).sum::<f64>().sqrt();
        self.eta_factor * n.max(1.0)
    }

    /// Largest extrapolated upper quotient over the directions.
    ///
    /// For each direction the quotients `q_k = [h(x + r_k d) - h(x) - r_k zeta.d] / r_k`
    /// on the two smallest radii are extrapolated linearly in `r` to `r = 0`.
    pub fn quotient(&self, zeta: &[f64]) -> f64 {
        let h0 = (self.target)(&self.base);
        let k = self.radii.len();
        let (r1, r2) = (self.radii[k - 2], self.radii[k - 1]);
        let mut x = self.base.clone();
        let mut worst = f64::NEG_INFINITY;
        for d in &self.directions {
            let zd: f64 = zeta.iter().zip(d).map(|(a, b)| a * b).sum();
            let mut q = [0.0; 2];
            for (slot, r) in q.iter_mut().zip([r1, r2]) {
                for j in 0..x.len() {
                    x[j] = self.base[j] + r * d[j];
                }
                *slot = ((self.target)(&x) - h0 - r * zd) / r;
            }
            let lim = q[1] + (q[1] - q[0]) * r2 / (r1 - r2);
            worst = worst.max(if lim.is_nan() { f64::INFINITY } else { lim });
        }
        worst
    }
}

/// Fréchet upper-superdifferential surrogate: accepts iff the extrapolated
/// upper quotient is at most `eta` in every direction.
pub fn frechet_super_test(probe: &SuperdifferentialProbe<'_>, zeta: &[f64]) -> bool {
    probe.quotient(zeta) <= probe.eta(zeta)
}

/// Default number of lattice points scanned by [`limiting_super_candidates`].
pub const DEFAULT_CANDIDATE_POINTS: usize = 27;

/// Gradients at lattice points of the `rho`-ball that pass the Fréchet test at
/// their own base point.
pub fn limiting_super_candidates(
    field: &(dyn Fn(&[f64]) -> f64 + Sync),
    point: &[f64],
    rho: f64,
    points: usize,
) -> Vec<Vec<f64>> {
    let d = point.len();
    let mut k = ((points as f64).powf(1.0 / d as f64)).round().max(3.0) as usize;
    if k.is_multiple_of(2) {
        k += 1;
    }
    let spacing = 2.0 * rho / (k - 1) as f64;
    let axis: Vec<f64> = (0..k).map(|i| -rho + i as f64 * spacing).collect();
    let offsets = crate::problem::cartesian(&vec![axis; d]);
    let fd = spacing / 8.0;
    offsets
        .par_iter()
        .filter(|o| o.iter().map(|a| a * a).sum::<f64>().sqrt() <= rho * (1.0 + 1e-12))
        .filter_map(|o| {
            let base: Vec<f64> = point.iter().zip(o).map(|(p, q)| p + q).collect();
            let mut x = base.clone();
            let grad: Vec<f64> = (0..d)
                .map(|j| {
                    x[j] = base[j] + fd;
                    let a = field(&x);
                    x[j] = base[j] - fd;
                    let b = field(&x);
                    x[j] = base[j];
                    (a - b) / (2.0 * fd)
                })
                .collect();
            let probe = SuperdifferentialProbe::new(field, base).with_radii(spacing, DEFAULT_LADDER);
            frechet_super_test(&probe, &grad).then_some(grad)
        })
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Fréchet test, falling back to proximity to the limiting candidates.
fn super_membership(field: &(dyn Fn(&[f64]) -> f64 + Sync), base: &[f64], zeta: &[f64], r0: f64, seed: u64) -> (bool, f64) {
    let probe = SuperdifferentialProbe::new(field, base.to_vec())
        .with_radii(r0, DEFAULT_LADDER)
        .with_seed(seed);
    let q = probe.quotient(zeta);
    let eta = probe.eta(zeta);
    if q <= eta {
        return (true, q);
    }
    let candidates = limiting_super_candidates(field, base, r0, DEFAULT_CANDIDATE_POINTS);
    let near = candidates.iter().any(|c| distance(c, zeta) <= eta);
    (near, q)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub sens1_pass: bool,
    pub sens1_quotient: f64,
    pub sens2_pass_fraction: f64,
    pub sens2_worst_time: Option<f64>,
    pub sens2_worst_quotient: f64,
    pub sens2_samples: usize,
}

/// Probe settings for [`sensitivity_residuals`].
#[derive(Clone, Debug)]
pub struct SensitivityOptions {
    pub r0: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SensitivityOptions {
    fn default() -> Self {
        SensitivityOptions {
            r0: DEFAULT_R0,
            samples: 50,
            seed: 7,
        }
    }
}

/// Checks `-psi(t0) in d+_x V(t0, x*(t0))` and `(H, -psi(s)) in d+ V(s, x*(s))` at sampled `s`.
pub fn sensitivity_residuals(
    field: &dyn ValueField,
    traj: &Trajectory,
    arc: &CostateArc,
    problem: &ControlProblem,
    opts: &SensitivityOptions,
) -> Result<SensitivityReport> {
    if arc.lambda != 1 {
        return Err(LabError::arg("sensitivity relations are checked in normal form (lambda = 1)"));
    }
    if arc.times.len() != traj.times().len() {
        return Err(LabError::arg("costate arc and trajectory must share time nodes"));
    }
    let t0 = traj.start_time();
    let x0 = traj.states()[0].clone();
    let slice = |x: &[f64]| field.value(t0, x);
    let zeta0: Vec<f64> = arc.psi[0].iter().map(|v| -v).collect();
    let (sens1_pass, sens1_quotient) = super_membership(&slice, &x0, &zeta0, opts.r0, opts.seed);

    let joint = |z: &[f64]| field.value(z[0], &z[1..]);
    let (lo, hi) = (t0 + opts.r0, traj.end_time() - opts.r0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let breaks: Vec<f64> = traj.control().breakpoints_between(t0, traj.end_time()).collect();
    let mut times = Vec::with_capacity(opts.samples);
    let mut guard = 0;
    while hi > lo && times.len() < opts.samples && guard < 100 * opts.samples.max(1) {
        guard += 1;
        let s = rng.gen_range(lo..hi);
        if breaks.iter().all(|b| (s - b).abs() > opts.r0) {
            times.push(s);
        }
    }
    let results: Vec<(f64, bool, f64)> = times
        .par_iter()
        .map(|&s| {
            let i = traj.segment_index(s);
            let x = traj.state_at(problem, s);
            let w = (s - traj.times()[i]) / (traj.times()[i + 1] - traj.times()[i]);
            let psi: Vec<f64> = (0..x.len())
                .map(|j| (1.0 - w) * arc.psi[i][j] + w * arc.psi[i + 1][j])
                .collect();
            let u = traj.segment_control(i);
            let h = hamiltonian(problem, &x, u, &psi, 1.0, s);
            let mut base = vec![s];
            base.extend_from_slice(&x);
            let mut zeta = vec![h];
            zeta.extend(psi.iter().map(|v| -v));
            let (ok, q) = super_membership(&joint, &base, &zeta, opts.r0, opts.seed ^ (i as u64));
            (s, ok, q)
        })
        .collect();
    let passed = results.iter().filter(|r| r.1).count();
    let worst = results.iter().max_by(|a, b| a.2.total_cmp(&b.2));
    Ok(SensitivityReport {
        sens1_pass,
        sens1_quotient,
        sens2_pass_fraction: if results.is_empty() { 0.0 } else { passed as f64 / results.len() as f64 },
        sens2_worst_time: worst.map(|w| w.0),
        sens2_worst_quotient: worst.map(|w| w.2).unwrap_or(0.0),
        sens2_samples: results.len(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimalResidual {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub value: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedRecord {
    pub tau: f64,
    pub seeds: Vec<Vec<f64>>,
}

/// Outcome of a certificate construction or verification.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateReport {
    pub lambda: u8,
    pub psi0: Vec<f64>,
    pub max_condition_residual: f64,
    pub costate_ode_residual: f64,
    pub sens1_pass: bool,
    pub sens2_pass_fraction: f64,
    pub sens2_worst_time: Option<f64>,
    pub optimal_residuals: Vec<OptimalResidual>,
    pub found: bool,
    pub reason: Option<String>,
    pub seeds: Vec<SeedRecord>,
}

/// Tolerances and sampling for certificates.
#[derive(Clone, Debug)]
pub struct CertificateOptions {
    pub arc_horizon: f64,
    pub dt: f64,
    pub max_condition_tol: f64,
    pub sens2_min_fraction: f64,
    pub optimal_tol: f64,
    pub optimal_horizons: Vec<f64>,
    pub sensitivity: SensitivityOptions,
}

impl Default for CertificateOptions {
    fn default() -> Self {
        CertificateOptions {
            arc_horizon: 10.0,
            dt: 1e-3,
            max_condition_tol: 1e-6,
            sens2_min_fraction: 0.98,
            optimal_tol: 2e-2,
            optimal_horizons: (1..=6).map(|k| k as f64).collect(),
            sensitivity: SensitivityOptions::default(),
        }
    }
}

/// Sufficiency mode: checks every relation for a given arc and then the
/// optimal-in-view identity over the configured horizons.
pub fn verify_certificate(
    problem: &ControlProblem,
    field: &dyn ValueField,
    traj: &Trajectory,
    arc: &CostateArc,
    opts: &CertificateOptions,
) -> Result<CertificateReport> {
    let mc = max_condition_residual(problem, traj, arc)?;
    let ode = costate_ode_residual(problem, traj, arc);
    let sens = sensitivity_residuals(field, traj, arc, problem, &opts.sensitivity)?;
    let b = traj.states()[0].clone();
    let residuals = optimal_in_view_residual(field, problem, &b, traj.control(), &opts.optimal_horizons, opts.dt)?;
    let optimal_residuals: Vec<OptimalResidual> = opts
        .optimal_horizons
        .iter()
        .zip(&residuals)
        .map(|(t, v)| OptimalResidual { horizon: *t, value: *v })
        .collect();
    let worst_opt = residuals.iter().map(|r| r.abs()).fold(0.0, f64::max);
    let mut failures = Vec::new();
    if mc > opts.max_condition_tol {
        failures.push(format!("maximum condition residual {mc:.3e} > {:.1e}", opts.max_condition_tol));
    }
    if !sens.sens1_pass {
        failures.push(format!("initial sensitivity relation fails (quotient {:.3e})", sens.sens1_quotient));
    }
    if sens.sens2_pass_fraction < opts.sens2_min_fraction {
        failures.push(format!(
            "joint sensitivity holds at {:.1}% of sampled times (worst t = {:?})",
            100.0 * sens.sens2_pass_fraction,
            sens.sens2_worst_time
        ));
    }
    if worst_opt > opts.optimal_tol {
        failures.push(format!("optimal-in-view residual {worst_opt:.3e} > {:.1e}", opts.optimal_tol));
    }
    let found = failures.is_empty();
    Ok(CertificateReport {
        lambda: arc.lambda,
        psi0: arc.psi[0].clone(),
        max_condition_residual: mc,
        costate_ode_residual: ode,
        sens1_pass: sens.sens1_pass,
        sens2_pass_fraction: sens.sens2_pass_fraction,
        sens2_worst_time: sens.sens2_worst_time,
        optimal_residuals,
        found,
        reason: if found { None } else { Some(format!("no certificate: {}", failures.join("; "))) },
        seeds: Vec::new(),
    })
}

/// Single-linkage clusters of `points` with the given merge radius.
pub fn cluster_seeds(points: &[Vec<f64>], radius: f64) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut j = i;
        while p[j] != r {
            let next = p[j];
            p[j] = r;
            j = next;
        }
        r
    }
    for i in 0..n {
        for j in i + 1..n {
            if distance(&points[i], &points[j]) <= radius {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[b] = a;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

fn centroid(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let d = points[members[0]].len();
    let mut c = vec![0.0; d];
    for &i in members {
        for j in 0..d {
            c[j] += points[i][j];
        }
    }
    c.iter().map(|v| v / members.len() as f64).collect()
}

/// Necessity mode: builds `psi` as the limit of Bolza costate seeds and verifies it.
///
/// For each horizon `T_n` the Bolza problem with terminal payoff `V(T_n, .)` is
/// solved on the lattice; the negated limiting superdifferential candidates of
/// its value at `(0, b*)` are the seeds. Seeds are clustered with merge radius
/// `10 h`; the most populated cluster wins (ties go to the smaller norm) and must
/// hold seeds from every horizon in the later half of the sequence.
pub fn pmp_certificate(
    problem: &ControlProblem,
    field: &dyn ValueField,
    u_star: &ControlSignal,
    horizons: &HorizonSequence,
    spec: &GridSpec,
    opts: &CertificateOptions,
) -> Result<(Option<CostateArc>, CertificateReport)> {
    let b = problem.initial_state().to_vec();
    let traj = integrate_trajectory(problem, &b, 0.0, u_star, opts.arc_horizon, opts.dt)?;
    let h = spec.spacing.iter().copied().fold(0.0, f64::max);

    let seeds: Vec<SeedRecord> = horizons
        .taus()
        .par_iter()
        .map(|&tau| {
            let terminal = |x: &[f64]| field.value(tau, x);
            let grid = bolza_extend(problem, &spec.with_horizon(tau), &terminal, "V(T_n, .)")?;
            let slice = |x: &[f64]| grid.evaluate(0.0, x);
            let cands = limiting_super_candidates(&slice, &b, 2.0 * h, DEFAULT_CANDIDATE_POINTS);
            Ok(SeedRecord {
                tau,
                seeds: cands.into_iter().map(|z| z.iter().map(|v| -v).collect()).collect(),
            })
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::new();
    let mut owner = Vec::new();
    for (n, rec) in seeds.iter().enumerate() {
        for s in &rec.seeds {
            points.push(s.clone());
            owner.push(n);
        }
    }
    let no_certificate = |reason: String, seeds: Vec<SeedRecord>| CertificateReport {
        lambda: 1,
        psi0: Vec::new(),
        max_condition_residual: f64::NAN,
        costate_ode_residual: f64::NAN,
        sens1_pass: false,
        sens2_pass_fraction: 0.0,
        sens2_worst_time: None,
        optimal_residuals: Vec::new(),
        found: false,
        reason: Some(reason),
        seeds,
    };
    if points.is_empty() {
        return Ok((None, no_certificate("no certificate: no superdifferential seeds".into(), seeds)));
    }
    let clusters = cluster_seeds(&points, 10.0 * h);
    let best = clusters
        .iter()
        .max_by(|a, b| {
            a.len().cmp(&b.len()).then_with(|| {
                let na = centroid(&points, a).iter().map(|v| v * v).sum::<f64>();
                let nb = centroid(&points, b).iter().map(|v| v * v).sum::<f64>();
                nb.total_cmp(&na)
            })
        })
        .expect("at least one cluster");
    let n = horizons.len();
    let tail_start = n - n.div_ceil(2);
    let stable = (tail_start..n).all(|k| best.iter().any(|&i| owner[i] == k));
    if !stable {
        return Ok((
            None,
            no_certificate("no certificate: no seed cluster stabilizes across horizons".into(), seeds),
        ));
    }
    let seed = centroid(&points, best);
    let mut arc = integrate_costate(problem, &traj, &seed, 1, CostateDirection::ForwardFromStart)?;
    arc.origin = ArcOrigin::LimitOfFiniteHorizon;
    let mut report = verify_certificate(problem, field, &traj, &arc, opts)?;
    report.seeds = seeds;
    Ok((Some(arc), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{builtin_problem, ControlBox, DEFAULT_DT};
    use crate::value::FnField;
    use proptest::prelude::*;

    fn ll1() -> ControlProblem {
        builtin_problem("linear-l1").unwrap()
    }

    fn zero_traj(p: &ControlProblem, b: f64, horizon: f64) -> Trajectory {
        integrate_trajectory(p, &[b], 0.0, &ControlSignal::constant(vec![0.0]), horizon, DEFAULT_DT).unwrap()
    }

    #[test]
    fn costate_examples() {
        let p = ll1();
        let tr = zero_traj(&p, 1.0, 10.0);
        let arc = integrate_costate(&p, &tr, &[1.0], 1, CostateDirection::ForwardFromStart).unwrap();
        assert!(arc.psi.iter().all(|v| (v[0] - 1.0).abs() <= 1e-8));
        let tr1 = zero_traj(&p, 1.0, 1.0);
        let arc = integrate_costate(&p, &tr1, &[2.0], 1, CostateDirection::ForwardFromStart).unwrap();
        assert!((arc.terminal()[0] - (1.0 + 1f64.exp())).abs() <= 1e-6);
        let arc = integrate_costate(&p, &tr1, &[0.0], 0, CostateDirection::ForwardFromStart).unwrap();
        assert!(arc.psi.iter().all(|v| v[0] == 0.0));
        assert!(integrate_costate(&p, &tr1, &[0.0], 2, CostateDirection::ForwardFromStart).is_err());
    }

    #[test]
    fn costate_ode_residual_is_small() {
        let p = builtin_problem("capital-stock").unwrap();
        let u = ControlSignal::piecewise(vec![0.0, 1.0], vec![vec![0.5], vec![0.0]]).unwrap();
        let tr = integrate_trajectory(&p, &[0.5], 0.0, &u, 3.0, 1e-2).unwrap();
        let arc = integrate_costate(&p, &tr, &[0.3], 1, CostateDirection::ForwardFromStart).unwrap();
        assert!(costate_ode_residual(&p, &tr, &arc) < 1e-2 * 1e-2);
    }

    #[test]
    fn backward_reproduces_forward() {
        let p = ll1();
        let tr = zero_traj(&p, 1.0, 4.0);
        let fwd = integrate_costate(&p, &tr, &[1.3], 1, CostateDirection::ForwardFromStart).unwrap();
        let back = integrate_costate(&p, &tr, fwd.terminal(), 1, CostateDirection::BackwardFromEnd).unwrap();
        assert!((back.initial()[0] - 1.3).abs() < 1e-6);
    }

    #[test]
    fn blow_up_is_reported() {
        let p = ll1();
        let tr = zero_traj(&p, 1.0, 1.0);
        let res = integrate_costate(&p, &tr, &[f64::MAX], 1, CostateDirection::ForwardFromStart);
        assert!(matches!(res, Err(LabError::BlowUp { .. })));
    }

    #[test]
    fn max_condition_examples() {
        let p = ll1();
        let tr = zero_traj(&p, 1.0, 2.0);
        let ones = CostateArc {
            times: tr.times().to_vec(),
            psi: vec![vec![1.0]; tr.times().len()],
            lambda: 1,
            origin: ArcOrigin::ShootingFromStart,
        };
        assert!(max_condition_residual(&p, &tr, &ones).unwrap() <= 1e-8);
        let twos = CostateArc {
            psi: vec![vec![2.0]; tr.times().len()],
            ..ones.clone()
        };
        assert!((max_condition_residual(&p, &tr, &twos).unwrap() - 0.5).abs() <= 1e-6);

        let single = ControlProblem::builder("single", 1)
            .dynamics(|_, x, u, out| out[0] = 2.0 * u[0] - x[0])
            .running_cost(|_, x, u| 2.0 * u[0] + u[0].abs() - x[0])
            .control_box(ControlBox::new(vec![0.0], vec![0.0], 1).unwrap())
            .growth_witness(1.0, 1.0)
            .build()
            .unwrap();
        assert_eq!(max_condition_residual(&single, &tr, &twos).unwrap(), 0.0);
    }

    #[test]
    fn golden_refinement_finds_interior_maximum() {
        let p = ControlProblem::builder("quad", 1)
            .dynamics(|_, _, u, out| out[0] = u[0])
            .running_cost(|_, _, u| (u[0] - 0.123).powi(2))
            .control_box(ControlBox::new(vec![-1.0], vec![1.0], 5).unwrap())
            .growth_witness(0.0, 1.0)
            .build()
            .unwrap();
        let gap = max_condition_gap(&p, 0.0, &[0.0], &[0.0], &[0.0], 1.0);
        assert!((gap - 0.123f64.powi(2)).abs() < 1e-10);
    }

    #[test]
    fn frechet_examples() {
        let neg_abs = |x: &[f64]| -x[0].abs();
        let probe = SuperdifferentialProbe::new(&neg_abs, vec![0.0]);
        assert!(frechet_super_test(&probe, &[0.0]));
        assert!(frechet_super_test(&probe, &[0.5]));
        assert!(!frechet_super_test(&probe, &[1.5]));

        let abs = |x: &[f64]| x[0].abs();
        let probe = SuperdifferentialProbe::new(&abs, vec![0.0]);
        for z in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            assert!(!frechet_super_test(&probe, &[z]));
        }

        let sq = |x: &[f64]| x[0] * x[0];
        let probe = SuperdifferentialProbe::new(&sq, vec![1.0]);
        assert!(frechet_super_test(&probe, &[2.0]));
        assert!(!frechet_super_test(&probe, &[2.5]));
    }

    #[test]
    fn candidate_examples() {
        let sq = |x: &[f64]| x[0] * x[0] + 0.5 * x[1] * x[1];
        let c = limiting_super_candidates(&sq, &[1.0, 2.0], 0.05, 27);
        assert!(!c.is_empty());
        assert!(c.iter().all(|g| distance(g, &[2.0, 2.0]) <= 0.2));

        let neg_abs = |x: &[f64]| -x[0].abs();
        let c = limiting_super_candidates(&neg_abs, &[0.0], 0.1, 27);
        assert!(c.iter().any(|g| (g[0] - 1.0).abs() < 1e-6));
        assert!(c.iter().any(|g| (g[0] + 1.0).abs() < 1e-6));
        assert!(c.iter().all(|g| g[0].abs() <= 1.0 + 1e-6));

        let abs = |x: &[f64]| x[0].abs();
        let c = limiting_super_candidates(&abs, &[0.0], 0.1, 27);
        assert_eq!(c.len(), 26);
        assert!(c.iter().all(|g| (g[0].abs() - 1.0).abs() < 1e-6));
    }

    #[test]
    fn sensitivity_examples() {
        let p = ll1();
        let c = (2f64.ln() - 1.0) / 2.0;
        let v = FnField::new(1, move |_, x: &[f64]| -x[0] + c);
        let tr = zero_traj(&p, 1.0, 3.0);
        let ones = CostateArc {
            times: tr.times().to_vec(),
            psi: vec![vec![1.0]; tr.times().len()],
            lambda: 1,
            origin: ArcOrigin::ShootingFromStart,
        };
        let opts = SensitivityOptions::default();
        let r = sensitivity_residuals(&v, &tr, &ones, &p, &opts).unwrap();
        assert!(r.sens1_pass);
        assert_eq!(r.sens2_pass_fraction, 1.0);

        let twos = CostateArc {
            psi: vec![vec![2.0]; tr.times().len()],
            ..ones.clone()
        };
        assert!(!sensitivity_residuals(&v, &tr, &twos, &p, &opts).unwrap().sens1_pass);

        let zero_field = FnField::new(1, |_, _: &[f64]| 4.0);
        let flat = ControlProblem::builder("flat", 1)
            .dynamics(|_, _, _, out| out[0] = 0.0)
            .running_cost(|_, _, _| 0.0)
            .control_box(ControlBox::new(vec![0.0], vec![0.0], 1).unwrap())
            .build()
            .unwrap();
        let tr = integrate_trajectory(&flat, &[0.3], 0.0, &ControlSignal::constant(vec![0.0]), 2.0, 1e-2).unwrap();
        let zeros = CostateArc {
            times: tr.times().to_vec(),
            psi: vec![vec![0.0]; tr.times().len()],
            lambda: 1,
            origin: ArcOrigin::ShootingFromStart,
        };
        let r = sensitivity_residuals(&zero_field, &tr, &zeros, &flat, &opts).unwrap();
        assert_eq!(r.sens2_pass_fraction, 1.0);
    }

    #[test]
    fn clustering_prefers_population_then_norm() {
        let pts = vec![vec![1.0], vec![1.01], vec![5.0], vec![5.02], vec![9.0]];
        let groups = cluster_seeds(&pts, 0.05);
        assert_eq!(groups.len(), 3);
        assert!(groups.iter().any(|g| g == &vec![0, 1]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn smooth_superdifferential_is_the_gradient(
            a in -2.0f64..2.0, b in -2.0f64..2.0, x0 in -1.0f64..1.0, y0 in -1.0f64..1.0,
            dz in 0.05f64..1.0, angle in 0.0f64..std::f64::consts::TAU,
        ) {
            let f = move |x: &[f64]| a * x[0] * x[0] + b * x[0] * x[1] + x[1].sin();
            let grad = vec![2.0 * a * x0 + b * y0, b * x0 + y0.cos()];
            let probe = SuperdifferentialProbe::new(&f, vec![x0, y0]);
            prop_assert!(frechet_super_test(&probe, &grad));
            let off = vec![grad[0] + dz * angle.cos(), grad[1] + dz * angle.sin()];
            prop_assert!(!frechet_super_test(&probe, &off));
        }

        #[test]
        fn max_condition_is_nonnegative(psi in -3.0f64..3.0, x in -2.0f64..2.0, k in 0usize..21) {
            let p = ll1();
            let u = p.control_samples()[k].clone();
            prop_assert!(max_condition_gap(&p, 0.0, &[x], &u, &[psi], 1.0) >= -1e-12);
        }
    }
}
