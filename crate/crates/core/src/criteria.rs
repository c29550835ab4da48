//! Optimality criteria for candidate controls.
//!
//! Every check returns a [`CriterionEntry`] carrying the residual, the tolerance
//! it was judged against and a three-way verdict. A residual strictly below the
//! tolerance passes, one strictly above fails, and an exact tie or a non-finite
//! quantity is inconclusive.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::limits::{
    cost_along_horizons, estimate_v_inf, horizon_grids, liminf_tail, ControlFamily, HorizonSequence, LimitEstimate,
    LimitVariant, ValueCache,
};
use crate::problem::{concatenate, cost_profile, integrate_trajectory, ControlProblem, ControlSignal, Trajectory};
use crate::value::{GridSpec, ValueField};

/// Default absolute tolerance of the criteria.
pub const DEFAULT_CRITERIA_TOL: f64 = 2e-2;
/// Integration step for membership tails and constraint filtering.
pub const MEMBERSHIP_DT: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// `residual < tol` passes, `residual > tol` fails, ties and NaN are inconclusive.
pub fn verdict_for(residual: f64, tol: f64) -> Verdict {
    if residual.is_nan() {
        Verdict::Inconclusive
    } else if residual < tol {
        Verdict::Pass
    } else if residual > tol {
        Verdict::Fail
    } else {
        Verdict::Inconclusive
    }
}

/// Classes of admissible asymptotic behaviour of a control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AsymptoticConstraint {
    Unrestricted,
    Bounded,
    LpIntegrable { p: f64 },
    /// The motion approaches `points` within `tolerance` on the tail window.
    TargetSet { points: Vec<Vec<f64>>, tolerance: f64 },
    RiemannConvergent,
    LebesgueConvergent,
}

impl AsymptoticConstraint {
    pub fn validate(&self) -> Result<()> {
        match self {
            AsymptoticConstraint::LpIntegrable { p } if !(*p >= 1.0) => {
                Err(LabError::arg(format!("Lp constraint needs p >= 1, got {p}")))
            }
            AsymptoticConstraint::TargetSet { points, tolerance } => {
                if points.is_empty() {
                    Err(LabError::arg("target set must be nonempty"))
                } else if !(*tolerance > 0.0) {
                    Err(LabError::arg("target set tolerance must be positive"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            AsymptoticConstraint::Unrestricted => "unrestricted".into(),
            AsymptoticConstraint::Bounded => "bounded".into(),
            AsymptoticConstraint::LpIntegrable { p } => format!("lp(p={p})"),
            AsymptoticConstraint::TargetSet { .. } => "target-set".into(),
            AsymptoticConstraint::RiemannConvergent => "riemann".into(),
            AsymptoticConstraint::LebesgueConvergent => "lebesgue".into(),
        }
    }

    fn is_trivial(&self) -> bool {
        matches!(self, AsymptoticConstraint::Unrestricted | AsymptoticConstraint::Bounded)
    }
}

/// Tail statistic behind a membership verdict.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Membership {
    pub verdict: Verdict,
    pub statistic: f64,
    pub window: (f64, f64),
    pub tolerance: f64,
}

fn membership_verdict(stat: f64, tol: f64) -> Verdict {
    if stat.is_nan() {
        Verdict::Inconclusive
    } else if stat < tol {
        Verdict::Pass
    } else if stat <= 10.0 * tol {
        Verdict::Inconclusive
    } else {
        Verdict::Fail
    }
}

fn membership_on_trajectory(
    problem: &ControlProblem,
    traj: &Trajectory,
    c: &AsymptoticConstraint,
    t_max: f64,
    tol: f64,
) -> Result<Membership> {
    let q = 0.75 * t_max;
    let start = traj.start_time().max(q);
    let window = (start, t_max);
    let tail_nodes: Vec<f64> = traj
        .times()
        .iter()
        .copied()
        .filter(|s| *s > start && *s <= t_max)
        .collect();
    let statistic = match c {
        AsymptoticConstraint::Unrestricted | AsymptoticConstraint::Bounded => 0.0,
        AsymptoticConstraint::RiemannConvergent => {
            let cum = cost_profile(problem, traj, start, &tail_nodes)?;
            let hi = cum.iter().copied().fold(0.0, f64::max);
            let lo = cum.iter().copied().fold(0.0, f64::min);
            hi - lo
        }
        AsymptoticConstraint::LebesgueConvergent => {
            let abs_problem = {
                let base = problem.clone();
                problem.with_running_cost(move |t, x, u| base.running_cost(t, x, u).abs())
            };
            cost_profile(&abs_problem, traj, start, &[t_max])?[0]
        }
        AsymptoticConstraint::LpIntegrable { p } => traj.control().lp_integral(start, t_max, *p),
        AsymptoticConstraint::TargetSet { points, tolerance } => {
            let worst = traj
                .times()
                .iter()
                .zip(traj.states())
                .filter(|(s, _)| **s >= start && **s <= t_max)
                .map(|(_, x)| {
                    points
                        .iter()
                        .map(|m| x.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max);
            // scale so that the decay tolerance maps onto the verdict tolerance
            worst * tol / tolerance
        }
    };
    Ok(Membership {
        verdict: membership_verdict(statistic, tol),
        statistic,
        window,
        tolerance: tol,
    })
}

/// Tail test of `u` at `(t, b)` on the top quarter of `[0, t_max]`.
pub fn check_constraint_membership(
    problem: &ControlProblem,
    b: &[f64],
    t: f64,
    u: &ControlSignal,
    c: &AsymptoticConstraint,
    t_max: f64,
    tol: f64,
) -> Result<Membership> {
    c.validate()?;
    if t_max < 4.0 * t + 4.0 {
        return Err(LabError::arg(format!("tail horizon {t_max} must be at least 4 t + 4 = {}", 4.0 * t + 4.0)));
    }
    if c.is_trivial() {
        return Ok(Membership {
            verdict: Verdict::Pass,
            statistic: 0.0,
            window: (0.75 * t_max, t_max),
            tolerance: tol,
        });
    }
    let traj = integrate_trajectory(problem, b, t, u, t_max, MEMBERSHIP_DT)?;
    membership_on_trajectory(problem, &traj, c, t_max, tol)
}

/// Membership predicate used by [`concatenation_axiom_test`].
pub trait MembershipPredicate: Sync {
    fn verdict(&self, problem: &ControlProblem, b: &[f64], t: f64, u: &ControlSignal, t_max: f64) -> Result<Verdict>;
}

/// The tail test of an [`AsymptoticConstraint`] at a fixed tolerance.
pub struct ConstraintPredicate {
    pub constraint: AsymptoticConstraint,
    pub tol: f64,
}

impl MembershipPredicate for ConstraintPredicate {
    fn verdict(&self, problem: &ControlProblem, b: &[f64], t: f64, u: &ControlSignal, t_max: f64) -> Result<Verdict> {
        Ok(check_constraint_membership(problem, b, t, u, &self.constraint, t_max, self.tol)?.verdict)
    }
}

fn random_control(rng: &mut ChaCha8Rng, problem: &ControlProblem, span: f64) -> ControlSignal {
    let samples = problem.control_samples();
    let pieces = rng.gen_range(1..=3usize);
    let mut breaks = vec![0.0];
    for _ in 1..pieces {
        let last = *breaks.last().unwrap();
        breaks.push(last + rng.gen_range(0.1..span.max(0.2)));
    }
    let values = (0..pieces)
        .map(|_| samples[rng.gen_range(0..samples.len())].clone())
        .collect();
    ControlSignal::piecewise(breaks, values).expect("increasing breakpoints")
}

/// Checks closure under concatenation on random cases: `u <>_T u1` is accepted
/// at `(b, t)` exactly when `u1` is accepted at `(x_{b,t,u}(T), T)`.
pub fn concatenation_axiom_test(
    predicate: &dyn MembershipPredicate,
    problem: &ControlProblem,
    samples: usize,
    seed: u64,
) -> Result<bool> {
    if samples < 10 {
        return Err(LabError::arg("concatenation test needs at least 10 samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = problem.test_box();
    let cases: Vec<_> = (0..samples)
        .map(|_| {
            let b: Vec<f64> = lo
                .iter()
                .zip(hi)
                .map(|(l, h)| if h > l { rng.gen_range(*l..*h) } else { *l })
                .collect();
            let t = rng.gen_range(0.0..1.0);
            let switch = t + rng.gen_range(0.5..2.0);
            let u = random_control(&mut rng, problem, 2.0);
            let u1 = random_control(&mut rng, problem, 4.0);
            (b, t, switch, u, u1)
        })
        .collect();
    let agree: Vec<bool> = cases
        .par_iter()
        .map(|(b, t, switch, u, u1)| -> Result<bool> {
            let t_max = 4.0 * switch + 8.0;
            let joined = concatenate(u, *switch, u1);
            let head = integrate_trajectory(problem, b, *t, u, *switch, MEMBERSHIP_DT)?;
            let left = predicate.verdict(problem, b, *t, &joined, t_max)?;
            let right = predicate.verdict(problem, head.final_state(), *switch, u1, t_max)?;
            Ok(left == right)
        })
        .collect::<Result<_>>()?;
    Ok(agree.into_iter().all(|a| a))
}

/// One row of an optimality report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriterionEntry {
    pub criterion: String,
    pub verdict: Verdict,
    #[serde(with = "crate::limits::extended_f64")]
    pub residual: f64,
    pub tolerance: f64,
    pub horizons: Vec<f64>,
    pub witness: Option<String>,
    pub reason: Option<String>,
}

impl CriterionEntry {
    fn judged(criterion: &str, residual: f64, tol: f64, horizons: Vec<f64>) -> Self {
        let verdict = verdict_for(residual, tol);
        CriterionEntry {
            criterion: criterion.to_string(),
            verdict,
            residual,
            tolerance: tol,
            horizons,
            witness: None,
            reason: (verdict == Verdict::Inconclusive)
                .then(|| "residual equals the tolerance or is not a number".to_string()),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub entries: Vec<CriterionEntry>,
}

impl OptimalityReport {
    pub fn push(&mut self, entry: CriterionEntry) {
        self.entries.push(entry);
    }

    pub fn get(&self, criterion: &str) -> Option<&CriterionEntry> {
        self.entries.iter().find(|e| e.criterion == criterion)
    }

    /// `criterion, verdict, residual, tol, horizons` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("criterion,verdict,residual,tol,horizons\n");
        for e in &self.entries {
            let hs: Vec<String> = e.horizons.iter().map(|h| format!("{h}")).collect();
            out.push_str(&format!(
                "{},{},{:.6e},{:.3e},\"{}\"\n",
                e.criterion,
                e.verdict,
                e.residual,
                e.tolerance,
                hs.join(" ")
            ));
        }
        out
    }
}

/// `V(T, x*(T)) + J(0, b; u*, T) - V(0, b)` for each `T`.
pub fn optimal_in_view_residual(
    field: &dyn ValueField,
    problem: &ControlProblem,
    b: &[f64],
    u_star: &ControlSignal,
    t_list: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let t_max = t_list.iter().copied().fold(0.0, f64::max);
    if t_list.iter().any(|t| *t < 0.0) {
        return Err(LabError::arg("horizons must be nonnegative"));
    }
    let v0 = field.value(0.0, b);
    if t_max == 0.0 {
        return Ok(vec![0.0; t_list.len()]);
    }
    let traj = integrate_trajectory(problem, b, 0.0, u_star, t_max, dt)?;
    let costs = cost_profile(problem, &traj, 0.0, t_list)?;
    Ok(t_list
        .iter()
        .zip(costs)
        .map(|(&t, j)| if t == 0.0 { 0.0 } else { field.value(t, &traj.state_at(problem, t)) + j - v0 })
        .collect())
}

/// Verdict on the largest absolute optimal-in-view residual.
pub fn optimal_in_view_check(
    field: &dyn ValueField,
    problem: &ControlProblem,
    u_star: &ControlSignal,
    t_list: &[f64],
    tol: f64,
) -> Result<CriterionEntry> {
    let b = problem.initial_state().to_vec();
    let res = optimal_in_view_residual(field, problem, &b, u_star, t_list, 1e-3)?;
    let (arg, worst) = res
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r.abs()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, 0.0));
    let mut entry = CriterionEntry::judged("optimal-in-view", worst, tol, t_list.to_vec());
    if !t_list.is_empty() {
        entry.witness = Some(format!("T = {}", t_list[arg]));
    }
    Ok(entry)
}

/// Constrained value `V^<>` with its filtering statistics and DPP spot-check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiamondEstimate {
    pub estimate: LimitEstimate,
    pub feasible: usize,
    pub family_size: usize,
    pub dpp_residual: Option<f64>,
}

fn filter_family(
    problem: &ControlProblem,
    b: &[f64],
    t: f64,
    c: &AsymptoticConstraint,
    family: &ControlFamily,
    t_max: f64,
    tol: f64,
) -> Result<Vec<usize>> {
    if c.is_trivial() {
        return Ok((0..family.len()).collect());
    }
    let verdicts: Vec<Verdict> = family
        .controls()
        .par_iter()
        .map(|u| {
            let traj = integrate_trajectory(problem, b, t, u, t_max, MEMBERSHIP_DT)?;
            Ok(membership_on_trajectory(problem, &traj, c, t_max, tol)?.verdict)
        })
        .collect::<Result<_>>()?;
    Ok(verdicts
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == Verdict::Pass)
        .map(|(i, _)| i)
        .collect())
}

fn diamond_core(
    problem: &ControlProblem,
    b: &[f64],
    t: f64,
    c: &AsymptoticConstraint,
    family: &ControlFamily,
    horizons: &HorizonSequence,
    tol: f64,
) -> Result<(LimitEstimate, usize)> {
    c.validate()?;
    let t_max = horizons.taus()[horizons.len() - 1].max(4.0 * t + 4.0);
    let keep = filter_family(problem, b, t, c, family, t_max, tol)?;
    if keep.is_empty() {
        return Ok((
            LimitEstimate {
                variant: LimitVariant::Diamond,
                taus: horizons.taus().to_vec(),
                values: vec![f64::INFINITY; horizons.len()],
                limit: f64::INFINITY,
                gap: 0.0,
                converged: false,
                tolerance: tol,
                extrapolated: false,
                caveats: vec![format!("no member of the family satisfies the {} constraint", c.label())],
                argmin: None,
            },
            0,
        ));
    }
    let sub = if keep.len() == family.len() { family.clone() } else { family.subset(&keep) };
    let mut est = estimate_v_inf(problem, b, t, &sub, horizons, tol)?;
    est.variant = LimitVariant::Diamond;
    Ok((est, keep.len()))
}

/// `V^<>(t, b)`: infimum of `liminf J` over family members satisfying `c`,
/// `+inf` when none does. With `dpp_check` set, also records
/// `V^<>(0, b) - min_a [J(0, b; a, 1) + V^<>(1, x_a(1))]` over constant heads `a`.
pub fn diamond_value(
    problem: &ControlProblem,
    b: &[f64],
    t: f64,
    c: &AsymptoticConstraint,
    family: &ControlFamily,
    horizons: &HorizonSequence,
    tol: f64,
    dpp_check: bool,
) -> Result<DiamondEstimate> {
    let (estimate, feasible) = diamond_core(problem, b, t, c, family, horizons, tol)?;
    let dpp_residual = if dpp_check && feasible > 0 {
        Some(diamond_dpp_residual(problem, b, c, family, horizons, tol)?)
    } else {
        None
    };
    Ok(DiamondEstimate {
        estimate,
        feasible,
        family_size: family.len(),
        dpp_residual,
    })
}

fn diamond_dpp_residual(
    problem: &ControlProblem,
    b: &[f64],
    c: &AsymptoticConstraint,
    family: &ControlFamily,
    horizons: &HorizonSequence,
    tol: f64,
) -> Result<f64> {
    let tau = 1.0;
    let shifted = HorizonSequence::new(horizons.taus().iter().map(|h| h + tau).collect())?;
    let outer = family.rebased(0.0)?;
    let (whole, _) = diamond_core(problem, b, 0.0, c, &outer, &shifted, tol)?;
    let inner = family.rebased(tau)?;
    let heads = family.levels();
    let tails: Vec<f64> = heads
        .par_iter()
        .map(|a| {
            let u = ControlSignal::constant(a.clone());
            let traj = integrate_trajectory(problem, b, 0.0, &u, tau, family.dt)?;
            let j = cost_profile(problem, &traj, 0.0, &[tau])?[0];
            let (rest, _) = diamond_core(problem, traj.final_state(), tau, c, &inner, &shifted, tol)?;
            Ok(j + rest.limit)
        })
        .collect::<Result<_>>()?;
    let best = tails.into_iter().fold(f64::INFINITY, f64::min);
    Ok(whole.limit - best)
}

/// Membership of `u*` plus `|liminf_T J(0, b*; u*, T) - V^<>(0, b*)|`.
///
/// With the Lebesgue constraint this is classical optimality; with the Riemann
/// constraint it is almost-strong optimality.
pub fn constrained_optimality_check(
    problem: &ControlProblem,
    u_star: &ControlSignal,
    c: &AsymptoticConstraint,
    horizons: &HorizonSequence,
    family: &ControlFamily,
    tol: f64,
) -> Result<CriterionEntry> {
    let name = match c {
        AsymptoticConstraint::LebesgueConvergent => "classical".to_string(),
        AsymptoticConstraint::RiemannConvergent => "almost-strong".to_string(),
        other => format!("constrained({})", other.label()),
    };
    let b = problem.initial_state().to_vec();
    let t_max = horizons.taus()[horizons.len() - 1].max(4.0);
    let member = check_constraint_membership(problem, &b, 0.0, u_star, c, t_max, tol)?;
    if member.verdict != Verdict::Pass {
        return Ok(CriterionEntry {
            criterion: name,
            verdict: member.verdict,
            residual: member.statistic,
            tolerance: tol,
            horizons: horizons.taus().to_vec(),
            witness: Some(format!("tail window [{}, {}]", member.window.0, member.window.1)),
            reason: Some(format!(
                "membership stage: {} tail statistic {:.3e}",
                c.label(),
                member.statistic
            )),
        });
    }
    let diamond = diamond_value(problem, &b, 0.0, c, family, horizons, tol, false)?;
    let v = diamond.estimate.limit;
    if !v.is_finite() {
        return Ok(CriterionEntry {
            criterion: name,
            verdict: Verdict::Inconclusive,
            residual: f64::NAN,
            tolerance: tol,
            horizons: horizons.taus().to_vec(),
            witness: None,
            reason: Some("constrained value is not finite".into()),
        });
    }
    let costs = cost_along_horizons(problem, &b, 0.0, u_star, horizons, family.dt)?;
    let lim = liminf_tail(&costs);
    let mut entry = CriterionEntry::judged(&name, (lim - v).abs(), tol, horizons.taus().to_vec());
    entry.witness = Some(format!("liminf J = {lim:.6}, constrained value = {v:.6}"));
    Ok(entry)
}

/// Checks `J(0, b*; u*, T) = lim_n [V^{tau_n}(0, b*) - V^{tau_n}(T, x*(T))]`.
pub fn weak_agreeable_check(
    problem: &ControlProblem,
    u_star: &ControlSignal,
    spec: &GridSpec,
    seq: &HorizonSequence,
    t_list: &[f64],
    tol: f64,
    cache: &ValueCache,
) -> Result<CriterionEntry> {
    let t_top = t_list.iter().copied().fold(0.0, f64::max);
    if t_top >= seq.taus()[0] {
        return Err(LabError::arg("every T must be below the smallest horizon"));
    }
    let b = problem.initial_state().to_vec();
    let grids = horizon_grids(problem, spec, seq, cache)?;
    let (costs, states) = if t_top > 0.0 {
        let traj = integrate_trajectory(problem, &b, 0.0, u_star, t_top, 1e-3)?;
        let costs = cost_profile(problem, &traj, 0.0, t_list)?;
        let states: Vec<Vec<f64>> = t_list.iter().map(|&t| traj.state_at(problem, t)).collect();
        (costs, states)
    } else {
        (vec![0.0; t_list.len()], vec![b.clone(); t_list.len()])
    };
    let mut worst = 0.0f64;
    let mut witness = None;
    let mut monotone = true;
    for (k, &t) in t_list.iter().enumerate() {
        let gaps: Vec<f64> = grids
            .iter()
            .map(|g| {
                if t == 0.0 {
                    0.0
                } else {
                    (costs[k] - (g.evaluate(0.0, &b) - g.evaluate(t, &states[k]))).abs()
                }
            })
            .collect();
        if gaps.windows(2).any(|w| w[1] > w[0] + 0.1 * tol) {
            monotone = false;
        }
        let last = *gaps.last().unwrap();
        if last >= worst {
            worst = last;
            witness = Some(format!("T = {t}"));
        }
    }
    let mut entry = CriterionEntry::judged("weakly-agreeable", worst, tol, seq.taus().to_vec());
    entry.witness = witness;
    if !monotone && entry.verdict == Verdict::Pass {
        entry.verdict = Verdict::Fail;
        entry.reason = Some("gaps are not nonincreasing along the horizon sequence".into());
    }
    Ok(entry)
}

/// Checks that `J(0, b*; u*, t) + V^T(t, x*(t)) - V^T(0, b*)` vanishes as `T` grows.
pub fn agreeable_check(
    problem: &ControlProblem,
    u_star: &ControlSignal,
    spec: &GridSpec,
    t_grid: &HorizonSequence,
    t_list: &[f64],
    tol: f64,
    cache: &ValueCache,
) -> Result<CriterionEntry> {
    let t_top = t_list.iter().copied().fold(0.0, f64::max);
    if t_top >= t_grid.taus()[0] {
        return Err(LabError::arg("every t must be below the smallest horizon"));
    }
    let b = problem.initial_state().to_vec();
    let grids = horizon_grids(problem, spec, t_grid, cache)?;
    let tail = &grids[grids.len().saturating_sub(3)..];
    let (costs, states) = if t_top > 0.0 {
        let traj = integrate_trajectory(problem, &b, 0.0, u_star, t_top, 1e-3)?;
        let costs = cost_profile(problem, &traj, 0.0, t_list)?;
        let states: Vec<Vec<f64>> = t_list.iter().map(|&t| traj.state_at(problem, t)).collect();
        (costs, states)
    } else {
        (vec![0.0; t_list.len()], vec![b.clone(); t_list.len()])
    };
    let mut worst = 0.0f64;
    let mut spread_ok = true;
    let mut witness = None;
    for (k, &t) in t_list.iter().enumerate() {
        let deficits: Vec<f64> = tail
            .iter()
            .map(|g| if t == 0.0 { 0.0 } else { costs[k] + g.evaluate(t, &states[k]) - g.evaluate(0.0, &b) })
            .collect();
        let hi = deficits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = deficits.iter().copied().fold(f64::INFINITY, f64::min);
        if hi - lo > tol / 2.0 {
            spread_ok = false;
        }
        let m = deficits.iter().map(|d| d.abs()).fold(0.0, f64::max);
        if m >= worst {
            worst = m;
            witness = Some(format!("t = {t}"));
        }
    }
    let mut entry = CriterionEntry::judged("agreeable", worst, tol, t_grid.taus().to_vec());
    entry.witness = witness;
    if !spread_ok && entry.verdict == Verdict::Pass {
        entry.verdict = Verdict::Fail;
        entry.reason = Some("deficits oscillate across the largest horizons".into());
    }
    Ok(entry)
}
