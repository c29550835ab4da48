//! Acceptance suite. Each test prints one `PASS`/`FAIL` line; run with
//! `cargo test -p horizonlab --test acceptance -- --nocapture` to see them.

use std::collections::BTreeMap;
use std::time::Instant;

use horizonlab::criteria::{
    agreeable_check, constrained_optimality_check, diamond_value, weak_agreeable_check, AsymptoticConstraint,
    Verdict,
};
use horizonlab::limits::{estimate_v_all_cached, estimate_v_inf, ControlFamily, HorizonSequence, ValueCache};
use horizonlab::pmp::{frechet_super_test, pmp_certificate, CertificateOptions, SuperdifferentialProbe};
use horizonlab::problem::{builtin_problem, ControlBox, ControlProblem, ControlSignal};
use horizonlab::regularity::{
    homogeneity_report, lipschitz_region_classifier, max_time_estimate, min_time_estimate, Cell,
    ClassifierOptions, CoordinateSplit, OverflowPolicy, Route, TimeLattice, TimeQuery,
};
use horizonlab::value::{dpp_residual, solve_finite_horizon, FnField, GridSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LIMIT_TOL: f64 = 2e-2;
const LIMIT_RUNTIME_SECS: f64 = 120.0;
const PSI_TOL: f64 = 1e-3;
const MAX_CONDITION_TOL: f64 = 1e-6;
const SPOILER_WITNESS: f64 = 0.1;
const DPP_TOL: f64 = 5e-2;
const DPP_REFINEMENT_FACTOR: f64 = 2.0;
const CRITERIA_TOL: f64 = 2e-2;
const AUTONOMY_REL_TOL: f64 = 1e-2;
const LATTICE_STEPS: f64 = 2.0;
const HOMOGENEITY_TOL: f64 = 2e-2;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    println!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
}

fn ll1() -> ControlProblem {
    builtin_problem("linear-l1").unwrap()
}

fn constant(v: f64) -> ControlSignal {
    ControlSignal::constant(vec![v])
}

fn ll1_spec(h: f64) -> GridSpec {
    GridSpec::uniform(&[-3.0], &[3.0], h, h, 16.0).unwrap()
}

#[test]
fn criterion_1_value_limits() {
    let start = Instant::now();
    let p = ll1();
    let spec = ll1_spec(0.01);
    let seq = HorizonSequence::new(vec![2.0, 4.0, 8.0, 16.0]).unwrap();
    let cache = ValueCache::new();
    let family = ControlFamily::default_for(&p, 0.0).unwrap();
    let offset = (2f64.ln() - 1.0) / 2.0;
    let mut worst_all = 0.0f64;
    let mut worst_inf = 0.0f64;
    let mut gaps = Vec::new();
    for b in [0.0, 1.0, -1.0] {
        let all = estimate_v_all_cached(&p, &spec, &seq, 0.0, &[b], LIMIT_TOL, &cache).unwrap();
        let inf = estimate_v_inf(&p, &[b], 0.0, &family, &seq, LIMIT_TOL).unwrap();
        worst_all = worst_all.max((all.limit - (-b + offset)).abs());
        worst_inf = worst_inf.max((inf.limit + b).abs());
        gaps.push(inf.limit - all.limit);
    }
    let spread = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    let gap_err = gaps.iter().map(|g| (g + offset).abs()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_all <= LIMIT_TOL
        && worst_inf <= LIMIT_TOL
        && spread <= LIMIT_TOL
        && gap_err <= LIMIT_TOL
        && secs <= LIMIT_RUNTIME_SECS;
    report(
        1,
        "value limits",
        pass,
        format!(
            "|V^all err| {worst_all:.2e}, |V^inf err| {worst_inf:.2e}, gap spread {spread:.2e}, gap err {gap_err:.2e}, {secs:.1}s"
        ),
    );
    assert!(pass);
}

fn certificate(u: f64, c: f64) -> (Option<horizonlab::pmp::CostateArc>, horizonlab::pmp::CertificateReport) {
    let p = ll1();
    let field = FnField::new(1, move |_: f64, x: &[f64]| -x[0] + c);
    let spec = GridSpec::uniform(&[-3.0], &[3.0], 0.01, 0.01, 8.0).unwrap();
    let seq = HorizonSequence::new(vec![2.0, 4.0, 8.0]).unwrap();
    pmp_certificate(&p, &field, &constant(u), &seq, &spec, &CertificateOptions::default()).unwrap()
}

#[test]
fn criterion_2_pmp_certificate() {
    let mut pass = true;
    let mut notes = Vec::new();
    for c in [(2f64.ln() - 1.0) / 2.0, 0.0] {
        let (arc, rep) = certificate(0.0, c);
        let psi_dev = arc
            .as_ref()
            .map(|a| {
                let end = a.times.last().copied().unwrap_or(0.0);
                let dev = a.psi.iter().map(|p| (p[0] - 1.0).abs()).fold(0.0, f64::max);
                if end < 10.0 - 1e-9 { f64::INFINITY } else { dev }
            })
            .unwrap_or(f64::INFINITY);
        let ok = rep.found
            && rep.lambda == 1
            && psi_dev <= PSI_TOL
            && rep.max_condition_residual <= MAX_CONDITION_TOL
            && rep.sens1_pass
            && rep.sens2_pass_fraction == 1.0;
        notes.push(format!(
            "c={c:.4}: found {}, |psi-1| {psi_dev:.1e}, max-cond {:.1e}, sens2 {:.2}",
            rep.found, rep.max_condition_residual, rep.sens2_pass_fraction
        ));
        pass &= ok;
    }
    let (_, spoiler) = certificate(0.5, (2f64.ln() - 1.0) / 2.0);
    let witness = spoiler
        .optimal_residuals
        .iter()
        .map(|r| r.value.abs())
        .fold(spoiler.max_condition_residual, f64::max);
    pass &= !spoiler.found && witness >= SPOILER_WITNESS;
    notes.push(format!("spoiler found {}, witness {witness:.3}", spoiler.found));
    report(2, "certificate", pass, notes.join("; "));
    assert!(pass);
}

fn dpp_max(h: f64, triples: &[(f64, f64, f64)]) -> f64 {
    let p = ll1();
    let grid = solve_finite_horizon(&p, &GridSpec::uniform(&[-3.0], &[3.0], h, h, 3.0).unwrap()).unwrap();
    triples
        .iter()
        .map(|&(t, tau, b)| dpp_residual(&grid, &p, t, tau, &[b]).unwrap().abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_3_dpp_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let triples: Vec<(f64, f64, f64)> = (0..20)
        .map(|_| {
            let t = rng.gen_range(0.0..1.5);
            let tau = rng.gen_range(t + 0.05..=2.0);
            (t, tau, rng.gen_range(-2.0..=2.0))
        })
        .collect();
    let coarse = dpp_max(0.01, &triples);
    let fine = dpp_max(0.005, &triples);
    let pass = coarse <= DPP_TOL && fine * DPP_REFINEMENT_FACTOR <= coarse;
    report(3, "dpp residual", pass, format!("max |residual| {coarse:.2e} -> {fine:.2e} after refinement"));
    assert!(pass);
}

#[test]
fn criterion_4_criteria_equivalence() {
    let p = ll1();
    let spec = ll1_spec(0.01);
    let cache = ValueCache::new();
    let seq = HorizonSequence::new(vec![4.0, 8.0, 16.0]).unwrap();
    let t_list = [1.0, 2.0];
    let family = ControlFamily::default_for(&p, 0.0).unwrap();
    let mut pass = true;
    let mut notes = Vec::new();
    for (u, expect) in [(0.0, Verdict::Pass), (0.5, Verdict::Fail)] {
        let weak = weak_agreeable_check(&p, &constant(u), &spec, &seq, &t_list, CRITERIA_TOL, &cache).unwrap();
        let agree = agreeable_check(&p, &constant(u), &spec, &seq, &t_list, CRITERIA_TOL, &cache).unwrap();
        let (_, cert) = certificate(u, (2f64.ln() - 1.0) / 2.0);
        let cert_verdict = if cert.found { Verdict::Pass } else { Verdict::Fail };
        pass &= weak.verdict == expect && agree.verdict == expect && cert_verdict == expect;
        notes.push(format!("u={u}: weak {} agreeable {} certificate {}", weak.verdict, agree.verdict, cert_verdict));
    }
    for c in [AsymptoticConstraint::LebesgueConvergent, AsymptoticConstraint::RiemannConvergent] {
        let entry = constrained_optimality_check(&p, &constant(0.0), &c, &seq, &family, CRITERIA_TOL).unwrap();
        let diamond = diamond_value(&p, &[1.0], 0.0, &c, &family, &seq, CRITERIA_TOL, false).unwrap();
        let err = (diamond.estimate.limit + 1.0).abs();
        pass &= entry.verdict == Verdict::Pass && err <= CRITERIA_TOL;
        notes.push(format!("{} {} (value err {err:.1e})", entry.criterion, entry.verdict));
    }
    let inf = estimate_v_inf(&p, &[1.0], 0.0, &family, &seq, CRITERIA_TOL).unwrap();
    pass &= (inf.limit + 1.0).abs() <= CRITERIA_TOL;
    report(4, "criteria equivalence", pass, notes.join("; "));
    assert!(pass);
}

#[test]
fn criterion_5_discount_autonomy() {
    let p = builtin_problem("capital-stock").unwrap();
    let spec = GridSpec::uniform(&[-0.5], &[3.5], 0.01, 0.01, 4.0).unwrap();
    let base = solve_finite_horizon(&p, &spec).unwrap();
    let mut worst = 0.0f64;
    for theta in [0.5, 1.0] {
        let shifted = solve_finite_horizon(&p, &spec.with_horizon(4.0 + theta)).unwrap();
        for y in [0.2, 0.5, 0.8] {
            let lhs = shifted.evaluate(theta, &[y]);
            let rhs = (-theta).exp() * base.evaluate(0.0, &[y]);
            worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1e-12));
        }
    }
    let pass = worst <= AUTONOMY_REL_TOL;
    report(5, "discount autonomy", pass, format!("max relative deviation {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_6_capital_stock_region_map() {
    let p = builtin_problem("capital-stock").unwrap();
    let coarse = solve_finite_horizon(&p, &GridSpec::uniform(&[-0.5], &[3.5], 0.01, 0.01, 6.0).unwrap()).unwrap();
    let fine = solve_finite_horizon(&p, &GridSpec::uniform(&[-0.5], &[3.5], 0.005, 0.005, 6.0).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let boundary = p.params()["u_max"] / p.params()["nu"];
    let mut cells = Vec::new();
    for _ in 0..100 {
        let x: f64 = rng.gen_range(0.0..boundary);
        if x <= 0.0 {
            continue;
        }
        cells.push(Cell::around(&[x], 0.004f64.min(x / 2.0).min((boundary - x) / 2.0)));
    }
    let inner = cells.len();
    for _ in 0..100 {
        let x: f64 = rng.gen_range(boundary..3.0);
        if x <= boundary {
            continue;
        }
        cells.push(Cell::around(&[x], 0.004f64.min((x - boundary) / 2.0)));
    }
    let verdicts = lipschitz_region_classifier(&p, &coarse, &fine, &cells, &ClassifierOptions::default()).unwrap();
    let interior_ok = verdicts[..inner].iter().filter(|v| v.route == Some(Route::Interior)).count();
    let separation_ok = verdicts[inner..].iter().filter(|v| v.route == Some(Route::Separation)).count();
    let lipschitz_ok = verdicts.iter().filter(|v| v.lipschitz_observed).count();
    let pass = inner == 100
        && verdicts.len() == 200
        && interior_ok == 100
        && separation_ok == 100
        && lipschitz_ok == 200;
    report(
        6,
        "region map",
        pass,
        format!("interior {interior_ok}/100, separation {separation_ok}/100, Lipschitz stable {lipschitz_ok}/200"),
    );
    assert!(pass);
}

#[test]
fn criterion_7_min_time_oracle() {
    let p = ControlProblem::builder("unit-speed", 1)
        .dynamics(|_, _, u, out| out[0] = u[0])
        .running_cost(|_, _, _| 0.0)
        .control_box(ControlBox::new(vec![-1.0], vec![1.0], 21).unwrap())
        .growth_witness(0.0, 1.0)
        .build()
        .unwrap();
    let split = CoordinateSplit::all_z(1);
    let dt = 0.01;
    let lattice = TimeLattice {
        lower: vec![-2.0],
        upper: vec![2.0],
        spacing: dt,
        dt,
        cap: 4.0,
        overflow: OverflowPolicy::Discard,
    };
    let restricted = vec![vec![-0.5], vec![0.5]];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut ordering_ok = 0;
    for _ in 0..50 {
        let z0: f64 = rng.gen_range(-1.0..=1.0);
        let z1: f64 = rng.gen_range(-1.0..=1.0);
        let q = TimeQuery::free(0.0, vec![z0], vec![z1]);
        let min = min_time_estimate(&p, &split, &q, None, &lattice).unwrap().time;
        let sub = min_time_estimate(&p, &split, &q, Some(&restricted), &lattice).unwrap().time;
        let max = max_time_estimate(&p, &split, &q, &lattice).unwrap().time;
        worst = worst.max((min - (z1 - z0).abs()).abs() / dt);
        if min <= sub && min <= max {
            ordering_ok += 1;
        }
    }
    let pass = worst <= LATTICE_STEPS && ordering_ok == 50;
    report(7, "min-time oracle", pass, format!("worst error {worst:.2} steps, ordering {ordering_ok}/50"));
    assert!(pass);
}

#[test]
fn criterion_8_superdifferential_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = 0;
    for _ in 0..20 {
        let c: f64 = rng.gen_range(-2.0..2.0);
        let s: f64 = rng.gen_range(0.5..2.0);
        let neg_abs = move |x: &[f64]| -s * (x[0] - c).abs();
        let probe = SuperdifferentialProbe::new(&neg_abs, vec![c]);
        let kink_ok = frechet_super_test(&probe, &[0.0])
            && frechet_super_test(&probe, &[0.5 * s])
            && !frechet_super_test(&probe, &[1.5 * s]);
        let abs = move |x: &[f64]| s * (x[0] - c).abs();
        let probe = SuperdifferentialProbe::new(&abs, vec![c]);
        let empty_ok = [-1.5 * s, -0.5 * s, 0.0, 0.5 * s, 1.5 * s]
            .iter()
            .all(|z| !frechet_super_test(&probe, &[*z]));
        let smooth = move |x: &[f64]| s * (x[0] - c).powi(2);
        let probe = SuperdifferentialProbe::new(&smooth, vec![c + 1.0]);
        let smooth_ok = frechet_super_test(&probe, &[2.0 * s]) && !frechet_super_test(&probe, &[2.5 * s]);
        if !(kink_ok && empty_ok && smooth_ok) {
            failures += 1;
        }
    }
    let pass = failures == 0;
    report(8, "superdifferential suite", pass, format!("{} of 20 random cases behave as expected", 20 - failures));
    assert!(pass);
}

#[test]
fn criterion_9_homogeneity() {
    let spec = GridSpec::uniform(&[-3.0, -3.0], &[3.0, 3.0], 0.02, 0.02, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let nus = [0.7, 0.85, 1.15, 1.3, 1.4];
    let pairs: Vec<(f64, Vec<f64>)> = (0..10)
        .map(|i| {
            let r: f64 = rng.gen_range(0.2..0.8);
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (nus[i % nus.len()], vec![r * a.cos(), r * a.sin()])
        })
        .collect();
    let rep = homogeneity_report(&BTreeMap::new(), &spec, 1.0, &pairs).unwrap();
    let pass = rep.rows.len() == 10 && rep.max_derived_error <= HOMOGENEITY_TOL;
    report(
        9,
        "homogeneity",
        pass,
        format!(
            "exponent k+1 = {}: max error {:.2e}; stated k-1 pairing: max error {:.2e}",
            rep.k + 1.0,
            rep.max_derived_error,
            rep.max_alternative_error
        ),
    );
    assert!(pass);
}
