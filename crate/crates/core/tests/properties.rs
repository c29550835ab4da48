use horizonlab::criteria::{diamond_value, optimal_in_view_residual, AsymptoticConstraint};
use horizonlab::limits::{
    estimate_v_all_cached, estimate_v_inf, estimate_v_infty_cached, ControlFamily, HorizonSequence, ValueCache,
};
use horizonlab::pmp::{integrate_costate, pmp_certificate, CertificateOptions, CostateDirection};
use horizonlab::problem::{builtin_problem, integrate_trajectory, ControlSignal};
use horizonlab::regularity::{lipschitz_region_classifier, Cell, Chart, ClassifierOptions, MinTimeRoute, Route};
use horizonlab::value::{FnField, GridSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 2e-2;

fn spec() -> GridSpec {
    GridSpec::uniform(&[-3.0], &[3.0], 0.01, 0.01, 16.0).unwrap()
}

#[test]
fn v_all_never_exceeds_v_inf() {
    let p = builtin_problem("linear-l1").unwrap();
    let seq = HorizonSequence::new(vec![2.0, 4.0, 8.0, 16.0]).unwrap();
    let cache = ValueCache::new();
    for t in [0.0, 0.5] {
        let family = ControlFamily::default_for(&p, t).unwrap();
        for b in [-1.0, 0.0, 1.0] {
            let all = estimate_v_all_cached(&p, &spec(), &seq, t, &[b], TOL, &cache).unwrap();
            let inf = estimate_v_inf(&p, &[b], t, &family, &seq, TOL).unwrap();
            assert!(all.limit <= inf.limit + 2.0 * TOL, "t={t} b={b}: {} vs {}", all.limit, inf.limit);
        }
    }
}

#[test]
fn liminf_is_sequence_invariant() {
    let p = builtin_problem("linear-l1").unwrap();
    let cache = ValueCache::new();
    let a = HorizonSequence::geometric(2.0, 2.0, 4).unwrap();
    let b = HorizonSequence::geometric(3.0, 2.0, 4).unwrap();
    for x in [-1.0, 0.5] {
        let va = estimate_v_infty_cached(&p, &spec(), &a, 0.0, &[x], TOL, &cache).unwrap();
        let vb = estimate_v_infty_cached(&p, &spec(), &b, 0.0, &[x], TOL, &cache).unwrap();
        assert!((va.limit - vb.limit).abs() <= 2.0 * TOL);
    }
}

#[test]
fn certified_arc_is_sound_and_reversible() {
    let p = builtin_problem("linear-l1").unwrap();
    let field = FnField::new(1, |_: f64, x: &[f64]| -x[0]);
    let u = ControlSignal::constant(vec![0.0]);
    let seq = HorizonSequence::new(vec![2.0, 4.0, 8.0]).unwrap();
    let opts = CertificateOptions::default();
    let grid = GridSpec::uniform(&[-3.0], &[3.0], 0.01, 0.01, 8.0).unwrap();
    let (arc, report) = pmp_certificate(&p, &field, &u, &seq, &grid, &opts).unwrap();
    let arc = arc.expect("certificate arc");
    assert!(report.found, "{:?}", report.reason);
    assert!(report.costate_ode_residual <= 1e-6);
    assert!(report.optimal_residuals.iter().all(|r| r.value.abs() <= TOL));

    let traj = integrate_trajectory(&p, p.initial_state(), 0.0, &u, opts.arc_horizon, opts.dt).unwrap();
    let back = integrate_costate(&p, &traj, arc.terminal(), 1, CostateDirection::BackwardFromEnd).unwrap();
    assert!((back.initial()[0] - arc.initial()[0]).abs() <= 1e-6);

    let res = optimal_in_view_residual(&field, &p, p.initial_state(), &u, &opts.optimal_horizons, opts.dt).unwrap();
    assert!(res.iter().all(|r| r.abs() <= TOL));
}

#[test]
fn constraints_only_raise_the_diamond_value() {
    let p = builtin_problem("linear-l1").unwrap();
    let seq = HorizonSequence::new(vec![4.0, 8.0, 16.0]).unwrap();
    let family = ControlFamily::default_for(&p, 0.0).unwrap();
    let free = diamond_value(&p, &[1.0], 0.0, &AsymptoticConstraint::Unrestricted, &family, &seq, TOL, true).unwrap();
    assert!(free.dpp_residual.unwrap().abs() <= 5e-2);
    for c in [
        AsymptoticConstraint::Bounded,
        AsymptoticConstraint::LebesgueConvergent,
        AsymptoticConstraint::RiemannConvergent,
        AsymptoticConstraint::LpIntegrable { p: 2.0 },
    ] {
        let d = diamond_value(&p, &[1.0], 0.0, &c, &family, &seq, TOL, false).unwrap();
        assert!(d.estimate.limit >= free.estimate.limit - TOL, "{}", c.label());
    }
}

#[test]
fn double_integrator_region_split() {
    let p = builtin_problem("double-integrator").unwrap();
    let field = FnField::new(2, |_: f64, y: &[f64]| y[0] * y[0] + y[1]);
    let opts = ClassifierOptions {
        routes: vec![Route::MinTime, Route::Separation],
        chart: Some(Chart::sqrt_y2(1.0, 21).unwrap()),
        min_time: MinTimeRoute {
            controls: Some(vec![vec![-1.0], vec![1.0]]),
            ..MinTimeRoute::default()
        },
        ..ClassifierOptions::default()
    };
    let half = 0.03;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut reachable = Vec::new();
    let mut separated = Vec::new();
    while reachable.len() < 12 || separated.len() < 12 {
        let y = [rng.gen_range(-1.5..1.5), rng.gen_range(0.1..1.2)];
        let corners = Cell::around(&y, half).probes();
        if corners.iter().all(|c| c[0] * c[0] < 1.5 * c[1]) && reachable.len() < 12 {
            reachable.push(Cell::around(&y, half));
        } else if corners.iter().all(|c| c[0] * c[0] > 2.5 * c[1] && c[1] > 0.0) && separated.len() < 12 {
            separated.push(Cell::around(&y, half));
        }
    }
    let v = lipschitz_region_classifier(&p, &field, &field, &reachable, &opts).unwrap();
    assert!(v.iter().all(|c| c.route == Some(Route::MinTime)), "{v:?}");
    let v = lipschitz_region_classifier(&p, &field, &field, &separated, &opts).unwrap();
    assert!(v.iter().all(|c| c.route == Some(Route::Separation)), "{v:?}");
}
