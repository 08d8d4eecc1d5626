use lsmrac::analysis::{e0_norms, l2sq, upsilon, MatchingOracle};
use lsmrac::closed_loop::{run, RunError, Scenario};
use lsmrac::controller::Law;
use lsmrac::dynamics::SignalSpec;
use lsmrac::scenario::builtin;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

const BUILTINS: [&str; 7] = ["sim1", "sim2", "sim3", "sim4", "sim5", "sim6", "sim6-sigma"];

fn sim3() -> Scenario {
    builtin("sim3").unwrap()
}

/// Plant and model start together, so e0(0) = 0.
fn matched_start(mut s: Scenario) -> Scenario {
    s.plant.x = DVector::zeros(s.plant.order());
    s
}

#[test]
fn zero_duration_records_initial_state() {
    let mut s = sim3();
    s.integration.duration = 0.0;
    let tr = run(&s).unwrap();
    assert_eq!(tr.len(), 1);
    assert_eq!(tr.t, vec![0.0]);
    let y0 = &s.plant.c * &s.plant.x;
    assert_eq!(tr.y.row(0), y0.as_slice());
    let theta0: Vec<f64> = s.theta0.iter().flat_map(|b| b.iter().copied()).collect();
    assert_eq!(tr.theta.row(0), theta0.as_slice());
}

#[test]
fn zero_reference_and_state_stay_zero() {
    let mut s = matched_start(sim3());
    s.signal = SignalSpec::new(vec![vec![]; 2]).unwrap();
    s.integration.duration = 2.0;
    let tr = run(&s).unwrap();
    assert_eq!(tr.max_signal(), 0.0);
    let theta0: Vec<f64> = s.theta0.iter().flat_map(|b| b.iter().copied()).collect();
    assert!(tr.theta.rows().all(|r| r == theta0.as_slice()));
}

#[test]
fn zero_gain_freezes_parameters() {
    let mut s = sim3();
    s.controller.law = Law::LeastSquares { gamma: 0.0 };
    s.integration.duration = 2.0;
    let tr = run(&s).unwrap();
    let first = tr.theta.row(0).to_vec();
    assert!(tr.theta.rows().all(|r| r == first.as_slice()));
}

#[test]
fn runs_are_bit_reproducible() {
    let mut s = sim3();
    s.integration.duration = 1.0;
    assert_eq!(run(&s).unwrap(), run(&s).unwrap());
}

#[test]
fn matching_point_is_a_fixed_point() {
    let mut s = matched_start(sim3());
    let mp = MatchingOracle::from_scenario(&s, None).unwrap().matching_params().unwrap();
    s.theta0 = mp.blocks.clone();
    s.integration.duration = 5.0;
    let tr = run(&s).unwrap();
    let worst = e0_norms(&tr).into_iter().fold(0.0, f64::max);
    assert!(worst <= 10.0 * s.integration.h.powi(2), "max |e0| = {worst:e}");
    let drift = tr
        .theta
        .rows()
        .flat_map(|r| r.iter().zip(mp.stacked()).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    assert!(drift < 1e-9, "theta drift {drift:e}");
}

#[test]
fn builtins_stay_within_declared_bounds() {
    for name in BUILTINS {
        let s = builtin(name).unwrap();
        let tr = run(&s).unwrap_or_else(|e| panic!("{name}: {e}"));
        let bound = s.integration.bound.expect("builtins declare a bound");
        assert!(tr.max_signal() < bound, "{name}: {} >= {bound}", tr.max_signal());
    }
}

#[test]
fn tracking_error_vanishes() {
    // sim4 tracks a square wave jumping by 20 every π/5 s; its residual is
    // bounded at 1% of the jump.
    for (name, threshold) in [("sim3", 1e-2), ("sim4", 0.2)] {
        let tr = run(&builtin(name).unwrap()).unwrap();
        let e = e0_norms(&tr);
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        let (head, tail) = (max(&e[..e.len() / 10]), max(&e[e.len() * 9 / 10..]));
        assert!(tail <= threshold, "{name}: {tail:e}");
        assert!(tail <= 0.05 * head, "{name}: {tail:e} vs initial {head:e}");
    }
}

#[test]
fn halving_the_step_keeps_the_error_energy() {
    let mut s = sim3();
    s.integration.duration = 10.0;
    let coarse = run(&s).unwrap();
    s.integration.h /= 2.0;
    s.integration.stride *= 2;
    let fine = run(&s).unwrap();
    let a = l2sq(&coarse.t, &e0_norms(&coarse));
    let b = l2sq(&fine.t, &e0_norms(&fine));
    assert!((a - b).abs() <= 0.01 * a, "{a} vs {b}");
}

#[test]
fn covariance_never_grows() {
    for name in ["sim3", "sim4"] {
        let tr = run(&builtin(name).unwrap()).unwrap();
        assert!(tr.r_min_eig.data.iter().all(|v| *v > 0.0), "{name}");
        for k in 1..tr.len() {
            let (prev, next) = (tr.cov_blocks(k - 1).unwrap(), tr.cov_blocks(k).unwrap());
            for (p, n) in prev.iter().zip(&next) {
                let growth = SymmetricEigen::new(n - p).eigenvalues.max();
                assert!(growth <= 1e-8, "{name}: R grew by {growth:e} at sample {k}");
            }
        }
    }
}

#[test]
fn information_matches_inverse_covariance() {
    let mut s = sim3();
    s.integration.duration = 5.0;
    s.integration.track_information = true;
    let tr = run(&s).unwrap();
    let r0_inv: Vec<DMatrix<f64>> = s.r0.iter().map(|r| r.clone().try_inverse().unwrap()).collect();
    for k in (0..tr.len()).step_by(100) {
        let (cov, info) = (tr.cov_blocks(k).unwrap(), tr.info_blocks(k).unwrap());
        for i in 0..2 {
            let res = cov[i].clone().try_inverse().unwrap() - &r0_inv[i] - &info[i];
            assert!(res.amax() <= 1e-7 * (1.0 + info[i].amax()), "sample {k}: {:e}", res.amax());
        }
    }
}

#[test]
fn error_is_filtered_parameter_error() {
    // e0 - S Υ obeys d/dt(·) = -ℓ0 (·): what remains is the decaying
    // contribution of the initial mismatch.
    let s = sim3();
    let tr = run(&s).unwrap();
    let mp = MatchingOracle::from_scenario(&s, None).unwrap().matching_params().unwrap();
    let (star, d) = (mp.stacked(), mp.d());
    let gap = |k: usize| DVector::from_column_slice(tr.e0.row(k)) - &mp.sdu.s * upsilon(&tr, k, &star, &d);
    let g0 = gap(0);
    let worst = (0..tr.len())
        .map(|k| (gap(k) - &g0 * (-s.controller.ell0 * tr.t[k]).exp()).norm())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst:e}");
}

#[test]
fn oversized_step_diverges_with_partial_trace() {
    let mut s = sim3();
    s.integration.h = 0.05;
    s.integration.stride = 1;
    match run(&s) {
        Err(RunError::Diverged { t, trace }) => {
            assert!(t > 0.0 && t <= s.integration.duration);
            assert!(!trace.is_empty());
            assert!(*trace.t.last().unwrap() <= t);
        }
        other => panic!("expected divergence, got {:?}", other.map(|t| t.len())),
    }
}
