use lsmrac::controller::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn controller(dims: Dims, law: Law) -> Controller {
    Controller::new(dims, FilterBank::diagonal(2.0, dims).unwrap(), 3.0, law, vec![1.0; dims.m], SigmaMod::default()).unwrap()
}

/// Random SPD block `B B^T + I` with dyadic entries, so scaling by a power
/// of two is exact.
fn spd_block(n: usize, seed: &[f64]) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |i, j| (seed[(i * n + j) % seed.len()] * 8.0).round() / 8.0);
    &b * b.transpose() + DMatrix::identity(n, n)
}

#[derive(Debug, Clone)]
struct Case {
    dims: Dims,
    theta: Vec<f64>,
    xi: Vec<f64>,
    omega: Vec<f64>,
    e0: Vec<f64>,
    seed: Vec<f64>,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..=3, 1usize..=3).prop_flat_map(|(m, nu)| {
        let dims = Dims::new(m, nu).unwrap();
        (
            proptest::collection::vec(-2.0f64..2.0, dims.param_count()),
            proptest::collection::vec(-2.0f64..2.0, dims.channels()),
            proptest::collection::vec(-2.0f64..2.0, dims.omega_len()),
            proptest::collection::vec(-1.0f64..1.0, m),
            proptest::collection::vec(-1.0f64..1.0, 16),
        )
            .prop_map(move |(theta, xi, omega, e0, seed)| Case {
                dims,
                theta,
                xi,
                omega,
                e0,
                seed,
            })
    })
}

fn packed_cov(dims: Dims, blocks: &[DMatrix<f64>]) -> Vec<f64> {
    let mut cov = vec![0.0; dims.packed_total()];
    let mut off = 0;
    for (i, b) in blocks.iter().enumerate() {
        pack_symmetric(b, &mut cov[off..off + dims.packed_len(i)]);
        off += dims.packed_len(i);
    }
    cov
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn control_ignores_initial_u_buffer(c in case(), junk in -1e6f64..1e6) {
        let d = c.dims;
        let ctl = controller(d, Law::LeastSquares { gamma: 5.0 });
        let blocks: Vec<_> = (0..d.m).map(|i| spd_block(d.block_len(i), &c.seed)).collect();
        let cov = packed_cov(d, &blocks);
        let mut clean = ControlScratch::new(d);
        let mut dirty = ControlScratch::new(d);
        dirty.u.iter_mut().for_each(|v| *v = junk);
        dirty.channels.iter_mut().for_each(|v| *v = -junk);
        ctl.evaluate(&c.xi, &c.omega, &c.theta, &cov, &c.e0, &mut clean);
        ctl.evaluate(&c.xi, &c.omega, &c.theta, &cov, &c.e0, &mut dirty);
        prop_assert_eq!(&clean.u, &dirty.u);
        prop_assert_eq!(&clean.theta_dot, &dirty.theta_dot);
        prop_assert_eq!(&clean.cov_dot, &dirty.cov_dot);
    }

    #[test]
    fn least_squares_reduces_to_mmrac(c in case(), k in -3i32..4) {
        let d = c.dims;
        let gamma = 2f64.powi(k);
        let r0: Vec<_> = (0..d.m).map(|i| spd_block(d.block_len(i), &c.seed)).collect();
        let gain: Vec<_> = r0.iter().map(|r| r * gamma).collect();
        let ls = controller(d, Law::LeastSquares { gamma });
        let mm = controller(d, Law::MMrac { gain: gain.clone() });
        let mut s_ls = ControlScratch::new(d);
        let mut s_mm = ControlScratch::new(d);
        ls.evaluate(&c.xi, &c.omega, &c.theta, &packed_cov(d, &r0), &c.e0, &mut s_ls);
        mm.evaluate(&c.xi, &c.omega, &c.theta, &[], &c.e0, &mut s_mm);
        prop_assert_eq!(&s_ls.theta_dot, &s_mm.theta_dot);
        prop_assert_eq!(&s_ls.u, &s_mm.u);
    }

    #[test]
    fn shared_omega_slice_is_consistent(c in case()) {
        // Every block starts with the same ω entries.
        let d = c.dims;
        let st = build_omega(d, &c.omega, &c.e0).unwrap();
        for i in 0..d.m {
            let b = st.block(i);
            prop_assert_eq!(b.len(), d.block_len(i));
            prop_assert_eq!(&b.as_slice()[..d.omega_len()], c.omega.as_slice());
            if i + 1 < d.m {
                prop_assert_eq!(d.block_len(i), d.block_len(i + 1) + 1);
            }
        }
    }
}

#[test]
fn first_order_filters_degenerate() {
    let d = Dims::new(2, 1).unwrap();
    assert_eq!(d.filter_order(), 0);
    assert_eq!(d.omega_len(), 4);
    let bank = FilterBank::diagonal(2.0, d).unwrap();
    let (d1, d2) = bank.filter_derivatives(&[], &[], &[1.0, 2.0], &[3.0, 4.0]).unwrap();
    assert!(d1.is_empty() && d2.is_empty());
    let mut omega = vec![0.0; 4];
    assemble_omega(&[], &[], &[3.0, 4.0], &[5.0, 6.0], &mut omega);
    assert_eq!(omega, vec![3.0, 4.0, 5.0, 6.0]);

    // m = 1: the single block is ω itself.
    let d1 = Dims::new(1, 1).unwrap();
    assert_eq!(d1.block_len(0), d1.omega_len());
    let ctl = controller(d1, Law::LeastSquares { gamma: 1.0 });
    let mut s = ControlScratch::new(d1);
    ctl.evaluate(&[0.0, 0.0], &[1.5, -0.5], &[2.0, 4.0], &[1.0, 0.0, 1.0], &[0.0], &mut s);
    assert_eq!(s.u, vec![1.0]);
}

#[test]
fn xi_follows_omega_at_steady_state() {
    let d = Dims::new(2, 2).unwrap();
    let w = DVector::from_fn(d.channels(), |i, _| i as f64 - 3.0);
    let st = OmegaStack { dims: d, channels: w.clone() };
    let xi = XiState {
        dims: d,
        ell0: 4.0,
        channels: &w / 4.0,
    };
    let rate = xi_derivative(&xi, &st).unwrap();
    assert!(rate.channels.amax() < 1e-15);
}
