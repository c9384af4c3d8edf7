//! Randomized invariants (proptest): these hold for *all* inputs in the
//! stated domains, not just the fixed sample sets of the other suites.

mod common;

use cladapt::analysis::fit_decay;
use cladapt::dynamics::Plant;
use cladapt::filtering::{kernel, kernel_dot};
use nalgebra::DVector;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mass_matrix_spd_everywhere(
        q1 in -10.0f64..10.0,
        q2 in -10.0f64..10.0,
        x1 in -1.0f64..1.0,
        x2 in -1.0f64..1.0,
    ) {
        let p = common::plant();
        let q = DVector::from_vec(vec![q1, q2]);
        let m = p.mass_matrix(&q).unwrap();
        prop_assert!((m[(0, 1)] - m[(1, 0)]).abs() < 1e-14);
        let xi = DVector::from_vec(vec![x1, x2]);
        let quad = xi.dot(&(&m * &xi));
        let b = p.bounds();
        prop_assert!(quad >= b.m1 * xi.norm_squared() - 1e-12);
        prop_assert!(quad <= b.m2 * xi.norm_squared() + 1e-12);
    }

    #[test]
    fn coriolis_switching_everywhere(
        q1 in -10.0f64..10.0,
        q2 in -10.0f64..10.0,
        n1 in -5.0f64..5.0,
        n2 in -5.0f64..5.0,
        x1 in -5.0f64..5.0,
        x2 in -5.0f64..5.0,
    ) {
        let p = common::plant();
        let q = DVector::from_vec(vec![q1, q2]);
        let nu = DVector::from_vec(vec![n1, n2]);
        let xi = DVector::from_vec(vec![x1, x2]);
        let lhs = p.coriolis_matrix(&q, &nu).unwrap() * &xi;
        let rhs = p.coriolis_matrix(&q, &xi).unwrap() * &nu;
        prop_assert!((lhs - rhs).norm() < 1e-11);
    }

    #[test]
    fn filter_kernel_stays_in_band(beta in 0.1f64..10.0, t in 0.0f64..100.0) {
        let f = kernel(beta, t);
        prop_assert!((0.0..=beta).contains(&f));
        prop_assert!(kernel_dot(beta, t).abs() <= beta * beta);
    }

    #[test]
    fn trajectory_respects_certified_bounds(t in 0.0f64..1000.0) {
        let traj = common::traj();
        let tp = traj.eval_full(t).unwrap();
        prop_assert!(tp.q.iter().chain(tp.v.iter()).chain(tp.a.iter()).all(|x| x.is_finite()));
        prop_assert!(tp.v.norm() <= traj.velocity_bound().unwrap() + 1e-12);
        prop_assert!(tp.a.norm() <= traj.accel_bound().unwrap() + 1e-12);
    }

    #[test]
    fn decay_fit_recovers_any_exponential(rate in 0.2f64..5.0, amp in 0.1f64..10.0) {
        let t: Vec<f64> = (0..4000).map(|i| 0.01 * i as f64).collect();
        let y: Vec<f64> = t.iter().map(|&s| amp * (-rate * s).exp()).collect();
        if let Some(fit) = fit_decay(&t, &y) {
            prop_assert!((fit.rate + rate).abs() < 1e-3 * rate.max(1.0),
                "fitted {} for true -{rate}", fit.rate);
            prop_assert!(fit.r_squared > 0.999);
        } else {
            // A fit can only be declined when the decay window is too
            // short to hold three samples, which cannot happen here.
            prop_assert!(false, "fit unexpectedly declined");
        }
    }

    #[test]
    fn forward_dynamics_round_trips(
        q1 in -3.0f64..3.0, q2 in -3.0f64..3.0,
        v1 in -2.0f64..2.0, v2 in -2.0f64..2.0,
        a1 in -3.0f64..3.0, a2 in -3.0f64..3.0,
    ) {
        let p = common::plant();
        let q = DVector::from_vec(vec![q1, q2]);
        let v = DVector::from_vec(vec![v1, v2]);
        let a = DVector::from_vec(vec![a1, a2]);
        let tau = p.regressor(&q, &v, &a).unwrap() * p.theta();
        let back = p.forward_dynamics(&q, &v, &tau).unwrap();
        prop_assert!((back - a).norm() < 1e-8);
    }
}
