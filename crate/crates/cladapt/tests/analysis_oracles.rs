//! Analysis-layer oracles: decay fitting, the reduced-estimator matrix
//! exponential, and the filtered-mismatch reconstruction.

mod common;

use cladapt::analysis::{chi, estimator_matrix_exp, fit_decay, w_tilde, OmegaOracle};
use cladapt::dynamics::Plant;
use common::Sampler;
use nalgebra::{DMatrix, DVector};

#[test]
fn fit_recovers_exact_exponential_rate() {
    let t: Vec<f64> = (0..1000).map(|i| 0.01 * i as f64).collect();
    let y: Vec<f64> = t.iter().map(|&s| 3.0 * (-2.0 * s).exp()).collect();
    let fit = fit_decay(&t, &y).unwrap();
    assert!((fit.rate + 2.0).abs() < 1e-6, "rate {}", fit.rate);
    assert!(fit.r_squared > 1.0 - 1e-10);
    assert!(fit.samples > 100);
}

#[test]
fn fit_window_skips_a_numerical_plateau() {
    // Decay onto a floor: the fitted window must stop at the plateau and
    // still recover a rate near the true one.
    let t: Vec<f64> = (0..2000).map(|i| 0.01 * i as f64).collect();
    let y: Vec<f64> = t.iter().map(|&s| (-2.0 * s).exp() + 1e-3).collect();
    let fit = fit_decay(&t, &y).unwrap();
    assert!(fit.rate < -1.5 && fit.rate > -2.5, "rate {}", fit.rate);
    assert!(fit.r_squared > 0.9);
    assert!(fit.window.1 < 5.0, "window reached into the plateau");
}

#[test]
fn fit_declines_constant_series() {
    let t: Vec<f64> = (0..100).map(|i| 0.1 * i as f64).collect();
    let y = vec![0.7; 100];
    assert!(fit_decay(&t, &y).is_none());
}

#[test]
fn matrix_exponential_matches_ode_integration() {
    // theta_tilde' = -k_theta Gamma G theta_tilde with SPD G and diagonal
    // Gamma: the eigensolve route must agree with brute-force RK4.
    let mut s = Sampler::new(21);
    let a = DMatrix::from_fn(5, 5, |_, _| s.vec(1, 1.0)[0]);
    let gram = &a * a.transpose() + DMatrix::identity(5, 5) * 0.1;
    let gamma = DVector::from_vec(vec![1.0, 2.0, 0.5, 3.0, 1.5]);
    let k_theta = 0.4;
    let v0 = s.vec(5, 1.0);
    let t_end = 2.0;
    let dt = 1e-4;
    let mut v = v0.clone();
    let rhs = |x: &DVector<f64>| -> DVector<f64> { -(&gram * x).component_mul(&gamma) * k_theta };
    for _ in 0..(t_end / dt) as usize {
        let k1 = rhs(&v);
        let k2 = rhs(&(&v + &k1 * (dt / 2.0)));
        let k3 = rhs(&(&v + &k2 * (dt / 2.0)));
        let k4 = rhs(&(&v + &k3 * dt));
        v += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    let direct = estimator_matrix_exp(&gamma, &gram, k_theta, t_end, &v0);
    assert!(
        (direct - v).norm() < 1e-9,
        "matrix exponential disagrees with RK4"
    );
}

#[test]
fn omega_assembly_matches_closed_form_convolution() {
    // Scalar probe: u(t) = sin(w t), w-term zero. The reconstruction
    //   Omega = beta u - beta e^{-beta t} u0 - beta (f*u) + (f*w)
    // must equal the direct convolution f * u_dot.
    let beta = 1.3;
    let w = 2.0;
    let oracle = OmegaOracle {
        u0: DVector::zeros(1),
    };
    for i in 1..=200 {
        let t = 0.05 * i as f64;
        let u = DVector::from_vec(vec![(w * t).sin()]);
        // Closed forms of f*sin and f*(d/dt sin).
        let a = DVector::from_vec(vec![
            beta / (beta * beta + w * w)
                * (beta * (w * t).sin() - w * (w * t).cos() + w * (-beta * t).exp()),
        ]);
        let b = DVector::zeros(1);
        let omega = oracle.omega(beta, t, &u, &a, &b);
        let expect = w * beta / (beta * beta + w * w)
            * (beta * (w * t).cos() + w * (w * t).sin() - beta * (-beta * t).exp());
        assert!(
            (omega[0] - expect).abs() < 1e-12,
            "omega mismatch at t = {t}"
        );
    }
}

#[test]
fn mismatch_terms_vanish_on_the_desired_orbit() {
    // On q = q_d with the true parameters there is nothing to compensate:
    // W-tilde, chi, and the Omega oracle inputs are all identically zero.
    let plant = common::plant();
    let traj = common::traj();
    let zero = DVector::zeros(2);
    for i in 0..50 {
        let t = 0.2 * i as f64;
        let tp = traj.eval_full(t).unwrap();
        let y_d = plant.regressor(&tp.q, &tp.v, &tp.a).unwrap();
        let wt = w_tilde(&plant, &tp.q, &tp.v, &zero, &zero, &tp.v, &tp.a, &y_d, 2.0).unwrap();
        assert!(wt.norm() < 1e-12, "w_tilde {} at t = {t}", wt.norm());
        let x = chi(
            &plant, &tp.q, &tp.v, &zero, &zero, &zero, &tp.v, &tp.a, &y_d, 2.0, 2.0, 2.0,
        )
        .unwrap();
        assert!(x.norm() < 1e-12, "chi {} at t = {t}", x.norm());
        let u = OmegaOracle::u(&plant, &tp.q, &tp.v, &tp.q, &tp.v).unwrap();
        let wv = OmegaOracle::w(&plant, &tp.q, &tp.v, &tp.q, &tp.v).unwrap();
        assert!(u.norm() < 1e-14 && wv.norm() < 1e-14);
    }
}
