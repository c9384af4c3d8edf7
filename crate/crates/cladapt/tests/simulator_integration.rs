//! Integrator-level guarantees: determinism, 4th-order convergence,
//! physical energy dissipation, divergence guarding.

mod common;

use cladapt::analysis::BoundFns;
use cladapt::controllers::FsfbGains;
use cladapt::dynamics::Plant;
use cladapt::simulator::{run, run_open_loop, Gains, SimConfig};
use cladapt::stack::{MemoryStack, StackConfig};
use cladapt::Error;
use nalgebra::DVector;

fn fsfb_setup() -> (Gains, MemoryStack, BoundFns) {
    let plant = common::plant();
    let traj = common::traj();
    let gains = Gains::Fsfb(FsfbGains {
        alpha: 2.0,
        kp: DVector::from_element(2, 4.0),
        kr: DVector::from_element(2, 4.0),
        gamma: DVector::from_element(5, 1.2e4),
        k_theta: 1.4632e-5,
        k_n1: 2.375,
        k_n2: 66000.0,
    });
    let cfg = StackConfig {
        size: 20,
        horizon: 9.0,
        grid_factor: 10,
        record_after: 5.0,
    };
    let stack = MemoryStack::build_offline(&plant, &traj, 1.0, &cfg, 1e-3).unwrap();
    let zd2 = traj.accel_bound().unwrap();
    let bounds = BoundFns::new(plant.bounds(), 1.0, zd2, 2.0, 2.0, 2.0, 2.0).unwrap();
    (gains, stack, bounds)
}

fn short_cfg() -> SimConfig {
    SimConfig {
        dt: 1e-4,
        duration: 1.0,
        theta_hat0: DVector::zeros(5),
        q0: DVector::from_vec(vec![-1.5708463267948966, 4.0e-5]),
        seed: 0,
        log_every: 10,
    }
}

#[test]
fn closed_loop_runs_are_bitwise_deterministic() {
    let plant = common::plant();
    let traj = common::traj();
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let (gains, stack, bounds) = fsfb_setup();
        outputs.push(run(&plant, &traj, &gains, 1.0, stack, bounds, &short_cfg()).unwrap());
    }
    let (a, b) = (&outputs[0].trace, &outputs[1].trace);
    assert_eq!(a.rows.len(), b.rows.len());
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        for (x, y) in ra.iter().zip(rb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    // The torque-reconstruction identity holds pointwise even on this
    // short run.
    assert!(outputs[0].monitors.max_eps_identity_residual < 1e-8);
}

#[test]
fn open_loop_integration_is_fourth_order() {
    // Richardson ratio between successive halvings of dt should sit near
    // 2^4 = 16 for a smooth forced swing.
    let plant = common::plant();
    let q0 = DVector::from_vec(vec![-1.2, 0.4]);
    let v0 = DVector::zeros(2);
    let tau_fn = |t: f64, _q: &DVector<f64>, _v: &DVector<f64>| {
        DVector::from_vec(vec![0.5 * (2.0 * t).sin(), 0.3 * (3.0 * t).cos()])
    };
    let mut nobs = |_: f64, _: &DVector<f64>, _: &DVector<f64>| {};
    let finals: Vec<DVector<f64>> = [2e-2, 1e-2, 5e-3]
        .iter()
        .map(|&dt| {
            let (q, v) =
                run_open_loop(&plant, &tau_fn, &q0, &v0, dt, 2.0, &mut nobs).unwrap();
            DVector::from_iterator(4, q.iter().chain(v.iter()).cloned())
        })
        .collect();
    let coarse = (&finals[0] - &finals[1]).norm();
    let fine = (&finals[1] - &finals[2]).norm();
    let ratio = coarse / fine;
    assert!(
        (8.0..=32.0).contains(&ratio),
        "Richardson ratio {ratio:.2} outside [8, 32]"
    );
}

#[test]
fn gravity_compensated_swing_dissipates_kinetic_energy() {
    // With tau = G(q) the closed system has dE/dt = -qdot^T F qdot <= 0,
    // so the kinetic energy observed at step boundaries must not increase.
    let plant = common::plant();
    let q0 = DVector::from_vec(vec![-1.0, 0.5]);
    let v0 = DVector::from_vec(vec![1.0, -0.8]);
    let plant_ref = &plant;
    let tau_fn =
        move |_t: f64, q: &DVector<f64>, _v: &DVector<f64>| plant_ref.gravity(q).unwrap();
    let mut energies = Vec::new();
    {
        let mut obs = |_t: f64, q: &DVector<f64>, v: &DVector<f64>| {
            let m = plant_ref.mass_matrix(q).unwrap();
            energies.push(0.5 * v.dot(&(m * v)));
        };
        run_open_loop(&plant, &tau_fn, &q0, &v0, 1e-3, 5.0, &mut obs).unwrap();
    }
    assert!(energies.len() > 4000);
    for w in energies.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "kinetic energy increased");
    }
    assert!(*energies.last().unwrap() < 0.5 * energies[0]);
}

#[test]
fn runaway_torque_reports_divergence() {
    let plant = common::plant();
    let q0 = DVector::zeros(2);
    let v0 = DVector::zeros(2);
    let tau_fn =
        |_t: f64, _q: &DVector<f64>, v: &DVector<f64>| v * 1e3 + DVector::from_element(2, 50.0);
    let mut nobs = |_: f64, _: &DVector<f64>, _: &DVector<f64>| {};
    let err = run_open_loop(&plant, &tau_fn, &q0, &v0, 1e-3, 10.0, &mut nobs).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }));
}

#[test]
fn config_validation_rejects_unstable_steps() {
    let traj = common::traj();
    let mut cfg = short_cfg();
    cfg.dt = 0.2; // violates dt * beta headroom
    assert!(cfg.validate(1.0, &traj).is_err());
    let mut cfg = short_cfg();
    cfg.log_every = 0;
    assert!(cfg.validate(1.0, &traj).is_err());
    let mut cfg = short_cfg();
    cfg.duration = 0.0;
    assert!(cfg.validate(1.0, &traj).is_err());
    assert!(short_cfg().validate(1.0, &traj).is_ok());
}
