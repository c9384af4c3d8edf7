//! Desired-trajectory generator: derivative chain consistency, smooth
//! start, bound certification.

mod common;

use cladapt::trajectory::DesiredTrajectory;
use nalgebra::DVector;

fn fd(
    traj: &DesiredTrajectory,
    t: f64,
    h: f64,
    f: impl Fn(&DesiredTrajectory, f64) -> DVector<f64>,
) -> DVector<f64> {
    (f(traj, t + h) - f(traj, t - h)) / (2.0 * h)
}

#[test]
fn velocity_matches_position_finite_difference() {
    let traj = common::traj();
    let h = 1e-6;
    for i in 0..1000 {
        let t = 0.01 + 0.03 * i as f64;
        let tp = traj.eval_full(t).unwrap();
        let v_fd = fd(&traj, t, h, |tr, s| tr.eval_full(s).unwrap().q);
        assert!(
            (&tp.v - &v_fd).norm() < 1e-6,
            "velocity mismatch at t = {t}"
        );
    }
}

#[test]
fn acceleration_and_jerk_match_finite_differences() {
    let traj = common::traj();
    let h = 1e-6;
    for i in 0..300 {
        let t = 0.05 + 0.1 * i as f64;
        let tp = traj.eval_full(t).unwrap();
        let a_fd = fd(&traj, t, h, |tr, s| tr.eval_full(s).unwrap().v);
        let j_fd = fd(&traj, t, h, |tr, s| tr.eval_full(s).unwrap().a);
        assert!((&tp.a - &a_fd).norm() < 1e-6);
        assert!((&tp.j - &j_fd).norm() < 1e-4);
    }
}

#[test]
fn starts_at_offset_and_rest() {
    let traj = common::traj();
    let tp = traj.eval_full(0.0).unwrap();
    assert!((tp.q[0] + std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    assert!(tp.q[1].abs() < 1e-15);
    assert!(tp.v.norm() < 1e-15);
    assert!(tp.a.norm() < 1e-15);
    assert!(tp.j.norm() < 1e-15);
}

#[test]
fn ramp_is_c3_at_the_junction() {
    // Value and first three derivatives continuous where the ramp ends.
    let traj = common::traj();
    let tr = 1.0;
    let eps = 1e-9;
    let lo = traj.eval_full(tr - eps).unwrap();
    let hi = traj.eval_full(tr + eps).unwrap();
    assert!((&hi.q - &lo.q).norm() < 1e-7);
    assert!((&hi.v - &lo.v).norm() < 1e-7);
    assert!((&hi.a - &lo.a).norm() < 1e-6);
    assert!((&hi.j - &lo.j).norm() < 1e-4);
}

#[test]
fn certified_bounds_dominate_samples() {
    let traj = common::traj();
    let zd1 = traj.velocity_bound().unwrap();
    let zd2 = traj.accel_bound().unwrap();
    for i in 0..20000 {
        let t = 0.005 * i as f64;
        let tp = traj.eval_full(t).unwrap();
        assert!(tp.v.norm() <= zd1);
        assert!(tp.a.norm() <= zd2);
    }
}

#[test]
fn negative_time_rejected() {
    assert!(common::traj().eval_full(-0.1).is_err());
    assert!(common::traj().eval_full(f64::NAN).is_err());
}

#[test]
fn mismatched_lengths_rejected() {
    let traj = DesiredTrajectory {
        amplitude: vec![0.5],
        ..DesiredTrajectory::default()
    };
    assert!(traj.validate().is_err());
}

#[test]
fn nonpositive_ramp_rejected() {
    let traj = DesiredTrajectory {
        ramp_time: 0.0,
        ..DesiredTrajectory::default()
    };
    assert!(traj.validate().is_err());
}
