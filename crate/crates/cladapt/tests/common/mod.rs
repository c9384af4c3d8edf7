//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use cladapt::dynamics::{Plant, TwoLinkArm, TwoLinkParams};
use cladapt::trajectory::DesiredTrajectory;
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default desired trajectory.
pub fn traj() -> DesiredTrajectory {
    DesiredTrajectory::default()
}

/// Default two-link arm certified against the default trajectory's
/// velocity bound.
pub fn plant() -> TwoLinkArm {
    let zd1 = traj().velocity_bound().unwrap();
    TwoLinkArm::new(TwoLinkParams::default(), zd1).unwrap()
}

/// Deterministic sample stream of random vectors in [-lim, lim]^n.
pub struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn vec(&mut self, n: usize, lim: f64) -> DVector<f64> {
        DVector::from_fn(n, |_, _| self.rng.gen_range(-lim..lim))
    }
}

/// Max absolute entry of a vector-valued residual.
pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn dof() -> usize {
    plant().dof()
}
