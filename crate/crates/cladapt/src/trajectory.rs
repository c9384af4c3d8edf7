//! Desired trajectory generation.
//!
//! Per-joint sinusoids `q_d = offset + s(t) · A (1 − cos ωt)` with a C³
//! polynomial ramp `s(t)` over `[0, ramp_time]`, so that the trajectory
//! starts at rest (`q̇_d(0) = 0`) and all derivatives through the jerk are
//! continuous. Incommensurate default frequencies keep the filtered
//! regressor rich enough for the offline memory stack.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesiredTrajectory {
    /// Per-joint amplitude [rad].
    pub amplitude: Vec<f64>,
    /// Per-joint frequency [rad/s].
    pub frequency: Vec<f64>,
    /// Ramp duration [s], > 0.
    pub ramp_time: f64,
    /// Constant per-joint offset [rad]. The default centers the arm on the
    /// hanging configuration, where gravity torques are mild.
    pub offset: Vec<f64>,
}

impl Default for DesiredTrajectory {
    fn default() -> Self {
        Self {
            amplitude: vec![0.5, 0.8],
            frequency: vec![0.7, 1.1],
            ramp_time: 1.0,
            offset: vec![-std::f64::consts::FRAC_PI_2, 0.0],
        }
    }
}

/// A trajectory sample: desired position, velocity, acceleration and jerk.
#[derive(Debug, Clone)]
pub struct TrajPoint {
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub a: DVector<f64>,
    pub j: DVector<f64>,
}

/// Degree-7 smoothstep and its first three derivatives; C³ at both ends.
fn ramp(t: f64, tr: f64) -> (f64, f64, f64, f64) {
    if t >= tr {
        return (1.0, 0.0, 0.0, 0.0);
    }
    let x = t / tr;
    let x2 = x * x;
    let x3 = x2 * x;
    let x4 = x3 * x;
    let s = 35.0 * x4 - 84.0 * x4 * x + 70.0 * x4 * x2 - 20.0 * x4 * x3;
    let s1 = (140.0 * x3 - 420.0 * x4 + 420.0 * x4 * x - 140.0 * x4 * x2) / tr;
    let s2 = (420.0 * x2 - 1680.0 * x3 + 2100.0 * x4 - 840.0 * x4 * x) / (tr * tr);
    let s3 = (840.0 * x - 5040.0 * x2 + 8400.0 * x3 - 4200.0 * x4) / (tr * tr * tr);
    (s, s1, s2, s3)
}

impl DesiredTrajectory {
    pub fn dof(&self) -> usize {
        self.amplitude.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.amplitude.is_empty()
            || self.amplitude.len() != self.frequency.len()
            || self.amplitude.len() != self.offset.len()
        {
            return Err(Error::Config(
                "trajectory.amplitude, trajectory.frequency and trajectory.offset must have the same nonzero length".into(),
            ));
        }
        if self.ramp_time <= 0.0 {
            return Err(Error::Config("trajectory.ramp_time must be > 0".into()));
        }
        if self
            .amplitude
            .iter()
            .chain(&self.frequency)
            .chain(&self.offset)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Config("trajectory parameters must be finite".into()));
        }
        Ok(())
    }

    /// Evaluates `(q_d, q̇_d, q̈_d)` at time `t ≥ 0`.
    pub fn eval(&self, t: f64) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let p = self.eval_full(t)?;
        Ok((p.q, p.v, p.a))
    }

    /// Evaluates through the jerk (needed for the closed-form `Ẏ_d`).
    pub fn eval_full(&self, t: f64) -> Result<TrajPoint> {
        if t.is_nan() || t < 0.0 {
            return Err(Error::Config(format!("trajectory time {t} < 0")));
        }
        let n = self.dof();
        let (s, s1, s2, s3) = ramp(t, self.ramp_time);
        let mut q = DVector::zeros(n);
        let mut v = DVector::zeros(n);
        let mut a = DVector::zeros(n);
        let mut j = DVector::zeros(n);
        for i in 0..n {
            let amp = self.amplitude[i];
            let w = self.frequency[i];
            let (sin, cos) = (w * t).sin_cos();
            // base sinusoid b(t) = A (1 − cos ωt) and derivatives
            let b = amp * (1.0 - cos);
            let b1 = amp * w * sin;
            let b2 = amp * w * w * cos;
            let b3 = -amp * w * w * w * sin;
            q[i] = self.offset[i] + s * b;
            v[i] = s1 * b + s * b1;
            a[i] = s2 * b + 2.0 * s1 * b1 + s * b2;
            j[i] = s3 * b + 3.0 * s2 * b1 + 3.0 * s1 * b2 + s * b3;
        }
        Ok(TrajPoint { q, v, a, j })
    }

    /// Sampled supremum of `‖q̇_d‖` over `[0, 100 s]`, inflated 5%; stored
    /// in `ModelBounds` as `zeta_d1`.
    pub fn velocity_bound(&self) -> Result<f64> {
        let mut sup: f64 = 0.0;
        let steps = 20_000;
        for i in 0..=steps {
            let t = 100.0 * i as f64 / steps as f64;
            sup = sup.max(self.eval_full(t)?.v.norm());
        }
        Ok(sup * 1.05)
    }

    /// Sampled supremum of `‖q̈_d‖`, inflated 5%; used by the analysis
    /// bound functions.
    pub fn accel_bound(&self) -> Result<f64> {
        let mut sup: f64 = 0.0;
        let steps = 20_000;
        for i in 0..=steps {
            let t = 100.0 * i as f64 / steps as f64;
            sup = sup.max(self.eval_full(t)?.a.norm());
        }
        Ok(sup * 1.05)
    }
}
