//! Euler-Lagrange plant dynamics
//!
//! The plant family is `M(q) q̈ + C(q, q̇) q̇ + G(q) + F_d q̇ = τ` with the
//! structural properties every such system carries:
//!
//! 1. bounded symmetric positive-definite inertia, `m1‖ξ‖² ≤ ξᵀM(q)ξ ≤ m2‖ξ‖²`
//! 2. skew-symmetry, `Ṁ = C + Cᵀ`
//! 3. the switching property `C(q, ν) ξ = C(q, ξ) ν`
//! 4. Lipschitz-type bounds with known constants (`ModelBounds`)
//! 5. linear parameterization `Y(q, q̇, q̈) θ = M q̈ + C q̇ + G + F_d q̇`
//!
//! The shipped implementation is a two-link planar revolute arm with
//! `p = 5` parameters: three inertia/gravity combinations and two viscous
//! friction coefficients.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Certified bounding constants for a plant (properties 1 and 4), plus the
/// desired-velocity bound `zeta_d1` that fixes the operating region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBounds {
    /// Lower inertia eigenvalue bound, `m1 > 0`.
    pub m1: f64,
    /// Upper inertia eigenvalue bound.
    pub m2: f64,
    /// `‖M(ξ) − M(ν)‖ ≤ zeta_M1 ‖ξ − ν‖`
    pub zeta_m1: f64,
    /// `‖C(q, w)‖ ≤ zeta_C1 ‖w‖`
    pub zeta_c1: f64,
    /// `‖C(ξ, w) − C(ν, w)‖ ≤ zeta_C2 ‖ξ − ν‖ ‖w‖`
    pub zeta_c2: f64,
    /// `‖G(ξ) − G(ν)‖ ≤ zeta_G ‖ξ − ν‖`
    pub zeta_g: f64,
    /// `‖F_d‖ ≤ zeta_F`
    pub zeta_f: f64,
    /// Bound on `‖q̇_d(t)‖` over the whole run.
    pub zeta_d1: f64,
}

impl ModelBounds {
    /// All structural constants positive; zeta_d1 may be zero (constant
    /// desired trajectory).
    pub fn all_positive(&self) -> bool {
        [
            self.m1,
            self.m2,
            self.zeta_m1,
            self.zeta_c1,
            self.zeta_c2,
            self.zeta_g,
            self.zeta_f,
        ]
        .iter()
        .all(|&v| v > 0.0)
            && self.zeta_d1 >= 0.0
    }
}

/// An n-DOF Euler-Lagrange plant in linearly parameterized form.
///
/// All methods are pure functions of immutable model data and are safe to
/// call concurrently.
pub trait Plant: Send + Sync {
    fn dof(&self) -> usize;
    fn param_dim(&self) -> usize;
    /// True constant parameter vector θ (analysis/oracle use only).
    fn theta(&self) -> &DVector<f64>;
    fn bounds(&self) -> &ModelBounds;

    /// Inertia matrix M(q).
    fn mass_matrix(&self, q: &DVector<f64>) -> Result<DMatrix<f64>>;
    /// Centripetal-Coriolis matrix C(q, v) (skew-symmetry convention).
    fn coriolis_matrix(&self, q: &DVector<f64>, v: &DVector<f64>) -> Result<DMatrix<f64>>;
    /// Gravity vector G(q).
    fn gravity(&self, q: &DVector<f64>) -> Result<DVector<f64>>;
    /// Constant diagonal viscous friction matrix F_d.
    fn friction(&self) -> DMatrix<f64>;

    /// Regression matrix: `regressor(q, v, a) · θ = M(q) a + C(q, v) v + G(q) + F_d v`.
    fn regressor(
        &self,
        q: &DVector<f64>,
        v: &DVector<f64>,
        a: &DVector<f64>,
    ) -> Result<DMatrix<f64>>;

    /// Time derivative of the regressor along a C³ path `(q, v, a, j)` with
    /// `q̇ = v`, `v̇ = a`, `ȧ = j`. Needed in closed form by the
    /// output-feedback adaptation laws.
    fn regressor_dot(
        &self,
        q: &DVector<f64>,
        v: &DVector<f64>,
        a: &DVector<f64>,
        j: &DVector<f64>,
    ) -> Result<DMatrix<f64>>;

    /// Solves the dynamics for the acceleration:
    /// `q̈ = M(q)⁻¹ (τ − C(q,v) v − G(q) − F_d v)`.
    fn forward_dynamics(
        &self,
        q: &DVector<f64>,
        v: &DVector<f64>,
        tau: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        ensure_finite("tau", tau.iter().copied())?;
        let m = self.mass_matrix(q)?;
        let rhs = tau - self.coriolis_matrix(q, v)? * v - self.gravity(q)? - self.friction() * v;
        m.cholesky()
            .map(|ch| ch.solve(&rhs))
            .ok_or_else(|| Error::Numerics("inertia matrix not positive definite".into()))
    }
}

/// Physical parameters of the shipped two-link planar revolute arm.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoLinkParams {
    /// Point mass at the end of link 1 [kg].
    pub mass1: f64,
    /// Point mass at the end of link 2 [kg].
    pub mass2: f64,
    /// Link lengths [m].
    pub len1: f64,
    pub len2: f64,
    /// Rotor inertia added at each joint [kg m²].
    pub rotor_inertia: f64,
    /// Viscous friction coefficients, one per joint [N m s/rad].
    pub viscous: [f64; 2],
    /// Gravitational acceleration [m/s²].
    pub gravity_accel: f64,
}

impl Default for TwoLinkParams {
    fn default() -> Self {
        Self {
            mass1: 0.4,
            mass2: 0.3,
            len1: 0.5,
            len2: 0.5,
            rotor_inertia: 0.15,
            viscous: [0.4, 0.3],
            gravity_accel: 9.81,
        }
    }
}

/// Two-link planar revolute arm with point masses at the link tips and a
/// rotor inertia at each joint.
///
/// Parameter vector `θ = (p1, p2, p3, f1, f2)` with
///
/// ```text
/// p1 = J + m1 l1² + m2 (l1² + l2²)
/// p2 = J + m2 l2²
/// p3 = m2 l1 l2
/// ```
///
/// which gives the standard closed forms (c2 = cos q2, etc.)
///
/// ```text
/// M(q)    = [ p1 + 2 p3 c2   p2 + p3 c2 ]     C(q,v) = p3 s2 [ -v2  -(v1+v2) ]
///           [ p2 + p3 c2     p2         ]                    [  v1   0       ]
/// G(q)    = (g/l1) [ (p1 − p2) c1 + p3 c12 ]
///                  [ p3 c12               ]
/// ```
///
/// Folding the rotor inertia into p1 and p2 keeps gravity exactly linear in
/// θ (since p1 − p2 = (m1 + m2) l1²) while bounding the inertia eigenvalues
/// away from zero.
pub struct TwoLinkArm {
    params: TwoLinkParams,
    theta: DVector<f64>,
    bounds: ModelBounds,
}

impl TwoLinkArm {
    /// Builds the arm and certifies its `ModelBounds` by sampling (see
    /// [`certify_bounds`]). `zeta_d1` is the desired-velocity bound from
    /// the trajectory generator.
    pub fn new(params: TwoLinkParams, zeta_d1: f64) -> Result<Self> {
        if params.mass1 <= 0.0
            || params.mass2 <= 0.0
            || params.len1 <= 0.0
            || params.len2 <= 0.0
            || params.rotor_inertia < 0.0
            || params.gravity_accel <= 0.0
            || params.viscous.iter().any(|&f| f <= 0.0)
        {
            return Err(Error::Config(
                "two-link arm parameters must be strictly positive".into(),
            ));
        }
        let p1 = params.rotor_inertia
            + params.mass1 * params.len1.powi(2)
            + params.mass2 * (params.len1.powi(2) + params.len2.powi(2));
        let p2 = params.rotor_inertia + params.mass2 * params.len2.powi(2);
        let p3 = params.mass2 * params.len1 * params.len2;
        let theta = DVector::from_vec(vec![p1, p2, p3, params.viscous[0], params.viscous[1]]);
        let mut arm = Self {
            params,
            theta,
            bounds: ModelBounds {
                m1: 1.0,
                m2: 1.0,
                zeta_m1: 1.0,
                zeta_c1: 1.0,
                zeta_c2: 1.0,
                zeta_g: 1.0,
                zeta_f: 1.0,
                zeta_d1,
            },
        };
        arm.bounds = certify_bounds(&arm, zeta_d1)?;
        Ok(arm)
    }

    pub fn params(&self) -> &TwoLinkParams {
        &self.params
    }

    fn p(&self) -> (f64, f64, f64) {
        (self.theta[0], self.theta[1], self.theta[2])
    }
}

impl Plant for TwoLinkArm {
    fn dof(&self) -> usize {
        2
    }

    fn param_dim(&self) -> usize {
        5
    }

    fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    fn bounds(&self) -> &ModelBounds {
        &self.bounds
    }

    fn mass_matrix(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        ensure_finite("q", q.iter().copied())?;
        let (p1, p2, p3) = self.p();
        let c2 = q[1].cos();
        Ok(DMatrix::from_row_slice(
            2,
            2,
            &[p1 + 2.0 * p3 * c2, p2 + p3 * c2, p2 + p3 * c2, p2],
        ))
    }

    fn coriolis_matrix(&self, q: &DVector<f64>, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        ensure_finite("q", q.iter().copied())?;
        ensure_finite("v", v.iter().copied())?;
        let p3 = self.theta[2];
        let s2 = q[1].sin();
        Ok(DMatrix::from_row_slice(
            2,
            2,
            &[
                -p3 * s2 * v[1],
                -p3 * s2 * (v[0] + v[1]),
                p3 * s2 * v[0],
                0.0,
            ],
        ))
    }

    fn gravity(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_finite("q", q.iter().copied())?;
        let (p1, p2, p3) = self.p();
        let gl = self.params.gravity_accel / self.params.len1;
        let c1 = q[0].cos();
        let c12 = (q[0] + q[1]).cos();
        Ok(DVector::from_vec(vec![
            gl * ((p1 - p2) * c1 + p3 * c12),
            gl * p3 * c12,
        ]))
    }

    fn friction(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_vec(vec![self.theta[3], self.theta[4]]))
    }

    fn regressor(
        &self,
        q: &DVector<f64>,
        v: &DVector<f64>,
        a: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        ensure_finite("q", q.iter().copied())?;
        ensure_finite("v", v.iter().copied())?;
        ensure_finite("a", a.iter().copied())?;
        let gl = self.params.gravity_accel / self.params.len1;
        let c1 = q[0].cos();
        let c2 = q[1].cos();
        let s2 = q[1].sin();
        let c12 = (q[0] + q[1]).cos();
        let mut y = DMatrix::zeros(2, 5);
        y[(0, 0)] = a[0] + gl * c1;
        y[(0, 1)] = a[1] - gl * c1;
        y[(1, 1)] = a[0] + a[1];
        y[(0, 2)] = c2 * (2.0 * a[0] + a[1]) - s2 * (2.0 * v[0] * v[1] + v[1] * v[1]) + gl * c12;
        y[(1, 2)] = c2 * a[0] + s2 * v[0] * v[0] + gl * c12;
        y[(0, 3)] = v[0];
        y[(1, 4)] = v[1];
        Ok(y)
    }

    fn regressor_dot(
        &self,
        q: &DVector<f64>,
        v: &DVector<f64>,
        a: &DVector<f64>,
        j: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        ensure_finite("q", q.iter().copied())?;
        ensure_finite("v", v.iter().copied())?;
        ensure_finite("a", a.iter().copied())?;
        ensure_finite("j", j.iter().copied())?;
        let gl = self.params.gravity_accel / self.params.len1;
        let s1 = q[0].sin();
        let c2 = q[1].cos();
        let s2 = q[1].sin();
        let s12 = (q[0] + q[1]).sin();
        let mut yd = DMatrix::zeros(2, 5);
        yd[(0, 0)] = j[0] - gl * s1 * v[0];
        yd[(0, 1)] = j[1] + gl * s1 * v[0];
        yd[(1, 1)] = j[0] + j[1];
        yd[(0, 2)] = -s2 * v[1] * (2.0 * a[0] + a[1]) + c2 * (2.0 * j[0] + j[1])
            - c2 * v[1] * (2.0 * v[0] * v[1] + v[1] * v[1])
            - s2 * (2.0 * a[0] * v[1] + 2.0 * v[0] * a[1] + 2.0 * v[1] * a[1])
            - gl * s12 * (v[0] + v[1]);
        yd[(1, 2)] = -s2 * v[1] * a[0]
            + c2 * j[0]
            + c2 * v[1] * v[0] * v[0]
            + 2.0 * s2 * v[0] * a[0]
            - gl * s12 * (v[0] + v[1]);
        yd[(0, 3)] = a[0];
        yd[(1, 4)] = a[1];
        Ok(yd)
    }
}

/// Spectral norm of a small matrix via its singular values.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

/// Certifies `ModelBounds` for a plant by coarse global search: a grid over
/// the configuration torus for the inertia eigenvalue bounds, plus seeded
/// random sampling for the Lipschitz constants over the operating region
/// `‖q̇‖ ≤ 2 zeta_d1`. Constants are inflated 10% (m1 deflated slightly)
/// so that re-certification on fresh samples holds.
///
/// Deterministic: the sampling RNG seed is fixed.
pub fn certify_bounds(plant: &impl Plant, zeta_d1: f64) -> Result<ModelBounds> {
    if zeta_d1 < 0.0 || !zeta_d1.is_finite() {
        return Err(Error::Config("zeta_d1 must be nonnegative and finite".into()));
    }
    let n = plant.dof();
    let mut m1 = f64::INFINITY;
    let mut m2: f64 = 0.0;
    // Eigenvalue bounds of M over a configuration grid (M is 2π-periodic
    // per joint, so the torus covers all configurations).
    let grid = 181usize;
    let mut idx = vec![0usize; n];
    loop {
        let q = DVector::from_iterator(
            n,
            idx.iter()
                .map(|&i| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / (grid - 1) as f64),
        );
        let m = plant.mass_matrix(&q)?;
        let eig = m.symmetric_eigenvalues();
        m1 = m1.min(eig.min());
        m2 = m2.max(eig.max());
        // advance the grid multi-index
        let mut k = 0;
        loop {
            if k == n {
                break;
            }
            idx[k] += 1;
            if idx[k] < grid {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if k == n {
            break;
        }
    }
    if m1 <= 0.0 {
        return Err(Error::Numerics(
            "inertia matrix not positive definite over the grid".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x1bd5);
    let mut zm1: f64 = 0.0;
    let mut zc1: f64 = 0.0;
    let mut zc2: f64 = 0.0;
    let mut zg: f64 = 0.0;
    let pi = std::f64::consts::PI;
    // A constant desired trajectory has zeta_d1 = 0; the velocity sampling
    // region keeps a unit floor so the Lipschitz constants stay certified
    // over a nondegenerate region (a larger region only makes them more
    // conservative).
    let wmax = (2.0 * zeta_d1).max(1.0);
    for _ in 0..4000 {
        let xi = DVector::from_fn(n, |_, _| rng.gen_range(-pi..pi));
        let nu = DVector::from_fn(n, |_, _| rng.gen_range(-pi..pi));
        let w = DVector::from_fn(n, |_, _| rng.gen_range(-wmax..wmax));
        let dq = (&xi - &nu).norm();
        if dq > 1e-9 {
            zm1 = zm1.max(spectral_norm(&(plant.mass_matrix(&xi)? - plant.mass_matrix(&nu)?)) / dq);
            zg = zg.max((plant.gravity(&xi)? - plant.gravity(&nu)?).norm() / dq);
            let dc = plant.coriolis_matrix(&xi, &w)? - plant.coriolis_matrix(&nu, &w)?;
            let wn = w.norm();
            if wn > 1e-9 {
                zc2 = zc2.max(spectral_norm(&dc) / (dq * wn));
            }
        }
        let wn = w.norm();
        if wn > 1e-9 {
            zc1 = zc1.max(spectral_norm(&plant.coriolis_matrix(&xi, &w)?) / wn);
        }
    }
    let zf = spectral_norm(&plant.friction());
    let bounds = ModelBounds {
        m1: m1 * 0.999,
        m2: m2 * 1.1,
        zeta_m1: zm1 * 1.1,
        zeta_c1: zc1 * 1.1,
        zeta_c2: zc2 * 1.1,
        zeta_g: zg * 1.1,
        zeta_f: zf * 1.1,
        zeta_d1,
    };
    if !bounds.all_positive() {
        return Err(Error::Numerics("certified bounds must be positive".into()));
    }
    Ok(bounds)
}

/// Finite-difference `Ṁ` along direction `v` (central differences, step
/// 1e-6), used as the oracle for the skew-symmetry property.
pub fn mass_matrix_rate_fd(
    plant: &impl Plant,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let h = 1e-6;
    let mp = plant.mass_matrix(&(q + v * h))?;
    let mm = plant.mass_matrix(&(q - v * h))?;
    Ok((mp - mm) / (2.0 * h))
}
