//! Verification layer: bounding functions, analysis-only oracles and decay
//! fitting.
//!
//! Everything here may read the *true* plant state (including velocities) —
//! these are certification oracles, never controller inputs.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dynamics::{ModelBounds, Plant};
use crate::error::{Error, Result};

/// Affine-in-norm bounding functions ρ₁…ρ₄ with coefficients assembled
/// from the certified `ModelBounds`, plus the running suprema ρ̄₁, ρ̄₃ over
/// stack record times (seeded from initial-condition norms, since the gain
/// sizing is semi-global).
///
/// * `ρ₁(‖x‖)`: `‖Ω‖ ≤ ρ₁(‖x‖)‖r‖` for the full-state-feedback error
///   vector `x = (e, r)`.
/// * `ρ₂(‖x‖)`: `‖W̃‖ ≤ ρ₂(‖x‖)‖x‖`.
/// * `ρ₃(‖z‖)`: `‖Ω‖ ≤ ρ₃(‖z‖)‖z‖` for the output-feedback error vector
///   `z = (e, e_f, η)`.
/// * `ρ₄(‖z‖)`: `‖χ‖ ≤ ρ₄(‖z‖)‖z‖`.
#[derive(Debug, Clone, Serialize)]
pub struct BoundFns {
    xi1: f64,
    xi23: f64,
    rho2_c0: f64,
    rho2_c1: f64,
    xi4: f64,
    xi5: f64,
    rho4_c0: f64,
    rho4_c1: f64,
    pub rho1_bar: f64,
    pub rho3_bar: f64,
}

impl BoundFns {
    /// Assembles the ρ coefficients.
    ///
    /// `zeta_d2` bounds `‖q̈_d‖`; `alpha` is the full-state-feedback filter
    /// gain; `a1, a2, a3` are the output-feedback surrogate gains.
    pub fn new(
        b: &ModelBounds,
        beta: f64,
        zeta_d2: f64,
        alpha: f64,
        a1: f64,
        a2: f64,
        a3: f64,
    ) -> Result<Self> {
        if beta <= 0.0 || zeta_d2 <= 0.0 || alpha <= 0.0 || a1 <= 0.0 || a2 <= 0.0 || a3 <= 0.0 {
            return Err(Error::Config("bound-function parameters must be positive".into()));
        }
        let s2 = std::f64::consts::SQRT_2;
        let bb = beta * beta + beta;
        let (zm1, zc1, zc2, zg, zf, zd1) =
            (b.zeta_m1, b.zeta_c1, b.zeta_c2, b.zeta_g, b.zeta_f, b.zeta_d1);

        // ρ₁ = ξ₁ + max{ξ₂, ξ₃}‖x‖
        let xi1 = bb * (zm1 * zd1 / alpha + b.m2)
            + beta * (zc2 * zd1 * zd1 / alpha + 2.0 * zc1 * zd1 + zg / alpha + zf);
        let xi2 = bb * zm1;
        let xi3 = beta * zc1;

        // ρ₂ = c₀ + c₁‖x‖ (conservative Cauchy-Schwarz assembly of the
        // W̃ definition; ‖ė‖ ≤ ‖r‖ + α‖e‖ ≤ (1 + α)‖x‖)
        let rho2_c0 = s2 * zm1 * zeta_d2
            + alpha * b.m2 * (1.0 + alpha)
            + s2 * zc1 * zd1 * (1.0 + alpha)
            + s2 * zc2 * zd1 * zd1
            + s2 * zc1 * zd1 * alpha
            + zg
            + s2 * zf * (1.0 + alpha);
        let rho2_c1 = s2 * zc1 * alpha * (1.0 + alpha) + s2 * zc2 * zd1 * alpha;

        // ρ₃ = ξ₄ + ξ₅‖z‖
        let mx = a1.max(a2);
        let xi4 = bb * (zm1 * zd1 + b.m2 * mx)
            + beta * (zc2 * zd1 * zd1 + 2.0 * zc1 * zd1 * mx + zg + zf * mx);
        let xi5 = bb * zm1 * mx + beta * zc1 * mx * mx;

        // ρ₄ = c₀ + c₁‖z‖; mz bounds ‖q̇ − q̇_d‖ / ‖z‖ via
        // ė = η − α₁e − α₂e_f.
        let mz = (1.0 + a1 * a1 + a2 * a2).sqrt();
        let a12 = (a1 * a1 + a2 * a2).sqrt();
        let rho4_c0 = s2 * zm1 * zeta_d2
            + zg
            + s2 * zf * mz
            + s2 * zc2 * zd1 * zd1
            + s2 * zc1 * zd1 * (1.0 + a12)
            + s2 * zc1 * zd1 * a12
            + a1 * b.m2 * mz
            + a2 * b.m2 * (a2 * a2 + a3 * a3).sqrt();
        let rho4_c1 = s2 * zc1 * a12 * a12 + s2 * zc1 * a12;

        Ok(Self {
            xi1,
            xi23: xi2.max(xi3),
            rho2_c0,
            rho2_c1,
            xi4,
            xi5,
            rho4_c0,
            rho4_c1,
            rho1_bar: 0.0,
            rho3_bar: 0.0,
        })
    }

    pub fn rho1(&self, x_norm: f64) -> f64 {
        self.xi1 + self.xi23 * x_norm
    }

    pub fn rho2(&self, x_norm: f64) -> f64 {
        self.rho2_c0 + self.rho2_c1 * x_norm
    }

    pub fn rho3(&self, z_norm: f64) -> f64 {
        self.xi4 + self.xi5 * z_norm
    }

    pub fn rho4(&self, z_norm: f64) -> f64 {
        self.rho4_c0 + self.rho4_c1 * z_norm
    }

    /// Seeds ρ̄₁ from the initial error norm: the semi-global gain sizing
    /// covers trajectories with `‖x(t)‖ ≤ 2‖x(0)‖`.
    pub fn seed_rho1_bar(&mut self, x0_norm: f64) {
        self.rho1_bar = self.rho1(2.0 * x0_norm);
    }

    /// Seeds ρ̄₃ analogously from `‖z(0)‖`.
    pub fn seed_rho3_bar(&mut self, z0_norm: f64) {
        self.rho3_bar = self.rho3(2.0 * z0_norm);
    }

    /// Running-supremum update at a stack record time.
    pub fn observe_record_fsfb(&mut self, x_norm: f64) {
        self.rho1_bar = self.rho1_bar.max(self.rho1(x_norm));
    }

    pub fn observe_record_ofb(&mut self, z_norm: f64) {
        self.rho3_bar = self.rho3_bar.max(self.rho3(z_norm));
    }
}

/// `W̃ = M(q)(q̈_d + αė) + C(q, q̇)(q̇_d + αe) + G(q) + F_d q̇ − Y_d θ`,
/// the full-state-feedback mismatch between true and desired-compensation
/// dynamics. Analysis-only (reads true velocity).
#[allow(clippy::too_many_arguments)]
pub fn w_tilde(
    plant: &dyn Plant,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    e: &DVector<f64>,
    edot: &DVector<f64>,
    qd_dot: &DVector<f64>,
    qd_ddot: &DVector<f64>,
    y_d: &DMatrix<f64>,
    alpha: f64,
) -> Result<DVector<f64>> {
    let m = plant.mass_matrix(q)?;
    let c = plant.coriolis_matrix(q, qdot)?;
    Ok(m * (qd_ddot + edot * alpha)
        + c * (qd_dot + e * alpha)
        + plant.gravity(q)?
        + plant.friction() * qdot
        - y_d * plant.theta())
}

/// The output-feedback auxiliary term χ(e, e_f, η):
///
/// ```text
/// χ = M q̈_d + F_d q̇ + G − Y_d θ
///     + α₁ M (η − α₁ e − α₂ e_f) + α₂ M (−α₃ e_f + α₂ e)
///     − C(q, η) w + C(q, q̇_d) w + C(q, w) (α₁ e + α₂ e_f)
/// ```
///
/// with `w = q̇_d + α₁ e + α₂ e_f`. Analysis-only.
#[allow(clippy::too_many_arguments)]
pub fn chi(
    plant: &dyn Plant,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    e: &DVector<f64>,
    e_f: &DVector<f64>,
    eta: &DVector<f64>,
    qd_dot: &DVector<f64>,
    qd_ddot: &DVector<f64>,
    y_d: &DMatrix<f64>,
    a1: f64,
    a2: f64,
    a3: f64,
) -> Result<DVector<f64>> {
    let m = plant.mass_matrix(q)?;
    let w = qd_dot + e * a1 + e_f * a2;
    Ok(&m * qd_ddot
        + plant.friction() * qdot
        + plant.gravity(q)?
        - y_d * plant.theta()
        + &m * (eta - e * a1 - e_f * a2) * a1
        + &m * (e * a2 - e_f * a3) * a2
        - plant.coriolis_matrix(q, eta)? * &w
        + plant.coriolis_matrix(q, qd_dot)? * &w
        + plant.coriolis_matrix(q, &w)? * (e * a1 + e_f * a2))
}

/// Independent Ω oracle.
///
/// Ω is the filtered mismatch `f * ((Y − Y_d) θ)`. Writing the integrand as
/// `u̇ + w` with
///
/// ```text
/// u = M(q) q̇ − M(q_d) q̇_d
/// w = −Cᵀ(q, q̇) q̇ + Cᵀ(q_d, q̇_d) q̇_d + G(q) − G(q_d) + F_d (q̇ − q̇_d)
/// ```
///
/// (using Ṁ = C + Cᵀ to trade the inertia rate for −Cᵀq̇) and integrating
/// by parts gives
///
/// ```text
/// Ω(t) = β u(t) − β e^{−βt} u(0) − β a(t) + b(t)
/// ```
///
/// where `a = f * u` and `b = f * w` are two auxiliary first-order filters
/// (`ȧ = β(u − a)`, a(0) = 0, likewise b) integrated alongside the run.
/// This route never touches the applied torque, so comparing it with
/// `ε − Y_df θ̃` is a genuine cross-check of the prediction-error identity.
#[derive(Debug, Clone)]
pub struct OmegaOracle {
    pub u0: DVector<f64>,
}

impl OmegaOracle {
    /// `u(t)` from true and desired states.
    pub fn u(
        plant: &dyn Plant,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        qd: &DVector<f64>,
        qd_dot: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Ok(plant.mass_matrix(q)? * qdot - plant.mass_matrix(qd)? * qd_dot)
    }

    /// `w(t)` from true and desired states.
    pub fn w(
        plant: &dyn Plant,
        q: &DVector<f64>,
        qdot: &DVector<f64>,
        qd: &DVector<f64>,
        qd_dot: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Ok(-plant.coriolis_matrix(q, qdot)?.transpose() * qdot
            + plant.coriolis_matrix(qd, qd_dot)?.transpose() * qd_dot
            + plant.gravity(q)?
            - plant.gravity(qd)?
            + plant.friction() * (qdot - qd_dot))
    }

    /// Assembles Ω from the current u and the filter states a, b.
    pub fn omega(
        &self,
        beta: f64,
        t: f64,
        u: &DVector<f64>,
        a: &DVector<f64>,
        b: &DVector<f64>,
    ) -> DVector<f64> {
        u * beta - &self.u0 * (beta * (-beta * t).exp()) - a * beta + b
    }
}

/// Result of a log-linear decay fit.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayFit {
    /// Slope of the least-squares line on log(series) [1/s]; negative for
    /// decaying series.
    pub rate: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub samples: usize,
}

/// Least-squares line on `log(series)` over an auto-selected window where
/// the series lies in `[1e-6, 0.5 · series[0]]`. Returns `None` when the
/// window holds fewer than three samples (e.g. a constant series).
///
/// The window is contiguous: it opens at the first sample below half the
/// initial value and closes at the first sample at or below the floor. The
/// floor is `max(1e-6, 1.5 · final value)` — a series that levels off at
/// its numerical floor (discretization residue) is fitted over its decay
/// segment only, since the plateau carries no rate information.
pub fn fit_decay(t: &[f64], series: &[f64]) -> Option<DecayFit> {
    assert_eq!(t.len(), series.len());
    let first = *series.first()?;
    let lo = 1e-6f64.max(1.5 * *series.last()?);
    let hi = 0.5 * first;
    let start = series.iter().position(|&y| y < hi)?;
    let stop = series[start..]
        .iter()
        .position(|&y| y <= lo)
        .map_or(series.len(), |k| start + k);
    let pts: Vec<(f64, f64)> = t[start..stop]
        .iter()
        .zip(&series[start..stop])
        .filter(|&(_, &y)| y > lo && y < hi)
        .map(|(&tt, &y)| (tt, y.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let mx = sx / n;
    let my = sy / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - (my + slope * (p.0 - mx))).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Some(DecayFit {
        rate: slope,
        r_squared: r2,
        window: (pts.first().unwrap().0, pts.last().unwrap().0),
        samples: pts.len(),
    })
}

/// `exp(−k_θ Γ G t) v` for diagonal Γ ≻ 0 and symmetric G ⪰ 0, via the
/// similarity `Γ^{1/2} G Γ^{1/2}` (symmetric eigensolve). Oracle for the
/// reduced estimator ODE `θ̃̇ = −k_θ Γ G θ̃`.
pub fn estimator_matrix_exp(
    gamma_diag: &DVector<f64>,
    gram: &DMatrix<f64>,
    k_theta: f64,
    t: f64,
    v0: &DVector<f64>,
) -> DVector<f64> {
    let p = gamma_diag.len();
    let g_half = DMatrix::from_diagonal(&gamma_diag.map(f64::sqrt));
    let g_half_inv = DMatrix::from_diagonal(&gamma_diag.map(|g| 1.0 / g.sqrt()));
    let s = &g_half * gram * &g_half;
    let eig = s.symmetric_eigen();
    let mut d = DMatrix::zeros(p, p);
    for i in 0..p {
        d[(i, i)] = (-k_theta * eig.eigenvalues[i] * t).exp();
    }
    let e = &g_half * &eig.eigenvectors * d * eig.eigenvectors.transpose() * &g_half_inv;
    e * v0
}

/// Post-hoc certification of the disturbance and perturbation bounds over a
/// completed trace. Margins are `value − bound` and must stay nonpositive.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    /// Ω against ρ₁‖r‖ (full-state feedback) or ρ₃‖z‖ (output feedback).
    pub max_omega_margin: f64,
    /// W̃ against ρ₂‖x‖ (full-state feedback) or χ against ρ₄‖z‖.
    pub max_shape_margin: f64,
    pub rows: usize,
    pub pass: bool,
}

/// Re-evaluates every Appendix bound from the logged rows of a completed
/// trace. The simulator checks the same inequalities online at full step
/// resolution; this path certifies them independently from the persisted
/// signals.
pub fn check_bounds(
    plant: &dyn Plant,
    traj: &crate::trajectory::DesiredTrajectory,
    trace: &crate::simulator::SimTrace,
    bounds: &BoundFns,
    gains: &crate::simulator::Gains,
) -> Result<BoundReport> {
    use crate::simulator::Gains;
    let n = plant.dof();
    let t_col = trace.col("t").ok_or(Error::InvalidInput("trace missing t"))?;
    let q_c = trace.vec_col("q", n).ok_or(Error::InvalidInput("trace missing q"))?;
    let v_c = trace
        .vec_col("qdot", n)
        .ok_or(Error::InvalidInput("trace missing qdot"))?;
    let e_c = trace.vec_col("e", n).ok_or(Error::InvalidInput("trace missing e"))?;
    let ed_c = trace
        .vec_col("edot", n)
        .ok_or(Error::InvalidInput("trace missing edot"))?;
    let om_c = trace
        .vec_col("omega", n)
        .ok_or(Error::InvalidInput("trace missing omega"))?;

    let mut max_omega = f64::NEG_INFINITY;
    let mut max_shape = f64::NEG_INFINITY;
    // The filtered-disturbance bounds come from convolution inequalities,
    // so they are certified against running suprema of the state norms;
    // the shape bounds are instantaneous.
    let mut sup_x = 0.0f64;
    let mut sup_r = 0.0f64;
    let mut sup_z = 0.0f64;
    for (i, &t) in t_col.iter().enumerate() {
        let tp = traj.eval_full(t)?;
        let y_d = plant.regressor(&tp.q, &tp.v, &tp.a)?;
        match gains {
            Gains::Fsfb(g) => {
                let r = &ed_c[i] + &e_c[i] * g.alpha;
                let x_norm = (e_c[i].norm_squared() + r.norm_squared()).sqrt();
                sup_x = sup_x.max(x_norm);
                sup_r = sup_r.max(r.norm());
                max_omega = max_omega.max(om_c[i].norm() - bounds.rho1(sup_x) * sup_r);
                let wt = w_tilde(
                    plant, &q_c[i], &v_c[i], &e_c[i], &ed_c[i], &tp.v, &tp.a, &y_d, g.alpha,
                )?;
                max_shape = max_shape.max(wt.norm() - bounds.rho2(x_norm) * x_norm);
            }
            Gains::Ofb(_, g) => {
                let ef_c = trace
                    .vec_col("e_f", n)
                    .ok_or(Error::InvalidInput("trace missing e_f"))?;
                let eta = &ed_c[i] + &e_c[i] * g.alpha1 + &ef_c[i] * g.alpha2;
                let z_norm = (e_c[i].norm_squared()
                    + ef_c[i].norm_squared()
                    + eta.norm_squared())
                .sqrt();
                sup_z = sup_z.max(z_norm);
                max_omega = max_omega.max(om_c[i].norm() - bounds.rho3(sup_z) * sup_z);
                let chi_v = chi(
                    plant, &q_c[i], &v_c[i], &e_c[i], &ef_c[i], &eta, &tp.v, &tp.a, &y_d,
                    g.alpha1, g.alpha2, g.alpha3,
                )?;
                max_shape = max_shape.max(chi_v.norm() - bounds.rho4(z_norm) * z_norm);
            }
        }
    }
    Ok(BoundReport {
        max_omega_margin: max_omega,
        max_shape_margin: max_shape,
        rows: t_col.len(),
        pass: max_omega <= 0.0 && max_shape <= 0.0,
    })
}

/// Post-hoc Lyapunov certification over a completed trace.
#[derive(Debug, Clone, Serialize)]
pub struct LyapReport {
    pub monotone: bool,
    pub max_step_increase: f64,
    /// min over rows of V − λ_lo‖y‖² resp. λ_hi‖y‖² − V; NaN when the
    /// two-sided bound does not apply (composite).
    pub min_sandwich_lower: f64,
    pub min_sandwich_upper: f64,
    pub v_fit: Option<DecayFit>,
    /// Decay-rate estimate from the V̇/V ratio (min over the fit window).
    pub gamma_hat: f64,
    /// ‖y(t)‖ stayed below √(λ_hi/λ_lo)‖y(0)‖ exp(−γ̂ t / 2) (with 5%
    /// slack); vacuously true for composite.
    pub y_envelope_ok: bool,
    pub pass: bool,
}

/// Certifies monotone nonincrease of V (tolerance `tol_per_step` scaled by
/// the row stride), the two-sided λ bounds, and — for the exponentially
/// convergent controllers — the fitted decay and the y-norm envelope
/// implied by it. `composite` disables the sandwich/fit obligations.
pub fn lyapunov_check(
    trace: &crate::simulator::SimTrace,
    lam_lo: f64,
    lam_hi: f64,
    composite: bool,
    steps_per_row: usize,
    tol_per_step: f64,
) -> Result<LyapReport> {
    let t = trace.col("t").ok_or(Error::InvalidInput("trace missing t"))?;
    let v = trace
        .col("v_lyap")
        .ok_or(Error::InvalidInput("trace missing v_lyap"))?;
    let y = trace
        .col("y_norm")
        .ok_or(Error::InvalidInput("trace missing y_norm"))?;
    let tol = tol_per_step * steps_per_row as f64;

    let mut max_inc = f64::NEG_INFINITY;
    for w in v.windows(2) {
        max_inc = max_inc.max(w[1] - w[0]);
    }
    let monotone = max_inc <= tol;

    let (mut lo_m, mut hi_m) = (f64::NAN, f64::NAN);
    if !composite {
        lo_m = f64::INFINITY;
        hi_m = f64::INFINITY;
        for i in 0..v.len() {
            let ysq = y[i] * y[i];
            lo_m = lo_m.min(v[i] - lam_lo * ysq);
            hi_m = hi_m.min(lam_hi * ysq - v[i]);
        }
    }

    let v_fit = if composite { None } else { fit_decay(&t, &v) };
    let mut gamma_hat = f64::NAN;
    let mut y_env_ok = true;
    if let Some(fit) = &v_fit {
        // Rate of the V envelope from the discrete V̇/V ratio, restricted
        // to the fit window; the min is the certified worst-case rate.
        let mut g = f64::INFINITY;
        for i in 1..v.len() {
            if t[i - 1] >= fit.window.0 && t[i] <= fit.window.1 && v[i] > 0.0 && v[i - 1] > 0.0 {
                let r = -(v[i].ln() - v[i - 1].ln()) / (t[i] - t[i - 1]);
                g = g.min(r);
            }
        }
        if g.is_finite() && g > 0.0 {
            gamma_hat = g;
            let amp = (lam_hi / lam_lo).sqrt() * y[0] * 1.05;
            for i in 0..y.len() {
                if y[i] > amp * (-gamma_hat * t[i] / 2.0).exp() + 1e-12 {
                    y_env_ok = false;
                    break;
                }
            }
        }
    }

    let sandwich_ok = composite || (lo_m >= -1e-12 && hi_m >= -1e-12);
    Ok(LyapReport {
        monotone,
        max_step_increase: max_inc,
        min_sandwich_lower: lo_m,
        min_sandwich_upper: hi_m,
        v_fit,
        gamma_hat,
        y_envelope_ok: y_env_ok,
        pass: monotone && sandwich_ok && y_env_ok,
    })
}
