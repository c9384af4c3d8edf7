//! Fixed-step simulation of the coupled plant + controller + filter +
//! estimator system, with every invariant monitor evaluated online at full
//! step resolution.
//!
//! One `run` = one thread; scenario fan-out happens above this layer.
//! Identical inputs produce bit-identical traces (pure fixed-order f64
//! arithmetic, no parallelism inside a run).

use nalgebra::{DMatrix, DVector};

use crate::analysis::{self, BoundFns, OmegaOracle};
use crate::controllers::{self, ControllerKind, FsfbGains, OfbGains, OfbView};
use crate::dynamics::Plant;
use crate::error::{Error, Result};
use crate::filtering::{FilterState, QuadratureShadow};
use crate::stack::MemoryStack;
use crate::trajectory::DesiredTrajectory;

/// Torque law signature for [`run_open_loop`].
pub type TorqueFn<'a> = &'a dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64>;
/// Step observer signature for [`run_open_loop`].
pub type StepObserver<'a> = &'a mut dyn FnMut(f64, &DVector<f64>, &DVector<f64>);

#[derive(Debug, Clone)]
pub enum Gains {
    Fsfb(FsfbGains),
    Ofb(ControllerKind, OfbGains),
}

impl Gains {
    pub fn kind(&self) -> ControllerKind {
        match self {
            Gains::Fsfb(_) => ControllerKind::Fsfb,
            Gains::Ofb(kind, _) => *kind,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Fixed integration step [s].
    pub dt: f64,
    /// Run length [s].
    pub duration: f64,
    /// Initial parameter estimate.
    pub theta_hat0: DVector<f64>,
    /// Initial joint position; the plant always starts at rest
    /// (zero initial velocity is part of the operating assumptions).
    pub q0: DVector<f64>,
    /// Reserved for stochastic extensions; runs are deterministic.
    pub seed: u64,
    /// Trace decimation: a row is logged every `log_every` steps (the last
    /// step is always logged). All invariant monitors still run at every
    /// step, so decimation only affects the persisted CSV, not checking.
    pub log_every: usize,
}

impl SimConfig {
    pub fn validate(&self, beta: f64, traj: &DesiredTrajectory) -> Result<()> {
        if self.dt <= 0.0 || !self.dt.is_finite() {
            return Err(Error::Config("sim.dt must be positive".into()));
        }
        if self.duration < self.dt {
            return Err(Error::Config(
                "sim.duration must cover at least one step".into(),
            ));
        }
        if self.dt * beta >= 0.1 {
            return Err(Error::Config(format!(
                "sim.dt = {} leaves no stability headroom for filter beta = {beta} (need dt*beta < 0.1)",
                self.dt
            )));
        }
        let wmax = traj.frequency.iter().cloned().fold(0.0f64, f64::max);
        if self.dt * wmax >= 0.05 {
            return Err(Error::Config(format!(
                "sim.dt = {} too coarse for trajectory frequency {wmax} (need dt*freq < 0.05)",
                self.dt
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("sim.log_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Time-indexed record of the signals the analysis layer consumes. Column
/// order is fixed; the CSV header row documents it.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SimTrace {
    pub fn col_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn col(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.col_index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Extracts consecutive columns `name1..nameN` as row vectors.
    pub fn vec_col(&self, name: &str, len: usize) -> Option<Vec<DVector<f64>>> {
        let i = self.col_index(&format!("{name}1"))?;
        Some(
            self.rows
                .iter()
                .map(|r| DVector::from_iterator(len, r[i..i + len].iter().cloned()))
                .collect(),
        )
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w =
            csv::Writer::from_path(path).map_err(|e| Error::State(format!("csv write: {e}")))?;
        w.write_record(&self.columns)
            .map_err(|e| Error::State(format!("csv write: {e}")))?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| format!("{v:.17e}")))
                .map_err(|e| Error::State(format!("csv write: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Running extrema of the per-step invariant monitors.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MonitorSummary {
    pub steps: usize,
    pub v_initial: f64,
    pub v_final: f64,
    /// max over steps of V(k+1) - V(k).
    pub max_v_step_increase: f64,
    /// min over steps of V - lam_lo*|y|^2 resp. lam_hi*|y|^2 - V
    /// (nonnegative when the two-sided bound holds); NaN for composite.
    pub min_sandwich_lower: f64,
    pub min_sandwich_upper: f64,
    /// max over steps of the prediction-error identity residual.
    pub max_eps_identity_residual: f64,
    /// max relative deviation between ODE filters and the quadrature shadow.
    pub max_filter_quad_rel_err: f64,
    /// Bound-check margins (value - bound; must stay <= 0). NaN when the
    /// bound does not apply to the controller kind. The filtered-disturbance
    /// bounds are evaluated against running suprema of the state norms,
    /// matching the convolution inequalities they come from; the shape
    /// bounds are instantaneous.
    pub max_omega_rho1_margin: f64,
    pub max_wtilde_margin: f64,
    pub max_omega_rho3_margin: f64,
    pub max_chi_margin: f64,
    /// Composite: P stayed symmetric positive definite (every step).
    pub p_spd: bool,
    /// Composite: max increase of lambda_max(P) between logged rows.
    pub max_p_lambda_max_increase: f64,
    /// Composite: max relative error of P^-1(t) - P^-1(0) against the
    /// trapezoidal quadrature of the filtered-regressor Gram integral.
    pub max_pinv_quad_rel_err: f64,
    pub e_initial: f64,
    pub e_final: f64,
    pub theta_tilde_initial: f64,
    pub theta_tilde_final: f64,
    /// First times the tracking / estimation error norms drop below 1% of
    /// their initial values.
    pub t_e_below_1pct: Option<f64>,
    pub t_theta_below_1pct: Option<f64>,
    /// Two-sided Lyapunov constants used (NaN for composite).
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    /// Stack entries recorded during the run.
    pub recorded: usize,
}

pub struct SimOutput {
    pub trace: SimTrace,
    pub monitors: MonitorSummary,
    pub stack: MemoryStack,
    pub bounds: BoundFns,
}

/// Offsets into the flat ODE state vector. Blocks in order: q, qdot,
/// estimator, tau_f, vec(Y_df), [omega], [vec(P)], oracle a, oracle b.
struct Layout {
    n: usize,
    p: usize,
    kind: ControllerKind,
}

impl Layout {
    fn q(&self) -> usize {
        0
    }
    fn v(&self) -> usize {
        self.n
    }
    fn est(&self) -> usize {
        2 * self.n
    }
    fn tau_f(&self) -> usize {
        2 * self.n + self.p
    }
    fn y_df(&self) -> usize {
        3 * self.n + self.p
    }
    fn omega(&self) -> usize {
        3 * self.n + self.p + self.n * self.p
    }
    fn p_mat(&self) -> usize {
        self.omega() + if self.kind == ControllerKind::Fsfb { 0 } else { self.n }
    }
    fn oracle_a(&self) -> usize {
        self.p_mat()
            + if self.kind == ControllerKind::OfbComp {
                self.p * self.p
            } else {
                0
            }
    }
    fn oracle_b(&self) -> usize {
        self.oracle_a() + self.n
    }
    fn size(&self) -> usize {
        self.oracle_b() + self.n
    }

    fn vec(&self, s: &DVector<f64>, off: usize, len: usize) -> DVector<f64> {
        s.rows(off, len).into_owned()
    }
    fn mat(&self, s: &DVector<f64>, off: usize, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_column_slice(r, c, s.rows(off, r * c).as_slice())
    }
    fn set_vec(&self, s: &mut DVector<f64>, off: usize, v: &DVector<f64>) {
        s.rows_mut(off, v.len()).copy_from(v);
    }
    fn set_mat(&self, s: &mut DVector<f64>, off: usize, m: &DMatrix<f64>) {
        s.rows_mut(off, m.nrows() * m.ncols())
            .copy_from_slice(m.as_slice());
    }
}

/// Runs the closed loop. The control law is evaluated at every RK4 stage,
/// so the integrator sees the smooth continuous-time closed-loop vector
/// field (a held torque would pump energy into the weakly damped
/// high-gain surrogate-filter mode and destroy the 4th-order convergence
/// of the coupled system). Velocity-dependent quantities for the
/// output-feedback controllers (the eta signal, the prediction-error
/// decomposition, the bound oracles) are computed from the true state for
/// monitoring only and never enter the control law.
pub fn run(
    plant: &dyn Plant,
    traj: &DesiredTrajectory,
    gains: &Gains,
    beta: f64,
    mut stack: MemoryStack,
    mut bounds: BoundFns,
    cfg: &SimConfig,
) -> Result<SimOutput> {
    let (trace, monitors) = run_inner(plant, traj, gains, beta, &mut stack, &mut bounds, cfg)?;
    Ok(SimOutput {
        trace,
        monitors,
        stack,
        bounds,
    })
}

#[allow(clippy::too_many_lines)]
fn run_inner(
    plant: &dyn Plant,
    traj: &DesiredTrajectory,
    gains: &Gains,
    beta: f64,
    stack: &mut MemoryStack,
    bounds: &mut BoundFns,
    cfg: &SimConfig,
) -> Result<(SimTrace, MonitorSummary)> {
    cfg.validate(beta, traj)?;
    let n = plant.dof();
    let p = plant.param_dim();
    let kind = gains.kind();
    let lay = Layout { n, p, kind };
    let theta = plant.theta().clone();
    if cfg.q0.len() != n || cfg.theta_hat0.len() != p {
        return Err(Error::Config("q0 / theta_hat0 dimension mismatch".into()));
    }

    // ---- initial state -------------------------------------------------
    let t0 = traj.eval_full(0.0)?;
    let e0 = &t0.q - &cfg.q0;
    let y_d0 = plant.regressor(&t0.q, &t0.v, &t0.a)?;
    let mut s = DVector::zeros(lay.size());
    lay.set_vec(&mut s, lay.q(), &cfg.q0);
    match gains {
        Gains::Fsfb(g) => {
            lay.set_vec(&mut s, lay.est(), &cfg.theta_hat0);
            // x(0) = (e0, r0) with r0 = alpha*e0: the ramped trajectory
            // starts frozen, so edot(0) = 0 at the rest start.
            bounds.seed_rho1_bar((e0.norm_squared() * (1.0 + g.alpha * g.alpha)).sqrt());
        }
        Gains::Ofb(k, g) => {
            // omega(0) = k*e(0) so that e_f(0) = 0; z(0) = (e0, 0, a1*e0).
            lay.set_vec(&mut s, lay.omega(), &(&e0 * g.k));
            let z0 = (e0.norm_squared() * (1.0 + g.alpha1 * g.alpha1)).sqrt();
            bounds.seed_rho3_bar(z0);
            match k {
                ControllerKind::OfbGrad => {
                    let phi0 = &cfg.theta_hat0 - (y_d0.transpose() * &e0).component_mul(&g.gamma);
                    lay.set_vec(&mut s, lay.est(), &phi0);
                }
                _ => {
                    let p0 = DMatrix::from_diagonal(&g.p0);
                    let psi0 = &cfg.theta_hat0 - &p0 * (y_d0.transpose() * &e0);
                    lay.set_vec(&mut s, lay.est(), &psi0);
                    lay.set_mat(&mut s, lay.p_mat(), &p0);
                }
            }
        }
    }
    let oracle = OmegaOracle {
        u0: OmegaOracle::u(plant, &cfg.q0, &DVector::zeros(n), &t0.q, &t0.v)?,
    };

    // Two-sided Lyapunov constants.
    let mb = plant.bounds();
    let (lam_lo, lam_hi) = match gains {
        Gains::Fsfb(g) => (
            0.5 * g.kp.min().min(mb.m1).min(g.gamma.map(|x| 1.0 / x).min()),
            0.5 * g.kp.max().max(mb.m2).max(g.gamma.map(|x| 1.0 / x).max()),
        ),
        Gains::Ofb(ControllerKind::OfbGrad, g) => (
            0.5 * g.ks.min().min(mb.m1).min(g.gamma.map(|x| 1.0 / x).min()),
            0.5 * g.ks.max().max(mb.m2).max(g.gamma.map(|x| 1.0 / x).max()),
        ),
        _ => (f64::NAN, f64::NAN),
    };

    // ---- monitor accumulators -----------------------------------------
    let steps = (cfg.duration / cfg.dt).round() as usize;
    let mut mon = MonitorSummary {
        steps,
        v_initial: 0.0,
        v_final: 0.0,
        max_v_step_increase: f64::NEG_INFINITY,
        min_sandwich_lower: f64::INFINITY,
        min_sandwich_upper: f64::INFINITY,
        max_eps_identity_residual: 0.0,
        max_filter_quad_rel_err: 0.0,
        max_omega_rho1_margin: f64::NAN,
        max_wtilde_margin: f64::NAN,
        max_omega_rho3_margin: f64::NAN,
        max_chi_margin: f64::NAN,
        p_spd: true,
        max_p_lambda_max_increase: f64::NEG_INFINITY,
        max_pinv_quad_rel_err: 0.0,
        e_initial: e0.norm(),
        e_final: 0.0,
        theta_tilde_initial: 0.0,
        theta_tilde_final: 0.0,
        t_e_below_1pct: None,
        t_theta_below_1pct: None,
        lambda_lo: lam_lo,
        lambda_hi: lam_hi,
        recorded: 0,
    };
    match kind {
        ControllerKind::Fsfb => {
            mon.max_omega_rho1_margin = f64::NEG_INFINITY;
            mon.max_wtilde_margin = f64::NEG_INFINITY;
        }
        _ => {
            mon.max_omega_rho3_margin = f64::NEG_INFINITY;
            mon.max_chi_margin = f64::NEG_INFINITY;
        }
    }

    let mut quad = QuadratureShadow::new(beta, n, p);
    // Trapezoidal quadrature of the filtered-regressor Gram integral for
    // the P-inverse consistency check.
    let mut pinv_quad = DMatrix::<f64>::zeros(p, p);
    let mut prev_gram_integrand: Option<DMatrix<f64>> = None;
    let mut p_inv0 = DMatrix::<f64>::zeros(p, p);
    let mut prev_p_lambda_max: Option<f64> = None;
    if let Gains::Ofb(ControllerKind::OfbComp, g) = gains {
        p_inv0 = DMatrix::from_diagonal(&g.p0.map(|x| 1.0 / x));
    }

    // ---- trace columns -------------------------------------------------
    let mut columns = vec!["t".to_string()];
    let push_block = |columns: &mut Vec<String>, name: &str, len: usize| {
        for i in 1..=len {
            columns.push(format!("{name}{i}"));
        }
    };
    push_block(&mut columns, "q", n);
    push_block(&mut columns, "qdot", n);
    push_block(&mut columns, "e", n);
    push_block(&mut columns, "edot", n);
    match kind {
        ControllerKind::Fsfb => push_block(&mut columns, "r", n),
        _ => {
            push_block(&mut columns, "e_f", n);
            push_block(&mut columns, "eta", n);
        }
    }
    push_block(&mut columns, "theta_hat", p);
    push_block(&mut columns, "theta_tilde", p);
    columns.push("theta_tilde_norm".to_string());
    columns.push("e_norm".to_string());
    columns.push("y_norm".to_string());
    push_block(&mut columns, "tau", n);
    push_block(&mut columns, "tau_f", n);
    push_block(&mut columns, "eps", n);
    push_block(&mut columns, "omega", n);
    columns.push("v_lyap".to_string());
    match kind {
        ControllerKind::OfbComp => {
            columns.push("p_lambda_min".to_string());
            columns.push("p_lambda_max".to_string());
        }
        _ => {
            columns.push("sandwich_lo".to_string());
            columns.push("sandwich_hi".to_string());
        }
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(steps / cfg.log_every + 2);

    let mut prev_v: Option<f64> = None;
    // The disturbance bound is certified in the form it is derived: the
    // convolution inequalities bound the filtered term by suprema of the
    // state norms over the history, not by their instantaneous values
    // (which cross zero while the filter still carries energy).
    let mut sup_x_norm = 0.0f64;
    let mut sup_r_norm = 0.0f64;
    let mut sup_z_norm = 0.0f64;

    // Cache of the t-dependent quantities (desired trajectory point,
    // desired regressor and its time derivative): every step needs them at
    // t, t + dt/2 and t + dt, and the endpoint carries over as the next
    // step's start.
    struct StageData {
        t: f64,
        tp: crate::trajectory::TrajPoint,
        y_d: DMatrix<f64>,
        y_d_dot: DMatrix<f64>,
    }
    let stage_data = |tt: f64| -> Result<StageData> {
        let tp = traj.eval_full(tt)?;
        let y_d = plant.regressor(&tp.q, &tp.v, &tp.a)?;
        let y_d_dot = plant.regressor_dot(&tp.q, &tp.v, &tp.a, &tp.j)?;
        Ok(StageData { t: tt, tp, y_d, y_d_dot })
    };
    let mut cur = stage_data(0.0)?;

    // ---- main loop -----------------------------------------------------
    for i in 0..=steps {
        let t = i as f64 * cfg.dt;
        let tp = &cur.tp;
        let y_d = &cur.y_d;
        let y_d_dot = &cur.y_d_dot;
        let q = lay.vec(&s, lay.q(), n);
        let v = lay.vec(&s, lay.v(), n);
        let e = &tp.q - &q;
        let edot = &tp.v - &v;
        let tau_f = lay.vec(&s, lay.tau_f(), n);
        let y_df = lay.mat(&s, lay.y_df(), n, p);
        let filter_view = FilterState {
            beta,
            tau_f: tau_f.clone(),
            y_df: y_df.clone(),
        };

        // Record any stack entry whose timestamp we are passing, then
        // fold the record-instant state into the running rho-bar suprema.
        let newly = stack.record_online(&filter_view, t, cfg.dt)?;
        mon.recorded += newly;

        // Controller evaluation (held over this step). `aux` is r for
        // full-state feedback, e_f for output feedback.
        let (tau, theta_hat, aux) = match gains {
            Gains::Fsfb(g) => {
                let r = &edot + &e * g.alpha;
                if newly > 0 {
                    bounds.observe_record_fsfb((e.norm_squared() + r.norm_squared()).sqrt());
                }
                let th = lay.vec(&s, lay.est(), p);
                let tau = controllers::fsfb_torque(g, &e, &r, y_d, &th, bounds, stack);
                (tau, th, r)
            }
            Gains::Ofb(k, g) => {
                let omega = lay.vec(&s, lay.omega(), n);
                let e_f = &omega - &e * g.k;
                if newly > 0 {
                    let eta = &edot + &e * g.alpha1 + &e_f * g.alpha2;
                    bounds.observe_record_ofb(
                        (e.norm_squared() + e_f.norm_squared() + eta.norm_squared()).sqrt(),
                    );
                }
                let view = OfbView {
                    t,
                    e: &e,
                    e_f: &e_f,
                    y_d,
                    y_d_dot,
                    y_df: &y_df,
                    tau_f: &tau_f,
                    stack,
                };
                let th = match k {
                    ControllerKind::OfbGrad => {
                        controllers::ofb_gradient_theta_hat(g, &view, &lay.vec(&s, lay.est(), p))
                    }
                    _ => {
                        let pm = lay.mat(&s, lay.p_mat(), p, p);
                        controllers::ofb_composite_theta_hat(&view, &lay.vec(&s, lay.est(), p), &pm)
                    }
                };
                let tau = controllers::ofb_torque(g, &view, &th);
                (tau, th, e_f)
            }
        };

        // ---- per-step monitors ----------------------------------------
        let theta_tilde = &theta - &theta_hat;
        let eps = &tau_f - &y_df * &theta_hat;
        let u_now = OmegaOracle::u(plant, &q, &v, &tp.q, &tp.v)?;
        let omega_or = oracle.omega(
            beta,
            t,
            &u_now,
            &lay.vec(&s, lay.oracle_a(), n),
            &lay.vec(&s, lay.oracle_b(), n),
        );
        mon.max_eps_identity_residual = mon
            .max_eps_identity_residual
            .max((&eps - (&omega_or + &y_df * &theta_tilde)).norm());
        quad.push(&tau, y_d, cfg.dt / 2.0);
        if i > 0 {
            mon.max_filter_quad_rel_err = mon
                .max_filter_quad_rel_err
                .max(quad.relative_error(&filter_view));
        }

        let m_q = plant.mass_matrix(&q)?;
        let mut lam_stat = (f64::NAN, f64::NAN);
        let (v_lyap, y_sq) = match gains {
            Gains::Fsfb(g) => {
                let r = &aux;
                let v_l = 0.5 * e.dot(&e.component_mul(&g.kp))
                    + 0.5 * r.dot(&(&m_q * r))
                    + 0.5 * theta_tilde.dot(&theta_tilde.component_div(&g.gamma));
                let y_sq = e.norm_squared() + r.norm_squared() + theta_tilde.norm_squared();
                let x_norm = (e.norm_squared() + r.norm_squared()).sqrt();
                sup_x_norm = sup_x_norm.max(x_norm);
                sup_r_norm = sup_r_norm.max(r.norm());
                mon.max_omega_rho1_margin = mon
                    .max_omega_rho1_margin
                    .max(omega_or.norm() - bounds.rho1(sup_x_norm) * sup_r_norm);
                let wt =
                    analysis::w_tilde(plant, &q, &v, &e, &edot, &tp.v, &tp.a, y_d, g.alpha)?;
                mon.max_wtilde_margin = mon
                    .max_wtilde_margin
                    .max(wt.norm() - bounds.rho2(x_norm) * x_norm);
                (v_l, y_sq)
            }
            Gains::Ofb(k, g) => {
                let e_f = &aux;
                let eta = &edot + &e * g.alpha1 + e_f * g.alpha2;
                let z_sq = e.norm_squared() + e_f.norm_squared() + eta.norm_squared();
                let z_norm = z_sq.sqrt();
                sup_z_norm = sup_z_norm.max(z_norm);
                mon.max_omega_rho3_margin = mon
                    .max_omega_rho3_margin
                    .max(omega_or.norm() - bounds.rho3(sup_z_norm) * sup_z_norm);
                let chi_v = analysis::chi(
                    plant, &q, &v, &e, e_f, &eta, &tp.v, &tp.a, y_d, g.alpha1, g.alpha2,
                    g.alpha3,
                )?;
                mon.max_chi_margin = mon
                    .max_chi_margin
                    .max(chi_v.norm() - bounds.rho4(z_norm) * z_norm);
                let quad_track = 0.5 * e.dot(&e.component_mul(&g.ks))
                    + 0.5 * e_f.dot(&e_f.component_mul(&g.ks))
                    + 0.5 * eta.dot(&(&m_q * &eta));
                match k {
                    ControllerKind::OfbGrad => (
                        quad_track + 0.5 * theta_tilde.dot(&theta_tilde.component_div(&g.gamma)),
                        z_sq + theta_tilde.norm_squared(),
                    ),
                    _ => {
                        let pm = lay.mat(&s, lay.p_mat(), p, p);
                        // SPD enforced every step via the Cholesky factor.
                        let chol = pm.clone().cholesky().ok_or_else(|| {
                            Error::Numerics(format!(
                                "least-squares gain P lost positive definiteness at t = {t}"
                            ))
                        })?;
                        let pinv_th = chol.solve(&theta_tilde);
                        (
                            quad_track + 0.5 * theta_tilde.dot(&pinv_th),
                            z_sq + theta_tilde.norm_squared(),
                        )
                    }
                }
            }
        };
        if let Some(pv) = prev_v {
            mon.max_v_step_increase = mon.max_v_step_increase.max(v_lyap - pv);
        } else {
            mon.v_initial = v_lyap;
        }
        prev_v = Some(v_lyap);
        mon.v_final = v_lyap;
        if lam_lo.is_finite() {
            let lo = v_lyap - lam_lo * y_sq;
            let hi = lam_hi * y_sq - v_lyap;
            mon.min_sandwich_lower = mon.min_sandwich_lower.min(lo);
            mon.min_sandwich_upper = mon.min_sandwich_upper.min(hi);
            lam_stat = (lo, hi);
        }

        // Composite P statistics at logged rows.
        if kind == ControllerKind::OfbComp {
            let gram_now = y_df.transpose() * &y_df;
            if let Some(prev) = prev_gram_integrand.take() {
                pinv_quad += (prev + &gram_now) * (cfg.dt / 2.0);
            }
            prev_gram_integrand = Some(gram_now);
            if i % cfg.log_every == 0 || i == steps {
                let pm = lay.mat(&s, lay.p_mat(), p, p);
                let eig = pm.symmetric_eigenvalues();
                if eig.min() <= 0.0 {
                    mon.p_spd = false;
                }
                if let Some(prev) = prev_p_lambda_max {
                    mon.max_p_lambda_max_increase =
                        mon.max_p_lambda_max_increase.max(eig.max() - prev);
                }
                prev_p_lambda_max = Some(eig.max());
                lam_stat = (eig.min(), eig.max());
                if i > 0 {
                    let p_inv = pm
                        .try_inverse()
                        .ok_or_else(|| Error::Numerics("P not invertible".into()))?;
                    let rel =
                        (&p_inv - &p_inv0 - &pinv_quad).norm() / pinv_quad.norm().max(1.0);
                    mon.max_pinv_quad_rel_err = mon.max_pinv_quad_rel_err.max(rel);
                }
            }
        }

        let e_norm = e.norm();
        let tht_norm = theta_tilde.norm();
        if i == 0 {
            mon.theta_tilde_initial = tht_norm;
        }
        mon.e_final = e_norm;
        mon.theta_tilde_final = tht_norm;
        if mon.t_e_below_1pct.is_none() && e_norm < 0.01 * mon.e_initial {
            mon.t_e_below_1pct = Some(t);
        }
        if mon.t_theta_below_1pct.is_none()
            && mon.theta_tilde_initial > 0.0
            && tht_norm < 0.01 * mon.theta_tilde_initial
        {
            mon.t_theta_below_1pct = Some(t);
        }

        // ---- trace row -------------------------------------------------
        if i % cfg.log_every == 0 || i == steps {
            let mut row = Vec::with_capacity(columns.len());
            row.push(t);
            row.extend(q.iter());
            row.extend(v.iter());
            row.extend(e.iter());
            row.extend(edot.iter());
            match gains {
                Gains::Fsfb(_) => row.extend(aux.iter()),
                Gains::Ofb(_, g) => {
                    row.extend(aux.iter());
                    let eta = &edot + &e * g.alpha1 + &aux * g.alpha2;
                    row.extend(eta.iter());
                }
            }
            row.extend(theta_hat.iter());
            row.extend(theta_tilde.iter());
            row.push(tht_norm);
            row.push(e_norm);
            row.push(y_sq.sqrt());
            row.extend(tau.iter());
            row.extend(tau_f.iter());
            row.extend(eps.iter());
            row.extend(omega_or.iter());
            row.push(v_lyap);
            row.push(lam_stat.0);
            row.push(lam_stat.1);
            rows.push(row);
        }

        if i == steps {
            break;
        }

        // ---- RK4 step with stage-evaluated torque ---------------------
        let bounds_now: &BoundFns = bounds;
        let deriv =
            |state: &DVector<f64>, sd: &StageData| -> Result<(DVector<f64>, DVector<f64>)> {
            let tp = &sd.tp;
            let q_ = lay.vec(state, lay.q(), n);
            let v_ = lay.vec(state, lay.v(), n);
            let e_ = &tp.q - &q_;
            let y_d_ = &sd.y_d;
            let y_dd_ = &sd.y_d_dot;
            let tau_f_ = lay.vec(state, lay.tau_f(), n);
            let y_df_ = lay.mat(state, lay.y_df(), n, p);

            let mut ds = DVector::zeros(lay.size());
            let tau_ = match gains {
                Gains::Fsfb(g) => {
                    let th_ = lay.vec(state, lay.est(), p);
                    let r_ = (&tp.v - &v_) + &e_ * g.alpha;
                    lay.set_vec(
                        &mut ds,
                        lay.est(),
                        &controllers::fsfb_update(g, &r_, y_d_, stack, &th_),
                    );
                    controllers::fsfb_torque(g, &e_, &r_, y_d_, &th_, bounds_now, stack)
                }
                Gains::Ofb(k, g) => {
                    let omega_ = lay.vec(state, lay.omega(), n);
                    let e_f_ = &omega_ - &e_ * g.k;
                    lay.set_vec(
                        &mut ds,
                        lay.omega(),
                        &controllers::ofb_surrogate_step(g, &e_, &omega_),
                    );
                    let view = OfbView {
                        t: sd.t,
                        e: &e_,
                        e_f: &e_f_,
                        y_d: y_d_,
                        y_d_dot: y_dd_,
                        y_df: &y_df_,
                        tau_f: &tau_f_,
                        stack,
                    };
                    let th_ = match k {
                        ControllerKind::OfbGrad => {
                            let phi_ = lay.vec(state, lay.est(), p);
                            lay.set_vec(
                                &mut ds,
                                lay.est(),
                                &controllers::ofb_gradient_update(g, &view, &phi_),
                            );
                            controllers::ofb_gradient_theta_hat(g, &view, &phi_)
                        }
                        _ => {
                            let pm_ = lay.mat(state, lay.p_mat(), p, p);
                            let (psi_dot, p_dot) = controllers::ofb_composite_update(
                                g,
                                &view,
                                &lay.vec(state, lay.est(), p),
                                &pm_,
                            );
                            lay.set_vec(&mut ds, lay.est(), &psi_dot);
                            lay.set_mat(&mut ds, lay.p_mat(), &p_dot);
                            controllers::ofb_composite_theta_hat(
                                &view,
                                &lay.vec(state, lay.est(), p),
                                &pm_,
                            )
                        }
                    };
                    controllers::ofb_torque(g, &view, &th_)
                }
            };
            let acc = plant.forward_dynamics(&q_, &v_, &tau_)?;
            lay.set_vec(&mut ds, lay.q(), &v_);
            lay.set_vec(&mut ds, lay.v(), &acc);
            lay.set_vec(&mut ds, lay.tau_f(), &((&tau_ - &tau_f_) * beta));
            lay.set_mat(&mut ds, lay.y_df(), &((y_d_ - &y_df_) * beta));
            // Companion filters for the independent disturbance oracle.
            let u_ = OmegaOracle::u(plant, &q_, &v_, &tp.q, &tp.v)?;
            let w_ = OmegaOracle::w(plant, &q_, &v_, &tp.q, &tp.v)?;
            let a_ = lay.vec(state, lay.oracle_a(), n);
            let b_ = lay.vec(state, lay.oracle_b(), n);
            lay.set_vec(&mut ds, lay.oracle_a(), &((&u_ - &a_) * beta));
            lay.set_vec(&mut ds, lay.oracle_b(), &((&w_ - &b_) * beta));
            Ok((ds, tau_))
        };

        let dt = cfg.dt;
        let mid = stage_data(t + dt / 2.0)?;
        let next = stage_data(t + dt)?;
        let (k1, _) = deriv(&s, &cur)?;
        let (k2, tau_mid_a) = deriv(&(&s + &k1 * (dt / 2.0)), &mid)?;
        let (k3, tau_mid_b) = deriv(&(&s + &k2 * (dt / 2.0)), &mid)?;
        let (k4, _) = deriv(&(&s + &k3 * dt), &next)?;
        // Feed the quadrature shadow at the step midpoint as well: the mean
        // of the two midpoint-stage torques matches tau(t + dt/2) to third
        // order, which halves the shadow grid without extra control
        // evaluations.
        quad.push(&((tau_mid_a + tau_mid_b) * 0.5), &mid.y_d, dt / 2.0);
        s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        cur = next;

        if !s.iter().all(|x| x.is_finite()) || lay.vec(&s, lay.q(), n).norm() > 1e3 {
            return Err(Error::Divergence {
                t,
                msg: "state left the finite operating region".into(),
            });
        }
    }

    Ok((SimTrace { columns, rows }, mon))
}

/// Open-loop integration of the bare plant under a caller-supplied torque
/// law evaluated continuously, including inside RK4 stages. This path has a
/// smooth right-hand side, so it is the one certified for 4th-order
/// convergence; it also backs the energy-dissipation check. The observer
/// is called with (t, q, qdot) at every step boundary including the last.
pub fn run_open_loop(
    plant: &dyn Plant,
    tau_fn: TorqueFn<'_>,
    q0: &DVector<f64>,
    v0: &DVector<f64>,
    dt: f64,
    duration: f64,
    observer: StepObserver<'_>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let mut q = q0.clone();
    let mut v = v0.clone();
    let steps = (duration / dt).round() as usize;
    let deriv = |q_: &DVector<f64>,
                 v_: &DVector<f64>,
                 t: f64|
     -> Result<(DVector<f64>, DVector<f64>)> {
        let tau = tau_fn(t, q_, v_);
        Ok((v_.clone(), plant.forward_dynamics(q_, v_, &tau)?))
    };
    for i in 0..steps {
        let t = i as f64 * dt;
        observer(t, &q, &v);
        let (k1q, k1v) = deriv(&q, &v, t)?;
        let (k2q, k2v) = deriv(
            &(&q + &k1q * (dt / 2.0)),
            &(&v + &k1v * (dt / 2.0)),
            t + dt / 2.0,
        )?;
        let (k3q, k3v) = deriv(
            &(&q + &k2q * (dt / 2.0)),
            &(&v + &k2v * (dt / 2.0)),
            t + dt / 2.0,
        )?;
        let (k4q, k4v) = deriv(&(&q + &k3q * dt), &(&v + &k3v * dt), t + dt)?;
        q += (k1q + k2q * 2.0 + k3q * 2.0 + k4q) * (dt / 6.0);
        v += (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (dt / 6.0);
        if !q.iter().chain(v.iter()).all(|x| x.is_finite()) {
            return Err(Error::Divergence {
                t,
                msg: "open-loop state became non-finite".into(),
            });
        }
    }
    observer(steps as f64 * dt, &q, &v);
    Ok((q, v))
}
