//! Concurrent-learning memory stack.
//!
//! The stack holds N pairs `(𝒴_i, 𝒰_i)` with `𝒴_i = Y_df(t_i)` precomputed
//! offline along the *desired* trajectory and `𝒰_i = τ_f(t_i)` recorded
//! online as the run passes each `t_i`. Parameter convergence then needs
//! only `λ_min(Σ 𝒴ᵢᵀ𝒴ᵢ) > 0`, certified before the run starts — no
//! persistent-excitation monitoring exists anywhere.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::Plant;
use crate::error::{Error, Result};
use crate::filtering::FilterState;
use crate::trajectory::DesiredTrajectory;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackConfig {
    /// Number of recorded pairs N.
    pub size: usize,
    /// Offline selection horizon [s].
    pub horizon: f64,
    /// Candidate grid step as a multiple of dt.
    pub grid_factor: usize,
    /// Earliest admissible sample time [s]. Samples are only taken after
    /// the closed-loop transient has settled, so the recorded τ_f(t_i) are
    /// clean; early samples would freeze transient residue into the
    /// estimator as a permanent bias.
    pub record_after: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            size: 20,
            horizon: 20.0,
            grid_factor: 10,
            record_after: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StackEntry {
    pub t: f64,
    /// Precomputed Y_df(t_i).
    pub y: DMatrix<f64>,
    /// Recorded τ_f(t_i); `None` until the run passes t_i. Unrecorded
    /// entries contribute zero to the update sums.
    pub u: Option<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct MemoryStack {
    pub entries: Vec<StackEntry>,
    /// λ_min of the full Gram sum Σ 𝒴ᵢᵀ𝒴ᵢ (all N entries).
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Certified bound on ‖Y_df(t)‖ over the candidate horizon.
    pub lambda_d: f64,
    /// Gram sum over *recorded* entries, Σ 𝒴ᵢᵀ𝒴ᵢ.
    recorded_gram: DMatrix<f64>,
    /// Σ 𝒴ᵢᵀ𝒰ᵢ over recorded entries.
    recorded_rhs: DVector<f64>,
}

impl MemoryStack {
    /// Builds the stack offline: integrates `Ẏ_df = β (Y_d − Y_df)` along
    /// the desired trajectory with RK4 at step `dt`, collects candidates on
    /// a uniform grid of step `grid_factor · dt` starting at
    /// `record_after`, and greedily picks `size` samples maximizing the
    /// minimum eigenvalue of the running Gram sum (ties broken by trace, so
    /// weak samples are never picked). Deterministic.
    pub fn build_offline(
        plant: &dyn Plant,
        traj: &DesiredTrajectory,
        beta: f64,
        cfg: &StackConfig,
        dt: f64,
    ) -> Result<Self> {
        let n = plant.dof();
        let p = plant.param_dim();
        if cfg.size < p {
            return Err(Error::Config(format!(
                "stack.size = {} must be at least the parameter dimension {p}",
                cfg.size
            )));
        }
        if cfg.horizon <= cfg.record_after {
            return Err(Error::Config(
                "stack.horizon must exceed stack.record_after".into(),
            ));
        }
        if dt <= 0.0 || cfg.grid_factor == 0 {
            return Err(Error::Config("stack grid requires dt > 0 and grid_factor >= 1".into()));
        }

        // Integrate the regressor filter along the desired trajectory.
        let steps = (cfg.horizon / dt).round() as usize;
        let mut y_df = DMatrix::zeros(n, p);
        let mut candidates: Vec<(f64, DMatrix<f64>)> = Vec::new();
        let mut lambda_d: f64 = 0.0;
        let deriv = |y: &DMatrix<f64>, t: f64| -> Result<DMatrix<f64>> {
            let (q, v, a) = traj.eval(t)?;
            Ok((plant.regressor(&q, &v, &a)? - y) * beta)
        };
        for i in 0..=steps {
            let t = i as f64 * dt;
            if i % cfg.grid_factor == 0 {
                lambda_d = lambda_d.max(crate::dynamics::spectral_norm(&y_df));
                if t >= cfg.record_after {
                    candidates.push((t, y_df.clone()));
                }
            }
            let k1 = deriv(&y_df, t)?;
            let k2 = deriv(&(&y_df + &k1 * (dt / 2.0)), t + dt / 2.0)?;
            let k3 = deriv(&(&y_df + &k2 * (dt / 2.0)), t + dt / 2.0)?;
            let k4 = deriv(&(&y_df + &k3 * dt), t + dt)?;
            y_df += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        }
        lambda_d *= 1.05;
        if candidates.len() < cfg.size {
            return Err(Error::Config(format!(
                "stack horizon admits only {} candidates for size {}",
                candidates.len(),
                cfg.size
            )));
        }

        // Greedy selection maximizing λ_min of the Gram sum.
        let mut gram = DMatrix::zeros(p, p);
        let mut chosen: Vec<usize> = Vec::with_capacity(cfg.size);
        let mut available: Vec<usize> = (0..candidates.len()).collect();
        for _ in 0..cfg.size {
            let mut best = None;
            let mut best_lam = f64::NEG_INFINITY;
            let mut best_tr = f64::NEG_INFINITY;
            for (slot, &ci) in available.iter().enumerate() {
                let y = &candidates[ci].1;
                let g = &gram + y.transpose() * y;
                let lam = g.symmetric_eigenvalues().min();
                let tr = g.trace();
                if lam > best_lam + 1e-12 || (lam > best_lam - 1e-12 && tr > best_tr + 1e-12) {
                    best_lam = lam;
                    best_tr = tr;
                    best = Some(slot);
                }
            }
            let slot = best.expect("candidate list nonempty");
            let ci = available.swap_remove(slot);
            let y = &candidates[ci].1;
            gram += y.transpose() * y;
            chosen.push(ci);
        }
        chosen.sort_unstable();

        let eig = gram.symmetric_eigenvalues();
        let lambda_min = eig.min();
        let lambda_max = eig.max();
        if lambda_min <= 1e-6 {
            return Err(Error::InsufficientExcitation(format!(
                "memory-stack Gram sum has λ_min = {lambda_min:.3e} <= 1e-6; \
                 enrich the desired trajectory (distinct nonzero amplitudes/frequencies)"
            )));
        }

        let entries = chosen
            .into_iter()
            .map(|ci| StackEntry {
                t: candidates[ci].0,
                y: candidates[ci].1.clone(),
                u: None,
            })
            .collect();
        Ok(Self {
            entries,
            lambda_min,
            lambda_max,
            lambda_d,
            recorded_gram: DMatrix::zeros(p, p),
            recorded_rhs: DVector::zeros(p),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn recorded_count(&self) -> usize {
        self.entries.iter().filter(|e| e.u.is_some()).count()
    }

    /// Time of the next unrecorded entry, if any.
    pub fn next_record_time(&self) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.u.is_none())
            .map(|e| e.t)
            .fold(None, |acc, t| Some(acc.map_or(t, |a: f64| a.min(t))))
    }

    /// Records `𝒰_i = τ_f` for every entry whose `t_i` matches `t` within
    /// `dt/2`. Returns how many entries were recorded. Recording the same
    /// entry twice is a state error.
    pub fn record_online(&mut self, filter: &FilterState, t: f64, dt: f64) -> Result<usize> {
        let mut recorded = 0;
        for i in 0..self.entries.len() {
            if (self.entries[i].t - t).abs() <= dt / 2.0 {
                if self.entries[i].u.is_some() {
                    return Err(Error::State(format!(
                        "stack entry at t_i = {} already recorded",
                        self.entries[i].t
                    )));
                }
                let y = self.entries[i].y.clone();
                self.recorded_gram += y.transpose() * &y;
                self.recorded_rhs += y.transpose() * &filter.tau_f;
                self.entries[i].u = Some(filter.tau_f.clone());
                recorded += 1;
            }
        }
        Ok(recorded)
    }

    /// Oracle fill (tests only): sets every `𝒰_i = 𝒴_i θ`, the exact
    /// measurement a perfectly tracking, perfectly estimated run would
    /// record.
    pub fn oracle_fill(&mut self, theta: &DVector<f64>) {
        let p = theta.len();
        self.recorded_gram = DMatrix::zeros(p, p);
        self.recorded_rhs = DVector::zeros(p);
        for e in &mut self.entries {
            let u = &e.y * theta;
            self.recorded_gram += e.y.transpose() * &e.y;
            self.recorded_rhs += e.y.transpose() * &u;
            e.u = Some(u);
        }
    }

    /// The concurrent-learning sum `Σᵢ 𝒴ᵢᵀ(𝒰ᵢ − 𝒴ᵢ θ̂)` over recorded
    /// entries (empty sum = 0), maintained incrementally as
    /// `Σ𝒴ᵀ𝒰 − (Σ𝒴ᵀ𝒴) θ̂`.
    pub fn cl_sum(&self, theta_hat: &DVector<f64>) -> DVector<f64> {
        &self.recorded_rhs - &self.recorded_gram * theta_hat
    }

    /// Gram sum over all N entries (recorded or not).
    pub fn full_gram(&self) -> DMatrix<f64> {
        let p = self.recorded_gram.nrows();
        let mut g = DMatrix::zeros(p, p);
        for e in &self.entries {
            g += e.y.transpose() * &e.y;
        }
        g
    }

    /// Gram sum over recorded entries.
    pub fn recorded_gram(&self) -> &DMatrix<f64> {
        &self.recorded_gram
    }

    /// Audit export: one row per entry, `t_i, vec(𝒴_i) (column-major), 𝒰_i`.
    pub fn export_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        let n = self.entries.first().map_or(0, |e| e.y.nrows());
        let p = self.entries.first().map_or(0, |e| e.y.ncols());
        let mut header = vec!["t_i".to_string()];
        for c in 0..p {
            for r in 0..n {
                header.push(format!("Y_{r}{c}"));
            }
        }
        for r in 0..n {
            header.push(format!("U_{r}"));
        }
        w.write_record(&header).map_err(io_err)?;
        for e in &self.entries {
            let mut row = vec![format!("{:.17e}", e.t)];
            row.extend(e.y.iter().map(|v| format!("{v:.17e}")));
            match &e.u {
                Some(u) => row.extend(u.iter().map(|v| format!("{v:.17e}"))),
                None => row.extend(std::iter::repeat_n(String::new(), n)),
            }
            w.write_record(&row).map_err(io_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn io_err(e: csv::Error) -> Error {
    Error::State(format!("csv write: {e}"))
}
