//! End-to-end acceptance run: eleven numbered criteria, one pass/fail line
//! each, driven through the same entry point the CLI uses.

mod common;

use cladapt::cli::{run_scenario, Overrides, RunReport};
use cladapt::dynamics::{mass_matrix_rate_fd, Plant};
use cladapt::simulator::run_open_loop;
use cladapt::stack::{MemoryStack, StackConfig};
use cladapt::{analysis, Error};
use common::{max_abs, Sampler};
use nalgebra::DVector;
use std::path::{Path, PathBuf};

struct Tally {
    lines: Vec<(String, bool)>,
}

impl Tally {
    fn record(&mut self, idx: usize, name: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {idx:02} {name}: {verdict} — {detail}");
        self.lines.push((format!("{idx:02} {name}"), pass));
    }
}

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn run(name: &str, out: &Path) -> RunReport {
    let ov = Overrides {
        out: Some(out.join(name.trim_end_matches(".toml"))),
        no_plots: true,
        ..Overrides::default()
    };
    run_scenario(&scenario_dir().join(name), &ov)
        .unwrap_or_else(|e| panic!("{name} failed: {e}"))
}

fn named(r: &RunReport, check: &str) -> bool {
    r.checks
        .iter()
        .find(|c| c.name == check)
        .map(|c| c.pass)
        .unwrap_or(false)
}

#[test]
fn acceptance() {
    let out = std::env::temp_dir().join(format!("cladapt-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&out).unwrap();
    let mut tally = Tally { lines: Vec::new() };

    // Closed-loop runs for the three shipped controllers.
    let fsfb = run("fsfb.toml", &out);
    let grad = run("ofb_grad.toml", &out);
    let comp = run("ofb_comp.toml", &out);
    let all = [&fsfb, &grad, &comp];

    // 1. Structural properties over 10^3 random samples.
    {
        let p = common::plant();
        let mut s = Sampler::new(0xacce);
        let mut skew = 0.0f64;
        let mut switch = 0.0f64;
        for _ in 0..1000 {
            let q = s.vec(2, std::f64::consts::PI);
            let v = s.vec(2, 2.0);
            let xi = s.vec(2, 1.0);
            let m_dot = mass_matrix_rate_fd(&p, &q, &v).unwrap();
            let c = p.coriolis_matrix(&q, &v).unwrap();
            skew = skew.max(xi.dot(&((&m_dot - &c * 2.0) * &xi)).abs());
            let nu = s.vec(2, 2.0);
            let lhs = p.coriolis_matrix(&q, &nu).unwrap() * &xi;
            let rhs = p.coriolis_matrix(&q, &xi).unwrap() * &nu;
            switch = switch.max(max_abs(&(lhs - rhs)));
        }
        tally.record(
            1,
            "structural_properties",
            skew < 1e-10 && switch < 1e-12,
            format!("skew residual {skew:.3e} (<1e-10), switching {switch:.3e} (<1e-12)"),
        );
    }

    // 2. Linear parameterization over 10^3 random samples.
    {
        let p = common::plant();
        let mut s = Sampler::new(0xacc2);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let q = s.vec(2, std::f64::consts::PI);
            let v = s.vec(2, 2.0);
            let a = s.vec(2, 3.0);
            let direct = p.mass_matrix(&q).unwrap() * &a
                + p.coriolis_matrix(&q, &v).unwrap() * &v
                + p.gravity(&q).unwrap()
                + p.friction() * &v;
            worst = worst.max(max_abs(&(p.regressor(&q, &v, &a).unwrap() * p.theta() - direct)));
        }
        tally.record(
            2,
            "linear_parameterization",
            worst < 1e-10,
            format!("worst residual {worst:.3e} (<1e-10)"),
        );
    }

    // 3. Filter equivalence on a full closed-loop run.
    tally.record(
        3,
        "filter_quadrature_equivalence",
        fsfb.monitors.max_filter_quad_rel_err <= 1e-6
            && named(&fsfb, "filter_quadrature_equivalence"),
        format!(
            "relative ODE-vs-trapezoid error {:.3e} (<=1e-6)",
            fsfb.monitors.max_filter_quad_rel_err
        ),
    );

    // 4. Prediction-error identity at every logged step of every scenario.
    {
        let worst = all
            .iter()
            .map(|r| r.monitors.max_eps_identity_residual)
            .fold(0.0f64, f64::max);
        tally.record(
            4,
            "prediction_error_identity",
            worst <= 1e-8,
            format!("worst residual over 3 scenarios {worst:.3e} (<=1e-8)"),
        );
    }

    // 5. Full-state feedback: decay, fits, monotone V, sandwich.
    {
        let m = &fsfb.monitors;
        let fits = fsfb.e_fit.map(|f| f.r_squared > 0.9 && f.rate < 0.0) == Some(true)
            && fsfb.theta_fit.map(|f| f.r_squared > 0.9 && f.rate < 0.0) == Some(true);
        let pass = m.t_e_below_1pct.is_some()
            && m.t_theta_below_1pct.is_some()
            && fits
            && m.max_v_step_increase <= 1e-7
            && m.min_sandwich_lower >= -1e-12
            && m.min_sandwich_upper >= -1e-12;
        tally.record(
            5,
            "fsfb_convergence",
            pass,
            format!(
                "e<1% at {:?}, theta<1% at {:?}, R2 ({:.4}, {:.4}), dV {:.2e}",
                m.t_e_below_1pct,
                m.t_theta_below_1pct,
                fsfb.e_fit.map(|f| f.r_squared).unwrap_or(f64::NAN),
                fsfb.theta_fit.map(|f| f.r_squared).unwrap_or(f64::NAN),
                m.max_v_step_increase
            ),
        );
    }

    // 6. Output-feedback gradient: same criteria, with the control path
    // typed so no velocity can reach it (the view struct carries none; the
    // realization identities are exercised in the controller-law tests).
    {
        let m = &grad.monitors;
        let fits = grad.e_fit.map(|f| f.r_squared > 0.9 && f.rate < 0.0) == Some(true)
            && grad.theta_fit.map(|f| f.r_squared > 0.9 && f.rate < 0.0) == Some(true);
        let pass = m.t_e_below_1pct.is_some()
            && m.t_theta_below_1pct.is_some()
            && fits
            && m.max_v_step_increase <= 1e-7;
        tally.record(
            6,
            "ofb_gradient_convergence",
            pass,
            format!(
                "e<1% at {:?}, theta<1% at {:?}, R2 ({:.4}, {:.4}), velocity-free by construction",
                m.t_e_below_1pct,
                m.t_theta_below_1pct,
                grad.e_fit.map(|f| f.r_squared).unwrap_or(f64::NAN),
                grad.theta_fit.map(|f| f.r_squared).unwrap_or(f64::NAN),
            ),
        );
    }

    // 7. Output-feedback composite: monotone V, decay below 1% (no rate
    // requirement), P SPD throughout, P^{-1} quadrature cross-check.
    {
        let m = &comp.monitors;
        let pass = m.max_v_step_increase <= 1e-7
            && m.t_e_below_1pct.is_some()
            && m.t_theta_below_1pct.is_some()
            && m.p_spd
            && m.max_pinv_quad_rel_err <= 1e-5;
        tally.record(
            7,
            "ofb_composite_convergence",
            pass,
            format!(
                "e<1% at {:?}, theta<1% at {:?}, P spd = {}, P-inverse quadrature {:.3e} (<=1e-5)",
                m.t_e_below_1pct, m.t_theta_below_1pct, m.p_spd, m.max_pinv_quad_rel_err
            ),
        );
    }

    // 8. Perturbation-bound certificates, online and post-hoc, all runs.
    {
        let online = named(&fsfb, "bound_margins_online")
            && named(&grad, "bound_margins_online")
            && named(&comp, "bound_margins_online");
        let posthoc = all.iter().all(|r| r.bound_report.pass);
        let worst = all
            .iter()
            .map(|r| r.bound_report.max_omega_margin.max(r.bound_report.max_shape_margin))
            .fold(f64::NEG_INFINITY, f64::max);
        tally.record(
            8,
            "perturbation_bounds",
            online && posthoc,
            format!("worst margin {worst:.3e} (must stay <= 0)"),
        );
    }

    // 9. Excitation machinery: the constant trajectory is refused up front;
    // the default one is certified offline (before t = 0) and converges
    // with no persistent-excitation monitoring in the loop.
    {
        let refusal = run_scenario(
            &scenario_dir().join("insufficient_excitation.toml"),
            &Overrides {
                out: Some(out.join("insufficient_excitation")),
                no_plots: true,
                ..Overrides::default()
            },
        );
        let refused = matches!(refusal, Err(Error::InsufficientExcitation(_)));
        let pass = refused
            && fsfb.stack_lambda_min > 0.0
            && fsfb.monitors.t_theta_below_1pct.is_some();
        tally.record(
            9,
            "excitation_machinery",
            pass,
            format!(
                "constant trajectory refused = {refused}, offline lambda_min = {:.4}, convergence without excitation monitoring",
                fsfb.stack_lambda_min
            ),
        );
    }

    // 10. Reduced-estimator oracle: with tracking terms forced to zero the
    // learning ODE is linear; RK4 must match the matrix exponential.
    {
        let plant = common::plant();
        let cfg = StackConfig {
            size: 20,
            horizon: 9.0,
            grid_factor: 10,
            record_after: 5.0,
        };
        let mut stack =
            MemoryStack::build_offline(&plant, &common::traj(), 1.0, &cfg, 1e-3).unwrap();
        stack.oracle_fill(plant.theta());
        let gram = stack.full_gram();
        let gamma = DVector::from_element(5, 1.2e4);
        let k_theta = 1.4632e-5;
        let v0 = plant.theta().clone();
        let dt = 1e-3;
        let t_end = 10.0;
        let mut v = v0.clone();
        let rhs =
            |x: &DVector<f64>| -> DVector<f64> { -(&gram * x).component_mul(&gamma) * k_theta };
        for _ in 0..(t_end / dt) as usize {
            let k1 = rhs(&v);
            let k2 = rhs(&(&v + &k1 * (dt / 2.0)));
            let k3 = rhs(&(&v + &k2 * (dt / 2.0)));
            let k4 = rhs(&(&v + &k3 * dt));
            v += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        }
        let direct = analysis::estimator_matrix_exp(&gamma, &gram, k_theta, t_end, &v0);
        let rel = (&direct - &v).norm() / v.norm();
        tally.record(
            10,
            "estimator_matrix_exponential",
            rel <= 1e-4,
            format!("relative deviation {rel:.3e} (<=1e-4)"),
        );
    }

    // 11. Integrator order by Richardson extrapolation.
    {
        let plant = common::plant();
        let q0 = DVector::from_vec(vec![-1.2, 0.4]);
        let v0 = DVector::zeros(2);
        let tau_fn = |t: f64, _: &DVector<f64>, _: &DVector<f64>| {
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
        let ratio = (&finals[0] - &finals[1]).norm() / (&finals[1] - &finals[2]).norm();
        tally.record(
            11,
            "integrator_order",
            (8.0..=32.0).contains(&ratio),
            format!("Richardson ratio {ratio:.2} (in [8, 32], nominal 16)"),
        );
    }

    let failed: Vec<&str> = tally
        .lines
        .iter()
        .filter(|(_, p)| !p)
        .map(|(n, _)| n.as_str())
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
