//! Scenario files: TOML in, fully validated run inputs out.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::controllers::{ControllerKind, FsfbGains, OfbGains};
use crate::dynamics::TwoLinkParams;
use crate::error::{Error, Result};
use crate::filtering::FilterConfig;
use crate::simulator::{Gains, SimConfig};
use crate::stack::StackConfig;
use crate::trajectory::DesiredTrajectory;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub plant: TwoLinkParams,
    #[serde(default)]
    pub trajectory: DesiredTrajectory,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub stack: StackConfig,
    pub controller: ControllerSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub kind: ControllerKind,
    #[serde(default)]
    pub fsfb: Option<FsfbSection>,
    #[serde(default)]
    pub ofb_grad: Option<OfbSection>,
    #[serde(default)]
    pub ofb_comp: Option<OfbSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FsfbSection {
    pub alpha: f64,
    pub kp: Vec<f64>,
    pub kr: Vec<f64>,
    pub gamma: Vec<f64>,
    pub k_theta: f64,
    pub k_n1: f64,
    pub k_n2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfbSection {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub ks: Vec<f64>,
    /// Γ diagonal (gradient variant) or P(0) diagonal (composite variant).
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub p0: Vec<f64>,
    pub k_theta: f64,
    pub k_n2: f64,
    pub k_n3: f64,
    #[serde(default)]
    pub k_n4: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub duration: f64,
    pub theta_hat0: Vec<f64>,
    pub q0: Vec<f64>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            duration: 30.0,
            theta_hat0: vec![],
            q0: vec![],
            seed: 0,
            log_every: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Artifact directory; created if missing. Empty = current directory.
    pub dir: String,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let sc: Scenario = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory.validate()?;
        match self.controller.kind {
            ControllerKind::Fsfb => {
                if self.controller.fsfb.is_none() {
                    return Err(Error::Config(
                        "controller.kind = \"fsfb\" requires a [controller.fsfb] table".into(),
                    ));
                }
            }
            ControllerKind::OfbGrad => {
                if self.controller.ofb_grad.is_none() {
                    return Err(Error::Config(
                        "controller.kind = \"ofb_grad\" requires a [controller.ofb_grad] table"
                            .into(),
                    ));
                }
            }
            ControllerKind::OfbComp => {
                if self.controller.ofb_comp.is_none() {
                    return Err(Error::Config(
                        "controller.kind = \"ofb_comp\" requires a [controller.ofb_comp] table"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Assembles the gain struct for the configured controller. The
    /// surrogate gain k of the output-feedback laws is computed later by
    /// the gain-condition check; it starts at zero here.
    pub fn gains(&self) -> Result<Gains> {
        let dv = |v: &Vec<f64>| DVector::from_vec(v.clone());
        match self.controller.kind {
            ControllerKind::Fsfb => {
                let c = self.controller.fsfb.as_ref().unwrap();
                let g = FsfbGains {
                    alpha: c.alpha,
                    kp: dv(&c.kp),
                    kr: dv(&c.kr),
                    gamma: dv(&c.gamma),
                    k_theta: c.k_theta,
                    k_n1: c.k_n1,
                    k_n2: c.k_n2,
                };
                Ok(Gains::Fsfb(g))
            }
            kind => {
                let c = match kind {
                    ControllerKind::OfbGrad => self.controller.ofb_grad.as_ref().unwrap(),
                    _ => self.controller.ofb_comp.as_ref().unwrap(),
                };
                if kind == ControllerKind::OfbGrad && c.gamma.is_empty() {
                    return Err(Error::Config("ofb_grad requires gamma".into()));
                }
                if kind == ControllerKind::OfbComp && c.p0.is_empty() {
                    return Err(Error::Config("ofb_comp requires p0".into()));
                }
                if kind == ControllerKind::OfbComp && c.k_n4 <= 0.0 {
                    return Err(Error::Config("ofb_comp requires k_n4 > 0".into()));
                }
                let dim = if c.gamma.is_empty() { c.p0.len() } else { c.gamma.len() };
                let g = OfbGains {
                    alpha1: c.alpha1,
                    alpha2: c.alpha2,
                    alpha3: c.alpha3,
                    ks: dv(&c.ks),
                    gamma: if c.gamma.is_empty() {
                        DVector::zeros(dim)
                    } else {
                        dv(&c.gamma)
                    },
                    p0: if c.p0.is_empty() {
                        DVector::zeros(dim)
                    } else {
                        dv(&c.p0)
                    },
                    k_theta: c.k_theta,
                    k_n2: c.k_n2,
                    k_n3: c.k_n3,
                    k_n4: c.k_n4,
                    k: 0.0,
                };
                Ok(Gains::Ofb(kind, g))
            }
        }
    }

    /// Fills trajectory-relative defaults: q0 defaults to the desired start
    /// position, theta_hat0 to zero.
    pub fn sim_config(&self, dof: usize, param_dim: usize) -> Result<SimConfig> {
        let q0 = if self.sim.q0.is_empty() {
            self.trajectory.eval_full(0.0)?.q
        } else {
            DVector::from_vec(self.sim.q0.clone())
        };
        let theta_hat0 = if self.sim.theta_hat0.is_empty() {
            DVector::zeros(param_dim)
        } else {
            DVector::from_vec(self.sim.theta_hat0.clone())
        };
        if q0.len() != dof {
            return Err(Error::Config(format!(
                "sim.q0 must have {dof} entries, got {}",
                q0.len()
            )));
        }
        if theta_hat0.len() != param_dim {
            return Err(Error::Config(format!(
                "sim.theta_hat0 must have {param_dim} entries, got {}",
                theta_hat0.len()
            )));
        }
        Ok(SimConfig {
            dt: self.sim.dt,
            duration: self.sim.duration,
            theta_hat0,
            q0,
            seed: self.sim.seed,
            log_every: self.sim.log_every,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        if self.output.dir.is_empty() {
            PathBuf::from(".")
        } else {
            PathBuf::from(&self.output.dir)
        }
    }

    pub fn trajectory(&self) -> &DesiredTrajectory {
        &self.trajectory
    }

    /// True when two scenarios share plant and trajectory (the comparison
    /// precondition).
    pub fn comparable(&self, other: &Scenario) -> bool {
        let a = toml::to_string(&self.plant).ok();
        let b = toml::to_string(&other.plant).ok();
        let ta = toml::to_string(&self.trajectory).ok();
        let tb = toml::to_string(&other.trajectory).ok();
        a == b && ta == tb && a.is_some() && ta.is_some()
    }
}
