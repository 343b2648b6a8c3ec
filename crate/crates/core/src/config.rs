//! Sectioned TOML run configuration. Every key has a default, so an empty
//! file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::BoundsConfig;
use crate::controllers::LawKind;
use crate::error::{Error, Result};
use crate::gp_model::FitOptions;
use crate::lyapunov::{build_design_weighted, LyapunovDesign};
use crate::rr_dynamics::ManipulatorParams;
use crate::sim::SimSettings;
use crate::trajectory::TrajectoryConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub kp: f64,
    pub kd: f64,
    pub eps: f64,
    pub eps1: f64,
    /// Weight of the position-error block of `P`.
    pub p_e: f64,
    /// Weight of the velocity-error block of `P`.
    pub p_ed: f64,
    /// Law used by `simulate`.
    pub law: LawKind,
    /// Growth rate used by `simulate`.
    pub k_rho: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kp: 100.0,
            kd: 20.0,
            eps: 0.5,
            eps1: 0.01,
            p_e: 1.0,
            p_ed: 1.0,
            law: LawKind::Basic,
            k_rho: 1000.0,
        }
    }
}

impl ControllerConfig {
    pub fn design(&self) -> Result<LyapunovDesign> {
        build_design_weighted(self.kp, self.kd, self.eps, self.eps1, self.p_e, self.p_ed).map_err(|e| match e {
            Error::InvalidConfig { key, reason } => Error::InvalidConfig {
                key: format!("controller.{key}"),
                reason,
            },
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    pub relative_scale: f64,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            relative_scale: 0.1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    /// Seed of the trajectory the dataset is sampled along; the amplitude and
    /// frequency range follow `[trajectory]`.
    pub dataset_seed: u64,
    pub duration: f64,
    pub sample_rate: f64,
    /// Existing dataset to train on instead of generating one.
    pub dataset: Option<PathBuf>,
    /// Existing hyperparameter file; skips the optimization when set.
    pub hyperparams: Option<PathBuf>,
    pub fit: FitOptions,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            dataset_seed: 8,
            duration: 50.0,
            sample_rate: 1.0,
            dataset: None,
            hyperparams: None,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub k_rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Exact,
    Perturbed,
    Gp,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(ModelKind::Exact),
            "perturbed" => Ok(ModelKind::Perturbed),
            "gp" => Ok(ModelKind::Gp),
            other => Err(Error::config("simulate.model", format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub model: ModelKind,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            model: ModelKind::Perturbed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub plant: ManipulatorParams,
    pub trajectory: TrajectoryConfig,
    pub controller: ControllerConfig,
    pub sim: SimSettings,
    pub bounds: BoundsConfig,
    pub perturbation: PerturbationConfig,
    pub gp: GpConfig,
    pub experiment1: ExperimentSection,
    pub experiment2: ExperimentSection,
    pub simulate: SimulateSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            plant: ManipulatorParams::table1(),
            trajectory: TrajectoryConfig::default(),
            controller: ControllerConfig::default(),
            sim: SimSettings::default(),
            bounds: BoundsConfig::default(),
            perturbation: PerturbationConfig::default(),
            gp: GpConfig::default(),
            experiment1: ExperimentSection { k_rho: 1000.0 },
            experiment2: ExperimentSection { k_rho: 500.0 },
            simulate: SimulateSection::default(),
        }
    }
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig { key, reason } if !key.contains('.') => Error::InvalidConfig {
            key: format!("{section}.{key}"),
            reason,
        },
        other => other,
    }
}

impl Config {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::ConfigParse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.trajectory.validate().map_err(|e| prefixed("trajectory", e))?;
        self.controller.design()?;
        if !(self.controller.k_rho >= 0.0 && self.controller.k_rho.is_finite()) {
            return Err(Error::config("controller.k_rho", "must be finite and non-negative"));
        }
        self.sim.validate()?;
        self.bounds.validate()?;
        if !(0.0..1.0).contains(&self.perturbation.relative_scale) {
            return Err(Error::config("perturbation.relative_scale", "must lie in [0, 1)"));
        }
        if !(self.gp.duration > 0.0 && self.gp.sample_rate > 0.0) {
            return Err(Error::config("gp.duration", "duration and sample_rate must be > 0"));
        }
        if self.gp.fit.starts == 0 || self.gp.fit.max_iter == 0 {
            return Err(Error::config("gp.fit", "starts and max_iter must be at least 1"));
        }
        for (key, v) in [
            ("experiment1.k_rho", self.experiment1.k_rho),
            ("experiment2.k_rho", self.experiment2.k_rho),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn perturbed_model(&self) -> Result<ManipulatorParams> {
        crate::rr_dynamics::perturb_params(&self.plant, self.perturbation.relative_scale, self.perturbation.seed)
    }

    pub fn dataset_trajectory(&self) -> TrajectoryConfig {
        TrajectoryConfig {
            seed: self.gp.dataset_seed,
            ..self.trajectory.clone()
        }
    }
}
