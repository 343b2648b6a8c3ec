//! Experiment harness behind the CLI subcommands. Each command writes its
//! artifacts under an output directory and returns a summary computed from
//! replay-checked logs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bounds::{rho_static_with_norm, UncertaintyBounds};
use crate::config::{Config, ModelKind};
use crate::controllers::{DynamicsModel, LawKind, RobustLaw};
use crate::error::{Error, Result};
use crate::gp_model::{self, GpDataset, GpDynamics, GpJointModel, RbfHyperparams};
use crate::lyapunov::LyapunovDesign;
use crate::rr_dynamics::ManipulatorParams;
use crate::sim::{replay_mismatch, run, SimConfig, SimLog};
use crate::trajectory::Trajectory;

/// Fraction of the run, counted from the end, used for post-transient RMS.
pub const POST_TRANSIENT_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub law: LawKind,
    pub k_rho: f64,
    pub rms_error: f64,
    pub max_error: f64,
    pub terminal_rho: f64,
    pub peak_torque: f64,
    pub torque_variation: f64,
    pub csv: PathBuf,
}

impl RunSummary {
    pub fn from_log(label: &str, law: LawKind, k_rho: f64, log: &SimLog, csv: PathBuf) -> Self {
        Self {
            label: label.to_owned(),
            law,
            k_rho,
            rms_error: log.rms_error(POST_TRANSIENT_FRACTION),
            max_error: log.max_error(),
            terminal_rho: log.terminal_rho(),
            peak_torque: log.peak_torque(),
            torque_variation: log.torque_variation(),
            csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub runs: Vec<RunSummary>,
    pub bounds: Option<UncertaintyBounds>,
    pub warnings: Vec<String>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn run(&self, label: &str) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.label == label)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.name);
        let _ = writeln!(
            s,
            "post-transient window: final {:.0}% of the run",
            POST_TRANSIENT_FRACTION * 100.0
        );
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{:<8} law={:<8} k_rho={:<6} rms={:.6e} max={:.6e} rho_end={:.6} peak_tau={:.6} tau_variation={:.6} log={}",
                r.label,
                r.law,
                r.k_rho,
                r.rms_error,
                r.max_error,
                r.terminal_rho,
                r.peak_torque,
                r.torque_variation,
                r.csv.display()
            );
        }
        if let Some(b) = &self.bounds {
            let _ = writeln!(
                s,
                "bounds: alpha={:.6} phi={:.6} q_m={:.6} m_min={:.6} m_max={:.6}",
                b.alpha, b.phi, b.q_m, b.m_min, b.m_max
            );
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "experiment",
            "label",
            "law",
            "k_rho",
            "rms_error",
            "max_error",
            "terminal_rho",
            "peak_torque",
            "torque_variation",
            "log",
        ])?;
        for r in &self.runs {
            w.write_record([
                self.name.clone(),
                r.label.clone(),
                r.law.to_string(),
                r.k_rho.to_string(),
                r.rms_error.to_string(),
                r.max_error.to_string(),
                r.terminal_rho.to_string(),
                r.peak_torque.to_string(),
                r.torque_variation.to_string(),
                r.csv.display().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        write_file(&out.join("report.txt"), &self.to_text())?;
        let path = out.join("report.csv");
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.write_csv(f)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    label: &'a str,
    model: &'a str,
    law: LawKind,
    k_rho: f64,
    kp: f64,
    kd: f64,
    eps: f64,
    eps1: f64,
    p_e: f64,
    p_ed: f64,
    duration: f64,
    step: f64,
    substeps: usize,
    trajectory_seed: u64,
    box_violations: usize,
}

/// One controller of a paired comparison.
#[derive(Debug, Clone, Copy)]
pub struct RunSpec<'a> {
    pub label: &'a str,
    pub law: RobustLaw,
    pub k_rho: f64,
}

/// Shared inputs of a run: plant, model, design and reference.
pub struct Setup<'a> {
    pub config: &'a Config,
    pub plant: ManipulatorParams,
    pub model: &'a dyn DynamicsModel,
    pub model_name: &'a str,
    pub design: LyapunovDesign,
    pub trajectory: Trajectory,
}

impl<'a> Setup<'a> {
    pub fn new(config: &'a Config, model: &'a dyn DynamicsModel, model_name: &'a str) -> Result<Self> {
        Ok(Self {
            config,
            plant: config.plant,
            model,
            model_name,
            design: config.controller.design()?,
            trajectory: Trajectory::from_config(&config.trajectory)?,
        })
    }

    pub fn sim_config(&self, spec: &RunSpec<'_>) -> SimConfig<'_> {
        SimConfig {
            plant: &self.plant,
            model: self.model,
            design: &self.design,
            trajectory: &self.trajectory,
            law: spec.law,
            k_rho: spec.k_rho,
            settings: self.config.sim,
            monitor_box: Some(self.config.bounds.state_box),
        }
    }

    /// Runs, replay-checks and persists one controller.
    pub fn execute(&self, spec: &RunSpec<'_>, out: &Path) -> Result<(SimLog, RunSummary)> {
        let cfg = self.sim_config(spec);
        let log = run(&cfg)?;
        if let Some((row, field)) = replay_mismatch(&log, &cfg) {
            return Err(Error::Regression(format!(
                "{} log does not replay: field `{field}` at row {row}",
                spec.label
            )));
        }
        let csv = out.join(format!("{}.csv", spec.label));
        log.save(&csv)?;
        let c = &self.config.controller;
        let meta = RunMetadata {
            label: spec.label,
            model: self.model_name,
            law: spec.law.kind(),
            k_rho: spec.k_rho,
            kp: c.kp,
            kd: c.kd,
            eps: c.eps,
            eps1: c.eps1,
            p_e: c.p_e,
            p_ed: c.p_ed,
            duration: self.config.sim.duration,
            step: self.config.sim.step,
            substeps: self.config.sim.substeps,
            trajectory_seed: self.config.trajectory.seed,
            box_violations: log.box_violations,
        };
        let meta_text = toml::to_string(&meta).expect("metadata always serializes");
        write_file(&out.join(format!("{}.meta.toml", spec.label)), &meta_text)?;
        let summary = RunSummary::from_log(spec.label, spec.law.kind(), spec.k_rho, &log, csv);
        Ok((log, summary))
    }

    /// Runs two controllers concurrently.
    pub fn execute_pair(&self, a: &RunSpec<'_>, b: &RunSpec<'_>, out: &Path) -> Result<[(SimLog, RunSummary); 2]> {
        let (ra, rb) = rayon::join(|| self.execute(a, out), || self.execute(b, out));
        Ok([ra?, rb?])
    }
}

fn box_warnings(label: &str, log: &SimLog) -> Option<String> {
    (log.box_violations > 0).then(|| {
        format!(
            "{label}: {} logged states left the bounds box; the static bounds do not cover them",
            log.box_violations
        )
    })
}

fn stagnation_warning(label: &str, log: &SimLog, config: &Config) -> Option<String> {
    let c = &config.controller;
    log.stagnates_outside_layer(c.eps, c.eps1, POST_TRANSIENT_FRACTION)
        .then(|| format!("{label}: ‖z‖ stayed above eps with |V̇| < eps1 over the final part of the run"))
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub logs: Vec<SimLog>,
}

pub fn experiment1_specs(config: &Config, bounds: UncertaintyBounds) -> [RunSpec<'static>; 2] {
    [
        RunSpec {
            label: "rfbl",
            law: RobustLaw::Static {
                bounds,
                offset: config.bounds.offset,
            },
            k_rho: 0.0,
        },
        RunSpec {
            label: "arfbl",
            law: RobustLaw::Basic,
            k_rho: config.experiment1.k_rho,
        },
    ]
}

/// Bound-based robust control against the adaptive law on the perturbed
/// nominal model.
pub fn experiment1(config: &Config, out: &Path) -> Result<ExperimentOutcome> {
    config.validate()?;
    ensure_dir(out)?;
    let hat = config.perturbed_model()?;
    let setup = Setup::new(config, &hat, "perturbed")?;
    let bounds = UncertaintyBounds::compute(&config.plant, &hat, &setup.trajectory, &config.bounds)?;
    write_file(&out.join("bounds.toml"), &bounds_toml(&bounds, &setup.design, config))?;
    let [rfbl, arfbl] = experiment1_specs(config, bounds);
    let [(rlog, rsum), (alog, asum)] = setup.execute_pair(&rfbl, &arfbl, out)?;

    let mut warnings: Vec<String> = [
        box_warnings("rfbl", &rlog),
        box_warnings("arfbl", &alog),
        stagnation_warning("arfbl", &alog, config),
    ]
    .into_iter()
    .flatten()
    .collect();
    let violations = rlog
        .rows
        .iter()
        .filter(|r| {
            rho_static_with_norm(&bounds, setup.design.k_norm(), r.xi_norm(), config.bounds.offset)
                .is_ok_and(|rho| r.eta.norm() >= rho)
        })
        .count();
    if violations > 0 {
        warnings.push(format!("rfbl: ‖η‖ reached the static ρ at {violations} logged steps"));
    }
    let rho_lo = rlog.rows.iter().map(|r| r.rho).fold(f64::INFINITY, f64::min);
    let rho_hi = rlog.rows.iter().map(|r| r.rho).fold(0.0, f64::max);
    let notes = vec![
        format!("rfbl reference rho trace spans [{rho_lo:.6}, {rho_hi:.6}] (column `rho` of rfbl.csv)"),
        format!(
            "arfbl terminal rho {:.6} vs rfbl terminal rho {:.6}",
            asum.terminal_rho, rsum.terminal_rho
        ),
    ];
    let report = ExperimentReport {
        name: "experiment1".into(),
        runs: vec![rsum, asum],
        bounds: Some(bounds),
        warnings,
        notes,
    };
    report.save(out)?;
    Ok(ExperimentOutcome {
        report,
        logs: vec![rlog, alog],
    })
}

fn bounds_toml(bounds: &UncertaintyBounds, design: &LyapunovDesign, config: &Config) -> String {
    #[derive(Serialize)]
    struct BoundsFile<'a> {
        bounds: &'a UncertaintyBounds,
        k_norm: f64,
        offset: f64,
        rho_at_zero_error: f64,
        rho_at_box_edge: f64,
    }
    let off = config.bounds.offset;
    let k = design.k_norm();
    let file = BoundsFile {
        bounds,
        k_norm: k,
        offset: off,
        rho_at_zero_error: rho_static_with_norm(bounds, k, 0.0, off).unwrap_or(f64::NAN),
        rho_at_box_edge: rho_static_with_norm(bounds, k, config.bounds.state_box.xi_norm_max, off).unwrap_or(f64::NAN),
    };
    toml::to_string(&file).expect("bounds always serialize")
}

/// Computes the uncertainty bounds of the perturbed model and writes them.
pub fn cmd_bounds(config: &Config, out: &Path) -> Result<UncertaintyBounds> {
    config.validate()?;
    ensure_dir(out)?;
    let hat = config.perturbed_model()?;
    let traj = Trajectory::from_config(&config.trajectory)?;
    let bounds = UncertaintyBounds::compute(&config.plant, &hat, &traj, &config.bounds)?;
    let design = config.controller.design()?;
    write_file(&out.join("bounds.toml"), &bounds_toml(&bounds, &design, config))?;
    Ok(bounds)
}

pub fn cmd_gen_dataset(config: &Config, out: &Path) -> Result<GpDataset> {
    config.validate()?;
    ensure_dir(out)?;
    let traj = Trajectory::from_config(&config.dataset_trajectory())?;
    let ds = gp_model::generate_dataset(&config.plant, &traj, config.gp.duration, config.gp.sample_rate)?;
    ds.save(&out.join("dataset.csv"))?;
    Ok(ds)
}

fn load_or_generate_dataset(config: &Config, out: &Path) -> Result<GpDataset> {
    match &config.gp.dataset {
        Some(path) => GpDataset::load(path),
        None => cmd_gen_dataset(config, out),
    }
}

/// Fits (or loads) the per-joint GPs and writes the hyperparameters.
pub fn cmd_fit_gp(config: &Config, out: &Path) -> Result<[GpJointModel; 2]> {
    config.validate()?;
    ensure_dir(out)?;
    let ds = load_or_generate_dataset(config, out)?;
    let models = match &config.gp.hyperparams {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let [h1, h2] = gp_model::hyperparams_from_str(&text, path)?;
            [
                GpJointModel::new(ds.inputs.clone(), ds.targets[0].clone(), h1)?,
                GpJointModel::new(ds.inputs.clone(), ds.targets[1].clone(), h2)?,
            ]
        }
        None => gp_model::fit(&ds, None, &config.gp.fit)?,
    };
    let hp: [RbfHyperparams; 2] = [models[0].hyperparams.clone(), models[1].hyperparams.clone()];
    write_file(&out.join("hyperparams.toml"), &gp_model::hyperparams_to_string(&hp))?;
    Ok(models)
}

pub fn experiment2_specs(config: &Config) -> [RunSpec<'static>; 2] {
    [
        RunSpec {
            label: "fbl",
            law: RobustLaw::None,
            k_rho: 0.0,
        },
        RunSpec {
            label: "arfbl",
            law: RobustLaw::Basic,
            k_rho: config.experiment2.k_rho,
        },
    ]
}

/// Plain feedback linearization against the adaptive law, both using the
/// GP-derived model.
pub fn experiment2(config: &Config, out: &Path) -> Result<ExperimentOutcome> {
    config.validate()?;
    ensure_dir(out)?;
    let gp = GpDynamics::new(cmd_fit_gp(config, out)?);
    let setup = Setup::new(config, &gp, "gp")?;
    let [fbl, arfbl] = experiment2_specs(config);
    let [(flog, fsum), (alog, asum)] = setup.execute_pair(&fbl, &arfbl, out)?;

    let mut warnings: Vec<String> = [
        box_warnings("fbl", &flog),
        box_warnings("arfbl", &alog),
        stagnation_warning("arfbl", &alog, config),
    ]
    .into_iter()
    .flatten()
    .collect();
    if asum.peak_torque > fsum.peak_torque {
        warnings.push(format!(
            "arfbl peak torque {:.6} exceeds fbl peak torque {:.6}",
            asum.peak_torque, fsum.peak_torque
        ));
    }
    let notes = vec![format!(
        "inertia estimate regularized at {} model evaluations",
        gp.regularization_count()
    )];
    let report = ExperimentReport {
        name: "experiment2".into(),
        runs: vec![fsum, asum],
        bounds: None,
        warnings,
        notes,
    };
    report.save(out)?;
    Ok(ExperimentOutcome {
        report,
        logs: vec![flog, alog],
    })
}

/// Single run with the model and law selected in the configuration.
pub fn cmd_simulate(config: &Config, out: &Path) -> Result<(SimLog, ExperimentReport)> {
    config.validate()?;
    ensure_dir(out)?;
    let law_kind = config.controller.law;
    let perturbed;
    let gp;
    let (model, name): (&dyn DynamicsModel, &str) = match config.simulate.model {
        ModelKind::Exact => (&config.plant, "exact"),
        ModelKind::Perturbed => {
            perturbed = config.perturbed_model()?;
            (&perturbed, "perturbed")
        }
        ModelKind::Gp => {
            gp = GpDynamics::new(cmd_fit_gp(config, out)?);
            (&gp, "gp")
        }
    };
    let setup = Setup::new(config, model, name)?;
    let law = match law_kind {
        LawKind::None => RobustLaw::None,
        LawKind::Basic => RobustLaw::Basic,
        LawKind::Deadband => RobustLaw::Deadband,
        LawKind::Static => {
            let hat = config.perturbed_model()?;
            let nominal: &ManipulatorParams = match config.simulate.model {
                ModelKind::Exact => &config.plant,
                ModelKind::Perturbed => &hat,
                ModelKind::Gp => {
                    return Err(Error::config(
                        "controller.law",
                        "static bounds are only available for parametric models",
                    ))
                }
            };
            let bounds = UncertaintyBounds::compute(&config.plant, nominal, &setup.trajectory, &config.bounds)?;
            RobustLaw::Static {
                bounds,
                offset: config.bounds.offset,
            }
        }
    };
    let k_rho = if law_kind.is_adaptive() {
        config.controller.k_rho
    } else {
        0.0
    };
    let (log, summary) = setup.execute(
        &RunSpec {
            label: "sim",
            law,
            k_rho,
        },
        out,
    )?;
    let report = ExperimentReport {
        name: "simulate".into(),
        runs: vec![summary],
        bounds: None,
        warnings: box_warnings("sim", &log)
            .into_iter()
            .chain(
                law_kind
                    .is_adaptive()
                    .then(|| stagnation_warning("sim", &log, config))
                    .flatten(),
            )
            .collect(),
        notes: Vec::new(),
    };
    report.save(out)?;
    Ok((log, report))
}
