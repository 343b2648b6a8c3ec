//! Fixed-step closed-loop simulation.
//!
//! The controller runs once per control period and its torque is held
//! constant (zero-order hold) while the plant is advanced by `substeps`
//! classical RK4 steps. The adaptive gain is integrated alongside the plant
//! with its rate frozen at the value computed at the start of the period.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::bounds::StateBox;
use crate::controllers::{
    control_step, eta_with_estimates, rho_derivative, DynamicsModel, LawKind, RobustLaw, RobustState,
};
use crate::error::{Error, Result};
use crate::lyapunov::{lyapunov_sample, LyapunovDesign};
use crate::rr_dynamics::{forward_dynamics, JointState, ManipulatorParams};
use crate::trajectory::Trajectory;

pub const LOG_HEADER: [&str; 19] = [
    "t", "q1", "q2", "qref1", "qref2", "e1", "e2", "ed1", "ed2", "tau1", "tau2", "rho", "V", "Vdot", "znorm", "eta1",
    "eta2", "w1", "w2",
];

/// Tolerance used by [`replay_check`].
pub const REPLAY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub duration: f64,
    /// Control period; also the log spacing.
    pub step: f64,
    /// RK4 steps per control period.
    pub substeps: usize,
    /// Initial position error `e(0)`.
    pub e0: [f64; 2],
    /// Initial velocity error `ė(0)`.
    pub ed0: [f64; 2],
    pub rho0: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            duration: 10.0,
            step: 1e-3,
            substeps: 1,
            e0: [0.0, 0.0],
            ed0: [0.0, 0.0],
            rho0: 0.0,
        }
    }
}

impl SimSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::config("sim.step", "must be finite and > 0"));
        }
        if !(self.duration >= self.step) {
            return Err(Error::config("sim.duration", "must be at least one step"));
        }
        if self.substeps == 0 {
            return Err(Error::config("sim.substeps", "must be at least 1"));
        }
        if !(self.rho0 >= 0.0) {
            return Err(Error::config("sim.rho0", "must be non-negative"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.duration / self.step).round() as usize
    }
}

/// Everything one closed-loop run depends on.
#[derive(Clone, Copy)]
pub struct SimConfig<'a> {
    pub plant: &'a ManipulatorParams,
    pub model: &'a dyn DynamicsModel,
    pub design: &'a LyapunovDesign,
    pub trajectory: &'a Trajectory,
    pub law: RobustLaw,
    pub k_rho: f64,
    pub settings: SimSettings,
    /// When set, states leaving this box are counted in the log.
    pub monitor_box: Option<StateBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub q: Vector2<f64>,
    pub q_ref: Vector2<f64>,
    pub e: Vector2<f64>,
    pub ed: Vector2<f64>,
    pub tau: Vector2<f64>,
    pub rho: f64,
    pub v: f64,
    pub vdot: f64,
    pub znorm: f64,
    pub eta: Vector2<f64>,
    pub w: Vector2<f64>,
}

impl LogRow {
    fn to_record(self) -> [f64; 19] {
        [
            self.t,
            self.q[0],
            self.q[1],
            self.q_ref[0],
            self.q_ref[1],
            self.e[0],
            self.e[1],
            self.ed[0],
            self.ed[1],
            self.tau[0],
            self.tau[1],
            self.rho,
            self.v,
            self.vdot,
            self.znorm,
            self.eta[0],
            self.eta[1],
            self.w[0],
            self.w[1],
        ]
    }

    fn from_record(r: &[f64]) -> Self {
        let v2 = |i: usize| Vector2::new(r[i], r[i + 1]);
        Self {
            t: r[0],
            q: v2(1),
            q_ref: v2(3),
            e: v2(5),
            ed: v2(7),
            tau: v2(9),
            rho: r[11],
            v: r[12],
            vdot: r[13],
            znorm: r[14],
            eta: v2(15),
            w: v2(17),
        }
    }

    pub fn xi_norm(&self) -> f64 {
        (self.e.norm_squared() + self.ed.norm_squared()).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimLog {
    pub rows: Vec<LogRow>,
    /// Number of logged states outside the monitored box.
    pub box_violations: usize,
}

fn rk4_step<F>(f: &F, x: &Vector4<f64>, h: f64) -> Result<Vector4<f64>>
where
    F: Fn(&Vector4<f64>) -> Result<Vector4<f64>>,
{
    let k1 = f(x)?;
    let k2 = f(&(x + k1 * (h / 2.0)))?;
    let k3 = f(&(x + k2 * (h / 2.0)))?;
    let k4 = f(&(x + k3 * h))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

fn pack(s: &JointState) -> Vector4<f64> {
    Vector4::new(s.q[0], s.q[1], s.qd[0], s.qd[1])
}

fn unpack(x: &Vector4<f64>) -> JointState {
    JointState::new(Vector2::new(x[0], x[1]), Vector2::new(x[2], x[3]))
}

/// Advances the plant over `duration` with constant torque.
pub fn integrate_plant(
    plant: &ManipulatorParams,
    state: &JointState,
    tau: &Vector2<f64>,
    duration: f64,
    substeps: usize,
) -> Result<JointState> {
    let rhs = |x: &Vector4<f64>| -> Result<Vector4<f64>> {
        let s = unpack(x);
        let qdd = forward_dynamics(plant, &s, tau)?;
        Ok(Vector4::new(s.qd[0], s.qd[1], qdd[0], qdd[1]))
    };
    let h = duration / substeps as f64;
    let mut x = pack(state);
    for _ in 0..substeps {
        x = rk4_step(&rhs, &x, h)?;
    }
    Ok(unpack(&x))
}

/// Everything derived from one state at one control instant.
struct StepEval {
    row: LogRow,
    rho_dot: f64,
}

fn evaluate_step(cfg: &SimConfig<'_>, t: f64, state: &JointState, robust: &RobustState) -> Result<StepEval> {
    let reference = cfg.trajectory.evaluate(t);
    let out = control_step(cfg.model, cfg.design, &reference, state, robust)?;
    let qdd = forward_dynamics(cfg.plant, state, &out.tau)?;
    let edd = reference.qdd_ref - qdd;
    let xidot = Vector4::new(out.error.ed[0], out.error.ed[1], edd[0], edd[1]);
    let sample = lyapunov_sample(cfg.design, &out.error, &xidot);
    let eta = eta_with_estimates(cfg.plant, state, &out.m_hat, &out.n_hat, &out.a)?;
    let rho_dot = rho_derivative(
        cfg.law.kind(),
        sample.vdot,
        sample.znorm,
        cfg.design.eps,
        cfg.design.eps1,
        cfg.k_rho,
    );
    Ok(StepEval {
        row: LogRow {
            t,
            q: state.q,
            q_ref: reference.q_ref,
            e: out.error.e,
            ed: out.error.ed,
            tau: out.tau,
            rho: out.rho,
            v: sample.v,
            vdot: sample.vdot,
            znorm: sample.znorm,
            eta,
            w: out.w,
        },
        rho_dot,
    })
}

pub fn initial_state(cfg: &SimConfig<'_>) -> JointState {
    let r = cfg.trajectory.evaluate(0.0);
    JointState::new(
        r.q_ref - Vector2::from(cfg.settings.e0),
        r.qd_ref - Vector2::from(cfg.settings.ed0),
    )
}

pub fn run(cfg: &SimConfig<'_>) -> Result<SimLog> {
    cfg.settings.validate()?;
    let n = cfg.settings.n_steps();
    let h = cfg.settings.step;
    let mut state = initial_state(cfg);
    let mut robust = RobustState {
        rho: cfg.settings.rho0,
        k_rho: cfg.k_rho,
        law: cfg.law,
    };
    let mut log = SimLog {
        rows: Vec::with_capacity(n + 1),
        box_violations: 0,
    };
    for k in 0..=n {
        let t = k as f64 * h;
        if !state.is_finite() || !robust.rho.is_finite() {
            return Err(Error::NonFinite { t });
        }
        if let Some(b) = &cfg.monitor_box {
            if !b.contains(&state) {
                log.box_violations += 1;
            }
        }
        let step = evaluate_step(cfg, t, &state, &robust)?;
        let tau = step.row.tau;
        log.rows.push(step.row);
        if k == n {
            break;
        }
        state = integrate_plant(cfg.plant, &state, &tau, h, cfg.settings.substeps).map_err(|e| match e {
            Error::SingularInertia { .. } => e,
            _ => Error::NonFinite { t },
        })?;
        if cfg.law.kind().is_adaptive() {
            robust.rho += h * step.rho_dot;
        }
    }
    Ok(log)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REPLAY_TOL * b.abs().max(1.0)
}

fn close2(a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    close(a[0], b[0]) && close(a[1], b[1])
}

/// Re-derives every logged quantity from the logged states and the run
/// configuration. Velocities are reconstructed as `q̇ = q̇_ref - ė`.
pub fn replay_check(log: &SimLog, cfg: &SimConfig<'_>) -> bool {
    replay_mismatch(log, cfg).is_none()
}

/// Like [`replay_check`] but reports the first offending row and field.
pub fn replay_mismatch(log: &SimLog, cfg: &SimConfig<'_>) -> Option<(usize, &'static str)> {
    let h = cfg.settings.step;
    if log.rows.len() != cfg.settings.n_steps() + 1 {
        return Some((log.rows.len(), "length"));
    }
    let kind = cfg.law.kind();
    let mut prev: Option<(f64, StepEval)> = None;
    for (k, row) in log.rows.iter().enumerate() {
        if row.t != k as f64 * h {
            return Some((k, "t"));
        }
        let reference = cfg.trajectory.evaluate(row.t);
        if !close2(&row.q_ref, &reference.q_ref) {
            return Some((k, "q_ref"));
        }
        if !close2(&row.e, &(reference.q_ref - row.q)) {
            return Some((k, "e"));
        }
        let state = JointState::new(row.q, reference.qd_ref - row.ed);
        let robust = RobustState {
            rho: row.rho,
            k_rho: cfg.k_rho,
            law: cfg.law,
        };
        let Ok(step) = evaluate_step(cfg, row.t, &state, &robust) else {
            return Some((k, "evaluation"));
        };
        let r = &step.row;
        let checks: [(&'static str, bool); 8] = [
            ("tau", close2(&r.tau, &row.tau)),
            ("w", close2(&r.w, &row.w)),
            ("rho", close(r.rho, row.rho)),
            ("V", close(r.v, row.v)),
            ("Vdot", close(r.vdot, row.vdot)),
            ("znorm", close(r.znorm, row.znorm)),
            ("eta", close2(&r.eta, &row.eta)),
            ("ed", close2(&r.ed, &row.ed)),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Some((k, name));
        }
        match kind {
            LawKind::None if row.rho != 0.0 => return Some((k, "rho")),
            LawKind::Basic | LawKind::Deadband => {
                if k == 0 && row.rho != cfg.settings.rho0 {
                    return Some((k, "rho"));
                }
                if let Some((prev_rho, prev_step)) = &prev {
                    let inc = row.rho - prev_rho;
                    let expected = h * prev_step.rho_dot;
                    let ambiguous = switch_is_ambiguous(kind, &prev_step.row, cfg);
                    let ok = close(inc, expected) || (ambiguous && (close(inc, 0.0) || close(inc, h * cfg.k_rho)));
                    if !ok {
                        return Some((k, "rho"));
                    }
                }
            }
            _ => {}
        }
        prev = Some((row.rho, step));
    }
    None
}

// The switching conditions compare floating values against thresholds;
// reconstructed velocities may land on the other side by rounding.
fn switch_is_ambiguous(kind: LawKind, row: &LogRow, cfg: &SimConfig<'_>) -> bool {
    let threshold = if kind == LawKind::Deadband {
        -cfg.design.eps1
    } else {
        0.0
    };
    (row.vdot - threshold).abs() <= REPLAY_TOL * row.vdot.abs().max(1.0)
        || (row.znorm - cfg.design.eps).abs() <= REPLAY_TOL
}

impl SimLog {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(LOG_HEADER)?;
        for row in &self.rows {
            w.write_record(row.to_record().iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != LOG_HEADER {
            return Err(Error::Data {
                what: "simulation log".into(),
                reason: format!("unexpected header {header:?}"),
            });
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data {
                    what: "simulation log".into(),
                    reason: e.to_string(),
                })?;
            rows.push(LogRow::from_record(&vals));
        }
        Ok(Self {
            rows,
            box_violations: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    fn window(&self, fraction: f64) -> &[LogRow] {
        let start = ((1.0 - fraction) * self.rows.len() as f64).floor() as usize;
        &self.rows[start.min(self.rows.len())..]
    }

    /// RMS of `‖e‖` over the final `fraction` of the run.
    pub fn rms_error(&self, fraction: f64) -> f64 {
        let w = self.window(fraction);
        if w.is_empty() {
            return 0.0;
        }
        (w.iter().map(|r| r.e.norm_squared()).sum::<f64>() / w.len() as f64).sqrt()
    }

    pub fn max_error(&self) -> f64 {
        self.rows.iter().map(|r| r.e.norm()).fold(0.0, f64::max)
    }

    /// Largest `‖τ‖` over the run.
    pub fn peak_torque(&self) -> f64 {
        self.rows.iter().map(|r| r.tau.norm()).fold(0.0, f64::max)
    }

    /// `Σ_k ‖τ_{k+1} - τ_k‖`.
    pub fn torque_variation(&self) -> f64 {
        self.rows.windows(2).map(|p| (p[1].tau - p[0].tau).norm()).sum()
    }

    pub fn terminal_rho(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.rho)
    }

    /// Whether `ρ` is nondecreasing with per-step increments in
    /// `{0, k_rho · step}`.
    pub fn rho_increments_valid(&self, k_rho: f64, step: f64) -> bool {
        let full = k_rho * step;
        self.rows.windows(2).all(|p| {
            let d = p[1].rho - p[0].rho;
            d == 0.0 || (d - full).abs() <= 1e-9 * full.max(1.0) * p[1].rho.max(1.0)
        })
    }

    /// `ρ` constant over the final `fraction` of the run.
    pub fn rho_settled(&self, fraction: f64) -> bool {
        let w = self.window(fraction);
        w.windows(2).all(|p| p[1].rho == p[0].rho)
    }

    /// First time after which `‖z‖ < eps` holds for the rest of the log.
    pub fn boundary_layer_entry(&self, eps: f64) -> Option<f64> {
        let last_outside = self.rows.iter().rposition(|r| r.znorm >= eps);
        match last_outside {
            None => self.rows.first().map(|r| r.t),
            Some(i) if i + 1 < self.rows.len() => Some(self.rows[i + 1].t),
            Some(_) => None,
        }
    }

    /// `‖z‖` stuck above `eps` with `|V̇| < eps1` over the final `fraction`:
    /// the nonzero-error equilibrium the adaptive law cannot escape.
    pub fn stagnates_outside_layer(&self, eps: f64, eps1: f64, fraction: f64) -> bool {
        let w = self.window(fraction);
        !w.is_empty() && w.iter().all(|r| r.znorm >= eps && r.vdot.abs() < eps1)
    }
}
