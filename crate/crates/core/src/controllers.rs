//! Feedback linearization with an optional robust term whose magnitude `ρ`
//! is either absent, fixed by the uncertainty bounds, or adapted online.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::bounds::{rho_static_with_norm, UncertaintyBounds};
use crate::error::{Error, Result};
use crate::lyapunov::{error_state, ErrorState, LyapunovDesign};
use crate::rr_dynamics::{self, JointState, ManipulatorParams};
use crate::trajectory::ReferenceSample;

/// Estimated dynamics available to a controller.
pub trait DynamicsModel: Sync {
    fn mass_estimate(&self, q: &Vector2<f64>) -> Result<Matrix2<f64>>;

    fn bias_estimate(&self, state: &JointState) -> Result<Vector2<f64>>;

    /// `(M̂, n̂)` at one state.
    fn components(&self, state: &JointState) -> Result<(Matrix2<f64>, Vector2<f64>)> {
        Ok((self.mass_estimate(&state.q)?, self.bias_estimate(state)?))
    }
}

/// Parametric model; used for both the exact and the perturbed arm.
impl DynamicsModel for ManipulatorParams {
    fn mass_estimate(&self, q: &Vector2<f64>) -> Result<Matrix2<f64>> {
        Ok(rr_dynamics::mass_matrix(self, q))
    }

    fn bias_estimate(&self, state: &JointState) -> Result<Vector2<f64>> {
        Ok(rr_dynamics::coriolis_matrix(self, state) * state.qd + rr_dynamics::gravity_vector(self, &state.q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LawKind {
    /// Plain feedback linearization, `w = 0`.
    None,
    /// `ρ` recomputed each step from the uncertainty bounds.
    Static,
    /// `ρ̇ = k_ρ` iff `V̇ ≥ 0` and `‖z‖ ≥ ε`.
    Basic,
    /// `ρ̇ = k_ρ` iff `V̇ ≥ -ε₁` and `‖z‖ ≥ ε`.
    Deadband,
}

impl LawKind {
    pub fn is_adaptive(self) -> bool {
        matches!(self, LawKind::Basic | LawKind::Deadband)
    }
}

impl fmt::Display for LawKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LawKind::None => "none",
            LawKind::Static => "static",
            LawKind::Basic => "basic",
            LawKind::Deadband => "deadband",
        })
    }
}

impl FromStr for LawKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LawKind::None),
            "static" => Ok(LawKind::Static),
            "basic" => Ok(LawKind::Basic),
            "deadband" => Ok(LawKind::Deadband),
            other => Err(Error::config(
                "law",
                format!("unknown law `{other}` (expected none, static, basic or deadband)"),
            )),
        }
    }
}

/// Robust-term selection plus the data each variant needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustLaw {
    None,
    Static { bounds: UncertaintyBounds, offset: f64 },
    Basic,
    Deadband,
}

impl RobustLaw {
    pub fn kind(&self) -> LawKind {
        match self {
            RobustLaw::None => LawKind::None,
            RobustLaw::Static { .. } => LawKind::Static,
            RobustLaw::Basic => LawKind::Basic,
            RobustLaw::Deadband => LawKind::Deadband,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustState {
    pub rho: f64,
    pub k_rho: f64,
    pub law: RobustLaw,
}

impl RobustState {
    pub fn new(law: RobustLaw, k_rho: f64) -> Self {
        Self { rho: 0.0, k_rho, law }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub tau: Vector2<f64>,
    pub a: Vector2<f64>,
    pub w: Vector2<f64>,
    pub rho: f64,
    pub error: ErrorState,
    pub z: Vector2<f64>,
    pub m_hat: Matrix2<f64>,
    pub n_hat: Vector2<f64>,
}

/// Unit-vector robust term with a linear boundary layer of radius `eps`.
pub fn robust_term(rho: f64, z: &Vector2<f64>, eps: f64) -> Vector2<f64> {
    let norm = z.norm();
    if norm >= eps {
        z * (rho / norm)
    } else {
        z * (rho / eps)
    }
}

pub fn rho_derivative(law: LawKind, vdot: f64, znorm: f64, eps: f64, eps1: f64, k_rho: f64) -> f64 {
    if znorm < eps {
        return 0.0;
    }
    let grow = match law {
        LawKind::Basic => vdot >= 0.0,
        LawKind::Deadband => vdot >= -eps1,
        LawKind::Static | LawKind::None => false,
    };
    if grow {
        k_rho
    } else {
        0.0
    }
}

/// One evaluation of `τ = M̂ (q̈_ref + K_P e + K_D ė + w) + n̂`.
pub fn control_step(
    model: &dyn DynamicsModel,
    design: &LyapunovDesign,
    reference: &ReferenceSample,
    state: &JointState,
    robust: &RobustState,
) -> Result<ControlOutput> {
    let error = error_state(&state.q, &state.qd, &reference.q_ref, &reference.qd_ref);
    let xi = error.xi();
    let z = design.z(&xi);
    let rho = match robust.law {
        RobustLaw::None => 0.0,
        RobustLaw::Static { bounds, offset } => rho_static_with_norm(&bounds, design.k_norm(), xi.norm(), offset)?,
        RobustLaw::Basic | RobustLaw::Deadband => robust.rho,
    };
    let w = if rho == 0.0 {
        Vector2::zeros()
    } else {
        robust_term(rho, &z, design.eps)
    };
    let a = reference.qdd_ref + design.kp * error.e + design.kd * error.ed + w;
    let (m_hat, n_hat) = model.components(state)?;
    let tau = m_hat * a + n_hat;
    if !tau.iter().all(|v| v.is_finite()) {
        return Err(Error::Model(format!(
            "non-finite torque at q = {:?}",
            state.q.as_slice()
        )));
    }
    Ok(ControlOutput {
        tau,
        a,
        w,
        rho,
        error,
        z,
        m_hat,
        n_hat,
    })
}

/// `η = (I - M⁻¹M̂) a - M⁻¹ (n̂ - n)`, needs the true plant.
pub fn eta_diagnostic(
    true_params: &ManipulatorParams,
    model: &dyn DynamicsModel,
    state: &JointState,
    a: &Vector2<f64>,
) -> Result<Vector2<f64>> {
    let (m_hat, n_hat) = model.components(state)?;
    eta_with_estimates(true_params, state, &m_hat, &n_hat, a)
}

/// [`eta_diagnostic`] with the estimates already evaluated.
pub fn eta_with_estimates(
    true_params: &ManipulatorParams,
    state: &JointState,
    m_hat: &Matrix2<f64>,
    n_hat: &Vector2<f64>,
    a: &Vector2<f64>,
) -> Result<Vector2<f64>> {
    let m = rr_dynamics::mass_matrix(true_params, &state.q);
    let n = true_params.bias_estimate(state)?;
    let chol = m.cholesky().ok_or(Error::SingularInertia {
        q1: state.q[0],
        q2: state.q[1],
    })?;
    Ok(a - chol.solve(&(m_hat * a)) - chol.solve(&(n_hat - n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lyapunov::build_design;
    use crate::rr_dynamics::perturb_params;

    fn reference() -> ReferenceSample {
        ReferenceSample {
            q_ref: Vector2::new(0.1, -0.2),
            qd_ref: Vector2::new(0.5, 0.3),
            qdd_ref: Vector2::new(-1.0, 2.0),
        }
    }

    #[test]
    fn robust_term_branches() {
        assert_eq!(robust_term(2.0, &Vector2::zeros(), 0.5), Vector2::zeros());
        let upper = robust_term(2.0, &Vector2::new(3.0, 4.0), 0.5);
        assert!((upper - Vector2::new(1.2, 1.6)).norm() < 1e-15);
        let lower = robust_term(2.0, &Vector2::new(0.3, 0.0), 0.5);
        assert!((lower - Vector2::new(1.2, 0.0)).norm() < 1e-15);
        // Continuous across the layer boundary.
        let edge = Vector2::new(0.5, 0.0);
        assert!((robust_term(2.0, &edge, 0.5) - robust_term(2.0, &(edge * (1.0 - 1e-12)), 0.5)).norm() < 1e-9);
    }

    #[test]
    fn rho_derivative_cases() {
        assert_eq!(rho_derivative(LawKind::Basic, 0.5, 1.0, 0.5, 0.01, 7.0), 7.0);
        assert_eq!(rho_derivative(LawKind::Basic, -0.001, 1.0, 0.5, 0.01, 7.0), 0.0);
        assert_eq!(rho_derivative(LawKind::Deadband, -0.001, 1.0, 0.5, 0.01, 7.0), 7.0);
        assert_eq!(rho_derivative(LawKind::Deadband, -0.02, 1.0, 0.5, 0.01, 7.0), 0.0);
        for law in [LawKind::Basic, LawKind::Deadband, LawKind::Static, LawKind::None] {
            assert_eq!(rho_derivative(law, 5.0, 0.4, 0.5, 0.01, 7.0), 0.0);
        }
        assert_eq!(rho_derivative(LawKind::Static, 5.0, 1.0, 0.5, 0.01, 7.0), 0.0);
        assert_eq!(rho_derivative(LawKind::None, 5.0, 1.0, 0.5, 0.01, 7.0), 0.0);
    }

    #[test]
    fn zero_error_fbl_is_pure_feedforward() {
        let p = ManipulatorParams::table1();
        let d = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
        let r = reference();
        let s = JointState::new(r.q_ref, r.qd_ref);
        let out = control_step(&p, &d, &r, &s, &RobustState::new(RobustLaw::None, 0.0)).unwrap();
        let expected = rr_dynamics::inverse_dynamics(&p, &s, &r.qdd_ref);
        assert!((out.tau - expected).norm() < 1e-12);
    }

    #[test]
    fn adaptive_with_zero_rho_equals_fbl() {
        let p = perturb_params(&ManipulatorParams::table1(), 0.1, 3).unwrap();
        let d = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
        let r = reference();
        let s = JointState::new(Vector2::new(0.3, 0.1), Vector2::new(-2.0, 1.0));
        let fbl = control_step(&p, &d, &r, &s, &RobustState::new(RobustLaw::None, 0.0)).unwrap();
        for law in [RobustLaw::Basic, RobustLaw::Deadband] {
            let adaptive = control_step(&p, &d, &r, &s, &RobustState::new(law, 1000.0)).unwrap();
            assert_eq!(adaptive.tau, fbl.tau);
        }
    }

    #[test]
    fn torque_recomposes_from_components() {
        let p = perturb_params(&ManipulatorParams::table1(), 0.1, 3).unwrap();
        let d = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
        let s = JointState::new(Vector2::new(0.3, 0.1), Vector2::new(-2.0, 1.0));
        let robust = RobustState {
            rho: 12.0,
            k_rho: 1000.0,
            law: RobustLaw::Basic,
        };
        let out = control_step(&p, &d, &reference(), &s, &robust).unwrap();
        assert!((out.m_hat * out.a + out.n_hat - out.tau).norm() < 1e-12);
        let r = reference();
        let manual = r.qdd_ref + d.kp * out.error.e + d.kd * out.error.ed + out.w;
        assert_eq!(manual, out.a);
        assert_eq!(out.rho, 12.0);
    }

    #[test]
    fn static_law_uses_current_xi_norm() {
        let p = ManipulatorParams::table1();
        let d = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
        let bounds = UncertaintyBounds {
            alpha: 0.2,
            phi: 1.0,
            q_m: 3.0,
            m_min: 1.0,
            m_max: 5.0,
        };
        let law = RobustLaw::Static { bounds, offset: 1e-3 };
        let r = reference();
        let s = JointState::new(Vector2::new(0.0, 0.0), Vector2::zeros());
        let out = control_step(&p, &d, &r, &s, &RobustState::new(law, 0.0)).unwrap();
        let xi_norm = error_state(&s.q, &s.qd, &r.q_ref, &r.qd_ref).xi().norm();
        let expected = rho_static_with_norm(&bounds, d.k_norm(), xi_norm, 1e-3).unwrap();
        assert_eq!(out.rho, expected);
    }

    #[test]
    fn eta_vanishes_for_exact_model() {
        let p = ManipulatorParams::table1();
        let s = JointState::new(Vector2::new(0.3, 0.1), Vector2::new(-2.0, 1.0));
        let eta = eta_diagnostic(&p, &p, &s, &Vector2::new(3.0, -4.0)).unwrap();
        assert!(eta.norm() < 1e-12);
    }

    #[test]
    fn eta_predicts_closed_loop_acceleration_gap() {
        // q̈ = a - η under τ = M̂a + n̂.
        let truth = ManipulatorParams::table1();
        let hat = perturb_params(&truth, 0.1, 5).unwrap();
        let s = JointState::new(Vector2::new(0.6, -0.4), Vector2::new(1.5, -0.5));
        let a = Vector2::new(2.0, -3.0);
        let (m_hat, n_hat) = hat.components(&s).unwrap();
        let qdd = rr_dynamics::forward_dynamics(&truth, &s, &(m_hat * a + n_hat)).unwrap();
        let eta = eta_diagnostic(&truth, &hat, &s, &a).unwrap();
        assert!((a - eta - qdd).norm() < 1e-10);
    }

    #[test]
    fn law_names_round_trip() {
        for law in [LawKind::None, LawKind::Static, LawKind::Basic, LawKind::Deadband] {
            assert_eq!(law.to_string().parse::<LawKind>().unwrap(), law);
        }
        assert!("fancy".parse::<LawKind>().is_err());
    }
}
