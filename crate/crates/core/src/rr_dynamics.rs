//! Closed-form rigid-body dynamics of a two-link planar revolute arm.
//!
//! Convention: `q1` is measured from the positive x-axis, `q2` is relative to
//! link 1, and gravity acts along `-y`. The Coriolis matrix is built from
//! Christoffel symbols, so `Ṁ - 2C` is skew-symmetric.

use std::path::Path;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants of the arm. `i1`/`i2` are link inertias about the
/// link centers of mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulatorParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub lc1: f64,
    pub lc2: f64,
    #[serde(rename = "I1")]
    pub i1: f64,
    #[serde(rename = "I2")]
    pub i2: f64,
    pub grav: f64,
}

impl Default for ManipulatorParams {
    fn default() -> Self {
        Self::table1()
    }
}

impl ManipulatorParams {
    /// Reference arm used throughout the experiments.
    pub const fn table1() -> Self {
        Self {
            m1: 7.8,
            m2: 4.5,
            l1: 0.3,
            l2: 0.15,
            lc1: 0.1554,
            lc2: 0.0341,
            i1: 0.176,
            i2: 0.0411,
            grav: 9.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m1", self.m1),
            ("m2", self.m2),
            ("l1", self.l1),
            ("l2", self.l2),
            ("lc1", self.lc1),
            ("lc2", self.lc2),
            ("I1", self.i1),
            ("I2", self.i2),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if !self.grav.is_finite() {
            return Err(Error::InvalidParams("grav must be finite".into()));
        }
        if self.lc1 > self.l1 {
            return Err(Error::InvalidParams(format!(
                "lc1 = {} exceeds l1 = {}",
                self.lc1, self.l1
            )));
        }
        if self.lc2 > self.l2 {
            return Err(Error::InvalidParams(format!(
                "lc2 = {} exceeds l2 = {}",
                self.lc2, self.l2
            )));
        }
        Ok(())
    }

    /// Parses a key-value parameter file with exactly the keys
    /// `m1, m2, l1, l2, lc1, lc2, I1, I2, grav`.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let params: Self = toml::from_str(text).map_err(|e| Error::ConfigParse {
            path: "<params>".into(),
            source: Box::new(e),
        })?;
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: Self = toml::from_str(&text).map_err(|e| Error::ConfigParse {
            path: path.to_path_buf(),
            source: Box::new(e),
        })?;
        params.validate()?;
        Ok(params)
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(self).expect("flat struct of floats always serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointState {
    pub q: Vector2<f64>,
    pub qd: Vector2<f64>,
}

impl JointState {
    pub fn new(q: Vector2<f64>, qd: Vector2<f64>) -> Self {
        Self { q, qd }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).all(|v| v.is_finite())
    }
}

/// All dynamic terms at one state. `n = C qd + g`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsEval {
    pub m: Matrix2<f64>,
    pub c: Matrix2<f64>,
    pub g: Vector2<f64>,
    pub n: Vector2<f64>,
}

impl DynamicsEval {
    pub fn at(params: &ManipulatorParams, state: &JointState) -> Self {
        let m = mass_matrix(params, &state.q);
        let c = coriolis_matrix(params, state);
        let g = gravity_vector(params, &state.q);
        Self {
            m,
            c,
            g,
            n: c * state.qd + g,
        }
    }
}

pub fn mass_matrix(p: &ManipulatorParams, q: &Vector2<f64>) -> Matrix2<f64> {
    let c2 = q[1].cos();
    let m22 = p.i2 + p.m2 * p.lc2 * p.lc2;
    let m12 = m22 + p.m2 * p.l1 * p.lc2 * c2;
    let m11 = p.i1 + p.m1 * p.lc1 * p.lc1 + p.i2 + p.m2 * (p.l1 * p.l1 + p.lc2 * p.lc2 + 2.0 * p.l1 * p.lc2 * c2);
    Matrix2::new(m11, m12, m12, m22)
}

pub fn coriolis_matrix(p: &ManipulatorParams, state: &JointState) -> Matrix2<f64> {
    // h = ∂M12/∂q2 = ½ ∂M11/∂q2
    let h = -p.m2 * p.l1 * p.lc2 * state.q[1].sin();
    let (qd1, qd2) = (state.qd[0], state.qd[1]);
    Matrix2::new(h * qd2, h * (qd1 + qd2), -h * qd1, 0.0)
}

pub fn gravity_vector(p: &ManipulatorParams, q: &Vector2<f64>) -> Vector2<f64> {
    let c1 = q[0].cos();
    let c12 = (q[0] + q[1]).cos();
    let g2 = p.m2 * p.lc2 * p.grav * c12;
    Vector2::new((p.m1 * p.lc1 + p.m2 * p.l1) * p.grav * c1 + g2, g2)
}

/// Potential energy with the zero level on the x-axis.
pub fn potential_energy(p: &ManipulatorParams, q: &Vector2<f64>) -> f64 {
    let s1 = q[0].sin();
    let s12 = (q[0] + q[1]).sin();
    p.grav * (p.m1 * p.lc1 * s1 + p.m2 * (p.l1 * s1 + p.lc2 * s12))
}

pub fn kinetic_energy(p: &ManipulatorParams, state: &JointState) -> f64 {
    0.5 * state.qd.dot(&(mass_matrix(p, &state.q) * state.qd))
}

/// `q̈ = M⁻¹ (τ - C q̇ - g)`.
pub fn forward_dynamics(p: &ManipulatorParams, state: &JointState, tau: &Vector2<f64>) -> Result<Vector2<f64>> {
    let m = mass_matrix(p, &state.q);
    let rhs = tau - coriolis_matrix(p, state) * state.qd - gravity_vector(p, &state.q);
    m.cholesky().map(|chol| chol.solve(&rhs)).ok_or(Error::SingularInertia {
        q1: state.q[0],
        q2: state.q[1],
    })
}

/// `τ = M q̈ + C q̇ + g`.
pub fn inverse_dynamics(p: &ManipulatorParams, state: &JointState, qdd: &Vector2<f64>) -> Vector2<f64> {
    mass_matrix(p, &state.q) * qdd + coriolis_matrix(p, state) * state.qd + gravity_vector(p, &state.q)
}

/// Multiplies masses, lengths, COM offsets and inertias by `1 + δ` with
/// `δ ~ U[-relative_scale, relative_scale]`. Draws that would break
/// `lc ≤ l` are repeated. Gravity is left untouched.
pub fn perturb_params(params: &ManipulatorParams, relative_scale: f64, seed: u64) -> Result<ManipulatorParams> {
    if !(0.0..1.0).contains(&relative_scale) {
        return Err(Error::config(
            "relative_scale",
            format!("must lie in [0, 1), got {relative_scale}"),
        ));
    }
    if relative_scale == 0.0 {
        return Ok(*params);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scale = |v: f64| v * (1.0 + rng.random_range(-relative_scale..=relative_scale));
    let mut out = *params;
    out.m1 = scale(params.m1);
    out.m2 = scale(params.m2);
    out.i1 = scale(params.i1);
    out.i2 = scale(params.i2);
    loop {
        out.l1 = scale(params.l1);
        out.lc1 = scale(params.lc1);
        if out.lc1 <= out.l1 {
            break;
        }
    }
    loop {
        out.l2 = scale(params.l2);
        out.lc2 = scale(params.lc2);
        if out.lc2 <= out.l2 {
            break;
        }
    }
    out.validate()?;
    Ok(out)
}
