//! Grid estimates of the model-mismatch bounds used by the static robust
//! controller, and the resulting `ρ` rule.

use nalgebra::{Matrix2, Matrix2x4, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rr_dynamics::{coriolis_matrix, gravity_vector, mass_matrix, JointState, ManipulatorParams};
use crate::trajectory::Trajectory;

/// Sampling domain for the suprema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateBox {
    pub q_min: [f64; 2],
    pub q_max: [f64; 2],
    pub qd_min: [f64; 2],
    pub qd_max: [f64; 2],
    pub xi_norm_max: f64,
}

impl Default for StateBox {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            q_min: [-PI, -PI],
            q_max: [PI, PI],
            qd_min: [-5.0, -5.0],
            qd_max: [5.0, 5.0],
            xi_norm_max: 1.0,
        }
    }
}

impl StateBox {
    pub fn validate(&self) -> Result<()> {
        for i in 0..2 {
            if !(self.q_min[i] <= self.q_max[i]) || !(self.qd_min[i] <= self.qd_max[i]) {
                return Err(Error::config("bounds.box", "empty state box"));
            }
        }
        if !(self.xi_norm_max >= 0.0) {
            return Err(Error::config("bounds.xi_norm_max", "must be non-negative"));
        }
        Ok(())
    }

    pub fn contains(&self, state: &JointState) -> bool {
        (0..2).all(|i| {
            (self.q_min[i]..=self.q_max[i]).contains(&state.q[i])
                && (self.qd_min[i]..=self.qd_max[i]).contains(&state.qd[i])
        })
    }

    fn q_grid(&self, density: usize) -> Vec<Vector2<f64>> {
        let a = linspace(self.q_min[0], self.q_max[0], density);
        let b = linspace(self.q_min[1], self.q_max[1], density);
        a.iter()
            .flat_map(|&x| b.iter().map(move |&y| Vector2::new(x, y)))
            .collect()
    }

    fn qd_grid(&self, density: usize) -> Vec<Vector2<f64>> {
        let a = linspace(self.qd_min[0], self.qd_max[0], density);
        let b = linspace(self.qd_min[1], self.qd_max[1], density);
        a.iter()
            .flat_map(|&x| b.iter().map(move |&y| Vector2::new(x, y)))
            .collect()
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || lo == hi {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    /// Grid points per axis.
    pub density: usize,
    /// Multiplicative safety margin on the grid suprema.
    pub margin: f64,
    /// Strict positive offset added to the `ρ` rule.
    pub offset: f64,
    #[serde(rename = "box")]
    pub state_box: StateBox,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            density: 25,
            margin: 1.1,
            offset: 1e-3,
            state_box: StateBox::default(),
        }
    }
}

impl BoundsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.density == 0 {
            return Err(Error::config("bounds.density", "must be at least 1"));
        }
        if !(self.margin >= 1.0) {
            return Err(Error::config("bounds.margin", "must be >= 1"));
        }
        if !(self.offset > 0.0) {
            return Err(Error::config("bounds.offset", "must be > 0"));
        }
        self.state_box.validate()
    }
}

/// Bounds on `‖I - M⁻¹M̂‖`, `‖n̂ - n‖`, `sup ‖q̈_ref‖` and `‖M⁻¹‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBounds {
    pub alpha: f64,
    pub phi: f64,
    pub q_m: f64,
    pub m_min: f64,
    pub m_max: f64,
}

fn induced_norm(m: &Matrix2<f64>) -> f64 {
    m.singular_values().max()
}

fn raw_alpha(true_params: &ManipulatorParams, hat: &ManipulatorParams, grid: &[Vector2<f64>]) -> f64 {
    grid.par_iter()
        .map(|q| {
            // I - M⁻¹M̂ = M⁻¹(M - M̂), exactly zero for identical models.
            let m = mass_matrix(true_params, q);
            let m_inv = m.try_inverse().unwrap_or_else(|| Matrix2::from_element(f64::INFINITY));
            induced_norm(&(m_inv * (m - mass_matrix(hat, q))))
        })
        .reduce(|| 0.0, f64::max)
}

/// Grid supremum of `‖I - M⁻¹(q) M̂(q)‖`, times the margin. Fails when the
/// inflated value reaches 1.
pub fn estimate_alpha(
    true_params: &ManipulatorParams,
    hat_params: &ManipulatorParams,
    state_box: &StateBox,
    density: usize,
    margin: f64,
) -> Result<f64> {
    let alpha = raw_alpha(true_params, hat_params, &state_box.q_grid(density)) * margin;
    if !(alpha < 1.0) {
        return Err(Error::AlphaTooLarge { alpha });
    }
    Ok(alpha)
}

/// Grid supremum of `‖n̂(q, q̇) - n(q, q̇)‖` over the box, times the margin.
pub fn estimate_phi(
    true_params: &ManipulatorParams,
    hat_params: &ManipulatorParams,
    state_box: &StateBox,
    density: usize,
    margin: f64,
) -> f64 {
    let qs = state_box.q_grid(density);
    let qds = state_box.qd_grid(density);
    qs.par_iter()
        .map(|q| {
            let dg = gravity_vector(hat_params, q) - gravity_vector(true_params, q);
            qds.iter()
                .map(|qd| {
                    let s = JointState::new(*q, *qd);
                    let dc = coriolis_matrix(hat_params, &s) - coriolis_matrix(true_params, &s);
                    (dc * qd + dg).norm()
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max)
        * margin
}

/// `(min, max)` over the grid of `‖M⁻¹(q)‖`, widened by the margin.
pub fn estimate_inverse_inertia_bounds(
    true_params: &ManipulatorParams,
    state_box: &StateBox,
    density: usize,
    margin: f64,
) -> (f64, f64) {
    let norms: Vec<f64> = state_box
        .q_grid(density)
        .par_iter()
        .map(|q| 1.0 / mass_matrix(true_params, q).symmetric_eigenvalues().min())
        .collect();
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().copied().fold(0.0, f64::max);
    (lo / margin, hi * margin)
}

/// Analytic `sup_t ‖q̈_ref(t)‖ ≤ A √(Σ_i (Σ_j ω_ij²)²)`.
pub fn trajectory_qm(trajectory: &Trajectory) -> f64 {
    trajectory.joint_acceleration_bounds().norm()
}

/// Dense-sampled `max ‖q̈_ref(t)‖` on `[0, horizon]`.
pub fn trajectory_qm_sampled(trajectory: &Trajectory, horizon: f64, step: f64) -> f64 {
    let n = (horizon / step).round() as usize;
    (0..=n)
        .map(|k| trajectory.evaluate(k as f64 * step).qdd_ref.norm())
        .fold(0.0, f64::max)
}

impl UncertaintyBounds {
    pub fn compute(
        true_params: &ManipulatorParams,
        hat_params: &ManipulatorParams,
        trajectory: &Trajectory,
        config: &BoundsConfig,
    ) -> Result<Self> {
        config.validate()?;
        let alpha = estimate_alpha(
            true_params,
            hat_params,
            &config.state_box,
            config.density,
            config.margin,
        )?;
        let phi = estimate_phi(
            true_params,
            hat_params,
            &config.state_box,
            config.density,
            config.margin,
        );
        let (m_min, m_max) =
            estimate_inverse_inertia_bounds(true_params, &config.state_box, config.density, config.margin);
        Ok(Self {
            alpha,
            phi,
            q_m: trajectory_qm(trajectory),
            m_min,
            m_max,
        })
    }
}

/// `ρ = (α Q_M + α ‖K‖ ‖ξ‖ + M_max Φ) / (1 - α) + offset`.
pub fn rho_static(bounds: &UncertaintyBounds, k: &Matrix2x4<f64>, xi_norm: f64, offset: f64) -> Result<f64> {
    rho_static_with_norm(bounds, k.singular_values().max(), xi_norm, offset)
}

pub fn rho_static_with_norm(bounds: &UncertaintyBounds, k_norm: f64, xi_norm: f64, offset: f64) -> Result<f64> {
    if !(bounds.alpha < 1.0) {
        return Err(Error::AlphaTooLarge { alpha: bounds.alpha });
    }
    let a = bounds.alpha;
    Ok((a * bounds.q_m + a * k_norm * xi_norm + bounds.m_max * bounds.phi) / (1.0 - a) + offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rr_dynamics::perturb_params;
    use crate::trajectory::TrajectoryConfig;
    use std::f64::consts::PI;

    fn nominal() -> ManipulatorParams {
        ManipulatorParams::table1()
    }

    #[test]
    fn identical_models_have_zero_mismatch() {
        let b = StateBox::default();
        assert_eq!(estimate_alpha(&nominal(), &nominal(), &b, 9, 1.0).unwrap(), 0.0);
        assert_eq!(estimate_phi(&nominal(), &nominal(), &b, 9, 1.0), 0.0);
    }

    #[test]
    fn perturbed_alpha_below_one_and_stable_under_refinement() {
        let hat = perturb_params(&nominal(), 0.1, 42).unwrap();
        let b = StateBox::default();
        let coarse = estimate_alpha(&nominal(), &hat, &b, 25, 1.0).unwrap();
        let fine = estimate_alpha(&nominal(), &hat, &b, 50, 1.0).unwrap();
        assert!(coarse * 1.1 < 1.0);
        // Refinement moves the supremum by less than the margin.
        assert!(fine <= coarse * 1.1 && coarse <= fine * 1.1, "{coarse} vs {fine}");
    }

    #[test]
    fn alpha_failure_is_reported() {
        let mut hat = nominal();
        hat.m1 *= 4.0;
        hat.i1 *= 4.0;
        hat.m2 *= 4.0;
        hat.i2 *= 4.0;
        assert!(matches!(
            estimate_alpha(&nominal(), &hat, &StateBox::default(), 9, 1.1),
            Err(Error::AlphaTooLarge { .. })
        ));
    }

    #[test]
    fn gravity_only_mismatch_equals_grid_gravity_gap() {
        let hat = ManipulatorParams {
            m1: 8.2,
            m2: 4.1,
            ..nominal()
        };
        let b = StateBox {
            qd_min: [0.0, 0.0],
            qd_max: [0.0, 0.0],
            ..Default::default()
        };
        let phi = estimate_phi(&nominal(), &hat, &b, 13, 1.0);
        let mut expected: f64 = 0.0;
        for i in 0..13 {
            for j in 0..13 {
                let q = Vector2::new(-PI + 2.0 * PI * i as f64 / 12.0, -PI + 2.0 * PI * j as f64 / 12.0);
                expected = expected.max((gravity_vector(&hat, &q) - gravity_vector(&nominal(), &q)).norm());
            }
        }
        assert!((phi - expected).abs() < 1e-12);
    }

    #[test]
    fn phi_monotone_in_box_size() {
        let hat = perturb_params(&nominal(), 0.1, 42).unwrap();
        let small = StateBox {
            qd_min: [-2.0, -2.0],
            qd_max: [2.0, 2.0],
            ..Default::default()
        };
        let big = StateBox {
            qd_min: [-4.0, -4.0],
            qd_max: [4.0, 4.0],
            ..Default::default()
        };
        // Nested grids: 9 points on [-2,2] are a subset of 17 points on [-4,4].
        let p_small = estimate_phi(&nominal(), &hat, &small, 9, 1.0);
        let p_big = estimate_phi(&nominal(), &hat, &big, 17, 1.0);
        assert!(p_big >= p_small);
    }

    #[test]
    fn qm_single_sinusoid_and_zero_amplitude() {
        let single = Trajectory {
            amplitude: 0.2,
            frequencies: [vec![PI], vec![]],
        };
        assert!((trajectory_qm(&single) - 0.2 * PI * PI).abs() < 1e-14);
        let flat = Trajectory {
            amplitude: 0.0,
            frequencies: [vec![PI, 2.0], vec![3.0]],
        };
        assert_eq!(trajectory_qm(&flat), 0.0);
    }

    #[test]
    fn qm_dominates_dense_sampling() {
        let traj = Trajectory::from_config(&TrajectoryConfig::default()).unwrap();
        let analytic = trajectory_qm(&traj);
        let sampled = trajectory_qm_sampled(&traj, 50.0, 1e-3);
        assert!(analytic >= sampled);
        assert!(analytic <= traj.coarse_acceleration_bound() + 1e-12);
    }

    #[test]
    fn rho_static_arithmetic() {
        let zero = UncertaintyBounds {
            alpha: 0.0,
            phi: 0.0,
            q_m: 3.0,
            m_min: 1.0,
            m_max: 2.0,
        };
        let k = Matrix2x4::new(100.0, 0.0, 20.0, 0.0, 0.0, 100.0, 0.0, 20.0);
        assert_eq!(rho_static(&zero, &k, 1.0, 1e-3).unwrap(), 1e-3);

        // α = 0.5, Q_M = 1, ‖K‖‖ξ‖ = 2, M_max Φ = 3 gives 9 + offset.
        let b = UncertaintyBounds {
            alpha: 0.5,
            phi: 1.5,
            q_m: 1.0,
            m_min: 1.0,
            m_max: 2.0,
        };
        let rho = rho_static_with_norm(&b, 2.0, 1.0, 1e-6).unwrap();
        assert!(rho > 9.0 && (rho - 9.0 - 1e-6).abs() < 1e-12);
        assert!(rho_static_with_norm(&UncertaintyBounds { alpha: 1.0, ..b }, 1.0, 1.0, 1e-6).is_err());
    }

    #[test]
    fn bounds_are_deterministic() {
        let hat = perturb_params(&nominal(), 0.1, 42).unwrap();
        let traj = Trajectory::from_config(&TrajectoryConfig::default()).unwrap();
        let cfg = BoundsConfig {
            density: 11,
            ..Default::default()
        };
        let a = UncertaintyBounds::compute(&nominal(), &hat, &traj, &cfg).unwrap();
        let b = UncertaintyBounds::compute(&nominal(), &hat, &traj, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(0.0 < a.m_min && a.m_min <= a.m_max);
    }
}
