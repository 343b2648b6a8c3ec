//! Reference trajectories built from sums of sinusoids with random
//! frequencies, one independent frequency draw per joint.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub amplitude: f64,
    pub n_components: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.1,
            n_components: 3,
            omega_min: std::f64::consts::PI,
            omega_max: 3.0 * std::f64::consts::PI,
            seed: 7,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(Error::config("amplitude", "must be finite and non-negative"));
        }
        if self.n_components == 0 {
            return Err(Error::config("n_components", "must be at least 1"));
        }
        if !(self.omega_min > 0.0 && self.omega_min <= self.omega_max && self.omega_max.is_finite()) {
            return Err(Error::config(
                "omega_min",
                format!(
                    "need 0 < omega_min <= omega_max, got [{}, {}]",
                    self.omega_min, self.omega_max
                ),
            ));
        }
        Ok(())
    }
}

/// `q_ref`, `q̇_ref`, `q̈_ref` at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub q_ref: Vector2<f64>,
    pub qd_ref: Vector2<f64>,
    pub qdd_ref: Vector2<f64>,
}

/// Draws `n_components` frequencies per joint, uniformly in
/// `[omega_min, omega_max]`.
pub fn sample_frequencies(config: &TrajectoryConfig) -> [Vec<f64>; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let span = config.omega_max - config.omega_min;
    let mut draw = || -> Vec<f64> {
        (0..config.n_components)
            .map(|_| config.omega_min + span * rng.random::<f64>())
            .collect()
    };
    let first = draw();
    let second = draw();
    [first, second]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub amplitude: f64,
    pub frequencies: [Vec<f64>; 2],
}

impl Trajectory {
    pub fn from_config(config: &TrajectoryConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            amplitude: config.amplitude,
            frequencies: sample_frequencies(config),
        })
    }

    pub fn evaluate(&self, t: f64) -> ReferenceSample {
        let mut out = ReferenceSample {
            q_ref: Vector2::zeros(),
            qd_ref: Vector2::zeros(),
            qdd_ref: Vector2::zeros(),
        };
        for (joint, omegas) in self.frequencies.iter().enumerate() {
            let (mut pos, mut vel, mut acc) = (0.0, 0.0, 0.0);
            for &w in omegas {
                let (s, c) = (w * t).sin_cos();
                pos += s;
                vel += w * c;
                acc -= w * w * s;
            }
            out.q_ref[joint] = self.amplitude * pos;
            out.qd_ref[joint] = self.amplitude * vel;
            out.qdd_ref[joint] = self.amplitude * acc;
        }
        out
    }

    /// `A Σ_j ω_j²` for each joint; the per-joint peak of `|q̈_ref|`.
    pub fn joint_acceleration_bounds(&self) -> Vector2<f64> {
        Vector2::from_fn(|i, _| self.amplitude * self.frequencies[i].iter().map(|w| w * w).sum::<f64>())
    }

    /// `A √2 max_i Σ_j ω_ij²`.
    pub fn coarse_acceleration_bound(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.joint_acceleration_bounds().max()
    }
}
