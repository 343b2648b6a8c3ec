//! Tracking-error coordinates and the quadratic Lyapunov function used to
//! shape the robust term.

use nalgebra::{DMatrix, Matrix2, Matrix2x4, Matrix4, Matrix4x2, SMatrix, Vector2, Vector4};

use crate::error::{Error, Result};

/// Position and velocity tracking errors. `xi()` stacks them as `[e; ė]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorState {
    pub e: Vector2<f64>,
    pub ed: Vector2<f64>,
}

impl ErrorState {
    pub fn xi(&self) -> Vector4<f64> {
        Vector4::new(self.e[0], self.e[1], self.ed[0], self.ed[1])
    }

    pub fn from_xi(xi: &Vector4<f64>) -> Self {
        Self {
            e: xi.fixed_rows::<2>(0).into_owned(),
            ed: xi.fixed_rows::<2>(2).into_owned(),
        }
    }
}

/// `e = q_ref - q`, `ė = q̇_ref - q̇`.
pub fn error_state(q: &Vector2<f64>, qd: &Vector2<f64>, q_ref: &Vector2<f64>, qd_ref: &Vector2<f64>) -> ErrorState {
    ErrorState {
        e: q_ref - q,
        ed: qd_ref - qd,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovDesign {
    pub kp: Matrix2<f64>,
    pub kd: Matrix2<f64>,
    /// `[K_P K_D]`
    pub k: Matrix2x4<f64>,
    /// `[[0, I], [-K_P, -K_D]]`
    pub htilde: Matrix4<f64>,
    /// `[[0], [I]]`
    pub d: Matrix4x2<f64>,
    pub q: Matrix4<f64>,
    pub p: Matrix4<f64>,
    pub eps: f64,
    pub eps1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovSample {
    pub v: f64,
    pub vdot: f64,
    pub z: Vector2<f64>,
    pub znorm: f64,
}

/// Residual tolerance on `H̃ᵀQ + QH̃ + P` accepted by [`build_design`].
pub const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-10;

/// Builds the design for diagonal gains `K_P = kp I`, `K_D = kd I` with
/// `P = I`.
pub fn build_design(kp: f64, kd: f64, eps: f64, eps1: f64) -> Result<LyapunovDesign> {
    build_design_scaled(kp, kd, eps, eps1, 1.0)
}

/// As [`build_design`] but with `P = p_scale · I`. Scaling `P` scales `Q`
/// (and hence `z`) linearly.
pub fn build_design_scaled(kp: f64, kd: f64, eps: f64, eps1: f64, p_scale: f64) -> Result<LyapunovDesign> {
    build_design_weighted(kp, kd, eps, eps1, p_scale, p_scale)
}

/// As [`build_design`] but with `P = diag(p_e I, p_ed I)`, weighting the
/// position and velocity errors separately.
pub fn build_design_weighted(kp: f64, kd: f64, eps: f64, eps1: f64, p_e: f64, p_ed: f64) -> Result<LyapunovDesign> {
    for (key, v) in [
        ("kp", kp),
        ("kd", kd),
        ("eps", eps),
        ("eps1", eps1),
        ("p_e", p_e),
        ("p_ed", p_ed),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::config(key, format!("must be finite and > 0, got {v}")));
        }
    }
    let kp_m = Matrix2::identity() * kp;
    let kd_m = Matrix2::identity() * kd;
    let mut htilde = Matrix4::zeros();
    htilde.fixed_view_mut::<2, 2>(0, 2).copy_from(&Matrix2::identity());
    htilde.fixed_view_mut::<2, 2>(2, 0).copy_from(&(-kp_m));
    htilde.fixed_view_mut::<2, 2>(2, 2).copy_from(&(-kd_m));
    let mut d = Matrix4x2::zeros();
    d.fixed_view_mut::<2, 2>(2, 0).copy_from(&Matrix2::identity());
    let mut k = Matrix2x4::zeros();
    k.fixed_view_mut::<2, 2>(0, 0).copy_from(&kp_m);
    k.fixed_view_mut::<2, 2>(0, 2).copy_from(&kd_m);

    let p = Matrix4::from_diagonal(&Vector4::new(p_e, p_e, p_ed, p_ed));
    let q = solve_static(&htilde, &p)?;

    let design = LyapunovDesign {
        kp: kp_m,
        kd: kd_m,
        k,
        htilde,
        d,
        q,
        p,
        eps,
        eps1,
    };
    design.verify()?;
    Ok(design)
}

impl LyapunovDesign {
    pub fn residual(&self) -> f64 {
        (self.htilde.transpose() * self.q + self.q * self.htilde + self.p).norm()
    }

    /// Induced 2-norm of the stacked gain `[K_P K_D]`.
    pub fn k_norm(&self) -> f64 {
        self.k.singular_values().max()
    }

    pub fn q_blocks(&self) -> (Matrix2<f64>, Matrix2<f64>, Matrix2<f64>) {
        (
            self.q.fixed_view::<2, 2>(0, 0).into_owned(),
            self.q.fixed_view::<2, 2>(0, 2).into_owned(),
            self.q.fixed_view::<2, 2>(2, 2).into_owned(),
        )
    }

    pub fn verify(&self) -> Result<()> {
        let res = self.residual();
        if !(res < LYAPUNOV_RESIDUAL_TOL * self.p.norm().max(1.0)) {
            return Err(Error::Lyapunov(format!("residual {res:e} above tolerance")));
        }
        for (name, m) in [("Q", &self.q), ("P", &self.p)] {
            if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max() {
                return Err(Error::Lyapunov(format!("{name} is not symmetric")));
            }
            if m.symmetric_eigenvalues().min() <= 0.0 {
                return Err(Error::Lyapunov(format!("{name} is not positive definite")));
            }
        }
        let (q11, q12, q22) = self.q_blocks();
        for (name, b) in [("Q11", q11), ("Q12", q12), ("Q22", q22)] {
            let sv = b.singular_values();
            if sv.min() <= 1e-12 * sv.max() {
                return Err(Error::Lyapunov(format!("block {name} is rank deficient")));
            }
        }
        Ok(())
    }

    /// `z = DᵀQξ`.
    pub fn z(&self, xi: &Vector4<f64>) -> Vector2<f64> {
        self.d.transpose() * (self.q * xi)
    }
}

/// `V = ξᵀQξ`, `V̇ = ξ̇ᵀQξ + ξᵀQξ̇`, `z = DᵀQξ`.
pub fn lyapunov_sample(design: &LyapunovDesign, xi: &ErrorState, xidot: &Vector4<f64>) -> LyapunovSample {
    let x = xi.xi();
    let qx = design.q * x;
    let v = x.dot(&qx);
    let vdot = xidot.dot(&qx) + x.dot(&(design.q * xidot));
    let z = design.d.transpose() * qx;
    LyapunovSample {
        v,
        vdot,
        z,
        znorm: z.norm(),
    }
}

/// Central-difference `V̇` from a uniformly sampled `V` trace. End points use
/// one-sided differences. Intended for post-processing logs only.
pub fn vdot_finite_difference(v: &[f64], step: f64) -> Vec<f64> {
    let n = v.len();
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| {
                if i == 0 {
                    (v[1] - v[0]) / step
                } else if i == n - 1 {
                    (v[n - 1] - v[n - 2]) / step
                } else {
                    (v[i + 1] - v[i - 1]) / (2.0 * step)
                }
            })
            .collect(),
    }
}

/// Solves `AᵀX + XA + P = 0` for Hurwitz `A` with the scaled Newton
/// iteration for the matrix sign function of `[[Aᵀ, P], [0, -A]]`.
pub fn solve_continuous_lyapunov(a: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    const MAX_ITER: usize = 100;
    let n = a.nrows();
    if a.ncols() != n || p.shape() != (n, n) {
        return Err(Error::Lyapunov("dimension mismatch".into()));
    }
    let mut ak = a.clone();
    let mut pk = p.clone();
    for _ in 0..MAX_ITER {
        let lu = ak.clone().lu();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| Error::Lyapunov("singular iterate; matrix is not Hurwitz".into()))?;
        let c = ak.determinant().abs().powf(1.0 / n as f64);
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Lyapunov("degenerate scaling in sign iteration".into()));
        }
        let next_a = (&ak / c + &inv * c) * 0.5;
        pk = (&pk / c + inv.transpose() * &pk * &inv * c) * 0.5;
        let delta = (&next_a - &ak).norm() / next_a.norm();
        ak = next_a;
        if delta < 1e-14 {
            break;
        }
    }
    if (ak + DMatrix::<f64>::identity(n, n)).norm() > 1e-8 {
        return Err(Error::Lyapunov(
            "sign iteration did not reach -I; matrix is not Hurwitz".into(),
        ));
    }
    let x = pk * 0.5;
    Ok((&x + x.transpose()) * 0.5)
}

fn solve_static<const N: usize>(a: &SMatrix<f64, N, N>, p: &SMatrix<f64, N, N>) -> Result<SMatrix<f64, N, N>> {
    let x = solve_continuous_lyapunov(
        &DMatrix::from_column_slice(N, N, a.as_slice()),
        &DMatrix::from_column_slice(N, N, p.as_slice()),
    )?;
    Ok(SMatrix::<f64, N, N>::from_column_slice(x.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    // vec(AᵀX + XA) = (I ⊗ Aᵀ + Aᵀ ⊗ I) vec(X) for column-major vec.
    fn kronecker_oracle(a: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let at = a.transpose();
        let eye = DMatrix::<f64>::identity(n, n);
        let big = eye.kronecker(&at) + at.kronecker(&eye);
        let rhs = -DVector::from_column_slice(p.as_slice());
        let sol = big.lu().solve(&rhs).expect("nonsingular for Hurwitz A");
        DMatrix::from_column_slice(n, n, sol.as_slice())
    }

    #[test]
    fn default_gains_satisfy_residual() {
        let d = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
        assert!(d.residual() < 1e-10, "{}", d.residual());
        assert!(d.q.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn one_dof_matches_kronecker_solve() {
        let a = Matrix2::new(0.0, 1.0, -1.0, -1.0);
        let ours = solve_static(&a, &Matrix2::identity()).unwrap();
        let oracle = kronecker_oracle(
            &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -1.0]),
            &DMatrix::identity(2, 2),
        );
        for i in 0..2 {
            for j in 0..2 {
                assert!((ours[(i, j)] - oracle[(i, j)]).abs() < 1e-12);
            }
        }
        // Two decoupled joints reproduce the scalar blocks.
        let d = build_design(1.0, 1.0, 0.5, 0.01).unwrap();
        let (q11, q12, q22) = d.q_blocks();
        assert!((q11 - Matrix2::identity() * oracle[(0, 0)]).abs().max() < 1e-12);
        assert!((q12 - Matrix2::identity() * oracle[(0, 1)]).abs().max() < 1e-12);
        assert!((q22 - Matrix2::identity() * oracle[(1, 1)]).abs().max() < 1e-12);
    }

    #[test]
    fn four_by_four_matches_kronecker_solve() {
        let d = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
        let a = DMatrix::from_iterator(4, 4, d.htilde.iter().copied());
        let oracle = kronecker_oracle(&a, &DMatrix::identity(4, 4));
        for i in 0..4 {
            for j in 0..4 {
                assert!((d.q[(i, j)] - oracle[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_non_hurwitz() {
        let a = Matrix2::new(0.0, 1.0, 1.0, -1.0);
        assert!(solve_static(&a, &Matrix2::identity()).is_err());
        assert!(build_design(0.0, 20.0, 0.5, 0.01).is_err());
        assert!(build_design(100.0, 20.0, -0.5, 0.01).is_err());
    }

    #[test]
    fn structure_of_design() {
        let d = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
        assert_eq!(d.htilde.fixed_view::<2, 2>(0, 0).into_owned(), Matrix2::zeros());
        assert_eq!(d.htilde.fixed_view::<2, 2>(0, 2).into_owned(), Matrix2::identity());
        assert_eq!(
            d.htilde.fixed_view::<2, 2>(2, 0).into_owned(),
            Matrix2::identity() * -100.0
        );
        assert_eq!(d.d.fixed_view::<2, 2>(2, 0).into_owned(), Matrix2::identity());
        assert!((d.k_norm() - (100.0f64.powi(2) + 20.0f64.powi(2)).sqrt()).abs() < 1e-9);
        d.verify().unwrap();
    }

    #[test]
    fn error_state_arithmetic() {
        let q_ref = Vector2::new(1.0, 2.0);
        let zero = error_state(&q_ref, &Vector2::new(0.1, 0.2), &q_ref, &Vector2::new(0.1, 0.2));
        assert_eq!(zero.xi(), Vector4::zeros());
        let es = error_state(&Vector2::new(0.5, 2.5), &Vector2::zeros(), &q_ref, &Vector2::zeros());
        assert_eq!(es.e, Vector2::new(0.5, -0.5));
        let bigger = error_state(&Vector2::new(0.6, 2.6), &Vector2::zeros(), &q_ref, &Vector2::zeros());
        assert!(bigger.e[0] < es.e[0] && bigger.e[1] < es.e[1]);
        assert_eq!(ErrorState::from_xi(&es.xi()), es);
    }

    #[test]
    fn sample_at_origin_is_zero() {
        let d = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
        let s = lyapunov_sample(&d, &ErrorState::from_xi(&Vector4::zeros()), &Vector4::zeros());
        assert_eq!(s.v, 0.0);
        assert_eq!(s.z, Vector2::zeros());
    }

    #[test]
    fn unforced_vdot_equals_minus_xi_p_xi() {
        let d = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
        let xi = Vector4::new(0.3, -0.2, 1.5, 0.7);
        let s = lyapunov_sample(&d, &ErrorState::from_xi(&xi), &(d.htilde * xi));
        let expected = -xi.dot(&(d.p * xi));
        assert!((s.vdot - expected).abs() < 1e-10);
        assert!(s.vdot < 0.0);
    }

    #[test]
    fn homogeneity() {
        let d = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
        let xi = Vector4::new(0.1, 0.4, -0.3, 0.2);
        let s1 = lyapunov_sample(&d, &ErrorState::from_xi(&xi), &Vector4::zeros());
        let s2 = lyapunov_sample(&d, &ErrorState::from_xi(&(xi * 2.0)), &Vector4::zeros());
        assert!((s2.v - 4.0 * s1.v).abs() < 1e-12 * s2.v.abs().max(1.0));
        assert!((s2.z - s1.z * 2.0).abs().max() < 1e-14);
    }

    #[test]
    fn z_extracts_q12t_e_plus_q22_ed() {
        let d = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
        let es = ErrorState {
            e: Vector2::new(0.2, -0.1),
            ed: Vector2::new(-0.4, 0.9),
        };
        let (_, q12, q22) = d.q_blocks();
        let direct = q12.transpose() * es.e + q22 * es.ed;
        assert!((d.z(&es.xi()) - direct).abs().max() < 1e-15);
    }

    #[test]
    fn finite_difference_vdot_of_quadratic() {
        let step = 0.01;
        let v: Vec<f64> = (0..100).map(|k| (k as f64 * step).powi(2)).collect();
        let vd = vdot_finite_difference(&v, step);
        assert!((vd[50] - 2.0 * 0.5).abs() < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn v_positive_away_from_origin(
                a in -1.0..1.0f64, b in -1.0..1.0f64, c in -1.0..1.0f64, e in -1.0..1.0f64,
            ) {
                let xi = Vector4::new(a, b, c, e);
                prop_assume!(xi.norm() > 1e-6);
                let d = build_design(100.0, 20.0, 0.5, 0.01).unwrap();
                let s = lyapunov_sample(&d, &ErrorState::from_xi(&xi), &(d.htilde * xi));
                prop_assert!(s.v > 0.0);
                let expected = -xi.dot(&(d.p * xi));
                prop_assert!((s.vdot - expected).abs() < 1e-10);
            }

            #[test]
            fn design_valid_for_positive_gains(kp in 0.5..500.0f64, kd in 0.5..80.0f64) {
                let d = build_design(kp, kd, 0.5, 0.01).unwrap();
                prop_assert!(d.q.symmetric_eigenvalues().min() > 0.0);
            }
        }
    }
}
