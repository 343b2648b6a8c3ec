//! Per-joint Gaussian-process regression of joint torque from
//! `x = (q, q̇, q̈)`, with an RBF kernel trained by maximizing the log
//! marginal likelihood, and extraction of `M̂`, `n̂` from the black-box
//! torque predictor by probing unit accelerations.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controllers::DynamicsModel;
use crate::error::{Error, Result};
use crate::rr_dynamics::{inverse_dynamics, JointState, ManipulatorParams};
use crate::trajectory::Trajectory;

pub const INPUT_DIM: usize = 6;
pub type GpInput = [f64; INPUT_DIM];

pub const DATASET_HEADER: [&str; 9] = ["t", "q1", "q2", "qd1", "qd2", "qdd1", "qdd2", "tau1", "tau2"];

/// Jitter ladder tried on the kernel diagonal, relative to the signal variance.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Smallest eigenvalue enforced on the extracted inertia estimate.
pub const MIN_INERTIA_EIG: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GpDataset {
    pub t: Vec<f64>,
    pub inputs: Vec<GpInput>,
    pub targets: [Vec<f64>; 2],
}

impl GpDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.inputs.len();
        let bad = |reason: String| Error::Data {
            what: "GP dataset".into(),
            reason,
        };
        if self.t.len() != n || self.targets.iter().any(|y| y.len() != n) {
            return Err(bad("column lengths differ".into()));
        }
        let finite = self
            .inputs
            .iter()
            .flatten()
            .chain(self.targets.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(bad("non-finite entry".into()));
        }
        Ok(())
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(DATASET_HEADER)?;
        for i in 0..self.len() {
            let mut rec = vec![self.t[i]];
            rec.extend_from_slice(&self.inputs[i]);
            rec.push(self.targets[0][i]);
            rec.push(self.targets[1][i]);
            w.write_record(rec.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != DATASET_HEADER {
            return Err(Error::Data {
                what: "GP dataset".into(),
                reason: format!("unexpected header {header:?}"),
            });
        }
        let mut ds = GpDataset {
            t: Vec::new(),
            inputs: Vec::new(),
            targets: [Vec::new(), Vec::new()],
        };
        for rec in r.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e: std::num::ParseFloatError| Error::Data {
                    what: "GP dataset".into(),
                    reason: e.to_string(),
                })?;
            ds.t.push(v[0]);
            ds.inputs.push([v[1], v[2], v[3], v[4], v[5], v[6]]);
            ds.targets[0].push(v[7]);
            ds.targets[1].push(v[8]);
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Samples the inverse dynamics of the true arm along a reference
/// trajectory at `sample_rate` Hz for `duration` seconds.
pub fn generate_dataset(
    true_params: &ManipulatorParams,
    trajectory: &Trajectory,
    duration: f64,
    sample_rate: f64,
) -> Result<GpDataset> {
    if !(duration > 0.0 && sample_rate > 0.0) {
        return Err(Error::config("gp.duration", "duration and sample_rate must be > 0"));
    }
    let n = (duration * sample_rate).round() as usize;
    let mut ds = GpDataset {
        t: Vec::with_capacity(n),
        inputs: Vec::with_capacity(n),
        targets: [Vec::new(), Vec::new()],
    };
    for k in 0..n {
        let t = k as f64 / sample_rate;
        let r = trajectory.evaluate(t);
        let state = JointState::new(r.q_ref, r.qd_ref);
        let tau = inverse_dynamics(true_params, &state, &r.qdd_ref);
        ds.t.push(t);
        ds.inputs.push([
            r.q_ref[0],
            r.q_ref[1],
            r.qd_ref[0],
            r.qd_ref[1],
            r.qdd_ref[0],
            r.qdd_ref[1],
        ]);
        ds.targets[0].push(tau[0]);
        ds.targets[1].push(tau[1]);
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfHyperparams {
    pub lengthscales: [f64; INPUT_DIM],
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl RbfHyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = self
            .lengthscales
            .iter()
            .chain([&self.signal_variance, &self.noise_variance])
            .all(|v| v.is_finite() && *v > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "gp.hyperparams",
                "all hyperparameters must be finite and > 0",
            ))
        }
    }

    /// Data-driven starting point: per-dimension input spread, target
    /// variance, and a noise level one percent of it.
    pub fn heuristic(inputs: &[GpInput], targets: &[f64]) -> Self {
        let n = inputs.len().max(1) as f64;
        let mut lengthscales = [1.0; INPUT_DIM];
        for (d, ls) in lengthscales.iter_mut().enumerate() {
            let mean = inputs.iter().map(|x| x[d]).sum::<f64>() / n;
            let var = inputs.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                *ls = var.sqrt();
            }
        }
        let mean = targets.iter().sum::<f64>() / n;
        let var = (targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).max(1e-6);
        Self {
            lengthscales,
            signal_variance: var,
            noise_variance: 1e-2 * var,
        }
    }

    fn to_log(&self) -> [f64; INPUT_DIM + 2] {
        let mut th = [0.0; INPUT_DIM + 2];
        for (t, l) in th.iter_mut().zip(&self.lengthscales) {
            *t = l.ln();
        }
        th[INPUT_DIM] = self.signal_variance.ln();
        th[INPUT_DIM + 1] = self.noise_variance.ln();
        th
    }

    fn from_log(th: &[f64; INPUT_DIM + 2]) -> Self {
        let mut lengthscales = [0.0; INPUT_DIM];
        for d in 0..INPUT_DIM {
            lengthscales[d] = th[d].exp();
        }
        Self {
            lengthscales,
            signal_variance: th[INPUT_DIM].exp(),
            noise_variance: th[INPUT_DIM + 1].exp(),
        }
    }
}

/// ARD squared-exponential kernel `σ_f² exp(-½ Σ_d (x_d - x'_d)² / ℓ_d²)`.
pub fn rbf_kernel(x1: &GpInput, x2: &GpInput, hp: &RbfHyperparams) -> f64 {
    let r2: f64 = (0..INPUT_DIM)
        .map(|d| ((x1[d] - x2[d]) / hp.lengthscales[d]).powi(2))
        .sum();
    hp.signal_variance * (-0.5 * r2).exp()
}

pub fn kernel_matrix(inputs: &[GpInput], hp: &RbfHyperparams) -> DMatrix<f64> {
    let n = inputs.len();
    DMatrix::from_fn(n, n, |i, j| rbf_kernel(&inputs[i], &inputs[j], hp))
}

fn factorize(inputs: &[GpInput], hp: &RbfHyperparams) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = inputs.len();
    let base = kernel_matrix(inputs, hp) + DMatrix::identity(n, n) * hp.noise_variance;
    let mut jitter = 0.0;
    loop {
        let k = &base + DMatrix::identity(n, n) * (jitter * hp.signal_variance);
        if let Some(chol) = Cholesky::new(k) {
            return Ok((chol, jitter));
        }
        jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
        if jitter > JITTER_MAX * (1.0 + 1e-9) {
            return Err(Error::KernelNotPd { jitter: jitter / 10.0 });
        }
    }
}

/// `log p(y | X, θ)` and its gradient with respect to
/// `θ = (ln ℓ_1..ℓ_6, ln σ_f², ln σ_n²)`.
pub fn log_marginal_likelihood(
    inputs: &[GpInput],
    targets: &[f64],
    hp: &RbfHyperparams,
) -> Result<(f64, [f64; INPUT_DIM + 2])> {
    let n = inputs.len();
    let (chol, _) = factorize(inputs, hp)?;
    let y = DVector::from_column_slice(targets);
    let alpha = chol.solve(&y);
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // ∂L/∂θ = ½ tr((ααᵀ - K⁻¹) ∂K/∂θ)
    let k_inv = chol.inverse();
    let w = &alpha * alpha.transpose() - k_inv;
    let kf = kernel_matrix(inputs, hp);
    let mut grad = [0.0; INPUT_DIM + 2];
    for d in 0..INPUT_DIM {
        let l2 = hp.lengthscales[d].powi(2);
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let diff = inputs[i][d] - inputs[j][d];
                acc += w[(i, j)] * kf[(i, j)] * diff * diff / l2;
            }
        }
        grad[d] = 0.5 * acc;
    }
    grad[INPUT_DIM] = 0.5 * w.component_mul(&kf).sum();
    grad[INPUT_DIM + 1] = 0.5 * hp.noise_variance * w.trace();
    Ok((lml, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub starts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Per-dimension lengthscales; `false` ties them to one value.
    pub ard: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: 4,
            max_iter: 500,
            tol: 1e-8,
            seed: 0,
            ard: true,
        }
    }
}

// Log-space box keeping the optimizer away from numerically meaningless
// regions.
const LOG_MIN: f64 = -18.0;
const LOG_MAX: f64 = 14.0;

fn ascend(
    inputs: &[GpInput],
    targets: &[f64],
    start: [f64; INPUT_DIM + 2],
    opts: &FitOptions,
) -> Result<([f64; INPUT_DIM + 2], f64)> {
    let project = |mut th: [f64; INPUT_DIM + 2]| {
        if !opts.ard {
            let mean = th[..INPUT_DIM].iter().sum::<f64>() / INPUT_DIM as f64;
            th[..INPUT_DIM].iter_mut().for_each(|v| *v = mean);
        }
        th.iter_mut().for_each(|v| *v = v.clamp(LOG_MIN, LOG_MAX));
        th
    };
    let eval = |th: &[f64; INPUT_DIM + 2]| log_marginal_likelihood(inputs, targets, &RbfHyperparams::from_log(th));

    let mut th = project(start);
    let (mut f, mut g) = eval(&th)?;
    let mut step = 0.1;
    for _ in 0..opts.max_iter {
        if !opts.ard {
            let mean = g[..INPUT_DIM].iter().sum::<f64>();
            g[..INPUT_DIM].iter_mut().for_each(|v| *v = mean / INPUT_DIM as f64);
        }
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            break;
        }
        // Backtracking on a normalized gradient step.
        let mut accepted = None;
        while step > 1e-12 {
            let mut cand = th;
            for (c, gi) in cand.iter_mut().zip(g.iter()) {
                *c += step * gi / gnorm;
            }
            let cand = project(cand);
            match eval(&cand) {
                Ok((fc, gc)) if fc > f => {
                    accepted = Some((cand, fc, gc));
                    break;
                }
                _ => step *= 0.5,
            }
        }
        let Some((cand, fc, gc)) = accepted else { break };
        let improvement = fc - f;
        th = cand;
        f = fc;
        g = gc;
        step = (step * 1.5).min(2.0);
        if improvement < opts.tol {
            break;
        }
    }
    Ok((th, f))
}

#[derive(Debug, Clone)]
pub struct GpJointModel {
    pub inputs: Vec<GpInput>,
    pub targets: Vec<f64>,
    pub hyperparams: RbfHyperparams,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
    pub jitter: f64,
}

impl GpJointModel {
    /// Conditions a GP with fixed hyperparameters on the data.
    pub fn new(inputs: Vec<GpInput>, targets: Vec<f64>, hyperparams: RbfHyperparams) -> Result<Self> {
        hyperparams.validate()?;
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(Error::Data {
                what: "GP joint model".into(),
                reason: "inputs/targets mismatch".into(),
            });
        }
        let (chol, jitter) = factorize(&inputs, &hyperparams)?;
        let weights = chol.solve(&DVector::from_column_slice(&targets));
        Ok(Self {
            inputs,
            targets,
            hyperparams,
            chol,
            weights,
            jitter,
        })
    }

    /// Posterior mean `k_*ᵀ (K + σ_n² I)⁻¹ y`.
    pub fn predict(&self, x: &GpInput) -> f64 {
        self.inputs
            .iter()
            .zip(self.weights.iter())
            .map(|(xi, w)| rbf_kernel(x, xi, &self.hyperparams) * w)
            .sum()
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let y = DVector::from_column_slice(&self.targets);
        let n = y.len() as f64;
        let log_det = 2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * y.dot(&self.weights) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Trains one joint's hyperparameters by multi-start gradient ascent of the
/// log marginal likelihood in log space. The first start is `init`; the
/// others are `init` shifted by seeded uniform draws in `[-1, 1]`.
pub fn fit_joint(
    inputs: &[GpInput],
    targets: &[f64],
    init: &RbfHyperparams,
    opts: &FitOptions,
) -> Result<GpJointModel> {
    if inputs.len() < 2 {
        return Err(Error::Data {
            what: "GP dataset".into(),
            reason: "need at least 2 samples".into(),
        });
    }
    init.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let base = init.to_log();
    let mut best: Option<([f64; INPUT_DIM + 2], f64)> = None;
    let mut last_err = None;
    for s in 0..opts.starts.max(1) {
        let mut start = base;
        if s > 0 {
            start.iter_mut().for_each(|v| *v += rng.random_range(-1.0..=1.0));
        }
        match ascend(inputs, targets, start, opts) {
            Ok((th, f)) if best.as_ref().is_none_or(|(_, bf)| f > *bf) => best = Some((th, f)),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    let (th, _) = best.ok_or_else(|| last_err.unwrap_or(Error::KernelNotPd { jitter: JITTER_MAX }))?;
    GpJointModel::new(inputs.to_vec(), targets.to_vec(), RbfHyperparams::from_log(&th))
}

/// Fits both joints; the two optimizations run on separate threads.
pub fn fit(dataset: &GpDataset, init: Option<[RbfHyperparams; 2]>, opts: &FitOptions) -> Result<[GpJointModel; 2]> {
    dataset.validate()?;
    let init = init.unwrap_or_else(|| {
        [
            RbfHyperparams::heuristic(&dataset.inputs, &dataset.targets[0]),
            RbfHyperparams::heuristic(&dataset.inputs, &dataset.targets[1]),
        ]
    });
    let (a, b) = rayon::join(
        || fit_joint(&dataset.inputs, &dataset.targets[0], &init[0], opts),
        || fit_joint(&dataset.inputs, &dataset.targets[1], &init[1], opts),
    );
    Ok([a?, b?])
}

/// Torque predictor with one model per joint.
pub trait TorquePredictor {
    fn predict_torque(&self, x: &GpInput) -> Vector2<f64>;
}

impl TorquePredictor for [GpJointModel; 2] {
    fn predict_torque(&self, x: &GpInput) -> Vector2<f64> {
        Vector2::new(self[0].predict(x), self[1].predict(x))
    }
}

/// Inverse dynamics of a parametric arm viewed as a black box.
pub struct ParametricPredictor<'a>(pub &'a ManipulatorParams);

impl TorquePredictor for ParametricPredictor<'_> {
    fn predict_torque(&self, x: &GpInput) -> Vector2<f64> {
        let s = JointState::new(Vector2::new(x[0], x[1]), Vector2::new(x[2], x[3]));
        inverse_dynamics(self.0, &s, &Vector2::new(x[4], x[5]))
    }
}

pub fn predict_torque(models: &[GpJointModel; 2], x: &GpInput) -> Vector2<f64> {
    models.predict_torque(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractedComponents {
    pub m_hat: Matrix2<f64>,
    pub n_hat: Vector2<f64>,
    /// Smallest eigenvalue of the symmetrized estimate before any shift.
    pub min_eig: f64,
}

impl ExtractedComponents {
    pub fn is_positive_definite(&self) -> bool {
        self.min_eig > 0.0
    }

    /// `M̂ + λI` with `λ = max(0, MIN_INERTIA_EIG - λ_min)`.
    pub fn regularized_mass(&self) -> (Matrix2<f64>, bool) {
        let lambda = (MIN_INERTIA_EIG - self.min_eig).max(0.0);
        (self.m_hat + Matrix2::identity() * lambda, lambda > 0.0)
    }
}

/// `n̂ = f(q, q̇, 0)`; column `i` of `M̂` is `f(q, q̇, e_i) - n̂`; `M̂` is
/// then symmetrized.
pub fn extract_components<P: TorquePredictor + ?Sized>(
    predictor: &P,
    q: &Vector2<f64>,
    qd: &Vector2<f64>,
) -> ExtractedComponents {
    let x = |a1: f64, a2: f64| [q[0], q[1], qd[0], qd[1], a1, a2];
    let n_hat = predictor.predict_torque(&x(0.0, 0.0));
    let c1 = predictor.predict_torque(&x(1.0, 0.0)) - n_hat;
    let c2 = predictor.predict_torque(&x(0.0, 1.0)) - n_hat;
    let raw = Matrix2::from_columns(&[c1, c2]);
    let m_hat = (raw + raw.transpose()) * 0.5;
    ExtractedComponents {
        m_hat,
        n_hat,
        min_eig: m_hat.symmetric_eigenvalues().min(),
    }
}

/// GP-backed dynamics model for the controllers. Inertia estimates that are
/// not sufficiently positive definite are shifted and counted.
pub struct GpDynamics {
    pub joints: [GpJointModel; 2],
    regularized: AtomicUsize,
}

impl GpDynamics {
    pub fn new(joints: [GpJointModel; 2]) -> Self {
        Self {
            joints,
            regularized: AtomicUsize::new(0),
        }
    }

    pub fn regularization_count(&self) -> usize {
        self.regularized.load(Ordering::Relaxed)
    }

    pub fn hyperparams(&self) -> [RbfHyperparams; 2] {
        [self.joints[0].hyperparams.clone(), self.joints[1].hyperparams.clone()]
    }
}

impl DynamicsModel for GpDynamics {
    fn mass_estimate(&self, q: &Vector2<f64>) -> Result<Matrix2<f64>> {
        // Inertia depends only on q; probe at rest.
        Ok(self.components(&JointState::new(*q, Vector2::zeros()))?.0)
    }

    fn bias_estimate(&self, state: &JointState) -> Result<Vector2<f64>> {
        Ok(self.components(state)?.1)
    }

    fn components(&self, state: &JointState) -> Result<(Matrix2<f64>, Vector2<f64>)> {
        let ex = extract_components(&self.joints, &state.q, &state.qd);
        let (m_hat, shifted) = ex.regularized_mass();
        if shifted {
            self.regularized.fetch_add(1, Ordering::Relaxed);
        }
        if !m_hat.iter().chain(ex.n_hat.iter()).all(|v| v.is_finite()) {
            return Err(Error::Model("GP prediction is not finite".into()));
        }
        Ok((m_hat, ex.n_hat))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HyperparamFile {
    joint1: RbfHyperparams,
    joint2: RbfHyperparams,
}

pub fn hyperparams_to_string(hp: &[RbfHyperparams; 2]) -> String {
    toml::to_string(&HyperparamFile {
        joint1: hp[0].clone(),
        joint2: hp[1].clone(),
    })
    .expect("hyperparameters always serialize")
}

pub fn hyperparams_from_str(text: &str, path: &Path) -> Result<[RbfHyperparams; 2]> {
    let f: HyperparamFile = toml::from_str(text).map_err(|e| Error::ConfigParse {
        path: path.to_path_buf(),
        source: Box::new(e),
    })?;
    f.joint1.validate()?;
    f.joint2.validate()?;
    Ok([f.joint1, f.joint2])
}
