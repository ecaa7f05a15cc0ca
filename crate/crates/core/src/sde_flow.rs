//! Jumps transformed by an independent diffusion.
//!
//! Each jump `x` is replaced by the terminal value `X_T^x` of
//!
//! ```text
//! X_t = x + Σⱼ ∫ A_j(X_s, x) dB^j_s + ∫ B(X_s, x) ds
//! ```
//!
//! solved by Euler–Maruyama on a uniform grid. The flow Jacobian `K` (the
//! derivative in the starting point, second argument frozen) follows the
//! discrete variational recursion
//!
//! ```text
//! K_{v+1} = (I + Σⱼ ∂A_j(X_v, x) ΔB^j_v + ∂B(X_v, x) dt) K_v,   K_0 = I.
//! ```
//!
//! On Wiener space with the Ornstein–Uhlenbeck structure the carré du champ
//! and gradient of `X_T` are
//!
//! ```text
//! γ[X_T] = K_T (Σ_v K_v⁻¹ σ_v σ_vᵀ K_v⁻ᵀ dt) K_Tᵀ
//! X_T♭   = K_T  Σ_v K_v⁻¹ σ_v ΔB̂_v
//! ```
//!
//! with `B̂` an independent copy of the driver.

use std::cmp::Ordering;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config_space::BasePoint;
use crate::error::{LentError, Result};
use crate::lent_particle::PointFn;
use crate::linalg::condition_number;
use crate::mark_dirichlet::{Mark, MarkFunction, MarkSpace};
use crate::rng::{derive_seed, rng_from_seed, SimRng};

/// Default number of Euler steps.
pub const DEFAULT_STEPS: usize = 256;
/// Flow Jacobians with a larger condition number are reported as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Brownian increments `ΔB^j_v`, `v < n_steps`, `j < noise_dim`, each
/// `N(0, dt)` at generation time.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "DriverPathRepr", into = "DriverPathRepr")]
pub struct DriverPath {
    n_steps: usize,
    noise_dim: usize,
    dt: f64,
    // row-major n_steps × noise_dim
    increments: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DriverPathRepr {
    n_steps: usize,
    dt: f64,
    increments: Vec<Vec<f64>>,
}

impl TryFrom<DriverPathRepr> for DriverPath {
    type Error = LentError;

    fn try_from(r: DriverPathRepr) -> Result<Self> {
        let noise_dim = r.increments.first().map_or(0, Vec::len);
        if r.increments.len() != r.n_steps || r.increments.iter().any(|row| row.len() != noise_dim)
        {
            return Err(LentError::InvalidSpec(
                "driver path increments must form an n_steps × d array".into(),
            ));
        }
        DriverPath::new(r.dt, noise_dim, r.increments.concat())
    }
}

impl From<DriverPath> for DriverPathRepr {
    fn from(p: DriverPath) -> Self {
        DriverPathRepr {
            n_steps: p.n_steps,
            dt: p.dt,
            increments: p
                .increments
                .chunks(p.noise_dim.max(1))
                .map(<[f64]>::to_vec)
                .collect(),
        }
    }
}

impl DriverPath {
    pub fn new(dt: f64, noise_dim: usize, increments: Vec<f64>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(LentError::InvalidSpec(format!(
                "dt must be positive, got {dt}"
            )));
        }
        if noise_dim == 0 || increments.is_empty() || !increments.len().is_multiple_of(noise_dim) {
            return Err(LentError::InvalidSpec(
                "driver path needs at least one step and one noise dimension".into(),
            ));
        }
        if increments.iter().any(|v| !v.is_finite()) {
            return Err(LentError::NonFiniteValue("driver increment".into()));
        }
        Ok(Self {
            n_steps: increments.len() / noise_dim,
            noise_dim,
            dt,
            increments,
        })
    }

    pub fn sample(n_steps: usize, dt: f64, noise_dim: usize, rng: &mut SimRng) -> Self {
        let sd = dt.sqrt();
        let increments = (0..n_steps * noise_dim)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            n_steps,
            noise_dim,
            dt,
            increments,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Terminal time `T = n_steps · dt`.
    pub fn horizon(&self) -> f64 {
        self.n_steps as f64 * self.dt
    }

    pub fn increment(&self, step: usize, j: usize) -> f64 {
        self.increments[step * self.noise_dim + j]
    }

    pub fn step_increments(&self, step: usize) -> &[f64] {
        &self.increments[step * self.noise_dim..(step + 1) * self.noise_dim]
    }

    /// Copy with increment `(step, j)` shifted by `delta`.
    pub fn perturbed(&self, step: usize, j: usize, delta: f64) -> Self {
        let mut out = self.clone();
        out.increments[step * self.noise_dim + j] += delta;
        out
    }

    /// Same Brownian path on a grid twice as coarse. Requires an even step
    /// count.
    pub fn coarsen(&self) -> Option<Self> {
        if !self.n_steps.is_multiple_of(2) || self.n_steps < 2 {
            return None;
        }
        let d = self.noise_dim;
        let increments = (0..self.n_steps / 2)
            .flat_map(|v| (0..d).map(move |j| (v, j)))
            .map(|(v, j)| self.increment(2 * v, j) + self.increment(2 * v + 1, j))
            .collect();
        Some(Self {
            n_steps: self.n_steps / 2,
            noise_dim: d,
            dt: 2.0 * self.dt,
            increments,
        })
    }

    pub(crate) fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.n_steps
            .cmp(&other.n_steps)
            .then(self.noise_dim.cmp(&other.noise_dim))
            .then(self.dt.total_cmp(&other.dt))
            .then_with(|| {
                for (a, b) in self.increments.iter().zip(&other.increments) {
                    match a.total_cmp(b) {
                        Ordering::Equal => continue,
                        ord => return ord,
                    }
                }
                Ordering::Equal
            })
    }
}

impl PartialEq for DriverPath {
    fn eq(&self, other: &Self) -> bool {
        self.canonical_cmp(other) == Ordering::Equal
    }
}

fn fd_step(z: &DVector<f64>) -> f64 {
    1e-6 * (z.norm() + 1.0)
}

/// Coefficients of the jump-transforming SDE; first argument is the state
/// `z ∈ ℝᵐ`, second the jump `x ∈ ℝᵐ` it started from.
pub trait SdeCoefficients: Send + Sync {
    fn state_dim(&self) -> usize;

    fn noise_dim(&self) -> usize;

    fn drift(&self, z: &DVector<f64>, x: &DVector<f64>) -> DVector<f64>;

    /// `σ(z, x)`, the `m × d` matrix whose columns are the `A_j`.
    fn diffusion(&self, z: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64>;

    fn drift_jacobian(&self, z: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        let m = self.state_dim();
        let h = fd_step(z);
        let mut jac = DMatrix::zeros(m, m);
        for c in 0..m {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[c] += h;
            zm[c] -= h;
            let col = (self.drift(&zp, x) - self.drift(&zm, x)) / (2.0 * h);
            jac.set_column(c, &col);
        }
        jac
    }

    /// `∂A_j` with respect to the state, one `m × m` matrix per noise
    /// dimension.
    fn diffusion_jacobians(&self, z: &DVector<f64>, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let (m, d) = (self.state_dim(), self.noise_dim());
        let h = fd_step(z);
        let mut jacs = vec![DMatrix::zeros(m, m); d];
        for c in 0..m {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[c] += h;
            zm[c] -= h;
            let diff = (self.diffusion(&zp, x) - self.diffusion(&zm, x)) / (2.0 * h);
            for (j, jac) in jacs.iter_mut().enumerate() {
                jac.set_column(c, &diff.column(j));
            }
        }
        jacs
    }
}

/// Diffusion fields `x ↦ A_j(x)` that ignore the state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "field", rename_all = "snake_case", deny_unknown_fields)]
pub enum JumpField {
    /// `A₁(x) = x`.
    Identity { dim: usize },
    /// `A₁(x) = |x| (cos(1/|x|), sin(1/|x|))`, `A₁(0) = 0`.
    Spiral,
    /// `A₁(x) = x`, `A₂(x) = R_{π/2} x` in the plane.
    RotationPair,
    /// Constant vectors `A_j(x) = c_j`.
    Constant { vectors: Vec<Vec<f64>> },
}

impl JumpField {
    fn dims(&self) -> (usize, usize) {
        match self {
            JumpField::Identity { dim } => (*dim, 1),
            JumpField::Spiral => (2, 1),
            JumpField::RotationPair => (2, 2),
            JumpField::Constant { vectors } => (vectors.first().map_or(0, Vec::len), vectors.len()),
        }
    }

    pub fn columns(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            JumpField::Identity { .. } => DMatrix::from_column_slice(x.len(), 1, x.as_slice()),
            JumpField::Spiral => {
                let r = x.norm();
                if r == 0.0 {
                    DMatrix::zeros(2, 1)
                } else {
                    DMatrix::from_column_slice(2, 1, &[r * (1.0 / r).cos(), r * (1.0 / r).sin()])
                }
            }
            JumpField::RotationPair => DMatrix::from_column_slice(2, 2, &[x[0], x[1], -x[1], x[0]]),
            JumpField::Constant { vectors } => {
                let m = vectors[0].len();
                DMatrix::from_fn(m, vectors.len(), |i, j| vectors[j][i])
            }
        }
    }
}

/// Named coefficient families loadable from configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientPreset {
    /// `A_j ≡ 0`, `B ≡ 0`.
    Zero { dim: usize, noise_dim: usize },
    /// Constant `σ` given row by row (`m` rows of length `d`), `B ≡ 0`.
    Additive { sigma: Vec<Vec<f64>> },
    /// `A_j(z, x) = C_j z`, `B(z, x) = D z`.
    Linear {
        diffusion: Vec<Vec<Vec<f64>>>,
        drift: Vec<Vec<f64>>,
    },
    /// Planar rotation noise `A₁(z) = ω R_{π/2} z` with the Itô drift
    /// `B(z) = -ω²/2 z` that keeps `|z|` nearly constant.
    Rotation { rate: f64 },
    /// `A₁(z) = scale · sin(z)`, `B(z) = -damping · tanh(z)` componentwise.
    Sinusoidal {
        dim: usize,
        scale: f64,
        damping: f64,
    },
    /// State-independent diffusion `A_j(z, x) = field_j(x)` with linear
    /// damping `B(z, x) = -damping · z`.
    JumpField {
        #[serde(flatten)]
        field: JumpField,
        #[serde(default)]
        damping: f64,
    },
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

impl CoefficientPreset {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(LentError::InvalidSpec(msg.to_string()));
        let rect = |rows: &[Vec<f64>], cols: usize| {
            !rows.is_empty()
                && rows
                    .iter()
                    .all(|r| r.len() == cols && r.iter().all(|v| v.is_finite()))
        };
        match self {
            CoefficientPreset::Zero { dim, noise_dim } => {
                if *dim == 0 || *noise_dim == 0 {
                    return bad("zero preset needs positive dimensions");
                }
            }
            CoefficientPreset::Additive { sigma } => {
                let d = sigma.first().map_or(0, Vec::len);
                if d == 0 || !rect(sigma, d) {
                    return bad("additive sigma must be a nonempty finite m × d array");
                }
            }
            CoefficientPreset::Linear { diffusion, drift } => {
                let m = drift.len();
                if m == 0 || !rect(drift, m) {
                    return bad("linear drift must be a finite m × m array");
                }
                if diffusion.is_empty() || diffusion.iter().any(|c| c.len() != m || !rect(c, m)) {
                    return bad("linear diffusion must be a nonempty list of m × m arrays");
                }
            }
            CoefficientPreset::Rotation { rate } => {
                if !rate.is_finite() {
                    return bad("rotation rate must be finite");
                }
            }
            CoefficientPreset::Sinusoidal {
                dim,
                scale,
                damping,
            } => {
                if *dim == 0 || !scale.is_finite() || !damping.is_finite() {
                    return bad("sinusoidal preset needs dim > 0 and finite parameters");
                }
            }
            CoefficientPreset::JumpField { field, damping } => {
                let (m, d) = field.dims();
                if m == 0 || d == 0 || !damping.is_finite() {
                    return bad("jump field needs positive dimensions and finite damping");
                }
                if let JumpField::Constant { vectors } = field {
                    if !rect(vectors, m) {
                        return bad("constant field vectors must share one finite dimension");
                    }
                }
            }
        }
        Ok(())
    }
}

impl SdeCoefficients for CoefficientPreset {
    fn state_dim(&self) -> usize {
        match self {
            CoefficientPreset::Zero { dim, .. } | CoefficientPreset::Sinusoidal { dim, .. } => *dim,
            CoefficientPreset::Additive { sigma } => sigma.len(),
            CoefficientPreset::Linear { drift, .. } => drift.len(),
            CoefficientPreset::Rotation { .. } => 2,
            CoefficientPreset::JumpField { field, .. } => field.dims().0,
        }
    }

    fn noise_dim(&self) -> usize {
        match self {
            CoefficientPreset::Zero { noise_dim, .. } => *noise_dim,
            CoefficientPreset::Additive { sigma } => sigma.first().map_or(0, Vec::len),
            CoefficientPreset::Linear { diffusion, .. } => diffusion.len(),
            CoefficientPreset::Rotation { .. } | CoefficientPreset::Sinusoidal { .. } => 1,
            CoefficientPreset::JumpField { field, .. } => field.dims().1,
        }
    }

    fn drift(&self, z: &DVector<f64>, _x: &DVector<f64>) -> DVector<f64> {
        match self {
            CoefficientPreset::Zero { .. } | CoefficientPreset::Additive { .. } => {
                DVector::zeros(z.len())
            }
            CoefficientPreset::Linear { drift, .. } => matrix_from_rows(drift) * z,
            CoefficientPreset::Rotation { rate } => z * (-0.5 * rate * rate),
            CoefficientPreset::Sinusoidal { damping, .. } => z.map(|v| -damping * v.tanh()),
            CoefficientPreset::JumpField { damping, .. } => z * (-damping),
        }
    }

    fn diffusion(&self, z: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            CoefficientPreset::Zero { dim, noise_dim } => DMatrix::zeros(*dim, *noise_dim),
            CoefficientPreset::Additive { sigma } => matrix_from_rows(sigma),
            CoefficientPreset::Linear { diffusion, .. } => {
                let mut s = DMatrix::zeros(z.len(), diffusion.len());
                for (j, c) in diffusion.iter().enumerate() {
                    s.set_column(j, &(matrix_from_rows(c) * z));
                }
                s
            }
            CoefficientPreset::Rotation { rate } => {
                DMatrix::from_column_slice(2, 1, &[-rate * z[1], rate * z[0]])
            }
            CoefficientPreset::Sinusoidal { scale, .. } => {
                let col = z.map(|v| scale * v.sin());
                DMatrix::from_column_slice(z.len(), 1, col.as_slice())
            }
            CoefficientPreset::JumpField { field, .. } => field.columns(x),
        }
    }

    fn drift_jacobian(&self, z: &DVector<f64>, _x: &DVector<f64>) -> DMatrix<f64> {
        let m = z.len();
        match self {
            CoefficientPreset::Zero { .. } | CoefficientPreset::Additive { .. } => {
                DMatrix::zeros(m, m)
            }
            CoefficientPreset::Linear { drift, .. } => matrix_from_rows(drift),
            CoefficientPreset::Rotation { rate } => DMatrix::identity(m, m) * (-0.5 * rate * rate),
            CoefficientPreset::Sinusoidal { damping, .. } => {
                DMatrix::from_diagonal(&z.map(|v| -damping / v.cosh().powi(2)))
            }
            CoefficientPreset::JumpField { damping, .. } => DMatrix::identity(m, m) * (-damping),
        }
    }

    fn diffusion_jacobians(&self, z: &DVector<f64>, _x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let m = z.len();
        match self {
            CoefficientPreset::Zero { noise_dim, .. } => vec![DMatrix::zeros(m, m); *noise_dim],
            CoefficientPreset::Additive { sigma } => {
                vec![DMatrix::zeros(m, m); sigma.first().map_or(0, Vec::len)]
            }
            CoefficientPreset::Linear { diffusion, .. } => {
                diffusion.iter().map(|c| matrix_from_rows(c)).collect()
            }
            CoefficientPreset::Rotation { rate } => {
                vec![DMatrix::from_row_slice(2, 2, &[0.0, -rate, *rate, 0.0])]
            }
            CoefficientPreset::Sinusoidal { scale, .. } => {
                vec![DMatrix::from_diagonal(&z.map(|v| scale * v.cos()))]
            }
            CoefficientPreset::JumpField { field, .. } => {
                vec![DMatrix::zeros(m, m); field.dims().1]
            }
        }
    }
}

/// Euler trajectory of the SDE together with its flow Jacobian.
#[derive(Clone, Debug)]
pub struct FlowState {
    dt: f64,
    /// `X_v`, `v = 0..=n`.
    pub trajectory: Vec<DVector<f64>>,
    /// `K_v`, `v = 0..=n`.
    pub jacobian: Vec<DMatrix<f64>>,
    /// `K_v⁻¹`, `v = 0..=n`.
    pub inverse_jacobian: Vec<DMatrix<f64>>,
    /// `σ(X_v, x)`, `v = 0..=n`.
    pub diffusion: Vec<DMatrix<f64>>,
}

impl FlowState {
    pub fn n_steps(&self) -> usize {
        self.trajectory.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.trajectory
            .last()
            .expect("trajectory has at least one state")
    }

    pub fn terminal_jacobian(&self) -> &DMatrix<f64> {
        self.jacobian.last().expect("at least one Jacobian")
    }

    /// `K_v⁻¹ σ(X_v, x)` for the left endpoints `v < n`.
    fn pulled_back(&self) -> impl Iterator<Item = DMatrix<f64>> + '_ {
        (0..self.n_steps()).map(move |v| &self.inverse_jacobian[v] * &self.diffusion[v])
    }

    /// Discrete carré du champ `γ[X_T]`.
    pub fn gamma(&self) -> DMatrix<f64> {
        let m = self.terminal().len();
        let mut inner = DMatrix::zeros(m, m);
        for g in self.pulled_back() {
            inner += &g * g.transpose();
        }
        inner *= self.dt;
        let kt = self.terminal_jacobian();
        let out = kt * inner * kt.transpose();
        (&out + out.transpose()) * 0.5
    }

    /// Derivative of `X_T` in the standardized driver coordinates
    /// `ξ_{v,j} = ΔB^j_v / √dt`: column `v·d + j` is
    /// `√dt · K_T K_v⁻¹ A_j(X_v, x)`.
    pub fn tangent(&self) -> DMatrix<f64> {
        let m = self.terminal().len();
        let d = self.diffusion[0].ncols();
        let n = self.n_steps();
        let sd = self.dt.sqrt();
        let kt = self.terminal_jacobian();
        let mut out = DMatrix::zeros(m, n * d);
        for (v, g) in self.pulled_back().enumerate() {
            let cols = kt * g * sd;
            for j in 0..d {
                out.set_column(v * d + j, &cols.column(j));
            }
        }
        out
    }

    /// Precomputed form of [`FlowState::flat_sample`] for repeated draws.
    pub fn flat_sampler(&self) -> FlatSampler {
        FlatSampler {
            terminal_jacobian: self.terminal_jacobian().clone(),
            pulled_back: self.pulled_back().collect(),
            dt: self.dt,
        }
    }

    /// One draw of `X_T♭` with a fresh driver copy `B̂` from `rng`.
    pub fn flat_sample(&self, rng: &mut SimRng) -> DVector<f64> {
        self.flat_sampler().sample(rng)
    }

    /// `K_T K_v⁻¹ σ(X_v, x)`.
    pub fn spanning_matrix(&self, v: usize) -> Result<DMatrix<f64>> {
        if v > self.n_steps() {
            return Err(LentError::InvalidSpec(format!(
                "step index {v} exceeds the grid ({} steps)",
                self.n_steps()
            )));
        }
        Ok(self.terminal_jacobian() * &self.inverse_jacobian[v] * &self.diffusion[v])
    }
}

/// Repeated sampling of `X_T♭` for a fixed driver path.
#[derive(Clone, Debug)]
pub struct FlatSampler {
    terminal_jacobian: DMatrix<f64>,
    pulled_back: Vec<DMatrix<f64>>,
    dt: f64,
}

impl FlatSampler {
    pub fn sample(&self, rng: &mut SimRng) -> DVector<f64> {
        let m = self.terminal_jacobian.nrows();
        let sd = self.dt.sqrt();
        let mut acc = DVector::zeros(m);
        for g in &self.pulled_back {
            for j in 0..g.ncols() {
                let db: f64 = sd * rng.sample::<f64, _>(StandardNormal);
                acc.axpy(db, &g.column(j), 1.0);
            }
        }
        &self.terminal_jacobian * acc
    }
}

fn check_dims(coeffs: &dyn SdeCoefficients, len: usize, path: &DriverPath) -> Result<()> {
    if len != coeffs.state_dim() {
        return Err(LentError::DimensionMismatch {
            expected: coeffs.state_dim(),
            found: len,
        });
    }
    if path.noise_dim() != coeffs.noise_dim() {
        return Err(LentError::DimensionMismatch {
            expected: coeffs.noise_dim(),
            found: path.noise_dim(),
        });
    }
    Ok(())
}

/// Euler–Maruyama solution started at the jump `x` itself.
pub fn euler_solve(
    coeffs: &dyn SdeCoefficients,
    x: &DVector<f64>,
    path: &DriverPath,
) -> Result<FlowState> {
    euler_solve_from(coeffs, x, x, path)
}

/// Euler–Maruyama solution started at `start` with the coefficients'
/// second argument frozen at `param`.
pub fn euler_solve_from(
    coeffs: &dyn SdeCoefficients,
    start: &DVector<f64>,
    param: &DVector<f64>,
    path: &DriverPath,
) -> Result<FlowState> {
    check_dims(coeffs, start.len(), path)?;
    check_dims(coeffs, param.len(), path)?;
    let m = start.len();
    let n = path.n_steps();
    let dt = path.dt();
    let identity = DMatrix::<f64>::identity(m, m);

    let mut trajectory = Vec::with_capacity(n + 1);
    let mut jacobian = Vec::with_capacity(n + 1);
    let mut inverse_jacobian = Vec::with_capacity(n + 1);
    let mut diffusion = Vec::with_capacity(n + 1);
    trajectory.push(start.clone());
    jacobian.push(identity.clone());
    inverse_jacobian.push(identity.clone());

    for v in 0..n {
        let z = &trajectory[v];
        let sigma = coeffs.diffusion(z, param);
        let db = DVector::from_column_slice(path.step_increments(v));
        let next = z + &sigma * &db + coeffs.drift(z, param) * dt;

        let mut step = &identity + coeffs.drift_jacobian(z, param) * dt;
        for (j, da) in coeffs.diffusion_jacobians(z, param).iter().enumerate() {
            step += da * db[j];
        }
        let k_next = step * &jacobian[v];

        if next.iter().chain(k_next.iter()).any(|x| !x.is_finite()) {
            return Err(LentError::NonFiniteState { step: v + 1 });
        }
        let condition = condition_number(&k_next);
        if condition.is_nan() || condition > MAX_CONDITION {
            return Err(LentError::SingularJacobian {
                step: v + 1,
                condition,
            });
        }
        let inv = k_next
            .clone()
            .lu()
            .try_inverse()
            .ok_or(LentError::SingularJacobian {
                step: v + 1,
                condition,
            })?;

        diffusion.push(sigma);
        trajectory.push(next);
        jacobian.push(k_next);
        inverse_jacobian.push(inv);
    }
    diffusion.push(coeffs.diffusion(&trajectory[n], param));
    Ok(FlowState {
        dt,
        trajectory,
        jacobian,
        inverse_jacobian,
        diffusion,
    })
}

/// `γ[X_T^x]` along `path`.
pub fn gamma_sde(
    coeffs: &dyn SdeCoefficients,
    x: &DVector<f64>,
    path: &DriverPath,
) -> Result<DMatrix<f64>> {
    Ok(euler_solve(coeffs, x, path)?.gamma())
}

/// One draw of `(X_T^x)♭` using the independent driver copy seeded by `seed`.
pub fn flat_sde_sample(
    coeffs: &dyn SdeCoefficients,
    x: &DVector<f64>,
    path: &DriverPath,
    seed: u64,
) -> Result<DVector<f64>> {
    Ok(euler_solve(coeffs, x, path)?.flat_sample(&mut rng_from_seed(seed)))
}

/// `K_T K_v⁻¹ σ(X_v, x)` for each requested step `v` (`0 ≤ v ≤ n`).
pub fn spanning_matrices(
    coeffs: &dyn SdeCoefficients,
    x: &DVector<f64>,
    path: &DriverPath,
    v_indices: &[usize],
) -> Result<Vec<DMatrix<f64>>> {
    let flow = euler_solve(coeffs, x, path)?;
    v_indices.iter().map(|&v| flow.spanning_matrix(v)).collect()
}

/// One row of [`MomentGrowthReport`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentRow {
    pub x_norm: f64,
    /// `E|X_t^x| / |x|`.
    pub ratio_p1: f64,
    /// `E|X_t^x|² / |x|²`.
    pub ratio_p2: f64,
    pub ratio_p2_se: f64,
}

/// Moment growth of `x ↦ X_t^x` near the origin.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MomentGrowthReport {
    pub t: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub rows: Vec<MomentRow>,
    pub max_ratio: f64,
    /// `(max - min) / mean` of the second-moment ratio over the grid.
    pub scale_variation: f64,
    /// Smallest `k` with `k e^{kt} ≥ max_ratio`.
    pub fitted_k: f64,
    /// Gronwall constant from the Lipschitz moduli observed along the paths,
    /// floored at 1.
    pub gronwall_k: f64,
    pub bounded: bool,
}

fn solve_envelope(target: f64, t: f64) -> f64 {
    // k e^{kt} is increasing in k ≥ 0
    if target <= 0.0 {
        return 0.0;
    }
    let f = |k: f64| k * (k * t).exp() - target;
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Estimate `E|X_t^x|^p / |x|^p`, `p ∈ {1, 2}`, over `x_grid` using common
/// driver paths, and compare with the Gronwall envelope `k e^{kt}`.
pub fn lemma3_moment_check(
    coeffs: &dyn SdeCoefficients,
    t: f64,
    x_grid: &[DVector<f64>],
    n_paths: usize,
    seed: u64,
) -> Result<MomentGrowthReport> {
    moment_growth_check_with(coeffs, t, x_grid, n_paths, seed, DEFAULT_STEPS)
}

pub fn moment_growth_check_with(
    coeffs: &dyn SdeCoefficients,
    t: f64,
    x_grid: &[DVector<f64>],
    n_paths: usize,
    seed: u64,
    n_steps: usize,
) -> Result<MomentGrowthReport> {
    let m = coeffs.state_dim();
    let zero = DVector::zeros(m);
    let magnitude =
        coeffs.diffusion(&zero, &zero).abs().sum() + coeffs.drift(&zero, &zero).abs().sum();
    if magnitude >= 1e-12 {
        return Err(LentError::CoefficientNotVanishing { magnitude });
    }
    if t.is_nan() || t <= 0.0 || n_steps == 0 || n_paths < 2 {
        return Err(LentError::InvalidSpec(
            "moment check needs t > 0, at least one step and two paths".into(),
        ));
    }
    if x_grid.iter().any(|x| x.len() != m || x.norm() == 0.0) {
        return Err(LentError::InvalidSpec(
            "moment grid points must be nonzero vectors of the state dimension".into(),
        ));
    }
    let dt = t / n_steps as f64;
    let d = coeffs.noise_dim();

    // per path: (|X|/|x|, |X|²/|x|²) for each grid point, and Lipschitz moduli
    type PathMoments = (Vec<(f64, f64)>, f64, Vec<f64>);
    let per_path: Vec<Result<PathMoments>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let path = DriverPath::sample(
                n_steps,
                dt,
                d,
                &mut rng_from_seed(derive_seed(seed, i as u64)),
            );
            let mut ratios = Vec::with_capacity(x_grid.len());
            let mut lip_b = coeffs.drift_jacobian(&zero, &zero).norm();
            let mut lip_a: Vec<f64> = coeffs
                .diffusion_jacobians(&zero, &zero)
                .iter()
                .map(|j| j.norm())
                .collect();
            for x in x_grid {
                let flow = euler_solve(coeffs, x, &path)?;
                let r = flow.terminal().norm() / x.norm();
                ratios.push((r, r * r));
                for z in &flow.trajectory {
                    lip_b = lip_b.max(coeffs.drift_jacobian(z, x).norm());
                    for (l, j) in lip_a.iter_mut().zip(coeffs.diffusion_jacobians(z, x)) {
                        *l = l.max(j.norm());
                    }
                }
            }
            Ok((ratios, lip_b, lip_a))
        })
        .collect();

    let mut sums = vec![(0.0, 0.0, 0.0); x_grid.len()];
    let mut lip_b: f64 = 0.0;
    let mut lip_a = vec![0.0_f64; d];
    for item in per_path {
        let (ratios, lb, la) = item?;
        for (s, (r1, r2)) in sums.iter_mut().zip(ratios) {
            s.0 += r1;
            s.1 += r2;
            s.2 += r2 * r2;
        }
        lip_b = lip_b.max(lb);
        for (a, b) in lip_a.iter_mut().zip(la) {
            *a = a.max(b);
        }
    }
    let n = n_paths as f64;
    let rows: Vec<MomentRow> = x_grid
        .iter()
        .zip(&sums)
        .map(|(x, &(s1, s2, s22))| {
            let mean2 = s2 / n;
            let var2 = (s22 / n - mean2 * mean2).max(0.0) * n / (n - 1.0);
            MomentRow {
                x_norm: x.norm(),
                ratio_p1: s1 / n,
                ratio_p2: mean2,
                ratio_p2_se: (var2 / n).sqrt(),
            }
        })
        .collect();

    let max_ratio = rows
        .iter()
        .flat_map(|r| [r.ratio_p1, r.ratio_p2])
        .fold(0.0, f64::max);
    let p2: Vec<f64> = rows.iter().map(|r| r.ratio_p2).collect();
    let mean_p2 = p2.iter().sum::<f64>() / p2.len().max(1) as f64;
    let spread = p2.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - p2.iter().copied().fold(f64::INFINITY, f64::min);
    let scale_variation = if mean_p2 > 0.0 { spread / mean_p2 } else { 0.0 };

    let gronwall = 2.0 * lip_b + lip_b * lip_b * dt + lip_a.iter().map(|l| l * l).sum::<f64>();
    let gronwall_k = gronwall.max(1.0);
    let fitted_k = solve_envelope(max_ratio, t);
    Ok(MomentGrowthReport {
        t,
        n_paths,
        n_steps,
        rows,
        max_ratio,
        scale_variation,
        fitted_k,
        gronwall_k,
        bounded: max_ratio <= gronwall_k * (gronwall_k * t).exp(),
    })
}

/// Wiener space with the Ornstein–Uhlenbeck structure, discretized: marks
/// are driver paths and the gradient coordinates are the standardized
/// increments.
#[derive(Clone)]
pub struct WienerMarkSpace {
    pub n_steps: usize,
    pub dt: f64,
    pub noise_dim: usize,
    pub fd_step: f64,
    pub coefficients: Arc<dyn SdeCoefficients>,
}

impl std::fmt::Debug for WienerMarkSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WienerMarkSpace")
            .field("n_steps", &self.n_steps)
            .field("dt", &self.dt)
            .field("noise_dim", &self.noise_dim)
            .finish_non_exhaustive()
    }
}

impl WienerMarkSpace {
    pub const ID: &'static str = "wiener";

    /// Space whose paths drive `coefficients` over `[0, t]` in `n_steps`.
    pub fn new(coefficients: Arc<dyn SdeCoefficients>, t: f64, n_steps: usize) -> Self {
        Self {
            n_steps,
            dt: t / n_steps as f64,
            noise_dim: coefficients.noise_dim(),
            fd_step: 1e-5,
            coefficients,
        }
    }

    pub fn endpoint_gamma(&self, x: &DVector<f64>, path: &DriverPath) -> Result<DMatrix<f64>> {
        gamma_sde(self.coefficients.as_ref(), x, path)
    }

    pub fn endpoint_flat(
        &self,
        x: &DVector<f64>,
        path: &DriverPath,
        rng: &mut SimRng,
    ) -> Result<DVector<f64>> {
        Ok(euler_solve(self.coefficients.as_ref(), x, path)?.flat_sample(rng))
    }

    /// The jump transform `x ↦ X_T^x(path)` driven by this space's
    /// coefficients.
    pub fn jump_transform(&self) -> SdeJumpTransform {
        SdeJumpTransform {
            coefficients: Arc::clone(&self.coefficients),
        }
    }
}

impl MarkSpace for WienerMarkSpace {
    fn id(&self) -> &str {
        Self::ID
    }

    fn sample(&self, rng: &mut SimRng) -> Mark {
        Mark::Path(Arc::new(DriverPath::sample(
            self.n_steps,
            self.dt,
            self.noise_dim,
            rng,
        )))
    }

    fn numerical_tangent(&self, g: &dyn MarkFunction, u: &Mark) -> Result<DMatrix<f64>> {
        let path = u.path().ok_or_else(|| LentError::MarkMismatch {
            space: Self::ID.into(),
        })?;
        let (n, d) = (path.n_steps(), path.noise_dim());
        let h = self.fd_step;
        let shift = h * path.dt().sqrt();
        let mut out = DMatrix::zeros(g.dim(), n * d);
        for v in 0..n {
            for j in 0..d {
                let plus = g.eval(&Mark::Path(Arc::new(path.perturbed(v, j, shift))))?;
                let minus = g.eval(&Mark::Path(Arc::new(path.perturbed(v, j, -shift))))?;
                let col = (plus - minus) / (2.0 * h);
                if col.iter().any(|c| !c.is_finite()) {
                    return Err(LentError::NonFiniteValue("Wiener mark derivative".into()));
                }
                out.set_column(v * d + j, &col);
            }
        }
        Ok(out)
    }
}

/// `(x, path) ↦ X_T^x(path)`: the jump `x` (the point's attribute) pushed
/// through the diffusion.
#[derive(Clone)]
pub struct SdeJumpTransform {
    pub coefficients: Arc<dyn SdeCoefficients>,
}

impl SdeJumpTransform {
    fn flow(&self, base: &BasePoint, mark: &Mark) -> Result<FlowState> {
        let path = mark.path().ok_or_else(|| LentError::MarkMismatch {
            space: WienerMarkSpace::ID.into(),
        })?;
        euler_solve(
            self.coefficients.as_ref(),
            &DVector::from_column_slice(&base.attribute),
            path,
        )
    }
}

impl PointFn for SdeJumpTransform {
    fn dim(&self) -> usize {
        self.coefficients.state_dim()
    }

    fn eval(&self, base: &BasePoint, mark: &Mark) -> Result<DVector<f64>> {
        Ok(self.flow(base, mark)?.terminal().clone())
    }

    fn mark_tangent(&self, base: &BasePoint, mark: &Mark) -> Option<Result<DMatrix<f64>>> {
        Some(self.flow(base, mark).map(|f| f.tangent()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use crate::stats::{empirical_second_moments, ks_critical_001, ks_statistic, max_z_score};

    fn path(n: usize, t: f64, d: usize, seed: u64) -> DriverPath {
        DriverPath::sample(n, t / n as f64, d, &mut rng_from_seed(seed))
    }

    fn scalar_linear(a: f64) -> CoefficientPreset {
        CoefficientPreset::Linear {
            diffusion: vec![vec![vec![a]]],
            drift: vec![vec![0.0]],
        }
    }

    #[test]
    fn zero_coefficients_freeze_the_flow() {
        let c = CoefficientPreset::Zero {
            dim: 2,
            noise_dim: 3,
        };
        let x = DVector::from_vec(vec![0.4, -1.2]);
        let flow = euler_solve(&c, &x, &path(64, 1.0, 3, 1)).unwrap();
        for (xv, kv) in flow.trajectory.iter().zip(&flow.jacobian) {
            assert_eq!(xv, &x);
            assert_eq!(kv, &DMatrix::identity(2, 2));
        }
        assert_eq!(flow.gamma(), DMatrix::zeros(2, 2));
    }

    #[test]
    fn additive_noise_is_exact() {
        let sigma = vec![vec![0.5, 0.1], vec![-0.3, 0.8]];
        let c = CoefficientPreset::Additive {
            sigma: sigma.clone(),
        };
        let p = path(128, 2.0, 2, 5);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let flow = euler_solve(&c, &x, &p).unwrap();
        let s = matrix_from_rows(&sigma);
        let mut total = DVector::zeros(2);
        for v in 0..p.n_steps() {
            total += DVector::from_column_slice(p.step_increments(v));
        }
        let expected = &x + &s * total;
        assert!((flow.terminal() - expected).abs().max() < 1e-13);
        assert!(flow.jacobian.iter().all(|k| k == &DMatrix::identity(2, 2)));
        let gamma = flow.gamma();
        let exact = &s * s.transpose() * 2.0;
        assert!((gamma - exact).abs().max() <= 1e-12);
    }

    #[test]
    fn additive_gamma_independent_of_grid() {
        let c = CoefficientPreset::Additive {
            sigma: vec![vec![1.5]],
        };
        for n in [16, 64, 256, 1024] {
            let g = gamma_sde(&c, &DVector::from_element(1, 0.3), &path(n, 1.5, 1, 9)).unwrap();
            assert!(
                (g[(0, 0)] - 1.5 * 1.5 * 1.5).abs() <= 1e-12,
                "n={n}: {}",
                g[(0, 0)]
            );
        }
    }

    #[test]
    fn linear_scalar_jacobian_is_ratio_of_states() {
        let c = scalar_linear(0.7);
        let x = DVector::from_element(1, 1.3);
        let flow = euler_solve(&c, &x, &path(256, 1.0, 1, 3)).unwrap();
        for (xv, kv) in flow.trajectory.iter().zip(&flow.jacobian) {
            let ratio = xv[0] / x[0];
            assert!((kv[(0, 0)] - ratio).abs() <= 1e-14 * ratio.abs().max(1.0));
        }
    }

    #[test]
    fn linear_scalar_gamma_matches_direct_substitution() {
        let a = 0.7;
        let c = scalar_linear(a);
        let x = DVector::from_element(1, 1.3);
        let p = path(256, 1.0, 1, 3);
        let flow = euler_solve(&c, &x, &p).unwrap();
        // K_v = X_v / x, σ_v = a X_v  ⇒  K_v⁻¹σ_v = a x
        let xt = flow.terminal()[0];
        let direct = a * a * xt * xt * p.horizon();
        let gamma = flow.gamma()[(0, 0)];
        assert!((gamma - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn spanning_matrices_cases() {
        let c = CoefficientPreset::Sinusoidal {
            dim: 2,
            scale: 0.6,
            damping: 0.3,
        };
        let x = DVector::from_vec(vec![0.5, -0.8]);
        let p = path(128, 1.0, 1, 8);
        let flow = euler_solve(&c, &x, &p).unwrap();
        let last = spanning_matrices(&c, &x, &p, &[128]).unwrap();
        assert!((&last[0] - &flow.diffusion[128]).abs().max() < 1e-12);

        let add = CoefficientPreset::Additive {
            sigma: vec![vec![1.0], vec![2.0]],
        };
        for m in spanning_matrices(&add, &x, &p, &[0, 10, 64, 127]).unwrap() {
            assert_eq!(m, DMatrix::from_column_slice(2, 1, &[1.0, 2.0]));
        }

        let lin = scalar_linear(0.9);
        let x1 = DVector::from_element(1, 0.7);
        let flow = euler_solve(&lin, &x1, &p).unwrap();
        for (v, m) in [3usize, 50, 100]
            .iter()
            .zip(spanning_matrices(&lin, &x1, &p, &[3, 50, 100]).unwrap())
        {
            let xv = flow.trajectory[*v][0];
            let direct = (flow.terminal()[0] / xv) * (0.9 * xv);
            assert!((m[(0, 0)] - direct).abs() < 1e-12 * direct.abs().max(1.0));
        }
        assert!(spanning_matrices(&lin, &x1, &p, &[129]).is_err());
    }

    #[test]
    fn flat_sample_covariance_matches_gamma() {
        let c = CoefficientPreset::Sinusoidal {
            dim: 2,
            scale: 0.8,
            damping: 0.5,
        };
        let x = DVector::from_vec(vec![0.9, -0.4]);
        let flow = euler_solve(&c, &x, &path(64, 1.0, 1, 17)).unwrap();
        let sampler = flow.flat_sampler();
        let mut rng = rng_from_seed(4);
        let draws: Vec<_> = (0..100_000).map(|_| sampler.sample(&mut rng)).collect();
        let m = empirical_second_moments(&draws);
        assert!(max_z_score(&m, &flow.gamma(), 0.0) <= 3.0);
        for i in 0..2 {
            assert!(m.mean[i].abs() <= 3.0 * m.mean_se[i]);
        }
    }

    #[test]
    fn zero_diffusion_flat_is_zero() {
        let c = CoefficientPreset::Zero {
            dim: 1,
            noise_dim: 1,
        };
        let p = path(32, 1.0, 1, 2);
        for seed in 0..10 {
            let f = flat_sde_sample(&c, &DVector::from_element(1, 2.0), &p, seed).unwrap();
            assert_eq!(f[0], 0.0);
        }
    }

    #[test]
    fn additive_flat_is_gaussian() {
        let (s, t) = (1.7, 0.8);
        let c = CoefficientPreset::Additive {
            sigma: vec![vec![s]],
        };
        let flow = euler_solve(&c, &DVector::from_element(1, 0.0), &path(64, t, 1, 2)).unwrap();
        let sampler = flow.flat_sampler();
        let mut rng = rng_from_seed(10);
        let sd = s * t.sqrt();
        let mut z: Vec<f64> = (0..100_000)
            .map(|_| sampler.sample(&mut rng)[0] / sd)
            .collect();
        let d = ks_statistic(&mut z, |v| {
            0.5 * (1.0 + statrs::function::erf::erf(v / std::f64::consts::SQRT_2))
        });
        assert!(d < ks_critical_001(100_000), "KS {d}");
    }

    #[test]
    fn jacobian_matches_finite_difference_flow() {
        let c = CoefficientPreset::Sinusoidal {
            dim: 2,
            scale: 0.9,
            damping: 0.4,
        };
        let x = DVector::from_vec(vec![0.6, 1.1]);
        let p = path(1024, 1.0, 1, 12);
        let flow = euler_solve(&c, &x, &p).unwrap();
        let eps = 1e-6;
        for h in [
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.3, -0.7]),
        ] {
            let bumped = euler_solve_from(&c, &(&x + &h * eps), &x, &p).unwrap();
            let fd = (bumped.terminal() - flow.terminal()) / eps;
            let an = flow.terminal_jacobian() * &h;
            assert!((&fd - &an).norm() / an.norm() < 1e-3);
        }
    }

    #[test]
    fn analytic_jacobians_match_fd_fallback() {
        struct Fd(CoefficientPreset);
        impl SdeCoefficients for Fd {
            fn state_dim(&self) -> usize {
                self.0.state_dim()
            }
            fn noise_dim(&self) -> usize {
                self.0.noise_dim()
            }
            fn drift(&self, z: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
                self.0.drift(z, x)
            }
            fn diffusion(&self, z: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
                self.0.diffusion(z, x)
            }
        }
        let presets = [
            CoefficientPreset::Sinusoidal {
                dim: 2,
                scale: 0.9,
                damping: 0.4,
            },
            CoefficientPreset::Rotation { rate: 1.3 },
            CoefficientPreset::Linear {
                diffusion: vec![vec![vec![0.2, 0.1], vec![0.0, -0.3]]],
                drift: vec![vec![-0.5, 0.2], vec![0.1, -0.4]],
            },
        ];
        let z = DVector::from_vec(vec![0.3, -0.8]);
        for p in presets {
            let fd = Fd(p.clone());
            assert!(
                (p.drift_jacobian(&z, &z) - fd.drift_jacobian(&z, &z))
                    .abs()
                    .max()
                    < 1e-8
            );
            for (a, b) in p
                .diffusion_jacobians(&z, &z)
                .iter()
                .zip(fd.diffusion_jacobians(&z, &z))
            {
                assert!((a - b).abs().max() < 1e-8);
            }
        }
    }

    #[test]
    fn gamma_is_symmetric_psd() {
        let c = CoefficientPreset::Rotation { rate: 1.1 };
        for seed in 0..20 {
            let g = gamma_sde(
                &c,
                &DVector::from_vec(vec![1.0, 0.5]),
                &path(128, 1.0, 1, seed),
            )
            .unwrap();
            assert!((&g - g.transpose()).abs().max() <= 1e-12);
            assert!(min_eigenvalue(&g) >= -1e-12 * g.norm().max(1.0));
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let c = CoefficientPreset::Linear {
            diffusion: vec![vec![vec![0.0]]],
            drift: vec![vec![1e3]],
        };
        let err = euler_solve(&c, &DVector::from_element(1, 1.0), &path(256, 100.0, 1, 1));
        assert!(matches!(
            err,
            Err(LentError::NonFiniteState { .. }) | Err(LentError::SingularJacobian { .. })
        ));
    }

    #[test]
    fn singular_jacobian_is_reported() {
        // step factor 1 - dt·10 = 0 kills the Jacobian on the first step
        let c = CoefficientPreset::Linear {
            diffusion: vec![vec![vec![0.0]]],
            drift: vec![vec![-10.0]],
        };
        let err = euler_solve(&c, &DVector::from_element(1, 1.0), &path(10, 1.0, 1, 1));
        assert!(matches!(
            err,
            Err(LentError::SingularJacobian { step: 1, .. })
        ));
    }

    #[test]
    fn moment_growth_linear_is_scale_invariant() {
        let c = CoefficientPreset::Linear {
            diffusion: vec![vec![vec![0.4, 0.0], vec![0.1, 0.3]]],
            drift: vec![vec![-0.2, 0.0], vec![0.0, 0.1]],
        };
        let dir = DVector::from_vec(vec![0.6, 0.8]);
        let grid: Vec<_> = (0..5).map(|k| &dir * 10f64.powi(-k)).collect();
        let rep = moment_growth_check_with(&c, 1.0, &grid, 500, 3, 64).unwrap();
        assert!(rep.scale_variation < 1e-10, "{}", rep.scale_variation);
        assert!(rep.bounded);
        assert!(rep.fitted_k <= rep.gronwall_k);
    }

    #[test]
    fn moment_growth_zero_coefficients_ratio_one() {
        let c = CoefficientPreset::Zero {
            dim: 2,
            noise_dim: 1,
        };
        let grid = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![0.0, 1e-3]),
        ];
        let rep = moment_growth_check_with(&c, 1.0, &grid, 10, 3, 16).unwrap();
        for row in &rep.rows {
            assert!((row.ratio_p1 - 1.0).abs() < 1e-15);
            assert!((row.ratio_p2 - 1.0).abs() < 1e-15);
        }
        assert!(rep.bounded);
    }

    #[test]
    fn moment_growth_rejects_non_vanishing_coefficients() {
        let c = CoefficientPreset::Additive {
            sigma: vec![vec![0.5]],
        };
        let err = lemma3_moment_check(&c, 1.0, &[DVector::from_element(1, 1.0)], 10, 1);
        assert!(matches!(
            err,
            Err(LentError::CoefficientNotVanishing { .. })
        ));
    }

    #[test]
    fn coarsen_preserves_brownian_endpoint() {
        let p = path(64, 1.0, 2, 4);
        let c = p.coarsen().unwrap();
        assert_eq!(c.n_steps(), 32);
        assert!((c.horizon() - p.horizon()).abs() < 1e-15);
        for j in 0..2 {
            let a: f64 = (0..64).map(|v| p.increment(v, j)).sum();
            let b: f64 = (0..32).map(|v| c.increment(v, j)).sum();
            assert!((a - b).abs() < 1e-13);
        }
        assert!(path(3, 1.0, 1, 1).coarsen().is_none());
    }

    #[test]
    fn driver_path_json_is_exact() {
        let p = path(8, 0.3, 2, 99);
        let s = serde_json::to_string(&p).unwrap();
        let back: DriverPath = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<DriverPath>(
            r#"{"n_steps":2,"dt":0.1,"increments":[[1.0]]}"#
        )
        .is_err());
    }

    #[test]
    fn wiener_fd_tangent_is_close_to_closed_form() {
        let coeffs: Arc<dyn SdeCoefficients> = Arc::new(CoefficientPreset::Sinusoidal {
            dim: 2,
            scale: 0.7,
            damping: 0.2,
        });
        let space = WienerMarkSpace::new(Arc::clone(&coeffs), 1.0, 256);
        let transform = space.jump_transform();
        let mark = space.sample(&mut rng_from_seed(5));
        let base = BasePoint::new(0.1, vec![0.8, -0.5]);
        struct Endpoint<'a>(&'a SdeJumpTransform, BasePoint);
        impl MarkFunction for Endpoint<'_> {
            fn dim(&self) -> usize {
                2
            }
            fn eval(&self, mark: &Mark) -> Result<DVector<f64>> {
                self.0.eval(&self.1, mark)
            }
        }
        let fd = space
            .numerical_tangent(&Endpoint(&transform, base.clone()), &mark)
            .unwrap();
        let closed = transform.mark_tangent(&base, &mark).unwrap().unwrap();
        // left-point closed form vs exact derivative of the Euler map differ by O(dt)
        let g_fd = &fd * fd.transpose();
        let g_cl = &closed * closed.transpose();
        let rel = (&g_fd - &g_cl).abs().max() / g_cl.abs().max();
        assert!(rel < 0.05, "relative gap {rel}");
    }
}
