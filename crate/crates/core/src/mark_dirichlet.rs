//! Dirichlet structures on the mark space: sampling from `μ`, the one-mark
//! carré du champ `γ`, and the gradient `♭` realized with Gaussian auxiliary
//! variables.
//!
//! Every mark space exposes its gradient through a finite set of tangent
//! coordinates: the derivative of a one-mark function `g` is a `k × q` matrix
//! `J` (one column per coordinate). Then `γ[g] = J Jᵀ` and one draw of `g♭`
//! under `ρ` is `J ζ` with `ζ ~ N(0, I_q)`, so `∫ g♭ dρ = 0` and the
//! `ρ`-covariance of `g♭` is `γ[g]`.

use std::cmp::Ordering;
use std::f64::consts::TAU;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, LentError, Result};
use crate::linalg::gram;
use crate::rng::{rng_from_seed, SimRng};
use crate::sde_flow::DriverPath;

/// A mark `u ∈ Y`, interpretable by the mark space that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "MarkRepr", into = "MarkRepr")]
pub enum Mark {
    /// Angle on the unit circle, in `[0, 2π)`.
    Angle(f64),
    /// Discretized Brownian driver on Wiener space.
    Path(Arc<DriverPath>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MarkRepr {
    Angle { angle: f64 },
    Path(DriverPath),
}

impl From<MarkRepr> for Mark {
    fn from(r: MarkRepr) -> Self {
        match r {
            MarkRepr::Angle { angle } => Mark::Angle(angle),
            MarkRepr::Path(p) => Mark::Path(Arc::new(p)),
        }
    }
}

impl From<Mark> for MarkRepr {
    fn from(m: Mark) -> Self {
        match m {
            Mark::Angle(angle) => MarkRepr::Angle { angle },
            Mark::Path(p) => MarkRepr::Path(Arc::unwrap_or_clone(p)),
        }
    }
}

impl Mark {
    pub fn angle(&self) -> Option<f64> {
        match self {
            Mark::Angle(a) => Some(*a),
            Mark::Path(_) => None,
        }
    }

    pub fn path(&self) -> Option<&DriverPath> {
        match self {
            Mark::Path(p) => Some(p),
            Mark::Angle(_) => None,
        }
    }

    /// Number of gradient coordinates carried by this mark.
    pub fn tangent_dim(&self) -> usize {
        match self {
            Mark::Angle(_) => 1,
            Mark::Path(p) => p.n_steps() * p.noise_dim(),
        }
    }

    pub(crate) fn canonical_cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Mark::Angle(a), Mark::Angle(b)) => a.total_cmp(b),
            (Mark::Angle(_), Mark::Path(_)) => Ordering::Less,
            (Mark::Path(_), Mark::Angle(_)) => Ordering::Greater,
            (Mark::Path(a), Mark::Path(b)) => a.canonical_cmp(b),
        }
    }
}

impl PartialEq for Mark {
    fn eq(&self, other: &Self) -> bool {
        self.canonical_cmp(other) == Ordering::Equal
    }
}

/// A function of a single mark, `u ↦ g(u) ∈ ℝᵏ`.
pub trait MarkFunction {
    fn dim(&self) -> usize;

    fn eval(&self, mark: &Mark) -> Result<DVector<f64>>;

    /// Exact derivative in the mark's tangent coordinates, when known.
    /// Takes precedence over finite differences.
    fn analytic_tangent(&self, _mark: &Mark) -> Option<Result<DMatrix<f64>>> {
        None
    }
}

/// Closure-backed [`MarkFunction`] on circle marks.
pub struct AngleFn<F> {
    dim: usize,
    f: F,
}

impl<F> AngleFn<F>
where
    F: Fn(f64) -> DVector<f64>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> MarkFunction for AngleFn<F>
where
    F: Fn(f64) -> DVector<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, mark: &Mark) -> Result<DVector<f64>> {
        let theta = mark.angle().ok_or_else(|| LentError::MarkMismatch {
            space: "circle".into(),
        })?;
        Ok((self.f)(theta))
    }
}

/// A Dirichlet structure with carré du champ `(Y, μ, 𝐝, γ)` together with a
/// gradient.
pub trait MarkSpace: Send + Sync {
    fn id(&self) -> &str;

    /// One draw from `μ`.
    fn sample(&self, rng: &mut SimRng) -> Mark;

    /// Finite-difference derivative of `g` at `u` in tangent coordinates.
    fn numerical_tangent(&self, g: &dyn MarkFunction, u: &Mark) -> Result<DMatrix<f64>>;

    fn tangent(&self, g: &dyn MarkFunction, u: &Mark) -> Result<DMatrix<f64>> {
        if let Some(t) = g.analytic_tangent(u) {
            let t = t?;
            check_finite(t.as_slice(), "analytic mark derivative")?;
            return Ok(t);
        }
        self.numerical_tangent(g, u)
    }

    /// `γ[g, gᵀ](u)`, a `k × k` positive semidefinite matrix.
    fn gamma_one(&self, g: &dyn MarkFunction, u: &Mark) -> Result<DMatrix<f64>> {
        Ok(gram(&self.tangent(g, u)?))
    }

    /// One draw of `g♭(u, ·)` under `ρ`.
    fn flat_sample(
        &self,
        g: &dyn MarkFunction,
        u: &Mark,
        rng: &mut SimRng,
    ) -> Result<DVector<f64>> {
        let j = self.tangent(g, u)?;
        let zeta = DVector::from_iterator(
            j.ncols(),
            (0..j.ncols()).map(|_| rng.sample(StandardNormal)),
        );
        Ok(j * zeta)
    }
}

/// The unit circle with uniform `μ` and the `H¹` structure,
/// `γ[g](θ) = g′(θ) g′(θ)ᵀ`.
#[derive(Clone, Debug)]
pub struct CircleMarkSpace {
    pub fd_step: f64,
}

impl Default for CircleMarkSpace {
    fn default() -> Self {
        Self { fd_step: 1e-5 }
    }
}

pub(crate) fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

impl CircleMarkSpace {
    pub const ID: &'static str = "circle";

    pub fn new(fd_step: f64) -> Self {
        Self { fd_step }
    }

    /// Uniform angle in `[0, 2π)` determined by `seed`.
    pub fn sample_seeded(&self, seed: u64) -> f64 {
        let mut rng = rng_from_seed(seed);
        self.sample(&mut rng).angle().unwrap_or_default()
    }

    pub fn flat_sample_seeded(
        &self,
        g: &dyn MarkFunction,
        theta: f64,
        seed: u64,
    ) -> Result<DVector<f64>> {
        self.flat_sample(g, &Mark::Angle(theta), &mut rng_from_seed(seed))
    }
}

impl MarkSpace for CircleMarkSpace {
    fn id(&self) -> &str {
        Self::ID
    }

    fn sample(&self, rng: &mut SimRng) -> Mark {
        Mark::Angle(wrap_angle(TAU * rng.random::<f64>()))
    }

    fn numerical_tangent(&self, g: &dyn MarkFunction, u: &Mark) -> Result<DMatrix<f64>> {
        let theta = u.angle().ok_or_else(|| LentError::MarkMismatch {
            space: Self::ID.into(),
        })?;
        let h = self.fd_step;
        let plus = g.eval(&Mark::Angle(wrap_angle(theta + h)))?;
        let minus = g.eval(&Mark::Angle(wrap_angle(theta - h)))?;
        check_finite(plus.as_slice(), "mark function at θ + h")?;
        check_finite(minus.as_slice(), "mark function at θ - h")?;
        if plus.len() != g.dim() || minus.len() != g.dim() {
            return Err(LentError::DimensionMismatch {
                expected: g.dim(),
                found: plus.len(),
            });
        }
        let d = (plus - minus) / (2.0 * h);
        Ok(DMatrix::from_column_slice(d.len(), 1, d.as_slice()))
    }
}
