//! The lent particle method.
//!
//! For a functional `F` of the configuration `ϖ`, the upper carré du champ is
//!
//! ```text
//! Γ[F](ϖ) = ∫ ε⁻ γ[ε⁺ F] dN = Σ_{p ∈ ϖ} γ[u ↦ F(ϖ \ {p} ∪ {(x_p, u)})](u_p)
//! ```
//!
//! each particle is taken out, the configuration is re-evaluated with a free
//! mark at its location, that one-mark function is differentiated with the
//! mark-space `γ`, and the result is evaluated back at the particle's own
//! mark. [`gamma_total`] follows that recipe literally; [`gamma_total_oracle`]
//! computes the product-structure sum `Σᵢ γᵢ[F]` by differentiating in each
//! mark in place, and the two must coincide.
//!
//! The gradient `F♯ = ∫ ε⁻ (ε⁺F)♭ dN⊙ρ` is sampled by [`sharp_sample`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::config_space::{BasePoint, Configuration, MarkedPoint};
use crate::error::{check_finite, LentError, Result};
use crate::linalg::{gram, numerical_rank, symmetric_eigenvalues};
use crate::mark_dirichlet::{Mark, MarkFunction, MarkSpace};
use crate::rng::{derive_seed, rng_from_seed};

/// Derivative in the angle of a scalar function of `(time, attribute, angle)`.
pub type AngleDerivative = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;

/// A function `ϖ ↦ F(ϖ) ∈ ℝᵏ` of a configuration.
pub trait Functional: Send + Sync {
    fn output_dim(&self) -> usize;

    fn eval(&self, cfg: &Configuration) -> Result<DVector<f64>>;

    /// Exact derivative of `F` in the tangent coordinates of the mark of
    /// point `index`, when the functional knows it.
    fn mark_tangent(&self, _cfg: &Configuration, _index: usize) -> Option<Result<DMatrix<f64>>> {
        None
    }
}

/// A per-point function `f(x, u) ∈ ℝᵏ`.
pub trait PointFn: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, base: &BasePoint, mark: &Mark) -> Result<DVector<f64>>;

    /// Derivative in the mark's tangent coordinates, `k × q`.
    fn mark_tangent(&self, _base: &BasePoint, _mark: &Mark) -> Option<Result<DMatrix<f64>>> {
        None
    }
}

type PointEval = dyn Fn(&BasePoint, &Mark) -> DVector<f64> + Send + Sync;
type PointTangent = dyn Fn(&BasePoint, &Mark) -> DMatrix<f64> + Send + Sync;

/// Closure-backed [`PointFn`], optionally carrying its mark derivative.
#[derive(Clone)]
pub struct ClosurePointFn {
    dim: usize,
    f: Arc<PointEval>,
    tangent: Option<Arc<PointTangent>>,
}

impl ClosurePointFn {
    pub fn new(
        dim: usize,
        f: impl Fn(&BasePoint, &Mark) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            f: Arc::new(f),
            tangent: None,
        }
    }

    pub fn with_tangent(
        mut self,
        tangent: impl Fn(&BasePoint, &Mark) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.tangent = Some(Arc::new(tangent));
        self
    }

    /// Scalar function of `(time, attribute, angle)` on circle marks, with
    /// optional `∂/∂θ`.
    pub fn scalar_on_circle(
        f: impl Fn(f64, &[f64], f64) -> f64 + Send + Sync + 'static,
        df: Option<AngleDerivative>,
    ) -> Self {
        let angle = |m: &Mark| m.angle().unwrap_or(f64::NAN);
        let out = Self::new(1, move |b, m| {
            DVector::from_element(1, f(b.time, &b.attribute, angle(m)))
        });
        match df {
            Some(df) => out.with_tangent(move |b, m| {
                DMatrix::from_element(1, 1, df(b.time, &b.attribute, angle(m)))
            }),
            None => out,
        }
    }
}

impl PointFn for ClosurePointFn {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, base: &BasePoint, mark: &Mark) -> Result<DVector<f64>> {
        let v = (self.f)(base, mark);
        if v.len() != self.dim {
            return Err(LentError::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        Ok(v)
    }

    fn mark_tangent(&self, base: &BasePoint, mark: &Mark) -> Option<Result<DMatrix<f64>>> {
        self.tangent.as_ref().map(|t| Ok(t(base, mark)))
    }
}

/// Planar jump `r (cos θ, sin θ)` from radius attribute `r` and circle mark
/// `θ`.
#[derive(Clone, Copy, Debug, Default)]
pub struct PolarJump;

fn polar_parts(base: &BasePoint, mark: &Mark) -> Result<(f64, f64)> {
    let theta = mark.angle().ok_or_else(|| LentError::MarkMismatch {
        space: "circle".into(),
    })?;
    let r = *base.attribute.first().ok_or(LentError::DimensionMismatch {
        expected: 1,
        found: 0,
    })?;
    Ok((r, theta))
}

impl PointFn for PolarJump {
    fn dim(&self) -> usize {
        2
    }

    fn eval(&self, base: &BasePoint, mark: &Mark) -> Result<DVector<f64>> {
        let (r, theta) = polar_parts(base, mark)?;
        let (s, c) = theta.sin_cos();
        Ok(DVector::from_vec(vec![r * c, r * s]))
    }

    fn mark_tangent(&self, base: &BasePoint, mark: &Mark) -> Option<Result<DMatrix<f64>>> {
        Some(polar_parts(base, mark).map(|(r, theta)| {
            let (s, c) = theta.sin_cos();
            DMatrix::from_column_slice(2, 1, &[-r * s, r * c])
        }))
    }
}

/// The attribute vector itself; does not depend on the mark.
#[derive(Clone, Copy, Debug)]
pub struct AttributeJump {
    pub dim: usize,
}

impl PointFn for AttributeJump {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, base: &BasePoint, _mark: &Mark) -> Result<DVector<f64>> {
        if base.attribute.len() != self.dim {
            return Err(LentError::DimensionMismatch {
                expected: self.dim,
                found: base.attribute.len(),
            });
        }
        Ok(DVector::from_column_slice(&base.attribute))
    }

    fn mark_tangent(&self, _base: &BasePoint, mark: &Mark) -> Option<Result<DMatrix<f64>>> {
        Some(Ok(DMatrix::zeros(self.dim, mark.tangent_dim())))
    }
}

/// `N(f) = Σ_{p ∈ ϖ, time ≤ until} f(p)`.
#[derive(Clone)]
pub struct SumFunctional {
    f: Arc<dyn PointFn>,
    until: Option<f64>,
}

impl SumFunctional {
    /// Only count points with `time ≤ t`.
    pub fn until(mut self, t: f64) -> Self {
        self.until = Some(t);
        self
    }

    fn counts(&self, p: &MarkedPoint) -> bool {
        self.until.is_none_or(|t| p.base.time <= t)
    }

    fn sum(&self, cfg: &Configuration) -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(self.f.dim());
        for p in cfg.points().iter().filter(|p| self.counts(p)) {
            acc += self.f.eval(&p.base, &p.mark)?;
        }
        Ok(acc)
    }

    fn point_tangent(&self, p: &MarkedPoint) -> Option<Result<DMatrix<f64>>> {
        if self.counts(p) {
            self.f.mark_tangent(&p.base, &p.mark)
        } else {
            Some(Ok(DMatrix::zeros(self.f.dim(), p.mark.tangent_dim())))
        }
    }
}

impl Functional for SumFunctional {
    fn output_dim(&self) -> usize {
        self.f.dim()
    }

    fn eval(&self, cfg: &Configuration) -> Result<DVector<f64>> {
        self.sum(cfg)
    }

    fn mark_tangent(&self, cfg: &Configuration, index: usize) -> Option<Result<DMatrix<f64>>> {
        self.point_tangent(&cfg.points()[index])
    }
}

/// `e^{-N(f)}` for scalar `f`.
#[derive(Clone)]
pub struct ExpFunctional {
    inner: SumFunctional,
}

impl Functional for ExpFunctional {
    fn output_dim(&self) -> usize {
        1
    }

    fn eval(&self, cfg: &Configuration) -> Result<DVector<f64>> {
        Ok(self.inner.sum(cfg)?.map(|s| (-s).exp()))
    }

    fn mark_tangent(&self, cfg: &Configuration, index: usize) -> Option<Result<DMatrix<f64>>> {
        let df = self.inner.point_tangent(&cfg.points()[index])?;
        Some(df.and_then(|df| {
            let value = (-self.inner.sum(cfg)?[0]).exp();
            Ok(df * (-value))
        }))
    }
}

/// Several functionals evaluated side by side, `(F₁, …, F_r)`.
#[derive(Clone)]
pub struct StackedFunctional {
    parts: Vec<Arc<dyn Functional>>,
}

impl StackedFunctional {
    pub fn new(parts: Vec<Arc<dyn Functional>>) -> Self {
        Self { parts }
    }
}

impl Functional for StackedFunctional {
    fn output_dim(&self) -> usize {
        self.parts.iter().map(|p| p.output_dim()).sum()
    }

    fn eval(&self, cfg: &Configuration) -> Result<DVector<f64>> {
        let mut out = Vec::with_capacity(self.output_dim());
        for p in &self.parts {
            out.extend_from_slice(p.eval(cfg)?.as_slice());
        }
        Ok(DVector::from_vec(out))
    }

    fn mark_tangent(&self, cfg: &Configuration, index: usize) -> Option<Result<DMatrix<f64>>> {
        let q = cfg.points()[index].mark.tangent_dim();
        let mut out = DMatrix::zeros(self.output_dim(), q);
        let mut row = 0;
        for p in &self.parts {
            match p.mark_tangent(cfg, index)? {
                Ok(t) => out.view_mut((row, 0), (t.nrows(), q)).copy_from(&t),
                Err(e) => return Some(Err(e)),
            }
            row += p.output_dim();
        }
        Some(Ok(out))
    }
}

/// A functional that ignores the configuration.
#[derive(Clone, Debug)]
pub struct ConstantFunctional(pub DVector<f64>);

impl Functional for ConstantFunctional {
    fn output_dim(&self) -> usize {
        self.0.len()
    }

    fn eval(&self, _cfg: &Configuration) -> Result<DVector<f64>> {
        Ok(self.0.clone())
    }
}

/// `N(f)`.
pub fn make_linear(f: impl PointFn + 'static) -> SumFunctional {
    SumFunctional {
        f: Arc::new(f),
        until: None,
    }
}

/// `e^{-N(f)}`; `f` must be scalar.
pub fn make_exp(f: impl PointFn + 'static) -> Result<ExpFunctional> {
    if f.dim() != 1 {
        return Err(LentError::DimensionMismatch {
            expected: 1,
            found: f.dim(),
        });
    }
    Ok(ExpFunctional {
        inner: make_linear(f),
    })
}

/// `Σ_p transform(x_p, u_p)`, e.g. the terminal value of a compound process
/// whose jumps are `transform`.
pub fn make_jump_sum(transform: impl PointFn + 'static) -> SumFunctional {
    make_linear(transform)
}

/// `Z_t = Σ_{time ≤ t} r (cos θ, sin θ)`.
pub fn isotropic_functional(t: f64) -> SumFunctional {
    make_jump_sum(PolarJump).until(t)
}

/// Carré du champ value `Γ[F](ϖ)`: a symmetric positive semidefinite
/// `k × k` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaMatrix(DMatrix<f64>);

impl GammaMatrix {
    pub fn zeros(k: usize) -> Self {
        Self(DMatrix::zeros(k, k))
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn determinant(&self) -> f64 {
        if self.0.nrows() == 0 {
            1.0
        } else {
            self.0.determinant()
        }
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        symmetric_eigenvalues(&self.0)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    pub fn rank(&self, rel_tol: f64) -> usize {
        numerical_rank(&self.0, rel_tol)
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol
    }
}

/// `u ↦ F(ε⁺_{(x, u)} ε⁻_p ϖ)`: the particle at `x` lent a free mark.
struct LentMap<'a> {
    functional: &'a dyn Functional,
    rest: Configuration,
    base: BasePoint,
}

impl LentMap<'_> {
    fn lend(&self, mark: &Mark) -> Configuration {
        self.rest
            .eps_plus(&MarkedPoint::new(self.base.clone(), mark.clone()))
    }
}

impl MarkFunction for LentMap<'_> {
    fn dim(&self) -> usize {
        self.functional.output_dim()
    }

    fn eval(&self, mark: &Mark) -> Result<DVector<f64>> {
        self.functional.eval(&self.lend(mark))
    }

    fn analytic_tangent(&self, mark: &Mark) -> Option<Result<DMatrix<f64>>> {
        let cfg = self.lend(mark);
        let idx = cfg.position_of_base(&self.base)?;
        self.functional.mark_tangent(&cfg, idx)
    }
}

/// `u ↦ F(ϖ with the mark of point i replaced by u)`.
struct InPlaceMap<'a> {
    functional: &'a dyn Functional,
    cfg: &'a Configuration,
    index: usize,
}

impl MarkFunction for InPlaceMap<'_> {
    fn dim(&self) -> usize {
        self.functional.output_dim()
    }

    fn eval(&self, mark: &Mark) -> Result<DVector<f64>> {
        self.functional
            .eval(&self.cfg.with_mark(self.index, mark.clone()))
    }

    fn analytic_tangent(&self, mark: &Mark) -> Option<Result<DMatrix<f64>>> {
        let cfg = self.cfg.with_mark(self.index, mark.clone());
        self.functional.mark_tangent(&cfg, self.index)
    }
}

fn lent_map<'a>(
    functional: &'a dyn Functional,
    cfg: &Configuration,
    p: &MarkedPoint,
) -> LentMap<'a> {
    LentMap {
        functional,
        rest: cfg.eps_minus(p),
        base: p.base.clone(),
    }
}

fn finish(acc: DMatrix<f64>) -> Result<GammaMatrix> {
    check_finite(acc.as_slice(), "carré du champ")?;
    Ok(GammaMatrix(acc))
}

/// `Γ[F](ϖ) = ∫ ε⁻ γ[ε⁺F] dN`.
pub fn gamma_total(
    functional: &dyn Functional,
    cfg: &Configuration,
    space: &dyn MarkSpace,
) -> Result<GammaMatrix> {
    let k = functional.output_dim();
    let mut acc = DMatrix::zeros(k, k);
    for p in cfg.points() {
        let map = lent_map(functional, cfg, p);
        acc += space.gamma_one(&map, &p.mark)?;
    }
    finish(acc)
}

/// Per-point contributions `ε⁻γ[ε⁺F]` at each `p ∈ ϖ`, in canonical order.
pub fn gamma_terms(
    functional: &dyn Functional,
    cfg: &Configuration,
    space: &dyn MarkSpace,
) -> Result<Vec<DMatrix<f64>>> {
    cfg.points()
        .iter()
        .map(|p| space.gamma_one(&lent_map(functional, cfg, p), &p.mark))
        .collect()
}

/// Product-structure route `Σᵢ γᵢ[F]`: differentiate `F` in the mark of each
/// point where it sits, without removing or re-adding anything.
pub fn gamma_total_oracle(
    functional: &dyn Functional,
    cfg: &Configuration,
    space: &dyn MarkSpace,
) -> Result<GammaMatrix> {
    let k = functional.output_dim();
    let mut acc = DMatrix::zeros(k, k);
    for (index, p) in cfg.points().iter().enumerate() {
        let map = InPlaceMap {
            functional,
            cfg,
            index,
        };
        let j = space.tangent(&map, &p.mark)?;
        acc += gram(&j);
    }
    finish(acc)
}

/// One draw of `F♯ = ∫ ε⁻(ε⁺F)♭ dN⊙ρ`. The auxiliary variables of point `i`
/// (canonical order) are seeded by `(seed, i)`.
pub fn sharp_sample(
    functional: &dyn Functional,
    cfg: &Configuration,
    space: &dyn MarkSpace,
    seed: u64,
) -> Result<DVector<f64>> {
    let mut acc = DVector::zeros(functional.output_dim());
    for (i, p) in cfg.points().iter().enumerate() {
        let map = lent_map(functional, cfg, p);
        let mut rng = rng_from_seed(derive_seed(seed, i as u64));
        acc += space.flat_sample(&map, &p.mark, &mut rng)?;
    }
    Ok(acc)
}

/// Lent-particle derivatives frozen for repeated `F♯` draws on one
/// configuration. Produces the same values as [`sharp_sample`] for mark
/// spaces using the default Gaussian `flat_sample`.
#[derive(Clone, Debug)]
pub struct SharpSampler {
    tangents: Vec<DMatrix<f64>>,
    dim: usize,
}

impl SharpSampler {
    pub fn new(
        functional: &dyn Functional,
        cfg: &Configuration,
        space: &dyn MarkSpace,
    ) -> Result<Self> {
        let tangents = cfg
            .points()
            .iter()
            .map(|p| space.tangent(&lent_map(functional, cfg, p), &p.mark))
            .collect::<Result<_>>()?;
        Ok(Self {
            tangents,
            dim: functional.output_dim(),
        })
    }

    pub fn sample(&self, seed: u64) -> DVector<f64> {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut acc = DVector::zeros(self.dim);
        for (i, j) in self.tangents.iter().enumerate() {
            let mut rng = rng_from_seed(derive_seed(seed, i as u64));
            let zeta = DVector::from_iterator(
                j.ncols(),
                (0..j.ncols()).map(|_| rng.sample::<f64, _>(StandardNormal)),
            );
            acc += j * zeta;
        }
        acc
    }

    /// `Σ_p J_p J_pᵀ`, the covariance of the draws.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.dim, self.dim);
        for j in &self.tangents {
            acc += gram(j);
        }
        acc
    }
}
