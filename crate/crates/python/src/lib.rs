//! Python bindings: configurations of the planar process, carré du champ and
//! gradient computations, SDE flow quantities, and the density diagnostics.
//! Matrices cross the boundary as nested lists.

use std::sync::Arc;

use lent_core::config_space::{simulate_configuration, LevyMeasure, ProcessSpec};
use lent_core::density_analysis::{
    det_lower_bound, isotropic_gamma, isotropy_check, kde_estimate, kde_scott,
    nondegeneracy_survey, span_rank_for, DensityEstimate,
};
use lent_core::lent_particle::{
    gamma_total, gamma_total_oracle, isotropic_functional, make_exp, make_linear, sharp_sample,
    AngleDerivative, ClosurePointFn, Functional,
};
use lent_core::sde_flow::{
    euler_solve, gamma_sde, moment_growth_check_with, CoefficientPreset, DriverPath,
    SdeCoefficients,
};
use lent_core::{BasePoint, CircleMarkSpace, LentError, Mark, MarkedPoint};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: LentError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Finite configuration of the planar process: points `(time, radius, angle)`.
#[pyclass(name = "Configuration", module = "lentpy", skip_from_py_object)]
#[derive(Clone)]
struct PyConfiguration {
    inner: lent_core::Configuration,
}

#[pymethods]
impl PyConfiguration {
    #[new]
    #[pyo3(signature = (points, horizon = 1.0))]
    fn new(points: Vec<(f64, f64, f64)>, horizon: f64) -> PyResult<Self> {
        let pts = points
            .into_iter()
            .map(|(t, r, a)| MarkedPoint::new(BasePoint::new(t, vec![r]), Mark::Angle(a)))
            .collect();
        lent_core::Configuration::new(horizon, CircleMarkSpace::ID, pts)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        lent_core::Configuration::from_json(text)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon()
    }

    /// Points in canonical order.
    fn points(&self) -> PyResult<Vec<(f64, f64, f64)>> {
        self.inner
            .points()
            .iter()
            .map(|p| match (p.base.attribute.first(), p.mark.angle()) {
                (Some(r), Some(a)) => Ok((p.base.time, *r, a)),
                _ => Err(PyValueError::new_err("not a planar configuration")),
            })
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Configuration(horizon={}, points={})",
            self.inner.horizon(),
            self.inner.len()
        )
    }
}

/// Poisson base process with a radial Lévy measure and uniform angles.
#[pyclass(name = "ProcessSpec", module = "lentpy", skip_from_py_object)]
#[derive(Clone)]
struct PyProcessSpec {
    inner: ProcessSpec,
}

#[pymethods]
impl PyProcessSpec {
    /// `scale · r^(-exponent) dr` on `(truncation, upper]`.
    #[staticmethod]
    #[pyo3(signature = (exponent, upper = 1.0, horizon = 1.0, truncation = 1e-3, scale = 1.0))]
    fn power_law(
        exponent: f64,
        upper: f64,
        horizon: f64,
        truncation: f64,
        scale: f64,
    ) -> PyResult<Self> {
        let spec = ProcessSpec::new(
            horizon,
            LevyMeasure::PowerLaw {
                scale,
                exponent,
                upper,
            },
        )
        .with_truncation(truncation);
        spec.validate().map_err(err)?;
        Ok(Self { inner: spec })
    }

    /// Jumps of fixed length `radius` at rate `weight`.
    #[staticmethod]
    #[pyo3(signature = (radius, weight, horizon = 1.0, truncation = 1e-3))]
    fn dirac(radius: f64, weight: f64, horizon: f64, truncation: f64) -> PyResult<Self> {
        let spec = ProcessSpec::new(horizon, LevyMeasure::dirac(radius, weight))
            .with_truncation(truncation);
        spec.validate().map_err(err)?;
        Ok(Self { inner: spec })
    }

    /// Expected number of points.
    fn intensity(&self) -> f64 {
        self.inner.intensity()
    }

    fn simulate(&self, seed: u64) -> PyResult<PyConfiguration> {
        simulate_configuration(&self.inner, &CircleMarkSpace::default(), seed)
            .map(|inner| PyConfiguration { inner })
            .map_err(err)
    }
}

/// Scalar point function backed by Python callables `f(time, radius, angle)`
/// and optionally `df(time, radius, angle)` (derivative in the angle).
fn python_point_fn(f: Py<PyAny>, df: Option<Py<PyAny>>) -> ClosurePointFn {
    let call = |g: &Py<PyAny>, s: f64, r: f64, th: f64| -> f64 {
        Python::attach(|py| {
            g.bind(py)
                .call1((s, r, th))
                .and_then(|v| v.extract::<f64>())
                .unwrap_or(f64::NAN)
        })
    };
    let df = df.map(|df| {
        Arc::new(move |s: f64, a: &[f64], th: f64| call(&df, s, a[0], th)) as AngleDerivative
    });
    ClosurePointFn::scalar_on_circle(move |s, a, th| call(&f, s, a[0], th), df)
}

fn functional(
    kind: &str,
    t: Option<f64>,
    f: Option<Py<PyAny>>,
    df: Option<Py<PyAny>>,
) -> PyResult<Box<dyn Functional>> {
    match kind {
        "polar" => Ok(Box::new(isotropic_functional(t.unwrap_or(f64::INFINITY)))),
        "linear" | "exp" => {
            let f = f.ok_or_else(|| PyValueError::new_err("functional needs f"))?;
            let point = python_point_fn(f, df);
            if kind == "linear" {
                Ok(Box::new(make_linear(point)))
            } else {
                Ok(Box::new(make_exp(point).map_err(err)?))
            }
        }
        other => Err(PyValueError::new_err(format!(
            "unknown functional `{other}` (expected polar, linear or exp)"
        ))),
    }
}

/// `Γ[F]` by the lent particle method. `kind` is `polar` (jump sum up to
/// time `t`), `linear` (`N(f)`) or `exp` (`e^{-N(f)}`).
#[pyfunction]
#[pyo3(signature = (cfg, kind = "polar", t = None, f = None, df = None, oracle = false))]
fn carre_du_champ(
    py: Python<'_>,
    cfg: &PyConfiguration,
    kind: &str,
    t: Option<f64>,
    f: Option<Py<PyAny>>,
    df: Option<Py<PyAny>>,
    oracle: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let func = functional(kind, t, f, df)?;
    let space = CircleMarkSpace::default();
    let g = py
        .detach(|| {
            if oracle {
                gamma_total_oracle(func.as_ref(), &cfg.inner, &space)
            } else {
                gamma_total(func.as_ref(), &cfg.inner, &space)
            }
        })
        .map_err(err)?;
    Ok(rows(g.matrix()))
}

/// One draw of the gradient `F♯`.
#[pyfunction]
#[pyo3(signature = (cfg, seed, kind = "polar", t = None, f = None, df = None))]
fn gradient_sample(
    cfg: &PyConfiguration,
    seed: u64,
    kind: &str,
    t: Option<f64>,
    f: Option<Py<PyAny>>,
    df: Option<Py<PyAny>>,
) -> PyResult<Vec<f64>> {
    let func = functional(kind, t, f, df)?;
    sharp_sample(func.as_ref(), &cfg.inner, &CircleMarkSpace::default(), seed)
        .map(|v| v.iter().copied().collect())
        .map_err(err)
}

/// Closed-form `Γ[Z_t]` of the planar jump sum.
#[pyfunction]
#[pyo3(name = "isotropic_gamma")]
fn py_isotropic_gamma(cfg: &PyConfiguration, t: f64) -> PyResult<Vec<Vec<f64>>> {
    isotropic_gamma(&cfg.inner, t)
        .map(|m| rows(&m))
        .map_err(err)
}

/// `(r₁² ∧ r₂²)² sin²(θ₁ - θ₂)` for points `(time, radius, angle)`.
#[pyfunction]
#[pyo3(name = "det_lower_bound")]
fn py_det_lower_bound(p1: (f64, f64, f64), p2: (f64, f64, f64)) -> PyResult<f64> {
    let mk =
        |(t, r, a): (f64, f64, f64)| MarkedPoint::new(BasePoint::new(t, vec![r]), Mark::Angle(a));
    det_lower_bound(&mk(p1), &mk(p2)).map_err(err)
}

/// Survey of `det Γ[Z_t]`; returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (spec, n_samples, seed, threshold = 1e-10, t = None))]
fn survey(
    py: Python<'_>,
    spec: &PyProcessSpec,
    n_samples: usize,
    seed: u64,
    threshold: f64,
    t: Option<f64>,
) -> PyResult<String> {
    let t = t.unwrap_or(spec.inner.horizon);
    let rep = py
        .detach(|| {
            nondegeneracy_survey(
                &isotropic_functional(t),
                &spec.inner,
                &CircleMarkSpace::default(),
                n_samples,
                threshold,
                seed,
            )
        })
        .map_err(err)?;
    serde_json::to_string(&rep).map_err(json_err)
}

fn preset(json: &str) -> PyResult<CoefficientPreset> {
    let p: CoefficientPreset = serde_json::from_str(json).map_err(json_err)?;
    p.validate().map_err(err)?;
    Ok(p)
}

fn driver(increments: Vec<Vec<f64>>, dt: f64) -> PyResult<DriverPath> {
    let d = increments.first().map_or(0, Vec::len);
    DriverPath::new(dt, d, increments.into_iter().flatten().collect()).map_err(err)
}

/// Endpoint `γ[X_T^x]` of the Euler flow of a coefficient preset (JSON, e.g.
/// `{"kind": "rotation", "rate": 1.0}`) along the increments `n × d`.
#[pyfunction]
#[pyo3(name = "gamma_sde")]
fn py_gamma_sde(
    preset_json: &str,
    x: Vec<f64>,
    increments: Vec<Vec<f64>>,
    dt: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let p = preset(preset_json)?;
    let path = driver(increments, dt)?;
    gamma_sde(&p, &DVector::from_vec(x), &path)
        .map(|m| rows(&m))
        .map_err(err)
}

/// Draws of `(X_T^x)♭`, one per seed in `seeds`.
#[pyfunction]
fn flat_sde_samples(
    preset_json: &str,
    x: Vec<f64>,
    increments: Vec<Vec<f64>>,
    dt: f64,
    seeds: Vec<u64>,
) -> PyResult<Vec<Vec<f64>>> {
    let p = preset(preset_json)?;
    let path = driver(increments, dt)?;
    let flow = euler_solve(&p, &DVector::from_vec(x), &path).map_err(err)?;
    let sampler = flow.flat_sampler();
    Ok(seeds
        .into_iter()
        .map(|s| {
            sampler
                .sample(&mut lent_core::rng::rng_from_seed(s))
                .iter()
                .copied()
                .collect()
        })
        .collect())
}

/// Euler driver increments `n × d` drawn from `seed`.
#[pyfunction]
fn sample_increments(n_steps: usize, dt: f64, noise_dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let path = DriverPath::sample(
        n_steps,
        dt,
        noise_dim,
        &mut lent_core::rng::rng_from_seed(seed),
    );
    (0..n_steps)
        .map(|v| path.step_increments(v).to_vec())
        .collect()
}

/// Span rank of the preset's diffusion columns at the given jumps.
#[pyfunction]
#[pyo3(signature = (preset_json, jumps, tol = 1e-10))]
fn span_rank(preset_json: &str, jumps: Vec<Vec<f64>>, tol: f64) -> PyResult<usize> {
    let p = preset(preset_json)?;
    let xs: Vec<DVector<f64>> = jumps.into_iter().map(DVector::from_vec).collect();
    span_rank_for(&p, &xs, tol).map_err(err)
}

/// Moment growth of `x ↦ X_t^x` near zero; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (preset_json, t, grid, n_paths, seed, n_steps = 256))]
fn moment_check(
    py: Python<'_>,
    preset_json: &str,
    t: f64,
    grid: Vec<Vec<f64>>,
    n_paths: usize,
    seed: u64,
    n_steps: usize,
) -> PyResult<String> {
    let p = preset(preset_json)?;
    let xs: Vec<DVector<f64>> = grid.into_iter().map(DVector::from_vec).collect();
    let rep = py
        .detach(|| moment_growth_check_with(&p, t, &xs, n_paths, seed, n_steps))
        .map_err(err)?;
    serde_json::to_string(&rep).map_err(json_err)
}

/// Preset state dimension, as a quick validity check.
#[pyfunction]
fn preset_dims(preset_json: &str) -> PyResult<(usize, usize)> {
    let p = preset(preset_json)?;
    Ok((p.state_dim(), p.noise_dim()))
}

/// Gaussian product kernel density estimate.
#[pyclass(name = "Kde", module = "lentpy")]
struct PyKde {
    inner: DensityEstimate,
}

#[pymethods]
impl PyKde {
    /// Scott's rule when `bandwidth` is omitted.
    #[new]
    #[pyo3(signature = (samples, bandwidth = None))]
    fn new(samples: Vec<Vec<f64>>, bandwidth: Option<f64>) -> PyResult<Self> {
        let xs: Vec<DVector<f64>> = samples.into_iter().map(DVector::from_vec).collect();
        let inner = match bandwidth {
            Some(h) => kde_estimate(&xs, h),
            None => kde_scott(&xs),
        }
        .map_err(err)?;
        Ok(Self { inner })
    }

    fn evaluate(&self, q: Vec<f64>) -> PyResult<f64> {
        if q.len() != self.inner.dim() {
            return Err(PyValueError::new_err("query dimension mismatch"));
        }
        Ok(self.inner.evaluate(&q))
    }

    #[getter]
    fn bandwidth(&self) -> Vec<f64> {
        self.inner.bandwidth().to_vec()
    }

    /// Rotation symmetry report as JSON.
    #[pyo3(signature = (radii, n_angles = 16, tol = 0.1))]
    fn isotropy(&self, radii: Vec<f64>, n_angles: usize, tol: f64) -> PyResult<String> {
        let rep = isotropy_check(&self.inner, &radii, n_angles, tol).map_err(err)?;
        serde_json::to_string(&rep).map_err(json_err)
    }
}

#[pymodule]
fn lentpy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfiguration>()?;
    m.add_class::<PyProcessSpec>()?;
    m.add_class::<PyKde>()?;
    m.add_function(wrap_pyfunction!(carre_du_champ, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_sample, m)?)?;
    m.add_function(wrap_pyfunction!(py_isotropic_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(py_det_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(survey, m)?)?;
    m.add_function(wrap_pyfunction!(py_gamma_sde, m)?)?;
    m.add_function(wrap_pyfunction!(flat_sde_samples, m)?)?;
    m.add_function(wrap_pyfunction!(sample_increments, m)?)?;
    m.add_function(wrap_pyfunction!(span_rank, m)?)?;
    m.add_function(wrap_pyfunction!(moment_check, m)?)?;
    m.add_function(wrap_pyfunction!(preset_dims, m)?)?;
    Ok(())
}
