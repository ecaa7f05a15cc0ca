//! Numerical density diagnostics: nondegeneracy of `Γ[F]` over simulated
//! configurations, the planar determinant bound, the span test for
//! SDE-transformed jumps, and kernel density estimates with a rotation
//! symmetry check.
//!
//! Nothing here proves absolute continuity. The energy image density
//! property turns `det Γ[F] > 0` almost surely into a density for `F`; the
//! survey only reports how often `det Γ[F]` clears a threshold, as a function
//! of the small-jump truncation.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config_space::{simulate_configuration, Configuration, MarkedPoint, ProcessSpec};
use crate::error::{LentError, Result};
use crate::lent_particle::{gamma_total, Functional};
use crate::linalg::{numerical_rank, symmetric_eigenvalues};
use crate::mark_dirichlet::MarkSpace;
use crate::rng::derive_seed;
use crate::sde_flow::SdeCoefficients;

/// Default relative tolerance of the span test.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

fn polar(p: &MarkedPoint) -> Result<(f64, f64)> {
    let theta = p.mark.angle().ok_or_else(|| LentError::MarkMismatch {
        space: "circle".into(),
    })?;
    let r = *p
        .base
        .attribute
        .first()
        .ok_or(LentError::DimensionMismatch {
            expected: 1,
            found: 0,
        })?;
    Ok((r, theta))
}

/// Closed form of `Γ[Z_t]` for `Z_t = Σ_{time ≤ t} r (cos θ, sin θ)`:
/// `Σ r² [[sin²θ, -sinθ cosθ], [-sinθ cosθ, cos²θ]]`.
pub fn isotropic_gamma(cfg: &Configuration, t: f64) -> Result<DMatrix<f64>> {
    let mut g = DMatrix::zeros(2, 2);
    for p in cfg.points().iter().filter(|p| p.base.time <= t) {
        let (r, theta) = polar(p)?;
        let (s, c) = theta.sin_cos();
        let r2 = r * r;
        g[(0, 0)] += r2 * s * s;
        g[(0, 1)] -= r2 * s * c;
        g[(1, 0)] -= r2 * s * c;
        g[(1, 1)] += r2 * c * c;
    }
    Ok(g)
}

/// `(r₁² ∧ r₂²)² sin²(θ₁ - θ₂)`, a lower bound for `det Γ[Z_t]` on any
/// configuration containing both points.
pub fn det_lower_bound(p1: &MarkedPoint, p2: &MarkedPoint) -> Result<f64> {
    let (r1, t1) = polar(p1)?;
    let (r2, t2) = polar(p2)?;
    let m = (r1 * r1).min(r2 * r2);
    Ok(m * m * (t1 - t2).sin().powi(2))
}

/// One configuration of a survey.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurveyRow {
    pub replica: usize,
    pub n_points: usize,
    pub det: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// Lower edge of `log10 λ_min`; the first bin collects everything
    /// below the second edge, including `λ_min ≤ 0`.
    pub log10_lo: f64,
    pub log10_hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NondegeneracyReport {
    pub n_samples: usize,
    pub threshold: f64,
    pub truncation: f64,
    pub fraction_above: f64,
    /// Binomial standard error of `fraction_above`.
    pub fraction_se: f64,
    pub mean_points: f64,
    pub min_eigenvalue_histogram: Vec<HistogramBin>,
    pub rows: Vec<SurveyRow>,
}

const HIST_LO: f64 = -16.0;
const HIST_HI: f64 = 4.0;

fn histogram(rows: &[SurveyRow]) -> Vec<HistogramBin> {
    let n_bins = (HIST_HI - HIST_LO) as usize;
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|i| HistogramBin {
            log10_lo: HIST_LO + i as f64,
            log10_hi: HIST_LO + i as f64 + 1.0,
            count: 0,
        })
        .collect();
    for r in rows {
        let l = if r.min_eigenvalue > 0.0 {
            r.min_eigenvalue.log10()
        } else {
            f64::NEG_INFINITY
        };
        let i = ((l - HIST_LO).floor().max(0.0) as usize).min(n_bins - 1);
        bins[i].count += 1;
    }
    bins
}

fn survey_row(
    functional: &dyn Functional,
    cfg: &Configuration,
    space: &dyn MarkSpace,
    replica: usize,
) -> Result<SurveyRow> {
    let g = gamma_total(functional, cfg, space)?;
    let eig = symmetric_eigenvalues(g.matrix());
    Ok(SurveyRow {
        replica,
        n_points: cfg.len(),
        det: g.determinant(),
        min_eigenvalue: eig.first().copied().unwrap_or(0.0),
        max_eigenvalue: eig.last().copied().unwrap_or(0.0),
    })
}

fn report(rows: Vec<SurveyRow>, threshold: f64, truncation: f64) -> NondegeneracyReport {
    let n = rows.len();
    let nf = n.max(1) as f64;
    let above = rows.iter().filter(|r| r.det > threshold).count() as f64;
    let fraction = if n == 0 { 0.0 } else { above / nf };
    NondegeneracyReport {
        n_samples: n,
        threshold,
        truncation,
        fraction_above: fraction,
        fraction_se: (fraction * (1.0 - fraction) / nf).sqrt(),
        mean_points: rows.iter().map(|r| r.n_points as f64).sum::<f64>() / nf,
        min_eigenvalue_histogram: histogram(&rows),
        rows,
    }
}

/// Survey over given configurations (in order).
pub fn survey_configurations(
    functional: &dyn Functional,
    configs: &[Configuration],
    space: &dyn MarkSpace,
    threshold: f64,
    truncation: f64,
) -> Result<NondegeneracyReport> {
    let rows = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| survey_row(functional, cfg, space, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(rows, threshold, truncation))
}

/// Simulate `n_samples` configurations (replica `i` uses seed
/// `derive_seed(seed, i)`) and record `det Γ[F]` for each.
pub fn nondegeneracy_survey(
    functional: &dyn Functional,
    spec: &ProcessSpec,
    space: &dyn MarkSpace,
    n_samples: usize,
    threshold: f64,
    seed: u64,
) -> Result<NondegeneracyReport> {
    spec.validate()?;
    let rows = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let cfg = simulate_configuration(spec, space, derive_seed(seed, i as u64))?;
            survey_row(functional, &cfg, space, i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report(rows, threshold, spec.truncation))
}

/// Surveys at several truncation levels on coupled samples: each replica is
/// simulated once at the smallest level and thinned to `|attribute| > ε` for
/// the others, so lowering `ε` only ever adds points. Reports come back in
/// the order of `truncations`.
pub fn truncation_sweep(
    functional: &dyn Functional,
    spec: &ProcessSpec,
    space: &dyn MarkSpace,
    truncations: &[f64],
    n_samples: usize,
    threshold: f64,
    seed: u64,
) -> Result<Vec<NondegeneracyReport>> {
    let finest = truncations.iter().copied().fold(f64::INFINITY, f64::min);
    if !finest.is_finite() {
        return Err(LentError::InvalidSpec("no truncation levels given".into()));
    }
    let base = spec.clone().with_truncation(finest);
    base.validate()?;
    let per_replica = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let cfg = simulate_configuration(&base, space, derive_seed(seed, i as u64))?;
            truncations
                .iter()
                .map(|&eps| {
                    let thinned = cfg.restrict(|p| p.base.radius() > eps);
                    survey_row(functional, &thinned, space, i)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(truncations
        .iter()
        .enumerate()
        .map(|(k, &eps)| {
            let rows = per_replica.iter().map(|r| r[k].clone()).collect();
            report(rows, threshold, eps)
        })
        .collect())
}

/// Vector field `x ↦ A_j(x)`.
pub type VectorField<'a> = dyn Fn(&DVector<f64>) -> DVector<f64> + 'a;

/// Numerical rank of the `m × (d·N)` matrix whose columns are `A_j(x_n)`.
pub fn prop4_span_test(
    fields: &[&VectorField<'_>],
    jumps: &[DVector<f64>],
    tol: f64,
) -> Result<usize> {
    let m = jumps
        .first()
        .map(|x| x.len())
        .ok_or_else(|| LentError::InvalidSpec("span test needs at least one jump".into()))?;
    let mut cols = Vec::with_capacity(fields.len() * jumps.len());
    for x in jumps {
        for a in fields {
            let v = a(x);
            if v.len() != m {
                return Err(LentError::DimensionMismatch {
                    expected: m,
                    found: v.len(),
                });
            }
            cols.push(v);
        }
    }
    if cols.is_empty() {
        return Ok(0);
    }
    Ok(numerical_rank(&DMatrix::from_columns(&cols), tol))
}

/// Span test with `A_j(x)` read off the diffusion matrix at `(z, x) = (x, x)`,
/// i.e. at the start of the flow. For state-independent fields this is the
/// field itself.
pub fn span_rank_for(
    coeffs: &dyn SdeCoefficients,
    jumps: &[DVector<f64>],
    tol: f64,
) -> Result<usize> {
    let fields: Vec<Box<VectorField<'_>>> = (0..coeffs.noise_dim())
        .map(|j| {
            Box::new(move |x: &DVector<f64>| coeffs.diffusion(x, x).column(j).into_owned())
                as Box<VectorField<'_>>
        })
        .collect();
    let refs: Vec<&VectorField<'_>> = fields.iter().map(|f| f.as_ref()).collect();
    prop4_span_test(&refs, jumps, tol)
}

/// Samples beyond this many bandwidths along the first coordinate are
/// skipped; the neglected kernel mass is below `e^{-32}`.
const KERNEL_CUTOFF: f64 = 8.0;

/// Product Gaussian kernel density estimate.
#[derive(Clone, Debug)]
pub struct DensityEstimate {
    dim: usize,
    /// Row-major `n × dim`, sorted by the first coordinate.
    samples: Vec<f64>,
    bandwidth: Vec<f64>,
    norm: f64,
}

fn sorted_rows(samples: &[DVector<f64>]) -> Result<(usize, Vec<f64>)> {
    let dim = samples.first().map_or(0, |s| s.len());
    if dim == 0 {
        return Err(LentError::InvalidSpec(
            "density estimate needs nonempty samples of positive dimension".into(),
        ));
    }
    let mut rows: Vec<&DVector<f64>> = samples.iter().collect();
    for r in &rows {
        if r.len() != dim {
            return Err(LentError::DimensionMismatch {
                expected: dim,
                found: r.len(),
            });
        }
        crate::error::check_finite(r.as_slice(), "density sample")?;
    }
    rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
    Ok((dim, rows.iter().flat_map(|r| r.iter().copied()).collect()))
}

impl DensityEstimate {
    /// Estimate with per-coordinate bandwidths.
    pub fn with_bandwidths(samples: &[DVector<f64>], bandwidth: Vec<f64>) -> Result<Self> {
        let (dim, flat) = sorted_rows(samples)?;
        if bandwidth.len() != dim {
            return Err(LentError::DimensionMismatch {
                expected: dim,
                found: bandwidth.len(),
            });
        }
        if let Some(&h) = bandwidth.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
            return Err(LentError::BandwidthNonPositive(h));
        }
        let n = samples.len() as f64;
        let norm = 1.0
            / (n * bandwidth
                .iter()
                .map(|h| h * (2.0 * std::f64::consts::PI).sqrt())
                .product::<f64>());
        Ok(Self {
            dim,
            samples: flat,
            bandwidth,
            norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    fn first_coord(&self, i: usize) -> f64 {
        self.samples[i * self.dim]
    }

    fn lower_bound(&self, x: f64) -> usize {
        let (mut lo, mut hi) = (0, self.n_samples());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.first_coord(mid) < x {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn evaluate(&self, q: &[f64]) -> f64 {
        assert_eq!(q.len(), self.dim, "query dimension");
        let reach = KERNEL_CUTOFF * self.bandwidth[0];
        let start = self.lower_bound(q[0] - reach);
        let end = self.lower_bound(q[0] + reach);
        let mut acc = 0.0;
        for i in start..end {
            let row = &self.samples[i * self.dim..(i + 1) * self.dim];
            let e: f64 = row
                .iter()
                .zip(q)
                .zip(&self.bandwidth)
                .map(|((x, q), h)| ((q - x) / h).powi(2))
                .sum();
            acc += (-0.5 * e).exp();
        }
        acc * self.norm
    }

    /// Density on the tensor grid of `axes` (one axis per coordinate).
    pub fn evaluate_grid(&self, axes: &[Vec<f64>]) -> Result<DensityGrid> {
        if axes.len() != self.dim {
            return Err(LentError::DimensionMismatch {
                expected: self.dim,
                found: axes.len(),
            });
        }
        let total: usize = axes.iter().map(Vec::len).product();
        let values = (0..total)
            .into_par_iter()
            .map(|flat| self.evaluate(&grid_point(axes, flat)))
            .collect();
        Ok(DensityGrid {
            axes: axes.to_vec(),
            values,
        })
    }
}

fn grid_point(axes: &[Vec<f64>], mut flat: usize) -> Vec<f64> {
    // last axis varies fastest
    let mut q = vec![0.0; axes.len()];
    for (c, axis) in axes.iter().enumerate().rev() {
        q[c] = axis[flat % axis.len()];
        flat /= axis.len();
    }
    q
}

/// Evenly spaced axis from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Kernel density estimate with one bandwidth for every coordinate.
pub fn kde_estimate(samples: &[DVector<f64>], bandwidth: f64) -> Result<DensityEstimate> {
    if bandwidth.is_nan() || bandwidth <= 0.0 {
        return Err(LentError::BandwidthNonPositive(bandwidth));
    }
    let dim = samples.first().map_or(0, |s| s.len());
    DensityEstimate::with_bandwidths(samples, vec![bandwidth; dim])
}

/// Scott's rule, `n^{-1/(k+4)}` times the sample standard deviation of each
/// coordinate.
pub fn scott_bandwidths(samples: &[DVector<f64>]) -> Vec<f64> {
    let k = samples.first().map_or(0, |s| s.len());
    let n = samples.len() as f64;
    let factor = n.powf(-1.0 / (k as f64 + 4.0));
    (0..k)
        .map(|c| {
            let xs: Vec<f64> = samples.iter().map(|s| s[c]).collect();
            factor * crate::stats::mean_and_sd(&xs).1
        })
        .collect()
}

pub fn kde_scott(samples: &[DVector<f64>]) -> Result<DensityEstimate> {
    DensityEstimate::with_bandwidths(samples, scott_bandwidths(samples))
}

/// Kernel density values on a tensor grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub axes: Vec<Vec<f64>>,
    /// Last axis varies fastest.
    pub values: Vec<f64>,
}

impl DensityGrid {
    /// Trapezoid-rule integral over the grid box.
    pub fn mass(&self) -> f64 {
        let weights: Vec<Vec<f64>> = self
            .axes
            .iter()
            .map(|a| {
                let n = a.len();
                (0..n)
                    .map(|i| {
                        let left = if i > 0 { a[i] - a[i - 1] } else { 0.0 };
                        let right = if i + 1 < n { a[i + 1] - a[i] } else { 0.0 };
                        0.5 * (left + right)
                    })
                    .collect()
            })
            .collect();
        self.values
            .iter()
            .enumerate()
            .map(|(flat, v)| {
                let mut w = 1.0;
                let mut rest = flat;
                for axis in weights.iter().rev() {
                    w *= axis[rest % axis.len()];
                    rest /= axis.len();
                }
                w * v
            })
            .sum()
    }

    /// CSV with columns `x0, x1, …, density`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.axes.len()).map(|c| format!("x{c}")).collect();
        header.push("density".into());
        w.write_record(&header)?;
        for (flat, v) in self.values.iter().enumerate() {
            let mut rec: Vec<String> = grid_point(&self.axes, flat)
                .iter()
                .map(f64::to_string)
                .collect();
            rec.push(v.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotropyRow {
    pub radius: f64,
    pub angular_mean: f64,
    pub max_relative_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotropyReport {
    pub n_angles: usize,
    pub rows: Vec<IsotropyRow>,
    pub max_deviation: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Evaluate a planar estimate on circles of the given radii at `n_angles`
/// equally spaced angles and compare with the angular mean.
pub fn isotropy_check(
    est: &DensityEstimate,
    radii: &[f64],
    n_angles: usize,
    tol: f64,
) -> Result<IsotropyReport> {
    if est.dim() != 2 {
        return Err(LentError::DimensionMismatch {
            expected: 2,
            found: est.dim(),
        });
    }
    if n_angles == 0 {
        return Err(LentError::InvalidSpec(
            "isotropy check needs n_angles ≥ 1".into(),
        ));
    }
    let rows: Vec<IsotropyRow> = radii
        .iter()
        .map(|&r| {
            let values: Vec<f64> = (0..n_angles)
                .map(|i| {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / n_angles as f64;
                    est.evaluate(&[r * a.cos(), r * a.sin()])
                })
                .collect();
            let mean = values.iter().sum::<f64>() / n_angles as f64;
            let dev = values.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
            IsotropyRow {
                radius: r,
                angular_mean: mean,
                max_relative_deviation: if mean > 0.0 { dev / mean } else { 0.0 },
            }
        })
        .collect();
    let max_deviation = rows
        .iter()
        .map(|r| r.max_relative_deviation)
        .fold(0.0, f64::max);
    Ok(IsotropyReport {
        n_angles,
        rows,
        max_deviation,
        tol,
        pass: max_deviation < tol,
    })
}
