//! Seeded experiment runs driven by TOML configuration files.
//!
//! Three experiments are available: `isotropic` (planar jump process with
//! uniform angles), `sde` (jumps transformed by a diffusion) and `suite`
//! (closed-form identities of the calculus as a pass/fail table). Every
//! output is a deterministic function of the configuration and the seed;
//! replicas may run on any number of threads and are collected in order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config_space::{
    simulate_configuration, AttributeSampler, BasePoint, Configuration, LevyMeasure, MarkedPoint,
    ProcessSpec,
};
use crate::density_analysis::{
    det_lower_bound, isotropic_gamma, isotropy_check, kde_estimate, kde_scott, linspace,
    span_rank_for, truncation_sweep, NondegeneracyReport, SurveyRow,
};
use crate::error::{LentError, Result};
use crate::lent_particle::{
    gamma_total, gamma_total_oracle, isotropic_functional, make_exp, make_jump_sum, make_linear,
    sharp_sample, AngleDerivative, ClosurePointFn, Functional,
};
use crate::linalg::{max_relative_deviation, symmetric_eigenvalues};
use crate::mark_dirichlet::{AngleFn, CircleMarkSpace, Mark, MarkSpace};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sde_flow::{
    euler_solve, gamma_sde, moment_growth_check_with, CoefficientPreset, DriverPath, JumpField,
    MomentGrowthReport, SdeCoefficients, WienerMarkSpace,
};
use crate::stats::{empirical_second_moments, max_z_score};

/// Independent random streams derived from the run seed.
mod stream {
    pub const SURVEY: u64 = 0;
    pub const KDE: u64 = 1;
    pub const ORACLE: u64 = 2;
    pub const SUITE: u64 = 3;
    pub const SDE: u64 = 4;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Isotropic,
    SdeTransform,
    IdentitySuite,
}

/// Radial Lévy measure as written in a configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LevyConfig {
    /// `scale · r^(-exponent)` on `(0, upper]`.
    PowerLaw {
        exponent: f64,
        upper: f64,
        #[serde(default = "one")]
        scale: f64,
    },
    Dirac {
        radius: f64,
        weight: f64,
    },
    Atoms {
        radii: Vec<f64>,
        weights: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

impl LevyConfig {
    fn to_measure(&self, key: &str) -> Result<LevyMeasure> {
        let bad = |field: &str, msg: &str| Err(LentError::Config(format!("{key}.{field}: {msg}")));
        match self {
            LevyConfig::PowerLaw {
                exponent,
                upper,
                scale,
            } => {
                if !(*upper > 0.0 && upper.is_finite()) {
                    return bad("upper", "must be positive and finite");
                }
                if !(*scale >= 0.0 && scale.is_finite()) {
                    return bad("scale", "must be nonnegative");
                }
                if !exponent.is_finite() {
                    return bad("exponent", "must be finite");
                }
                Ok(LevyMeasure::PowerLaw {
                    scale: *scale,
                    exponent: *exponent,
                    upper: *upper,
                })
            }
            LevyConfig::Dirac { radius, weight } => {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return bad("radius", "must be positive");
                }
                if !(*weight >= 0.0 && weight.is_finite()) {
                    return bad("weight", "must be nonnegative");
                }
                Ok(LevyMeasure::dirac(*radius, *weight))
            }
            LevyConfig::Atoms { radii, weights } => {
                if radii.len() != weights.len() {
                    return bad("weights", "must have one entry per radius");
                }
                if radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                    return bad("radii", "must be positive");
                }
                if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                    return bad("weights", "must be nonnegative");
                }
                Ok(LevyMeasure::Atoms(
                    radii.iter().copied().zip(weights.iter().copied()).collect(),
                ))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProcessSection {
    pub horizon: f64,
    pub truncation: f64,
    pub levy: LevyConfig,
}

impl Default for ProcessSection {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            truncation: 1e-3,
            levy: LevyConfig::PowerLaw {
                exponent: 1.5,
                upper: 1.0,
                scale: 1.0,
            },
        }
    }
}

impl ProcessSection {
    /// Validated process law; `key` names the section in messages.
    pub fn to_spec(&self, key: &str) -> Result<ProcessSpec> {
        positive(self.horizon, &format!("{key}.horizon"))?;
        positive(self.truncation, &format!("{key}.truncation"))?;
        let spec = ProcessSpec::new(self.horizon, self.levy.to_measure(&format!("{key}.levy"))?)
            .with_truncation(self.truncation);
        spec.validate().map_err(|e| e.context(format!("[{key}]")))?;
        Ok(spec)
    }
}

/// One configuration of the planar process given point by point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedConfiguration {
    pub points: Vec<InjectedPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectedPoint {
    pub time: f64,
    pub radius: f64,
    pub angle: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsotropicSection {
    /// Time at which `Z_t` is observed.
    pub t: f64,
    pub survey_samples: usize,
    pub threshold: f64,
    /// Extra truncation levels surveyed on coupled samples, besides the
    /// process truncation.
    pub truncations: Vec<f64>,
    pub kde_samples: usize,
    /// Scott's rule when absent.
    pub kde_bandwidth: Option<f64>,
    pub grid_points: usize,
    pub grid_extent: f64,
    pub radii: Vec<f64>,
    pub n_angles: usize,
    pub isotropy_tol: f64,
    pub oracle_configs: usize,
    pub inject: Vec<InjectedConfiguration>,
}

impl Default for IsotropicSection {
    fn default() -> Self {
        Self {
            t: 1.0,
            survey_samples: 2000,
            threshold: 1e-10,
            truncations: vec![0.1, 0.01],
            kde_samples: 50_000,
            kde_bandwidth: None,
            grid_points: 61,
            grid_extent: 4.0,
            radii: vec![0.25, 0.5],
            n_angles: 16,
            isotropy_tol: 0.1,
            oracle_configs: 100,
            inject: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeSection {
    pub t: f64,
    pub n_steps: usize,
    pub presets: Vec<CoefficientPreset>,
    /// Law of the jumps fed to the diffusion; directions are uniform.
    pub jumps: ProcessSection,
    pub replicas: usize,
    pub rank_tol: f64,
    pub moment_paths: usize,
    pub moment_steps: usize,
    pub moment_norms: Vec<f64>,
    pub refinement_levels: usize,
    pub refinement_paths: usize,
}

impl Default for SdeSection {
    fn default() -> Self {
        Self {
            t: 1.0,
            n_steps: 64,
            presets: default_presets(),
            jumps: ProcessSection {
                truncation: 0.05,
                ..ProcessSection::default()
            },
            replicas: 20,
            rank_tol: 1e-10,
            moment_paths: 400,
            moment_steps: 64,
            moment_norms: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
            refinement_levels: 4,
            refinement_paths: 256,
        }
    }
}

/// Planar presets covering the degenerate, additive, linear, rotating,
/// nonlinear and deficient cases.
pub fn default_presets() -> Vec<CoefficientPreset> {
    vec![
        CoefficientPreset::Zero {
            dim: 2,
            noise_dim: 1,
        },
        CoefficientPreset::Additive {
            sigma: vec![vec![1.0, 0.0], vec![0.3, 0.8]],
        },
        CoefficientPreset::Linear {
            diffusion: vec![vec![vec![0.4, 0.0], vec![0.0, 0.2]]],
            drift: vec![vec![-0.5, 0.1], vec![0.0, -0.3]],
        },
        CoefficientPreset::Rotation { rate: 1.0 },
        CoefficientPreset::Sinusoidal {
            dim: 2,
            scale: 0.5,
            damping: 0.2,
        },
        CoefficientPreset::JumpField {
            field: JumpField::Spiral,
            damping: 0.5,
        },
        CoefficientPreset::JumpField {
            field: JumpField::Constant {
                vectors: vec![vec![1.0, 0.0]],
            },
            damping: 0.0,
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    /// Random configurations per identity.
    pub configs: usize,
    /// Configurations used for the gradient covariance check.
    pub sharp_configs: usize,
    pub sharp_truncation: f64,
    pub sharp_draws: usize,
    pub flat_draws: usize,
    pub z_tol: f64,
}

impl Default for SuiteSection {
    fn default() -> Self {
        Self {
            configs: 100,
            sharp_configs: 10,
            sharp_truncation: 0.05,
            sharp_draws: 20_000,
            flat_draws: 20_000,
            z_tol: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
        }
    }
}

/// Whole configuration file. Absent sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Option<ExperimentKind>,
    pub seed: Option<u64>,
    pub process: ProcessSection,
    pub isotropic: IsotropicSection,
    pub sde: SdeSection,
    pub suite: SuiteSection,
    pub output: OutputSection,
}

const SECTIONS: [&str; 5] = ["process", "isotropic", "sde", "suite", "output"];

fn positive(v: f64, key: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(LentError::Config(format!(
            "{key}: must be positive, got {v}"
        )))
    }
}

fn nonzero(v: usize, key: &str) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(LentError::Config(format!("{key}: must be at least 1")))
    }
}

impl ExperimentConfig {
    /// Parse TOML. Returns the configuration and one log line per section
    /// that was missing or empty.
    pub fn from_toml(text: &str) -> Result<(Self, Vec<String>)> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| LentError::Config(e.to_string()))?;
        let cfg: Self = toml::from_str(text).map_err(|e| LentError::Config(e.to_string()))?;
        let notes = SECTIONS
            .iter()
            .filter(|s| match table.get(**s) {
                None => true,
                Some(toml::Value::Table(t)) => t.is_empty(),
                Some(_) => false,
            })
            .map(|s| format!("section [{s}] empty or absent; using defaults"))
            .collect();
        Ok((cfg, notes))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = fs::read_to_string(path)
            .map_err(|e| LentError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            LentError::Config("seed: required (set it in the file, --seed or LENT_SEED)".into())
        })
    }

    fn check_kind(&self, expected: ExperimentKind) -> Result<()> {
        match self.kind {
            Some(k) if k != expected => Err(LentError::Config(format!(
                "kind: configuration is for {k:?}, not {expected:?}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn validate_isotropic(&self) -> Result<ProcessSpec> {
        let spec = self.process.to_spec("process")?;
        let s = &self.isotropic;
        positive(s.t, "isotropic.t")?;
        positive(s.threshold, "isotropic.threshold")?;
        nonzero(s.survey_samples, "isotropic.survey_samples")?;
        nonzero(s.kde_samples, "isotropic.kde_samples")?;
        nonzero(s.grid_points, "isotropic.grid_points")?;
        nonzero(s.n_angles, "isotropic.n_angles")?;
        positive(s.grid_extent, "isotropic.grid_extent")?;
        positive(s.isotropy_tol, "isotropic.isotropy_tol")?;
        if let Some(h) = s.kde_bandwidth {
            positive(h, "isotropic.kde_bandwidth")?;
        }
        for (i, eps) in s.truncations.iter().enumerate() {
            positive(*eps, &format!("isotropic.truncations[{i}]"))?;
        }
        for (i, r) in s.radii.iter().enumerate() {
            positive(*r, &format!("isotropic.radii[{i}]"))?;
        }
        for (i, c) in s.inject.iter().enumerate() {
            self.injected(c)
                .map_err(|e| e.context(format!("isotropic.inject[{i}]")))?;
        }
        Ok(spec)
    }

    fn injected(&self, c: &InjectedConfiguration) -> Result<Configuration> {
        let points = c
            .points
            .iter()
            .map(|p| MarkedPoint::new(BasePoint::new(p.time, vec![p.radius]), Mark::Angle(p.angle)))
            .collect();
        Configuration::new(self.process.horizon, CircleMarkSpace::ID, points)
    }

    pub fn validate_sde(&self) -> Result<ProcessSpec> {
        let s = &self.sde;
        positive(s.t, "sde.t")?;
        nonzero(s.n_steps, "sde.n_steps")?;
        nonzero(s.replicas, "sde.replicas")?;
        positive(s.rank_tol, "sde.rank_tol")?;
        if s.moment_paths < 2 {
            return Err(LentError::Config(
                "sde.moment_paths: must be at least 2".into(),
            ));
        }
        nonzero(s.moment_steps, "sde.moment_steps")?;
        nonzero(s.refinement_paths, "sde.refinement_paths")?;
        for (i, x) in s.moment_norms.iter().enumerate() {
            positive(*x, &format!("sde.moment_norms[{i}]"))?;
        }
        if s.presets.is_empty() {
            return Err(LentError::Config(
                "sde.presets: at least one preset needed".into(),
            ));
        }
        for (i, p) in s.presets.iter().enumerate() {
            p.validate()
                .map_err(|e| e.context(format!("sde.presets[{i}]")))?;
        }
        s.jumps.to_spec("sde.jumps")
    }

    pub fn validate_suite(&self) -> Result<ProcessSpec> {
        let s = &self.suite;
        nonzero(s.configs, "suite.configs")?;
        nonzero(s.sharp_configs, "suite.sharp_configs")?;
        positive(s.sharp_truncation, "suite.sharp_truncation")?;
        if s.sharp_draws < 2 || s.flat_draws < 2 {
            return Err(LentError::Config(
                "suite.sharp_draws, suite.flat_draws: must be at least 2".into(),
            ));
        }
        positive(s.z_tol, "suite.z_tol")?;
        let spec = self.process.to_spec("process")?;
        spec.clone()
            .with_truncation(s.sharp_truncation)
            .validate()
            .map_err(|e| e.context("suite.sharp_truncation"))?;
        Ok(spec)
    }
}

/// One pass/fail line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    /// Passes when `max_deviation ≤ tolerance` (NaN fails).
    pub fn at_most(name: &str, max_deviation: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max_deviation,
            tolerance,
            pass: max_deviation <= tolerance,
        }
    }
}

/// Files written by a run and the checks it evaluated.
#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub checks: Vec<CheckRow>,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn table(&self) -> String {
        let width = self
            .checks
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(4)
            .max(5);
        let mut s = format!(
            "{:<width$}  {:>12}  {:>10}  result\n",
            "check", "deviation", "tolerance"
        );
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<width$}  {:>12.3e}  {:>10.1e}  {}",
                c.name,
                c.max_deviation,
                c.tolerance,
                if c.pass { "PASS" } else { "FAIL" }
            );
        }
        s
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_checks(out: &Path, checks: &[CheckRow]) -> Result<PathBuf> {
    let path = out.join("checks.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["check", "max_deviation", "tolerance", "pass"])?;
    for c in checks {
        w.write_record([
            c.name.clone(),
            c.max_deviation.to_string(),
            c.tolerance.to_string(),
            c.pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(path)
}

fn log(msg: &str) {
    eprintln!("[lent] {msg}");
}

/// Largest pairwise lower bound over the points observed by time `t`.
fn best_pair_bound(cfg: &Configuration, t: f64) -> Result<f64> {
    let pts: Vec<&MarkedPoint> = cfg.points().iter().filter(|p| p.base.time <= t).collect();
    let mut best: f64 = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            best = best.max(det_lower_bound(pts[i], pts[j])?);
        }
    }
    Ok(best)
}

fn survey_record(source: &str, truncation: f64, row: &SurveyRow, bound: f64) -> Vec<String> {
    vec![
        source.to_string(),
        row.replica.to_string(),
        truncation.to_string(),
        row.n_points.to_string(),
        row.det.to_string(),
        row.min_eigenvalue.to_string(),
        row.max_eigenvalue.to_string(),
        bound.to_string(),
    ]
}

#[derive(Serialize)]
struct SurveySummary<'a> {
    truncation: f64,
    expected_points: f64,
    n_samples: usize,
    threshold: f64,
    fraction_above: f64,
    fraction_se: f64,
    mean_points: f64,
    min_eigenvalue_histogram: &'a [crate::density_analysis::HistogramBin],
}

/// Planar isotropic process: nondegeneracy survey, density estimate of
/// `Z_t`, rotation symmetry of the estimate and the lent particle oracle
/// comparison.
pub fn run_isotropic(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunOutcome> {
    config.check_kind(ExperimentKind::Isotropic)?;
    let spec = config.validate_isotropic()?;
    let s = &config.isotropic;
    fs::create_dir_all(out)?;
    let space = CircleMarkSpace::default();
    let functional = isotropic_functional(s.t);
    let mut outcome = RunOutcome::default();
    log(&format!(
        "isotropic: horizon {}, truncation {}, expected points {}",
        spec.horizon,
        spec.truncation,
        spec.intensity()
    ));

    // nondegeneracy survey on coupled truncation levels, finest last
    let mut levels: Vec<f64> = s.truncations.clone();
    levels.push(spec.truncation);
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let reports = truncation_sweep(
        &functional,
        &spec,
        &space,
        &levels,
        s.survey_samples,
        s.threshold,
        derive_seed(seed, stream::SURVEY),
    )?;
    let survey_path = out.join("survey.csv");
    let mut w = csv_writer(&survey_path)?;
    w.write_record([
        "source",
        "replica",
        "truncation",
        "n_points",
        "det",
        "min_eigenvalue",
        "max_eigenvalue",
        "pair_bound",
    ])?;
    let survey_seed = derive_seed(seed, stream::SURVEY);
    for rep in &reports {
        let fine = spec.clone().with_truncation(levels[levels.len() - 1]);
        let bounds = (0..rep.rows.len())
            .into_par_iter()
            .map(|i| {
                let cfg =
                    simulate_configuration(&fine, &space, derive_seed(survey_seed, i as u64))?
                        .restrict(|p| p.base.radius() > rep.truncation);
                best_pair_bound(&cfg, s.t)
            })
            .collect::<Result<Vec<f64>>>()?;
        for (row, bound) in rep.rows.iter().zip(bounds) {
            w.write_record(survey_record("simulated", rep.truncation, row, bound))?;
        }
    }
    let mut injected_violation: f64 = 0.0;
    for (i, c) in s.inject.iter().enumerate() {
        let cfg = config.injected(c)?;
        let g = gamma_total(&functional, &cfg, &space)?;
        let eig = symmetric_eigenvalues(g.matrix());
        let bound = best_pair_bound(&cfg, s.t)?;
        let row = SurveyRow {
            replica: i,
            n_points: cfg.len(),
            det: g.determinant(),
            min_eigenvalue: eig.first().copied().unwrap_or(0.0),
            max_eigenvalue: eig.last().copied().unwrap_or(0.0),
        };
        injected_violation = injected_violation.max(bound - row.det);
        w.write_record(survey_record("injected", spec.truncation, &row, bound))?;
    }
    w.flush()?;
    outcome.files.push(survey_path);
    if !s.inject.is_empty() {
        outcome.checks.push(CheckRow::at_most(
            "injected_det_bound",
            injected_violation.max(0.0),
            1e-10,
        ));
    }

    let summary: Vec<SurveySummary> = reports
        .iter()
        .map(|r: &NondegeneracyReport| SurveySummary {
            truncation: r.truncation,
            expected_points: spec.clone().with_truncation(r.truncation).intensity(),
            n_samples: r.n_samples,
            threshold: r.threshold,
            fraction_above: r.fraction_above,
            fraction_se: r.fraction_se,
            mean_points: r.mean_points,
            min_eigenvalue_histogram: &r.min_eigenvalue_histogram,
        })
        .collect();
    let summary_path = out.join("survey_summary.json");
    write_json(&summary_path, &summary)?;
    outcome.files.push(summary_path);
    for r in &summary {
        log(&format!(
            "truncation {}: det > {} in {} of {} configurations",
            r.truncation, r.threshold, r.fraction_above, r.n_samples
        ));
    }

    // density of Z_t
    let kde_seed = derive_seed(seed, stream::KDE);
    let samples = (0..s.kde_samples)
        .into_par_iter()
        .map(|i| {
            let cfg = simulate_configuration(&spec, &space, derive_seed(kde_seed, i as u64))?;
            functional.eval(&cfg)
        })
        .collect::<Result<Vec<DVector<f64>>>>()?;
    let est = match s.kde_bandwidth {
        Some(h) => kde_estimate(&samples, h)?,
        None => kde_scott(&samples)?,
    };
    let axis = linspace(-s.grid_extent, s.grid_extent, s.grid_points);
    let grid = est.evaluate_grid(&[axis.clone(), axis])?;
    let grid_path = out.join("kde_grid.csv");
    grid.save_csv(&grid_path)?;
    outcome.files.push(grid_path);
    let iso = isotropy_check(&est, &s.radii, s.n_angles, s.isotropy_tol)?;
    #[derive(Serialize)]
    struct IsotropyOut<'a> {
        n_samples: usize,
        bandwidth: &'a [f64],
        grid_mass: f64,
        #[serde(flatten)]
        report: &'a crate::density_analysis::IsotropyReport,
    }
    let iso_path = out.join("isotropy.json");
    write_json(
        &iso_path,
        &IsotropyOut {
            n_samples: est.n_samples(),
            bandwidth: est.bandwidth(),
            grid_mass: grid.mass(),
            report: &iso,
        },
    )?;
    outcome.files.push(iso_path);
    outcome.checks.push(CheckRow::at_most(
        "kde_isotropy",
        iso.max_deviation,
        s.isotropy_tol,
    ));

    // lent particle route against in-place differentiation and closed form
    let oracle_seed = derive_seed(seed, stream::ORACLE);
    let lines = (0..s.oracle_configs)
        .into_par_iter()
        .map(|i| {
            let cfg = simulate_configuration(&spec, &space, derive_seed(oracle_seed, i as u64))?;
            let lent = gamma_total(&functional, &cfg, &space)?;
            let oracle = gamma_total_oracle(&functional, &cfg, &space)?;
            let closed = isotropic_gamma(&cfg, s.t)?;
            Ok((
                cfg.len(),
                max_relative_deviation(lent.matrix(), oracle.matrix()),
                max_relative_deviation(lent.matrix(), &closed),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut log_text = String::from("# config points lent_vs_oracle lent_vs_closed_form\n");
    let (mut worst_oracle, mut worst_closed) = (0.0_f64, 0.0_f64);
    for (i, (n, d_oracle, d_closed)) in lines.iter().enumerate() {
        let _ = writeln!(log_text, "{i} {n} {d_oracle} {d_closed}");
        worst_oracle = worst_oracle.max(*d_oracle);
        worst_closed = worst_closed.max(*d_closed);
    }
    let _ = writeln!(log_text, "# max {worst_oracle} {worst_closed}");
    let log_path = out.join("oracle.log");
    fs::write(&log_path, log_text)?;
    outcome.files.push(log_path);
    outcome
        .checks
        .push(CheckRow::at_most("oracle_equivalence", worst_oracle, 1e-12));
    outcome.checks.push(CheckRow::at_most(
        "isotropic_closed_form",
        worst_closed,
        1e-10,
    ));

    outcome.files.push(write_checks(out, &outcome.checks)?);
    Ok(outcome)
}

fn preset_label(i: usize, p: &CoefficientPreset) -> String {
    let kind = serde_json::to_value(p)
        .ok()
        .and_then(|v| v.get("kind").and_then(|k| k.as_str().map(str::to_string)))
        .unwrap_or_default();
    format!("{i}:{kind}")
}

fn vanishes_at_zero(p: &CoefficientPreset) -> bool {
    let zero = DVector::zeros(p.state_dim());
    p.diffusion(&zero, &zero).abs().sum() + p.drift(&zero, &zero).abs().sum() < 1e-12
}

#[derive(Serialize)]
struct MomentGrowthEntry {
    preset: String,
    skipped: Option<String>,
    report: Option<MomentGrowthReport>,
}

/// Jumps transformed by diffusions: spectra of `Γ[F]` for the jump-sum
/// functional, span ranks, moment growth near zero and grid refinement of
/// the endpoint carré du champ.
pub fn run_sde_transform(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunOutcome> {
    config.check_kind(ExperimentKind::SdeTransform)?;
    let jump_spec = config.validate_sde()?;
    let s = &config.sde;
    fs::create_dir_all(out)?;
    let mut outcome = RunOutcome::default();
    let sde_seed = derive_seed(seed, stream::SDE);

    let spectra_path = out.join("gamma_spectra.csv");
    let rank_path = out.join("span_ranks.csv");
    let refine_path = out.join("refinement.csv");
    let mut spectra = csv_writer(&spectra_path)?;
    let mut ranks = csv_writer(&rank_path)?;
    let mut refine = csv_writer(&refine_path)?;
    spectra.write_record(["preset", "replica", "n_points", "index", "eigenvalue"])?;
    ranks.write_record([
        "preset",
        "replica",
        "n_points",
        "gamma_rank",
        "span_rank",
        "state_dim",
    ])?;
    refine.write_record([
        "preset",
        "n_steps",
        "mean_gamma_norm",
        "mean_cauchy_difference",
        "decreasing",
    ])?;
    let mut growth = Vec::new();
    let mut worst_psd: f64 = 0.0;

    for (pi, preset) in s.presets.iter().enumerate() {
        let label = preset_label(pi, preset);
        let m = preset.state_dim();
        let coeffs: Arc<dyn SdeCoefficients> = Arc::new(preset.clone());
        let space = WienerMarkSpace::new(Arc::clone(&coeffs), s.t, s.n_steps);
        let functional = make_jump_sum(space.jump_transform());
        let spec = jump_spec
            .clone()
            .with_attribute(AttributeSampler::IsotropicVector { dim: m });
        let preset_seed = derive_seed(sde_seed, pi as u64);

        let rows = (0..s.replicas)
            .into_par_iter()
            .map(|r| {
                let run = || -> Result<_> {
                    let cfg =
                        simulate_configuration(&spec, &space, derive_seed(preset_seed, r as u64))?;
                    let g = gamma_total(&functional, &cfg, &space)?;
                    let jumps: Vec<DVector<f64>> = cfg
                        .points()
                        .iter()
                        .map(|p| DVector::from_column_slice(&p.base.attribute))
                        .collect();
                    let span = if jumps.is_empty() {
                        0
                    } else {
                        span_rank_for(coeffs.as_ref(), &jumps, s.rank_tol)?
                    };
                    Ok((
                        cfg.len(),
                        symmetric_eigenvalues(g.matrix()),
                        g.rank(s.rank_tol),
                        span,
                    ))
                };
                run().map_err(|e| e.context(format!("preset {label}, replica {r}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut full = 0;
        let mut with_jumps = 0;
        for (r, (n, eig, g_rank, span)) in rows.iter().enumerate() {
            for (k, e) in eig.iter().enumerate() {
                spectra.write_record([
                    label.clone(),
                    r.to_string(),
                    n.to_string(),
                    k.to_string(),
                    e.to_string(),
                ])?;
            }
            let scale = eig.last().copied().unwrap_or(0.0).abs().max(1.0);
            worst_psd = worst_psd.max(-eig.first().copied().unwrap_or(0.0) / scale);
            ranks.write_record([
                label.clone(),
                r.to_string(),
                n.to_string(),
                g_rank.to_string(),
                span.to_string(),
                m.to_string(),
            ])?;
            if *n > 0 {
                with_jumps += 1;
                if *span == m {
                    full += 1;
                }
            }
        }
        log(&format!(
            "{label}: span rank {m} on {full} of {with_jumps} replicas with jumps"
        ));

        // moment growth near zero
        if vanishes_at_zero(preset) {
            let dir = DVector::from_element(m, 1.0 / (m as f64).sqrt());
            let grid: Vec<DVector<f64>> = s.moment_norms.iter().map(|r| &dir * *r).collect();
            let rep = moment_growth_check_with(
                coeffs.as_ref(),
                s.t,
                &grid,
                s.moment_paths,
                derive_seed(preset_seed, u64::MAX),
                s.moment_steps,
            )
            .map_err(|e| e.context(format!("preset {label}, moment check")))?;
            outcome.checks.push(CheckRow {
                name: format!("moment_bound[{label}]"),
                max_deviation: rep.max_ratio,
                tolerance: rep.gronwall_k * (rep.gronwall_k * s.t).exp(),
                pass: rep.bounded,
            });
            growth.push(MomentGrowthEntry {
                preset: label.clone(),
                skipped: None,
                report: Some(rep),
            });
        } else {
            growth.push(MomentGrowthEntry {
                preset: label.clone(),
                skipped: Some("coefficients do not vanish at zero".into()),
                report: None,
            });
        }

        // endpoint carré du champ under step halving, on common paths
        let x0 = DVector::from_fn(m, |i, _| if i == 0 { 1.0 } else { 0.5 });
        let finest = s.n_steps << s.refinement_levels;
        let per_path = (0..s.refinement_paths)
            .into_par_iter()
            .map(|k| {
                let mut rng = rng_from_seed(derive_seed(preset_seed, (1u64 << 32) + k as u64));
                let mut path =
                    DriverPath::sample(finest, s.t / finest as f64, preset.noise_dim(), &mut rng);
                let mut gammas = vec![gamma_sde(coeffs.as_ref(), &x0, &path)?];
                for _ in 0..s.refinement_levels {
                    path = path.coarsen().expect("even step count");
                    gammas.push(gamma_sde(coeffs.as_ref(), &x0, &path)?);
                }
                gammas.reverse();
                Ok(gammas)
            })
            .collect::<Result<Vec<Vec<DMatrix<f64>>>>>()
            .map_err(|e: LentError| e.context(format!("preset {label}, refinement")))?;
        let levels = s.refinement_levels + 1;
        let np = per_path.len() as f64;
        let mut previous_diff = f64::INFINITY;
        for l in 0..levels {
            let norm = per_path.iter().map(|g| g[l].norm()).sum::<f64>() / np;
            let diff = if l == 0 {
                f64::NAN
            } else {
                per_path
                    .iter()
                    .map(|g| (&g[l] - &g[l - 1]).norm())
                    .sum::<f64>()
                    / np
            };
            let decreasing = l >= 2 && (diff < previous_diff || diff <= 1e-12);
            refine.write_record([
                label.clone(),
                (s.n_steps << l).to_string(),
                norm.to_string(),
                diff.to_string(),
                if l >= 2 {
                    decreasing.to_string()
                } else {
                    String::new()
                },
            ])?;
            if l >= 1 {
                previous_diff = diff;
            }
        }
    }
    spectra.flush()?;
    ranks.flush()?;
    refine.flush()?;
    outcome.files.extend([spectra_path, rank_path, refine_path]);
    let growth_path = out.join("moment_growth.json");
    write_json(&growth_path, &growth)?;
    outcome.files.push(growth_path);
    outcome
        .checks
        .insert(0, CheckRow::at_most("gamma_psd", worst_psd.max(0.0), 1e-10));
    outcome.files.push(write_checks(out, &outcome.checks)?);
    Ok(outcome)
}

/// `r sin θ`, differentiated numerically unless `analytic`.
fn r_sin(analytic: bool) -> ClosurePointFn {
    let df: Option<AngleDerivative> = if analytic {
        Some(Arc::new(|_s, a: &[f64], th: f64| a[0] * th.cos()))
    } else {
        None
    };
    ClosurePointFn::scalar_on_circle(|_s, a, th| a[0] * th.sin(), df)
}

fn r2_cos2(cfg: &Configuration) -> f64 {
    cfg.points()
        .iter()
        .map(|p| {
            let r = p.base.attribute[0];
            let c = p.mark.angle().unwrap_or(f64::NAN).cos();
            r * r * c * c
        })
        .sum()
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Identity suite with the standard circle structure.
pub fn run_identity_suite(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunOutcome> {
    run_identity_suite_with(config, seed, out, &CircleMarkSpace::default())
}

/// Identity suite evaluated with a caller-supplied circle mark space.
pub fn run_identity_suite_with(
    config: &ExperimentConfig,
    seed: u64,
    out: &Path,
    space: &dyn MarkSpace,
) -> Result<RunOutcome> {
    config.check_kind(ExperimentKind::IdentitySuite)?;
    let spec = config.validate_suite()?;
    let s = &config.suite;
    fs::create_dir_all(out)?;
    let suite_seed = derive_seed(seed, stream::SUITE);
    let cfg_seed = derive_seed(suite_seed, 0);
    let configs = (0..s.configs)
        .into_par_iter()
        .map(|i| simulate_configuration(&spec, space, derive_seed(cfg_seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;

    // oracle rows go through the numerical derivative, closed forms through
    // the registered one
    let linear = make_linear(r_sin(false));
    let exp = make_exp(r_sin(false))?;
    let linear_exact = make_linear(r_sin(true));
    let exp_exact = make_exp(r_sin(true))?;
    let polar = isotropic_functional(spec.horizon);
    let per_config = configs
        .par_iter()
        .map(|cfg| {
            let mut dev = [0.0_f64; 7];
            let funcs: [&dyn Functional; 3] = [&linear, &exp, &polar];
            let mut lent = Vec::with_capacity(3);
            for (k, f) in funcs.iter().enumerate() {
                let a = gamma_total(*f, cfg, space)?;
                let b = gamma_total_oracle(*f, cfg, space)?;
                dev[k] = max_relative_deviation(a.matrix(), b.matrix());
                lent.push(a);
            }
            let n_gamma = r2_cos2(cfg);
            let nf = linear.eval(cfg)?[0];
            let g_lin = gamma_total(&linear_exact, cfg, space)?.matrix()[(0, 0)];
            let g_exp = gamma_total(&exp_exact, cfg, space)?.matrix()[(0, 0)];
            dev[3] = rel(g_lin, n_gamma);
            dev[4] = rel(g_exp, (-2.0 * nf).exp() * n_gamma);
            let closed = isotropic_gamma(cfg, spec.horizon)?;
            dev[5] = max_relative_deviation(lent[2].matrix(), &closed);
            dev[6] = (best_pair_bound(cfg, spec.horizon)? - closed.determinant()).max(0.0);
            Ok(dev)
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = |k: usize| per_config.iter().map(|d| d[k]).fold(0.0, f64::max);
    let mut checks = vec![
        CheckRow::at_most("oracle_linear", worst(0), 1e-12),
        CheckRow::at_most("oracle_exp", worst(1), 1e-12),
        CheckRow::at_most("oracle_polar", worst(2), 1e-12),
        CheckRow::at_most("closed_form_linear", worst(3), 1e-10),
        CheckRow::at_most("closed_form_exp", worst(4), 1e-10),
        CheckRow::at_most("closed_form_isotropic", worst(5), 1e-10),
        CheckRow::at_most("det_lower_bound", worst(6), 1e-10),
    ];

    // gradient covariance against the carré du champ
    let sharp_spec = spec.clone().with_truncation(s.sharp_truncation);
    let sharp_seed = derive_seed(suite_seed, 1);
    let mut worst_z: f64 = 0.0;
    for c in 0..s.sharp_configs {
        let cfg = simulate_configuration(&sharp_spec, space, derive_seed(sharp_seed, c as u64))?;
        let target = gamma_total(&polar, &cfg, space)?;
        let draw_seed = derive_seed(sharp_seed, (1u64 << 32) + c as u64);
        let draws = (0..s.sharp_draws)
            .into_par_iter()
            .map(|d| sharp_sample(&polar, &cfg, space, derive_seed(draw_seed, d as u64)))
            .collect::<Result<Vec<_>>>()?;
        let moments = empirical_second_moments(&draws);
        worst_z = worst_z.max(max_z_score(&moments, target.matrix(), 1e-300));
    }
    checks.push(CheckRow::at_most("sharp_isometry", worst_z, s.z_tol));

    // one-mark structure on the circle
    let mut worst_polar: f64 = 0.0;
    for (r, theta) in [(1.0, 0.3), (0.5, 2.0), (2.0, -1.2), (3.0, 4.0)] {
        let g = space.gamma_one(
            &AngleFn::new(2, move |t: f64| {
                DVector::from_vec(vec![r * t.cos(), r * t.sin()])
            }),
            &Mark::Angle(theta),
        )?;
        let (sn, cs) = f64::sin_cos(theta);
        let expected =
            DMatrix::from_row_slice(2, 2, &[sn * sn, -sn * cs, -sn * cs, cs * cs]) * (r * r);
        worst_polar = worst_polar.max(max_relative_deviation(&g, &expected));
    }
    checks.push(CheckRow::at_most("circle_gamma_polar", worst_polar, 1e-8));

    let flat_seed = derive_seed(suite_seed, 2);
    let g = AngleFn::new(1, |t: f64| DVector::from_element(1, 1.5 * t.sin()));
    let u = Mark::Angle(0.7);
    let gamma = space.gamma_one(&g, &u)?;
    let draws = (0..s.flat_draws)
        .map(|d| space.flat_sample(&g, &u, &mut rng_from_seed(derive_seed(flat_seed, d as u64))))
        .collect::<Result<Vec<_>>>()?;
    checks.push(CheckRow::at_most(
        "circle_flat_isometry",
        max_z_score(&empirical_second_moments(&draws), &gamma, 1e-300),
        s.z_tol,
    ));

    // discrete Itô isometry of the Euler flow
    let sde_seed = derive_seed(suite_seed, 3);
    let additive = CoefficientPreset::Additive {
        sigma: vec![vec![1.0, 0.5], vec![0.0, 2.0]],
    };
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]);
    let t = 1.0;
    let path = DriverPath::sample(
        64,
        t / 64.0,
        2,
        &mut rng_from_seed(derive_seed(sde_seed, 0)),
    );
    let x = DVector::from_vec(vec![0.3, -0.2]);
    let g_add = gamma_sde(&additive, &x, &path)?;
    let exact = &sigma * sigma.transpose() * t;
    checks.push(CheckRow::at_most(
        "sde_additive_exact",
        (g_add - exact).abs().max(),
        1e-12,
    ));
    let linear_sde = CoefficientPreset::Linear {
        diffusion: vec![vec![vec![0.4, 0.1], vec![0.0, 0.3]]],
        drift: vec![vec![-0.2, 0.0], vec![0.1, -0.1]],
    };
    let path = DriverPath::sample(
        64,
        t / 64.0,
        1,
        &mut rng_from_seed(derive_seed(sde_seed, 1)),
    );
    let flow = euler_solve(&linear_sde, &x, &path)?;
    let sampler = flow.flat_sampler();
    let draws: Vec<DVector<f64>> = (0..s.flat_draws)
        .map(|d| sampler.sample(&mut rng_from_seed(derive_seed(sde_seed, 2 + d as u64))))
        .collect();
    checks.push(CheckRow::at_most(
        "sde_flat_isometry",
        max_z_score(&empirical_second_moments(&draws), &flow.gamma(), 1e-300),
        s.z_tol,
    ));

    let path = out.join("suite.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["identity", "max_deviation", "tolerance", "pass"])?;
    for c in &checks {
        w.write_record([
            c.name.clone(),
            c.max_deviation.to_string(),
            c.tolerance.to_string(),
            c.pass.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(RunOutcome {
        files: vec![path],
        checks,
    })
}
