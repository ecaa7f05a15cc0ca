//! Configurations of marked points, the add/remove operators, and simulation
//! of the base point process and its marking.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LentError, Result};
use crate::mark_dirichlet::{Mark, MarkSpace};
use crate::rng::{rng_from_seed, SimRng};

/// Default lower cutoff applied to infinite-activity Lévy measures.
pub const DEFAULT_TRUNCATION: f64 = 1e-3;

/// Location of an atom in the base space `ℝ₊ × ℝᵐ`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasePoint {
    pub time: f64,
    pub attribute: Vec<f64>,
}

impl BasePoint {
    pub fn new(time: f64, attribute: Vec<f64>) -> Self {
        Self { time, attribute }
    }

    /// Euclidean norm of the attribute (the jump size).
    pub fn radius(&self) -> f64 {
        self.attribute.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub(crate) fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.time.total_cmp(&other.time).then_with(|| {
            for (a, b) in self.attribute.iter().zip(&other.attribute) {
                match a.total_cmp(b) {
                    Ordering::Equal => continue,
                    ord => return ord,
                }
            }
            self.attribute.len().cmp(&other.attribute.len())
        })
    }

    fn key(&self) -> (u64, Vec<u64>) {
        (
            self.time.to_bits(),
            self.attribute.iter().map(|a| a.to_bits()).collect(),
        )
    }
}

impl PartialEq for BasePoint {
    fn eq(&self, other: &Self) -> bool {
        self.canonical_cmp(other) == Ordering::Equal
    }
}

/// One atom `(x, u)` of a marked configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarkedPoint {
    #[serde(flatten)]
    pub base: BasePoint,
    pub mark: Mark,
}

impl MarkedPoint {
    pub fn new(base: BasePoint, mark: Mark) -> Self {
        Self { base, mark }
    }

    pub(crate) fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.base
            .canonical_cmp(&other.base)
            .then_with(|| self.mark.canonical_cmp(&other.mark))
    }
}

impl PartialEq for MarkedPoint {
    fn eq(&self, other: &Self) -> bool {
        self.canonical_cmp(other) == Ordering::Equal
    }
}

/// A finite simple configuration of marked points.
///
/// Points are kept in canonical order (time, then attribute, then mark), so
/// two configurations holding the same set of points are structurally equal
/// and every functional sees them in the same order.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ConfigurationRepr", into = "ConfigurationRepr")]
pub struct Configuration {
    horizon: f64,
    mark_space: String,
    points: Vec<MarkedPoint>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigurationRepr {
    horizon: f64,
    #[serde(default)]
    mark_space: String,
    points: Vec<MarkedPoint>,
}

impl TryFrom<ConfigurationRepr> for Configuration {
    type Error = LentError;

    fn try_from(repr: ConfigurationRepr) -> Result<Self> {
        Configuration::new(repr.horizon, repr.mark_space, repr.points)
    }
}

impl From<Configuration> for ConfigurationRepr {
    fn from(cfg: Configuration) -> Self {
        ConfigurationRepr {
            horizon: cfg.horizon,
            mark_space: cfg.mark_space,
            points: cfg.points,
        }
    }
}

impl PartialEq for Configuration {
    fn eq(&self, other: &Self) -> bool {
        self.horizon == other.horizon
            && self.mark_space == other.mark_space
            && self.points == other.points
    }
}

impl Configuration {
    /// Build a configuration, rejecting repeated base points and non-finite
    /// coordinates.
    pub fn new(
        horizon: f64,
        mark_space: impl Into<String>,
        mut points: Vec<MarkedPoint>,
    ) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LentError::InvalidSpec(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        for p in &points {
            if !p.base.time.is_finite() || p.base.time < 0.0 {
                return Err(LentError::InvalidSpec(format!(
                    "point time must be finite and nonnegative, got {}",
                    p.base.time
                )));
            }
            if p.base.attribute.iter().any(|a| !a.is_finite()) {
                return Err(LentError::NonFiniteValue("point attribute".into()));
            }
        }
        points.sort_by(MarkedPoint::canonical_cmp);
        if points.windows(2).any(|w| w[0].base == w[1].base) {
            return Err(LentError::InvalidSpec(
                "configuration contains two points with the same base location".into(),
            ));
        }
        Ok(Self {
            horizon,
            mark_space: mark_space.into(),
            points,
        })
    }

    pub fn empty(horizon: f64, mark_space: impl Into<String>) -> Self {
        Self {
            horizon,
            mark_space: mark_space.into(),
            points: Vec::new(),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn mark_space(&self) -> &str {
        &self.mark_space
    }

    pub fn points(&self) -> &[MarkedPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn search(&self, p: &MarkedPoint) -> std::result::Result<usize, usize> {
        self.points.binary_search_by(|q| q.canonical_cmp(p))
    }

    pub fn contains(&self, p: &MarkedPoint) -> bool {
        self.search(p).is_ok()
    }

    /// Index of the point sitting at `base`, if any.
    pub fn position_of_base(&self, base: &BasePoint) -> Option<usize> {
        let idx = self
            .points
            .partition_point(|q| q.base.canonical_cmp(base) == Ordering::Less);
        (idx < self.points.len() && self.points[idx].base == *base).then_some(idx)
    }

    /// `ε⁺_p ϖ = ϖ ∪ {p}`.
    pub fn eps_plus(&self, p: &MarkedPoint) -> Configuration {
        let mut out = self.clone();
        if let Err(idx) = out.search(p) {
            out.points.insert(idx, p.clone());
        }
        out
    }

    /// `ε⁻_p ϖ = ϖ ∩ {p}ᶜ`.
    pub fn eps_minus(&self, p: &MarkedPoint) -> Configuration {
        let mut out = self.clone();
        if let Ok(idx) = out.search(p) {
            out.points.remove(idx);
        }
        out
    }

    /// Same configuration with the mark of point `index` replaced in place.
    pub fn with_mark(&self, index: usize, mark: Mark) -> Configuration {
        let mut out = self.clone();
        out.points[index].mark = mark;
        out
    }

    /// Keep only the points satisfying `keep`.
    pub fn restrict(&self, keep: impl Fn(&MarkedPoint) -> bool) -> Configuration {
        Configuration {
            horizon: self.horizon,
            mark_space: self.mark_space.clone(),
            points: self.points.iter().filter(|p| keep(p)).cloned().collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Radial part `ν(dr)` of a Lévy measure on `ℝ₊*`.
#[derive(Clone)]
pub enum LevyMeasure {
    /// Weighted Dirac masses `Σ wᵢ δ_{rᵢ}` given as `(rᵢ, wᵢ)`.
    Atoms(Vec<(f64, f64)>),
    /// `scale · r^(-exponent) dr` on `(0, upper]`.
    PowerLaw {
        scale: f64,
        exponent: f64,
        upper: f64,
    },
    /// Arbitrary density on `(0, upper]`, tabulated on `grid` log-spaced cells.
    Density {
        density: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        upper: f64,
        grid: usize,
    },
}

impl fmt::Debug for LevyMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LevyMeasure::Atoms(a) => f.debug_tuple("Atoms").field(a).finish(),
            LevyMeasure::PowerLaw {
                scale,
                exponent,
                upper,
            } => f
                .debug_struct("PowerLaw")
                .field("scale", scale)
                .field("exponent", exponent)
                .field("upper", upper)
                .finish(),
            LevyMeasure::Density { upper, grid, .. } => f
                .debug_struct("Density")
                .field("upper", upper)
                .field("grid", grid)
                .finish_non_exhaustive(),
        }
    }
}

impl LevyMeasure {
    pub fn power_law(exponent: f64, upper: f64) -> Self {
        LevyMeasure::PowerLaw {
            scale: 1.0,
            exponent,
            upper,
        }
    }

    pub fn dirac(radius: f64, weight: f64) -> Self {
        LevyMeasure::Atoms(vec![(radius, weight)])
    }

    /// `ν((truncation, ∞))`.
    pub fn truncated_mass(&self, truncation: f64) -> f64 {
        match self {
            LevyMeasure::Atoms(atoms) => atoms
                .iter()
                .filter(|(r, _)| *r > truncation)
                .map(|(_, w)| *w)
                .sum(),
            LevyMeasure::PowerLaw {
                scale,
                exponent,
                upper,
            } => {
                if *upper <= truncation {
                    return 0.0;
                }
                let e = 1.0 - exponent;
                if e.abs() < 1e-12 {
                    scale * (upper / truncation).ln()
                } else {
                    scale * (upper.powf(e) - truncation.powf(e)) / e
                }
            }
            LevyMeasure::Density { .. } => match RadiusSampler::tabulate(self, truncation) {
                Ok(RadiusSampler::Table { total, .. }) => total,
                _ => 0.0,
            },
        }
    }
}

enum RadiusSampler {
    Atoms {
        radii: Vec<f64>,
        cumulative: Vec<f64>,
    },
    PowerLaw {
        lo: f64,
        hi: f64,
        exponent: f64,
    },
    Table {
        edges: Vec<f64>,
        cumulative: Vec<f64>,
        total: f64,
    },
}

impl RadiusSampler {
    fn tabulate(measure: &LevyMeasure, truncation: f64) -> Result<Self> {
        match measure {
            LevyMeasure::Atoms(atoms) => {
                let mut radii = Vec::new();
                let mut cumulative = Vec::new();
                let mut acc = 0.0;
                for &(r, w) in atoms {
                    if r > truncation && w > 0.0 {
                        acc += w;
                        radii.push(r);
                        cumulative.push(acc);
                    }
                }
                Ok(RadiusSampler::Atoms { radii, cumulative })
            }
            LevyMeasure::PowerLaw {
                exponent, upper, ..
            } => Ok(RadiusSampler::PowerLaw {
                lo: truncation,
                hi: *upper,
                exponent: *exponent,
            }),
            LevyMeasure::Density {
                density,
                upper,
                grid,
            } => {
                if *upper <= truncation {
                    return Ok(RadiusSampler::Table {
                        edges: vec![],
                        cumulative: vec![],
                        total: 0.0,
                    });
                }
                let n = (*grid).max(2);
                let ratio = (upper / truncation).ln() / n as f64;
                let edges: Vec<f64> = (0..=n)
                    .map(|i| truncation * (ratio * i as f64).exp())
                    .collect();
                let mut cumulative = Vec::with_capacity(n);
                let mut acc = 0.0;
                for w in edges.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    let (fa, fb) = (density(a), density(b));
                    if !(fa.is_finite() && fb.is_finite()) || fa < 0.0 || fb < 0.0 {
                        return Err(LentError::InvalidSpec(format!(
                            "Lévy density must be finite and nonnegative on (truncation, upper], failed near r = {a}"
                        )));
                    }
                    acc += 0.5 * (fa + fb) * (b - a);
                    cumulative.push(acc);
                }
                Ok(RadiusSampler::Table {
                    edges,
                    cumulative,
                    total: acc,
                })
            }
        }
    }

    fn sample(&self, rng: &mut SimRng) -> f64 {
        // u ∈ (0, 1]
        let u = 1.0 - rng.random::<f64>();
        match self {
            RadiusSampler::Atoms { radii, cumulative } => {
                let total = *cumulative.last().expect("nonempty atoms");
                let target = u * total;
                let idx = cumulative.partition_point(|&c| c < target);
                radii[idx.min(radii.len() - 1)]
            }
            RadiusSampler::PowerLaw { lo, hi, exponent } => {
                let e = 1.0 - exponent;
                let r = if e.abs() < 1e-12 {
                    lo * (hi / lo).powf(u)
                } else {
                    let (a, b) = (lo.powf(e), hi.powf(e));
                    (a + u * (b - a)).powf(1.0 / e)
                };
                // guard the open lower end against rounding
                if r <= *lo {
                    lo.next_up()
                } else {
                    r.min(*hi)
                }
            }
            RadiusSampler::Table {
                edges,
                cumulative,
                total,
            } => {
                let target = u * total;
                let idx = cumulative
                    .partition_point(|&c| c < target)
                    .min(cumulative.len() - 1);
                let start = if idx == 0 { 0.0 } else { cumulative[idx - 1] };
                let width = cumulative[idx] - start;
                let frac = if width > 0.0 {
                    ((target - start) / width).clamp(0.0, 1.0)
                } else {
                    0.5
                };
                let r = edges[idx] + frac * (edges[idx + 1] - edges[idx]);
                if r <= edges[0] {
                    edges[0].next_up()
                } else {
                    r
                }
            }
        }
    }
}

/// Caller-supplied map `(r, rng) ↦ attribute`.
pub type AttributeMap = Arc<dyn Fn(f64, &mut SimRng) -> Vec<f64> + Send + Sync>;

/// How the attribute vector of a base point is built from a sampled radius.
#[derive(Clone)]
pub enum AttributeSampler {
    /// Attribute is `[r]`.
    Radius,
    /// Attribute is `r · ω` with `ω` uniform on the unit sphere of `ℝ^dim`.
    IsotropicVector { dim: usize },
    /// Caller-supplied map `(r, rng) ↦ attribute` of fixed dimension.
    Custom { dim: usize, sample: AttributeMap },
}

impl fmt::Debug for AttributeSampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeSampler::Radius => write!(f, "Radius"),
            AttributeSampler::IsotropicVector { dim } => {
                write!(f, "IsotropicVector {{ dim: {dim} }}")
            }
            AttributeSampler::Custom { dim, .. } => write!(f, "Custom {{ dim: {dim}, .. }}"),
        }
    }
}

impl AttributeSampler {
    pub fn dim(&self) -> usize {
        match self {
            AttributeSampler::Radius => 1,
            AttributeSampler::IsotropicVector { dim } | AttributeSampler::Custom { dim, .. } => {
                *dim
            }
        }
    }

    fn sample(&self, radius: f64, rng: &mut SimRng) -> Vec<f64> {
        match self {
            AttributeSampler::Radius => vec![radius],
            AttributeSampler::IsotropicVector { dim } => loop {
                let v: Vec<f64> = (0..*dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-300 {
                    break v.into_iter().map(|x| radius * x / norm).collect();
                }
            },
            AttributeSampler::Custom { sample, .. } => sample(radius, rng),
        }
    }
}

/// Law of the base Poisson random measure on `[0, horizon] × ℝᵐ`.
#[derive(Clone, Debug)]
pub struct ProcessSpec {
    pub horizon: f64,
    pub levy: LevyMeasure,
    pub truncation: f64,
    pub attribute: AttributeSampler,
}

impl ProcessSpec {
    pub fn new(horizon: f64, levy: LevyMeasure) -> Self {
        Self {
            horizon,
            levy,
            truncation: DEFAULT_TRUNCATION,
            attribute: AttributeSampler::Radius,
        }
    }

    pub fn with_truncation(mut self, truncation: f64) -> Self {
        self.truncation = truncation;
        self
    }

    pub fn with_attribute(mut self, attribute: AttributeSampler) -> Self {
        self.attribute = attribute;
        self
    }

    /// Expected number of points, `horizon · ν((ε₀, ∞))`.
    pub fn intensity(&self) -> f64 {
        self.horizon * self.levy.truncated_mass(self.truncation)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(LentError::InvalidSpec(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.truncation.is_finite() && self.truncation > 0.0) {
            return Err(LentError::InvalidSpec(format!(
                "truncation must be positive, got {}",
                self.truncation
            )));
        }
        match &self.levy {
            LevyMeasure::Atoms(atoms) => {
                if atoms
                    .iter()
                    .any(|(r, w)| !(r.is_finite() && *r > 0.0 && w.is_finite() && *w >= 0.0))
                {
                    return Err(LentError::InvalidSpec(
                        "Lévy atoms need positive radii and nonnegative weights".into(),
                    ));
                }
            }
            LevyMeasure::PowerLaw {
                scale,
                exponent,
                upper,
            } => {
                if !(scale.is_finite()
                    && *scale >= 0.0
                    && exponent.is_finite()
                    && upper.is_finite())
                {
                    return Err(LentError::InvalidSpec(
                        "power-law Lévy density needs finite parameters".into(),
                    ));
                }
            }
            LevyMeasure::Density { upper, .. } => {
                if !upper.is_finite() {
                    return Err(LentError::InvalidSpec(
                        "tabulated Lévy density needs a finite upper radius".into(),
                    ));
                }
            }
        }
        let mass = self.levy.truncated_mass(self.truncation);
        if !mass.is_finite() {
            return Err(LentError::InvalidSpec(
                "truncated Lévy mass is infinite".into(),
            ));
        }
        if mass <= 0.0 {
            return Err(LentError::TruncatedMassZero {
                truncation: self.truncation,
            });
        }
        Ok(())
    }
}

/// Sample the base points of one realization of `M`.
pub fn simulate_base(spec: &ProcessSpec, seed: u64) -> Result<Vec<BasePoint>> {
    spec.validate()?;
    let sampler = RadiusSampler::tabulate(&spec.levy, spec.truncation)?;
    let mut rng = rng_from_seed(seed);
    let lambda = spec.intensity();
    let count = Poisson::new(lambda)
        .map_err(|e| LentError::InvalidSpec(format!("Poisson intensity {lambda}: {e}")))?
        .sample(&mut rng) as usize;

    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let time = spec.horizon * rng.random::<f64>();
        let radius = sampler.sample(&mut rng);
        let base = BasePoint::new(time, spec.attribute.sample(radius, &mut rng));
        // probability-zero collision: redraw
        if seen.insert(base.key()) {
            out.push(base);
        }
    }
    Ok(out)
}

/// Attach an independent `μ`-distributed mark to every base point.
///
/// Marks are assigned in canonical order of the base points, so the result
/// does not depend on the order of `points`.
pub fn mark_points(
    points: &[BasePoint],
    horizon: f64,
    space: &dyn MarkSpace,
    seed: u64,
) -> Result<Configuration> {
    let mut sorted: Vec<&BasePoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.canonical_cmp(b));
    let mut rng = rng_from_seed(seed);
    let marked = sorted
        .into_iter()
        .map(|b| MarkedPoint::new(b.clone(), space.sample(&mut rng)))
        .collect();
    Configuration::new(horizon, space.id(), marked)
}

/// One realization of `N = M ⊙ μ`.
pub fn simulate_configuration(
    spec: &ProcessSpec,
    space: &dyn MarkSpace,
    seed: u64,
) -> Result<Configuration> {
    let base = simulate_base(spec, crate::rng::derive_seed(seed, 0))?;
    mark_points(&base, spec.horizon, space, crate::rng::derive_seed(seed, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mark_dirichlet::CircleMarkSpace;

    fn pt(time: f64, r: f64, angle: f64) -> MarkedPoint {
        MarkedPoint::new(BasePoint::new(time, vec![r]), Mark::Angle(angle))
    }

    #[test]
    fn eps_plus_on_empty_and_idempotence() {
        let empty = Configuration::empty(1.0, "circle");
        let p = pt(0.2, 1.0, 0.3);
        let one = empty.eps_plus(&p);
        assert_eq!(one.points(), std::slice::from_ref(&p));
        assert_eq!(one.eps_plus(&p), one);
    }

    #[test]
    fn eps_plus_commutes() {
        let empty = Configuration::empty(1.0, "circle");
        let (p1, p2) = (pt(0.2, 1.0, 0.3), pt(0.1, 2.0, 1.0));
        assert_eq!(
            empty.eps_plus(&p1).eps_plus(&p2),
            empty.eps_plus(&p2).eps_plus(&p1)
        );
    }

    #[test]
    fn eps_minus_cases() {
        let empty = Configuration::empty(1.0, "circle");
        let p = pt(0.5, 1.0, 0.0);
        assert!(empty.eps_plus(&p).eps_minus(&p).is_empty());
        assert!(empty.eps_minus(&p).is_empty());

        let cfg = Configuration::new(1.0, "circle", vec![p.clone(), pt(0.7, 2.0, 1.5)]).unwrap();
        assert_eq!(cfg.eps_minus(&p).eps_plus(&p), cfg);
        // same base, different mark is a different point
        let q = pt(0.5, 1.0, 0.1);
        assert_eq!(cfg.eps_minus(&q), cfg);
    }

    #[test]
    fn repeated_base_rejected() {
        let err = Configuration::new(1.0, "circle", vec![pt(0.5, 1.0, 0.0), pt(0.5, 1.0, 2.0)]);
        assert!(matches!(err, Err(LentError::InvalidSpec(_))));
    }

    #[test]
    fn position_of_base_finds_point() {
        let cfg = Configuration::new(
            1.0,
            "circle",
            vec![pt(0.9, 1.0, 0.0), pt(0.1, 1.0, 0.0), pt(0.5, 3.0, 2.0)],
        )
        .unwrap();
        assert_eq!(
            cfg.position_of_base(&BasePoint::new(0.5, vec![3.0])),
            Some(1)
        );
        assert_eq!(cfg.position_of_base(&BasePoint::new(0.5, vec![2.0])), None);
    }

    #[test]
    fn zero_mass_is_rejected() {
        let spec = ProcessSpec::new(1.0, LevyMeasure::Atoms(vec![(1.0, 0.0)]));
        assert!(matches!(
            simulate_base(&spec, 1),
            Err(LentError::TruncatedMassZero { .. })
        ));
        // atom below the cutoff carries no truncated mass
        let spec = ProcessSpec::new(1.0, LevyMeasure::dirac(1e-4, 3.0));
        assert!(matches!(
            simulate_base(&spec, 1),
            Err(LentError::TruncatedMassZero { .. })
        ));
    }

    #[test]
    fn power_law_radii_respect_support() {
        let spec = ProcessSpec::new(5.0, LevyMeasure::power_law(1.5, 1.0)).with_truncation(0.01);
        for seed in 0..50 {
            for b in simulate_base(&spec, seed).unwrap() {
                let r = b.attribute[0];
                assert!(r > 0.01 && r <= 1.0, "radius {r} outside (0.01, 1]");
                assert!(b.time >= 0.0 && b.time <= 5.0);
            }
        }
    }

    #[test]
    fn power_law_mass_matches_closed_form() {
        let m = LevyMeasure::power_law(1.5, 1.0).truncated_mass(1e-3);
        assert!((m - 2.0 * (1e-3_f64.powf(-0.5) - 1.0)).abs() < 1e-10);
        let m1 = LevyMeasure::power_law(1.0, 2.0).truncated_mass(0.5);
        assert!((m1 - 4.0_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn tabulated_density_matches_power_law() {
        let tab = LevyMeasure::Density {
            density: Arc::new(|r: f64| r.powf(-1.5)),
            upper: 1.0,
            grid: 20_000,
        };
        let exact = LevyMeasure::power_law(1.5, 1.0).truncated_mass(1e-2);
        let approx = tab.truncated_mass(1e-2);
        assert!((approx - exact).abs() / exact < 1e-4, "{approx} vs {exact}");
    }

    #[test]
    fn simulation_is_deterministic() {
        let spec = ProcessSpec::new(2.0, LevyMeasure::power_law(1.5, 1.0));
        let space = CircleMarkSpace::default();
        let a = simulate_configuration(&spec, &space, 11).unwrap();
        let b = simulate_configuration(&spec, &space, 11).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = simulate_configuration(&spec, &space, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mark_points_ignores_input_order() {
        let spec = ProcessSpec::new(3.0, LevyMeasure::dirac(1.0, 4.0));
        let space = CircleMarkSpace::default();
        let mut base = simulate_base(&spec, 5).unwrap();
        let a = mark_points(&base, 3.0, &space, 9).unwrap();
        base.reverse();
        let b = mark_points(&base, 3.0, &space, 9).unwrap();
        assert_eq!(a, b);
        assert!(mark_points(&[], 3.0, &space, 9).unwrap().is_empty());
    }

    #[test]
    fn isotropic_vector_attribute_has_requested_radius() {
        let spec = ProcessSpec::new(1.0, LevyMeasure::dirac(0.7, 20.0))
            .with_attribute(AttributeSampler::IsotropicVector { dim: 3 });
        for b in simulate_base(&spec, 3).unwrap() {
            assert_eq!(b.attribute.len(), 3);
            assert!((b.radius() - 0.7).abs() < 1e-14);
        }
    }
}
