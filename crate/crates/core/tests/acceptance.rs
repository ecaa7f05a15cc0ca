//! Acceptance suite. Runs each criterion in turn, prints one PASS/FAIL line
//! per criterion and exits nonzero if any fails. Tolerances, sample sizes,
//! seeds and runtime limits are fixed below.

use std::f64::consts::TAU;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use lent_core::config_space::{simulate_configuration, LevyMeasure, ProcessSpec};
use lent_core::density_analysis::{
    det_lower_bound, isotropic_gamma, isotropy_check, kde_scott, nondegeneracy_survey,
    span_rank_for, DEFAULT_RANK_TOL,
};
use lent_core::lent_particle::{
    gamma_total, gamma_total_oracle, isotropic_functional, make_exp, make_linear, sharp_sample,
    AngleDerivative, ClosurePointFn, Functional,
};
use lent_core::linalg::max_relative_deviation;
use lent_core::rng::{derive_seed, rng_from_seed};
use lent_core::sde_flow::{
    euler_solve, euler_solve_from, flat_sde_sample, gamma_sde, moment_growth_check_with,
    CoefficientPreset, DriverPath, JumpField, SdeCoefficients,
};
use lent_core::stats::{empirical_second_moments, max_z_score};
use lent_core::{CircleMarkSpace, Configuration, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Result<Outcome>,
}

/// `f(s, r, θ) = r sin(θ + s)`; numerical mark derivative unless `analytic`.
fn shifted_sine(analytic: bool) -> ClosurePointFn {
    let df: Option<AngleDerivative> = if analytic {
        Some(Arc::new(|s, a: &[f64], th: f64| a[0] * (th + s).cos()))
    } else {
        None
    };
    ClosurePointFn::scalar_on_circle(|s, a, th| a[0] * (th + s).sin(), df)
}

/// `N(γ[f]) = Σ r² cos²(θ + s)`.
fn n_gamma_shifted_sine(cfg: &Configuration) -> f64 {
    cfg.points()
        .iter()
        .map(|p| {
            let r = p.base.attribute[0];
            (r * (p.mark.angle().unwrap() + p.base.time).cos()).powi(2)
        })
        .sum()
}

fn stable_spec(truncation: f64) -> ProcessSpec {
    ProcessSpec::new(1.0, LevyMeasure::power_law(1.5, 1.0)).with_truncation(truncation)
}

fn configs(spec: &ProcessSpec, n: usize, seed: u64) -> Result<Vec<Configuration>> {
    let space = CircleMarkSpace::default();
    (0..n)
        .map(|i| simulate_configuration(spec, &space, derive_seed(seed, i as u64)))
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn oracle_equivalence() -> Result<Outcome> {
    const TOL: f64 = 1e-12;
    let space = CircleMarkSpace::default();
    let cfgs = configs(&stable_spec(1e-3), 100, 101)?;
    let linear = make_linear(shifted_sine(false));
    let exp = make_exp(shifted_sine(false))?;
    let polar = isotropic_functional(0.8);
    let funcs: [(&str, &dyn Functional); 3] = [("N(f)", &linear), ("exp", &exp), ("polar", &polar)];
    let mut details = Vec::new();
    let mut pass = true;
    for (name, f) in funcs {
        let mut worst: f64 = 0.0;
        for c in &cfgs {
            let a = gamma_total(f, c, &space)?;
            let b = gamma_total_oracle(f, c, &space)?;
            worst = worst.max(max_relative_deviation(a.matrix(), b.matrix()));
        }
        pass &= worst <= TOL;
        details.push(format!("{name} {worst:.1e}"));
    }
    outcome(
        pass,
        format!(
            "max rel dev over 100 configs: {} (tol {TOL:.0e})",
            details.join(", ")
        ),
    )
}

fn closed_forms() -> Result<Outcome> {
    const TOL: f64 = 1e-10;
    let space = CircleMarkSpace::default();
    let cfgs = configs(&stable_spec(1e-3), 100, 202)?;
    let linear = make_linear(shifted_sine(true));
    let exp = make_exp(shifted_sine(true))?;
    let (mut worst_lin, mut worst_exp) = (0.0_f64, 0.0_f64);
    for c in &cfgs {
        let n_gamma = n_gamma_shifted_sine(c);
        let nf = linear.eval(c)?[0];
        let g_lin = gamma_total(&linear, c, &space)?.matrix()[(0, 0)];
        let g_exp = gamma_total(&exp, c, &space)?.matrix()[(0, 0)];
        worst_lin = worst_lin.max(rel(g_lin, n_gamma));
        worst_exp = worst_exp.max(rel(g_exp, (-2.0 * nf).exp() * n_gamma));
    }
    outcome(
        worst_lin <= TOL && worst_exp <= TOL,
        format!("Γ[N(f)] {worst_lin:.1e}, Γ[e^-N(f)] {worst_exp:.1e} (tol {TOL:.0e})"),
    )
}

fn gradient_isometry() -> Result<Outcome> {
    const DRAWS: usize = 100_000;
    const Z_TOL: f64 = 3.0;
    let space = CircleMarkSpace::default();
    let cfgs = configs(&stable_spec(0.05), 10, 303)?;
    let f = isotropic_functional(1.0);
    let mut worst_z: f64 = 0.0;
    let mut points = 0;
    for (c, cfg) in cfgs.iter().enumerate() {
        points += cfg.len();
        let target = gamma_total(&f, cfg, &space)?;
        let seed = derive_seed(304, c as u64);
        let draws = (0..DRAWS)
            .map(|d| sharp_sample(&f, cfg, &space, derive_seed(seed, d as u64)))
            .collect::<Result<Vec<_>>>()?;
        let m = empirical_second_moments(&draws);
        worst_z = worst_z.max(max_z_score(&m, target.matrix(), 1e-300));
    }
    outcome(
        worst_z <= Z_TOL,
        format!("max |z| {worst_z:.2} over 10 configs ({points} points), {DRAWS} draws each (tol {Z_TOL})"),
    )
}

fn isotropic_closed_form() -> Result<Outcome> {
    const TOL: f64 = 1e-10;
    const SLACK: f64 = 1e-10;
    let space = CircleMarkSpace::default();
    let cfgs = configs(&stable_spec(1e-3), 1000, 404)?;
    let t = 0.9;
    let f = isotropic_functional(t);
    let mut worst: f64 = 0.0;
    let mut pairs = 0usize;
    let mut violations = 0usize;
    for c in &cfgs {
        let closed = isotropic_gamma(c, t)?;
        let lent = gamma_total(&f, c, &space)?;
        worst = worst.max(max_relative_deviation(&closed, lent.matrix()));
        let det = closed.determinant();
        let pts: Vec<_> = c.points().iter().filter(|p| p.base.time <= t).collect();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                pairs += 1;
                if det < det_lower_bound(pts[i], pts[j])? - SLACK {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        worst <= TOL && violations == 0,
        format!(
            "closed form vs lent {worst:.1e} (tol {TOL:.0e}); det bound violations {violations} of {pairs} pairs"
        ),
    )
}

fn nondegeneracy() -> Result<Outcome> {
    const N: usize = 10_000;
    const THRESHOLD: f64 = 1e-10;
    let spec = stable_spec(1e-3);
    let lambda = spec.intensity();
    let p = 1.0 - (1.0 + lambda) * (-lambda).exp();
    let sigma = (p * (1.0 - p) / N as f64).sqrt();
    let bound = p - 3.0 * sigma;
    let rep = nondegeneracy_survey(
        &isotropic_functional(1.0),
        &spec,
        &CircleMarkSpace::default(),
        N,
        THRESHOLD,
        505,
    )?;
    outcome(
        rep.fraction_above >= bound,
        format!(
            "Λ = {lambda:.4}, fraction with det > {THRESHOLD:.0e}: {} (bound {bound:.6})",
            rep.fraction_above
        ),
    )
}

fn kde_isotropy() -> Result<Outcome> {
    const N: usize = 100_000;
    const TOL: f64 = 0.1;
    let spec = ProcessSpec::new(1.0, LevyMeasure::dirac(1.0, 5.0));
    let space = CircleMarkSpace::default();
    let f = isotropic_functional(1.0);
    let samples = (0..N)
        .map(|i| {
            f.eval(&simulate_configuration(
                &spec,
                &space,
                derive_seed(606, i as u64),
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    let est = kde_scott(&samples)?;
    let rep = isotropy_check(&est, &[1.0], 32, TOL)?;
    outcome(
        rep.max_deviation < TOL,
        format!(
            "max angular rel deviation at radius 1: {:.4} (tol {TOL}), bandwidth {:.3?}",
            rep.max_deviation,
            est.bandwidth()
        ),
    )
}

fn smooth_presets() -> Vec<(&'static str, CoefficientPreset)> {
    vec![
        (
            "linear",
            CoefficientPreset::Linear {
                diffusion: vec![
                    vec![vec![0.4, 0.1], vec![0.0, 0.3]],
                    vec![vec![0.0, -0.2], vec![0.2, 0.0]],
                ],
                drift: vec![vec![-0.3, 0.1], vec![0.0, -0.2]],
            },
        ),
        ("rotation", CoefficientPreset::Rotation { rate: 1.3 }),
        (
            "sinusoidal",
            CoefficientPreset::Sinusoidal {
                dim: 2,
                scale: 0.6,
                damping: 0.3,
            },
        ),
    ]
}

fn sde_isometry() -> Result<Outcome> {
    const DRAWS: usize = 100_000;
    const Z_TOL: f64 = 3.0;
    const EXACT_TOL: f64 = 1e-12;
    let t = 1.0;
    let n = 64;
    let sigma_rows = vec![vec![1.0, 0.5], vec![-0.3, 2.0]];
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]);
    let mut presets = vec![(
        "additive",
        CoefficientPreset::Additive {
            sigma: sigma_rows.clone(),
        },
    )];
    presets.extend(smooth_presets());
    presets.push((
        "spiral",
        CoefficientPreset::JumpField {
            field: JumpField::Spiral,
            damping: 0.4,
        },
    ));
    let x = DVector::from_vec(vec![0.7, -0.4]);
    let mut worst_z: f64 = 0.0;
    let mut exact_dev = f64::NAN;
    let mut names = Vec::new();
    for (k, (name, p)) in presets.iter().enumerate() {
        names.push(*name);
        let mut rng = rng_from_seed(derive_seed(707, k as u64));
        let path = DriverPath::sample(n, t / n as f64, p.noise_dim(), &mut rng);
        let gamma = gamma_sde(p, &x, &path)?;
        if *name == "additive" {
            exact_dev = (&gamma - &sigma * sigma.transpose() * t).abs().max();
        }
        let flow = euler_solve(p, &x, &path)?;
        let sampler = flow.flat_sampler();
        let draw_seed = derive_seed(708, k as u64);
        let draws: Vec<DVector<f64>> = (0..DRAWS)
            .map(|d| sampler.sample(&mut rng_from_seed(derive_seed(draw_seed, d as u64))))
            .collect();
        // the frozen sampler is the same map as the one-shot entry point
        for d in 0..3 {
            let one = flat_sde_sample(p, &x, &path, derive_seed(draw_seed, d))?;
            if one != draws[d as usize] {
                return outcome(false, format!("{name}: sampler and one-shot draws differ"));
            }
        }
        worst_z = worst_z.max(max_z_score(
            &empirical_second_moments(&draws),
            &gamma,
            1e-300,
        ));
    }
    outcome(
        worst_z <= Z_TOL && exact_dev <= EXACT_TOL,
        format!(
            "max |z| {worst_z:.2} over {} ({DRAWS} copies, tol {Z_TOL}); additive |Γ - σσᵀT| {exact_dev:.1e} (tol {EXACT_TOL:.0e})",
            names.join("/")
        ),
    )
}

fn flow_consistency() -> Result<Outcome> {
    const TOL: f64 = 1e-3;
    const EPS: f64 = 1e-6;
    let t = 1.0;
    let n = 1024;
    let mut worst: f64 = 0.0;
    for (k, (_, p)) in smooth_presets().iter().enumerate() {
        for trial in 0..5u64 {
            let mut rng = rng_from_seed(derive_seed(808, 16 * k as u64 + trial));
            let path = DriverPath::sample(n, t / n as f64, p.noise_dim(), &mut rng);
            let x = DVector::from_vec(vec![rng.random::<f64>() + 0.2, rng.random::<f64>() - 0.5]);
            let base = euler_solve_from(p, &x, &x, &path)?;
            for h in [
                DVector::from_vec(vec![1.0, 0.0]),
                DVector::from_vec(vec![0.6, -0.8]),
            ] {
                let bumped = euler_solve_from(p, &(&x + &h * EPS), &x, &path)?;
                let fd = (bumped.terminal() - base.terminal()) / EPS;
                let exact = base.terminal_jacobian() * &h;
                worst = worst.max((fd - &exact).norm() / exact.norm());
            }
        }
    }
    outcome(
        worst < TOL,
        format!("max rel error of K_T·h vs difference quotient: {worst:.1e} (tol {TOL:.0e}, dt = T/1024)"),
    )
}

fn moment_bound() -> Result<Outcome> {
    const VARIATION_TOL: f64 = 0.2;
    let t = 1.0;
    let (_, linear) = smooth_presets().remove(0);
    let dir = DVector::from_vec(vec![0.6, 0.8]);
    let grid: Vec<DVector<f64>> = [1e-3, 1e-2, 1e-1, 1.0, 10.0]
        .iter()
        .map(|r| &dir * *r)
        .collect();
    let rep = moment_growth_check_with(&linear, t, &grid, 2000, 909, 256)?;
    let envelope = rep.fitted_k * (rep.fitted_k * t).exp();
    outcome(
        rep.scale_variation < VARIATION_TOL && rep.bounded && rep.max_ratio <= envelope,
        format!(
            "E|X|²/|x|² variation {:.1e} over 4 decades (tol {VARIATION_TOL}); max ratio {:.4} ≤ k e^(kt) with fitted k {:.4}, Gronwall k {:.4}",
            rep.scale_variation, rep.max_ratio, rep.fitted_k, rep.gronwall_k
        ),
    )
}

fn span_rank() -> Result<Outcome> {
    const SEQUENCES: usize = 20;
    const LEN: usize = 12;
    let full = [
        (
            "identity",
            CoefficientPreset::JumpField {
                field: JumpField::Identity { dim: 2 },
                damping: 0.0,
            },
        ),
        (
            "spiral",
            CoefficientPreset::JumpField {
                field: JumpField::Spiral,
                damping: 0.0,
            },
        ),
        (
            "rotation_pair",
            CoefficientPreset::JumpField {
                field: JumpField::RotationPair,
                damping: 0.0,
            },
        ),
        (
            "additive",
            CoefficientPreset::Additive {
                sigma: vec![vec![1.0, 0.2], vec![0.0, 0.5]],
            },
        ),
    ];
    let deficient = [
        (
            "constant",
            CoefficientPreset::JumpField {
                field: JumpField::Constant {
                    vectors: vec![vec![1.0, 0.0]],
                },
                damping: 0.0,
            },
        ),
        (
            "parallel_pair",
            CoefficientPreset::JumpField {
                field: JumpField::Constant {
                    vectors: vec![vec![1.0, -2.0], vec![-0.5, 1.0]],
                },
                damping: 0.0,
            },
        ),
    ];
    let sequence = |s: usize| -> Vec<DVector<f64>> {
        let mut rng = rng_from_seed(derive_seed(1010, s as u64));
        (1..=LEN)
            .map(|n| {
                let r = rng.random::<f64>().max(1e-3) / n as f64;
                let a = TAU * rng.random::<f64>();
                DVector::from_vec(vec![r * a.cos(), r * a.sin()])
            })
            .collect()
    };
    let mut summary = Vec::new();
    let mut pass = true;
    for (name, p) in &full {
        let ok = (0..SEQUENCES)
            .map(|s| span_rank_for(p, &sequence(s), DEFAULT_RANK_TOL))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .filter(|r| **r == 2)
            .count();
        pass &= ok == SEQUENCES;
        summary.push(format!("{name} {ok}/{SEQUENCES} full"));
    }
    for (name, p) in &deficient {
        let ok = (0..SEQUENCES)
            .map(|s| span_rank_for(p, &sequence(s), DEFAULT_RANK_TOL))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .filter(|r| **r < 2)
            .count();
        pass &= ok == SEQUENCES;
        summary.push(format!("{name} {ok}/{SEQUENCES} deficient"));
    }
    outcome(pass, summary.join(", "))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "lent particle vs in-place oracle",
            limit: Duration::from_secs(10),
            run: oracle_equivalence,
        },
        Criterion {
            id: 2,
            name: "exponential and linear closed forms",
            limit: Duration::from_secs(5),
            run: closed_forms,
        },
        Criterion {
            id: 3,
            name: "gradient isometry",
            limit: Duration::from_secs(60),
            run: gradient_isometry,
        },
        Criterion {
            id: 4,
            name: "planar closed form and determinant bound",
            limit: Duration::from_secs(30),
            run: isotropic_closed_form,
        },
        Criterion {
            id: 5,
            name: "nondegeneracy under small-jump truncation",
            limit: Duration::from_secs(60),
            run: nondegeneracy,
        },
        Criterion {
            id: 6,
            name: "rotation invariance of the density estimate",
            limit: Duration::from_secs(120),
            run: kde_isotropy,
        },
        Criterion {
            id: 7,
            name: "discrete Itô isometry of the flow",
            limit: Duration::from_secs(120),
            run: sde_isometry,
        },
        Criterion {
            id: 8,
            name: "flow Jacobian vs difference quotient",
            limit: Duration::from_secs(30),
            run: flow_consistency,
        },
        Criterion {
            id: 9,
            name: "moment growth near the origin",
            limit: Duration::from_secs(60),
            run: moment_bound,
        },
        Criterion {
            id: 10,
            name: "span rank of transformed jumps",
            limit: Duration::from_secs(5),
            run: span_rank,
        },
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for c in &criteria {
        let label = format!("criterion {:>2}", c.id);
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| c.name.contains(f.as_str()) || label.ends_with(f.as_str()))
        {
            continue;
        }
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && elapsed <= c.limit, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{label} {}: {} | {detail} | {:.2}s (limit {}s)",
            c.name,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            c.limit.as_secs()
        );
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
