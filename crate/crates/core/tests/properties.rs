use std::f64::consts::TAU;

use lent_core::config_space::{BasePoint, Configuration, MarkedPoint};
use lent_core::density_analysis::{
    det_lower_bound, isotropic_gamma, kde_estimate, prop4_span_test, DEFAULT_RANK_TOL,
};
use lent_core::lent_particle::{
    gamma_terms, gamma_total, gamma_total_oracle, isotropic_functional, make_exp, make_linear,
    ClosurePointFn, StackedFunctional,
};
use lent_core::linalg::{max_relative_deviation, symmetric_eigenvalues};
use lent_core::rng::{derive_seed, rng_from_seed};
use lent_core::sde_flow::{gamma_sde, CoefficientPreset, DriverPath};
use lent_core::{CircleMarkSpace, Functional, Mark};
use nalgebra::DVector;
use proptest::prelude::*;
use std::sync::Arc;

fn point() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.0..1.0f64, 1e-3..3.0f64, 0.0..TAU)
}

fn to_point((t, r, a): (f64, f64, f64)) -> MarkedPoint {
    MarkedPoint::new(BasePoint::new(t, vec![r]), Mark::Angle(a))
}

fn configuration(max: usize) -> impl Strategy<Value = Configuration> {
    prop::collection::vec(point(), 0..max).prop_map(|pts| {
        let mut seen = std::collections::BTreeSet::new();
        let points = pts
            .into_iter()
            .filter(|(t, _, _)| seen.insert(t.to_bits()))
            .map(to_point)
            .collect();
        Configuration::new(1.0, "circle", points).unwrap()
    })
}

fn fd_sine() -> ClosurePointFn {
    ClosurePointFn::scalar_on_circle(|s, a, th| a[0] * (th + 2.0 * s).sin(), None)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn construction_ignores_input_order(cfg in configuration(12), seed in any::<u64>()) {
        let mut pts = cfg.points().to_vec();
        let mut rng = rng_from_seed(seed);
        rand::seq::SliceRandom::shuffle(pts.as_mut_slice(), &mut rng);
        let again = Configuration::new(1.0, "circle", pts).unwrap();
        prop_assert_eq!(&again, &cfg);
    }

    #[test]
    fn add_and_remove_are_inverse(cfg in configuration(10), p in point()) {
        let p = to_point(p);
        prop_assume!(cfg.position_of_base(&p.base).is_none());
        let plus = cfg.eps_plus(&p);
        prop_assert_eq!(plus.len(), cfg.len() + 1);
        prop_assert!(plus.contains(&p));
        prop_assert_eq!(&plus.eps_minus(&p), &cfg);
        for q in cfg.points() {
            prop_assert_eq!(&cfg.eps_minus(q).eps_plus(q), &cfg);
        }
    }

    #[test]
    fn json_round_trip(cfg in configuration(8)) {
        let back = Configuration::from_json(&cfg.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn lent_route_matches_in_place_route(cfg in configuration(15)) {
        let space = CircleMarkSpace::default();
        let funcs: Vec<Box<dyn Functional>> = vec![
            Box::new(make_linear(fd_sine())),
            Box::new(make_exp(fd_sine()).unwrap()),
            Box::new(isotropic_functional(0.5)),
        ];
        for f in &funcs {
            let a = gamma_total(f.as_ref(), &cfg, &space).unwrap();
            let b = gamma_total_oracle(f.as_ref(), &cfg, &space).unwrap();
            prop_assert!(max_relative_deviation(a.matrix(), b.matrix()) <= 1e-12);
        }
    }

    #[test]
    fn gamma_is_symmetric_psd(cfg in configuration(15)) {
        let space = CircleMarkSpace::default();
        let f = StackedFunctional::new(vec![
            Arc::new(isotropic_functional(1.0)),
            Arc::new(make_linear(fd_sine())),
        ]);
        let g = gamma_total(&f, &cfg, &space).unwrap();
        let m = g.matrix();
        prop_assert!((m - m.transpose()).abs().max() == 0.0);
        let scale = m.abs().max().max(1.0);
        prop_assert!(g.min_eigenvalue() >= -1e-12 * scale);
        let sum = gamma_terms(&f, &cfg, &space)
            .unwrap()
            .into_iter()
            .fold(nalgebra::DMatrix::zeros(3, 3), |acc, t| acc + t);
        prop_assert!((sum - m).abs().max() <= 1e-12 * scale);
    }

    #[test]
    fn closed_form_and_pair_bound(cfg in configuration(15), t in 0.0..1.0f64) {
        let closed = isotropic_gamma(&cfg, t).unwrap();
        let lent = gamma_total(&isotropic_functional(t), &cfg, &CircleMarkSpace::default()).unwrap();
        prop_assert!(max_relative_deviation(&closed, lent.matrix()) <= 1e-10);
        let det = closed.determinant();
        let pts: Vec<_> = cfg.points().iter().filter(|p| p.base.time <= t).collect();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                prop_assert!(det >= det_lower_bound(pts[i], pts[j]).unwrap() - 1e-10);
            }
        }
    }

    #[test]
    fn adding_a_point_raises_every_eigenvalue(cfg in configuration(12), p in point()) {
        let p = to_point(p);
        prop_assume!(cfg.position_of_base(&p.base).is_none());
        let before = symmetric_eigenvalues(&isotropic_gamma(&cfg, 1.0).unwrap());
        let after = symmetric_eigenvalues(&isotropic_gamma(&cfg.eps_plus(&p), 1.0).unwrap());
        let scale = after.iter().fold(1.0_f64, |a, b| a.max(b.abs()));
        for (b, a) in before.iter().zip(&after) {
            prop_assert!(*a >= *b - 1e-12 * scale);
        }
    }

    #[test]
    fn kde_is_nonnegative(
        pts in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 1..50),
        h in 0.05..2.0f64,
        q in (-5.0..5.0f64, -5.0..5.0f64),
    ) {
        let samples: Vec<DVector<f64>> =
            pts.iter().map(|(x, y)| DVector::from_vec(vec![*x, *y])).collect();
        let est = kde_estimate(&samples, h).unwrap();
        prop_assert!(est.evaluate(&[q.0, q.1]) >= 0.0);
    }

    #[test]
    fn span_rank_is_bounded(
        jumps in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 1..6),
    ) {
        let xs: Vec<DVector<f64>> = jumps.iter().map(|(a, b)| DVector::from_vec(vec![*a, *b])).collect();
        let id = |x: &DVector<f64>| x.clone();
        let rank = prop4_span_test(&[&id], &xs, DEFAULT_RANK_TOL).unwrap();
        prop_assert!(rank <= 2.min(xs.len()));
    }

    #[test]
    fn endpoint_gamma_is_psd(seed in any::<u64>(), x0 in -2.0..2.0f64, x1 in -2.0..2.0f64) {
        let p = CoefficientPreset::Linear {
            diffusion: vec![vec![vec![0.5, 0.2], vec![-0.1, 0.3]]],
            drift: vec![vec![-0.1, 0.0], vec![0.2, -0.3]],
        };
        let path = DriverPath::sample(32, 1.0 / 32.0, 1, &mut rng_from_seed(seed));
        let g = gamma_sde(&p, &DVector::from_vec(vec![x0, x1]), &path).unwrap();
        let scale = g.abs().max().max(1e-300);
        prop_assert!((&g - g.transpose()).abs().max() <= 1e-14 * scale);
        prop_assert!(symmetric_eigenvalues(&g)[0] >= -1e-12 * scale);
    }

    #[test]
    fn derived_seeds_are_stable(seed in any::<u64>(), i in any::<u64>()) {
        prop_assert_eq!(derive_seed(seed, i), derive_seed(seed, i));
        prop_assert_ne!(derive_seed(seed, i), derive_seed(seed, i.wrapping_add(1)));
    }
}
