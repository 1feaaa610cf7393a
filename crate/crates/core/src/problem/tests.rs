use super::levels::{Shift, SquaredDistance, TanhAffine};
use super::*;
use crate::rng::{stream, Purpose};
use proptest::prelude::*;

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn samples(width: usize, rows: &[&[f64]]) -> LevelSamples {
    LevelSamples::from_rows(width, rows.iter().map(|r| r.to_vec())).unwrap()
}

/// `f_ν(x) = (x − ν)²` with `S = {0, 2}`.
fn one_level_square() -> (CompositionalProblem, Dataset) {
    let level = SquaredDistance::new(1, 1.0, 1.0);
    let p = CompositionalProblem::new(vec![Arc::new(level)], ProblemConstants::default()).unwrap();
    (p, Dataset::new(0, vec![samples(1, &[&[0.0], &[2.0]])]))
}

/// `g_ω(x) = x + ω` with `S_ω = {−1, +1}` under `f(y) = y²`.
fn two_level_shift_square() -> (CompositionalProblem, Dataset) {
    let inner = Shift { dim: 1, noise_sd: 1.0 };
    let outer = SquaredDistance::new(1, 1.0, 0.0);
    let p = CompositionalProblem::new(vec![Arc::new(inner), Arc::new(outer)], ProblemConstants::default()).unwrap();
    let data = Dataset::new(0, vec![samples(1, &[&[-1.0], &[1.0]]), samples(1, &[&[0.0]])]);
    (p, data)
}

#[test]
fn empirical_value_examples() {
    let (p, d) = one_level_square();
    assert_eq!(empirical_value(&p, &d, &v(&[1.0])).unwrap(), 1.0);
    let (p, d) = two_level_shift_square();
    assert_eq!(empirical_value(&p, &d, &v(&[2.0])).unwrap(), 4.0);
}

#[test]
fn empirical_gradient_examples() {
    let (p, d) = one_level_square();
    assert_eq!(empirical_gradient(&p, &d, &v(&[1.0])).unwrap()[0], 0.0);
    assert_eq!(empirical_gradient(&p, &d, &v(&[2.0])).unwrap()[0], 2.0);
    let (p, d) = two_level_shift_square();
    assert_eq!(empirical_gradient(&p, &d, &v(&[2.0])).unwrap()[0], 4.0);
}

#[test]
fn dimension_mismatch_is_invalid_input() {
    let (p, d) = one_level_square();
    let err = empirical_value(&p, &d, &v(&[1.0, 2.0])).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)));
}

#[test]
fn non_finite_intermediate_reports_level() {
    let (p, _) = two_level_shift_square();
    let d = Dataset::new(0, vec![samples(1, &[&[f64::INFINITY]]), samples(1, &[&[0.0]])]);
    match empirical_value(&p, &d, &v(&[0.0])).unwrap_err() {
        Error::Numeric { level, .. } => assert_eq!(level, Some(1)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn construction_rejects_broken_chains() {
    let a: Arc<dyn Level> = Arc::new(Shift { dim: 2, noise_sd: 0.0 });
    let b: Arc<dyn Level> = Arc::new(SquaredDistance::new(3, 1.0, 0.0));
    let err = CompositionalProblem::new(vec![a.clone(), b], ProblemConstants::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)));
    // non-scalar final level
    let err = CompositionalProblem::new(vec![a], ProblemConstants::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)));
    assert!(CompositionalProblem::new(vec![], ProblemConstants::default()).is_err());
}

#[test]
fn zero_variance_dataset_matches_population() {
    let cfg = QuadraticConfig {
        dim: 2,
        n: 5,
        noise_sd: 0.0,
        scale: 1.0,
        seed: 4,
    };
    let (p, d) = make_quadratic_problem(&cfg).unwrap();
    let x = v(&[0.3, -1.7]);
    assert_eq!(empirical_value(&p, &d, &x).unwrap(), population_value(&p, &x).unwrap());
}

#[test]
fn analytic_population_bias_variance() {
    let cfg = QuadraticConfig {
        dim: 1,
        n: 3,
        noise_sd: 1.0,
        scale: 1.0,
        seed: 0,
    };
    let (p, _) = make_quadratic_problem(&cfg).unwrap();
    assert_eq!(population_value(&p, &v(&[0.0])).unwrap(), 1.0);
}

#[test]
fn held_out_population_is_test_empirical_value() {
    let (p, _, test) = make_klevel_synthetic(&KLevelConfig::uniform(3, 2, 20, 1.0, 5)).unwrap();
    let x = v(&[0.2, -0.4]);
    assert_eq!(
        population_value(&p, &x).unwrap().to_bits(),
        empirical_value(&p, &test, &x).unwrap().to_bits()
    );
}

#[test]
fn missing_population_is_config_error() {
    let (p, _) = one_level_square();
    assert!(matches!(population_value(&p, &v(&[0.0])), Err(Error::Config(_))));
}

#[test]
fn neighbor_changes_exactly_one_sample() {
    let (p, train, _) = make_klevel_synthetic(&KLevelConfig::uniform(3, 2, 20, 1.0, 5)).unwrap();
    let mut rng = stream(1, Purpose::Neighbor, 2, 4);
    let nb = neighbor(&p, &train, 2, 4, &mut rng).unwrap();
    for k in 1..=3 {
        let (a, b) = (train.level(k), nb.level(k));
        for j in 0..a.len() {
            if k == 2 && j == 3 {
                assert_ne!(a.row(j), b.row(j));
            } else {
                assert_eq!(a.row(j), b.row(j));
            }
        }
    }
    // same stream state, same replacement
    let again = neighbor(&p, &train, 2, 4, &mut stream(1, Purpose::Neighbor, 2, 4)).unwrap();
    assert_eq!(nb, again);
}

#[test]
fn neighbor_range_checks() {
    let (p, train, _) = make_klevel_synthetic(&KLevelConfig::uniform(2, 2, 20, 1.0, 5)).unwrap();
    let mut rng = stream(1, Purpose::Neighbor, 0, 0);
    assert!(matches!(neighbor(&p, &train, 0, 1, &mut rng), Err(Error::InvalidInput(_))));
    assert!(matches!(neighbor(&p, &train, 3, 1, &mut rng), Err(Error::InvalidInput(_))));
    assert!(matches!(neighbor(&p, &train, 1, 13, &mut rng), Err(Error::InvalidInput(_))));
    assert!(matches!(neighbor(&p, &train, 1, 0, &mut rng), Err(Error::InvalidInput(_))));
}

#[test]
fn one_level_neighbor_realizes_single_replacement() {
    let (p, train) = make_quadratic_problem(&QuadraticConfig::default()).unwrap();
    let nb = neighbor(&p, &train, 1, 10, &mut stream(2, Purpose::Neighbor, 1, 10)).unwrap();
    let diffs = (0..train.level(1).len())
        .filter(|&j| train.level(1).row(j) != nb.level(1).row(j))
        .collect::<Vec<_>>();
    assert_eq!(diffs, vec![9]);
}

#[test]
fn finite_difference_of_square() {
    let level = SquaredDistance::new(1, 1.0, 0.0);
    let p = CompositionalProblem::new(vec![Arc::new(level)], ProblemConstants::default()).unwrap();
    let d = Dataset::new(0, vec![samples(1, &[&[0.0]])]);
    let g = finite_difference_gradient(&p, &d, &v(&[3.0]), 1e-3).unwrap();
    assert!((g[0] - 6.0).abs() < 1e-6);
    assert!(finite_difference_gradient(&p, &d, &v(&[3.0]), 0.0).is_err());
}

#[test]
fn finite_difference_exact_on_affine_chain() {
    let a1 = Matrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.0, 1.0]);
    let a3 = Matrix::from_row_slice(1, 3, &[0.7, -1.1, 0.4]);
    let levels: Vec<Arc<dyn Level>> = vec![
        Arc::new(TanhAffine::new(a1.clone(), a1, 0.0, v(&[0.1, 0.2, 0.3]), 1.0)),
        Arc::new(Shift { dim: 3, noise_sd: 1.0 }),
        Arc::new(TanhAffine::new(a3.clone(), a3, 0.0, v(&[-0.5]), 1.0)),
    ];
    let p = CompositionalProblem::new(levels, ProblemConstants::default()).unwrap();
    let d = Dataset::new(
        0,
        vec![
            samples(3, &[&[0.1, 0.0, -0.2], &[0.3, 0.3, 0.3]]),
            samples(3, &[&[1.0, -1.0, 0.5]]),
            samples(1, &[&[0.25], &[-0.75], &[0.0]]),
        ],
    );
    let x = v(&[0.8, -1.3]);
    let g = empirical_gradient(&p, &d, &x).unwrap();
    let fd = finite_difference_gradient(&p, &d, &x, 1e-3).unwrap();
    assert!((g - fd).amax() < 1e-10);
}

fn rel_err(a: &Vector, b: &Vector) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chain_rule_matches_finite_differences(
        seed in any::<u64>(),
        k in 1usize..=4,
        d0 in 1usize..=4,
        width in 1usize..=4,
        noise in 0.0f64..2.0,
    ) {
        let mut dims = vec![width; k];
        dims[0] = d0;
        let cfg = KLevelConfig { dims, n_per_level: 10, noise_var: noise, split: 0.6, seed, gain: 0.8 };
        let (p, train, _) = make_klevel_synthetic(&cfg).unwrap();
        for i in 0..20u64 {
            let mut rng = stream(seed, Purpose::MonteCarlo, 0, i);
            let x = Vector::from_fn(d0, |_, _| rand::Rng::random_range(&mut rng, -2.0..2.0));
            let g = empirical_gradient(&p, &train, &x).unwrap();
            let fd = finite_difference_gradient(&p, &train, &x, 1e-5).unwrap();
            prop_assert!(rel_err(&fd, &g) <= 1e-5, "rel err {} at {:?}", rel_err(&fd, &g), x);
        }
    }

    #[test]
    fn generators_are_deterministic(seed in any::<u64>(), k in 1usize..4) {
        let cfg = KLevelConfig::uniform(k, 3, 12, 1.5, seed);
        let (p, a, _) = make_klevel_synthetic(&cfg).unwrap();
        let (_, b, _) = make_klevel_synthetic(&cfg).unwrap();
        prop_assert_eq!(&a, &b);
        let x = Vector::from_element(3, 0.5);
        prop_assert_eq!(
            empirical_value(&p, &a, &x).unwrap().to_bits(),
            empirical_value(&p, &b, &x).unwrap().to_bits()
        );
    }
}

#[test]
fn quintic_defaults_split_sixty_forty() {
    let (p, train, test) = make_quintic_problem(&QuinticConfig::default()).unwrap();
    assert_eq!(train.sizes(), vec![1200]);
    assert_eq!(test.sizes(), vec![800]);
    assert_eq!(p.input_dim(), 6);
    let again = make_quintic_problem(&QuinticConfig::default()).unwrap();
    assert_eq!(again.1, train);
    assert_eq!(again.2, test);
}

#[test]
fn noiseless_quintic_is_interpolated_by_truth() {
    let cfg = QuinticConfig {
        noise_var: 0.0,
        ..QuinticConfig::default()
    };
    let (p, train, _) = make_quintic_problem(&cfg).unwrap();
    let truth = Vector::from_column_slice(&QUINTIC_COEFFS);
    assert!(empirical_value(&p, &train, &truth).unwrap() < 1e-20);
    assert!(empirical_gradient(&p, &train, &truth).unwrap().amax() < 1e-9);
}

#[test]
fn quintic_parameter_validation() {
    let bad = QuinticConfig {
        n_points: 1,
        ..QuinticConfig::default()
    };
    assert!(make_quintic_problem(&bad).is_err());
    let bad = QuinticConfig {
        split: 1.0,
        ..QuinticConfig::default()
    };
    assert!(make_quintic_problem(&bad).is_err());
}

#[test]
fn klevel_one_level_is_a_regression() {
    let (p, train, test) = make_klevel_synthetic(&KLevelConfig::uniform(1, 3, 50, 3.0, 2)).unwrap();
    assert_eq!(p.num_levels(), 1);
    assert_eq!(train.sizes(), vec![30]);
    assert_eq!(test.sizes(), vec![20]);
}

#[test]
fn noiseless_klevel_train_equals_population() {
    for k in 1..=5 {
        let (p, train, _) = make_klevel_synthetic(&KLevelConfig::uniform(k, 3, 10, 0.0, 8)).unwrap();
        let x = v(&[0.1, 0.7, -0.4]);
        assert_eq!(empirical_value(&p, &train, &x).unwrap(), population_value(&p, &x).unwrap());
    }
}

#[test]
fn klevel_depths_share_level_samples() {
    let (_, a, _) = make_klevel_synthetic(&KLevelConfig::uniform(3, 2, 10, 1.0, 8)).unwrap();
    let (_, b, _) = make_klevel_synthetic(&KLevelConfig::uniform(5, 2, 10, 1.0, 8)).unwrap();
    assert_eq!(a.level(1), b.level(1));
    assert_eq!(a.level(2), b.level(2));
    // heads share their stream too
    assert_eq!(a.level(3), b.level(5));
}
