//! Fast self-checks of the library's properties, run by `klvl check-invariants`.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::estimators::{frobenius_norm, project_ball};
use crate::optimizers::{
    average, run, run_observed, schedule_convex, schedule_strongly_convex, AveragingMode, OptimizerKind,
    RunOptions, Schedule, StepView,
};
use crate::problem::{
    empirical_gradient, finite_difference_gradient, make_klevel_synthetic, make_quadratic_problem, neighbor,
    nested_means, KLevelConfig, Matrix, QuadraticConfig, Rows, Vector,
};
use crate::report::fmt_float;
use crate::rng::{stream, Purpose};
use crate::stability_lab::{
    coupled_stability, level_variance, theorem1_bound, BoundInputs, StabilityConfig, VarianceMode,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn() -> Result<(bool, String)>;

const CHECKS: [(&str, CheckFn); 12] = [
    ("gradient_matches_finite_differences", gradient_fd),
    ("projection_stays_in_ball", projection),
    ("svmr_one_level_is_storm", svmr_is_storm),
    ("full_batch_beta_one_is_gradient_descent", beta_one_gd),
    ("identical_neighbor_has_zero_stability", zero_perturbation),
    ("coupled_runs_share_index_streams", coupling),
    ("schedules_are_exact_powers", schedules),
    ("bound_examples_and_homogeneity", bound),
    ("level_variance_matches_two_pass", variance_two_pass),
    ("mu_weighted_zero_is_uniform", averaging),
    ("runs_are_deterministic", determinism),
    ("floats_round_trip", floats),
];

/// Runs every check; a check that errors counts as failed.
pub fn run_all() -> Vec<Check> {
    CHECKS
        .iter()
        .map(|&(name, f)| match f() {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn gradient_fd() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for p in 0..20u64 {
        let mut rng = stream(p, Purpose::MonteCarlo, 1, 0);
        let levels = rng.random_range(1..=4usize);
        let cfg = KLevelConfig {
            dims: (0..levels).map(|_| rng.random_range(1..=4usize)).collect(),
            n_per_level: 10,
            noise_var: 1.0,
            split: 0.6,
            seed: p,
            gain: 0.5,
        };
        let (problem, train, _) = make_klevel_synthetic(&cfg)?;
        let x = Vector::from_fn(problem.input_dim(), |_, _| rng.random_range(-2.0..2.0));
        let g = empirical_gradient(&problem, &train, &x)?;
        let fd = finite_difference_gradient(&problem, &train, &x, 1e-5)?;
        worst = worst.max((&fd - &g).amax() / g.amax().max(1e-12));
    }
    Ok((worst <= 1e-5, format!("max relative error {worst:e}")))
}

fn projection() -> Result<(bool, String)> {
    let mut rng = stream(0, Purpose::MonteCarlo, 2, 0);
    let mut ok = true;
    for _ in 0..500 {
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let m = Matrix::from_fn(rng.random_range(1..5), rng.random_range(1..5), |_, _| {
            scale * rng.random_range(-1.0..1.0)
        });
        let r = rng.random_range(0.01..10.0);
        let p = project_ball(&m, r)?;
        ok &= frobenius_norm(&p) <= r && project_ball(&p, r)? == p;
        if frobenius_norm(&m) <= r {
            ok &= p == m;
        }
    }
    Ok((ok, "500 random matrices".into()))
}

fn trajectory(kind: OptimizerKind, opts: &RunOptions, problem: &crate::problem::CompositionalProblem, data: &crate::problem::Dataset) -> Result<Vec<Vector>> {
    let mut xs = Vec::new();
    let mut obs = |s: &StepView<'_>| -> Result<()> {
        xs.push(s.x.clone());
        Ok(())
    };
    run_observed(kind, problem, data, opts, &mut obs)?;
    Ok(xs)
}

fn max_dev(a: &[Vector], b: &[Vector]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

fn svmr_is_storm() -> Result<(bool, String)> {
    let (problem, data) = make_quadratic_problem(&QuadraticConfig::default())?;
    let opts = RunOptions::new(Schedule::constant(50, 0.05, 0.2)?, 4, 5);
    let dev = max_dev(
        &trajectory(OptimizerKind::Storm, &opts, &problem, &data)?,
        &trajectory(OptimizerKind::Svmr, &opts, &problem, &data)?,
    );
    Ok((dev <= 1e-12, format!("max deviation {dev:e}")))
}

fn beta_one_gd() -> Result<(bool, String)> {
    let (problem, data) = make_quadratic_problem(&QuadraticConfig::default())?;
    let mut opts = RunOptions::new(Schedule::constant(50, 0.1, 1.0)?, 64, 0);
    opts.initial_batch = 64;
    opts.x0 = Some(vec![3.0; 5]);
    let got = trajectory(OptimizerKind::Storm, &opts, &problem, &data)?;
    let mut x = Vector::from_element(5, 3.0);
    let mut want = vec![x.clone()];
    for _ in 0..50 {
        let g = problem.level(1).mean_jacobian(data.level(1), Rows::All, &x);
        let g = project_ball(&g, opts.lf)?;
        x = &x - g.transpose().column(0) * 0.1;
        want.push(x.clone());
    }
    let dev = max_dev(&got, &want);
    Ok((dev <= 1e-12, format!("max deviation {dev:e}")))
}

fn zero_perturbation() -> Result<(bool, String)> {
    let mut eps = Vec::new();
    for (kind, levels) in [(OptimizerKind::Storm, 1), (OptimizerKind::Cover, 2), (OptimizerKind::Svmr, 3)] {
        let (problem, train, _) = make_klevel_synthetic(&KLevelConfig::uniform(levels, 3, 40, 0.0, 1))?;
        let cfg = StabilityConfig {
            optimizer: kind,
            options: RunOptions::new(Schedule::constant(40, 0.05, 0.2)?, 4, 0),
            level: levels,
            position: 1,
            seeds: vec![0, 1, 2],
        };
        eps.push(coupled_stability(&problem, &train, &cfg)?.eps_hat);
    }
    Ok((eps.iter().all(|&e| e == 0.0), format!("eps_hat {eps:?}")))
}

fn coupling() -> Result<(bool, String)> {
    let (problem, train, _) = make_klevel_synthetic(&KLevelConfig::uniform(3, 3, 40, 1.0, 2))?;
    let other = neighbor(&problem, &train, 2, 5, &mut stream(0, Purpose::Neighbor, 2, 5))?;
    let opts = RunOptions::new(Schedule::constant(40, 0.05, 0.2)?, 4, 9);
    let mut logs = Vec::new();
    for data in [&train, &other] {
        let mut log = Vec::new();
        let mut obs = |s: &StepView<'_>| -> Result<()> {
            log.push(s.batches.to_vec());
            Ok(())
        };
        run_observed(OptimizerKind::Svmr, &problem, data, &opts, &mut obs)?;
        logs.push(log);
    }
    Ok((logs[0] == logs[1], format!("{} steps compared", logs[0].len())))
}

fn schedules() -> Result<(bool, String)> {
    let a = schedule_convex(16)?;
    let b = schedule_strongly_convex(64)?;
    let ok = (a.iters, a.eta, a.beta) == (1024, 2f64.powi(-8), 2f64.powi(-8))
        && (b.iters, b.eta, b.beta) == (128, 2f64.powi(-6), 2f64.powi(-6));
    Ok((ok, format!("({}, {}), ({}, {})", a.iters, a.eta, b.iters, b.eta)))
}

fn bound() -> Result<(bool, String)> {
    let k2 = theorem1_bound(&BoundInputs {
        lf: 1.0,
        eps: vec![0.1, 0.2],
        var: vec![0.04],
        n: vec![4, 4],
    })?;
    let base = BoundInputs {
        lf: 1.3,
        eps: vec![0.2, 0.05, 0.7],
        var: vec![0.0; 2],
        n: vec![5, 6, 7],
    };
    let b0 = theorem1_bound(&base)?;
    let mut worst: f64 = 0.0;
    for c in [0.25, 2.0, 9.0] {
        let scaled = BoundInputs {
            eps: base.eps.iter().map(|e| c * e).collect(),
            ..base.clone()
        };
        worst = worst.max((theorem1_bound(&scaled)? - c * b0).abs());
    }
    Ok((k2 == 0.7 && worst <= 1e-12, format!("K=2 example {k2}, homogeneity {worst:e}")))
}

fn variance_two_pass() -> Result<(bool, String)> {
    let (problem, train, _) = make_klevel_synthetic(&KLevelConfig::uniform(3, 4, 50, 2.0, 3))?;
    let x = Vector::from_element(problem.input_dim(), 0.3);
    let got = level_variance(&problem, &train, &x, 2, VarianceMode::Exhaustive)?;
    let input = nested_means(&problem, &train, &x)?[1].clone();
    let samples = train.level(2);
    let values: Vec<Vector> = (0..samples.len()).map(|j| problem.level(2).value(samples.row(j), &input)).collect();
    let mean = values.iter().fold(Vector::zeros(values[0].len()), |a, v| a + v) / values.len() as f64;
    let want = values.iter().map(|v| (v - &mean).norm_squared()).sum::<f64>() / values.len() as f64;
    let dev = (got - want).abs();
    Ok((dev <= 1e-12, format!("deviation {dev:e}")))
}

fn averaging() -> Result<(bool, String)> {
    let xs: Vec<Vector> = (0..7).map(|i| Vector::from_element(3, (i as f64).sqrt())).collect();
    let a = average(&xs, AveragingMode::Uniform)?;
    let b = average(&xs, AveragingMode::MuWeighted { mu: 0.0, eta: 0.3 })?;
    Ok((a == b, "7 iterates".into()))
}

fn determinism() -> Result<(bool, String)> {
    let (problem, train, _) = make_klevel_synthetic(&KLevelConfig::uniform(3, 3, 60, 1.0, 4))?;
    let mut opts = RunOptions::new(Schedule::constant(40, 0.05, 0.2)?, 8, 11);
    opts.log_every = 5;
    let mut csv = Vec::new();
    for _ in 0..2 {
        let (_, rec) = run(OptimizerKind::Svmr, &problem, &train, &opts)?;
        csv.push(rec.table().to_csv_string()?);
    }
    Ok((csv[0] == csv[1], format!("{} bytes", csv[0].len())))
}

fn floats() -> Result<(bool, String)> {
    let mut rng = stream(0, Purpose::MonteCarlo, 3, 0);
    let ok = (0..1000).all(|_| {
        let x: f64 = rng.random::<f64>() * 10f64.powi(rng.random_range(-300..300));
        fmt_float(x).parse::<f64>().map(f64::to_bits) == Ok(x.to_bits())
    });
    Ok((ok, "1000 random values".into()))
}
