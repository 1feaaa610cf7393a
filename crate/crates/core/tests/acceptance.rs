//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p klvl-core --test acceptance`. The process exits
//! nonzero when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use klvl_core::estimators::frobenius_norm;
use klvl_core::optimizers::{
    run_observed, schedule_convex, schedule_strongly_convex, OptimizerKind, RunOptions,
    Schedule, StepView,
};
use klvl_core::problem::{
    empirical_gradient, finite_difference_gradient, make_klevel_synthetic, make_quadratic_problem, KLevelConfig,
    QuadraticConfig, Rows, Vector,
};
use klvl_core::rng::{stream, Purpose};
use klvl_core::stability_lab::{
    column_f64, coupled_stability, experiment_initial_batch, experiment_level_sweep, experiment_noise_sweep,
    experiment_sgd_vs_storm, mean_and_se, spearman, theorem1_bound, BoundInputs, ExperimentSettings,
    StabilityConfig,
};
use klvl_core::Result;
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

fn c1_gradient_oracle() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for p in 0..50u64 {
        let mut rng = stream(p, Purpose::MonteCarlo, 0, 0);
        let k = rng.random_range(1..=4usize);
        let mut dims: Vec<usize> = (0..k).map(|_| rng.random_range(1..=4usize)).collect();
        dims[0] = rng.random_range(1..=4usize);
        let cfg = KLevelConfig {
            dims,
            n_per_level: 10,
            noise_var: rng.random_range(0.0..3.0),
            split: 0.6,
            seed: p,
            gain: rng.random_range(0.1..1.0),
        };
        let (problem, train, _) = make_klevel_synthetic(&cfg)?;
        let x = Vector::from_fn(problem.input_dim(), |_, _| rng.random_range(-2.0..2.0));
        let g = empirical_gradient(&problem, &train, &x)?;
        let fd = finite_difference_gradient(&problem, &train, &x, 1e-5)?;
        worst = worst.max((&fd - &g).amax() / g.amax().max(1e-12));
    }
    outcome(worst <= 1e-5, format!("max relative error {worst:.3e} over 50 problems"))
}

fn c2_projection_invariant() -> Result<Outcome> {
    let settings = ExperimentSettings::svmr();
    let (problem, train, _) = make_klevel_synthetic(&settings.klevel_config(10, 3.0, 0))?;
    let mut checks = 0usize;
    let mut violations = 0usize;
    let mut binding = 0usize;
    // the level-sweep radius, then a small radius that forces clipping
    for lf in [50.0, 1.0] {
        let mut opts = settings.run_options(0)?;
        opts.lf = lf;
        let mut obs = |s: &StepView<'_>| -> Result<()> {
            for v in &s.chain.expect("svmr exposes its chain").v {
                let norm = frobenius_norm(v);
                checks += 1;
                violations += usize::from(norm > lf);
                binding += usize::from(lf == 1.0 && norm == lf);
            }
            Ok(())
        };
        run_observed(OptimizerKind::Svmr, &problem, &train, &opts, &mut obs)?;
    }
    outcome(
        violations == 0 && checks == 2 * 501 * 10,
        format!("{checks} post-update norms checked, {violations} above L_f ({binding} on the sphere at L_f = 1)"),
    )
}

fn trajectory(kind: OptimizerKind, opts: &RunOptions, problem: &klvl_core::problem::CompositionalProblem, data: &klvl_core::problem::Dataset) -> Result<Vec<Vector>> {
    let mut xs = Vec::new();
    let mut obs = |s: &StepView<'_>| -> Result<()> {
        xs.push(s.x.clone());
        Ok(())
    };
    run_observed(kind, problem, data, opts, &mut obs)?;
    Ok(xs)
}

fn c3_degeneracy_ladder() -> Result<Outcome> {
    let (problem, data) = make_quadratic_problem(&QuadraticConfig {
        dim: 5,
        n: 64,
        noise_sd: 1.0,
        scale: 0.5,
        seed: 1,
    })?;
    let mut opts = RunOptions::new(Schedule::constant(100, 0.05, 0.2)?, 8, 3);
    opts.lf = 3.0;
    let storm = trajectory(OptimizerKind::Storm, &opts, &problem, &data)?;
    let svmr = trajectory(OptimizerKind::Svmr, &opts, &problem, &data)?;
    let dev_a = storm.iter().zip(&svmr).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);

    // β = 1 with full batches against an independently coded projected descent
    let mut opts = RunOptions::new(Schedule::constant(100, 0.1, 1.0)?, 64, 3);
    opts.initial_batch = 64;
    opts.lf = 2.0;
    opts.x0 = Some(vec![2.0, -1.0, 0.5, 3.0, -2.5]);
    let run = trajectory(OptimizerKind::Storm, &opts, &problem, &data)?;
    let level = problem.level(1);
    let mut x = Vector::from_column_slice(opts.x0.as_ref().unwrap());
    let mut dev_b: f64 = 0.0;
    for got in &run[1..] {
        let g = level.mean_jacobian(data.level(1), Rows::All, &x).transpose();
        let n = g.norm();
        let g = if n > 2.0 { g * (2.0 / n) } else { g };
        x = &x - g.column(0) * 0.1;
        dev_b = dev_b.max((&x - got).amax());
    }
    outcome(
        storm.len() == 101 && dev_a <= 1e-12 && dev_b <= 1e-12,
        format!("svmr(K=1) vs storm max dev {dev_a:.1e}; beta=1 full batch vs projected GD max dev {dev_b:.1e}"),
    )
}

fn c4_zero_perturbation() -> Result<Outcome> {
    let mut all = Vec::new();
    for (kind, levels) in [(OptimizerKind::Storm, 1), (OptimizerKind::Cover, 2), (OptimizerKind::Svmr, 4)] {
        let (problem, train, _) = make_klevel_synthetic(&KLevelConfig::uniform(levels, 3, 60, 0.0, 7))?;
        let cfg = StabilityConfig {
            optimizer: kind,
            options: RunOptions::new(Schedule::constant(100, 0.05, 0.2)?, 8, 0),
            level: levels,
            position: 2,
            seeds: (0..10).collect(),
        };
        all.push((kind.name(), coupled_stability(&problem, &train, &cfg)?.eps_hat));
    }
    outcome(all.iter().all(|(_, e)| *e == 0.0), format!("eps_hat {all:?}"))
}

fn c5_stability_vs_n() -> Result<Outcome> {
    let ns = [32usize, 64, 128, 256];
    let mut eps = Vec::new();
    for &n in &ns {
        let (problem, data) = make_quadratic_problem(&QuadraticConfig {
            dim: 5,
            n,
            noise_sd: 1.0,
            scale: 0.5,
            seed: 0,
        })?;
        let cfg = StabilityConfig {
            optimizer: OptimizerKind::Storm,
            options: RunOptions::new(Schedule::constant(256, 0.01, 0.1)?, 1, 0),
            level: 1,
            position: 1,
            seeds: (0..20).collect(),
        };
        eps.push(coupled_stability(&problem, &data, &cfg)?.eps_hat);
    }
    let nf: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let rho = spearman(&nf, &eps)?;
    outcome(rho <= -0.8, format!("eps_hat {eps:?}, spearman {rho}"))
}

fn c6_variance_recursion() -> Result<Outcome> {
    let (problem, data) = make_quadratic_problem(&QuadraticConfig {
        dim: 5,
        n: 64,
        noise_sd: 1.0,
        scale: 0.5,
        seed: 2,
    })?;
    let (iters, batch, beta, eta) = (100usize, 4usize, 0.1, 0.05);
    // per-sample gradients x − ν_j: their spread does not depend on x
    let level = problem.level(1);
    let samples = data.level(1);
    let x_any = Vector::zeros(5);
    let grads: Vec<Vector> = (0..samples.len())
        .map(|j| level.jacobian(samples.row(j), &x_any).transpose().column(0).into_owned())
        .collect();
    let gbar = grads.iter().fold(Vector::zeros(5), |a, g| a + g) / grads.len() as f64;
    let per_sample = grads.iter().map(|g| (g - &gbar).norm_squared()).sum::<f64>() / grads.len() as f64;
    let sigma_j2 = per_sample / batch as f64;
    let ell = 1.0;

    let runs = 1000u64;
    let per_run: Vec<(Vec<f64>, Vec<f64>)> = {
        use rayon::prelude::*;
        (0..runs)
            .into_par_iter()
            .map(|seed| {
                let mut opts = RunOptions::new(Schedule::constant(iters, eta, beta)?, batch, seed);
                opts.x0 = Some(vec![2.0; 5]);
                let mut err = Vec::with_capacity(iters + 1);
                let mut step = Vec::with_capacity(iters + 1);
                let mut prev: Option<Vector> = None;
                let mut obs = |s: &StepView<'_>| -> Result<()> {
                    let v = s.chain.unwrap().v[0].transpose().column(0).into_owned();
                    let full = empirical_gradient(&problem, &data, s.x)?;
                    err.push((v - full).norm_squared());
                    step.push(prev.as_ref().map_or(0.0, |p| (s.x - p).norm_squared()));
                    prev = Some(s.x.clone());
                    Ok(())
                };
                run_observed(OptimizerKind::Storm, &problem, &data, &opts, &mut obs)?;
                Ok((err, step))
            })
            .collect::<Result<Vec<_>>>()?
    };
    let mut worst = f64::NEG_INFINITY;
    let mut all_ok = true;
    for t in (10..=iters).step_by(10) {
        // paired slack per run: lhs − (1−β)·prev − 2ℓ²·step, compared with 2β²σ_J²
        let d: Vec<f64> = per_run
            .iter()
            .map(|(e, s)| e[t] - (1.0 - beta) * e[t - 1] - 2.0 * ell * ell * s[t])
            .collect();
        let (m, se) = mean_and_se(&d);
        let excess = m - 2.0 * beta * beta * sigma_j2;
        let z = excess / se.max(f64::MIN_POSITIVE);
        worst = worst.max(z);
        all_ok &= excess <= 3.0 * se;
    }
    outcome(
        all_ok,
        format!("{runs} runs, 10 sampled t, sigma_J^2 = {sigma_j2:.4}; worst (lhs − rhs)/se = {worst:.2}"),
    )
}

fn c7_sgd_vs_storm() -> Result<Outcome> {
    let seeds: Vec<u64> = (0..10).collect();
    let rep = experiment_sgd_vs_storm(&seeds, &ExperimentSettings::quintic())?;
    let gap = column_f64(&rep.summary, "mean_gap")?;
    let test = column_f64(&rep.summary, "mean_test")?;
    // summary rows: sgd, storm
    outcome(
        gap[1] > gap[0] && test[1] < test[0],
        format!("mean gap sgd {:.4} storm {:.4}; mean test sgd {:.4} storm {:.4}", gap[0], gap[1], test[0], test[1]),
    )
}

fn c8_level_sweep() -> Result<Outcome> {
    let levels: Vec<usize> = (1..=20).collect();
    let seeds: Vec<u64> = (0..5).collect();
    let rep = experiment_level_sweep(&levels, &seeds, &ExperimentSettings::svmr())?;
    let gaps = column_f64(&rep.summary, "mean_gap")?;
    let ks: Vec<f64> = levels.iter().map(|&k| k as f64).collect();
    let rho = spearman(&ks, &gaps)?;
    outcome(rho >= 0.8, format!("spearman(K, gap) = {rho:.3}; gaps {gaps:.3?}"))
}

fn c9_initial_batch() -> Result<Outcome> {
    let seeds: Vec<u64> = (0..10).collect();
    let settings = ExperimentSettings {
        warmup_iters: 5,
        ..ExperimentSettings::svmr()
    };
    let rep = experiment_initial_batch(&[32, 512], &seeds, &settings)?;
    let gaps = column_f64(&rep.rows, "gap")?;
    let (small, large) = gaps.split_at(seeds.len());
    let wins = small.iter().zip(large).filter(|(s, l)| l < s).count();
    outcome(
        wins >= 8,
        format!(
            "gap(512) < gap(32) in {wins}/10 pairs; means {:.4} vs {:.4}",
            mean_and_se(large).0,
            mean_and_se(small).0
        ),
    )
}

fn c10_noise_sweep() -> Result<Outcome> {
    let seeds: Vec<u64> = (0..10).collect();
    let rep = experiment_noise_sweep(&[0.25, 1.0, 3.0], &seeds, &ExperimentSettings::svmr())?;
    let gaps = column_f64(&rep.summary, "mean_gap")?;
    outcome(
        gaps[2] > gaps[1],
        format!(
            "mean gap at 0.25 / 1.0 / 3.0: {:.4} / {:.4} / {:.4} (low-noise comparison reported only)",
            gaps[0], gaps[1], gaps[2]
        ),
    )
}

fn c11_schedules() -> Result<Outcome> {
    let a = schedule_convex(16)?;
    let b = schedule_strongly_convex(64)?;
    let ok = (a.iters, a.eta, a.beta) == (1024, 2f64.powi(-8), 2f64.powi(-8))
        && (b.iters, b.eta, b.beta) == (128, 2f64.powi(-6), 2f64.powi(-6));
    outcome(ok, format!("convex(16) = ({}, {}, {}); strongly_convex(64) = ({}, {}, {})", a.iters, a.eta, a.beta, b.iters, b.eta, b.beta))
}

fn c12_bound() -> Result<Outcome> {
    let k1 = theorem1_bound(&BoundInputs {
        lf: 2.0,
        eps: vec![0.5],
        var: vec![],
        n: vec![100],
    })?;
    let k2 = theorem1_bound(&BoundInputs {
        lf: 1.0,
        eps: vec![0.1, 0.2],
        var: vec![0.04],
        n: vec![4, 4],
    })?;
    let base = BoundInputs {
        lf: 1.7,
        eps: vec![0.3, 0.01, 0.25, 0.4],
        var: vec![0.0; 3],
        n: vec![10, 20, 30, 40],
    };
    let b0 = theorem1_bound(&base)?;
    let mut worst: f64 = 0.0;
    for c in [0.1, 0.5, 3.0, 17.0] {
        let scaled = BoundInputs {
            eps: base.eps.iter().map(|e| c * e).collect(),
            ..base.clone()
        };
        worst = worst.max((theorem1_bound(&scaled)? - c * b0).abs());
    }
    outcome(
        k1 == 2.0 * 0.5 && k2 == 0.7 && worst <= 1e-12,
        format!("K=1 {k1}, K=2 {k2}, homogeneity max dev {worst:.1e}"),
    )
}

fn cli(args: &[&str], out: &Path) -> Result<std::process::ExitStatus> {
    Ok(Command::new(env!("CARGO_BIN_EXE_klvl"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--jobs")
        .arg("2")
        .output()?
        .status)
}

fn only_subdir(dir: &Path) -> Result<std::path::PathBuf> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries.last().expect("the run created an output directory").path())
}

fn c13_determinism() -> Result<Outcome> {
    let commands: [&[&str]; 7] = [
        &["run", "--optimizer", "svmr", "--levels", "3", "--batch", "16", "--eta", "0.01", "--iters", "60", "--lf", "50", "--n", "100", "--log-every", "10"],
        &["stability", "--optimizer", "storm", "--n", "64", "--level", "1", "--position", "3", "--seed-count", "4", "--iters", "50"],
        &["sweep-levels", "--k-min", "1", "--k-max", "3", "--seed-count", "2", "--iters", "30", "--n", "100", "--batch", "16"],
        &["sweep-initial-batch", "--initial-batches", "4,32", "--levels", "3", "--seed-count", "2", "--iters", "30", "--n", "100", "--batch", "16"],
        &["sweep-noise", "--variances", "0.5,2", "--levels", "3", "--seed-count", "2", "--iters", "30", "--n", "100", "--batch", "16"],
        &["compare-sgd-storm", "--seed-count", "2", "--iters", "30"],
        &["check-invariants"],
    ];
    let tmp = tempfile::tempdir()?;
    let mut identical = 0;
    let mut failures = Vec::new();
    for (i, args) in commands.iter().enumerate() {
        let mut bodies = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{i}-{rep}"));
            let status = cli(args, &out)?;
            if !status.success() {
                failures.push(format!("{} exited with {status}", args[0]));
                continue;
            }
            bodies.push(std::fs::read(only_subdir(&out)?.join("rows.csv"))?);
        }
        if bodies.len() == 2 && bodies[0] == bodies[1] && !bodies[0].is_empty() {
            identical += 1;
        } else {
            failures.push(format!("{} rows.csv differs", args[0]));
        }
    }
    outcome(
        identical == commands.len(),
        format!("{identical}/{} subcommands byte-identical {failures:?}", commands.len()),
    )
}

type Criterion = (u32, &'static str, Duration, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 13] = [
        (1, "gradient oracle", Duration::from_secs(10), c1_gradient_oracle),
        (2, "projection invariant", Duration::from_secs(30), c2_projection_invariant),
        (3, "degeneracy ladder", Duration::from_secs(5), c3_degeneracy_ladder),
        (4, "zero-perturbation stability", Duration::from_secs(10), c4_zero_perturbation),
        (5, "stability vs n", Duration::from_secs(120), c5_stability_vs_n),
        (6, "variance recursion", Duration::from_secs(180), c6_variance_recursion),
        (7, "sgd vs storm direction", Duration::from_secs(180), c7_sgd_vs_storm),
        (8, "gap vs levels direction", Duration::from_secs(600), c8_level_sweep),
        (9, "initial batch direction", Duration::from_secs(300), c9_initial_batch),
        (10, "noise sweep shape", Duration::from_secs(300), c10_noise_sweep),
        (11, "schedule calculators", Duration::from_secs(1), c11_schedules),
        (12, "bound evaluator", Duration::from_secs(1), c12_bound),
        (13, "cli determinism", Duration::from_secs(300), c13_determinism),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.strip_prefix("criterion=").and_then(|n| n.parse().ok()))
        .collect();
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && elapsed <= limit, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!(
            "[{}] criterion {id:>2} {name}: {detail} ({:.1}s, limit {}s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
