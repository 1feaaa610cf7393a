//! Stability and generalization measurements: coupled neighboring-dataset
//! runs, generalization and optimization errors, per-level variances, the
//! generalization bound, and the four synthetic experiments.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizers::{run, run_sgd, run_storm, run_svmr, OptimizerKind, RunOptions, RunRecord, Schedule};
use crate::problem::{
    empirical_gradient, empirical_value, make_klevel_synthetic, make_quintic_problem, nested_means, neighbor,
    population_value, CompositionalProblem, Dataset, KLevelConfig, QuinticConfig, Vector,
};
use crate::report::{fmt_float, fmt_opt, Table};
use crate::rng::{stream, Purpose};

/// Sample mean and standard error (zero for fewer than two values).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // ties share their average rank
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length samples of size ≥ 2"));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::invalid("spearman is undefined for a constant sample"));
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    pub optimizer: OptimizerKind,
    /// Run options shared by both trajectories; `seed` is replaced per seed.
    pub options: RunOptions,
    /// Level `k` of the replaced sample (1-based).
    pub level: usize,
    /// Position `l` of the replaced sample (1-based).
    pub position: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityEstimate {
    pub eps_hat: f64,
    pub std_err: f64,
    pub seeds: Vec<u64>,
    /// `‖x_T − x_T'‖` per seed.
    pub distances: Vec<f64>,
}

/// Runs the optimizer on `data` and on `S^{l,k}` with identical index streams
/// and initialization, once per seed, and averages the last-iterate distance.
///
/// The replacement sample for seed `s` comes from `(s, Neighbor, k, l)`.
pub fn coupled_stability(
    problem: &CompositionalProblem,
    data: &Dataset,
    cfg: &StabilityConfig,
) -> Result<StabilityEstimate> {
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("stability needs at least one seed"));
    }
    cfg.optimizer.check_levels(problem.num_levels())?;
    // surface range errors before spawning work
    neighbor(problem, data, cfg.level, cfg.position, &mut stream(0, Purpose::Neighbor, 0, 0))?;
    let distances = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = stream(seed, Purpose::Neighbor, cfg.level, cfg.position as u64);
            let other = neighbor(problem, data, cfg.level, cfg.position, &mut rng)?;
            let mut opts = cfg.options.clone();
            opts.seed = seed;
            let (_, a) = run(cfg.optimizer, problem, data, &opts)
                .map_err(|e| e.annotate(format!("seed {seed}, original trajectory")))?;
            let (_, b) = run(cfg.optimizer, problem, &other, &opts)
                .map_err(|e| e.annotate(format!("seed {seed}, neighbor trajectory")))?;
            Ok((a.last_x() - b.last_x()).norm())
        })
        .collect::<Result<Vec<f64>>>()?;
    let (eps_hat, std_err) = mean_and_se(&distances);
    Ok(StabilityEstimate {
        eps_hat,
        std_err,
        seeds: cfg.seeds.clone(),
        distances,
    })
}

/// `F(x) − F_S(x)` with the problem's population surrogate.
pub fn generalization_gap(problem: &CompositionalProblem, train: &Dataset, solution: &Vector) -> Result<f64> {
    Ok(population_value(problem, solution)? - empirical_value(problem, train, solution)?)
}

/// Gradient tolerance of the reference minimizer.
pub const ORACLE_TOLERANCE: f64 = 1e-8;

/// Full-batch gradient descent with Armijo backtracking from `start` until
/// `‖∇F_S‖ ≤ 1e−8`.
pub fn reference_minimizer(
    problem: &CompositionalProblem,
    train: &Dataset,
    start: &Vector,
    max_iters: usize,
) -> Result<Vector> {
    let mut x = start.clone();
    let mut fx = empirical_value(problem, train, &x)?;
    let mut step = 1.0;
    for _ in 0..max_iters {
        let g = empirical_gradient(problem, train, &x)?;
        let gn2 = g.norm_squared();
        if gn2.sqrt() <= ORACLE_TOLERANCE {
            return Ok(x);
        }
        step *= 2.0;
        loop {
            let cand = &x - &g * step;
            let fc = empirical_value(problem, train, &cand)?;
            if fc <= fx - 0.5 * step * gn2 {
                x = cand;
                fx = fc;
                break;
            }
            step *= 0.5;
            if step < 1e-300 {
                return Err(Error::OracleNotConverged {
                    grad_norm: gn2.sqrt(),
                    iters: max_iters,
                });
            }
        }
    }
    let grad_norm = empirical_gradient(problem, train, &x)?.norm();
    if grad_norm <= ORACLE_TOLERANCE {
        Ok(x)
    } else {
        Err(Error::OracleNotConverged {
            grad_norm,
            iters: max_iters,
        })
    }
}

/// `F_S(solution) − F_S(x̂_*)`, with `x̂_*` from [`reference_minimizer`]
/// started at `solution`.
pub fn optimization_error(
    problem: &CompositionalProblem,
    train: &Dataset,
    solution: &Vector,
    oracle_iters: usize,
) -> Result<f64> {
    let best = reference_minimizer(problem, train, solution, oracle_iters)?;
    Ok(empirical_value(problem, train, solution)? - empirical_value(problem, train, &best)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Every sample of `S_k`.
    Exhaustive,
    /// Fresh draws from the level generator, keyed `(seed, MonteCarlo, k, i)`.
    MonteCarlo { samples: usize, seed: u64 },
}

/// Spread of the level-`k` per-sample value around its mean, with the input
/// fixed at the nested empirical mean through level `k − 1`:
/// `mean_j ‖f_k^{ν_j}(y_{k−1}) − mean_i f_k^{ν_i}(y_{k−1})‖²`.
pub fn level_variance(
    problem: &CompositionalProblem,
    data: &Dataset,
    x: &Vector,
    k: usize,
    mode: VarianceMode,
) -> Result<f64> {
    if k == 0 || k > problem.num_levels() {
        return Err(Error::invalid(format!("level {k} out of range 1..={}", problem.num_levels())));
    }
    let ys = nested_means(problem, data, x)?;
    let y = &ys[k - 1];
    let level = problem.level(k);
    let values: Vec<Vector> = match mode {
        VarianceMode::Exhaustive => {
            let samples = data.level(k);
            (0..samples.len()).map(|j| level.value(samples.row(j), y)).collect()
        }
        VarianceMode::MonteCarlo { samples, seed } => {
            if samples == 0 {
                return Err(Error::invalid("need at least one Monte-Carlo sample"));
            }
            (0..samples as u64)
                .map(|i| level.value(&level.draw(&mut stream(seed, Purpose::MonteCarlo, k, i)), y))
                .collect()
        }
    };
    // running mean, so identical samples give exactly zero
    let mut mean = Vector::zeros(level.out_dim());
    for (j, v) in values.iter().enumerate() {
        mean += (v - &mean) / (j + 1) as f64;
    }
    Ok(values.iter().map(|v| (v - &mean).norm_squared()).sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub lf: f64,
    /// `ε_1..ε_K`.
    pub eps: Vec<f64>,
    /// `Var_1..Var_{K−1}`.
    pub var: Vec<f64>,
    /// `n_1..n_K`.
    pub n: Vec<usize>,
}

/// `L_f^K ε_K + Σ_{k<K} (4 L_f^K ε_k + L_f √(Var_k / n_k))`.
pub fn theorem1_bound(inputs: &BoundInputs) -> Result<f64> {
    let k = inputs.eps.len();
    if k == 0 {
        return Err(Error::invalid("need at least one stability term"));
    }
    if inputs.var.len() != k - 1 || inputs.n.len() != k {
        return Err(Error::invalid(format!(
            "K = {k} needs {} variances and {k} sample counts, got {} and {}",
            k - 1,
            inputs.var.len(),
            inputs.n.len()
        )));
    }
    let nonneg = inputs.lf >= 0.0 && inputs.eps.iter().chain(&inputs.var).all(|v| *v >= 0.0);
    if !nonneg || inputs.n.contains(&0) {
        return Err(Error::invalid("bound inputs must be nonnegative with positive sample counts"));
    }
    let lk = inputs.lf.powi(k as i32);
    let stab: f64 = inputs.eps[..k - 1].iter().map(|e| 4.0 * lk * e).sum();
    let var: f64 = inputs
        .var
        .iter()
        .zip(&inputs.n)
        .map(|(v, &n)| inputs.lf * (v / n as f64).sqrt())
        .sum();
    Ok(lk * inputs.eps[k - 1] + (stab + var))
}

/// Knobs shared by the experiment drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub eta: f64,
    pub beta: f64,
    pub lf: f64,
    pub batch: usize,
    pub iters: usize,
    /// Number of levels where the experiment fixes it.
    pub levels: usize,
    /// Width of every intermediate level.
    pub width: usize,
    pub n_per_level: usize,
    pub noise_var: f64,
    pub gain: f64,
    pub initial_batch: usize,
    /// Steps after initialization that still use `initial_batch`.
    pub warmup_iters: usize,
    /// Rows averaged for the level-sweep gap.
    pub gap_window: usize,
    /// Seeds per cell for the stability terms of the bound; 0 skips the bound.
    pub bound_seeds: usize,
}

impl ExperimentSettings {
    /// SVMR defaults of the synthetic K-level experiments.
    pub fn svmr() -> Self {
        Self {
            eta: 0.01,
            beta: 0.1,
            lf: 50.0,
            batch: 128,
            iters: 500,
            levels: 10,
            width: 8,
            n_per_level: 1000,
            noise_var: 3.0,
            gain: 0.1,
            initial_batch: 1,
            warmup_iters: 0,
            gap_window: 10,
            bound_seeds: 0,
        }
    }

    /// Defaults of the quintic SGD/STORM comparison.
    pub fn quintic() -> Self {
        Self {
            eta: 0.001,
            batch: 128,
            levels: 1,
            n_per_level: 2000,
            ..Self::svmr()
        }
    }

    pub fn run_options(&self, seed: u64) -> Result<RunOptions> {
        let mut o = RunOptions::new(Schedule::constant(self.iters, self.eta, self.beta)?, self.batch, seed);
        o.lf = self.lf;
        o.initial_batch = self.initial_batch;
        o.warmup_iters = self.warmup_iters;
        Ok(o)
    }

    pub fn klevel_config(&self, levels: usize, noise_var: f64, seed: u64) -> KLevelConfig {
        KLevelConfig {
            dims: vec![self.width; levels],
            n_per_level: self.n_per_level,
            noise_var,
            split: 0.6,
            seed,
            gain: self.gain,
        }
    }
}

/// Per-cell rows, a per-point summary, and optional loss curves.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Table,
    pub summary: Table,
    pub curves: Option<Table>,
}

#[derive(Debug, Clone, PartialEq)]
struct Cell {
    point: String,
    seed: u64,
    train: f64,
    test: f64,
    gap: f64,
    bound: Option<f64>,
}

const ROW_HEADER: [&str; 8] = ["point", "seed", "final_train", "final_test", "gap", "bound", "bound_violated", "flags"];

fn cell_row(c: &Cell, flags: &str) -> Vec<String> {
    vec![
        c.point.clone(),
        c.seed.to_string(),
        fmt_float(c.train),
        fmt_float(c.test),
        fmt_float(c.gap),
        fmt_opt(c.bound),
        c.bound.map(|b| (c.gap > b).to_string()).unwrap_or_default(),
        flags.to_string(),
    ]
}

fn summarize(cells: &[Cell], points: &[String]) -> Table {
    let mut t = Table::new([
        "point",
        "seeds",
        "mean_train",
        "mean_test",
        "mean_gap",
        "se_gap",
        "mean_bound",
        "bound_violations",
    ]);
    for p in points {
        let sel: Vec<&Cell> = cells.iter().filter(|c| &c.point == p).collect();
        let col = |f: fn(&Cell) -> f64| sel.iter().map(|c| f(c)).collect::<Vec<_>>();
        let (gap, se) = mean_and_se(&col(|c| c.gap));
        let bounds: Option<Vec<f64>> = sel.iter().map(|c| c.bound).collect();
        let violations = sel.iter().filter(|c| c.bound.is_some_and(|b| c.gap > b)).count();
        t.push(vec![
            p.clone(),
            sel.len().to_string(),
            fmt_float(mean_and_se(&col(|c| c.train)).0),
            fmt_float(mean_and_se(&col(|c| c.test)).0),
            fmt_float(gap),
            fmt_float(se),
            fmt_opt(bounds.map(|b| mean_and_se(&b).0)),
            if sel.iter().any(|c| c.bound.is_some()) {
                violations.to_string()
            } else {
                String::new()
            },
        ]);
    }
    t
}

/// Bound at `x` with `ε_k` from coupled runs that replace the first sample of
/// each level, and `Var_k` from the training samples.
fn estimate_bound(
    kind: OptimizerKind,
    problem: &CompositionalProblem,
    train: &Dataset,
    opts: &RunOptions,
    x: &Vector,
    seeds: usize,
) -> Result<f64> {
    let k = problem.num_levels();
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| opts.seed.wrapping_add(i)).collect();
    let eps = (1..=k)
        .map(|level| {
            let cfg = StabilityConfig {
                optimizer: kind,
                options: opts.clone(),
                level,
                position: 1,
                seeds: seed_list.clone(),
            };
            coupled_stability(problem, train, &cfg).map(|e| e.eps_hat)
        })
        .collect::<Result<Vec<_>>>()?;
    let var = (1..k)
        .map(|level| level_variance(problem, train, x, level, VarianceMode::Exhaustive))
        .collect::<Result<Vec<_>>>()?;
    theorem1_bound(&BoundInputs {
        lf: problem.constants.lf,
        eps,
        var,
        n: train.sizes(),
    })
}

fn final_losses(rec: &RunRecord) -> (f64, f64) {
    let last = rec.rows.last().expect("at least one iteration");
    (last.train_loss, last.test_loss.unwrap_or(f64::NAN))
}

/// SGD versus STORM on the quintic regression, one dataset per seed.
pub fn experiment_sgd_vs_storm(seeds: &[u64], settings: &ExperimentSettings) -> Result<ExperimentReport> {
    let kinds = [OptimizerKind::Sgd, OptimizerKind::Storm];
    let jobs: Vec<(OptimizerKind, u64)> = kinds.iter().flat_map(|&k| seeds.iter().map(move |&s| (k, s))).collect();
    let results = jobs
        .par_iter()
        .map(|&(kind, seed)| {
            let (problem, train, _) = make_quintic_problem(&QuinticConfig {
                n_points: settings.n_per_level,
                noise_var: settings.noise_var,
                seed,
                ..QuinticConfig::default()
            })?;
            let opts = settings.run_options(seed)?;
            let (_, rec) = match kind {
                OptimizerKind::Sgd => run_sgd(&problem, &train, &opts),
                _ => run_storm(&problem, &train, &opts),
            }
            .map_err(|e| e.annotate(format!("{} seed {seed}", kind.name())))?;
            let (tr, te) = final_losses(&rec);
            let bound = if settings.bound_seeds > 0 {
                Some(estimate_bound(kind, &problem, &train, &opts, &rec.last_x(), settings.bound_seeds)?)
            } else {
                None
            };
            let cell = Cell {
                point: kind.name().to_string(),
                seed,
                train: tr,
                test: te,
                gap: te - tr,
                bound,
            };
            Ok((cell, rec))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Table::new(ROW_HEADER);
    let mut curves = Table::new(["point", "seed", "t", "train_loss", "test_loss"]);
    for (cell, rec) in &results {
        rows.push(cell_row(cell, ""));
        for r in &rec.rows {
            curves.push(vec![
                cell.point.clone(),
                cell.seed.to_string(),
                r.t.to_string(),
                fmt_float(r.train_loss),
                fmt_opt(r.test_loss),
            ]);
        }
    }
    let cells: Vec<Cell> = results.into_iter().map(|(c, _)| c).collect();
    let points: Vec<String> = kinds.iter().map(|k| k.name().to_string()).collect();
    Ok(ExperimentReport {
        rows,
        summary: summarize(&cells, &points),
        curves: Some(curves),
    })
}

/// One SVMR cell on a fresh K-level instance. Returns the cell with the gap
/// measured by `gap_of`.
fn svmr_cell(
    point: String,
    cfg: &KLevelConfig,
    opts: &RunOptions,
    settings: &ExperimentSettings,
    gap_of: impl Fn(&RunRecord) -> f64,
) -> Result<(Cell, String)> {
    let (problem, train, _) = make_klevel_synthetic(cfg)?;
    let (_, rec) = run_svmr(&problem, &train, opts).map_err(|e| e.annotate(format!("point {point} seed {}", opts.seed)))?;
    let (tr, te) = final_losses(&rec);
    let bound = if settings.bound_seeds > 0 {
        Some(estimate_bound(
            OptimizerKind::Svmr,
            &problem,
            &train,
            opts,
            &rec.last_x(),
            settings.bound_seeds,
        )?)
    } else {
        None
    };
    let flags = if rec.options.schedule.beta_clamped_from.is_some() {
        "beta_clamped".to_string()
    } else {
        String::new()
    };
    Ok((
        Cell {
            point,
            seed: opts.seed,
            train: tr,
            test: te,
            gap: gap_of(&rec),
            bound,
        },
        flags,
    ))
}

fn sweep(
    points: Vec<String>,
    seeds: &[u64],
    cell: impl Fn(usize, u64) -> Result<(Cell, String)> + Sync,
) -> Result<ExperimentReport> {
    let jobs: Vec<(usize, u64)> = (0..points.len()).flat_map(|p| seeds.iter().map(move |&s| (p, s))).collect();
    let results = jobs.par_iter().map(|&(p, s)| cell(p, s)).collect::<Result<Vec<_>>>()?;
    let mut rows = Table::new(ROW_HEADER);
    for (c, flags) in &results {
        rows.push(cell_row(c, flags));
    }
    let cells: Vec<Cell> = results.into_iter().map(|(c, _)| c).collect();
    Ok(ExperimentReport {
        rows,
        summary: summarize(&cells, &points),
        curves: None,
    })
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        Err(Error::invalid("need at least one seed"))
    } else {
        Ok(())
    }
}

/// SVMR over a range of depths; the gap is averaged over the last
/// `gap_window` iterations.
pub fn experiment_level_sweep(
    levels: &[usize],
    seeds: &[u64],
    settings: &ExperimentSettings,
) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    if levels.contains(&0) {
        return Err(Error::invalid("level counts must be positive"));
    }
    let points = levels.iter().map(|k| k.to_string()).collect();
    sweep(points, seeds, |p, seed| {
        let k = levels[p];
        let cfg = settings.klevel_config(k, settings.noise_var, seed);
        svmr_cell(k.to_string(), &cfg, &settings.run_options(seed)?, settings, |r| {
            r.tail_gap(settings.gap_window).unwrap_or(f64::NAN)
        })
    })
}

/// SVMR at fixed depth with the initialization batch (and the first
/// `warmup_iters` steps) varied; final-iterate gaps.
pub fn experiment_initial_batch(
    batches: &[usize],
    seeds: &[u64],
    settings: &ExperimentSettings,
) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    let points = batches.iter().map(|b| b.to_string()).collect();
    sweep(points, seeds, |p, seed| {
        let cfg = settings.klevel_config(settings.levels, settings.noise_var, seed);
        let mut opts = settings.run_options(seed)?;
        opts.initial_batch = batches[p];
        svmr_cell(batches[p].to_string(), &cfg, &opts, settings, |r| r.tail_gap(1).unwrap_or(f64::NAN))
    })
}

/// SVMR at fixed depth over a grid of noise variances; final-iterate gaps.
pub fn experiment_noise_sweep(
    variances: &[f64],
    seeds: &[u64],
    settings: &ExperimentSettings,
) -> Result<ExperimentReport> {
    check_seeds(seeds)?;
    let points = variances.iter().map(|v| fmt_float(*v)).collect();
    sweep(points, seeds, |p, seed| {
        let cfg = settings.klevel_config(settings.levels, variances[p], seed);
        svmr_cell(fmt_float(variances[p]), &cfg, &settings.run_options(seed)?, settings, |r| {
            r.tail_gap(1).unwrap_or(f64::NAN)
        })
    })
}

/// Column `name` of `table` parsed as floats (blank cells become NaN).
pub fn column_f64(table: &Table, name: &str) -> Result<Vec<f64>> {
    let c = table
        .column(name)
        .ok_or_else(|| Error::invalid(format!("no column {name}")))?;
    Ok(table.rows.iter().map(|r| r[c].parse().unwrap_or(f64::NAN)).collect())
}
