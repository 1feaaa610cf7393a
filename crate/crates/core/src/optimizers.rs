//! Driver loops for SGD, STORM, COVER and SVMR, iteration schedules, and
//! output averaging.
//!
//! Every run draws its minibatch indices from the keyed streams
//! `(seed, Indices, level, index)` with index 0 reserved for initialization
//! and `t + 1` for iteration `t`. Two runs with the same seed on datasets of
//! the same sizes therefore see identical index sequences.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{draw_batches, frobenius_norm, init_chain, project_ball, storm_update, svmr_step, Batch};
use crate::estimators::{cover_update, EstimatorChain};
use crate::problem::{
    chain_product, empirical_value, ensure_finite_mat, ensure_finite_vec, population_value, CompositionalProblem,
    Dataset, Matrix, ParamVector, Rows, Vector,
};
use crate::report::{fmt_float, fmt_opt, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Storm,
    Cover,
    Svmr,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Storm => "storm",
            OptimizerKind::Cover => "cover",
            OptimizerKind::Svmr => "svmr",
        }
    }

    /// Checks that the method handles a `levels`-level problem.
    pub fn check_levels(self, levels: usize) -> Result<()> {
        let ok = match self {
            OptimizerKind::Storm => levels == 1,
            OptimizerKind::Cover => levels == 2,
            OptimizerKind::Sgd | OptimizerKind::Svmr => levels >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{} cannot run on a {levels}-level problem", self.name())))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Convex,
    StronglyConvex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub iters: usize,
    pub eta: f64,
    pub beta: f64,
    pub regime: Regime,
    pub mu: f64,
    /// `(a, b)` with `η = T^{−a}`, `β = T^{−b}` when derived from a sample count.
    pub exponents: Option<(f64, f64)>,
    /// Momentum before the stability clamp lowered it.
    pub beta_clamped_from: Option<f64>,
    /// Iteration count before a `max_iters` cap.
    pub capped_from: Option<usize>,
}

/// `base^{num/den}` through base-2 logarithms, which keeps powers of two exact.
fn pow_ratio(base: f64, num: i32, den: i32) -> f64 {
    (num as f64 * base.log2() / den as f64).exp2()
}

fn derived(n_max: usize, t_exp: (i32, i32), step_exp: (i32, i32), regime: Regime) -> Result<Schedule> {
    if n_max == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let iters = pow_ratio(n_max as f64, t_exp.0, t_exp.1).round().max(1.0) as usize;
    let rate = pow_ratio(iters as f64, -step_exp.0, step_exp.1).min(1.0);
    let a = step_exp.0 as f64 / step_exp.1 as f64;
    Ok(Schedule {
        iters,
        eta: rate,
        beta: rate,
        regime,
        mu: 0.0,
        exponents: Some((a, a)),
        beta_clamped_from: None,
        capped_from: None,
    })
}

/// Convex schedule: `T = round(n^{5/2})`, `η = β = T^{−4/5}`.
pub fn schedule_convex(n_max: usize) -> Result<Schedule> {
    derived(n_max, (5, 2), (4, 5), Regime::Convex)
}

/// Strongly convex schedule: `T = round(n^{7/6})`, `η = β = T^{−6/7}`.
/// The modulus is attached with [`Schedule::with_mu`].
pub fn schedule_strongly_convex(n_max: usize) -> Result<Schedule> {
    derived(n_max, (7, 6), (6, 7), Regime::StronglyConvex)
}

impl Schedule {
    /// Fixed `T`, `η`, `β` in the convex regime.
    pub fn constant(iters: usize, eta: f64, beta: f64) -> Result<Self> {
        let s = Self {
            iters,
            eta,
            beta,
            regime: Regime::Convex,
            mu: 0.0,
            exponents: None,
            beta_clamped_from: None,
            capped_from: None,
        };
        s.validate()?;
        Ok(s)
    }

    /// Switches to the strongly convex regime with modulus `mu`.
    pub fn with_mu(mut self, mu: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::invalid(format!("strong convexity modulus must be positive, got {mu}")));
        }
        self.regime = Regime::StronglyConvex;
        self.mu = mu;
        Ok(self)
    }

    /// `η = 0` is admitted for degenerate runs.
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::invalid("iteration count must be at least 1"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("step size must be finite and nonnegative, got {}", self.eta)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        match self.regime {
            Regime::Convex if self.mu != 0.0 => Err(Error::invalid("convex regime requires mu = 0")),
            Regime::StronglyConvex if !(self.mu >= 0.0) => Err(Error::invalid("mu must be nonnegative")),
            _ => Ok(()),
        }
    }

    /// Largest momentum admitted by the stability analysis,
    /// `min(1 / (8K Σ_{i=1}^K (2L_f²)^i), 1)`.
    pub fn beta_bound(levels: usize, lf: f64) -> f64 {
        let q = 2.0 * lf * lf;
        let sum: f64 = (1..=levels as i32).map(|i| q.powi(i)).sum();
        (1.0 / (8.0 * levels as f64 * sum)).min(1.0)
    }

    /// Lowers `β` to [`Schedule::beta_bound`] if needed and remembers the
    /// original value.
    pub fn clamp_beta(mut self, levels: usize, lf: f64) -> Self {
        let bound = Self::beta_bound(levels, lf);
        if self.beta > bound {
            self.beta_clamped_from = Some(self.beta);
            self.beta = bound;
        }
        self
    }

    /// Truncates `T` to `max_iters`, recording the original count.
    pub fn cap(mut self, max_iters: usize) -> Self {
        if self.iters > max_iters {
            self.capped_from = Some(self.iters);
            self.iters = max_iters.max(1);
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum AveragingMode {
    Last,
    Uniform,
    /// Weights `(1 − μη/2)^{T−t}`.
    MuWeighted { mu: f64, eta: f64 },
}

impl AveragingMode {
    pub fn name(&self) -> &'static str {
        match self {
            AveragingMode::Last => "last",
            AveragingMode::Uniform => "uniform",
            AveragingMode::MuWeighted { .. } => "mu_weighted",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            AveragingMode::MuWeighted { mu, eta } if !(mu >= 0.0 && eta >= 0.0 && mu * eta < 2.0) => Err(
                Error::invalid(format!("mu-weighted averaging needs 0 ≤ μη < 2, got μ={mu}, η={eta}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Online form of [`average`].
#[derive(Debug, Clone)]
pub struct Averager {
    mode: AveragingMode,
    decay: f64,
    sum: Option<Vector>,
    weight: f64,
}

impl Averager {
    pub fn new(mode: AveragingMode) -> Result<Self> {
        mode.validate()?;
        let decay = match mode {
            AveragingMode::MuWeighted { mu, eta } => 1.0 - mu * eta / 2.0,
            _ => 1.0,
        };
        Ok(Self {
            mode,
            decay,
            sum: None,
            weight: 0.0,
        })
    }

    pub fn push(&mut self, x: &Vector) {
        match (self.mode, self.sum.as_mut()) {
            (_, None) => {
                self.sum = Some(x.clone());
                self.weight = 1.0;
            }
            (AveragingMode::Last, Some(s)) => s.copy_from(x),
            (AveragingMode::Uniform, Some(s)) => {
                *s += x;
                self.weight += 1.0;
            }
            (AveragingMode::MuWeighted { .. }, Some(s)) => {
                // multiplying by exactly 1.0 keeps μ = 0 bit-identical to uniform
                *s *= self.decay;
                *s += x;
                self.weight = self.weight * self.decay + 1.0;
            }
        }
    }

    pub fn result(&self) -> Result<Vector> {
        let s = self.sum.as_ref().ok_or_else(|| Error::invalid("no iterates to average"))?;
        Ok(match self.mode {
            AveragingMode::Last => s.clone(),
            _ => s / self.weight,
        })
    }
}

/// Average of `x_1..x_T` under `mode`.
pub fn average(iterates: &[Vector], mode: AveragingMode) -> Result<Vector> {
    if iterates.is_empty() {
        return Err(Error::invalid("cannot average an empty iterate list"));
    }
    let mut acc = Averager::new(mode)?;
    iterates.iter().for_each(|x| acc.push(x));
    acc.result()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub schedule: Schedule,
    pub batch: usize,
    /// Batch of the initialization draw and of the first `warmup_iters` steps.
    pub initial_batch: usize,
    pub warmup_iters: usize,
    pub seed: u64,
    /// Radius of the Jacobian-estimator projection.
    pub lf: f64,
    /// Starting point; zeros when absent.
    pub x0: Option<Vec<f64>>,
    pub averaging: Vec<AveragingMode>,
    /// Estimator deviations are computed every `log_every` steps; 0 disables.
    pub log_every: usize,
}

impl RunOptions {
    pub fn new(schedule: Schedule, batch: usize, seed: u64) -> Self {
        Self {
            schedule,
            batch,
            initial_batch: 1,
            warmup_iters: 0,
            seed,
            lf: 50.0,
            x0: None,
            averaging: vec![AveragingMode::Last],
            log_every: 0,
        }
    }

    fn validate(&self, data: &Dataset) -> Result<()> {
        self.schedule.validate()?;
        let n_min = data.sizes().into_iter().min().unwrap_or(0);
        for (name, b) in [("batch", self.batch), ("initial batch", self.initial_batch)] {
            if b == 0 || b > n_min {
                return Err(Error::invalid(format!("{name} {b} must lie in 1..={n_min}")));
            }
        }
        if !(self.lf > 0.0) {
            return Err(Error::invalid(format!("projection radius must be positive, got {}", self.lf)));
        }
        if self.averaging.is_empty() {
            return Err(Error::invalid("at least one averaging mode is required"));
        }
        for mode in &self.averaging {
            mode.validate()?;
        }
        Ok(())
    }

    fn batch_at(&self, t: usize) -> usize {
        if t < self.warmup_iters {
            self.initial_batch
        } else {
            self.batch
        }
    }
}

/// One logged iteration. `var_u`/`var_v` hold one entry per level; `None`
/// when the level has no such estimator or the step was not sampled.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub t: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
    pub x_norm: f64,
    pub var_u: Vec<Option<f64>>,
    pub var_v: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Solution {
    pub mode: AveragingMode,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub optimizer: OptimizerKind,
    pub levels: usize,
    pub options: RunOptions,
    /// Rows for `t = 1..T`.
    pub rows: Vec<RunRow>,
    pub final_iterate: Vec<f64>,
    pub solutions: Vec<Solution>,
}

impl RunRecord {
    /// Set when the run used `β = 1`, which only serves degeneracy checks.
    pub fn beta_one(&self) -> bool {
        self.options.schedule.beta == 1.0
    }

    pub fn last_x(&self) -> Vector {
        Vector::from_column_slice(&self.final_iterate)
    }

    pub fn solution(&self, mode: AveragingMode) -> Option<Vector> {
        self.solutions
            .iter()
            .find(|s| s.mode == mode)
            .map(|s| Vector::from_column_slice(&s.x))
    }

    /// Mean of `test_loss − train_loss` over the last `window` rows.
    pub fn tail_gap(&self, window: usize) -> Option<f64> {
        let tail = &self.rows[self.rows.len().saturating_sub(window)..];
        let gaps: Option<Vec<f64>> = tail.iter().map(|r| r.test_loss.map(|te| te - r.train_loss)).collect();
        let gaps = gaps?;
        if gaps.is_empty() {
            None
        } else {
            Some(gaps.iter().sum::<f64>() / gaps.len() as f64)
        }
    }

    pub fn table(&self) -> Table {
        let mut header = vec!["t".to_string(), "train_loss".into(), "test_loss".into(), "x_norm".into()];
        header.extend((1..=self.levels).map(|i| format!("var_u_{i}")));
        header.extend((1..=self.levels).map(|i| format!("var_v_{i}")));
        let mut table = Table::new(header);
        for r in &self.rows {
            let mut row = vec![
                r.t.to_string(),
                fmt_float(r.train_loss),
                fmt_opt(r.test_loss),
                fmt_float(r.x_norm),
            ];
            row.extend(r.var_u.iter().map(|v| fmt_opt(*v)));
            row.extend(r.var_v.iter().map(|v| fmt_opt(*v)));
            table.push(row);
        }
        table
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        self.table().write_csv(w)
    }

    /// Config echo for the CSV sidecar.
    pub fn write_sidecar<W: Write>(&self, w: W) -> Result<()> {
        let echo = serde_json::json!({
            "optimizer": self.optimizer,
            "levels": self.levels,
            "options": self.options,
            "beta_one": self.beta_one(),
            "final_iterate": self.final_iterate,
            "solutions": self.solutions,
        });
        serde_json::to_writer_pretty(w, &echo)?;
        Ok(())
    }
}

/// What an observer sees after initialization (`t = 0`) and after each step.
#[derive(Debug)]
pub struct StepView<'a> {
    pub t: usize,
    pub x: &'a Vector,
    /// Estimator state at `x`; `None` for SGD. STORM exposes only `v`,
    /// COVER only the inner level.
    pub chain: Option<&'a EstimatorChain>,
    /// Batches drawn for this step, one per level.
    pub batches: &'a [Batch],
}

pub trait Observer {
    fn observe(&mut self, step: &StepView<'_>) -> Result<()>;
}

impl<F: FnMut(&StepView<'_>) -> Result<()>> Observer for F {
    fn observe(&mut self, step: &StepView<'_>) -> Result<()> {
        self(step)
    }
}

struct NoObserver;

impl Observer for NoObserver {
    fn observe(&mut self, _: &StepView<'_>) -> Result<()> {
        Ok(())
    }
}

pub fn run_sgd(problem: &CompositionalProblem, data: &Dataset, opts: &RunOptions) -> Result<(ParamVector, RunRecord)> {
    run(OptimizerKind::Sgd, problem, data, opts)
}

pub fn run_storm(problem: &CompositionalProblem, data: &Dataset, opts: &RunOptions) -> Result<(ParamVector, RunRecord)> {
    run(OptimizerKind::Storm, problem, data, opts)
}

pub fn run_cover(problem: &CompositionalProblem, data: &Dataset, opts: &RunOptions) -> Result<(ParamVector, RunRecord)> {
    run(OptimizerKind::Cover, problem, data, opts)
}

pub fn run_svmr(problem: &CompositionalProblem, data: &Dataset, opts: &RunOptions) -> Result<(ParamVector, RunRecord)> {
    run(OptimizerKind::Svmr, problem, data, opts)
}

/// Runs `kind` and returns the solution under the first averaging mode.
pub fn run(
    kind: OptimizerKind,
    problem: &CompositionalProblem,
    data: &Dataset,
    opts: &RunOptions,
) -> Result<(ParamVector, RunRecord)> {
    run_observed(kind, problem, data, opts, &mut NoObserver)
}

/// Method-specific estimator state.
enum State {
    Sgd,
    /// `v` only; `u` stays empty.
    Storm(EstimatorChain),
    /// Inner value and Jacobian estimators.
    Cover(EstimatorChain),
    Svmr(EstimatorChain),
}

impl State {
    fn chain(&self) -> Option<&EstimatorChain> {
        match self {
            State::Sgd => None,
            State::Storm(c) | State::Cover(c) | State::Svmr(c) => Some(c),
        }
    }
}

fn project_domain(problem: &CompositionalProblem, x: Vector) -> Result<Vector> {
    match problem.constants.domain_radius {
        Some(r) => project_ball(&x, r),
        None => Ok(x),
    }
}

fn level_mean(problem: &CompositionalProblem, data: &Dataset, i: usize, batch: &Batch, y: &Vector) -> Result<(Vector, Matrix)> {
    let level = problem.level(i);
    let value = level.mean_value(data.level(i), batch.rows(), y);
    let jac = level.mean_jacobian(data.level(i), batch.rows(), y);
    ensure_finite_vec(&value, i, "minibatch value")?;
    ensure_finite_mat(&jac, i, "minibatch Jacobian")?;
    Ok((value, jac))
}

fn init_state(
    kind: OptimizerKind,
    problem: &CompositionalProblem,
    data: &Dataset,
    x0: &Vector,
    batches: &[Batch],
    lf: f64,
) -> Result<State> {
    Ok(match kind {
        OptimizerKind::Sgd => State::Sgd,
        OptimizerKind::Storm => {
            let (_, jac) = level_mean(problem, data, 1, &batches[0], x0)?;
            State::Storm(EstimatorChain {
                u: Vec::new(),
                v: vec![project_ball(&jac, lf)?],
            })
        }
        OptimizerKind::Cover => {
            let (value, jac) = level_mean(problem, data, 1, &batches[0], x0)?;
            State::Cover(EstimatorChain {
                u: vec![value],
                v: vec![project_ball(&jac, lf)?],
            })
        }
        OptimizerKind::Svmr => State::Svmr(init_chain(problem, data, x0, batches, lf)?),
    })
}

/// Search direction at `x` for the current state. COVER evaluates its outer
/// Jacobian on `batches[1]`.
fn direction(problem: &CompositionalProblem, data: &Dataset, state: &State, x: &Vector, batches: &[Batch]) -> Result<Vector> {
    match state {
        State::Sgd => {
            let mut y = x.clone();
            let mut jacs = Vec::with_capacity(problem.num_levels());
            for (i, batch) in batches.iter().enumerate() {
                let (value, jac) = level_mean(problem, data, i + 1, batch, &y)?;
                jacs.push(jac);
                y = value;
            }
            chain_product(&jacs)
        }
        State::Storm(c) => Ok(c.v[0].row(0).transpose()),
        State::Cover(c) => {
            let (_, outer) = level_mean(problem, data, 2, &batches[1], &c.u[0])?;
            chain_product(&[c.v[0].clone(), outer])
        }
        State::Svmr(c) => c.direction(),
    }
}

#[allow(clippy::too_many_arguments)]
fn advance(
    problem: &CompositionalProblem,
    data: &Dataset,
    state: State,
    x_new: &Vector,
    x_old: &Vector,
    batches: &[Batch],
    beta: f64,
    lf: f64,
) -> Result<State> {
    Ok(match state {
        State::Sgd => State::Sgd,
        State::Storm(c) => {
            let (_, j_new) = level_mean(problem, data, 1, &batches[0], x_new)?;
            let (_, j_old) = level_mean(problem, data, 1, &batches[0], x_old)?;
            State::Storm(EstimatorChain {
                u: Vec::new(),
                v: vec![storm_update(&c.v[0], &j_new, &j_old, beta, lf)?],
            })
        }
        State::Cover(c) => {
            let (g_new, j_new) = level_mean(problem, data, 1, &batches[0], x_new)?;
            let (g_old, j_old) = level_mean(problem, data, 1, &batches[0], x_old)?;
            let (u, v) = cover_update(&c.u[0], &c.v[0], &g_new, &g_old, &j_new, &j_old, beta, lf)?;
            State::Cover(EstimatorChain { u: vec![u], v: vec![v] })
        }
        State::Svmr(c) => State::Svmr(svmr_step(&c, x_new, x_old, problem, data, batches, beta, lf)?),
    })
}

fn deviations(
    problem: &CompositionalProblem,
    data: &Dataset,
    state: &State,
    x: &Vector,
) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let k = problem.num_levels();
    let mut du = vec![None; k];
    let mut dv = vec![None; k];
    match state {
        State::Sgd => {}
        State::Storm(c) => {
            let full = problem.level(1).mean_jacobian(data.level(1), Rows::All, x);
            dv[0] = Some(frobenius_norm(&(&c.v[0] - full)));
        }
        State::Cover(c) => {
            let level = problem.level(1);
            du[0] = Some((&c.u[0] - level.mean_value(data.level(1), Rows::All, x)).norm());
            dv[0] = Some(frobenius_norm(&(&c.v[0] - level.mean_jacobian(data.level(1), Rows::All, x))));
        }
        State::Svmr(c) => {
            let (u, v) = c.deviations(problem, data, x);
            du = u.into_iter().map(Some).collect();
            dv = v.into_iter().map(Some).collect();
        }
    }
    (du, dv)
}

fn at_iteration(iteration: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Run {
        iteration,
        source: Box::new(e),
    }
}

/// [`run`] with a hook called after initialization and after every step.
pub fn run_observed(
    kind: OptimizerKind,
    problem: &CompositionalProblem,
    data: &Dataset,
    opts: &RunOptions,
    observer: &mut dyn Observer,
) -> Result<(ParamVector, RunRecord)> {
    kind.check_levels(problem.num_levels())?;
    problem.check_dataset(data)?;
    opts.validate(data)?;
    let k = problem.num_levels();
    let x0 = match &opts.x0 {
        Some(v) => Vector::from_column_slice(v),
        None => Vector::zeros(problem.input_dim()),
    };
    problem.check_point(&x0)?;
    let x0 = project_domain(problem, x0)?;
    let sizes = data.sizes();
    let Schedule { iters, eta, beta, .. } = opts.schedule;

    let init_batches = draw_batches(opts.seed, 0, &sizes, opts.initial_batch);
    let mut state = init_state(kind, problem, data, &x0, &init_batches, opts.lf).map_err(at_iteration(0))?;
    observer.observe(&StepView {
        t: 0,
        x: &x0,
        chain: state.chain(),
        batches: &init_batches,
    })?;

    let mut averagers = opts
        .averaging
        .iter()
        .map(|m| Averager::new(*m))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(iters);
    let mut x = x0;
    for t in 0..iters {
        let step = |state: State, x: &Vector| -> Result<(State, Vector, Vec<Batch>)> {
            let batches = draw_batches(opts.seed, t as u64 + 1, &sizes, opts.batch_at(t));
            let d = direction(problem, data, &state, x, &batches)?;
            let x_new = project_domain(problem, x - d * eta)?;
            problem.check_point(&x_new)?;
            let state = advance(problem, data, state, &x_new, x, &batches, beta, opts.lf)?;
            Ok((state, x_new, batches))
        };
        let (next, x_new, batches) = step(state, &x).map_err(at_iteration(t + 1))?;
        state = next;
        x = x_new;

        let train_loss = empirical_value(problem, data, &x).map_err(at_iteration(t + 1))?;
        let test_loss = match problem.population() {
            Some(_) => Some(population_value(problem, &x).map_err(at_iteration(t + 1))?),
            None => None,
        };
        let (var_u, var_v) = if opts.log_every > 0 && (t + 1) % opts.log_every == 0 {
            deviations(problem, data, &state, &x)
        } else {
            (vec![None; k], vec![None; k])
        };
        rows.push(RunRow {
            t: t + 1,
            train_loss,
            test_loss,
            x_norm: x.norm(),
            var_u,
            var_v,
        });
        averagers.iter_mut().for_each(|a| a.push(&x));
        observer.observe(&StepView {
            t: t + 1,
            x: &x,
            chain: state.chain(),
            batches: &batches,
        })?;
    }

    let solutions = opts
        .averaging
        .iter()
        .zip(&averagers)
        .map(|(mode, a)| {
            Ok(Solution {
                mode: *mode,
                x: a.result()?.as_slice().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let solution = Vector::from_column_slice(&solutions[0].x);
    let record = RunRecord {
        optimizer: kind,
        levels: k,
        options: opts.clone(),
        rows,
        final_iterate: x.as_slice().to_vec(),
        solutions,
    };
    Ok((solution, record))
}
