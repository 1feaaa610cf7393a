//! The `klvl` command line: flat JSON configs overridden by flags, one output
//! directory per invocation.
//!
//! Exit codes: 0 success, 1 run error, 2 invariant failure, 64 usage or
//! configuration error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::invariants;
use crate::optimizers::{
    run, schedule_convex, schedule_strongly_convex, AveragingMode, OptimizerKind, RunOptions, Schedule,
};
use crate::problem::{
    make_klevel_synthetic, make_quadratic_problem, make_quintic_problem, CompositionalProblem, Dataset,
    KLevelConfig, QuadraticConfig, QuinticConfig, Vector,
};
use crate::report::{fmt_float, fmt_opt, Table};
use crate::stability_lab::{
    coupled_stability, experiment_initial_batch, experiment_level_sweep, experiment_noise_sweep,
    experiment_sgd_vs_storm, generalization_gap, ExperimentReport, ExperimentSettings, StabilityConfig,
};

pub const EXIT_RUN_ERROR: i32 = 1;
pub const EXIT_INVARIANT_FAILURE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Run,
    Stability,
    SweepLevels,
    SweepInitialBatch,
    SweepNoise,
    CompareSgdStorm,
    CheckInvariants,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::Stability => "stability",
            Command::SweepLevels => "sweep-levels",
            Command::SweepInitialBatch => "sweep-initial-batch",
            Command::SweepNoise => "sweep-noise",
            Command::CompareSgdStorm => "compare-sgd-storm",
            Command::CheckInvariants => "check-invariants",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// One-level quadratic with an analytic population risk.
    Quadratic,
    /// Synthetic K-level composition with a held-out test split.
    Klevel,
    /// Quintic polynomial regression.
    Quintic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleSource {
    Convex,
    StronglyConvex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AveragingName {
    Last,
    Uniform,
    MuWeighted,
}

/// Every configurable key. Unset keys are omitted from the JSON form; after
/// [`parse_config`] exactly the keys that apply to the subcommand are set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[arg(skip)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subcommand: Option<Command>,

    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemKind>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    /// Number of levels K.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    /// Width of every intermediate level of the K-level problem.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// Dimension of the quadratic problem.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Samples: training size for the quadratic, points per level before the
    /// train/test split otherwise.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_var: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gain: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    /// Derive T, η, β from the training size instead of --eta/--beta/--iters.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSource>,
    /// Strong convexity modulus; defaults to the problem's.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clamp_beta: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iters: Option<usize>,
    #[arg(long, value_enum, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub averaging: Option<Vec<AveragingName>>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_iters: Option<usize>,
    /// Projection radius L_f.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lf: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_every: Option<usize>,

    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_count: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed_base: Option<u64>,

    /// Level k of the replaced sample.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    /// Position l of the replaced sample.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_min: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_batches: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variances: Option<Vec<f64>>,
    /// Trailing iterations averaged for the level-sweep gap.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_window: Option<usize>,
    /// Seeds per stability term of the bound column; 0 leaves it blank.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound_seeds: Option<usize>,

    /// Parent of the per-invocation output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct Invocation {
    /// Flat JSON file of keys; flags win over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads; KLVL_JOBS overrides. Defaults to the logical cores.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub flags: RunConfig,
}

#[derive(Debug, Parser)]
#[command(name = "klvl", version, about = "Variance-reduced K-level compositional optimizers and stability experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Single optimizer trajectory per seed.
    Run(Invocation),
    /// Coupled neighbor-dataset stability estimate.
    Stability(Invocation),
    /// SVMR generalization gap over a range of depths.
    SweepLevels(Invocation),
    /// SVMR gap for several initial batch sizes.
    SweepInitialBatch(Invocation),
    /// SVMR gap over a grid of noise variances.
    SweepNoise(Invocation),
    /// SGD against STORM on the quintic regression.
    CompareSgdStorm(Invocation),
    /// Property checks of every module.
    CheckInvariants(Invocation),
}

impl Sub {
    fn split(self) -> (Command, Invocation) {
        match self {
            Sub::Run(i) => (Command::Run, i),
            Sub::Stability(i) => (Command::Stability, i),
            Sub::SweepLevels(i) => (Command::SweepLevels, i),
            Sub::SweepInitialBatch(i) => (Command::SweepInitialBatch, i),
            Sub::SweepNoise(i) => (Command::SweepNoise, i),
            Sub::CompareSgdStorm(i) => (Command::CompareSgdStorm, i),
            Sub::CheckInvariants(i) => (Command::CheckInvariants, i),
        }
    }
}

/// Keys `a` sets, in JSON spelling.
fn set_keys(c: &RunConfig) -> Result<BTreeSet<String>> {
    match serde_json::to_value(c)? {
        serde_json::Value::Object(m) => Ok(m.into_iter().map(|(k, _)| k).collect()),
        _ => unreachable!("RunConfig serializes to an object"),
    }
}

/// `over` wins wherever it sets a key.
fn overlay(base: RunConfig, over: RunConfig) -> Result<RunConfig> {
    let mut merged = match serde_json::to_value(base)? {
        serde_json::Value::Object(m) => m,
        _ => unreachable!(),
    };
    if let serde_json::Value::Object(m) = serde_json::to_value(over)? {
        merged.extend(m);
    }
    Ok(serde_json::from_value(serde_json::Value::Object(merged))?)
}

const SETTINGS_KEYS: &[&str] = &[
    "eta",
    "beta",
    "iters",
    "max_iters",
    "batch",
    "initial_batch",
    "warmup_iters",
    "lf",
    "n",
    "noise_var",
    "bound_seeds",
    "seeds",
];
const KLEVEL_KEYS: &[&str] = &["levels", "width", "gain"];

fn applicable(cmd: Command, problem: Option<ProblemKind>) -> Vec<&'static str> {
    let mut keys = vec!["subcommand", "out"];
    let problem_keys: &[&str] = match problem {
        Some(ProblemKind::Quadratic) => &["dim", "n", "noise_var", "data_seed"],
        Some(ProblemKind::Klevel) => &["levels", "width", "n", "noise_var", "gain", "data_seed"],
        Some(ProblemKind::Quintic) => &["n", "noise_var", "data_seed"],
        None => &[],
    };
    match cmd {
        Command::Run | Command::Stability => {
            keys.extend(["problem", "optimizer", "batch", "initial_batch", "warmup_iters", "lf", "max_iters", "seeds"]);
            keys.extend(["eta", "beta", "iters", "schedule", "mu", "clamp_beta"]);
            keys.extend(problem_keys);
            if cmd == Command::Run {
                keys.extend(["averaging", "log_every"]);
            } else {
                keys.extend(["level", "position"]);
            }
        }
        Command::SweepLevels => {
            keys.extend(SETTINGS_KEYS);
            keys.extend(["width", "gain", "k_min", "k_max", "gap_window"]);
        }
        Command::SweepInitialBatch => {
            keys.extend(SETTINGS_KEYS.iter().filter(|&&k| k != "initial_batch"));
            keys.extend(KLEVEL_KEYS);
            keys.push("initial_batches");
        }
        Command::SweepNoise => {
            keys.extend(SETTINGS_KEYS.iter().filter(|&&k| k != "noise_var"));
            keys.extend(KLEVEL_KEYS);
            keys.push("variances");
        }
        Command::CompareSgdStorm => keys.extend(SETTINGS_KEYS),
        Command::CheckInvariants => {}
    }
    keys
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Reads a flat JSON config, rejecting unknown keys by name.
pub fn read_config_file(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).annotate(format!("reading {}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let map = value
        .as_object()
        .ok_or_else(|| config_error(format!("{} must hold a JSON object", path.display())))?;
    let known = set_keys(&everything_set())?;
    let unknown: Vec<&str> = map.keys().map(String::as_str).filter(|k| !known.contains(*k)).collect();
    if !unknown.is_empty() {
        return Err(config_error(format!("unknown keys in {}: {}", path.display(), unknown.join(", "))));
    }
    serde_json::from_value(value).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn everything_set() -> RunConfig {
    RunConfig {
        subcommand: Some(Command::Run),
        problem: Some(ProblemKind::Quadratic),
        optimizer: Some(OptimizerKind::Sgd),
        levels: Some(0),
        width: Some(0),
        dim: Some(0),
        n: Some(0),
        noise_var: Some(0.0),
        gain: Some(0.0),
        data_seed: Some(0),
        eta: Some(0.0),
        beta: Some(0.0),
        iters: Some(0),
        schedule: Some(ScheduleSource::Convex),
        mu: Some(0.0),
        clamp_beta: Some(false),
        max_iters: Some(0),
        averaging: Some(vec![]),
        batch: Some(0),
        initial_batch: Some(0),
        warmup_iters: Some(0),
        lf: Some(0.0),
        log_every: Some(0),
        seeds: Some(vec![]),
        seed_count: Some(0),
        seed_base: Some(0),
        level: Some(0),
        position: Some(0),
        k_min: Some(0),
        k_max: Some(0),
        initial_batches: Some(vec![]),
        variances: Some(vec![]),
        gap_window: Some(0),
        bound_seeds: Some(0),
        out: Some(PathBuf::new()),
    }
}

fn default_problem(cmd: Command) -> Option<ProblemKind> {
    match cmd {
        Command::Run => Some(ProblemKind::Klevel),
        Command::Stability => Some(ProblemKind::Quadratic),
        _ => None,
    }
}

/// Merges `file` and `flags` for `cmd` and fills every applicable default.
/// Parsing the result again yields the same config.
pub fn parse_config(cmd: Command, file: Option<RunConfig>, flags: RunConfig) -> Result<RunConfig> {
    let file = file.unwrap_or_default();
    if let Some(other) = file.subcommand {
        if other != cmd {
            return Err(config_error(format!(
                "config file is for `{}`, not `{}`",
                other.name(),
                cmd.name()
            )));
        }
    }
    let mut c = overlay(file, flags)?;
    c.subcommand = Some(cmd);
    if matches!(cmd, Command::Run | Command::Stability) && c.problem.is_none() {
        c.problem = default_problem(cmd);
    }

    // seed list or count + base
    if c.seeds.is_some() && (c.seed_count.is_some() || c.seed_base.is_some()) {
        return Err(config_error("give either seeds or seed_count/seed_base, not both"));
    }
    if c.seed_count.is_some() || c.seed_base.is_some() {
        let count = c.seed_count.unwrap_or(default_seed_count(cmd));
        let base = c.seed_base.unwrap_or(0);
        c.seeds = Some((0..count).map(|i| base + i).collect());
        c.seed_count = None;
        c.seed_base = None;
    }

    let allowed = applicable(cmd, c.problem);
    let stray: Vec<String> = set_keys(&c)?.into_iter().filter(|k| !allowed.contains(&k.as_str())).collect();
    if !stray.is_empty() {
        return Err(config_error(format!(
            "keys not used by `{}`{}: {}",
            cmd.name(),
            c.problem.map(|p| format!(" on the {p:?} problem").to_lowercase()).unwrap_or_default(),
            stray.join(", ")
        )));
    }
    if c.schedule.is_some() && (c.eta.is_some() || c.beta.is_some() || c.iters.is_some()) {
        return Err(config_error(
            "schedule sources conflict: a derived schedule excludes explicit eta, beta and iters",
        ));
    }
    if c.mu.is_some() && c.schedule != Some(ScheduleSource::StronglyConvex) {
        return Err(config_error("mu only applies to the strongly convex schedule"));
    }
    if matches!(cmd, Command::Run | Command::Stability) && c.optimizer.is_none() {
        return Err(Error::InvalidInput("the following required argument was not provided: --optimizer".into()));
    }
    fill_defaults(cmd, &mut c);
    if c.seeds.as_ref().is_some_and(Vec::is_empty) {
        return Err(config_error("need at least one seed"));
    }
    Ok(c)
}

fn default_seed_count(cmd: Command) -> u64 {
    match cmd {
        Command::Run => 1,
        Command::SweepLevels => 5,
        _ => 10,
    }
}

fn fill_defaults(cmd: Command, c: &mut RunConfig) {
    fn set<T>(slot: &mut Option<T>, v: T) {
        slot.get_or_insert(v);
    }
    set(&mut c.out, PathBuf::from("runs"));
    if cmd == Command::CheckInvariants {
        return;
    }
    set(&mut c.seeds, (0..default_seed_count(cmd)).collect());
    let base = match cmd {
        Command::CompareSgdStorm => ExperimentSettings::quintic(),
        _ => ExperimentSettings::svmr(),
    };
    let explicit = c.schedule.is_none();
    if explicit {
        set(&mut c.eta, base.eta);
        set(&mut c.beta, base.beta);
        set(
            &mut c.iters,
            if cmd == Command::Stability && c.problem == Some(ProblemKind::Quadratic) { 256 } else { base.iters },
        );
    }
    set(&mut c.lf, base.lf);
    if cmd == Command::SweepInitialBatch {
        set(&mut c.warmup_iters, 5);
    }
    set(&mut c.warmup_iters, base.warmup_iters);

    match cmd {
        Command::Run | Command::Stability => {
            let problem = c.problem.expect("set above");
            set(&mut c.data_seed, 0);
            match problem {
                ProblemKind::Quadratic => {
                    let q = QuadraticConfig::default();
                    set(&mut c.dim, q.dim);
                    set(&mut c.n, q.n);
                    set(&mut c.noise_var, q.noise_sd * q.noise_sd);
                    set(&mut c.batch, 1);
                }
                ProblemKind::Klevel => {
                    set(&mut c.levels, base.levels);
                    set(&mut c.width, base.width);
                    set(&mut c.n, base.n_per_level);
                    set(&mut c.noise_var, base.noise_var);
                    set(&mut c.gain, base.gain);
                    set(&mut c.batch, base.batch);
                }
                ProblemKind::Quintic => {
                    let q = QuinticConfig::default();
                    set(&mut c.n, q.n_points);
                    set(&mut c.noise_var, q.noise_var);
                    set(&mut c.batch, base.batch);
                }
            }
            set(&mut c.initial_batch, base.initial_batch);
            set(&mut c.clamp_beta, false);
            if cmd == Command::Run {
                set(&mut c.averaging, vec![AveragingName::Last]);
                set(&mut c.log_every, 0);
            } else {
                set(&mut c.level, 1);
                set(&mut c.position, 1);
            }
        }
        _ => {
            set(&mut c.bound_seeds, base.bound_seeds);
            set(&mut c.batch, base.batch);
            set(&mut c.n, base.n_per_level);
            if cmd != Command::SweepNoise {
                set(&mut c.noise_var, base.noise_var);
            }
            if cmd != Command::SweepInitialBatch {
                set(&mut c.initial_batch, base.initial_batch);
            }
            if cmd != Command::CompareSgdStorm {
                set(&mut c.width, base.width);
                set(&mut c.gain, base.gain);
            }
            match cmd {
                Command::SweepLevels => {
                    set(&mut c.k_min, 1);
                    set(&mut c.k_max, 20);
                    set(&mut c.gap_window, base.gap_window);
                }
                Command::SweepInitialBatch => {
                    set(&mut c.levels, base.levels);
                    set(&mut c.initial_batches, vec![32, 64, 128, 256, 512]);
                }
                Command::SweepNoise => {
                    set(&mut c.levels, base.levels);
                    set(&mut c.variances, (1..=30).map(|i| i as f64 / 10.0).collect());
                }
                _ => {}
            }
        }
    }
}

fn settings(c: &RunConfig) -> ExperimentSettings {
    let base = if c.subcommand == Some(Command::CompareSgdStorm) {
        ExperimentSettings::quintic()
    } else {
        ExperimentSettings::svmr()
    };
    let iters = c.iters.unwrap_or(base.iters);
    ExperimentSettings {
        eta: c.eta.unwrap_or(base.eta),
        beta: c.beta.unwrap_or(base.beta),
        lf: c.lf.unwrap_or(base.lf),
        batch: c.batch.unwrap_or(base.batch),
        iters: c.max_iters.map_or(iters, |m| iters.min(m.max(1))),
        levels: c.levels.unwrap_or(base.levels),
        width: c.width.unwrap_or(base.width),
        n_per_level: c.n.unwrap_or(base.n_per_level),
        noise_var: c.noise_var.unwrap_or(base.noise_var),
        gain: c.gain.unwrap_or(base.gain),
        initial_batch: c.initial_batch.unwrap_or(base.initial_batch),
        warmup_iters: c.warmup_iters.unwrap_or(base.warmup_iters),
        gap_window: c.gap_window.unwrap_or(base.gap_window),
        bound_seeds: c.bound_seeds.unwrap_or(base.bound_seeds),
    }
}

/// Builds the problem of a `run`/`stability` config: (problem, train, test).
pub fn build_problem(c: &RunConfig) -> Result<(CompositionalProblem, Dataset, Option<Dataset>)> {
    let seed = c.data_seed.unwrap_or(0);
    let n = c.n.unwrap_or(0);
    let noise = c.noise_var.unwrap_or(0.0);
    match c.problem {
        Some(ProblemKind::Quadratic) => {
            let (p, train) = make_quadratic_problem(&QuadraticConfig {
                dim: c.dim.unwrap_or(5),
                n,
                noise_sd: noise.sqrt(),
                seed,
                ..QuadraticConfig::default()
            })?;
            Ok((p, train, None))
        }
        Some(ProblemKind::Klevel) => {
            let (p, train, test) = make_klevel_synthetic(&KLevelConfig {
                dims: vec![c.width.unwrap_or(8); c.levels.unwrap_or(1)],
                n_per_level: n,
                noise_var: noise,
                split: 0.6,
                seed,
                gain: c.gain.unwrap_or(0.1),
            })?;
            Ok((p, train, Some(test)))
        }
        Some(ProblemKind::Quintic) => {
            let (p, train, test) = make_quintic_problem(&QuinticConfig {
                n_points: n,
                noise_var: noise,
                seed,
                ..QuinticConfig::default()
            })?;
            Ok((p, train, Some(test)))
        }
        None => Err(config_error("no problem selected")),
    }
}

/// Run options for `seed` under a `run`/`stability` config.
pub fn run_options(c: &RunConfig, problem: &CompositionalProblem, train: &Dataset, seed: u64) -> Result<RunOptions> {
    let n_max = train.sizes().into_iter().max().unwrap_or(0);
    let mut schedule = match c.schedule {
        None => Schedule::constant(c.iters.unwrap_or(1), c.eta.unwrap_or(0.0), c.beta.unwrap_or(1.0))?,
        Some(ScheduleSource::Convex) => schedule_convex(n_max)?,
        Some(ScheduleSource::StronglyConvex) => {
            let mu = c.mu.unwrap_or(problem.constants.mu);
            schedule_strongly_convex(n_max)?.with_mu(mu)?
        }
    };
    let lf = c.lf.unwrap_or(50.0);
    if c.clamp_beta == Some(true) {
        schedule = schedule.clamp_beta(problem.num_levels(), lf);
    }
    if let Some(m) = c.max_iters {
        schedule = schedule.cap(m);
    }
    let averaging = c
        .averaging
        .clone()
        .unwrap_or_else(|| vec![AveragingName::Last])
        .into_iter()
        .map(|a| match a {
            AveragingName::Last => AveragingMode::Last,
            AveragingName::Uniform => AveragingMode::Uniform,
            AveragingName::MuWeighted => AveragingMode::MuWeighted {
                mu: schedule.mu,
                eta: schedule.eta,
            },
        })
        .collect();
    let mut o = RunOptions::new(schedule, c.batch.unwrap_or(1), seed);
    o.initial_batch = c.initial_batch.unwrap_or(1);
    o.warmup_iters = c.warmup_iters.unwrap_or(0);
    o.lf = lf;
    o.averaging = averaging;
    o.log_every = c.log_every.unwrap_or(0);
    Ok(o)
}

/// Tables produced by one subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub rows: Table,
    pub summary: Table,
    pub extra: Vec<(&'static str, Table)>,
    /// Set when `check-invariants` found a failure.
    pub invariant_failure: bool,
}

impl Output {
    fn from_report(r: ExperimentReport) -> Self {
        Output {
            rows: r.rows,
            summary: r.summary,
            extra: r.curves.map(|c| vec![("curves.csv", c)]).unwrap_or_default(),
            invariant_failure: false,
        }
    }
}

fn prefixed(seed: u64, mut t: Table) -> Table {
    t.header.insert(0, "seed".into());
    for r in &mut t.rows {
        r.insert(0, seed.to_string());
    }
    t
}

/// Executes a parsed config.
pub fn dispatch(c: &RunConfig) -> Result<Output> {
    let cmd = c.subcommand.ok_or_else(|| config_error("config has no subcommand"))?;
    let seeds = c.seeds.clone().unwrap_or_default();
    match cmd {
        Command::Run => {
            let (problem, train, _) = build_problem(c)?;
            let kind = c.optimizer.expect("parse_config requires it");
            let mut rows = Table::default();
            let mut summary = Table::new([
                "seed",
                "optimizer",
                "iters",
                "eta",
                "beta",
                "final_train",
                "final_test",
                "gap",
                "beta_clamped_from",
                "capped_from",
            ]);
            let mut solutions = Table::new(["seed", "mode", "train", "gap", "x"]);
            for &seed in &seeds {
                let opts = run_options(c, &problem, &train, seed)?;
                let (_, rec) = run(kind, &problem, &train, &opts).map_err(|e| e.annotate(format!("seed {seed}")))?;
                let last = rec.rows.last().expect("at least one row");
                let table = prefixed(seed, rec.table());
                if rows.header.is_empty() {
                    rows.header = table.header.clone();
                }
                rows.rows.extend(table.rows);
                let s = &rec.options.schedule;
                summary.push(vec![
                    seed.to_string(),
                    kind.name().into(),
                    s.iters.to_string(),
                    fmt_float(s.eta),
                    fmt_float(s.beta),
                    fmt_float(last.train_loss),
                    fmt_opt(last.test_loss),
                    fmt_float(generalization_gap(&problem, &train, &rec.last_x())?),
                    fmt_opt(s.beta_clamped_from),
                    s.capped_from.map(|t| t.to_string()).unwrap_or_default(),
                ]);
                for sol in &rec.solutions {
                    let x = Vector::from_column_slice(&sol.x);
                    solutions.push(vec![
                        seed.to_string(),
                        sol.mode.name().into(),
                        fmt_float(crate::problem::empirical_value(&problem, &train, &x)?),
                        fmt_float(generalization_gap(&problem, &train, &x)?),
                        sol.x.iter().map(|v| fmt_float(*v)).collect::<Vec<_>>().join(" "),
                    ]);
                }
            }
            Ok(Output {
                rows,
                summary,
                extra: vec![("solutions.csv", solutions)],
                invariant_failure: false,
            })
        }
        Command::Stability => {
            let (problem, train, _) = build_problem(c)?;
            let kind = c.optimizer.expect("parse_config requires it");
            let cfg = StabilityConfig {
                optimizer: kind,
                options: run_options(c, &problem, &train, 0)?,
                level: c.level.unwrap_or(1),
                position: c.position.unwrap_or(1),
                seeds,
            };
            let est = coupled_stability(&problem, &train, &cfg)?;
            let mut rows = Table::new(["seed", "distance"]);
            for (s, d) in est.seeds.iter().zip(&est.distances) {
                rows.push(vec![s.to_string(), fmt_float(*d)]);
            }
            let mut summary = Table::new(["optimizer", "level", "position", "seeds", "eps_hat", "std_err"]);
            summary.push(vec![
                kind.name().into(),
                cfg.level.to_string(),
                cfg.position.to_string(),
                est.seeds.len().to_string(),
                fmt_float(est.eps_hat),
                fmt_float(est.std_err),
            ]);
            Ok(Output {
                rows,
                summary,
                extra: vec![],
                invariant_failure: false,
            })
        }
        Command::SweepLevels => {
            let (lo, hi) = (c.k_min.unwrap_or(1), c.k_max.unwrap_or(1));
            if lo == 0 || lo > hi {
                return Err(config_error(format!("need 1 <= k_min <= k_max, got {lo} and {hi}")));
            }
            let levels: Vec<usize> = (lo..=hi).collect();
            experiment_level_sweep(&levels, &seeds, &settings(c)).map(Output::from_report)
        }
        Command::SweepInitialBatch => {
            let batches = c.initial_batches.clone().unwrap_or_default();
            experiment_initial_batch(&batches, &seeds, &settings(c)).map(Output::from_report)
        }
        Command::SweepNoise => {
            let variances = c.variances.clone().unwrap_or_default();
            experiment_noise_sweep(&variances, &seeds, &settings(c)).map(Output::from_report)
        }
        Command::CompareSgdStorm => experiment_sgd_vs_storm(&seeds, &settings(c)).map(Output::from_report),
        Command::CheckInvariants => {
            let checks = invariants::run_all();
            let mut rows = Table::new(["check", "passed", "detail"]);
            for ch in &checks {
                rows.push(vec![ch.name.into(), ch.passed.to_string(), ch.detail.clone()]);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            let mut summary = Table::new(["checks", "failed"]);
            summary.push(vec![checks.len().to_string(), failed.to_string()]);
            Ok(Output {
                rows,
                summary,
                extra: vec![],
                invariant_failure: failed > 0,
            })
        }
    }
}

/// Creates `<out>/<subcommand>-<timestamp>/`, adding a suffix on collision.
fn output_dir(out: &Path, cmd: Command, stamp: &chrono::DateTime<chrono::Utc>) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    let base = format!("{}-{}", cmd.name(), stamp.format("%Y%m%dT%H%M%S%.3fZ"));
    for i in 0.. {
        let name = if i == 0 { base.clone() } else { format!("{base}-{i}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

fn write_table(dir: &Path, name: &str, t: &Table) -> Result<()> {
    t.write_csv(fs::File::create(dir.join(name))?)
}

fn jobs(requested: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("KLVL_JOBS") {
        Ok(v) => v
            .parse()
            .map(Some)
            .map_err(|_| config_error(format!("KLVL_JOBS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(requested),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (cmd, inv) = cli.command.split();
    let config = inv
        .config
        .as_deref()
        .map(read_config_file)
        .transpose()
        .and_then(|file| parse_config(cmd, file, inv.flags));
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let threads = match jobs(inv.jobs) {
        Ok(j) => j,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| execute(&config, threads)) {
        Ok((dir, failed)) => {
            println!("{}", dir.display());
            if failed {
                eprintln!("invariant check failed; see {}", dir.join("rows.csv").display());
                EXIT_INVARIANT_FAILURE
            } else {
                0
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUN_ERROR
        }
    }
}

/// Runs `config` and writes its directory; returns the directory and whether
/// an invariant failed.
pub fn execute(config: &RunConfig, threads: Option<usize>) -> Result<(PathBuf, bool)> {
    let cmd = config.subcommand.ok_or_else(|| config_error("config has no subcommand"))?;
    let started = chrono::Utc::now();
    let dir = output_dir(config.out.as_deref().unwrap_or(Path::new("runs")), cmd, &started)?;
    serde_json::to_writer_pretty(fs::File::create(dir.join("config.json"))?, config)?;
    let result = dispatch(config);
    let finished = chrono::Utc::now();
    let meta = serde_json::json!({
        "started": started.to_rfc3339(),
        "finished": finished.to_rfc3339(),
        "version": env!("CARGO_PKG_VERSION"),
        "jobs": threads.unwrap_or_else(rayon::current_num_threads),
        "status": match &result {
            Ok(o) if o.invariant_failure => "invariant_failure".to_string(),
            Ok(_) => "ok".to_string(),
            Err(e) => format!("error: {e}"),
        },
    });
    serde_json::to_writer_pretty(fs::File::create(dir.join("metadata.json"))?, &meta)?;
    let out = result?;
    write_table(&dir, "rows.csv", &out.rows)?;
    write_table(&dir, "summary.csv", &out.summary)?;
    for (name, t) in &out.extra {
        write_table(&dir, name, t)?;
    }
    Ok((dir, out.invariant_failure))
}
