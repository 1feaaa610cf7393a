//! Python bindings: problem generators, the four optimizers, coupled
//! stability, schedules and the bound evaluator.

use klvl_core::estimators;
use klvl_core::optimizers::{self, OptimizerKind, RunOptions, Schedule};
use klvl_core::problem::{
    self, CompositionalProblem, Dataset, KLevelConfig, Matrix, QuadraticConfig, QuinticConfig, Vector,
};
use klvl_core::stability_lab::{self, BoundInputs, StabilityConfig};
use klvl_core::{invariants, Error};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::InvalidInput(_) | Error::Config(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn kind(name: &str) -> PyResult<OptimizerKind> {
    match name {
        "sgd" => Ok(OptimizerKind::Sgd),
        "storm" => Ok(OptimizerKind::Storm),
        "cover" => Ok(OptimizerKind::Cover),
        "svmr" => Ok(OptimizerKind::Svmr),
        _ => Err(PyValueError::new_err(format!(
            "unknown optimizer {name:?}; expected sgd, storm, cover or svmr"
        ))),
    }
}

/// A compositional problem together with its training samples and, when the
/// generator provides one, a held-out test split.
#[pyclass(module = "klvl", frozen)]
struct Problem {
    problem: CompositionalProblem,
    train: Dataset,
    test: Option<Dataset>,
}

#[pymethods]
impl Problem {
    #[staticmethod]
    #[pyo3(signature = (dim=5, n=64, noise_sd=1.0, scale=0.5, seed=0))]
    fn quadratic(dim: usize, n: usize, noise_sd: f64, scale: f64, seed: u64) -> PyResult<Self> {
        let (problem, train) = problem::make_quadratic_problem(&QuadraticConfig {
            dim,
            n,
            noise_sd,
            scale,
            seed,
        })
        .map_err(py_err)?;
        Ok(Problem {
            problem,
            train,
            test: None,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (levels, width=8, n_per_level=1000, noise_var=3.0, gain=0.1, seed=0))]
    fn klevel(levels: usize, width: usize, n_per_level: usize, noise_var: f64, gain: f64, seed: u64) -> PyResult<Self> {
        let (problem, train, test) = problem::make_klevel_synthetic(&KLevelConfig {
            dims: vec![width; levels],
            n_per_level,
            noise_var,
            split: 0.6,
            seed,
            gain,
        })
        .map_err(py_err)?;
        Ok(Problem {
            problem,
            train,
            test: Some(test),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (n_points=2000, noise_var=3.0, seed=0))]
    fn quintic(n_points: usize, noise_var: f64, seed: u64) -> PyResult<Self> {
        let (problem, train, test) = problem::make_quintic_problem(&QuinticConfig {
            n_points,
            noise_var,
            seed,
            ..QuinticConfig::default()
        })
        .map_err(py_err)?;
        Ok(Problem {
            problem,
            train,
            test: Some(test),
        })
    }

    #[getter]
    fn num_levels(&self) -> usize {
        self.problem.num_levels()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.problem.input_dim()
    }

    /// Training samples per level.
    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.train.sizes()
    }

    #[getter]
    fn test_sizes(&self) -> Option<Vec<usize>> {
        self.test.as_ref().map(Dataset::sizes)
    }

    /// Empirical risk on the training samples.
    fn value(&self, x: Vec<f64>) -> PyResult<f64> {
        problem::empirical_value(&self.problem, &self.train, &Vector::from_vec(x)).map_err(py_err)
    }

    fn gradient(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let g = problem::empirical_gradient(&self.problem, &self.train, &Vector::from_vec(x)).map_err(py_err)?;
        Ok(g.as_slice().to_vec())
    }

    #[pyo3(signature = (x, h=1e-5))]
    fn finite_difference_gradient(&self, x: Vec<f64>, h: f64) -> PyResult<Vec<f64>> {
        let g = problem::finite_difference_gradient(&self.problem, &self.train, &Vector::from_vec(x), h)
            .map_err(py_err)?;
        Ok(g.as_slice().to_vec())
    }

    /// Population risk surrogate: analytic or held-out.
    fn population_value(&self, x: Vec<f64>) -> PyResult<f64> {
        problem::population_value(&self.problem, &Vector::from_vec(x)).map_err(py_err)
    }

    fn generalization_gap(&self, x: Vec<f64>) -> PyResult<f64> {
        stability_lab::generalization_gap(&self.problem, &self.train, &Vector::from_vec(x)).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(levels={}, input_dim={}, train={:?})",
            self.problem.num_levels(),
            self.problem.input_dim(),
            self.train.sizes()
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn options(
    iters: usize,
    eta: f64,
    beta: f64,
    batch: usize,
    seed: u64,
    lf: f64,
    initial_batch: usize,
    warmup_iters: usize,
    x0: Option<Vec<f64>>,
    log_every: usize,
) -> PyResult<RunOptions> {
    let mut o = RunOptions::new(Schedule::constant(iters, eta, beta).map_err(py_err)?, batch, seed);
    o.lf = lf;
    o.initial_batch = initial_batch;
    o.warmup_iters = warmup_iters;
    o.x0 = x0;
    o.log_every = log_every;
    Ok(o)
}

/// Runs one optimizer. Returns a dict with the final iterate `x` and the
/// per-iteration `train_loss`, `test_loss` and `x_norm` lists.
#[pyfunction]
#[pyo3(signature = (problem, optimizer, iters, eta, beta, batch=1, seed=0, lf=50.0, initial_batch=1, warmup_iters=0, x0=None, log_every=0))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    problem: &Problem,
    optimizer: &str,
    iters: usize,
    eta: f64,
    beta: f64,
    batch: usize,
    seed: u64,
    lf: f64,
    initial_batch: usize,
    warmup_iters: usize,
    x0: Option<Vec<f64>>,
    log_every: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let kind = kind(optimizer)?;
    let opts = options(iters, eta, beta, batch, seed, lf, initial_batch, warmup_iters, x0, log_every)?;
    let (x, rec) = py
        .detach(|| optimizers::run(kind, &problem.problem, &problem.train, &opts))
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("x", x.as_slice().to_vec())?;
    out.set_item("t", rec.rows.iter().map(|r| r.t).collect::<Vec<_>>())?;
    out.set_item("train_loss", rec.rows.iter().map(|r| r.train_loss).collect::<Vec<_>>())?;
    out.set_item("test_loss", rec.rows.iter().map(|r| r.test_loss).collect::<Vec<_>>())?;
    out.set_item("x_norm", rec.rows.iter().map(|r| r.x_norm).collect::<Vec<_>>())?;
    out.set_item("csv", rec.table().to_csv_string().map_err(py_err)?)?;
    Ok(out)
}

/// Coupled-trajectory stability estimate for replacing sample `position` of
/// level `level`. Returns `eps_hat`, `std_err` and per-seed `distances`.
#[pyfunction]
#[pyo3(signature = (problem, optimizer, level, position, seeds, iters, eta, beta, batch=1, lf=50.0))]
#[allow(clippy::too_many_arguments)]
fn stability<'py>(
    py: Python<'py>,
    problem: &Problem,
    optimizer: &str,
    level: usize,
    position: usize,
    seeds: Vec<u64>,
    iters: usize,
    eta: f64,
    beta: f64,
    batch: usize,
    lf: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = StabilityConfig {
        optimizer: kind(optimizer)?,
        options: options(iters, eta, beta, batch, 0, lf, 1, 0, None, 0)?,
        level,
        position,
        seeds,
    };
    let est = py
        .detach(|| stability_lab::coupled_stability(&problem.problem, &problem.train, &cfg))
        .map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("eps_hat", est.eps_hat)?;
    out.set_item("std_err", est.std_err)?;
    out.set_item("distances", est.distances)?;
    Ok(out)
}

/// `(iters, eta, beta)` of the convex schedule for `n_max` samples.
#[pyfunction]
fn schedule_convex(n_max: usize) -> PyResult<(usize, f64, f64)> {
    let s = optimizers::schedule_convex(n_max).map_err(py_err)?;
    Ok((s.iters, s.eta, s.beta))
}

/// `(iters, eta, beta)` of the strongly convex schedule for `n_max` samples.
#[pyfunction]
fn schedule_strongly_convex(n_max: usize) -> PyResult<(usize, f64, f64)> {
    let s = optimizers::schedule_strongly_convex(n_max).map_err(py_err)?;
    Ok((s.iters, s.eta, s.beta))
}

#[pyfunction]
fn theorem1_bound(lf: f64, eps: Vec<f64>, var: Vec<f64>, n: Vec<usize>) -> PyResult<f64> {
    stability_lab::theorem1_bound(&BoundInputs { lf, eps, var, n }).map_err(py_err)
}

/// Frobenius-ball projection of a row-major matrix given as nested lists.
#[pyfunction]
fn project_ball(rows: Vec<Vec<f64>>, radius: f64) -> PyResult<Vec<Vec<f64>>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    let m = Matrix::from_row_iterator(r, c, rows.into_iter().flatten());
    let p = estimators::project_ball(&m, radius).map_err(py_err)?;
    Ok((0..r).map(|i| p.row(i).iter().copied().collect()).collect())
}

/// `(name, passed, detail)` for each built-in property check.
#[pyfunction]
fn check_invariants(py: Python<'_>) -> Vec<(String, bool, String)> {
    py.detach(invariants::run_all)
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pymodule]
fn klvl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(stability, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_convex, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_strongly_convex, m)?)?;
    m.add_function(wrap_pyfunction!(theorem1_bound, m)?)?;
    m.add_function(wrap_pyfunction!(project_ball, m)?)?;
    m.add_function(wrap_pyfunction!(check_invariants, m)?)?;
    Ok(())
}
