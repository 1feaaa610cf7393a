//! K-level compositional objectives `F(x) = f_K ∘ ... ∘ f_1(x)`, their sampled
//! datasets, and full-batch evaluation through the chain.

mod generators;
pub mod io;
pub mod levels;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use crate::error::{Error, Result};

pub use generators::{
    make_klevel_synthetic, make_quadratic_problem, make_quintic_problem, KLevelConfig,
    QuadraticConfig, QuinticConfig, QUINTIC_COEFFS,
};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// The decision variable `x ∈ R^{d₀}`.
pub type ParamVector = Vector;

/// Which rows of a level's sample collection to average over.
#[derive(Debug, Clone, Copy)]
pub enum Rows<'a> {
    All,
    Subset(&'a [usize]),
}

impl Rows<'_> {
    pub fn count(&self, n: usize) -> usize {
        match self {
            Rows::All => n,
            Rows::Subset(idx) => idx.len(),
        }
    }

    pub fn for_each(&self, n: usize, mut f: impl FnMut(usize)) {
        match self {
            Rows::All => (0..n).for_each(&mut f),
            Rows::Subset(idx) => idx.iter().copied().for_each(&mut f),
        }
    }
}

/// One level `f_k : R^{d_{k-1}} → R^{d_k}` of the composition, sampled through
/// a per-sample payload (the realization `ν_j^{(k)}`).
///
/// Evaluations must be deterministic in `(sample, y)` and safe to call from
/// several threads at once.
pub trait Level: Send + Sync + fmt::Debug {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    /// Number of `f64`s in one sample payload.
    fn payload_width(&self) -> usize;

    fn value(&self, sample: &[f64], y: &Vector) -> Vector;
    /// Jacobian of `value` w.r.t. `y`, shape `out_dim × in_dim`.
    fn jacobian(&self, sample: &[f64], y: &Vector) -> Matrix;

    /// Draws one fresh payload from the level's generator.
    fn draw(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    /// Value-Lipschitz constant when known in closed form.
    fn lipschitz(&self) -> Option<f64> {
        None
    }

    fn mean_value(&self, samples: &LevelSamples, rows: Rows<'_>, y: &Vector) -> Vector {
        // running mean: exact when every sample agrees
        let mut acc = Vector::zeros(self.out_dim());
        let mut seen = 0.0;
        rows.for_each(samples.len(), |j| {
            seen += 1.0;
            acc += (self.value(samples.row(j), y) - &acc) / seen;
        });
        acc
    }

    fn mean_jacobian(&self, samples: &LevelSamples, rows: Rows<'_>, y: &Vector) -> Matrix {
        let mut acc = Matrix::zeros(self.out_dim(), self.in_dim());
        let mut seen = 0.0;
        rows.for_each(samples.len(), |j| {
            seen += 1.0;
            acc += (self.jacobian(samples.row(j), y) - &acc) / seen;
        });
        acc
    }
}

/// The samples `S_k` of one level, stored row-major with a fixed payload width.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSamples {
    width: usize,
    data: Vec<f64>,
}

impl LevelSamples {
    pub fn new(width: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 && !data.is_empty() {
            return Err(Error::invalid("zero-width payloads cannot carry data"));
        }
        if width > 0 && !data.len().is_multiple_of(width) {
            return Err(Error::invalid(format!(
                "payload buffer of length {} is not a multiple of width {width}",
                data.len()
            )));
        }
        Ok(Self { width, data })
    }

    /// `n` samples with an empty payload, for levels with no randomness.
    pub fn empty_payloads(n: usize) -> Self {
        // width 0 cannot encode a count, so keep one dummy column
        Self {
            width: 1,
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(width: usize, rows: impl IntoIterator<Item = Vec<f64>>) -> Result<Self> {
        let mut data = Vec::new();
        for row in rows {
            if row.len() != width {
                return Err(Error::invalid(format!(
                    "payload has width {} but level expects {width}",
                    row.len()
                )));
            }
            data.extend(row);
        }
        Self::new(width, data)
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.width..(j + 1) * self.width]
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    fn set_row(&mut self, j: usize, payload: &[f64]) {
        self.data[j * self.width..(j + 1) * self.width].copy_from_slice(payload);
    }
}

/// Sample collections `S = ∪_k S_k` for every level.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    levels: Vec<LevelSamples>,
}

impl Dataset {
    pub fn new(seed: u64, levels: Vec<LevelSamples>) -> Self {
        Self { seed, levels }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Samples of level `k` (1-based).
    pub fn level(&self, k: usize) -> &LevelSamples {
        &self.levels[k - 1]
    }

    pub fn levels(&self) -> &[LevelSamples] {
        &self.levels
    }

    /// Sample counts `n_1..n_K`.
    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(LevelSamples::len).collect()
    }

    /// Copy with sample `l` of level `k` (both 1-based) replaced by `payload`.
    pub fn replace(&self, k: usize, l: usize, payload: &[f64]) -> Result<Dataset> {
        self.check_position(k, l)?;
        let level = &self.levels[k - 1];
        if payload.len() != level.width() {
            return Err(Error::invalid(format!(
                "replacement payload has width {} but level {k} stores width {}",
                payload.len(),
                level.width()
            )));
        }
        let mut out = self.clone();
        out.levels[k - 1].set_row(l - 1, payload);
        Ok(out)
    }

    fn check_position(&self, k: usize, l: usize) -> Result<()> {
        if k == 0 || k > self.levels.len() {
            return Err(Error::invalid(format!(
                "level {k} out of range 1..={}",
                self.levels.len()
            )));
        }
        let n = self.levels[k - 1].len();
        if l == 0 || l > n {
            return Err(Error::invalid(format!(
                "position {l} out of range 1..={n} at level {k}"
            )));
        }
        Ok(())
    }
}

/// Constants of the objective used by schedules, projections and bounds.
///
/// `sigma_f` and `sigma_j` are empirical estimates when produced by the
/// generators, not certified bounds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProblemConstants {
    pub lf: f64,
    pub smoothness: f64,
    pub mu: f64,
    pub sigma_f: f64,
    pub sigma_j: f64,
    pub domain_radius: Option<f64>,
    pub dx: Option<f64>,
    /// Two-level constants `L_g, C_f, σ_g, σ_g'` when `K = 2`.
    pub two_level: Option<TwoLevelConstants>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TwoLevelConstants {
    pub lg: f64,
    pub cf: f64,
    pub sigma_g: f64,
    pub sigma_g_prime: f64,
}

impl Default for ProblemConstants {
    fn default() -> Self {
        Self {
            lf: 1.0,
            smoothness: 1.0,
            mu: 0.0,
            sigma_f: 0.0,
            sigma_j: 0.0,
            domain_radius: None,
            dx: None,
            two_level: None,
        }
    }
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lf > 0.0
            && self.smoothness > 0.0
            && self.mu >= 0.0
            && self.sigma_f >= 0.0
            && self.sigma_j >= 0.0
            && self.domain_radius.is_none_or(|r| r > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("inconsistent problem constants: {self:?}")))
        }
    }
}

pub type PopulationFn = Arc<dyn Fn(&Vector) -> f64 + Send + Sync>;

/// Source of the population risk `F(x)`.
#[derive(Clone)]
pub enum Population {
    /// Exact expectation.
    Analytic(PopulationFn),
    /// Held-out samples; `F(x)` is approximated by their nested empirical mean.
    HeldOut(Dataset),
}

impl fmt::Debug for Population {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Population::Analytic(_) => f.write_str("Analytic(..)"),
            Population::HeldOut(d) => f.debug_tuple("HeldOut").field(&d.sizes()).finish(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompositionalProblem {
    levels: Vec<Arc<dyn Level>>,
    pub constants: ProblemConstants,
    population: Option<Population>,
}

impl CompositionalProblem {
    /// Checks that dimensions chain and that the last level is scalar.
    pub fn new(levels: Vec<Arc<dyn Level>>, constants: ProblemConstants) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("a problem needs at least one level"));
        }
        for (k, pair) in levels.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::invalid(format!(
                    "level {} outputs dimension {} but level {} expects {}",
                    k + 1,
                    pair[0].out_dim(),
                    k + 2,
                    pair[1].in_dim()
                )));
            }
        }
        let last = levels.last().expect("nonempty");
        if last.out_dim() != 1 {
            return Err(Error::invalid(format!(
                "final level must be scalar, got output dimension {}",
                last.out_dim()
            )));
        }
        constants.validate()?;
        Ok(Self {
            levels,
            constants,
            population: None,
        })
    }

    pub fn with_population(mut self, population: Population) -> Self {
        self.population = Some(population);
        self
    }

    pub fn population(&self) -> Option<&Population> {
        self.population.as_ref()
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.levels[0].in_dim()
    }

    /// Level `k` (1-based).
    pub fn level(&self, k: usize) -> &Arc<dyn Level> {
        &self.levels[k - 1]
    }

    pub fn levels(&self) -> &[Arc<dyn Level>] {
        &self.levels
    }

    /// `[d₀, d₁, ..., d_K]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.levels.iter().map(|l| l.out_dim()))
            .collect()
    }

    /// Checks that `data` has one sample collection per level with matching
    /// payload widths.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.num_levels() != self.num_levels() {
            return Err(Error::invalid(format!(
                "dataset has {} levels, problem has {}",
                data.num_levels(),
                self.num_levels()
            )));
        }
        for (k, (level, samples)) in self.levels.iter().zip(data.levels()).enumerate() {
            if samples.is_empty() {
                return Err(Error::invalid(format!("level {} has no samples", k + 1)));
            }
            let width = level.payload_width().max(1);
            if samples.width() != width {
                return Err(Error::invalid(format!(
                    "level {} payload width {} does not match the level's {}",
                    k + 1,
                    samples.width(),
                    width
                )));
            }
        }
        Ok(())
    }

    pub fn check_point(&self, x: &Vector) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "point has dimension {} but the problem expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(None, "non-finite entry in the input point"));
        }
        Ok(())
    }
}

pub(crate) fn ensure_finite_vec(v: &Vector, level: usize, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(Some(level), format!("non-finite {what}")))
    }
}

pub(crate) fn ensure_finite_mat(m: &Matrix, level: usize, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(Some(level), format!("non-finite {what}")))
    }
}

/// Nested full-batch means `[y₀ = x, y₁, ..., y_K]`.
pub fn nested_means(problem: &CompositionalProblem, data: &Dataset, x: &Vector) -> Result<Vec<Vector>> {
    problem.check_point(x)?;
    problem.check_dataset(data)?;
    let mut ys = Vec::with_capacity(problem.num_levels() + 1);
    ys.push(x.clone());
    for (k, (level, samples)) in problem.levels.iter().zip(data.levels()).enumerate() {
        let y = level.mean_value(samples, Rows::All, ys.last().expect("nonempty"));
        ensure_finite_vec(&y, k + 1, "level mean")?;
        ys.push(y);
    }
    Ok(ys)
}

/// `F_S(x)`: the nested means pushed through every level.
pub fn empirical_value(problem: &CompositionalProblem, data: &Dataset, x: &Vector) -> Result<f64> {
    let ys = nested_means(problem, data, x)?;
    Ok(ys[problem.num_levels()][0])
}

/// Transposed Jacobian-chain product `(J_K J_{K-1} ⋯ J_1)ᵀ ∈ R^{d₀}`.
///
/// `jacobians[i]` belongs to level `i + 1`; the last one must be a single row.
pub fn chain_product(jacobians: &[Matrix]) -> Result<Vector> {
    let (last, rest) = jacobians
        .split_last()
        .ok_or_else(|| Error::invalid("empty Jacobian chain"))?;
    if last.nrows() != 1 {
        return Err(Error::invalid("the outermost Jacobian must have one row"));
    }
    let mut row = last.clone();
    for (i, j) in rest.iter().enumerate().rev() {
        if row.ncols() != j.nrows() {
            return Err(Error::invalid(format!(
                "Jacobian of level {} has {} rows, expected {}",
                i + 1,
                j.nrows(),
                row.ncols()
            )));
        }
        row = &row * j;
    }
    Ok(row.transpose().column(0).into_owned())
}

/// Full-batch mean Jacobians of every level, each at its nested-mean input.
pub fn mean_jacobians(problem: &CompositionalProblem, data: &Dataset, ys: &[Vector]) -> Result<Vec<Matrix>> {
    problem
        .levels
        .iter()
        .zip(data.levels())
        .enumerate()
        .map(|(k, (level, samples))| {
            let j = level.mean_jacobian(samples, Rows::All, &ys[k]);
            ensure_finite_mat(&j, k + 1, "mean Jacobian")?;
            Ok(j)
        })
        .collect()
}

/// `∇F_S(x)` by the chain rule through the per-level empirical means.
pub fn empirical_gradient(problem: &CompositionalProblem, data: &Dataset, x: &Vector) -> Result<Vector> {
    let ys = nested_means(problem, data, x)?;
    let js = mean_jacobians(problem, data, &ys)?;
    chain_product(&js)
}

/// Population risk: exact when an analytic oracle is attached, otherwise the
/// nested empirical mean on the held-out samples.
pub fn population_value(problem: &CompositionalProblem, x: &Vector) -> Result<f64> {
    match problem.population() {
        Some(Population::Analytic(f)) => {
            problem.check_point(x)?;
            let v = f(x);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::numeric(None, "population oracle returned a non-finite value"))
            }
        }
        Some(Population::HeldOut(test)) => empirical_value(problem, test, x),
        None => Err(Error::Config(
            "problem has neither an analytic population oracle nor a held-out dataset".into(),
        )),
    }
}

/// `S^{l,k}`: a copy of `data` whose sample `l` at level `k` (both 1-based) is
/// redrawn from the level's generator using `rng`.
pub fn neighbor(
    problem: &CompositionalProblem,
    data: &Dataset,
    k: usize,
    l: usize,
    rng: &mut dyn RngCore,
) -> Result<Dataset> {
    data.check_position(k, l)?;
    if k > problem.num_levels() {
        return Err(Error::invalid(format!("level {k} exceeds problem depth")));
    }
    let level = problem.level(k);
    let payload = if level.payload_width() == 0 {
        vec![0.0]
    } else {
        level.draw(rng)
    };
    data.replace(k, l, &payload)
}

/// Central finite differences of `F_S`, one coordinate at a time.
pub fn finite_difference_gradient(
    problem: &CompositionalProblem,
    data: &Dataset,
    x: &Vector,
    h: f64,
) -> Result<Vector> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut grad = Vector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = empirical_value(problem, data, &probe)?;
        probe[i] = x[i] - h;
        let minus = empirical_value(problem, data, &probe)?;
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric(None, "finite-difference gradient is not finite"));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests;
