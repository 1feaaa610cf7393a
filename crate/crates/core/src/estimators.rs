//! Norm-ball projection and the recursive-momentum estimator updates.
//!
//! A level's sample batch is drawn once per step and used for every
//! evaluation at that level (values and Jacobians, new and old inputs).

use nalgebra::allocator::Allocator;
use nalgebra::{DefaultAllocator, Dim, OMatrix};
use rand::Rng;

use crate::error::{Error, Result};
use crate::problem::{
    chain_product, ensure_finite_mat, ensure_finite_vec, CompositionalProblem, Dataset, Matrix, Rows, Vector,
};
use crate::rng::{stream, Purpose};

/// Frobenius norm (Euclidean norm for vectors).
pub fn frobenius_norm<R: Dim, C: Dim>(m: &OMatrix<f64, R, C>) -> f64
where
    DefaultAllocator: Allocator<R, C>,
{
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Projection onto the Frobenius ball of radius `radius`.
///
/// The output norm, as computed by [`frobenius_norm`], never exceeds
/// `radius`; inputs already inside the ball are returned unchanged, so the
/// projection is idempotent bit for bit.
pub fn project_ball<R: Dim, C: Dim>(m: &OMatrix<f64, R, C>, radius: f64) -> Result<OMatrix<f64, R, C>>
where
    DefaultAllocator: Allocator<R, C>,
{
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("projection radius must be positive, got {radius}")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(None, "non-finite entry passed to projection"));
    }
    let norm = frobenius_norm(m);
    if norm <= radius {
        return Ok(m.clone());
    }
    let mut scale = radius / norm;
    loop {
        let out = m * scale;
        if frobenius_norm(&out) <= radius {
            return Ok(out);
        }
        // rounding pushed us just outside; shrink by one ulp-sized step
        scale *= 1.0 - f64::EPSILON;
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("beta must lie in (0, 1], got {beta}")))
    }
}

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())))
    }
}

/// `Π_{L_f}[new + (1 − β)(v_t − old)]`.
///
/// `grad_new` and `grad_old` must come from the same sample batch.
pub fn storm_update(v_t: &Matrix, grad_new: &Matrix, grad_old: &Matrix, beta: f64, lf: f64) -> Result<Matrix> {
    check_beta(beta)?;
    same_shape(v_t, grad_new, "storm update")?;
    same_shape(v_t, grad_old, "storm update")?;
    project_ball(&(grad_new + (v_t - grad_old) * (1.0 - beta)), lf)
}

/// Unprojected value estimator update `new + (1 − β)(u_t − old)`.
pub fn momentum_value(u_t: &Vector, g_new: &Vector, g_old: &Vector, beta: f64) -> Result<Vector> {
    check_beta(beta)?;
    if u_t.len() != g_new.len() || u_t.len() != g_old.len() {
        return Err(Error::invalid(format!(
            "value update: lengths {}, {}, {} differ",
            u_t.len(),
            g_new.len(),
            g_old.len()
        )));
    }
    Ok(g_new + (u_t - g_old) * (1.0 - beta))
}

/// Joint update of the inner value and Jacobian estimators of the two-level
/// method. Only the Jacobian estimator is projected.
#[allow(clippy::too_many_arguments)]
pub fn cover_update(
    u_t: &Vector,
    v_t: &Matrix,
    g_new: &Vector,
    g_old: &Vector,
    j_new: &Matrix,
    j_old: &Matrix,
    beta: f64,
    lf: f64,
) -> Result<(Vector, Matrix)> {
    let u = momentum_value(u_t, g_new, g_old, beta)?;
    let v = storm_update(v_t, j_new, j_old, beta, lf)?;
    Ok((u, v))
}

/// Row selection for one level at one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Batch {
    /// The whole level dataset.
    All,
    /// Indices drawn uniformly with replacement.
    Indices(Vec<usize>),
}

impl Batch {
    pub fn rows(&self) -> Rows<'_> {
        match self {
            Batch::All => Rows::All,
            Batch::Indices(idx) => Rows::Subset(idx),
        }
    }

    /// Draws `size` indices from `0..n`; a size of at least `n` means the
    /// full dataset.
    pub fn draw(n: usize, size: usize, rng: &mut impl Rng) -> Batch {
        if size >= n {
            Batch::All
        } else {
            Batch::Indices((0..size).map(|_| rng.random_range(0..n)).collect())
        }
    }
}

/// Batches for levels `1..=sizes.len()` at draw `index` of run `seed`.
///
/// Index 0 is the initialization draw and `t + 1` the draw of iteration `t`.
/// Each level has its own stream, so a level's batch does not depend on the
/// batch sizes of other levels.
pub fn draw_batches(seed: u64, index: u64, sizes: &[usize], batch: usize) -> Vec<Batch> {
    sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| Batch::draw(n, batch, &mut stream(seed, Purpose::Indices, k + 1, index)))
        .collect()
}

/// Per-level estimators: `u[i-1] = u^{(i)}` tracks the value of level `i`
/// and `v[i-1] = v^{(i)}` its Jacobian. `u^{(0)}` is the current iterate and
/// is not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorChain {
    pub u: Vec<Vector>,
    pub v: Vec<Matrix>,
}

impl EstimatorChain {
    pub fn levels(&self) -> usize {
        self.v.len()
    }

    /// `(v^{(K)} ⋯ v^{(1)})ᵀ`, the search direction in `R^{d₀}`.
    pub fn direction(&self) -> Result<Vector> {
        chain_product(&self.v)
    }

    /// Input of level `i` (1-based): `x` for the first level, `u^{(i-1)}` after.
    pub fn input<'a>(&'a self, x: &'a Vector, i: usize) -> &'a Vector {
        if i == 1 {
            x
        } else {
            &self.u[i - 2]
        }
    }

    /// Distances `‖u^{(i)} − f_{i,S}(u^{(i-1)})‖` and
    /// `‖v^{(i)} − ∇f_{i,S}(u^{(i-1)})‖_F` for each level, with the
    /// full-batch means taken at the estimator's own input.
    pub fn deviations(
        &self,
        problem: &CompositionalProblem,
        data: &Dataset,
        x: &Vector,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut du = Vec::with_capacity(self.levels());
        let mut dv = Vec::with_capacity(self.levels());
        for i in 1..=self.levels() {
            let level = problem.level(i);
            let input = self.input(x, i);
            let samples = data.level(i);
            du.push((&self.u[i - 1] - level.mean_value(samples, Rows::All, input)).norm());
            dv.push(frobenius_norm(&(&self.v[i - 1] - level.mean_jacobian(samples, Rows::All, input))));
        }
        (du, dv)
    }

    fn check_against(&self, problem: &CompositionalProblem) -> Result<()> {
        let dims = problem.dims();
        if self.u.len() != problem.num_levels() || self.v.len() != problem.num_levels() {
            return Err(Error::invalid(format!(
                "estimator chain has {} levels, problem has {}",
                self.v.len(),
                problem.num_levels()
            )));
        }
        for i in 0..self.v.len() {
            if self.u[i].len() != dims[i + 1] || self.v[i].shape() != (dims[i + 1], dims[i]) {
                return Err(Error::invalid(format!("estimator shapes at level {} do not match", i + 1)));
            }
        }
        Ok(())
    }
}

fn check_batches(problem: &CompositionalProblem, batches: &[Batch]) -> Result<()> {
    if batches.len() != problem.num_levels() {
        return Err(Error::invalid(format!(
            "{} batches for {} levels",
            batches.len(),
            problem.num_levels()
        )));
    }
    Ok(())
}

/// Minibatch means of values and Jacobians along the chain at `x₀`, with each
/// Jacobian projected.
pub fn init_chain(
    problem: &CompositionalProblem,
    data: &Dataset,
    x0: &Vector,
    batches: &[Batch],
    lf: f64,
) -> Result<EstimatorChain> {
    problem.check_point(x0)?;
    problem.check_dataset(data)?;
    check_batches(problem, batches)?;
    let k = problem.num_levels();
    let mut u: Vec<Vector> = Vec::with_capacity(k);
    let mut v = Vec::with_capacity(k);
    for i in 1..=k {
        let level = problem.level(i);
        let input = if i == 1 { x0 } else { &u[i - 2] };
        let rows = batches[i - 1].rows();
        let value = level.mean_value(data.level(i), rows, input);
        let jac = level.mean_jacobian(data.level(i), rows, input);
        ensure_finite_vec(&value, i, "initial value estimate")?;
        ensure_finite_mat(&jac, i, "initial Jacobian estimate")?;
        v.push(project_ball(&jac, lf)?);
        u.push(value);
    }
    Ok(EstimatorChain { u, v })
}

/// One step of the K-level estimator recursion from `(x_old, chain)` to
/// `x_new`. Levels are updated in order; level `i` reads the already-updated
/// `u_{t+1}^{(i-1)}` and the previous `u_t^{(i-1)}`.
#[allow(clippy::too_many_arguments)]
pub fn svmr_step(
    chain: &EstimatorChain,
    x_new: &Vector,
    x_old: &Vector,
    problem: &CompositionalProblem,
    data: &Dataset,
    batches: &[Batch],
    beta: f64,
    lf: f64,
) -> Result<EstimatorChain> {
    chain.check_against(problem)?;
    check_batches(problem, batches)?;
    problem.check_point(x_new)?;
    problem.check_point(x_old)?;
    let k = problem.num_levels();
    let mut u: Vec<Vector> = Vec::with_capacity(k);
    let mut v = Vec::with_capacity(k);
    for i in 1..=k {
        let level = problem.level(i);
        let samples = data.level(i);
        let rows = batches[i - 1].rows();
        let new_in = if i == 1 { x_new } else { &u[i - 2] };
        let old_in = chain.input(x_old, i);
        let g_new = level.mean_value(samples, rows, new_in);
        let g_old = level.mean_value(samples, rows, old_in);
        let j_new = level.mean_jacobian(samples, rows, new_in);
        let j_old = level.mean_jacobian(samples, rows, old_in);
        let ui = momentum_value(&chain.u[i - 1], &g_new, &g_old, beta)?;
        ensure_finite_vec(&ui, i, "value estimate")?;
        ensure_finite_mat(&j_new, i, "Jacobian")?;
        ensure_finite_mat(&j_old, i, "Jacobian")?;
        let vi = storm_update(&chain.v[i - 1], &j_new, &j_old, beta, lf).map_err(|e| match e {
            Error::Numeric { context, .. } => Error::numeric(Some(i), context),
            other => other,
        })?;
        u.push(ui);
        v.push(vi);
    }
    Ok(EstimatorChain { u, v })
}
