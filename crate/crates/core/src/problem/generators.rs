//! Synthetic problem generators.
//!
//! All randomness is drawn from keyed streams, so a generator called twice
//! with the same configuration returns bit-identical datasets. Sample `j` of
//! level `k` always comes from the stream `(seed, Data, k, j)`; problems of
//! different depth built from one seed therefore share their per-level
//! samples.

use std::sync::Arc;

use nalgebra::SymmetricEigen;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::levels::{PolynomialResidual, QuadraticHead, SquaredDistance, TanhAffine};
use super::{
    CompositionalProblem, Dataset, Level, LevelSamples, Matrix, Population, ProblemConstants, Vector,
};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Stream level id for the regression head of K-level problems, shared by
/// every depth.
const HEAD_STREAM: usize = 1 << 20;

/// Coefficients of the quintic used by [`make_quintic_problem`], lowest
/// degree first.
pub const QUINTIC_COEFFS: [f64; 6] = [1.0, -2.0, 0.5, 1.5, -0.3, 0.2];

fn split_sizes(n: usize, split: f64) -> Result<(usize, usize)> {
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::invalid(format!("split must lie in (0, 1), got {split}")));
    }
    let train = (split * n as f64).floor() as usize;
    if train == 0 || train == n {
        return Err(Error::invalid(format!(
            "split {split} of {n} points leaves an empty partition"
        )));
    }
    Ok((train, n - train))
}

fn draw_rows(level: &dyn Level, seed: u64, stream_level: usize, range: std::ops::Range<usize>) -> Result<LevelSamples> {
    LevelSamples::from_rows(
        level.payload_width(),
        range.map(|j| level.draw(&mut stream(seed, Purpose::Data, stream_level, j as u64))),
    )
}

fn check_noise(noise_var: f64) -> Result<f64> {
    if noise_var >= 0.0 && noise_var.is_finite() {
        Ok(noise_var.sqrt())
    } else {
        Err(Error::invalid(format!("noise variance must be nonnegative, got {noise_var}")))
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct QuinticConfig {
    pub n_points: usize,
    pub noise_var: f64,
    pub split: f64,
    pub seed: u64,
    /// Inputs are drawn uniformly from `[-t_range, t_range]`.
    pub t_range: f64,
}

impl Default for QuinticConfig {
    fn default() -> Self {
        Self {
            n_points: 2000,
            noise_var: 3.0,
            split: 0.6,
            seed: 0,
            t_range: 2.3,
        }
    }
}

/// One-level polynomial regression: the decision variable holds the six
/// coefficients and each sample is the squared error at one noisy point.
pub fn make_quintic_problem(cfg: &QuinticConfig) -> Result<(CompositionalProblem, Dataset, Dataset)> {
    if cfg.n_points < 2 {
        return Err(Error::invalid("need at least two points"));
    }
    if !(cfg.t_range > 0.0) {
        return Err(Error::invalid("t_range must be positive"));
    }
    let noise_sd = check_noise(cfg.noise_var)?;
    let (n_train, _) = split_sizes(cfg.n_points, cfg.split)?;
    let level = PolynomialResidual {
        truth: QUINTIC_COEFFS.to_vec(),
        t_range: cfg.t_range,
        noise_sd,
    };
    let train = Dataset::new(cfg.seed, vec![draw_rows(&level, cfg.seed, 1, 0..n_train)?]);
    let test = Dataset::new(cfg.seed, vec![draw_rows(&level, cfg.seed, 1, n_train..cfg.n_points)?]);

    // Gram matrix of the training features gives L and μ exactly.
    let p = QUINTIC_COEFFS.len();
    let mut gram = Matrix::zeros(p, p);
    let mut lf: f64 = 0.0;
    let samples = train.level(1);
    for j in 0..samples.len() {
        let phi = Vector::from_iterator(p, level.features(samples.row(j)[0]));
        lf = lf.max(2.0 * phi.norm_squared());
        gram += &phi * phi.transpose();
    }
    gram *= 2.0 / samples.len() as f64;
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let truth = Vector::from_column_slice(&QUINTIC_COEFFS);
    let (sigma_f, sigma_j) = per_sample_spread(&level, samples, &truth);
    let constants = ProblemConstants {
        lf,
        smoothness: eig.max(),
        mu: eig.min().max(0.0),
        sigma_f,
        sigma_j,
        ..ProblemConstants::default()
    };
    let problem = CompositionalProblem::new(vec![Arc::new(level)], constants)?
        .with_population(Population::HeldOut(test.clone()));
    Ok((problem, train, test))
}

/// Root-mean-square spread of per-sample values and Jacobians around their
/// means at `x`.
fn per_sample_spread(level: &dyn Level, samples: &LevelSamples, x: &Vector) -> (f64, f64) {
    let n = samples.len() as f64;
    let values: Vec<Vector> = (0..samples.len()).map(|j| level.value(samples.row(j), x)).collect();
    let jacs: Vec<Matrix> = (0..samples.len()).map(|j| level.jacobian(samples.row(j), x)).collect();
    let vbar = values.iter().fold(Vector::zeros(level.out_dim()), |a, v| a + v) / n;
    let jbar = jacs.iter().fold(Matrix::zeros(level.out_dim(), level.in_dim()), |a, m| a + m) / n;
    let sf = values.iter().map(|v| (v - &vbar).norm_squared()).sum::<f64>() / n;
    let sj = jacs.iter().map(|m| (m - &jbar).norm_squared()).sum::<f64>() / n;
    (sf.sqrt(), sj.sqrt())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct KLevelConfig {
    /// `[d₀, d₁, ..., d_{K-1}]`; the head maps `R^{d_{K-1}}` to a scalar, so
    /// the number of levels is `dims.len()`.
    pub dims: Vec<usize>,
    /// Samples drawn per level before the train/test split.
    pub n_per_level: usize,
    pub noise_var: f64,
    pub split: f64,
    pub seed: u64,
    /// Weight of the tanh term in every intermediate map.
    pub gain: f64,
}

impl KLevelConfig {
    /// `levels` levels with every intermediate dimension equal to `width`.
    pub fn uniform(levels: usize, width: usize, n_per_level: usize, noise_var: f64, seed: u64) -> Self {
        Self {
            dims: vec![width; levels],
            n_per_level,
            noise_var,
            split: 0.6,
            seed,
            gain: 0.1,
        }
    }

    pub fn levels(&self) -> usize {
        self.dims.len()
    }
}

/// `rows × cols` matrix with orthonormal rows or columns (whichever is fewer).
fn semi_orthogonal(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Matrix {
    let tall = rows >= cols;
    let (r, c) = if tall { (rows, cols) } else { (cols, rows) };
    let g = Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    if tall {
        q
    } else {
        q.transpose()
    }
}

/// K-level synthetic problem. Levels `1..K-1` are affine-plus-tanh maps
/// `y ↦ Q_k y + gain·tanh(Q_k y) + ξ` with semi-orthogonal `Q_k` and additive
/// Gaussian noise; level `K` is the regression head `½‖y − c − ζ‖²` whose
/// target `c` is the noiseless chain applied to a hidden point `x*`.
pub fn make_klevel_synthetic(cfg: &KLevelConfig) -> Result<(CompositionalProblem, Dataset, Dataset)> {
    let k_levels = cfg.levels();
    if k_levels == 0 {
        return Err(Error::invalid("need at least one level"));
    }
    if cfg.dims.contains(&0) {
        return Err(Error::invalid("dimensions must be positive"));
    }
    let noise_sd = check_noise(cfg.noise_var)?;
    let (n_train, _) = split_sizes(cfg.n_per_level, cfg.split)?;

    let mut maps: Vec<TanhAffine> = Vec::with_capacity(k_levels - 1);
    for k in 1..k_levels {
        let mut rng = stream(cfg.seed, Purpose::Structure, k, 0);
        let q = semi_orthogonal(cfg.dims[k], cfg.dims[k - 1], &mut rng);
        maps.push(TanhAffine::new(q.clone(), q, cfg.gain, Vector::zeros(cfg.dims[k]), noise_sd));
    }
    let mut rng = stream(cfg.seed, Purpose::Structure, 0, 0);
    let hidden = Vector::from_fn(cfg.dims[0], |_, _| rng.sample::<f64, _>(StandardNormal));
    let target = maps.iter().fold(hidden, |y, m| m.base(&y));
    let head = QuadraticHead { target, noise_sd };

    let mut levels: Vec<Arc<dyn Level>> = maps.into_iter().map(|m| Arc::new(m) as Arc<dyn Level>).collect();
    levels.push(Arc::new(head));

    let mut train_levels = Vec::with_capacity(k_levels);
    let mut test_levels = Vec::with_capacity(k_levels);
    for (k, level) in levels.iter().enumerate() {
        let id = if k + 1 == k_levels { HEAD_STREAM } else { k + 1 };
        train_levels.push(draw_rows(level.as_ref(), cfg.seed, id, 0..n_train)?);
        test_levels.push(draw_rows(level.as_ref(), cfg.seed, id, n_train..cfg.n_per_level)?);
    }
    let train = Dataset::new(cfg.seed, train_levels);
    let test = Dataset::new(cfg.seed, test_levels);

    let lf = levels[..k_levels - 1]
        .iter()
        .filter_map(|l| l.lipschitz())
        .fold(1.0_f64, f64::max);
    let constants = ProblemConstants {
        lf,
        // Gauss-Newton estimate; ignores the curvature of the tanh terms.
        smoothness: lf.powi(2 * (k_levels as i32 - 1)),
        mu: 0.0,
        sigma_f: noise_sd * (cfg.dims[k_levels - 1] as f64).sqrt(),
        sigma_j: 0.0,
        ..ProblemConstants::default()
    };
    let problem = CompositionalProblem::new(levels, constants)?.with_population(Population::HeldOut(test.clone()));
    Ok((problem, train, test))
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct QuadraticConfig {
    pub dim: usize,
    pub n: usize,
    pub noise_sd: f64,
    /// `f_ν(x) = scale·‖x − ν‖²`.
    pub scale: f64,
    pub seed: u64,
}

impl Default for QuadraticConfig {
    fn default() -> Self {
        Self {
            dim: 5,
            n: 64,
            noise_sd: 1.0,
            scale: 0.5,
            seed: 0,
        }
    }
}

/// One-level quadratic `F_S(x) = scale · mean_j ‖x − ν_j‖²` with
/// `ν ~ N(0, noise_sd² I)` and the analytic population risk
/// `scale · (‖x‖² + dim · noise_sd²)`.
///
/// Strongly convex with `μ = L = 2·scale`; the empirical minimizer is the
/// sample mean.
pub fn make_quadratic_problem(cfg: &QuadraticConfig) -> Result<(CompositionalProblem, Dataset)> {
    if cfg.dim == 0 || cfg.n == 0 {
        return Err(Error::invalid("dimension and sample count must be positive"));
    }
    if !(cfg.scale > 0.0) || !(cfg.noise_sd >= 0.0) {
        return Err(Error::invalid("scale must be positive and noise_sd nonnegative"));
    }
    let level = SquaredDistance::new(cfg.dim, cfg.scale, cfg.noise_sd);
    let train = Dataset::new(cfg.seed, vec![draw_rows(&level, cfg.seed, 1, 0..cfg.n)?]);
    let curvature = 2.0 * cfg.scale;
    let constants = ProblemConstants {
        // per-sample gradient Lipschitz constant
        lf: curvature,
        smoothness: curvature,
        mu: curvature,
        sigma_f: 0.0,
        sigma_j: curvature * cfg.noise_sd * (cfg.dim as f64).sqrt(),
        ..ProblemConstants::default()
    };
    let (scale, dim, var) = (cfg.scale, cfg.dim as f64, cfg.noise_sd * cfg.noise_sd);
    let oracle = Arc::new(move |x: &Vector| scale * (x.norm_squared() + dim * var));
    let problem = CompositionalProblem::new(vec![Arc::new(level)], constants)?
        .with_population(Population::Analytic(oracle));
    Ok((problem, train))
}
