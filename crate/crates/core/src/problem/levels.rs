//! Concrete level families used by the generators and tests.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::{Level, LevelSamples, Matrix, Rows, Vector};

fn gaussian(rng: &mut dyn RngCore, dim: usize, sd: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            sd * z
        })
        .collect()
}

fn spectral_norm(m: &Matrix) -> f64 {
    m.clone().singular_values().max()
}

/// `f_ν(x) = scale · ‖x − ν‖²` with `ν ~ N(center, noise_sd² I)`.
#[derive(Debug, Clone)]
pub struct SquaredDistance {
    pub scale: f64,
    pub center: Vector,
    pub noise_sd: f64,
}

impl SquaredDistance {
    pub fn new(dim: usize, scale: f64, noise_sd: f64) -> Self {
        Self {
            scale,
            center: Vector::zeros(dim),
            noise_sd,
        }
    }
}

impl Level for SquaredDistance {
    fn in_dim(&self) -> usize {
        self.center.len()
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn payload_width(&self) -> usize {
        self.center.len()
    }
    fn value(&self, sample: &[f64], y: &Vector) -> Vector {
        let sq: f64 = y.iter().zip(sample).map(|(a, b)| (a - b) * (a - b)).sum();
        Vector::from_element(1, self.scale * sq)
    }
    fn jacobian(&self, sample: &[f64], y: &Vector) -> Matrix {
        Matrix::from_iterator(
            1,
            y.len(),
            y.iter().zip(sample).map(|(a, b)| 2.0 * self.scale * (a - b)),
        )
    }
    fn draw(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        gaussian(rng, self.center.len(), self.noise_sd)
            .into_iter()
            .zip(self.center.iter())
            .map(|(z, c)| c + z)
            .collect()
    }
}

/// `g_ω(x) = x + ω` with `ω ~ N(0, noise_sd² I)`.
#[derive(Debug, Clone)]
pub struct Shift {
    pub dim: usize,
    pub noise_sd: f64,
}

impl Level for Shift {
    fn in_dim(&self) -> usize {
        self.dim
    }
    fn out_dim(&self) -> usize {
        self.dim
    }
    fn payload_width(&self) -> usize {
        self.dim
    }
    fn value(&self, sample: &[f64], y: &Vector) -> Vector {
        y + Vector::from_column_slice(sample)
    }
    fn jacobian(&self, _sample: &[f64], _y: &Vector) -> Matrix {
        Matrix::identity(self.dim, self.dim)
    }
    fn draw(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        gaussian(rng, self.dim, self.noise_sd)
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// Squared residual of a polynomial fit at one noisy point `(t, y)`:
/// `f(x) = (Σ_i x_i tⁱ − y)²` where `x` holds the coefficients.
///
/// Points are drawn as `t ~ U[−t_range, t_range]`, `y = p(t) + N(0, noise_sd²)`
/// with `p` given by `truth`.
#[derive(Debug, Clone)]
pub struct PolynomialResidual {
    pub truth: Vec<f64>,
    pub t_range: f64,
    pub noise_sd: f64,
}

impl PolynomialResidual {
    pub fn features(&self, t: f64) -> impl Iterator<Item = f64> + '_ {
        (0..self.truth.len()).scan(1.0, move |p, _| {
            let cur = *p;
            *p *= t;
            Some(cur)
        })
    }

    fn residual(&self, sample: &[f64], x: &Vector) -> f64 {
        self.features(sample[0]).zip(x.iter()).map(|(f, c)| f * c).sum::<f64>() - sample[1]
    }
}

impl Level for PolynomialResidual {
    fn in_dim(&self) -> usize {
        self.truth.len()
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn payload_width(&self) -> usize {
        2
    }
    fn value(&self, sample: &[f64], x: &Vector) -> Vector {
        let r = self.residual(sample, x);
        Vector::from_element(1, r * r)
    }
    fn jacobian(&self, sample: &[f64], x: &Vector) -> Matrix {
        let r = self.residual(sample, x);
        Matrix::from_iterator(1, self.truth.len(), self.features(sample[0]).map(|f| 2.0 * r * f))
    }
    fn draw(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let t = rng.random_range(-self.t_range..=self.t_range);
        let z: f64 = rng.sample(StandardNormal);
        let clean: f64 = self.features(t).zip(&self.truth).map(|(f, c)| f * c).sum();
        vec![t, clean + self.noise_sd * z]
    }
}

/// Affine-plus-tanh map with additive noise:
/// `f_ξ(y) = A y + gain · tanh(B y) + bias + ξ`, `ξ ~ N(0, noise_sd² I)`.
///
/// The Jacobian does not depend on the sample, and the minibatch mean of the
/// values is the base map plus the mean noise.
#[derive(Debug, Clone)]
pub struct TanhAffine {
    pub linear: Matrix,
    pub inner: Matrix,
    pub gain: f64,
    pub bias: Vector,
    pub noise_sd: f64,
    lipschitz: f64,
}

impl TanhAffine {
    pub fn new(linear: Matrix, inner: Matrix, gain: f64, bias: Vector, noise_sd: f64) -> Self {
        assert_eq!(linear.shape(), inner.shape(), "A and B must have the same shape");
        assert_eq!(linear.nrows(), bias.len(), "bias length must match the output dimension");
        let lipschitz = spectral_norm(&linear) + gain.abs() * spectral_norm(&inner);
        Self {
            linear,
            inner,
            gain,
            bias,
            noise_sd,
            lipschitz,
        }
    }

    pub fn base(&self, y: &Vector) -> Vector {
        let pre = &self.inner * y;
        &self.linear * y + pre.map(|p| self.gain * p.tanh()) + &self.bias
    }

    fn base_jacobian(&self, y: &Vector) -> Matrix {
        let pre = &self.inner * y;
        let mut scaled = self.inner.clone();
        for (i, p) in pre.iter().enumerate() {
            let sech2 = 1.0 - p.tanh().powi(2);
            scaled.row_mut(i).scale_mut(self.gain * sech2);
        }
        &self.linear + scaled
    }
}

impl Level for TanhAffine {
    fn in_dim(&self) -> usize {
        self.linear.ncols()
    }
    fn out_dim(&self) -> usize {
        self.linear.nrows()
    }
    fn payload_width(&self) -> usize {
        self.linear.nrows()
    }
    fn value(&self, sample: &[f64], y: &Vector) -> Vector {
        self.base(y) + Vector::from_column_slice(sample)
    }
    fn jacobian(&self, _sample: &[f64], y: &Vector) -> Matrix {
        self.base_jacobian(y)
    }
    fn draw(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        gaussian(rng, self.out_dim(), self.noise_sd)
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(self.lipschitz)
    }
    fn mean_value(&self, samples: &LevelSamples, rows: Rows<'_>, y: &Vector) -> Vector {
        let mut noise = Vector::zeros(self.out_dim());
        rows.for_each(samples.len(), |j| {
            for (acc, v) in noise.iter_mut().zip(samples.row(j)) {
                *acc += v;
            }
        });
        self.base(y) + noise / rows.count(samples.len()) as f64
    }
    fn mean_jacobian(&self, _samples: &LevelSamples, _rows: Rows<'_>, y: &Vector) -> Matrix {
        self.base_jacobian(y)
    }
}

/// Regression head `f_ζ(y) = ½‖y − target − ζ‖²`, `ζ ~ N(0, noise_sd² I)`:
/// each sample is a noisy observation of `target`.
#[derive(Debug, Clone)]
pub struct QuadraticHead {
    pub target: Vector,
    pub noise_sd: f64,
}

impl Level for QuadraticHead {
    fn in_dim(&self) -> usize {
        self.target.len()
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn payload_width(&self) -> usize {
        self.target.len()
    }
    fn value(&self, sample: &[f64], y: &Vector) -> Vector {
        let sq: f64 = y
            .iter()
            .zip(self.target.iter())
            .zip(sample)
            .map(|((a, c), z)| (a - c - z).powi(2))
            .sum();
        Vector::from_element(1, 0.5 * sq)
    }
    fn jacobian(&self, sample: &[f64], y: &Vector) -> Matrix {
        Matrix::from_iterator(
            1,
            y.len(),
            y.iter().zip(self.target.iter()).zip(sample).map(|((a, c), z)| a - c - z),
        )
    }
    fn draw(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        gaussian(rng, self.target.len(), self.noise_sd)
    }
    fn mean_jacobian(&self, samples: &LevelSamples, rows: Rows<'_>, y: &Vector) -> Matrix {
        let mut zbar = Vector::zeros(self.target.len());
        rows.for_each(samples.len(), |j| {
            for (acc, v) in zbar.iter_mut().zip(samples.row(j)) {
                *acc += v;
            }
        });
        zbar /= rows.count(samples.len()) as f64;
        let r = y - &self.target - zbar;
        Matrix::from_row_slice(1, r.len(), r.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn fd_jacobian(level: &dyn Level, sample: &[f64], y: &Vector) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(level.out_dim(), level.in_dim());
        for i in 0..level.in_dim() {
            let mut p = y.clone();
            p[i] += h;
            let mut m = y.clone();
            m[i] -= h;
            let col = (level.value(sample, &p) - level.value(sample, &m)) / (2.0 * h);
            out.set_column(i, &col);
        }
        out
    }

    fn check_level(level: &dyn Level, y: &Vector) {
        let mut rng = stream(3, Purpose::Data, 1, 0);
        let sample = level.draw(&mut rng);
        assert_eq!(sample.len(), level.payload_width());
        let j = level.jacobian(&sample, y);
        assert_eq!(j.shape(), (level.out_dim(), level.in_dim()));
        let fd = fd_jacobian(level, &sample, y);
        assert!((j - fd).amax() < 1e-6);
    }

    #[test]
    fn jacobians_match_differences() {
        let y3 = Vector::from_vec(vec![0.3, -1.2, 0.7]);
        check_level(&SquaredDistance::new(3, 0.5, 1.0), &y3);
        check_level(&Shift { dim: 3, noise_sd: 1.0 }, &y3);
        check_level(
            &QuadraticHead {
                target: Vector::from_vec(vec![1.0, 0.0, -1.0]),
                noise_sd: 0.5,
            },
            &y3,
        );
        let a = Matrix::from_row_slice(2, 3, &[0.5, 0.1, 0.0, -0.2, 0.3, 0.9]);
        let b = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.5, 0.0, 1.0, -0.5]);
        check_level(&TanhAffine::new(a, b, 0.4, Vector::from_vec(vec![0.1, -0.1]), 1.0), &y3);
        let poly = PolynomialResidual {
            truth: vec![1.0, -2.0, 0.5],
            t_range: 1.5,
            noise_sd: 1.0,
        };
        check_level(&poly, &y3);
    }

    #[test]
    fn tanh_affine_fast_mean_matches_loop() {
        let a = Matrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]);
        let level = TanhAffine::new(a.clone(), a, 0.2, Vector::zeros(2), 1.0);
        let mut rng = stream(1, Purpose::Data, 1, 0);
        let samples = LevelSamples::from_rows(2, (0..7).map(|_| level.draw(&mut rng))).unwrap();
        let y = Vector::from_vec(vec![0.4, -0.8]);
        let idx = [0usize, 3, 3, 6];
        let fast = level.mean_value(&samples, Rows::Subset(&idx), &y);
        let slow = idx.iter().fold(Vector::zeros(2), |acc, &j| acc + level.value(samples.row(j), &y)) / 4.0;
        assert!((fast - slow).amax() < 1e-14);
    }

    #[test]
    fn tanh_affine_lipschitz_is_closed_form() {
        let q = Matrix::identity(3, 3);
        let level = TanhAffine::new(q.clone(), q, 0.1, Vector::zeros(3), 0.0);
        assert!((level.lipschitz().unwrap() - 1.1).abs() < 1e-12);
    }
}
