//! Non-physics baselines and reference computations: an exact shallow GP,
//! Bayesian linear regression over fixed features, and the first-order LFM
//! kernel by quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::linalg::JITTER_START;
use crate::numerics::positive::{LENGTHSCALE_FLOOR, VARIANCE_FLOOR};
use crate::numerics::{integrate_2d, Cholesky, Matrix, PositiveParam, QuadOptions};
use crate::training::{optimizer_step, AdamState, TrainConfig};

pub use crate::rff::dgp_rff_build;

/// Largest training set the exact GP accepts.
pub const EXACT_GP_MAX_N: usize = 2000;

/// Exact GP regression with an EQ kernel
/// `sigma^2 exp(-sum_p (x_p - x'_p)^2 / (2 l_p^2))` on one output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactGp {
    pub variance: PositiveParam,
    pub lengthscale: Vec<PositiveParam>,
    pub noise: PositiveParam,
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl ExactGp {
    pub fn new(x: Matrix, y: Vec<f64>, variance: f64, lengthscale: f64, noise: f64) -> Result<Self> {
        if x.rows() != y.len() || x.rows() == 0 {
            return Err(Error::Shape(format!("{} input rows and {} targets", x.rows(), y.len())));
        }
        if x.rows() > EXACT_GP_MAX_N {
            return Err(Error::Config(format!("exact GP limited to {EXACT_GP_MAX_N} points, got {}", x.rows())));
        }
        if !(variance > VARIANCE_FLOOR && lengthscale > LENGTHSCALE_FLOOR && noise > VARIANCE_FLOOR) {
            return Err(Error::Config("exact GP hyperparameters must be positive".into()));
        }
        let p = x.cols();
        Ok(Self {
            variance: PositiveParam::new(variance, VARIANCE_FLOOR),
            lengthscale: vec![PositiveParam::new(lengthscale, LENGTHSCALE_FLOOR); p],
            noise: PositiveParam::new(noise, VARIANCE_FLOOR),
            x,
            y,
        })
    }

    fn lengthscales(&self) -> Vec<f64> {
        self.lengthscale.iter().map(|l| l.value()).collect()
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for (k, l) in self.lengthscale.iter().enumerate() {
            let d = (a[k] - b[k]) / l.value();
            s += d * d;
        }
        self.variance.value() * (-0.5 * s).exp()
    }

    fn factor(&self) -> Result<Cholesky> {
        let n = self.x.rows();
        let noise = self.noise.value();
        let k = Matrix::from_fn(n, n, |i, j| self.kernel(self.x.row(i), self.x.row(j)) + if i == j { noise } else { 0.0 });
        Cholesky::factor(&k, JITTER_START)
    }

    /// Predictive mean and variance of noisy observations at `xs`.
    pub fn predict(&self, xs: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        if xs.cols() != self.x.cols() {
            return Err(Error::Shape(format!("GP has {} inputs, queries {}", self.x.cols(), xs.cols())));
        }
        let chol = self.factor()?;
        let alpha = chol.solve_vec(&self.y);
        let mut mean = Vec::with_capacity(xs.rows());
        let mut var = Vec::with_capacity(xs.rows());
        for i in 0..xs.rows() {
            let ks: Vec<f64> = (0..self.x.rows()).map(|j| self.kernel(xs.row(i), self.x.row(j))).collect();
            mean.push(ks.iter().zip(&alpha).map(|(a, b)| a * b).sum());
            let mut v = ks.clone();
            chol.forward_solve(&mut v);
            let reduce: f64 = v.iter().map(|a| a * a).sum();
            var.push((self.variance.value() - reduce).max(0.0) + self.noise.value());
        }
        Ok((mean, var))
    }

    /// Log marginal likelihood and its gradient with respect to the raw
    /// parameters in the order variance, lengthscales, noise.
    pub fn log_marginal(&self) -> Result<(f64, Vec<f64>)> {
        let n = self.x.rows();
        let chol = self.factor()?;
        let alpha = chol.solve_vec(&self.y);
        let fit: f64 = self.y.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let lml = -0.5 * fit - 0.5 * chol.log_det() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        let kinv = chol.inverse();
        // W = alpha alpha' - K^{-1}; dlml = tr(W dK) / 2.
        let ls = self.lengthscales();
        let sv = self.variance.value();
        let mut d_var = 0.0;
        let mut d_l = vec![0.0; ls.len()];
        let mut d_noise = 0.0;
        for i in 0..n {
            for j in 0..n {
                let w = alpha[i] * alpha[j] - kinv[(i, j)];
                let k = self.kernel(self.x.row(i), self.x.row(j));
                d_var += 0.5 * w * k / sv;
                for (c, l) in ls.iter().enumerate() {
                    let d = self.x[(i, c)] - self.x[(j, c)];
                    d_l[c] += 0.5 * w * k * d * d / (l * l * l);
                }
                if i == j {
                    d_noise += 0.5 * w;
                }
            }
        }
        let mut grad = vec![d_var * self.variance.jacobian()];
        grad.extend(d_l.iter().zip(&self.lengthscale).map(|(g, p)| g * p.jacobian()));
        grad.push(d_noise * self.noise.jacobian());
        Ok((lml, grad))
    }

    fn raw(&self) -> Vec<f64> {
        let mut v = vec![self.variance.raw];
        v.extend(self.lengthscale.iter().map(|l| l.raw));
        v.push(self.noise.raw);
        v
    }

    fn set_raw(&mut self, v: &[f64]) {
        self.variance.raw = v[0];
        let p = self.lengthscale.len();
        for k in 0..p {
            self.lengthscale[k].raw = v[1 + k];
        }
        self.noise.raw = v[1 + p];
    }

    /// Maximise the log marginal likelihood with Adam; returns the value
    /// before each step.
    pub fn fit(&mut self, iterations: usize, learning_rate: f64) -> Result<Vec<f64>> {
        let cfg = TrainConfig {
            learning_rate,
            ..TrainConfig::default()
        };
        let mut params = self.raw();
        let mut state = AdamState::new(params.len());
        let mut trace = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let (lml, g) = self.log_marginal()?;
            if !lml.is_finite() {
                return Err(Error::non_finite("exact GP log marginal likelihood"));
            }
            trace.push(lml);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            optimizer_step(&mut params, &neg, None, &mut state, &cfg)?;
            self.set_raw(&params);
        }
        Ok(trace)
    }
}

/// Fit hyperparameters on `train` and predict at `test`.
pub fn exact_gp_fit_predict(
    x: &Matrix,
    y: &[f64],
    test: &Matrix,
    iterations: usize,
    learning_rate: f64,
) -> Result<(ExactGp, Vec<f64>, Vec<f64>)> {
    let mut gp = ExactGp::new(x.clone(), y.to_vec(), 1.0, 1.0, 0.1)?;
    gp.fit(iterations, learning_rate)?;
    let (m, v) = gp.predict(test)?;
    Ok((gp, m, v))
}

/// Posterior over `w` in `y = Phi w + e`, `w ~ N(0, I)`, `e ~ N(0, noise I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlrPosterior {
    pub mean: Vec<f64>,
    pub log_marginal: f64,
}

pub fn bayesian_linear_regression(phi: &Matrix, y: &[f64], noise: f64) -> Result<BlrPosterior> {
    let (n, k) = (phi.rows(), phi.cols());
    if y.len() != n {
        return Err(Error::Shape(format!("{n} feature rows and {} targets", y.len())));
    }
    let pt = phi.transpose();
    let mut a = pt.matmul(phi)?;
    for i in 0..k {
        for j in 0..k {
            a[(i, j)] /= noise;
        }
        a[(i, i)] += 1.0;
    }
    let chol = Cholesky::factor(&a, 0.0)?;
    let pty: Vec<f64> = (0..k).map(|i| (0..n).map(|r| phi[(r, i)] * y[r]).sum::<f64>() / noise).collect();
    let mean = chol.solve_vec(&pty);
    let yy: f64 = y.iter().map(|v| v * v).sum();
    let quad = (yy / noise) - pty.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
    let log_det = n as f64 * noise.ln() + chol.log_det();
    let log_marginal = -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(BlrPosterior { mean, log_marginal })
}

/// First-order LFM covariance
/// `S^2 int_0^t int_0^t' e^{-gamma (t - tau)} e^{-gamma (t' - tau')} e^{-(tau - tau')^2 / l^2}`
/// by nested adaptive quadrature to `1e-8` absolute.
pub fn lfm_kernel_quadrature(t: f64, t2: f64, gamma: f64, lengthscale: f64, sensitivity: f64) -> Result<f64> {
    if t < 0.0 || t2 < 0.0 {
        return Err(Error::Domain(format!("times must be nonnegative, got {t}, {t2}")));
    }
    if t == 0.0 || t2 == 0.0 {
        return Ok(0.0);
    }
    let l2 = lengthscale * lengthscale;
    let v = integrate_2d(
        |a, b| (-gamma * (t - a) - gamma * (t2 - b) - (a - b) * (a - b) / l2).exp(),
        0.0,
        t,
        |_| 0.0,
        |_| t2,
        QuadOptions {
            abs_tol: 1e-10,
            rel_tol: 1e-12,
            max_intervals: 20_000,
        },
    )?;
    Ok(sensitivity * sensitivity * v)
}
