//! Inducing-point deep latent force models with pathwise sampling.
//!
//! Each latent force `u_q` is an EQ Gaussian process summarised by
//! inducing outputs at shared inputs `Z`. A function sample is drawn by
//! Matheron's rule as a random Fourier prior sample plus a kernel update,
//! and both parts are pushed through the first-order ODE Green's function
//! `prod_p e^{-gamma_p x_p}` over `(-inf, x]` in closed form. Layer outputs
//! mix the filtered latents with amplitudes `a_{d,q}` and add a linear mean
//! function.
//!
//! The latent kernel here is `sigma^2 exp(-sum_p (x_p - z_p)^2 / (2 l_p^2))`,
//! so basis frequencies are `N(0, l_p^-2)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_targets, MomentAccumulator, ParamGroup, Parameterized, Prediction};
use crate::numerics::linalg::JITTER_START;
use crate::numerics::positive::{sigmoid, softplus, softplus_inv, DECAY_FLOOR, LENGTHSCALE_FLOOR, VARIANCE_FLOOR};
use crate::numerics::{erfc, erfcx, log_normal_pdf, Cholesky, Matrix, PositiveParam, RngKey, RngStream};

const TAG_INIT: u64 = 0x5649_505f_494e_4954;
const TAG_STATE: u64 = 0x5649_505f_5354_4154;

const SQRT_HALF_PI: f64 = 1.253_314_137_315_500_3;

/// Hyperparameters of the latent EQ kernel, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentKernel {
    pub variance: f64,
    /// One per input dimension.
    pub lengthscale: Vec<f64>,
}

impl LatentKernel {
    pub fn eval(&self, x: &[f64], z: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in 0..x.len() {
            let d = (x[p] - z[p]) / self.lengthscale[p];
            s += d * d;
        }
        self.variance * (-0.5 * s).exp()
    }

    /// `K(Z, Z)` without jitter.
    pub fn gram(&self, z: &Matrix) -> Matrix {
        Matrix::from_fn(z.rows(), z.rows(), |i, j| self.eval(z.row(i), z.row(j)))
    }
}

/// `int_{-inf}^{x} e^{-gamma (x - tau)} e^{-(tau - z)^2 / (2 l^2)} dtau`.
///
/// Evaluated as `l sqrt(pi/2) erfcx(b) e^{-(x-z)^2/(2 l^2)}` with
/// `b = (gamma l^2 + z - x) / (l sqrt 2)` when `b >= 0`, and as
/// `l sqrt(pi/2) e^{a} erfc(b)` with `a = gamma (z - x) + gamma^2 l^2 / 2 <= 0`
/// otherwise, so neither branch can overflow.
pub fn canonical_term(x: f64, z: f64, gamma: f64, l: f64) -> Result<f64> {
    let b = (gamma * l * l + z - x) / (l * std::f64::consts::SQRT_2);
    let v = if b >= 0.0 {
        let d = (x - z) / l;
        l * SQRT_HALF_PI * erfcx(b)? * (-0.5 * d * d).exp()
    } else {
        let a = gamma * (z - x) + 0.5 * gamma * gamma * l * l;
        l * SQRT_HALF_PI * a.exp() * erfc(b)
    };
    if !v.is_finite() {
        return Err(Error::Overflow(format!("canonical term at x={x}, z={z}, gamma={gamma}, l={l}")));
    }
    Ok(v)
}

/// [`canonical_term`] and its partial derivatives.
#[derive(Clone, Copy, Debug)]
pub struct CanonicalPartials {
    pub value: f64,
    pub d_x: f64,
    pub d_z: f64,
    pub d_gamma: f64,
    pub d_l: f64,
}

pub fn canonical_partials(x: f64, z: f64, gamma: f64, l: f64) -> Result<CanonicalPartials> {
    let h = canonical_term(x, z, gamma, l)?;
    let d = x - z;
    let g = (-0.5 * d * d / (l * l)).exp();
    let d_x = g - gamma * h;
    Ok(CanonicalPartials {
        value: h,
        d_x,
        d_z: -d_x,
        d_gamma: h * (gamma * l * l - d) - l * l * g,
        d_l: h / l + h * gamma * gamma * l - g * (gamma * l + d / l),
    })
}

/// `e^{j beta} prod_p e^{j theta_p x_p} / (gamma_p + j theta_p)`, the
/// convolution of `e^{j (theta . x + beta)}` with the product filter.
pub fn basis_term_complex(x: &[f64], theta: &[f64], beta: f64, gamma: &[f64]) -> Complex64 {
    let mut acc = Complex64::from_polar(1.0, beta);
    for p in 0..x.len() {
        acc *= Complex64::from_polar(1.0, theta[p] * x[p]) / Complex64::new(gamma[p], theta[p]);
    }
    acc
}

/// Filtered `cos(theta . x + beta)`, i.e. `Re` of [`basis_term_complex`].
pub fn basis_term(x: &[f64], theta: &[f64], beta: f64, gamma: &[f64]) -> f64 {
    basis_term_complex(x, theta, beta, gamma).re
}

/// The same quantity assembled from the conjugate pair
/// `(e^{j(.)} + e^{-j(.)}) / 2` convolved term by term. Returns the full
/// complex sum so the vanishing imaginary part can be inspected.
pub fn basis_term_conjugate_pair(x: &[f64], theta: &[f64], beta: f64, gamma: &[f64]) -> Complex64 {
    let neg: Vec<f64> = theta.iter().map(|t| -t).collect();
    (basis_term_complex(x, theta, beta, gamma) + basis_term_complex(x, &neg, -beta, gamma)) * 0.5
}

/// One pathwise function sample of a latent force.
#[derive(Clone, Debug, PartialEq)]
pub struct PathwiseSampleState {
    /// `B x P` basis frequencies.
    pub theta: Matrix,
    /// Standard normal draws with `theta = theta_noise / l`.
    pub theta_noise: Matrix,
    pub beta: Vec<f64>,
    pub w: Vec<f64>,
    /// Sampled inducing outputs.
    pub v: Vec<f64>,
    /// Standard normal draws with `v = mu + L v_noise`.
    pub v_noise: Vec<f64>,
    /// `K^{-1} (v - Phi_Z w)`.
    pub q: Vec<f64>,
    /// Basis at the inducing inputs, `M x B`.
    pub phi_z: Matrix,
}

impl PathwiseSampleState {
    pub fn n_basis(&self) -> usize {
        self.beta.len()
    }
}

/// Draw a pathwise state given the variational mean, a lower-triangular
/// covariance factor (row-major `M x M`) and the factored prior gram.
pub(crate) fn draw_state_with(
    z: &Matrix,
    mean: &[f64],
    chol: &Matrix,
    kernel: &LatentKernel,
    prior: &Cholesky,
    n_basis: usize,
    rng: &mut RngStream,
) -> Result<PathwiseSampleState> {
    let (m, p) = (z.rows(), z.cols());
    if n_basis == 0 {
        return Err(Error::Config("need at least one basis function".into()));
    }
    if mean.len() != m || chol.rows() != m || prior.dim() != m {
        return Err(Error::Shape(format!("inducing set of size {m} with mismatched variational factors")));
    }
    let theta_noise = Matrix::from_vec(n_basis, p, rng.normals(n_basis * p))?;
    let theta = Matrix::from_fn(n_basis, p, |i, k| theta_noise[(i, k)] / kernel.lengthscale[k]);
    let beta: Vec<f64> = (0..n_basis).map(|_| rng.uniform_range(0.0, 2.0 * PI)).collect();
    let w = rng.normals(n_basis);
    let v_noise = rng.normals(m);
    let v: Vec<f64> = (0..m)
        .map(|i| mean[i] + (0..=i).map(|j| chol[(i, j)] * v_noise[j]).sum::<f64>())
        .collect();
    let c = (2.0 / n_basis as f64).sqrt();
    let phi_z = Matrix::from_fn(m, n_basis, |j, i| {
        let arg: f64 = (0..p).map(|k| theta[(i, k)] * z[(j, k)]).sum::<f64>() + beta[i];
        c * arg.cos()
    });
    let resid: Vec<f64> = (0..m)
        .map(|j| v[j] - (0..n_basis).map(|i| phi_z[(j, i)] * w[i]).sum::<f64>())
        .collect();
    let q = prior.solve_vec(&resid);
    Ok(PathwiseSampleState {
        theta,
        theta_noise,
        beta,
        w,
        v,
        v_noise,
        q,
        phi_z,
    })
}

/// Draw a pathwise state for inducing inputs `z`, variational mean and
/// lower-triangular factor, factoring `K(Z, Z) + jitter I` internally.
pub fn draw_pathwise_state(
    z: &Matrix,
    mean: &[f64],
    chol: &Matrix,
    kernel: &LatentKernel,
    n_basis: usize,
    jitter: f64,
    rng: &mut RngStream,
) -> Result<PathwiseSampleState> {
    let prior = Cholesky::factor(&kernel.gram(z), jitter)?;
    draw_state_with(z, mean, chol, kernel, &prior, n_basis, rng)
}

/// Evaluate the latent function sample at `x`.
pub fn latent_eval(state: &PathwiseSampleState, kernel: &LatentKernel, z: &Matrix, x: &[f64]) -> f64 {
    let b = state.n_basis();
    let c = (2.0 / b as f64).sqrt();
    let mut prior = 0.0;
    for i in 0..b {
        let arg: f64 = state.theta.row(i).iter().zip(x).map(|(t, v)| t * v).sum::<f64>() + state.beta[i];
        prior += state.w[i] * arg.cos();
    }
    let update: f64 = (0..z.rows()).map(|j| state.q[j] * kernel.eval(x, z.row(j))).sum();
    c * prior + update
}

/// Filtered sample `amplitude * int G(x - tau) u(tau) dtau` for one output
/// with per-dimension decays `gamma`.
pub fn output_sample(
    state: &PathwiseSampleState,
    kernel: &LatentKernel,
    z: &Matrix,
    gamma: &[f64],
    amplitude: f64,
    x: &[f64],
) -> Result<f64> {
    let b = state.n_basis();
    let c = (2.0 / b as f64).sqrt();
    let mut basis = 0.0;
    for i in 0..b {
        basis += state.w[i] * basis_term(x, state.theta.row(i), state.beta[i], gamma);
    }
    let mut canon = 0.0;
    for j in 0..z.rows() {
        let mut prod = 1.0;
        for p in 0..x.len() {
            prod *= canonical_term(x[p], z[(j, p)], gamma[p], kernel.lengthscale[p])?;
        }
        canon += state.q[j] * prod;
    }
    Ok(amplitude * (c * basis + kernel.variance * canon))
}

/// Pearson correlation between `gamma * output_sample` and the latent
/// sample on a one-dimensional grid, after mapping each to `[-1, 1]`.
pub fn delta_limit_check(
    gamma: f64,
    state: &PathwiseSampleState,
    kernel: &LatentKernel,
    z: &Matrix,
    grid: &[f64],
) -> Result<f64> {
    if gamma <= 0.0 {
        return Err(Error::Domain(format!("decay must be positive, got {gamma}")));
    }
    let mut filtered = Vec::with_capacity(grid.len());
    let mut latent = Vec::with_capacity(grid.len());
    for &t in grid {
        filtered.push(gamma * output_sample(state, kernel, z, &[gamma], 1.0, &[t])?);
        latent.push(latent_eval(state, kernel, z, &[t]));
    }
    pearson(&range_normalise(&filtered)?, &range_normalise(&latent)?)
}

fn range_normalise(v: &[f64]) -> Result<Vec<f64>> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12 * hi.abs().max(lo.abs()).max(1e-300)) {
        return Err(Error::Degenerate("sample is constant over the grid".into()));
    }
    Ok(v.iter().map(|x| 2.0 * (x - lo) / (hi - lo) - 1.0).collect())
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Degenerate("zero variance in correlation".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans(points: &Matrix, k: usize, iterations: usize, rng: &mut RngStream) -> Result<Matrix> {
    let (n, p) = (points.rows(), points.cols());
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot place {k} centres among {n} points")));
    }
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centres = Matrix::zeros(k, p);
    centres.row_mut(0).copy_from_slice(points.row(rng.below(n)));
    let mut best: Vec<f64> = (0..n).map(|i| dist2(points.row(i), centres.row(0))).collect();
    for c in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut idx = n - 1;
            for (i, d) in best.iter().enumerate() {
                if target < *d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.below(n)
        };
        centres.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            best[i] = best[i].min(dist2(points.row(i), centres.row(c)));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iterations {
        let mut changed = false;
        for i in 0..n {
            let mut arg = 0;
            let mut dmin = f64::INFINITY;
            for c in 0..k {
                let d = dist2(points.row(i), centres.row(c));
                if d < dmin {
                    dmin = d;
                    arg = c;
                }
            }
            if assign[i] != arg {
                assign[i] = arg;
                changed = true;
            }
        }
        let mut sums = Matrix::zeros(k, p);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums.row_mut(assign[i]).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centres.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centres)
}

/// One layer: `Q` latent forces at shared inducing inputs, mixed into `D`
/// outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VipLayer {
    pub input_dim: usize,
    pub output_dim: usize,
    pub n_latents: usize,
    /// `M x P`.
    pub inducing: Matrix,
    pub fixed_inducing: bool,
    /// `Q` vectors of length `M`.
    pub q_mean: Vec<Vec<f64>>,
    /// `Q` row-major `M x M` lower factors; diagonal entries are raw
    /// values passed through softplus, entries above it are unused.
    pub q_chol: Vec<Vec<f64>>,
    pub variance: PositiveParam,
    /// One per input dimension.
    pub lengthscale: Vec<PositiveParam>,
    /// `D x P`, row-major.
    pub decay: Vec<PositiveParam>,
    /// `D x Q`, row-major.
    pub amplitude: Vec<f64>,
    /// Linear mean function weights, `D x P` row-major.
    pub mean_weights: Vec<f64>,
    pub mean_bias: Vec<f64>,
}

impl VipLayer {
    pub fn n_inducing(&self) -> usize {
        self.inducing.rows()
    }

    pub fn kernel(&self) -> LatentKernel {
        LatentKernel {
            variance: self.variance.value(),
            lengthscale: self.lengthscale.iter().map(|p| p.value()).collect(),
        }
    }

    pub fn decays(&self, d: usize) -> Vec<f64> {
        (0..self.input_dim).map(|p| self.decay[d * self.input_dim + p].value()).collect()
    }

    /// Lower-triangular factor `L_q` with the diagonal transformed.
    pub fn chol_factor(&self, q: usize) -> Matrix {
        let m = self.n_inducing();
        let raw = &self.q_chol[q];
        Matrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => raw[i * m + j],
            std::cmp::Ordering::Equal => softplus(raw[i * m + j]),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    /// Prior gram factor shared by every latent and sample.
    pub fn prior_factor(&self, jitter: f64) -> Result<Cholesky> {
        Cholesky::factor(&self.kernel().gram(&self.inducing), jitter)
    }

    /// Draw one state per latent.
    pub fn draw_states(&self, prior: &Cholesky, n_basis: usize, key: RngKey, sample: usize, layer: usize) -> Result<Vec<PathwiseSampleState>> {
        let kernel = self.kernel();
        (0..self.n_latents)
            .map(|q| {
                let mut rng = key.stream(&[TAG_STATE, sample as u64, layer as u64, q as u64]);
                draw_state_with(&self.inducing, &self.q_mean[q], &self.chol_factor(q), &kernel, prior, n_basis, &mut rng)
            })
            .collect()
    }

    /// `F_d(x) = sum_q a_{d,q} output_sample_q(x) + (A x + b)_d` for every
    /// row of `x`.
    pub fn forward(&self, states: &[PathwiseSampleState], x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim || states.len() != self.n_latents {
            return Err(Error::Shape(format!(
                "layer expects {} inputs and {} states, got {} and {}",
                self.input_dim,
                self.n_latents,
                x.cols(),
                states.len()
            )));
        }
        let kernel = self.kernel();
        let (p, dd) = (self.input_dim, self.output_dim);
        let gammas: Vec<Vec<f64>> = (0..dd).map(|d| self.decays(d)).collect();
        let mut out = Matrix::zeros(x.rows(), dd);
        for n in 0..x.rows() {
            let xr = x.row(n);
            for d in 0..dd {
                let mut v = self.mean_bias[d];
                for k in 0..p {
                    v += self.mean_weights[d * p + k] * xr[k];
                }
                for (q, st) in states.iter().enumerate() {
                    let a = self.amplitude[d * self.n_latents + q];
                    if a != 0.0 {
                        v += output_sample(st, &kernel, &self.inducing, &gammas[d], a, xr)?;
                    }
                }
                out[(n, d)] = v;
            }
        }
        Ok(out)
    }

    /// KL of each `q(v_q)` from `N(0, K)` summed over latents.
    pub fn kl(&self, prior: &Cholesky) -> Result<f64> {
        let kinv = prior.inverse();
        let mut total = 0.0;
        for q in 0..self.n_latents {
            total += gaussian_kl_full(&self.q_mean[q], &self.chol_factor(q), prior, &kinv)?;
        }
        Ok(total)
    }

    /// Backpropagate `g_out` (`N x D`) through one forward pass; adds
    /// parameter gradients into `grad` and returns the input gradient.
    fn backward(
        &self,
        states: &[PathwiseSampleState],
        x: &Matrix,
        g_out: &Matrix,
        prior: &Cholesky,
        grad: &mut VipLayer,
    ) -> Result<Matrix> {
        let kernel = self.kernel();
        let (p, dd, nq, m) = (self.input_dim, self.output_dim, self.n_latents, self.n_inducing());
        let z = &self.inducing;
        let gammas: Vec<Vec<f64>> = (0..dd).map(|d| self.decays(d)).collect();
        let mut d_x = Matrix::zeros(x.rows(), p);
        let mut d_gamma = vec![0.0; dd * p];
        let mut d_l = vec![0.0; p];
        let mut d_var = 0.0;
        let mut d_z = Matrix::zeros(m, p);
        for n in 0..x.rows() {
            let xr = x.row(n);
            for d in 0..dd {
                let g = g_out[(n, d)];
                if g == 0.0 {
                    continue;
                }
                grad.mean_bias[d] += g;
                for k in 0..p {
                    grad.mean_weights[d * p + k] += g * xr[k];
                    d_x[(n, k)] += g * self.mean_weights[d * p + k];
                }
            }
        }
        for (q, st) in states.iter().enumerate() {
            let b = st.n_basis();
            let c = (2.0 / b as f64).sqrt();
            let mut g_theta = Matrix::zeros(b, p);
            let mut g_q = vec![0.0; m];
            let mut hs = vec![CanonicalPartials { value: 0.0, d_x: 0.0, d_z: 0.0, d_gamma: 0.0, d_l: 0.0 }; m * p];
            let mut e = vec![Complex64::new(0.0, 0.0); b * p];
            for n in 0..x.rows() {
                let xr = x.row(n);
                for i in 0..b {
                    for k in 0..p {
                        e[i * p + k] = Complex64::from_polar(1.0, st.theta[(i, k)] * xr[k]);
                    }
                }
                for d in 0..dd {
                    let a = self.amplitude[d * nq + q];
                    let gout = g_out[(n, d)];
                    if gout == 0.0 {
                        continue;
                    }
                    let gamma = &gammas[d];
                    let g = gout * a;
                    // Basis part.
                    let mut basis = 0.0;
                    for i in 0..b {
                        let mut prod = Complex64::from_polar(1.0, st.beta[i]);
                        for k in 0..p {
                            prod *= e[i * p + k] / Complex64::new(gamma[k], st.theta[(i, k)]);
                        }
                        basis += st.w[i] * prod.re;
                        let coef = g * c * st.w[i];
                        if coef == 0.0 {
                            continue;
                        }
                        let j = Complex64::i();
                        for k in 0..p {
                            let th = st.theta[(i, k)];
                            let r = Complex64::new(gamma[k], th).inv();
                            d_x[(n, k)] += coef * (prod * j * th).re;
                            g_theta[(i, k)] += coef * (prod * j * (xr[k] - r)).re;
                            d_gamma[d * p + k] += coef * (-prod * r).re;
                        }
                    }
                    // Canonical part.
                    let mut canon = 0.0;
                    for jj in 0..m {
                        for k in 0..p {
                            hs[jj * p + k] = canonical_partials(xr[k], z[(jj, k)], gamma[k], kernel.lengthscale[k])?;
                        }
                        let prod: f64 = (0..p).map(|k| hs[jj * p + k].value).product();
                        canon += st.q[jj] * prod;
                        g_q[jj] += g * kernel.variance * prod;
                        let coef = g * kernel.variance * st.q[jj];
                        for k in 0..p {
                            let others: f64 = (0..p).filter(|&o| o != k).map(|o| hs[jj * p + o].value).product();
                            let h = &hs[jj * p + k];
                            let cf = coef * others;
                            d_x[(n, k)] += cf * h.d_x;
                            d_z[(jj, k)] += cf * h.d_z;
                            d_gamma[d * p + k] += cf * h.d_gamma;
                            d_l[k] += cf * h.d_l;
                        }
                    }
                    d_var += g * canon;
                    grad.amplitude[d * nq + q] += gout * (c * basis + kernel.variance * canon);
                }
            }
            // Through q = K^{-1} (v - Phi_Z w).
            let g_r = prior.solve_vec(&g_q);
            for jj in 0..m {
                grad.q_mean[q][jj] += g_r[jj];
                for k in 0..=jj {
                    let gl = g_r[jj] * st.v_noise[k];
                    if k == jj {
                        grad.q_chol[q][jj * m + k] += gl * sigmoid(self.q_chol[q][jj * m + k]);
                    } else {
                        grad.q_chol[q][jj * m + k] += gl;
                    }
                }
            }
            for jj in 0..m {
                for i in 0..b {
                    // d/dPhi_Z[j, i] = -g_r[j] w[i]; Phi_Z = c cos(theta . z + beta).
                    let arg: f64 = (0..p).map(|k| st.theta[(i, k)] * z[(jj, k)]).sum::<f64>() + st.beta[i];
                    let gphi = -g_r[jj] * st.w[i] * (-c * arg.sin());
                    for k in 0..p {
                        g_theta[(i, k)] += gphi * z[(jj, k)];
                        d_z[(jj, k)] += gphi * st.theta[(i, k)];
                    }
                }
            }
            let mut g_k = Matrix::zeros(m, m);
            for a in 0..m {
                for bb in 0..m {
                    g_k[(a, bb)] = -g_r[a] * st.q[bb];
                }
            }
            gram_backward(&kernel, z, &g_k, &mut d_var, &mut d_l, &mut d_z);
            for i in 0..b {
                for k in 0..p {
                    d_l[k] -= g_theta[(i, k)] * st.theta[(i, k)] / kernel.lengthscale[k];
                }
            }
        }
        self.apply_kernel_grads(grad, d_var, &d_l, &d_gamma, &d_z);
        Ok(d_x)
    }

    fn apply_kernel_grads(&self, grad: &mut VipLayer, d_var: f64, d_l: &[f64], d_gamma: &[f64], d_z: &Matrix) {
        grad.variance.raw += d_var * self.variance.jacobian();
        for k in 0..self.input_dim {
            grad.lengthscale[k].raw += d_l[k] * self.lengthscale[k].jacobian();
        }
        for i in 0..d_gamma.len() {
            grad.decay[i].raw += d_gamma[i] * self.decay[i].jacobian();
        }
        if !self.fixed_inducing {
            for (g, v) in grad.inducing.as_mut_slice().iter_mut().zip(d_z.as_slice()) {
                *g += v;
            }
        }
    }

    /// Add `coef * dKL` into `grad`.
    fn kl_grad(&self, prior: &Cholesky, coef: f64, grad: &mut VipLayer) {
        let m = self.n_inducing();
        let kinv = prior.inverse();
        let kernel = self.kernel();
        let mut g_k = Matrix::zeros(m, m);
        for q in 0..self.n_latents {
            let l = self.chol_factor(q);
            let mu = &self.q_mean[q];
            let kmu: Vec<f64> = (0..m).map(|i| (0..m).map(|j| kinv[(i, j)] * mu[j]).sum()).collect();
            for i in 0..m {
                grad.q_mean[q][i] += coef * kmu[i];
            }
            let kl = kinv.matmul(&l).expect("square");
            for i in 0..m {
                for j in 0..=i {
                    let raw = self.q_chol[q][i * m + j];
                    if i == j {
                        grad.q_chol[q][i * m + j] += coef * (kl[(i, j)] - 1.0 / l[(i, i)]) * sigmoid(raw);
                    } else {
                        grad.q_chol[q][i * m + j] += coef * kl[(i, j)];
                    }
                }
            }
            // dKL/dK = (K^-1 - K^-1 S K^-1 - K^-1 mu mu' K^-1) / 2.
            let s = l.matmul(&l.transpose()).expect("square");
            let ksk = kinv.matmul(&s).and_then(|t| t.matmul(&kinv)).expect("square");
            for i in 0..m {
                for j in 0..m {
                    g_k[(i, j)] += coef * 0.5 * (kinv[(i, j)] - ksk[(i, j)] - kmu[i] * kmu[j]);
                }
            }
        }
        let mut d_var = 0.0;
        let mut d_l = vec![0.0; self.input_dim];
        let mut d_z = Matrix::zeros(m, self.input_dim);
        gram_backward(&kernel, &self.inducing, &g_k, &mut d_var, &mut d_l, &mut d_z);
        self.apply_kernel_grads(grad, d_var, &d_l, &vec![0.0; self.decay.len()], &d_z);
    }
}

/// Chain a gradient with respect to `K(Z, Z)` into the kernel variance,
/// lengthscales and inducing inputs.
fn gram_backward(kernel: &LatentKernel, z: &Matrix, g_k: &Matrix, d_var: &mut f64, d_l: &mut [f64], d_z: &mut Matrix) {
    let (m, p) = (z.rows(), z.cols());
    for a in 0..m {
        for b in 0..m {
            let g = g_k[(a, b)];
            if g == 0.0 {
                continue;
            }
            let k = kernel.eval(z.row(a), z.row(b));
            *d_var += g * k / kernel.variance;
            for c in 0..p {
                let l = kernel.lengthscale[c];
                let diff = z[(a, c)] - z[(b, c)];
                d_l[c] += g * k * diff * diff / (l * l * l);
                let dz = -g * k * diff / (l * l);
                d_z[(a, c)] += dz;
                d_z[(b, c)] -= dz;
            }
        }
    }
}

/// `KL(N(mu, L L') || N(0, K))`.
pub fn gaussian_kl_full(mu: &[f64], l: &Matrix, prior: &Cholesky, kinv: &Matrix) -> Result<f64> {
    let m = mu.len();
    let s = l.matmul(&l.transpose())?;
    let mut trace = 0.0;
    for i in 0..m {
        for j in 0..m {
            trace += kinv[(i, j)] * s[(i, j)];
        }
    }
    let maha: f64 = mu.iter().zip(prior.solve_vec(mu)).map(|(a, b)| a * b).sum();
    let mut log_det_s = 0.0;
    for i in 0..m {
        if l[(i, i)] <= 0.0 {
            return Err(Error::Domain("variational factor has a non-positive diagonal".into()));
        }
        log_det_s += 2.0 * l[(i, i)].ln();
    }
    Ok(0.5 * (trace + maha - m as f64 + prior.log_det() - log_det_s))
}

/// Initial values and sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VipConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub n_latents: usize,
    pub n_inducing: usize,
    pub n_basis: usize,
    pub n_samples: usize,
    /// Place first-layer inducing inputs on a fixed regular grid over this
    /// box (one `(lo, hi)` per input) instead of k-means.
    pub fixed_grid: Option<Vec<(f64, f64)>>,
    pub lengthscale: f64,
    pub decay: f64,
    pub variance: f64,
    pub likelihood_var: f64,
    /// Initial diagonal of the variational covariance factor.
    pub chol_diag: f64,
    pub jitter: f64,
}

impl VipConfig {
    pub fn new(input_dim: usize, output_dim: usize, hidden_dims: Vec<usize>) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_dims,
            n_latents: 1,
            n_inducing: 100,
            n_basis: 256,
            n_samples: 50,
            fixed_grid: None,
            lengthscale: 0.1,
            decay: 2.5,
            variance: 1.0,
            likelihood_var: 0.01,
            chol_diag: 0.1,
            jitter: JITTER_START,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VipModel {
    pub input_dim: usize,
    pub layers: Vec<VipLayer>,
    pub likelihood_var: PositiveParam,
    pub n_basis: usize,
    pub n_samples: usize,
    pub jitter: f64,
}

/// Bound terms for the inducing-point model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VipElboTerms {
    pub expected_log_lik: f64,
    pub kl: f64,
}

impl VipElboTerms {
    pub fn elbo(&self) -> f64 {
        self.expected_log_lik - self.kl
    }
}

fn regular_grid(bounds: &[(f64, f64)], m: usize) -> Result<Matrix> {
    if bounds.len() != 1 {
        // A tensor grid with m points total is only well defined for one
        // input; higher dimensions fall back to a diagonal line.
        return Ok(Matrix::from_fn(m, bounds.len(), |i, k| {
            let (lo, hi) = bounds[k];
            lo + (hi - lo) * i as f64 / (m.max(2) - 1) as f64
        }));
    }
    let (lo, hi) = bounds[0];
    if !(hi > lo) {
        return Err(Error::Config(format!("empty grid range [{lo}, {hi}]")));
    }
    Ok(Matrix::from_fn(m, 1, |i, _| lo + (hi - lo) * i as f64 / (m.max(2) - 1) as f64))
}

impl VipModel {
    /// Build a model; `x` supplies the inputs for k-means placement.
    pub fn new(config: &VipConfig, x: &Matrix, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.output_dim == 0 || config.n_latents == 0 || config.n_inducing == 0 {
            return Err(Error::Config("dimensions, latents and inducing points must be positive".into()));
        }
        if x.cols() != config.input_dim {
            return Err(Error::Shape(format!("config has {} inputs, data {}", config.input_dim, x.cols())));
        }
        if config.lengthscale <= LENGTHSCALE_FLOOR
            || config.decay <= DECAY_FLOOR
            || config.variance <= VARIANCE_FLOOR
            || config.likelihood_var <= VARIANCE_FLOOR
            || config.chol_diag <= 0.0
        {
            return Err(Error::Config("initial values must exceed their floors".into()));
        }
        let key = RngKey::new(seed, 0);
        let n_layers = config.hidden_dims.len() + 1;
        let m = config.n_inducing;
        let mut layer_inputs = x.clone();
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let last = l + 1 == n_layers;
            let p = layer_inputs.cols();
            let d = if last { config.output_dim } else { config.hidden_dims[l] };
            let mut rng = key.stream(&[TAG_INIT, l as u64]);
            let (inducing, fixed) = match (&config.fixed_grid, l) {
                (Some(bounds), 0) => {
                    if bounds.len() != p {
                        return Err(Error::Config("grid bounds must match the input dimension".into()));
                    }
                    (regular_grid(bounds, m)?, true)
                }
                _ => (kmeans(&layer_inputs, m, 50, &mut rng)?, false),
            };
            let mut mean_weights = vec![0.0; d * p];
            if !last {
                for k in 0..d.min(p) {
                    mean_weights[k * p + k] = 1.0;
                }
            }
            let mut chol = vec![0.0; m * m];
            for i in 0..m {
                chol[i * m + i] = softplus_inv(config.chol_diag);
            }
            let layer = VipLayer {
                input_dim: p,
                output_dim: d,
                n_latents: config.n_latents,
                inducing,
                fixed_inducing: fixed,
                q_mean: vec![vec![0.0; m]; config.n_latents],
                q_chol: vec![chol; config.n_latents],
                variance: PositiveParam::new(config.variance, VARIANCE_FLOOR),
                lengthscale: vec![PositiveParam::new(config.lengthscale, LENGTHSCALE_FLOOR); p],
                decay: vec![PositiveParam::new(config.decay, DECAY_FLOOR); d * p],
                amplitude: rng.normals(d * config.n_latents),
                mean_weights,
                mean_bias: vec![0.0; d],
            };
            // Next layer's k-means runs on the mean-function image.
            layer_inputs = Matrix::from_fn(layer_inputs.rows(), d, |n, dd| {
                (0..p).map(|k| layer.mean_weights[dd * p + k] * layer_inputs[(n, k)]).sum::<f64>()
            });
            layers.push(layer);
        }
        Ok(Self {
            input_dim: config.input_dim,
            layers,
            likelihood_var: PositiveParam::new(config.likelihood_var, VARIANCE_FLOOR),
            n_basis: config.n_basis,
            n_samples: config.n_samples,
            jitter: config.jitter,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_params();
        // Fixed inducing inputs are not visited; zero them anyway so the
        // container holds no stale values.
        for l in &mut g.layers {
            l.inducing.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        g
    }

    fn priors(&self) -> Result<Vec<Cholesky>> {
        self.layers.iter().map(|l| l.prior_factor(self.jitter)).collect()
    }

    /// One function sample of the model output.
    pub fn sample(&self, x: &Matrix, sample: usize, key: RngKey) -> Result<Matrix> {
        let priors = self.priors()?;
        Ok(self.forward(x, &priors, sample, key, false)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn forward(
        &self,
        x: &Matrix,
        priors: &[Cholesky],
        sample: usize,
        key: RngKey,
        keep: bool,
    ) -> Result<(Matrix, Vec<(Matrix, Vec<PathwiseSampleState>)>)> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!("model expects {} inputs, got {}", self.input_dim, x.cols())));
        }
        let mut f = x.clone();
        let mut caches = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let states = layer.draw_states(&priors[l], self.n_basis, key, sample, l)?;
            let out = layer.forward(&states, &f)?;
            if keep {
                caches.push((f, states));
            }
            f = out;
        }
        Ok((f, caches))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn elbo_terms(
        &self,
        x: &Matrix,
        y: &Matrix,
        mask: Option<&[bool]>,
        n_total: usize,
        n_samples: usize,
        key: RngKey,
    ) -> Result<VipElboTerms> {
        Ok(self.elbo_impl(x, y, mask, n_total, n_samples, key, false)?.0)
    }

    pub fn elbo_grad(
        &self,
        x: &Matrix,
        y: &Matrix,
        mask: Option<&[bool]>,
        n_total: usize,
        n_samples: usize,
        key: RngKey,
    ) -> Result<(f64, VipModel)> {
        let (t, g) = self.elbo_impl(x, y, mask, n_total, n_samples, key, true)?;
        Ok((t.elbo(), g.expect("gradient requested")))
    }

    #[allow(clippy::too_many_arguments)]
    fn elbo_impl(
        &self,
        x: &Matrix,
        y: &Matrix,
        mask: Option<&[bool]>,
        n_total: usize,
        n_samples: usize,
        key: RngKey,
        want_grad: bool,
    ) -> Result<(VipElboTerms, Option<VipModel>)> {
        check_targets(x, y, mask, self.output_dim())?;
        if n_samples == 0 {
            return Err(Error::Config("need at least one Monte Carlo sample".into()));
        }
        if n_total < x.rows() {
            return Err(Error::Config(format!("N_total {n_total} below batch size {}", x.rows())));
        }
        let priors = self.priors()?;
        let observed = |i: usize| mask.is_none_or(|m| m[i]);
        let scale = n_total as f64 / x.rows() as f64 / n_samples as f64;
        let var = self.likelihood_var.value();
        let d = y.cols();
        let mut grad = if want_grad { Some(self.zeros_like()) } else { None };
        let mut lik = 0.0;
        let mut d_var = 0.0;
        for s in 0..n_samples {
            let (f, caches) = self.forward(x, &priors, s, key, want_grad)?;
            let mut g_f = Matrix::zeros(f.rows(), f.cols());
            for i in 0..x.rows() * d {
                if !observed(i) {
                    continue;
                }
                let (row, col) = (i / d, i % d);
                let yv = y.as_slice()[i];
                let resid = yv - f[(row, col)];
                lik += log_normal_pdf(yv, f[(row, col)], var);
                if want_grad {
                    g_f[(row, col)] = scale * resid / var;
                    d_var += scale * (resid * resid / (2.0 * var * var) - 0.5 / var);
                }
            }
            if let Some(g) = grad.as_mut() {
                let mut upstream = g_f;
                for l in (0..self.layers.len()).rev() {
                    let (input, states) = &caches[l];
                    upstream = self.layers[l].backward(states, input, &upstream, &priors[l], &mut g.layers[l])?;
                }
            }
        }
        let mut kl = 0.0;
        for (layer, prior) in self.layers.iter().zip(&priors) {
            kl += layer.kl(prior)?;
        }
        let terms = VipElboTerms {
            expected_log_lik: scale * lik,
            kl,
        };
        if !terms.expected_log_lik.is_finite() {
            return Err(Error::non_finite("expected log-likelihood"));
        }
        if !terms.kl.is_finite() {
            return Err(Error::non_finite("inducing KL"));
        }
        if let Some(g) = grad.as_mut() {
            for ((layer, prior), gl) in self.layers.iter().zip(&priors).zip(&mut g.layers) {
                layer.kl_grad(prior, -1.0, gl);
            }
            g.likelihood_var.raw = d_var * self.likelihood_var.jacobian();
        }
        Ok((terms, grad))
    }

    /// Moment-matched predictive distribution from `n_samples` function
    /// samples.
    pub fn predict(&self, x: &Matrix, n_samples: usize, key: RngKey) -> Result<Prediction> {
        if n_samples == 0 {
            return Err(Error::Config("need at least one predictive sample".into()));
        }
        let priors = self.priors()?;
        let mut acc = MomentAccumulator::new(x.rows(), self.output_dim());
        for s in 0..n_samples {
            let (f, _) = self.forward(x, &priors, s, key, false)?;
            acc.push(f.as_slice());
        }
        Ok(acc.finish(self.likelihood_var.value()))
    }
}

impl Parameterized for VipModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamGroup, &mut f64)) {
        for layer in &mut self.layers {
            let m = layer.inducing.rows();
            for q in 0..layer.n_latents {
                layer.q_mean[q].iter_mut().for_each(|v| f(ParamGroup::Variational, v));
                for i in 0..m {
                    for j in 0..=i {
                        f(ParamGroup::Variational, &mut layer.q_chol[q][i * m + j]);
                    }
                }
            }
            f(ParamGroup::Hyper, &mut layer.variance.raw);
            layer.lengthscale.iter_mut().for_each(|p| f(ParamGroup::Hyper, &mut p.raw));
            layer.decay.iter_mut().for_each(|p| f(ParamGroup::Hyper, &mut p.raw));
            layer.amplitude.iter_mut().for_each(|v| f(ParamGroup::Hyper, v));
            layer.mean_weights.iter_mut().for_each(|v| f(ParamGroup::Other, v));
            layer.mean_bias.iter_mut().for_each(|v| f(ParamGroup::Other, v));
            if !layer.fixed_inducing {
                layer.inducing.as_mut_slice().iter_mut().for_each(|v| f(ParamGroup::Other, v));
            }
        }
        f(ParamGroup::Hyper, &mut self.likelihood_var.raw);
    }
}
