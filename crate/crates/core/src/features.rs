//! Random feature maps.
//!
//! Two families are provided. EQ random Fourier features approximate the
//! exponentiated quadratic kernel; ODE1 random Fourier response features
//! are the same Fourier basis pushed through the Green's function
//! `e^{-gamma t}` of a first-order ODE with zero initial condition.
//!
//! Real feature layout for ODE1 maps with `Q` forces and `N_RF` features
//! per force: column `q * N_RF + s` holds `Re phi_{q,s}` and column
//! `Q * N_RF + q * N_RF + s` holds `Im phi_{q,s}`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Frequencies indexed by input dimension, latent force and feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencySet {
    pub dims: usize,
    pub forces: usize,
    pub n_rf: usize,
    pub values: Vec<f64>,
}

impl FrequencySet {
    pub fn new(dims: usize, forces: usize, n_rf: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims * forces * n_rf {
            return Err(Error::Shape(format!(
                "frequency set {dims}x{forces}x{n_rf} given {} values",
                values.len()
            )));
        }
        Ok(Self {
            dims,
            forces,
            n_rf,
            values,
        })
    }

    #[inline]
    pub fn index(&self, m: usize, q: usize, s: usize) -> usize {
        (m * self.forces + q) * self.n_rf + s
    }

    #[inline]
    pub fn get(&self, m: usize, q: usize, s: usize) -> f64 {
        self.values[self.index(m, q, s)]
    }
}

/// Hyperparameters of an ODE1 feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Ode1FeatureParams {
    /// One decay rate per input dimension.
    pub decay: Vec<f64>,
    /// One lengthscale per latent force; only enters through the
    /// frequency prior `N(0, 2 / l_q^2)`.
    pub lengthscale: Vec<f64>,
    /// One sensitivity per latent force. The sign is kept: each force
    /// block is scaled by `S_q / sqrt(N_RF)`.
    pub sensitivity: Vec<f64>,
    pub n_rf: usize,
}

impl Ode1FeatureParams {
    pub fn n_forces(&self) -> usize {
        self.sensitivity.len()
    }

    /// Number of real feature columns, `2 Q N_RF`.
    pub fn n_columns(&self) -> usize {
        2 * self.n_forces() * self.n_rf
    }

    /// Prior variance of the frequencies of force `q`.
    pub fn frequency_prior_var(&self, q: usize) -> f64 {
        2.0 / (self.lengthscale[q] * self.lengthscale[q])
    }

    fn check(&self, freqs: &FrequencySet, dims: usize) -> Result<()> {
        let q = self.n_forces();
        if self.decay.len() != dims || self.lengthscale.len() != q {
            return Err(Error::Shape(format!(
                "ODE1 parameters: {} decays, {} lengthscales, {} sensitivities for {dims} inputs",
                self.decay.len(),
                self.lengthscale.len(),
                q
            )));
        }
        if freqs.dims != dims || freqs.forces != q || freqs.n_rf != self.n_rf {
            return Err(Error::Shape(format!(
                "frequency set {}x{}x{} does not match {dims}x{q}x{}",
                freqs.dims, freqs.forces, freqs.n_rf, self.n_rf
            )));
        }
        Ok(())
    }
}

/// `(e^{j w t} - e^{-gamma t}) / (gamma + j w)`.
#[inline]
pub fn ode1_feature(t: f64, gamma: f64, omega: f64) -> Complex64 {
    let (s, c) = (omega * t).sin_cos();
    let num = Complex64::new(c - (-gamma * t).exp(), s);
    num / Complex64::new(gamma, omega)
}

/// Value and partial derivatives of [`ode1_feature`].
#[derive(Clone, Copy, Debug)]
pub struct Ode1Partials {
    pub value: Complex64,
    pub d_t: Complex64,
    pub d_gamma: Complex64,
    pub d_omega: Complex64,
}

/// [`ode1_feature`] with derivatives in `t`, `gamma` and `omega`, given
/// a precomputed `e^{-gamma t}`.
#[inline]
pub fn ode1_partials(t: f64, gamma: f64, omega: f64, decay_exp: f64) -> Ode1Partials {
    let (s, c) = (omega * t).sin_cos();
    let e1 = Complex64::new(c, s);
    let inv_d = Complex64::new(gamma, omega).inv();
    let value = (e1 - decay_exp) * inv_d;
    let j = Complex64::i();
    Ode1Partials {
        value,
        d_t: (j * omega * e1 + gamma * decay_exp) * inv_d,
        d_gamma: (t * decay_exp - value) * inv_d,
        d_omega: j * (t * e1 - value) * inv_d,
    }
}

/// `sqrt(variance / N_RF) [cos(X Omega), sin(X Omega)]` for `Omega` of
/// shape `P x N_RF`.
pub fn eq_rff(inputs: &Matrix, freqs: &Matrix, variance: f64) -> Result<Matrix> {
    if inputs.cols() != freqs.rows() {
        return Err(Error::Shape(format!(
            "inputs have {} columns, frequencies {} rows",
            inputs.cols(),
            freqs.rows()
        )));
    }
    let n_rf = freqs.cols();
    let z = inputs.matmul(freqs)?;
    let amp = (variance / n_rf as f64).sqrt();
    let mut out = Matrix::zeros(inputs.rows(), 2 * n_rf);
    for n in 0..inputs.rows() {
        let zr = z.row(n);
        let row = out.row_mut(n);
        for k in 0..n_rf {
            let (s, c) = zr[k].sin_cos();
            row[k] = amp * c;
            row[n_rf + k] = amp * s;
        }
    }
    Ok(out)
}

/// Gradients of a scalar through [`eq_rff`].
pub(crate) struct EqBackward {
    pub d_inputs: Matrix,
    pub d_freqs: Matrix,
    pub d_variance: f64,
}

pub(crate) fn eq_rff_backward(
    inputs: &Matrix,
    freqs: &Matrix,
    variance: f64,
    grad: &Matrix,
) -> Result<EqBackward> {
    let n_rf = freqs.cols();
    let p = inputs.cols();
    let z = inputs.matmul(freqs)?;
    let amp = (variance / n_rf as f64).sqrt();
    let mut gz = Matrix::zeros(inputs.rows(), n_rf);
    let mut d_variance = 0.0;
    for n in 0..inputs.rows() {
        let g = grad.row(n);
        let zr = z.row(n);
        let gzr = gz.row_mut(n);
        for k in 0..n_rf {
            let (s, c) = zr[k].sin_cos();
            gzr[k] = amp * (g[n_rf + k] * c - g[k] * s);
            d_variance += g[k] * c + g[n_rf + k] * s;
        }
    }
    d_variance *= amp / (2.0 * variance);
    let d_inputs = gz.matmul(&freqs.transpose())?;
    let d_freqs = inputs.transpose().matmul(&gz)?;
    debug_assert_eq!(d_freqs.rows(), p);
    Ok(EqBackward {
        d_inputs,
        d_freqs,
        d_variance,
    })
}

/// Complex feature vector `sum_m phi(x_m, gamma_m, omega_m)`, with force
/// blocks scaled by `S_q / sqrt(N_RF)`.
pub fn rfrf_vector(x: &[f64], params: &Ode1FeatureParams, freqs: &FrequencySet) -> Result<Vec<Complex64>> {
    params.check(freqs, x.len())?;
    let (nq, nrf) = (params.n_forces(), params.n_rf);
    let mut out = vec![Complex64::new(0.0, 0.0); nq * nrf];
    for (m, &xm) in x.iter().enumerate() {
        let gamma = params.decay[m];
        for q in 0..nq {
            for s in 0..nrf {
                out[q * nrf + s] += ode1_feature(xm, gamma, freqs.get(m, q, s));
            }
        }
    }
    let root = (nrf as f64).sqrt();
    for q in 0..nq {
        let scale = params.sensitivity[q] / root;
        for v in &mut out[q * nrf..(q + 1) * nrf] {
            *v *= scale;
        }
    }
    Ok(out)
}

/// `[Re z; Im z]`.
pub fn real_split(z: &[Complex64]) -> Vec<f64> {
    z.iter().map(|c| c.re).chain(z.iter().map(|c| c.im)).collect()
}

/// Inverse of [`real_split`].
pub fn real_join(v: &[f64]) -> Result<Vec<Complex64>> {
    if v.len() % 2 != 0 {
        return Err(Error::Shape(format!("odd length {} cannot be split", v.len())));
    }
    let k = v.len() / 2;
    Ok((0..k).map(|i| Complex64::new(v[i], v[k + i])).collect())
}

/// Real ODE1 feature matrix, one row per input row.
pub fn rfrf_matrix(inputs: &Matrix, params: &Ode1FeatureParams, freqs: &FrequencySet) -> Result<Matrix> {
    let p = inputs.cols();
    params.check(freqs, p)?;
    let (nq, nrf) = (params.n_forces(), params.n_rf);
    let half = nq * nrf;
    let root = (nrf as f64).sqrt();
    let mut out = Matrix::zeros(inputs.rows(), 2 * half);
    let mut acc = vec![Complex64::new(0.0, 0.0); half];
    let inv_d: Vec<Complex64> = (0..p * half)
        .map(|i| Complex64::new(params.decay[i / half], freqs.values[i]).inv())
        .collect();
    for n in 0..inputs.rows() {
        acc.iter_mut().for_each(|a| *a = Complex64::new(0.0, 0.0));
        for m in 0..p {
            let t = inputs[(n, m)];
            let e2 = (-params.decay[m] * t).exp();
            let base = m * half;
            for k in 0..half {
                let (s, c) = (freqs.values[base + k] * t).sin_cos();
                acc[k] += Complex64::new(c - e2, s) * inv_d[base + k];
            }
        }
        let row = out.row_mut(n);
        for q in 0..nq {
            let scale = params.sensitivity[q] / root;
            for s in 0..nrf {
                let k = q * nrf + s;
                row[k] = scale * acc[k].re;
                row[half + k] = scale * acc[k].im;
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar through [`rfrf_matrix`].
pub(crate) struct RfrfBackward {
    pub d_inputs: Matrix,
    /// Same layout as [`FrequencySet::values`].
    pub d_freqs: Vec<f64>,
    pub d_decay: Vec<f64>,
    pub d_sensitivity: Vec<f64>,
}

pub(crate) fn rfrf_backward(
    inputs: &Matrix,
    params: &Ode1FeatureParams,
    freqs: &FrequencySet,
    grad: &Matrix,
) -> Result<RfrfBackward> {
    let p = inputs.cols();
    params.check(freqs, p)?;
    let (nq, nrf) = (params.n_forces(), params.n_rf);
    let half = nq * nrf;
    let root = (nrf as f64).sqrt();
    let mut d_inputs = Matrix::zeros(inputs.rows(), p);
    let mut d_freqs = vec![0.0; freqs.values.len()];
    let mut d_decay = vec![0.0; p];
    let mut d_sensitivity = vec![0.0; nq];
    // Upstream gradient as one complex number per feature: for a real loss
    // dL/dx = Re(conj-weighted g * dphi/dx) with g = G_re - j G_im.
    let mut g = vec![Complex64::new(0.0, 0.0); half];
    let scale: Vec<f64> = params.sensitivity.iter().map(|s| s / root).collect();
    for n in 0..inputs.rows() {
        let gr = grad.row(n);
        for k in 0..half {
            g[k] = Complex64::new(gr[k], -gr[half + k]);
        }
        for m in 0..p {
            let t = inputs[(n, m)];
            let gamma = params.decay[m];
            let e2 = (-gamma * t).exp();
            let base = m * half;
            let mut dx = 0.0;
            let mut dgamma = 0.0;
            for q in 0..nq {
                let mut sens = 0.0;
                for s in 0..nrf {
                    let k = q * nrf + s;
                    let pd = ode1_partials(t, gamma, freqs.values[base + k], e2);
                    let gk = g[k];
                    sens += (gk * pd.value).re;
                    dx += scale[q] * (gk * pd.d_t).re;
                    dgamma += scale[q] * (gk * pd.d_gamma).re;
                    d_freqs[base + k] += scale[q] * (gk * pd.d_omega).re;
                }
                d_sensitivity[q] += sens / root;
            }
            d_inputs[(n, m)] = dx;
            d_decay[m] += dgamma;
        }
    }
    Ok(RfrfBackward {
        d_inputs,
        d_freqs,
        d_decay,
        d_sensitivity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{integrate, QuadOptions, RngStream};
    use std::f64::consts::PI;

    fn params(p: usize, q: usize, n_rf: usize) -> Ode1FeatureParams {
        Ode1FeatureParams {
            decay: (0..p).map(|m| 0.5 + 0.3 * m as f64).collect(),
            lengthscale: vec![1.0; q],
            sensitivity: (0..q).map(|i| 1.0 - 0.7 * i as f64).collect(),
            n_rf,
        }
    }

    fn freqs(p: usize, q: usize, n_rf: usize, seed: u64) -> FrequencySet {
        let mut r = RngStream::new(seed, 0);
        FrequencySet::new(p, q, n_rf, r.normals(p * q * n_rf)).unwrap()
    }

    #[test]
    fn ode1_feature_examples() {
        assert_eq!(ode1_feature(0.0, 0.7, 2.0), Complex64::new(0.0, 0.0));
        let v = ode1_feature(1.0, 1.0, 0.0);
        assert!((v.re - (1.0 - (-1f64).exp())).abs() < 1e-15 && v.im == 0.0);
        assert!((v.re - 0.632_120_6).abs() < 1e-7);
    }

    #[test]
    fn ode1_feature_matches_convolution_quadrature() {
        let (t, g, w) = (2.0, 0.5, 1.3);
        let o = QuadOptions::default();
        let re = integrate(|tau| (-g * (t - tau)).exp() * (w * tau).cos(), 0.0, t, o).unwrap();
        let im = integrate(|tau| (-g * (t - tau)).exp() * (w * tau).sin(), 0.0, t, o).unwrap();
        let v = ode1_feature(t, g, w);
        assert!((v.re - re).abs() < 1e-8 && (v.im - im).abs() < 1e-8);
    }

    #[test]
    fn partials_match_differences() {
        let h = 1e-6;
        for &(t, g, w) in &[(0.3, 0.8, -1.2), (2.0, 0.01, 5.0), (1.1, 3.0, 0.0)] {
            let pd = ode1_partials(t, g, w, (-g * t).exp());
            let fd_t = (ode1_feature(t + h, g, w) - ode1_feature(t - h, g, w)) / (2.0 * h);
            let fd_g = (ode1_feature(t, g + h, w) - ode1_feature(t, g - h, w)) / (2.0 * h);
            let fd_w = (ode1_feature(t, g, w + h) - ode1_feature(t, g, w - h)) / (2.0 * h);
            assert!((pd.d_t - fd_t).norm() < 1e-8);
            assert!((pd.d_gamma - fd_g).norm() < 1e-8);
            assert!((pd.d_omega - fd_w).norm() < 1e-8);
        }
    }

    #[test]
    fn eq_rff_examples() {
        let x = Matrix::zeros(1, 2);
        let om = Matrix::from_fn(2, 4, |i, j| (i + j) as f64 - 1.5);
        let phi = eq_rff(&x, &om, 1.0).unwrap();
        assert_eq!(&phi.row(0)[..4], &[0.5; 4]);
        assert_eq!(&phi.row(0)[4..], &[0.0; 4]);
        let phi = eq_rff(&Matrix::column(&[PI / 2.0]), &Matrix::column(&[1.0]), 1.0).unwrap();
        assert!(phi[(0, 0)].abs() < 1e-15 && (phi[(0, 1)] - 1.0).abs() < 1e-15);
        assert!(eq_rff(&x, &Matrix::zeros(3, 1), 1.0).is_err());
    }

    fn eq_mc_kernel(lengthscale: f64, r: f64) -> f64 {
        let n_rf = 100_000;
        let mut rng = RngStream::new(3, 1);
        let om: Vec<f64> = rng.normals(n_rf).iter().map(|e| e / lengthscale).collect();
        let om = Matrix::from_vec(1, n_rf, om).unwrap();
        let phi = eq_rff(&Matrix::column(&[0.2, 0.2 + r]), &om, 1.0).unwrap();
        phi.row(0).iter().zip(phi.row(1)).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn eq_rff_monte_carlo_kernel() {
        // Frequencies ~ N(0, l^-2) give exp(-r^2 / (2 l^2)).
        let k = eq_mc_kernel(1.0, 0.7);
        let want = (-0.49f64 / 2.0).exp();
        assert!((k - want).abs() / want < 0.02, "{k} vs {want}");
        // exp(-r^2 / l'^2) is the same kernel with l = l' / sqrt 2.
        let k = eq_mc_kernel(std::f64::consts::FRAC_1_SQRT_2, 0.7);
        assert!((k - 0.612_626).abs() / 0.612_626 < 0.02, "{k}");
    }

    #[test]
    fn rfrf_vector_examples() {
        let pr = params(2, 2, 3);
        let fr = freqs(2, 2, 3, 1);
        let zero = rfrf_vector(&[0.0, 0.0], &pr, &fr).unwrap();
        assert!(zero.iter().all(|c| c.norm() == 0.0));

        let x1 = 0.8;
        let both = rfrf_vector(&[x1, 0.0], &pr, &fr).unwrap();
        let p1 = Ode1FeatureParams {
            decay: vec![pr.decay[0]],
            ..pr.clone()
        };
        let f1 = FrequencySet::new(1, 2, 3, fr.values[..6].to_vec()).unwrap();
        let single = rfrf_vector(&[x1], &p1, &f1).unwrap();
        assert_eq!(both, single);
        for q in 0..2 {
            for s in 0..3 {
                let want = ode1_feature(x1, p1.decay[0], f1.get(0, q, s)) * (p1.sensitivity[q] / 3f64.sqrt());
                assert!((single[q * 3 + s] - want).norm() < 1e-15);
            }
        }
        assert!(rfrf_vector(&[0.0], &pr, &fr).is_err());
    }

    #[test]
    fn real_split_layout() {
        assert_eq!(real_split(&[Complex64::new(1.0, 2.0)]), vec![1.0, 2.0]);
        let z = vec![Complex64::new(1.0, 0.0), Complex64::new(-3.0, 0.0)];
        assert_eq!(&real_split(&z)[2..], &[0.0, 0.0]);
        let z = vec![Complex64::new(1.5, -2.0), Complex64::new(0.25, 7.0)];
        assert_eq!(real_join(&real_split(&z)).unwrap(), z);
        assert!(real_join(&[1.0]).is_err());
    }

    #[test]
    fn rfrf_matrix_rows_match_vectors() {
        let pr = params(3, 2, 4);
        let fr = freqs(3, 2, 4, 5);
        let x = Matrix::from_fn(5, 3, |i, j| 0.1 * (i * 3 + j) as f64 - 0.4);
        let phi = rfrf_matrix(&x, &pr, &fr).unwrap();
        assert_eq!((phi.rows(), phi.cols()), (5, pr.n_columns()));
        for n in 0..5 {
            let v = real_split(&rfrf_vector(x.row(n), &pr, &fr).unwrap());
            for (a, b) in phi.row(n).iter().zip(&v) {
                assert!((a - b).abs() < 1e-14);
            }
        }
        let perm = [4, 2, 0, 1, 3];
        let phi_p = rfrf_matrix(&x.select_rows(&perm), &pr, &fr).unwrap();
        assert_eq!(phi_p, phi.select_rows(&perm));
    }

    fn dot(a: &Matrix, b: &Matrix) -> f64 {
        a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn rfrf_backward_matches_differences() {
        let pr = params(2, 2, 3);
        let fr = freqs(2, 2, 3, 9);
        let x = Matrix::from_fn(4, 2, |i, j| 0.3 * i as f64 + 0.2 * j as f64 - 0.1);
        let mut r = RngStream::new(11, 0);
        let g = Matrix::from_vec(4, pr.n_columns(), r.normals(4 * pr.n_columns())).unwrap();
        let loss = |x: &Matrix, pr: &Ode1FeatureParams, fr: &FrequencySet| dot(&rfrf_matrix(x, pr, fr).unwrap(), &g);
        let b = rfrf_backward(&x, &pr, &fr, &g).unwrap();
        let h = 1e-6;
        let close = |a: f64, fd: f64| assert!((a - fd).abs() < 1e-6 * fd.abs().max(1.0), "{a} vs {fd}");
        for i in 0..x.as_slice().len() {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up.as_mut_slice()[i] += h;
            dn.as_mut_slice()[i] -= h;
            close(b.d_inputs.as_slice()[i], (loss(&up, &pr, &fr) - loss(&dn, &pr, &fr)) / (2.0 * h));
        }
        for i in 0..fr.values.len() {
            let (mut up, mut dn) = (fr.clone(), fr.clone());
            up.values[i] += h;
            dn.values[i] -= h;
            close(b.d_freqs[i], (loss(&x, &pr, &up) - loss(&x, &pr, &dn)) / (2.0 * h));
        }
        for m in 0..2 {
            let (mut up, mut dn) = (pr.clone(), pr.clone());
            up.decay[m] += h;
            dn.decay[m] -= h;
            close(b.d_decay[m], (loss(&x, &up, &fr) - loss(&x, &dn, &fr)) / (2.0 * h));
        }
        for q in 0..2 {
            let (mut up, mut dn) = (pr.clone(), pr.clone());
            up.sensitivity[q] += h;
            dn.sensitivity[q] -= h;
            close(b.d_sensitivity[q], (loss(&x, &up, &fr) - loss(&x, &dn, &fr)) / (2.0 * h));
        }
    }

    #[test]
    fn eq_backward_matches_differences() {
        let mut r = RngStream::new(2, 2);
        let x = Matrix::from_vec(3, 2, r.normals(6)).unwrap();
        let om = Matrix::from_vec(2, 4, r.normals(8)).unwrap();
        let g = Matrix::from_vec(3, 8, r.normals(24)).unwrap();
        let var = 1.7;
        let loss = |x: &Matrix, om: &Matrix, v: f64| dot(&eq_rff(x, om, v).unwrap(), &g);
        let b = eq_rff_backward(&x, &om, var, &g).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up.as_mut_slice()[i] += h;
            dn.as_mut_slice()[i] -= h;
            let fd = (loss(&up, &om, var) - loss(&dn, &om, var)) / (2.0 * h);
            assert!((b.d_inputs.as_slice()[i] - fd).abs() < 1e-7);
        }
        for i in 0..8 {
            let (mut up, mut dn) = (om.clone(), om.clone());
            up.as_mut_slice()[i] += h;
            dn.as_mut_slice()[i] -= h;
            let fd = (loss(&x, &up, var) - loss(&x, &dn, var)) / (2.0 * h);
            assert!((b.d_freqs.as_slice()[i] - fd).abs() < 1e-7);
        }
        let fd = (loss(&x, &om, var + h) - loss(&x, &om, var - h)) / (2.0 * h);
        assert!((b.d_variance - fd).abs() < 1e-7);
    }

    proptest::proptest! {
        #[test]
        fn conjugate_symmetry(t in 0.0f64..20.0, g in 1e-3f64..50.0, w in -50.0f64..50.0) {
            let a = ode1_feature(t, g, -w);
            let b = ode1_feature(t, g, w).conj();
            proptest::prop_assert!((a - b).norm() <= 1e-15 * (1.0 + b.norm()));
        }

        #[test]
        fn bounded_magnitude(t in 0.0f64..100.0, g in 1e-4f64..50.0, w in -100.0f64..100.0) {
            let bound = 2.0 / (g * g + w * w).sqrt();
            proptest::prop_assert!(ode1_feature(t, g, w).norm() <= bound * (1.0 + 1e-12));
        }
    }
}
