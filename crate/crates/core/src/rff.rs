//! Weight-space deep models built from random features.
//!
//! Each layer maps its input through a random feature matrix `Phi` and a
//! Gaussian weight matrix `W`, adds a per-output bias and optionally
//! appends the model's original input. With ODE1 response features this
//! is the deep latent force model; with EQ Fourier features it is the
//! random-feature deep GP. The two differ only in [`FeatureKind`].
//!
//! Frequencies follow the fixed-noise variational scheme: `Omega = m +
//! s * eps` where `eps` is drawn once per Monte Carlo slot at construction
//! and never resampled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{eq_rff, eq_rff_backward, rfrf_backward, rfrf_matrix, FrequencySet, Ode1FeatureParams};
use crate::model::{check_targets, MomentAccumulator, ParamGroup, Parameterized, Prediction};
use crate::numerics::positive::{sigmoid, softplus, softplus_inv, DECAY_FLOOR, LENGTHSCALE_FLOOR, VARIANCE_FLOOR};
use crate::numerics::special::gauss_kl_grad;
use crate::numerics::{gauss_kl, log_normal_pdf, Matrix, PositiveParam, RngKey, RngStream};

const TAG_INIT: u64 = 0x5246_465f_494e_4954;
const TAG_FORWARD: u64 = 0x5246_465f_4657_4400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    /// First-order ODE random Fourier response features.
    Ode1,
    /// Exponentiated quadratic random Fourier features.
    Eq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrequencyMode {
    /// `Omega = m + s * eps` with a KL term against the prior.
    Variational,
    /// `Omega = m`, no frequency KL.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForwardMode {
    /// Per-row activations drawn from their induced Gaussian.
    TrainLocalReparam,
    /// One weight draw shared by all rows.
    TrainSampleWeights,
    /// Weights fixed at their means.
    TestMeanWeights,
    /// One weight draw shared by all rows.
    TestSampleWeights,
}

/// Kernel hyperparameters of one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum HeadHyper {
    Ode1 {
        /// Per input dimension.
        decay: Vec<PositiveParam>,
        /// Per latent force.
        lengthscale: Vec<PositiveParam>,
        /// Per latent force.
        sensitivity: Vec<f64>,
    },
    Eq {
        variance: PositiveParam,
        /// Per input dimension.
        lengthscale: Vec<PositiveParam>,
    },
}

/// A block of output columns sharing one feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffHead {
    pub hyper: HeadHyper,
    pub freq_mean: Vec<f64>,
    /// Raw values; the scale is `softplus(raw)`.
    pub freq_scale: Vec<f64>,
    /// `n_columns x outputs`, row-major.
    pub weight_mean: Vec<f64>,
    /// Raw values; the scale is `softplus(raw)`.
    pub weight_scale: Vec<f64>,
    pub outputs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffLayer {
    pub kind: FeatureKind,
    pub input_dim: usize,
    /// Latent forces; always 1 for EQ features.
    pub n_forces: usize,
    pub n_rf: usize,
    pub heads: Vec<RffHead>,
    /// Initial condition / bias, one per output.
    pub bias: Vec<f64>,
    pub concat_input: bool,
    pub frequency_mode: FrequencyMode,
    /// Fixed standard normal noise, one tensor per Monte Carlo slot.
    pub freq_noise: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffModel {
    pub input_dim: usize,
    pub layers: Vec<RffLayer>,
    pub likelihood_var: PositiveParam,
    /// Full Monte Carlo complement.
    pub n_mc: usize,
}

/// Initial values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RffInit {
    pub lengthscale: f64,
    pub decay: f64,
    /// EQ marginal variance.
    pub variance: f64,
    pub scale: f64,
    pub likelihood_var: f64,
}

impl Default for RffInit {
    fn default() -> Self {
        Self {
            lengthscale: 0.01,
            decay: 0.01,
            variance: 1.0,
            scale: 0.01,
            likelihood_var: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RffConfig {
    pub kind: FeatureKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub n_rf: usize,
    pub n_forces: usize,
    /// Append the model input to every hidden layer's output.
    pub concat_hidden: bool,
    /// Give each output of the final layer its own feature map.
    pub per_output_heads: bool,
    pub frequency_mode: FrequencyMode,
    pub n_mc: usize,
    pub init: RffInit,
}

impl RffConfig {
    /// Two-layer-style defaults for a given shape.
    pub fn new(kind: FeatureKind, input_dim: usize, output_dim: usize, hidden_dims: Vec<usize>) -> Self {
        Self {
            kind,
            input_dim,
            output_dim,
            hidden_dims,
            n_rf: 100,
            n_forces: 1,
            concat_hidden: true,
            per_output_heads: true,
            frequency_mode: FrequencyMode::Variational,
            n_mc: 100,
            init: RffInit::default(),
        }
    }
}

impl RffHead {
    fn weight(&self, k: usize, d: usize) -> f64 {
        self.weight_mean[k * self.outputs + d]
    }
}

impl RffLayer {
    /// Width of `Phi`.
    pub fn n_columns(&self) -> usize {
        2 * self.n_forces * self.n_rf
    }

    pub fn output_dim(&self) -> usize {
        self.heads.iter().map(|h| h.outputs).sum()
    }

    /// Prior variance of frequency entry `idx` under the head's current
    /// hyperparameters, and its derivative in the governing lengthscale
    /// together with that lengthscale's position.
    fn freq_prior(&self, head: &RffHead, idx: usize) -> (f64, f64, usize) {
        match &head.hyper {
            HeadHyper::Ode1 { lengthscale, .. } => {
                let q = (idx / self.n_rf) % self.n_forces;
                let l = lengthscale[q].value();
                (2.0 / (l * l), -4.0 / (l * l * l), q)
            }
            HeadHyper::Eq { lengthscale, .. } => {
                let m = idx / self.n_rf;
                let l = lengthscale[m].value();
                (1.0 / (l * l), -2.0 / (l * l * l), m)
            }
        }
    }

    /// `Omega = m + s * eps` for one head and Monte Carlo slot.
    pub fn sample_frequencies(&self, head: usize, slot: usize) -> FrequencySet {
        let h = &self.heads[head];
        let values = match self.frequency_mode {
            FrequencyMode::Fixed => h.freq_mean.clone(),
            FrequencyMode::Variational => {
                let eps = &self.freq_noise[slot % self.freq_noise.len()];
                h.freq_mean
                    .iter()
                    .zip(&h.freq_scale)
                    .zip(eps)
                    .map(|((m, s), e)| m + softplus(*s) * e)
                    .collect()
            }
        };
        FrequencySet {
            dims: self.input_dim,
            forces: self.n_forces,
            n_rf: self.n_rf,
            values,
        }
    }

    fn ode_params(&self, head: &RffHead) -> Ode1FeatureParams {
        match &head.hyper {
            HeadHyper::Ode1 {
                decay,
                lengthscale,
                sensitivity,
            } => Ode1FeatureParams {
                decay: decay.iter().map(|p| p.value()).collect(),
                lengthscale: lengthscale.iter().map(|p| p.value()).collect(),
                sensitivity: sensitivity.clone(),
                n_rf: self.n_rf,
            },
            HeadHyper::Eq { .. } => unreachable!("EQ head has no ODE parameters"),
        }
    }

    /// Feature matrix of one head at the given frequencies.
    pub fn features(&self, head: usize, input: &Matrix, omega: &FrequencySet) -> Result<Matrix> {
        if input.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "layer expects {} inputs, got {}",
                self.input_dim,
                input.cols()
            )));
        }
        let h = &self.heads[head];
        match (&h.hyper, self.kind) {
            (HeadHyper::Ode1 { .. }, FeatureKind::Ode1) => rfrf_matrix(input, &self.ode_params(h), omega),
            (HeadHyper::Eq { variance, .. }, FeatureKind::Eq) => {
                let om = Matrix::from_vec(self.input_dim, self.n_rf, omega.values.clone())?;
                eq_rff(input, &om, variance.value())
            }
            _ => Err(Error::Config("head hyperparameters do not match the feature kind".into())),
        }
    }

    /// Backpropagate `d_phi` through the feature map of one head, adding
    /// hyperparameter and frequency gradients into `grad` and returning the
    /// gradient with respect to the layer input.
    fn features_backward(
        &self,
        head: usize,
        slot: usize,
        input: &Matrix,
        omega: &FrequencySet,
        d_phi: &Matrix,
        grad: &mut RffLayer,
    ) -> Result<Matrix> {
        let h = &self.heads[head];
        let (d_input, d_freqs) = match &h.hyper {
            HeadHyper::Ode1 { decay, .. } => {
                let b = rfrf_backward(input, &self.ode_params(h), omega, d_phi)?;
                if let HeadHyper::Ode1 {
                    decay: gd,
                    sensitivity: gs,
                    ..
                } = &mut grad.heads[head].hyper
                {
                    for m in 0..self.input_dim {
                        gd[m].raw += b.d_decay[m] * decay[m].jacobian();
                    }
                    for q in 0..self.n_forces {
                        gs[q] += b.d_sensitivity[q];
                    }
                }
                (b.d_inputs, b.d_freqs)
            }
            HeadHyper::Eq { variance, .. } => {
                let om = Matrix::from_vec(self.input_dim, self.n_rf, omega.values.clone())?;
                let b = eq_rff_backward(input, &om, variance.value(), d_phi)?;
                if let HeadHyper::Eq { variance: gv, .. } = &mut grad.heads[head].hyper {
                    gv.raw += b.d_variance * variance.jacobian();
                }
                (b.d_inputs, b.d_freqs.into_vec())
            }
        };
        let gh = &mut grad.heads[head];
        for (g, d) in gh.freq_mean.iter_mut().zip(&d_freqs) {
            *g += d;
        }
        if self.frequency_mode == FrequencyMode::Variational {
            let eps = &self.freq_noise[slot % self.freq_noise.len()];
            for i in 0..d_freqs.len() {
                gh.freq_scale[i] += d_freqs[i] * eps[i] * sigmoid(h.freq_scale[i]);
            }
        }
        Ok(d_input)
    }

    /// KL of the layer's variational distributions from their priors.
    pub fn kl(&self) -> Result<(f64, f64)> {
        let mut kl_w = 0.0;
        let mut kl_f = 0.0;
        for h in &self.heads {
            for (m, s) in h.weight_mean.iter().zip(&h.weight_scale) {
                let sd = softplus(*s);
                kl_w += gauss_kl(*m, sd * sd, 0.0, 1.0)?;
            }
            if self.frequency_mode == FrequencyMode::Variational {
                for i in 0..h.freq_mean.len() {
                    let sd = softplus(h.freq_scale[i]);
                    let (pv, _, _) = self.freq_prior(h, i);
                    kl_f += gauss_kl(h.freq_mean[i], sd * sd, 0.0, pv)?;
                }
            }
        }
        Ok((kl_w, kl_f))
    }

    /// Add `coef * dKL` into `grad`.
    fn kl_grad(&self, coef: f64, grad: &mut RffLayer) {
        for (h, gh) in self.heads.iter().zip(&mut grad.heads) {
            for i in 0..h.weight_mean.len() {
                let sd = softplus(h.weight_scale[i]);
                let (dm, dva, _) = gauss_kl_grad(h.weight_mean[i], sd * sd, 0.0, 1.0);
                gh.weight_mean[i] += coef * dm;
                gh.weight_scale[i] += coef * dva * 2.0 * sd * sigmoid(h.weight_scale[i]);
            }
            if self.frequency_mode == FrequencyMode::Variational {
                for i in 0..h.freq_mean.len() {
                    let sd = softplus(h.freq_scale[i]);
                    let (pv, dpv, which) = self.freq_prior(h, i);
                    let (dm, dva, dvb) = gauss_kl_grad(h.freq_mean[i], sd * sd, 0.0, pv);
                    gh.freq_mean[i] += coef * dm;
                    gh.freq_scale[i] += coef * dva * 2.0 * sd * sigmoid(h.freq_scale[i]);
                    match (&h.hyper, &mut gh.hyper) {
                        (HeadHyper::Ode1 { lengthscale, .. }, HeadHyper::Ode1 { lengthscale: gl, .. })
                        | (HeadHyper::Eq { lengthscale, .. }, HeadHyper::Eq { lengthscale: gl, .. }) => {
                            gl[which].raw += coef * dvb * dpv * lengthscale[which].jacobian();
                        }
                        _ => unreachable!(),
                    }
                }
            }
        }
    }
}

struct HeadCache {
    omega: FrequencySet,
    phi: Matrix,
    /// Local reparameterization: per-row noise `N x outputs`; weight
    /// sampling: weight noise `n_columns x outputs`.
    noise: Vec<f64>,
    /// Local reparameterization standard deviations, `N x outputs`.
    sd: Vec<f64>,
}

struct LayerCache {
    input: Matrix,
    heads: Vec<HeadCache>,
}

/// One stochastic pass through a layer. `model_input` is appended when the
/// layer concatenates its input.
pub fn layer_forward(
    layer: &RffLayer,
    f_in: &Matrix,
    model_input: &Matrix,
    mode: ForwardMode,
    slot: usize,
    rng: &mut RngStream,
) -> Result<Matrix> {
    layer_forward_cached(layer, f_in, model_input, mode, slot, rng).map(|(out, _)| out)
}

fn layer_forward_cached(
    layer: &RffLayer,
    f_in: &Matrix,
    model_input: &Matrix,
    mode: ForwardMode,
    slot: usize,
    rng: &mut RngStream,
) -> Result<(Matrix, LayerCache)> {
    let n = f_in.rows();
    let d_out = layer.output_dim();
    let mut out = Matrix::zeros(n, d_out);
    let mut caches = Vec::with_capacity(layer.heads.len());
    let mut offset = 0;
    for (hi, h) in layer.heads.iter().enumerate() {
        let omega = layer.sample_frequencies(hi, slot);
        let phi = layer.features(hi, f_in, &omega)?;
        let k = phi.cols();
        let o = h.outputs;
        let mut noise = Vec::new();
        let mut sd = Vec::new();
        match mode {
            ForwardMode::TestMeanWeights => {
                for r in 0..n {
                    let row = phi.row(r);
                    for d in 0..o {
                        out[(r, offset + d)] = (0..k).map(|c| row[c] * h.weight(c, d)).sum::<f64>();
                    }
                }
            }
            ForwardMode::TrainSampleWeights | ForwardMode::TestSampleWeights => {
                noise = rng.normals(k * o);
                let w: Vec<f64> = (0..k * o)
                    .map(|i| h.weight_mean[i] + softplus(h.weight_scale[i]) * noise[i])
                    .collect();
                for r in 0..n {
                    let row = phi.row(r);
                    for d in 0..o {
                        out[(r, offset + d)] = (0..k).map(|c| row[c] * w[c * o + d]).sum::<f64>();
                    }
                }
            }
            ForwardMode::TrainLocalReparam => {
                noise = rng.normals(n * o);
                sd = vec![0.0; n * o];
                let var_w: Vec<f64> = h.weight_scale.iter().map(|s| softplus(*s).powi(2)).collect();
                for r in 0..n {
                    let row = phi.row(r);
                    for d in 0..o {
                        let mut mean = 0.0;
                        let mut var = 0.0;
                        for c in 0..k {
                            mean += row[c] * h.weight_mean[c * o + d];
                            var += row[c] * row[c] * var_w[c * o + d];
                        }
                        let s = var.sqrt();
                        sd[r * o + d] = s;
                        out[(r, offset + d)] = mean + s * noise[r * o + d];
                    }
                }
            }
        }
        caches.push(HeadCache { omega, phi, noise, sd });
        offset += o;
    }
    for r in 0..n {
        for (v, c) in out.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += c;
        }
    }
    let out = if layer.concat_input {
        out.hstack(model_input)?
    } else {
        out
    };
    Ok((
        out,
        LayerCache {
            input: f_in.clone(),
            heads: caches,
        },
    ))
}

fn layer_backward(
    layer: &RffLayer,
    cache: &LayerCache,
    d_out: &Matrix,
    mode: ForwardMode,
    slot: usize,
    grad: &mut RffLayer,
    need_input_grad: bool,
) -> Result<Option<Matrix>> {
    let n = d_out.rows();
    for r in 0..n {
        for (g, v) in grad.bias.iter_mut().zip(d_out.row(r)) {
            *g += v;
        }
    }
    let mut d_input: Option<Matrix> = None;
    let mut offset = 0;
    for (hi, h) in layer.heads.iter().enumerate() {
        let hc = &cache.heads[hi];
        let k = hc.phi.cols();
        let o = h.outputs;
        let mut d_phi = Matrix::zeros(n, k);
        let gh = &mut grad.heads[hi];
        match mode {
            ForwardMode::TestMeanWeights => {
                for r in 0..n {
                    let row = hc.phi.row(r);
                    let dr = d_phi.row_mut(r);
                    for d in 0..o {
                        let g = d_out[(r, offset + d)];
                        for c in 0..k {
                            dr[c] += g * h.weight_mean[c * o + d];
                            gh.weight_mean[c * o + d] += g * row[c];
                        }
                    }
                }
            }
            ForwardMode::TrainSampleWeights | ForwardMode::TestSampleWeights => {
                let w: Vec<f64> = (0..k * o)
                    .map(|i| h.weight_mean[i] + softplus(h.weight_scale[i]) * hc.noise[i])
                    .collect();
                let mut d_w = vec![0.0; k * o];
                for r in 0..n {
                    let row = hc.phi.row(r);
                    let dr = d_phi.row_mut(r);
                    for d in 0..o {
                        let g = d_out[(r, offset + d)];
                        for c in 0..k {
                            dr[c] += g * w[c * o + d];
                            d_w[c * o + d] += g * row[c];
                        }
                    }
                }
                for i in 0..k * o {
                    gh.weight_mean[i] += d_w[i];
                    gh.weight_scale[i] += d_w[i] * hc.noise[i] * sigmoid(h.weight_scale[i]);
                }
            }
            ForwardMode::TrainLocalReparam => {
                let beta: Vec<f64> = h.weight_scale.iter().map(|s| softplus(*s)).collect();
                for r in 0..n {
                    let row = hc.phi.row(r);
                    let dr = d_phi.row_mut(r);
                    for d in 0..o {
                        let g = d_out[(r, offset + d)];
                        let s = hc.sd[r * o + d];
                        let z = if s > 0.0 { g * hc.noise[r * o + d] / s } else { 0.0 };
                        for c in 0..k {
                            let i = c * o + d;
                            let b2 = beta[i] * beta[i];
                            dr[c] += g * h.weight_mean[i] + z * row[c] * b2;
                            gh.weight_mean[i] += g * row[c];
                            gh.weight_scale[i] += z * row[c] * row[c] * beta[i] * sigmoid(h.weight_scale[i]);
                        }
                    }
                }
            }
        }
        let di = layer.features_backward(hi, slot, &cache.input, &hc.omega, &d_phi, grad)?;
        if need_input_grad {
            d_input = Some(match d_input {
                None => di,
                Some(mut acc) => {
                    for (a, b) in acc.as_mut_slice().iter_mut().zip(di.as_slice()) {
                        *a += b;
                    }
                    acc
                }
            });
        }
        offset += o;
    }
    Ok(d_input)
}

/// Value of the bound broken into its terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    /// `(N / M) * mean over samples of the batch log-likelihood`.
    pub expected_log_lik: f64,
    pub kl_weights: f64,
    pub kl_frequencies: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.expected_log_lik - self.kl_weights - self.kl_frequencies
    }

    fn check(&self) -> Result<()> {
        for (name, v) in [
            ("expected log-likelihood", self.expected_log_lik),
            ("weight KL", self.kl_weights),
            ("frequency KL", self.kl_frequencies),
        ] {
            if !v.is_finite() {
                return Err(Error::non_finite(name));
            }
        }
        Ok(())
    }
}

impl RffModel {
    pub fn new(config: &RffConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.output_dim == 0 || config.n_rf == 0 || config.n_mc == 0 {
            return Err(Error::Config("dimensions, n_rf and n_mc must be positive".into()));
        }
        let n_forces = match config.kind {
            FeatureKind::Ode1 => config.n_forces.max(1),
            FeatureKind::Eq => 1,
        };
        let init = &config.init;
        if init.lengthscale <= LENGTHSCALE_FLOOR
            || init.decay <= DECAY_FLOOR
            || init.variance <= VARIANCE_FLOOR
            || init.scale <= 0.0
            || init.likelihood_var <= VARIANCE_FLOOR
        {
            return Err(Error::Config("initial values must exceed their floors".into()));
        }
        let key = RngKey::new(seed, 0);
        let n_layers = config.hidden_dims.len() + 1;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let last = l + 1 == n_layers;
            let input_dim = if l == 0 {
                config.input_dim
            } else {
                config.hidden_dims[l - 1] + if config.concat_hidden { config.input_dim } else { 0 }
            };
            let out_dim = if last { config.output_dim } else { config.hidden_dims[l] };
            if out_dim == 0 {
                return Err(Error::Config(format!("layer {l} has zero outputs")));
            }
            let head_outputs: Vec<usize> = if last && config.per_output_heads {
                vec![1; out_dim]
            } else {
                vec![out_dim]
            };
            let n_freqs = input_dim * n_forces * config.n_rf;
            let n_cols = 2 * n_forces * config.n_rf;
            let mut noise_rng = key.stream(&[TAG_INIT, l as u64, u64::MAX]);
            let freq_noise = (0..config.n_mc).map(|_| noise_rng.normals(n_freqs)).collect();
            let mut heads = Vec::with_capacity(head_outputs.len());
            for (hi, &o) in head_outputs.iter().enumerate() {
                let mut rng = key.stream(&[TAG_INIT, l as u64, hi as u64]);
                let (hyper, prior_sd): (HeadHyper, Vec<f64>) = match config.kind {
                    FeatureKind::Ode1 => {
                        let sens = rng.normals(n_forces);
                        let sd = (2.0f64).sqrt() / init.lengthscale;
                        (
                            HeadHyper::Ode1 {
                                decay: vec![PositiveParam::new(init.decay, DECAY_FLOOR); input_dim],
                                lengthscale: vec![PositiveParam::new(init.lengthscale, LENGTHSCALE_FLOOR); n_forces],
                                sensitivity: sens,
                            },
                            vec![sd; n_freqs],
                        )
                    }
                    FeatureKind::Eq => (
                        HeadHyper::Eq {
                            variance: PositiveParam::new(init.variance, VARIANCE_FLOOR),
                            lengthscale: vec![PositiveParam::new(init.lengthscale, LENGTHSCALE_FLOOR); input_dim],
                        },
                        vec![1.0 / init.lengthscale; n_freqs],
                    ),
                };
                let freq_mean = prior_sd.iter().map(|sd| sd * rng.normal()).collect();
                let fan = (n_cols as f64).sqrt();
                let weight_mean = (0..n_cols * o).map(|_| rng.normal() / fan).collect();
                let raw_scale = softplus_inv(init.scale);
                heads.push(RffHead {
                    hyper,
                    freq_mean,
                    freq_scale: vec![raw_scale; n_freqs],
                    weight_mean,
                    weight_scale: vec![raw_scale; n_cols * o],
                    outputs: o,
                });
            }
            layers.push(RffLayer {
                kind: config.kind,
                input_dim,
                n_forces,
                n_rf: config.n_rf,
                heads,
                bias: vec![0.0; out_dim],
                concat_input: !last && config.concat_hidden,
                frequency_mode: config.frequency_mode,
                freq_noise,
            });
        }
        Ok(Self {
            input_dim: config.input_dim,
            layers,
            likelihood_var: PositiveParam::new(init.likelihood_var, VARIANCE_FLOOR),
            n_mc: config.n_mc,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim())
    }

    /// A structurally identical model with every trainable value zeroed.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero_params();
        g
    }

    /// One function sample of the model output.
    pub fn sample(&self, x: &Matrix, mode: ForwardMode, sample: usize, key: RngKey) -> Result<Matrix> {
        Ok(self.forward(x, mode, sample, key, false)?.0)
    }

    fn forward(
        &self,
        x: &Matrix,
        mode: ForwardMode,
        sample: usize,
        key: RngKey,
        keep: bool,
    ) -> Result<(Matrix, Vec<LayerCache>)> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!("model expects {} inputs, got {}", self.input_dim, x.cols())));
        }
        let mut f = x.clone();
        let mut caches = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut rng = key.stream(&[TAG_FORWARD, sample as u64, l as u64]);
            let (out, cache) = layer_forward_cached(layer, &f, x, mode, sample, &mut rng)?;
            if keep {
                caches.push(cache);
            }
            f = out;
        }
        Ok((f, caches))
    }

    /// Total KL, split into weights and frequencies.
    pub fn kl(&self) -> Result<(f64, f64)> {
        let mut w = 0.0;
        let mut f = 0.0;
        for l in &self.layers {
            let (a, b) = l.kl()?;
            w += a;
            f += b;
        }
        Ok((w, f))
    }

    /// Monte Carlo estimate of the bound on a batch.
    #[allow(clippy::too_many_arguments)]
    pub fn elbo_terms(
        &self,
        x: &Matrix,
        y: &Matrix,
        mask: Option<&[bool]>,
        n_total: usize,
        n_mc: usize,
        mode: ForwardMode,
        key: RngKey,
    ) -> Result<ElboTerms> {
        Ok(self.elbo_impl(x, y, mask, n_total, n_mc, mode, key, false)?.0)
    }

    /// Bound and its gradient with respect to every raw parameter, returned
    /// as a gradient container.
    #[allow(clippy::too_many_arguments)]
    pub fn elbo_grad(
        &self,
        x: &Matrix,
        y: &Matrix,
        mask: Option<&[bool]>,
        n_total: usize,
        n_mc: usize,
        mode: ForwardMode,
        key: RngKey,
    ) -> Result<(f64, RffModel)> {
        let (terms, grad) = self.elbo_impl(x, y, mask, n_total, n_mc, mode, key, true)?;
        Ok((terms.elbo(), grad.expect("gradient requested")))
    }

    #[allow(clippy::too_many_arguments)]
    fn elbo_impl(
        &self,
        x: &Matrix,
        y: &Matrix,
        mask: Option<&[bool]>,
        n_total: usize,
        n_mc: usize,
        mode: ForwardMode,
        key: RngKey,
        want_grad: bool,
    ) -> Result<(ElboTerms, Option<RffModel>)> {
        check_targets(x, y, mask, self.output_dim())?;
        if n_mc == 0 {
            return Err(Error::Config("need at least one Monte Carlo sample".into()));
        }
        if n_total < x.rows() {
            return Err(Error::Config(format!("N_total {n_total} below batch size {}", x.rows())));
        }
        let observed = |i: usize| mask.is_none_or(|m| m[i]);
        let scale = n_total as f64 / x.rows() as f64 / n_mc as f64;
        let var = self.likelihood_var.value();
        let mut grad = if want_grad { Some(self.zeros_like()) } else { None };
        let mut lik = 0.0;
        let mut d_var = 0.0;
        let d = y.cols();
        for r in 0..n_mc {
            let (f, caches) = self.forward(x, mode, r, key, want_grad)?;
            let mut d_f = if want_grad { Some(Matrix::zeros(f.rows(), f.cols())) } else { None };
            for i in 0..x.rows() * d {
                if !observed(i) {
                    continue;
                }
                let (row, col) = (i / d, i % d);
                let fv = f[(row, col)];
                let resid = y.as_slice()[i] - fv;
                lik += log_normal_pdf(y.as_slice()[i], fv, var);
                if let Some(df) = d_f.as_mut() {
                    df[(row, col)] = scale * resid / var;
                    d_var += scale * (resid * resid / (2.0 * var * var) - 0.5 / var);
                }
            }
            if let (Some(g), Some(mut upstream)) = (grad.as_mut(), d_f) {
                for l in (0..self.layers.len()).rev() {
                    let layer = &self.layers[l];
                    let d_in =
                        layer_backward(layer, &caches[l], &upstream, mode, r, &mut g.layers[l], l > 0)?;
                    if let Some(d_in) = d_in {
                        upstream = d_in;
                    }
                }
            }
        }
        let (kl_w, kl_f) = self.kl()?;
        let terms = ElboTerms {
            expected_log_lik: scale * lik,
            kl_weights: kl_w,
            kl_frequencies: kl_f,
        };
        terms.check()?;
        if let Some(g) = grad.as_mut() {
            for (layer, gl) in self.layers.iter().zip(&mut g.layers) {
                layer.kl_grad(-1.0, gl);
            }
            g.likelihood_var.raw = d_var * self.likelihood_var.jacobian();
        }
        Ok((terms, grad))
    }

    /// Moment-matched predictive distribution from `n_samples` function
    /// samples.
    pub fn predict(&self, x: &Matrix, n_samples: usize, mode: ForwardMode, key: RngKey) -> Result<Prediction> {
        if n_samples == 0 {
            return Err(Error::Config("need at least one predictive sample".into()));
        }
        let mut acc = MomentAccumulator::new(x.rows(), self.output_dim());
        for r in 0..n_samples {
            let f = self.sample(x, mode, r, key)?;
            acc.push(f.as_slice());
        }
        Ok(acc.finish(self.likelihood_var.value()))
    }
}

impl Parameterized for RffModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamGroup, &mut f64)) {
        for layer in &mut self.layers {
            let variational_freqs = layer.frequency_mode == FrequencyMode::Variational;
            for h in &mut layer.heads {
                match &mut h.hyper {
                    HeadHyper::Ode1 {
                        decay,
                        lengthscale,
                        sensitivity,
                    } => {
                        decay.iter_mut().for_each(|p| f(ParamGroup::Hyper, &mut p.raw));
                        lengthscale.iter_mut().for_each(|p| f(ParamGroup::Hyper, &mut p.raw));
                        sensitivity.iter_mut().for_each(|v| f(ParamGroup::Hyper, v));
                    }
                    HeadHyper::Eq { variance, lengthscale } => {
                        f(ParamGroup::Hyper, &mut variance.raw);
                        lengthscale.iter_mut().for_each(|p| f(ParamGroup::Hyper, &mut p.raw));
                    }
                }
                h.freq_mean.iter_mut().for_each(|v| f(ParamGroup::Variational, v));
                if variational_freqs {
                    h.freq_scale.iter_mut().for_each(|v| f(ParamGroup::Variational, v));
                }
                h.weight_mean.iter_mut().for_each(|v| f(ParamGroup::Variational, v));
                h.weight_scale.iter_mut().for_each(|v| f(ParamGroup::Variational, v));
            }
            layer.bias.iter_mut().for_each(|v| f(ParamGroup::Other, v));
        }
        f(ParamGroup::Hyper, &mut self.likelihood_var.raw);
    }
}

/// Random-feature deep GP with EQ features: the same model class with the
/// feature map swapped.
pub fn dgp_rff_build(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, n_rf: usize, seed: u64) -> Result<RffModel> {
    let mut cfg = RffConfig::new(FeatureKind::Eq, input_dim, output_dim, hidden_dims);
    cfg.n_rf = n_rf;
    RffModel::new(&cfg, seed)
}
