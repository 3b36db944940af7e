//! Stochastic variational optimisation with AdamW.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ParamGroup, Parameterized};
use crate::numerics::{Matrix, RngKey};
use crate::rff::{ForwardMode, RffModel};
use crate::vip::VipModel;

const TAG_BATCH: u64 = 0x5452_4e5f_4241_5443;

/// Optimiser and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// Rows per minibatch; `0` means the whole training set.
    pub batch_size: usize,
    /// `(first iteration, Monte Carlo count)` pairs; the count in force at
    /// iteration `i` is that of the last pair whose threshold is `<= i`.
    pub n_mc_schedule: Vec<(usize, usize)>,
    pub freeze_variational_until: usize,
    pub freeze_hyperparams_until: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            iterations: 1000,
            batch_size: 0,
            n_mc_schedule: vec![(0, 1), (100, 100)],
            freeze_variational_until: 200,
            freeze_hyperparams_until: 300,
            seed: 0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    /// Warm-up schedule for random-feature models: one sample for the first
    /// 100 iterations, then `n_mc`.
    pub fn rff(n_mc: usize) -> Self {
        Self {
            n_mc_schedule: vec![(0, 1), (100, n_mc)],
            ..Self::default()
        }
    }

    /// Inducing-point models: a constant sample count and no freezes.
    pub fn vip(n_samples: usize) -> Self {
        Self {
            n_mc_schedule: vec![(0, n_samples)],
            freeze_variational_until: 0,
            freeze_hyperparams_until: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self, n_rows: usize) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be nonnegative, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("moment decays must lie in [0, 1) and epsilon be positive".into()));
        }
        if self.batch_size > n_rows {
            return Err(Error::Config(format!("batch_size {} exceeds {} training rows", self.batch_size, n_rows)));
        }
        match self.n_mc_schedule.first() {
            Some((0, _)) => {}
            _ => return Err(Error::Config("n_mc_schedule must start at iteration 0".into())),
        }
        for w in self.n_mc_schedule.windows(2) {
            if w[1].0 < w[0].0 {
                return Err(Error::Config("n_mc_schedule thresholds must be nondecreasing".into()));
            }
        }
        if self.n_mc_schedule.iter().any(|&(_, n)| n == 0) {
            return Err(Error::Config("n_mc_schedule counts must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn n_mc_at(&self, iteration: usize) -> usize {
        self.n_mc_schedule
            .iter()
            .take_while(|(t, _)| *t <= iteration)
            .last()
            .map_or(1, |&(_, n)| n)
    }

    pub fn is_frozen(&self, group: ParamGroup, iteration: usize) -> bool {
        match group {
            ParamGroup::Variational => iteration < self.freeze_variational_until,
            ParamGroup::Hyper => iteration < self.freeze_hyperparams_until,
            ParamGroup::Other => false,
        }
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates taken so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One AdamW update minimising the objective whose gradient is `grads`.
/// Entries with `frozen[i]` set keep their value and moments. A non-finite
/// gradient leaves everything untouched and is reported.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    frozen: Option<&[bool]>,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || frozen.is_some_and(|f| f.len() != params.len()) {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::non_finite(format!("gradient entry {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    for i in 0..params.len() {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + config.epsilon) + config.weight_decay * params[i]);
    }
    Ok(())
}

/// A model whose bound can be estimated and differentiated on a batch.
pub trait Trainable: Parameterized + Clone {
    /// ELBO estimate and its gradient container.
    fn elbo_and_grad(
        &self,
        x: &Matrix,
        y: &Matrix,
        mask: Option<&[bool]>,
        n_total: usize,
        n_mc: usize,
        key: RngKey,
    ) -> Result<(f64, Self)>;
}

impl Trainable for RffModel {
    fn elbo_and_grad(&self, x: &Matrix, y: &Matrix, mask: Option<&[bool]>, n_total: usize, n_mc: usize, key: RngKey) -> Result<(f64, Self)> {
        self.elbo_grad(x, y, mask, n_total, n_mc, ForwardMode::TrainLocalReparam, key)
    }
}

impl Trainable for VipModel {
    fn elbo_and_grad(&self, x: &Matrix, y: &Matrix, mask: Option<&[bool]>, n_total: usize, n_mc: usize, key: RngKey) -> Result<(f64, Self)> {
        self.elbo_grad(x, y, mask, n_total, n_mc, key)
    }
}

/// Training inputs and targets with an optional per-entry mask.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub x: Matrix,
    pub y: Matrix,
    pub mask: Option<Vec<bool>>,
}

impl TrainingSet {
    pub fn new(x: Matrix, y: Matrix, mask: Option<Vec<bool>>) -> Result<Self> {
        if x.rows() != y.rows() || x.rows() == 0 {
            return Err(Error::Shape(format!("{} input rows and {} target rows", x.rows(), y.rows())));
        }
        if let Some(m) = &mask {
            if m.len() != y.rows() * y.cols() {
                return Err(Error::Shape("mask does not match targets".into()));
            }
        }
        Ok(Self { x, y, mask })
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    fn batch(&self, idx: &[usize]) -> (Matrix, Matrix, Option<Vec<bool>>) {
        let d = self.y.cols();
        let mask = self
            .mask
            .as_ref()
            .map(|m| idx.iter().flat_map(|&i| m[i * d..(i + 1) * d].iter().copied()).collect());
        (self.x.select_rows(idx), self.y.select_rows(idx), mask)
    }
}

/// Row indices of the minibatch used at `iteration`. Each epoch is a fresh
/// permutation drawn from a stream keyed by the epoch number, so the
/// sequence does not depend on where a run was resumed.
pub fn minibatch_indices(n: usize, batch_size: usize, seed: u64, iteration: usize) -> Vec<usize> {
    if batch_size == 0 || batch_size >= n {
        return (0..n).collect();
    }
    let per_epoch = n / batch_size;
    let epoch = iteration / per_epoch;
    let k = iteration % per_epoch;
    let mut perm: Vec<usize> = (0..n).collect();
    RngKey::new(seed, epoch as u64).stream(&[TAG_BATCH]).shuffle(&mut perm);
    perm[k * batch_size..(k + 1) * batch_size].to_vec()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub negative_elbo: f64,
    pub wall_time_ms: f64,
}

/// Resumable optimiser state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next iteration to run.
    pub iteration: usize,
    pub adam: AdamState,
}

/// Run `config.iterations` iterations starting from `state` (or from
/// scratch). `observer` sees the model and state after every iteration and
/// may stop the run by returning an error.
pub fn train_from<M: Trainable>(
    model: &mut M,
    data: &TrainingSet,
    config: &TrainConfig,
    state: Option<TrainState>,
    observer: &mut dyn FnMut(&M, &TrainState, &TraceEntry) -> Result<()>,
) -> Result<(Vec<TraceEntry>, TrainState)> {
    config.validate(data.rows())?;
    let groups = model.param_groups();
    let mut state = state.unwrap_or_else(|| TrainState {
        iteration: 0,
        adam: AdamState::new(groups.len()),
    });
    if state.adam.m.len() != groups.len() {
        return Err(Error::Checkpoint(format!(
            "optimiser state has {} entries for a model with {} parameters",
            state.adam.m.len(),
            groups.len()
        )));
    }
    let start = Instant::now();
    let n = data.rows();
    let mut trace = Vec::with_capacity(config.iterations);
    let end = state.iteration + config.iterations;
    while state.iteration < end {
        let it = state.iteration;
        let idx = minibatch_indices(n, config.batch_size, config.seed, it);
        let (bx, by, bmask) = data.batch(&idx);
        let key = RngKey::new(config.seed, it as u64);
        let (elbo, mut grad) = model.elbo_and_grad(&bx, &by, bmask.as_deref(), n, config.n_mc_at(it), key)?;
        let mut g: Vec<f64> = grad.param_vec().into_iter().map(|v| -v).collect();
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("gradient entry {i} at iteration {it}")));
        }
        if let Some(c) = config.clip_norm {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > c {
                g.iter_mut().for_each(|v| *v *= c / norm);
            }
        }
        let frozen: Vec<bool> = groups.iter().map(|&gr| config.is_frozen(gr, it)).collect();
        let mut params = model.param_vec();
        optimizer_step(&mut params, &g, Some(&frozen), &mut state.adam, config)?;
        model.set_param_vec(&params);
        state.iteration += 1;
        let entry = TraceEntry {
            iteration: it,
            negative_elbo: -elbo,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        observer(model, &state, &entry)?;
        trace.push(entry);
    }
    Ok((trace, state))
}

/// Train from scratch and return the trace.
pub fn train<M: Trainable>(model: &mut M, data: &TrainingSet, config: &TrainConfig) -> Result<Vec<TraceEntry>> {
    Ok(train_from(model, data, config, None, &mut |_, _, _| Ok(()))?.0)
}

/// Trailing moving average of the negative ELBO column.
pub fn moving_average(trace: &[TraceEntry], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(trace.len().saturating_sub(w - 1));
    let mut sum = 0.0;
    for (i, e) in trace.iter().enumerate() {
        sum += e.negative_elbo;
        if i >= w {
            sum -= trace[i - w].negative_elbo;
        }
        if i + 1 >= w {
            out.push(sum / w as f64);
        }
    }
    out
}
