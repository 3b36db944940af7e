//! Parameter plumbing shared by every trainable model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Coarse grouping used by the training warm-up freezes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Means and scales of variational distributions.
    Variational,
    /// Kernel hyperparameters and the likelihood variance.
    Hyper,
    /// Everything else: biases, mean functions, inducing inputs.
    Other,
}

/// A model whose trainable scalars can be visited in a fixed order.
///
/// The same visitor applied to a gradient container (a structurally
/// identical value holding derivatives) yields the gradient in the same
/// order as the parameters.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamGroup, &mut f64));

    fn param_vec(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, v| out.push(*v));
        out
    }

    fn param_groups(&mut self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        self.visit_params(&mut |g, _| out.push(g));
        out
    }

    /// Overwrite parameters from `values`, which must have the visit length.
    fn set_param_vec(&mut self, values: &[f64]) {
        let mut i = 0;
        self.visit_params(&mut |_, v| {
            *v = values[i];
            i += 1;
        });
        assert_eq!(i, values.len(), "parameter vector length mismatch");
    }

    fn zero_params(&mut self) {
        self.visit_params(&mut |_, v| *v = 0.0);
    }
}

/// Per-point predictive moments, one column per output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Matrix,
    pub var: Matrix,
}

/// Online mean and variance over samples of an `N x D` quantity.
pub(crate) struct MomentAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl MomentAccumulator {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; rows * cols],
            m2: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn push(&mut self, sample: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    /// Mean and population variance plus `noise`.
    pub fn finish(self, noise: f64) -> Prediction {
        let n = self.count as f64;
        let var = self.m2.iter().map(|s| s / n + noise).collect();
        Prediction {
            mean: Matrix::from_vec(self.rows, self.cols, self.mean).expect("accumulator shape"),
            var: Matrix::from_vec(self.rows, self.cols, var).expect("accumulator shape"),
        }
    }
}

/// Validate a batch against a model with `output_dim` outputs.
pub(crate) fn check_targets(x: &Matrix, y: &Matrix, mask: Option<&[bool]>, output_dim: usize) -> Result<()> {
    if x.rows() != y.rows() || y.cols() != output_dim {
        return Err(Error::Shape(format!(
            "{} inputs and {}x{} targets for a {}-output model",
            x.rows(),
            y.rows(),
            y.cols(),
            output_dim
        )));
    }
    if let Some(m) = mask {
        if m.len() != y.rows() * y.cols() {
            return Err(Error::Shape(format!("mask has {} entries for {} targets", m.len(), y.rows() * y.cols())));
        }
    }
    if x.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}
