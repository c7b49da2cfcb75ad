//! Mini-batch training that emits one checkpoint per epoch plus the
//! per-example loss matrix used by the loss-only influence methods.
//!
//! Batch updates apply the *sum* of per-example gradients, matching the
//! per-example update algebra the influence estimators assume; pick the
//! learning rate with the batch size in mind.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::models::{MaskSelector, ModelSpec, ParamMask, ParamVector};
use crate::numeric::stream_rng;

const STREAM_INIT: u64 = 100;
const STREAM_SHUFFLE_BASE: u64 = 1000;

/// Optimizer choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid_arg(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Full training recipe: optimizer, schedule-free learning rate, batching,
/// epoch count, and the seed controlling initialization and shuffling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            weight_decay: 0.0,
            batch_size,
            epochs,
            seed,
        }
    }

    pub fn adam(learning_rate: f64, batch_size: usize, epochs: usize, seed: u64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate, batch_size, epochs, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::invalid_arg("learning_rate must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid_arg(format!("{name} must be in [0, 1)")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid_arg("weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid_arg("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid_arg("epochs must be positive"));
        }
        Ok(())
    }
}

/// Plain gradient step: `theta <- theta - lr * g`.
pub fn sgd_step(params: &mut ParamVector, grads: &[f64], learning_rate: f64) {
    for (p, g) in params.values_mut().iter_mut().zip(grads) {
        *p -= learning_rate * g;
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

/// Bias-corrected Adam step with decoupled weight decay.
pub fn adam_step(
    params: &mut ParamVector,
    grads: &[f64],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let prev = *p;
        *p = prev - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon)
            - cfg.learning_rate * cfg.weight_decay * prev;
    }
}

/// Stateful wrapper dispatching to `sgd_step` / `adam_step`.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, dim: usize) -> Self {
        let adam = match cfg.kind {
            OptimizerKind::Adam => Some(AdamState::new(dim)),
            OptimizerKind::Sgd => None,
        };
        Self { cfg: cfg.clone(), adam }
    }

    pub fn step(&mut self, params: &mut ParamVector, grads: &[f64]) {
        match self.cfg.kind {
            OptimizerKind::Sgd => sgd_step(params, grads, self.cfg.learning_rate),
            OptimizerKind::Adam => {
                adam_step(params, grads, self.adam.as_mut().unwrap(), &self.cfg)
            }
        }
    }
}

/// The ordered checkpoint sequence of one training run. Index `i` holds the
/// parameters after `i` epochs; index 0 is the initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub checkpoints: Vec<ParamVector>,
    pub spec: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub learning_rates: Vec<f64>,
}

impl Trajectory {
    /// Highest checkpoint index (the `T` in a length `T + 1` trajectory).
    pub fn t_max(&self) -> usize {
        self.checkpoints.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.checkpoints[0].dim()
    }

    /// Restrict to the inclusive checkpoint index range `[start, end]`.
    pub fn window(&self, start: usize, end: usize) -> Result<Trajectory> {
        if start >= end || end > self.t_max() {
            return Err(Error::invalid_arg(format!(
                "window {start}..{end} invalid for trajectory with T={}",
                self.t_max()
            )));
        }
        Ok(Trajectory {
            checkpoints: self.checkpoints[start..=end].to_vec(),
            spec: self.spec.clone(),
            optimizer: self.optimizer.clone(),
            learning_rates: self.learning_rates[start..end].to_vec(),
        })
    }

    /// Restrict every checkpoint to the masked coordinate range. Zeroth-order
    /// scoring on the restricted trajectory matches gram-backed scoring with
    /// the same mask.
    pub fn masked(&self, mask: &ParamMask) -> Result<Trajectory> {
        if mask.end > self.dim() || mask.is_empty() {
            return Err(Error::invalid_arg(format!(
                "mask {}..{} invalid for parameter dim {}",
                mask.start,
                mask.end,
                self.dim()
            )));
        }
        let checkpoints = self
            .checkpoints
            .iter()
            .map(|c| ParamVector::new(c.values()[mask.start..mask.end].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trajectory {
            checkpoints,
            spec: self.spec.clone(),
            optimizer: self.optimizer.clone(),
            learning_rates: self.learning_rates.clone(),
        })
    }
}

/// Per-example loss at every checkpoint, row `i` = all examples at checkpoint
/// `i`, columns in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossMatrix {
    values: Vec<f64>,
    rows: usize,
    example_ids: Vec<u64>,
}

impl LossMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, example_ids: Vec<u64>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid_arg("loss matrix needs at least one row"));
        }
        let cols = example_ids.len();
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "loss row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid_arg(format!("loss row {i} has a non-finite entry")));
            }
            values.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            values,
            example_ids,
        })
    }

    pub(crate) fn from_flat(values: Vec<f64>, rows: usize, example_ids: Vec<u64>) -> Self {
        debug_assert_eq!(values.len(), rows * example_ids.len());
        Self { values, rows, example_ids }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.example_ids.len()
    }

    pub fn example_ids(&self) -> &[u64] {
        &self.example_ids
    }

    pub fn flat(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    /// Loss trajectory of the example in column `k`: one value per checkpoint.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.values[i * self.cols() + k]).collect()
    }

    pub fn column_of_id(&self, id: u64) -> Option<usize> {
        self.example_ids.iter().position(|&x| x == id)
    }

    /// Restrict to the inclusive checkpoint index range `[start, end]`.
    pub fn window(&self, start: usize, end: usize) -> Result<LossMatrix> {
        if start >= end || end >= self.rows {
            return Err(Error::invalid_arg(format!(
                "window {start}..{end} invalid for loss matrix with {} rows",
                self.rows
            )));
        }
        let c = self.cols();
        Ok(LossMatrix {
            values: self.values[start * c..(end + 1) * c].to_vec(),
            rows: end - start + 1,
            example_ids: self.example_ids.clone(),
        })
    }
}

/// Scaled-normal initialization: each layer's weights and biases are drawn
/// with standard deviation `1 / sqrt(fan_in)`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    let shapes = spec.layer_shapes()?;
    let mut rng = stream_rng(seed, STREAM_INIT);
    let mut values = Vec::with_capacity(spec.param_count()?);
    for (out, inp) in shapes {
        let std = 1.0 / (inp as f64).sqrt();
        for _ in 0..out * (inp + 1) {
            let z: f64 = rng.sample(StandardNormal);
            values.push(z * std);
        }
    }
    ParamVector::new(values)
}

fn check_conforms(ds: &Dataset, spec: &ModelSpec) -> Result<()> {
    if ds.feature_dim() != spec.feature_dim {
        return Err(Error::DimensionMismatch {
            context: "dataset feature_dim vs model".into(),
            expected: spec.feature_dim,
            actual: ds.feature_dim(),
        });
    }
    if ds.num_classes() != spec.num_classes {
        return Err(Error::DimensionMismatch {
            context: "dataset num_classes vs model".into(),
            expected: spec.num_classes,
            actual: ds.num_classes(),
        });
    }
    Ok(())
}

/// Train by mini-batch gradient descent or Adam, appending one checkpoint per
/// epoch. Deterministic: initialization and per-epoch shuffles are pure
/// functions of the seed, and batch gradients accumulate in index order.
pub fn train(ds: &Dataset, spec: &ModelSpec, opt: &OptimizerConfig) -> Result<Trajectory> {
    opt.validate()?;
    spec.validate()?;
    check_conforms(ds, spec)?;

    let mut params = init_params(spec, opt.seed)?;
    let dim = params.dim();
    let mut optimizer = Optimizer::new(opt, dim);
    let mask = ParamMask::resolve(MaskSelector::All, spec)?;
    let mut checkpoints = Vec::with_capacity(opt.epochs + 1);
    checkpoints.push(params.clone());

    let n = ds.len();
    let mut grad_buf = vec![0.0; dim];
    let mut batch_grad = vec![0.0; dim];

    for epoch in 0..opt.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(opt.seed, STREAM_SHUFFLE_BASE + epoch as u64));
        for (step, batch) in order.chunks(opt.batch_size).enumerate() {
            batch_grad.fill(0.0);
            for &i in batch {
                spec.grad_into(&params, &ds.examples()[i], &mask, &mut grad_buf)?;
                for (b, g) in batch_grad.iter_mut().zip(&grad_buf) {
                    *b += g;
                }
            }
            optimizer.step(&mut params, &batch_grad);
            if !params.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
        }
        checkpoints.push(params.clone());
    }

    Ok(Trajectory {
        checkpoints,
        spec: spec.clone(),
        optimizer: opt.clone(),
        learning_rates: vec![opt.learning_rate; opt.epochs],
    })
}

/// Evaluate every checkpoint on every example. Rows are computed in parallel;
/// each entry is an independent per-example loss, so the result is bitwise
/// reproducible regardless of worker count.
pub fn compute_loss_matrix(traj: &Trajectory, ds: &Dataset) -> Result<LossMatrix> {
    check_conforms(ds, &traj.spec)?;
    let rows: Vec<Vec<f64>> = (0..traj.checkpoints.len())
        .into_par_iter()
        .map(|i| {
            ds.examples()
                .iter()
                .map(|ex| traj.spec.loss(&traj.checkpoints[i], ex))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    LossMatrix::from_rows(rows, ds.ids())
}
