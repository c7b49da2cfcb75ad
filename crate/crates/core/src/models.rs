//! Small differentiable classifiers: per-example loss, exact per-example
//! gradient, and parameter-subset masking.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::datasets::Example;
use crate::error::{Error, Result};

/// Counts exact-gradient evaluations across the process. Lets callers assert
/// that gradient-free code paths really are gradient-free.
static GRAD_EVALS: AtomicU64 = AtomicU64::new(0);

pub fn grad_eval_count() -> u64 {
    GRAD_EVALS.load(Ordering::Relaxed)
}

pub fn reset_grad_eval_count() {
    GRAD_EVALS.store(0, Ordering::Relaxed);
}

/// A flat vector of model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid_arg("parameter vector must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_arg("parameter vector has a non-finite entry"));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

/// Which architecture a spec describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LinearLogistic,
    Mlp,
}

/// Architecture description. `layer_sizes` is used by the MLP only and lists
/// every layer width including input and output, e.g. `[2, 3, 2]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub layer_sizes: Vec<usize>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

/// Parameter-subset selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSelector {
    All,
    LastLayer,
}

impl std::str::FromStr for MaskSelector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(MaskSelector::All),
            "last-layer" => Ok(MaskSelector::LastLayer),
            other => Err(Error::invalid_arg(format!("unknown mask `{other}`"))),
        }
    }
}

/// A selector resolved against a concrete spec into an index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMask {
    pub selector: MaskSelector,
    pub start: usize,
    pub end: usize,
}

impl ParamMask {
    pub fn resolve(selector: MaskSelector, spec: &ModelSpec) -> Result<Self> {
        let dim = spec.param_count()?;
        let (start, end) = match selector {
            MaskSelector::All => (0, dim),
            MaskSelector::LastLayer => {
                let shapes = spec.layer_shapes()?;
                let (out, inp) = *shapes.last().expect("validated spec has layers");
                (dim - out * (inp + 1), dim)
            }
        };
        Ok(Self { selector, start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn contains(&self, index: usize) -> bool {
        index >= self.start && index < self.end
    }

    /// Zero every entry outside the mask.
    pub fn apply(&self, values: &mut [f64]) {
        for v in &mut values[..self.start] {
            *v = 0.0;
        }
        for v in &mut values[self.end..] {
            *v = 0.0;
        }
    }
}

impl ModelSpec {
    pub fn linear_logistic(feature_dim: usize) -> Result<Self> {
        let spec = Self {
            kind: ModelKind::LinearLogistic,
            layer_sizes: Vec::new(),
            num_classes: 2,
            feature_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(
                "mlp needs at least input and output layer sizes".into(),
            ));
        }
        let spec = Self {
            kind: ModelKind::Mlp,
            feature_dim: layer_sizes[0],
            num_classes: *layer_sizes.last().unwrap(),
            layer_sizes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::InvalidSpec("feature_dim must be positive".into()));
        }
        match self.kind {
            ModelKind::LinearLogistic => {
                if self.num_classes != 2 {
                    return Err(Error::InvalidSpec(
                        "linear-logistic requires exactly 2 classes".into(),
                    ));
                }
            }
            ModelKind::Mlp => {
                if self.layer_sizes.len() < 2 {
                    return Err(Error::InvalidSpec(
                        "mlp layer_sizes must list input and output widths".into(),
                    ));
                }
                if self.layer_sizes.contains(&0) {
                    return Err(Error::InvalidSpec("mlp layer sizes must be positive".into()));
                }
                if self.layer_sizes[0] != self.feature_dim {
                    return Err(Error::InvalidSpec(
                        "mlp input width must equal feature_dim".into(),
                    ));
                }
                if *self.layer_sizes.last().unwrap() != self.num_classes {
                    return Err(Error::InvalidSpec(
                        "mlp output width must equal num_classes".into(),
                    ));
                }
                if self.num_classes < 2 {
                    return Err(Error::InvalidSpec("need at least 2 classes".into()));
                }
            }
        }
        Ok(())
    }

    /// `(out, in)` shape of every weight layer, in forward order.
    pub fn layer_shapes(&self) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        match self.kind {
            ModelKind::LinearLogistic => Ok(vec![(1, self.feature_dim)]),
            ModelKind::Mlp => Ok(self
                .layer_sizes
                .windows(2)
                .map(|w| (w[1], w[0]))
                .collect()),
        }
    }

    /// Total parameter count: each layer stores `out * in` weights then `out`
    /// biases, flattened in forward order.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .layer_shapes()?
            .iter()
            .map(|(out, inp)| out * (inp + 1))
            .sum())
    }

    fn check_example(&self, params: &ParamVector, ex: &Example) -> Result<()> {
        let expected = self.param_count()?;
        if params.dim() != expected {
            return Err(Error::DimensionMismatch {
                context: "parameter vector".into(),
                expected,
                actual: params.dim(),
            });
        }
        if ex.features.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                context: format!("features of example {}", ex.id),
                expected: self.feature_dim,
                actual: ex.features.len(),
            });
        }
        if ex.label >= self.num_classes {
            return Err(Error::invalid_arg(format!(
                "label {} outside [0, {})",
                ex.label, self.num_classes
            )));
        }
        Ok(())
    }

    /// Cross-entropy loss of one example. Always finite and non-negative for
    /// finite inputs; the logistic case is evaluated in softplus form and the
    /// softmax case through log-sum-exp.
    pub fn loss(&self, params: &ParamVector, ex: &Example) -> Result<f64> {
        self.check_example(params, ex)?;
        match self.kind {
            ModelKind::LinearLogistic => {
                let z = logistic_logit(params, &ex.features);
                Ok(binary_cross_entropy(z, ex.label))
            }
            ModelKind::Mlp => {
                let logits = self.mlp_forward(params, &ex.features).pop().unwrap();
                Ok(softmax_cross_entropy(&logits, ex.label))
            }
        }
    }

    /// Exact gradient of `loss` with respect to the parameters. Entries
    /// outside `mask` are exactly zero.
    pub fn grad(&self, params: &ParamVector, ex: &Example, mask: &ParamMask) -> Result<ParamVector> {
        let mut out = vec![0.0; params.dim()];
        self.grad_into(params, ex, mask, &mut out)?;
        Ok(ParamVector { values: out })
    }

    /// Gradient written into a caller-provided buffer (overwritten, not
    /// accumulated). Hot paths reuse the buffer to avoid reallocation.
    pub fn grad_into(
        &self,
        params: &ParamVector,
        ex: &Example,
        mask: &ParamMask,
        out: &mut [f64],
    ) -> Result<()> {
        self.check_example(params, ex)?;
        if out.len() != params.dim() {
            return Err(Error::DimensionMismatch {
                context: "gradient buffer".into(),
                expected: params.dim(),
                actual: out.len(),
            });
        }
        GRAD_EVALS.fetch_add(1, Ordering::Relaxed);
        out.fill(0.0);
        match self.kind {
            ModelKind::LinearLogistic => {
                let d = self.feature_dim;
                let z = logistic_logit(params, &ex.features);
                let residual = stable_sigmoid(z) - ex.label as f64;
                for (o, x) in out[..d].iter_mut().zip(&ex.features) {
                    *o = residual * x;
                }
                out[d] = residual;
            }
            ModelKind::Mlp => self.mlp_backward(params, ex, out),
        }
        mask.apply(out);
        Ok(())
    }

    /// Pre-activations and activations of every layer; the last entry holds
    /// the output logits.
    fn mlp_forward(&self, params: &ParamVector, features: &[f64]) -> Vec<Vec<f64>> {
        let shapes = self.layer_shapes().expect("validated");
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(shapes.len());
        let mut input: Vec<f64> = features.to_vec();
        let mut offset = 0;
        for (layer, &(out_w, in_w)) in shapes.iter().enumerate() {
            let weights = &params.values[offset..offset + out_w * in_w];
            let biases = &params.values[offset + out_w * in_w..offset + out_w * (in_w + 1)];
            offset += out_w * (in_w + 1);
            let mut z = vec![0.0; out_w];
            for (row, zr) in z.iter_mut().enumerate() {
                let w_row = &weights[row * in_w..(row + 1) * in_w];
                let mut acc = biases[row];
                for (w, x) in w_row.iter().zip(&input) {
                    acc += w * x;
                }
                *zr = acc;
            }
            let is_output = layer + 1 == shapes.len();
            if !is_output {
                input = z.iter().map(|&v| v.max(0.0)).collect();
                activations.push(z);
            } else {
                activations.push(z.clone());
            }
        }
        activations
    }

    fn mlp_backward(&self, params: &ParamVector, ex: &Example, out: &mut [f64]) {
        let shapes = self.layer_shapes().expect("validated");
        let pre_acts = self.mlp_forward(params, &ex.features);

        // Post-activation inputs of each layer.
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(shapes.len());
        inputs.push(ex.features.clone());
        for z in &pre_acts[..pre_acts.len() - 1] {
            inputs.push(z.iter().map(|&v| v.max(0.0)).collect());
        }

        // Output layer: softmax minus one-hot label.
        let logits = pre_acts.last().unwrap();
        let mut delta = stable_softmax(logits);
        delta[ex.label] -= 1.0;

        let mut offsets = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for &(out_w, in_w) in &shapes {
            offsets.push(offset);
            offset += out_w * (in_w + 1);
        }

        for layer in (0..shapes.len()).rev() {
            let (out_w, in_w) = shapes[layer];
            let base = offsets[layer];
            let input = &inputs[layer];
            for row in 0..out_w {
                let g = delta[row];
                let w_out = &mut out[base + row * in_w..base + (row + 1) * in_w];
                for (o, x) in w_out.iter_mut().zip(input) {
                    *o = g * x;
                }
            }
            for row in 0..out_w {
                out[base + out_w * in_w + row] = delta[row];
            }
            if layer > 0 {
                let weights = &params.values[base..base + out_w * in_w];
                let mut upstream = vec![0.0; in_w];
                for (row, &g) in delta.iter().enumerate() {
                    let w_row = &weights[row * in_w..(row + 1) * in_w];
                    for (u, w) in upstream.iter_mut().zip(w_row) {
                        *u += g * w;
                    }
                }
                // ReLU derivative gates on the previous pre-activation.
                let prev_z = &pre_acts[layer - 1];
                delta = upstream
                    .iter()
                    .zip(prev_z)
                    .map(|(&u, &z)| if z > 0.0 { u } else { 0.0 })
                    .collect();
            }
        }
    }
}

fn logistic_logit(params: &ParamVector, features: &[f64]) -> f64 {
    let d = features.len();
    let mut z = params.values[d];
    for (w, x) in params.values[..d].iter().zip(features) {
        z += w * x;
    }
    z
}

/// `sigma(z)` without overflow for any finite `z`.
pub fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a single logit, in softplus form:
/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
fn binary_cross_entropy(z: f64, label: usize) -> f64 {
    z.max(0.0) - z * label as f64 + (-z.abs()).exp().ln_1p()
}

fn stable_log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    m + s.ln()
}

fn softmax_cross_entropy(logits: &[f64], label: usize) -> f64 {
    stable_log_sum_exp(logits) - logits[label]
}

fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
