//! Embedding network and classifier head: a small multilayer perceptron with
//! tanh activations, a linear head `y = W^T x + b`, stabilized softmax, an
//! analytic backward pass, and momentum SGD. The embedding activation of the
//! last hidden layer is the feature vector used for affinity labeling and
//! center regularization; with zero hidden layers the feature is the raw
//! input.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::CenterBank;

/// Fully-connected layer, weight stored `[out, in]` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Seeded uniform init scaled by fan-in: entries drawn from
    /// `U(-1/sqrt(in_dim), 1/sqrt(in_dim))`.
    fn seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                row.iter()
                    .zip(x)
                    .fold(self.bias[o], |acc, (w, v)| acc + w * v)
            })
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// All trainable tensors: embedding layers (tanh after each) plus the linear
/// classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub hidden: Vec<Linear>,
    pub classifier: Linear,
}

impl ModelParams {
    /// Builds `input_dim -> hidden[0] -> ... -> hidden[n-1] -> head_outputs`
    /// with deterministic seeded initialization. `hidden_sizes` may be empty,
    /// in which case the embedding is the identity on the input.
    pub fn new(
        input_dim: usize,
        hidden_sizes: &[usize],
        head_outputs: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || head_outputs == 0 || hidden_sizes.contains(&0) {
            return Err(Error::Config("all layer sizes must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Vec::with_capacity(hidden_sizes.len());
        let mut prev = input_dim;
        for &h in hidden_sizes {
            hidden.push(Linear::seeded(prev, h, &mut rng));
            prev = h;
        }
        let classifier = Linear::seeded(prev, head_outputs, &mut rng);
        Ok(ModelParams { hidden, classifier })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map_or(self.classifier.in_dim, |l| l.in_dim)
    }

    /// Dimension of the embedding used for affinity and center loss.
    pub fn feature_dim(&self) -> usize {
        self.classifier.in_dim
    }

    pub fn head_dim(&self) -> usize {
        self.classifier.out_dim
    }

    /// Checks layer chaining, declared shapes, and finiteness.
    pub fn validate(&self) -> Result<()> {
        let mut prev = self.input_dim();
        for (i, l) in self.hidden.iter().enumerate() {
            if l.in_dim != prev {
                return Err(Error::Shape(format!(
                    "hidden layer {i} expects input {} but previous layer emits {prev}",
                    l.in_dim
                )));
            }
            Self::check_layer(l, &format!("hidden layer {i}"))?;
            prev = l.out_dim;
        }
        if self.classifier.in_dim != prev {
            return Err(Error::Shape(format!(
                "classifier expects input {} but embedding emits {prev}",
                self.classifier.in_dim
            )));
        }
        Self::check_layer(&self.classifier, "classifier")?;
        Ok(())
    }

    fn check_layer(l: &Linear, what: &str) -> Result<()> {
        if l.weight.len() != l.out_dim * l.in_dim || l.bias.len() != l.out_dim {
            return Err(Error::Shape(format!(
                "{what} tensor sizes disagree with declared dims"
            )));
        }
        if !l.is_finite() {
            return Err(Error::Numeric(format!(
                "{what} contains non-finite parameters"
            )));
        }
        Ok(())
    }
}

/// Intermediates retained by [`forward_trace`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Post-tanh activation of each hidden layer, in order.
    pub hidden_activations: Vec<Vec<f64>>,
    /// The embedding `x` (last hidden activation, or the input itself).
    pub feature: Vec<f64>,
    /// Head output `y = W^T x + b`.
    pub logits: Vec<f64>,
}

/// Forward pass returning the embedding and the head logits.
pub fn forward(params: &ModelParams, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let trace = forward_trace(params, input)?;
    Ok((trace.feature, trace.logits))
}

/// Forward pass keeping every intermediate activation.
pub fn forward_trace(params: &ModelParams, input: &[f64]) -> Result<ForwardTrace> {
    if input.len() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has dimension {}, model expects {}",
            input.len(),
            params.input_dim()
        )));
    }
    let mut hidden_activations = Vec::with_capacity(params.hidden.len());
    let mut cur = input.to_vec();
    for layer in &params.hidden {
        let mut a = layer.apply(&cur);
        for v in &mut a {
            *v = v.tanh();
        }
        hidden_activations.push(a.clone());
        cur = a;
    }
    let logits = params.classifier.apply(&cur);
    Ok(ForwardTrace {
        hidden_activations,
        feature: cur,
        logits,
    })
}

/// Numerically-stabilized softmax: exponents are shifted by the maximum
/// logit, so equal large logits cannot overflow.
pub fn softmax_prob(y: &[f64]) -> Result<Vec<f64>> {
    if y.is_empty() {
        return Err(Error::Input("softmax of an empty logit vector".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "softmax input contains non-finite logits".into(),
        ));
    }
    let y_max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = y.iter().map(|v| (v - y_max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Gradient buffers mirroring one [`Linear`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearGrads {
    fn zeros_like(l: &Linear) -> Self {
        LinearGrads {
            weight: vec![0.0; l.weight.len()],
            bias: vec![0.0; l.bias.len()],
        }
    }
}

/// Gradient buffers mirroring a full [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrads {
    pub hidden: Vec<LinearGrads>,
    pub classifier: LinearGrads,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ParamGrads {
            hidden: params.hidden.iter().map(LinearGrads::zeros_like).collect(),
            classifier: LinearGrads::zeros_like(&params.classifier),
        }
    }

    /// Elementwise accumulation. Shapes must match.
    pub fn accumulate(&mut self, other: &ParamGrads) -> Result<()> {
        let add = |dst: &mut LinearGrads, src: &LinearGrads| -> Result<()> {
            if dst.weight.len() != src.weight.len() || dst.bias.len() != src.bias.len() {
                return Err(Error::Shape("gradient accumulation shape mismatch".into()));
            }
            for (d, s) in dst.weight.iter_mut().zip(&src.weight) {
                *d += s;
            }
            for (d, s) in dst.bias.iter_mut().zip(&src.bias) {
                *d += s;
            }
            Ok(())
        };
        if self.hidden.len() != other.hidden.len() {
            return Err(Error::Shape(
                "gradient accumulation layer count mismatch".into(),
            ));
        }
        for (d, s) in self.hidden.iter_mut().zip(&other.hidden) {
            add(d, s)?;
        }
        add(&mut self.classifier, &other.classifier)
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self
            .hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
        {
            for v in g.weight.iter_mut().chain(g.bias.iter_mut()) {
                *v *= factor;
            }
        }
    }
}

/// Backpropagates `grad_y` (dL/dlogits) through the head and embedding.
/// `grad_x_extra` is injected directly into the feature gradient; the trainer
/// uses it to carry the center-loss pull on labeled samples.
pub fn backward(
    params: &ModelParams,
    input: &[f64],
    trace: &ForwardTrace,
    grad_y: &[f64],
    grad_x_extra: &[f64],
) -> Result<ParamGrads> {
    if grad_y.len() != params.head_dim() {
        return Err(Error::Shape(format!(
            "grad_y has dimension {}, head emits {}",
            grad_y.len(),
            params.head_dim()
        )));
    }
    if grad_x_extra.len() != params.feature_dim() {
        return Err(Error::Shape(format!(
            "grad_x_extra has dimension {}, feature dimension is {}",
            grad_x_extra.len(),
            params.feature_dim()
        )));
    }
    if input.len() != params.input_dim() {
        return Err(Error::Shape("input dimension mismatch in backward".into()));
    }
    let mut grads = ParamGrads::zeros_like(params);

    // Head: dL/dW[o,j] = grad_y[o] * x[j]; dL/db = grad_y; dL/dx = W^T grad_y.
    let x = &trace.feature;
    let head = &params.classifier;
    let mut grad_x = grad_x_extra.to_vec();
    for (o, &g) in grad_y.iter().enumerate() {
        grads.classifier.bias[o] = g;
        let row = o * head.in_dim;
        for j in 0..head.in_dim {
            grads.classifier.weight[row + j] = g * x[j];
            grad_x[j] += head.weight[row + j] * g;
        }
    }

    // Embedding layers in reverse; tanh'(z) = 1 - a^2 with a the activation.
    let mut grad_act = grad_x;
    for li in (0..params.hidden.len()).rev() {
        let layer = &params.hidden[li];
        let act = &trace.hidden_activations[li];
        let layer_input: &[f64] = if li == 0 {
            input
        } else {
            &trace.hidden_activations[li - 1]
        };
        let mut grad_prev = vec![0.0; layer.in_dim];
        for o in 0..layer.out_dim {
            let gp = grad_act[o] * (1.0 - act[o] * act[o]);
            grads.hidden[li].bias[o] = gp;
            let row = o * layer.in_dim;
            for j in 0..layer.in_dim {
                grads.hidden[li].weight[row + j] = gp * layer_input[j];
                grad_prev[j] += layer.weight[row + j] * gp;
            }
        }
        grad_act = grad_prev;
    }
    Ok(grads)
}

/// Momentum SGD state: one velocity buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: ParamGrads,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if !learning_rate.is_finite() || learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {learning_rate}"
            )));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            velocity: ParamGrads::zeros_like(params),
        })
    }
}

/// One update: `v <- momentum * v + grad; theta <- theta - lr * v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    opt: &mut OptimizerState,
) -> Result<()> {
    let step =
        |p: &mut Linear, g: &LinearGrads, v: &mut LinearGrads, lr: f64, mom: f64| -> Result<()> {
            if p.weight.len() != g.weight.len() || p.bias.len() != g.bias.len() {
                return Err(Error::Shape("sgd_step gradient shape mismatch".into()));
            }
            for ((pv, gv), vv) in p.weight.iter_mut().zip(&g.weight).zip(v.weight.iter_mut()) {
                *vv = mom * *vv + gv;
                *pv -= lr * *vv;
            }
            for ((pv, gv), vv) in p.bias.iter_mut().zip(&g.bias).zip(v.bias.iter_mut()) {
                *vv = mom * *vv + gv;
                *pv -= lr * *vv;
            }
            Ok(())
        };
    if params.hidden.len() != grads.hidden.len() || params.hidden.len() != opt.velocity.hidden.len()
    {
        return Err(Error::Shape("sgd_step layer count mismatch".into()));
    }
    let (lr, mom) = (opt.learning_rate, opt.momentum);
    for i in 0..params.hidden.len() {
        step(
            &mut params.hidden[i],
            &grads.hidden[i],
            &mut opt.velocity.hidden[i],
            lr,
            mom,
        )?;
    }
    step(
        &mut params.classifier,
        &grads.classifier,
        &mut opt.velocity.classifier,
        lr,
        mom,
    )
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

/// On-disk model container: parameters, class centers, and the hash of the
/// resolved config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub params: ModelParams,
    pub centers: CenterBank,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.params.validate()?;
    let text = serde_json::to_string_pretty(ckpt)
        .map_err(|e| Error::Numeric(format!("checkpoint serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads and validates a checkpoint: layer chaining, finiteness, and center
/// dimensions must all be consistent.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("checkpoint: {e}"),
    })?;
    ckpt.params.validate()?;
    let d = ckpt.params.feature_dim();
    if ckpt.centers.centers.iter().any(|c| c.len() != d) {
        return Err(Error::Shape(format!(
            "checkpoint centers do not match feature dimension {d}"
        )));
    }
    Ok(ckpt)
}
