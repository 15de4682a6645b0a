//! Small fully connected classifier: forward pass with cached activations and
//! exact backpropagation from logit gradients to parameter gradients.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// Uniform in [−1/√fan_in, 1/√fan_in], zero biases.
    #[default]
    FanInSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[d, h_1, …, h_L, K]`.
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub init: InitRule,
    pub seed: u64,
}

impl ModelConfig {
    /// `[d, 32, K]` with tanh.
    pub fn default_for(input_dim: usize, n_classes: usize, seed: u64) -> Self {
        Self {
            layer_dims: vec![input_dim, 32, n_classes],
            activation: Activation::Tanh,
            init: InitRule::FanInSqrt,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::config("layer_dims needs at least input and output sizes"));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::config("every layer size must be at least 1"));
        }
        Ok(())
    }
}

/// One affine layer; `weights` is `n_out × n_in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.n_in)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

/// Network parameters. Also used as the gradient container, since gradients
/// share the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            activation: self.activation,
            layers: self.layers.iter().map(|l| Layer::zeros(l.n_in, l.n_out)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.n_out));
        dims
    }

    /// All values in serialization order: per layer, weights row-major then biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn n_values(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// CSV with header `layer,kind,row,col,value`. Rows go layer by layer,
    /// weights row-major (`kind = w`) then biases (`kind = b`, `col = 0`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,row,col,value\n");
        for (li, layer) in self.layers.iter().enumerate() {
            for r in 0..layer.n_out {
                for c in 0..layer.n_in {
                    let _ = writeln!(out, "{li},w,{r},{c},{:.16e}", layer.weights[r * layer.n_in + c]);
                }
            }
            for (r, b) in layer.bias.iter().enumerate() {
                let _ = writeln!(out, "{li},b,{r},0,{b:.16e}");
            }
        }
        out
    }

    /// Inverse of [`MlpParams::to_csv`]; layer shapes are recovered from the
    /// largest row/column indices and must chain.
    pub fn from_csv(text: &str, activation: Activation) -> Result<Self> {
        struct Entry {
            layer: usize,
            is_weight: bool,
            row: usize,
            col: usize,
            value: f64,
        }
        let mut entries = Vec::new();
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == "layer,kind,row,col,value" => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    reason: "expected header layer,kind,row,col,value".into(),
                })
            }
        }
        for (idx, line) in lines {
            let line_no = idx + 1;
            let bad = |reason: &str| Error::Parse {
                line: line_no,
                reason: reason.to_string(),
            };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let is_weight = match f[1] {
                "w" => true,
                "b" => false,
                _ => return Err(bad("kind must be w or b")),
            };
            let parse_idx = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid index"));
            let value: f64 = f[4].parse().map_err(|_| bad("non-numeric value"))?;
            if !value.is_finite() {
                return Err(bad("non-finite value"));
            }
            entries.push(Entry {
                layer: parse_idx(f[0])?,
                is_weight,
                row: parse_idx(f[2])?,
                col: parse_idx(f[3])?,
                value,
            });
        }
        let n_layers = entries.iter().map(|e| e.layer + 1).max().unwrap_or(0);
        if n_layers == 0 {
            return Err(Error::Parse {
                line: 1,
                reason: "no parameters".into(),
            });
        }
        let mut shapes = vec![(0usize, 0usize); n_layers];
        for e in &entries {
            let s = &mut shapes[e.layer];
            s.0 = s.0.max(e.row + 1);
            if e.is_weight {
                s.1 = s.1.max(e.col + 1);
            }
        }
        for w in shapes.windows(2) {
            if w[0].0 != w[1].1 {
                return Err(Error::Shape("parameter layers do not chain".into()));
            }
        }
        let mut layers: Vec<Layer> = shapes.iter().map(|&(o, i)| Layer::zeros(i, o)).collect();
        let mut seen: Vec<Vec<bool>> = layers.iter().map(|l| vec![false; l.weights.len() + l.bias.len()]).collect();
        for e in &entries {
            let l = &mut layers[e.layer];
            let slot = if e.is_weight {
                e.row * l.n_in + e.col
            } else {
                l.weights.len() + e.row
            };
            if e.is_weight {
                l.weights[slot] = e.value;
            } else {
                l.bias[e.row] = e.value;
            }
            seen[e.layer][slot] = true;
        }
        if seen.iter().flatten().any(|s| !s) {
            return Err(Error::Shape("parameter file is missing entries".into()));
        }
        Ok(Self { activation, layers })
    }
}

/// Cached values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Pre-activations of every layer; the last entry is the logits.
    pub pre_activations: Vec<Vec<f64>>,
    /// Activations of the hidden layers.
    pub activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.pre_activations.last().map_or(&[], Vec::as_slice)
    }
}

pub fn init_params(cfg: &ModelConfig) -> Result<MlpParams> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, "model/init");
    let layers = cfg
        .layer_dims
        .windows(2)
        .map(|w| {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = match cfg.init {
                InitRule::FanInSqrt => 1.0 / (n_in as f64).sqrt(),
            };
            Layer {
                n_in,
                n_out,
                weights: (0..n_in * n_out).map(|_| rng.random_range(-bound..=bound)).collect(),
                bias: vec![0.0; n_out],
            }
        })
        .collect();
    Ok(MlpParams {
        activation: cfg.activation,
        layers,
    })
}

pub fn forward(params: &MlpParams, x: &[f64]) -> Result<ForwardTrace> {
    if x.len() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, model expects {}",
            x.len(),
            params.input_dim()
        )));
    }
    let last = params.layers.len() - 1;
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut activations = Vec::<Vec<f64>>::with_capacity(last);
    for (li, layer) in params.layers.iter().enumerate() {
        let input = if li == 0 { x } else { activations[li - 1].as_slice() };
        let z = layer.affine(input);
        if li < last {
            activations.push(z.iter().map(|&v| params.activation.apply(v)).collect());
        }
        pre_activations.push(z);
    }
    Ok(ForwardTrace {
        input: x.to_vec(),
        pre_activations,
        activations,
    })
}

/// Numerically stable softmax (max-shifted). Probabilities that underflow
/// are raised to `f64::MIN_POSITIVE` so every entry stays strictly positive.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    Ok(log_softmax(logits)?
        .into_iter()
        .map(|l| l.exp().max(f64::MIN_POSITIVE))
        .collect())
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Shape("empty logit vector".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|v| v - lse).collect())
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Chain rule from `grad_logits` (∂L/∂logits) back to every parameter.
pub fn backward(params: &MlpParams, trace: &ForwardTrace, grad_logits: &[f64]) -> Result<MlpParams> {
    if grad_logits.len() != params.n_classes() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, model has {} classes",
            grad_logits.len(),
            params.n_classes()
        )));
    }
    let mut grads = params.zeros_like();
    let mut delta = grad_logits.to_vec();
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let input = if li == 0 {
            &trace.input
        } else {
            &trace.activations[li - 1]
        };
        let g = &mut grads.layers[li];
        for (r, d) in delta.iter().enumerate() {
            g.bias[r] = *d;
            for (c, v) in input.iter().enumerate() {
                g.weights[r * layer.n_in + c] = d * v;
            }
        }
        if li > 0 {
            let z = &trace.pre_activations[li - 1];
            let a = &trace.activations[li - 1];
            delta = (0..layer.n_in)
                .map(|c| {
                    let back: f64 = delta
                        .iter()
                        .enumerate()
                        .map(|(r, d)| d * layer.weights[r * layer.n_in + c])
                        .sum();
                    back * params.activation.derivative(z[c], a[c])
                })
                .collect();
        }
    }
    Ok(grads)
}

/// `(argmax class, its probability)`.
pub fn predict(params: &MlpParams, x: &[f64]) -> Result<(usize, f64)> {
    let trace = forward(params, x)?;
    let probs = softmax(trace.logits())?;
    let label = argmax(&probs);
    Ok((label, probs[label]))
}
