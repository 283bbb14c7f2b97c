//! Dense feed-forward classifier with manual backpropagation.
//!
//! Weights are split at `split_index` into a first group (layers below the
//! split) and a second group (layers at or above it). SGD updates the first
//! group with `alpha * eta2` and the second with `eta2`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::CategoryId;
use crate::rng;
use crate::spv::SourceProblem;

/// Probabilities are clamped to this before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_INIT_SIGMA: f64 = 0.01;
const FORMAT_TAG: &str = "unirep-network";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("input has dimension {got}, network expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("feature layer {k} out of range [{min}, {max}]")]
    LayerOutOfRange { k: usize, min: usize, max: usize },
    #[error("problem has {problem} {what}, network has {network}")]
    WidthMismatch {
        what: &'static str,
        problem: usize,
        network: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unsupported network file (format {format:?}, version {version})")]
    Format { format: String, version: u32 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Self::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - a * a,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Input width, hidden widths, class count.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(NetError::Architecture(format!(
                "need at least input and output widths, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(NetError::Architecture(format!("zero width in {layer_dims:?}")));
        }
        Ok(Self { layer_dims, activation })
    }

    /// `input`, then `hidden`, then `classes`.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, activation: Activation) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        Self::new(dims, activation)
    }

    /// Number of weight layers.
    pub fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().expect("validated non-empty")
    }

    /// Width of the last hidden layer (the input width for a linear model).
    pub fn penultimate_width(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Init {
    Gaussian { sigma: f64 },
}

impl Default for Init {
    fn default() -> Self {
        Self::Gaussian {
            sigma: DEFAULT_INIT_SIGMA,
        }
    }
}

/// One fully-connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn gaussian(inputs: usize, outputs: usize, init: Init, rng: &mut rng::Rng) -> Self {
        let Init::Gaussian { sigma } = init;
        let normal = Normal::new(0.0, sigma).expect("sigma validated positive");
        let mut layer = Self::zeros(inputs, outputs);
        for w in &mut layer.weights {
            *w = normal.sample(rng);
        }
        layer
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Output of [`Network::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub probabilities: Vec<f64>,
    /// `activations[0]` is the input, `activations[k]` the output of layer `k`
    /// (after the nonlinearity) for `1 <= k < layer_count`.
    pub activations: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    arch: Architecture,
    layers: Vec<Dense>,
    split_index: usize,
    /// Label set of the problem the network was trained on (empty before training).
    classes: Vec<CategoryId>,
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    format: String,
    version: u32,
    network: Network,
}

fn check_sigma(init: Init) -> Result<()> {
    let Init::Gaussian { sigma } = init;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(NetError::Config(format!("init sigma must be positive, got {sigma}")));
    }
    Ok(())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Negative log-likelihood of the true class.
pub fn loss(probabilities: &[f64], label: usize) -> f64 {
    -probabilities[label].max(PROB_FLOOR).ln()
}

impl Network {
    /// Gaussian(0, 0.01) weights, zero biases.
    pub fn init_random(arch: Architecture, seed: u64) -> Self {
        Self::init_with(arch, Init::default(), seed).expect("default init is valid")
    }

    pub fn init_with(arch: Architecture, init: Init, seed: u64) -> Result<Self> {
        check_sigma(init)?;
        let mut rng = rng::seeded(seed);
        let layers = arch
            .layer_dims
            .windows(2)
            .map(|w| Dense::gaussian(w[0], w[1], init, &mut rng))
            .collect();
        Ok(Self {
            arch,
            layers,
            split_index: 0,
            classes: Vec::new(),
        })
    }

    /// Assembles a network from explicit layers (shapes must match `arch`).
    pub fn from_layers(arch: Architecture, layers: Vec<Dense>, split_index: usize) -> Result<Self> {
        let ok = layers.len() == arch.layer_count()
            && layers.iter().zip(arch.layer_dims.windows(2)).all(|(l, w)| {
                l.inputs == w[0] && l.outputs == w[1] && l.weights.len() == w[0] * w[1] && l.bias.len() == w[1]
            });
        if !ok {
            return Err(NetError::Architecture(
                "layer shapes do not match the architecture".into(),
            ));
        }
        if split_index > arch.layer_count() {
            return Err(NetError::Architecture(format!(
                "split index {split_index} beyond {} layers",
                arch.layer_count()
            )));
        }
        Ok(Self {
            arch,
            layers,
            split_index,
            classes: Vec::new(),
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn set_split_index(&mut self, split: usize) -> Result<()> {
        if split > self.arch.layer_count() {
            return Err(NetError::Architecture(format!(
                "split index {split} beyond {} layers",
                self.arch.layer_count()
            )));
        }
        self.split_index = split;
        Ok(())
    }

    pub fn classes(&self) -> &[CategoryId] {
        &self.classes
    }

    pub fn set_classes(&mut self, classes: Vec<CategoryId>) {
        self.classes = classes;
    }

    /// Layers below the split.
    pub fn theta1(&self) -> &[Dense] {
        &self.layers[..self.split_index]
    }

    /// Layers at or above the split.
    pub fn theta2(&self) -> &[Dense] {
        &self.layers[self.split_index..]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        if x.len() != self.arch.input_dim() {
            return Err(NetError::DimMismatch {
                expected: self.arch.input_dim(),
                got: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len());
        activations.push(x.to_vec());
        for layer in &self.layers[..last] {
            let z = layer.affine(activations.last().expect("non-empty"));
            activations.push(z.into_iter().map(|v| self.arch.activation.apply(v)).collect());
        }
        let logits = self.layers[last].affine(activations.last().expect("non-empty"));
        Ok(Forward {
            probabilities: softmax(&logits),
            activations,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let p = self.forward(x)?.probabilities;
        Ok(argmax(&p))
    }

    /// Output of layer `k` (`1 <= k < layer_count`).
    pub fn features(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        let max = self.arch.layer_count() - 1;
        if k < 1 || k > max {
            return Err(NetError::LayerOutOfRange { k, min: 1, max });
        }
        if x.len() != self.arch.input_dim() {
            return Err(NetError::DimMismatch {
                expected: self.arch.input_dim(),
                got: x.len(),
            });
        }
        let mut a = x.to_vec();
        for layer in &self.layers[..k] {
            a = layer
                .affine(&a)
                .into_iter()
                .map(|v| self.arch.activation.apply(v))
                .collect();
        }
        Ok(a)
    }

    /// Index of the penultimate layer, the default feature layer.
    pub fn penultimate_index(&self) -> usize {
        self.arch.layer_count() - 1
    }

    pub fn penultimate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.features(x, self.penultimate_index())
    }

    /// Mean loss and its gradient over `batch` (`(input, class index)` pairs).
    pub fn gradients(&self, batch: &[(&[f64], usize)]) -> Result<(f64, Vec<Dense>)> {
        let mut grads: Vec<Dense> = self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect();
        let classes = self.arch.class_count();
        let mut total = 0.0;
        for &(x, label) in batch {
            if label >= classes {
                return Err(NetError::LabelOutOfRange { label, classes });
            }
            let fwd = self.forward(x)?;
            total += loss(&fwd.probabilities, label);
            let mut delta = fwd.probabilities;
            delta[label] -= 1.0;
            for l in (0..self.layers.len()).rev() {
                let input = &fwd.activations[l];
                let g = &mut grads[l];
                for (o, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &mut g.weights[o * g.inputs..(o + 1) * g.inputs];
                    for (w, a) in row.iter_mut().zip(input) {
                        *w += d * a;
                    }
                    g.bias[o] += d;
                }
                if l == 0 {
                    break;
                }
                let layer = &self.layers[l];
                let mut prev = vec![0.0; layer.inputs];
                for (o, d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= self.arch.activation.derivative_from_output(*a);
                }
                delta = prev;
            }
        }
        let n = batch.len().max(1) as f64;
        for g in &mut grads {
            g.weights.iter_mut().for_each(|w| *w /= n);
            g.bias.iter_mut().for_each(|b| *b /= n);
        }
        Ok((total / n, grads))
    }

    /// One SGD step: layers below the split use `alpha * eta2`, the rest `eta2`.
    /// Returns the batch loss before the update.
    pub fn sgd_step(&mut self, batch: &[(&[f64], usize)], eta2: f64, alpha: f64) -> Result<f64> {
        let (batch_loss, grads) = self.gradients(batch)?;
        for (l, (layer, g)) in self.layers.iter_mut().zip(&grads).enumerate() {
            let eta = if l < self.split_index { alpha * eta2 } else { eta2 };
            if eta == 0.0 {
                continue;
            }
            for (w, dw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= eta * dw;
            }
            for (b, db) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= eta * db;
            }
        }
        Ok(batch_loss)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&NetworkFile {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            network: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: NetworkFile = serde_json::from_str(text)?;
        if file.format != FORMAT_TAG || file.version != FORMAT_VERSION {
            return Err(NetError::Format {
                format: file.format,
                version: file.version,
            });
        }
        let net = file.network;
        let checked = Self::from_layers(net.arch.clone(), net.layers.clone(), net.split_index)?;
        Ok(Self {
            classes: net.classes,
            ..checked
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate of the layers at or above the split.
    pub eta2: f64,
    /// Multiplier of `eta2` for the layers below the split.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub init: Init,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta2: 1e-2,
            alpha: 0.1,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            init: Init::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta2.is_finite() && self.eta2 > 0.0) {
            return Err(NetError::Config(format!("eta2 must be positive, got {}", self.eta2)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(NetError::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(NetError::Config("batch size must be at least 1".into()));
        }
        check_sigma(self.init)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Shuffled mini-batch SGD over `sp`; deterministic given `cfg.seed`.
pub fn train(mut net: Network, sp: &SourceProblem, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sp.dim() != net.arch.input_dim() {
        return Err(NetError::WidthMismatch {
            what: "input dimensions",
            problem: sp.dim(),
            network: net.arch.input_dim(),
        });
    }
    if sp.class_count() != net.arch.class_count() {
        return Err(NetError::WidthMismatch {
            what: "classes",
            problem: sp.class_count(),
            network: net.arch.class_count(),
        });
    }
    net.classes = sp.label_set().to_vec();

    let targets = sp.targets();
    let inputs: Vec<&[f64]> = sp.samples().iter().map(|s| s.features.as_slice()).collect();
    let mut order: Vec<usize> = (0..sp.len()).collect();
    let mut rng = rng::seeded(cfg.seed);
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk.iter().map(|&i| (inputs[i], targets[i])).collect();
            epoch_loss += net.sgd_step(&batch, cfg.eta2, cfg.alpha)?;
            batches += 1;
        }
        loss_trace.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });
    }
    Ok(TrainOutcome {
        network: net,
        loss_trace,
    })
}

/// Fraction of samples of `sp` whose arg-max prediction is their label.
pub fn train_accuracy(net: &Network, sp: &SourceProblem) -> Result<f64> {
    let targets = sp.targets();
    let mut correct = 0usize;
    for (s, &t) in sp.samples().iter().zip(&targets) {
        if net.predict(&s.features)? == t {
            correct += 1;
        }
    }
    Ok(correct as f64 / sp.len().max(1) as f64)
}
