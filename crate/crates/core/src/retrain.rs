//! Self-training of a pre-trained network on its own source problem.
//!
//! The first `L` layers start from the pre-trained weights, the remaining
//! layers are drawn afresh. FrST then freezes the first group, SFT trains both
//! at the same rate and FSFT trains the first group at `alpha * eta2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnet::{self, Architecture, Dense, NetError, Network, TrainConfig, TrainOutcome};
use crate::rng;
use crate::spv::SourceProblem;

#[derive(Debug, Error)]
pub enum RetrainError {
    #[error("source problem label set differs from the one the network was trained on")]
    LabelSetMismatch,
    #[error("split index {split} invalid for a {layers}-layer network (allowed {min}..={max})")]
    SplitIndex {
        split: usize,
        layers: usize,
        min: usize,
        max: usize,
    },
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("reduced width {target} must be at least 1 and below the current penultimate width {current}")]
    Width { target: usize, current: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T, E = RetrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Frst,
    Sft,
    Fsft,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "frst" => Ok(Self::Frst),
            "sft" => Ok(Self::Sft),
            "fsft" => Ok(Self::Fsft),
            other => Err(format!("unknown strategy `{other}` (expected frst, sft or fsft)")),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Frst => "frst",
            Self::Sft => "sft",
            Self::Fsft => "fsft",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainSpec {
    pub strategy: Strategy,
    pub split_index: usize,
    /// Only read for FSFT.
    pub alpha: f64,
    /// Reduced penultimate width; triggers the DR variant.
    pub target_penultimate_width: Option<usize>,
    pub cfg: TrainConfig,
}

impl RetrainSpec {
    /// Retrains the two last layers of `arch`, alpha 0.1, eta2 1e-2.
    pub fn default_for(strategy: Strategy, arch: &Architecture) -> Self {
        Self {
            strategy,
            split_index: arch.layer_count().saturating_sub(2).max(1),
            alpha: 0.1,
            target_penultimate_width: None,
            cfg: TrainConfig::default(),
        }
    }

    /// Learning-rate multiplier actually applied to the first group.
    pub fn effective_alpha(&self) -> f64 {
        match self.strategy {
            Strategy::Frst => 0.0,
            Strategy::Sft => 1.0,
            Strategy::Fsft => self.alpha,
        }
    }
}

/// `ceil(n / omega_plus_1)`.
pub fn dr_width(n: usize, omega_plus_1: usize) -> usize {
    n.div_ceil(omega_plus_1.max(1))
}

fn check(init_net: &Network, spec: &RetrainSpec, sp: &SourceProblem) -> Result<()> {
    if init_net.classes() != sp.label_set() {
        return Err(RetrainError::LabelSetMismatch);
    }
    if !(0.0..=1.0).contains(&spec.alpha) {
        return Err(RetrainError::Alpha(spec.alpha));
    }
    let layers = init_net.arch().layer_count();
    // With DR the layer producing the penultimate output must be re-drawn.
    let max = if spec.target_penultimate_width.is_some() {
        layers.saturating_sub(2)
    } else {
        layers - 1
    };
    if spec.split_index < 1 || spec.split_index > max {
        return Err(RetrainError::SplitIndex {
            split: spec.split_index,
            layers,
            min: 1,
            max,
        });
    }
    if let Some(target) = spec.target_penultimate_width {
        let current = init_net.arch().penultimate_width();
        if target == 0 || target >= current {
            return Err(RetrainError::Width { target, current });
        }
    }
    Ok(())
}

/// The network right before the first gradient step: layers below the split
/// copied from `init_net`, the others (weights and biases) re-drawn.
pub fn prepare(init_net: &Network, sp: &SourceProblem, spec: &RetrainSpec) -> Result<Network> {
    check(init_net, spec, sp)?;
    spec.cfg.validate()?;
    let mut dims = init_net.arch().layer_dims.clone();
    if let Some(target) = spec.target_penultimate_width {
        let at = dims.len() - 2;
        dims[at] = target;
    }
    let arch = Architecture::new(dims, init_net.arch().activation)?;
    let mut draw = rng::seeded(rng::derive(spec.cfg.seed, 0x7265_696e_6974));
    let nnet::Init::Gaussian { sigma } = spec.cfg.init;
    let layers: Vec<Dense> = arch
        .layer_dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            if l < spec.split_index {
                init_net.layers()[l].clone()
            } else {
                let mut layer = Dense::gaussian(w[0], w[1], spec.cfg.init, &mut draw);
                let bias = Dense::gaussian(1, w[1], nnet::Init::Gaussian { sigma }, &mut draw);
                layer.bias = bias.weights;
                layer
            }
        })
        .collect();
    let mut net = Network::from_layers(arch, layers, spec.split_index)?;
    net.set_classes(init_net.classes().to_vec());
    Ok(net)
}

/// Retrains on `sp` according to `spec`; `init_net` is left untouched.
pub fn retrain_with_trace(init_net: &Network, sp: &SourceProblem, spec: &RetrainSpec) -> Result<TrainOutcome> {
    let net = prepare(init_net, sp, spec)?;
    let cfg = TrainConfig {
        alpha: spec.effective_alpha(),
        ..spec.cfg
    };
    Ok(nnet::train(net, sp, &cfg)?)
}

pub fn retrain(init_net: &Network, sp: &SourceProblem, spec: &RetrainSpec) -> Result<Network> {
    Ok(retrain_with_trace(init_net, sp, spec)?.network)
}

/// Retraining that also shrinks the penultimate layer to `n_prime`.
pub fn retrain_dr(init_net: &Network, sp: &SourceProblem, spec: &RetrainSpec, n_prime: usize) -> Result<Network> {
    let spec = RetrainSpec {
        target_penultimate_width: Some(n_prime),
        ..spec.clone()
    };
    retrain(init_net, sp, &spec)
}
