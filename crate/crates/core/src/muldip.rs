//! Several networks, one per source problem, fused into a single representation.
//!
//! Each branch is trained independently. At extraction time every branch's
//! features are normalized on their own and concatenated in branch order.

use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnet::{self, Activation, Architecture, NetError, Network, TrainConfig};
use crate::retrain::{self, RetrainError, RetrainSpec};
use crate::spv::{self, SourceProblem};

const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_TAG: &str = "unirep-muldip";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MulDipError {
    #[error("a multi-network representation needs at least one branch")]
    NoBranches,
    #[error("variant {index} is not a valid variation of the initial source problem")]
    InvalidVariant { index: usize },
    #[error("variant {index} has sample dimension {got}, expected {expected}")]
    DimMismatch { index: usize, expected: usize, got: usize },
    #[error("expected {expected} source problems (one per branch), got {got}")]
    BranchCount { expected: usize, got: usize },
    #[error("branch {index} has no layer {layer} to read features from")]
    FeatureLayer { index: usize, layer: usize },
    #[error("bad bundle: {0}")]
    Bundle(String),
    #[error("branch {index}: {source}")]
    Net {
        index: usize,
        #[source]
        source: NetError,
    },
    #[error("branch {index}: {source}")]
    Retrain {
        index: usize,
        #[source]
        source: RetrainError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MulDipError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Linf,
    L2,
    None,
}

impl std::str::FromStr for Norm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linf" => Ok(Self::Linf),
            "l2" => Ok(Self::L2),
            "none" => Ok(Self::None),
            other => Err(format!("unknown norm `{other}` (expected linf, l2 or none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Concat,
}

/// Returns the normalized vector and whether it was all zeros (left as is).
pub fn normalize(v: &[f64], norm: Norm) -> (Vec<f64>, bool) {
    let scale = match norm {
        Norm::Linf => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        Norm::None => return (v.to_vec(), v.iter().all(|&x| x == 0.0)),
    };
    if scale == 0.0 {
        return (v.to_vec(), true);
    }
    (v.iter().map(|x| x / scale).collect(), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub name: String,
    pub network: Network,
    pub feature_layer: usize,
    /// Sample count of the source problem the branch was trained on.
    pub samples: usize,
}

impl Branch {
    pub fn width(&self) -> usize {
        self.network.arch().layer_dims[self.feature_layer]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation {
    pub vector: Vec<f64>,
    pub block_offsets: Vec<Range<usize>>,
    /// Branches whose feature block was all zeros.
    pub zero_blocks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulDipConfig {
    /// Hidden widths; input and class widths come from each problem.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    #[serde(default)]
    pub norm: Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MulDipNet {
    branches: Vec<Branch>,
    fusion: Fusion,
    norm: Norm,
}

#[derive(Serialize, Deserialize)]
struct BundleBranch {
    name: String,
    file: String,
    feature_layer: usize,
    samples: usize,
    classes: usize,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    format: String,
    version: u32,
    fusion: Fusion,
    norm: Norm,
    branches: Vec<BundleBranch>,
}

/// Trains one network on `sp` with seed `seed` for both init and shuffling.
pub fn train_branch(sp: &SourceProblem, cfg: &MulDipConfig, seed: u64) -> Result<Network, NetError> {
    let arch = Architecture::mlp(sp.dim(), &cfg.hidden, sp.class_count(), cfg.activation)?;
    let train = TrainConfig { seed, ..cfg.train };
    let net = Network::init_with(arch, train.init, seed)?;
    Ok(nnet::train(net, sp, &train)?.network)
}

impl MulDipNet {
    /// Branch 0 is trained on `sp0`, branch `k` on `variants[k - 1]`, all in
    /// parallel with seed `cfg.train.seed + k`.
    pub fn build(sp0: &SourceProblem, variants: &[SourceProblem], cfg: &MulDipConfig) -> Result<Self> {
        let named: Vec<(String, &SourceProblem)> = std::iter::once(sp0)
            .chain(variants)
            .enumerate()
            .map(|(k, sp)| (format!("sp{k}"), sp))
            .collect();
        Self::build_named(&named, cfg)
    }

    pub fn build_named(problems: &[(String, &SourceProblem)], cfg: &MulDipConfig) -> Result<Self> {
        let (_, sp0) = problems.first().ok_or(MulDipError::NoBranches)?;
        for (k, (_, sp)) in problems.iter().enumerate().skip(1) {
            if sp.dim() != sp0.dim() {
                return Err(MulDipError::DimMismatch {
                    index: k,
                    expected: sp0.dim(),
                    got: sp.dim(),
                });
            }
            if !spv::validate_spv(sp0, sp) {
                return Err(MulDipError::InvalidVariant { index: k });
            }
        }
        let branches = problems
            .par_iter()
            .enumerate()
            .map(|(k, (name, sp))| {
                let network = train_branch(sp, cfg, cfg.train.seed.wrapping_add(k as u64))
                    .map_err(|source| MulDipError::Net { index: k, source })?;
                Ok(Branch {
                    name: name.clone(),
                    feature_layer: network.penultimate_index(),
                    network,
                    samples: sp.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            branches,
            fusion: Fusion::Concat,
            norm: cfg.norm,
        })
    }

    pub fn from_branches(branches: Vec<Branch>, norm: Norm) -> Result<Self> {
        if branches.is_empty() {
            return Err(MulDipError::NoBranches);
        }
        let dim = branches[0].network.arch().input_dim();
        for (index, b) in branches.iter().enumerate() {
            let got = b.network.arch().input_dim();
            if got != dim {
                return Err(MulDipError::DimMismatch {
                    index,
                    expected: dim,
                    got,
                });
            }
            if b.feature_layer < 1 || b.feature_layer >= b.network.arch().layer_count() {
                return Err(MulDipError::FeatureLayer {
                    index,
                    layer: b.feature_layer,
                });
            }
        }
        Ok(Self {
            branches,
            fusion: Fusion::Concat,
            norm,
        })
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn norm(&self) -> Norm {
        self.norm
    }

    pub fn fusion(&self) -> Fusion {
        self.fusion
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.branches[0].network.arch().input_dim()
    }

    pub fn fused_dim(&self) -> usize {
        self.branches.iter().map(Branch::width).sum()
    }

    /// Replaces branch `index`, leaving the others untouched.
    pub fn replace_branch(&mut self, index: usize, network: Network) -> Result<()> {
        let dim = self.input_dim();
        let branch = self.branches.get_mut(index).ok_or(MulDipError::BranchCount {
            expected: index + 1,
            got: 0,
        })?;
        if network.arch().input_dim() != dim {
            return Err(MulDipError::DimMismatch {
                index,
                expected: dim,
                got: network.arch().input_dim(),
            });
        }
        branch.feature_layer = network.penultimate_index();
        branch.network = network;
        Ok(())
    }

    pub fn extract(&self, x: &[f64]) -> Result<FusedRepresentation> {
        let mut vector = Vec::with_capacity(self.fused_dim());
        let mut block_offsets = Vec::with_capacity(self.branches.len());
        let mut zero_blocks = Vec::new();
        for (index, b) in self.branches.iter().enumerate() {
            let feats = b
                .network
                .features(x, b.feature_layer)
                .map_err(|source| MulDipError::Net { index, source })?;
            let (block, zero) = normalize(&feats, self.norm);
            if zero {
                zero_blocks.push(index);
            }
            let start = vector.len();
            vector.extend(block);
            block_offsets.push(start..vector.len());
        }
        Ok(FusedRepresentation {
            vector,
            block_offsets,
            zero_blocks,
        })
    }

    /// Retrains every branch on its own problem (`problems[k]` for branch `k`)
    /// with `spec`, branch seeds offset by the branch index. With `dr`, each
    /// penultimate width `n` becomes `ceil(n / branch_count)`.
    pub fn retrain_branches(&self, problems: &[&SourceProblem], spec: &RetrainSpec, dr: bool) -> Result<Self> {
        if problems.len() != self.branches.len() {
            return Err(MulDipError::BranchCount {
                expected: self.branches.len(),
                got: problems.len(),
            });
        }
        let omega_plus_1 = self.branches.len();
        let branches = self
            .branches
            .par_iter()
            .zip(problems.par_iter())
            .enumerate()
            .map(|(k, (b, sp))| {
                let mut branch_spec = spec.clone();
                branch_spec.cfg.seed = spec.cfg.seed.wrapping_add(k as u64);
                if dr {
                    let n = b.network.arch().penultimate_width();
                    branch_spec.target_penultimate_width = Some(retrain::dr_width(n, omega_plus_1));
                }
                let network = retrain::retrain(&b.network, sp, &branch_spec)
                    .map_err(|source| MulDipError::Retrain { index: k, source })?;
                Ok(Branch {
                    name: b.name.clone(),
                    feature_layer: network.penultimate_index(),
                    network,
                    samples: b.samples,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            branches,
            fusion: self.fusion,
            norm: self.norm,
        })
    }

    /// Writes `manifest.json` and one `branch_<k>.json` per branch into `dir`.
    pub fn save_bundle(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut branches = Vec::with_capacity(self.branches.len());
        for (k, b) in self.branches.iter().enumerate() {
            let file = format!("branch_{k}.json");
            b.network
                .save(dir.join(&file))
                .map_err(|source| MulDipError::Net { index: k, source })?;
            branches.push(BundleBranch {
                name: b.name.clone(),
                file,
                feature_layer: b.feature_layer,
                samples: b.samples,
                classes: b.network.arch().class_count(),
            });
        }
        let manifest = BundleManifest {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            fusion: self.fusion,
            norm: self.norm,
            branches,
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: BundleManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        if manifest.format != FORMAT_TAG || manifest.version != FORMAT_VERSION {
            return Err(MulDipError::Bundle(format!(
                "unsupported format {:?} version {}",
                manifest.format, manifest.version
            )));
        }
        let mut branches = Vec::with_capacity(manifest.branches.len());
        for (k, entry) in manifest.branches.into_iter().enumerate() {
            if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
                return Err(MulDipError::Bundle(format!(
                    "branch file {:?} escapes the bundle",
                    entry.file
                )));
            }
            let network =
                Network::load(dir.join(&entry.file)).map_err(|source| MulDipError::Net { index: k, source })?;
            if network.arch().class_count() != entry.classes {
                return Err(MulDipError::Bundle(format!(
                    "branch {k} has {} classes, manifest says {}",
                    network.arch().class_count(),
                    entry.classes
                )));
            }
            branches.push(Branch {
                name: entry.name,
                network,
                feature_layer: entry.feature_layer,
                samples: entry.samples,
            });
        }
        let mut net = Self::from_branches(branches, manifest.norm)?;
        net.fusion = manifest.fusion;
        Ok(net)
    }
}
