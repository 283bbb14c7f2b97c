//! End-to-end comparison of representations on synthetic data.
//!
//! One run generates a source problem and target problems, trains every
//! representation, scores each on every target and returns the score table
//! with `Net-S` as reference.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{MetricsError, Problem, ScoreTable};
use crate::muldip::{self, Branch, MulDipConfig, MulDipError, MulDipNet, Norm};
use crate::nnet::{Activation, Init, TrainConfig};
use crate::retrain::{self, RetrainError, RetrainSpec, Strategy};
use crate::rng;
use crate::spv::{self, SourceProblem, SpvError};
use crate::synthdata::{self, SynthConfig, SynthDataset, SynthError};
use crate::transfer::{self, FeatureExtractor, TargetProblem, TransferError};

pub const NET_S: &str = "Net-S";
pub const NET_G: &str = "Net-G";
pub const ENSEMBLE: &str = "Ensemble";
pub const MULDIP: &str = "MulDiP-Net";
pub const FRST: &str = "FrST";
pub const SFT: &str = "SFT";
pub const FSFT: &str = "FSFT";
pub const MULDIP_FSFT: &str = "MulDiP+FSFT";
pub const MULDIP_FSFT_DR: &str = "MulDiP+FSFT-DR";

/// Row order of the score table.
pub const METHODS: [&str; 9] = [
    NET_S,
    NET_G,
    ENSEMBLE,
    MULDIP,
    FRST,
    SFT,
    FSFT,
    MULDIP_FSFT,
    MULDIP_FSFT_DR,
];

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Spv(#[from] SpvError),
    #[error(transparent)]
    MulDip(#[from] MulDipError),
    #[error(transparent)]
    Retrain(#[from] RetrainError),
    #[error("{method} on {target}: {source}")]
    Transfer {
        method: String,
        target: String,
        #[source]
        source: Box<TransferError>,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Basic,
    Superordinate,
}

/// How one additional source problem is derived from the initial one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SpvRecipe {
    Semantic { level: Level },
    Random { groups: usize },
    Clustering { k: usize },
}

impl SpvRecipe {
    pub fn name(&self) -> String {
        match self {
            Self::Semantic { level: Level::Basic } => "semantic-basic".into(),
            Self::Semantic {
                level: Level::Superordinate,
            } => "semantic-superordinate".into(),
            Self::Random { groups } => format!("random-{groups}"),
            Self::Clustering { k } => format!("clustering-{k}"),
        }
    }

    pub fn apply(&self, ds: &SynthDataset, seed: u64) -> Result<SourceProblem> {
        let sp = &ds.source;
        Ok(match *self {
            Self::Semantic { level } => {
                let levels = match level {
                    Level::Basic => &ds.levels.basic,
                    Level::Superordinate => &ds.levels.superordinate,
                };
                spv::semantic_grouping(sp, &ds.hierarchy, levels)?.0
            }
            Self::Random { groups } => spv::random_grouping(sp, groups, seed)?.0,
            Self::Clustering { k } => {
                let feats = spv::category_mean_features(sp);
                spv::clustering_grouping(sp, &feats, k, seed)?.0
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSettings {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        Self {
            hidden: vec![80, 48],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub eta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_sigma: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            eta2: 0.05,
            epochs: 30,
            batch_size: 16,
            init_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainSettings {
    pub split_index: usize,
    pub alpha: f64,
    pub eta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for RetrainSettings {
    fn default() -> Self {
        Self {
            split_index: 1,
            alpha: 0.1,
            eta2: 0.05,
            epochs: 30,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Every other seed is derived from this one, including `synth.seed`.
    pub seed: u64,
    pub targets: usize,
    pub c_grid: Vec<f64>,
    pub norm: Norm,
    pub synth: SynthConfig,
    pub network: NetworkSettings,
    pub train: TrainSettings,
    pub retrain: RetrainSettings,
    /// Variations added to the initial problem for the multi-network methods;
    /// the first one also defines `Net-G`.
    pub spv: Vec<SpvRecipe>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            targets: 6,
            c_grid: transfer::DEFAULT_C_GRID.to_vec(),
            norm: Norm::Linf,
            synth: SynthConfig::default(),
            network: NetworkSettings::default(),
            train: TrainSettings::default(),
            retrain: RetrainSettings::default(),
            spv: vec![SpvRecipe::Semantic { level: Level::Basic }],
        }
    }
}

/// Derived seed streams.
pub mod streams {
    pub const TARGETS: u64 = 10;
    pub const TRAIN: u64 = 20;
    pub const ENSEMBLE: u64 = 21;
    pub const RETRAIN: u64 = 30;
    pub const SPV: u64 = 40;
    pub const SVM: u64 = 50;
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.targets == 0 {
            return Err(ExperimentError::Config("targets must be at least 1".into()));
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(ExperimentError::Config(
                "c_grid must be a non-empty list of positive costs".into(),
            ));
        }
        if self.spv.is_empty() {
            return Err(ExperimentError::Config("at least one spv recipe is needed".into()));
        }
        if self.network.hidden.len() < 2 {
            return Err(ExperimentError::Config(
                "at least two hidden layers are needed so the penultimate layer can be retrained".into(),
            ));
        }
        self.synth.validate()?;
        self.train_config()
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eta2: self.train.eta2,
            alpha: 1.0,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: rng::derive(self.seed, streams::TRAIN),
            init: Init::Gaussian {
                sigma: self.train.init_sigma,
            },
        }
    }

    pub fn muldip_config(&self) -> MulDipConfig {
        MulDipConfig {
            hidden: self.network.hidden.clone(),
            activation: self.network.activation,
            train: self.train_config(),
            norm: self.norm,
        }
    }

    pub fn retrain_spec(&self, strategy: Strategy) -> RetrainSpec {
        RetrainSpec {
            strategy,
            split_index: self.retrain.split_index,
            alpha: self.retrain.alpha,
            target_penultimate_width: None,
            cfg: TrainConfig {
                eta2: self.retrain.eta2,
                alpha: self.retrain.alpha,
                epochs: self.retrain.epochs,
                batch_size: self.retrain.batch_size,
                seed: rng::derive(self.seed, streams::RETRAIN),
                init: Init::Gaussian {
                    sigma: self.train.init_sigma,
                },
            },
        }
    }

    pub fn svm_seed(&self) -> u64 {
        rng::derive(self.seed, streams::SVM)
    }
}

/// Initial problem followed by the configured variations.
pub fn source_problems(ds: &SynthDataset, cfg: &ExperimentConfig) -> Result<Vec<(String, SourceProblem)>> {
    let mut out = vec![("specific".to_string(), ds.source.clone())];
    for (i, recipe) in cfg.spv.iter().enumerate() {
        let sp = recipe.apply(ds, rng::derive(cfg.seed, streams::SPV + i as u64))?;
        out.push((recipe.name(), sp));
    }
    Ok(out)
}

/// Every compared representation.
#[derive(Debug, Clone)]
pub struct Representations {
    /// Branch 0 is `Net-S`, branch 1 is `Net-G`.
    pub muldip: MulDipNet,
    pub ensemble: MulDipNet,
    pub frst: crate::nnet::Network,
    pub sft: crate::nnet::Network,
    pub fsft: crate::nnet::Network,
    pub muldip_fsft: MulDipNet,
    pub muldip_fsft_dr: MulDipNet,
}

impl Representations {
    pub fn net_s(&self) -> &crate::nnet::Network {
        &self.muldip.branches()[0].network
    }

    pub fn net_g(&self) -> &crate::nnet::Network {
        &self.muldip.branches()[1].network
    }

    pub fn get(&self, method: &str) -> Option<&dyn FeatureExtractor> {
        Some(match method {
            NET_S => self.net_s(),
            NET_G => self.net_g(),
            ENSEMBLE => &self.ensemble,
            MULDIP => &self.muldip,
            FRST => &self.frst,
            SFT => &self.sft,
            FSFT => &self.fsft,
            MULDIP_FSFT => &self.muldip_fsft,
            MULDIP_FSFT_DR => &self.muldip_fsft_dr,
            _ => return None,
        })
    }
}

pub fn train_representations(problems: &[(String, SourceProblem)], cfg: &ExperimentConfig) -> Result<Representations> {
    let mcfg = cfg.muldip_config();
    let named: Vec<(String, &SourceProblem)> = problems.iter().map(|(n, sp)| (n.clone(), sp)).collect();
    let muldip = MulDipNet::build_named(&named, &mcfg)?;
    let sp0 = &problems[0].1;

    // A second specific network with its own seed.
    let twin_seed = rng::derive(cfg.seed, streams::ENSEMBLE);
    let twin = muldip::train_branch(sp0, &mcfg, twin_seed).map_err(|source| MulDipError::Net { index: 1, source })?;
    let first = muldip.branches()[0].clone();
    let ensemble = MulDipNet::from_branches(
        vec![
            first.clone(),
            Branch {
                name: "specific-twin".into(),
                feature_layer: twin.penultimate_index(),
                network: twin,
                samples: first.samples,
            },
        ],
        cfg.norm,
    )?;

    let net_s = &first.network;
    let strategies = [Strategy::Frst, Strategy::Sft, Strategy::Fsft];
    let mut singles = strategies
        .par_iter()
        .map(|&s| retrain::retrain(net_s, sp0, &cfg.retrain_spec(s)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let fsft = singles.pop().expect("three strategies");
    let sft = singles.pop().expect("three strategies");
    let frst = singles.pop().expect("three strategies");

    let sps: Vec<&SourceProblem> = problems.iter().map(|(_, sp)| sp).collect();
    let spec = cfg.retrain_spec(Strategy::Fsft);
    let muldip_fsft = muldip.retrain_branches(&sps, &spec, false)?;
    let muldip_fsft_dr = muldip.retrain_branches(&sps, &spec, true)?;

    Ok(Representations {
        muldip,
        ensemble,
        frst,
        sft,
        fsft,
        muldip_fsft,
        muldip_fsft_dr,
    })
}

/// Transfer score of every method on every target, `Net-S` as reference.
pub fn score_table(reps: &Representations, targets: &[TargetProblem], cfg: &ExperimentConfig) -> Result<ScoreTable> {
    let cells: Vec<(usize, usize)> = (0..METHODS.len())
        .flat_map(|m| (0..targets.len()).map(move |t| (m, t)))
        .collect();
    let scores = cells
        .par_iter()
        .map(|&(m, t)| {
            let extractor = reps.get(METHODS[m]).expect("known method");
            transfer::evaluate(extractor, &targets[t], &cfg.c_grid, cfg.svm_seed())
                .map(|e| e.score)
                .map_err(|source| ExperimentError::Transfer {
                    method: METHODS[m].to_string(),
                    target: targets[t].name.clone(),
                    source: Box::new(source),
                })
        })
        .collect::<Result<Vec<f64>>>()?;
    let problems = targets.iter().map(|t| Problem::percent(t.name.clone())).collect();
    let rows = METHODS
        .iter()
        .enumerate()
        .map(|(m, name)| {
            (
                name.to_string(),
                scores[m * targets.len()..(m + 1) * targets.len()].to_vec(),
            )
        })
        .collect();
    Ok(ScoreTable::new(problems, rows, NET_S)?)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub table: ScoreTable,
    /// Representation width per method.
    pub dims: BTreeMap<String, usize>,
}

impl ExperimentOutcome {
    /// Mean target score of `method`.
    pub fn mean(&self, method: &str) -> f64 {
        crate::metrics::avg(&self.table, method).expect("method present")
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let synth = cfg.synth_config();
    let ds = synthdata::generate(&synth)?;
    let targets = synthdata::generate_targets(&synth, cfg.targets, rng::derive(cfg.seed, streams::TARGETS))?;
    let problems = source_problems(&ds, cfg)?;
    let reps = train_representations(&problems, cfg)?;
    let table = score_table(&reps, &targets, cfg)?;
    let dims = METHODS
        .iter()
        .map(|m| (m.to_string(), reps.get(m).expect("known method").output_dim()))
        .collect();
    Ok(ExperimentOutcome { table, dims })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            targets: 2,
            synth: SynthConfig {
                superordinate_count: 2,
                basic_per_super: 2,
                subordinate_per_basic: 2,
                dim: 8,
                samples_per_leaf: 10,
                target_classes: 3,
                target_samples_per_class: 12,
                ..SynthConfig::default()
            },
            network: NetworkSettings {
                hidden: vec![12, 8],
                activation: Activation::Relu,
            },
            train: TrainSettings {
                epochs: 3,
                ..TrainSettings::default()
            },
            retrain: RetrainSettings {
                epochs: 2,
                ..RetrainSettings::default()
            },
            c_grid: vec![0.1, 1.0],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn tiny_run_fills_the_table() {
        let out = run(&tiny()).unwrap();
        assert_eq!(out.table.methods().len(), METHODS.len());
        assert_eq!(out.table.problems().len(), 2);
        assert_eq!(out.dims[NET_S], 8);
        assert_eq!(out.dims[MULDIP], 16);
        assert_eq!(out.dims[MULDIP_FSFT_DR], 8);
        let again = run(&tiny()).unwrap();
        assert_eq!(again.table, out.table);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        let bad = ExperimentConfig { spv: vec![], ..tiny() };
        assert!(bad.validate().is_err());
    }
}
