//! Stage bodies shared by the single-step subcommands and the pipeline.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use unirep_core::experiment::{streams, ExperimentConfig, Level, SpvRecipe};
use unirep_core::hierarchy::{Hierarchy, LevelSet};
use unirep_core::muldip::{self, Branch, MulDipNet};
use unirep_core::retrain::{self, RetrainSpec};
use unirep_core::spv::{self, GroupingMap, SourceProblem};
use unirep_core::transfer::{self, Identity, TargetProblem};
use unirep_core::{rng, synthdata, Network};

pub const HIERARCHY_FILE: &str = "hierarchy.txt";
pub const SOURCE_FILE: &str = "source.tsv";
pub const LEVELS_DIR: &str = "levels";
pub const TARGETS_DIR: &str = "targets";
/// Target names in generation order, one per line.
pub const TARGET_LIST: &str = "targets.txt";

pub fn level_file(level: Level) -> &'static str {
    match level {
        Level::Basic => "basic.lvl",
        Level::Superordinate => "superordinate.lvl",
    }
}

pub fn read_source(path: &Path) -> Result<SourceProblem> {
    SourceProblem::load(path).with_context(|| format!("reading source problem {}", path.display()))
}

pub fn read_hierarchy(path: &Path) -> Result<Hierarchy> {
    Hierarchy::load(path).with_context(|| format!("reading hierarchy {}", path.display()))
}

pub fn read_levels(path: &Path) -> Result<LevelSet> {
    LevelSet::load(path).with_context(|| format!("reading level set {}", path.display()))
}

pub fn read_target(dir: &Path) -> Result<TargetProblem> {
    TargetProblem::load(dir).with_context(|| format!("reading target problem {}", dir.display()))
}

pub fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "source".into())
}

pub struct GenSummary {
    pub categories: usize,
    pub classes: usize,
    pub samples: usize,
    pub targets: usize,
}

/// Synthetic hierarchy, source problem, level sets and target problems.
pub fn generate(cfg: &ExperimentConfig, dir: &Path) -> Result<GenSummary> {
    let synth = cfg.synth_config();
    let ds = synthdata::generate(&synth)?;
    let targets = synthdata::generate_targets(&synth, cfg.targets, rng::derive(cfg.seed, streams::TARGETS))?;

    fs::create_dir_all(dir.join(LEVELS_DIR)).with_context(|| format!("creating {}", dir.display()))?;
    ds.hierarchy.save(dir.join(HIERARCHY_FILE))?;
    ds.source.save(dir.join(SOURCE_FILE))?;
    let levels = dir.join(LEVELS_DIR);
    ds.levels.subordinate.save(levels.join("subordinate.lvl"))?;
    ds.levels.basic.save(levels.join(level_file(Level::Basic)))?;
    ds.levels
        .superordinate
        .save(levels.join(level_file(Level::Superordinate)))?;
    let mut list = String::new();
    for t in &targets {
        t.save(dir.join(TARGETS_DIR).join(&t.name))?;
        list.push_str(&t.name);
        list.push('\n');
    }
    fs::write(dir.join(TARGET_LIST), list)?;
    Ok(GenSummary {
        categories: ds.hierarchy.len(),
        classes: ds.source.class_count(),
        samples: ds.source.len(),
        targets: targets.len(),
    })
}

/// What the `spv` stage needs besides the source problem.
pub enum Grouping<'a> {
    Semantic {
        hierarchy: &'a Hierarchy,
        levels: &'a LevelSet,
    },
    Random {
        groups: usize,
        seed: u64,
    },
    Clustering {
        k: usize,
        seed: u64,
    },
}

/// Applies one grouping and rejects variations that fail the validity check.
pub fn apply_grouping(sp: &SourceProblem, grouping: &Grouping<'_>) -> Result<(SourceProblem, GroupingMap)> {
    let out = match *grouping {
        Grouping::Semantic { hierarchy, levels } => spv::semantic_grouping(sp, hierarchy, levels)?,
        Grouping::Random { groups, seed } => spv::random_grouping(sp, groups, seed)?,
        Grouping::Clustering { k, seed } => {
            let feats = spv::category_mean_features(sp);
            spv::clustering_grouping(sp, &feats, k, seed)?
        }
    };
    if !spv::validate_spv(sp, &out.0) {
        bail!(
            "the variation ({} labels) is not a valid variation of the source problem ({} labels)",
            out.0.class_count(),
            sp.class_count()
        );
    }
    Ok(out)
}

/// Seed used by recipe `index` of the config, matching the in-memory experiment.
pub fn recipe_seed(cfg: &ExperimentConfig, index: usize) -> u64 {
    rng::derive(cfg.seed, streams::SPV + index as u64)
}

pub fn recipe_grouping<'a>(
    recipe: &SpvRecipe,
    seed: u64,
    hierarchy: &'a Hierarchy,
    basic: &'a LevelSet,
    superordinate: &'a LevelSet,
) -> Grouping<'a> {
    match *recipe {
        SpvRecipe::Semantic { level } => Grouping::Semantic {
            hierarchy,
            levels: match level {
                Level::Basic => basic,
                Level::Superordinate => superordinate,
            },
        },
        SpvRecipe::Random { groups } => Grouping::Random { groups, seed },
        SpvRecipe::Clustering { k } => Grouping::Clustering { k, seed },
    }
}

/// Trains one network per source problem in parallel; network `k` uses the
/// training seed plus `k`, as the branches of a fused network do.
pub fn train_networks(sources: &[&SourceProblem], cfg: &ExperimentConfig) -> Result<Vec<Network>> {
    let mcfg = cfg.muldip_config();
    sources
        .par_iter()
        .enumerate()
        .map(|(k, sp)| {
            muldip::train_branch(sp, &mcfg, mcfg.train.seed.wrapping_add(k as u64))
                .with_context(|| format!("training network {k}"))
        })
        .collect()
}

/// The second network of the ensemble: same problem, its own seed.
pub fn train_twin(sp: &SourceProblem, cfg: &ExperimentConfig) -> Result<Network> {
    let mcfg = cfg.muldip_config();
    muldip::train_branch(sp, &mcfg, rng::derive(cfg.seed, streams::ENSEMBLE)).context("training the ensemble twin")
}

pub fn branch(name: impl Into<String>, network: Network, samples: usize) -> Branch {
    Branch {
        name: name.into(),
        feature_layer: network.penultimate_index(),
        network,
        samples,
    }
}

pub fn fuse(branches: Vec<Branch>, cfg: &ExperimentConfig) -> Result<MulDipNet> {
    Ok(MulDipNet::from_branches(branches, cfg.norm)?)
}

pub fn retrain_single(net: &Network, sp: &SourceProblem, spec: &RetrainSpec) -> Result<Network> {
    Ok(retrain::retrain(net, sp, spec)?)
}

pub fn retrain_fused(net: &MulDipNet, sources: &[&SourceProblem], spec: &RetrainSpec, dr: bool) -> Result<MulDipNet> {
    Ok(net.retrain_branches(sources, spec, dr)?)
}

/// Transfer score of already-extracted features.
pub fn evaluate_features(features: &TargetProblem, cfg: &ExperimentConfig) -> Result<f64> {
    let eval = transfer::evaluate(&Identity(features.dim()), features, &cfg.c_grid, cfg.svm_seed())
        .with_context(|| format!("evaluating {}", features.name))?;
    Ok(eval.score)
}
