//! Synthetic hierarchy-aligned data.
//!
//! Categories sit on three levels below a root: superordinate, basic and
//! subordinate (the leaves). Category means are nested Gaussians:
//!
//! ```text
//! super    ~ N(0, parent_scale^2)
//! basic    = super + N(0, (parent_scale / 2)^2)
//! leaf     = basic + N(0, leaf_scale^2)
//! sample   = leaf  + N(0, noise_sigma^2)
//! ```
//!
//! Target problems reuse the source superordinate and basic means but draw
//! fresh leaves under them, so their categories never occur in the source.

use std::collections::BTreeSet;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{CategoryId, Hierarchy, LevelKind, LevelSet};
use crate::rng::{self, Rng};
use crate::spv::{Sample, SourceProblem};
use crate::transfer::{Metric, TargetProblem, TargetSample};

/// A multi-label target sample also carries every target category whose mean
/// is within `sqrt(dim * (noise_sigma^2 + (MULTI_LABEL_RADIUS * leaf_scale)^2))`
/// of it: the typical noise distance plus a margin set by the leaf spread.
pub const MULTI_LABEL_RADIUS: f64 = 1.5;
pub const ROOT: &str = "root";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub superordinate_count: usize,
    pub basic_per_super: usize,
    pub subordinate_per_basic: usize,
    pub dim: usize,
    pub samples_per_leaf: usize,
    pub parent_scale: f64,
    pub leaf_scale: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Categories per target problem.
    pub target_classes: usize,
    pub target_samples_per_class: usize,
    /// Fractions of each target class going to train and val; test takes the rest.
    pub train_ratio: f64,
    pub val_ratio: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            superordinate_count: 3,
            basic_per_super: 3,
            subordinate_per_basic: 4,
            dim: 32,
            samples_per_leaf: 30,
            parent_scale: 1.0,
            leaf_scale: 0.5,
            noise_sigma: 1.0,
            seed: 0,
            target_classes: 6,
            target_samples_per_class: 40,
            train_ratio: 0.5,
            val_ratio: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let counts = [
            ("superordinate_count", self.superordinate_count),
            ("basic_per_super", self.basic_per_super),
            ("subordinate_per_basic", self.subordinate_per_basic),
            ("dim", self.dim),
            ("samples_per_leaf", self.samples_per_leaf),
            ("target_classes", self.target_classes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SynthError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.target_classes < 2 {
            return Err(SynthError::Config("target_classes must be at least 2".into()));
        }
        for (name, v) in [("parent_scale", self.parent_scale), ("leaf_scale", self.leaf_scale)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SynthError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(SynthError::Config(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        let ratios_ok = self.train_ratio > 0.0 && self.val_ratio > 0.0 && self.train_ratio + self.val_ratio < 1.0;
        if !ratios_ok {
            return Err(SynthError::Config(format!(
                "need train_ratio > 0, val_ratio > 0 and train_ratio + val_ratio < 1, got {} and {}",
                self.train_ratio, self.val_ratio
            )));
        }
        let (train, val, test) = self.split_sizes();
        if train == 0 || val == 0 || test == 0 {
            return Err(SynthError::Config(format!(
                "{} samples per target class leave an empty split",
                self.target_samples_per_class
            )));
        }
        Ok(())
    }

    pub fn leaf_count(&self) -> usize {
        self.superordinate_count * self.basic_per_super * self.subordinate_per_basic
    }

    /// Per-class `(train, val, test)` sizes, floor-rounded.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.target_samples_per_class;
        let train = (n as f64 * self.train_ratio).floor() as usize;
        let val = (n as f64 * self.val_ratio).floor() as usize;
        (train, val, n.saturating_sub(train + val))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Levels {
    pub subordinate: LevelSet,
    pub basic: LevelSet,
    pub superordinate: LevelSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub hierarchy: Hierarchy,
    pub source: SourceProblem,
    pub levels: Levels,
}

pub fn super_id(s: usize) -> CategoryId {
    CategoryId::new(format!("sup{s}")).expect("valid id")
}

pub fn basic_id(s: usize, b: usize) -> CategoryId {
    CategoryId::new(format!("bas{s}_{b}")).expect("valid id")
}

pub fn leaf_id(s: usize, b: usize, l: usize) -> CategoryId {
    CategoryId::new(format!("sub{s}_{b}_{l}")).expect("valid id")
}

fn gaussian(rng: &mut Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return center.to_vec();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    center.iter().map(|c| c + normal.sample(rng)).collect()
}

/// Means of the basic categories, indexed `[super][basic]`.
fn basic_means(cfg: &SynthConfig) -> Vec<Vec<Vec<f64>>> {
    let mut rng = rng::seeded(rng::derive(cfg.seed, 1));
    let origin = vec![0.0; cfg.dim];
    (0..cfg.superordinate_count)
        .map(|_| {
            let sup = gaussian(&mut rng, &origin, cfg.parent_scale);
            (0..cfg.basic_per_super)
                .map(|_| gaussian(&mut rng, &sup, cfg.parent_scale / 2.0))
                .collect()
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let basics = basic_means(cfg);
    let mut leaf_rng = rng::seeded(rng::derive(cfg.seed, 2));
    let mut noise_rng = rng::seeded(rng::derive(cfg.seed, 3));
    let root = CategoryId::new(ROOT).expect("valid id");

    let mut edges = Vec::new();
    let mut sups = Vec::new();
    let mut bases = Vec::new();
    let mut leaves = Vec::new();
    let mut samples = Vec::with_capacity(cfg.leaf_count() * cfg.samples_per_leaf);
    for (s, row) in basics.iter().enumerate() {
        edges.push((root.clone(), super_id(s)));
        sups.push(super_id(s));
        for (b, basic_mean) in row.iter().enumerate() {
            edges.push((super_id(s), basic_id(s, b)));
            bases.push(basic_id(s, b));
            for l in 0..cfg.subordinate_per_basic {
                let leaf = leaf_id(s, b, l);
                edges.push((basic_id(s, b), leaf.clone()));
                let mean = gaussian(&mut leaf_rng, basic_mean, cfg.leaf_scale);
                for _ in 0..cfg.samples_per_leaf {
                    samples.push(Sample {
                        id: format!("src-{:06}", samples.len()),
                        features: gaussian(&mut noise_rng, &mean, cfg.noise_sigma),
                        label: leaf.clone(),
                    });
                }
                leaves.push(leaf);
            }
        }
    }
    let hierarchy = Hierarchy::from_edges(edges).expect("generated tree is a valid hierarchy");
    let source = SourceProblem::new(samples, leaves.clone(), cfg.dim).expect("generated problem is valid");
    let level = |kind, tag, members| LevelSet::new(kind, tag, members).expect("distinct members");
    Ok(SynthDataset {
        hierarchy,
        source,
        levels: Levels {
            subordinate: level(LevelKind::Categorical, 0, leaves),
            basic: level(LevelKind::Categorical, 1, bases),
            superordinate: level(LevelKind::Categorical, 2, sups),
        },
    })
}

/// `count` target problems; odd-indexed ones are multi-label and scored by
/// mAP, the others mono-label and scored by accuracy.
pub fn generate_targets(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Vec<TargetProblem>, SynthError> {
    cfg.validate()?;
    if count == 0 {
        return Err(SynthError::Config("target count must be at least 1".into()));
    }
    let basics: Vec<Vec<f64>> = basic_means(cfg).into_iter().flatten().collect();
    let (n_train, n_val, _) = cfg.split_sizes();
    let spread = MULTI_LABEL_RADIUS * cfg.leaf_scale;
    let radius = (cfg.dim as f64 * (cfg.noise_sigma.powi(2) + spread * spread)).sqrt();
    (0..count)
        .map(|t| {
            let mut rng = rng::seeded(rng::derive(seed, 1000 + t as u64));
            let metric = if t % 2 == 1 { Metric::Map } else { Metric::Accuracy };
            // Parents drawn with replacement, so siblings can share a basic category.
            let means: Vec<Vec<f64>> = (0..cfg.target_classes)
                .map(|_| {
                    let parent = &basics[rng.random_range(0..basics.len())];
                    gaussian(&mut rng, parent, cfg.leaf_scale)
                })
                .collect();
            let names: Vec<CategoryId> = (0..cfg.target_classes)
                .map(|c| CategoryId::new(format!("t{t}c{c}")).expect("valid id"))
                .collect();
            let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
            for (c, mean) in means.iter().enumerate() {
                let drawn: Vec<Vec<f64>> = (0..cfg.target_samples_per_class)
                    .map(|_| gaussian(&mut rng, mean, cfg.noise_sigma))
                    .collect();
                let order = sample_indices(&mut rng, drawn.len(), drawn.len()).into_vec();
                for (pos, &i) in order.iter().enumerate() {
                    let x = &drawn[i];
                    let mut labels = BTreeSet::from([names[c].clone()]);
                    if metric == Metric::Map {
                        for (other, m) in means.iter().enumerate() {
                            let d = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                            if d <= radius {
                                labels.insert(names[other].clone());
                            }
                        }
                    }
                    let s = TargetSample {
                        id: format!("tgt{t}-{c}-{i:04}"),
                        features: x.clone(),
                        labels,
                    };
                    if pos < n_train {
                        train.push(s);
                    } else if pos < n_train + n_val {
                        val.push(s);
                    } else {
                        test.push(s);
                    }
                }
            }
            TargetProblem::new(format!("target{t}"), metric, cfg.dim, train, val, test)
                .map_err(|e| SynthError::Config(format!("target {t}: {e}")))
        })
        .collect()
}
