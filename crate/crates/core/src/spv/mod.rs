//! Source problems and source-problem variation (SPV).
//!
//! A variation turns an initial labeled problem into a new one by grouping
//! categories (semantically, randomly or by clustering), splitting the label
//! set, or adding categories. [`validate_spv`] checks that a candidate both
//! changed something and kept something of the initial problem.

mod kmeans;
pub mod manifest;
mod variations;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{CategoryId, HierarchyError};

pub use kmeans::{kmeans, KMeansResult};
pub use manifest::{Manifest, ManifestRow};
pub use variations::{
    adding_spv, category_mean_features, clustering_grouping, random_grouping, semantic_grouping, splitting_spv,
};

#[derive(Debug, Error)]
pub enum SpvError {
    #[error("source problem has an empty label set")]
    EmptyLabelSet,
    #[error("duplicate sample id `{0}`")]
    DuplicateSample(String),
    #[error("duplicate label `{0}` in label set")]
    DuplicateLabel(String),
    #[error("sample `{sample}` has label `{label}` outside the label set")]
    LabelOutsideSet { sample: String, label: String },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("categories not in the hierarchy: {}", .0.join(", "))]
    UnknownCategories(Vec<String>),
    #[error("categories not covered by any level member: {}", .0.join(", "))]
    Uncovered(Vec<String>),
    #[error("grouping does not reduce the label set ({before} -> {after} labels)")]
    NoReduction { before: usize, after: usize },
    #[error("{what} = {value} out of range [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: usize,
        min: usize,
        max: usize,
    },
    #[error("labels already present in the source problem: {}", .0.join(", "))]
    LabelCollision(Vec<String>),
    #[error("sample ids already present in the source problem: {}", .0.join(", "))]
    SampleCollision(Vec<String>),
    #[error("the added problem is empty")]
    EmptyExtra,
    #[error("no category features for: {}", .0.join(", "))]
    MissingFeatures(Vec<String>),
    #[error("grouping map has no entry for `{0}`")]
    Unmapped(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SpvError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub label: CategoryId,
}

/// A labeled dataset and its label set.
///
/// The label set is kept sorted, which makes the class index of a label
/// (its position in [`SourceProblem::label_set`]) canonical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceProblem {
    samples: Vec<Sample>,
    label_set: Vec<CategoryId>,
    dim: usize,
}

impl SourceProblem {
    pub fn new(samples: Vec<Sample>, label_set: impl IntoIterator<Item = CategoryId>, dim: usize) -> Result<Self> {
        let mut labels: Vec<CategoryId> = label_set.into_iter().collect();
        labels.sort();
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return Err(SpvError::DuplicateLabel(w[0].to_string()));
        }
        if labels.is_empty() {
            return Err(SpvError::EmptyLabelSet);
        }
        let mut ids = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(SpvError::DuplicateSample(s.id.clone()));
            }
            if s.features.len() != dim {
                return Err(SpvError::DimMismatch {
                    expected: dim,
                    got: s.features.len(),
                    context: format!("sample `{}`", s.id),
                });
            }
            if labels.binary_search(&s.label).is_err() {
                return Err(SpvError::LabelOutsideSet {
                    sample: s.id.clone(),
                    label: s.label.to_string(),
                });
            }
        }
        Ok(Self {
            samples,
            label_set: labels,
            dim,
        })
    }

    /// Builds a problem whose label set is exactly the labels used by `samples`.
    pub fn from_samples(samples: Vec<Sample>, dim: usize) -> Result<Self> {
        let labels: BTreeSet<CategoryId> = samples.iter().map(|s| s.label.clone()).collect();
        Self::new(samples, labels, dim)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn label_set(&self) -> &[CategoryId] {
        &self.label_set
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.label_set.len()
    }

    /// Position of `label` in the label set.
    pub fn class_index(&self, label: &CategoryId) -> Option<usize> {
        self.label_set.binary_search(label).ok()
    }

    /// Class index of every sample, in sample order.
    pub fn targets(&self) -> Vec<usize> {
        let index: HashMap<&CategoryId, usize> = self.label_set.iter().enumerate().map(|(i, c)| (c, i)).collect();
        self.samples.iter().map(|s| index[&s.label]).collect()
    }

    pub fn to_manifest(&self) -> Manifest {
        Manifest {
            dim: self.dim,
            rows: self
                .samples
                .iter()
                .map(|s| ManifestRow {
                    id: s.id.clone(),
                    label: s.label.to_string(),
                    features: s.features.clone(),
                })
                .collect(),
        }
    }

    /// The label set is inferred from the rows, so a problem round-trips
    /// exactly when each of its labels has at least one sample.
    pub fn from_manifest(manifest: Manifest) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.rows.len());
        for (i, row) in manifest.rows.into_iter().enumerate() {
            let label = CategoryId::new(row.label).map_err(|e| SpvError::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
            samples.push(Sample {
                id: row.id,
                features: row.features,
                label,
            });
        }
        Self::from_samples(samples, manifest.dim)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_manifest(Manifest::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_manifest().save(path)
    }
}

/// Specific-to-generic category assignment produced by a grouping variation.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupingMap {
    pub entries: BTreeMap<CategoryId, CategoryId>,
}

impl GroupingMap {
    pub fn generic_labels(&self) -> BTreeSet<CategoryId> {
        self.entries.values().cloned().collect()
    }

    pub fn get(&self, specific: &CategoryId) -> Option<&CategoryId> {
        self.entries.get(specific)
    }

    /// Relabels every sample through the map; the sample set is unchanged.
    pub fn apply(&self, sp: &SourceProblem) -> Result<SourceProblem> {
        let mut label_set = BTreeSet::new();
        for c in sp.label_set() {
            let g = self.get(c).ok_or_else(|| SpvError::Unmapped(c.to_string()))?;
            label_set.insert(g.clone());
        }
        let samples = sp
            .samples()
            .iter()
            .map(|s| Sample {
                id: s.id.clone(),
                features: s.features.clone(),
                label: self.entries[&s.label].clone(),
            })
            .collect();
        SourceProblem::new(samples, label_set, sp.dim())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let err = |message: String| SpvError::Parse { line, message };
            let (s, g) = raw
                .trim_end_matches('\r')
                .split_once('\t')
                .ok_or_else(|| err("expected `specific<TAB>generic`".into()))?;
            let s = CategoryId::new(s).map_err(|e| err(e.to_string()))?;
            let g = CategoryId::new(g).map_err(|e| err(e.to_string()))?;
            if entries.insert(s.clone(), g).is_some() {
                return Err(err(format!("`{s}` mapped twice")));
            }
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(s, g)| format!("{s}\t{g}\n")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

type Element = (Vec<u64>, CategoryId);

fn elements(sp: &SourceProblem) -> HashSet<Element> {
    sp.samples()
        .iter()
        .map(|s| (s.features.iter().map(|v| v.to_bits()).collect(), s.label.clone()))
        .collect()
}

/// True when `candidate` is a valid variation of `initial`: at least one
/// (image, label) element differs between the two, and at least one element
/// of the candidate shares its image or its label with an element of the
/// initial problem. Identical copies and fully disjoint datasets are rejected.
pub fn validate_spv(initial: &SourceProblem, candidate: &SourceProblem) -> bool {
    let a = elements(initial);
    let b = elements(candidate);
    let varied = a != b;
    let images: HashSet<&Vec<u64>> = a.iter().map(|(x, _)| x).collect();
    let labels: HashSet<&CategoryId> = a.iter().map(|(_, y)| y).collect();
    let kept = b.iter().any(|(x, y)| images.contains(x) || labels.contains(y));
    varied && kept
}
