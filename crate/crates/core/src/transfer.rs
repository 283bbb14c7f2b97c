//! Frozen-feature evaluation on target problems.
//!
//! Features come from a [`FeatureExtractor`] that is never modified. One
//! linear SVM per class is fit on them, the cost is picked on the validation
//! split, and the model refit on train and validation is scored on test.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::CategoryId;
use crate::muldip::MulDipNet;
use crate::nnet::{argmax, Network};
use crate::rng;
use crate::spv::manifest::{Manifest, ManifestRow};

/// Passes over the training set for each binary SVM.
pub const SVM_EPOCHS: usize = 40;
pub const DEFAULT_C_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
const TARGET_FILE: &str = "target.toml";
const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("need at least two classes, got {0}")]
    SingleClass(usize),
    #[error("feature vector {index} has dimension {got}, expected {expected}")]
    DimMismatch { index: usize, expected: usize, got: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{what}: lengths differ ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("the cost grid is empty")]
    EmptyGrid,
    #[error("cost must be positive and finite, got {0}")]
    Cost(f64),
    #[error("label index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("no class has a positive example")]
    NoPositives,
    #[error("invalid target problem: {0}")]
    Invalid(String),
    #[error("feature extraction failed: {0}")]
    Extractor(#[source] Box<dyn std::error::Error + Send + Sync>),
    #[error("{path}: {source}")]
    Manifest {
        path: String,
        #[source]
        source: crate::spv::SpvError,
    },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TransferError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Map,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Accuracy => "accuracy",
            Self::Map => "map",
        })
    }
}

/// Anything mapping a raw sample to a frozen representation.
pub trait FeatureExtractor: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn extract(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl FeatureExtractor for Network {
    fn input_dim(&self) -> usize {
        self.arch().input_dim()
    }

    fn output_dim(&self) -> usize {
        self.arch().penultimate_width()
    }

    fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.penultimate(x).map_err(|e| TransferError::Extractor(Box::new(e)))
    }
}

impl FeatureExtractor for MulDipNet {
    fn input_dim(&self) -> usize {
        MulDipNet::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        self.fused_dim()
    }

    fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        MulDipNet::extract(self, x)
            .map(|f| f.vector)
            .map_err(|e| TransferError::Extractor(Box::new(e)))
    }
}

/// Raw samples used as features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Identity(pub usize);

impl FeatureExtractor for Identity {
    fn input_dim(&self) -> usize {
        self.0
    }

    fn output_dim(&self) -> usize {
        self.0
    }

    fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.0 {
            return Err(TransferError::DimMismatch {
                index: 0,
                expected: self.0,
                got: x.len(),
            });
        }
        Ok(x.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSample {
    pub id: String,
    pub features: Vec<f64>,
    /// One label for mono-label problems, one or more otherwise.
    pub labels: BTreeSet<CategoryId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetProblem {
    pub name: String,
    pub metric: Metric,
    dim: usize,
    classes: Vec<CategoryId>,
    train: Vec<TargetSample>,
    val: Vec<TargetSample>,
    test: Vec<TargetSample>,
}

#[derive(Serialize, Deserialize)]
struct TargetFile {
    name: String,
    metric: Metric,
    dim: usize,
}

impl TargetProblem {
    pub fn new(
        name: impl Into<String>,
        metric: Metric,
        dim: usize,
        train: Vec<TargetSample>,
        val: Vec<TargetSample>,
        test: Vec<TargetSample>,
    ) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut classes = BTreeSet::new();
        for (split, samples) in SPLITS.iter().zip([&train, &val, &test]) {
            if samples.is_empty() {
                return Err(TransferError::Invalid(format!("{split} split is empty")));
            }
            for s in samples {
                if !ids.insert(s.id.clone()) {
                    return Err(TransferError::Invalid(format!("sample {} appears twice", s.id)));
                }
                if s.features.len() != dim {
                    return Err(TransferError::Invalid(format!(
                        "sample {} has {} features, expected {dim}",
                        s.id,
                        s.features.len()
                    )));
                }
                match (metric, s.labels.len()) {
                    (_, 0) => return Err(TransferError::Invalid(format!("sample {} has no label", s.id))),
                    (Metric::Accuracy, n) if n > 1 => {
                        return Err(TransferError::Invalid(format!(
                            "sample {} has {n} labels but the problem is scored by accuracy",
                            s.id
                        )))
                    }
                    _ => {}
                }
                classes.extend(s.labels.iter().cloned());
            }
        }
        if classes.len() < 2 {
            return Err(TransferError::SingleClass(classes.len()));
        }
        Ok(Self {
            name: name.into(),
            metric,
            dim,
            classes: classes.into_iter().collect(),
            train,
            val,
            test,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[CategoryId] {
        &self.classes
    }

    pub fn train(&self) -> &[TargetSample] {
        &self.train
    }

    pub fn val(&self) -> &[TargetSample] {
        &self.val
    }

    pub fn test(&self) -> &[TargetSample] {
        &self.test
    }

    fn label_indices(&self, samples: &[TargetSample]) -> Vec<Vec<usize>> {
        samples
            .iter()
            .map(|s| {
                s.labels
                    .iter()
                    .map(|l| self.classes.binary_search(l).expect("classes collected from samples"))
                    .collect()
            })
            .collect()
    }

    /// Writes `target.toml` plus `train.tsv`, `val.tsv`, `test.tsv` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let header = TargetFile {
            name: self.name.clone(),
            metric: self.metric,
            dim: self.dim,
        };
        std::fs::write(
            dir.join(TARGET_FILE),
            toml::to_string(&header).map_err(|e| TransferError::Invalid(e.to_string()))?,
        )?;
        for (split, samples) in SPLITS.iter().zip([&self.train, &self.val, &self.test]) {
            let manifest = Manifest {
                dim: self.dim,
                rows: samples
                    .iter()
                    .map(|s| ManifestRow {
                        id: s.id.clone(),
                        label: s.labels.iter().map(CategoryId::as_str).collect::<Vec<_>>().join("|"),
                        features: s.features.clone(),
                    })
                    .collect(),
            };
            manifest
                .save(dir.join(format!("{split}.tsv")))
                .map_err(|source| TransferError::Manifest {
                    path: format!("{split}.tsv"),
                    source,
                })?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let header: TargetFile = toml::from_str(&std::fs::read_to_string(dir.join(TARGET_FILE))?)?;
        let mut splits = Vec::with_capacity(3);
        for split in SPLITS {
            let path = dir.join(format!("{split}.tsv"));
            let wrap = |source| TransferError::Manifest {
                path: path.display().to_string(),
                source,
            };
            let manifest = Manifest::load(&path).map_err(wrap)?;
            if manifest.dim != header.dim {
                return Err(TransferError::Invalid(format!(
                    "{} declares dim {}, target.toml says {}",
                    path.display(),
                    manifest.dim,
                    header.dim
                )));
            }
            let mut samples = Vec::with_capacity(manifest.rows.len());
            for row in manifest.rows {
                let labels = row
                    .label
                    .split('|')
                    .map(CategoryId::new)
                    .collect::<Result<BTreeSet<_>, _>>()
                    .map_err(|e| TransferError::Invalid(format!("{}: sample {}: {e}", path.display(), row.id)))?;
                samples.push(TargetSample {
                    id: row.id,
                    features: row.features,
                    labels,
                });
            }
            splits.push(samples);
        }
        let test = splits.pop().expect("three splits");
        let val = splits.pop().expect("three splits");
        let train = splits.pop().expect("three splits");
        Self::new(header.name, header.metric, header.dim, train, val, test)
    }
}

/// One-vs-all linear classifier: `score_k(x) = w_k . x + b_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub cost: f64,
}

impl LinearModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.scores(x))
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().flatten().map(|w| w * w).sum::<f64>().sqrt()
    }
}

fn check_features(features: &[Vec<f64>]) -> Result<usize> {
    let dim = features.first().ok_or(TransferError::Empty("feature set"))?.len();
    if let Some((index, f)) = features.iter().enumerate().find(|(_, f)| f.len() != dim) {
        return Err(TransferError::DimMismatch {
            index,
            expected: dim,
            got: f.len(),
        });
    }
    Ok(dim)
}

/// Binary hinge-loss SVM by averaged stochastic subgradient descent with
/// step `1 / (lambda t)`, `lambda = 1 / (C n)`. The bias is the weight of a
/// constant feature. Returns `(w, b)`.
fn fit_binary(features: &[Vec<f64>], positive: &[bool], cost: f64, seed: u64) -> (Vec<f64>, f64) {
    let n = features.len();
    let dim = features[0].len();
    let lambda = 1.0 / (cost * n as f64);
    let radius = 1.0 / lambda.sqrt();
    let mut w = vec![0.0; dim + 1];
    let mut avg = vec![0.0; dim + 1];
    let mut averaged = 0usize;
    let total = SVM_EPOCHS * n;
    let mut rng = rng::seeded(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0usize;
    for _ in 0..SVM_EPOCHS {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let x = &features[i];
            let y = if positive[i] { 1.0 } else { -1.0 };
            let margin = y * (w[..dim].iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + w[dim]);
            let eta = 1.0 / (lambda * t as f64);
            let shrink = 1.0 - 1.0 / t as f64;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (a, v) in w[..dim].iter_mut().zip(x) {
                    *a += eta * y * v;
                }
                w[dim] += eta * y;
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius {
                let s = radius / norm;
                w.iter_mut().for_each(|v| *v *= s);
            }
            // Average the second half of the iterates.
            if 2 * t > total {
                averaged += 1;
                let k = averaged as f64;
                for (a, v) in avg.iter_mut().zip(&w) {
                    *a += (v - *a) / k;
                }
            }
        }
    }
    let b = avg.pop().expect("bias slot");
    (avg, b)
}

/// Fits one binary SVM per class; `labels[i]` lists the classes of sample `i`.
pub fn fit_onevsall(
    features: &[Vec<f64>],
    labels: &[Vec<usize>],
    n_classes: usize,
    cost: f64,
    seed: u64,
) -> Result<LinearModel> {
    check_features(features)?;
    if features.len() != labels.len() {
        return Err(TransferError::LengthMismatch {
            what: "features and labels",
            left: features.len(),
            right: labels.len(),
        });
    }
    if !(cost.is_finite() && cost > 0.0) {
        return Err(TransferError::Cost(cost));
    }
    let mut present = BTreeSet::new();
    for l in labels.iter().flatten() {
        if *l >= n_classes {
            return Err(TransferError::LabelOutOfRange {
                label: *l,
                classes: n_classes,
            });
        }
        present.insert(*l);
    }
    if n_classes < 2 || present.len() < 2 {
        return Err(TransferError::SingleClass(present.len()));
    }
    let fitted: Vec<(Vec<f64>, f64)> = (0..n_classes)
        .into_par_iter()
        .map(|k| {
            let positive: Vec<bool> = labels.iter().map(|ls| ls.contains(&k)).collect();
            fit_binary(features, &positive, cost, rng::derive(seed, k as u64))
        })
        .collect();
    let (weights, bias) = fitted.into_iter().unzip();
    Ok(LinearModel { weights, bias, cost })
}

/// `100 * correct / total`.
pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(TransferError::LengthMismatch {
            what: "predictions and truth",
            left: predictions.len(),
            right: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(TransferError::Empty("prediction list"));
    }
    let correct = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(100.0 * correct as f64 / truth.len() as f64)
}

/// Mean of the precision at the rank of each positive, items ranked by
/// decreasing score (ties keep input order). `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    /// Percentage.
    pub map: f64,
    /// Classes skipped for lack of positives.
    pub excluded: Vec<usize>,
}

/// `scores[i][k]` is the score of sample `i` for class `k`.
pub fn mean_average_precision(scores: &[Vec<f64>], truth: &[Vec<usize>], n_classes: usize) -> Result<MapResult> {
    if scores.len() != truth.len() {
        return Err(TransferError::LengthMismatch {
            what: "scores and truth",
            left: scores.len(),
            right: truth.len(),
        });
    }
    if scores.is_empty() {
        return Err(TransferError::Empty("score list"));
    }
    let mut aps = Vec::with_capacity(n_classes);
    let mut excluded = Vec::new();
    for k in 0..n_classes {
        let column: Vec<f64> = scores.iter().map(|s| s[k]).collect();
        let positive: Vec<bool> = truth.iter().map(|t| t.contains(&k)).collect();
        match average_precision(&column, &positive) {
            Some(ap) => aps.push(ap),
            None => {
                log::warn!("class {k} has no positive example; excluded from mAP");
                excluded.push(k);
            }
        }
    }
    if aps.is_empty() {
        return Err(TransferError::NoPositives);
    }
    Ok(MapResult {
        map: 100.0 * aps.iter().sum::<f64>() / aps.len() as f64,
        excluded,
    })
}

/// Features plus class indices of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Vec<usize>>,
}

impl LabeledFeatures {
    fn concat(&self, other: &Self) -> Self {
        Self {
            features: self.features.iter().chain(&other.features).cloned().collect(),
            labels: self.labels.iter().chain(&other.labels).cloned().collect(),
        }
    }
}

/// Score of `model` on `data` under `metric` (percentage).
pub fn score(model: &LinearModel, data: &LabeledFeatures, metric: Metric) -> Result<f64> {
    let n_classes = model.weights.len();
    match metric {
        Metric::Accuracy => {
            let predictions: Vec<usize> = data.features.iter().map(|x| model.predict(x)).collect();
            let truth: Vec<usize> = data.labels.iter().map(|l| l[0]).collect();
            accuracy(&predictions, &truth)
        }
        Metric::Map => {
            let scores: Vec<Vec<f64>> = data.features.iter().map(|x| model.scores(x)).collect();
            Ok(mean_average_precision(&scores, &data.labels, n_classes)?.map)
        }
    }
}

/// Cost with the best validation score; ties go to the smallest cost.
/// Returns the cost and the score of every grid point in grid order.
pub fn crossval_cost(
    train: &LabeledFeatures,
    val: &LabeledFeatures,
    n_classes: usize,
    metric: Metric,
    grid: &[f64],
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    if grid.is_empty() {
        return Err(TransferError::EmptyGrid);
    }
    let scores = grid
        .iter()
        .map(|&c| {
            let model = fit_onevsall(&train.features, &train.labels, n_classes, c, seed)?;
            score(&model, val, metric)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for i in 1..grid.len() {
        let better = scores[i] > scores[best];
        let tie_smaller = scores[i] == scores[best] && grid[i] < grid[best];
        if better || tie_smaller {
            best = i;
        }
    }
    Ok((grid[best], scores))
}

pub fn extract_split(
    extractor: &dyn FeatureExtractor,
    target: &TargetProblem,
    samples: &[TargetSample],
) -> Result<LabeledFeatures> {
    let features = samples
        .par_iter()
        .map(|s| extractor.extract(&s.features))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledFeatures {
        features,
        labels: target.label_indices(samples),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub score: f64,
    pub metric: Metric,
    pub cost: f64,
    pub val_scores: Vec<f64>,
}

/// Frozen-feature transfer score of `extractor` on `target`.
pub fn evaluate(
    extractor: &dyn FeatureExtractor,
    target: &TargetProblem,
    grid: &[f64],
    seed: u64,
) -> Result<Evaluation> {
    if extractor.input_dim() != target.dim() {
        return Err(TransferError::DimMismatch {
            index: 0,
            expected: extractor.input_dim(),
            got: target.dim(),
        });
    }
    let train = extract_split(extractor, target, target.train())?;
    let val = extract_split(extractor, target, target.val())?;
    let test = extract_split(extractor, target, target.test())?;
    let n_classes = target.classes().len();
    let (cost, val_scores) = crossval_cost(&train, &val, n_classes, target.metric, grid, seed)?;
    let both = train.concat(&val);
    let model = fit_onevsall(&both.features, &both.labels, n_classes, cost, seed)?;
    Ok(Evaluation {
        score: score(&model, &test, target.metric)?,
        metric: target.metric,
        cost,
        val_scores,
    })
}
