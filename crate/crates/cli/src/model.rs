//! A trained representation on disk: one network file or a fused bundle directory.

use std::path::Path;

use anyhow::{Context, Result};
use unirep_core::muldip::MulDipNet;
use unirep_core::transfer::{self, FeatureExtractor, TargetProblem, TargetSample};
use unirep_core::Network;

#[derive(Debug, Clone)]
pub enum Model {
    Single(Network),
    Fused(MulDipNet),
}

impl Model {
    /// Directories are read as bundles, files as single networks.
    pub fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let net = MulDipNet::load_bundle(path).with_context(|| format!("loading bundle {}", path.display()))?;
            Ok(Self::Fused(net))
        } else {
            let net = Network::load(path).with_context(|| format!("loading network {}", path.display()))?;
            Ok(Self::Single(net))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Self::Single(net) => net.save(path).with_context(|| format!("writing {}", path.display())),
            Self::Fused(net) => net
                .save_bundle(path)
                .with_context(|| format!("writing bundle {}", path.display())),
        }
    }

    pub fn extractor(&self) -> &dyn FeatureExtractor {
        match self {
            Self::Single(net) => net,
            Self::Fused(net) => net,
        }
    }
}

/// The target problem re-expressed in the representation's feature space.
pub fn extract_target(extractor: &dyn FeatureExtractor, target: &TargetProblem) -> Result<TargetProblem> {
    anyhow::ensure!(
        extractor.input_dim() == target.dim(),
        "target {} has dimension {}, the model expects {}",
        target.name,
        target.dim(),
        extractor.input_dim()
    );
    let map = |samples: &[TargetSample]| -> Result<Vec<TargetSample>> {
        let feats = transfer::extract_split(extractor, target, samples)
            .with_context(|| format!("extracting features for {}", target.name))?;
        Ok(samples
            .iter()
            .zip(feats.features)
            .map(|(s, features)| TargetSample {
                id: s.id.clone(),
                features,
                labels: s.labels.clone(),
            })
            .collect())
    };
    let out = TargetProblem::new(
        target.name.clone(),
        target.metric,
        extractor.output_dim(),
        map(target.train())?,
        map(target.val())?,
        map(target.test())?,
    )?;
    Ok(out)
}
