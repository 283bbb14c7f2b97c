//! gen -> spv -> train -> retrain -> extract -> eval -> score, all through files.
//!
//! Each stage hashes its config section and input files; when the hash matches
//! `.stages/<stage>.sha256` and the outputs exist, the stage is skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};
use unirep_core::experiment::{self, METHODS};
use unirep_core::metrics::{Problem, ScoreTable, UniversalityReport};
use unirep_core::muldip::MulDipNet;
use unirep_core::retrain::Strategy;
use unirep_core::spv::SourceProblem;
use unirep_core::Network;

use crate::model::{self, Model};
use crate::stages::{self, read_source};
use crate::Config;

const STAGES_DIR: &str = ".stages";
const DATA: &str = "data";
const SPV: &str = "spv";
const TRAINED: &str = "models/trained";
const RETRAINED: &str = "models/retrained";
const FEATURES: &str = "features";
const SCORES: &str = "scores.csv";
const SCORES_SIDECAR: &str = "scores.toml";
const DIMS: &str = "dims.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ran,
    Skipped,
}

struct Stage {
    name: &'static str,
    params: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn hash_path(h: &mut Sha256, root: &Path, path: &Path) -> Result<()> {
    let rel = path.strip_prefix(root).unwrap_or(path);
    h.update(rel.to_string_lossy().as_bytes());
    h.update([0]);
    if path.is_dir() {
        let mut entries = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?;
        entries.sort();
        for e in entries {
            hash_path(h, root, &e)?;
        }
    } else {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(())
}

impl Stage {
    fn digest(&self, root: &Path) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update(self.params.to_string().as_bytes());
        for input in &self.inputs {
            hash_path(&mut h, root, &root.join(input))?;
        }
        Ok(hex::encode(h.finalize()))
    }

    fn record(&self, root: &Path) -> PathBuf {
        root.join(STAGES_DIR).join(format!("{}.sha256", self.name))
    }

    /// Runs `body` unless the recorded hash is current; stale outputs are removed first.
    fn run(&self, root: &Path, body: impl FnOnce() -> Result<()>) -> Result<Status> {
        let go = || -> Result<Status> {
            let digest = self.digest(root)?;
            let record = self.record(root);
            let current = fs::read_to_string(&record).ok().is_some_and(|r| r.trim() == digest);
            if current && self.outputs.iter().all(|o| root.join(o).exists()) {
                log::info!("{}: up to date", self.name);
                return Ok(Status::Skipped);
            }
            log::info!("{}: running (inputs {})", self.name, &digest[..12]);
            for o in &self.outputs {
                let p = root.join(o);
                if p.is_dir() {
                    fs::remove_dir_all(&p)?;
                } else if p.exists() {
                    fs::remove_file(&p)?;
                }
            }
            let _ = fs::remove_file(&record);
            body()?;
            fs::create_dir_all(root.join(STAGES_DIR))?;
            fs::write(&record, format!("{digest}\n"))?;
            Ok(Status::Ran)
        };
        go().with_context(|| format!("stage {}", self.name))
    }
}

fn slug(method: &str) -> String {
    method.to_ascii_lowercase().replace('+', "-")
}

fn spv_file(index: usize, name: &str) -> String {
    format!("{SPV}/{index}-{name}.tsv")
}

/// Source problems in branch order: the initial one, then each variation.
fn branch_sources(root: &Path, cfg: &Config) -> Result<Vec<(String, SourceProblem)>> {
    let mut out = vec![(
        "specific".to_string(),
        read_source(&root.join(DATA).join(stages::SOURCE_FILE))?,
    )];
    for (i, recipe) in cfg.experiment.spv.iter().enumerate() {
        out.push((recipe.name(), read_source(&root.join(spv_file(i, &recipe.name())))?));
    }
    Ok(out)
}

fn load_net(path: &Path) -> Result<Network> {
    Network::load(path).with_context(|| format!("loading network {}", path.display()))
}

fn load_trained(root: &Path, sources: &[(String, SourceProblem)]) -> Result<(Vec<Network>, Network)> {
    let nets = (0..sources.len())
        .map(|k| load_net(&root.join(TRAINED).join(format!("branch-{k}.json"))))
        .collect::<Result<Vec<_>>>()?;
    let twin = load_net(&root.join(TRAINED).join("twin.json"))?;
    Ok((nets, twin))
}

fn muldip_of(nets: &[Network], sources: &[(String, SourceProblem)], cfg: &Config) -> Result<MulDipNet> {
    let branches = nets
        .iter()
        .zip(sources)
        .map(|(n, (name, sp))| stages::branch(name.clone(), n.clone(), sp.len()))
        .collect();
    stages::fuse(branches, &cfg.experiment)
}

fn target_names(root: &Path) -> Result<Vec<String>> {
    let path = root.join(DATA).join(stages::TARGET_LIST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

/// Runs every stage under `root` and returns the per-stage summary plus the report.
pub fn run(cfg: &Config, root: &Path) -> Result<String> {
    let e = &cfg.experiment;
    let metrics = cfg.metrics()?;
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let mut summary = String::new();
    let mut note = |name: &str, status: Status| {
        let what = match status {
            Status::Ran => "done",
            Status::Skipped => "skipped (inputs unchanged)",
        };
        let _ = writeln!(summary, "{name}: {what}");
    };

    let gen = Stage {
        name: "gen",
        params: json!({"seed": e.seed, "synth": e.synth, "targets": e.targets}),
        inputs: vec![],
        outputs: vec![DATA.into()],
    };
    let status = gen.run(root, || {
        stages::generate(e, &root.join(DATA))?;
        Ok(())
    })?;
    note("gen", status);

    let spv = Stage {
        name: "spv",
        params: json!({"seed": e.seed, "spv": e.spv}),
        inputs: vec![
            PathBuf::from(DATA).join(stages::SOURCE_FILE),
            PathBuf::from(DATA).join(stages::HIERARCHY_FILE),
            PathBuf::from(DATA).join(stages::LEVELS_DIR),
        ],
        outputs: vec![SPV.into()],
    };
    let status = spv.run(root, || {
        let data = root.join(DATA);
        let sp = read_source(&data.join(stages::SOURCE_FILE))?;
        let h = stages::read_hierarchy(&data.join(stages::HIERARCHY_FILE))?;
        let levels = data.join(stages::LEVELS_DIR);
        let basic = stages::read_levels(&levels.join(stages::level_file(experiment::Level::Basic)))?;
        let sup = stages::read_levels(&levels.join(stages::level_file(experiment::Level::Superordinate)))?;
        fs::create_dir_all(root.join(SPV))?;
        for (i, recipe) in e.spv.iter().enumerate() {
            let grouping = stages::recipe_grouping(recipe, stages::recipe_seed(e, i), &h, &basic, &sup);
            let (variant, map) =
                stages::apply_grouping(&sp, &grouping).with_context(|| format!("recipe {}", recipe.name()))?;
            let path = root.join(spv_file(i, &recipe.name()));
            variant.save(&path)?;
            map.save(path.with_extension("map"))?;
        }
        Ok(())
    })?;
    note("spv", status);

    let train = Stage {
        name: "train",
        params: json!({"seed": e.seed, "network": e.network, "train": e.train}),
        inputs: vec![PathBuf::from(DATA).join(stages::SOURCE_FILE), SPV.into()],
        outputs: vec![TRAINED.into()],
    };
    let status = train.run(root, || {
        let sources = branch_sources(root, cfg)?;
        let refs: Vec<&SourceProblem> = sources.iter().map(|(_, sp)| sp).collect();
        let (nets, twin) = rayon::join(|| stages::train_networks(&refs, e), || stages::train_twin(refs[0], e));
        let dir = root.join(TRAINED);
        fs::create_dir_all(&dir)?;
        for (k, net) in nets?.iter().enumerate() {
            net.save(dir.join(format!("branch-{k}.json")))?;
        }
        twin?.save(dir.join("twin.json"))?;
        Ok(())
    })?;
    note("train", status);

    let retrain = Stage {
        name: "retrain",
        params: json!({"seed": e.seed, "retrain": e.retrain, "init_sigma": e.train.init_sigma, "norm": e.norm}),
        inputs: vec![
            PathBuf::from(DATA).join(stages::SOURCE_FILE),
            SPV.into(),
            TRAINED.into(),
        ],
        outputs: vec![RETRAINED.into()],
    };
    let status = retrain.run(root, || {
        let sources = branch_sources(root, cfg)?;
        let (nets, _) = load_trained(root, &sources)?;
        let muldip = muldip_of(&nets, &sources, cfg)?;
        let sp0 = &sources[0].1;
        let refs: Vec<&SourceProblem> = sources.iter().map(|(_, sp)| sp).collect();
        let dir = root.join(RETRAINED);
        fs::create_dir_all(&dir)?;
        let singles = [Strategy::Frst, Strategy::Sft, Strategy::Fsft]
            .par_iter()
            .map(|&s| stages::retrain_single(&nets[0], sp0, &e.retrain_spec(s)).map(|n| (s, n)))
            .collect::<Result<Vec<_>>>()?;
        for (s, net) in singles {
            net.save(dir.join(format!("{s}.json")))?;
        }
        let spec = e.retrain_spec(Strategy::Fsft);
        let (plain, dr) = rayon::join(
            || stages::retrain_fused(&muldip, &refs, &spec, false),
            || stages::retrain_fused(&muldip, &refs, &spec, true),
        );
        plain?.save_bundle(dir.join("muldip-fsft"))?;
        dr?.save_bundle(dir.join("muldip-fsft-dr"))?;
        Ok(())
    })?;
    note("retrain", status);

    let extract = Stage {
        name: "extract",
        params: json!({"norm": e.norm, "methods": METHODS}),
        inputs: vec![
            PathBuf::from(DATA).join(stages::TARGETS_DIR),
            PathBuf::from(DATA).join(stages::TARGET_LIST),
            SPV.into(),
            TRAINED.into(),
            RETRAINED.into(),
        ],
        outputs: vec![FEATURES.into()],
    };
    let status = extract.run(root, || {
        let sources = branch_sources(root, cfg)?;
        let (nets, twin) = load_trained(root, &sources)?;
        let muldip = muldip_of(&nets, &sources, cfg)?;
        let first = stages::branch(sources[0].0.clone(), nets[0].clone(), sources[0].1.len());
        let ensemble = stages::fuse(
            vec![first, stages::branch("specific-twin", twin, sources[0].1.len())],
            e,
        )?;
        let retrained = root.join(RETRAINED);
        let models: Vec<(&str, Model)> = vec![
            (experiment::NET_S, Model::Single(nets[0].clone())),
            (experiment::NET_G, Model::Single(nets[1].clone())),
            (experiment::ENSEMBLE, Model::Fused(ensemble)),
            (experiment::MULDIP, Model::Fused(muldip)),
            (experiment::FRST, Model::load(&retrained.join("frst.json"))?),
            (experiment::SFT, Model::load(&retrained.join("sft.json"))?),
            (experiment::FSFT, Model::load(&retrained.join("fsft.json"))?),
            (experiment::MULDIP_FSFT, Model::load(&retrained.join("muldip-fsft"))?),
            (
                experiment::MULDIP_FSFT_DR,
                Model::load(&retrained.join("muldip-fsft-dr"))?,
            ),
        ];
        let targets = target_names(root)?
            .iter()
            .map(|n| stages::read_target(&root.join(DATA).join(stages::TARGETS_DIR).join(n)))
            .collect::<Result<Vec<_>>>()?;
        let cells: Vec<(usize, usize)> = (0..models.len())
            .flat_map(|m| (0..targets.len()).map(move |t| (m, t)))
            .collect();
        cells.par_iter().try_for_each(|&(m, t)| -> Result<()> {
            let (method, model) = &models[m];
            let feats =
                model::extract_target(model.extractor(), &targets[t]).with_context(|| format!("method {method}"))?;
            feats.save(root.join(FEATURES).join(slug(method)).join(&targets[t].name))?;
            Ok(())
        })?;
        let mut dims = String::new();
        for (method, model) in &models {
            let _ = writeln!(dims, "{method}\t{}", model.extractor().output_dim());
        }
        fs::write(root.join(FEATURES).join(DIMS), dims)?;
        Ok(())
    })?;
    note("extract", status);

    let eval = Stage {
        name: "eval",
        params: json!({"seed": e.seed, "c_grid": e.c_grid}),
        inputs: vec![FEATURES.into(), PathBuf::from(DATA).join(stages::TARGET_LIST)],
        outputs: vec![SCORES.into(), SCORES_SIDECAR.into()],
    };
    let status = eval.run(root, || {
        let names = target_names(root)?;
        let cells: Vec<(usize, usize)> = (0..METHODS.len())
            .flat_map(|m| (0..names.len()).map(move |t| (m, t)))
            .collect();
        let scores = cells
            .par_iter()
            .map(|&(m, t)| {
                let dir = root.join(FEATURES).join(slug(METHODS[m])).join(&names[t]);
                let feats = stages::read_target(&dir)?;
                stages::evaluate_features(&feats, e).with_context(|| format!("method {}", METHODS[m]))
            })
            .collect::<Result<Vec<f64>>>()?;
        let n = names.len();
        let table = ScoreTable::new(
            names.iter().map(|t| Problem::percent(t.clone())).collect(),
            METHODS
                .iter()
                .enumerate()
                .map(|(m, name)| (name.to_string(), scores[m * n..(m + 1) * n].to_vec()))
                .collect(),
            experiment::NET_S,
        )?;
        table.save(root.join(SCORES))?;
        Ok(())
    })?;
    note("eval", status);

    let score = Stage {
        name: "score",
        params: json!({"metrics": cfg.pipeline.metrics, "vdc": cfg.pipeline.vdc}),
        inputs: vec![SCORES.into(), SCORES_SIDECAR.into(), PathBuf::from(FEATURES).join(DIMS)],
        outputs: vec!["report.txt".into(), "report.csv".into()],
    };
    let status = score.run(root, || {
        let table = ScoreTable::load(root.join(SCORES))?;
        let report = UniversalityReport::compute(&table, &metrics, &cfg.pipeline.vdc)?;
        let dims = fs::read_to_string(root.join(FEATURES).join(DIMS))?;
        let mut text = report.to_text();
        text.push_str("\nrepresentation width\n");
        for line in dims.lines() {
            if let Some((m, d)) = line.split_once('\t') {
                let _ = writeln!(text, "  {m:<16} {d}");
            }
        }
        fs::write(root.join("report.txt"), text)?;
        fs::write(root.join("report.csv"), report.to_csv()?)?;
        Ok(())
    })?;
    note("score", status);

    let report = fs::read_to_string(root.join("report.txt")).context("reading the report")?;
    Ok(format!("{summary}\n{report}"))
}
