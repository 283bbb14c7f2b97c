//! `unirep`: file-based pipeline around `unirep-core`.
//!
//! Every subcommand runs one stage and writes its artifacts under `--out`;
//! `pipeline` chains all of them with content-hash resumability.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Deserialize;
use unirep_core::experiment::ExperimentConfig;
use unirep_core::metrics::{Metric, Problem, ScoreTable, UniversalityReport, VdcParams};
use unirep_core::retrain::Strategy;
use unirep_core::transfer::TargetProblem;

pub mod model;
pub mod pipeline;
pub mod stages;

use model::Model;
use stages::Grouping;

/// Config used when `--config` is not given.
pub const DEFAULT_CONFIG: &str = include_str!("../assets/default.toml");
pub const DEFAULT_OUT: &str = "unirep-out";
pub const DEFAULT_METRICS: &str = "mnrg,rg,avg,anrg,bc";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Bad flag combinations found after parsing; exits with [`EXIT_USAGE`].
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(
    name = "unirep",
    version,
    about = "Build, retrain, fuse and score feature representations"
)]
pub struct Cli {
    /// Worker threads for training and evaluation.
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "S")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupingKind {
    Semantic,
    Random,
    Clustering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Frst,
    Sft,
    Fsft,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Frst => Strategy::Frst,
            StrategyArg::Sft => Strategy::Sft,
            StrategyArg::Fsft => Strategy::Fsft,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic hierarchy, source problem, level sets and targets.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Derive a variation of a source problem.
    Spv {
        #[arg(long)]
        source: PathBuf,
        #[arg(long, value_enum)]
        grouping: GroupingKind,
        /// Hierarchy edge list (semantic grouping).
        #[arg(long)]
        hierarchy: Option<PathBuf>,
        /// Level set (semantic grouping).
        #[arg(long)]
        levels: Option<PathBuf>,
        /// Number of groups (random grouping).
        #[arg(long)]
        groups: Option<usize>,
        /// Number of clusters (clustering grouping).
        #[arg(long)]
        k: Option<usize>,
        /// Output base name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Train one network per source problem; several sources give a fused bundle.
    Train {
        #[arg(long, required = true)]
        source: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "network")]
        name: String,
    },
    /// Self fine-tune a network or every branch of a bundle.
    Retrain {
        #[arg(long)]
        model: PathBuf,
        /// One source problem per branch, in branch order.
        #[arg(long, required = true)]
        source: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "fsft")]
        strategy: StrategyArg,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        split_index: Option<usize>,
        /// Shrink each branch's penultimate layer so the fused width stays that of one branch.
        #[arg(long)]
        dr: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
    },
    /// Map target problems into a model's feature space.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true)]
        target: Vec<PathBuf>,
    },
    /// Score extracted features and add the method's row to a score table.
    Eval {
        #[arg(long, required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        method: String,
        /// Defaults to `<out>/scores.csv`.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Reference method of a new table; defaults to `--method`.
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Universality report of a score table.
    Score {
        #[arg(long)]
        table: PathBuf,
        #[arg(long, default_value = DEFAULT_METRICS)]
        metrics: String,
        #[arg(long)]
        reference: Option<String>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[arg(long)]
        vdc_gamma: Option<f64>,
        #[arg(long)]
        vdc_emax_factor: Option<f64>,
    },
    /// Run every stage end to end, skipping stages whose inputs are unchanged.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Settings of the `[pipeline]` table; everything else is the experiment config.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSettings {
    pub metrics: Vec<String>,
    pub out: Option<PathBuf>,
    pub vdc: VdcParams,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            metrics: DEFAULT_METRICS.split(',').map(str::to_string).collect(),
            out: None,
            vdc: VdcParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub experiment: ExperimentConfig,
    pub pipeline: PipelineSettings,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text)?;
        let pipeline = match table.remove("pipeline") {
            Some(v) => v.try_into()?,
            None => PipelineSettings::default(),
        };
        let experiment: ExperimentConfig = toml::Value::Table(table).try_into()?;
        experiment.validate()?;
        Ok(Self { experiment, pipeline })
    }

    /// The file at `path`, or the bundled default; `seed` overrides the config seed.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("in config {}", p.display()))?
            }
            None => Self::parse(DEFAULT_CONFIG).context("in the bundled default config")?,
        };
        if let Some(s) = seed {
            cfg.experiment.seed = s;
        }
        Ok(cfg)
    }

    pub fn metrics(&self) -> Result<Vec<Metric>> {
        parse_metrics(&self.pipeline.metrics.join(","))
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let metrics = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Metric>().map_err(usage))
        .collect::<Result<Vec<_>>>()?;
    if metrics.is_empty() {
        return Err(usage("no metrics requested"));
    }
    Ok(metrics)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_DATA
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        // Fails only if a pool already exists, e.g. when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let out = cli.out.clone();
    let out_dir = || out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    match cli.command {
        Command::Gen { config } => cmd_gen(&Config::load(config.as_deref(), cli.seed)?, &out_dir()),
        Command::Spv {
            source,
            grouping,
            hierarchy,
            levels,
            groups,
            k,
            name,
        } => cmd_spv(
            &SpvArgs {
                source,
                grouping,
                hierarchy,
                levels,
                groups,
                k,
                name,
                seed: cli.seed.unwrap_or(0),
            },
            &out_dir(),
        ),
        Command::Train { source, config, name } => {
            cmd_train(&source, &Config::load(config.as_deref(), cli.seed)?, &name, &out_dir())
        }
        Command::Retrain {
            model,
            source,
            strategy,
            alpha,
            split_index,
            dr,
            config,
            name,
        } => {
            let cfg = Config::load(config.as_deref(), cli.seed)?;
            let mut spec = cfg.experiment.retrain_spec(strategy.into());
            if let Some(a) = alpha {
                spec.alpha = a;
                spec.cfg.alpha = a;
            }
            if let Some(l) = split_index {
                spec.split_index = l;
            }
            let name = name.unwrap_or_else(|| format!("{}{}", Strategy::from(strategy), if dr { "-dr" } else { "" }));
            cmd_retrain(&model, &source, &spec, dr, &name, &out_dir())
        }
        Command::Extract { model, target } => cmd_extract(&model, &target, &out_dir()),
        Command::Eval {
            features,
            method,
            table,
            reference,
            config,
        } => {
            let cfg = Config::load(config.as_deref(), cli.seed)?;
            let table = table.unwrap_or_else(|| out_dir().join("scores.csv"));
            cmd_eval(&features, &method, &table, reference.as_deref(), &cfg)
        }
        Command::Score {
            table,
            metrics,
            reference,
            format,
            vdc_gamma,
            vdc_emax_factor,
        } => {
            let mut vdc = VdcParams::default();
            if let Some(g) = vdc_gamma {
                vdc.gamma = g;
            }
            if let Some(f) = vdc_emax_factor {
                vdc.emax_factor = f;
            }
            let metrics = parse_metrics(&metrics)?;
            let text = cmd_score(&table, &metrics, reference.as_deref(), format, &vdc, out.as_deref())?;
            print!("{text}");
            Ok(())
        }
        Command::Pipeline { config } => {
            let cfg = Config::load(config.as_deref(), cli.seed)?;
            let dir = out
                .or_else(|| cfg.pipeline.out.clone())
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
            let summary = pipeline::run(&cfg, &dir)?;
            print!("{summary}");
            Ok(())
        }
    }
}

pub fn cmd_gen(cfg: &Config, out: &Path) -> Result<()> {
    let s = stages::generate(&cfg.experiment, out)?;
    println!(
        "gen: {} categories, {} source classes, {} samples, {} targets -> {}",
        s.categories,
        s.classes,
        s.samples,
        s.targets,
        out.display()
    );
    Ok(())
}

pub struct SpvArgs {
    pub source: PathBuf,
    pub grouping: GroupingKind,
    pub hierarchy: Option<PathBuf>,
    pub levels: Option<PathBuf>,
    pub groups: Option<usize>,
    pub k: Option<usize>,
    pub name: Option<String>,
    pub seed: u64,
}

pub fn cmd_spv(args: &SpvArgs, out: &Path) -> Result<()> {
    let missing = match args.grouping {
        GroupingKind::Semantic if args.hierarchy.is_none() || args.levels.is_none() => {
            Some("semantic grouping needs --hierarchy and --levels")
        }
        GroupingKind::Random if args.groups.is_none() => Some("random grouping needs --groups"),
        GroupingKind::Clustering if args.k.is_none() => Some("clustering grouping needs --k"),
        _ => None,
    };
    if let Some(msg) = missing {
        return Err(usage(msg));
    }
    let sp = stages::read_source(&args.source)?;
    let seed = unirep_core::rng::derive(args.seed, unirep_core::experiment::streams::SPV);
    let h;
    let lv;
    let (grouping, default_name) = match args.grouping {
        GroupingKind::Semantic => {
            let (Some(hp), Some(lp)) = (&args.hierarchy, &args.levels) else {
                return Err(usage("semantic grouping needs --hierarchy and --levels"));
            };
            h = stages::read_hierarchy(hp)?;
            lv = stages::read_levels(lp)?;
            (
                Grouping::Semantic {
                    hierarchy: &h,
                    levels: &lv,
                },
                format!("semantic-{}", stages::file_stem(lp)),
            )
        }
        GroupingKind::Random => {
            let groups = args.groups.ok_or_else(|| usage("random grouping needs --groups"))?;
            (Grouping::Random { groups, seed }, format!("random-{groups}"))
        }
        GroupingKind::Clustering => {
            let k = args.k.ok_or_else(|| usage("clustering grouping needs --k"))?;
            (Grouping::Clustering { k, seed }, format!("clustering-{k}"))
        }
    };
    let (variant, map) =
        stages::apply_grouping(&sp, &grouping).with_context(|| format!("grouping {}", args.source.display()))?;
    let name = args.name.clone().unwrap_or(default_name);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let tsv = out.join(format!("{name}.tsv"));
    variant.save(&tsv)?;
    map.save(out.join(format!("{name}.map")))?;
    println!(
        "spv: {} -> {} labels -> {}",
        sp.class_count(),
        variant.class_count(),
        tsv.display()
    );
    Ok(())
}

pub fn cmd_train(sources: &[PathBuf], cfg: &Config, name: &str, out: &Path) -> Result<()> {
    let sps = sources
        .iter()
        .map(|p| stages::read_source(p))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let model = if sps.len() == 1 {
        let net = stages::train_networks(&[&sps[0]], &cfg.experiment)?.remove(0);
        Model::Single(net)
    } else {
        let named: Vec<(String, &_)> = sources.iter().map(|p| stages::file_stem(p)).zip(sps.iter()).collect();
        Model::Fused(unirep_core::MulDipNet::build_named(
            &named,
            &cfg.experiment.muldip_config(),
        )?)
    };
    let path = model_path(out, name, &model);
    model.save(&path)?;
    println!(
        "train: {} network(s), representation width {} -> {}",
        sps.len(),
        model.extractor().output_dim(),
        path.display()
    );
    Ok(())
}

fn model_path(out: &Path, name: &str, model: &Model) -> PathBuf {
    match model {
        Model::Single(_) => out.join(format!("{name}.json")),
        Model::Fused(_) => out.join(name),
    }
}

pub fn cmd_retrain(
    model: &Path,
    sources: &[PathBuf],
    spec: &unirep_core::retrain::RetrainSpec,
    dr: bool,
    name: &str,
    out: &Path,
) -> Result<()> {
    let input = Model::load(model)?;
    let sps = sources
        .iter()
        .map(|p| stages::read_source(p))
        .collect::<Result<Vec<_>>>()?;
    let retrained = match &input {
        Model::Single(net) => {
            if dr {
                return Err(usage("--dr applies to bundles only"));
            }
            if sps.len() != 1 {
                return Err(usage("a single network takes exactly one --source"));
            }
            Model::Single(stages::retrain_single(net, &sps[0], spec)?)
        }
        Model::Fused(net) => {
            let refs: Vec<&_> = sps.iter().collect();
            Model::Fused(stages::retrain_fused(net, &refs, spec, dr)?)
        }
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = model_path(out, name, &retrained);
    retrained.save(&path)?;
    println!(
        "retrain: {} (alpha {}, split {}), width {} -> {}",
        spec.strategy,
        spec.effective_alpha(),
        spec.split_index,
        retrained.extractor().output_dim(),
        path.display()
    );
    Ok(())
}

pub fn cmd_extract(model: &Path, targets: &[PathBuf], out: &Path) -> Result<()> {
    let model = Model::load(model)?;
    let loaded = targets
        .iter()
        .map(|p| stages::read_target(p))
        .collect::<Result<Vec<_>>>()?;
    let extracted = loaded
        .par_iter()
        .map(|t| model::extract_target(model.extractor(), t))
        .collect::<Result<Vec<_>>>()?;
    for t in &extracted {
        t.save(out.join(&t.name))
            .with_context(|| format!("writing features of {}", t.name))?;
    }
    println!(
        "extract: {} target(s), {} features each -> {}",
        extracted.len(),
        model.extractor().output_dim(),
        out.display()
    );
    Ok(())
}

/// Adds (or replaces) the row of `method` in `table`.
pub fn upsert_row(
    existing: Option<ScoreTable>,
    method: &str,
    scores: &[(String, f64)],
    reference: Option<&str>,
) -> Result<ScoreTable> {
    let Some(t) = existing else {
        let problems = scores.iter().map(|(n, _)| Problem::percent(n.clone())).collect();
        let row = scores.iter().map(|(_, s)| *s).collect();
        return Ok(ScoreTable::new(
            problems,
            vec![(method.to_string(), row)],
            reference.unwrap_or(method),
        )?);
    };
    if scores.len() != t.problems().len() {
        bail!(
            "the table has {} problems, {} feature sets were given",
            t.problems().len(),
            scores.len()
        );
    }
    let row = t
        .problems()
        .iter()
        .map(|p| {
            scores
                .iter()
                .find(|(n, _)| *n == p.name)
                .map(|(_, s)| *s)
                .with_context(|| format!("no features given for problem `{}`", p.name))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<(String, Vec<f64>)> = t.rows().map(|(m, r)| (m.to_string(), r.to_vec())).collect();
    match rows.iter_mut().find(|(m, _)| m == method) {
        Some(slot) => slot.1 = row,
        None => rows.push((method.to_string(), row)),
    }
    let reference = reference.unwrap_or(t.reference()).to_string();
    Ok(ScoreTable::new(t.problems().to_vec(), rows, reference)?)
}

pub fn cmd_eval(features: &[PathBuf], method: &str, table: &Path, reference: Option<&str>, cfg: &Config) -> Result<()> {
    let loaded: Vec<TargetProblem> = features.iter().map(|p| stages::read_target(p)).collect::<Result<_>>()?;
    let scores = loaded
        .par_iter()
        .map(|t| Ok((t.name.clone(), stages::evaluate_features(t, &cfg.experiment)?)))
        .collect::<Result<Vec<_>>>()?;
    let existing = if table.exists() {
        Some(ScoreTable::load(table).with_context(|| format!("reading {}", table.display()))?)
    } else {
        None
    };
    let updated = upsert_row(existing, method, &scores, reference)?;
    if let Some(parent) = table.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    updated.save(table)?;
    let mean = scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64;
    println!(
        "eval: {method} mean {mean:.2} over {} target(s) -> {}",
        scores.len(),
        table.display()
    );
    Ok(())
}

/// Renders the report; with `out`, also writes `report.txt` and `report.csv` there.
pub fn cmd_score(
    table: &Path,
    metrics: &[Metric],
    reference: Option<&str>,
    format: Format,
    vdc: &VdcParams,
    out: Option<&Path>,
) -> Result<String> {
    let mut t = ScoreTable::load(table).with_context(|| format!("reading {}", table.display()))?;
    if let Some(r) = reference {
        t = t.with_reference(r)?;
    }
    let report = UniversalityReport::compute(&t, metrics, vdc)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("report.txt"), report.to_text())?;
        fs::write(dir.join("report.csv"), report.to_csv()?)?;
    }
    Ok(match format {
        Format::Text => report.to_text(),
        Format::Csv => report.to_csv()?,
    })
}
