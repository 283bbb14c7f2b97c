//! Aggregating per-problem transfer scores into a single universality score.
//!
//! A [`ScoreTable`] holds one row per method and one column per target
//! problem, one row being tagged as the reference. Available aggregators:
//!
//! | name  | value for method `m` |
//! |-------|----------------------|
//! | Avg   | mean of the row |
//! | RG    | mean gain over the reference |
//! | VDC   | sum of `alpha * max(0, Emax - E)^gamma`, `E` the error |
//! | BC    | Borda count, per-problem `M - rank` summed |
//! | aNRG  | mean of `100 (s - s_ref) / (s_max - s_ref)` |
//! | mNRG  | median of the same terms |

pub mod criteria;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use criteria::{criteria_check, Criterion, Scenario, ScenarioSuite};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("duplicate method `{0}`")]
    DuplicateMethod(String),
    #[error("duplicate problem `{0}`")]
    DuplicateProblem(String),
    #[error("the table has no problems")]
    NoProblems,
    #[error("method `{method}` has {got} scores, expected {expected}")]
    RowLength {
        method: String,
        expected: usize,
        got: usize,
    },
    #[error("method `{method}`, problem `{problem}`: {reason}")]
    BadScore {
        method: String,
        problem: String,
        reason: String,
    },
    #[error("problem `{problem}`: s_max equals the reference score {reference}")]
    Degenerate { problem: String, reference: f64 },
    #[error("at least two methods are needed, got {0}")]
    TooFewMethods(usize),
    #[error("invalid VDC parameters for problem `{problem}`: {reason}")]
    InvalidVdc { problem: String, reason: String },
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Higher is better (accuracy, mAP, recall).
    #[default]
    Increasing,
    /// Lower is better (median rank, error rate).
    Decreasing,
}

impl Direction {
    /// Score oriented so that larger is always better.
    fn oriented(self, s: f64) -> f64 {
        match self {
            Self::Increasing => s,
            Self::Decreasing => -s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub name: String,
    pub direction: Direction,
    /// Best reachable score.
    pub s_max: f64,
}

impl Problem {
    pub fn percent(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            direction: Direction::Increasing,
            s_max: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    problems: Vec<Problem>,
    methods: Vec<String>,
    scores: Vec<Vec<f64>>,
    reference: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemOverride {
    direction: Option<Direction>,
    s_max: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    reference: String,
    #[serde(default)]
    default_direction: Direction,
    #[serde(default = "default_s_max")]
    default_s_max: f64,
    #[serde(default)]
    problems: BTreeMap<String, ProblemOverride>,
}

fn default_s_max() -> f64 {
    100.0
}

/// `scores.csv` pairs with `scores.toml`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("toml")
}

impl ScoreTable {
    pub fn new(problems: Vec<Problem>, rows: Vec<(String, Vec<f64>)>, reference: impl Into<String>) -> Result<Self> {
        let reference = reference.into();
        if problems.is_empty() {
            return Err(MetricsError::NoProblems);
        }
        let mut seen = BTreeSet::new();
        for p in &problems {
            if !seen.insert(p.name.as_str()) {
                return Err(MetricsError::DuplicateProblem(p.name.clone()));
            }
        }
        let mut methods = Vec::with_capacity(rows.len());
        let mut scores = Vec::with_capacity(rows.len());
        for (method, row) in rows {
            if methods.contains(&method) {
                return Err(MetricsError::DuplicateMethod(method));
            }
            if row.len() != problems.len() {
                return Err(MetricsError::RowLength {
                    method,
                    expected: problems.len(),
                    got: row.len(),
                });
            }
            for (p, &s) in problems.iter().zip(&row) {
                let reason = if !s.is_finite() {
                    Some("score is not finite".to_string())
                } else if p.direction.oriented(s) > p.direction.oriented(p.s_max) {
                    Some(format!("score {s} is better than s_max {}", p.s_max))
                } else {
                    None
                };
                if let Some(reason) = reason {
                    return Err(MetricsError::BadScore {
                        method,
                        problem: p.name.clone(),
                        reason,
                    });
                }
            }
            methods.push(method);
            scores.push(row);
        }
        if !methods.contains(&reference) {
            return Err(MetricsError::UnknownMethod(reference));
        }
        Ok(Self {
            problems,
            methods,
            scores,
            reference,
        })
    }

    pub fn problems(&self) -> &[Problem] {
        &self.problems
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn reference(&self) -> &str {
        &self.reference
    }

    pub fn row(&self, method: &str) -> Result<&[f64]> {
        let i = self
            .methods
            .iter()
            .position(|m| m == method)
            .ok_or_else(|| MetricsError::UnknownMethod(method.to_string()))?;
        Ok(&self.scores[i])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.methods
            .iter()
            .map(String::as_str)
            .zip(self.scores.iter().map(Vec::as_slice))
    }

    /// Same scores with another row tagged as the reference.
    pub fn with_reference(&self, reference: &str) -> Result<Self> {
        self.row(reference)?;
        Ok(Self {
            reference: reference.to_string(),
            ..self.clone()
        })
    }

    /// Same table plus one method row.
    pub fn with_method(&self, method: impl Into<String>, row: Vec<f64>) -> Result<Self> {
        let mut rows: Vec<(String, Vec<f64>)> = self.rows().map(|(m, r)| (m.to_string(), r.to_vec())).collect();
        rows.push((method.into(), row));
        Self::new(self.problems.clone(), rows, self.reference.clone())
    }

    /// Same table with the problem columns reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let problems = order.iter().map(|&j| self.problems[j].clone()).collect();
        let rows = self
            .rows()
            .map(|(m, r)| (m.to_string(), order.iter().map(|&j| r[j]).collect()))
            .collect();
        Self::new(problems, rows, self.reference.clone())
    }

    pub fn parse(csv_text: &str, sidecar_text: &str) -> Result<Self> {
        let sidecar: Sidecar = toml::from_str(sidecar_text)?;
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(csv_text.as_bytes());
        let headers = reader.headers()?.clone();
        if headers.get(0) != Some("method") {
            return Err(MetricsError::File {
                path: "score table".into(),
                message: "first column must be `method`".into(),
            });
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        for name in sidecar.problems.keys() {
            if !names.contains(name) {
                return Err(MetricsError::File {
                    path: "sidecar".into(),
                    message: format!("problem `{name}` is not a column of the table"),
                });
            }
        }
        let problems = names
            .into_iter()
            .map(|name| {
                let o = sidecar.problems.get(&name);
                Problem {
                    direction: o.and_then(|o| o.direction).unwrap_or(sidecar.default_direction),
                    s_max: o.and_then(|o| o.s_max).unwrap_or(sidecar.default_s_max),
                    name,
                }
            })
            .collect::<Vec<_>>();
        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record = record?;
            let method = record.get(0).unwrap_or_default().to_string();
            let mut row = Vec::with_capacity(problems.len());
            for (j, field) in record.iter().skip(1).enumerate() {
                let value = field.parse::<f64>().map_err(|_| MetricsError::File {
                    path: "score table".into(),
                    message: format!(
                        "row {} (`{method}`), column `{}`: {field:?} is not a number",
                        i + 2,
                        problems.get(j).map_or("?", |p| p.name.as_str())
                    ),
                })?;
                row.push(value);
            }
            rows.push((method, row));
        }
        Self::new(problems, rows, sidecar.reference)
    }

    /// Reads `csv_path` and its sidecar (same path, `.toml` extension).
    pub fn load(csv_path: impl AsRef<Path>) -> Result<Self> {
        let csv_path = csv_path.as_ref();
        Self::load_with_sidecar(csv_path, &sidecar_path(csv_path))
    }

    pub fn load_with_sidecar(csv_path: &Path, sidecar: &Path) -> Result<Self> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| MetricsError::File {
                path: p.display().to_string(),
                message: e.to_string(),
            })
        };
        Self::parse(&read(csv_path)?, &read(sidecar)?)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string()];
        header.extend(self.problems.iter().map(|p| p.name.clone()));
        w.write_record(&header)?;
        for (m, row) in self.rows() {
            let mut record = vec![m.to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        let bytes = w.into_inner().map_err(|e| MetricsError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }

    pub fn sidecar_toml(&self) -> String {
        let sidecar = Sidecar {
            reference: self.reference.clone(),
            default_direction: Direction::Increasing,
            default_s_max: 100.0,
            problems: self
                .problems
                .iter()
                .filter(|p| p.direction != Direction::Increasing || p.s_max != 100.0)
                .map(|p| {
                    (
                        p.name.clone(),
                        ProblemOverride {
                            direction: Some(p.direction),
                            s_max: Some(p.s_max),
                        },
                    )
                })
                .collect(),
        };
        toml::to_string(&sidecar).expect("sidecar serializes")
    }

    pub fn save(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let csv_path = csv_path.as_ref();
        std::fs::write(csv_path, self.to_csv()?)?;
        std::fs::write(sidecar_path(csv_path), self.sidecar_toml())?;
        Ok(())
    }
}

pub fn avg(t: &ScoreTable, m: &str) -> Result<f64> {
    let row = t.row(m)?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Mean of `s - s_ref` (negated for decreasing problems).
pub fn rg(t: &ScoreTable, m: &str) -> Result<f64> {
    let row = t.row(m)?;
    let reference = t.row(&t.reference)?;
    let total: f64 = t
        .problems
        .iter()
        .zip(row.iter().zip(reference))
        .map(|(p, (s, r))| p.direction.oriented(s - r))
        .sum();
    Ok(total / row.len() as f64)
}

/// `100 (s - s_ref) / (s_max - s_ref)` per problem. The ratio is already
/// sign-correct for decreasing problems.
pub fn nrg_terms(t: &ScoreTable, m: &str) -> Result<Vec<f64>> {
    let row = t.row(m)?;
    let reference = t.row(&t.reference)?;
    t.problems
        .iter()
        .zip(row.iter().zip(reference))
        .map(|(p, (&s, &r))| {
            let denom = p.s_max - r;
            if denom == 0.0 {
                return Err(MetricsError::Degenerate {
                    problem: p.name.clone(),
                    reference: r,
                });
            }
            Ok(100.0 * (s - r) / denom)
        })
        .collect()
}

/// Median; an even count averages the two middle values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn mnrg(t: &ScoreTable, m: &str) -> Result<f64> {
    Ok(median(&nrg_terms(t, m)?))
}

pub fn anrg(t: &ScoreTable, m: &str) -> Result<f64> {
    let terms = nrg_terms(t, m)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Unrounded Borda count over `methods`: per problem the best method gets
/// rank 0 and the score `M - rank`; tied methods share the mean of the ranks
/// they occupy. Scores are summed over problems.
pub fn borda_raw(t: &ScoreTable, methods: &[&str]) -> Result<BTreeMap<String, f64>> {
    if methods.len() < 2 {
        return Err(MetricsError::TooFewMethods(methods.len()));
    }
    let rows = methods.iter().map(|m| t.row(m)).collect::<Result<Vec<_>>>()?;
    let m_count = methods.len() as f64;
    let mut totals = vec![0.0; methods.len()];
    for (j, p) in t.problems.iter().enumerate() {
        let values: Vec<f64> = rows.iter().map(|r| p.direction.oriented(r[j])).collect();
        for (i, &v) in values.iter().enumerate() {
            let better = values.iter().filter(|&&o| o > v).count() as f64;
            let tied = values.iter().filter(|&&o| o == v).count() as f64;
            // Ranks better..better+tied-1 are shared.
            let rank = better + (tied - 1.0) / 2.0;
            totals[i] += m_count - rank;
        }
    }
    Ok(methods.iter().map(|m| m.to_string()).zip(totals).collect())
}

pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Borda count rounded half-up.
pub fn borda(t: &ScoreTable, methods: &[&str]) -> Result<BTreeMap<String, i64>> {
    Ok(borda_raw(t, methods)?
        .into_iter()
        .map(|(m, v)| (m, round_half_up(v)))
        .collect())
}

/// Per-problem overrides; unset fields use the table-wide defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VdcProblemParams {
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub emax: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VdcParams {
    pub gamma: f64,
    /// Default `Emax` is `min(100, emax_factor * reference error)`.
    pub emax_factor: f64,
    pub problems: BTreeMap<String, VdcProblemParams>,
}

impl Default for VdcParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            emax_factor: 2.0,
            problems: BTreeMap::new(),
        }
    }
}

/// Error of score `s`: distance to the best reachable score.
fn error_of(p: &Problem, s: f64) -> f64 {
    p.direction.oriented(p.s_max - s)
}

/// Resolved `(alpha, gamma, emax)` per problem.
pub fn vdc_resolve(t: &ScoreTable, params: &VdcParams) -> Result<Vec<(f64, f64, f64)>> {
    let reference = t.row(&t.reference)?;
    t.problems
        .iter()
        .zip(reference)
        .map(|(p, &r)| {
            let o = params.problems.get(&p.name).copied().unwrap_or_default();
            let gamma = o.gamma.unwrap_or(params.gamma);
            let emax = o
                .emax
                .unwrap_or_else(|| (params.emax_factor * error_of(p, r)).min(100.0));
            let invalid = |reason: String| MetricsError::InvalidVdc {
                problem: p.name.clone(),
                reason,
            };
            if !(gamma >= 1.0 && gamma.is_finite()) {
                return Err(invalid(format!("gamma {gamma} must be at least 1")));
            }
            if !(emax > 0.0 && emax <= 100.0) {
                return Err(invalid(format!("Emax {emax} must lie in (0, 100]")));
            }
            let alpha = o.alpha.unwrap_or(100.0 * emax.powf(-gamma));
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(invalid(format!("alpha {alpha} must be positive")));
            }
            Ok((alpha, gamma, emax))
        })
        .collect()
}

pub fn vdc(t: &ScoreTable, m: &str, params: &VdcParams) -> Result<f64> {
    let resolved = vdc_resolve(t, params)?;
    let row = t.row(m)?;
    Ok(t.problems
        .iter()
        .zip(row)
        .zip(resolved)
        .map(|((p, &s), (alpha, gamma, emax))| alpha * (emax - error_of(p, s)).max(0.0).powf(gamma))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Avg,
    Rg,
    Vdc,
    Bc,
    Anrg,
    Mnrg,
}

impl Metric {
    pub const ALL: [Metric; 6] = [Self::Avg, Self::Rg, Self::Vdc, Self::Bc, Self::Anrg, Self::Mnrg];

    pub fn name(self) -> &'static str {
        match self {
            Self::Avg => "Avg",
            Self::Rg => "RG",
            Self::Vdc => "VDC",
            Self::Bc => "BC",
            Self::Anrg => "aNRG",
            Self::Mnrg => "mNRG",
        }
    }

    /// Value for `m`; BC ranks `m` against every method of the table and is
    /// not rounded.
    pub fn compute(self, t: &ScoreTable, m: &str, vdc_params: &VdcParams) -> Result<f64> {
        match self {
            Self::Avg => avg(t, m),
            Self::Rg => rg(t, m),
            Self::Vdc => vdc(t, m, vdc_params),
            Self::Bc => {
                let all: Vec<&str> = t.methods.iter().map(String::as_str).collect();
                t.row(m)?;
                Ok(borda_raw(t, &all)?[m])
            }
            Self::Anrg => anrg(t, m),
            Self::Mnrg => mnrg(t, m),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown metric `{s}` (expected avg, rg, vdc, bc, anrg or mnrg)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniversalityReport {
    pub metrics: Vec<Metric>,
    pub reference: String,
    /// `(method, value per metric)` in table order. BC is rounded half-up.
    pub rows: Vec<(String, Vec<f64>)>,
}

impl UniversalityReport {
    pub fn compute(t: &ScoreTable, metrics: &[Metric], vdc_params: &VdcParams) -> Result<Self> {
        let all: Vec<&str> = t.methods.iter().map(String::as_str).collect();
        let bc = if metrics.contains(&Metric::Bc) {
            Some(borda(t, &all)?)
        } else {
            None
        };
        let rows = t
            .methods
            .iter()
            .map(|m| {
                let values = metrics
                    .iter()
                    .map(|metric| match (metric, &bc) {
                        (Metric::Bc, Some(bc)) => Ok(bc[m] as f64),
                        _ => metric.compute(t, m, vdc_params),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((m.clone(), values))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            metrics: metrics.to_vec(),
            reference: t.reference.clone(),
            rows,
        })
    }

    pub fn get(&self, method: &str, metric: Metric) -> Option<f64> {
        let col = self.metrics.iter().position(|&m| m == metric)?;
        self.rows.iter().find(|(m, _)| m == method).map(|(_, v)| v[col])
    }

    fn cell(metric: Metric, v: f64) -> String {
        match metric {
            Metric::Bc => format!("{v:.0}"),
            Metric::Rg | Metric::Anrg | Metric::Mnrg => format!("{v:+.2}"),
            _ => format!("{v:.2}"),
        }
    }

    /// Aligned text table; the reference row is marked with `*`.
    pub fn to_text(&self) -> String {
        let mut header = vec!["method".to_string()];
        header.extend(self.metrics.iter().map(|m| m.name().to_string()));
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(m, values)| {
                let mut cells = vec![if *m == self.reference {
                    format!("{m} *")
                } else {
                    m.clone()
                }];
                cells.extend(
                    self.metrics
                        .iter()
                        .zip(values)
                        .map(|(&metric, &v)| Self::cell(metric, v)),
                );
                cells
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                body.iter()
                    .map(|r| r[c].len())
                    .chain([header[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for line in std::iter::once(&header).chain(&body) {
            for (c, cell) in line.iter().enumerate() {
                if c == 0 {
                    let _ = write!(out, "{cell:<w$}", w = widths[c]);
                } else {
                    let _ = write!(out, "  {cell:>w$}", w = widths[c]);
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string()];
        header.extend(self.metrics.iter().map(|m| m.name().to_string()));
        w.write_record(&header)?;
        for (m, values) in &self.rows {
            let mut record = vec![m.clone()];
            record.extend(values.iter().map(f64::to_string));
            w.write_record(&record)?;
        }
        let bytes = w.into_inner().map_err(|e| MetricsError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }
}
