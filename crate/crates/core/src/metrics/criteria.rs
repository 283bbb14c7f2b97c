//! Small constructed score tables probing what an aggregator rewards.
//!
//! Each [`Scenario`] checks one [`Criterion`] for a metric given as a plain
//! function `(table, method) -> value`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Direction, Problem, Result, ScoreTable};

/// Relative slack used by strict comparisons between metric values.
const REL_EPS: f64 = 1e-9;
/// Slack for "unchanged" checks.
const SAME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    /// Winning on every problem raises the score, whatever the directions.
    CoherentAggregation,
    /// Doubling a gain more than doubles its reward.
    Significance,
    /// The same absolute gain is worth more on a problem closer to its ceiling.
    MeritBonus,
    /// A loss on a near-solved problem can outweigh a larger gain elsewhere.
    PenaltyMalus,
    /// Deeper losses below the reference lower the score.
    PenaltyForDamage,
    /// One inflated per-problem result does not move the score.
    IndependenceToOutliers,
    /// Re-tagging the reference row leaves every score unchanged.
    IndependenceToReference,
    /// Adding a method leaves the scores of the others unchanged.
    TimeConsistency,
}

impl Criterion {
    pub const ALL: [Criterion; 8] = [
        Self::CoherentAggregation,
        Self::Significance,
        Self::MeritBonus,
        Self::PenaltyMalus,
        Self::PenaltyForDamage,
        Self::IndependenceToOutliers,
        Self::IndependenceToReference,
        Self::TimeConsistency,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::CoherentAggregation => "coherent aggregation",
            Self::Significance => "significance",
            Self::MeritBonus => "merit bonus",
            Self::PenaltyMalus => "penalty malus",
            Self::PenaltyForDamage => "penalty for damage",
            Self::IndependenceToOutliers => "independence to outliers",
            Self::IndependenceToReference => "independence to reference",
            Self::TimeConsistency => "time consistency",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub type MetricFn<'a> = &'a dyn Fn(&ScoreTable, &str) -> Result<f64>;

type Check = Box<dyn Fn(MetricFn<'_>) -> Result<bool> + Send + Sync>;

pub struct Scenario {
    pub criterion: Criterion,
    pub description: &'static str,
    check: Check,
}

impl Scenario {
    pub fn new(
        criterion: Criterion,
        description: &'static str,
        check: impl Fn(MetricFn<'_>) -> Result<bool> + Send + Sync + 'static,
    ) -> Self {
        Self {
            criterion,
            description,
            check: Box::new(check),
        }
    }

    pub fn run(&self, metric: MetricFn<'_>) -> Result<bool> {
        (self.check)(metric)
    }
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("criterion", &self.criterion)
            .field("description", &self.description)
            .finish()
    }
}

#[derive(Debug, Default)]
pub struct ScenarioSuite {
    pub scenarios: Vec<Scenario>,
}

fn percent_table(rows: &[(&str, &[f64])], reference: &str) -> ScoreTable {
    let n = rows[0].1.len();
    ScoreTable::new(
        (0..n).map(|j| Problem::percent(format!("p{j}"))).collect(),
        rows.iter().map(|(m, r)| (m.to_string(), r.to_vec())).collect(),
        reference,
    )
    .expect("scenario tables are well formed")
}

fn greater(a: f64, b: f64) -> bool {
    a > b + REL_EPS * a.abs().max(b.abs()).max(1.0)
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= SAME_EPS * a.abs().max(b.abs()).max(1.0)
}

fn all_same(before: &ScoreTable, after: &ScoreTable, methods: &[&str], metric: MetricFn<'_>) -> Result<bool> {
    for m in methods {
        if !same(metric(before, m)?, metric(after, m)?) {
            return Ok(false);
        }
    }
    Ok(true)
}

impl ScenarioSuite {
    /// One scenario per criterion.
    pub fn standard() -> Self {
        let mut scenarios = Vec::new();

        scenarios.push(Scenario::new(
            Criterion::CoherentAggregation,
            "m beats the reference on an accuracy and on a median-rank problem",
            |metric| {
                let t = ScoreTable::new(
                    vec![
                        Problem::percent("acc"),
                        Problem {
                            name: "median-rank".into(),
                            direction: Direction::Decreasing,
                            s_max: 1.0,
                        },
                    ],
                    vec![("ref".into(), vec![50.0, 40.0]), ("m".into(), vec![55.0, 20.0])],
                    "ref",
                )
                .expect("well formed");
                Ok(greater(metric(&t, "m")?, metric(&t, "ref")?))
            },
        ));

        scenarios.push(Scenario::new(
            Criterion::Significance,
            "a gain of 10 everywhere is worth more than twice a gain of 5",
            |metric| {
                let t = percent_table(
                    &[
                        ("ref", &[50.0, 50.0, 50.0]),
                        ("a", &[55.0, 55.0, 55.0]),
                        ("b", &[60.0, 60.0, 60.0]),
                    ],
                    "ref",
                );
                let base = metric(&t, "ref")?;
                let da = metric(&t, "a")? - base;
                let db = metric(&t, "b")? - base;
                Ok(greater(db, 2.0 * da))
            },
        ));

        scenarios.push(Scenario::new(
            Criterion::MeritBonus,
            "+1 over a 90% reference outweighs +1 over a 10% reference",
            |metric| {
                let hi = percent_table(&[("ref", &[90.0, 90.0, 90.0]), ("m", &[91.0, 91.0, 91.0])], "ref");
                let lo = percent_table(&[("ref", &[10.0, 10.0, 10.0]), ("m", &[11.0, 11.0, 11.0])], "ref");
                let d_hi = metric(&hi, "m")? - metric(&hi, "ref")?;
                let d_lo = metric(&lo, "m")? - metric(&lo, "ref")?;
                Ok(greater(d_hi, d_lo))
            },
        ));

        scenarios.push(Scenario::new(
            Criterion::PenaltyMalus,
            "falling from 90 to 60 outweighs climbing from 10 to 55",
            |metric| {
                let t = percent_table(&[("ref", &[10.0, 90.0]), ("m", &[55.0, 60.0])], "ref");
                Ok(greater(metric(&t, "ref")?, metric(&t, "m")?))
            },
        ));

        scenarios.push(Scenario::new(
            Criterion::PenaltyForDamage,
            "equal wins, deeper losses score lower",
            |metric| {
                let t = percent_table(
                    &[
                        ("ref", &[50.0, 90.0, 90.0]),
                        ("mild", &[60.0, 70.0, 70.0]),
                        ("severe", &[60.0, 50.0, 50.0]),
                    ],
                    "ref",
                );
                Ok(greater(metric(&t, "mild")?, metric(&t, "severe")?))
            },
        ));

        scenarios.push(Scenario::new(
            Criterion::IndependenceToOutliers,
            "inflating the best per-problem result leaves the score unchanged",
            |metric| {
                let before = percent_table(&[("ref", &[50.0; 5]), ("m", &[51.0, 52.0, 53.0, 54.0, 55.0])], "ref");
                let after = percent_table(&[("ref", &[50.0; 5]), ("m", &[51.0, 52.0, 53.0, 54.0, 99.0])], "ref");
                all_same(&before, &after, &["m"], metric)
            },
        ));

        scenarios.push(Scenario::new(
            Criterion::IndependenceToReference,
            "tagging another row as reference leaves every score unchanged",
            |metric| {
                let a = percent_table(
                    &[
                        ("a", &[60.0, 70.0, 80.0]),
                        ("b", &[50.0, 75.0, 88.0]),
                        ("c", &[40.0, 65.0, 90.0]),
                    ],
                    "a",
                );
                let b = a.with_reference("b")?;
                all_same(&a, &b, &["a", "b", "c"], metric)
            },
        ));

        scenarios.push(Scenario::new(
            Criterion::TimeConsistency,
            "adding a method leaves the existing scores unchanged",
            |metric| {
                let before = percent_table(
                    &[
                        ("ref", &[60.0, 70.0, 80.0]),
                        ("b", &[50.0, 75.0, 85.0]),
                        ("c", &[40.0, 65.0, 90.0]),
                    ],
                    "ref",
                );
                let after = before.with_method("new", vec![55.0, 72.0, 95.0])?;
                all_same(&before, &after, &["ref", "b", "c"], metric)
            },
        ));

        Self { scenarios }
    }
}

/// Runs every scenario; a criterion holds when all its scenarios pass.
pub fn criteria_check(metric: MetricFn<'_>, suite: &ScenarioSuite) -> Result<BTreeMap<Criterion, bool>> {
    let mut out = BTreeMap::new();
    for s in &suite.scenarios {
        let ok = s.run(metric)?;
        out.entry(s.criterion).and_modify(|v: &mut bool| *v &= ok).or_insert(ok);
    }
    Ok(out)
}
