//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//! Runs without the libtest harness so the lines are never captured.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unirep_core::experiment::{self, ExperimentConfig, FRST, FSFT, METHODS, MULDIP, MULDIP_FSFT_DR, NET_G, NET_S, SFT};
use unirep_core::hierarchy::{CategoryId, Hierarchy, LevelKind, LevelSet};
use unirep_core::metrics::criteria::{criteria_check, Criterion, ScenarioSuite};
use unirep_core::metrics::{self, Metric, Problem, ScoreTable, VdcParams};
use unirep_core::muldip::{self, Branch, MulDipNet, Norm};
use unirep_core::nnet::{self, Activation, Architecture, Dense, Init, Network, TrainConfig};
use unirep_core::retrain::{self, RetrainSpec, Strategy};
use unirep_core::spv::{self, Sample, SourceProblem};
use unirep_core::synthdata::{self, SynthConfig};
use unirep_core::transfer;

// Pinned tolerances.
const TABLE_TOL: f64 = 0.1;
const BC_TOL: i64 = 3;
const ORACLE_EPS: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const GRAD_DENOM_FLOOR: f64 = 1e-8;
const AP_EPS: f64 = 1e-12;
const DAG_COUNT: usize = 200;
const DAG_MAX_NODES: usize = 50;
const E2E_SEEDS: u64 = 5;
const E2E_MAX_DROP: f64 = 1.0;
const E2E_BUDGET: Duration = Duration::from_secs(300);

type Outcome = Result<Vec<String>, Vec<String>>;
type Check = fn() -> Outcome;

fn main() {
    let checks: [(&str, Check); 8] = [
        ("metric oracle", metric_oracle),
        ("metric criteria suite", criteria_suite),
        ("graph/SPV oracle", graph_spv_oracle),
        ("training numerics", training_numerics),
        ("retrain degeneracies", retrain_degeneracies),
        ("fusion", fusion),
        ("mAP", map_oracle),
        ("end-to-end directional property", end_to_end),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(vec![format!("panicked: {msg}")])
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, lines) = match outcome {
            Ok(lines) => ("PASS", lines),
            Err(lines) => {
                failed += 1;
                ("FAIL", lines)
            }
        };
        println!("{tag} {name} ({secs:.2}s)");
        for l in lines {
            println!("     {l}");
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

/// Collects notes and failures of one criterion.
#[derive(Default)]
struct Report {
    notes: Vec<String>,
    failures: Vec<String>,
}

impl Report {
    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    fn check(&mut self, ok: bool, s: impl Into<String>) {
        if !ok {
            self.failures.push(s.into());
        }
    }

    fn finish(self) -> Outcome {
        if self.failures.is_empty() {
            Ok(self.notes)
        } else {
            let mut out = self.failures;
            out.extend(self.notes);
            Err(out)
        }
    }
}

// ---------------------------------------------------------------------------
// Metric oracle

const BENCHMARK_PROBLEMS: [&str; 10] = [
    "VOC07", "VOC12", "CA101", "CA256", "NWO", "MIT67", "stACT", "CUB", "stCA", "FLO",
];

/// Per-dataset scores and the printed mNRG.
const BENCHMARK: [(&str, [f64; 10], f64); 11] = [
    (
        "REFERENCE",
        [66.8, 67.3, 71.1, 53.2, 52.5, 36.0, 44.3, 36.1, 14.4, 50.5],
        0.0,
    ),
    (
        "SPV_A_spe",
        [66.6, 67.5, 74.7, 54.7, 53.2, 37.4, 45.1, 36.0, 13.7, 51.9],
        1.5,
    ),
    (
        "SPV_G_gen",
        [67.7, 68.1, 73.0, 54.3, 50.5, 37.1, 44.9, 36.8, 14.6, 50.3],
        1.4,
    ),
    (
        "AMECON",
        [61.1, 62.1, 58.7, 40.6, 45.8, 24.3, 32.7, 26.1, 13.1, 36.4],
        -17.7,
    ),
    (
        "WhatMakes",
        [64.0, 62.7, 69.4, 50.1, 45.6, 33.7, 41.9, 15.0, 12.5, 42.8],
        -7.5,
    ),
    (
        "ISM",
        [62.5, 65.4, 68.8, 50.7, 28.5, 37.9, 42.6, 34.0, 13.3, 50.0],
        -4.3,
    ),
    (
        "GrowBrain-WA",
        [68.4, 68.3, 73.1, 54.7, 49.3, 38.4, 46.5, 37.5, 14.7, 54.8],
        3.5,
    ),
    (
        "GrowBrain-RWA",
        [69.1, 69.0, 74.8, 55.9, 50.4, 40.0, 48.4, 38.6, 14.8, 56.1],
        6.0,
    ),
    (
        "MuCaLe-Net",
        [69.5, 69.8, 76.0, 56.8, 54.7, 41.3, 48.5, 35.6, 15.7, 54.8],
        7.7,
    ),
    (
        "FSFT",
        [67.5, 67.4, 73.9, 55.0, 44.6, 40.4, 47.1, 38.7, 15.8, 56.8],
        4.0,
    ),
    (
        "MulDiP+FSFT",
        [69.8, 70.0, 77.5, 58.3, 47.9, 43.7, 50.2, 37.4, 16.1, 59.7],
        9.8,
    ),
];

/// Printed (Avg, RG, BC, aNRG) of the summary table.
const SUMMARY: [(&str, f64, f64, i64, f64); 11] = [
    ("REFERENCE", 49.2, 0.0, 50, 0.0),
    ("SPV_A_spe", 50.1, 0.9, 62, 2.3),
    ("SPV_G_gen", 49.7, 0.5, 56, 1.4),
    ("AMECON", 40.1, -9.1, 17, -20.2),
    ("WhatMakes", 43.8, -5.4, 22, -10.8),
    ("ISM", 45.4, -3.8, 32, -8.8),
    ("GrowBrain-WA", 50.6, 1.4, 71, 3.0),
    ("GrowBrain-RWA", 51.7, 2.5, 87, 5.6),
    ("MuCaLe-Net", 52.3, 3.1, 92, 7.0),
    ("FSFT", 50.7, 1.5, 76, 3.0),
    ("MulDiP+FSFT", 53.1, 3.9, 103, 8.6),
];

fn benchmark_table() -> ScoreTable {
    let problems = BENCHMARK_PROBLEMS.iter().map(|p| Problem::percent(*p)).collect();
    let rows = BENCHMARK.iter().map(|(m, s, _)| (m.to_string(), s.to_vec())).collect();
    ScoreTable::new(problems, rows, "REFERENCE").unwrap()
}

fn scores_of(method: &str) -> &'static [f64; 10] {
    &BENCHMARK.iter().find(|(m, _, _)| *m == method).unwrap().1
}

fn oracle_nrg(method: &str) -> Vec<f64> {
    let r = scores_of("REFERENCE");
    scores_of(method)
        .iter()
        .zip(r)
        .map(|(s, r)| 100.0 * (s - r) / (100.0 - r))
        .collect()
}

fn oracle_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sorts the methods of each problem, hands out positions 0..M-1, and gives
/// each run of equal scores the mean of its positions.
fn oracle_borda() -> BTreeMap<&'static str, f64> {
    let m = BENCHMARK.len();
    let mut totals: BTreeMap<&str, f64> = BENCHMARK.iter().map(|(n, _, _)| (*n, 0.0)).collect();
    for j in 0..BENCHMARK_PROBLEMS.len() {
        let mut col: Vec<(&str, f64)> = BENCHMARK.iter().map(|(n, s, _)| (*n, s[j])).collect();
        col.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut start = 0;
        while start < m {
            let mut end = start;
            while end + 1 < m && col[end + 1].1 == col[start].1 {
                end += 1;
            }
            let rank = (start + end) as f64 / 2.0;
            for (name, _) in &col[start..=end] {
                *totals.get_mut(name).unwrap() += m as f64 - rank;
            }
            start = end + 1;
        }
    }
    totals
}

fn metric_oracle() -> Outcome {
    let mut r = Report::default();
    let t = benchmark_table();
    for (method, _, printed) in BENCHMARK {
        let got = metrics::mnrg(&t, method).unwrap();
        let brute = oracle_median(oracle_nrg(method));
        r.check(
            (got - brute).abs() <= ORACLE_EPS,
            format!("mNRG {method}: library {got} vs oracle {brute}"),
        );
        r.check(
            (got - printed).abs() <= TABLE_TOL,
            format!("mNRG {method}: {got:.2} vs printed {printed:+.1}"),
        );
    }
    let methods: Vec<&str> = BENCHMARK.iter().map(|(m, _, _)| *m).collect();
    let bc = metrics::borda(&t, &methods).unwrap();
    let bc_brute = oracle_borda();
    let reference = scores_of("REFERENCE");
    for (method, p_avg, p_rg, p_bc, p_anrg) in SUMMARY {
        let s = scores_of(method);
        let avg = metrics::avg(&t, method).unwrap();
        let rg = metrics::rg(&t, method).unwrap();
        let anrg = metrics::anrg(&t, method).unwrap();
        let o_avg = mean(s);
        let diffs: Vec<f64> = s.iter().zip(reference).map(|(a, b)| a - b).collect();
        let o_rg = mean(&diffs);
        let o_anrg = mean(&oracle_nrg(method));
        let o_bc = metrics::round_half_up(bc_brute[method]);
        for (what, got, brute, printed) in [
            ("Avg", avg, o_avg, p_avg),
            ("RG", rg, o_rg, p_rg),
            ("aNRG", anrg, o_anrg, p_anrg),
        ] {
            r.check(
                (got - brute).abs() <= ORACLE_EPS,
                format!("{what} {method}: library {got} vs oracle {brute}"),
            );
            r.check(
                (got - printed).abs() <= TABLE_TOL,
                format!("{what} {method}: {got:.2} vs printed {printed:+.1}"),
            );
        }
        r.check(
            bc[method] == o_bc,
            format!("BC {method}: library {} vs oracle {o_bc}", bc[method]),
        );
        r.check(
            (bc[method] - p_bc).abs() <= BC_TOL,
            format!("BC {method}: {} vs printed {p_bc}", bc[method]),
        );
    }
    for m in ["MuCaLe-Net", "FSFT", "GrowBrain-RWA", "MulDiP+FSFT"] {
        r.note(format!("mNRG {m} = {:+.2}", metrics::mnrg(&t, m).unwrap()));
    }
    r.note(format!(
        "Avg REFERENCE/FSFT/MulDiP+FSFT = {:.2}/{:.2}/{:.2}; RG FSFT/AMECON/MulDiP+FSFT = {:+.2}/{:+.2}/{:+.2}; aNRG FSFT/MuCaLe-Net = {:+.2}/{:+.2}",
        metrics::avg(&t, "REFERENCE").unwrap(),
        metrics::avg(&t, "FSFT").unwrap(),
        metrics::avg(&t, "MulDiP+FSFT").unwrap(),
        metrics::rg(&t, "FSFT").unwrap(),
        metrics::rg(&t, "AMECON").unwrap(),
        metrics::rg(&t, "MulDiP+FSFT").unwrap(),
        metrics::anrg(&t, "FSFT").unwrap(),
        metrics::anrg(&t, "MuCaLe-Net").unwrap(),
    ));
    r.note(format!(
        "tolerances: ±{TABLE_TOL} on mNRG/Avg/RG/aNRG, ±{BC_TOL} on BC, all {} rows",
        BENCHMARK.len()
    ));
    r.finish()
}

// ---------------------------------------------------------------------------
// Metric criteria

fn criteria_suite() -> Outcome {
    use Criterion::*;
    let mut r = Report::default();
    let expected: [(Metric, &[Criterion]); 6] = [
        (
            Metric::Avg,
            &[PenaltyForDamage, IndependenceToReference, TimeConsistency],
        ),
        (Metric::Rg, &[CoherentAggregation, PenaltyForDamage, TimeConsistency]),
        (
            Metric::Vdc,
            &[CoherentAggregation, Significance, MeritBonus, TimeConsistency],
        ),
        (
            Metric::Bc,
            &[
                CoherentAggregation,
                PenaltyForDamage,
                IndependenceToOutliers,
                IndependenceToReference,
            ],
        ),
        (
            Metric::Mnrg,
            &[
                CoherentAggregation,
                MeritBonus,
                PenaltyMalus,
                PenaltyForDamage,
                IndependenceToOutliers,
                TimeConsistency,
            ],
        ),
        (
            Metric::Anrg,
            &[
                CoherentAggregation,
                MeritBonus,
                PenaltyMalus,
                PenaltyForDamage,
                TimeConsistency,
            ],
        ),
    ];
    let suite = ScenarioSuite::standard();
    let params = VdcParams::default();
    let mut assertions = 0;
    for (metric, holds) in expected {
        let f = |t: &ScoreTable, m: &str| metric.compute(t, m, &params);
        let got = criteria_check(&f, &suite).unwrap();
        let mut row = String::new();
        for c in Criterion::ALL {
            let want = holds.contains(&c);
            let have = got.get(&c).copied();
            assertions += 1;
            r.check(
                have == Some(want),
                format!("{} / {c}: expected {want}, got {have:?}", metric.name()),
            );
            row.push(if have == Some(true) { '+' } else { '.' });
        }
        r.note(format!("{:<5} {row}", metric.name()));
    }
    r.note(format!(
        "{assertions} assertions; columns: {}",
        Criterion::ALL.map(|c| c.label()).join(", ")
    ));
    r.finish()
}

// ---------------------------------------------------------------------------
// Graph and SPV oracle

/// Adjacency-matrix model of a DAG with a transitive closure and longest-path depths.
struct DagOracle {
    ids: Vec<CategoryId>,
    root: usize,
    /// `reach[a][b]`: a path of length >= 1 leads from `a` to `b`.
    reach: Vec<Vec<bool>>,
    depth: Vec<usize>,
}

impl DagOracle {
    fn new(ids: Vec<CategoryId>, edges: &[(usize, usize)], root: usize) -> Self {
        let n = ids.len();
        let mut reach = vec![vec![false; n]; n];
        for &(p, c) in edges {
            reach[p][c] = true;
        }
        for k in 0..n {
            let via = reach[k].clone();
            for row in reach.iter_mut().filter(|row| row[k]) {
                for (r, v) in row.iter_mut().zip(&via) {
                    *r |= *v;
                }
            }
        }
        let mut depth = vec![0usize; n];
        for _ in 0..n {
            for &(p, c) in edges {
                depth[c] = depth[c].max(depth[p] + 1);
            }
        }
        Self {
            ids,
            root,
            reach,
            depth,
        }
    }

    fn index(&self, c: &CategoryId) -> usize {
        self.ids.iter().position(|x| x == c).unwrap()
    }

    fn set(&self, pick: impl Fn(usize) -> bool) -> BTreeSet<CategoryId> {
        (0..self.ids.len())
            .filter(|&i| pick(i))
            .map(|i| self.ids[i].clone())
            .collect()
    }

    fn descendants(&self, c: usize) -> BTreeSet<CategoryId> {
        self.set(|i| i == c || self.reach[c][i])
    }

    fn ancestors(&self, c: usize) -> BTreeSet<CategoryId> {
        if c == self.root {
            return self.set(|i| i == c);
        }
        self.set(|i| self.reach[i][c])
    }

    fn at_or_above(&self, i: usize, c: usize) -> bool {
        i == c || self.reach[i][c]
    }

    fn deepest(&self, candidates: impl Iterator<Item = usize>) -> Option<usize> {
        let mut best: Option<usize> = None;
        for i in candidates {
            best = Some(match best {
                None => i,
                Some(b) if self.depth[i] > self.depth[b] => i,
                Some(b) if self.depth[i] == self.depth[b] && self.ids[i] < self.ids[b] => i,
                Some(b) => b,
            });
        }
        best
    }

    fn lca(&self, cats: &[usize]) -> usize {
        let n = self.ids.len();
        self.deepest((0..n).filter(|&i| cats.iter().all(|&c| self.at_or_above(i, c))))
            .unwrap()
    }

    fn partition(&self, members: &[usize], base: &[usize]) -> BTreeMap<CategoryId, BTreeSet<CategoryId>> {
        let mut out = BTreeMap::new();
        for &m in members {
            let group: BTreeSet<CategoryId> = base
                .iter()
                .filter(|&&b| self.at_or_above(m, b))
                .map(|&b| self.ids[b].clone())
                .collect();
            if !group.is_empty() {
                out.insert(self.ids[m].clone(), group);
            }
        }
        out
    }

    fn relabel(&self, members: &[usize], group: &[usize]) -> Option<CategoryId> {
        let l = self.lca(group);
        self.deepest(members.iter().copied().filter(|&m| self.at_or_above(m, l)))
            .map(|m| self.ids[m].clone())
    }
}

fn random_subset(rng: &mut ChaCha8Rng, n: usize, min: usize, max: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    let k = rng.random_range(min..=max.max(min));
    all.truncate(k.min(n));
    all
}

fn check_dag(rng: &mut ChaCha8Rng, r: &mut Report, case: usize) -> usize {
    let n = rng.random_range(2..=DAG_MAX_NODES);
    // Topological position i gets a shuffled name so id order differs from depth order.
    let mut names: Vec<usize> = (0..n).collect();
    names.shuffle(rng);
    let ids: Vec<CategoryId> = names
        .iter()
        .map(|k| CategoryId::new(format!("v{k}")).unwrap())
        .collect();
    let mut edges = BTreeSet::new();
    for child in 1..n {
        edges.insert((rng.random_range(0..child), child));
        for _ in 0..rng.random_range(0..3) {
            edges.insert((rng.random_range(0..child), child));
        }
    }
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();
    let h = Hierarchy::from_edges(edges.iter().map(|&(p, c)| (ids[p].clone(), ids[c].clone()))).unwrap();
    let o = DagOracle::new(ids.clone(), &edges, 0);
    let mut checks = 0;
    let mut expect = |ok: bool, what: String| {
        checks += 1;
        r.check(ok, format!("DAG #{case} ({n} nodes): {what}"));
    };

    expect(h.root() == &ids[0], "root".into());
    for (i, c) in ids.iter().enumerate() {
        expect(
            h.descendants(c).unwrap() == o.descendants(i),
            format!("descendants({c})"),
        );
        expect(h.ancestors(c).unwrap() == o.ancestors(i), format!("ancestors({c})"));
    }
    for _ in 0..10 {
        let cats = random_subset(rng, n, 1, 4);
        let got = h.lca(cats.iter().map(|&i| &ids[i])).unwrap();
        expect(got == ids[o.lca(&cats)], format!("lca({cats:?})"));
    }
    for _ in 0..3 {
        let members = random_subset(rng, n, 1, (n / 3).max(1));
        let base = random_subset(rng, n, 1, n);
        let levels = LevelSet::new(
            LevelKind::Categorical,
            0,
            members.iter().map(|&i| ids[i].clone()).collect(),
        )
        .unwrap();
        let base_set: BTreeSet<CategoryId> = base.iter().map(|&i| ids[i].clone()).collect();
        let got = h.partition(&levels, &base_set).unwrap();
        expect(
            got == o.partition(&members, &base),
            format!("partition({members:?}, {base:?})"),
        );
        let mut groups: Vec<Vec<usize>> = got.values().map(|g| g.iter().map(|c| o.index(c)).collect()).collect();
        groups.extend((0..3).map(|_| random_subset(rng, n, 1, 4)));
        for g in groups {
            let set: BTreeSet<CategoryId> = g.iter().map(|&i| ids[i].clone()).collect();
            let got = h.relabel(&levels, &set).ok();
            expect(
                got == o.relabel(&members, &g),
                format!("relabel({g:?}) with members {members:?}"),
            );
        }
    }
    checks
}

fn shifted_copy(sp: &SourceProblem) -> SourceProblem {
    let samples = sp
        .samples()
        .iter()
        .map(|s| Sample {
            id: format!("other-{}", s.id),
            features: s.features.iter().map(|v| v + 1000.0).collect(),
            label: CategoryId::new(format!("other-{}", s.label)).unwrap(),
        })
        .collect();
    SourceProblem::from_samples(samples, sp.dim()).unwrap()
}

fn graph_spv_oracle() -> Outcome {
    let mut r = Report::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checks = 0;
    for case in 0..DAG_COUNT {
        checks += check_dag(&mut rng, &mut r, case);
    }
    r.note(format!(
        "{DAG_COUNT} random DAGs of 2..={DAG_MAX_NODES} nodes, {checks} oracle comparisons"
    ));

    let mut groupings = 0;
    let mut rejections = 0;
    for seed in 0..12u64 {
        let cfg = SynthConfig {
            superordinate_count: 2 + (seed % 3) as usize,
            basic_per_super: 2 + (seed % 2) as usize,
            subordinate_per_basic: 2 + (seed % 3) as usize,
            dim: 6,
            samples_per_leaf: 3,
            seed,
            ..SynthConfig::default()
        };
        let ds = synthdata::generate(&cfg).unwrap();
        for levels in [&ds.levels.basic, &ds.levels.superordinate] {
            let (grouped, _) = spv::semantic_grouping(&ds.source, &ds.hierarchy, levels).unwrap();
            groupings += 1;
            r.check(
                spv::validate_spv(&ds.source, &grouped),
                format!(
                    "semantic grouping (seed {seed}, {} members) rejected",
                    levels.members().len()
                ),
            );
        }
        let same = ds.source.clone();
        let disjoint = shifted_copy(&ds.source);
        rejections += 2;
        r.check(
            !spv::validate_spv(&ds.source, &same),
            format!("identical copy accepted (seed {seed})"),
        );
        r.check(
            !spv::validate_spv(&ds.source, &disjoint),
            format!("disjoint problem accepted (seed {seed})"),
        );
    }
    r.note(format!(
        "{groupings} semantic groupings validated, {rejections} identical/disjoint problems rejected"
    ));
    r.finish()
}

// ---------------------------------------------------------------------------
// Training numerics

/// Loss recomputed from the raw weights: tanh hidden layers, softmax output,
/// mean negative log-likelihood.
fn manual_loss(layers: &[Dense], batch: &[(Vec<f64>, usize)]) -> f64 {
    let mut total = 0.0;
    for (x, y) in batch {
        let mut a = x.clone();
        for (l, d) in layers.iter().enumerate() {
            let mut z = vec![0.0; d.outputs];
            for (o, zo) in z.iter_mut().enumerate() {
                *zo = d.bias[o] + (0..d.inputs).map(|i| d.weights[o * d.inputs + i] * a[i]).sum::<f64>();
            }
            a = if l + 1 < layers.len() {
                z.iter().map(|v| v.tanh()).collect()
            } else {
                z
            };
        }
        let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = a.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - a[*y];
    }
    total / batch.len() as f64
}

fn toy_problem(classes: usize, per_class: usize, dim: usize, seed: u64) -> SourceProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..classes * per_class)
        .map(|i| {
            let c = i % classes;
            Sample {
                id: format!("s{i}"),
                features: (0..dim)
                    .map(|d| rng.random_range(-1.0..1.0) + if d % classes == c { 2.0 } else { 0.0 })
                    .collect(),
                label: CategoryId::new(format!("c{c}")).unwrap(),
            }
        })
        .collect();
    SourceProblem::from_samples(samples, dim).unwrap()
}

fn bits(net: &Network) -> Vec<u64> {
    net.layers()
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.bias))
        .map(|v| v.to_bits())
        .collect()
}

fn training_numerics() -> Outcome {
    let mut r = Report::default();
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for seed in 0..5u64 {
        let arch = Architecture::new(vec![5, 5, 3], Activation::Tanh).unwrap();
        let net = Network::init_with(arch, Init::Gaussian { sigma: 0.5 }, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let batch: Vec<(Vec<f64>, usize)> = (0..4)
            .map(|_| {
                (
                    (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    rng.random_range(0..3),
                )
            })
            .collect();
        let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
        let (loss, grads) = net.gradients(&refs).unwrap();
        r.check(
            (loss - manual_loss(net.layers(), &batch)).abs() <= ORACLE_EPS,
            format!("seed {seed}: loss {loss} disagrees with the manual forward pass"),
        );
        for l in 0..net.layers().len() {
            let nw = net.layers()[l].weights.len();
            for p in 0..nw + net.layers()[l].bias.len() {
                let at = |delta: f64| {
                    let mut layers = net.layers().to_vec();
                    if p < nw {
                        layers[l].weights[p] += delta;
                    } else {
                        layers[l].bias[p - nw] += delta;
                    }
                    manual_loss(&layers, &batch)
                };
                let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
                let analytic = if p < nw {
                    grads[l].weights[p]
                } else {
                    grads[l].bias[p - nw]
                };
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_DENOM_FLOOR);
                worst = worst.max(rel);
                params += 1;
            }
        }
    }
    r.check(
        worst <= GRAD_REL_TOL,
        format!("max relative gradient error {worst:.2e} > {GRAD_REL_TOL:.0e}"),
    );
    r.note(format!(
        "5-5-3 tanh networks, {params} parameters checked, max relative error {worst:.2e} (step {FD_STEP:.0e})"
    ));

    let sp = toy_problem(3, 10, 5, 3);
    let cfg = TrainConfig {
        eta2: 0.05,
        alpha: 1.0,
        epochs: 5,
        batch_size: 4,
        seed: 9,
        init: Init::Gaussian { sigma: 0.3 },
    };
    for activation in [Activation::Tanh, Activation::Relu] {
        let runs: Vec<Vec<u64>> = (0..3)
            .map(|_| {
                let arch = Architecture::mlp(5, &[8, 6], 3, activation).unwrap();
                let net = Network::init_with(arch, cfg.init, cfg.seed).unwrap();
                bits(&nnet::train(net, &sp, &cfg).unwrap().network)
            })
            .collect();
        r.check(
            runs.windows(2).all(|w| w[0] == w[1]),
            format!("{activation:?} training is not bit-identical across runs"),
        );
    }
    r.note("3 repeated seeded runs per activation are bit-identical");
    r.finish()
}

// ---------------------------------------------------------------------------
// Retrain degeneracies

fn retrain_degeneracies() -> Outcome {
    let mut r = Report::default();
    let sp = toy_problem(4, 12, 6, 5);
    let arch = Architecture::mlp(6, &[10, 8], 4, Activation::Relu).unwrap();
    let train_cfg = TrainConfig {
        eta2: 0.05,
        alpha: 1.0,
        epochs: 4,
        batch_size: 8,
        seed: 1,
        init: Init::Gaussian { sigma: 0.3 },
    };
    let init = nnet::train(Network::init_with(arch, train_cfg.init, 1).unwrap(), &sp, &train_cfg)
        .unwrap()
        .network;
    let spec = |strategy, alpha| RetrainSpec {
        alpha,
        cfg: TrainConfig { seed: 77, ..train_cfg },
        ..RetrainSpec::default_for(strategy, init.arch())
    };
    let split = spec(Strategy::Fsft, 0.0).split_index;

    let fsft0 = retrain::retrain_with_trace(&init, &sp, &spec(Strategy::Fsft, 0.0)).unwrap();
    let frst = retrain::retrain_with_trace(&init, &sp, &spec(Strategy::Frst, 0.1)).unwrap();
    r.check(
        fsft0.network.theta1() == &init.layers()[..split],
        "fsft(alpha=0) modified theta1",
    );
    r.check(
        bits(&fsft0.network) == bits(&frst.network),
        "fsft(alpha=0) differs from FrST",
    );
    r.check(
        fsft0.loss_trace == frst.loss_trace,
        "fsft(alpha=0) trace differs from FrST",
    );

    let fsft1 = retrain::retrain_with_trace(&init, &sp, &spec(Strategy::Fsft, 1.0)).unwrap();
    let sft = retrain::retrain_with_trace(&init, &sp, &spec(Strategy::Sft, 0.1)).unwrap();
    let trace_bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    r.check(
        trace_bits(&fsft1.loss_trace) == trace_bits(&sft.loss_trace),
        "fsft(alpha=1) loss trajectory differs from SFT",
    );
    r.check(
        bits(&fsft1.network) == bits(&sft.network),
        "fsft(alpha=1) weights differ from SFT",
    );
    r.check(
        fsft1.network.theta1() != &init.layers()[..split],
        "fsft(alpha=1) left theta1 untouched",
    );

    let w = retrain::dr_width(4096, 2);
    r.check(w == 2048, format!("dr_width(4096, 2) = {w}"));
    let n_prime = retrain::dr_width(init.arch().penultimate_width(), 2);
    let dr = retrain::retrain_dr(&init, &sp, &spec(Strategy::Fsft, 0.1), n_prime).unwrap();
    r.check(
        dr.arch().penultimate_width() == n_prime,
        format!(
            "DR network penultimate width {} != {n_prime}",
            dr.arch().penultimate_width()
        ),
    );
    r.note(format!(
        "split index {split}, {} epochs; dr_width(4096, 2) = {w}",
        fsft1.loss_trace.len()
    ));
    r.finish()
}

// ---------------------------------------------------------------------------
// Fusion

fn fusion() -> Outcome {
    let mut r = Report::default();
    let hidden: [&[usize]; 3] = [&[7, 5], &[6, 4], &[9, 3]];
    let branches: Vec<Branch> = hidden
        .iter()
        .enumerate()
        .map(|(k, h)| {
            let arch = Architecture::mlp(4, h, 3, Activation::Relu).unwrap();
            let network = Network::init_with(arch, Init::Gaussian { sigma: 0.5 }, k as u64).unwrap();
            Branch {
                name: format!("b{k}"),
                feature_layer: network.penultimate_index(),
                network,
                samples: 10,
            }
        })
        .collect();
    let widths: usize = branches.iter().map(Branch::width).sum();
    let fused = MulDipNet::from_branches(branches.clone(), Norm::Linf).unwrap();
    r.check(
        fused.fused_dim() == widths,
        format!("fused_dim {} != sum of widths {widths}", fused.fused_dim()),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut nonzero = 0;
    for _ in 0..200 {
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = fused.extract(&x).unwrap();
        r.check(
            f.vector.len() == widths,
            format!("extracted length {} != {widths}", f.vector.len()),
        );
        for (k, range) in f.block_offsets.iter().enumerate() {
            let block = &f.vector[range.clone()];
            let peak = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if block.iter().any(|&v| v != 0.0) {
                nonzero += 1;
                r.check(peak == 1.0, format!("block {k} peaks at {peak}"));
            }
        }
        let (v, zero) = muldip::normalize(&x, Norm::Linf);
        r.check(
            !zero && v.iter().fold(0.0f64, |m, a| m.max(a.abs())) == 1.0,
            "normalize(Linf) peak",
        );
    }

    for b in &branches {
        let single = MulDipNet::from_branches(vec![b.clone()], Norm::None).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let got = single.extract(&x).unwrap().vector;
            let raw = b.network.penultimate(&x).unwrap();
            r.check(
                got.iter().map(|v| v.to_bits()).eq(raw.iter().map(|v| v.to_bits())),
                format!("single-branch {} no-norm features differ from raw", b.name),
            );
        }
    }
    r.note(format!(
        "widths 5+4+3 = {widths}; {nonzero} nonzero L-inf blocks peak at exactly 1"
    ));
    r.finish()
}

// ---------------------------------------------------------------------------
// mAP

/// AP as the area under the step precision-recall curve of a ranked list.
fn oracle_ap(ranked: &[bool]) -> Option<f64> {
    let total = ranked.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for k in 1..=ranked.len() {
        let tp = ranked[..k].iter().filter(|&&p| p).count() as f64;
        let precision = tp / k as f64;
        let recall = tp / total as f64;
        area += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    Some(area)
}

fn map_oracle() -> Outcome {
    let mut r = Report::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut rankings = 0;
    for n in 1..=8usize {
        for mask in 0..(1u32 << n) {
            let ranked: Vec<bool> = (0..n).map(|k| mask >> k & 1 == 1).collect();
            // Present the items shuffled, with scores that restore the ranking.
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let scores: Vec<f64> = order
                .iter()
                .map(|&pos| (n - pos) as f64 + rng.random_range(0.0..0.5))
                .collect();
            let positive: Vec<bool> = order.iter().map(|&pos| ranked[pos]).collect();
            let got = transfer::average_precision(&scores, &positive);
            let want = oracle_ap(&ranked);
            let ok = match (got, want) {
                (Some(a), Some(b)) => (a - b).abs() <= AP_EPS,
                (None, None) => true,
                _ => false,
            };
            r.check(ok, format!("ranking {ranked:?}: {got:?} vs oracle {want:?}"));
            rankings += 1;
        }
    }
    r.note(format!(
        "{rankings} rankings of 1..=8 items agree with the precision-recall oracle"
    ));

    let example = transfer::mean_average_precision(&[vec![3.0], vec![2.0], vec![1.0]], &[vec![0], vec![], vec![0]], 1)
        .unwrap()
        .map;
    r.check((example - 83.33).abs() < 0.005, format!("[+,-,+] gives {example:.4}"));
    r.note(format!("[+,-,+] -> {example:.2}"));

    let scores: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let truth: Vec<Vec<usize>> = (0..6).map(|i| (0..3).filter(|k| (i + k) % 2 == 0).collect()).collect();
    let map = transfer::mean_average_precision(&scores, &truth, 3).unwrap().map;
    let per_class: Vec<f64> = (0..3)
        .map(|k| {
            let mut idx: Vec<usize> = (0..6).collect();
            idx.sort_by(|&a, &b| scores[b][k].partial_cmp(&scores[a][k]).unwrap());
            oracle_ap(&idx.iter().map(|&i| truth[i].contains(&k)).collect::<Vec<_>>()).unwrap()
        })
        .collect();
    let want = 100.0 * mean(&per_class);
    r.check(
        (map - want).abs() <= ORACLE_EPS,
        format!("multi-label mAP {map} vs oracle {want}"),
    );
    r.finish()
}

// ---------------------------------------------------------------------------
// End to end

fn end_to_end() -> Outcome {
    let mut r = Report::default();
    let start = Instant::now();
    let mut sums: BTreeMap<&str, f64> = METHODS.iter().map(|m| (*m, 0.0)).collect();
    let mut dims = BTreeMap::new();
    for seed in 0..E2E_SEEDS {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let out = experiment::run(&cfg).unwrap();
        for m in METHODS {
            *sums.get_mut(m).unwrap() += out.mean(m);
        }
        dims = out.dims;
    }
    let elapsed = start.elapsed();
    let acc = |m: &str| sums[m] / E2E_SEEDS as f64;

    let a = acc(MULDIP) >= acc(NET_S) && acc(MULDIP) >= acc(NET_G);
    let b = acc(FSFT) >= acc(SFT) && acc(FSFT) >= acc(FRST);
    let c_dim = dims[MULDIP_FSFT_DR] <= dims[NET_S];
    let c_acc = acc(MULDIP_FSFT_DR) >= acc(MULDIP) - E2E_MAX_DROP;
    r.check(a, "(a) MulDiP-Net below one of its subnetworks");
    r.check(b, "(b) FSFT below SFT or FrST");
    r.check(c_dim, "(c) DR fused representation wider than Net-S");
    r.check(
        c_acc,
        format!("(c) DR more than {E2E_MAX_DROP} points below MulDiP-Net"),
    );
    r.check(
        elapsed <= E2E_BUDGET,
        format!("took {:.0}s, budget {}s", elapsed.as_secs_f64(), E2E_BUDGET.as_secs()),
    );
    r.note(format!(
        "(a) MulDiP-Net {:.2} vs Net-S {:.2}, Net-G {:.2}",
        acc(MULDIP),
        acc(NET_S),
        acc(NET_G)
    ));
    r.note(format!(
        "(b) FSFT {:.2} vs SFT {:.2}, FrST {:.2}",
        acc(FSFT),
        acc(SFT),
        acc(FRST)
    ));
    r.note(format!(
        "(c) MulDiP+FSFT-DR {:.2} (dim {}) vs MulDiP-Net {:.2} (dim {}), Net-S dim {}",
        acc(MULDIP_FSFT_DR),
        dims[MULDIP_FSFT_DR],
        acc(MULDIP),
        dims[MULDIP],
        dims[NET_S]
    ));
    r.note(format!("{E2E_SEEDS} seeds in {:.1}s", elapsed.as_secs_f64()));
    r.finish()
}
