use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{kmeans, GroupingMap, Result, Sample, SourceProblem, SpvError};
use crate::hierarchy::{CategoryId, Hierarchy, LevelSet};
use crate::rng;

const KMEANS_MAX_ITER: usize = 300;

fn generic_id(prefix: &str, j: usize) -> CategoryId {
    CategoryId::new(format!("{prefix}{j:03}")).expect("non-empty generated id")
}

fn grouped(sp: &SourceProblem, map: GroupingMap) -> Result<(SourceProblem, GroupingMap)> {
    let out = map.apply(sp)?;
    if out.class_count() >= sp.class_count() {
        return Err(SpvError::NoReduction {
            before: sp.class_count(),
            after: out.class_count(),
        });
    }
    Ok((out, map))
}

/// Groups specific categories under the level members of a hierarchy and
/// relabels their samples.
///
/// A category reachable from several level members goes to the group whose
/// LCA is deepest (ties: smallest level-member id).
pub fn semantic_grouping(sp: &SourceProblem, h: &Hierarchy, levels: &LevelSet) -> Result<(SourceProblem, GroupingMap)> {
    let unknown: Vec<String> = sp
        .label_set()
        .iter()
        .filter(|c| !h.contains(c))
        .map(ToString::to_string)
        .collect();
    if !unknown.is_empty() {
        return Err(SpvError::UnknownCategories(unknown));
    }
    levels.check_against(h)?;

    let base: BTreeSet<CategoryId> = sp.label_set().iter().cloned().collect();
    let groups = h.partition(levels, &base)?;

    // (lca depth, level member, relabel target) per group.
    let mut named = Vec::with_capacity(groups.len());
    for (member, group) in &groups {
        let lca = h.lca(group)?;
        let target = h.relabel(levels, group)?;
        named.push((h.depth(&lca)?, member, target, group));
    }

    let mut map = GroupingMap::default();
    let mut orphans = Vec::new();
    for c in sp.label_set() {
        let best = named
            .iter()
            .filter(|(_, _, _, g)| g.contains(c))
            .min_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        match best {
            Some((_, _, target, _)) => {
                map.entries.insert(c.clone(), target.clone());
            }
            None => orphans.push(c.to_string()),
        }
    }
    if !orphans.is_empty() {
        return Err(SpvError::Uncovered(orphans));
    }
    grouped(sp, map)
}

/// Assigns categories uniformly at random to `groups` non-empty generic labels.
pub fn random_grouping(sp: &SourceProblem, groups: usize, seed: u64) -> Result<(SourceProblem, GroupingMap)> {
    let n = sp.class_count();
    if groups == 0 || groups >= n {
        return Err(SpvError::OutOfRange {
            what: "group count",
            value: groups,
            min: 1,
            max: n.saturating_sub(1),
        });
    }
    let mut rng = rng::seeded(seed);
    let mut order: Vec<&CategoryId> = sp.label_set().iter().collect();
    order.shuffle(&mut rng);
    let mut map = GroupingMap::default();
    for (i, c) in order.into_iter().enumerate() {
        // The first `groups` categories seed one group each, so none is empty.
        let g = if i < groups { i } else { rng.random_range(0..groups) };
        map.entries.insert(c.clone(), generic_id("rand", g));
    }
    grouped(sp, map)
}

/// Mean feature vector of each category's samples.
pub fn category_mean_features(sp: &SourceProblem) -> BTreeMap<CategoryId, Vec<f64>> {
    let mut sums: BTreeMap<CategoryId, (Vec<f64>, usize)> = BTreeMap::new();
    for s in sp.samples() {
        let entry = sums.entry(s.label.clone()).or_insert_with(|| (vec![0.0; sp.dim()], 0));
        for (a, v) in entry.0.iter_mut().zip(&s.features) {
            *a += v;
        }
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(c, (sum, n))| (c, sum.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// Groups categories by k-means over per-category feature vectors; the
/// cluster index becomes the generic label.
pub fn clustering_grouping(
    sp: &SourceProblem,
    category_features: &BTreeMap<CategoryId, Vec<f64>>,
    k: usize,
    seed: u64,
) -> Result<(SourceProblem, GroupingMap)> {
    let n = sp.class_count();
    if k == 0 || k >= n {
        return Err(SpvError::OutOfRange {
            what: "cluster count",
            value: k,
            min: 1,
            max: n.saturating_sub(1),
        });
    }
    let missing: Vec<String> = sp
        .label_set()
        .iter()
        .filter(|c| !category_features.contains_key(c))
        .map(ToString::to_string)
        .collect();
    if !missing.is_empty() {
        return Err(SpvError::MissingFeatures(missing));
    }
    let points: Vec<Vec<f64>> = sp.label_set().iter().map(|c| category_features[c].clone()).collect();
    let result = kmeans(&points, k, seed, KMEANS_MAX_ITER)?;
    let map = GroupingMap {
        entries: sp
            .label_set()
            .iter()
            .zip(&result.assignments)
            .map(|(c, &j)| (c.clone(), generic_id("cluster", j)))
            .collect(),
    };
    grouped(sp, map)
}

/// Splits the label set into `parts` balanced subsets (sizes differ by at
/// most one); each output keeps only the samples of its labels.
pub fn splitting_spv(sp: &SourceProblem, parts: usize, seed: u64) -> Result<Vec<SourceProblem>> {
    let n = sp.class_count();
    if parts < 2 || parts > n {
        return Err(SpvError::OutOfRange {
            what: "part count",
            value: parts,
            min: 2,
            max: n,
        });
    }
    let mut order: Vec<&CategoryId> = sp.label_set().iter().collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut subsets = vec![BTreeSet::new(); parts];
    for (i, c) in order.into_iter().enumerate() {
        subsets[i % parts].insert(c.clone());
    }
    subsets
        .into_iter()
        .map(|labels| {
            let samples: Vec<Sample> = sp
                .samples()
                .iter()
                .filter(|s| labels.contains(&s.label))
                .cloned()
                .collect();
            SourceProblem::new(samples, labels, sp.dim())
        })
        .collect()
}

/// Union of `sp` with a problem over new categories.
pub fn adding_spv(sp: &SourceProblem, extra: &SourceProblem) -> Result<SourceProblem> {
    if extra.is_empty() {
        return Err(SpvError::EmptyExtra);
    }
    if extra.dim() != sp.dim() {
        return Err(SpvError::DimMismatch {
            expected: sp.dim(),
            got: extra.dim(),
            context: "added problem".into(),
        });
    }
    let clashes: Vec<String> = extra
        .label_set()
        .iter()
        .filter(|c| sp.class_index(c).is_some())
        .map(ToString::to_string)
        .collect();
    if !clashes.is_empty() {
        return Err(SpvError::LabelCollision(clashes));
    }
    let ids: BTreeSet<&str> = sp.samples().iter().map(|s| s.id.as_str()).collect();
    let dup: Vec<String> = extra
        .samples()
        .iter()
        .filter(|s| ids.contains(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    if !dup.is_empty() {
        return Err(SpvError::SampleCollision(dup));
    }
    let samples = sp.samples().iter().chain(extra.samples()).cloned().collect();
    let labels = sp.label_set().iter().chain(extra.label_set()).cloned();
    SourceProblem::new(samples, labels, sp.dim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::LevelKind;
    use crate::spv::validate_spv;

    fn id(s: &str) -> CategoryId {
        CategoryId::new(s).unwrap()
    }

    /// r -> {dog, flower}; dog -> {rottweiler, pitbull}; flower -> {tulip, rose}.
    fn toy() -> (Hierarchy, SourceProblem) {
        let h = Hierarchy::from_edges(
            [
                ("r", "dog"),
                ("r", "flower"),
                ("dog", "rottweiler"),
                ("dog", "pitbull"),
                ("flower", "tulip"),
                ("flower", "rose"),
            ]
            .iter()
            .map(|(p, c)| (id(p), id(c))),
        )
        .unwrap();
        let leaves = ["rottweiler", "pitbull", "tulip", "rose"];
        let samples = (0..12)
            .map(|i| Sample {
                id: format!("s{i}"),
                features: vec![i as f64, (i * i) as f64],
                label: id(leaves[i % 4]),
            })
            .collect();
        (h, SourceProblem::from_samples(samples, 2).unwrap())
    }

    fn levels(members: &[&str]) -> LevelSet {
        LevelSet::new(LevelKind::Categorical, 1, members.iter().map(|s| id(s)).collect()).unwrap()
    }

    #[test]
    fn semantic_grouping_toy() {
        let (h, sp) = toy();
        let (out, map) = semantic_grouping(&sp, &h, &levels(&["dog", "flower"])).unwrap();
        assert_eq!(out.len(), sp.len());
        assert_eq!(out.label_set(), &[id("dog"), id("flower")]);
        assert_eq!(map.get(&id("pitbull")), Some(&id("dog")));
        assert_eq!(map.get(&id("rose")), Some(&id("flower")));
        for (a, b) in sp.samples().iter().zip(out.samples()) {
            assert_eq!(a.features, b.features);
            assert_eq!(map.get(&a.label), Some(&b.label));
        }
        assert!(validate_spv(&sp, &out));
    }

    #[test]
    fn identity_levels_are_rejected() {
        let (h, sp) = toy();
        let err = semantic_grouping(&sp, &h, &levels(&["rottweiler", "pitbull", "tulip", "rose"])).unwrap_err();
        assert!(matches!(err, SpvError::NoReduction { .. }), "{err}");
    }

    #[test]
    fn orphans_and_unknown_labels() {
        let (h, sp) = toy();
        let err = semantic_grouping(&sp, &h, &levels(&["dog"])).unwrap_err();
        match err {
            SpvError::Uncovered(o) => assert_eq!(o, vec!["rose".to_string(), "tulip".to_string()]),
            other => panic!("{other}"),
        }
        let small = Hierarchy::from_edges([(id("r"), id("dog"))]).unwrap();
        assert!(matches!(
            semantic_grouping(&sp, &small, &levels(&["dog"])),
            Err(SpvError::UnknownCategories(_))
        ));
    }

    #[test]
    fn overlapping_groups_go_to_deepest_lca() {
        // pug is under both `dog` (depth 2 LCA) and `pet` (LCA r-level).
        let h = Hierarchy::from_edges(
            [
                ("r", "animal"),
                ("animal", "dog"),
                ("r", "pet"),
                ("dog", "pug"),
                ("pet", "pug"),
                ("pet", "cat"),
                ("dog", "husky"),
            ]
            .iter()
            .map(|(p, c)| (id(p), id(c))),
        )
        .unwrap();
        let samples = ["pug", "cat", "husky"]
            .iter()
            .enumerate()
            .map(|(i, l)| Sample {
                id: format!("s{i}"),
                features: vec![i as f64],
                label: id(l),
            })
            .collect();
        let sp = SourceProblem::from_samples(samples, 1).unwrap();
        let (_, map) = semantic_grouping(&sp, &h, &levels(&["dog", "pet"])).unwrap();
        // dog's group {pug, husky} has LCA dog (depth 2); pet's group {pug, cat} has LCA pet (depth 1).
        assert_eq!(map.get(&id("pug")), Some(&id("dog")));
        assert_eq!(map.get(&id("cat")), Some(&id("pet")));
    }

    #[test]
    fn random_grouping_bounds() {
        let (_, sp) = toy();
        let (out, map) = random_grouping(&sp, 3, 5).unwrap();
        assert_eq!(out.class_count(), 3);
        let mut sizes: Vec<usize> = map
            .generic_labels()
            .iter()
            .map(|g| map.entries.values().filter(|v| *v == g).count())
            .collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 1, 2]);
        assert_eq!(random_grouping(&sp, 3, 5).unwrap().1, map);
        let (one, _) = random_grouping(&sp, 1, 0).unwrap();
        assert_eq!(one.class_count(), 1);
        assert!(random_grouping(&sp, 4, 0).is_err());
        assert!(random_grouping(&sp, 0, 0).is_err());
    }

    #[test]
    fn clustering_separates_blobs() {
        let (_, sp) = toy();
        let mut feats = BTreeMap::new();
        feats.insert(id("rottweiler"), vec![0.0, 0.1]);
        feats.insert(id("pitbull"), vec![0.2, 0.0]);
        feats.insert(id("tulip"), vec![50.0, 50.0]);
        feats.insert(id("rose"), vec![50.5, 49.8]);
        let (out, map) = clustering_grouping(&sp, &feats, 2, 1).unwrap();
        assert_eq!(out.class_count(), 2);
        assert_eq!(map.get(&id("rottweiler")), map.get(&id("pitbull")));
        assert_eq!(map.get(&id("tulip")), map.get(&id("rose")));
        assert_ne!(map.get(&id("tulip")), map.get(&id("pitbull")));
        assert_eq!(clustering_grouping(&sp, &feats, 2, 1).unwrap().1, map);
        assert!(matches!(
            clustering_grouping(&sp, &feats, 4, 1),
            Err(SpvError::OutOfRange { .. })
        ));
        feats.remove(&id("rose"));
        assert!(matches!(
            clustering_grouping(&sp, &feats, 2, 1),
            Err(SpvError::MissingFeatures(_))
        ));
    }

    #[test]
    fn splitting_is_balanced_and_exhaustive() {
        let samples = (0..30)
            .map(|i| Sample {
                id: format!("s{i}"),
                features: vec![i as f64],
                label: id(&format!("c{}", i % 10)),
            })
            .collect();
        let sp = SourceProblem::from_samples(samples, 1).unwrap();
        let parts = splitting_spv(&sp, 2, 9).unwrap();
        assert_eq!(parts.len(), 2);
        assert!(parts.iter().all(|p| p.class_count() == 5));
        let mut ids: Vec<&str> = parts
            .iter()
            .flat_map(|p| p.samples().iter().map(|s| s.id.as_str()))
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 30);
        for p in &parts {
            assert!(p.len() < sp.len() && p.class_count() < sp.class_count());
            assert!(validate_spv(&sp, p));
        }
        let three = splitting_spv(&sp, 3, 9).unwrap();
        let mut sizes: Vec<usize> = three.iter().map(SourceProblem::class_count).collect();
        sizes.sort();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert!(splitting_spv(&sp, 1, 0).is_err());
        assert!(splitting_spv(&sp, 11, 0).is_err());
    }

    #[test]
    fn adding_grows_problem() {
        let samples = (0..20)
            .map(|i| Sample {
                id: format!("s{i}"),
                features: vec![i as f64],
                label: id(&format!("c{}", i % 10)),
            })
            .collect();
        let sp = SourceProblem::from_samples(samples, 1).unwrap();
        let extra_samples = (0..10)
            .map(|i| Sample {
                id: format!("e{i}"),
                features: vec![-(i as f64)],
                label: id(&format!("n{}", i % 2)),
            })
            .collect();
        let extra = SourceProblem::from_samples(extra_samples, 1).unwrap();
        let out = adding_spv(&sp, &extra).unwrap();
        assert_eq!(out.len(), sp.len() + 10);
        assert_eq!(out.class_count(), sp.class_count() + 2);
        assert!(validate_spv(&sp, &out));
        assert!(matches!(adding_spv(&sp, &sp), Err(SpvError::LabelCollision(_))));
        let empty = SourceProblem::new(vec![], [id("zz")], 1).unwrap();
        assert!(matches!(adding_spv(&sp, &empty), Err(SpvError::EmptyExtra)));
        let wide = SourceProblem::from_samples(
            vec![Sample {
                id: "w".into(),
                features: vec![0.0, 0.0],
                label: id("w"),
            }],
            2,
        )
        .unwrap();
        assert!(matches!(adding_spv(&sp, &wide), Err(SpvError::DimMismatch { .. })));
    }

    #[test]
    fn adding_three_specific_of_ten() {
        let mk = |prefix: &str, classes: usize, per: usize, offset: f64| {
            let samples = (0..classes * per)
                .map(|i| Sample {
                    id: format!("{prefix}{i}"),
                    features: vec![offset + i as f64],
                    label: id(&format!("{prefix}c{}", i % classes)),
                })
                .collect();
            SourceProblem::from_samples(samples, 1).unwrap()
        };
        let sp = mk("s", 10, 4, 0.0);
        let extra = mk("x", 3, 4, 1000.0);
        let out = adding_spv(&sp, &extra).unwrap();
        assert_eq!(out.class_count(), 13);
        assert!(out.len() > sp.len());
    }
}
