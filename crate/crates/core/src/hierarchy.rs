//! Category hierarchy (a rooted DAG of "is-a" edges) and level sets.
//!
//! Descendants and ancestors are defined by reachability, so nodes with
//! several parents are handled; on trees this coincides with iterating the
//! direct-parent function. The root is its own ancestor.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("invalid category id {0:?}: ids must be non-empty and contain no tab or newline")]
    InvalidId(String),
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("{}edge {parent} -> {child} closes a cycle", line_prefix(*.line))]
    Cycle {
        parent: String,
        child: String,
        line: Option<usize>,
    },
    #[error("{}duplicate edge {parent} -> {child}", line_prefix(*.line))]
    DuplicateEdge {
        parent: String,
        child: String,
        line: Option<usize>,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("hierarchy has no edges")]
    Empty,
    #[error("hierarchy has several roots: {}", .0.join(", "))]
    MultipleRoots(Vec<String>),
    #[error("empty category set")]
    EmptyCategorySet,
    #[error("duplicate level member `{0}`")]
    DuplicateMember(String),
    #[error("no level member is an ancestor of `{lca}` (LCA of {})", .group.join(", "))]
    Uncovered { group: Vec<String>, lca: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn line_prefix(line: Option<usize>) -> String {
    line.map(|l| format!("line {l}: ")).unwrap_or_default()
}

pub type Result<T, E = HierarchyError> = std::result::Result<T, E>;

/// Opaque, non-empty category label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CategoryId(String);

impl CategoryId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.contains(['\t', '\n', '\r']) {
            return Err(HierarchyError::InvalidId(id));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for CategoryId {
    type Error = HierarchyError;
    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl TryFrom<&str> for CategoryId {
    type Error = HierarchyError;
    fn try_from(value: &str) -> Result<Self> {
        Self::new(value)
    }
}

impl From<CategoryId> for String {
    fn from(value: CategoryId) -> Self {
        value.0
    }
}

impl FromStr for CategoryId {
    type Err = HierarchyError;
    fn from_str(s: &str) -> Result<Self> {
        Self::new(s)
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for CategoryId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Immutable rooted DAG over category ids.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    ids: Vec<CategoryId>,
    index: HashMap<CategoryId, usize>,
    children: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
    root: usize,
    /// Longest path length from the root.
    depth: Vec<usize>,
}

#[derive(Default)]
struct Builder {
    ids: Vec<CategoryId>,
    index: HashMap<CategoryId, usize>,
    children: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
    edges: HashSet<(usize, usize)>,
}

impl Builder {
    fn node(&mut self, id: CategoryId) -> usize {
        if let Some(&i) = self.index.get(&id) {
            return i;
        }
        let i = self.ids.len();
        self.index.insert(id.clone(), i);
        self.ids.push(id);
        self.children.push(Vec::new());
        self.parents.push(Vec::new());
        i
    }

    fn reaches(&self, from: usize, to: usize) -> bool {
        let mut seen = vec![false; self.ids.len()];
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            if n == to {
                return true;
            }
            if std::mem::replace(&mut seen[n], true) {
                continue;
            }
            stack.extend(self.children[n].iter().copied());
        }
        false
    }

    fn add_edge(&mut self, parent: CategoryId, child: CategoryId, line: Option<usize>) -> Result<()> {
        let p = self.node(parent);
        let c = self.node(child);
        if self.edges.contains(&(p, c)) {
            return Err(HierarchyError::DuplicateEdge {
                parent: self.ids[p].to_string(),
                child: self.ids[c].to_string(),
                line,
            });
        }
        if self.reaches(c, p) {
            return Err(HierarchyError::Cycle {
                parent: self.ids[p].to_string(),
                child: self.ids[c].to_string(),
                line,
            });
        }
        self.edges.insert((p, c));
        self.children[p].push(c);
        self.parents[c].push(p);
        Ok(())
    }

    fn finish(self) -> Result<Hierarchy> {
        if self.ids.is_empty() {
            return Err(HierarchyError::Empty);
        }
        let roots: Vec<usize> = (0..self.ids.len()).filter(|&i| self.parents[i].is_empty()).collect();
        // Edges were added without closing a cycle, so at least one source exists.
        if roots.len() > 1 {
            let mut names: Vec<String> = roots.iter().map(|&r| self.ids[r].to_string()).collect();
            names.sort();
            return Err(HierarchyError::MultipleRoots(names));
        }
        let root = roots[0];

        // Longest-path depth via Kahn's topological order.
        let n = self.ids.len();
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut depth = vec![0usize; n];
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.children[u] {
                depth[v] = depth[v].max(depth[u] + 1);
                indegree[v] -= 1;
                if indegree[v] == 0 {
                    queue.push_back(v);
                }
            }
        }

        let mut children = self.children;
        let mut parents = self.parents;
        for list in children.iter_mut().chain(parents.iter_mut()) {
            list.sort_by(|&a, &b| self.ids[a].cmp(&self.ids[b]));
        }
        Ok(Hierarchy {
            ids: self.ids,
            index: self.index,
            children,
            parents,
            root,
            depth,
        })
    }
}

impl Hierarchy {
    /// Builds a hierarchy from `(parent, child)` edges; the node set is inferred.
    pub fn from_edges<I>(edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (CategoryId, CategoryId)>,
    {
        let mut builder = Builder::default();
        for (parent, child) in edges {
            builder.add_edge(parent, child, None)?;
        }
        builder.finish()
    }

    /// Parses the edge-list format: one `parent<TAB>child` per line, `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut builder = Builder::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 2 {
                return Err(HierarchyError::Malformed {
                    line,
                    message: format!("expected `parent<TAB>child`, got {} field(s)", fields.len()),
                });
            }
            let parse_id = |s: &str| {
                CategoryId::new(s.trim()).map_err(|_| HierarchyError::Malformed {
                    line,
                    message: format!("dangling or invalid node reference {s:?}"),
                })
            };
            let parent = parse_id(fields[0])?;
            let child = parse_id(fields[1])?;
            builder.add_edge(parent, child, Some(line))?;
        }
        builder.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_edge_list(&self) -> String {
        let mut out = String::from("# parent\tchild\n");
        for (p, c) in self.edges() {
            out.push_str(&format!("{p}\t{c}\n"));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_edge_list())?;
        Ok(())
    }

    pub fn root(&self) -> &CategoryId {
        &self.ids[self.root]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, c: &CategoryId) -> bool {
        self.index.contains_key(c)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &CategoryId> {
        self.ids.iter()
    }

    /// All edges, sorted by (parent, child).
    pub fn edges(&self) -> Vec<(CategoryId, CategoryId)> {
        let mut edges: Vec<_> = self
            .children
            .iter()
            .enumerate()
            .flat_map(|(p, cs)| cs.iter().map(move |&c| (p, c)))
            .map(|(p, c)| (self.ids[p].clone(), self.ids[c].clone()))
            .collect();
        edges.sort();
        edges
    }

    pub fn children(&self, c: &CategoryId) -> Result<Vec<&CategoryId>> {
        let i = self.idx(c)?;
        Ok(self.children[i].iter().map(|&j| &self.ids[j]).collect())
    }

    pub fn parents(&self, c: &CategoryId) -> Result<Vec<&CategoryId>> {
        let i = self.idx(c)?;
        Ok(self.parents[i].iter().map(|&j| &self.ids[j]).collect())
    }

    pub fn leaves(&self) -> BTreeSet<CategoryId> {
        (0..self.ids.len())
            .filter(|&i| self.children[i].is_empty())
            .map(|i| self.ids[i].clone())
            .collect()
    }

    /// Length of the longest path from the root.
    pub fn depth(&self, c: &CategoryId) -> Result<usize> {
        Ok(self.depth[self.idx(c)?])
    }

    fn idx(&self, c: &CategoryId) -> Result<usize> {
        self.index
            .get(c)
            .copied()
            .ok_or_else(|| HierarchyError::UnknownCategory(c.to_string()))
    }

    fn reach(&self, start: usize, adjacency: &[Vec<usize>]) -> Vec<bool> {
        let mut seen = vec![false; self.ids.len()];
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            if std::mem::replace(&mut seen[n], true) {
                continue;
            }
            stack.extend(adjacency[n].iter().copied());
        }
        seen
    }

    fn collect(&self, mask: &[bool]) -> BTreeSet<CategoryId> {
        mask.iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| self.ids[i].clone())
            .collect()
    }

    /// Ancestor mask of `i` including `i` itself.
    fn ancestors_or_self(&self, i: usize) -> Vec<bool> {
        self.reach(i, &self.parents)
    }

    /// Every node reachable from `c`, `c` included.
    pub fn descendants(&self, c: &CategoryId) -> Result<BTreeSet<CategoryId>> {
        let i = self.idx(c)?;
        Ok(self.collect(&self.reach(i, &self.children)))
    }

    /// Every node from which `c` is reachable, `c` excluded; the root maps to itself.
    pub fn ancestors(&self, c: &CategoryId) -> Result<BTreeSet<CategoryId>> {
        let i = self.idx(c)?;
        let mut mask = self.ancestors_or_self(i);
        if i != self.root {
            mask[i] = false;
        }
        Ok(self.collect(&mask))
    }

    /// Deepest common ancestor (a node counts as its own ancestor here);
    /// ties go to the lexicographically smallest id.
    pub fn lca<'a, I>(&self, cats: I) -> Result<CategoryId>
    where
        I: IntoIterator<Item = &'a CategoryId>,
    {
        let mut common: Option<Vec<bool>> = None;
        for c in cats {
            let mask = self.ancestors_or_self(self.idx(c)?);
            common = Some(match common {
                None => mask,
                Some(acc) => acc.iter().zip(&mask).map(|(a, b)| *a && *b).collect(),
            });
        }
        let common = common.ok_or(HierarchyError::EmptyCategorySet)?;
        let best = self.deepest(common.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i));
        // The root is a common ancestor of every node set.
        Ok(self.ids[best.unwrap_or(self.root)].clone())
    }

    fn deepest(&self, candidates: impl Iterator<Item = usize>) -> Option<usize> {
        candidates.min_by(|&a, &b| {
            self.depth[b]
                .cmp(&self.depth[a])
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        })
    }

    /// For each level member `c`, the base categories that descend from `c`.
    /// Members with no such descendants are omitted; groups may overlap.
    pub fn partition(
        &self,
        levels: &LevelSet,
        base: &BTreeSet<CategoryId>,
    ) -> Result<BTreeMap<CategoryId, BTreeSet<CategoryId>>> {
        let base_idx: Vec<usize> = base.iter().map(|c| self.idx(c)).collect::<Result<_>>()?;
        let mut out = BTreeMap::new();
        for member in levels.members() {
            let desc = self.reach(self.idx(member)?, &self.children);
            let group: BTreeSet<CategoryId> = base_idx
                .iter()
                .filter(|&&b| desc[b])
                .map(|&b| self.ids[b].clone())
                .collect();
            if !group.is_empty() {
                out.insert(member.clone(), group);
            }
        }
        Ok(out)
    }

    /// Names a group by the deepest level member that is its LCA or an
    /// ancestor of its LCA.
    pub fn relabel(&self, levels: &LevelSet, group: &BTreeSet<CategoryId>) -> Result<CategoryId> {
        let lca = self.lca(group)?;
        let above = self.ancestors_or_self(self.idx(&lca)?);
        let members: Vec<usize> = levels.members().iter().map(|m| self.idx(m)).collect::<Result<_>>()?;
        match self.deepest(members.into_iter().filter(|&m| above[m])) {
            Some(m) => Ok(self.ids[m].clone()),
            None => Err(HierarchyError::Uncovered {
                group: group.iter().map(ToString::to_string).collect(),
                lca: lca.to_string(),
            }),
        }
    }
}

impl PartialEq for Hierarchy {
    fn eq(&self, other: &Self) -> bool {
        self.root() == other.root() && self.edges() == other.edges()
    }
}

impl Eq for Hierarchy {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelKind {
    Categorical,
    Hierarchical,
    Clustering,
}

impl FromStr for LevelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "categorical" => Ok(Self::Categorical),
            "hierarchical" => Ok(Self::Hierarchical),
            "clustering" => Ok(Self::Clustering),
            other => Err(format!("unknown level kind `{other}`")),
        }
    }
}

impl fmt::Display for LevelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Categorical => "categorical",
            Self::Hierarchical => "hierarchical",
            Self::Clustering => "clustering",
        })
    }
}

/// A set of generic categories at one level (e.g. the basic level).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSet {
    pub kind: LevelKind,
    pub level_tag: i64,
    members: Vec<CategoryId>,
}

impl LevelSet {
    pub fn new(kind: LevelKind, level_tag: i64, members: Vec<CategoryId>) -> Result<Self> {
        let mut seen = HashSet::new();
        for m in &members {
            if !seen.insert(m) {
                return Err(HierarchyError::DuplicateMember(m.to_string()));
            }
        }
        Ok(Self {
            kind,
            level_tag,
            members,
        })
    }

    pub fn members(&self) -> &[CategoryId] {
        &self.members
    }

    pub fn contains(&self, c: &CategoryId) -> bool {
        self.members.contains(c)
    }

    /// Checks that every member is a node of `h`.
    pub fn check_against(&self, h: &Hierarchy) -> Result<()> {
        match self.members.iter().find(|m| !h.contains(m)) {
            Some(m) => Err(HierarchyError::UnknownCategory(m.to_string())),
            None => Ok(()),
        }
    }

    /// Parses `kind<TAB>level_tag` followed by one member id per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut header: Option<(LevelKind, i64)> = None;
        let mut members = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if header.is_none() {
                let malformed = |message: String| HierarchyError::Malformed { line, message };
                let (kind, tag) = trimmed
                    .split_once('\t')
                    .ok_or_else(|| malformed("expected `kind<TAB>level_tag` header".into()))?;
                let kind = kind.trim().parse().map_err(malformed)?;
                let tag = tag
                    .trim()
                    .parse()
                    .map_err(|e| malformed(format!("bad level tag: {e}")))?;
                header = Some((kind, tag));
                continue;
            }
            let id = CategoryId::new(trimmed.trim()).map_err(|e| HierarchyError::Malformed {
                line,
                message: e.to_string(),
            })?;
            if members.contains(&id) {
                return Err(HierarchyError::Malformed {
                    line,
                    message: format!("duplicate level member `{id}`"),
                });
            }
            members.push(id);
        }
        let (kind, level_tag) = header.ok_or(HierarchyError::Malformed {
            line: 1,
            message: "missing `kind<TAB>level_tag` header".into(),
        })?;
        Self::new(kind, level_tag, members)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\t{}\n", self.kind, self.level_tag);
        for m in &self.members {
            out.push_str(m.as_str());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
