//! Rooted, rank-aligned taxonomy over image classes.
//!
//! Leaves are species-level classes at rank 0; every edge steps the rank by
//! exactly one, so "`level` levels above a leaf" is well defined and the
//! level-`level` partitions of the leaf set are disjoint.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, JsonlError};

/// Opaque stable class identifier, unique within one taxonomy.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaxonId(pub String);

impl TaxonId {
    pub fn new(id: impl Into<String>) -> Self {
        TaxonId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaxonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaxonId {
    fn from(s: &str) -> Self {
        TaxonId(s.to_owned())
    }
}

#[derive(Debug, Clone)]
pub struct TaxonNode {
    pub parent: Option<TaxonId>,
    pub rank: u32,
    pub name: String,
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("taxonomy is empty")]
    Empty,
    #[error("duplicate taxon id {0}")]
    DuplicateId(TaxonId),
    #[error("taxon {child} references unknown parent {parent}")]
    UnknownParent { child: TaxonId, parent: TaxonId },
    #[error("expected exactly one root, found {0}")]
    RootCount(usize),
    #[error("taxon {child} has rank {child_rank} but its parent {parent} has rank {parent_rank}; ranks must step by exactly one")]
    RankStep {
        child: TaxonId,
        child_rank: u32,
        parent: TaxonId,
        parent_rank: u32,
    },
    #[error("leaf {0} has rank {1}, leaves must have rank 0")]
    LeafRank(TaxonId, u32),
    #[error("taxon {0} is not connected to the root")]
    Disconnected(TaxonId),
    #[error("{0} is not a leaf")]
    NotALeaf(TaxonId),
    #[error("level {level} out of range for {taxon} (depth {depth})")]
    LevelOutOfRange {
        taxon: TaxonId,
        level: u32,
        depth: u32,
    },
    #[error("unknown taxon {0}")]
    UnknownTaxon(TaxonId),
    #[error(transparent)]
    File(#[from] JsonlError),
}

/// One record of the taxonomy file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonRecord {
    pub id: TaxonId,
    pub parent_id: Option<TaxonId>,
    pub rank: u32,
    pub name: String,
}

/// Immutable rooted tree with species-level classes as leaves.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    nodes: BTreeMap<TaxonId, TaxonNode>,
    children: BTreeMap<TaxonId, Vec<TaxonId>>,
    root: TaxonId,
    leaves: Vec<TaxonId>,
    depth: u32,
}

impl Taxonomy {
    /// Build and validate a taxonomy from records. All structural
    /// invariants are checked here; the tree is immutable afterwards.
    pub fn from_records(records: Vec<TaxonRecord>) -> Result<Self, TaxonomyError> {
        if records.is_empty() {
            return Err(TaxonomyError::Empty);
        }
        let mut nodes: BTreeMap<TaxonId, TaxonNode> = BTreeMap::new();
        for record in &records {
            let node = TaxonNode {
                parent: record.parent_id.clone(),
                rank: record.rank,
                name: record.name.clone(),
            };
            if nodes.insert(record.id.clone(), node).is_some() {
                return Err(TaxonomyError::DuplicateId(record.id.clone()));
            }
        }

        let mut children: BTreeMap<TaxonId, Vec<TaxonId>> = BTreeMap::new();
        let mut roots = Vec::new();
        for (id, node) in &nodes {
            match &node.parent {
                None => roots.push(id.clone()),
                Some(parent) => {
                    let parent_node =
                        nodes.get(parent).ok_or_else(|| TaxonomyError::UnknownParent {
                            child: id.clone(),
                            parent: parent.clone(),
                        })?;
                    if parent_node.rank != node.rank + 1 {
                        return Err(TaxonomyError::RankStep {
                            child: id.clone(),
                            child_rank: node.rank,
                            parent: parent.clone(),
                            parent_rank: parent_node.rank,
                        });
                    }
                    children.entry(parent.clone()).or_default().push(id.clone());
                }
            }
        }
        if roots.len() != 1 {
            return Err(TaxonomyError::RootCount(roots.len()));
        }
        let root = roots.remove(0);
        let depth = nodes[&root].rank;

        let mut leaves = Vec::new();
        for (id, node) in &nodes {
            if !children.contains_key(id) {
                if node.rank != 0 {
                    return Err(TaxonomyError::LeafRank(id.clone(), node.rank));
                }
                leaves.push(id.clone());
            }
        }

        // Rank steps rule out cycles among linked nodes; what remains is to
        // check every node actually reaches the single root.
        for id in nodes.keys() {
            let mut cursor = id;
            while let Some(parent) = &nodes[cursor].parent {
                cursor = parent;
            }
            if *cursor != root {
                return Err(TaxonomyError::Disconnected(id.clone()));
            }
        }

        Ok(Taxonomy {
            nodes,
            children,
            root,
            leaves,
            depth,
        })
    }

    /// Load from a line-delimited `{id, parent_id|null, rank, name}` file.
    /// The first invariant violation is reported with its line number.
    pub fn load(path: &Path) -> Result<Self, TaxonomyError> {
        let records: Vec<TaxonRecord> = jsonl::read_jsonl(path)?;
        // Re-run the structural checks record-by-record so that violations
        // detectable per line carry a line number.
        let mut seen: BTreeSet<TaxonId> = BTreeSet::new();
        for (idx, record) in records.iter().enumerate() {
            if !seen.insert(record.id.clone()) {
                return Err(JsonlError::record(
                    path,
                    idx + 1,
                    format!("duplicate taxon id {}", record.id),
                )
                .into());
            }
            if record.parent_id.is_none() && record.rank == 0 && records.len() > 1 {
                return Err(JsonlError::record(
                    path,
                    idx + 1,
                    format!("root {} has rank 0 but the file has other nodes", record.id),
                )
                .into());
            }
        }
        Self::from_records(records)
    }

    pub fn root(&self) -> &TaxonId {
        &self.root
    }

    /// Rank of the root; every leaf sits exactly this many levels below.
    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn leaves(&self) -> &[TaxonId] {
        &self.leaves
    }

    pub fn is_leaf(&self, id: &TaxonId) -> bool {
        self.nodes.contains_key(id) && !self.children.contains_key(id)
    }

    pub fn contains(&self, id: &TaxonId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn node(&self, id: &TaxonId) -> Option<&TaxonNode> {
        self.nodes.get(id)
    }

    pub fn parent(&self, id: &TaxonId) -> Option<&TaxonId> {
        self.nodes.get(id).and_then(|n| n.parent.as_ref())
    }

    /// The unique node exactly `level` levels above leaf `c`.
    pub fn ancestor_at(&self, c: &TaxonId, level: u32) -> Result<TaxonId, TaxonomyError> {
        if !self.contains(c) {
            return Err(TaxonomyError::UnknownTaxon(c.clone()));
        }
        if !self.is_leaf(c) {
            return Err(TaxonomyError::NotALeaf(c.clone()));
        }
        if level < 1 || level > self.depth {
            return Err(TaxonomyError::LevelOutOfRange {
                taxon: c.clone(),
                level,
                depth: self.depth,
            });
        }
        let mut cursor = c.clone();
        for _ in 0..level {
            cursor = self.nodes[&cursor]
                .parent
                .clone()
                .expect("rank-aligned tree cannot run out of parents below the root");
        }
        Ok(cursor)
    }

    /// All leaves whose lowest common ancestor with `c` sits exactly
    /// `level` levels above `c`. Never contains `c` itself. The sets for
    /// `level = 1..depth` are pairwise disjoint and cover `leaves \ {c}`.
    pub fn taxon_partition(
        &self,
        c: &TaxonId,
        level: u32,
    ) -> Result<BTreeSet<TaxonId>, TaxonomyError> {
        let outer = self.ancestor_at(c, level)?;
        let inner = if level == 1 {
            c.clone()
        } else {
            self.ancestor_at(c, level - 1)?
        };
        let mut result = self.leaves_under(&outer);
        for excluded in self.leaves_under(&inner) {
            result.remove(&excluded);
        }
        result.remove(c);
        Ok(result)
    }

    /// Leaves in the subtree rooted at `id` (including `id` when it is a leaf).
    pub fn leaves_under(&self, id: &TaxonId) -> BTreeSet<TaxonId> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id.clone()];
        while let Some(cursor) = stack.pop() {
            match self.children.get(&cursor) {
                Some(kids) => stack.extend(kids.iter().cloned()),
                None => {
                    out.insert(cursor);
                }
            }
        }
        out
    }

    /// Number of levels above `a` at which `a` and `b` first share an
    /// ancestor; 0 when `a == b`. Both must be leaves.
    pub fn lca_level(&self, a: &TaxonId, b: &TaxonId) -> Result<u32, TaxonomyError> {
        for id in [a, b] {
            if !self.contains(id) {
                return Err(TaxonomyError::UnknownTaxon(id.clone()));
            }
            if !self.is_leaf(id) {
                return Err(TaxonomyError::NotALeaf(id.clone()));
            }
        }
        if a == b {
            return Ok(0);
        }
        let mut ca = a.clone();
        let mut cb = b.clone();
        for level in 1..=self.depth {
            ca = self.nodes[&ca].parent.clone().expect("below root");
            cb = self.nodes[&cb].parent.clone().expect("below root");
            if ca == cb {
                return Ok(level);
            }
        }
        unreachable!("rank-aligned connected tree: paths meet at the root")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(id: &str, parent: Option<&str>, rank: u32) -> TaxonRecord {
        TaxonRecord {
            id: TaxonId::from(id),
            parent_id: parent.map(TaxonId::from),
            rank,
            name: id.to_owned(),
        }
    }

    /// Five-rank toy tree: genus G1={s1,s2}, genus G2={s3} inside family
    /// F1; family F2={s4} in the same order; order O2={s5} in the same
    /// class. Single-child chains keep the ranks contiguous.
    pub(crate) fn toy_tree() -> Taxonomy {
        Taxonomy::from_records(vec![
            rec("C", None, 4),
            rec("O1", Some("C"), 3),
            rec("O2", Some("C"), 3),
            rec("F1", Some("O1"), 2),
            rec("F2", Some("O1"), 2),
            rec("F5", Some("O2"), 2),
            rec("G1", Some("F1"), 1),
            rec("G2", Some("F1"), 1),
            rec("G4", Some("F2"), 1),
            rec("G5", Some("F5"), 1),
            rec("s1", Some("G1"), 0),
            rec("s2", Some("G1"), 0),
            rec("s3", Some("G2"), 0),
            rec("s4", Some("G4"), 0),
            rec("s5", Some("G5"), 0),
        ])
        .unwrap()
    }

    /// Random rank-aligned taxonomy with the requested depth; every
    /// internal node gets 1..=4 children.
    pub(crate) fn random_tree(seed: u64, depth: u32, max_leaves: usize) -> Taxonomy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = vec![rec("n0", None, depth)];
        let mut frontier = vec!["n0".to_string()];
        let mut counter = 1usize;
        for rank in (0..depth).rev() {
            let mut next = Vec::new();
            for parent in &frontier {
                let kids = rng.gen_range(1..=4usize);
                for _ in 0..kids {
                    if rank == 0 && next.len() + 1 > max_leaves {
                        break;
                    }
                    let id = format!("n{counter}");
                    counter += 1;
                    records.push(rec(&id, Some(parent), rank));
                    next.push(id);
                }
            }
            frontier = next;
        }
        Taxonomy::from_records(records).unwrap()
    }

    #[test]
    fn ancestor_walk_on_chain() {
        let t = toy_tree();
        let s1 = TaxonId::from("s1");
        assert_eq!(t.ancestor_at(&s1, 1).unwrap(), TaxonId::from("G1"));
        assert_eq!(t.ancestor_at(&s1, t.depth()).unwrap(), *t.root());
    }

    #[test]
    fn ancestor_matches_repeated_parent_lookups() {
        for seed in 0..5u64 {
            let t = random_tree(seed, 4, 60);
            for leaf in t.leaves() {
                for level in 1..=t.depth() {
                    // Oracle: level-fold parent walk.
                    let mut cursor = leaf.clone();
                    for _ in 0..level {
                        cursor = t.parent(&cursor).unwrap().clone();
                    }
                    assert_eq!(t.ancestor_at(leaf, level).unwrap(), cursor);
                }
            }
        }
    }

    #[test]
    fn ancestor_errors() {
        let t = toy_tree();
        let s1 = TaxonId::from("s1");
        assert!(matches!(
            t.ancestor_at(&s1, 5),
            Err(TaxonomyError::LevelOutOfRange { .. })
        ));
        assert!(matches!(
            t.ancestor_at(&TaxonId::from("G1"), 1),
            Err(TaxonomyError::NotALeaf(_))
        ));
    }

    #[test]
    fn toy_partitions() {
        let t = toy_tree();
        let s1 = TaxonId::from("s1");
        for (level, expected) in [(1, "s2"), (2, "s3"), (3, "s4"), (4, "s5")] {
            let part = t.taxon_partition(&s1, level).unwrap();
            assert_eq!(part, BTreeSet::from([TaxonId::from(expected)]), "level {level}");
        }
    }

    #[test]
    fn degenerate_sibling_set_is_empty() {
        let t = toy_tree();
        assert!(t.taxon_partition(&TaxonId::from("s4"), 1).unwrap().is_empty());
    }

    #[test]
    fn partitions_disjoint_and_cover_against_lca_oracle() {
        for seed in 0..20u64 {
            let depth = 2 + (seed % 4) as u32;
            let t = random_tree(seed, depth, 200);
            for c in t.leaves() {
                let mut seen: BTreeSet<TaxonId> = BTreeSet::new();
                for level in 1..=t.depth() {
                    let part = t.taxon_partition(c, level).unwrap();
                    // Oracle: brute-force LCA level for every leaf pair.
                    for other in t.leaves() {
                        let in_part = part.contains(other);
                        let oracle = other != c && t.lca_level(c, other).unwrap() == level;
                        assert_eq!(in_part, oracle, "leaf {other} level {level}");
                    }
                    for id in &part {
                        assert!(seen.insert(id.clone()), "{id} appeared twice");
                    }
                }
                seen.insert(c.clone());
                assert_eq!(seen.len(), t.leaves().len(), "union covers all leaves");
            }
        }
    }

    #[test]
    fn ancestors_nest_across_levels() {
        let t = random_tree(7, 5, 100);
        for c in t.leaves() {
            for l2 in 1..t.depth() {
                let lower = t.ancestor_at(c, l2).unwrap();
                for l1 in (l2 + 1)..=t.depth() {
                    let upper = t.ancestor_at(c, l1).unwrap();
                    // upper must be an ancestor of lower
                    let mut cursor = lower.clone();
                    let mut found = false;
                    while let Some(p) = t.parent(&cursor) {
                        if *p == upper {
                            found = true;
                            break;
                        }
                        cursor = p.clone();
                    }
                    assert!(found);
                }
            }
        }
    }

    #[test]
    fn loader_rejects_violations_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tax.jsonl");

        // Duplicate id on line 3.
        std::fs::write(
            &path,
            concat!(
                "{\"id\":\"r\",\"parent_id\":null,\"rank\":1,\"name\":\"r\"}\n",
                "{\"id\":\"a\",\"parent_id\":\"r\",\"rank\":0,\"name\":\"a\"}\n",
                "{\"id\":\"a\",\"parent_id\":\"r\",\"rank\":0,\"name\":\"a\"}\n",
            ),
        )
        .unwrap();
        let err = Taxonomy::load(&path).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");

        // Rank gap.
        std::fs::write(
            &path,
            concat!(
                "{\"id\":\"r\",\"parent_id\":null,\"rank\":2,\"name\":\"r\"}\n",
                "{\"id\":\"a\",\"parent_id\":\"r\",\"rank\":0,\"name\":\"a\"}\n",
            ),
        )
        .unwrap();
        let err = Taxonomy::load(&path).unwrap_err();
        assert!(matches!(err, TaxonomyError::RankStep { .. }), "{err}");

        // Two roots.
        std::fs::write(
            &path,
            concat!(
                "{\"id\":\"r\",\"parent_id\":null,\"rank\":1,\"name\":\"r\"}\n",
                "{\"id\":\"q\",\"parent_id\":null,\"rank\":1,\"name\":\"q\"}\n",
                "{\"id\":\"a\",\"parent_id\":\"r\",\"rank\":0,\"name\":\"a\"}\n",
            ),
        )
        .unwrap();
        assert!(matches!(
            Taxonomy::load(&path).unwrap_err(),
            TaxonomyError::RootCount(2)
        ));
    }
}
