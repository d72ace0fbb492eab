//! Region adjacency graph with exact per-edge statistics.

use std::cmp::Ordering;
use std::fmt;

use rustc_hash::FxHashMap;

use crate::affinity::{AffinityStat, FixedAffinity, LinkageKind};
use crate::error::{Error, Result};

/// Globally unique supervoxel (or cluster) id. Zero is reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentId(u64);

impl SegmentId {
    pub fn new(id: u64) -> Result<Self> {
        if id == 0 {
            return Err(Error::Malformed("segment id 0 is reserved".into()));
        }
        Ok(SegmentId(id))
    }

    #[inline]
    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Unordered pair of distinct segments, stored as `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeKey {
    lo: SegmentId,
    hi: SegmentId,
}

impl EdgeKey {
    pub fn new(a: SegmentId, b: SegmentId) -> Result<Self> {
        match a.cmp(&b) {
            Ordering::Less => Ok(EdgeKey { lo: a, hi: b }),
            Ordering::Greater => Ok(EdgeKey { lo: b, hi: a }),
            Ordering::Equal => Err(Error::Malformed(format!("self-loop on segment {a}"))),
        }
    }

    /// Caller guarantees `a != b`.
    #[inline]
    pub(crate) fn of(a: SegmentId, b: SegmentId) -> Self {
        debug_assert_ne!(a, b);
        if a < b {
            EdgeKey { lo: a, hi: b }
        } else {
            EdgeKey { lo: b, hi: a }
        }
    }

    #[inline]
    pub fn lo(&self) -> SegmentId {
        self.lo
    }

    #[inline]
    pub fn hi(&self) -> SegmentId {
        self.hi
    }

    #[inline]
    pub fn other(&self, end: SegmentId) -> SegmentId {
        if end == self.lo {
            self.hi
        } else {
            self.lo
        }
    }

    #[inline]
    pub fn touches(&self, s: SegmentId) -> bool {
        self.lo == s || self.hi == s
    }
}

impl fmt::Display for EdgeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.lo, self.hi)
    }
}

/// Total order on edges used everywhere an edge must be chosen.
///
/// Higher value wins; exact value ties go to the larger key. Merging two
/// clusters re-keys their edges to the smaller of the two old keys, so this
/// tie-break never ranks a merged edge above both of its parents.
#[inline]
pub fn edge_rank(
    kind: LinkageKind,
    a: (&AffinityStat, &EdgeKey),
    b: (&AffinityStat, &EdgeKey),
) -> Ordering {
    a.0.compare(kind, b.0).then_with(|| a.1.cmp(b.1))
}

/// What one call to [`RegionGraph::merge_nodes`] changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeOutcome {
    pub survivor: SegmentId,
    pub absorbed: SegmentId,
    /// Stat of the edge that was contracted.
    pub stat: AffinityStat,
    /// Keys that no longer exist (all edges of the absorbed node).
    pub removed: Vec<EdgeKey>,
    /// Survivor edges whose stat changed or that were created by re-keying.
    pub updated: Vec<EdgeKey>,
}

/// Sparse graph of segments with one [`AffinityStat`] per edge.
#[derive(Debug, Clone, Default)]
pub struct RegionGraph {
    edges: FxHashMap<EdgeKey, AffinityStat>,
    adjacency: FxHashMap<SegmentId, Vec<SegmentId>>,
}

impl RegionGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize, edges: usize) -> Self {
        RegionGraph {
            edges: FxHashMap::with_capacity_and_hasher(edges, Default::default()),
            adjacency: FxHashMap::with_capacity_and_hasher(nodes, Default::default()),
        }
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn contains_node(&self, s: SegmentId) -> bool {
        self.adjacency.contains_key(&s)
    }

    pub fn nodes(&self) -> impl Iterator<Item = SegmentId> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (EdgeKey, AffinityStat)> + '_ {
        self.edges.iter().map(|(k, s)| (*k, *s))
    }

    pub fn sorted_nodes(&self) -> Vec<SegmentId> {
        let mut v: Vec<_> = self.nodes().collect();
        v.sort_unstable();
        v
    }

    pub fn sorted_edges(&self) -> Vec<(EdgeKey, AffinityStat)> {
        let mut v: Vec<_> = self.edges().collect();
        v.sort_unstable_by_key(|(k, _)| *k);
        v
    }

    pub fn stat(&self, key: &EdgeKey) -> Option<AffinityStat> {
        self.edges.get(key).copied()
    }

    pub fn neighbors(&self, s: SegmentId) -> &[SegmentId] {
        self.adjacency.get(&s).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn add_node(&mut self, s: SegmentId) {
        self.adjacency.entry(s).or_default();
    }

    /// Inserts an edge, combining with the existing stat on a duplicate key.
    pub fn add_edge(&mut self, key: EdgeKey, stat: AffinityStat, kind: LinkageKind) {
        use std::collections::hash_map::Entry;
        match self.edges.entry(key) {
            Entry::Occupied(mut e) => {
                let merged = e.get().combine(kind, stat);
                *e.get_mut() = merged;
            }
            Entry::Vacant(e) => {
                e.insert(stat);
                self.adjacency.entry(key.lo).or_default().push(key.hi);
                self.adjacency.entry(key.hi).or_default().push(key.lo);
            }
        }
    }

    /// Removes an edge, leaving both endpoints in the node set.
    pub fn remove_edge(&mut self, key: &EdgeKey) -> Option<AffinityStat> {
        let stat = self.edges.remove(key)?;
        detach(&mut self.adjacency, key.lo, key.hi);
        detach(&mut self.adjacency, key.hi, key.lo);
        Some(stat)
    }

    /// Contracts edge `(u, v)` into the smaller id.
    ///
    /// Every edge `(absorbed, w)` is either combined into an existing
    /// `(survivor, w)` or re-keyed to it; the contracted edge disappears.
    ///
    /// # Panics
    /// If `(u, v)` is not an edge of the graph.
    pub fn merge_nodes(&mut self, u: SegmentId, v: SegmentId, kind: LinkageKind) -> MergeOutcome {
        let key = EdgeKey::of(u, v);
        let stat = self
            .edges
            .remove(&key)
            .unwrap_or_else(|| panic!("merge_nodes: no edge {key}"));
        let survivor = key.lo;
        let absorbed = key.hi;

        let absorbed_adj = self.adjacency.remove(&absorbed).unwrap_or_default();
        detach(&mut self.adjacency, survivor, absorbed);

        let mut removed = Vec::with_capacity(absorbed_adj.len());
        let mut updated = Vec::with_capacity(absorbed_adj.len());
        removed.push(key);
        for w in absorbed_adj {
            if w == survivor {
                continue;
            }
            let old = EdgeKey::of(absorbed, w);
            let s = self
                .edges
                .remove(&old)
                .expect("adjacency lists an edge missing from the edge map");
            removed.push(old);
            detach(&mut self.adjacency, w, absorbed);
            let new = EdgeKey::of(survivor, w);
            match self.edges.get_mut(&new) {
                Some(existing) => *existing = existing.combine(kind, s),
                None => {
                    self.edges.insert(new, s);
                    self.adjacency.entry(survivor).or_default().push(w);
                    self.adjacency.entry(w).or_default().push(survivor);
                }
            }
            updated.push(new);
        }
        MergeOutcome {
            survivor,
            absorbed,
            stat,
            removed,
            updated,
        }
    }

    /// Neighbor with the strongest interface; ties go to the smaller id.
    ///
    /// # Panics
    /// If `u` is not a node of the graph.
    pub fn nearest_neighbor(&self, u: SegmentId, kind: LinkageKind) -> Option<SegmentId> {
        let adj = self
            .adjacency
            .get(&u)
            .unwrap_or_else(|| panic!("nearest_neighbor: {u} not in graph"));
        let mut best: Option<(SegmentId, AffinityStat)> = None;
        for &w in adj {
            let s = self.edges[&EdgeKey::of(u, w)];
            best = match best {
                None => Some((w, s)),
                Some((bw, bs)) => match s.compare(kind, &bs) {
                    Ordering::Greater => Some((w, s)),
                    Ordering::Equal if w < bw => Some((w, s)),
                    _ => Some((bw, bs)),
                },
            };
        }
        best.map(|(w, _)| w)
    }

    pub fn is_mutual_nearest_pair(&self, u: SegmentId, v: SegmentId, kind: LinkageKind) -> bool {
        self.nearest_neighbor(u, kind) == Some(v) && self.nearest_neighbor(v, kind) == Some(u)
    }

    /// Checks that the adjacency lists and the edge map describe one edge set.
    pub fn audit_consistency(&self) -> std::result::Result<(), String> {
        let mut half_edges = 0usize;
        for (&u, adj) in &self.adjacency {
            let mut seen = adj.clone();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(format!("duplicate neighbor in adjacency of {u}"));
            }
            for &w in adj {
                if w == u {
                    return Err(format!("self-loop at {u}"));
                }
                if !self.edges.contains_key(&EdgeKey::of(u, w)) {
                    return Err(format!("adjacency {u}->{w} without edge"));
                }
            }
            half_edges += adj.len();
        }
        if half_edges != 2 * self.edges.len() {
            return Err(format!(
                "{} adjacency entries for {} edges",
                half_edges,
                self.edges.len()
            ));
        }
        for k in self.edges.keys() {
            if !self.adjacency.contains_key(&k.lo) || !self.adjacency.contains_key(&k.hi) {
                return Err(format!("edge {k} has an endpoint outside the node set"));
            }
        }
        Ok(())
    }

    /// Soft check of the `|E| <= 10 |V|` sparsity expectation.
    pub fn is_sparse(&self) -> bool {
        let sparse = self.edges.len() <= 10 * self.adjacency.len().max(1);
        if !sparse {
            log::warn!(
                "region graph denser than expected: {} edges for {} nodes",
                self.edges.len(),
                self.adjacency.len()
            );
        }
        sparse
    }
}

fn detach(adjacency: &mut FxHashMap<SegmentId, Vec<SegmentId>>, at: SegmentId, gone: SegmentId) {
    if let Some(list) = adjacency.get_mut(&at) {
        if let Some(pos) = list.iter().position(|&x| x == gone) {
            list.swap_remove(pos);
        }
    }
}

/// One agglomeration step: `absorbed` joined `survivor` at `stat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MergeRow {
    pub survivor: SegmentId,
    pub absorbed: SegmentId,
    pub stat: AffinityStat,
}

impl MergeRow {
    /// Canonical sort key for multiset comparisons.
    pub fn sort_key(&self) -> (u64, u64, u128, u64) {
        (
            self.survivor.get(),
            self.absorbed.get(),
            self.stat.sum(),
            self.stat.count(),
        )
    }
}

/// Ordered merge records produced by one run at one threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dendrogram {
    pub kind: LinkageKind,
    pub threshold: FixedAffinity,
    pub rows: Vec<MergeRow>,
}

impl Dendrogram {
    pub fn new(kind: LinkageKind, threshold: FixedAffinity) -> Self {
        Dendrogram {
            kind,
            threshold,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows sorted by `(survivor, absorbed, sum, count)`.
    pub fn sorted_rows(&self) -> Vec<MergeRow> {
        let mut rows = self.rows.clone();
        rows.sort_unstable_by_key(MergeRow::sort_key);
        rows
    }

    /// Checks the row invariants: absorbed ids are never reused and every
    /// row reaches the threshold.
    pub fn audit(&self) -> std::result::Result<(), String> {
        let mut gone = rustc_hash::FxHashSet::default();
        for (i, r) in self.rows.iter().enumerate() {
            if gone.contains(&r.survivor) || gone.contains(&r.absorbed) {
                return Err(format!("row {i} reuses an absorbed id"));
            }
            if r.survivor >= r.absorbed {
                return Err(format!("row {i}: survivor is not the smaller id"));
            }
            if !r.stat.reaches(self.kind, self.threshold) {
                return Err(format!("row {i} is below the threshold"));
            }
            gone.insert(r.absorbed);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use LinkageKind::{Max, Mean};

    fn id(v: u64) -> SegmentId {
        SegmentId::new(v).unwrap()
    }

    fn key(a: u64, b: u64) -> EdgeKey {
        EdgeKey::new(id(a), id(b)).unwrap()
    }

    fn st(kind: LinkageKind, a: u32, n: u64) -> AffinityStat {
        AffinityStat::new(kind, FixedAffinity::new(a).unwrap(), n).unwrap()
    }

    fn graph(kind: LinkageKind, edges: &[(u64, u64, u32)]) -> RegionGraph {
        let mut g = RegionGraph::new();
        for &(a, b, v) in edges {
            g.add_edge(key(a, b), st(kind, v, 1), kind);
        }
        g
    }

    #[test]
    fn segment_zero_and_self_loops_rejected() {
        assert!(SegmentId::new(0).is_err());
        assert!(EdgeKey::new(id(3), id(3)).is_err());
    }

    #[test]
    fn add_edge_examples() {
        let mut g = RegionGraph::new();
        g.add_edge(key(1, 2), st(Mean, 500_000, 1), Mean);
        assert_eq!((g.node_count(), g.edge_count()), (2, 1));
        g.add_edge(key(1, 2), st(Mean, 500_000, 1), Mean);
        let s = g.stat(&key(1, 2)).unwrap();
        assert_eq!((s.sum(), s.count()), (1_000_000, 2));
        assert_eq!(key(2, 1), key(1, 2));
        assert_eq!(key(2, 1).lo(), id(1));
        g.audit_consistency().unwrap();
    }

    #[test]
    fn merge_path_rekeys() {
        let mut g = graph(Mean, &[(1, 2, 400_000), (2, 3, 700_000)]);
        let out = g.merge_nodes(id(1), id(2), Mean);
        assert_eq!(out.survivor, id(1));
        assert_eq!(g.sorted_nodes(), vec![id(1), id(3)]);
        assert_eq!(g.sorted_edges(), vec![(key(1, 3), st(Mean, 700_000, 1))]);
        g.audit_consistency().unwrap();
    }

    #[test]
    fn merge_triangle_mean_and_max() {
        let tri = [(1, 2, 900_000), (2, 3, 600_000), (1, 3, 200_000)];
        let mut g = graph(Mean, &tri);
        g.merge_nodes(id(1), id(2), Mean);
        let s = g.stat(&key(1, 3)).unwrap();
        assert_eq!((s.sum(), s.count()), (800_000, 2));
        assert_eq!(s.value_rounded(Mean).get(), 400_000);
        assert_eq!(g.edge_count(), 1);

        let mut g = graph(Max, &tri);
        g.merge_nodes(id(2), id(1), Max);
        let s = g.stat(&key(1, 3)).unwrap();
        assert_eq!((s.sum(), s.count()), (600_000, 2));
        g.audit_consistency().unwrap();
    }

    #[test]
    #[should_panic(expected = "no edge")]
    fn merge_without_edge_panics() {
        let mut g = graph(Mean, &[(1, 2, 1)]);
        g.add_node(id(5));
        g.merge_nodes(id(1), id(5), Mean);
    }

    #[test]
    fn nearest_neighbor_examples() {
        let g = graph(Mean, &[(1, 2, 900_000), (1, 3, 400_000)]);
        assert_eq!(g.nearest_neighbor(id(1), Mean), Some(id(2)));
        let g = graph(Mean, &[(1, 3, 500_000), (1, 2, 500_000)]);
        assert_eq!(g.nearest_neighbor(id(1), Mean), Some(id(2)));
        let mut g = RegionGraph::new();
        g.add_node(id(9));
        assert_eq!(g.nearest_neighbor(id(9), Mean), None);
    }

    #[test]
    fn mutual_nearest_examples() {
        let g = graph(Mean, &[(1, 2, 900_000), (2, 3, 950_000)]);
        assert!(!g.is_mutual_nearest_pair(id(1), id(2), Mean));
        assert!(g.is_mutual_nearest_pair(id(2), id(3), Mean));
        let g = graph(Mean, &[(4, 7, 10)]);
        assert!(g.is_mutual_nearest_pair(id(4), id(7), Mean));
    }

    #[test]
    fn chain_of_figure_style_has_two_mutual_pairs() {
        // A chain A -> B -> C -> D <-> A style: nodes 1..=8 with the pair
        // (7,8) pointing at each other at the far end of a chain.
        let g = graph(
            Mean,
            &[
                (1, 2, 300_000),
                (2, 3, 450_000),
                (3, 4, 500_000),
                (1, 4, 600_000),
                (4, 5, 200_000),
                (5, 6, 550_000),
                (6, 7, 700_000),
                (7, 8, 800_000),
            ],
        );
        let mutual: Vec<_> = g
            .sorted_edges()
            .into_iter()
            .filter(|(k, _)| g.is_mutual_nearest_pair(k.lo(), k.hi(), Mean))
            .map(|(k, _)| k)
            .collect();
        assert_eq!(mutual, vec![key(1, 4), key(7, 8)]);
    }

    #[test]
    fn edge_rank_prefers_value_then_larger_key() {
        let a = st(Mean, 5, 1);
        assert_eq!(
            edge_rank(Mean, (&a, &key(1, 3)), (&a, &key(1, 2))),
            Ordering::Greater
        );
        let b = st(Mean, 6, 1);
        assert_eq!(
            edge_rank(Mean, (&a, &key(5, 9)), (&b, &key(1, 2))),
            Ordering::Less
        );
    }

    #[test]
    fn dendrogram_audit_catches_reuse() {
        let mut d = Dendrogram::new(Mean, FixedAffinity::ZERO);
        d.rows.push(MergeRow {
            survivor: id(1),
            absorbed: id(2),
            stat: st(Mean, 5, 1),
        });
        d.audit().unwrap();
        d.rows.push(MergeRow {
            survivor: id(2),
            absorbed: id(3),
            stat: st(Mean, 5, 1),
        });
        assert!(d.audit().is_err());
    }
}
