//! Octree chunking and the recursive stitching driver.
//!
//! Leaves are fixed at ingestion. An internal chunk consumes the frozen
//! graphs of its children, folds them into one residual graph, and runs the
//! chunk agglomerator again with its own boundary set. The root has no
//! artificial faces, so its boundary set is empty and nothing stays frozen.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rustc_hash::FxHashMap;
use serde::Serialize;

use crate::affinity::{FixedAffinity, LinkageKind};
use crate::agglomerate::agglomerate_chunk;
use crate::error::{Error, Result};
use crate::graph::{Dendrogram, RegionGraph, SegmentId};

/// Axis-aligned box of voxels, half-open: `lo <= p < hi` on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Box3 {
    pub lo: [u32; 3],
    pub hi: [u32; 3],
}

impl Box3 {
    pub fn new(lo: [u32; 3], hi: [u32; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(Error::Malformed(format!("empty box {lo:?}..{hi:?}")));
        }
        Ok(Box3 { lo, hi })
    }

    pub fn volume(&self) -> u64 {
        (0..3).map(|a| u64::from(self.hi[a] - self.lo[a])).product()
    }

    pub fn contains(&self, other: &Box3) -> bool {
        (0..3).all(|a| self.lo[a] <= other.lo[a] && other.hi[a] <= self.hi[a])
    }

    /// Positive-volume overlap.
    pub fn overlaps(&self, other: &Box3) -> bool {
        (0..3).all(|a| self.lo[a] < other.hi[a] && other.lo[a] < self.hi[a])
    }

    /// Overlap of the closed boxes (sharing a face, edge or corner counts).
    pub fn touches(&self, other: &Box3) -> bool {
        (0..3).all(|a| self.lo[a] <= other.hi[a] && other.lo[a] <= self.hi[a])
    }
}

impl fmt::Display for Box3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{},{},{})..[{},{},{})",
            self.lo[0], self.lo[1], self.lo[2], self.hi[0], self.hi[1], self.hi[2]
        )
    }
}

/// Octree node: `level` 0 is a leaf; `coords` index chunks at that level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ChunkAddress {
    pub level: u8,
    pub coords: [u32; 3],
}

impl ChunkAddress {
    pub fn new(level: u8, coords: [u32; 3]) -> Self {
        ChunkAddress { level, coords }
    }

    pub fn leaf(coords: [u32; 3]) -> Self {
        ChunkAddress { level: 0, coords }
    }

    pub fn parent(&self) -> ChunkAddress {
        ChunkAddress {
            level: self.level + 1,
            coords: self.coords.map(|c| c >> 1),
        }
    }

    /// `x_y_z` file stem.
    pub fn stem(&self) -> String {
        format!("{}_{}_{}", self.coords[0], self.coords[1], self.coords[2])
    }
}

impl fmt::Display for ChunkAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.level, self.stem())
    }
}

impl FromStr for ChunkAddress {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Malformed(format!("chunk address {s:?} is not L/x_y_z"));
        let (level, rest) = s.split_once('/').ok_or_else(bad)?;
        let level: u8 = level.parse().map_err(|_| bad())?;
        let parts: Vec<u32> = rest
            .split('_')
            .map(|p| p.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let coords: [u32; 3] = parts.try_into().map_err(|_| bad())?;
        Ok(ChunkAddress { level, coords })
    }
}

/// Spatial layout of the leaf grid and the octree above it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OctreeGeometry {
    pub dims: [u32; 3],
    pub leaf_dims: [u32; 3],
}

impl OctreeGeometry {
    pub fn new(dims: [u32; 3], leaf_dims: [u32; 3]) -> Result<Self> {
        if (0..3).any(|a| dims[a] == 0 || leaf_dims[a] == 0) {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        Ok(OctreeGeometry { dims, leaf_dims })
    }

    pub fn dataset_bounds(&self) -> Box3 {
        Box3 {
            lo: [0; 3],
            hi: self.dims,
        }
    }

    pub fn leaf_grid(&self) -> [u32; 3] {
        std::array::from_fn(|a| self.dims[a].div_ceil(self.leaf_dims[a]))
    }

    pub fn grid_at(&self, level: u8) -> [u32; 3] {
        let g = self.leaf_grid();
        std::array::from_fn(|a| g[a].div_ceil(1u32 << level))
    }

    pub fn root_level(&self) -> u8 {
        let max = *self.leaf_grid().iter().max().unwrap();
        let mut level = 0u8;
        while (1u32 << level) < max {
            level += 1;
        }
        level
    }

    pub fn root(&self) -> ChunkAddress {
        ChunkAddress::new(self.root_level(), [0; 3])
    }

    pub fn exists(&self, addr: &ChunkAddress) -> bool {
        let g = self.grid_at(addr.level);
        addr.level <= self.root_level() && (0..3).all(|a| addr.coords[a] < g[a])
    }

    pub fn bounds(&self, addr: &ChunkAddress) -> Box3 {
        let lo: [u32; 3] =
            std::array::from_fn(|a| (addr.coords[a] * self.leaf_dims[a]) << addr.level);
        let hi = std::array::from_fn(|a| (lo[a] + (self.leaf_dims[a] << addr.level)).min(self.dims[a]));
        Box3 { lo, hi }
    }

    pub fn descriptor(&self, addr: ChunkAddress) -> ChunkDescriptor {
        ChunkDescriptor {
            address: addr,
            bounds: self.bounds(&addr),
            dataset_bounds: self.dataset_bounds(),
        }
    }

    /// Existing children in address order; chunks outside the data are skipped.
    pub fn children(&self, addr: &ChunkAddress) -> Vec<ChunkAddress> {
        if addr.level == 0 {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(8);
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    let c = ChunkAddress::new(
                        addr.level - 1,
                        [
                            addr.coords[0] * 2 + dx,
                            addr.coords[1] * 2 + dy,
                            addr.coords[2] * 2 + dz,
                        ],
                    );
                    if self.exists(&c) {
                        out.push(c);
                    }
                }
            }
        }
        out
    }

    /// Leaf coordinates covered by `addr`, in address order.
    pub fn leaves_under(&self, addr: &ChunkAddress) -> Vec<[u32; 3]> {
        let g = self.leaf_grid();
        let span = 1u32 << addr.level;
        let mut out = Vec::new();
        for x in addr.coords[0] * span..((addr.coords[0] + 1) * span).min(g[0]) {
            for y in addr.coords[1] * span..((addr.coords[1] + 1) * span).min(g[1]) {
                for z in addr.coords[2] * span..((addr.coords[2] + 1) * span).min(g[2]) {
                    out.push([x, y, z]);
                }
            }
        }
        out
    }

    pub fn leaf_of_voxel(&self, p: [u32; 3]) -> [u32; 3] {
        std::array::from_fn(|a| p[a] / self.leaf_dims[a])
    }
}

/// One chunk with its bounds and the dataset bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkDescriptor {
    pub address: ChunkAddress,
    pub bounds: Box3,
    pub dataset_bounds: Box3,
}

/// Segments whose box touches a face of the chunk that is not a face of
/// the dataset. Returned sorted.
pub fn boundary_set<'a>(
    chunk: &ChunkDescriptor,
    extents: impl IntoIterator<Item = (SegmentId, &'a Box3)>,
) -> Result<Vec<SegmentId>> {
    let c = &chunk.bounds;
    let d = &chunk.dataset_bounds;
    let mut out = Vec::new();
    for (id, b) in extents {
        if !b.touches(c) {
            return Err(Error::format(
                chunk.address.to_string(),
                format!("segment {id} box {b} lies outside chunk {c}"),
            ));
        }
        let on_face = (0..3).any(|a| {
            let across = (0..3)
                .filter(|&o| o != a)
                .all(|o| b.lo[o] < c.hi[o] && c.lo[o] < b.hi[o]);
            if !across {
                return false;
            }
            let lo_face = c.lo[a] != d.lo[a] && b.lo[a] <= c.lo[a] && c.lo[a] <= b.hi[a];
            let hi_face = c.hi[a] != d.hi[a] && b.lo[a] <= c.hi[a] && c.hi[a] <= b.hi[a];
            lo_face || hi_face
        });
        if on_face {
            out.push(id);
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Folds `part` into `acc`: node sets are unioned and edges present in
/// both have their stats combined.
pub fn combine_edges(acc: &mut RegionGraph, part: &RegionGraph, kind: LinkageKind) {
    for n in part.nodes() {
        acc.add_node(n);
    }
    for (k, s) in part.edges() {
        acc.add_edge(k, s, kind);
    }
}

/// A region graph together with the box of every node.
///
/// Merged clusters carry the box of their surviving supervoxel. That is
/// enough for boundary tests: a cluster only forms from segments that were
/// clear of every artificial face of its chunk, so it stays clear of the
/// faces of every enclosing chunk.
#[derive(Debug, Clone, Default)]
pub struct ChunkGraph {
    pub graph: RegionGraph,
    pub extents: FxHashMap<SegmentId, Box3>,
}

impl ChunkGraph {
    pub fn absorb(&mut self, other: &ChunkGraph, kind: LinkageKind) -> Result<()> {
        for (id, b) in &other.extents {
            if let Some(prev) = self.extents.insert(*id, *b) {
                if prev != *b {
                    return Err(Error::Malformed(format!(
                        "segment {id} has two boxes: {prev} and {b}"
                    )));
                }
            }
        }
        combine_edges(&mut self.graph, &other.graph, kind);
        Ok(())
    }

    /// Checks that every node has a box.
    pub fn check_extents(&self) -> Result<()> {
        match self.graph.nodes().find(|n| !self.extents.contains_key(n)) {
            Some(n) => Err(Error::Malformed(format!("segment {n} has no box"))),
            None => Ok(()),
        }
    }
}

/// Where leaf inputs come from: a chunk store or an in-memory dataset.
pub trait LeafSource: Sync {
    fn geometry(&self) -> OctreeGeometry;
    /// Edge records stored for one leaf (split interfaces counted per leaf).
    fn leaf_edge_count(&self, leaf: [u32; 3]) -> Result<u64>;
    fn load_leaf(&self, leaf: [u32; 3], kind: LinkageKind) -> Result<ChunkGraph>;
}

/// Default edge budget below which a chunk is clustered without subdivision.
pub const DEFAULT_LEAF_THRESHOLD: u64 = 4_000_000;

/// Shape of the task tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PlanParams {
    /// Stitching levels above the task leaves; `None` uses the full octree.
    pub depth: Option<u8>,
    /// A chunk whose stored leaves hold at most this many edges is one task.
    pub leaf_threshold: u64,
}

impl Default for PlanParams {
    fn default() -> Self {
        PlanParams {
            depth: None,
            leaf_threshold: DEFAULT_LEAF_THRESHOLD,
        }
    }
}

/// Which octree nodes become tasks, and which of them are task leaves.
#[derive(Debug, Clone)]
pub struct TaskPlan {
    geometry: OctreeGeometry,
    params: PlanParams,
    leaf_tasks: rustc_hash::FxHashSet<ChunkAddress>,
    order: Vec<ChunkAddress>,
}

impl TaskPlan {
    pub fn new(source: &dyn LeafSource, params: PlanParams) -> Result<Self> {
        let geometry = source.geometry();
        let root_level = geometry.root_level();
        let floor = root_level - params.depth.unwrap_or(root_level).min(root_level);
        let mut leaf_edges = FxHashMap::default();
        for leaf in geometry.leaves_under(&geometry.root()) {
            leaf_edges.insert(leaf, source.leaf_edge_count(leaf)?);
        }
        let mut plan = TaskPlan {
            geometry,
            params,
            leaf_tasks: Default::default(),
            order: Vec::new(),
        };
        plan.visit(geometry.root(), floor, &leaf_edges);
        Ok(plan)
    }

    fn visit(&mut self, addr: ChunkAddress, floor: u8, leaf_edges: &FxHashMap<[u32; 3], u64>) {
        let edges: u64 = self
            .geometry
            .leaves_under(&addr)
            .iter()
            .map(|l| leaf_edges[l])
            .sum();
        if addr.level <= floor || edges <= self.params.leaf_threshold {
            self.leaf_tasks.insert(addr);
        } else {
            for child in self.geometry.children(&addr) {
                self.visit(child, floor, leaf_edges);
            }
        }
        self.order.push(addr);
    }

    pub fn geometry(&self) -> OctreeGeometry {
        self.geometry
    }

    pub fn params(&self) -> PlanParams {
        self.params
    }

    pub fn root(&self) -> ChunkAddress {
        self.geometry.root()
    }

    /// Every task, children before parents, siblings in address order.
    pub fn post_order(&self) -> &[ChunkAddress] {
        &self.order
    }

    pub fn is_leaf_task(&self, addr: &ChunkAddress) -> bool {
        self.leaf_tasks.contains(addr)
    }

    /// Child tasks of `addr` (empty for task leaves).
    pub fn children(&self, addr: &ChunkAddress) -> Vec<ChunkAddress> {
        if self.is_leaf_task(addr) {
            Vec::new()
        } else {
            self.geometry.children(addr)
        }
    }
}

/// Result of clustering one task's chunk.
#[derive(Debug, Clone)]
pub struct TaskOutput {
    pub dendrogram: Dendrogram,
    pub frozen: ChunkGraph,
    /// Edges in the graph the task clustered (leaf graph or residual graph).
    pub input_edges: u64,
}

/// Loads and combines the stored leaves under a task leaf, then clusters it.
pub fn run_leaf_task(
    plan: &TaskPlan,
    addr: ChunkAddress,
    source: &dyn LeafSource,
    kind: LinkageKind,
    threshold: FixedAffinity,
) -> Result<TaskOutput> {
    let mut input = ChunkGraph::default();
    for leaf in plan.geometry().leaves_under(&addr) {
        let part = source.load_leaf(leaf, kind)?;
        if input.graph.is_empty() {
            input = part;
        } else {
            input.absorb(&part, kind)?;
        }
    }
    cluster_chunk(plan.geometry().descriptor(addr), input, kind, threshold)
}

/// Folds children's frozen graphs into a residual graph and clusters it.
pub fn run_stitch_task<I>(
    plan: &TaskPlan,
    addr: ChunkAddress,
    children: I,
    kind: LinkageKind,
    threshold: FixedAffinity,
) -> Result<TaskOutput>
where
    I: IntoIterator<Item = ChunkGraph>,
{
    let mut residual = ChunkGraph::default();
    for part in children {
        residual.absorb(&part, kind)?;
    }
    cluster_chunk(plan.geometry().descriptor(addr), residual, kind, threshold)
}

fn cluster_chunk(
    desc: ChunkDescriptor,
    mut input: ChunkGraph,
    kind: LinkageKind,
    threshold: FixedAffinity,
) -> Result<TaskOutput> {
    input.check_extents()?;
    let boundary = boundary_set(
        &desc,
        input.graph.nodes().map(|n| (n, &input.extents[&n])),
    )?;
    let input_edges = input.graph.edge_count() as u64;
    input.graph.is_sparse();
    let outcome = agglomerate_chunk(&mut input.graph, &boundary, kind, threshold);
    let extents = outcome
        .frozen_graph
        .nodes()
        .map(|n| (n, input.extents[&n]))
        .collect();
    Ok(TaskOutput {
        dendrogram: outcome.dendrogram,
        frozen: ChunkGraph {
            graph: outcome.frozen_graph,
            extents,
        },
        input_edges,
    })
}

/// Dendrogram of a recursive run with the octree level of every row.
#[derive(Debug, Clone)]
pub struct RecursiveOutput {
    pub dendrogram: Dendrogram,
    pub levels: Vec<u8>,
    pub frozen: ChunkGraph,
    /// Largest clustered graph (edges) per level.
    pub peak_edges: BTreeMap<u8, u64>,
}

/// In-process recursive clustering of `addr` following `plan`.
///
/// Children's rows precede the parent's rows; siblings appear in address order.
pub fn agglomerate_recursive(
    plan: &TaskPlan,
    addr: ChunkAddress,
    source: &dyn LeafSource,
    kind: LinkageKind,
    threshold: FixedAffinity,
) -> Result<RecursiveOutput> {
    let mut out = RecursiveOutput {
        dendrogram: Dendrogram::new(kind, threshold),
        levels: Vec::new(),
        frozen: ChunkGraph::default(),
        peak_edges: BTreeMap::new(),
    };
    let task = if plan.is_leaf_task(&addr) {
        run_leaf_task(plan, addr, source, kind, threshold)?
    } else {
        let mut frozen = Vec::new();
        for child in plan.children(&addr) {
            let sub = agglomerate_recursive(plan, child, source, kind, threshold)?;
            out.dendrogram.rows.extend(sub.dendrogram.rows);
            out.levels.extend(sub.levels);
            for (l, e) in sub.peak_edges {
                let slot = out.peak_edges.entry(l).or_default();
                *slot = (*slot).max(e);
            }
            frozen.push(sub.frozen);
        }
        run_stitch_task(plan, addr, frozen, kind, threshold)?
    };
    out.levels
        .extend(std::iter::repeat(addr.level).take(task.dendrogram.len()));
    out.dendrogram.rows.extend(task.dendrogram.rows);
    let slot = out.peak_edges.entry(addr.level).or_default();
    *slot = (*slot).max(task.input_edges);
    out.frozen = task.frozen;
    Ok(out)
}

/// Every stored leaf folded into one graph, for a single-pass run.
pub fn load_global(source: &dyn LeafSource, kind: LinkageKind) -> Result<RegionGraph> {
    let geometry = source.geometry();
    let mut g = RegionGraph::new();
    for leaf in geometry.leaves_under(&geometry.root()) {
        let part = source.load_leaf(leaf, kind)?;
        if g.is_empty() {
            g = part.graph;
        } else {
            combine_edges(&mut g, &part.graph, kind);
        }
    }
    Ok(g)
}

/// Merge counts per octree level from per-row provenance.
pub fn merge_level_histogram(levels: &[u8]) -> BTreeMap<u8, u64> {
    let mut hist = BTreeMap::new();
    for &l in levels {
        *hist.entry(l).or_insert(0) += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::AffinityStat;
    use crate::graph::EdgeKey;

    fn id(v: u64) -> SegmentId {
        SegmentId::new(v).unwrap()
    }

    fn bx(lo: [u32; 3], hi: [u32; 3]) -> Box3 {
        Box3::new(lo, hi).unwrap()
    }

    #[test]
    fn address_parse_and_display() {
        let a: ChunkAddress = "2/1_0_3".parse().unwrap();
        assert_eq!(a, ChunkAddress::new(2, [1, 0, 3]));
        assert_eq!(a.to_string(), "2/1_0_3");
        assert_eq!(ChunkAddress::new(0, [5, 4, 3]).parent(), ChunkAddress::new(1, [2, 2, 1]));
        assert!("x/1_2_3".parse::<ChunkAddress>().is_err());
        assert!("1/1_2".parse::<ChunkAddress>().is_err());
    }

    #[test]
    fn geometry_of_non_cubic_grid() {
        let g = OctreeGeometry::new([48, 16, 16], [8, 8, 8]).unwrap();
        assert_eq!(g.leaf_grid(), [6, 2, 2]);
        assert_eq!(g.root_level(), 3);
        assert_eq!(g.grid_at(1), [3, 1, 1]);
        assert_eq!(g.grid_at(2), [2, 1, 1]);
        let kids = g.children(&ChunkAddress::new(2, [1, 0, 0]));
        assert_eq!(kids, vec![ChunkAddress::new(1, [2, 0, 0])]);
        assert_eq!(g.bounds(&ChunkAddress::new(2, [1, 0, 0])), bx([32, 0, 0], [48, 16, 16]));
        assert_eq!(g.leaves_under(&g.root()).len(), 24);
        // Children tile the parent.
        for level in 1..=3 {
            let grid = g.grid_at(level);
            for x in 0..grid[0] {
                let p = ChunkAddress::new(level, [x, 0, 0]);
                let vol: u64 = g.children(&p).iter().map(|c| g.bounds(c).volume()).sum();
                assert_eq!(vol, g.bounds(&p).volume());
            }
        }
    }

    #[test]
    fn boundary_examples() {
        let g = OctreeGeometry::new([16, 16, 16], [8, 8, 8]).unwrap();
        let root = g.descriptor(g.root());
        let boxes = [(id(1), bx([0, 0, 0], [16, 16, 16]))];
        assert!(boundary_set(&root, boxes.iter().map(|(i, b)| (*i, b))).unwrap().is_empty());

        let left = g.descriptor(ChunkAddress::leaf([0, 0, 0]));
        let right = g.descriptor(ChunkAddress::leaf([1, 0, 0]));
        let flush = bx([6, 2, 2], [8, 4, 4]);
        let inner = bx([2, 2, 2], [4, 4, 4]);
        let in_left = [(id(1), flush), (id(2), inner)];
        assert_eq!(
            boundary_set(&left, in_left.iter().map(|(i, b)| (*i, b))).unwrap(),
            vec![id(1)]
        );
        assert_eq!(
            boundary_set(&right, [(id(1), &flush)]).unwrap(),
            vec![id(1)]
        );
        // Touching the dataset face only is not a boundary.
        let on_dataset_face = bx([0, 2, 2], [2, 4, 4]);
        assert!(boundary_set(&left, [(id(3), &on_dataset_face)]).unwrap().is_empty());
        // A box that does not even touch the chunk is an input error.
        let far = bx([12, 12, 12], [14, 14, 14]);
        assert!(boundary_set(&left, [(id(4), &far)]).is_err());
    }

    #[test]
    fn combine_edges_examples() {
        let kind = LinkageKind::Mean;
        let key = EdgeKey::new(id(7), id(9)).unwrap();
        let mut a = RegionGraph::new();
        a.add_edge(key, AffinityStat::from_parts(kind, 1_000_000, 2).unwrap(), kind);
        let mut b = RegionGraph::new();
        b.add_edge(key, AffinityStat::from_parts(kind, 900_000, 1).unwrap(), kind);
        b.add_edge(EdgeKey::new(id(1), id(2)).unwrap(), AffinityStat::from_parts(kind, 5, 1).unwrap(), kind);

        let mut acc = RegionGraph::new();
        combine_edges(&mut acc, &a, kind);
        assert_eq!(acc.sorted_edges(), a.sorted_edges());
        combine_edges(&mut acc, &b, kind);
        let s = acc.stat(&key).unwrap();
        assert_eq!((s.sum(), s.count()), (1_900_000, 3));
        assert_eq!(acc.edge_count(), 2);
        assert_eq!(acc.node_count(), 4);
        acc.audit_consistency().unwrap();
    }

    #[test]
    fn histogram_counts_levels() {
        let h = merge_level_histogram(&[0, 0, 2, 1, 0]);
        assert_eq!(h.into_iter().collect::<Vec<_>>(), vec![(0, 3), (1, 1), (2, 1)]);
    }
}
