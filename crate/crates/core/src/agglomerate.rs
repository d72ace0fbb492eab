//! Heap-driven agglomeration.
//!
//! [`agglomerate_generic`] repeatedly contracts the strongest edge until it
//! falls below the threshold. [`agglomerate_chunk`] runs the same loop on a
//! piece of a larger graph: any edge touching a frozen segment is set aside
//! in a frozen graph (and freezes its other endpoint) instead of being
//! merged, because its outcome may depend on edges outside the chunk. The
//! freeze test runs before the threshold test, and sub-threshold edges are
//! skipped rather than ending the loop, so every edge is popped exactly once.

use std::cmp::Ordering;

use rustc_hash::{FxHashMap, FxHashSet};

use crate::affinity::{AffinityStat, FixedAffinity, LinkageKind};
use crate::graph::{edge_rank, Dendrogram, EdgeKey, MergeOutcome, MergeRow, RegionGraph, SegmentId};

#[derive(Debug, Clone, Copy)]
struct QueueEntry {
    stat: AffinityStat,
    key: EdgeKey,
    stamp: u64,
}

/// Max-queue of edges with lazy deletion.
///
/// Each live edge owns exactly one live entry, identified by a stamp.
/// Updating or removing an edge only changes the stamp table; superseded
/// entries stay in the heap and are dropped when they surface.
#[derive(Debug)]
pub struct MaxAffinityQueue {
    kind: LinkageKind,
    heap: Vec<QueueEntry>,
    live: FxHashMap<EdgeKey, u64>,
    next_stamp: u64,
}

impl MaxAffinityQueue {
    pub fn new(kind: LinkageKind) -> Self {
        MaxAffinityQueue {
            kind,
            heap: Vec::new(),
            live: FxHashMap::default(),
            next_stamp: 0,
        }
    }

    /// Builds a queue holding every edge of `g`, heapified in linear time.
    pub fn from_graph(g: &RegionGraph, kind: LinkageKind) -> Self {
        let mut q = MaxAffinityQueue {
            kind,
            heap: Vec::with_capacity(g.edge_count()),
            live: FxHashMap::with_capacity_and_hasher(g.edge_count(), Default::default()),
            next_stamp: 0,
        };
        for (key, stat) in g.edges() {
            let stamp = q.next_stamp;
            q.next_stamp += 1;
            q.live.insert(key, stamp);
            q.heap.push(QueueEntry { stat, key, stamp });
        }
        for i in (0..q.heap.len() / 2).rev() {
            q.sift_down(i);
        }
        q
    }

    /// Number of live edges.
    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    /// Number of heap slots including superseded entries.
    pub fn heap_len(&self) -> usize {
        self.heap.len()
    }

    /// Inserts or replaces the entry for `key`.
    pub fn push(&mut self, key: EdgeKey, stat: AffinityStat) {
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        self.live.insert(key, stamp);
        self.heap.push(QueueEntry { stat, key, stamp });
        self.sift_up(self.heap.len() - 1);
    }

    /// Drops `key` from the queue if present.
    pub fn remove(&mut self, key: &EdgeKey) {
        self.live.remove(key);
    }

    /// Pops the strongest live edge.
    pub fn pop(&mut self) -> Option<(EdgeKey, AffinityStat)> {
        while let Some(top) = self.pop_raw() {
            if self.live.get(&top.key) == Some(&top.stamp) {
                self.live.remove(&top.key);
                return Some((top.key, top.stat));
            }
        }
        None
    }

    fn pop_raw(&mut self) -> Option<QueueEntry> {
        let last = self.heap.pop()?;
        if self.heap.is_empty() {
            return Some(last);
        }
        let top = std::mem::replace(&mut self.heap[0], last);
        self.sift_down(0);
        Some(top)
    }

    #[inline]
    fn above(&self, a: usize, b: usize) -> bool {
        let (x, y) = (&self.heap[a], &self.heap[b]);
        edge_rank(self.kind, (&x.stat, &x.key), (&y.stat, &y.key)) == Ordering::Greater
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let parent = (i - 1) / 2;
            if !self.above(i, parent) {
                break;
            }
            self.heap.swap(i, parent);
            i = parent;
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        let n = self.heap.len();
        loop {
            let l = 2 * i + 1;
            if l >= n {
                break;
            }
            let r = l + 1;
            let child = if r < n && self.above(r, l) { r } else { l };
            if !self.above(child, i) {
                break;
            }
            self.heap.swap(i, child);
            i = child;
        }
    }

    fn apply(&mut self, g: &RegionGraph, change: &MergeOutcome) {
        for k in &change.removed {
            self.live.remove(k);
        }
        for k in &change.updated {
            let stat = g.stat(k).expect("updated edge present");
            self.push(*k, stat);
        }
    }
}

/// Decision taken for one popped edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopAction {
    /// Edge contracted; `survivor` keeps its id.
    Merge {
        survivor: SegmentId,
        absorbed: SegmentId,
    },
    /// An endpoint was frozen; the edge goes to the frozen graph.
    Freeze,
    /// Below threshold with both endpoints free; dropped.
    Discard,
    /// Below threshold in the generic loop; the run ends here.
    Stop,
}

/// Hook called for every live pop, before the action is applied.
///
/// `graph` still contains the popped edge. The no-op `()` observer compiles
/// away; audit observers are used by the test suites.
pub trait PopObserver {
    fn on_pop(
        &mut self,
        graph: &RegionGraph,
        frozen: &FxHashSet<SegmentId>,
        key: EdgeKey,
        stat: AffinityStat,
        action: PopAction,
    );
}

impl PopObserver for () {
    #[inline(always)]
    fn on_pop(
        &mut self,
        _: &RegionGraph,
        _: &FxHashSet<SegmentId>,
        _: EdgeKey,
        _: AffinityStat,
        _: PopAction,
    ) {
    }
}

impl<F> PopObserver for F
where
    F: FnMut(&RegionGraph, &FxHashSet<SegmentId>, EdgeKey, AffinityStat, PopAction),
{
    fn on_pop(
        &mut self,
        graph: &RegionGraph,
        frozen: &FxHashSet<SegmentId>,
        key: EdgeKey,
        stat: AffinityStat,
        action: PopAction,
    ) {
        self(graph, frozen, key, stat, action)
    }
}

/// Clusters `g` in place until the strongest edge drops below `threshold`.
///
/// On return `g` is the residual graph (the stopping edge is left in it).
pub fn agglomerate_generic(
    g: &mut RegionGraph,
    kind: LinkageKind,
    threshold: FixedAffinity,
) -> Dendrogram {
    agglomerate_generic_observed(g, kind, threshold, &mut ())
}

pub fn agglomerate_generic_observed<O: PopObserver + ?Sized>(
    g: &mut RegionGraph,
    kind: LinkageKind,
    threshold: FixedAffinity,
    observer: &mut O,
) -> Dendrogram {
    let mut queue = MaxAffinityQueue::from_graph(g, kind);
    let mut dendrogram = Dendrogram::new(kind, threshold);
    let no_frozen = FxHashSet::default();
    while let Some((key, stat)) = queue.pop() {
        if !stat.reaches(kind, threshold) {
            observer.on_pop(g, &no_frozen, key, stat, PopAction::Stop);
            break;
        }
        observer.on_pop(
            g,
            &no_frozen,
            key,
            stat,
            PopAction::Merge {
                survivor: key.lo(),
                absorbed: key.hi(),
            },
        );
        let change = g.merge_nodes(key.lo(), key.hi(), kind);
        queue.apply(g, &change);
        dendrogram.rows.push(MergeRow {
            survivor: change.survivor,
            absorbed: change.absorbed,
            stat,
        });
    }
    dendrogram
}

/// Output of one chunk agglomeration.
#[derive(Debug, Clone)]
pub struct ChunkOutcome {
    /// Merges that were safe to perform inside the chunk.
    pub dendrogram: Dendrogram,
    /// Frozen edges keyed by current cluster ids, with current stats.
    pub frozen_graph: RegionGraph,
    /// Final frozen set (initial boundary plus everything frozen on the way).
    pub frozen: FxHashSet<SegmentId>,
}

/// Clusters one chunk whose `boundary` segments may have edges elsewhere.
///
/// Popped edges leave the working graph; on return `g` holds only edges
/// that were never reached (none, since the queue drains) and the nodes.
pub fn agglomerate_chunk(
    g: &mut RegionGraph,
    boundary: &[SegmentId],
    kind: LinkageKind,
    threshold: FixedAffinity,
) -> ChunkOutcome {
    agglomerate_chunk_observed(g, boundary, kind, threshold, &mut ())
}

pub fn agglomerate_chunk_observed<O: PopObserver + ?Sized>(
    g: &mut RegionGraph,
    boundary: &[SegmentId],
    kind: LinkageKind,
    threshold: FixedAffinity,
    observer: &mut O,
) -> ChunkOutcome {
    let mut queue = MaxAffinityQueue::from_graph(g, kind);
    let mut dendrogram = Dendrogram::new(kind, threshold);
    let mut frozen: FxHashSet<SegmentId> = boundary.iter().copied().collect();
    let mut frozen_graph = RegionGraph::new();
    for &b in boundary {
        debug_assert!(g.contains_node(b), "boundary segment {b} not in chunk graph");
    }

    while let Some((key, stat)) = queue.pop() {
        let (u, v) = (key.lo(), key.hi());
        if frozen.contains(&u) || frozen.contains(&v) {
            observer.on_pop(g, &frozen, key, stat, PopAction::Freeze);
            frozen.insert(u);
            frozen.insert(v);
            g.remove_edge(&key);
            frozen_graph.add_edge(key, stat, kind);
            continue;
        }
        if !stat.reaches(kind, threshold) {
            observer.on_pop(g, &frozen, key, stat, PopAction::Discard);
            g.remove_edge(&key);
            continue;
        }
        observer.on_pop(
            g,
            &frozen,
            key,
            stat,
            PopAction::Merge {
                survivor: u,
                absorbed: v,
            },
        );
        let change = g.merge_nodes(u, v, kind);
        queue.apply(g, &change);
        dendrogram.rows.push(MergeRow {
            survivor: change.survivor,
            absorbed: change.absorbed,
            stat,
        });
    }

    ChunkOutcome {
        dendrogram,
        frozen_graph,
        frozen,
    }
}

/// Pop-by-pop record of a chunk run, for soundness audits.
#[derive(Debug, Clone, Default)]
pub struct RunTrace {
    pub initial_frozen: Vec<SegmentId>,
    pub events: Vec<(EdgeKey, AffinityStat, PopAction)>,
    pub final_frozen: Vec<SegmentId>,
}

impl RunTrace {
    /// Runs [`agglomerate_chunk`] while recording every pop.
    pub fn record(
        g: &mut RegionGraph,
        boundary: &[SegmentId],
        kind: LinkageKind,
        threshold: FixedAffinity,
    ) -> (ChunkOutcome, RunTrace) {
        let mut events = Vec::new();
        let mut rec = |_: &RegionGraph,
                       _: &FxHashSet<SegmentId>,
                       key: EdgeKey,
                       stat: AffinityStat,
                       action: PopAction| events.push((key, stat, action));
        let outcome = agglomerate_chunk_observed(g, boundary, kind, threshold, &mut rec);
        let mut final_frozen: Vec<_> = outcome.frozen.iter().copied().collect();
        final_frozen.sort_unstable();
        let mut initial_frozen = boundary.to_vec();
        initial_frozen.sort_unstable();
        initial_frozen.dedup();
        let trace = RunTrace {
            initial_frozen,
            events,
            final_frozen,
        };
        (outcome, trace)
    }
}

/// True iff every finally frozen segment is an initial boundary segment or
/// is linked to one through a chain of frozen edges, and no frozen segment
/// took part in a merge after it was frozen.
pub fn audit_frozen_reachability(trace: &RunTrace) -> bool {
    let mut reached: FxHashSet<SegmentId> = trace.initial_frozen.iter().copied().collect();
    for (key, _, action) in &trace.events {
        match action {
            PopAction::Freeze => {
                if !reached.contains(&key.lo()) && !reached.contains(&key.hi()) {
                    return false;
                }
                reached.insert(key.lo());
                reached.insert(key.hi());
            }
            PopAction::Merge { survivor, absorbed } => {
                if reached.contains(survivor) || reached.contains(absorbed) {
                    return false;
                }
            }
            PopAction::Discard | PopAction::Stop => {}
        }
    }
    let mut reached: Vec<_> = reached.into_iter().collect();
    reached.sort_unstable();
    reached == trace.final_frozen
}
