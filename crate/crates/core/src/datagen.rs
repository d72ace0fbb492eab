//! Synthetic pre-chunked datasets with planted objects.
//!
//! Supervoxels are boxes tiling a voxel lattice. Every pair of face-adjacent
//! voxels with different labels contributes one affinity sample to the
//! interface of their two boxes; the sample is stored in the leaf holding
//! the lower-coordinate voxel. Intra-object samples come from a high value
//! window and inter-object samples from a low one.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::{FxHashMap, FxHashSet};
use serde::Serialize;

use crate::affinity::{FixedAffinity, LinkageKind};
use crate::error::{Error, Result};
use crate::format::{DatasetMeta, LeafChunk, LeafEdge};
use crate::graph::{EdgeKey, SegmentId};
use crate::octree::{boundary_set, Box3, ChunkAddress, ChunkGraph, LeafSource, OctreeGeometry};
use crate::store::ChunkStore;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BoxLayout {
    /// Identical boxes; `size` must divide the lattice.
    Uniform { size: [u32; 3] },
    /// Random cut planes shared by the whole lattice.
    Grid { cells: [u32; 3] },
    /// Random x cuts, then independent y cuts per slab and z cuts per column.
    Bricks { cells: [u32; 3] },
    /// Given boxes, which must tile the lattice exactly.
    Explicit(Vec<Box3>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectModel {
    /// Objects grown breadth-first from random seed boxes.
    Grown { objects: u32 },
    /// Per leaf one object of boxes clear of artificial leaf faces, plus
    /// seam objects straddling each artificial face. Boxes must not cross
    /// leaf boundaries.
    LeafAligned,
    /// Every box is its own object.
    Singletons,
}

/// Half-open range of fixed-point affinities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffinityWindow {
    pub lo: FixedAffinity,
    pub hi: FixedAffinity,
}

impl AffinityWindow {
    pub fn new(lo: FixedAffinity, hi: FixedAffinity) -> Result<Self> {
        if lo >= hi {
            return Err(Error::Config(format!("empty affinity window [{lo}, {hi})")));
        }
        Ok(AffinityWindow { lo, hi })
    }

    fn width(&self) -> u32 {
        self.hi.get() - self.lo.get()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffinityModel {
    pub intra: AffinityWindow,
    pub inter: AffinityWindow,
    /// Probability that a sample is drawn from the other object class.
    pub noise: f64,
}

impl AffinityModel {
    /// Windows in millionths.
    pub fn windows(intra: (u32, u32), inter: (u32, u32), noise: f64) -> Result<Self> {
        let w = |(lo, hi): (u32, u32)| AffinityWindow::new(FixedAffinity::new(lo)?, FixedAffinity::new(hi)?);
        Ok(AffinityModel {
            intra: w(intra)?,
            inter: w(inter)?,
            noise,
        })
    }
}

impl Default for AffinityModel {
    fn default() -> Self {
        AffinityModel::windows((250_000, 1_000_000), (0, 250_000), 0.05).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub dims: [u32; 3],
    pub leaf_dims: [u32; 3],
    pub layout: BoxLayout,
    pub objects: ObjectModel,
    pub affinity: AffinityModel,
    pub seed: u64,
    /// Also keep every interface's whole-dataset statistics.
    pub record_interfaces: bool,
}

impl SyntheticSpec {
    pub fn new(dims: [u32; 3], leaf_dims: [u32; 3], layout: BoxLayout, seed: u64) -> Self {
        SyntheticSpec {
            dims,
            leaf_dims,
            layout,
            objects: ObjectModel::Grown { objects: 32 },
            affinity: AffinityModel::default(),
            seed,
            record_interfaces: false,
        }
    }

    fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.dims[a] == 0 || self.leaf_dims[a] == 0 {
                return Err(Error::Config("dimensions must be positive".into()));
            }
            if self.dims[a] % self.leaf_dims[a] != 0 {
                return Err(Error::Config(format!(
                    "leaf dims {:?} do not divide dataset dims {:?}",
                    self.leaf_dims, self.dims
                )));
            }
        }
        let m = &self.affinity;
        if !(0.0..=1.0).contains(&m.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1]", m.noise)));
        }
        if m.intra.lo < m.inter.hi && m.inter.lo < m.intra.hi {
            return Err(Error::Config("intra and inter affinity windows overlap".into()));
        }
        let voxels = self.dims.iter().map(|&d| d as u64).product::<u64>();
        if voxels >= u32::MAX as u64 {
            return Err(Error::Config("lattice too large".into()));
        }
        Ok(())
    }
}

/// Whole-dataset statistics of one interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterfaceRecord {
    pub key: EdgeKey,
    pub sum: u128,
    pub count: u64,
    pub max: FixedAffinity,
}

/// A generated dataset held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub meta: DatasetMeta,
    /// Leaves in octree order.
    pub leaves: Vec<LeafChunk>,
    /// Box of segment `i + 1` at index `i`.
    pub boxes: Vec<Box3>,
    /// (segment, planted object), sorted by segment.
    pub truth: Vec<(u64, u64)>,
    /// Sorted by key; empty unless requested.
    pub interfaces: Vec<InterfaceRecord>,
    leaf_index: FxHashMap<[u32; 3], usize>,
}

impl SyntheticDataset {
    pub fn leaf(&self, coords: [u32; 3]) -> Option<&LeafChunk> {
        self.leaf_index.get(&coords).map(|&i| &self.leaves[i])
    }

    pub fn segment_ids(&self) -> impl Iterator<Item = u64> {
        1..=self.boxes.len() as u64
    }

    /// Writes metadata, leaves, and ground truth.
    pub fn write_to(&self, store: &mut ChunkStore) -> Result<()> {
        for leaf in &self.leaves {
            store.put_leaf(leaf)?;
        }
        store.put_truth(&self.truth)?;
        store.put_meta(&self.meta)
    }
}

impl LeafSource for SyntheticDataset {
    fn geometry(&self) -> OctreeGeometry {
        self.meta.geometry
    }

    fn leaf_edge_count(&self, leaf: [u32; 3]) -> Result<u64> {
        self.leaf(leaf)
            .map(|l| l.edges.len() as u64)
            .ok_or_else(|| Error::Config(format!("no leaf {leaf:?}")))
    }

    fn load_leaf(&self, leaf: [u32; 3], kind: LinkageKind) -> Result<ChunkGraph> {
        self.leaf(leaf)
            .map(|l| l.to_chunk_graph(kind))
            .ok_or_else(|| Error::Config(format!("no leaf {leaf:?}")))
    }
}

fn stream(seed: u64, n: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n);
    rng
}

/// Sorted cut positions strictly inside `0..len`, producing `cells` intervals.
fn cuts(rng: &mut ChaCha8Rng, lo: u32, hi: u32, cells: u32) -> Result<Vec<u32>> {
    let len = hi - lo;
    if cells == 0 || cells > len {
        return Err(Error::Config(format!("cannot cut length {len} into {cells} cells")));
    }
    let mut c: Vec<u32> = sample(rng, (len - 1) as usize, (cells - 1) as usize)
        .into_iter()
        .map(|i| lo + 1 + i as u32)
        .collect();
    c.sort_unstable();
    let mut out = vec![lo];
    out.extend(c);
    out.push(hi);
    Ok(out)
}

fn layout_boxes(spec: &SyntheticSpec) -> Result<Vec<Box3>> {
    let d = spec.dims;
    let mut rng = stream(spec.seed, 1);
    let mut out = Vec::new();
    let mut push = |lo: [u32; 3], hi: [u32; 3]| out.push(Box3 { lo, hi });
    match &spec.layout {
        BoxLayout::Uniform { size } => {
            if (0..3).any(|a| size[a] == 0 || d[a] % size[a] != 0) {
                return Err(Error::Config(format!("box size {size:?} does not divide {d:?}")));
            }
            for x in (0..d[0]).step_by(size[0] as usize) {
                for y in (0..d[1]).step_by(size[1] as usize) {
                    for z in (0..d[2]).step_by(size[2] as usize) {
                        push([x, y, z], [x + size[0], y + size[1], z + size[2]]);
                    }
                }
            }
        }
        BoxLayout::Grid { cells } => {
            let xs = cuts(&mut rng, 0, d[0], cells[0])?;
            let ys = cuts(&mut rng, 0, d[1], cells[1])?;
            let zs = cuts(&mut rng, 0, d[2], cells[2])?;
            for x in xs.windows(2) {
                for y in ys.windows(2) {
                    for z in zs.windows(2) {
                        push([x[0], y[0], z[0]], [x[1], y[1], z[1]]);
                    }
                }
            }
        }
        BoxLayout::Bricks { cells } => {
            let xs = cuts(&mut rng, 0, d[0], cells[0])?;
            for x in xs.windows(2) {
                let ys = cuts(&mut rng, 0, d[1], cells[1])?;
                for y in ys.windows(2) {
                    let zs = cuts(&mut rng, 0, d[2], cells[2])?;
                    for z in zs.windows(2) {
                        push([x[0], y[0], z[0]], [x[1], y[1], z[1]]);
                    }
                }
            }
        }
        BoxLayout::Explicit(boxes) => out = boxes.clone(),
    }
    Ok(out)
}

/// Voxel labels (box index) in x-major order.
struct Lattice {
    dims: [u32; 3],
    labels: Vec<u32>,
}

impl Lattice {
    fn index(&self, p: [u32; 3]) -> usize {
        ((p[0] as usize * self.dims[1] as usize) + p[1] as usize) * self.dims[2] as usize + p[2] as usize
    }

    fn paint(dims: [u32; 3], boxes: &[Box3]) -> Result<Self> {
        let n = dims.iter().map(|&v| v as usize).product();
        let mut lat = Lattice {
            dims,
            labels: vec![u32::MAX; n],
        };
        let bounds = Box3 { lo: [0; 3], hi: dims };
        for (i, b) in boxes.iter().enumerate() {
            if !bounds.contains(b) || b.volume() == 0 {
                return Err(Error::Config(format!("box {b} is empty or outside the lattice")));
            }
            for x in b.lo[0]..b.hi[0] {
                for y in b.lo[1]..b.hi[1] {
                    for z in b.lo[2]..b.hi[2] {
                        let idx = lat.index([x, y, z]);
                        if lat.labels[idx] != u32::MAX {
                            return Err(Error::Config(format!("boxes overlap at {:?}", [x, y, z])));
                        }
                        lat.labels[idx] = i as u32;
                    }
                }
            }
        }
        if let Some(i) = lat.labels.iter().position(|&l| l == u32::MAX) {
            return Err(Error::Config(format!("voxel {i} is not covered by any box")));
        }
        Ok(lat)
    }

    /// Calls `f(lower, upper)` for every face-adjacent voxel pair whose lower
    /// voxel lies in `region`, in a fixed order.
    fn pairs(&self, region: &Box3, mut f: impl FnMut(u32, u32)) {
        for x in region.lo[0]..region.hi[0] {
            for y in region.lo[1]..region.hi[1] {
                for z in region.lo[2]..region.hi[2] {
                    let p = [x, y, z];
                    let l = self.labels[self.index(p)];
                    for a in 0..3 {
                        if p[a] + 1 < self.dims[a] {
                            let mut q = p;
                            q[a] += 1;
                            let m = self.labels[self.index(q)];
                            if m != l {
                                f(l, m);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn grow_objects(adj: &[Vec<u32>], objects: u32, rng: &mut ChaCha8Rng) -> Result<Vec<u64>> {
    let n = adj.len();
    if objects == 0 || objects as usize > n {
        return Err(Error::Config(format!("cannot plant {objects} objects in {n} boxes")));
    }
    let mut owner = vec![u64::MAX; n];
    let mut queue = VecDeque::new();
    for (o, s) in sample(rng, n, objects as usize).into_iter().enumerate() {
        owner[s] = o as u64;
        queue.push_back(s);
    }
    while let Some(b) = queue.pop_front() {
        for &nb in &adj[b] {
            if owner[nb as usize] == u64::MAX {
                owner[nb as usize] = owner[b];
                queue.push_back(nb as usize);
            }
        }
    }
    if owner.contains(&u64::MAX) {
        return Err(Error::Config("box adjacency is disconnected".into()));
    }
    Ok(owner)
}

fn leaf_aligned_objects(geom: &OctreeGeometry, boxes: &[Box3]) -> Result<Vec<u64>> {
    let grid = geom.leaf_grid();
    let l = geom.leaf_dims;
    let mut ids: BTreeMap<[u64; 3], u64> = BTreeMap::new();
    let mut labels = Vec::with_capacity(boxes.len());
    for b in boxes {
        let mut tag = [0u64; 3];
        for a in 0..3 {
            let li = b.lo[a] / l[a];
            if (b.hi[a] - 1) / l[a] != li {
                return Err(Error::Config(format!("box {b} crosses a leaf boundary")));
            }
            tag[a] = if b.lo[a] == li * l[a] && li > 0 {
                2 * li as u64 + 1
            } else if b.hi[a] == (li + 1) * l[a] && li + 1 < grid[a] {
                2 * (li as u64 + 1) + 1
            } else {
                2 * li as u64
            };
        }
        labels.push(tag);
        ids.insert(tag, 0);
    }
    for (i, v) in ids.values_mut().enumerate() {
        *v = i as u64;
    }
    Ok(labels.iter().map(|t| ids[t]).collect())
}

/// Draws samples from a window without repeats until it is exhausted.
struct WindowSampler {
    lo: u32,
    perm: Vec<u32>,
    next: usize,
    wrapped: bool,
}

impl WindowSampler {
    fn new(w: AffinityWindow, rng: &mut ChaCha8Rng) -> Self {
        let mut perm: Vec<u32> = (0..w.width()).collect();
        perm.shuffle(rng);
        WindowSampler {
            lo: w.lo.get(),
            perm,
            next: 0,
            wrapped: false,
        }
    }

    fn draw(&mut self) -> u32 {
        if self.next == self.perm.len() {
            self.next = 0;
            self.wrapped = true;
        }
        let v = self.lo + self.perm[self.next];
        self.next += 1;
        v
    }
}

#[derive(Default, Clone, Copy)]
struct Acc {
    sum: u128,
    count: u64,
    max: u32,
}

impl Acc {
    fn add(&mut self, v: u32) {
        self.sum += u128::from(v);
        self.count += 1;
        self.max = self.max.max(v);
    }
}

/// Builds the dataset described by `spec`. Deterministic in the spec.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let geometry = OctreeGeometry::new(spec.dims, spec.leaf_dims)?;
    let mut boxes = layout_boxes(spec)?;
    let lattice_boxes = boxes.clone();
    let lattice = Lattice::paint(spec.dims, &lattice_boxes)?;
    let n = boxes.len();

    // Segment ids are a random permutation so that ids carry no geometry.
    let mut id_of: Vec<u32> = (0..n as u32).collect();
    id_of.shuffle(&mut stream(spec.seed, 2));
    for (i, b) in lattice_boxes.iter().enumerate() {
        boxes[id_of[i] as usize] = *b;
    }
    let seg = |label: u32| SegmentId::new(u64::from(id_of[label as usize]) + 1).unwrap();

    let mut keys: FxHashSet<(u32, u32)> = FxHashSet::default();
    lattice.pairs(&geometry.dataset_bounds(), |l, m| {
        keys.insert((l.min(m), l.max(m)));
    });
    let mut adj = vec![Vec::new(); n];
    for &(l, m) in &keys {
        adj[l as usize].push(m);
        adj[m as usize].push(l);
    }
    for a in &mut adj {
        a.sort_unstable();
    }
    let edge_total = keys.len() as u64;
    drop(keys);

    let object: Vec<u64> = match spec.objects {
        ObjectModel::Grown { objects } => grow_objects(&adj, objects, &mut stream(spec.seed, 3))?,
        ObjectModel::LeafAligned => leaf_aligned_objects(&geometry, &lattice_boxes)?,
        ObjectModel::Singletons => (0..n as u64).collect(),
    };
    drop(adj);

    let mut rng = stream(spec.seed, 4);
    let mut intra = WindowSampler::new(spec.affinity.intra, &mut rng);
    let mut inter = WindowSampler::new(spec.affinity.inter, &mut rng);
    let mut global: FxHashMap<EdgeKey, Acc> = FxHashMap::default();
    let mut leaves = Vec::new();
    let mut voxel_pairs = 0u64;
    let noise = spec.affinity.noise;

    for coords in geometry.leaves_under(&geometry.root()) {
        let addr = ChunkAddress::leaf(coords);
        let region = geometry.bounds(&addr);
        let mut nodes: FxHashSet<u32> = FxHashSet::default();
        let mut acc: FxHashMap<EdgeKey, Acc> = FxHashMap::default();
        lattice.pairs(&region, |l, m| {
            let same = object[l as usize] == object[m as usize];
            let flip = noise > 0.0 && rng.gen_bool(noise);
            let v = if same != flip { intra.draw() } else { inter.draw() };
            let key = EdgeKey::of(seg(l), seg(m));
            acc.entry(key).or_default().add(v);
            if spec.record_interfaces {
                global.entry(key).or_default().add(v);
            }
            nodes.insert(m);
            voxel_pairs += 1;
        });
        for x in region.lo[0]..region.hi[0] {
            for y in region.lo[1]..region.hi[1] {
                for z in region.lo[2]..region.hi[2] {
                    nodes.insert(lattice.labels[lattice.index([x, y, z])]);
                }
            }
        }
        let mut node_list: Vec<(SegmentId, Box3)> =
            nodes.into_iter().map(|l| (seg(l), lattice_boxes[l as usize])).collect();
        node_list.sort_unstable_by_key(|(id, _)| *id);
        let boundary = boundary_set(
            &geometry.descriptor(addr),
            node_list.iter().map(|(id, b)| (*id, b)),
        )?;
        let mut edges: Vec<LeafEdge> = acc
            .into_iter()
            .map(|(key, a)| LeafEdge {
                key,
                sum: a.sum,
                count: a.count,
                max: FixedAffinity::new(a.max).unwrap(),
            })
            .collect();
        edges.sort_unstable_by_key(|e| e.key);
        leaves.push(LeafChunk {
            coords,
            nodes: node_list,
            boundary,
            edges,
        });
    }

    let mut interfaces: Vec<InterfaceRecord> = global
        .into_iter()
        .map(|(key, a)| InterfaceRecord {
            key,
            sum: a.sum,
            count: a.count,
            max: FixedAffinity::new(a.max).unwrap(),
        })
        .collect();
    interfaces.sort_unstable_by_key(|r| r.key);

    let mut truth: Vec<(u64, u64)> = (0..n)
        .map(|l| (seg(l as u32).get(), object[l]))
        .collect();
    truth.sort_unstable();

    let leaf_index = leaves.iter().enumerate().map(|(i, l)| (l.coords, i)).collect();
    let meta = DatasetMeta {
        geometry,
        seed: spec.seed,
        segments: n as u64,
        edges: edge_total,
        voxel_pairs,
        distinct_affinities: !intra.wrapped && !inter.wrapped,
        leaf_edges: leaves.iter().map(|l| (l.coords, l.edges.len() as u64)).collect(),
    };
    Ok(SyntheticDataset {
        meta,
        leaves,
        boxes,
        truth,
        interfaces,
        leaf_index,
    })
}

/// Agreement between a flat segmentation and planted objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruthScore {
    /// Extra pieces objects were cut into: sum over objects of (segments - 1).
    pub splits: u64,
    /// Extra objects segments contain: sum over segments of (objects - 1).
    pub merges: u64,
    /// Fraction of supervoxel pairs on which both partitions agree.
    pub rand_index: f64,
}

/// Scores `partition` (supervoxel, representative) against `truth`
/// (supervoxel, object). Supervoxels missing from `partition` count as
/// singletons.
pub fn score_against_truth(partition: &[(u64, u64)], truth: &[(u64, u64)]) -> TruthScore {
    let rep: FxHashMap<u64, u64> = partition.iter().copied().collect();
    let mut cells: FxHashMap<(u64, u64), u64> = FxHashMap::default();
    for &(sv, obj) in truth {
        let r = rep.get(&sv).copied().unwrap_or(sv);
        *cells.entry((r, obj)).or_default() += 1;
    }
    let mut seg_sizes: FxHashMap<u64, u64> = FxHashMap::default();
    let mut obj_sizes: FxHashMap<u64, u64> = FxHashMap::default();
    let mut seg_objs: FxHashMap<u64, u64> = FxHashMap::default();
    let mut obj_segs: FxHashMap<u64, u64> = FxHashMap::default();
    let pairs = |k: u64| (k as u128) * (k as u128).saturating_sub(1) / 2;
    let mut agree_same = 0u128;
    for (&(r, o), &c) in &cells {
        *seg_sizes.entry(r).or_default() += c;
        *obj_sizes.entry(o).or_default() += c;
        *seg_objs.entry(r).or_default() += 1;
        *obj_segs.entry(o).or_default() += 1;
        agree_same += pairs(c);
    }
    let splits = obj_segs.values().map(|k| k - 1).sum();
    let merges = seg_objs.values().map(|k| k - 1).sum();
    let total = pairs(truth.len() as u64);
    let seg_pairs: u128 = seg_sizes.values().map(|&k| pairs(k)).sum();
    let obj_pairs: u128 = obj_sizes.values().map(|&k| pairs(k)).sum();
    let rand_index = if total == 0 {
        1.0
    } else {
        let disagree = seg_pairs + obj_pairs - 2 * agree_same;
        1.0 - disagree as f64 / total as f64
    };
    TruthScore {
        splits,
        merges,
        rand_index,
    }
}
