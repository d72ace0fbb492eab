//! Little-endian file formats.
//!
//! Every file is `magic (4) | version (u32) | body | crc64 (u64)`, where the
//! CRC-64/ECMA-182 covers everything before it.

use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};

use crate::affinity::{AffinityStat, FixedAffinity, LinkageKind, STAT_BYTES};
use crate::error::{Error, Result};
use crate::graph::{Dendrogram, EdgeKey, MergeRow, RegionGraph, SegmentId};
use crate::octree::{Box3, ChunkGraph, OctreeGeometry};

pub const VERSION: u32 = 1;

pub const LEAF_MAGIC: &[u8; 4] = b"RAGL";
pub const DENDROGRAM_MAGIC: &[u8; 4] = b"RAGD";
pub const FROZEN_MAGIC: &[u8; 4] = b"RAGF";
pub const MARKER_MAGIC: &[u8; 4] = b"RAGK";
pub const META_MAGIC: &[u8; 4] = b"RAGM";
pub const TRUTH_MAGIC: &[u8; 4] = b"RAGT";
pub const SEGMENTATION_MAGIC: &[u8; 4] = b"RAGS";
pub const RUN_CONFIG_MAGIC: &[u8; 4] = b"RAGC";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

/// CRC trailer of an encoded file.
pub fn trailer_crc(bytes: &[u8]) -> Option<u64> {
    let n = bytes.len();
    (n >= 16).then(|| u64::from_le_bytes(bytes[n - 8..].try_into().unwrap()))
}

pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub(crate) fn new(magic: &[u8; 4]) -> Self {
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        Encoder { buf }
    }

    pub(crate) fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn reserve(&mut self, n: usize) {
        self.buf.reserve(n);
    }

    fn stat(&mut self, s: &AffinityStat) {
        self.buf.extend_from_slice(&s.to_le_bytes());
    }

    fn boxed(&mut self, b: &Box3) {
        for v in b.lo.iter().chain(&b.hi) {
            self.u32(*v);
        }
    }

    pub(crate) fn finish(mut self) -> Vec<u8> {
        let crc = crc64(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Decoder<'a> {
    /// Validates magic, version and checksum.
    pub(crate) fn open(buf: &'a [u8], magic: &[u8; 4], path: &'a Path) -> Result<Self> {
        if buf.len() < 16 {
            return Err(Error::corrupt(path, "truncated file"));
        }
        if &buf[..4] != magic {
            return Err(Error::corrupt(
                path,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&buf[..4]),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let body_end = buf.len() - 8;
        let stored = u64::from_le_bytes(buf[body_end..].try_into().unwrap());
        let actual = crc64(&buf[..body_end]);
        if stored != actual {
            return Err(Error::corrupt(
                path,
                format!("checksum mismatch (stored {stored:016x}, computed {actual:016x})"),
            ));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        Ok(Decoder {
            buf: &buf[..body_end],
            pos: 8,
            path,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(self.path, "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    /// Element count, rejected early if the remaining bytes cannot hold it.
    fn count(&mut self, elem_bytes: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem_bytes).map_or(true, |b| b > self.buf.len() - self.pos) {
            return Err(Error::corrupt(self.path, format!("count {n} exceeds file size")));
        }
        Ok(n)
    }

    fn kind(&mut self) -> Result<LinkageKind> {
        let b = self.u8()?;
        LinkageKind::from_byte(b)
            .ok_or_else(|| Error::format(self.path, format!("unknown linkage byte {b}")))
    }

    fn affinity(&mut self) -> Result<FixedAffinity> {
        let v = self.u32()?;
        FixedAffinity::new(v).map_err(|e| Error::format(self.path, e.to_string()))
    }

    fn segment(&mut self) -> Result<SegmentId> {
        let v = self.u64()?;
        SegmentId::new(v).map_err(|e| Error::format(self.path, e.to_string()))
    }

    fn key(&mut self) -> Result<EdgeKey> {
        let lo = self.segment()?;
        let hi = self.segment()?;
        if lo >= hi {
            return Err(Error::format(self.path, format!("non-canonical edge ({lo},{hi})")));
        }
        EdgeKey::new(lo, hi).map_err(|e| Error::format(self.path, e.to_string()))
    }

    fn stat(&mut self, kind: LinkageKind) -> Result<AffinityStat> {
        let bytes: &[u8; STAT_BYTES] = self.take(STAT_BYTES)?.try_into().unwrap();
        AffinityStat::from_le_bytes(kind, bytes).map_err(|e| Error::format(self.path, e.to_string()))
    }

    fn boxed(&mut self) -> Result<Box3> {
        let mut v = [0u32; 6];
        for x in &mut v {
            *x = self.u32()?;
        }
        Box3::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
            .map_err(|e| Error::format(self.path, e.to_string()))
    }

    pub(crate) fn end(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// One stored interface piece of a leaf, usable for either linkage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeafEdge {
    pub key: EdgeKey,
    /// Sum of fixed-point affinities over `count` voxel pairs.
    pub sum: u128,
    pub count: u64,
    /// Largest single voxel-pair affinity.
    pub max: FixedAffinity,
}

impl LeafEdge {
    pub fn stat(&self, kind: LinkageKind) -> AffinityStat {
        match kind {
            LinkageKind::Mean => AffinityStat::from_parts(kind, self.sum, self.count),
            LinkageKind::Max => AffinityStat::from_parts(kind, u128::from(self.max.get()), self.count),
        }
        .expect("leaf edge validated at decode")
    }
}

/// Input of one leaf chunk: node boxes, boundary list, partial edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafChunk {
    pub coords: [u32; 3],
    pub nodes: Vec<(SegmentId, Box3)>,
    pub boundary: Vec<SegmentId>,
    pub edges: Vec<LeafEdge>,
}

impl LeafChunk {
    pub fn to_chunk_graph(&self, kind: LinkageKind) -> ChunkGraph {
        let mut cg = ChunkGraph {
            graph: RegionGraph::with_capacity(self.nodes.len(), self.edges.len()),
            extents: self.nodes.iter().copied().collect(),
        };
        for (id, _) in &self.nodes {
            cg.graph.add_node(*id);
        }
        for e in &self.edges {
            cg.graph.add_edge(e.key, e.stat(kind), kind);
        }
        cg
    }
}

pub fn encode_leaf(leaf: &LeafChunk) -> Vec<u8> {
    let mut e = Encoder::new(LEAF_MAGIC);
    e.reserve(leaf.nodes.len() * 32 + leaf.edges.len() * 44 + leaf.boundary.len() * 8 + 64);
    for c in leaf.coords {
        e.u32(c);
    }
    e.u64(leaf.nodes.len() as u64);
    for (id, b) in &leaf.nodes {
        e.u64(id.get());
        e.boxed(b);
    }
    e.u64(leaf.boundary.len() as u64);
    for id in &leaf.boundary {
        e.u64(id.get());
    }
    e.u64(leaf.edges.len() as u64);
    for edge in &leaf.edges {
        e.u64(edge.key.lo().get());
        e.u64(edge.key.hi().get());
        e.u128(edge.sum);
        e.u64(edge.count);
        e.u32(edge.max.get());
    }
    e.finish()
}

pub fn decode_leaf(bytes: &[u8], path: &Path) -> Result<LeafChunk> {
    let mut d = Decoder::open(bytes, LEAF_MAGIC, path)?;
    let coords = [d.u32()?, d.u32()?, d.u32()?];
    let n = d.count(32)?;
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        nodes.push((d.segment()?, d.boxed()?));
    }
    let n = d.count(8)?;
    let mut boundary = Vec::with_capacity(n);
    for _ in 0..n {
        boundary.push(d.segment()?);
    }
    let n = d.count(44)?;
    let mut edges = Vec::with_capacity(n);
    for _ in 0..n {
        let key = d.key()?;
        let sum = d.u128()?;
        let count = d.u64()?;
        let max = d.affinity()?;
        AffinityStat::from_parts(LinkageKind::Mean, sum, count)
            .map_err(|e| Error::format(path, e.to_string()))?;
        edges.push(LeafEdge { key, sum, count, max });
    }
    d.end()?;
    Ok(LeafChunk {
        coords,
        nodes,
        boundary,
        edges,
    })
}

pub fn encode_dendrogram(d: &Dendrogram) -> Vec<u8> {
    let mut e = Encoder::new(DENDROGRAM_MAGIC);
    e.reserve(d.rows.len() * 40 + 16);
    e.u8(d.kind.to_byte());
    e.u32(d.threshold.get());
    e.u64(d.rows.len() as u64);
    for r in &d.rows {
        e.u64(r.survivor.get());
        e.u64(r.absorbed.get());
        e.stat(&r.stat);
    }
    e.finish()
}

pub fn decode_dendrogram(bytes: &[u8], path: &Path) -> Result<Dendrogram> {
    let mut d = Decoder::open(bytes, DENDROGRAM_MAGIC, path)?;
    let kind = d.kind()?;
    let threshold = d.affinity()?;
    let n = d.count(40)?;
    let mut out = Dendrogram::new(kind, threshold);
    out.rows.reserve(n);
    for _ in 0..n {
        let survivor = d.segment()?;
        let absorbed = d.segment()?;
        let stat = d.stat(kind)?;
        out.rows.push(MergeRow {
            survivor,
            absorbed,
            stat,
        });
    }
    d.end()?;
    Ok(out)
}

pub fn encode_frozen(kind: LinkageKind, g: &ChunkGraph) -> Vec<u8> {
    let mut e = Encoder::new(FROZEN_MAGIC);
    e.u8(kind.to_byte());
    let nodes = g.graph.sorted_nodes();
    e.reserve(nodes.len() * 32 + g.graph.edge_count() * 40 + 24);
    e.u64(nodes.len() as u64);
    for n in nodes {
        e.u64(n.get());
        e.boxed(&g.extents[&n]);
    }
    let edges = g.graph.sorted_edges();
    e.u64(edges.len() as u64);
    for (k, s) in edges {
        e.u64(k.lo().get());
        e.u64(k.hi().get());
        e.stat(&s);
    }
    e.finish()
}

pub fn decode_frozen(bytes: &[u8], path: &Path) -> Result<(LinkageKind, ChunkGraph)> {
    let mut d = Decoder::open(bytes, FROZEN_MAGIC, path)?;
    let kind = d.kind()?;
    let n = d.count(32)?;
    let mut cg = ChunkGraph::default();
    for _ in 0..n {
        let id = d.segment()?;
        let b = d.boxed()?;
        cg.graph.add_node(id);
        cg.extents.insert(id, b);
    }
    let m = d.count(40)?;
    for _ in 0..m {
        let k = d.key()?;
        let s = d.stat(kind)?;
        if !cg.graph.contains_node(k.lo()) || !cg.graph.contains_node(k.hi()) {
            return Err(Error::format(path, format!("edge {k} references an unlisted node")));
        }
        cg.graph.add_edge(k, s, kind);
    }
    if cg.graph.edge_count() != m {
        return Err(Error::format(path, "duplicate edge keys"));
    }
    d.end()?;
    Ok((kind, cg))
}

/// Commit marker of one task output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommitMarker {
    pub dendrogram_crc: u64,
    pub frozen_crc: u64,
    pub rows: u64,
    pub input_edges: u64,
    pub frozen_edges: u64,
}

pub fn encode_marker(m: &CommitMarker) -> Vec<u8> {
    let mut e = Encoder::new(MARKER_MAGIC);
    e.u64(m.dendrogram_crc);
    e.u64(m.frozen_crc);
    e.u64(m.rows);
    e.u64(m.input_edges);
    e.u64(m.frozen_edges);
    e.finish()
}

pub fn decode_marker(bytes: &[u8], path: &Path) -> Result<CommitMarker> {
    let mut d = Decoder::open(bytes, MARKER_MAGIC, path)?;
    let m = CommitMarker {
        dendrogram_crc: d.u64()?,
        frozen_crc: d.u64()?,
        rows: d.u64()?,
        input_edges: d.u64()?,
        frozen_edges: d.u64()?,
    };
    d.end()?;
    Ok(m)
}

/// Dataset-wide facts written once by the generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub geometry: OctreeGeometry,
    pub seed: u64,
    pub segments: u64,
    /// Distinct interfaces over the whole dataset.
    pub edges: u64,
    pub voxel_pairs: u64,
    /// Every voxel-pair affinity in the dataset is distinct.
    pub distinct_affinities: bool,
    /// Edge records per stored leaf.
    pub leaf_edges: Vec<([u32; 3], u64)>,
}

pub fn encode_meta(m: &DatasetMeta) -> Vec<u8> {
    let mut e = Encoder::new(META_MAGIC);
    for v in m.geometry.dims.iter().chain(&m.geometry.leaf_dims) {
        e.u32(*v);
    }
    e.u64(m.seed);
    e.u64(m.segments);
    e.u64(m.edges);
    e.u64(m.voxel_pairs);
    e.u8(u8::from(m.distinct_affinities));
    e.u64(m.leaf_edges.len() as u64);
    for (c, n) in &m.leaf_edges {
        for v in c {
            e.u32(*v);
        }
        e.u64(*n);
    }
    e.finish()
}

pub fn decode_meta(bytes: &[u8], path: &Path) -> Result<DatasetMeta> {
    let mut d = Decoder::open(bytes, META_MAGIC, path)?;
    let dims = [d.u32()?, d.u32()?, d.u32()?];
    let leaf_dims = [d.u32()?, d.u32()?, d.u32()?];
    let geometry =
        OctreeGeometry::new(dims, leaf_dims).map_err(|e| Error::format(path, e.to_string()))?;
    let seed = d.u64()?;
    let segments = d.u64()?;
    let edges = d.u64()?;
    let voxel_pairs = d.u64()?;
    let distinct_affinities = d.u8()? != 0;
    let n = d.count(20)?;
    let mut leaf_edges = Vec::with_capacity(n);
    for _ in 0..n {
        let c = [d.u32()?, d.u32()?, d.u32()?];
        leaf_edges.push((c, d.u64()?));
    }
    d.end()?;
    Ok(DatasetMeta {
        geometry,
        seed,
        segments,
        edges,
        voxel_pairs,
        distinct_affinities,
        leaf_edges,
    })
}

pub fn encode_pairs(magic: &[u8; 4], pairs: &[(u64, u64)]) -> Vec<u8> {
    let mut e = Encoder::new(magic);
    e.reserve(pairs.len() * 16 + 8);
    e.u64(pairs.len() as u64);
    for (a, b) in pairs {
        e.u64(*a);
        e.u64(*b);
    }
    e.finish()
}

pub fn decode_pairs(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<Vec<(u64, u64)>> {
    let mut d = Decoder::open(bytes, magic, path)?;
    let n = d.count(16)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push((d.u64()?, d.u64()?));
    }
    d.end()?;
    Ok(out)
}
