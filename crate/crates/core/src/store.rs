//! On-disk chunk store.
//!
//! ```text
//! <root>/meta.bin                 dataset facts
//! <root>/truth.bin                planted objects (optional)
//! <root>/leaves/0/x_y_z.rag       leaf inputs
//! <root>/<run>/config.bin         run parameters
//! <root>/<run>/L/x_y_z.dend       dendrogram fragment
//! <root>/<run>/L/x_y_z.frozen     frozen graph
//! <root>/<run>/L/x_y_z.ok         commit marker, written last
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::affinity::{FixedAffinity, LinkageKind};
use crate::error::{Error, Result};
use crate::format::{self, CommitMarker, DatasetMeta, LeafChunk};
use crate::graph::Dendrogram;
use crate::octree::{ChunkAddress, ChunkGraph, LeafSource, OctreeGeometry, PlanParams, TaskOutput};

pub const DEFAULT_RUN: &str = "out";

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to `path` so that readers see either nothing or the whole file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("entry");
    let tmp = dir.join(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct ChunkStore {
    root: PathBuf,
    meta: Option<DatasetMeta>,
}

impl ChunkStore {
    /// Creates the directory if needed. Existing contents are left alone.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("leaves/0")).map_err(|e| Error::io(&root, e))?;
        Ok(ChunkStore { root, meta: None })
    }

    /// Opens a populated store and loads its metadata.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join("meta.bin");
        let meta = format::decode_meta(&read(&path)?, &path)?;
        Ok(ChunkStore {
            root,
            meta: Some(meta),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn meta(&self) -> Result<&DatasetMeta> {
        self.meta
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no dataset metadata", self.root.display())))
    }

    pub fn put_meta(&mut self, meta: &DatasetMeta) -> Result<()> {
        write_atomic(&self.root.join("meta.bin"), &format::encode_meta(meta))?;
        self.meta = Some(meta.clone());
        Ok(())
    }

    pub fn leaf_path(&self, coords: [u32; 3]) -> PathBuf {
        self.root.join("leaves").join(ChunkAddress::leaf(coords).to_string() + ".rag")
    }

    pub fn put_leaf(&self, leaf: &LeafChunk) -> Result<()> {
        write_atomic(&self.leaf_path(leaf.coords), &format::encode_leaf(leaf))
    }

    pub fn get_leaf(&self, coords: [u32; 3]) -> Result<LeafChunk> {
        let path = self.leaf_path(coords);
        let leaf = format::decode_leaf(&read(&path)?, &path)?;
        if leaf.coords != coords {
            return Err(Error::format(&path, format!("holds leaf {:?}", leaf.coords)));
        }
        Ok(leaf)
    }

    pub fn truth_path(&self) -> PathBuf {
        self.root.join("truth.bin")
    }

    pub fn put_truth(&self, pairs: &[(u64, u64)]) -> Result<()> {
        write_atomic(&self.truth_path(), &format::encode_pairs(format::TRUTH_MAGIC, pairs))
    }

    pub fn get_truth(&self) -> Result<Vec<(u64, u64)>> {
        let path = self.truth_path();
        format::decode_pairs(&read(&path)?, format::TRUTH_MAGIC, &path)
    }

    pub fn run(&self, name: &str) -> RunStore {
        RunStore {
            dir: self.root.join(name),
        }
    }
}

impl LeafSource for ChunkStore {
    fn geometry(&self) -> OctreeGeometry {
        self.meta().expect("store opened without metadata").geometry
    }

    fn leaf_edge_count(&self, leaf: [u32; 3]) -> Result<u64> {
        self.meta()?
            .leaf_edges
            .iter()
            .find(|(c, _)| *c == leaf)
            .map(|(_, n)| *n)
            .ok_or_else(|| Error::Config(format!("leaf {leaf:?} not listed in metadata")))
    }

    fn load_leaf(&self, leaf: [u32; 3], kind: LinkageKind) -> Result<ChunkGraph> {
        Ok(self.get_leaf(leaf)?.to_chunk_graph(kind))
    }
}

/// Parameters a run directory was started with; a resumed run must match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub kind: LinkageKind,
    pub threshold: FixedAffinity,
    pub plan: PlanParams,
}

/// Outputs of one run, keyed by chunk address.
#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
}

impl RunStore {
    pub fn at(dir: impl Into<PathBuf>) -> Self {
        RunStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry(&self, addr: &ChunkAddress, ext: &str) -> PathBuf {
        self.dir.join(format!("{addr}.{ext}"))
    }

    pub fn dendrogram_path(&self, addr: &ChunkAddress) -> PathBuf {
        self.entry(addr, "dend")
    }

    pub fn frozen_path(&self, addr: &ChunkAddress) -> PathBuf {
        self.entry(addr, "frozen")
    }

    pub fn marker_path(&self, addr: &ChunkAddress) -> PathBuf {
        self.entry(addr, "ok")
    }

    fn config_path(&self) -> PathBuf {
        self.dir.join("config.bin")
    }

    /// Records the run parameters, or checks them against an earlier start.
    pub fn init(&self, cfg: &RunConfig) -> Result<()> {
        let mut e = format::Encoder::new(format::RUN_CONFIG_MAGIC);
        e.u8(cfg.kind.to_byte());
        e.u32(cfg.threshold.get());
        e.u8(cfg.plan.depth.unwrap_or(u8::MAX));
        e.u64(cfg.plan.leaf_threshold);
        let bytes = e.finish();
        let path = self.config_path();
        if path.exists() {
            if read(&path)? != bytes {
                return Err(Error::Config(format!(
                    "{} was started with different parameters; use a fresh run name",
                    self.dir.display()
                )));
            }
            return Ok(());
        }
        write_atomic(&path, &bytes)
    }

    /// Parameters recorded by [`RunStore::init`].
    pub fn config(&self) -> Result<RunConfig> {
        let path = self.config_path();
        let bytes = read(&path)?;
        let mut d = format::Decoder::open(&bytes, format::RUN_CONFIG_MAGIC, &path)?;
        let kind = LinkageKind::from_byte(d.u8()?)
            .ok_or_else(|| Error::format(&path, "unknown linkage"))?;
        let threshold =
            FixedAffinity::new(d.u32()?).map_err(|e| Error::format(&path, e.to_string()))?;
        let depth = d.u8()?;
        let leaf_threshold = d.u64()?;
        d.end()?;
        Ok(RunConfig {
            kind,
            threshold,
            plan: PlanParams {
                depth: (depth != u8::MAX).then_some(depth),
                leaf_threshold,
            },
        })
    }

    /// Commits a task output. The marker goes last, so a crash leaves the
    /// entry uncommitted and the task is simply redone.
    pub fn put_output(&self, addr: &ChunkAddress, out: &TaskOutput) -> Result<CommitMarker> {
        let dend = format::encode_dendrogram(&out.dendrogram);
        let frozen = format::encode_frozen(out.dendrogram.kind, &out.frozen);
        let marker = CommitMarker {
            dendrogram_crc: format::trailer_crc(&dend).unwrap(),
            frozen_crc: format::trailer_crc(&frozen).unwrap(),
            rows: out.dendrogram.len() as u64,
            input_edges: out.input_edges,
            frozen_edges: out.frozen.graph.edge_count() as u64,
        };
        write_atomic(&self.dendrogram_path(addr), &dend)?;
        write_atomic(&self.frozen_path(addr), &frozen)?;
        write_atomic(&self.marker_path(addr), &format::encode_marker(&marker))?;
        Ok(marker)
    }

    /// Marker of a committed entry, or `None` if the task has not committed.
    pub fn marker(&self, addr: &ChunkAddress) -> Result<Option<CommitMarker>> {
        let path = self.marker_path(addr);
        match fs::read(&path) {
            Ok(b) => Ok(Some(format::decode_marker(&b, &path)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn is_committed(&self, addr: &ChunkAddress) -> bool {
        matches!(self.marker(addr), Ok(Some(_)))
    }

    fn committed(&self, addr: &ChunkAddress) -> Result<CommitMarker> {
        self.marker(addr)?
            .ok_or_else(|| Error::MissingDependency(*addr, "no commit marker".into()))
    }

    fn read_checked(&self, path: &Path, expected_crc: u64) -> Result<Vec<u8>> {
        let bytes = read(path)?;
        if format::trailer_crc(&bytes) != Some(expected_crc) {
            return Err(Error::corrupt(path, "does not match its commit marker"));
        }
        Ok(bytes)
    }

    pub fn get_dendrogram(&self, addr: &ChunkAddress) -> Result<Dendrogram> {
        let m = self.committed(addr)?;
        let path = self.dendrogram_path(addr);
        let d = format::decode_dendrogram(&self.read_checked(&path, m.dendrogram_crc)?, &path)?;
        if d.len() as u64 != m.rows {
            return Err(Error::corrupt(&path, "row count differs from commit marker"));
        }
        Ok(d)
    }

    pub fn get_frozen(&self, addr: &ChunkAddress, kind: LinkageKind) -> Result<ChunkGraph> {
        let m = self.committed(addr)?;
        let path = self.frozen_path(addr);
        let (k, g) = format::decode_frozen(&self.read_checked(&path, m.frozen_crc)?, &path)?;
        if k != kind {
            return Err(Error::format(&path, format!("linkage {k}, expected {kind}")));
        }
        if g.graph.edge_count() as u64 != m.frozen_edges {
            return Err(Error::corrupt(&path, "edge count differs from commit marker"));
        }
        Ok(g)
    }

    /// Dendrogram file written at the top of the run directory.
    pub fn final_dendrogram_path(&self) -> PathBuf {
        self.dir.join("dendrogram.dend")
    }
}

pub fn write_dendrogram(path: &Path, d: &Dendrogram) -> Result<()> {
    write_atomic(path, &format::encode_dendrogram(d))
}

pub fn read_dendrogram(path: &Path) -> Result<Dendrogram> {
    format::decode_dendrogram(&read(path)?, path)
}

pub fn write_segmentation(path: &Path, pairs: &[(u64, u64)]) -> Result<()> {
    write_atomic(path, &format::encode_pairs(format::SEGMENTATION_MAGIC, pairs))
}

pub fn read_segmentation(path: &Path) -> Result<Vec<(u64, u64)>> {
    format::decode_pairs(&read(path)?, format::SEGMENTATION_MAGIC, path)
}
