//! Hierarchical agglomerative clustering of region adjacency graphs, in one
//! piece or split over an octree of chunks whose results are stitched back
//! together. Both routes produce the same dendrogram.

pub mod affinity;
pub mod agglomerate;
pub mod datagen;
pub mod error;
pub mod format;
pub mod graph;
pub mod octree;
pub mod segmentation;
pub mod executor;
pub mod store;

pub use affinity::{AffinityStat, FixedAffinity, LinkageKind};
pub use error::{Error, Result};
pub use graph::{Dendrogram, EdgeKey, MergeRow, RegionGraph, SegmentId};
pub use octree::{ChunkAddress, OctreeGeometry};
