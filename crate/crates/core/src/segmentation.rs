//! Flat segmentations and dendrogram comparison.

use std::fmt;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::graph::{Dendrogram, MergeRow};

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Keeps the smaller index as root; indices follow id order, so the
    /// root of a set is its minimum id.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Maps every id in `ids` to the minimum id of its component after applying
/// all rows. Output is sorted by id.
pub fn flatten(d: &Dendrogram, ids: impl IntoIterator<Item = u64>) -> Result<Vec<(u64, u64)>> {
    let mut ids: Vec<u64> = ids.into_iter().collect();
    ids.sort_unstable();
    ids.dedup();
    let index: FxHashMap<u64, usize> = ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let mut sets = DisjointSets::new(ids.len());
    for r in &d.rows {
        let look = |s: u64| {
            index.get(&s).copied().ok_or_else(|| {
                Error::corrupt("dendrogram", format!("row ({}, {}) names unknown segment {s}", r.survivor, r.absorbed))
            })
        };
        let (a, b) = (look(r.survivor.get())?, look(r.absorbed.get())?);
        sets.union(a, b);
    }
    Ok((0..ids.len()).map(|i| (ids[i], ids[sets.find(i)])).collect())
}

/// Every id named by a row.
pub fn row_ids(d: &Dendrogram) -> impl Iterator<Item = u64> + '_ {
    d.rows.iter().flat_map(|r| [r.survivor.get(), r.absorbed.get()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Identical row multisets.
    Equal,
    /// Same flat partition, different rows.
    PartitionEqual,
    Different,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Equal => "EQUAL",
            Verdict::PartitionEqual => "PARTITION_EQUAL",
            Verdict::Different => "DIFFERENT",
        })
    }
}

/// A row present in only one of the compared dendrograms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowDiff {
    OnlyInFirst(MergeRow),
    OnlyInSecond(MergeRow),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub verdict: Verdict,
    /// At most [`MAX_DIFF_ROWS`] differing rows, in row order.
    pub sample: Vec<RowDiff>,
    pub differing_rows: usize,
}

pub const MAX_DIFF_ROWS: usize = 10;

/// Compares two dendrograms of the same linkage and threshold.
pub fn compare(a: &Dendrogram, b: &Dendrogram) -> Result<Comparison> {
    if a.kind != b.kind || a.threshold != b.threshold {
        return Err(Error::Config(format!(
            "headers differ: {} at {} vs {} at {}",
            a.kind, a.threshold, b.kind, b.threshold
        )));
    }
    let (ra, rb) = (a.sorted_rows(), b.sorted_rows());
    let mut diffs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < ra.len() || j < rb.len() {
        let ord = match (ra.get(i), rb.get(j)) {
            (Some(x), Some(y)) => x.sort_key().cmp(&y.sort_key()),
            (Some(_), None) => std::cmp::Ordering::Less,
            _ => std::cmp::Ordering::Greater,
        };
        match ord {
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
            std::cmp::Ordering::Less => {
                diffs.push(RowDiff::OnlyInFirst(ra[i]));
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                diffs.push(RowDiff::OnlyInSecond(rb[j]));
                j += 1;
            }
        }
    }
    let differing_rows = diffs.len();
    let verdict = if diffs.is_empty() {
        Verdict::Equal
    } else {
        let ids: Vec<u64> = row_ids(a).chain(row_ids(b)).collect();
        if flatten(a, ids.iter().copied())? == flatten(b, ids)? {
            Verdict::PartitionEqual
        } else {
            Verdict::Different
        }
    };
    diffs.truncate(MAX_DIFF_ROWS);
    Ok(Comparison {
        verdict,
        sample: diffs,
        differing_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{AffinityStat, FixedAffinity, LinkageKind};
    use crate::graph::SegmentId;

    fn row(s: u64, a: u64, v: u128) -> MergeRow {
        MergeRow {
            survivor: SegmentId::new(s).unwrap(),
            absorbed: SegmentId::new(a).unwrap(),
            stat: AffinityStat::from_parts(LinkageKind::Mean, v, 1).unwrap(),
        }
    }

    fn dend(rows: Vec<MergeRow>) -> Dendrogram {
        let mut d = Dendrogram::new(LinkageKind::Mean, FixedAffinity::new(100).unwrap());
        d.rows = rows;
        d
    }

    #[test]
    fn flatten_examples() {
        assert_eq!(flatten(&dend(vec![]), [3, 1, 2]).unwrap(), vec![(1, 1), (2, 2), (3, 3)]);
        let d = dend(vec![row(1, 2, 500), row(1, 3, 400)]);
        assert_eq!(flatten(&d, [1, 2, 3]).unwrap(), vec![(1, 1), (2, 1), (3, 1)]);
        // Representative is the minimum even if rows name larger survivors.
        let d = dend(vec![row(4, 7, 500), row(2, 4, 400)]);
        assert_eq!(flatten(&d, [2, 4, 7]).unwrap(), vec![(2, 2), (4, 2), (7, 2)]);
        assert!(flatten(&d, [2, 4]).unwrap_err().is_corruption());
    }

    #[test]
    fn verdicts() {
        let a = dend(vec![row(1, 2, 500), row(1, 3, 400)]);
        assert_eq!(compare(&a, &a).unwrap().verdict, Verdict::Equal);
        let reordered = dend(vec![row(1, 3, 400), row(1, 2, 500)]);
        assert_eq!(compare(&a, &reordered).unwrap().verdict, Verdict::Equal);
        let perturbed = dend(vec![row(1, 2, 501), row(1, 3, 400)]);
        let c = compare(&a, &perturbed).unwrap();
        assert_eq!(c.verdict, Verdict::PartitionEqual);
        assert_eq!(c.sample, vec![RowDiff::OnlyInFirst(row(1, 2, 500)), RowDiff::OnlyInSecond(row(1, 2, 501))]);
        let other = dend(vec![row(1, 2, 500), row(3, 4, 400)]);
        assert_eq!(compare(&a, &other).unwrap().verdict, Verdict::Different);
        let mut max = a.clone();
        max.kind = LinkageKind::Max;
        assert!(matches!(compare(&a, &max), Err(Error::Config(_))));
    }
}
