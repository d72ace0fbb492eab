//! Linkage criteria as exact interface statistics.
//!
//! Affinities are ingested as fixed-point integers (10^-6 resolution) and
//! every later step works on integers: combining two statistics is an
//! integer sum or max, and comparing two MEAN statistics cross-multiplies
//! with a 192-bit product. Nothing is ever rounded, so combining partial
//! interfaces in any grouping or order yields the same bits.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-point scale: `1_000_000` represents an affinity of 1.0.
pub const AFFINITY_SCALE: u32 = 1_000_000;

/// An affinity in `[0, 1]` stored as millionths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FixedAffinity(u32);

impl FixedAffinity {
    pub const ZERO: FixedAffinity = FixedAffinity(0);
    pub const ONE: FixedAffinity = FixedAffinity(AFFINITY_SCALE);

    pub fn new(millionths: u32) -> Result<Self> {
        if millionths > AFFINITY_SCALE {
            return Err(Error::Malformed(format!(
                "affinity {millionths} exceeds {AFFINITY_SCALE}"
            )));
        }
        Ok(FixedAffinity(millionths))
    }

    #[inline]
    pub fn get(self) -> u32 {
        self.0
    }

    /// Parses a decimal in `[0, 1]` with at most six fractional digits.
    ///
    /// Scaling is exact; inputs that would need rounding are refused.
    pub fn parse_decimal(text: &str) -> Result<Self> {
        let bad = |why: &str| Error::Malformed(format!("threshold {text:?}: {why}"));
        let text = text.trim();
        let (int_part, frac_part) = match text.split_once('.') {
            Some((i, f)) => (i, f),
            None => (text, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(bad("empty"));
        }
        if !int_part.chars().all(|c| c.is_ascii_digit())
            || !frac_part.chars().all(|c| c.is_ascii_digit())
        {
            return Err(bad("not a plain decimal"));
        }
        if frac_part.len() > 6 {
            return Err(bad("more than 6 decimal places"));
        }
        let whole: u64 = if int_part.is_empty() {
            0
        } else {
            int_part.parse().map_err(|_| bad("integer part too large"))?
        };
        let mut frac: u64 = 0;
        for (i, digit) in frac_part.bytes().enumerate() {
            frac += u64::from(digit - b'0') * 10u64.pow(5 - i as u32);
        }
        let scaled = whole
            .checked_mul(u64::from(AFFINITY_SCALE))
            .and_then(|w| w.checked_add(frac))
            .ok_or_else(|| bad("out of range"))?;
        if scaled > u64::from(AFFINITY_SCALE) {
            return Err(bad("outside [0, 1]"));
        }
        Ok(FixedAffinity(scaled as u32))
    }
}

impl fmt::Display for FixedAffinity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / AFFINITY_SCALE, self.0 % AFFINITY_SCALE)
    }
}

/// Linkage criterion. Serialized as one byte in every file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum LinkageKind {
    Mean = 0,
    Max = 1,
}

impl LinkageKind {
    pub const ALL: [LinkageKind; 2] = [LinkageKind::Mean, LinkageKind::Max];

    pub fn to_byte(self) -> u8 {
        self as u8
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(LinkageKind::Mean),
            1 => Some(LinkageKind::Max),
            _ => None,
        }
    }
}

impl fmt::Display for LinkageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LinkageKind::Mean => "mean",
            LinkageKind::Max => "max",
        })
    }
}

impl FromStr for LinkageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(LinkageKind::Mean),
            "max" => Ok(LinkageKind::Max),
            other => Err(Error::Malformed(format!("unknown linkage {other:?}"))),
        }
    }
}

/// Serialized size of an [`AffinityStat`].
pub const STAT_BYTES: usize = 24;

/// Combinable statistic of one interface between two clusters.
///
/// For MEAN, `sum` is the total of fixed-point affinities over `count`
/// voxel-pair contributions. For MAX, `sum` is the largest contribution and
/// `count` is carried along but does not affect the value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AffinityStat {
    sum: u128,
    count: u64,
}

impl AffinityStat {
    /// Statistic of `contacts` voxel pairs that all have affinity `a`.
    pub fn new(kind: LinkageKind, a: FixedAffinity, contacts: u64) -> Result<Self> {
        if contacts == 0 {
            return Err(Error::Malformed("contact count must be at least 1".into()));
        }
        let sum = match kind {
            LinkageKind::Mean => u128::from(a.get()) * u128::from(contacts),
            LinkageKind::Max => u128::from(a.get()),
        };
        Ok(AffinityStat {
            sum,
            count: contacts,
        })
    }

    /// Rebuilds a statistic from stored fields, checking the value range.
    pub fn from_parts(kind: LinkageKind, sum: u128, count: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Malformed("stat with zero count".into()));
        }
        let limit = match kind {
            LinkageKind::Mean => u128::from(AFFINITY_SCALE) * u128::from(count),
            LinkageKind::Max => u128::from(AFFINITY_SCALE),
        };
        if sum > limit {
            return Err(Error::Malformed(format!(
                "stat sum {sum} exceeds bound {limit} for count {count}"
            )));
        }
        Ok(AffinityStat { sum, count })
    }

    #[inline]
    pub fn sum(&self) -> u128 {
        self.sum
    }

    #[inline]
    pub fn count(&self) -> u64 {
        self.count
    }

    #[inline]
    #[must_use]
    pub fn combine(self, kind: LinkageKind, other: AffinityStat) -> AffinityStat {
        let sum = match kind {
            LinkageKind::Mean => self.sum + other.sum,
            LinkageKind::Max => self.sum.max(other.sum),
        };
        AffinityStat {
            sum,
            count: self.count + other.count,
        }
    }

    /// Exact order of the represented affinity values.
    #[inline]
    pub fn compare(&self, kind: LinkageKind, other: &AffinityStat) -> Ordering {
        match kind {
            LinkageKind::Max => self.sum.cmp(&other.sum),
            LinkageKind::Mean => {
                if self.count == other.count {
                    return self.sum.cmp(&other.sum);
                }
                widening_mul(self.sum, other.count).cmp(&widening_mul(other.sum, self.count))
            }
        }
    }

    /// True when the represented value is at least `threshold`.
    #[inline]
    pub fn reaches(&self, kind: LinkageKind, threshold: FixedAffinity) -> bool {
        let t = u128::from(threshold.get());
        match kind {
            LinkageKind::Max => self.sum >= t,
            LinkageKind::Mean => self.sum >= t * u128::from(self.count),
        }
    }

    /// Floor of the value, for human-readable output only.
    pub fn value_rounded(&self, kind: LinkageKind) -> FixedAffinity {
        match kind {
            LinkageKind::Max => FixedAffinity(self.sum as u32),
            LinkageKind::Mean => FixedAffinity((self.sum / u128::from(self.count)) as u32),
        }
    }

    pub fn to_le_bytes(&self) -> [u8; STAT_BYTES] {
        let mut out = [0u8; STAT_BYTES];
        out[..16].copy_from_slice(&self.sum.to_le_bytes());
        out[16..].copy_from_slice(&self.count.to_le_bytes());
        out
    }

    pub fn from_le_bytes(kind: LinkageKind, bytes: &[u8; STAT_BYTES]) -> Result<Self> {
        let sum = u128::from_le_bytes(bytes[..16].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[16..].try_into().unwrap());
        Self::from_parts(kind, sum, count)
    }
}

/// `a * b` as a (high, low) pair, compared lexicographically.
#[inline]
fn widening_mul(a: u128, b: u64) -> (u128, u64) {
    let b = u128::from(b);
    let low = (a & u128::from(u64::MAX)) * b;
    let high = (a >> 64) * b + (low >> 64);
    (high, low as u64)
}

/// Evaluates the no-reversal condition for one cluster triple.
///
/// If `ij` is at least as strong as both `ik` and `jk`, merging I and J
/// must not produce an interface to K stronger than the stronger of the
/// two. Vacuously true when the antecedent fails.
pub fn check_reducibility(
    kind: LinkageKind,
    ij: &AffinityStat,
    ik: &AffinityStat,
    jk: &AffinityStat,
) -> bool {
    let strongest = if ik.compare(kind, jk) == Ordering::Less { jk } else { ik };
    if ij.compare(kind, strongest) == Ordering::Less {
        return true;
    }
    let merged = ik.combine(kind, *jk);
    merged.compare(kind, strongest) != Ordering::Greater
}

#[cfg(test)]
mod tests {
    use super::*;
    use LinkageKind::{Max, Mean};

    fn fa(v: u32) -> FixedAffinity {
        FixedAffinity::new(v).unwrap()
    }

    fn st(kind: LinkageKind, sum: u128, count: u64) -> AffinityStat {
        AffinityStat::from_parts(kind, sum, count).unwrap()
    }

    #[test]
    fn make_stat_examples() {
        let s = AffinityStat::new(Mean, fa(700_000), 1).unwrap();
        assert_eq!((s.sum(), s.count()), (700_000, 1));
        let s = AffinityStat::new(Mean, fa(500_000), 4).unwrap();
        assert_eq!((s.sum(), s.count()), (2_000_000, 4));
        let s = AffinityStat::new(Max, fa(300_000), 7).unwrap();
        assert_eq!((s.sum(), s.count()), (300_000, 7));
    }

    #[test]
    fn make_stat_rejects_zero_contacts() {
        assert!(matches!(
            AffinityStat::new(Mean, fa(1), 0),
            Err(Error::Malformed(_))
        ));
        assert!(AffinityStat::from_parts(Max, 1, 0).is_err());
        assert!(AffinityStat::from_parts(Mean, 2_000_001, 2).is_err());
        assert!(AffinityStat::from_parts(Max, 1_000_001, 5).is_err());
        assert!(FixedAffinity::new(1_000_001).is_err());
    }

    #[test]
    fn combine_examples() {
        let c = st(Mean, 900_000, 1).combine(Mean, st(Mean, 300_000, 1));
        assert_eq!((c.sum(), c.count()), (1_200_000, 2));
        assert_eq!(c.value_rounded(Mean).get(), 600_000);
        let c = st(Max, 900_000, 1).combine(Max, st(Max, 300_000, 5));
        assert_eq!((c.sum(), c.count()), (900_000, 6));
    }

    #[test]
    fn compare_examples() {
        assert_eq!(st(Mean, 1, 2).compare(Mean, &st(Mean, 2, 4)), Ordering::Equal);
        assert_eq!(
            st(Mean, 699_999, 1).compare(Mean, &st(Mean, 1_400_000, 2)),
            Ordering::Less
        );
        assert_eq!(st(Max, 5, 9).compare(Max, &st(Max, 5, 1)), Ordering::Equal);
    }

    #[test]
    fn compare_survives_huge_counts() {
        // Products here exceed u128; the widened comparison must still be exact.
        let big = u64::MAX / 2;
        let a = st(Mean, u128::from(big) * 999_999, big);
        let b = st(Mean, u128::from(big - 1) * 999_999 + 1, big - 1);
        assert_eq!(a.compare(Mean, &b), Ordering::Less);
        assert_eq!(b.compare(Mean, &a), Ordering::Greater);
        assert_eq!(a.compare(Mean, &a), Ordering::Equal);
    }

    #[test]
    fn value_rounded_examples() {
        assert_eq!(st(Mean, 1_200_000, 2).value_rounded(Mean).get(), 600_000);
        assert_eq!(st(Mean, 1_000_001, 2).value_rounded(Mean).get(), 500_000);
        assert_eq!(st(Max, 42, 100).value_rounded(Max).get(), 42);
    }

    #[test]
    fn reaches_threshold_is_exact() {
        let s = st(Mean, 1_400_000, 3); // 466666.67
        assert!(s.reaches(Mean, fa(466_666)));
        assert!(!s.reaches(Mean, fa(466_667)));
        assert!(st(Max, 10, 3).reaches(Max, fa(10)));
        assert!(!st(Max, 10, 3).reaches(Max, fa(11)));
    }

    #[test]
    fn reducibility_examples() {
        assert!(check_reducibility(
            Mean,
            &st(Mean, 900_000, 1),
            &st(Mean, 500_000, 1),
            &st(Mean, 300_000, 1)
        ));
        assert!(check_reducibility(
            Max,
            &st(Max, 1, 1),
            &st(Max, 900_000, 3),
            &st(Max, 2, 1)
        ));
    }

    #[test]
    fn decimal_threshold_parsing() {
        assert_eq!(FixedAffinity::parse_decimal("0.3").unwrap().get(), 300_000);
        assert_eq!(FixedAffinity::parse_decimal("1").unwrap().get(), 1_000_000);
        assert_eq!(FixedAffinity::parse_decimal("0.000001").unwrap().get(), 1);
        assert_eq!(FixedAffinity::parse_decimal(".5").unwrap().get(), 500_000);
        assert!(FixedAffinity::parse_decimal("0.0000001").is_err());
        assert!(FixedAffinity::parse_decimal("1.5").is_err());
        assert!(FixedAffinity::parse_decimal("-0.1").is_err());
        assert!(FixedAffinity::parse_decimal("abc").is_err());
        assert_eq!(FixedAffinity::new(300_000).unwrap().to_string(), "0.300000");
    }

    #[test]
    fn stat_bytes_round_trip() {
        let s = st(Mean, 123_456_789_012, 987_654);
        assert_eq!(AffinityStat::from_le_bytes(Mean, &s.to_le_bytes()).unwrap(), s);
    }
}
