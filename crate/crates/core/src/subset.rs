//! Index sets over `{0, …, d-1}`.
//!
//! Internally every index is zero-based. [`fmt::Display`] and
//! [`IndexSet::one_based`] render the one-based labels `x1 … xd` used in
//! reports and on the command line.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IndexSet(Vec<usize>);

impl IndexSet {
    pub fn empty() -> Self {
        IndexSet(Vec::new())
    }

    /// Builds a set from arbitrary indices; duplicates are removed.
    pub fn new<I: IntoIterator<Item = usize>>(indices: I) -> Self {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        IndexSet(v)
    }

    /// Builds a set from one-based labels. Zero is rejected.
    pub fn from_one_based<I: IntoIterator<Item = usize>>(labels: I) -> Option<Self> {
        let mut v = Vec::new();
        for l in labels {
            v.push(l.checked_sub(1)?);
        }
        Some(Self::new(v))
    }

    pub fn full(d: usize) -> Self {
        IndexSet((0..d).collect())
    }

    pub fn from_mask(mask: u64) -> Self {
        IndexSet((0..64).filter(|i| mask >> i & 1 == 1).collect())
    }

    /// Bit mask representation; `None` when an index is ≥ 64.
    pub fn mask(&self) -> Option<u64> {
        self.0
            .iter()
            .try_fold(0u64, |m, &i| (i < 64).then(|| m | 1 << i))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn max(&self) -> Option<usize> {
        self.0.last().copied()
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        IndexSet::new(self.iter().chain(other.iter()))
    }

    pub fn with(&self, j: usize) -> IndexSet {
        IndexSet::new(self.iter().chain(std::iter::once(j)))
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.0.iter().map(|i| i + 1).collect()
    }
}

impl fmt::Display for IndexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", i + 1)?;
        }
        write!(f, "}}")
    }
}

impl FromIterator<usize> for IndexSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        IndexSet::new(iter)
    }
}

/// Serialized as the sorted list of one-based labels.
impl Serialize for IndexSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.one_based().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for IndexSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let labels = Vec::<usize>::deserialize(deserializer)?;
        IndexSet::from_one_based(labels)
            .ok_or_else(|| serde::de::Error::custom("index labels start at 1"))
    }
}

/// All subsets of `{0..d}` with `1 ≤ |S| ≤ max_size`, ordered by size and
/// then lexicographically.
pub fn subsets_up_to(d: usize, max_size: usize) -> Vec<IndexSet> {
    let mut out = Vec::new();
    for size in 1..=max_size.min(d) {
        let mut comb: Vec<usize> = (0..size).collect();
        loop {
            out.push(IndexSet(comb.clone()));
            // advance to the next combination
            let mut i = size;
            while i > 0 && comb[i - 1] == d - size + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            comb[i - 1] += 1;
            for k in i..size {
                comb[k] = comb[k - 1] + 1;
            }
        }
    }
    out
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_order_and_count() {
        let s = subsets_up_to(4, 2);
        let shown: Vec<String> = s.iter().map(|x| x.to_string()).collect();
        assert_eq!(
            shown,
            ["{1}", "{2}", "{3}", "{4}", "{1,2}", "{1,3}", "{1,4}", "{2,3}", "{2,4}", "{3,4}"]
        );
        for d in 1..9 {
            for k in 1..=d {
                let expect: u128 = (1..=k).map(|i| binomial(d, i)).sum();
                assert_eq!(subsets_up_to(d, k).len() as u128, expect);
            }
        }
    }

    #[test]
    fn one_based_labels() {
        let s = IndexSet::from_one_based([3, 1, 3]).unwrap();
        assert_eq!(s.indices(), &[0, 2]);
        assert_eq!(s.one_based(), vec![1, 3]);
        assert!(IndexSet::from_one_based([0]).is_none());
        assert_eq!(IndexSet::from_mask(s.mask().unwrap()), s);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "[1,3]");
        assert_eq!(serde_json::from_str::<IndexSet>(&json).unwrap(), s);
        assert!(serde_json::from_str::<IndexSet>("[0]").is_err());
    }
}
