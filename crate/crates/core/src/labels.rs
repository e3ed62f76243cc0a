use std::fmt;

use serde::{Deserialize, Serialize};

/// Sorted, de-duplicated set of label ids attached to one item.
///
/// Single-label data carries exactly one id; multi-label data one or more.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<u16>", into = "Vec<u16>")]
pub struct LabelSet(Vec<u16>);

impl LabelSet {
    pub fn new(mut ids: Vec<u16>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        LabelSet(ids)
    }

    pub fn single(id: u16) -> Self {
        LabelSet(vec![id])
    }

    pub fn ids(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: u16) -> bool {
        self.0.binary_search(&id).is_ok()
    }

    /// Non-empty intersection, by merge over the two sorted lists.
    pub fn intersects(&self, other: &LabelSet) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }

    pub fn first(&self) -> Option<u16> {
        self.0.first().copied()
    }
}

impl From<Vec<u16>> for LabelSet {
    fn from(ids: Vec<u16>) -> Self {
        LabelSet::new(ids)
    }
}

impl From<LabelSet> for Vec<u16> {
    fn from(set: LabelSet) -> Self {
        set.0
    }
}

impl FromIterator<u16> for LabelSet {
    fn from_iter<I: IntoIterator<Item = u16>>(iter: I) -> Self {
        LabelSet::new(iter.into_iter().collect())
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u16::to_string).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intersection_rules() {
        let a = LabelSet::new(vec![3, 1]);
        assert!(a.intersects(&LabelSet::new(vec![7, 3])));
        assert!(!LabelSet::single(1).intersects(&LabelSet::single(2)));
        assert!(!LabelSet::default().intersects(&a));
        assert_eq!(a.ids(), &[1, 3]);
    }
}
