//! Unit-cost Levenshtein distance and alignment backtrace.

use serde::{Deserialize, Serialize};

/// Positions left unmatched by an optimal alignment of `a` against `b`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffResult {
    /// `diff(a | b)`, ascending.
    pub indices_a: Vec<usize>,
    /// `diff(b | a)`, ascending.
    pub indices_b: Vec<usize>,
    pub distance: usize,
}

impl DiffResult {
    pub fn is_empty(&self) -> bool {
        self.indices_a.is_empty() && self.indices_b.is_empty()
    }

    /// Diff with no varied tokens, for sequences known to be equal.
    pub fn empty() -> Self {
        DiffResult::default()
    }
}

/// One step of an alignment, indices into `a` and `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match(usize, usize),
    Substitute(usize, usize),
    /// `a[i]` has no partner.
    Delete(usize),
    /// `b[j]` has no partner.
    Insert(usize),
}

pub fn edit_distance<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn table<A: PartialEq>(a: &[A], b: &[A]) -> Vec<Vec<usize>> {
    let mut d = vec![vec![0; b.len() + 1]; a.len() + 1];
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=a.len() {
        d[i][0] = i;
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

/// An optimal alignment in forward order.
///
/// Ties are broken while walking back from the ends of both sequences: match,
/// then substitute, then a gap. When both a delete and an insert are optimal
/// the gap is taken from the sequence with the longer remaining prefix, and
/// at equal prefixes from the one whose current token is larger. The gap rule
/// is symmetric, so `token_diff(b, a)` is always the mirror of
/// `token_diff(a, b)`.
pub fn alignment<A: Ord>(a: &[A], b: &[A]) -> Vec<EditOp> {
    let d = table(a, b);
    let (mut i, mut j) = (a.len(), b.len());
    let mut ops = Vec::with_capacity(a.len().max(b.len()));
    while i > 0 || j > 0 {
        let here = d[i][j];
        if i > 0 && j > 0 && a[i - 1] == b[j - 1] && here == d[i - 1][j - 1] {
            ops.push(EditOp::Match(i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && a[i - 1] != b[j - 1] && here == d[i - 1][j - 1] + 1 {
            ops.push(EditOp::Substitute(i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if i > 0
            && here == d[i - 1][j] + 1
            && (j == 0 || here != d[i][j - 1] + 1 || prefer_delete(a, b, i, j))
        {
            ops.push(EditOp::Delete(i - 1));
            i -= 1;
        } else {
            ops.push(EditOp::Insert(j - 1));
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

fn prefer_delete<A: Ord>(a: &[A], b: &[A], i: usize, j: usize) -> bool {
    i > j || (i == j && a[i - 1] > b[j - 1])
}

pub fn token_diff<A: Ord>(a: &[A], b: &[A]) -> DiffResult {
    let mut out = DiffResult::default();
    for op in alignment(a, b) {
        match op {
            EditOp::Match(..) => {}
            EditOp::Substitute(i, j) => {
                out.indices_a.push(i);
                out.indices_b.push(j);
                out.distance += 1;
            }
            EditOp::Delete(i) => {
                out.indices_a.push(i);
                out.distance += 1;
            }
            EditOp::Insert(j) => {
                out.indices_b.push(j);
                out.distance += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn distance_basics() {
        assert_eq!(edit_distance(b"same", b"same"), 0);
        assert_eq!(edit_distance(b"", b"abc"), 3);
        assert_eq!(edit_distance(b"abc", b""), 3);
        // full DP table for kitten/sitting bottoms out at 3
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn diff_examples() {
        let d = token_diff(b"ABC", b"AXC");
        assert_eq!(
            (d.indices_a, d.indices_b, d.distance),
            (vec![1], vec![1], 1)
        );
        let d = token_diff(b"AB", b"ABCD");
        assert_eq!(
            (d.indices_a, d.indices_b, d.distance),
            (vec![], vec![2, 3], 2)
        );
        assert!(token_diff(b"xyz", b"xyz").is_empty());
    }

    #[test]
    fn tie_break_prefers_substitution_at_the_end() {
        // "ab" vs "ba": two substitutions and delete+insert both cost 2;
        // walking back, a[1]='b' vs b[1]='a' is substituted first.
        let d = token_diff(b"ab", b"ba");
        assert_eq!(d.indices_a, vec![0, 1]);
        assert_eq!(d.indices_b, vec![0, 1]);
    }

    proptest! {
        #[test]
        fn symmetric_and_consistent(
            a in proptest::collection::vec(0u32..4, 0..10),
            b in proptest::collection::vec(0u32..4, 0..10),
        ) {
            let ab = token_diff(&a, &b);
            let ba = token_diff(&b, &a);
            prop_assert_eq!(ab.distance, edit_distance(&a, &b));
            prop_assert_eq!(ab.distance, ba.distance);
            prop_assert_eq!(ab.distance == 0, a == b);
            prop_assert_eq!(&ab.indices_a, &ba.indices_b);
            prop_assert_eq!(&ab.indices_b, &ba.indices_a);
            prop_assert_eq!(a.len() - ab.indices_a.len(), b.len() - ab.indices_b.len());
            let keep = |s: &[u32], drop: &[usize]| -> Vec<u32> {
                s.iter().enumerate().filter(|(i, _)| !drop.contains(i)).map(|(_, &t)| t).collect()
            };
            prop_assert_eq!(keep(&a, &ab.indices_a), keep(&b, &ab.indices_b));
        }
    }
}
