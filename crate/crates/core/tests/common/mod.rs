//! Brute-force enumeration of every alignment of two short sequences.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type DiffSets = (Vec<usize>, Vec<usize>);

/// Every alignment of `a[i..]` with `b[j..]` as (cost, unmatched a, unmatched b).
fn enumerate(a: &[u8], b: &[u8], i: usize, j: usize, out: &mut Vec<(usize, Vec<usize>, Vec<usize>)>) {
    if i == a.len() && j == b.len() {
        out.push((0, vec![], vec![]));
        return;
    }
    let mut extend = |cost: usize, ua: Option<usize>, ub: Option<usize>, ni: usize, nj: usize| {
        let mut tail = Vec::new();
        enumerate(a, b, ni, nj, &mut tail);
        for (c, mut xa, mut xb) in tail {
            if let Some(x) = ua {
                xa.insert(0, x);
            }
            if let Some(y) = ub {
                xb.insert(0, y);
            }
            out.push((c + cost, xa, xb));
        }
    };
    if i < a.len() && j < b.len() {
        if a[i] == b[j] {
            extend(0, None, None, i + 1, j + 1);
        } else {
            extend(1, Some(i), Some(j), i + 1, j + 1);
        }
    }
    if i < a.len() {
        extend(1, Some(i), None, i + 1, j);
    }
    if j < b.len() {
        extend(1, None, Some(j), i, j + 1);
    }
}

pub fn optimal(a: &[u8], b: &[u8]) -> (usize, BTreeSet<DiffSets>) {
    let mut all = Vec::new();
    enumerate(a, b, 0, 0, &mut all);
    let best = all.iter().map(|x| x.0).min().unwrap();
    let sets = all
        .into_iter()
        .filter(|x| x.0 == best)
        .map(|(_, xa, xb)| (xa, xb))
        .collect();
    (best, sets)
}

pub fn random_seq(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let len = rng.gen_range(0..=6);
    (0..len).map(|_| rng.gen_range(0..3)).collect()
}

