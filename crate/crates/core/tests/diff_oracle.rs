//! Edit distance and token diffs against brute-force enumeration of every
//! alignment of two short sequences.

mod common;

use bmc_core::bridging::{edit_distance, token_diff};
use common::{optimal, random_seq};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn agrees_with_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let (a, b) = (random_seq(&mut rng), random_seq(&mut rng));
        let (best, sets) = optimal(&a, &b);
        assert_eq!(edit_distance(&a, &b), best, "{a:?} {b:?}");
        let d = token_diff(&a, &b);
        assert_eq!(d.distance, best);
        assert!(
            sets.contains(&(d.indices_a.clone(), d.indices_b.clone())),
            "{a:?} {b:?}: {d:?} is not the unmatched set of any optimal alignment"
        );
    }
}

#[test]
fn small_cases_by_hand() {
    assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
    assert_eq!(edit_distance::<u8>(&[], &[]), 0);
    let d = token_diff(b"abc", b"abc");
    assert!(d.indices_a.is_empty() && d.indices_b.is_empty());
    let d = token_diff(b"", b"xy");
    assert_eq!(d.indices_b, vec![0, 1]);
}
