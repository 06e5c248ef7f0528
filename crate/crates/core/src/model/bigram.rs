//! Bigram scorer: logits row selected by the previous token.
//!
//! Layout: `(vocab + 1) × vocab`, row `vocab` is the start-of-sequence row.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::{log_softmax_in_place, Scalar};

pub(super) struct BigramCache {
    prev: Vec<usize>,
    targets: Vec<usize>,
}

pub(super) fn init<T: Scalar, R: Rng>(vocab: usize, rng: &mut R) -> Vec<T> {
    let normal = Normal::new(0.0, 0.5).expect("valid normal");
    (0..(vocab + 1) * vocab)
        .map(|_| T::lit(normal.sample(rng)))
        .collect()
}

pub(super) fn forward<T: Scalar>(
    params: &[T],
    vocab: usize,
    prompt: &[u32],
    response: &[u32],
) -> (Vec<Vec<T>>, BigramCache) {
    let mut prev = Vec::with_capacity(response.len());
    let mut last = prompt.last().map_or(vocab, |&t| t as usize);
    for &tok in response {
        prev.push(last);
        last = tok as usize;
    }
    let rows = prev
        .iter()
        .map(|&p| {
            let mut row = params[p * vocab..(p + 1) * vocab].to_vec();
            log_softmax_in_place(&mut row);
            row
        })
        .collect();
    let targets = response.iter().map(|&t| t as usize).collect();
    (rows, BigramCache { prev, targets })
}

pub(super) fn backward<T: Scalar>(
    vocab: usize,
    cache: &BigramCache,
    rows: &[Vec<T>],
    d_logprobs: &[T],
    grad: &mut [T],
) {
    for (((&p, &target), row), &g) in cache
        .prev
        .iter()
        .zip(&cache.targets)
        .zip(rows)
        .zip(d_logprobs)
    {
        if g == T::zero() {
            continue;
        }
        let out = &mut grad[p * vocab..(p + 1) * vocab];
        for (j, (o, &lp)) in out.iter_mut().zip(row).enumerate() {
            let indicator = if j == target { T::one() } else { T::zero() };
            *o += g * (indicator - lp.exp());
        }
    }
}
