//! Parameter gradients of the scorers against central finite differences.

use bmc_core::model::{Architecture, Model};

fn central_difference(model: &Model<f64>, eps: f64, f: impl Fn(&Model<f64>) -> f64) -> Vec<f64> {
    let mut probe = model.clone();
    (0..model.num_params())
        .map(|i| {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + eps;
            let up = f(&probe);
            probe.params_mut()[i] = orig - eps;
            let down = f(&probe);
            probe.params_mut()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn sft_gradient_matches_finite_differences() {
    let arch = Architecture::Transformer {
        vocab: 7,
        context: 12,
        width: 8,
        layers: 2,
        heads: 2,
        hidden: 12,
        zero_head: false,
    };
    let model = Model::<f64>::new(42, arch).unwrap();
    assert!(model.num_params() <= 5_000, "{}", model.num_params());
    let (prompt, target) = ([1u32, 4, 2], [3u32, 0, 6, 5]);

    let mut grad = model.zeros_like_params();
    model.sft_loss_grad(&prompt, &target, &mut grad).unwrap();
    let fd = central_difference(&model, 1e-5, |m| m.sft_loss(&prompt, &target).unwrap());
    let err = max_rel_error(&grad, &fd);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn weighted_logprob_gradient_matches_finite_differences() {
    let model = Model::<f64>::new(7, Architecture::tiny(5)).unwrap();
    let (prompt, response) = ([0u32, 1, 2, 3], [4u32, 4, 1]);
    let weights = [0.3, -1.7, 2.2];
    let f = |m: &Model<f64>| {
        m.score(&prompt, &response)
            .unwrap()
            .iter()
            .zip(&weights)
            .map(|(lp, w)| lp * w)
            .sum::<f64>()
    };
    let trace = model.forward(&prompt, &response).unwrap();
    let mut grad = model.zeros_like_params();
    model.backward(&trace, &weights, &mut grad).unwrap();
    let fd = central_difference(&model, 1e-5, f);
    assert!(max_rel_error(&grad, &fd) < 1e-4);
}

#[test]
fn bigram_gradient_matches_finite_differences() {
    let model = Model::<f64>::new(
        3,
        Architecture::Bigram {
            vocab: 4,
            context: 8,
        },
    )
    .unwrap();
    let (prompt, target) = ([2u32], [0u32, 1, 1, 3]);
    let mut grad = model.zeros_like_params();
    model.sft_loss_grad(&prompt, &target, &mut grad).unwrap();
    let fd = central_difference(&model, 1e-5, |m| m.sft_loss(&prompt, &target).unwrap());
    assert!(max_rel_error(&grad, &fd) < 1e-4);
}

/// Bigram counts of "abab" with add-one smoothing over a 4-token vocabulary
/// (a=0, b=1, c=2, d=3), enumerated by hand:
///   a→b: 2, b→a: 1, everything else 0.
///   P(b|a) = 3/6, P(a|a) = P(c|a) = P(d|a) = 1/6
///   P(a|b) = 2/5, P(b|b) = P(c|b) = P(d|b) = 1/5
fn abab_bigram() -> Model<f64> {
    let vocab = 4;
    let counts = [
        [0.0, 2.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.0; 4],
        [0.0; 4],
        [0.0; 4],
    ];
    let params = counts
        .iter()
        .flat_map(|row| row.iter().map(|c: &f64| (c + 1.0).ln()))
        .collect();
    Model::from_parts(Architecture::Bigram { vocab, context: 16 }, 0, params).unwrap()
}

#[test]
fn bigram_scores_match_hand_table() {
    let m = abab_bigram();
    // prompt "a", response "bab": P(b|a), P(a|b), P(b|a)
    let table = m.score(&[0], &[1, 0, 1]).unwrap();
    let expected = [
        (3.0f64 / 6.0).ln(),
        (2.0f64 / 5.0).ln(),
        (3.0f64 / 6.0).ln(),
    ];
    for (got, want) in table.iter().zip(expected) {
        assert!((got - want).abs() < 1e-12);
    }
    // sft target "ab" after prompt "b": -ln P(a|b) - ln P(b|a)
    let loss = m.sft_loss(&[1], &[0, 1]).unwrap();
    let want = -(2.0f64 / 5.0).ln() - (3.0f64 / 6.0).ln();
    assert!((loss - want).abs() < 1e-12);
    // a model putting probability one on the target path has zero loss
    let mut sharp = vec![-1e9; 20];
    sharp[4 * 4 + 2] = 0.0; // start → c
    sharp[2 * 4 + 3] = 0.0; // c → d
    let sharp = Model::from_parts(
        Architecture::Bigram {
            vocab: 4,
            context: 8,
        },
        0,
        sharp,
    )
    .unwrap();
    assert_eq!(sharp.sft_loss(&[], &[2, 3]).unwrap(), 0.0);
}
