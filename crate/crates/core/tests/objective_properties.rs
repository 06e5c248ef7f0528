//! Reduction laws, weight bounds and stability of the objectives.

use bmc_core::bridging::DiffResult;
use bmc_core::objectives::{
    bmc_weights, bmc_wrap, dpo_loss, evaluate, variant_loss, ObjectiveConfig, ObjectiveKind, PairScores, TokenWeights,
};
use proptest::prelude::*;

fn table(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..-1e-3, 1..=max_len)
}

fn pair_tables() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (table(10), table(10)).prop_flat_map(|(pc, pr)| {
        let (nc, nr) = (pc.len(), pr.len());
        (
            Just(pc),
            prop::collection::vec(-8.0f64..-1e-3, nc),
            Just(pr),
            prop::collection::vec(-8.0f64..-1e-3, nr),
        )
    })
}

fn diff_for(nc: usize, nr: usize) -> impl Strategy<Value = DiffResult> {
    (
        prop::collection::btree_set(0..nc, 0..=nc),
        prop::collection::btree_set(0..nr, 0..=nr),
    )
        .prop_map(|(a, b)| DiffResult {
            distance: a.len().max(b.len()),
            indices_a: a.into_iter().collect(),
            indices_b: b.into_iter().collect(),
        })
}

fn softplus_ref(x: f64) -> f64 {
    // independent form: ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|})
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn empty_diff_bmc_equals_dpo((pc, rc, pr, rr) in pair_tables(), beta in 0.01f64..0.5) {
        let mut cfg = ObjectiveConfig::<f64>::new(ObjectiveKind::Dpo).with_bmc(true);
        cfg.beta = beta;
        let s = PairScores::new(&pc, &rc, &pr, &rr);
        let wrapped = evaluate(&cfg, &s, Some(&DiffResult::empty())).unwrap();
        let plain = dpo_loss(&pc, &rc, &pr, &rr, &cfg).unwrap();
        prop_assert!((wrapped.loss - plain.loss).abs() < 1e-9);
        prop_assert!((wrapped.loss - plain.loss).abs() < 1e-12);
    }

    #[test]
    fn rdpo_without_penalty_is_dpo((pc, rc, pr, rr) in pair_tables()) {
        let mut cfg = ObjectiveConfig::<f64>::new(ObjectiveKind::RDpo);
        cfg.alpha = Some(0.0);
        let s = PairScores::new(&pc, &rc, &pr, &rr);
        let r = variant_loss(ObjectiveKind::RDpo, &s, None, &cfg).unwrap();
        let d = dpo_loss(&pc, &rc, &pr, &rr, &cfg).unwrap();
        prop_assert!((r.loss - d.loss).abs() < 1e-9);
    }

    #[test]
    fn dpo_matches_independent_formula((pc, rc, pr, rr) in pair_tables(), beta in 0.0f64..1.0) {
        let mut cfg = ObjectiveConfig::<f64>::new(ObjectiveKind::Dpo);
        cfg.beta = beta;
        let z = beta * (pc.iter().zip(&rc).map(|(a, b)| a - b).sum::<f64>()
            - pr.iter().zip(&rr).map(|(a, b)| a - b).sum::<f64>());
        let out = dpo_loss(&pc, &rc, &pr, &rr, &cfg).unwrap();
        prop_assert!((out.loss - softplus_ref(-z)).abs() < 1e-12);
        prop_assert!(out.loss >= 0.0);
    }

    #[test]
    fn weight_bounds(
        (pc, pr, diff) in (table(10), table(10)).prop_flat_map(|(pc, pr)| {
            let (nc, nr) = (pc.len(), pr.len());
            (Just(pc), Just(pr), diff_for(nc, nr))
        }),
        delta in 0.0f64..6.0,
    ) {
        let w = bmc_weights(&pc, &pr, &diff, delta).unwrap();
        for (side, idx) in [(&w.chosen_weights, &diff.indices_a), (&w.rejected_weights, &diff.indices_b)] {
            for (t, &l) in side.iter().enumerate() {
                prop_assert!(l >= 1.0 && l <= 1.0 + delta + 1e-12);
                if !idx.contains(&t) {
                    prop_assert_eq!(l, 1.0);
                } else if delta >= 1.0 {
                    prop_assert!(l >= 2.0);
                }
            }
        }
    }

    #[test]
    fn delta_one_gives_fixed_weights(
        (pc, pr, diff) in (table(10), table(10)).prop_flat_map(|(pc, pr)| {
            let (nc, nr) = (pc.len(), pr.len());
            (Just(pc), Just(pr), diff_for(nc, nr))
        }),
    ) {
        let w = bmc_weights(&pc, &pr, &diff, 1.0).unwrap();
        for &i in &diff.indices_a {
            prop_assert_eq!(w.chosen_weights[i], 2.0);
        }
        for &j in &diff.indices_b {
            prop_assert_eq!(w.rejected_weights[j], 2.0);
        }
    }

    #[test]
    fn beta_keeps_margin_sign((pc, rc, pr, rr) in pair_tables(), b1 in 1e-3f64..5.0, b2 in 1e-3f64..5.0) {
        let mut c1 = ObjectiveConfig::<f64>::new(ObjectiveKind::Dpo);
        c1.beta = b1;
        let mut c2 = c1.clone();
        c2.beta = b2;
        let m1 = dpo_loss(&pc, &rc, &pr, &rr, &c1).unwrap().margin_input;
        let m2 = dpo_loss(&pc, &rc, &pr, &rr, &c2).unwrap().margin_input;
        prop_assert_eq!(m1.signum(), m2.signum());
    }

    #[test]
    fn raising_chosen_lowers_loss((pc, rc, pr, rr) in pair_tables(), bump in 1e-3f64..2.0, at in 0usize..10) {
        let cfg = ObjectiveConfig::<f64>::new(ObjectiveKind::Dpo);
        let before = dpo_loss(&pc, &rc, &pr, &rr, &cfg).unwrap().loss;
        let mut raised = pc.clone();
        let i = at % raised.len();
        raised[i] += bump;
        let after = dpo_loss(&raised, &rc, &pr, &rr, &cfg).unwrap().loss;
        prop_assert!(after < before);
    }

    #[test]
    fn unit_weights_reduce_every_variant((pc, rc, pr, rr) in pair_tables()) {
        let s = PairScores::new(&pc, &rc, &pr, &rr);
        for kind in [ObjectiveKind::Dpo, ObjectiveKind::Ipo, ObjectiveKind::Orpo, ObjectiveKind::RDpo, ObjectiveKind::SimPo] {
            let cfg = ObjectiveConfig::<f64>::with_defaults(kind);
            let base = variant_loss(kind, &s, None, &cfg).unwrap();
            let w = bmc_wrap(kind, &TokenWeights::ones(pc.len(), pr.len()), &s, &cfg).unwrap();
            prop_assert_eq!(base.loss.to_bits(), w.loss.to_bits());
        }
    }
}

#[test]
fn finite_for_large_margins() {
    let mut cfg = ObjectiveConfig::<f64>::new(ObjectiveKind::Dpo);
    cfg.beta = 1.0;
    for z in [-50.0, -20.0, 0.0, 20.0, 50.0] {
        let out = dpo_loss(&[z], &[0.0], &[0.0], &[0.0], &cfg).unwrap();
        assert!(out.loss.is_finite() && out.loss >= 0.0, "{z}");
        assert!(out.grad_chosen.iter().all(|g| g.is_finite()));
        let f32_out = dpo_loss::<f32>(&[z as f32], &[0.0], &[0.0], &[0.0], &ObjectiveConfig {
            beta: 1.0,
            ..ObjectiveConfig::new(ObjectiveKind::Dpo)
        })
        .unwrap();
        assert!(f32_out.loss.is_finite());
    }
}

#[test]
fn hand_sheet_dpo_bmc_with_weights_from_probabilities() {
    // chosen token 0 is a diff token with π = 0.5 → λ = 1 + min(2, 3) = 3
    // rejected token 1 is a diff token with π = e^{-0.6} ≈ 0.5488 → λ = 1 + 1/π = 1 + e^{0.6}
    let pc = [0.5f64.ln(), -0.4];
    let rc = [-0.5, -0.3];
    let pr = [-1.0, -0.6];
    let rr = [-0.8, -0.9];
    let diff = DiffResult {
        indices_a: vec![0],
        indices_b: vec![1],
        distance: 1,
    };
    let cfg = ObjectiveConfig::<f64>::new(ObjectiveKind::Dpo).with_bmc(true);
    let out = evaluate(&cfg, &PairScores::new(&pc, &rc, &pr, &rr), Some(&diff)).unwrap();

    let lam_w = 3.0;
    let lam_l = 1.0 + 0.6f64.exp();
    let sw = lam_w * (0.5f64.ln() + 0.5) + (-0.4 + 0.3);
    let sl = (-1.0 + 0.8) + lam_l * (-0.6 + 0.9);
    let z = 0.05 * (sw - sl);
    assert!((out.loss - softplus_ref(-z)).abs() < 1e-14);
}
