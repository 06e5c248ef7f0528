//! Preference objectives over per-token score tables.
//!
//! Every loss returns a [`LossBreakdown`] that carries, next to the value,
//! its derivative with respect to each policy log-probability. Pushing those
//! through [`Model::backward`](crate::model::Model::backward) yields the exact
//! parameter gradient. Token weights produced by [`bmc_weights`] enter these
//! derivatives as constants, which is the stop-gradient on `λ`.
//!
//! Reference-based losses (DPO, IPO, R-DPO) work on per-token log-ratios
//! `Δ^t = log π_θ(t) − log π_ref(t)`; SimPO, ORPO and FIGA only read the
//! policy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bridging::DiffResult;
use crate::error::{Error, Result};
use crate::scalar::{log1m_exp, sigmoid, softplus, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveKind {
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "ipo")]
    Ipo,
    #[serde(rename = "orpo")]
    Orpo,
    #[serde(rename = "r-dpo")]
    RDpo,
    #[serde(rename = "simpo")]
    SimPo,
    #[serde(rename = "figa")]
    Figa,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 6] = [
        ObjectiveKind::Dpo,
        ObjectiveKind::Ipo,
        ObjectiveKind::Orpo,
        ObjectiveKind::RDpo,
        ObjectiveKind::SimPo,
        ObjectiveKind::Figa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Dpo => "dpo",
            ObjectiveKind::Ipo => "ipo",
            ObjectiveKind::Orpo => "orpo",
            ObjectiveKind::RDpo => "r-dpo",
            ObjectiveKind::SimPo => "simpo",
            ObjectiveKind::Figa => "figa",
        }
    }

    pub fn uses_reference(self) -> bool {
        matches!(self, ObjectiveKind::Dpo | ObjectiveKind::Ipo | ObjectiveKind::RDpo)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s || (s == "rdpo" && *k == ObjectiveKind::RDpo))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown objective `{s}`")))
    }
}

/// How `λ` interacts with the `1/|y|` normalization of SimPO and ORPO.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthNorm {
    /// `λ` multiplies each term inside the sum; divide by the token count.
    #[default]
    TokenCount,
    /// Weighted mean: divide by `Σ λ` instead.
    WeightSum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig<T> {
    pub kind: ObjectiveKind,
    pub bmc: bool,
    /// `β`.
    pub beta: T,
    /// `δ`, the cap on `1/π` inside `λ`.
    pub delta: T,
    /// IPO `τ`.
    pub tau: Option<T>,
    /// R-DPO length penalty `α`.
    pub alpha: Option<T>,
    /// SimPO margin `γ`.
    pub gamma: Option<T>,
    /// ORPO `λ`.
    pub orpo_weight: Option<T>,
    pub figa_alpha: Option<T>,
    pub figa_beta: Option<T>,
    pub length_norm: LengthNorm,
}

impl<T: Scalar> ObjectiveConfig<T> {
    /// `β = 0.05`, `δ = 3.0`, no kind-specific hyperparameters.
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveConfig {
            kind,
            bmc: false,
            beta: T::lit(0.05),
            delta: T::lit(3.0),
            tau: None,
            alpha: None,
            gamma: None,
            orpo_weight: None,
            figa_alpha: None,
            figa_beta: None,
            length_norm: LengthNorm::TokenCount,
        }
    }

    /// [`ObjectiveConfig::new`] with every hyperparameter filled from inside
    /// the usual search ranges (SimPO also moves `β` to 2.0).
    pub fn with_defaults(kind: ObjectiveKind) -> Self {
        let mut c = Self::new(kind);
        c.tau = Some(T::lit(0.1));
        c.alpha = Some(T::lit(0.05));
        c.gamma = Some(T::lit(0.5));
        c.orpo_weight = Some(T::lit(0.5));
        c.figa_alpha = Some(T::one());
        c.figa_beta = Some(T::one());
        if kind == ObjectiveKind::SimPo {
            c.beta = T::lit(2.0);
        }
        c
    }

    pub fn with_bmc(mut self, bmc: bool) -> Self {
        self.bmc = bmc;
        self
    }

    /// `dpo`, `simpo-bmc`, …
    pub fn name(&self) -> String {
        if self.bmc {
            format!("{}-bmc", self.kind)
        } else {
            self.kind.to_string()
        }
    }

    pub fn uses_reference(&self) -> bool {
        self.kind.uses_reference()
    }

    pub fn needs_diff(&self) -> bool {
        self.bmc || self.kind == ObjectiveKind::Figa
    }

    fn require(v: Option<T>, name: &'static str) -> Result<T> {
        v.ok_or(Error::MissingHyperparameter(name))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.beta >= T::zero() && self.beta.is_finite()) {
            return bad(format!("beta must be a finite non-negative number, got {}", self.beta));
        }
        if !(self.delta >= T::zero()) {
            return bad(format!("delta must be non-negative, got {}", self.delta));
        }
        if self.bmc && self.kind == ObjectiveKind::Figa {
            return bad("FIGA already weights diff tokens and cannot be BMC-wrapped".into());
        }
        match self.kind {
            ObjectiveKind::Ipo => {
                if Self::require(self.tau, "tau")? <= T::zero() {
                    return bad("tau must be positive".into());
                }
            }
            ObjectiveKind::RDpo => {
                if Self::require(self.alpha, "alpha")? < T::zero() {
                    return bad("alpha must be non-negative".into());
                }
            }
            ObjectiveKind::SimPo => {
                Self::require(self.gamma, "gamma")?;
            }
            ObjectiveKind::Orpo => {
                if Self::require(self.orpo_weight, "orpo_weight")? < T::zero() {
                    return bad("orpo_weight must be non-negative".into());
                }
            }
            ObjectiveKind::Figa => {
                Self::require(self.figa_alpha, "figa_alpha")?;
                Self::require(self.figa_beta, "figa_beta")?;
            }
            ObjectiveKind::Dpo => {}
        }
        Ok(())
    }
}

/// Per-token weights `λ` for the two responses.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenWeights<T> {
    pub chosen_weights: Vec<T>,
    pub rejected_weights: Vec<T>,
}

impl<T: Scalar> TokenWeights<T> {
    pub fn ones(chosen: usize, rejected: usize) -> Self {
        TokenWeights {
            chosen_weights: vec![T::one(); chosen],
            rejected_weights: vec![T::one(); rejected],
        }
    }
}

/// Score tables of one preference pair. Reference tables may be omitted for
/// reference-free objectives.
#[derive(Clone, Copy, Debug)]
pub struct PairScores<'a, T> {
    pub policy_chosen: &'a [T],
    pub policy_rejected: &'a [T],
    pub ref_chosen: Option<&'a [T]>,
    pub ref_rejected: Option<&'a [T]>,
}

impl<'a, T: Scalar> PairScores<'a, T> {
    pub fn new(
        policy_chosen: &'a [T],
        ref_chosen: &'a [T],
        policy_rejected: &'a [T],
        ref_rejected: &'a [T],
    ) -> Self {
        PairScores {
            policy_chosen,
            policy_rejected,
            ref_chosen: Some(ref_chosen),
            ref_rejected: Some(ref_rejected),
        }
    }

    pub fn reference_free(policy_chosen: &'a [T], policy_rejected: &'a [T]) -> Self {
        PairScores {
            policy_chosen,
            policy_rejected,
            ref_chosen: None,
            ref_rejected: None,
        }
    }

    fn references(&self) -> Result<(&'a [T], &'a [T])> {
        let rc = self.ref_chosen.ok_or(Error::InvalidConfig(
            "objective needs reference scores".into(),
        ))?;
        let rr = self.ref_rejected.ok_or(Error::InvalidConfig(
            "objective needs reference scores".into(),
        ))?;
        if rc.len() != self.policy_chosen.len() {
            return Err(Error::LengthMismatch {
                what: "reference chosen table",
                expected: self.policy_chosen.len(),
                found: rc.len(),
            });
        }
        if rr.len() != self.policy_rejected.len() {
            return Err(Error::LengthMismatch {
                what: "reference rejected table",
                expected: self.policy_rejected.len(),
                found: rr.len(),
            });
        }
        Ok((rc, rr))
    }
}

/// Loss value, the quantities it was built from, and its gradient with
/// respect to the policy log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub loss: T,
    /// Weighted sum of per-token log-ratios (or log-probs for reference-free
    /// objectives) on the chosen side.
    pub chosen_logratio_sum: T,
    pub rejected_logratio_sum: T,
    /// Argument fed to `σ` (IPO: the squared quantity; ORPO: the log-odds
    /// difference; FIGA: diff-token log-prob difference).
    pub margin_input: T,
    pub per_token_chosen: Vec<T>,
    pub per_token_rejected: Vec<T>,
    /// `∂loss / ∂ log π_θ(chosen^t)`.
    pub grad_chosen: Vec<T>,
    pub grad_rejected: Vec<T>,
}

/// Aggregated sides fed to a loss head.
struct Sides<T> {
    chosen: T,
    rejected: T,
    /// Normalizers for length-normalized heads.
    norm_chosen: T,
    norm_rejected: T,
    len_chosen: usize,
    len_rejected: usize,
}

/// Loss, margin input, `∂/∂chosen`, `∂/∂rejected` of the aggregated sums.
fn head<T: Scalar>(cfg: &ObjectiveConfig<T>, s: &Sides<T>) -> Result<(T, T, T, T)> {
    let beta = cfg.beta;
    Ok(match cfg.kind {
        ObjectiveKind::Dpo => {
            let z = beta * (s.chosen - s.rejected);
            let g = sigmoid(-z);
            (softplus(-z), z, -beta * g, beta * g)
        }
        ObjectiveKind::RDpo => {
            let alpha = ObjectiveConfig::require(cfg.alpha, "alpha")?;
            let len_gap = T::lit(s.len_chosen as f64) - T::lit(s.len_rejected as f64);
            let z = beta * (s.chosen - s.rejected) - alpha * len_gap;
            let g = sigmoid(-z);
            (softplus(-z), z, -beta * g, beta * g)
        }
        ObjectiveKind::Ipo => {
            let tau = ObjectiveConfig::require(cfg.tau, "tau")?;
            let h = s.chosen - s.rejected - T::one() / (T::lit(2.0) * tau);
            let two_h = T::lit(2.0) * h;
            (h * h, h, two_h, -two_h)
        }
        ObjectiveKind::SimPo => {
            let gamma = ObjectiveConfig::require(cfg.gamma, "gamma")?;
            let z = beta * s.chosen / s.norm_chosen - beta * s.rejected / s.norm_rejected - gamma;
            let g = sigmoid(-z);
            (
                softplus(-z),
                z,
                -g * beta / s.norm_chosen,
                g * beta / s.norm_rejected,
            )
        }
        ObjectiveKind::Orpo => {
            let weight = ObjectiveConfig::require(cfg.orpo_weight, "orpo_weight")?;
            let cap = -T::epsilon();
            let mean_w = (s.chosen / s.norm_chosen).min(cap);
            let mean_l = (s.rejected / s.norm_rejected).min(cap);
            let odds = |m: T| m - log1m_exp(m);
            let z = odds(mean_w) - odds(mean_l);
            let g = sigmoid(-z);
            // d odds / d mean = 1 / (1 - p)
            let dodds = |m: T| T::one() / -m.exp_m1();
            let d_mean_w = -T::one() - weight * g * dodds(mean_w);
            let d_mean_l = weight * g * dodds(mean_l);
            (
                -mean_w + weight * softplus(-z),
                z,
                d_mean_w / s.norm_chosen,
                d_mean_l / s.norm_rejected,
            )
        }
        ObjectiveKind::Figa => unreachable!("FIGA has no aggregated head"),
    })
}

fn per_token_terms<T: Scalar>(policy: &[T], reference: Option<&[T]>) -> Vec<T> {
    match reference {
        Some(r) => policy.iter().zip(r).map(|(&p, &q)| p - q).collect(),
        None => policy.to_vec(),
    }
}

fn normalizer<T: Scalar>(len: usize, weights: Option<&[T]>, norm: LengthNorm) -> T {
    match (norm, weights) {
        (LengthNorm::WeightSum, Some(w)) => w.iter().copied().sum(),
        _ => T::lit(len as f64),
    }
}

fn assemble<T: Scalar>(
    cfg: &ObjectiveConfig<T>,
    chosen_terms: Vec<T>,
    rejected_terms: Vec<T>,
    weights: Option<&TokenWeights<T>>,
) -> Result<LossBreakdown<T>> {
    let (len_c, len_r) = (chosen_terms.len(), rejected_terms.len());
    if matches!(cfg.kind, ObjectiveKind::SimPo | ObjectiveKind::Orpo) && (len_c == 0 || len_r == 0) {
        return Err(Error::EmptySequence("response of a length-normalized objective"));
    }
    let (per_c, per_r) = match weights {
        None => (chosen_terms, rejected_terms),
        Some(w) => (
            chosen_terms.iter().zip(&w.chosen_weights).map(|(&d, &l)| l * d).collect(),
            rejected_terms.iter().zip(&w.rejected_weights).map(|(&d, &l)| l * d).collect(),
        ),
    };
    let sides = Sides {
        chosen: per_c.iter().copied().sum(),
        rejected: per_r.iter().copied().sum(),
        norm_chosen: normalizer(len_c, weights.map(|w| w.chosen_weights.as_slice()), cfg.length_norm),
        norm_rejected: normalizer(len_r, weights.map(|w| w.rejected_weights.as_slice()), cfg.length_norm),
        len_chosen: len_c,
        len_rejected: len_r,
    };
    let (loss, margin, dc, dr) = head(cfg, &sides)?;
    let (grad_chosen, grad_rejected) = match weights {
        None => (vec![dc; len_c], vec![dr; len_r]),
        Some(w) => (
            w.chosen_weights.iter().map(|&l| dc * l).collect(),
            w.rejected_weights.iter().map(|&l| dr * l).collect(),
        ),
    };
    Ok(LossBreakdown {
        loss,
        chosen_logratio_sum: sides.chosen,
        rejected_logratio_sum: sides.rejected,
        margin_input: margin,
        per_token_chosen: per_c,
        per_token_rejected: per_r,
        grad_chosen,
        grad_rejected,
    })
}

/// `−log σ(β Σ_t Δ_chosen^t − β Σ_t Δ_rejected^t)`, evaluated as
/// `softplus(−z)`.
pub fn dpo_loss<T: Scalar>(
    policy_chosen: &[T],
    ref_chosen: &[T],
    policy_rejected: &[T],
    ref_rejected: &[T],
    config: &ObjectiveConfig<T>,
) -> Result<LossBreakdown<T>> {
    let scores = PairScores::new(policy_chosen, ref_chosen, policy_rejected, ref_rejected);
    let (rc, rr) = scores.references()?;
    let cfg = ObjectiveConfig {
        kind: ObjectiveKind::Dpo,
        ..config.clone()
    };
    assemble(
        &cfg,
        per_token_terms(policy_chosen, Some(rc)),
        per_token_terms(policy_rejected, Some(rr)),
        None,
    )
}

/// `λ = 1 + min(1/π_θ(t), δ)` on varied tokens, 1 elsewhere. The values are
/// plain numbers: nothing downstream differentiates through them.
pub fn bmc_weights<T: Scalar>(
    policy_chosen: &[T],
    policy_rejected: &[T],
    diff: &DiffResult,
    delta: T,
) -> Result<TokenWeights<T>> {
    if !(delta >= T::zero()) {
        return Err(Error::InvalidConfig(format!("delta must be non-negative, got {delta}")));
    }
    let side = |scores: &[T], idx: &[usize], name: &str| -> Result<Vec<T>> {
        let mut w = vec![T::one(); scores.len()];
        for &i in idx {
            let lp = *scores.get(i).ok_or_else(|| {
                Error::InvalidDiff(format!("{name} index {i} out of range for length {}", scores.len()))
            })?;
            let inv_p = (-lp).exp();
            w[i] = T::one() + inv_p.min(delta);
        }
        Ok(w)
    };
    Ok(TokenWeights {
        chosen_weights: side(policy_chosen, &diff.indices_a, "chosen")?,
        rejected_weights: side(policy_rejected, &diff.indices_b, "rejected")?,
    })
}

/// Applies token weights to a base objective: each per-token log-ratio (or
/// log-prob for reference-free bases) is scaled by its `λ` before summation.
pub fn bmc_wrap<T: Scalar>(
    base: ObjectiveKind,
    weights: &TokenWeights<T>,
    scores: &PairScores<'_, T>,
    config: &ObjectiveConfig<T>,
) -> Result<LossBreakdown<T>> {
    if base == ObjectiveKind::Figa {
        return Err(Error::InvalidConfig(
            "FIGA already weights diff tokens and cannot be BMC-wrapped".into(),
        ));
    }
    if weights.chosen_weights.len() != scores.policy_chosen.len() {
        return Err(Error::LengthMismatch {
            what: "chosen weights",
            expected: scores.policy_chosen.len(),
            found: weights.chosen_weights.len(),
        });
    }
    if weights.rejected_weights.len() != scores.policy_rejected.len() {
        return Err(Error::LengthMismatch {
            what: "rejected weights",
            expected: scores.policy_rejected.len(),
            found: weights.rejected_weights.len(),
        });
    }
    let cfg = ObjectiveConfig {
        kind: base,
        ..config.clone()
    };
    let (rc, rr) = if base.uses_reference() {
        let (a, b) = scores.references()?;
        (Some(a), Some(b))
    } else {
        (None, None)
    };
    assemble(
        &cfg,
        per_token_terms(scores.policy_chosen, rc),
        per_token_terms(scores.policy_rejected, rr),
        Some(weights),
    )
}

fn figa_loss<T: Scalar>(
    scores: &PairScores<'_, T>,
    diff: &DiffResult,
    config: &ObjectiveConfig<T>,
) -> Result<LossBreakdown<T>> {
    let a = ObjectiveConfig::require(config.figa_alpha, "figa_alpha")?;
    let b = ObjectiveConfig::require(config.figa_beta, "figa_beta")?;
    let (pc, pr) = (scores.policy_chosen, scores.policy_rejected);
    let pick = |s: &[T], idx: &[usize]| -> Result<Vec<T>> {
        let mut out = vec![T::zero(); s.len()];
        for &i in idx {
            out[i] = *s
                .get(i)
                .ok_or_else(|| Error::InvalidDiff(format!("index {i} out of range for length {}", s.len())))?;
        }
        Ok(out)
    };
    let per_c = pick(pc, &diff.indices_a)?;
    let per_r = pick(pr, &diff.indices_b)?;
    let sc: T = per_c.iter().copied().sum();
    let sr: T = per_r.iter().copied().sum();
    let mut grad_chosen = vec![T::zero(); pc.len()];
    let mut grad_rejected = vec![T::zero(); pr.len()];
    for &i in &diff.indices_a {
        grad_chosen[i] = -a;
    }
    for &j in &diff.indices_b {
        grad_rejected[j] = b;
    }
    Ok(LossBreakdown {
        loss: -a * sc + b * sr,
        chosen_logratio_sum: sc,
        rejected_logratio_sum: sr,
        margin_input: sc - sr,
        per_token_chosen: per_c,
        per_token_rejected: per_r,
        grad_chosen,
        grad_rejected,
    })
}

/// The unweighted baseline objectives.
pub fn variant_loss<T: Scalar>(
    kind: ObjectiveKind,
    scores: &PairScores<'_, T>,
    diff: Option<&DiffResult>,
    config: &ObjectiveConfig<T>,
) -> Result<LossBreakdown<T>> {
    let cfg = ObjectiveConfig {
        kind,
        bmc: false,
        ..config.clone()
    };
    cfg.validate()?;
    match kind {
        ObjectiveKind::Dpo => {
            let (rc, rr) = scores.references()?;
            dpo_loss(scores.policy_chosen, rc, scores.policy_rejected, rr, &cfg)
        }
        ObjectiveKind::Figa => {
            let diff = diff.ok_or(Error::InvalidConfig("FIGA requires diff annotations".into()))?;
            figa_loss(scores, diff, &cfg)
        }
        _ => {
            let (rc, rr) = if kind.uses_reference() {
                let (a, b) = scores.references()?;
                (Some(a), Some(b))
            } else {
                (None, None)
            };
            assemble(
                &cfg,
                per_token_terms(scores.policy_chosen, rc),
                per_token_terms(scores.policy_rejected, rr),
                None,
            )
        }
    }
}

/// Evaluates `config` on one pair, computing `λ` from the current policy
/// scores when the objective is BMC-wrapped.
pub fn evaluate<T: Scalar>(
    config: &ObjectiveConfig<T>,
    scores: &PairScores<'_, T>,
    diff: Option<&DiffResult>,
) -> Result<LossBreakdown<T>> {
    config.validate()?;
    if config.bmc {
        let diff = diff.ok_or(Error::InvalidConfig("BMC objectives require diff annotations".into()))?;
        let weights = bmc_weights(scores.policy_chosen, scores.policy_rejected, diff, config.delta)?;
        bmc_wrap(config.kind, &weights, scores, config)
    } else {
        variant_loss(config.kind, scores, diff, config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: ObjectiveKind) -> ObjectiveConfig<f64> {
        ObjectiveConfig::with_defaults(kind)
    }

    #[test]
    fn dpo_identity_is_ln2() {
        let t = [-1.2, -0.3, -2.0];
        let r = [-0.7, -1.1];
        let out = dpo_loss(&t, &t, &r, &r, &cfg(ObjectiveKind::Dpo)).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.margin_input, 0.0);
    }

    #[test]
    fn dpo_reference_value() {
        // Σ Δ_chosen = +1, Σ Δ_rejected = −1, β = 0.1 → softplus(−0.2).
        // High-precision value: ln(1 + e^{-0.2}) = 0.598138869381...
        let mut c = cfg(ObjectiveKind::Dpo);
        c.beta = 0.1;
        let out = dpo_loss(&[-0.5, -0.5], &[-1.0, -1.0], &[-2.0], &[-1.0], &c).unwrap();
        assert!((out.loss - 0.598_138_869_381).abs() < 1e-11, "{}", out.loss);
    }

    #[test]
    fn beta_zero_is_constant() {
        let mut c = cfg(ObjectiveKind::Dpo);
        c.beta = 0.0;
        let out = dpo_loss(&[-3.0], &[-0.1], &[-0.2], &[-4.0], &c).unwrap();
        assert_eq!(out.loss, std::f64::consts::LN_2);
        assert!(out.grad_chosen.iter().chain(&out.grad_rejected).all(|&g| g == 0.0));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(
            dpo_loss(&[-1.0, -1.0], &[-1.0], &[-1.0], &[-1.0], &cfg(ObjectiveKind::Dpo)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn weights_follow_the_formula() {
        let diff = DiffResult {
            indices_a: vec![1],
            indices_b: vec![0],
            distance: 1,
        };
        let pc = [(-0.1f64), 0.5f64.ln()];
        let pr = [0.25f64.ln(), -0.2];
        let w = bmc_weights(&pc, &pr, &diff, 3.0).unwrap();
        assert_eq!(w.chosen_weights[0], 1.0);
        assert!((w.chosen_weights[1] - 3.0).abs() < 1e-12);
        assert!((w.rejected_weights[0] - 4.0).abs() < 1e-12);
        assert_eq!(w.rejected_weights[1], 1.0);
        let w1 = bmc_weights(&pc, &pr, &diff, 1.0).unwrap();
        assert_eq!(w1.chosen_weights[1], 2.0);
        assert_eq!(w1.rejected_weights[0], 2.0);
        assert!(bmc_weights(&pc, &pr, &diff, -1.0).is_err());
    }

    #[test]
    fn hand_evaluated_dpo_bmc() {
        // Two-token responses, λ_chosen = (3, 1), λ_rejected = (1, 2), β = 0.05.
        // Δ_chosen = (-0.2 - -0.5, -0.4 - -0.3) = (0.3, -0.1)
        // Δ_rejected = (-1.0 - -0.8, -0.6 - -0.9) = (-0.2, 0.3)
        // z = 0.05 · ((3·0.3 + 1·-0.1) - (1·-0.2 + 2·0.3)) = 0.05 · (0.8 - 0.4) = 0.02
        // loss = ln(1 + e^{-0.02}) = 0.683197179726...
        let weights = TokenWeights {
            chosen_weights: vec![3.0, 1.0],
            rejected_weights: vec![1.0, 2.0],
        };
        let scores = PairScores::new(&[-0.2, -0.4], &[-0.5, -0.3], &[-1.0, -0.6], &[-0.8, -0.9]);
        let out = bmc_wrap(ObjectiveKind::Dpo, &weights, &scores, &cfg(ObjectiveKind::Dpo)).unwrap();
        let want = (1.0f64 + (-0.02f64).exp()).ln();
        assert!((out.margin_input - 0.02).abs() < 1e-15);
        assert!((out.loss - want).abs() < 1e-15);
        assert!((out.loss - 0.683_197_179_726_634).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_are_bit_identical_to_base() {
        let scores = PairScores::new(&[-0.2, -0.4, -1.0], &[-0.5, -0.3, -0.7], &[-1.0, -0.6], &[-0.8, -0.9]);
        for kind in [ObjectiveKind::Dpo, ObjectiveKind::Ipo, ObjectiveKind::Orpo, ObjectiveKind::RDpo, ObjectiveKind::SimPo] {
            let c = cfg(kind);
            let base = variant_loss(kind, &scores, None, &c).unwrap();
            let wrapped = bmc_wrap(kind, &TokenWeights::ones(3, 2), &scores, &c).unwrap();
            assert_eq!(base, wrapped, "{kind}");
        }
        assert!(bmc_wrap(ObjectiveKind::Figa, &TokenWeights::ones(3, 2), &scores, &cfg(ObjectiveKind::Figa)).is_err());
    }

    #[test]
    fn variant_examples() {
        // IPO vanishes when Δ_w − Δ_l = 1/(2τ)
        let mut c = cfg(ObjectiveKind::Ipo);
        c.tau = Some(0.5);
        let scores = PairScores::new(&[-1.0], &[-2.0], &[-1.0], &[-1.0]);
        assert_eq!(variant_loss(ObjectiveKind::Ipo, &scores, None, &c).unwrap().loss, 0.0);

        // SimPO with equal normalized sums and γ = 0 is ln 2
        let mut c = cfg(ObjectiveKind::SimPo);
        c.gamma = Some(0.0);
        let scores = PairScores::reference_free(&[-1.0, -3.0], &[-2.0]);
        let out = variant_loss(ObjectiveKind::SimPo, &scores, None, &c).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);

        // R-DPO with α = 0 is DPO
        let mut c = cfg(ObjectiveKind::RDpo);
        c.alpha = Some(0.0);
        let scores = PairScores::new(&[-0.2, -0.4, -1.0], &[-0.5, -0.3, -0.7], &[-1.0], &[-0.8]);
        let r = variant_loss(ObjectiveKind::RDpo, &scores, None, &c).unwrap();
        let d = variant_loss(ObjectiveKind::Dpo, &scores, None, &c).unwrap();
        assert_eq!(r.loss, d.loss);
    }

    #[test]
    fn missing_hyperparameter_is_named() {
        let c = ObjectiveConfig::<f64>::new(ObjectiveKind::Ipo);
        let scores = PairScores::new(&[-1.0], &[-2.0], &[-1.0], &[-1.0]);
        match variant_loss(ObjectiveKind::Ipo, &scores, None, &c) {
            Err(Error::MissingHyperparameter(name)) => assert_eq!(name, "tau"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn orpo_matches_direct_formula() {
        let c = cfg(ObjectiveKind::Orpo);
        let (pw, pl) = ([-0.3, -0.9], [-1.5, -0.5, -2.0]);
        let out = variant_loss(ObjectiveKind::Orpo, &PairScores::reference_free(&pw, &pl), None, &c).unwrap();
        let p_w = (-1.2f64 / 2.0).exp();
        let p_l = (-4.0f64 / 3.0).exp();
        let ratio = (p_w / (1.0 - p_w)).ln() - (p_l / (1.0 - p_l)).ln();
        let want = -p_w.ln() - 0.5 * (1.0 / (1.0 + (-ratio).exp())).ln();
        assert!((out.loss - want).abs() < 1e-12);
    }

    #[test]
    fn figa_only_reads_diff_tokens() {
        let c = cfg(ObjectiveKind::Figa);
        let diff = DiffResult {
            indices_a: vec![0],
            indices_b: vec![1],
            distance: 1,
        };
        let scores = PairScores::reference_free(&[-0.5, -9.0], &[-9.0, -0.25]);
        let out = variant_loss(ObjectiveKind::Figa, &scores, Some(&diff), &c).unwrap();
        assert_eq!(out.loss, 0.5 - 0.25);
        assert!(variant_loss(ObjectiveKind::Figa, &scores, None, &c).is_err());
    }

    #[test]
    fn kinds_parse() {
        for k in ObjectiveKind::ALL {
            assert_eq!(k.as_str().parse::<ObjectiveKind>().unwrap(), k);
        }
        assert!("ppo".parse::<ObjectiveKind>().is_err());
    }
}
