//! Reward inspection, the edit-distance split experiment, span statistics
//! and the finite-difference gradient checker.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{partition_by_distance, DistanceBasis, DistanceStats, PreferenceRecord};
use crate::error::{Error, Result};
use crate::model::{freeze_reference, Model};
use crate::objectives::{bmc_weights, bmc_wrap, evaluate, ObjectiveConfig, PairScores, TokenWeights};
use crate::scalar::Scalar;
use crate::training::{pair_loss_grad, train, PreparedPair, TrainConfig};
use crate::vocab::Vocabulary;

/// Token rewards of one response, and/or margins over a set of pairs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    /// `β·[log π_θ(t) − log π_ref(t)]` per response token.
    pub per_token: Vec<f64>,
    pub sequence_reward: f64,
    /// Per-pair `r(x, y_w) − r(x, y_l)`.
    pub margins: Vec<f64>,
    /// Mean of `margins`.
    pub margin: Option<f64>,
    /// Fraction of strictly positive margins.
    pub accuracy: Option<f64>,
}

pub fn token_rewards_from_scores<T: Scalar>(policy: &[T], reference: &[T], beta: f64) -> Result<RewardReport> {
    if policy.len() != reference.len() {
        return Err(Error::LengthMismatch {
            what: "reference score table",
            expected: policy.len(),
            found: reference.len(),
        });
    }
    let per_token: Vec<f64> = policy
        .iter()
        .zip(reference)
        .map(|(&p, &q)| beta * (p - q).to_f64_lossless())
        .collect();
    Ok(RewardReport {
        sequence_reward: per_token.iter().sum(),
        per_token,
        ..RewardReport::default()
    })
}

pub fn token_rewards<T: Scalar>(
    policy: &Model<T>,
    reference: &Model<T>,
    prompt: &[u32],
    response: &[u32],
    beta: f64,
) -> Result<RewardReport> {
    let p = policy.score(prompt, response)?;
    let q = reference.score(prompt, response)?;
    token_rewards_from_scores(&p, &q, beta)
}

/// One line per token: position, token, reward and a bar proportional to
/// its magnitude (`+` positive, `-` negative).
pub fn render_token_rewards(response: &[u32], report: &RewardReport, vocab: &Vocabulary) -> String {
    let peak = report.per_token.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    let mut out = String::new();
    for (t, (&tok, &r)) in response.iter().zip(&report.per_token).enumerate() {
        let shown = match vocab.decode(&[tok]) {
            Ok(b) if b[0].is_ascii_graphic() => format!("'{}'", b[0] as char),
            Ok(b) => format!("0x{:02x}", b[0]),
            Err(_) => format!("#{tok}"),
        };
        let width = if peak > 0.0 { (r.abs() / peak * 20.0).round() as usize } else { 0 };
        let bar = if r >= 0.0 { "+" } else { "-" }.repeat(width);
        let _ = writeln!(out, "{t:>4} {shown:>6} {r:>+12.6} {bar}");
    }
    let _ = writeln!(out, "sum {:>+24.6}", report.sequence_reward);
    out
}

/// Margins from per-pair `(Σ Δ_chosen − Σ Δ_rejected)` values.
pub fn margins_to_report(raw: &[f64], beta: f64) -> RewardReport {
    let margins: Vec<f64> = raw.iter().map(|m| beta * m).collect();
    let n = raw.len();
    let (margin, accuracy) = if n == 0 {
        (None, None)
    } else {
        (
            Some(margins.iter().sum::<f64>() / n as f64),
            // counted on the unscaled value so the result cannot depend on β
            Some(raw.iter().filter(|&&m| m > 0.0).count() as f64 / n as f64),
        )
    };
    RewardReport {
        margins,
        margin,
        accuracy,
        ..RewardReport::default()
    }
}

/// Margins on the original `(chosen, rejected)` pairs of the unfiltered
/// records.
pub fn reward_margin_accuracy<T: Scalar>(
    policy: &Model<T>,
    reference: &Model<T>,
    records: &[PreferenceRecord],
    beta: f64,
) -> Result<RewardReport> {
    let raw = records
        .par_iter()
        .filter(|r| !r.filtered)
        .map(|r| {
            let logratio = |y: &[u32]| -> Result<T> {
                Ok(policy.score(&r.prompt, y)?.total() - reference.score(&r.prompt, y)?.total())
            };
            Ok((logratio(&r.chosen)? - logratio(&r.rejected)?).to_f64_lossless())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(margins_to_report(&raw, beta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: usize,
    pub objective: String,
    pub records: usize,
    pub distance: DistanceStats,
    pub mean_grad_norm: f64,
    pub final_loss: f64,
    pub reward_accuracy: Option<f64>,
    pub kl_to_reference: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitExperiment {
    /// Split-major, objectives in the order given.
    pub summaries: Vec<SplitSummary>,
}

impl SplitExperiment {
    pub fn for_objective(&self, name: &str) -> Vec<&SplitSummary> {
        self.summaries.iter().filter(|s| s.objective == name).collect()
    }
}

/// Sorts records into `k` splits of ascending pair distance and trains a
/// copy of `base` on each split for each objective, all with `config`.
/// `base` also serves as the frozen reference.
pub fn run_split_experiment<T: Scalar>(
    records: &[PreferenceRecord],
    k: usize,
    objectives: &[ObjectiveConfig<T>],
    base: &Model<T>,
    config: &TrainConfig,
) -> Result<SplitExperiment> {
    if objectives.is_empty() {
        return Err(Error::InvalidConfig("no objectives given".into()));
    }
    // Fix the order of equal-distance records so splits do not depend on how
    // the input happened to be ordered.
    let mut canonical: Vec<PreferenceRecord> = records.iter().filter(|r| !r.filtered).cloned().collect();
    canonical.sort_by_cached_key(|r| {
        (
            r.distance(DistanceBasis::Effective),
            r.prompt.clone(),
            r.winner().clone(),
            r.loser().clone(),
        )
    });
    let splits = partition_by_distance(&canonical, k)?;
    let reference = freeze_reference(base);
    let mut summaries = Vec::new();
    for split in &splits {
        for objective in objectives {
            let out = train(base.clone(), &reference, &split.records, objective, config)?;
            let eval = out.log.last_eval();
            summaries.push(SplitSummary {
                split: split.index,
                objective: objective.name(),
                records: split.records.len(),
                distance: split.distance_stats,
                mean_grad_norm: out.log.mean_grad_norm().unwrap_or(0.0),
                final_loss: out.log.final_loss().unwrap_or(f64::NAN),
                reward_accuracy: eval.map(|e| e.reward_accuracy),
                kl_to_reference: eval.map(|e| e.kl_to_reference),
            });
            log::info!(
                "split {} {}: mean grad norm {:.6}",
                split.index,
                objective.name(),
                summaries.last().map_or(0.0, |s| s.mean_grad_norm)
            );
        }
    }
    Ok(SplitExperiment { summaries })
}

/// Mean `−log π` by position inside a span of consecutive diff indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanPositionRow {
    /// 1-based.
    pub position: usize,
    pub chosen_mean_nll: Option<f64>,
    pub chosen_count: usize,
    pub rejected_mean_nll: Option<f64>,
    pub rejected_count: usize,
}

/// Maximal runs of consecutive indices.
pub fn spans(indices: &[usize]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    for &i in indices {
        match out.last_mut() {
            Some(run) if run.last().is_some_and(|&l| l + 1 == i) => run.push(i),
            _ => out.push(vec![i]),
        }
    }
    out
}

#[derive(Default)]
struct PositionAcc {
    sum: Vec<f64>,
    count: Vec<usize>,
}

impl PositionAcc {
    fn add<T: Scalar>(&mut self, scores: &[T], diff: &[usize]) -> Result<()> {
        for run in spans(diff) {
            for (pos, &i) in run.iter().enumerate() {
                let lp = *scores.get(i).ok_or_else(|| {
                    Error::InvalidDiff(format!("index {i} out of range for length {}", scores.len()))
                })?;
                if self.sum.len() <= pos {
                    self.sum.resize(pos + 1, 0.0);
                    self.count.resize(pos + 1, 0);
                }
                self.sum[pos] -= lp.to_f64_lossless();
                self.count[pos] += 1;
            }
        }
        Ok(())
    }

    fn mean(&self, pos: usize) -> (Option<f64>, usize) {
        match self.count.get(pos) {
            Some(&c) if c > 0 => (Some(self.sum[pos] / c as f64), c),
            _ => (None, 0),
        }
    }
}

/// Each entry: chosen scores, chosen diff, rejected scores, rejected diff.
pub fn span_position_stats_from_scores<T: Scalar>(
    entries: &[(&[T], &[usize], &[T], &[usize])],
) -> Result<Vec<SpanPositionRow>> {
    let (mut c, mut r) = (PositionAcc::default(), PositionAcc::default());
    for (cs, cd, rs, rd) in entries {
        c.add(cs, cd)?;
        r.add(rs, rd)?;
    }
    let depth = c.count.len().max(r.count.len());
    Ok((0..depth)
        .map(|pos| {
            let (chosen_mean_nll, chosen_count) = c.mean(pos);
            let (rejected_mean_nll, rejected_count) = r.mean(pos);
            SpanPositionRow {
                position: pos + 1,
                chosen_mean_nll,
                chosen_count,
                rejected_mean_nll,
                rejected_count,
            }
        })
        .collect())
}

/// Policy confidence on diff tokens by within-span position, separately for
/// the (pseudo-)winning and losing responses.
pub fn span_position_stats<T: Scalar>(
    records: &[PreferenceRecord],
    policy: &Model<T>,
) -> Result<Vec<SpanPositionRow>> {
    let kept: Vec<&PreferenceRecord> = records.iter().filter(|r| !r.filtered).collect();
    let mut scored = Vec::with_capacity(kept.len());
    for (index, r) in kept.iter().enumerate() {
        let (dc, dr) = r.diff_sets().ok_or(Error::MissingDiff { index })?;
        let sc = policy.score(&r.prompt, r.winner())?;
        let sr = policy.score(&r.prompt, r.loser())?;
        scored.push((sc, dc, sr, dr));
    }
    let entries: Vec<_> = scored
        .iter()
        .map(|(sc, dc, sr, dr)| (sc.logprobs(), *dc, sr.logprobs(), *dr))
        .collect();
    span_position_stats_from_scores(&entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub objective: String,
    pub num_params: usize,
    pub loss: f64,
    /// Against finite differences of the loss the gradient is meant to
    /// follow (λ frozen for BMC objectives).
    pub max_rel_error: f64,
    /// Against finite differences with λ recomputed at every perturbation;
    /// only reported for BMC objectives.
    pub varying_lambda_rel_error: Option<f64>,
}

/// `max_i |a_i − b_i| / max(‖a‖_∞, ‖b‖_∞)`; 0 when both are identically 0.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

pub const GRAD_CHECK_MAX_PARAMS: usize = 5000;

/// Compares the objective's parameter gradient at `policy` with central
/// finite differences using step `epsilon`.
pub fn grad_check<T: Scalar>(
    objective: &ObjectiveConfig<T>,
    policy: &Model<T>,
    reference: &Model<T>,
    record: &PreferenceRecord,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if !(1e-5..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!("epsilon {epsilon} outside [1e-5, 1e-3]")));
    }
    if policy.num_params() > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::InvalidConfig(format!(
            "gradient check is limited to {GRAD_CHECK_MAX_PARAMS} parameters, model has {}",
            policy.num_params()
        )));
    }
    objective.validate()?;
    let pair = PreparedPair::new(record, Some(reference))?;
    let mut analytic = policy.zeros_like_params();
    let out = pair_loss_grad(policy, objective, &pair, Some(&mut analytic))?;
    let analytic: Vec<f64> = analytic.iter().map(|g| g.to_f64_lossless()).collect();

    let scores_at = |m: &Model<T>| -> Result<(Vec<T>, Vec<T>)> {
        Ok((
            m.score(&pair.prompt, &pair.chosen)?.0,
            m.score(&pair.prompt, &pair.rejected)?.0,
        ))
    };
    fn pair_scores<'a, T: Scalar>(pc: &'a [T], pr: &'a [T], pair: &'a PreparedPair<T>) -> PairScores<'a, T> {
        PairScores {
            policy_chosen: pc,
            policy_rejected: pr,
            ref_chosen: pair.ref_chosen.as_deref(),
            ref_rejected: pair.ref_rejected.as_deref(),
        }
    }
    let frozen: Option<TokenWeights<T>> = if objective.bmc {
        let diff = pair.diff.as_ref().ok_or(Error::MissingDiff { index: 0 })?;
        let (pc, pr) = scores_at(policy)?;
        Some(bmc_weights(&pc, &pr, diff, objective.delta)?)
    } else {
        None
    };
    let frozen_loss = |m: &Model<T>| -> Result<T> {
        let (pc, pr) = scores_at(m)?;
        let s = pair_scores(&pc, &pr, &pair);
        let l = match &frozen {
            Some(w) => bmc_wrap(objective.kind, w, &s, objective)?.loss,
            None => evaluate(objective, &s, pair.diff.as_ref())?.loss,
        };
        if l.is_finite() { Ok(l) } else { Err(Error::NonFiniteLoss) }
    };
    let varying_loss = |m: &Model<T>| -> Result<T> {
        let (pc, pr) = scores_at(m)?;
        let l = evaluate(objective, &pair_scores(&pc, &pr, &pair), pair.diff.as_ref())?.loss;
        if l.is_finite() { Ok(l) } else { Err(Error::NonFiniteLoss) }
    };

    let eps = T::lit(epsilon);
    let two_eps = (T::lit(2.0) * eps).to_f64_lossless();
    let numeric = |loss: &(dyn Fn(&Model<T>) -> Result<T> + Sync)| -> Result<Vec<f64>> {
        (0..policy.num_params())
            .into_par_iter()
            .map_init(
                || policy.clone(),
                |m, i| {
                    let orig = m.params()[i];
                    m.params_mut()[i] = orig + eps;
                    let up = loss(m);
                    m.params_mut()[i] = orig - eps;
                    let down = loss(m);
                    m.params_mut()[i] = orig;
                    Ok((up? - down?).to_f64_lossless() / two_eps)
                },
            )
            .collect()
    };
    let max_rel = max_rel_error(&analytic, &numeric(&frozen_loss)?);
    let varying = if objective.bmc {
        Some(max_rel_error(&analytic, &numeric(&varying_loss)?))
    } else {
        None
    };
    Ok(GradCheckReport {
        objective: objective.name(),
        num_params: policy.num_params(),
        loss: out.loss.to_f64_lossless(),
        max_rel_error: max_rel,
        varying_lambda_rel_error: varying,
    })
}

/// Rank correlation with average ranks for ties. `None` for fewer than two
/// points or a constant input.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut vx, mut vy) = (0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}
