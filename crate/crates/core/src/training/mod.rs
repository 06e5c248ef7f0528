//! Policy optimization against a frozen reference.

mod log;
mod optimizer;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::reward_margin_accuracy;
use crate::bridging::DiffResult;
use crate::data::{DistanceBasis, PreferenceRecord};
use crate::error::{Error, Result};
use crate::model::{FrozenModel, Model, ScoreTable};
use crate::objectives::{evaluate, LossBreakdown, ObjectiveConfig, PairScores};
use crate::scalar::Scalar;
use crate::vocab::TokenSeq;

pub use log::{EvalRecord, StepRecord, TrainLog};
pub use optimizer::AdamW;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    /// Drives batch order.
    pub seed: u64,
    pub grad_clip: Option<f64>,
    pub weight_decay: f64,
    /// Caps the run (and the schedule length) below `epochs` worth of steps.
    pub max_steps: Option<usize>,
    /// Evaluate every this many steps; the last step is always evaluated.
    pub eval_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 1,
            warmup_ratio: 0.1,
            schedule: Schedule::Cosine,
            seed: 0,
            grad_clip: None,
            weight_decay: 0.0,
            max_steps: None,
            eval_every: None,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for full-size QA runs; far too small for the toy
    /// models in this crate.
    pub const LARGE_MODEL_LEARNING_RATE: f64 = 5e-7;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.max_steps == Some(0) || self.eval_every == Some(0) {
            return bad("max_steps and eval_every must be positive when set");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.steps_per_epoch(n) * self.epochs;
        self.max_steps.map_or(full, |m| m.min(full))
    }

    /// Learning rate of 1-based `step` in a run of `total` steps.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (self.warmup_ratio * total as f64).ceil() as usize;
        if step <= warmup {
            return self.learning_rate * step as f64 / warmup as f64;
        }
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// A record reduced to what a loss evaluation needs, with reference scores
/// computed once.
#[derive(Clone, Debug)]
pub struct PreparedPair<T> {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    pub ref_chosen: Option<ScoreTable<T>>,
    pub ref_rejected: Option<ScoreTable<T>>,
    pub diff: Option<DiffResult>,
}

impl<T: Scalar> PreparedPair<T> {
    /// Uses the winner/loser of `record` and its diff annotations.
    pub fn new(record: &PreferenceRecord, reference: Option<&Model<T>>) -> Result<Self> {
        let (chosen, rejected) = (record.winner().clone(), record.loser().clone());
        let diff = record.diff_sets().map(|(c, r)| DiffResult {
            indices_a: c.to_vec(),
            indices_b: r.to_vec(),
            distance: record.distance(DistanceBasis::Effective),
        });
        let (ref_chosen, ref_rejected) = match reference {
            Some(m) => (
                Some(m.score(&record.prompt, &chosen)?),
                Some(m.score(&record.prompt, &rejected)?),
            ),
            None => (None, None),
        };
        Ok(PreparedPair {
            prompt: record.prompt.clone(),
            chosen,
            rejected,
            ref_chosen,
            ref_rejected,
            diff,
        })
    }
}

/// Loss of one pair; when `grad` is given, its parameter gradient is added
/// into it.
pub fn pair_loss_grad<T: Scalar>(
    policy: &Model<T>,
    objective: &ObjectiveConfig<T>,
    pair: &PreparedPair<T>,
    grad: Option<&mut [T]>,
) -> Result<LossBreakdown<T>> {
    let trace_c = policy.forward(&pair.prompt, &pair.chosen)?;
    let trace_r = policy.forward(&pair.prompt, &pair.rejected)?;
    let scores = PairScores {
        policy_chosen: trace_c.table(),
        policy_rejected: trace_r.table(),
        ref_chosen: pair.ref_chosen.as_deref(),
        ref_rejected: pair.ref_rejected.as_deref(),
    };
    let out = evaluate(objective, &scores, pair.diff.as_ref())?;
    if !out.loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    if let Some(grad) = grad {
        policy.backward(&trace_c, &out.grad_chosen, grad)?;
        policy.backward(&trace_r, &out.grad_rejected, grad)?;
    }
    Ok(out)
}

/// Optimizer position of an interrupted run.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState<T> {
    /// Steps completed.
    pub step: usize,
    pub optimizer: AdamW<T>,
    pub best_accuracy: Option<f64>,
    pub log: TrainLog,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a, T> {
    /// Held-out pairs for evaluation; the training pairs are used otherwise.
    pub eval_records: Option<&'a [PreferenceRecord]>,
    pub resume: Option<ResumeState<T>>,
    /// Stop once this many steps are complete without changing the schedule.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct BestSnapshot<T> {
    pub step: usize,
    pub reward_accuracy: f64,
    pub model: Model<T>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub policy: Model<T>,
    /// Highest held-out reward accuracy reached in this session, if it beat
    /// the one carried in by a resume.
    pub best: Option<BestSnapshot<T>>,
    pub log: TrainLog,
    pub state: ResumeState<T>,
}

pub fn train<T: Scalar>(
    policy: Model<T>,
    reference: &FrozenModel<T>,
    records: &[PreferenceRecord],
    objective: &ObjectiveConfig<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_with(policy, reference, records, objective, config, TrainOptions::default())
}

pub fn train_with<T: Scalar>(
    mut policy: Model<T>,
    reference: &FrozenModel<T>,
    records: &[PreferenceRecord],
    objective: &ObjectiveConfig<T>,
    config: &TrainConfig,
    options: TrainOptions<'_, T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    objective.validate()?;
    if reference.architecture() != policy.architecture() {
        return Err(Error::InvalidConfig(
            "policy and reference architectures differ".into(),
        ));
    }
    let records: Vec<&PreferenceRecord> = records.iter().filter(|r| !r.filtered).collect();
    if records.is_empty() {
        return Err(Error::EmptySequence("training records"));
    }
    for (index, r) in records.iter().enumerate() {
        r.validate()?;
        if objective.needs_diff() && !r.has_diff() {
            return Err(Error::MissingDiff { index });
        }
    }
    let reference_model = objective.uses_reference().then(|| reference.model());
    let pairs = records
        .par_iter()
        .map(|r| PreparedPair::new(r, reference_model))
        .collect::<Result<Vec<_>>>()?;

    let n = pairs.len();
    let total = config.total_steps(n);
    let per_epoch = config.steps_per_epoch(n);
    let eval_beta = objective.beta.to_f64_lossless();

    let (mut step, mut optimizer, mut best_accuracy, mut log) = match options.resume {
        Some(s) => {
            if s.optimizer.moments().0.len() != policy.num_params() {
                return Err(Error::Checkpoint("optimizer state does not match the policy".into()));
            }
            (s.step, s.optimizer, s.best_accuracy, s.log)
        }
        None => (
            0,
            AdamW::new(policy.num_params(), config.weight_decay),
            None,
            TrainLog::default(),
        ),
    };
    let stop = options.stop_after.map_or(total, |s| s.min(total));
    let eval_set: Vec<PreferenceRecord> = match options.eval_records {
        Some(e) => e.to_vec(),
        None => records.iter().map(|r| (*r).clone()).collect(),
    };
    let mut best = None;
    let mut order = Vec::new();
    let mut order_epoch = usize::MAX;

    while step < stop {
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(config.seed, epoch, n);
            order_epoch = epoch;
        }
        let b = step % per_epoch;
        let batch = &order[b * config.batch_size..((b + 1) * config.batch_size).min(n)];
        step += 1;

        let parts = batch
            .par_iter()
            .map(|&i| {
                let mut g = policy.zeros_like_params();
                let out = pair_loss_grad(&policy, objective, &pairs[i], Some(&mut g))?;
                Ok((out.loss, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grad) = reduce(&policy, &parts);
        let grad_norm = clip(&mut grad, config.grad_clip);
        let lr = config.learning_rate_at(step, total);
        optimizer.step(policy.params_mut(), &grad, lr);
        log.steps.push(StepRecord {
            step,
            loss: loss.to_f64_lossless(),
            grad_norm,
            learning_rate: lr,
        });
        ::log::debug!("step {step}/{total} loss {:.6} grad_norm {grad_norm:.6}", loss.to_f64_lossless());

        let due = config.eval_every.is_some_and(|e| step % e == 0) || step == total;
        if due {
            let kl = kl_to_reference(&policy, reference, &eval_set)?;
            let rewards = reward_margin_accuracy(&policy, reference, &eval_set, eval_beta)?;
            let accuracy = rewards.accuracy.unwrap_or(0.0);
            log.evals.push(EvalRecord {
                step,
                kl_to_reference: kl,
                reward_accuracy: accuracy,
                reward_margin: rewards.margin.unwrap_or(0.0),
            });
            if best_accuracy.is_none_or(|b| accuracy > b) {
                best_accuracy = Some(accuracy);
                best = Some(BestSnapshot {
                    step,
                    reward_accuracy: accuracy,
                    model: policy.clone(),
                });
            }
        }
    }

    let state = ResumeState {
        step,
        optimizer,
        best_accuracy,
        log: log.clone(),
    };
    Ok(TrainOutcome {
        policy,
        best,
        log,
        state,
    })
}

/// Maximum-likelihood fine-tuning on `(prompt, winner)` of the unfiltered
/// records, with the same schedule, batching and optimizer as [`train`].
/// Used to build a reference model.
pub fn supervised_finetune<T: Scalar>(
    mut policy: Model<T>,
    records: &[PreferenceRecord],
    config: &TrainConfig,
) -> Result<(Model<T>, TrainLog)> {
    config.validate()?;
    let records: Vec<&PreferenceRecord> = records.iter().filter(|r| !r.filtered).collect();
    if records.is_empty() {
        return Err(Error::EmptySequence("training records"));
    }
    let n = records.len();
    let total = config.total_steps(n);
    let per_epoch = config.steps_per_epoch(n);
    let mut optimizer = AdamW::new(policy.num_params(), config.weight_decay);
    let mut log = TrainLog::default();
    let mut order = Vec::new();
    for step in 1..=total {
        let epoch = (step - 1) / per_epoch;
        let b = (step - 1) % per_epoch;
        if b == 0 {
            order = epoch_order(config.seed, epoch, n);
        }
        let batch = &order[b * config.batch_size..((b + 1) * config.batch_size).min(n)];
        let parts = batch
            .par_iter()
            .map(|&i| {
                let mut g = policy.zeros_like_params();
                let r = records[i];
                let loss = policy.sft_loss_grad(&r.prompt, r.winner(), &mut g)?;
                Ok((loss, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grad) = reduce(&policy, &parts);
        let grad_norm = clip(&mut grad, config.grad_clip);
        let lr = config.learning_rate_at(step, total);
        optimizer.step(policy.params_mut(), &grad, lr);
        log.steps.push(StepRecord {
            step,
            loss: loss.to_f64_lossless(),
            grad_norm,
            learning_rate: lr,
        });
    }
    Ok((policy, log))
}

/// Batch mean of per-example losses and gradients, summed in order.
fn reduce<T: Scalar>(policy: &Model<T>, parts: &[(T, Vec<T>)]) -> (T, Vec<T>) {
    let scale = T::one() / T::lit(parts.len() as f64);
    let mut grad = policy.zeros_like_params();
    let mut loss = T::zero();
    for (l, g) in parts {
        loss += *l;
        for (a, &b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad)
}

/// Returns the norm before clipping.
fn clip<T: Scalar>(grad: &mut [T], max_norm: Option<f64>) -> f64 {
    let norm = grad
        .iter()
        .map(|g| g.to_f64_lossless().powi(2))
        .sum::<f64>()
        .sqrt();
    if let Some(c) = max_norm {
        if norm > c {
            let s = T::lit(c / norm);
            grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mean over records of `Σ_t [log π_θ(t) − log π_ref(t)]` on the winning
/// response. Filtered records are skipped; an empty set gives 0.
pub fn kl_to_reference<T: Scalar>(
    policy: &Model<T>,
    reference: &Model<T>,
    records: &[PreferenceRecord],
) -> Result<f64> {
    let sums = records
        .par_iter()
        .filter(|r| !r.filtered)
        .map(|r| {
            let p = policy.score(&r.prompt, r.winner())?;
            let q = reference.score(&r.prompt, r.winner())?;
            Ok((p.total() - q.total()).to_f64_lossless())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(kl_from_sums(&sums))
}

/// The same estimate from precomputed winning-path score tables.
pub fn kl_from_scores<T: Scalar>(policy: &[&[T]], reference: &[&[T]]) -> Result<f64> {
    if policy.len() != reference.len() {
        return Err(Error::LengthMismatch {
            what: "reference score tables",
            expected: policy.len(),
            found: reference.len(),
        });
    }
    let mut sums = Vec::with_capacity(policy.len());
    for (p, q) in policy.iter().zip(reference) {
        if p.len() != q.len() {
            return Err(Error::LengthMismatch {
                what: "reference score table",
                expected: p.len(),
                found: q.len(),
            });
        }
        sums.push(p.iter().zip(*q).map(|(&a, &b)| (a - b).to_f64_lossless()).sum());
    }
    Ok(kl_from_sums(&sums))
}

fn kl_from_sums(sums: &[f64]) -> f64 {
    if sums.is_empty() {
        0.0
    } else {
        sums.iter().sum::<f64>() / sums.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let c = TrainConfig {
            learning_rate: 1.0,
            warmup_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(c.learning_rate_at(1, 100), 0.1);
        assert_eq!(c.learning_rate_at(10, 100), 1.0);
        assert!((c.learning_rate_at(55, 100) - 0.5).abs() < 1e-12);
        assert!(c.learning_rate_at(100, 100).abs() < 1e-12);
        let flat = TrainConfig {
            schedule: Schedule::Constant,
            warmup_ratio: 0.0,
            ..c
        };
        assert_eq!(flat.learning_rate_at(1, 100), 1.0);
        assert_eq!(flat.learning_rate_at(100, 100), 1.0);
    }

    #[test]
    fn step_counts() {
        let c = TrainConfig {
            batch_size: 4,
            epochs: 3,
            ..TrainConfig::default()
        };
        assert_eq!(c.steps_per_epoch(10), 3);
        assert_eq!(c.total_steps(10), 9);
        assert_eq!(TrainConfig { max_steps: Some(5), ..c }.total_steps(10), 5);
    }

    #[test]
    fn epoch_orders_are_permutations_and_differ() {
        let a = epoch_order(7, 0, 20);
        let b = epoch_order(7, 1, 20);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(7, 0, 20));
    }

    #[test]
    fn kl_shift_example() {
        let p = [-0.9, -0.9, -0.9, -0.9, -0.9];
        let q = [-1.0, -1.0, -1.0, -1.0, -1.0];
        let kl = kl_from_scores::<f64>(&[&p], &[&q]).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
        assert_eq!(kl_from_scores::<f64>(&[&q], &[&q]).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_configs() {
        for c in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { warmup_ratio: 1.5, ..TrainConfig::default() },
            TrainConfig { grad_clip: Some(0.0), ..TrainConfig::default() },
            TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
