//! Pair bridging: token-level diffs and targeted modification of the losing
//! response into a pseudo-winning one.
//!
//! Modification is delegated to a [`ModifierBackend`]. Two are provided: a
//! deterministic [`RuleOracle`] for synthetic tasks and a chat-completion
//! [`RemoteBackend`]. Diffs are always recomputed locally with
//! [`token_diff`], never taken from the backend.

mod align;
mod remote;
mod rule;

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DistanceBasis, PreferenceRecord};
use crate::error::{Error, Result};
use crate::vocab::TokenSeq;

pub use align::{alignment, edit_distance, token_diff, DiffResult, EditOp};
pub use remote::{parse_reply, PromptTemplate, RemoteBackend, RemoteConfig, Verdict, KEEP_VERDICT};
pub use rule::RuleOracle;

/// What a backend is asked to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModifyTask {
    /// Fix the losing response using the winning one as reference.
    Improve,
    /// Corrupt the winning response using the losing one as reference.
    DegradeWithReference,
    /// Corrupt the winning response with no reference.
    DegradeBlind,
    /// Fix the losing response with no reference.
    ImproveBlind,
}

impl ModifyTask {
    /// Whether the output replaces the preferred side of the pair.
    pub fn produces_winner(self) -> bool {
        matches!(self, ModifyTask::Improve | ModifyTask::ImproveBlind)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModifyRequest<'a> {
    pub task: ModifyTask,
    pub prompt: &'a [u32],
    pub chosen: &'a [u32],
    pub rejected: &'a [u32],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModificationOutcome {
    pub pseudo: Option<TokenSeq>,
    /// `false` means the backend judged the pair not worth modifying and it
    /// should be filtered.
    pub keep: bool,
    pub backend_id: String,
    pub raw_reply: String,
}

impl ModificationOutcome {
    pub fn filtered(backend_id: &str, raw_reply: String) -> Self {
        ModificationOutcome {
            pseudo: None,
            keep: false,
            backend_id: backend_id.to_string(),
            raw_reply,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed backend reply ({reason})")]
    MalformedReply { reason: String, raw_reply: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Transport failures may succeed on a later attempt.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

pub trait ModifierBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Upper bound on concurrent requests.
    fn max_in_flight(&self) -> usize {
        1
    }

    fn modify(&self, request: &ModifyRequest<'_>) -> Result<ModificationOutcome, BackendError>;
}

fn check_outcome(outcome: &ModificationOutcome) -> Result<(), BackendError> {
    if outcome.keep && outcome.pseudo.as_ref().is_none_or(|p| p.is_empty()) {
        return Err(BackendError::MalformedReply {
            reason: "kept pair without a non-empty modified response".into(),
            raw_reply: outcome.raw_reply.clone(),
        });
    }
    Ok(())
}

/// Asks `backend` for a pseudo-winning response: `y_l` corrected on its
/// dispreferred tokens with `y_w` as the reference.
pub fn targeted_modify(
    backend: &dyn ModifierBackend,
    prompt: &[u32],
    chosen: &[u32],
    rejected: &[u32],
) -> Result<ModificationOutcome> {
    run_task(backend, ModifyTask::Improve, prompt, chosen, rejected)
}

fn run_task(
    backend: &dyn ModifierBackend,
    task: ModifyTask,
    prompt: &[u32],
    chosen: &[u32],
    rejected: &[u32],
) -> Result<ModificationOutcome> {
    for (name, seq) in [("prompt", prompt), ("chosen", chosen), ("rejected", rejected)] {
        if seq.is_empty() {
            return Err(Error::EmptySequence(name));
        }
    }
    let outcome = backend.modify(&ModifyRequest {
        task,
        prompt,
        chosen,
        rejected,
    })?;
    check_outcome(&outcome)?;
    Ok(outcome)
}

/// Summary of a bridging pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BridgeReport {
    /// Records sent to the backend.
    pub selected: usize,
    pub modified: usize,
    /// Records the backend judged good enough.
    pub filtered: usize,
    /// Records whose request failed; these are also marked filtered.
    pub failed: usize,
    pub mean_distance_before: f64,
    pub mean_distance_after: f64,
}

fn mean_distance(records: &[PreferenceRecord], basis: DistanceBasis) -> f64 {
    let live: Vec<_> = records.iter().filter(|r| !r.filtered).collect();
    if live.is_empty() {
        return 0.0;
    }
    live.iter().map(|r| r.distance(basis) as f64).sum::<f64>() / live.len() as f64
}

/// Runs `job` over `items` with at most `workers` in flight and returns the
/// results in item order.
fn run_bounded<I: Sync, R: Send>(items: &[I], workers: usize, job: impl Fn(&I) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = job(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

fn attach_diff(record: &mut PreferenceRecord) -> usize {
    let d = token_diff(record.winner(), record.loser());
    record.diff_chosen = Some(d.indices_a);
    record.diff_rejected = Some(d.indices_b);
    d.distance
}

/// Bridges a seeded, uniformly random fraction `proportion` of the
/// unfiltered records. Selected records gain `pseudo_chosen` and diff
/// annotations; records the backend declines or fails on are flagged
/// `filtered`. Prompt, chosen and rejected are never touched.
pub fn bridge_dataset(
    records: &[PreferenceRecord],
    backend: &dyn ModifierBackend,
    proportion: f64,
    seed: u64,
) -> Result<(Vec<PreferenceRecord>, BridgeReport)> {
    if !(0.0..=1.0).contains(&proportion) {
        return Err(Error::InvalidConfig(format!(
            "proportion must lie in [0, 1], got {proportion}"
        )));
    }
    let mut candidates: Vec<usize> = (0..records.len()).filter(|&i| !records[i].filtered).collect();
    let take = (proportion * candidates.len() as f64).round() as usize;
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut selected = candidates[..take].to_vec();
    selected.sort_unstable();

    apply_task(records, backend, ModifyTask::Improve, &selected)
}

/// Ablation variants of the bridging phase, applied to every unfiltered
/// record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InverseMode {
    /// `y_w →(y_l)→ ỹ_l`
    DegradeWithReference,
    /// `y_w → ỹ_l`
    DegradeBlind,
    /// `y_l → ỹ_w`
    ImproveBlind,
}

impl FromStr for InverseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "degrade_with_reference" => Ok(InverseMode::DegradeWithReference),
            "degrade_blind" => Ok(InverseMode::DegradeBlind),
            "improve_blind" => Ok(InverseMode::ImproveBlind),
            other => Err(Error::UnknownMode(other.to_string())),
        }
    }
}

impl From<InverseMode> for ModifyTask {
    fn from(m: InverseMode) -> Self {
        match m {
            InverseMode::DegradeWithReference => ModifyTask::DegradeWithReference,
            InverseMode::DegradeBlind => ModifyTask::DegradeBlind,
            InverseMode::ImproveBlind => ModifyTask::ImproveBlind,
        }
    }
}

/// Fills `pseudo_rejected` (degrade modes) or `pseudo_chosen`
/// (`improve_blind`) and recomputes diffs on the resulting pair.
pub fn synthesize_inverse(
    records: &[PreferenceRecord],
    backend: &dyn ModifierBackend,
    mode: InverseMode,
) -> Result<(Vec<PreferenceRecord>, BridgeReport)> {
    let selected: Vec<usize> = (0..records.len()).filter(|&i| !records[i].filtered).collect();
    apply_task(records, backend, mode.into(), &selected)
}

fn apply_task(
    records: &[PreferenceRecord],
    backend: &dyn ModifierBackend,
    task: ModifyTask,
    selected: &[usize],
) -> Result<(Vec<PreferenceRecord>, BridgeReport)> {
    let mut report = BridgeReport {
        selected: selected.len(),
        mean_distance_before: mean_distance(records, DistanceBasis::Original),
        ..Default::default()
    };
    let outcomes = run_bounded(selected, backend.max_in_flight(), |&i| {
        let r = &records[i];
        run_task(backend, task, &r.prompt, &r.chosen, &r.rejected)
    });

    let mut out = records.to_vec();
    for (&i, outcome) in selected.iter().zip(outcomes) {
        let record = &mut out[i];
        match outcome {
            Ok(ModificationOutcome {
                pseudo: Some(pseudo),
                keep: true,
                ..
            }) => {
                if task.produces_winner() {
                    record.pseudo_chosen = Some(pseudo);
                } else {
                    record.pseudo_rejected = Some(pseudo);
                }
                attach_diff(record);
                report.modified += 1;
            }
            Ok(_) => {
                record.filtered = true;
                report.filtered += 1;
            }
            Err(Error::EmptySequence(what)) => {
                log::warn!("record {i}: {what} is empty, marking filtered");
                record.filtered = true;
                report.failed += 1;
            }
            Err(Error::Backend(e)) => {
                log::warn!("record {i}: {} backend failed: {e}", backend.id());
                record.filtered = true;
                report.failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    report.mean_distance_after = mean_distance(&out, DistanceBasis::Effective);
    Ok((out, report))
}

/// Computes diff annotations on the `(winner, loser)` pair of every record.
pub fn annotate_diffs(records: &[PreferenceRecord]) -> Vec<PreferenceRecord> {
    let mut out = records.to_vec();
    for r in &mut out {
        attach_diff(r);
    }
    out
}
