use std::path::{Path, PathBuf};

use bmc_core::bridging::{InverseMode, RemoteConfig};
use bmc_core::model::Architecture;
use bmc_core::objectives::{LengthNorm, ObjectiveConfig, ObjectiveKind};
use bmc_core::synthetic::CopyTask;
use bmc_core::training::{Schedule, TrainConfig};
use bmc_core::vocab::Vocabulary;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

/// Every key the config file accepts, with its default. Shown by `--help`.
pub const CONFIG_KEYS: &str = "\
CONFIG KEYS (TOML file via --config, overridden by --set KEY=VALUE, then by flags)
  seed = 0                          root seed; every random draw derives from it
[paths]
  dataset                           input preference records (JSONL)
  eval_dataset                      held-out records for train evaluation
  output                            output file (bridge, diff, generate)
  run_dir = \"runs/default\"          train / split-experiment output directory
  policy                            policy checkpoint (analyze, gradcheck)
  reference                         reference checkpoint; built from [model] if unset
  report                            JSONL report file (analyze, split-experiment)
[vocab]
  alphabet                          token alphabet as a string; bytes 0-255 if unset
[backend]
  kind = \"rule\"                     rule | remote
  content_classes                   rule oracle: ids equal modulo this are the same
                                    content (default: vocabulary size)
[backend.remote]
  base_url = \"http://localhost:8000/v1\"
  model = \"gpt-4-0125-preview\"
  api_key_env = \"BMC_API_KEY\"       environment variable holding the bearer token
  temperature = 0.0
  max_retries = 3
  timeout_secs = 60
  max_in_flight = 4
  template = \"qa_math\"              qa_math | instruction_following
  backoff_ms = 500
[model]                             default: transformer, vocab = vocabulary size,
                                    context 128, width 64, layers 2, heads 4, hidden 256
                                    (gradcheck default: a <5k parameter transformer)
  kind                              bigram | transformer
  vocab, context                    both kinds
  width, layers, heads, hidden      transformer
  zero_head = false                 transformer: start with a uniform output layer
[objective]
  kind = \"dpo\"                      dpo | ipo | orpo | r-dpo | simpo | figa
  bmc = false                       token weighting on diff tokens (not with figa)
  beta = 0.05                       2.0 for simpo
  delta = 3.0                       cap on the confidence weight
  tau = 0.1                         ipo
  alpha = 0.05                      r-dpo length penalty
  gamma = 0.5                       simpo margin
  orpo_weight = 0.5                 orpo
  figa_alpha = 1.0                  figa weight on winner diff tokens
  figa_beta = 1.0                   figa weight on loser diff tokens
  length_norm = \"token_count\"       token_count | weight_sum
[train]
  learning_rate = 0.001
  batch_size = 16
  epochs = 1
  warmup_ratio = 0.1
  schedule = \"cosine\"               cosine | constant
  grad_clip                         off unless set
  weight_decay = 0.0
  max_steps                         cap on optimizer steps
  eval_every                        evaluation interval; the last step always evaluates
  sft_steps = 0                     fine-tune a freshly built reference this many steps
  sft_learning_rate = 0.003
[experiment]
  proportion = 1.0                  bridge: fraction of records to modify
  mode = \"bridge\"                   bridge | degrade_with_reference | degrade_blind
                                    | improve_blind
  splits = 6                        split-experiment: number of distance splits
  objectives = [\"dpo\"]              split-experiment objectives (NAME or NAME-bmc)
  gradcheck_objectives = [\"all\"]    gradcheck objectives; \"all\" = every kind with
                                    and without bmc
  epsilon = 0.0001                  gradcheck finite-difference step
  tolerance = 0.0001                gradcheck maximum relative error
  show = 3                          analyze: records whose token rewards are printed
  pairs = 2000                      generate: number of synthetic pairs
[synthetic]
  min_len = 8, max_len = 8          generate: response length range
  min_corruptions = 1, max_corruptions = 3
  style_noise = 0.5                 probability a token is uppercase";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub vocab: VocabSection,
    pub backend: BackendSection,
    pub model: Option<Architecture>,
    pub objective: ObjectiveSection,
    pub train: TrainSection,
    pub experiment: ExperimentSection,
    pub synthetic: CopyTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub run_dir: PathBuf,
    pub policy: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset: None,
            eval_dataset: None,
            output: None,
            run_dir: PathBuf::from("runs/default"),
            policy: None,
            reference: None,
            report: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub alphabet: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Rule,
    Remote,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub content_classes: Option<u32>,
    pub remote: RemoteConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSection {
    pub kind: ObjectiveKind,
    pub bmc: bool,
    pub beta: Option<f64>,
    pub delta: f64,
    pub tau: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub orpo_weight: f64,
    pub figa_alpha: f64,
    pub figa_beta: f64,
    pub length_norm: LengthNorm,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection {
            kind: ObjectiveKind::Dpo,
            bmc: false,
            beta: None,
            delta: 3.0,
            tau: 0.1,
            alpha: 0.05,
            gamma: 0.5,
            orpo_weight: 0.5,
            figa_alpha: 1.0,
            figa_beta: 1.0,
            length_norm: LengthNorm::TokenCount,
        }
    }
}

impl ObjectiveSection {
    /// The configured objective with kind and bmc replaced.
    pub fn build(&self, kind: ObjectiveKind, bmc: bool) -> ObjectiveConfig<f64> {
        let default_beta = if kind == ObjectiveKind::SimPo { 2.0 } else { 0.05 };
        ObjectiveConfig {
            kind,
            bmc,
            beta: self.beta.unwrap_or(default_beta),
            delta: self.delta,
            tau: Some(self.tau),
            alpha: Some(self.alpha),
            gamma: Some(self.gamma),
            orpo_weight: Some(self.orpo_weight),
            figa_alpha: Some(self.figa_alpha),
            figa_beta: Some(self.figa_beta),
            length_norm: self.length_norm,
        }
    }

    pub fn config(&self) -> ObjectiveConfig<f64> {
        self.build(self.kind, self.bmc)
    }

    /// Parses `dpo`, `simpo-bmc` and so on.
    pub fn named(&self, name: &str) -> Result<ObjectiveConfig<f64>, CliError> {
        let (base, bmc) = match name.strip_suffix("-bmc") {
            Some(base) => (base, true),
            None => (name, false),
        };
        let kind: ObjectiveKind = base
            .parse()
            .map_err(|_| CliError::Validation(format!("unknown objective `{name}`")))?;
        let cfg = self.build(kind, bmc);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub grad_clip: Option<f64>,
    pub weight_decay: f64,
    pub max_steps: Option<usize>,
    pub eval_every: Option<usize>,
    pub sft_steps: usize,
    pub sft_learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            warmup_ratio: t.warmup_ratio,
            schedule: t.schedule,
            grad_clip: t.grad_clip,
            weight_decay: t.weight_decay,
            max_steps: t.max_steps,
            eval_every: t.eval_every,
            sft_steps: 0,
            sft_learning_rate: 3e-3,
        }
    }
}

impl TrainSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            warmup_ratio: self.warmup_ratio,
            schedule: self.schedule,
            seed,
            grad_clip: self.grad_clip,
            weight_decay: self.weight_decay,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
        }
    }

    /// Reference fine-tuning; `None` when disabled.
    pub fn sft_config(&self, seed: u64) -> Option<TrainConfig> {
        (self.sft_steps > 0).then(|| TrainConfig {
            learning_rate: self.sft_learning_rate,
            batch_size: self.batch_size,
            // every epoch has at least one step, so max_steps is what binds
            epochs: self.sft_steps,
            warmup_ratio: self.warmup_ratio,
            schedule: self.schedule,
            seed,
            grad_clip: self.grad_clip,
            weight_decay: self.weight_decay,
            max_steps: Some(self.sft_steps),
            eval_every: None,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeMode {
    #[default]
    Bridge,
    DegradeWithReference,
    DegradeBlind,
    ImproveBlind,
}

impl BridgeMode {
    pub fn inverse(self) -> Option<InverseMode> {
        match self {
            BridgeMode::Bridge => None,
            BridgeMode::DegradeWithReference => Some(InverseMode::DegradeWithReference),
            BridgeMode::DegradeBlind => Some(InverseMode::DegradeBlind),
            BridgeMode::ImproveBlind => Some(InverseMode::ImproveBlind),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub proportion: f64,
    pub mode: BridgeMode,
    pub splits: usize,
    pub objectives: Vec<String>,
    pub gradcheck_objectives: Vec<String>,
    pub epsilon: f64,
    pub tolerance: f64,
    pub show: usize,
    pub pairs: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            proportion: 1.0,
            mode: BridgeMode::Bridge,
            splits: 6,
            objectives: vec!["dpo".into()],
            gradcheck_objectives: vec!["all".into()],
            epsilon: 1e-4,
            tolerance: 1e-4,
            show: 3,
            pairs: 2000,
        }
    }
}

/// Seeds derived from the root seed, one per consumer.
pub struct Seeds {
    pub model: u64,
    pub shuffle: u64,
    pub bridge: u64,
    pub sft: u64,
    /// Fresh reference weights in `gradcheck`.
    pub reference: u64,
    pub data: u64,
}

impl RunConfig {
    /// Reads `file` (if any), applies `KEY=VALUE` overrides in order and
    /// deserializes, rejecting unknown keys.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Validation(format!("cannot read config {}: {e}", path.display()))
                })?;
                text.parse::<Table>().map_err(|e| {
                    CliError::Validation(format!("config {}: {e}", path.display()))
                })?
            }
            None => Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        RunConfig::deserialize(Value::Table(table))
            .map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            model: self.seed,
            shuffle: self.seed.wrapping_add(1),
            bridge: self.seed.wrapping_add(2),
            sft: self.seed.wrapping_add(3),
            reference: self.seed.wrapping_add(4),
            data: self.seed.wrapping_add(5),
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary, CliError> {
        match &self.vocab.alphabet {
            None => Ok(Vocabulary::byte_level()),
            Some(a) => Ok(Vocabulary::from_alphabet(a.as_bytes())?),
        }
    }

    /// `[model]`, or the default transformer sized to the vocabulary.
    pub fn architecture(&self, vocab: &Vocabulary) -> Architecture {
        self.model.clone().unwrap_or_else(|| match Architecture::default() {
            Architecture::Transformer {
                context,
                width,
                layers,
                heads,
                hidden,
                zero_head,
                ..
            } => Architecture::Transformer {
                vocab: vocab.size(),
                context,
                width,
                layers,
                heads,
                hidden,
                zero_head,
            },
            other => other,
        })
    }
}

/// Sets a dotted key in `table`. The value is read as a TOML value and
/// falls back to a bare string.
pub fn apply_override(table: &mut Table, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{item}` is not KEY=VALUE")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Validation(format!("bad config key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("config key `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
