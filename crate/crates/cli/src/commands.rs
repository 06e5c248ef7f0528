use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bmc_core::analysis::{
    grad_check, render_token_rewards, reward_margin_accuracy, run_split_experiment,
    span_position_stats, spearman, token_rewards, GRAD_CHECK_MAX_PARAMS,
};
use bmc_core::bridging::{
    annotate_diffs, bridge_dataset, synthesize_inverse, ModifierBackend, RemoteBackend, RuleOracle,
};
use bmc_core::checkpoint::{load_checkpoint, save_checkpoint};
use bmc_core::data::{load_dataset, save_dataset, write_bytes_atomically, PreferenceRecord};
use bmc_core::model::{Architecture, FrozenModel, Model};
use bmc_core::objectives::{ObjectiveConfig, ObjectiveKind};
use bmc_core::synthetic::CopyTask;
use bmc_core::training::{kl_to_reference, supervised_finetune, train_with, TrainLog, TrainOptions};
use bmc_core::vocab::{TokenSeq, Vocabulary};
use serde_json::json;

use crate::config::{BackendKind, RunConfig};
use crate::error::CliError;

type Res<T = ()> = Result<T, CliError>;

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn require_file<'a>(path: &'a Option<PathBuf>, key: &str) -> Res<&'a Path> {
    let path = path
        .as_deref()
        .ok_or_else(|| invalid(format!("`{key}` is not set")))?;
    if !path.is_file() {
        return Err(invalid(format!("{key}: {} does not exist", path.display())));
    }
    Ok(path)
}

/// Output path, refusing to overwrite any input.
fn require_output<'a>(cfg: &'a RunConfig, inputs: &[&Path]) -> Res<&'a Path> {
    let out = cfg
        .paths
        .output
        .as_deref()
        .ok_or_else(|| invalid("`paths.output` is not set"))?;
    if out.exists() {
        let canon = fs::canonicalize(out).ok();
        for input in inputs {
            if canon.is_some() && fs::canonicalize(input).ok() == canon {
                return Err(invalid(format!(
                    "output {} would overwrite an input",
                    out.display()
                )));
            }
        }
    }
    ensure_parent(out)?;
    Ok(out)
}

fn ensure_parent(path: &Path) -> Res {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", p.display()))),
        _ => Ok(()),
    }
}

fn checkpoint_path<'a>(path: &'a Option<PathBuf>, key: &str) -> Res<&'a Path> {
    let path = path
        .as_deref()
        .ok_or_else(|| invalid(format!("`{key}` is not set; give a checkpoint file")))?;
    if !path.is_file() {
        return Err(invalid(format!(
            "{key}: checkpoint {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Res<Model<f64>> {
    let (model, _) = load_checkpoint::<f64>(path)?;
    if model.vocab() != vocab.size() {
        return Err(invalid(format!(
            "checkpoint {} has vocabulary {}, configured vocabulary has {}",
            path.display(),
            model.vocab(),
            vocab.size()
        )));
    }
    Ok(model)
}

/// Every response variant of every record must fit the model.
fn check_fits(arch: &Architecture, vocab: &Vocabulary, records: &[PreferenceRecord], what: &str) -> Res {
    if arch.vocab() != vocab.size() {
        return Err(invalid(format!(
            "model vocabulary {} does not match configured vocabulary {}",
            arch.vocab(),
            vocab.size()
        )));
    }
    for (i, r) in records.iter().enumerate() {
        let longest = [Some(&r.chosen), Some(&r.rejected), r.pseudo_chosen.as_ref(), r.pseudo_rejected.as_ref()]
            .into_iter()
            .flatten()
            .map(|s| s.len())
            .max()
            .unwrap_or(0);
        if r.prompt.len() + longest > arch.context() {
            return Err(invalid(format!(
                "{what} record {i}: {} tokens exceed model context {}",
                r.prompt.len() + longest,
                arch.context()
            )));
        }
    }
    Ok(())
}

fn check_diffs(objective: &ObjectiveConfig<f64>, records: &[PreferenceRecord]) -> Res {
    if !objective.needs_diff() {
        return Ok(());
    }
    if let Some(i) = records.iter().position(|r| !r.filtered && !r.has_diff()) {
        return Err(invalid(format!(
            "record {i} has no diff annotations but objective {} needs them; run `bmc diff` or `bmc bridge` first",
            objective.name()
        )));
    }
    Ok(())
}

fn live_count(records: &[PreferenceRecord]) -> Res<usize> {
    match records.iter().filter(|r| !r.filtered).count() {
        0 => Err(invalid("dataset has no unfiltered records")),
        n => Ok(n),
    }
}

/// Loaded from `paths.reference`, or freshly initialised from `[model]`
/// and optionally fine-tuned on the winners. A fresh model comes with its
/// fine-tuning log.
fn reference_model(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    records: &[PreferenceRecord],
) -> Res<(Model<f64>, Option<TrainLog>)> {
    if cfg.paths.reference.is_some() {
        let path = checkpoint_path(&cfg.paths.reference, "paths.reference")?;
        let model = load_model(path, vocab)?;
        if cfg.model.as_ref().is_some_and(|m| m != model.architecture()) {
            log::warn!("[model] ignored: using the architecture of {}", path.display());
        }
        check_fits(model.architecture(), vocab, records, "dataset")?;
        return Ok((model, None));
    }
    let arch = cfg.architecture(vocab);
    arch.validate()?;
    check_fits(&arch, vocab, records, "dataset")?;
    let seeds = cfg.seeds();
    let model = Model::new(seeds.model, arch)?;
    match cfg.train.sft_config(seeds.sft) {
        None => Ok((model, Some(TrainLog::default()))),
        Some(sft) => {
            sft.validate()?;
            let (model, log) = supervised_finetune(model, records, &sft)?;
            Ok((model, Some(log)))
        }
    }
}

fn write_report(path: &Path, lines: &[serde_json::Value]) -> Res {
    ensure_parent(path)?;
    let mut body = String::new();
    for line in lines {
        body.push_str(&line.to_string());
        body.push('\n');
    }
    write_bytes_atomically(path, body.as_bytes())?;
    Ok(())
}

pub fn bridge(cfg: &RunConfig) -> Res {
    let vocab = cfg.vocabulary()?;
    let input = require_file(&cfg.paths.dataset, "paths.dataset")?;
    let output = require_output(cfg, &[input])?;
    let records = load_dataset(input, &vocab)?;
    let backend: Box<dyn ModifierBackend> = match cfg.backend.kind {
        BackendKind::Rule => {
            let classes = cfg.backend.content_classes.unwrap_or(vocab.size() as u32);
            if classes == 0 {
                return Err(invalid("backend.content_classes must be positive"));
            }
            Box::new(RuleOracle::with_content_classes(classes))
        }
        BackendKind::Remote => Box::new(
            RemoteBackend::new(cfg.backend.remote.clone(), vocab.clone())
                .map_err(|e| invalid(format!("backend.remote: {e}")))?,
        ),
    };
    let (out, report) = match cfg.experiment.mode.inverse() {
        None => bridge_dataset(&records, &*backend, cfg.experiment.proportion, cfg.seeds().bridge)?,
        Some(mode) => synthesize_inverse(&records, &*backend, mode)?,
    };
    if report.failed > 0 && report.failed == report.selected {
        return Err(CliError::Runtime(format!(
            "backend `{}` failed on all {} requests; no output written",
            backend.id(),
            report.failed
        )));
    }
    if report.failed > 0 {
        eprintln!(
            "warning: {} of {} requests failed; those records are marked filtered",
            report.failed, report.selected
        );
    }
    if out == records {
        let bytes = fs::read(input).map_err(|e| CliError::Runtime(format!("{}: {e}", input.display())))?;
        write_bytes_atomically(output, &bytes)?;
    } else {
        save_dataset(&out, output, &vocab)?;
    }
    println!(
        "bridge: selected {} modified {} filtered {} failed {} mean distance {:.3} -> {:.3}",
        report.selected,
        report.modified,
        report.filtered,
        report.failed,
        report.mean_distance_before,
        report.mean_distance_after
    );
    Ok(())
}

pub fn diff(cfg: &RunConfig) -> Res {
    let vocab = cfg.vocabulary()?;
    let input = require_file(&cfg.paths.dataset, "paths.dataset")?;
    let output = require_output(cfg, &[input])?;
    let records = annotate_diffs(&load_dataset(input, &vocab)?);
    save_dataset(&records, output, &vocab)?;
    let n = records.len().max(1) as f64;
    let (mut dc, mut dr) = (0usize, 0usize);
    for r in &records {
        if let Some((c, l)) = r.diff_sets() {
            dc += c.len();
            dr += l.len();
        }
    }
    println!(
        "diff: {} records, mean diff size winner {:.3} loser {:.3}",
        records.len(),
        dc as f64 / n,
        dr as f64 / n
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Res {
    let vocab = cfg.vocabulary()?;
    let input = require_file(&cfg.paths.dataset, "paths.dataset")?;
    let objective = cfg.objective.config();
    objective.validate()?;
    let seeds = cfg.seeds();
    let train_cfg = cfg.train.config(seeds.shuffle);
    train_cfg.validate()?;
    if let Some(sft) = cfg.train.sft_config(seeds.sft) {
        sft.validate()?;
    }
    let records = load_dataset(input, &vocab)?;
    live_count(&records)?;
    check_diffs(&objective, &records)?;
    let eval = match &cfg.paths.eval_dataset {
        Some(_) => Some(load_dataset(require_file(&cfg.paths.eval_dataset, "paths.eval_dataset")?, &vocab)?),
        None => None,
    };
    if cfg.paths.reference.is_none() {
        let arch = cfg.architecture(&vocab);
        arch.validate()?;
        check_fits(&arch, &vocab, &records, "dataset")?;
    }

    let run_dir = &cfg.paths.run_dir;
    fs::create_dir_all(run_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", run_dir.display())))?;
    let (reference, fresh) = reference_model(cfg, &vocab, &records)?;
    if let Some(eval) = &eval {
        check_fits(reference.architecture(), &vocab, eval, "eval")?;
    }
    if let Some(log) = &fresh {
        save_checkpoint(&reference, log, run_dir.join("reference.ckpt"))?;
    }
    let frozen = FrozenModel::new(reference.clone());
    let outcome = train_with(
        reference,
        &frozen,
        &records,
        &objective,
        &train_cfg,
        TrainOptions {
            eval_records: eval.as_deref(),
            ..TrainOptions::default()
        },
    )?;
    save_checkpoint(&outcome.policy, &outcome.log, run_dir.join("final.ckpt"))?;
    let best = outcome.best.as_ref().map_or(&outcome.policy, |b| &b.model);
    save_checkpoint(best, &outcome.log, run_dir.join("best.ckpt"))?;
    outcome.log.save_jsonl(run_dir.join("log.jsonl"))?;
    let config_text = toml::to_string(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_bytes_atomically(run_dir.join("config.toml"), config_text.as_bytes())?;

    let log = &outcome.log;
    print!(
        "train: {} steps, objective {}, final loss {:.6}, mean grad norm {:.6}",
        log.steps.len(),
        objective.name(),
        log.final_loss().unwrap_or(f64::NAN),
        log.mean_grad_norm().unwrap_or(f64::NAN)
    );
    if let Some(e) = log.last_eval() {
        print!(
            ", reward accuracy {:.4}, kl {:.6}",
            e.reward_accuracy, e.kl_to_reference
        );
    }
    println!("\ncheckpoints written to {}", run_dir.display());
    Ok(())
}

pub fn analyze(cfg: &RunConfig) -> Res {
    let vocab = cfg.vocabulary()?;
    let policy_path = checkpoint_path(&cfg.paths.policy, "paths.policy")?;
    let reference_path = checkpoint_path(&cfg.paths.reference, "paths.reference")?;
    let input = require_file(&cfg.paths.dataset, "paths.dataset")?;
    let policy = load_model(policy_path, &vocab)?;
    let reference = load_model(reference_path, &vocab)?;
    if policy.architecture() != reference.architecture() {
        return Err(invalid("policy and reference architectures differ"));
    }
    let records = load_dataset(input, &vocab)?;
    live_count(&records)?;
    check_fits(policy.architecture(), &vocab, &records, "dataset")?;
    let beta = cfg.objective.config().beta;

    let margins = reward_margin_accuracy(&policy, &reference, &records, beta)?;
    let kl = kl_to_reference(&policy, &reference, &records)?;
    println!(
        "analyze: {} pairs, beta {beta}, mean reward margin {:+.6}, reward accuracy {:.4}, kl to reference {:.6}",
        margins.margins.len(),
        margins.margin.unwrap_or(0.0),
        margins.accuracy.unwrap_or(0.0),
        kl
    );
    let mut report = vec![json!({
        "type": "summary",
        "pairs": margins.margins.len(),
        "beta": beta,
        "reward_margin": margins.margin,
        "reward_accuracy": margins.accuracy,
        "kl_to_reference": kl,
        "margins": margins.margins,
    })];

    for (i, r) in records.iter().enumerate().filter(|(_, r)| !r.filtered).take(cfg.experiment.show) {
        for (role, response) in [("winner", r.winner()), ("loser", r.loser())] {
            let rewards = token_rewards(&policy, &reference, &r.prompt, response, beta)?;
            println!("\nrecord {i} {role}");
            print!("{}", render_token_rewards(response, &rewards, &vocab));
            report.push(json!({
                "type": "token_rewards",
                "record": i,
                "response": role,
                "tokens": response.as_slice(),
                "rewards": rewards.per_token,
                "sequence_reward": rewards.sequence_reward,
            }));
        }
    }

    if records.iter().filter(|r| !r.filtered).all(|r| r.has_diff()) {
        let rows = span_position_stats(&records, &policy)?;
        if !rows.is_empty() {
            println!("\nspan position  winner -log p (n)      loser -log p (n)");
        }
        let cell = |m: Option<f64>, n: usize| m.map_or_else(|| "-".to_string(), |m| format!("{m:.4} ({n})"));
        for row in &rows {
            println!(
                "{:>13}  {:<20} {}",
                row.position,
                cell(row.chosen_mean_nll, row.chosen_count),
                cell(row.rejected_mean_nll, row.rejected_count)
            );
            report.push(json!({ "type": "span_position", "row": row }));
        }
    }
    if let Some(path) = &cfg.paths.report {
        write_report(path, &report)?;
    }
    Ok(())
}

/// Under the parameter limit of the gradient checker.
fn gradcheck_architecture(vocab: usize) -> Architecture {
    let width = if vocab <= 64 { 8 } else { 6 };
    Architecture::Transformer {
        vocab,
        context: 24,
        width,
        layers: 1,
        heads: 2,
        hidden: 2 * width,
        zero_head: false,
    }
}

fn builtin_record(vocab: usize) -> PreferenceRecord {
    let v = vocab as u32;
    let seq = |xs: &[u32]| TokenSeq::new(xs.iter().map(|x| x % v).collect());
    let chosen = [1, 2, 3, 4, 5, 6];
    let mut rejected = chosen;
    rejected[2] += 1;
    rejected[3] += 2;
    PreferenceRecord::new(seq(&[0, 1, 2, 3]), seq(&chosen), seq(&rejected))
}

fn objective_list(cfg: &RunConfig, names: &[String]) -> Res<Vec<ObjectiveConfig<f64>>> {
    let mut out = Vec::new();
    for name in names {
        if name == "all" {
            for kind in ObjectiveKind::ALL {
                out.push(cfg.objective.build(kind, false));
                if kind != ObjectiveKind::Figa {
                    out.push(cfg.objective.build(kind, true));
                }
            }
        } else {
            out.push(cfg.objective.named(name)?);
        }
    }
    if out.is_empty() {
        return Err(invalid("no objectives configured"));
    }
    Ok(out)
}

pub fn gradcheck(cfg: &RunConfig) -> Res {
    let vocab = cfg.vocabulary()?;
    let seeds = cfg.seeds();
    let tolerance = cfg.experiment.tolerance;
    if !(tolerance > 0.0) {
        return Err(invalid("experiment.tolerance must be positive"));
    }
    let epsilon = cfg.experiment.epsilon;
    if !(1e-5..=1e-3).contains(&epsilon) {
        return Err(invalid(format!("experiment.epsilon {epsilon} outside [1e-5, 1e-3]")));
    }
    let objectives = objective_list(cfg, &cfg.experiment.gradcheck_objectives)?;
    let fresh_arch = cfg
        .model
        .clone()
        .unwrap_or_else(|| gradcheck_architecture(vocab.size()));
    let policy = match &cfg.paths.policy {
        Some(_) => load_model(checkpoint_path(&cfg.paths.policy, "paths.policy")?, &vocab)?,
        None => Model::new(seeds.model, fresh_arch.clone())?,
    };
    let reference = match &cfg.paths.reference {
        Some(_) => load_model(checkpoint_path(&cfg.paths.reference, "paths.reference")?, &vocab)?,
        None => Model::new(seeds.reference, policy.architecture().clone())?,
    };
    if policy.architecture() != reference.architecture() {
        return Err(invalid("policy and reference architectures differ"));
    }
    if policy.num_params() > GRAD_CHECK_MAX_PARAMS {
        return Err(invalid(format!(
            "model has {} parameters; gradcheck needs at most {GRAD_CHECK_MAX_PARAMS}",
            policy.num_params()
        )));
    }
    let record = match &cfg.paths.dataset {
        Some(_) => {
            let records = load_dataset(require_file(&cfg.paths.dataset, "paths.dataset")?, &vocab)?;
            records
                .into_iter()
                .find(|r| !r.filtered)
                .ok_or_else(|| invalid("dataset has no unfiltered records"))?
        }
        None => builtin_record(vocab.size()),
    };
    let record = if record.has_diff() {
        record
    } else {
        annotate_diffs(std::slice::from_ref(&record)).remove(0)
    };
    check_fits(policy.architecture(), &vocab, std::slice::from_ref(&record), "gradcheck")?;

    println!(
        "gradcheck: {} parameters, epsilon {epsilon:e}, tolerance {tolerance:e}",
        policy.num_params()
    );
    let mut failures = Vec::new();
    for objective in &objectives {
        let r = grad_check(objective, &policy, &reference, &record, epsilon)?;
        let ok = r.max_rel_error <= tolerance;
        let mut line = format!(
            "{:<12} loss {:>12.6}  max rel error {:.3e}  {}",
            r.objective,
            r.loss,
            r.max_rel_error,
            if ok { "PASS" } else { "FAIL" }
        );
        if let Some(v) = r.varying_lambda_rel_error {
            let _ = write!(line, "  (weights recomputed: {v:.3e})");
        }
        println!("{line}");
        if !ok {
            failures.push(r.objective);
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Tolerance(format!(
            "gradient mismatch above {tolerance:e}: {}",
            failures.join(", ")
        )))
    }
}

pub fn split_experiment(cfg: &RunConfig) -> Res {
    let vocab = cfg.vocabulary()?;
    let input = require_file(&cfg.paths.dataset, "paths.dataset")?;
    let objectives = objective_list(cfg, &cfg.experiment.objectives)?;
    let seeds = cfg.seeds();
    let train_cfg = cfg.train.config(seeds.shuffle);
    train_cfg.validate()?;
    let k = cfg.experiment.splits;
    if k == 0 {
        return Err(invalid("experiment.splits must be positive"));
    }
    let records = load_dataset(input, &vocab)?;
    if live_count(&records)? < k {
        return Err(invalid(format!("fewer unfiltered records than {k} splits")));
    }
    for objective in &objectives {
        check_diffs(objective, &records)?;
    }
    let (base, _) = reference_model(cfg, &vocab, &records)?;
    let result = run_split_experiment(&records, k, &objectives, &base, &train_cfg)?;

    println!("split  objective     pairs  distance (min/mean/max)  mean grad norm  final loss  accuracy");
    let mut report = Vec::new();
    for s in &result.summaries {
        println!(
            "{:>5}  {:<12} {:>6}  {:>3} / {:>7.3} / {:<3}       {:>14.6}  {:>10.6}  {}",
            s.split,
            s.objective,
            s.records,
            s.distance.min,
            s.distance.mean,
            s.distance.max,
            s.mean_grad_norm,
            s.final_loss,
            s.reward_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        );
        report.push(json!({ "type": "split", "summary": s }));
    }
    for objective in &objectives {
        let name = objective.name();
        let rows = result.for_objective(&name);
        let xs: Vec<f64> = rows.iter().map(|s| s.split as f64).collect();
        let ys: Vec<f64> = rows.iter().map(|s| s.mean_grad_norm).collect();
        let rho = spearman(&xs, &ys);
        match rho {
            Some(r) => println!("{name}: spearman(split, mean grad norm) = {r:+.3}"),
            None => println!("{name}: spearman undefined"),
        }
        report.push(json!({ "type": "trend", "objective": name, "spearman": rho }));
    }
    if let Some(path) = &cfg.paths.report {
        write_report(path, &report)?;
    }
    Ok(())
}

pub fn generate(cfg: &RunConfig) -> Res {
    let output = require_output(cfg, &[])?;
    let records = cfg.synthetic.generate(cfg.experiment.pairs, cfg.seeds().data)?;
    save_dataset(&records, output, &CopyTask::vocabulary())?;
    println!(
        "generate: {} pairs written to {}; use vocab.alphabet = \"{}\" and backend.content_classes = {}",
        records.len(),
        output.display(),
        String::from_utf8_lossy(bmc_core::synthetic::ALPHABET),
        bmc_core::synthetic::CONTENT_CLASSES
    );
    Ok(())
}
