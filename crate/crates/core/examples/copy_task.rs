//! Trains DPO and DPO-BMC on the synthetic copy task from a fine-tuned
//! reference and prints held-out reward accuracy.
//!
//! `cargo run --release -p bmc-core --example copy_task -- [steps] [seed]`

use std::time::Instant;

use bmc_core::analysis::reward_margin_accuracy;
use bmc_core::bridging::bridge_dataset;
use bmc_core::model::{freeze_reference, Model};
use bmc_core::objectives::{ObjectiveConfig, ObjectiveKind};
use bmc_core::synthetic::CopyTask;
use bmc_core::training::{supervised_finetune, train_with, TrainConfig, TrainOptions};

fn main() -> bmc_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(1000, |s| s.parse().expect("steps"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let task = CopyTask::default();
    let train_set = task.generate(2000, 2 * seed + 1)?;
    let held_out = task.generate(500, 2 * seed + 2)?;
    let (bridged, report) = bridge_dataset(&train_set, &CopyTask::oracle(), 1.0, seed)?;
    println!(
        "bridging: modified {} filtered {} distance {:.3} -> {:.3}",
        report.modified, report.filtered, report.mean_distance_before, report.mean_distance_after
    );

    let sft = TrainConfig {
        learning_rate: 3e-3,
        epochs: 1000,
        max_steps: Some(1000),
        seed,
        ..TrainConfig::default()
    };
    let (base, sft_log) = supervised_finetune(Model::<f64>::new(seed, task.architecture())?, &train_set, &sft)?;
    println!("reference fine-tuning loss {:.4}", sft_log.final_loss().unwrap_or(f64::NAN));
    let reference = freeze_reference(&base);

    let config = TrainConfig {
        learning_rate: 1e-2,
        epochs: steps,
        max_steps: Some(steps),
        eval_every: Some((steps / 4).max(1)),
        seed,
        ..TrainConfig::default()
    };
    for (bmc, data) in [(false, &train_set), (true, &bridged)] {
        let objective = ObjectiveConfig::<f64>::new(ObjectiveKind::Dpo).with_bmc(bmc);
        let start = Instant::now();
        let out = train_with(
            base.clone(),
            &reference,
            data,
            &objective,
            &config,
            TrainOptions {
                eval_records: Some(&held_out),
                ..TrainOptions::default()
            },
        )?;
        for e in &out.log.evals {
            println!(
                "  step {:>5} accuracy {:.4} kl {:.4}",
                e.step, e.reward_accuracy, e.kl_to_reference
            );
        }
        let acc = reward_margin_accuracy(&out.policy, &base, &held_out, objective.beta)?;
        println!(
            "{}: held-out accuracy {:.4} in {:.1}s",
            objective.name(),
            acc.accuracy.unwrap_or(0.0),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
