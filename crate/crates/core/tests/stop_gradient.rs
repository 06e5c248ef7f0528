//! Objective gradients against central finite differences on a small model.

use bmc_core::analysis::grad_check;
use bmc_core::bridging::bridge_dataset;
use bmc_core::data::PreferenceRecord;
use bmc_core::model::{Architecture, Model};
use bmc_core::objectives::{ObjectiveConfig, ObjectiveKind};
use bmc_core::synthetic::CopyTask;

fn setup() -> (Model<f64>, Model<f64>, PreferenceRecord) {
    let recs = CopyTask::default().generate(4, 11).unwrap();
    let (bridged, _) = bridge_dataset(&recs, &CopyTask::oracle(), 1.0, 0).unwrap();
    let arch = Architecture::tiny(32);
    assert!(arch.num_params() <= 5000);
    let policy = Model::new(1, arch.clone()).unwrap();
    let reference = Model::new(2, arch).unwrap();
    (policy, reference, bridged[0].clone())
}

fn all_objectives() -> Vec<ObjectiveConfig<f64>> {
    let mut out = Vec::new();
    for kind in ObjectiveKind::ALL {
        out.push(ObjectiveConfig::with_defaults(kind));
        if kind != ObjectiveKind::Figa {
            out.push(ObjectiveConfig::with_defaults(kind).with_bmc(true));
        }
    }
    out
}

#[test]
fn every_objective_matches_finite_differences() {
    let (policy, reference, record) = setup();
    let objectives = all_objectives();
    assert_eq!(objectives.len(), 11);
    for cfg in &objectives {
        let report = grad_check(cfg, &policy, &reference, &record, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-4, "{}: {}", cfg.name(), report.max_rel_error);
    }
}

#[test]
fn bmc_gradient_follows_frozen_weights_only() {
    let (policy, reference, record) = setup();
    let mut cfg = ObjectiveConfig::<f64>::new(ObjectiveKind::Dpo).with_bmc(true);
    // large cap so 1/π is never clipped and λ moves with the parameters
    cfg.delta = 1e3;
    let report = grad_check(&cfg, &policy, &reference, &record, 1e-4).unwrap();
    assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    let varying = report.varying_lambda_rel_error.unwrap();
    assert!(varying > 1e-4, "λ-varying oracle unexpectedly agrees: {varying}");
}

#[test]
fn zero_beta_gives_zero_gradient() {
    let (policy, reference, record) = setup();
    let mut cfg = ObjectiveConfig::<f64>::new(ObjectiveKind::Dpo);
    cfg.beta = 0.0;
    let report = grad_check(&cfg, &policy, &reference, &record, 1e-4).unwrap();
    assert_eq!(report.max_rel_error, 0.0);
}

#[test]
fn epsilon_range_is_enforced() {
    let (policy, reference, record) = setup();
    let cfg = ObjectiveConfig::<f64>::new(ObjectiveKind::Dpo);
    assert!(grad_check(&cfg, &policy, &reference, &record, 1e-1).is_err());
}
