use gia_core::attack::ana::{build_imprint, fishing_manipulate};
use gia_core::defense::{
    lint_protocol, scan_parameters, validate, validate_architecture, ArchVerdict, LayerDiff, LintRule, ReferenceSpec,
    ScanThresholds,
};
use gia_core::fl::{synth_dataset, ClientConfig};
use gia_core::model::{build_model, zoo, ActivationKind, Init};

#[test]
fn clean_models_pass_every_stage() {
    let th = ScanThresholds::default();
    for arch in zoo::Arch::ALL {
        for act in ActivationKind::ALL {
            let spec = arch.build([3, 8, 8], 10, act, 32);
            for seed in 0..3 {
                let params = build_model(&spec, Init::KaimingUniform, seed).unwrap();
                let r = validate(&spec, &params, &ReferenceSpec::from_spec(&spec, &[act]), None, &th);
                assert!(r.passed(), "{} {} seed {seed}: {}", arch.name(), act.name(), r.to_text());
            }
        }
    }
}

#[test]
fn imprint_layers_fail_architecture_and_scan() {
    let data = synth_dataset(64, 3, 8, 8, 10, 1).unwrap();
    let spec = zoo::cnn_s([3, 8, 8], 10, ActivationKind::Relu);
    let params = build_model(&spec, Init::KaimingUniform, 1).unwrap();
    let (ispec, iparams, _) = build_imprint(&spec, &params, 64, &data.norm.normalize(&data.images), 1).unwrap();
    let reference = ReferenceSpec::from_spec(&spec, &[ActivationKind::Relu]);
    match validate_architecture(&ispec, &reference) {
        ArchVerdict::Mismatch(d) => assert!(d.iter().any(|x| matches!(x, LayerDiff::Inserted { .. }))),
        ArchVerdict::Pass => panic!("inserted layers not detected"),
    }
    let flags = scan_parameters(&iparams, &ispec, &ScanThresholds::default());
    assert!(!flags.is_empty());
    assert!(flags.iter().all(|f| f.rule.signature() == "imprint"));
}

#[test]
fn fishing_head_is_flagged_with_an_unchanged_architecture() {
    let spec = zoo::mlp2([3, 8, 8], 32, 10, ActivationKind::Relu);
    let params = build_model(&spec, Init::KaimingUniform, 2).unwrap();
    let (_, man) = fishing_manipulate(&spec, &params, 3, 10.0).unwrap();
    let r = validate(&spec, &man, &ReferenceSpec::from_spec(&spec, &[ActivationKind::Relu]), None, &ScanThresholds::default());
    assert!(r.architecture.passed());
    assert!(!r.passed());
    assert!(r.flags.iter().any(|f| f.rule.signature() == "fishing"));
    assert!(r.to_csv_row().starts_with("fail,pass,0,"));
}

#[test]
fn disallowed_activation_is_reported() {
    let spec = zoo::cnn_s([3, 8, 8], 10, ActivationKind::Sigmoid);
    let reference = ReferenceSpec::from_spec(&spec, &[ActivationKind::Relu]);
    match validate_architecture(&spec, &reference) {
        ArchVerdict::Mismatch(d) => assert!(d.iter().all(|x| matches!(x, LayerDiff::DisallowedActivation { .. }))),
        ArchVerdict::Pass => panic!("sigmoid allowed"),
    }
}

#[test]
fn lint_rules_fire_independently() {
    let relu = zoo::cnn_s([3, 8, 8], 10, ActivationKind::Relu);
    let sig = zoo::cnn_s([3, 8, 8], 10, ActivationKind::Sigmoid);
    let lin = zoo::linear_first([3, 8, 8], 10, ActivationKind::Relu);
    let safe = ClientConfig { batch_size: 32, epochs: 3, lr: 0.05, seed: 0 };
    let rules = |cfg: &ClientConfig, s| lint_protocol(cfg, s, 8).into_iter().map(|f| f.rule).collect::<Vec<_>>();
    assert!(rules(&safe, &relu).is_empty());
    assert_eq!(rules(&safe, &sig), vec![LintRule::SigmoidActivation]);
    assert_eq!(rules(&ClientConfig { batch_size: 4, ..safe.clone() }, &relu), vec![LintRule::SmallBatch]);
    assert_eq!(rules(&ClientConfig { epochs: 1, ..safe.clone() }, &relu), vec![LintRule::SingleEpoch]);
    assert_eq!(rules(&safe, &lin), vec![LintRule::ClosedFormExposure]);
}
