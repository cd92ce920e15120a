use fresh_core::corpus::{make_synthetic, Splits, SynthConfig};
use fresh_core::discretize::{read_masks, write_masks, BudgetSpec, Scope, SplitMasks, Strategy};
use fresh_core::model::{evaluate, train, ModelConfig, TrainConfig};
use fresh_core::pipeline::{
    audit_faithfulness, extract_masks, run_fresh, train_classifier_on_masks, train_support, verify_faithfulness,
    ExtractorMode, FreshConfig,
};
use fresh_core::saliency::Scorer;
use fresh_core::Error;

fn data(seed: u64) -> Splits {
    make_synthetic(
        &SynthConfig {
            train_docs: 300,
            dev_docs: 100,
            test_docs: 100,
            ..SynthConfig::default()
        },
        seed,
    )
    .unwrap()
    .splits
}

fn quick(seed: u64) -> FreshConfig {
    let tcfg = TrainConfig {
        epochs: 4,
        ..TrainConfig::default()
    };
    FreshConfig {
        support_train: tcfg,
        classifier_train: tcfg,
        tagger_train: TrainConfig {
            epochs: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        },
        seed,
        ..FreshConfig::default()
    }
}

#[test]
fn full_budget_is_the_full_text_model() {
    let data = data(1);
    let mut cfg = quick(5);
    cfg.budget.ratio = 1.0;
    let result = run_fresh(&data, &cfg).unwrap();
    for (masks, split) in [(&result.masks.train, &data.train), (&result.masks.test, &data.test)] {
        for (m, d) in masks.iter().zip(split.documents()) {
            assert_eq!(m.len(), d.len());
        }
    }
    let direct = train(
        &data.train,
        &data.dev,
        ModelConfig::for_split(cfg.classifier_arch, &data.train),
        &cfg.classifier_train_config(),
        None,
    )
    .unwrap();
    assert_eq!(result.classifier.params, direct.params);
    assert_eq!(result.classifier.test, evaluate(&direct.params, &data.test, None).unwrap());
    assert_eq!(result.classifier.test, result.full_text_test);
}

#[test]
fn runs_are_deterministic_and_faithful() {
    let data = data(2);
    let cfg = quick(7);
    let a = run_fresh(&data, &cfg).unwrap();
    let b = run_fresh(&data, &cfg).unwrap();
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.classifier.params, b.classifier.params);
    assert_eq!(a.classifier.test, b.classifier.test);
    assert!(a.audit.violations.is_empty());
    let histogram_total: usize = a.audit.length_histogram.values().sum();
    assert_eq!(histogram_total, data.iter().map(|s| s.len()).sum::<usize>());
    assert_eq!(a.audit.checked, histogram_total);
    assert!((a.mean_rationale_ratio - 0.2).abs() < 1e-9);
}

#[test]
fn every_configuration_passes_the_audit() {
    let data = data(3);
    let specs = [
        (Scorer::Gradient, Scope::Instance, Strategy::Contiguous, 0.0),
        (Scorer::Attention, Scope::Global, Strategy::TopK, 0.05),
        (Scorer::Gradient, Scope::Global, Strategy::Contiguous, 0.1),
    ];
    for (scorer, scope, strategy, floor) in specs {
        let cfg = FreshConfig {
            scorer,
            budget: BudgetSpec {
                ratio: 0.2,
                scope,
                strategy,
                floor,
            },
            ..quick(1)
        };
        let result = run_fresh(&data, &cfg).unwrap();
        assert!(result.audit.violations.is_empty(), "{scorer:?} {scope:?} {strategy:?}");
    }
    let tagged = FreshConfig {
        extractor: ExtractorMode::Tagger,
        supervision: 0.5,
        ..quick(1)
    };
    let result = run_fresh(&data, &tagged).unwrap();
    assert!(result.tagger.is_some());
    assert!(result.audit.violations.is_empty());
}

#[test]
fn corrupted_mask_is_caught() {
    let data = data(4);
    let mut result = run_fresh(&data, &quick(2)).unwrap();
    let doc = &data.test.documents()[3];
    let mask = &mut result.masks.test[3];
    let unselected = (0..doc.len()).find(|i| !mask.contains(*i)).unwrap();
    mask.selected[0] = unselected;
    mask.selected.sort_unstable();
    let audit = audit_faithfulness(&result, &data).unwrap();
    assert_eq!(audit.violations, vec![doc.id.clone()]);
    match verify_faithfulness(&result, &data) {
        Err(Error::Faithfulness { doc_ids }) => assert_eq!(doc_ids, vec![doc.id.clone()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn saved_masks_decouple_the_classifier_from_the_support_model() {
    let data = data(5);
    let cfg = quick(3);
    let support = train_support(&data, &cfg).unwrap();
    let (masks, _) = extract_masks(&data, &support.params, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    for (name, m) in [("train", &masks.train), ("dev", &masks.dev), ("test", &masks.test)] {
        write_masks(&dir.path().join(format!("{name}.jsonl")), m, Some("attention")).unwrap();
    }
    let reloaded = SplitMasks {
        train: read_masks(&dir.path().join("train.jsonl")).unwrap(),
        dev: read_masks(&dir.path().join("dev.jsonl")).unwrap(),
        test: read_masks(&dir.path().join("test.jsonl")).unwrap(),
    };
    let first = train_classifier_on_masks(&data, &masks, cfg.classifier_arch, &cfg.classifier_train_config()).unwrap();

    // A support model from another seed is trained and then ignored.
    let other = train_support(&data, &quick(99)).unwrap();
    assert_ne!(other.params, support.params);
    let second =
        train_classifier_on_masks(&data, &reloaded, cfg.classifier_arch, &cfg.classifier_train_config()).unwrap();
    assert_eq!(first.params, second.params);
    assert_eq!(first.test, second.test);
}

#[test]
fn stage_errors_name_the_stage() {
    let data = data(6);
    let mut cfg = quick(1);
    cfg.support_arch.num_heads = 3;
    match run_fresh(&data, &cfg) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "support"),
        other => panic!("{other:?}"),
    }
    let bad = FreshConfig {
        supervision: 0.5,
        ..quick(1)
    };
    assert!(matches!(run_fresh(&data, &bad), Err(Error::Config(_))));
}
