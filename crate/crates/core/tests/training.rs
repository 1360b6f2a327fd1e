//! Training behaviour on generated data.

use kgalign::classify::{ClassifierTrainConfig, MlpClassifier};
use kgalign::data::{generate_dataset, GeneratorConfig, Splits};
use kgalign::percept::{Aggregation, DetectorHyper, PartDetector};
use kgalign::train::{train, train_shap_backprop, train_standard, ShapSetting, TrainConfig};
use kgalign::xai::WeightScheme;
use kgalign::{ErrorKind, KnowledgeGraph};

fn splits(noise_rate: f64, count: usize) -> Splits<f64> {
    let kg = KnowledgeGraph::monumai();
    let cfg = GeneratorConfig {
        noise_rate,
        ..GeneratorConfig::default()
    };
    Splits::from_dataset(generate_dataset(&kg, &cfg, count).unwrap())
}

fn quick() -> TrainConfig {
    TrainConfig {
        det_epochs: 3,
        clf_epochs: 15,
        bg_size: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn detector_separates_well_spaced_parts() {
    let data = splits(0.0, 600);
    let mut det = PartDetector::<f64>::new(8, 14, DetectorHyper::default());
    let mut previous = det.mean_loss(&data.train).unwrap();
    for _ in 0..3 {
        det.train_epoch(&data.train, None).unwrap();
        let loss = det.mean_loss(&data.train).unwrap();
        assert!(loss < previous, "{loss} !< {previous}");
        previous = loss;
    }
    let (correct, total) =
        data.test
            .iter()
            .flat_map(|inst| &inst.regions)
            .fold((0, 0), |(c, t), r| {
                let probs = det.region_probs(&r.features);
                (
                    c + usize::from(kgalign::scalar::argmax(&probs) == r.part_class),
                    t + 1,
                )
            });
    assert!(correct as f64 / total as f64 >= 0.95, "{correct}/{total}");
}

#[test]
fn classifier_loss_does_not_increase_on_separable_descriptors() {
    // One-hot part counts of clean data are linearly separable by class.
    let kg = KnowledgeGraph::monumai();
    let data = splits(0.0, 300);
    let pairs: Vec<(Vec<f64>, usize)> = data
        .train
        .iter()
        .map(|inst| {
            let mut v = vec![0.0; kg.num_parts()];
            for r in &inst.regions {
                v[r.part_class] = 1.0;
            }
            (v, inst.object_class)
        })
        .collect();
    let cfg = ClassifierTrainConfig {
        epochs: 40,
        momentum: 0.0,
        ..ClassifierTrainConfig::default()
    };
    let mut clf = MlpClassifier::seeded(kg.num_parts(), 11, kg.num_objects(), 0);
    let mut previous = clf.mean_loss(&pairs).unwrap();
    for _ in 0..cfg.epochs {
        clf.train(&pairs, &ClassifierTrainConfig { epochs: 1, ..cfg })
            .unwrap();
        let loss = clf.mean_loss(&pairs).unwrap();
        assert!(loss <= previous + 1e-6, "{loss} > {previous}");
        previous = loss;
    }
    assert_eq!(clf.accuracy(&pairs).unwrap(), 1.0);
}

#[test]
fn procedures_reject_mismatched_schemes() {
    let kg = KnowledgeGraph::monumai();
    let data = splits(0.0, 100);
    let with_scheme = TrainConfig {
        scheme: Some(WeightScheme::ExpBbox),
        ..quick()
    };
    let err = train_standard(&kg, &data, &with_scheme).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Validation);
    let err = train_shap_backprop(&kg, &data, &quick()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Validation);
    let bad = TrainConfig {
        h: 0.0,
        ..with_scheme
    };
    assert_eq!(
        train(&kg, &data, &bad).unwrap_err().kind(),
        ErrorKind::Validation
    );
}

#[test]
fn every_scheme_trains_and_traces_alpha() {
    let kg = KnowledgeGraph::monumai();
    let data = splits(0.3, 150);
    for scheme in WeightScheme::ALL {
        let cfg = TrainConfig {
            scheme: Some(scheme),
            ..quick()
        };
        let run = train(&kg, &data, &cfg).unwrap();
        assert_eq!(run.per_epoch.len(), 3);
        assert_eq!(
            (run.per_epoch[0].alpha_mean, run.per_epoch[0].alpha_max),
            (1.0, 1.0)
        );
        for t in &run.per_epoch {
            assert!(t.alpha_mean >= 1.0 && t.alpha_max >= t.alpha_mean && t.det_loss.is_finite());
        }
        // Noisy data produces misattributions somewhere after the first epoch.
        assert!(
            run.per_epoch[1..].iter().any(|t| t.alpha_max > 1.0),
            "{scheme:?}"
        );
        let m = run.metrics;
        assert!((0.0..=1.0).contains(&m.accuracy) && (0.0..=1.0).contains(&m.part_macro_accuracy));
        assert!(m.mean_shap_ged >= 0.0);
    }
}

#[test]
fn kernel_mode_and_retina_aggregation_run() {
    let kg = KnowledgeGraph::monumai();
    let data = splits(0.2, 120);
    let cfg = TrainConfig {
        scheme: Some(WeightScheme::LinearBbox),
        shap: ShapSetting::Kernel { samples: 64 },
        aggregation: Aggregation::Retina,
        ..quick()
    };
    let a = train(&kg, &data, &cfg).unwrap();
    let b = train(&kg, &data, &cfg).unwrap();
    assert_eq!(a, b, "runs are deterministic under a fixed seed");
    let report = serde_json::to_value(a.report(&cfg)).unwrap();
    for key in ["config", "metrics", "per_epoch"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    assert_eq!(report["per_epoch"][0]["epoch"], 1);
}
