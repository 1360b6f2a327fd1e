//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; the
//! process exits non-zero when any criterion fails.
//!
//! Run with `cargo test -p kgalign --test acceptance`.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kgalign::classify::MlpClassifier;
use kgalign::data::{generate_dataset, GeneratorConfig, Region, SceneInstance, Splits};
use kgalign::kg::Edge;
use kgalign::percept::{
    aggregate_frcnn, aggregate_retina, DetectionSet, DetectorHyper, PartDetector,
};
use kgalign::shap::{exact_shapley_all, kernel_shap_all, BackgroundSet, Model, ShapMatrix};
use kgalign::train::{train_shap_backprop, train_shap_backprop_with, train_standard, TrainConfig};
use kgalign::xai::{beta, build_sag, shap_ged, GedMode, WeightScheme};
use kgalign::KnowledgeGraph;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// A random two-layer softmax classifier with non-trivial biases.
fn random_model(n: usize, m: usize, rng: &mut ChaCha8Rng) -> MlpClassifier<f64> {
    let hidden = rng.random_range(3..=12);
    let mut model = MlpClassifier::seeded(n, hidden, m, rng.random());
    for p in model.parameters_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    model
}

fn random_rows(rows: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        0.0
                    } else {
                        rng.random_range(0.0..2.0)
                    }
                })
                .collect()
        })
        .collect()
}

fn efficiency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_exact, mut worst_kernel) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(2..=10);
        let m = rng.random_range(2..=5);
        let model = random_model(n, m, &mut rng);
        let rows = rng.random_range(1..=8);
        let bg = BackgroundSet::new(random_rows(rows, n, &mut rng)).unwrap();
        let x = random_rows(1, n, &mut rng).remove(0);
        let k = rng.random_range(0..m);

        let mut fx = vec![0.0; m];
        model.predict_batch(&x, &mut fx);
        let mut out = vec![0.0; m];
        let mut mean = vec![0.0; m];
        for row in bg.rows() {
            model.predict_batch(row, &mut out);
            for (a, b) in mean.iter_mut().zip(&out) {
                *a += b / rows as f64;
            }
        }
        let gap = fx[k] - mean[k];

        let exact = exact_shapley_all(&model, &x, &bg).unwrap();
        let kernel = kernel_shap_all(&model, &x, &bg, (1 << n) - 2, 0).unwrap();
        worst_exact = worst_exact.max((exact.row(k).iter().sum::<f64>() - gap).abs());
        worst_kernel = worst_kernel.max((kernel.row(k).iter().sum::<f64>() - gap).abs());
    }
    outcome(
        worst_exact <= 1e-9 && worst_kernel <= 1e-6,
        format!("max |sum - gap|: exact {worst_exact:.2e}, kernel {worst_kernel:.2e}"),
    )
}

fn kernel_matches_exact() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 8;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = rng.random_range(2..=4);
        let model = random_model(n, m, &mut rng);
        let bg = BackgroundSet::new(random_rows(6, n, &mut rng)).unwrap();
        let x = random_rows(1, n, &mut rng).remove(0);
        let exact = exact_shapley_all(&model, &x, &bg).unwrap();
        let kernel = kernel_shap_all(&model, &x, &bg, (1 << n) - 2, 0).unwrap();
        for (a, b) in exact.values().iter().zip(kernel.values()) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        worst <= 1e-6,
        format!("max |kernel - exact| = {worst:.2e} over 20 models"),
    )
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

fn gradient_checks() -> Outcome {
    const STEP: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let (d, n) = (5, 6);
    let mut detector = PartDetector::<f64>::new(d, n, DetectorHyper::default());
    for p in detector.parameters_mut() {
        *p = rng.random_range(-1.0..1.0);
    }
    let inst = SceneInstance {
        id: "probe".into(),
        object_class: 0,
        regions: (0..4)
            .map(|_| Region {
                part_class: rng.random_range(0..n),
                features: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            })
            .collect(),
    };
    let weights: Vec<f64> = (0..4).map(|_| rng.random_range(1.0..2.0)).collect();
    let (_, grad) = detector.weighted_roi_loss(&inst, &weights).unwrap();
    let mut worst_det = 0.0f64;
    for _ in 0..20 {
        let i = rng.random_range(0..grad.len());
        let original = detector.parameters()[i];
        detector.parameters_mut()[i] = original + STEP;
        let plus = detector.weighted_roi_loss(&inst, &weights).unwrap().0;
        detector.parameters_mut()[i] = original - STEP;
        let minus = detector.weighted_roi_loss(&inst, &weights).unwrap().0;
        detector.parameters_mut()[i] = original;
        worst_det = worst_det.max(relative_error(grad[i], (plus - minus) / (2.0 * STEP)));
    }

    let mut clf = MlpClassifier::<f64>::seeded(7, 11, 4, 5);
    for p in clf.parameters_mut() {
        *p += rng.random_range(-0.2..0.2);
    }
    let x: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..2.0)).collect();
    let label = 2;
    let (_, grad) = clf.loss_and_grad(&x, label).unwrap();
    let mut worst_clf = 0.0f64;
    for _ in 0..20 {
        let i = rng.random_range(0..grad.len());
        let original = clf.parameters()[i];
        clf.parameters_mut()[i] = original + STEP;
        let plus = clf.loss_and_grad(&x, label).unwrap().0;
        clf.parameters_mut()[i] = original - STEP;
        let minus = clf.loss_and_grad(&x, label).unwrap().0;
        clf.parameters_mut()[i] = original;
        worst_clf = worst_clf.max(relative_error(grad[i], (plus - minus) / (2.0 * STEP)));
    }
    outcome(
        worst_det <= 1e-4 && worst_clf <= 1e-4,
        format!("max relative error over 20 probes: detector {worst_det:.2e}, classifier {worst_clf:.2e}"),
    )
}

fn beta_truth_table() -> Outcome {
    // (S, KG sign, feature value) -> misattribution, evaluated by hand with
    // threshold 0: a detected part is penalized by the size of an
    // attribution whose sign contradicts the KG; an undetected one never is.
    let table: [(f64, i8, f64, f64); 12] = [
        (-0.5, -1, 0.0, 0.0),
        (-0.5, -1, 0.5, 0.0),
        (-0.5, 1, 0.0, 0.0),
        (-0.5, 1, 0.5, 0.5),
        (0.0, -1, 0.0, 0.0),
        (0.0, -1, 0.5, 0.0),
        (0.0, 1, 0.0, 0.0),
        (0.0, 1, 0.5, 0.0),
        (0.5, -1, 0.0, 0.0),
        (0.5, -1, 0.5, 0.5),
        (0.5, 1, 0.0, 0.0),
        (0.5, 1, 0.5, 0.0),
    ];
    let wrong: Vec<String> = table
        .iter()
        .filter(|&&(s, kg, v, expected)| beta(s, kg, v, 0.0) != expected)
        .map(|(s, kg, v, expected)| format!("(S={s}, KG={kg}, v={v}) expected {expected}"))
        .collect();
    outcome(
        wrong.is_empty(),
        if wrong.is_empty() {
            "12/12 combinations".into()
        } else {
            wrong.join("; ")
        },
    )
}

fn sag_oracle() -> Outcome {
    let kg = KnowledgeGraph::monumai();
    let parts = kg.part_classes().len();
    let mut v = vec![0.0; parts];
    v[kg.part_index("trefoil arch").unwrap()] = 0.2;
    v[kg.part_index("rounded arch").unwrap()] = 1.35;
    // Columns: Hispanic-Muslim, Gothic, Renaissance, Baroque.
    let printed: [(&str, [f64; 4]); 9] = [
        ("horseshoe arch", [-0.16, 0.0, 0.08, 0.03]),
        ("pointed arch", [0.0, -0.15, 0.07, 0.04]),
        ("ogee arch", [0.0, -0.08, 0.01, 0.0]),
        ("trefoil arch", [0.0, 0.0, 0.04, 0.0]),
        ("triangular pediment", [0.0, 0.0, 0.0, 0.06]),
        ("rounded arch", [0.0, 0.0, 0.0, 0.03]),
        ("broken pediment", [0.0, 0.0, 0.14, -0.16]),
        ("solomonic column", [0.0, 0.0, 0.04, 0.0]),
        ("lobed arch", [0.0, 0.0, 0.0, 0.0]),
    ];
    let mut rows = vec![vec![0.0; parts]; 4];
    for (part, values) in printed {
        let j = kg.part_index(part).unwrap();
        for (k, value) in values.into_iter().enumerate() {
            rows[k][j] = value;
        }
    }
    let shap = ShapMatrix::from_rows(rows).unwrap();
    let sag = build_sag(&v, &shap, 0.05);

    let edge = |p: &str, o: &str| Edge::new(kg.part_index(p).unwrap(), kg.object_index(o).unwrap());
    let expected: BTreeSet<Edge> = [
        edge("horseshoe arch", "Hispanic-Muslim"),
        edge("pointed arch", "Gothic"),
        edge("ogee arch", "Gothic"),
        edge("trefoil arch", "Renaissance"),
        edge("rounded arch", "Baroque"),
        edge("broken pediment", "Baroque"),
    ]
    .into();
    let ged = shap_ged(&sag, &kg, GedMode::Symmetric);
    outcome(
        *sag.edges() == expected && ged == 3,
        format!(
            "{} edges, GED {ged}: {:?}",
            sag.edges().len(),
            sag.labeled_edges(&kg)
        ),
    )
}

fn neutrality() -> Outcome {
    let kg = KnowledgeGraph::monumai();
    let gen = GeneratorConfig {
        noise_rate: 0.2,
        ..GeneratorConfig::default()
    };
    let splits = Splits::from_dataset(generate_dataset::<f64>(&kg, &gen, 300).unwrap());
    let base = TrainConfig {
        seed: 11,
        det_epochs: 3,
        clf_epochs: 20,
        ..TrainConfig::default()
    };
    let standard = train_standard(&kg, &splits, &base).unwrap();
    let forced = train_shap_backprop_with(
        &kg,
        &splits,
        &TrainConfig {
            scheme: Some(WeightScheme::LinearInstance),
            ..base.clone()
        },
        |_, weights| weights.iter_mut().flatten().for_each(|w| *w = 1.0),
    )
    .unwrap();
    let same_detector = serde_json::to_string(&standard.detector.to_checkpoint(&kg)).unwrap()
        == serde_json::to_string(&forced.detector.to_checkpoint(&kg)).unwrap();
    let same_classifier = serde_json::to_string(&standard.classifier.to_checkpoint(&kg)).unwrap()
        == serde_json::to_string(&forced.classifier.to_checkpoint(&kg)).unwrap();
    let same_bits = standard
        .detector
        .parameters()
        .iter()
        .chain(standard.classifier.parameters())
        .zip(
            forced
                .detector
                .parameters()
                .iter()
                .chain(forced.classifier.parameters()),
        )
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let same_metrics = standard.metrics == forced.metrics;
    outcome(
        same_detector && same_classifier && same_bits && same_metrics,
        format!(
            "detector checkpoint equal: {same_detector}, classifier checkpoint equal: {same_classifier}, \
             parameters bitwise equal: {same_bits}, metrics equal: {same_metrics}"
        ),
    )
}

fn e1_splits() -> Splits<f64> {
    let kg = KnowledgeGraph::monumai();
    Splits::from_dataset(generate_dataset::<f64>(&kg, &GeneratorConfig::default(), 1000).unwrap())
}

fn experiment_clean() -> Outcome {
    let start = Instant::now();
    let kg = KnowledgeGraph::monumai();
    let splits = e1_splits();
    let run = train_standard(&kg, &splits, &TrainConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let m = run.metrics;
    outcome(
        m.accuracy >= 0.90 && m.part_macro_accuracy >= 0.90 && elapsed < Duration::from_secs(120),
        format!(
            "split {}/{}/{}, accuracy {:.3}, part macro accuracy {:.3}, {:.1?}",
            splits.train.len(),
            splits.val.len(),
            splits.test.len(),
            m.accuracy,
            m.part_macro_accuracy,
            elapsed
        ),
    )
}

fn experiment_noisy() -> Outcome {
    let start = Instant::now();
    let kg = KnowledgeGraph::monumai();
    let (mut lower, mut standard_sum, mut backprop_sum) = (0, 0.0, 0.0);
    let mut worst_accuracy_gap = 0.0f64;
    let mut per_seed = Vec::new();
    for seed in 0..5u64 {
        let gen = GeneratorConfig {
            seed: 100 + seed,
            noise_rate: 0.2,
            ..GeneratorConfig::default()
        };
        let splits = Splits::from_dataset(generate_dataset::<f64>(&kg, &gen, 1000).unwrap());
        let base = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let standard = train_standard(&kg, &splits, &base).unwrap().metrics;
        let backprop = train_shap_backprop(
            &kg,
            &splits,
            &TrainConfig {
                scheme: Some(WeightScheme::LinearInstance),
                ..base
            },
        )
        .unwrap()
        .metrics;
        lower += usize::from(backprop.mean_shap_ged < standard.mean_shap_ged);
        standard_sum += standard.mean_shap_ged;
        backprop_sum += backprop.mean_shap_ged;
        worst_accuracy_gap = worst_accuracy_gap.max((backprop.accuracy - standard.accuracy).abs());
        per_seed.push(format!(
            "{:.3}->{:.3}",
            standard.mean_shap_ged, backprop.mean_shap_ged
        ));
    }
    let elapsed = start.elapsed();
    let reduction = 1.0 - backprop_sum / standard_sum;
    outcome(
        lower >= 4 && reduction >= 0.10 && worst_accuracy_gap <= 0.03 && elapsed < Duration::from_secs(600),
        format!(
            "{lower}/5 seeds lower [{}], mean GED {:.3} -> {:.3} ({:.1}% reduction), max accuracy gap {:.1} points, {:.1?}",
            per_seed.join(", "),
            standard_sum / 5.0,
            backprop_sum / 5.0,
            100.0 * reduction,
            100.0 * worst_accuracy_gap,
            elapsed
        ),
    )
}

fn kg_deterministic_baseline() -> Outcome {
    let kg = KnowledgeGraph::monumai();
    let splits = e1_splits();
    let all = splits.train.iter().chain(&splits.val).chain(&splits.test);
    let guaranteed = all.clone().all(|inst| {
        inst.regions.iter().any(|r| {
            (0..kg.num_objects())
                .filter(|&k| kg.is_typical(r.part_class, k))
                .collect::<Vec<_>>()
                == [inst.object_class]
        })
    });
    let correct = splits
        .test
        .iter()
        .filter(|inst| {
            let probs = inst
                .regions
                .iter()
                .map(|r| {
                    let mut one_hot = vec![0.0; kg.num_parts()];
                    one_hot[r.part_class] = 1.0;
                    one_hot
                })
                .collect();
            let v = aggregate_frcnn(&DetectionSet::new(kg.num_parts(), probs).unwrap()).values;
            kg.deterministic_classify(&v).unwrap().class == inst.object_class
        })
        .count();
    let accuracy = correct as f64 / splits.test.len() as f64;
    outcome(
        guaranteed && accuracy == 1.0,
        format!(
            "every instance has a class-unique part: {guaranteed}; accuracy {correct}/{} = {accuracy}",
            splits.test.len()
        ),
    )
}

fn aggregation_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=14);
        let regions = rng.random_range(0..=8);
        let probs = (0..regions)
            .map(|_| {
                let mut row = vec![0.0f64; n];
                row[rng.random_range(0..n)] = 1.0;
                row
            })
            .collect();
        let ds = DetectionSet::new(n, probs).unwrap();
        if aggregate_frcnn(&ds) != aggregate_retina(&ds) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches in 1000 cases"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("Shapley efficiency", efficiency),
        ("kernel-exact agreement", kernel_matches_exact),
        ("gradient checks", gradient_checks),
        ("misattribution truth table", beta_truth_table),
        ("SAG oracle", sag_oracle),
        ("neutrality", neutrality),
        ("E1 clean data", experiment_clean),
        ("E2 noisy data", experiment_noisy),
        ("KG-deterministic baseline", kg_deterministic_baseline),
        ("aggregation equivalence", aggregation_equivalence),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        failed += usize::from(!result.pass);
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!(
            "{status} {:>2} {name} ({elapsed:.1?}): {}",
            i + 1,
            result.detail
        );
    }
    println!(
        "{}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
