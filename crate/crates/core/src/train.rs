//! End-to-end training and evaluation.
//!
//! Two regimes share one configuration:
//!
//! * **standard**: train the detector for all its epochs, then train the
//!   classifier once on the aggregated training descriptors;
//! * **SHAP-backprop**: after every detector epoch, train a fresh classifier,
//!   explain it on the training split, and turn the misattributions into
//!   region weights for the next detector epoch. Epoch 1 runs unweighted.
//!
//! With every weight equal to one the two regimes are bit-identical.

use serde::{Deserialize, Serialize};

use crate::classify::{ClassifierTrainConfig, MlpClassifier, DEFAULT_HIDDEN};
use crate::data::{SceneInstance, Splits};
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::percept::{Aggregation, DetectorHyper, PartDetector};
use crate::scalar::Scalar;
use crate::shap::{explain_all, BackgroundSet, ShapMatrix, ShapMode};
use crate::xai::{ged_report, region_weights, GedMode, GedReport, WeightScheme, Weighting};

/// Which estimator explains the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum ShapSetting {
    Exact,
    Kernel { samples: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub det_epochs: usize,
    pub clf_epochs: usize,
    pub det_lr: f64,
    pub clf_lr: f64,
    pub det_batch: usize,
    pub clf_batch: usize,
    pub momentum: f64,
    pub hidden: usize,
    /// `None` for the standard procedure.
    pub scheme: Option<WeightScheme>,
    pub h: f64,
    /// Part-detected threshold used when building SAGs.
    pub s: f64,
    /// Part-detected threshold used by the misattribution function.
    pub v_threshold: f64,
    pub bg_size: usize,
    pub shap: ShapSetting,
    pub aggregation: Aggregation,
    pub ged_mode: GedMode,
    /// Continue the per-epoch classifier from the previous epoch's weights
    /// instead of a fresh seeded initialization.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            det_epochs: 5,
            clf_epochs: 60,
            det_lr: 0.05,
            clf_lr: 0.02,
            det_batch: 16,
            clf_batch: 16,
            momentum: 0.9,
            hidden: DEFAULT_HIDDEN,
            scheme: None,
            h: 1.0,
            s: crate::xai::DEFAULT_DETECTION_THRESHOLD,
            v_threshold: 0.0,
            bg_size: 100,
            shap: ShapSetting::Exact,
            aggregation: Aggregation::Frcnn,
            ged_mode: GedMode::Symmetric,
            warm_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.det_epochs == 0 || self.clf_epochs == 0 {
            return bad("detector and classifier epochs must be at least 1".into());
        }
        if !(self.det_lr > 0.0 && self.clf_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.det_batch == 0 || self.clf_batch == 0 || self.bg_size == 0 || self.hidden == 0 {
            return bad("batch sizes, background size and hidden width must be positive".into());
        }
        if self.h.is_nan() || self.h <= 0.0 {
            return bad(format!("h must be positive, got {}", self.h));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        Ok(())
    }

    fn classifier_config(&self) -> ClassifierTrainConfig {
        ClassifierTrainConfig {
            epochs: self.clf_epochs,
            learning_rate: self.clf_lr,
            momentum: self.momentum,
            batch_size: self.clf_batch,
            seed: self.seed.wrapping_add(1),
        }
    }

    fn background_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    /// Estimator used for every SHAP computation of the run.
    pub fn shap_mode(&self) -> ShapMode {
        match self.shap {
            ShapSetting::Exact => ShapMode::Exact,
            ShapSetting::Kernel { samples } => ShapMode::Kernel {
                samples,
                seed: self.seed.wrapping_add(3),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub part_macro_accuracy: f64,
    pub accuracy: f64,
    pub mean_shap_ged: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub det_loss: f64,
    /// Statistics of the region weights applied during this epoch.
    pub alpha_mean: f64,
    pub alpha_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts<T> {
    pub detector: PartDetector<T>,
    pub classifier: MlpClassifier<T>,
    pub metrics: Metrics,
    pub per_epoch: Vec<EpochTrace>,
}

/// Metrics report written next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub metrics: Metrics,
    pub per_epoch: Vec<EpochTrace>,
}

impl<T: Scalar> RunArtifacts<T> {
    pub fn report(&self, config: &TrainConfig) -> RunReport {
        RunReport {
            config: config.clone(),
            metrics: self.metrics,
            per_epoch: self.per_epoch.clone(),
        }
    }
}

/// Aggregated descriptors and predicted parts for each instance.
pub struct Perception<T> {
    pub features: Vec<Vec<T>>,
    pub predicted_parts: Vec<Vec<usize>>,
}

pub fn perceive<T: Scalar>(
    detector: &PartDetector<T>,
    data: &[SceneInstance<T>],
    aggregation: Aggregation,
) -> Result<Perception<T>> {
    let mut features = Vec::with_capacity(data.len());
    let mut predicted_parts = Vec::with_capacity(data.len());
    for inst in data {
        let ds = detector.detect(inst)?;
        features.push(ds.aggregate(aggregation).values);
        predicted_parts.push(ds.predicted_parts());
    }
    Ok(Perception {
        features,
        predicted_parts,
    })
}

fn labeled<T: Scalar>(features: &[Vec<T>], data: &[SceneInstance<T>]) -> Vec<(Vec<T>, usize)> {
    features
        .iter()
        .cloned()
        .zip(data.iter().map(|inst| inst.object_class))
        .collect()
}

fn check_splits<T>(splits: &Splits<T>) -> Result<()> {
    if splits.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if splits.test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    Ok(())
}

fn new_detector<T: Scalar>(
    kg: &KnowledgeGraph,
    splits: &Splits<T>,
    cfg: &TrainConfig,
) -> Result<PartDetector<T>> {
    let dim = splits.train[0]
        .feature_dim()
        .ok_or(Error::Empty("regions of the first training instance"))?;
    Ok(PartDetector::new(
        dim,
        kg.num_parts(),
        DetectorHyper {
            learning_rate: cfg.det_lr,
            batch_size: cfg.det_batch,
            seed: cfg.seed,
        },
    ))
}

/// Detector first, then classifier, no attribution feedback.
pub fn train_standard<T: Scalar>(
    kg: &KnowledgeGraph,
    splits: &Splits<T>,
    cfg: &TrainConfig,
) -> Result<RunArtifacts<T>> {
    cfg.validate()?;
    if cfg.scheme.is_some() {
        return Err(Error::InvalidConfig(
            "a weight scheme was given for the standard procedure; use SHAP-backprop".into(),
        ));
    }
    check_splits(splits)?;
    let mut detector = new_detector(kg, splits, cfg)?;
    let mut per_epoch = Vec::with_capacity(cfg.det_epochs);
    for epoch in 1..=cfg.det_epochs {
        let loss = detector.train_epoch(&splits.train, None)?;
        per_epoch.push(EpochTrace {
            epoch,
            det_loss: loss.as_f64(),
            alpha_mean: 1.0,
            alpha_max: 1.0,
        });
    }
    let train = perceive(&detector, &splits.train, cfg.aggregation)?;
    let classifier = MlpClassifier::fit(
        kg.num_parts(),
        cfg.hidden,
        kg.num_objects(),
        &labeled(&train.features, &splits.train),
        &cfg.classifier_config(),
    )?;
    let evaluation = evaluate(kg, &detector, &classifier, splits, cfg)?;
    Ok(RunArtifacts {
        detector,
        classifier,
        metrics: evaluation.metrics,
        per_epoch,
    })
}

/// SHAP-backprop with the weights computed from `cfg.scheme`.
pub fn train_shap_backprop<T: Scalar>(
    kg: &KnowledgeGraph,
    splits: &Splits<T>,
    cfg: &TrainConfig,
) -> Result<RunArtifacts<T>> {
    train_shap_backprop_with(kg, splits, cfg, |_, _| {})
}

/// SHAP-backprop where `adjust(epoch, weights)` may rewrite the region
/// weights computed after detector epoch `epoch` before they are applied.
pub fn train_shap_backprop_with<T: Scalar>(
    kg: &KnowledgeGraph,
    splits: &Splits<T>,
    cfg: &TrainConfig,
    mut adjust: impl FnMut(usize, &mut Vec<Vec<T>>),
) -> Result<RunArtifacts<T>> {
    cfg.validate()?;
    let scheme = cfg
        .scheme
        .ok_or_else(|| Error::InvalidConfig("SHAP-backprop needs a weight scheme".into()))?;
    check_splits(splits)?;
    let weighting = Weighting {
        scheme,
        h: T::lit(cfg.h),
        v_threshold: T::lit(cfg.v_threshold),
    };
    let matrix = kg.attribution_matrix();
    let clf_cfg = cfg.classifier_config();

    let mut detector = new_detector(kg, splits, cfg)?;
    let mut classifier: Option<MlpClassifier<T>> = None;
    let mut weights: Option<Vec<Vec<T>>> = None;
    let mut per_epoch = Vec::with_capacity(cfg.det_epochs);
    for epoch in 1..=cfg.det_epochs {
        let (alpha_mean, alpha_max) = weights.as_deref().map_or((1.0, 1.0), alpha_stats);
        let loss = detector.train_epoch(&splits.train, weights.as_deref())?;
        per_epoch.push(EpochTrace {
            epoch,
            det_loss: loss.as_f64(),
            alpha_mean,
            alpha_max,
        });

        let train = perceive(&detector, &splits.train, cfg.aggregation)?;
        let pairs = labeled(&train.features, &splits.train);
        let clf = match (cfg.warm_start, classifier.take()) {
            (true, Some(mut previous)) => {
                previous.train(&pairs, &clf_cfg)?;
                previous
            }
            _ => MlpClassifier::fit(
                kg.num_parts(),
                cfg.hidden,
                kg.num_objects(),
                &pairs,
                &clf_cfg,
            )?,
        };

        if epoch < cfg.det_epochs {
            let bg = BackgroundSet::sample(&train.features, cfg.bg_size, cfg.background_seed())?;
            let shap = explain_all(&clf, &train.features, &bg, cfg.shap_mode())?;
            let mut next: Vec<Vec<T>> = splits
                .train
                .iter()
                .enumerate()
                .map(|(i, inst)| {
                    region_weights(
                        &shap[i],
                        &matrix,
                        &train.features[i],
                        inst.object_class,
                        &train.predicted_parts[i],
                        &weighting,
                    )
                })
                .collect();
            adjust(epoch, &mut next);
            weights = Some(next);
        }
        classifier = Some(clf);
    }
    let classifier = classifier.expect("at least one epoch");
    let evaluation = evaluate(kg, &detector, &classifier, splits, cfg)?;
    Ok(RunArtifacts {
        detector,
        classifier,
        metrics: evaluation.metrics,
        per_epoch,
    })
}

fn alpha_stats<T: Scalar>(weights: &[Vec<T>]) -> (f64, f64) {
    let (mut sum, mut max, mut count) = (0.0f64, 1.0f64, 0usize);
    for w in weights.iter().flatten() {
        let w = w.as_f64();
        sum += w;
        max = max.max(w);
        count += 1;
    }
    (if count == 0 { 1.0 } else { sum / count as f64 }, max)
}

/// Dispatches on `cfg.scheme`.
pub fn train<T: Scalar>(
    kg: &KnowledgeGraph,
    splits: &Splits<T>,
    cfg: &TrainConfig,
) -> Result<RunArtifacts<T>> {
    match cfg.scheme {
        None => train_standard(kg, splits, cfg),
        Some(_) => train_shap_backprop(kg, splits, cfg),
    }
}

/// Test-split metrics plus everything needed to explain them.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub metrics: Metrics,
    pub ged: GedReport,
    pub test_features: Vec<Vec<T>>,
    pub test_shap: Vec<ShapMatrix<T>>,
}

/// Background set for explaining `classifier`: aggregated training
/// descriptors drawn with the run seed.
pub fn background<T: Scalar>(
    detector: &PartDetector<T>,
    train: &[SceneInstance<T>],
    cfg: &TrainConfig,
) -> Result<BackgroundSet<T>> {
    let features = perceive(detector, train, cfg.aggregation)?.features;
    BackgroundSet::sample(&features, cfg.bg_size, cfg.background_seed())
}

/// Part macro accuracy, object accuracy and mean SHAP GED on the test split.
/// SHAP values are computed against a background drawn from the training
/// split.
pub fn evaluate<T: Scalar>(
    kg: &KnowledgeGraph,
    detector: &PartDetector<T>,
    classifier: &MlpClassifier<T>,
    splits: &Splits<T>,
    cfg: &TrainConfig,
) -> Result<Evaluation<T>> {
    check_splits(splits)?;
    let bg = background(detector, &splits.train, cfg)?;
    let test = perceive(detector, &splits.test, cfg.aggregation)?;
    let accuracy = classifier.accuracy(&labeled(&test.features, &splits.test))?;
    let part_macro_accuracy = detector.part_macro_accuracy(&splits.test)?;
    let shap = explain_all(classifier, &test.features, &bg, cfg.shap_mode())?;
    let ids: Vec<String> = splits.test.iter().map(|i| i.id.clone()).collect();
    let ged = ged_report(&ids, &test.features, &shap, kg, T::lit(cfg.s), cfg.ged_mode)?;
    Ok(Evaluation {
        metrics: Metrics {
            part_macro_accuracy,
            accuracy,
            mean_shap_ged: ged.mean,
        },
        ged,
        test_features: test.features,
        test_shap: shap,
    })
}
