//! Region-level part detector and the aggregation of its detections into a
//! part descriptor.
//!
//! The detector is a softmax-linear model over region features. Its loss is
//! the per-region cross-entropy against the ground-truth part, optionally
//! scaled by a per-region weight; that weight is the hook through which
//! attribution feedback enters training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SceneInstance;
use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::scalar::{argmax, softmax_into, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorHyper {
    pub learning_rate: f64,
    /// Instances per mini-batch.
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for DetectorHyper {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Softmax-linear part classifier. Parameters are stored flat: the `n × d`
/// weight matrix row-major, followed by the `n` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartDetector<T> {
    feature_dim: usize,
    num_parts: usize,
    params: Vec<T>,
    pub hyper: DetectorHyper,
    epochs_trained: usize,
}

/// Per-region part probabilities for one instance, in region order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet<T> {
    num_parts: usize,
    probs: Vec<Vec<T>>,
}

/// Aggregated part descriptor `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T> {
    pub values: Vec<T>,
    /// Set when the detection set was empty and `values` is all zeros.
    pub no_detections: bool,
}

/// How per-region probability vectors are folded into `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Keep only each region's maximal probability.
    Frcnn,
    /// Keep each region's whole probability vector.
    Retina,
}

impl<T: Scalar> DetectionSet<T> {
    pub fn new(num_parts: usize, probs: Vec<Vec<T>>) -> Result<Self> {
        for p in &probs {
            if p.len() != num_parts {
                return Err(Error::DimensionMismatch {
                    what: "detection probability vector",
                    expected: num_parts,
                    found: p.len(),
                });
            }
        }
        Ok(Self { num_parts, probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn probs(&self) -> &[Vec<T>] {
        &self.probs
    }

    /// Argmax part class of each region.
    pub fn predicted_parts(&self) -> Vec<usize> {
        self.probs.iter().map(|p| argmax(p)).collect()
    }

    pub fn aggregate(&self, mode: Aggregation) -> FeatureVector<T> {
        match mode {
            Aggregation::Frcnn => aggregate_frcnn(self),
            Aggregation::Retina => aggregate_retina(self),
        }
    }
}

/// `v = Σ_m p'_m`, where `p'_m` zeroes every non-maximal entry of `p_m`.
pub fn aggregate_frcnn<T: Scalar>(ds: &DetectionSet<T>) -> FeatureVector<T> {
    let mut values = vec![T::zero(); ds.num_parts];
    for p in &ds.probs {
        let j = argmax(p);
        values[j] += p[j];
    }
    FeatureVector {
        values,
        no_detections: ds.is_empty(),
    }
}

/// `v = Σ_m p_m`.
pub fn aggregate_retina<T: Scalar>(ds: &DetectionSet<T>) -> FeatureVector<T> {
    let mut values = vec![T::zero(); ds.num_parts];
    for p in &ds.probs {
        for (v, &x) in values.iter_mut().zip(p) {
            *v += x;
        }
    }
    FeatureVector {
        values,
        no_detections: ds.is_empty(),
    }
}

impl<T: Scalar> PartDetector<T> {
    /// Zero-initialized detector; its first predictions are uniform.
    pub fn new(feature_dim: usize, num_parts: usize, hyper: DetectorHyper) -> Self {
        Self {
            feature_dim,
            num_parts,
            params: vec![T::zero(); num_parts * feature_dim + num_parts],
            hyper,
            epochs_trained: 0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn epochs_trained(&self) -> usize {
        self.epochs_trained
    }

    pub fn parameters(&self) -> &[T] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn logits_into(&self, x: &[T], out: &mut [T]) {
        let d = self.feature_dim;
        let bias = &self.params[self.num_parts * d..];
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.params[j * d..(j + 1) * d];
            *o = bias[j] + row.iter().zip(x).map(|(&w, &xi)| w * xi).sum::<T>();
        }
    }

    fn check_dim(&self, inst: &SceneInstance<T>) -> Result<()> {
        for r in &inst.regions {
            if r.features.len() != self.feature_dim {
                return Err(Error::DimensionMismatch {
                    what: "region features",
                    expected: self.feature_dim,
                    found: r.features.len(),
                });
            }
        }
        Ok(())
    }

    /// Part probabilities for a single feature vector.
    pub fn region_probs(&self, x: &[T]) -> Vec<T> {
        let mut logits = vec![T::zero(); self.num_parts];
        self.logits_into(x, &mut logits);
        let mut p = vec![T::zero(); self.num_parts];
        softmax_into(&logits, &mut p);
        p
    }

    pub fn detect(&self, inst: &SceneInstance<T>) -> Result<DetectionSet<T>> {
        self.check_dim(inst)?;
        let probs = inst
            .regions
            .iter()
            .map(|r| self.region_probs(&r.features))
            .collect();
        Ok(DetectionSet {
            num_parts: self.num_parts,
            probs,
        })
    }

    /// `Σ_r weight_r · CE(p_r, gt_r)` and its exact gradient with respect to
    /// [`parameters`](Self::parameters).
    pub fn weighted_roi_loss(&self, inst: &SceneInstance<T>, weights: &[T]) -> Result<(T, Vec<T>)> {
        let mut grad = vec![T::zero(); self.params.len()];
        let loss = self.accumulate_loss(inst, weights, &mut grad)?;
        Ok((loss, grad))
    }

    fn accumulate_loss(&self, inst: &SceneInstance<T>, weights: &[T], grad: &mut [T]) -> Result<T> {
        self.check_dim(inst)?;
        if weights.len() != inst.regions.len() {
            return Err(Error::DimensionMismatch {
                what: "region weights",
                expected: inst.regions.len(),
                found: weights.len(),
            });
        }
        if let Some((index, w)) = weights.iter().enumerate().find(|(_, w)| **w < T::zero()) {
            return Err(Error::NegativeWeight {
                index,
                weight: w.as_f64(),
            });
        }
        let (d, n) = (self.feature_dim, self.num_parts);
        let mut logits = vec![T::zero(); n];
        let mut p = vec![T::zero(); n];
        let mut loss = T::zero();
        for (r, &w) in inst.regions.iter().zip(weights) {
            self.logits_into(&r.features, &mut logits);
            softmax_into(&logits, &mut p);
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            loss += w * (lse - logits[r.part_class]);
            for j in 0..n {
                let delta = if j == r.part_class {
                    p[j] - T::one()
                } else {
                    p[j]
                };
                let g = w * delta;
                let row = &mut grad[j * d..(j + 1) * d];
                for (gw, &x) in row.iter_mut().zip(&r.features) {
                    *gw += g * x;
                }
                grad[n * d + j] += g;
            }
        }
        Ok(loss)
    }

    /// Mean unweighted cross-entropy per region over `data`.
    pub fn mean_loss(&self, data: &[SceneInstance<T>]) -> Result<T> {
        let mut scratch = vec![T::zero(); self.params.len()];
        let mut total = T::zero();
        let mut regions = 0usize;
        for inst in data {
            let ones = vec![T::one(); inst.regions.len()];
            total += self.accumulate_loss(inst, &ones, &mut scratch)?;
            regions += inst.regions.len();
        }
        if regions == 0 {
            return Err(Error::Empty("dataset"));
        }
        Ok(total / T::from_usize_lossy(regions))
    }

    /// One pass of mini-batch gradient descent over `data`, in an order
    /// shuffled from `(seed, epochs_trained)`. `weights[i][r]` scales the loss
    /// of region `r` of instance `i`; `None` means all ones.
    ///
    /// Each step divides the batch gradient by the number of regions in the
    /// batch. Returns the mean weighted loss per region seen during the pass.
    pub fn train_epoch(
        &mut self,
        data: &[SceneInstance<T>],
        weights: Option<&[Vec<T>]>,
    ) -> Result<T> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if let Some(w) = weights {
            if w.len() != data.len() {
                return Err(Error::DimensionMismatch {
                    what: "per-instance weight lists",
                    expected: data.len(),
                    found: w.len(),
                });
            }
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.hyper.seed);
        rng.set_stream(self.epochs_trained as u64 + 1);
        order.shuffle(&mut rng);

        let lr = T::lit(self.hyper.learning_rate);
        let mut grad = vec![T::zero(); self.params.len()];
        let mut epoch_loss = T::zero();
        let mut epoch_regions = 0usize;
        for batch in order.chunks(self.hyper.batch_size.max(1)) {
            grad.iter_mut().for_each(|g| *g = T::zero());
            let mut regions = 0usize;
            for &i in batch {
                let inst = &data[i];
                let loss = match weights {
                    Some(w) => self.accumulate_loss(inst, &w[i], &mut grad)?,
                    None => {
                        let ones = vec![T::one(); inst.regions.len()];
                        self.accumulate_loss(inst, &ones, &mut grad)?
                    }
                };
                epoch_loss += loss;
                regions += inst.regions.len();
            }
            epoch_regions += regions;
            if regions == 0 {
                continue;
            }
            let step = lr / T::from_usize_lossy(regions);
            for (p, &g) in self.params.iter_mut().zip(&grad) {
                *p -= step * g;
            }
        }
        self.epochs_trained += 1;
        let mean = epoch_loss / T::from_usize_lossy(epoch_regions.max(1));
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epochs_trained,
            });
        }
        Ok(mean)
    }

    /// Mean over part classes of per-class region accuracy. Part classes
    /// with no regions in `data` are left out of the mean.
    pub fn part_macro_accuracy(&self, data: &[SceneInstance<T>]) -> Result<f64> {
        let mut hits = vec![0usize; self.num_parts];
        let mut totals = vec![0usize; self.num_parts];
        for inst in data {
            let predicted = self.detect(inst)?.predicted_parts();
            for (r, &pred) in inst.regions.iter().zip(&predicted) {
                totals[r.part_class] += 1;
                if pred == r.part_class {
                    hits[r.part_class] += 1;
                }
            }
        }
        let present: Vec<f64> = hits
            .iter()
            .zip(&totals)
            .filter(|(_, &t)| t > 0)
            .map(|(&h, &t)| h as f64 / t as f64)
            .collect();
        if present.is_empty() {
            return Err(Error::Empty("evaluation split"));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn to_checkpoint(&self, kg: &KnowledgeGraph) -> DetectorCheckpoint<T> {
        let nd = self.num_parts * self.feature_dim;
        DetectorCheckpoint {
            feature_dim: self.feature_dim,
            num_parts: self.num_parts,
            part_labels: kg.part_classes().to_vec(),
            weights: self.params[..nd].to_vec(),
            bias: self.params[nd..].to_vec(),
            hyper: self.hyper,
            epochs_trained: self.epochs_trained,
        }
    }

    pub fn from_checkpoint(ckpt: DetectorCheckpoint<T>, kg: &KnowledgeGraph) -> Result<Self> {
        if ckpt.part_labels != kg.part_classes() {
            return Err(Error::InvalidConfig(
                "detector checkpoint part labels do not match the knowledge graph".into(),
            ));
        }
        let nd = ckpt.num_parts * ckpt.feature_dim;
        if ckpt.weights.len() != nd || ckpt.bias.len() != ckpt.num_parts {
            return Err(Error::DimensionMismatch {
                what: "detector checkpoint parameters",
                expected: nd + ckpt.num_parts,
                found: ckpt.weights.len() + ckpt.bias.len(),
            });
        }
        let mut params = ckpt.weights;
        params.extend(ckpt.bias);
        Ok(Self {
            feature_dim: ckpt.feature_dim,
            num_parts: ckpt.num_parts,
            params,
            hyper: ckpt.hyper,
            epochs_trained: ckpt.epochs_trained,
        })
    }
}

/// On-disk form of a [`PartDetector`]; `weights` is the row-major `n × d`
/// matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorCheckpoint<T> {
    pub feature_dim: usize,
    pub num_parts: usize,
    pub part_labels: Vec<String>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub hyper: DetectorHyper,
    pub epochs_trained: usize,
}
