//! Object classifier: a two-layer MLP from the part descriptor `v` to
//! object-class probabilities, trained with mini-batch SGD and momentum.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::scalar::{argmax, softmax_in_place, Scalar};
use crate::shap::Model;

pub const DEFAULT_HIDDEN: usize = 11;

/// `n → hidden (ReLU) → m (softmax)`. Parameters are stored flat in the
/// order `W1 (hidden × n)`, `b1`, `W2 (m × hidden)`, `b2`, matrices
/// row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier<T> {
    num_inputs: usize,
    hidden: usize,
    num_outputs: usize,
    params: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Seeds initialization and the per-epoch shuffle.
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 0.02,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
        }
    }
}

struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    len: usize,
}

impl<T: Scalar> MlpClassifier<T> {
    pub fn zeros(num_inputs: usize, hidden: usize, num_outputs: usize) -> Self {
        let mut clf = Self {
            num_inputs,
            hidden,
            num_outputs,
            params: Vec::new(),
        };
        clf.params = vec![T::zero(); clf.layout().len];
        clf
    }

    /// Glorot-uniform weights and zero biases, drawn from `seed`.
    pub fn seeded(num_inputs: usize, hidden: usize, num_outputs: usize, seed: u64) -> Self {
        let mut clf = Self::zeros(num_inputs, hidden, num_outputs);
        let l = clf.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit1 = (6.0 / (num_inputs + hidden) as f64).sqrt();
        for p in &mut clf.params[l.w1..l.b1] {
            *p = T::lit(rng.random_range(-limit1..limit1));
        }
        let limit2 = (6.0 / (hidden + num_outputs) as f64).sqrt();
        for p in &mut clf.params[l.w2..l.b2] {
            *p = T::lit(rng.random_range(-limit2..limit2));
        }
        clf
    }

    fn layout(&self) -> Layout {
        let (n, h, m) = (self.num_inputs, self.hidden, self.num_outputs);
        let w1 = 0;
        let b1 = w1 + h * n;
        let w2 = b1 + h;
        let b2 = w2 + m * h;
        Layout {
            w1,
            b1,
            w2,
            b2,
            len: b2 + m,
        }
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn parameters(&self) -> &[T] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Writes hidden activations and output probabilities.
    fn forward_into(&self, x: &[T], hidden: &mut [T], out: &mut [T]) {
        let l = self.layout();
        let (n, h) = (self.num_inputs, self.hidden);
        let w1 = &self.params[l.w1..l.b1];
        let b1 = &self.params[l.b1..l.w2];
        for (i, a) in hidden.iter_mut().enumerate() {
            let z = b1[i]
                + w1[i * n..(i + 1) * n]
                    .iter()
                    .zip(x)
                    .map(|(&w, &xi)| w * xi)
                    .sum::<T>();
            *a = z.max(T::zero());
        }
        let w2 = &self.params[l.w2..l.b2];
        let b2 = &self.params[l.b2..];
        for (k, o) in out.iter_mut().enumerate() {
            *o = b2[k]
                + w2[k * h..(k + 1) * h]
                    .iter()
                    .zip(hidden.iter())
                    .map(|(&w, &a)| w * a)
                    .sum::<T>();
        }
        softmax_in_place(out);
    }

    pub fn forward(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.num_inputs {
            return Err(Error::DimensionMismatch {
                what: "classifier input",
                expected: self.num_inputs,
                found: v.len(),
            });
        }
        let mut hidden = vec![T::zero(); self.hidden];
        let mut out = vec![T::zero(); self.num_outputs];
        self.forward_into(v, &mut hidden, &mut out);
        Ok(out)
    }

    pub fn predict(&self, v: &[T]) -> Result<usize> {
        Ok(argmax(&self.forward(v)?))
    }

    /// Cross-entropy of `(x, label)` and its gradient with respect to
    /// [`parameters`](Self::parameters), accumulated into `grad`.
    fn accumulate(
        &self,
        x: &[T],
        label: usize,
        hidden: &mut [T],
        out: &mut [T],
        grad: &mut [T],
    ) -> T {
        let l = self.layout();
        let (n, h) = (self.num_inputs, self.hidden);
        self.forward_into(x, hidden, out);
        let loss = -out[label].max(T::min_positive_value()).ln();
        let w2 = &self.params[l.w2..l.b2];
        for (k, &p) in out.iter().enumerate() {
            let delta = if k == label { p - T::one() } else { p };
            for (i, &a) in hidden.iter().enumerate() {
                grad[l.w2 + k * h + i] += delta * a;
            }
            grad[l.b2 + k] += delta;
        }
        for (i, &a) in hidden.iter().enumerate() {
            if a <= T::zero() {
                continue;
            }
            let back: T = out
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let delta = if k == label { p - T::one() } else { p };
                    delta * w2[k * h + i]
                })
                .sum();
            for (jx, &xj) in x.iter().enumerate() {
                grad[l.w1 + i * n + jx] += back * xj;
            }
            grad[l.b1 + i] += back;
        }
        loss
    }

    pub fn loss_and_grad(&self, x: &[T], label: usize) -> Result<(T, Vec<T>)> {
        if x.len() != self.num_inputs {
            return Err(Error::DimensionMismatch {
                what: "classifier input",
                expected: self.num_inputs,
                found: x.len(),
            });
        }
        let mut grad = vec![T::zero(); self.params.len()];
        let mut hidden = vec![T::zero(); self.hidden];
        let mut out = vec![T::zero(); self.num_outputs];
        let loss = self.accumulate(x, label, &mut hidden, &mut out, &mut grad);
        Ok((loss, grad))
    }

    /// Mean cross-entropy over `pairs`.
    pub fn mean_loss(&self, pairs: &[(Vec<T>, usize)]) -> Result<T> {
        if pairs.is_empty() {
            return Err(Error::Empty("labeled set"));
        }
        let mut total = T::zero();
        for (x, y) in pairs {
            let p = self.forward(x)?;
            total += -p[*y].max(T::min_positive_value()).ln();
        }
        Ok(total / T::from_usize_lossy(pairs.len()))
    }

    /// Continues training from the current parameters. Returns the mean
    /// training loss of each epoch.
    pub fn train(
        &mut self,
        pairs: &[(Vec<T>, usize)],
        cfg: &ClassifierTrainConfig,
    ) -> Result<Vec<T>> {
        if pairs.is_empty() {
            return Err(Error::Empty("training set"));
        }
        for (x, y) in pairs {
            if x.len() != self.num_inputs {
                return Err(Error::DimensionMismatch {
                    what: "classifier input",
                    expected: self.num_inputs,
                    found: x.len(),
                });
            }
            if *y >= self.num_outputs {
                return Err(Error::InvalidConfig(format!(
                    "label {y} out of range for {} classes",
                    self.num_outputs
                )));
            }
        }
        let lr = T::lit(cfg.learning_rate);
        let mu = T::lit(cfg.momentum);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut grad = vec![T::zero(); self.params.len()];
        let mut velocity = vec![T::zero(); self.params.len()];
        let mut hidden = vec![T::zero(); self.hidden];
        let mut out = vec![T::zero(); self.num_outputs];
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = T::zero();
            for batch in order.chunks(cfg.batch_size.max(1)) {
                grad.iter_mut().for_each(|g| *g = T::zero());
                for &i in batch {
                    let (x, y) = &pairs[i];
                    total += self.accumulate(x, *y, &mut hidden, &mut out, &mut grad);
                }
                let scale = T::one() / T::from_usize_lossy(batch.len());
                for ((p, v), &g) in self.params.iter_mut().zip(&mut velocity).zip(&grad) {
                    *v = mu * *v + g * scale;
                    *p -= lr * *v;
                }
            }
            let mean = total / T::from_usize_lossy(pairs.len());
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            trace.push(mean);
        }
        Ok(trace)
    }

    /// Fresh seeded initialization followed by [`train`](Self::train).
    pub fn fit(
        num_inputs: usize,
        hidden: usize,
        num_outputs: usize,
        pairs: &[(Vec<T>, usize)],
        cfg: &ClassifierTrainConfig,
    ) -> Result<Self> {
        let mut clf = Self::seeded(num_inputs, hidden, num_outputs, cfg.seed);
        clf.train(pairs, cfg)?;
        Ok(clf)
    }

    /// Fraction of argmax-correct predictions.
    pub fn accuracy(&self, pairs: &[(Vec<T>, usize)]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Empty("labeled set"));
        }
        let mut correct = 0usize;
        for (x, y) in pairs {
            if self.predict(x)? == *y {
                correct += 1;
            }
        }
        Ok(correct as f64 / pairs.len() as f64)
    }

    pub fn to_checkpoint(&self, kg: &KnowledgeGraph) -> ClassifierCheckpoint<T> {
        let l = self.layout();
        ClassifierCheckpoint {
            num_inputs: self.num_inputs,
            hidden: self.hidden,
            num_outputs: self.num_outputs,
            part_labels: kg.part_classes().to_vec(),
            object_labels: kg.object_classes().to_vec(),
            w1: self.params[l.w1..l.b1].to_vec(),
            b1: self.params[l.b1..l.w2].to_vec(),
            w2: self.params[l.w2..l.b2].to_vec(),
            b2: self.params[l.b2..].to_vec(),
        }
    }

    pub fn from_checkpoint(ckpt: ClassifierCheckpoint<T>, kg: &KnowledgeGraph) -> Result<Self> {
        if ckpt.part_labels != kg.part_classes() || ckpt.object_labels != kg.object_classes() {
            return Err(Error::InvalidConfig(
                "classifier checkpoint labels do not match the knowledge graph".into(),
            ));
        }
        let mut clf = Self::zeros(ckpt.num_inputs, ckpt.hidden, ckpt.num_outputs);
        let params: Vec<T> = [ckpt.w1, ckpt.b1, ckpt.w2, ckpt.b2].concat();
        if params.len() != clf.params.len() {
            return Err(Error::DimensionMismatch {
                what: "classifier checkpoint parameters",
                expected: clf.params.len(),
                found: params.len(),
            });
        }
        clf.params = params;
        Ok(clf)
    }
}

impl<T: Scalar> Model<T> for MlpClassifier<T> {
    fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    fn predict_batch(&self, rows: &[T], out: &mut [T]) {
        let mut hidden = vec![T::zero(); self.hidden];
        for (x, o) in rows
            .chunks_exact(self.num_inputs)
            .zip(out.chunks_exact_mut(self.num_outputs))
        {
            self.forward_into(x, &mut hidden, o);
        }
    }
}

/// On-disk form of an [`MlpClassifier`]; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierCheckpoint<T> {
    pub num_inputs: usize,
    pub hidden: usize,
    pub num_outputs: usize,
    pub part_labels: Vec<String>,
    pub object_labels: Vec<String>,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}
