//! Shapley attributions of a probabilistic model over tabular inputs.
//!
//! Missing features take their values from a background set (interventional
//! semantics): the value of a coalition `T` for class `k` is the mean over
//! background rows `b` of `f_k(x on T, b elsewhere)`. Two estimators are
//! provided. [`exact_shapley_all`] enumerates coalitions and is the reference
//! for tests; [`kernel_shap_all`] solves the Shapley-kernel weighted least
//! squares problem over enumerated or sampled coalitions.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::scalar::Scalar;

/// Largest input dimension accepted by exact enumeration.
pub const MAX_EXACT_FEATURES: usize = 16;

/// A model mapping `num_inputs` features to `num_outputs` class
/// probabilities.
pub trait Model<T> {
    fn num_inputs(&self) -> usize;
    fn num_outputs(&self) -> usize;
    /// `rows` holds inputs back to back; `out` receives outputs back to back.
    fn predict_batch(&self, rows: &[T], out: &mut [T]);
}

/// Adapts a closure `(input, output)` into a [`Model`].
pub struct FnModel<F> {
    pub inputs: usize,
    pub outputs: usize,
    pub f: F,
}

impl<T, F: Fn(&[T], &mut [T])> Model<T> for FnModel<F> {
    fn num_inputs(&self) -> usize {
        self.inputs
    }

    fn num_outputs(&self) -> usize {
        self.outputs
    }

    fn predict_batch(&self, rows: &[T], out: &mut [T]) {
        for (x, o) in rows
            .chunks_exact(self.inputs)
            .zip(out.chunks_exact_mut(self.outputs))
        {
            (self.f)(x, o);
        }
    }
}

/// Reference rows standing in for missing features.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSet<T> {
    rows: Vec<Vec<T>>,
    mean: Vec<T>,
}

impl<T: Scalar> BackgroundSet<T> {
    pub fn new(rows: Vec<Vec<T>>) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("background set"))?;
        let n = first.len();
        let mut mean = vec![T::zero(); n];
        for r in &rows {
            if r.len() != n {
                return Err(Error::DimensionMismatch {
                    what: "background row",
                    expected: n,
                    found: r.len(),
                });
            }
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        let count = T::from_usize_lossy(rows.len());
        mean.iter_mut().for_each(|m| *m /= count);
        Ok(Self { rows, mean })
    }

    /// Draws `size` distinct rows of `pool` (all of them if fewer), in a
    /// seed-determined order.
    pub fn sample(pool: &[Vec<T>], size: usize, seed: u64) -> Result<Self> {
        if pool.is_empty() || size == 0 {
            return Err(Error::Empty("background set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = sample(&mut rng, pool.len(), size.min(pool.len()));
        Self::new(picked.iter().map(|i| pool[i].clone()).collect())
    }

    pub fn rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Attributions for one instance: entry `(k, j)` is the contribution of
/// feature `j` to class `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapMatrix<T> {
    classes: usize,
    features: usize,
    values: Vec<T>,
}

impl<T: Scalar> ShapMatrix<T> {
    pub fn zeros(classes: usize, features: usize) -> Self {
        Self {
            classes,
            features,
            values: vec![T::zero(); classes * features],
        }
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let features = rows.first().map_or(0, Vec::len);
        let classes = rows.len();
        let mut values = Vec::with_capacity(classes * features);
        for r in rows {
            if r.len() != features {
                return Err(Error::DimensionMismatch {
                    what: "SHAP row",
                    expected: features,
                    found: r.len(),
                });
            }
            values.extend(r);
        }
        Ok(Self {
            classes,
            features,
            values,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn num_features(&self) -> usize {
        self.features
    }

    pub fn get(&self, class: usize, feature: usize) -> T {
        self.values[class * self.features + feature]
    }

    pub fn row(&self, class: usize) -> &[T] {
        &self.values[class * self.features..(class + 1) * self.features]
    }

    fn row_mut(&mut self, class: usize) -> &mut [T] {
        &mut self.values[class * self.features..(class + 1) * self.features]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

fn check_inputs<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    x: &[T],
    bg: &BackgroundSet<T>,
) -> Result<()> {
    let n = model.num_inputs();
    if x.len() != n {
        return Err(Error::DimensionMismatch {
            what: "explained instance",
            expected: n,
            found: x.len(),
        });
    }
    if bg.dim() != n {
        return Err(Error::DimensionMismatch {
            what: "background set",
            expected: n,
            found: bg.dim(),
        });
    }
    Ok(())
}

/// `f(x)` and the background mean output `E_b f(b)`.
pub fn base_values<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    x: &[T],
    bg: &BackgroundSet<T>,
) -> (Vec<T>, Vec<T>) {
    let m = model.num_outputs();
    let mut fx = vec![T::zero(); m];
    model.predict_batch(x, &mut fx);
    let flat: Vec<T> = bg.rows.iter().flatten().copied().collect();
    let mut out = vec![T::zero(); m * bg.rows.len()];
    model.predict_batch(&flat, &mut out);
    let mut mean = vec![T::zero(); m];
    for o in out.chunks_exact(m) {
        for (acc, &v) in mean.iter_mut().zip(o) {
            *acc += v;
        }
    }
    let count = T::from_usize_lossy(bg.rows.len());
    mean.iter_mut().for_each(|v| *v /= count);
    (fx, mean)
}

/// Shapley weight `s! (p - s - 1)! / p!` for every coalition size `s < p`.
fn shapley_weights(p: usize) -> Vec<f64> {
    // 1 / (p · C(p-1, s))
    let mut weights = Vec::with_capacity(p);
    let mut binom = 1.0f64;
    for s in 0..p {
        weights.push(1.0 / (p as f64 * binom));
        binom = binom * (p - 1 - s) as f64 / (s + 1) as f64;
    }
    weights
}

/// Exact Shapley values for every class, by enumeration of coalitions.
///
/// The game is linear in the background rows, so each row is handled as its
/// own game. Features where `x` and the row agree cannot change that row's
/// value and are dropped from its enumeration.
pub fn exact_shapley_all<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    x: &[T],
    bg: &BackgroundSet<T>,
) -> Result<ShapMatrix<T>> {
    let n = model.num_inputs();
    if n > MAX_EXACT_FEATURES {
        return Err(Error::TooManyFeatures {
            n,
            max: MAX_EXACT_FEATURES,
        });
    }
    check_inputs(model, x, bg)?;
    let m = model.num_outputs();

    // Identical background rows share one game.
    let mut games: BTreeMap<Vec<u64>, (usize, &Vec<T>)> = BTreeMap::new();
    for row in &bg.rows {
        let key = row.iter().map(|v| v.as_f64().to_bits()).collect();
        games.entry(key).or_insert((0, row)).0 += 1;
    }

    let mut totals = vec![T::zero(); m * n];
    let mut composite: Vec<T> = Vec::new();
    let mut values: Vec<T> = Vec::new();
    for (count, row) in games.values() {
        let players: Vec<usize> = (0..n).filter(|&j| x[j] != row[j]).collect();
        let p = players.len();
        if p == 0 {
            continue;
        }
        let masks = 1usize << p;
        composite.clear();
        composite.reserve(masks * n);
        for mask in 0..masks {
            composite.extend_from_slice(row);
            let base = mask * n;
            for (t, &j) in players.iter().enumerate() {
                if mask & (1 << t) != 0 {
                    composite[base + j] = x[j];
                }
            }
        }
        values.clear();
        values.resize(masks * m, T::zero());
        model.predict_batch(&composite, &mut values);

        let weights: Vec<T> = shapley_weights(p).into_iter().map(T::lit).collect();
        let scale = T::from_usize_lossy(*count);
        for (t, &j) in players.iter().enumerate() {
            let bit = 1usize << t;
            let mut phi = vec![T::zero(); m];
            for mask in (0..masks).filter(|mk| mk & bit == 0) {
                let w = weights[mask.count_ones() as usize];
                let with = &values[(mask | bit) * m..(mask | bit) * m + m];
                let without = &values[mask * m..mask * m + m];
                for k in 0..m {
                    phi[k] += w * (with[k] - without[k]);
                }
            }
            for k in 0..m {
                totals[k * n + j] += scale * phi[k];
            }
        }
    }
    let rows = T::from_usize_lossy(bg.rows.len());
    totals.iter_mut().for_each(|v| *v /= rows);
    Ok(ShapMatrix {
        classes: m,
        features: n,
        values: totals,
    })
}

/// Exact Shapley values of class `k`.
pub fn exact_shapley<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    x: &[T],
    bg: &BackgroundSet<T>,
    k: usize,
) -> Result<Vec<T>> {
    Ok(exact_shapley_all(model, x, bg)?.row(k).to_vec())
}

/// Shapley kernel weight `(n-1) / (C(n, s) · s · (n - s))`.
pub fn kernel_weight(n: usize, s: usize) -> f64 {
    debug_assert!(s > 0 && s < n);
    let mut binom = 1.0f64;
    for i in 0..s {
        binom = binom * (n - i) as f64 / (i + 1) as f64;
    }
    (n - 1) as f64 / (binom * s as f64 * (n - s) as f64)
}

/// Coalitions and their regression weights. When the budget covers every
/// proper coalition they are all enumerated with exact kernel weights.
/// Otherwise the `2n` coalitions of size 1 and `n - 1` are always enumerated
/// exactly, which keeps the regression full rank, and the remaining budget is
/// filled with distinct coalitions of the middle sizes. Middle sizes are
/// drawn in proportion to their total kernel mass, every draw is paired with
/// its complement, and the draws share that mass in proportion to how often
/// each coalition was hit.
fn coalitions(n: usize, budget: usize, seed: u64) -> BTreeMap<u64, f64> {
    let mut out = BTreeMap::new();
    let proper = if n >= 63 { u64::MAX } else { (1u64 << n) - 2 };
    if (budget as u64) >= proper {
        for mask in 1..=proper {
            out.insert(mask, kernel_weight(n, mask.count_ones() as usize));
        }
        return out;
    }
    // Here 2n <= budget < 2^n - 2, hence n >= 4 and the middle sizes exist.
    let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let edge_weight = kernel_weight(n, 1);
    for j in 0..n {
        out.insert(1u64 << j, edge_weight);
        out.insert(full ^ (1u64 << j), edge_weight);
    }
    let middle: Vec<usize> = (2..n - 1).collect();
    let size_mass: Vec<f64> = middle
        .iter()
        .map(|&s| (n - 1) as f64 / (s * (n - s)) as f64)
        .collect();
    let total: f64 = size_mass.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits: BTreeMap<u64, f64> = BTreeMap::new();
    let mut draws = 0.0;
    while out.len() + hits.len() < budget {
        let mut u = rng.random::<f64>() * total;
        let mut s = *middle.last().expect("n >= 4");
        for (&size, &w) in middle.iter().zip(&size_mass) {
            if u < w {
                s = size;
                break;
            }
            u -= w;
        }
        let mask = sample(&mut rng, n, s)
            .iter()
            .fold(0u64, |acc, j| acc | (1 << j));
        *hits.entry(mask).or_insert(0.0) += 1.0;
        *hits.entry(full ^ mask).or_insert(0.0) += 1.0;
        draws += 2.0;
    }
    for (mask, count) in hits {
        out.insert(mask, total * count / draws);
    }
    out
}

/// Kernel SHAP for every class.
///
/// Efficiency is imposed exactly by eliminating the last feature's value
/// from the regression. With `num_coalition_samples ≥ 2^n − 2` the estimate
/// coincides with the exact Shapley values.
pub fn kernel_shap_all<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    x: &[T],
    bg: &BackgroundSet<T>,
    num_coalition_samples: usize,
    seed: u64,
) -> Result<ShapMatrix<T>> {
    check_inputs(model, x, bg)?;
    let (n, m) = (model.num_inputs(), model.num_outputs());
    if n > 64 {
        return Err(Error::InvalidConfig(format!(
            "kernel SHAP supports at most 64 features, got {n}"
        )));
    }
    let enumerable = n < 63 && num_coalition_samples as u64 >= (1u64 << n) - 2;
    if num_coalition_samples < 2 * n && !enumerable {
        return Err(Error::InvalidConfig(format!(
            "kernel SHAP needs at least 2n = {} coalition samples, got {num_coalition_samples}",
            2 * n
        )));
    }
    let (fx, base) = base_values(model, x, bg);
    let delta: Vec<f64> = fx
        .iter()
        .zip(&base)
        .map(|(&a, &b)| (a - b).as_f64())
        .collect();
    let mut result = ShapMatrix::zeros(m, n);
    if n == 1 {
        for k in 0..m {
            result.row_mut(k)[0] = fx[k] - base[k];
        }
        return Ok(result);
    }

    let coalitions = coalitions(n, num_coalition_samples, seed);
    let rows_per = bg.rows.len();
    let mut composite = Vec::with_capacity(rows_per * n);
    let mut out = vec![T::zero(); rows_per * m];
    let mut xtwx = DMatrix::<f64>::zeros(n - 1, n - 1);
    let mut xtwy = DMatrix::<f64>::zeros(n - 1, m);
    let mut design = vec![0.0f64; n - 1];
    for (&mask, &w) in &coalitions {
        composite.clear();
        for row in &bg.rows {
            for j in 0..n {
                composite.push(if mask & (1 << j) != 0 { x[j] } else { row[j] });
            }
        }
        model.predict_batch(&composite, &mut out);
        let last = ((mask >> (n - 1)) & 1) as f64;
        for (j, d) in design.iter_mut().enumerate() {
            *d = ((mask >> j) & 1) as f64 - last;
        }
        for a in 0..n - 1 {
            if design[a] == 0.0 {
                continue;
            }
            for b in 0..n - 1 {
                xtwx[(a, b)] += w * design[a] * design[b];
            }
        }
        for k in 0..m {
            let value = out.chunks_exact(m).map(|o| o[k].as_f64()).sum::<f64>() / rows_per as f64;
            let y = value - base[k].as_f64() - last * delta[k];
            for a in 0..n - 1 {
                xtwy[(a, k)] += w * design[a] * y;
            }
        }
    }

    let singular = xtwx.clone().svd(false, false).singular_values;
    let (smax, smin) = (singular.max(), singular.min());
    let condition = if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    };
    if !condition.is_finite() || condition > 1e12 {
        return Err(Error::SingularSystem { condition });
    }
    let solution = xtwx
        .lu()
        .solve(&xtwy)
        .ok_or(Error::SingularSystem { condition })?;
    for (k, &gap) in delta.iter().enumerate() {
        let col: DVector<f64> = solution.column(k).into_owned();
        let row = result.row_mut(k);
        for (r, &c) in row.iter_mut().zip(col.iter()) {
            *r = T::lit(c);
        }
        row[n - 1] = T::lit(gap - col.sum());
    }
    Ok(result)
}

/// Kernel SHAP for class `k`.
pub fn kernel_shap<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    x: &[T],
    bg: &BackgroundSet<T>,
    k: usize,
    num_coalition_samples: usize,
    seed: u64,
) -> Result<Vec<T>> {
    Ok(kernel_shap_all(model, x, bg, num_coalition_samples, seed)?
        .row(k)
        .to_vec())
}

/// Which estimator to run over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum ShapMode {
    Exact,
    /// Instance `i` is explained with seed `seed + i`.
    Kernel {
        samples: usize,
        seed: u64,
    },
}

/// Attributions for each row of `features`.
pub fn explain_all<T: Scalar, M: Model<T> + ?Sized>(
    model: &M,
    features: &[Vec<T>],
    bg: &BackgroundSet<T>,
    mode: ShapMode,
) -> Result<Vec<ShapMatrix<T>>> {
    features
        .iter()
        .enumerate()
        .map(|(i, x)| match mode {
            ShapMode::Exact => exact_shapley_all(model, x, bg),
            ShapMode::Kernel { samples, seed } => {
                kernel_shap_all(model, x, bg, samples, seed.wrapping_add(i as u64))
            }
        })
        .collect()
}

/// Per-feature distribution of attributions for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSummary<T> {
    pub feature: usize,
    /// `(shap value, feature value)` per instance, in instance order.
    pub points: Vec<(T, T)>,
    pub mean_abs: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapSummary<T> {
    pub class: usize,
    pub features: Vec<FeatureSummary<T>>,
    /// Feature indices by decreasing mean |SHAP|; ties keep feature order.
    pub ranking: Vec<usize>,
}

pub fn shap_summary<T: Scalar>(
    shap: &[ShapMatrix<T>],
    features: &[Vec<T>],
    class: usize,
) -> Result<ShapSummary<T>> {
    let first = shap.first().ok_or(Error::Empty("SHAP values"))?;
    if features.len() != shap.len() {
        return Err(Error::DimensionMismatch {
            what: "feature rows for SHAP summary",
            expected: shap.len(),
            found: features.len(),
        });
    }
    let n = first.num_features();
    let count = T::from_usize_lossy(shap.len());
    let summaries: Vec<FeatureSummary<T>> = (0..n)
        .map(|j| {
            let points: Vec<(T, T)> = shap
                .iter()
                .zip(features)
                .map(|(s, x)| (s.get(class, j), x[j]))
                .collect();
            let mean_abs = points.iter().map(|(s, _)| s.abs()).sum::<T>() / count;
            FeatureSummary {
                feature: j,
                points,
                mean_abs,
            }
        })
        .collect();
    let mut ranking: Vec<usize> = (0..n).collect();
    ranking.sort_by(|&a, &b| {
        summaries[b]
            .mean_abs
            .partial_cmp(&summaries[a].mean_abs)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(ShapSummary {
        class,
        features: summaries,
        ranking,
    })
}

/// Writes summaries as CSV with columns `part, feature_value, shap_value, class`.
pub fn write_summary_csv<T: Scalar>(
    writer: impl Write,
    kg: &KnowledgeGraph,
    summaries: &[ShapSummary<T>],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["part", "feature_value", "shap_value", "class"])?;
    for summary in summaries {
        let class = &kg.object_classes()[summary.class];
        for f in &summary.features {
            for (s, x) in &f.points {
                w.write_record([
                    kg.part_classes()[f.feature].as_str(),
                    &x.to_string(),
                    &s.to_string(),
                    class.as_str(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<summary csv>", e))?;
    Ok(())
}
