//! Synthetic scene datasets consistent with a knowledge graph.
//!
//! Each scene has an object class and a handful of regions. A region carries
//! a ground-truth part class and a feature vector drawn from a unit-variance
//! Gaussian centred on that part's mean. Part labels are drawn from the parts
//! typical of the scene's class, except that with probability `noise_rate` an
//! atypical part is drawn instead.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Region<T> {
    pub part_class: usize,
    pub features: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance<T> {
    pub id: String,
    pub object_class: usize,
    pub regions: Vec<Region<T>>,
}

impl<T> SceneInstance<T> {
    pub fn feature_dim(&self) -> Option<usize> {
        self.regions.first().map(|r| r.features.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub regions_per_instance: RangeInclusive<usize>,
    pub noise_rate: f64,
    pub separation: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            feature_dim: 8,
            regions_per_instance: 2..=6,
            noise_rate: 0.0,
            separation: 6.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "feature_dim must be at least 2, got {}",
                self.feature_dim
            )));
        }
        let (lo, hi) = (
            *self.regions_per_instance.start(),
            *self.regions_per_instance.end(),
        );
        if lo < 1 || hi < lo {
            return Err(Error::InvalidConfig(format!(
                "regions_per_instance must be a non-empty range starting at 1 or more, got {lo}..={hi}"
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::InvalidConfig(format!(
                "noise_rate must lie in [0, 1], got {}",
                self.noise_rate
            )));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        Ok(())
    }
}

/// Part-conditional feature means, pairwise at least `separation` apart.
///
/// Means are placed one at a time by rejection sampling from an isotropic
/// Gaussian of scale `separation`; the scale grows if a placement keeps
/// failing, which only happens when `feature_dim` is small.
pub fn part_means(num_parts: usize, cfg: &GeneratorConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut scale = cfg.separation;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_parts);
    let mut failures = 0;
    while means.len() < num_parts {
        let candidate: Vec<f64> = (0..cfg.feature_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if means
            .iter()
            .all(|m| distance(m, &candidate) >= cfg.separation)
        {
            means.push(candidate);
            failures = 0;
        } else {
            failures += 1;
            if failures == 1000 {
                scale *= 1.25;
                failures = 0;
            }
        }
    }
    means
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Generates `count` scenes. Deterministic in `(kg, cfg, count)`.
///
/// The first region of every scene draws from the parts typical of *only*
/// the scene's class (when the class has any), so that each noise-free scene
/// carries at least one class-unique part.
pub fn generate_dataset<T: Scalar>(
    kg: &KnowledgeGraph,
    cfg: &GeneratorConfig,
    count: usize,
) -> Result<Vec<SceneInstance<T>>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::InvalidConfig("count must be at least 1".into()));
    }
    let m = kg.num_objects();
    let pools: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)> = (0..m)
        .map(|k| {
            (
                kg.typical_parts(k),
                kg.unique_parts(k),
                kg.atypical_parts(k),
            )
        })
        .collect();
    for (k, (typical, _, atypical)) in pools.iter().enumerate() {
        if typical.is_empty() && cfg.noise_rate < 1.0 {
            return Err(Error::NoPartsToDraw {
                class: kg.object_classes()[k].clone(),
                which: "typical",
            });
        }
        if atypical.is_empty() && cfg.noise_rate > 0.0 {
            return Err(Error::NoPartsToDraw {
                class: kg.object_classes()[k].clone(),
                which: "atypical",
            });
        }
    }

    let means = part_means(kg.num_parts(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let object_class = rng.random_range(0..m);
        let (typical, unique, atypical) = &pools[object_class];
        let num_regions = rng.random_range(cfg.regions_per_instance.clone());
        let mut regions = Vec::with_capacity(num_regions);
        for r in 0..num_regions {
            let noisy = rng.random_bool(cfg.noise_rate);
            let pool = if noisy {
                atypical
            } else if r == 0 && !unique.is_empty() {
                unique
            } else {
                typical
            };
            let part = *pool.choose(&mut rng).expect("non-empty pool");
            let features = means[part]
                .iter()
                .map(|&mu| T::lit(mu + rng.sample::<f64, _>(StandardNormal)))
                .collect();
            regions.push(Region {
                part_class: part,
                features,
            });
        }
        out.push(SceneInstance {
            id: format!("scene-{index:06}"),
            object_class,
            regions,
        });
    }
    Ok(out)
}

/// Fraction of regions whose part is not typical of their scene's class.
pub fn atypical_fraction<T>(kg: &KnowledgeGraph, data: &[SceneInstance<T>]) -> f64 {
    let (mut atypical, mut total) = (0usize, 0usize);
    for inst in data {
        for r in &inst.regions {
            total += 1;
            if !kg.is_typical(r.part_class, inst.object_class) {
                atypical += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        atypical as f64 / total as f64
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionRecord<T> {
    part_class: String,
    features: Vec<T>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord<T> {
    id: String,
    object_class: String,
    regions: Vec<RegionRecord<T>>,
}

/// Writes one JSON object per line.
pub fn write_dataset<T: Scalar>(
    writer: impl Write,
    kg: &KnowledgeGraph,
    data: &[SceneInstance<T>],
) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for inst in data {
        let record = InstanceRecord {
            id: inst.id.clone(),
            object_class: kg.object_classes()[inst.object_class].clone(),
            regions: inst
                .regions
                .iter()
                .map(|r| RegionRecord {
                    part_class: kg.part_classes()[r.part_class].clone(),
                    features: r.features.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n").map_err(|e| Error::io("<dataset>", e))?;
    }
    w.flush().map_err(|e| Error::io("<dataset>", e))
}

/// Reads a JSON Lines dataset, resolving labels against `kg`. Blank lines
/// are skipped; line numbers in errors are 1-based.
pub fn read_dataset<T: Scalar>(
    reader: impl BufRead,
    kg: &KnowledgeGraph,
) -> Result<Vec<SceneInstance<T>>> {
    let mut out = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| Error::Malformed {
            line: line_no,
            message,
        };
        let record: InstanceRecord<T> =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let object_class = kg
            .object_index(&record.object_class)
            .ok_or_else(|| malformed(format!("unknown object class `{}`", record.object_class)))?;
        if record.regions.is_empty() {
            return Err(malformed(format!(
                "instance `{}` has no regions",
                record.id
            )));
        }
        let mut regions = Vec::with_capacity(record.regions.len());
        for r in record.regions {
            let part_class = kg
                .part_index(&r.part_class)
                .ok_or_else(|| malformed(format!("unknown part class `{}`", r.part_class)))?;
            let d = *dim.get_or_insert(r.features.len());
            if r.features.len() != d || d == 0 {
                return Err(malformed(format!(
                    "feature dimension {} does not match {d}",
                    r.features.len()
                )));
            }
            if r.features.iter().any(|x| !x.is_finite()) {
                return Err(malformed("non-finite feature value".into()));
            }
            regions.push(Region {
                part_class,
                features: r.features,
            });
        }
        out.push(SceneInstance {
            id: record.id,
            object_class,
            regions,
        });
    }
    Ok(out)
}

pub fn save_dataset<T: Scalar>(
    path: impl AsRef<Path>,
    kg: &KnowledgeGraph,
    data: &[SceneInstance<T>],
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(file, kg, data)
}

pub fn load_dataset<T: Scalar>(
    path: impl AsRef<Path>,
    kg: &KnowledgeGraph,
) -> Result<Vec<SceneInstance<T>>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), kg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// 60/20/20 assignment from a hash of the instance id.
    pub fn of(id: &str) -> Split {
        let digest = Sha256::digest(id.as_bytes());
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        match u64::from_le_bytes(head) % 100 {
            0..=59 => Split::Train,
            60..=79 => Split::Val,
            _ => Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<SceneInstance<T>>,
    pub val: Vec<SceneInstance<T>>,
    pub test: Vec<SceneInstance<T>>,
}

impl<T> Splits<T> {
    pub fn from_dataset(data: Vec<SceneInstance<T>>) -> Self {
        let mut splits = Splits {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for inst in data {
            match Split::of(&inst.id) {
                Split::Train => splits.train.push(inst),
                Split::Val => splits.val.push(inst),
                Split::Test => splits.test.push(inst),
            }
        }
        splits
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(noise: f64) -> GeneratorConfig {
        GeneratorConfig {
            noise_rate: noise,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn noise_free_regions_are_typical() {
        let kg = KnowledgeGraph::monumai();
        let data = generate_dataset::<f64>(&kg, &cfg(0.0), 300).unwrap();
        assert_eq!(atypical_fraction(&kg, &data), 0.0);
        for inst in &data {
            // First region always carries a class-unique part.
            assert!(kg
                .unique_parts(inst.object_class)
                .contains(&inst.regions[0].part_class));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let kg = KnowledgeGraph::monumai();
        let a = generate_dataset::<f64>(&kg, &cfg(0.2), 50).unwrap();
        let b = generate_dataset::<f64>(&kg, &cfg(0.2), 50).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn means_respect_separation() {
        for (dim, sep) in [(2usize, 3.0f64), (8, 6.0), (3, 0.5)] {
            let c = GeneratorConfig {
                feature_dim: dim,
                separation: sep,
                ..GeneratorConfig::default()
            };
            let means = part_means(14, &c);
            for a in 0..14 {
                for b in a + 1..14 {
                    assert!(distance(&means[a], &means[b]) >= sep);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let kg = KnowledgeGraph::monumai();
        let bad = [
            GeneratorConfig {
                feature_dim: 1,
                ..cfg(0.0)
            },
            GeneratorConfig {
                regions_per_instance: 0..=3,
                ..cfg(0.0)
            },
            GeneratorConfig {
                noise_rate: 1.5,
                ..cfg(0.0)
            },
            GeneratorConfig {
                separation: 0.0,
                ..cfg(0.0)
            },
        ];
        for c in bad {
            assert!(generate_dataset::<f64>(&kg, &c, 10).is_err(), "{c:?}");
        }
        assert!(generate_dataset::<f64>(&kg, &cfg(0.0), 0).is_err());
    }

    #[test]
    fn class_without_typical_parts() {
        let kg = KnowledgeGraph::new(
            vec!["A".into(), "B".into()],
            vec!["p".into(), "q".into()],
            &[("p", "A")],
        )
        .unwrap();
        match generate_dataset::<f64>(&kg, &cfg(0.0), 10) {
            Err(Error::NoPartsToDraw { class, .. }) => assert_eq!(class, "B"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_dataset_round_trip() {
        let kg = KnowledgeGraph::monumai();
        let mut buf = Vec::new();
        write_dataset::<f64>(&mut buf, &kg, &[]).unwrap();
        assert!(buf.is_empty());
        assert!(read_dataset::<f64>(&buf[..], &kg).unwrap().is_empty());
    }

    #[test]
    fn single_instance_round_trip() {
        let kg = KnowledgeGraph::monumai();
        let data = vec![SceneInstance {
            id: "only".to_string(),
            object_class: 2,
            regions: vec![Region {
                part_class: 9,
                features: vec![0.1f64, -2.5, 1e-300],
            }],
        }];
        let mut buf = Vec::new();
        write_dataset(&mut buf, &kg, &data).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
        assert_eq!(read_dataset::<f64>(&buf[..], &kg).unwrap(), data);
    }

    #[test]
    fn unknown_part_label_names_line() {
        let kg = KnowledgeGraph::monumai();
        let text = concat!(
            r#"{"id":"a","object_class":"Gothic","regions":[{"part_class":"pointed arch","features":[1.0,2.0]}]}"#,
            "\n",
            r#"{"id":"b","object_class":"Gothic","regions":[{"part_class":"flying buttress","features":[1.0,2.0]}]}"#,
            "\n"
        );
        match read_dataset::<f64>(text.as_bytes(), &kg) {
            Err(Error::Malformed { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("flying buttress"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_dataset::<f64>("{not json\n".as_bytes(), &kg),
            Err(Error::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn split_ratios_are_roughly_60_20_20() {
        let ids: Vec<String> = (0..5000).map(|i| format!("scene-{i:06}")).collect();
        let train = ids
            .iter()
            .filter(|id| Split::of(id) == Split::Train)
            .count();
        let val = ids.iter().filter(|id| Split::of(id) == Split::Val).count();
        assert!((train as f64 / 5000.0 - 0.6).abs() < 0.03);
        assert!((val as f64 / 5000.0 - 0.2).abs() < 0.03);
    }
}
