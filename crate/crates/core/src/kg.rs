//! Expert knowledge graphs: which part classes are typical of which object
//! classes.
//!
//! A graph is read from a JSON document that lists the object classes, the
//! part classes, and the `typical_of` edges between them. Label order in the
//! document fixes the object index `k` and the part index `j` used by every
//! matrix in the crate.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};

/// Bundled knowledge graph for architectural style classification
/// (4 styles, 14 architectural elements).
pub const MONUMAI_JSON: &str = include_str!("../fixtures/monumai_kg.json");

/// A `typical_of` edge, by index into the part and object label lists.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub part: usize,
    pub object: usize,
}

impl Edge {
    pub fn new(part: usize, object: usize) -> Self {
        Self { part, object }
    }
}

/// A graph node: either a part class or an object class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Part(usize),
    Object(usize),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KgDocument {
    object_classes: Vec<String>,
    part_classes: Vec<String>,
    typical_of: Vec<serde_json::Value>,
}

/// Validated, immutable knowledge graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    object_classes: Vec<String>,
    part_classes: Vec<String>,
    typical_of: BTreeSet<Edge>,
    object_index: HashMap<String, usize>,
    part_index: HashMap<String, usize>,
}

impl KnowledgeGraph {
    /// Builds a graph from label lists and `(part, object)` label pairs.
    pub fn new<S: AsRef<str>>(
        object_classes: Vec<String>,
        part_classes: Vec<String>,
        typical_of: &[(S, S)],
    ) -> Result<Self> {
        if object_classes.is_empty() {
            return Err(Error::EmptyClassList {
                list: "object_classes",
            });
        }
        if part_classes.is_empty() {
            return Err(Error::EmptyClassList {
                list: "part_classes",
            });
        }
        let object_index = index_labels(&object_classes, "object_classes", &HashMap::new())?;
        let part_index = index_labels(&part_classes, "part_classes", &object_index)?;
        if object_classes.len() < 2 {
            return Err(Error::TooFewObjectClasses {
                found: object_classes.len(),
            });
        }

        let mut edges = BTreeSet::new();
        for (part, object) in typical_of {
            let (part, object) = (part.as_ref(), object.as_ref());
            let j = *part_index.get(part).ok_or_else(|| {
                Error::unknown(part, format!("edge ({part}, {object}): undeclared part"))
            })?;
            let k = *object_index.get(object).ok_or_else(|| {
                Error::unknown(
                    object,
                    format!("edge ({part}, {object}): undeclared object class"),
                )
            })?;
            if !edges.insert(Edge::new(j, k)) {
                return Err(Error::DuplicateEdge {
                    part: part.to_owned(),
                    object: object.to_owned(),
                });
            }
        }

        Ok(Self {
            object_classes,
            part_classes,
            typical_of: edges,
            object_index,
            part_index,
        })
    }

    /// Parses and validates a KG JSON document.
    pub fn from_json(source: &str) -> Result<Self> {
        let doc: KgDocument = serde_json::from_str(source)?;
        let mut pairs = Vec::with_capacity(doc.typical_of.len());
        for (index, entry) in doc.typical_of.iter().enumerate() {
            let bad = |detail: &str| Error::MalformedEdge {
                index,
                detail: format!("{detail}: {entry}"),
            };
            let items = entry.as_array().ok_or_else(|| bad("not an array"))?;
            if items.len() != 2 {
                // Edge weights are fixed to |t| = 1; a third element would be a weight.
                return Err(bad(
                    "expected exactly two labels (weighted edges are not supported)",
                ));
            }
            let part = items[0]
                .as_str()
                .ok_or_else(|| bad("part label is not a string"))?;
            let object = items[1]
                .as_str()
                .ok_or_else(|| bad("object label is not a string"))?;
            pairs.push((part.to_owned(), object.to_owned()));
        }
        Self::new(doc.object_classes, doc.part_classes, &pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// The bundled architectural-style graph.
    pub fn monumai() -> Self {
        Self::from_json(MONUMAI_JSON).expect("bundled KG is valid")
    }

    /// Serializes back to the KG document format, preserving label order.
    pub fn to_json(&self) -> String {
        let doc = KgDocument {
            object_classes: self.object_classes.clone(),
            part_classes: self.part_classes.clone(),
            typical_of: self
                .typical_of
                .iter()
                .map(|e| {
                    serde_json::json!([self.part_classes[e.part], self.object_classes[e.object]])
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("KG serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn object_classes(&self) -> &[String] {
        &self.object_classes
    }

    pub fn part_classes(&self) -> &[String] {
        &self.part_classes
    }

    /// Number of object classes, `m`.
    pub fn num_objects(&self) -> usize {
        self.object_classes.len()
    }

    /// Number of part classes, `n`.
    pub fn num_parts(&self) -> usize {
        self.part_classes.len()
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.typical_of
    }

    pub fn is_typical(&self, part: usize, object: usize) -> bool {
        self.typical_of.contains(&Edge::new(part, object))
    }

    pub fn object_index(&self, label: &str) -> Option<usize> {
        self.object_index.get(label).copied()
    }

    pub fn part_index(&self, label: &str) -> Option<usize> {
        self.part_index.get(label).copied()
    }

    /// Looks up a label in either list.
    pub fn node(&self, label: &str) -> Option<Node> {
        self.part_index(label)
            .map(Node::Part)
            .or_else(|| self.object_index(label).map(Node::Object))
    }

    pub fn node_label(&self, node: Node) -> &str {
        match node {
            Node::Part(j) => &self.part_classes[j],
            Node::Object(k) => &self.object_classes[k],
        }
    }

    /// Parts typical of object `k`, in part order.
    pub fn typical_parts(&self, object: usize) -> Vec<usize> {
        (0..self.num_parts())
            .filter(|&j| self.is_typical(j, object))
            .collect()
    }

    /// Parts typical of object `k` and of no other object.
    pub fn unique_parts(&self, object: usize) -> Vec<usize> {
        self.typical_parts(object)
            .into_iter()
            .filter(|&j| (0..self.num_objects()).all(|k| k == object || !self.is_typical(j, k)))
            .collect()
    }

    /// Parts not typical of object `k`, in part order.
    pub fn atypical_parts(&self, object: usize) -> Vec<usize> {
        (0..self.num_parts())
            .filter(|&j| !self.is_typical(j, object))
            .collect()
    }

    /// The ±1 attribution-matrix view of the graph.
    pub fn attribution_matrix(&self) -> AttributionMatrix {
        let (m, n) = (self.num_objects(), self.num_parts());
        let mut entries = vec![-1i8; m * n];
        for e in &self.typical_of {
            entries[e.object * n + e.part] = 1;
        }
        AttributionMatrix { m, n, entries }
    }

    /// Every `typical_of` edge with both endpoints in `nodes`.
    pub fn project(&self, nodes: &BTreeSet<Node>) -> BTreeSet<Edge> {
        self.typical_of
            .iter()
            .filter(|e| {
                nodes.contains(&Node::Part(e.part)) && nodes.contains(&Node::Object(e.object))
            })
            .copied()
            .collect()
    }

    /// Label-based [`project`](Self::project).
    pub fn project_labels<'a>(
        &self,
        labels: impl IntoIterator<Item = &'a str>,
    ) -> Result<BTreeSet<Edge>> {
        let nodes = labels
            .into_iter()
            .map(|l| {
                self.node(l)
                    .ok_or_else(|| Error::unknown(l, "projection node set"))
            })
            .collect::<Result<BTreeSet<_>>>()?;
        Ok(self.project(&nodes))
    }

    /// Classifies a part descriptor with the graph alone: each object class
    /// scores the summed evidence of its typical parts.
    pub fn deterministic_classify<T: Scalar>(&self, v: &[T]) -> Result<KgDecision<T>> {
        if v.len() != self.num_parts() {
            return Err(Error::DimensionMismatch {
                what: "feature vector",
                expected: self.num_parts(),
                found: v.len(),
            });
        }
        if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| **x < T::zero()) {
            return Err(Error::NegativeFeature {
                index,
                value: value.as_f64(),
            });
        }
        if v.iter().all(|x| x.is_zero()) {
            return Err(Error::NoEvidence);
        }
        let matrix = self.attribution_matrix();
        let half = T::lit(0.5);
        let mut confidences: Vec<T> = (0..self.num_objects())
            .map(|k| {
                v.iter()
                    .enumerate()
                    .map(|(j, &x)| (T::one() + matrix.sign::<T>(k, j)) * half * x)
                    .sum()
            })
            .collect();
        let total: T = confidences.iter().copied().sum();
        if total > T::zero() {
            for c in &mut confidences {
                *c /= total;
            }
        }
        let class = argmax(&confidences);
        let tie = confidences
            .iter()
            .enumerate()
            .any(|(k, &c)| k != class && c == confidences[class]);
        Ok(KgDecision {
            class,
            confidences,
            tie,
        })
    }
}

fn index_labels(
    labels: &[String],
    list: &'static str,
    other: &HashMap<String, usize>,
) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        if other.contains_key(label) || index.insert(label.clone(), i).is_some() {
            return Err(Error::DuplicateLabel {
                label: label.clone(),
                list,
            });
        }
    }
    Ok(index)
}

/// Output of [`KnowledgeGraph::deterministic_classify`].
#[derive(Debug, Clone, PartialEq)]
pub struct KgDecision<T> {
    /// Winning object class; the lowest index wins ties.
    pub class: usize,
    /// Normalized per-class confidence (sums to 1 when any is positive).
    pub confidences: Vec<T>,
    /// Whether another class shares the winning confidence.
    pub tie: bool,
}

/// `m × n` matrix with entry `+1` where part `j` is typical of object `k`
/// and `-1` elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributionMatrix {
    m: usize,
    n: usize,
    entries: Vec<i8>,
}

impl AttributionMatrix {
    pub fn num_objects(&self) -> usize {
        self.m
    }

    pub fn num_parts(&self) -> usize {
        self.n
    }

    pub fn get(&self, object: usize, part: usize) -> i8 {
        self.entries[object * self.n + part]
    }

    pub fn sign<T: Scalar>(&self, object: usize, part: usize) -> T {
        if self.get(object, part) > 0 {
            T::one()
        } else {
            -T::one()
        }
    }

    pub fn row(&self, object: usize) -> &[i8] {
        &self.entries[object * self.n..(object + 1) * self.n]
    }
}
