//! Alignment between Shapley attributions and the knowledge graph.
//!
//! * [`build_sag`] turns one instance's descriptor and attributions into a
//!   SHAP attribution graph (SAG).
//! * [`misattribution`] scores a single attribution against the graph's ±1
//!   entry, and the `alpha_*` functions turn those scores into loss weights
//!   for the detector.
//! * [`shap_ged`] compares a SAG with the graph projected onto the SAG's
//!   nodes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{AttributionMatrix, Edge, KnowledgeGraph, Node};
use crate::scalar::Scalar;
use crate::shap::ShapMatrix;

/// Default part-detected threshold on feature values.
pub const DEFAULT_DETECTION_THRESHOLD: f64 = 0.05;

/// SHAP attribution graph: `(part, object)` edges.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sag {
    edges: BTreeSet<Edge>,
}

impl Sag {
    pub fn from_edges(edges: impl IntoIterator<Item = Edge>) -> Self {
        Self {
            edges: edges.into_iter().collect(),
        }
    }

    pub fn edges(&self) -> &BTreeSet<Edge> {
        &self.edges
    }

    pub fn insert(&mut self, edge: Edge) -> bool {
        self.edges.insert(edge)
    }

    pub fn remove(&mut self, edge: &Edge) -> bool {
        self.edges.remove(edge)
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edge endpoints; isolated nodes never appear.
    pub fn nodes(&self) -> BTreeSet<Node> {
        self.edges
            .iter()
            .flat_map(|e| [Node::Part(e.part), Node::Object(e.object)])
            .collect()
    }

    /// `(part label, object label)` pairs.
    pub fn labeled_edges<'a>(&self, kg: &'a KnowledgeGraph) -> Vec<(&'a str, &'a str)> {
        self.edges
            .iter()
            .map(|e| {
                (
                    kg.part_classes()[e.part].as_str(),
                    kg.object_classes()[e.object].as_str(),
                )
            })
            .collect()
    }

    /// JSON edge list `[[part, object], ...]`.
    pub fn to_json(&self, kg: &KnowledgeGraph) -> String {
        serde_json::to_string_pretty(&self.labeled_edges(kg)).expect("edge list serializes")
    }

    pub fn from_json(text: &str, kg: &KnowledgeGraph) -> Result<Self> {
        let pairs: Vec<(String, String)> = serde_json::from_str(text)?;
        let mut sag = Sag::default();
        for (part, object) in pairs {
            let j = kg
                .part_index(&part)
                .ok_or_else(|| Error::unknown(&part, "SAG edge list"))?;
            let k = kg
                .object_index(&object)
                .ok_or_else(|| Error::unknown(&object, "SAG edge list"))?;
            if !sag.insert(Edge::new(j, k)) {
                return Err(Error::DuplicateEdge { part, object });
            }
        }
        Ok(sag)
    }

    /// Graphviz rendering; part nodes are ellipses and object classes boxes.
    pub fn to_dot(&self, kg: &KnowledgeGraph) -> String {
        let mut out = String::from("graph SAG {\n");
        for node in self.nodes() {
            let shape = match node {
                Node::Part(_) => "ellipse",
                Node::Object(_) => "box",
            };
            let _ = writeln!(out, "  {} [shape={shape}];", quote(kg.node_label(node)));
        }
        for (part, object) in self.labeled_edges(kg) {
            let _ = writeln!(out, "  {} -- {};", quote(part), quote(object));
        }
        out.push_str("}\n");
        out
    }
}

fn quote(label: &str) -> String {
    format!("\"{}\"", label.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Builds the SAG of one instance. For every class `k` and part `j`, edge
/// `(j, k)` is added when the part is present (`v_j > s`) and pushes towards
/// `k`, or when it is absent (`v_j ≤ s`) and its absence pushes away from
/// `k`. Zero attributions never add an edge.
pub fn build_sag<T: Scalar>(v: &[T], shap: &ShapMatrix<T>, s: T) -> Sag {
    let mut sag = Sag::default();
    for k in 0..shap.num_classes() {
        for (j, &value) in v.iter().enumerate() {
            let phi = shap.get(k, j);
            let present = value > s;
            if (present && phi > T::zero()) || (!present && phi < T::zero()) {
                sag.insert(Edge::new(j, k));
            }
        }
    }
    sag
}

/// Misattribution of a single attribution: `(-kg_sign · shap)^+` when the
/// feature value exceeds `v_threshold`, and 0 otherwise (no part detected,
/// nothing to correct).
pub fn beta<T: Scalar>(shap: T, kg_sign: i8, feature: T, v_threshold: T) -> T {
    if feature <= v_threshold {
        return T::zero();
    }
    let sign = if kg_sign > 0 { T::one() } else { -T::one() };
    (-sign * shap).max(T::zero())
}

/// [`beta`] for class `k` and part `j` of one instance.
pub fn misattribution<T: Scalar>(
    shap: &ShapMatrix<T>,
    kg: &AttributionMatrix,
    features: &[T],
    k: usize,
    j: usize,
    v_threshold: T,
) -> T {
    beta(shap.get(k, j), kg.get(k, j), features[j], v_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaKind {
    /// `h · β + 1`
    Linear,
    /// `e^(h · β)`
    Exponential,
}

pub fn alpha_bbox<T: Scalar>(beta: T, h: T, kind: AlphaKind) -> T {
    match kind {
        AlphaKind::Linear => h * beta + T::one(),
        AlphaKind::Exponential => (h * beta).exp(),
    }
}

/// Largest per-part weight of an instance for class `class`.
pub fn alpha_instance<T: Scalar>(
    shap: &ShapMatrix<T>,
    kg: &AttributionMatrix,
    features: &[T],
    class: usize,
    h: T,
    kind: AlphaKind,
    v_threshold: T,
) -> T {
    (0..kg.num_parts())
        .map(|j| {
            alpha_bbox(
                misattribution(shap, kg, features, class, j, v_threshold),
                h,
                kind,
            )
        })
        .fold(T::one(), T::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    LinearBbox,
    ExpBbox,
    LinearInstance,
    ExpInstance,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 4] = [
        WeightScheme::LinearBbox,
        WeightScheme::ExpBbox,
        WeightScheme::LinearInstance,
        WeightScheme::ExpInstance,
    ];

    pub fn kind(self) -> AlphaKind {
        match self {
            WeightScheme::LinearBbox | WeightScheme::LinearInstance => AlphaKind::Linear,
            WeightScheme::ExpBbox | WeightScheme::ExpInstance => AlphaKind::Exponential,
        }
    }

    pub fn instance_level(self) -> bool {
        matches!(
            self,
            WeightScheme::LinearInstance | WeightScheme::ExpInstance
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            WeightScheme::LinearBbox => "linear-bbox",
            WeightScheme::ExpBbox => "exp-bbox",
            WeightScheme::LinearInstance => "linear-instance",
            WeightScheme::ExpInstance => "exp-instance",
        }
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightScheme::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown weight scheme `{s}`")))
    }
}

/// Weighting scheme plus its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Weighting<T> {
    pub scheme: WeightScheme,
    /// Balancing factor `h > 0`.
    pub h: T,
    /// Feature values at or below this count as "part not detected".
    pub v_threshold: T,
}

/// Loss weights for the regions of one instance.
///
/// Box-level schemes weight region `r` by the misattribution of its
/// *predicted* part towards the instance's ground-truth class; instance-level
/// schemes give every region the instance maximum.
pub fn region_weights<T: Scalar>(
    shap: &ShapMatrix<T>,
    kg: &AttributionMatrix,
    features: &[T],
    gt_class: usize,
    predicted_parts: &[usize],
    weighting: &Weighting<T>,
) -> Vec<T> {
    let Weighting {
        scheme,
        h,
        v_threshold,
    } = *weighting;
    let kind = scheme.kind();
    if scheme.instance_level() {
        let alpha = alpha_instance(shap, kg, features, gt_class, h, kind, v_threshold);
        vec![alpha; predicted_parts.len()]
    } else {
        predicted_parts
            .iter()
            .map(|&j| {
                alpha_bbox(
                    misattribution(shap, kg, features, gt_class, j, v_threshold),
                    h,
                    kind,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GedMode {
    /// Edges in exactly one of the SAG and the projection.
    #[default]
    Symmetric,
    /// SAG edges absent from the projection.
    OneSided,
}

/// Edit distance between a SAG and the knowledge graph restricted to the
/// SAG's nodes. Node sets coincide, so only edges are counted.
pub fn shap_ged(sag: &Sag, kg: &KnowledgeGraph, mode: GedMode) -> usize {
    let projection = kg.project(&sag.nodes());
    match mode {
        GedMode::Symmetric => sag.edges().symmetric_difference(&projection).count(),
        GedMode::OneSided => sag.edges().difference(&projection).count(),
    }
}

/// Per-instance GED and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GedReport {
    pub per_instance: BTreeMap<String, usize>,
    pub mean: f64,
}

impl GedReport {
    /// `{instance_id: ged, ..., "mean": value}`.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (id, ged) in &self.per_instance {
            map.insert(id.clone(), (*ged).into());
        }
        map.insert("mean".into(), self.mean.into());
        serde_json::Value::Object(map)
    }
}

/// SHAP GED of every instance and the mean over them.
pub fn ged_report<T: Scalar>(
    ids: &[String],
    features: &[Vec<T>],
    shap: &[ShapMatrix<T>],
    kg: &KnowledgeGraph,
    s: T,
    mode: GedMode,
) -> Result<GedReport> {
    if features.is_empty() {
        return Err(Error::Empty("test split"));
    }
    if ids.len() != features.len() || shap.len() != features.len() {
        return Err(Error::DimensionMismatch {
            what: "SHAP rows for GED",
            expected: features.len(),
            found: shap.len().min(ids.len()),
        });
    }
    let mut per_instance = BTreeMap::new();
    let mut total = 0usize;
    for ((id, v), phi) in ids.iter().zip(features).zip(shap) {
        let ged = shap_ged(&build_sag(v, phi, s), kg, mode);
        total += ged;
        per_instance.insert(id.clone(), ged);
    }
    Ok(GedReport {
        per_instance,
        mean: total as f64 / features.len() as f64,
    })
}

/// Mean SHAP GED over a set of instances.
pub fn mean_shap_ged<T: Scalar>(
    features: &[Vec<T>],
    shap: &[ShapMatrix<T>],
    kg: &KnowledgeGraph,
    s: T,
    mode: GedMode,
) -> Result<f64> {
    let ids: Vec<String> = (0..features.len()).map(|i| i.to_string()).collect();
    Ok(ged_report(&ids, features, shap, kg, s, mode)?.mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_examples() {
        assert_eq!(beta(0.2, 1, 1.0, 0.0), 0.0);
        assert_eq!(beta(0.2, -1, 1.0, 0.0), 0.2);
        assert_eq!(beta(-0.7, 1, 0.0, 0.0), 0.0);
        assert_eq!(beta(0.7, -1, 0.0, 0.0), 0.0);
    }

    #[test]
    fn alpha_examples() {
        for kind in [AlphaKind::Linear, AlphaKind::Exponential] {
            assert_eq!(alpha_bbox(0.0, 1.0, kind), 1.0);
        }
        assert_eq!(alpha_bbox(0.5, 1.0, AlphaKind::Linear), 1.5);
        assert!((alpha_bbox(0.5f64, 1.0, AlphaKind::Exponential) - 1.6487212707).abs() < 1e-9);
    }

    fn toy() -> (KnowledgeGraph, AttributionMatrix) {
        let kg = KnowledgeGraph::new(
            vec!["A".into(), "B".into()],
            vec!["p".into(), "q".into(), "r".into()],
            &[("p", "A"), ("q", "B"), ("r", "B")],
        )
        .unwrap();
        let a = kg.attribution_matrix();
        (kg, a)
    }

    #[test]
    fn instance_alpha_takes_the_maximum() {
        let (_, a) = toy();
        // Class A: parts q and r are atypical, so positive SHAP is misattributed.
        let shap = ShapMatrix::from_rows(vec![vec![0.1, 0.3, 0.1], vec![0.0, 0.0, 0.0]]).unwrap();
        let v = [1.0, 1.0, 1.0];
        let alpha: f64 = alpha_instance(&shap, &a, &v, 0, 1.0, AlphaKind::Linear, 0.0);
        assert!((alpha - 1.3).abs() < 1e-15);
        let zero = ShapMatrix::<f64>::zeros(2, 3);
        assert_eq!(
            alpha_instance(&zero, &a, &v, 0, 1.0, AlphaKind::Exponential, 0.0),
            1.0
        );
    }

    #[test]
    fn region_weights_follow_predicted_parts() {
        let (_, a) = toy();
        let shap = ShapMatrix::from_rows(vec![vec![0.2, 0.4, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let v = [1.0, 1.0, 0.0];
        let weighting = |scheme| Weighting {
            scheme,
            h: 1.0,
            v_threshold: 0.0,
        };
        let w = region_weights(
            &shap,
            &a,
            &v,
            0,
            &[0, 1, 2],
            &weighting(WeightScheme::LinearBbox),
        );
        assert_eq!(w, vec![1.0, 1.4, 1.0]);
        let w = region_weights(
            &shap,
            &a,
            &v,
            0,
            &[0, 1, 2],
            &weighting(WeightScheme::LinearInstance),
        );
        assert_eq!(w, vec![1.4; 3]);
    }

    #[test]
    fn sag_boundaries() {
        let zero = ShapMatrix::<f64>::zeros(2, 3);
        assert!(build_sag(&[1.0, 0.0, 0.5], &zero, 0.05).is_empty());
        let positive = ShapMatrix::from_rows(vec![vec![0.1; 3], vec![0.2; 3]]).unwrap();
        assert_eq!(
            build_sag(&[1.0, 1.0, 1.0], &positive, 0.05).edges().len(),
            6
        );
        // Exactly at the threshold counts as absent.
        assert!(build_sag(&[0.05, 0.05, 0.05], &positive, 0.05).is_empty());
    }

    #[test]
    fn ged_modes() {
        let (kg, _) = toy();
        assert_eq!(shap_ged(&Sag::default(), &kg, GedMode::Symmetric), 0);
        // SAG {(p,B)} spans p and B, which share no KG edge: one wrong edge.
        let sag = Sag::from_edges([Edge::new(0, 1)]);
        assert_eq!(shap_ged(&sag, &kg, GedMode::Symmetric), 1);
        // Adding (q,A) puts A and q in the node set, so the projection now
        // holds (p,A) and (q,B): two wrong edges plus two missing ones.
        let sag = Sag::from_edges([Edge::new(0, 1), Edge::new(1, 0)]);
        assert_eq!(shap_ged(&sag, &kg, GedMode::Symmetric), 4);
        assert_eq!(shap_ged(&sag, &kg, GedMode::OneSided), 2);
        let aligned = Sag::from_edges([Edge::new(0, 0), Edge::new(2, 1)]);
        assert_eq!(shap_ged(&aligned, &kg, GedMode::Symmetric), 0);
    }

    #[test]
    fn sag_json_round_trip_and_dot() {
        let (kg, _) = toy();
        let sag = Sag::from_edges([Edge::new(0, 1), Edge::new(2, 1)]);
        assert_eq!(Sag::from_json(&sag.to_json(&kg), &kg).unwrap(), sag);
        let dot = sag.to_dot(&kg);
        assert!(dot.contains("\"p\" -- \"B\";"));
        assert!(dot.contains("\"B\" [shape=box];"));
        assert!(dot.contains("\"r\" [shape=ellipse];"));
        assert!(Sag::from_json(r#"[["zzz", "A"]]"#, &kg).is_err());
    }

    #[test]
    fn scheme_names_parse() {
        for s in WeightScheme::ALL {
            assert_eq!(s.name().parse::<WeightScheme>().unwrap(), s);
        }
        assert!("linear".parse::<WeightScheme>().is_err());
    }
}
