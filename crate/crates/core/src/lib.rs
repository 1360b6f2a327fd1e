//! Part-based classification aligned with an expert knowledge graph.
//!
//! The pipeline has two trainable stages. A part detector classifies each
//! region of a scene into a part class, and the per-region probabilities are
//! aggregated into a part descriptor. A small MLP maps that descriptor to an
//! object class. Shapley attributions of the MLP are compared against the
//! knowledge graph: disagreements reweight the detector loss during training,
//! and an attribution-graph edit distance measures alignment at test time.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`). The aliases at
//! the crate root fix the scalar to `f64`, which is what the CLI and the
//! experiments use.

pub mod classify;
pub mod data;
pub mod error;
pub mod kg;
pub mod percept;
pub mod scalar;
pub mod shap;
pub mod train;
pub mod xai;

pub use error::{Error, ErrorKind, Result};
pub use kg::{AttributionMatrix, KgDecision, KnowledgeGraph};
pub use scalar::Scalar;

pub type Region = data::Region<f64>;
pub type SceneInstance = data::SceneInstance<f64>;
pub type PartDetector = percept::PartDetector<f64>;
pub type DetectionSet = percept::DetectionSet<f64>;
pub type FeatureVector = percept::FeatureVector<f64>;
pub type MlpClassifier = classify::MlpClassifier<f64>;
pub type BackgroundSet = shap::BackgroundSet<f64>;
pub type ShapMatrix = shap::ShapMatrix<f64>;
pub type RunArtifacts = train::RunArtifacts<f64>;
