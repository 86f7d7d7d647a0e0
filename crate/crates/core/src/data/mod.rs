//! Dataset files: features, annotations, class manifests and the synthetic
//! generator.

mod annotations;
mod features;
mod synthetic;

pub use annotations::{
    load_class_scores, AnnotationFile, ClassEntry, ClassManifest, ClassScore, ClassScores, LabeledSegment,
    PredictionFile, ScoredLabel, VideoEntry,
};
pub(crate) use annotations::{read_json, write_json};
pub use features::{
    decode_features, decode_features_f32, encode_features, read_features, write_features, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use synthetic::{class_label, generate, SyntheticDataset, SyntheticSpec, SyntheticVideo};
