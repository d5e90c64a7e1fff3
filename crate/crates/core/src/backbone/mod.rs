//! Transformer encoder over token grids, the projection neck, and frozen teacher features.

mod encoder;
mod features;
mod teacher;

pub use encoder::{interpolation_matrix, Encoder, EncoderConfig, ModelScale, Neck};
pub use features::{features_from_bytes, features_to_bytes, read_features, write_features, FeatureMap, Stage};
pub use teacher::{FileTeacher, TeacherConfig, TeacherProvider, ToyTeacher};
