//! Pseudo-mask generation: candidate sources, IoU suppression, union and decomposition.

mod decompose;
mod hvm;
mod mask;
mod material;
mod nms;
mod segment;
mod sources;

pub use decompose::{chebyshev_distance, decompose, interior_point};
pub use hvm::{decode_runs, encode_runs, masks_from_bytes, masks_to_bytes, read_masks, write_masks};
pub use mask::{iou, InstanceMask, MaskSet, SourceTag};
pub use material::{KMeansSegmenter, MaterialSegmenter, MATERIAL_SCORE};
pub use nms::{nms_fuse, nms_indices, rank_order, FusionConfig, PseudoTarget};
pub use segment::{OracleSegmenter, Segmenter, SequenceMemory, ORACLE_SCORE};
pub use sources::{source_material, source_rgb, source_sequence, stem, target_masks, FileSource, PseudoLabeler};
