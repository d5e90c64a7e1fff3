//! Pre-training, head-only adaptation, evaluation and checkpoints.

mod adapt;
mod checkpoint;
mod config;
mod gradsuite;
mod metrics;
mod model;
mod train;

pub use adapt::{adapt_head, block_majority, crop_labels, evaluate_seg, predict_tokens, AdaptConfig, Adapted, LabeledCube};
pub use checkpoint::{Checkpoint, CheckpointEntry, META_PREFIX};
pub use config::{parse_sources, TrainConfig};
pub use gradsuite::{gradient_suite, GroupReport, GRAD_TOLERANCE};
pub use metrics::MetricsReport;
pub use model::{Model, ModelConfig, Probe, Sample, StepLoss};
pub use train::{loss_log, prepare_samples, pretrain, LossRecord, Pretrained};
