//! Desk-scale tasks: synthetic detection with FCOS-style targets, losses,
//! the retraining loop, AP, and a small classification mode.

pub mod classify;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod study;
pub mod targets;
pub mod train;

pub use data::{
    generate_detection_dataset, generate_scene, read_cache, write_cache, BoxF, DatasetIndex, DatasetParams, Object,
    SyntheticScene,
};
pub use loss::{detection_loss, LossBreakdown};
pub use metrics::{average_precision, Detection, Metrics};
pub use targets::{assign_fcos_targets, DetectionTarget};
pub use train::{
    evaluate, make_batches, random_genotype, train_derived, DetectionBatch, DetectionObjective, TrainConfig,
    TrainRecord, TrainReport,
};
